//! Cost functionals, sparsity metrics, feasibility checks, and Hamiltonian
//! traces used in reports and tests.

use nalgebra::DVector;

use crate::dynamics::{TimeGrid, Trajectory};
use crate::ensemble::Ensemble;
use crate::pmp_law::{Multiplier, ProblemMode};

/// Default tolerance below which a control sample counts as zero.
pub const ZERO_TOL: f64 = 1e-9;

/// L0 norm of a node-sampled control: the measure of the cells whose
/// left-node sample is nonzero. Left-node attribution matches the
/// integrator's control sampling, so this is the exact support measure of
/// the simulated piecewise-constant control.
pub fn l0_norm(samples: &[DVector<f64>], grid: &TimeGrid, zero_tol: f64) -> f64 {
    assert_eq!(samples.len(), grid.n_nodes(), "one control sample per node");
    let active = (0..grid.n_steps())
        .filter(|&i| samples[i].amax() > zero_tol)
        .count();
    active as f64 * grid.step()
}

/// Outcome of the multiplexing feasibility check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiplexingReport {
    pub pass: bool,
    /// Nodes where more than one block is nonzero or a nonzero block
    /// disagrees with the recorded multiplexer index.
    pub violations: Vec<usize>,
}

/// Check that at most one subsystem's control block is nonzero at every node
/// and that the nonzero block (if any) matches the recorded index.
pub fn check_multiplexing(traj: &Trajectory, ens: &Ensemble, zero_tol: f64) -> MultiplexingReport {
    let joint = ens.joint();
    let mut violations = Vec::new();
    for (i, u) in traj.u.iter().enumerate() {
        let nonzero: Vec<usize> = joint
            .control_offsets
            .iter()
            .enumerate()
            .filter(|(_, r)| u.rows(r.start, r.len()).amax() > zero_tol)
            .map(|(k, _)| k + 1)
            .collect();
        let ok = match nonzero.as_slice() {
            [] => true,
            [k] => traj.mux[i] == *k,
            _ => false,
        };
        if !ok {
            violations.push(i);
        }
    }
    MultiplexingReport {
        pass: violations.is_empty(),
        violations,
    }
}

/// Nodes whose control block violates its action set (tolerance on box
/// bounds and finite-point matching).
pub fn check_action_sets(traj: &Trajectory, ens: &Ensemble, tol: f64) -> Vec<usize> {
    let joint = ens.joint();
    let mut violations = Vec::new();
    for (i, u) in traj.u.iter().enumerate() {
        for (k, r) in joint.control_offsets.iter().enumerate() {
            let block = u.rows(r.start, r.len()).into_owned();
            if !ens.subsystems()[k].action_set.contains(&block, tol) {
                violations.push(i);
                break;
            }
        }
    }
    violations
}

/// Hamiltonian trace along a trajectory with spread statistics.
#[derive(Debug, Clone)]
pub struct HamiltonianTrace {
    pub values: Vec<f64>,
    pub median: f64,
    /// Max deviation from the median over all nodes.
    pub spread_raw: f64,
    /// `spread_raw / (1 + |median|)`.
    pub spread_rel: f64,
    /// Same statistics with the two nodes on each side of every detected
    /// switch excluded.
    pub spread_raw_away_from_switches: f64,
    pub spread_rel_away_from_switches: f64,
    /// Nodes where the multiplexer index changes.
    pub switch_nodes: Vec<usize>,
}

/// Evaluate the mode's Hamiltonian at every node and report its constancy.
///
/// The maximum principle asserts the Hamiltonian is constant along an
/// extremal almost everywhere; node-sampled controls smear each switch over
/// one cell, so the statistic is also reported with a two-node buffer around
/// every detected switch.
pub fn hamiltonian_trace(traj: &Trajectory, ens: &Ensemble, mode: &ProblemMode) -> HamiltonianTrace {
    let joint = ens.joint();
    let n_nodes = traj.x.len();
    let mut values = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let x = &traj.x[i];
        let p = &traj.p[i];
        let u = &traj.u[i];
        let drift = p.dot(&(&joint.a * x + &joint.b * u));
        let mut h = drift;
        let indicator_weight = match mode {
            ProblemMode::Reach {
                multiplier: Multiplier::Abnormal,
            } => 0.0,
            _ => 1.0,
        };
        if indicator_weight > 0.0 {
            for (k, r) in joint.control_offsets.iter().enumerate() {
                if u.rows(r.start, r.len()).amax() <= ZERO_TOL {
                    h += ens.subsystems()[k].lambda;
                }
            }
        }
        if matches!(mode, ProblemMode::SparseLq) {
            for (k, sub) in ens.subsystems().iter().enumerate() {
                let rs = &joint.state_offsets[k];
                let rc = &joint.control_offsets[k];
                let xk = x.rows(rs.start, rs.len());
                let uk = u.rows(rc.start, rc.len());
                let q = sub.q.as_ref().expect("validated LQ data");
                let r = sub.r.as_ref().expect("validated LQ data");
                h -= 0.5 * (xk.dot(&(q * xk)) + uk.dot(&(r * uk)));
            }
        }
        values.push(h);
    }

    let switch_nodes: Vec<usize> = (1..n_nodes).filter(|&i| traj.mux[i] != traj.mux[i - 1]).collect();
    let mut excluded = vec![false; n_nodes];
    for &s in &switch_nodes {
        let lo = s.saturating_sub(2);
        let hi = (s + 2).min(n_nodes - 1);
        for e in &mut excluded[lo..=hi] {
            *e = true;
        }
    }

    let (median, spread_raw, spread_rel) = spread_stats(values.iter().copied());
    let kept: Vec<f64> = values
        .iter()
        .zip(&excluded)
        .filter(|(_, &e)| !e)
        .map(|(v, _)| *v)
        .collect();
    let (_, raw_away, rel_away) = if kept.is_empty() {
        (median, spread_raw, spread_rel)
    } else {
        spread_stats(kept.into_iter())
    };

    HamiltonianTrace {
        values,
        median,
        spread_raw,
        spread_rel,
        spread_raw_away_from_switches: raw_away,
        spread_rel_away_from_switches: rel_away,
        switch_nodes,
    }
}

fn spread_stats(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let mut sorted: Vec<f64> = values.collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let spread = sorted
        .iter()
        .map(|v| (v - median).abs())
        .fold(0.0, f64::max);
    (median, spread, spread / (1.0 + median.abs()))
}

/// Cost components of a trajectory.
///
/// `total` is the mode's objective shifted by the constant
/// `lambda_total * t_hat`, which turns the negative indicator integral into
/// the nonnegative weighted L0 term without changing minimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    /// Support measure of each subsystem's control, in seconds.
    pub l0_per_subsystem: Vec<f64>,
    /// Sum of `lambda_k * l0_k`.
    pub weighted_l0: f64,
    /// Trapezoidal quadrature of the quadratic running cost (sparse LQ).
    pub quadratic_running: f64,
    /// Terminal cost at the last node.
    pub terminal: f64,
    pub total: f64,
}

/// Evaluate all cost components. `x_hat` is the stacked target used by the
/// Mayer terminal cost.
pub fn evaluate_costs(
    traj: &Trajectory,
    ens: &Ensemble,
    mode: &ProblemMode,
    x_hat: Option<&DVector<f64>>,
) -> CostBreakdown {
    let joint = ens.joint();
    let grid = &traj.grid;
    let l0_per_subsystem: Vec<f64> = (0..ens.len())
        .map(|k| l0_norm(&traj.subsystem_controls(joint, k), grid, ZERO_TOL))
        .collect();
    let weighted_l0 = ens
        .subsystems()
        .iter()
        .zip(&l0_per_subsystem)
        .map(|(s, l)| s.lambda * l)
        .sum();

    let quadratic_running = match mode {
        ProblemMode::SparseLq => {
            let integrand: Vec<f64> = (0..traj.x.len())
                .map(|i| {
                    let mut v = 0.0;
                    for (k, sub) in ens.subsystems().iter().enumerate() {
                        let rs = &joint.state_offsets[k];
                        let rc = &joint.control_offsets[k];
                        let xk = traj.x[i].rows(rs.start, rs.len());
                        let uk = traj.u[i].rows(rc.start, rc.len());
                        let q = sub.q.as_ref().expect("validated LQ data");
                        let r = sub.r.as_ref().expect("validated LQ data");
                        v += 0.5 * (xk.dot(&(q * xk)) + uk.dot(&(r * uk)));
                    }
                    v
                })
                .collect();
            let h = grid.step();
            let mut acc = 0.0;
            for i in 0..grid.n_steps() {
                acc += 0.5 * h * (integrand[i] + integrand[i + 1]);
            }
            acc
        }
        _ => 0.0,
    };

    let x_final = &traj.x[traj.x.len() - 1];
    let terminal = match mode {
        ProblemMode::Reach { .. } => 0.0,
        ProblemMode::SparseLq => {
            let mut v = 0.0;
            for (k, sub) in ens.subsystems().iter().enumerate() {
                let rs = &joint.state_offsets[k];
                let xk = x_final.rows(rs.start, rs.len());
                let qhat = sub.qhat.as_ref().expect("validated LQ data");
                v += 0.5 * xk.dot(&(qhat * xk));
            }
            v
        }
        ProblemMode::Mayer => {
            let x_hat = x_hat.expect("Mayer terminal cost needs a target");
            let miss = x_final - x_hat;
            let mut v = 0.0;
            for (k, sub) in ens.subsystems().iter().enumerate() {
                let rs = &joint.state_offsets[k];
                let mk = miss.rows(rs.start, rs.len());
                let qhat = sub.qhat.as_ref().expect("validated Mayer data");
                v += 0.5 * mk.dot(&(qhat * mk));
            }
            v
        }
    };

    let total = match mode {
        ProblemMode::Reach { .. } => weighted_l0,
        ProblemMode::SparseLq => weighted_l0 + quadratic_running + terminal,
        ProblemMode::Mayer => weighted_l0 + terminal,
    };

    CostBreakdown {
        l0_per_subsystem,
        weighted_l0,
        quadratic_running,
        terminal,
        total,
    }
}
