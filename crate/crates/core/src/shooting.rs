//! Two-point boundary value problems for the three problem classes, solved
//! by single shooting on the unknown initial adjoint `p(0)`.
//!
//! The state and adjoint equations are integrated forward on the fixed grid
//! with the control recomputed from the adjoint at the left node of every
//! cell and held constant across the cell. The boundary defect at the final
//! time is driven to zero by a damped Levenberg-Marquardt iteration on
//! `p(0)` with central-difference Jacobians.
//!
//! The exact control laws are discontinuous, which leaves the residual flat
//! wherever every threshold is inactive and makes finite differences
//! meaningless across a switch. The solver therefore continues in the
//! smoothing width: it solves a logistic-blended problem at each `eps` of
//! the schedule, warm-starting from the previous solution, and finishes
//! with the exact law at `eps = 0`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dynamics::{expm, TimeGrid, Trajectory};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::pmp_law::{riccati_solve, Multiplier, ProblemMode, Smoothing};
use crate::verify::{check_multiplexing, evaluate_costs, hamiltonian_trace, CostBreakdown, MultiplexingReport};

/// Singular values below this mark the finite-difference Jacobian as rank
/// deficient, which is how flat regions of the reach residual show up.
const RANK_TOL: f64 = 1e-10;

/// A fully specified boundary value problem.
#[derive(Debug, Clone)]
pub struct ShootingProblem {
    ensemble: Ensemble,
    mode: ProblemMode,
    grid: TimeGrid,
    x_bar: DVector<f64>,
    x_hat: Option<DVector<f64>>,
    /// One-step adjoint propagator `e^{-A^T dt}` (reach and Mayer modes).
    adjoint_step: Option<DMatrix<f64>>,
    /// Joint running state cost (sparse LQ).
    joint_q: Option<DMatrix<f64>>,
    /// Joint terminal weight (sparse LQ and Mayer).
    joint_qhat: Option<DMatrix<f64>>,
}

impl ShootingProblem {
    pub fn new(ensemble: Ensemble, mode: ProblemMode, grid: TimeGrid) -> Result<Self> {
        let x_bar = ensemble.initial_state();
        let x_hat = ensemble.target_state();
        match mode {
            ProblemMode::Reach { .. } => {
                if x_hat.is_none() {
                    return Err(Error::InvalidConfig(
                        "reach mode needs a target state on every subsystem".into(),
                    ));
                }
                require_compact(&ensemble)?;
            }
            ProblemMode::SparseLq => {
                for (k, sub) in ensemble.subsystems().iter().enumerate() {
                    if sub.q.is_none() {
                        return Err(Error::MissingQ(format!("subsystem {} in sparse-LQ mode", k + 1)));
                    }
                    if sub.r.is_none() {
                        return Err(Error::MissingR(format!("subsystem {} in sparse-LQ mode", k + 1)));
                    }
                    if sub.qhat.is_none() {
                        return Err(Error::MissingQ(format!(
                            "subsystem {} needs a terminal weight in sparse-LQ mode",
                            k + 1
                        )));
                    }
                    if sub.action_set.is_compact() {
                        return Err(Error::ModeMismatch(format!(
                            "subsystem {} carries a bounded action set; the sparse-LQ law is unconstrained",
                            k + 1
                        )));
                    }
                }
            }
            ProblemMode::Mayer => {
                if x_hat.is_none() {
                    return Err(Error::InvalidConfig(
                        "Mayer mode needs a target state on every subsystem".into(),
                    ));
                }
                for (k, sub) in ensemble.subsystems().iter().enumerate() {
                    if sub.qhat.is_none() {
                        return Err(Error::MissingQ(format!(
                            "subsystem {} needs a terminal weight in Mayer mode",
                            k + 1
                        )));
                    }
                }
                require_compact(&ensemble)?;
            }
        }

        let adjoint_step = match mode {
            ProblemMode::SparseLq => None,
            _ => Some(expm(&(-ensemble.joint().a.transpose()), grid.step())?),
        };
        let joint_q = matches!(mode, ProblemMode::SparseLq)
            .then(|| block_diag(&ensemble, |s| s.q.as_ref().unwrap()));
        let joint_qhat = (!matches!(mode, ProblemMode::Reach { .. }))
            .then(|| block_diag(&ensemble, |s| s.qhat.as_ref().unwrap()));

        Ok(Self {
            ensemble,
            mode,
            grid,
            x_bar,
            x_hat,
            adjoint_step,
            joint_q,
            joint_qhat,
        })
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn mode(&self) -> &ProblemMode {
        &self.mode
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.x_bar
    }

    pub fn target_state(&self) -> Option<&DVector<f64>> {
        self.x_hat.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.ensemble.state_dim()
    }

    /// Boundary defect of the reach problem: `x(t_hat) - x_hat`, with the
    /// adjoint propagated in closed form.
    pub fn residual_reach(
        &self,
        p0: &DVector<f64>,
        smoothing: Smoothing,
        multiplier: Multiplier,
    ) -> Result<DVector<f64>> {
        let mode = ProblemMode::Reach { multiplier };
        let (x_end, _) = self.sweep_drift_adjoint(p0, &mode, smoothing, None)?;
        Ok(x_end - self.x_hat.as_ref().expect("validated reach data"))
    }

    /// Transversality defect of the sparse-LQ problem:
    /// `p(t_hat) + Qhat x(t_hat)`, with state and adjoint co-integrated.
    pub fn residual_lq(&self, p0: &DVector<f64>, smoothing: Smoothing) -> Result<DVector<f64>> {
        let (x_end, p_end) = self.sweep_coupled(p0, smoothing, None)?;
        Ok(p_end + self.joint_qhat.as_ref().expect("validated LQ data") * x_end)
    }

    /// Transversality defect of the Mayer problem:
    /// `p(t_hat) + Qhat (x(t_hat) - x_hat)`.
    pub fn residual_mayer(&self, p0: &DVector<f64>, smoothing: Smoothing) -> Result<DVector<f64>> {
        let (x_end, p_end) = self.sweep_drift_adjoint(p0, &ProblemMode::Mayer, smoothing, None)?;
        let miss = x_end - self.x_hat.as_ref().expect("validated Mayer data");
        Ok(p_end + self.joint_qhat.as_ref().expect("validated Mayer data") * miss)
    }

    /// Residual of this problem's own mode, with the reach multiplier
    /// overridden by `multiplier`.
    pub fn residual(
        &self,
        p0: &DVector<f64>,
        smoothing: Smoothing,
        multiplier: Multiplier,
    ) -> Result<DVector<f64>> {
        match self.mode {
            ProblemMode::Reach { .. } => self.residual_reach(p0, smoothing, multiplier),
            ProblemMode::SparseLq => self.residual_lq(p0, smoothing),
            ProblemMode::Mayer => self.residual_mayer(p0, smoothing, ),
        }
    }

    /// Integrate from `p(0) = p0` under the exact law and record the full
    /// trajectory, including the recomputed multiplexer trace and the
    /// Hamiltonian.
    pub fn assemble_trajectory(&self, p0: &DVector<f64>, multiplier: Multiplier) -> Result<Trajectory> {
        let n_nodes = self.grid.n_nodes();
        let mut record = RecordedSweep {
            x: Vec::with_capacity(n_nodes),
            p: Vec::with_capacity(n_nodes),
            u: Vec::with_capacity(n_nodes),
            mux: Vec::with_capacity(n_nodes),
        };
        let mode = self.mode_with(multiplier);
        match self.mode {
            ProblemMode::SparseLq => {
                self.sweep_coupled(p0, Smoothing::EXACT, Some(&mut record))?;
            }
            _ => {
                self.sweep_drift_adjoint(p0, &mode, Smoothing::EXACT, Some(&mut record))?;
            }
        }
        let mut traj = Trajectory {
            grid: self.grid.clone(),
            x: record.x,
            p: record.p,
            u: record.u,
            mux: record.mux,
            h: vec![0.0; n_nodes],
        };
        traj.h = hamiltonian_trace(&traj, &self.ensemble, &mode).values;
        Ok(traj)
    }

    fn mode_with(&self, multiplier: Multiplier) -> ProblemMode {
        match self.mode {
            ProblemMode::Reach { .. } => ProblemMode::Reach { multiplier },
            other => other,
        }
    }

    /// Forward sweep for the modes with an unforced adjoint (reach, Mayer):
    /// `p` advances by the cached one-step propagator, `x` by RK4 with the
    /// control frozen at the left node. Returns `(x, p)` at the final time.
    fn sweep_drift_adjoint(
        &self,
        p0: &DVector<f64>,
        mode: &ProblemMode,
        smoothing: Smoothing,
        mut record: Option<&mut RecordedSweep>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let step = self.adjoint_step.as_ref().expect("cached for this mode");
        let a = &self.ensemble.joint().a;
        let b = &self.ensemble.joint().b;
        let h = self.grid.step();
        let mut x = self.x_bar.clone();
        let mut p = p0.clone();
        ensure_finite(&x, 0, "state")?;
        ensure_finite(&p, 0, "adjoint")?;
        for i in 0..self.grid.n_steps() {
            let (u, mux) = self.ensemble.joint_control(&p, mode, smoothing)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(&x, &p, &u, mux);
            }
            let bu = b * &u;
            let f = |x: &DVector<f64>| a * x + &bu;
            let k1 = f(&x);
            let k2 = f(&(&x + &k1 * (0.5 * h)));
            let k3 = f(&(&x + &k2 * (0.5 * h)));
            let k4 = f(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            p = step * p;
            ensure_finite(&x, i + 1, "state")?;
            ensure_finite(&p, i + 1, "adjoint")?;
        }
        if let Some(rec) = record.as_deref_mut() {
            let (u, mux) = self.ensemble.joint_control(&p, mode, smoothing)?;
            rec.push(&x, &p, &u, mux);
        }
        Ok((x, p))
    }

    /// Forward sweep for sparse LQ: the adjoint carries the forcing `Q x`,
    /// so `x` and `p` advance together in one RK4 step per cell.
    fn sweep_coupled(
        &self,
        p0: &DVector<f64>,
        smoothing: Smoothing,
        mut record: Option<&mut RecordedSweep>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let a = &self.ensemble.joint().a;
        let b = &self.ensemble.joint().b;
        let q = self.joint_q.as_ref().expect("validated LQ data");
        let at = a.transpose();
        let h = self.grid.step();
        let mut x = self.x_bar.clone();
        let mut p = p0.clone();
        ensure_finite(&x, 0, "state")?;
        ensure_finite(&p, 0, "adjoint")?;
        let mode = ProblemMode::SparseLq;
        for i in 0..self.grid.n_steps() {
            let (u, mux) = self.ensemble.joint_control(&p, &mode, smoothing)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(&x, &p, &u, mux);
            }
            let bu = b * &u;
            let fx = |x: &DVector<f64>| a * x + &bu;
            let fp = |x: &DVector<f64>, p: &DVector<f64>| q * x - &at * p;
            let kx1 = fx(&x);
            let kp1 = fp(&x, &p);
            let x2 = &x + &kx1 * (0.5 * h);
            let p2 = &p + &kp1 * (0.5 * h);
            let kx2 = fx(&x2);
            let kp2 = fp(&x2, &p2);
            let x3 = &x + &kx2 * (0.5 * h);
            let p3 = &p + &kp2 * (0.5 * h);
            let kx3 = fx(&x3);
            let kp3 = fp(&x3, &p3);
            let x4 = &x + &kx3 * h;
            let p4 = &p + &kp3 * h;
            let kx4 = fx(&x4);
            let kp4 = fp(&x4, &p4);
            x += (kx1 + kx2 * 2.0 + kx3 * 2.0 + kx4) * (h / 6.0);
            p += (kp1 + kp2 * 2.0 + kp3 * 2.0 + kp4) * (h / 6.0);
            ensure_finite(&x, i + 1, "state")?;
            ensure_finite(&p, i + 1, "adjoint")?;
        }
        if let Some(rec) = record.as_deref_mut() {
            let (u, mux) = self.ensemble.joint_control(&p, &mode, smoothing)?;
            rec.push(&x, &p, &u, mux);
        }
        Ok((x, p))
    }
}

fn require_compact(ensemble: &Ensemble) -> Result<()> {
    for (k, sub) in ensemble.subsystems().iter().enumerate() {
        if !sub.action_set.is_compact() {
            return Err(Error::UnboundedActionSet(format!(
                "subsystem {} in a mode that requires compact action sets",
                k + 1
            )));
        }
    }
    Ok(())
}

fn block_diag<'a, F>(ensemble: &'a Ensemble, pick: F) -> DMatrix<f64>
where
    F: Fn(&'a crate::ensemble::LinearSubsystem) -> &'a DMatrix<f64>,
{
    let d = ensemble.state_dim();
    let mut out = DMatrix::zeros(d, d);
    for (k, sub) in ensemble.subsystems().iter().enumerate() {
        let r = &ensemble.joint().state_offsets[k];
        out.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(pick(sub));
    }
    out
}

fn ensure_finite(v: &DVector<f64>, node: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState {
            node,
            what: what.into(),
        })
    }
}

struct RecordedSweep {
    x: Vec<DVector<f64>>,
    p: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    mux: Vec<usize>,
}

impl RecordedSweep {
    fn push(&mut self, x: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>, mux: usize) {
        self.x.push(x.clone());
        self.p.push(p.clone());
        self.u.push(u.clone());
        self.mux.push(mux);
    }
}

/// Central-difference Jacobian of `residual` at `p0`, columnwise, with the
/// step scaled by `max(1, |p0_j|)`. Columns are evaluated in parallel.
pub fn fd_jacobian<F>(residual: &F, p0: &DVector<f64>, fd_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let d = p0.len();
    let columns: Result<Vec<DVector<f64>>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let h = fd_step * p0[j].abs().max(1.0);
            let mut plus = p0.clone();
            plus[j] += h;
            let mut minus = p0.clone();
            minus[j] -= h;
            let tag = |e: Error| match e {
                Error::NonFiniteState { node, what } => Error::NonFiniteState {
                    node,
                    what: format!("{what}, differencing column {j}"),
                },
                other => other,
            };
            let rp = residual(&plus).map_err(tag)?;
            let rm = residual(&minus).map_err(tag)?;
            Ok((rp - rm) / (2.0 * h))
        })
        .collect();
    let columns = columns?;
    let rows = columns.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(rows, d, |i, j| columns[j][i]))
}

/// Solver settings for [`lm_solve`] and [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Initial guess for `p(0)`; when absent a mode-specific default is
    /// derived from the problem data.
    pub p0_init: Option<DVector<f64>>,
    /// Iteration budget per start point and continuation stage.
    pub max_iter: usize,
    /// Convergence threshold on the residual sup norm.
    pub residual_tol: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub lm_damping_init: f64,
    /// Strictly decreasing smoothing widths ending at the exact law (0).
    pub continuation_eps_schedule: Vec<f64>,
    /// Number of random restarts after a stall.
    pub multistart: usize,
    pub rng_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            p0_init: None,
            max_iter: 60,
            residual_tol: 5e-4,
            fd_step: 1e-6,
            lm_damping_init: 1e-3,
            continuation_eps_schedule: vec![1e-1, 1e-2, 1e-3, 0.0],
            multistart: 8,
            rng_seed: 42,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if let Some(p0) = &self.p0_init {
            if p0.len() != state_dim {
                return Err(Error::DimensionMismatch(format!(
                    "p0_init of length {} for state dimension {state_dim}",
                    p0.len()
                )));
            }
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::InvalidConfig("residual_tol must be positive".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidConfig("fd_step must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        let sched = &self.continuation_eps_schedule;
        if sched.is_empty() || *sched.last().unwrap() != 0.0 {
            return Err(Error::InvalidConfig(
                "eps schedule must be non-empty and end at 0".into(),
            ));
        }
        if sched.windows(2).any(|w| !(w[0] > w[1])) || sched.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::InvalidConfig(
                "eps schedule must be strictly decreasing and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one Levenberg-Marquardt run.
#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub p: DVector<f64>,
    /// Residual sup norm at `p`.
    pub residual_inf: f64,
    /// Accepted steps across all starts.
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
}

/// Damped Levenberg-Marquardt with finite-difference Jacobians.
///
/// Declares convergence when the residual sup norm drops to
/// `config.residual_tol`. On a stall (no accepted step, exhausted budget, or
/// a rank-deficient Jacobian) the iteration restarts from a Gaussian sample
/// around `start` whose scale grows tenfold per restart; a rank-deficient
/// Jacobian instead perturbs the current iterate multiplicatively, since
/// flat reach residuals carry no useful direction. Returns the best iterate
/// seen with `converged = false` when every start stalls.
pub fn lm_solve<F>(
    residual: &F,
    start: &DVector<f64>,
    config: &SolverConfig,
    rng: &mut ChaCha8Rng,
) -> LmOutcome
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    lm_run(residual, start, config, rng, config.residual_tol, config.multistart)
}

/// Like [`lm_solve`] but with an explicit stop tolerance and restart budget.
/// Continuation stages stop far below the user tolerance so that the warm
/// start handed to the next (less smooth) stage carries no solver slack.
fn lm_run<F>(
    residual: &F,
    start: &DVector<f64>,
    config: &SolverConfig,
    rng: &mut ChaCha8Rng,
    stop_tol: f64,
    multistart: usize,
) -> LmOutcome
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let d = start.len();
    let mut best_p = start.clone();
    let mut best_norm = f64::INFINITY;
    let mut iterations = 0usize;
    let mut restarts = 0usize;
    let mut p = start.clone();

    loop {
        let mut mu = config.lm_damping_init;
        let mut flat = false;
        let mut r = residual(&p).ok();

        'iters: while let Some(r_cur) = r.as_ref() {
            let rn = r_cur.amax();
            if rn < best_norm {
                best_norm = rn;
                best_p = p.clone();
            }
            if rn <= stop_tol {
                return LmOutcome {
                    p,
                    residual_inf: rn,
                    iterations,
                    restarts,
                    converged: true,
                };
            }
            if iterations >= config.max_iter * (restarts + 1) {
                break 'iters;
            }
            let jac = match fd_jacobian(residual, &p, config.fd_step) {
                Ok(j) => j,
                Err(_) => break 'iters,
            };
            let min_sv = jac
                .clone()
                .svd(false, false)
                .singular_values
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if min_sv < RANK_TOL {
                flat = true;
                break 'iters;
            }
            let jt = jac.transpose();
            let jtj = &jt * &jac;
            let grad = &jt * r_cur;
            let mut accepted = false;
            for _ in 0..30 {
                let mut lhs = jtj.clone();
                for i in 0..d {
                    lhs[(i, i)] += mu * jtj[(i, i)].max(1e-12);
                }
                let delta = match lhs.cholesky() {
                    Some(ch) => ch.solve(&(-&grad)),
                    None => {
                        mu *= 4.0;
                        continue;
                    }
                };
                let trial = &p + &delta;
                match residual(&trial) {
                    Ok(rt) if rt.norm() < r_cur.norm() => {
                        p = trial;
                        r = Some(rt);
                        mu = (mu / 3.0).max(1e-15);
                        iterations += 1;
                        accepted = true;
                        break;
                    }
                    _ => {
                        mu *= 4.0;
                        if mu > 1e14 {
                            break;
                        }
                    }
                }
            }
            if !accepted {
                break 'iters;
            }
        }

        if restarts >= multistart {
            return LmOutcome {
                p: best_p,
                residual_inf: best_norm,
                iterations,
                restarts,
                converged: false,
            };
        }
        restarts += 1;
        p = if flat && p.amax() > 1e-12 {
            // multiplicative kick out of the flat region
            let noise: DVector<f64> =
                DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            p.component_mul(&noise.map(|g: f64| 1.0 + 0.5 * g))
        } else {
            let scale = 0.5 * (1.0 + start.amax()) * 10f64.powi(restarts as i32 - 1);
            let noise: DVector<f64> =
                DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            start + noise * scale
        };
    }
}

/// Convergence record of one continuation stage.
#[derive(Debug, Clone)]
pub struct StageStats {
    pub eps: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub residual_norm: f64,
}

/// Full solver output: convergence data, the trajectory recomputed under
/// the exact law, cost and feasibility summaries, and per-stage provenance.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub converged: bool,
    /// Residual sup norm at the returned extremal, under the exact law.
    pub residual_norm: f64,
    /// Accepted steps summed over all stages.
    pub iterations: usize,
    /// Abnormal-multiplier flag actually used (reach mode may fall back
    /// from 1 to 0).
    pub eta_used: u8,
    pub trajectory: Trajectory,
    pub costs: CostBreakdown,
    /// Relative Hamiltonian spread away from switches.
    pub hamiltonian_spread: f64,
    pub feasibility: MultiplexingReport,
    pub stages: Vec<StageStats>,
    pub seed: u64,
}

/// Solve the boundary value problem with eps-continuation and assemble the
/// report. For reach problems under the normal multiplier, a failed
/// continuation is retried once with the abnormal law.
pub fn solve(problem: &ShootingProblem, config: &SolverConfig) -> Result<SolveReport> {
    config.validate(problem.state_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let multiplier = problem.mode().multiplier();
    let (mut outcome, mut stages) = run_continuation(problem, config, multiplier, &mut rng)?;
    let mut used = multiplier;
    if !outcome.converged
        && matches!(
            problem.mode(),
            ProblemMode::Reach {
                multiplier: Multiplier::Normal
            }
        )
    {
        let (retry, retry_stages) = run_continuation(problem, config, Multiplier::Abnormal, &mut rng)?;
        if retry.converged || retry.residual_inf < outcome.residual_inf {
            outcome = retry;
            stages = retry_stages;
            used = Multiplier::Abnormal;
        }
    }

    let trajectory = problem.assemble_trajectory(&outcome.p, used)?;
    let mode_used = problem.mode_with(used);
    let costs = evaluate_costs(&trajectory, problem.ensemble(), &mode_used, problem.target_state());
    let feasibility = check_multiplexing(&trajectory, problem.ensemble(), crate::verify::ZERO_TOL);
    let trace = hamiltonian_trace(&trajectory, problem.ensemble(), &mode_used);

    Ok(SolveReport {
        converged: outcome.converged,
        residual_norm: outcome.residual_inf,
        iterations: stages.iter().map(|s| s.iterations).sum(),
        eta_used: used.as_u8(),
        trajectory,
        costs,
        hamiltonian_spread: trace.spread_rel_away_from_switches,
        feasibility,
        stages,
        seed: config.rng_seed,
    })
}

fn run_continuation(
    problem: &ShootingProblem,
    config: &SolverConfig,
    multiplier: Multiplier,
    rng: &mut ChaCha8Rng,
) -> Result<(LmOutcome, Vec<StageStats>)> {
    let mut start = match &config.p0_init {
        Some(p0) => p0.clone(),
        None => default_initial_adjoint(problem)?,
    };
    // smoothed stages stop two decades below the user tolerance so the warm
    // start handed to the exact law carries no solver slack
    let stage_tol = (config.residual_tol * 1e-2).max(1e-12);
    let mut stages = Vec::with_capacity(config.continuation_eps_schedule.len());
    let mut outcome = None;
    for &eps in &config.continuation_eps_schedule {
        let run = run_stage(problem, config, multiplier, rng, eps, &start, stage_tol, config.multistart)?;
        stages.push(stage_stats(config, eps, &run));
        start = run.p.clone();
        outcome = Some(run);
    }
    let mut outcome = outcome.expect("schedule validated non-empty");

    // Under the exact law the residual is locally constant in p0 between
    // node flips, so the final stage only converges when the last smoothed
    // stage lands inside the tolerance already. If it did not, refine the
    // continuation tail: push eps down a decade at a time and retry.
    if !outcome.converged {
        let mut eps = config
            .continuation_eps_schedule
            .iter()
            .rev()
            .find(|e| **e > 0.0)
            .copied()
            .unwrap_or(1e-3);
        for _ in 0..4 {
            eps /= 10.0;
            let refine = run_stage(problem, config, multiplier, rng, eps, &start, stage_tol, 0)?;
            stages.push(stage_stats(config, eps, &refine));
            start = refine.p.clone();
            let exact = run_stage(problem, config, multiplier, rng, 0.0, &start, config.residual_tol, 0)?;
            let done = exact.converged;
            stages.push(stage_stats(config, 0.0, &exact));
            if exact.residual_inf < outcome.residual_inf {
                start = exact.p.clone();
                outcome = exact;
            }
            if done {
                break;
            }
        }
    }
    Ok((outcome, stages))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    problem: &ShootingProblem,
    config: &SolverConfig,
    multiplier: Multiplier,
    rng: &mut ChaCha8Rng,
    eps: f64,
    start: &DVector<f64>,
    stop_tol: f64,
    multistart: usize,
) -> Result<LmOutcome> {
    let smoothing = Smoothing::new(eps)?;
    let residual = |p: &DVector<f64>| problem.residual(p, smoothing, multiplier);
    Ok(lm_run(&residual, start, config, rng, stop_tol, multistart))
}

fn stage_stats(config: &SolverConfig, eps: f64, run: &LmOutcome) -> StageStats {
    StageStats {
        eps,
        iterations: run.iterations,
        restarts: run.restarts,
        converged: run.residual_inf <= config.residual_tol,
        residual_norm: run.residual_inf,
    }
}

/// Mode-specific default for the unknown initial adjoint.
///
/// Sparse LQ warm-starts from the unmultiplexed Riccati costate
/// `p(0) = -P(0) x(0)`, which is exact in the limit of vanishing sparsity
/// weights. Mayer and reach lift the free-drift terminal miss back to time
/// zero through the adjoint flow.
fn default_initial_adjoint(problem: &ShootingProblem) -> Result<DVector<f64>> {
    let ens = problem.ensemble();
    let grid = problem.grid();
    match problem.mode() {
        ProblemMode::SparseLq => {
            let mut parts = Vec::with_capacity(ens.len());
            for sub in ens.subsystems() {
                match riccati_solve(sub, grid) {
                    Ok(sol) => parts.push(-(&sol.p[0] * &sub.x0)),
                    Err(_) => parts.push(DVector::zeros(sub.state_dim())),
                }
            }
            Ok(crate::ensemble::stack(&parts))
        }
        ProblemMode::Mayer => {
            let a = &ens.joint().a;
            let drift = expm(a, grid.t_hat())? * problem.initial_state();
            let miss = &drift - problem.target_state().expect("validated Mayer data");
            let p_end = -(problem.joint_qhat.as_ref().expect("validated Mayer data") * miss);
            Ok(expm(&a.transpose(), grid.t_hat())? * p_end)
        }
        ProblemMode::Reach { .. } => {
            let a = &ens.joint().a;
            let drift = expm(a, grid.t_hat())? * problem.initial_state();
            let miss = problem.target_state().expect("validated reach data") - drift;
            Ok(expm(&a.transpose(), grid.t_hat())? * miss)
        }
    }
}
