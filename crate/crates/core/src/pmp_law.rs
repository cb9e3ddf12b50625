//! Pointwise Hamiltonian-maximizing control laws and multiplexer selection
//! for the three problem classes, plus the classical finite-horizon Riccati
//! baseline for unmultiplexed LQ control.
//!
//! All laws share one shape. Per subsystem `k` the adjoint block `p_k`
//! induces a candidate action and a score:
//!
//! * reach / Mayer: the candidate maximizes `<B_k^T p_k, v>` over the
//!   (compact) action set; it is taken when that maximum exceeds the
//!   sparsity weight `lambda_k`, otherwise the control is zero. The score
//!   is `lambda_others_k + max` on the active branch and `lambda_total`
//!   otherwise.
//! * sparse LQ: the candidate is `R_k^{-1} B_k^T p_k`, taken when the
//!   weighted norm `|p_k|^2_{B R^{-1} B^T}` exceeds `2 lambda_k`; the score
//!   is `lambda_others_k + |p_k|^2 / 2` on the active branch and
//!   `lambda_total` otherwise.
//!
//! The multiplexer picks the subsystem with the largest score; all other
//! control blocks are zero. At threshold equality both the zero and the
//! nonzero action maximize the pointwise map; we break the tie toward zero,
//! which favors sparsity and only matters on a measure-zero set of times.
//!
//! The hard thresholds make shooting residuals piecewise constant in flat
//! regions, so a positive smoothing width `eps` replaces the on/off step
//! with a logistic ramp on the score margin during continuation. Only the
//! selected block is ever nonzero, so the multiplexing constraint holds for
//! every `eps`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::TimeGrid;
use crate::ensemble::{Ensemble, LinearSubsystem};
use crate::error::{Error, Result};

/// Abnormal multiplier of the maximum principle. `Normal` weights the cost
/// (eta = 1); `Abnormal` ignores it (eta = 0), which can occur in the reach
/// problem when the boundary constraints alone pin the solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Multiplier {
    Normal,
    Abnormal,
}

impl Multiplier {
    pub fn as_u8(self) -> u8 {
        match self {
            Multiplier::Normal => 1,
            Multiplier::Abnormal => 0,
        }
    }
}

/// Problem class. Sparse LQ and Mayer are always normal; only the reach
/// problem carries the abnormal-multiplier branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemMode {
    Reach { multiplier: Multiplier },
    SparseLq,
    Mayer,
}

impl ProblemMode {
    /// The multiplier in force for this mode.
    pub fn multiplier(&self) -> Multiplier {
        match self {
            ProblemMode::Reach { multiplier } => *multiplier,
            _ => Multiplier::Normal,
        }
    }
}

/// Width of the logistic blend replacing the hard on/off threshold.
/// `eps = 0` is the exact discontinuous law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing {
    eps: f64,
}

impl Smoothing {
    /// The exact law, no blending.
    pub const EXACT: Smoothing = Smoothing { eps: 0.0 };

    pub fn new(eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!("smoothing width {eps}")));
        }
        Ok(Self { eps })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_exact(&self) -> bool {
        self.eps == 0.0
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `eps * ln(1 + exp(m / eps))`: a smooth, monotone upper bound of
/// `max(m, 0)` that collapses onto it as `eps -> 0`.
fn softplus(m: f64, eps: f64) -> f64 {
    let x = m / eps;
    eps * (x.max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Smallest index (1-based) attaining the maximum score, or 0 when the
/// maximum equals `inactive_level`, i.e. every subsystem sits on the
/// zero-control branch.
pub fn select_multiplexer(scores: &[f64], inactive_level: Option<f64>) -> usize {
    assert!(!scores.is_empty(), "empty score vector");
    let mut best = 0usize;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = k;
        }
    }
    if let Some(level) = inactive_level {
        if scores[best] <= level {
            return 0;
        }
    }
    best + 1
}

impl Ensemble {
    /// Reach-mode control law for subsystem `k` (Theorem-level law; also the
    /// Mayer law under a normal multiplier).
    pub fn reach_control(
        &self,
        k: usize,
        p_k: &DVector<f64>,
        multiplier: Multiplier,
        smoothing: Smoothing,
    ) -> Result<DVector<f64>> {
        let sub = &self.subsystems()[k];
        let c = sub.b.transpose() * p_k;
        let (mx, vstar) = sub.action_set.linear_max(&c).ok_or_else(|| {
            Error::UnboundedActionSet(format!("subsystem {} in reach/Mayer mode", k + 1))
        })?;
        match multiplier {
            Multiplier::Abnormal => Ok(vstar),
            Multiplier::Normal => {
                if smoothing.is_exact() {
                    if mx > sub.lambda {
                        Ok(vstar)
                    } else {
                        Ok(DVector::zeros(vstar.len()))
                    }
                } else {
                    let s = logistic((mx - sub.lambda) / smoothing.eps());
                    Ok(sub.action_set.clamp(vstar * s))
                }
            }
        }
    }

    /// Reach-mode selector score for subsystem `k`.
    pub fn reach_score(&self, k: usize, p_k: &DVector<f64>, multiplier: Multiplier) -> Result<f64> {
        let sub = &self.subsystems()[k];
        let c = sub.b.transpose() * p_k;
        let (mx, _) = sub.action_set.linear_max(&c).ok_or_else(|| {
            Error::UnboundedActionSet(format!("subsystem {} in reach/Mayer mode", k + 1))
        })?;
        Ok(match multiplier {
            Multiplier::Abnormal => mx,
            Multiplier::Normal => {
                if mx >= sub.lambda {
                    self.joint().lambda_others[k] + mx
                } else {
                    self.joint().lambda_total
                }
            }
        })
    }

    /// Sparse-LQ control law for subsystem `k`.
    pub fn lq_control(&self, k: usize, p_k: &DVector<f64>, smoothing: Smoothing) -> Result<DVector<f64>> {
        let sub = &self.subsystems()[k];
        let r_inv = self
            .r_inverse(k)
            .ok_or_else(|| Error::MissingR(format!("subsystem {} has no R", k + 1)))?;
        let w = sub.b.transpose() * p_k;
        let candidate = r_inv * &w;
        let quad = w.dot(&candidate); // |p_k|^2 weighted by B R^{-1} B^T
        if smoothing.is_exact() {
            if quad > 2.0 * sub.lambda {
                Ok(candidate)
            } else {
                Ok(DVector::zeros(w.len()))
            }
        } else {
            let s = logistic((quad - 2.0 * sub.lambda) / smoothing.eps());
            Ok(candidate * s)
        }
    }

    /// Sparse-LQ selector score for subsystem `k`.
    pub fn lq_score(&self, k: usize, p_k: &DVector<f64>) -> Result<f64> {
        let sub = &self.subsystems()[k];
        let r_inv = self
            .r_inverse(k)
            .ok_or_else(|| Error::MissingR(format!("subsystem {} has no R", k + 1)))?;
        let w = sub.b.transpose() * p_k;
        let quad = w.dot(&(r_inv * &w));
        Ok(if quad >= 2.0 * sub.lambda {
            self.joint().lambda_others[k] + 0.5 * quad
        } else {
            self.joint().lambda_total
        })
    }

    /// Mayer control law; identical to the normal reach law (only the
    /// boundary conditions of the two problems differ).
    pub fn mayer_control(&self, k: usize, p_k: &DVector<f64>, smoothing: Smoothing) -> Result<DVector<f64>> {
        self.reach_control(k, p_k, Multiplier::Normal, smoothing)
    }

    /// Mayer selector score; identical to the normal reach score.
    pub fn mayer_score(&self, k: usize, p_k: &DVector<f64>) -> Result<f64> {
        self.reach_score(k, p_k, Multiplier::Normal)
    }

    /// Evaluate the joint control at adjoint `p`: compute every subsystem's
    /// score, pick the multiplexer index, fill that block from the
    /// subsystem's law, and zero the rest. Returns the control and the
    /// active index (0 when all controls are zero).
    ///
    /// With `eps > 0` the selected block uses the blended law, and selection
    /// uses scores blended by the same margin so that near-threshold
    /// subsystems stay visible to the root-finder; non-selected blocks are
    /// exactly zero for every `eps`.
    pub fn joint_control(
        &self,
        p: &DVector<f64>,
        mode: &ProblemMode,
        smoothing: Smoothing,
    ) -> Result<(DVector<f64>, usize)> {
        let joint = self.joint();
        if p.len() != joint.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "adjoint of length {} for state dimension {}",
                p.len(),
                joint.state_dim()
            )));
        }
        let n = self.len();
        let mut scores = Vec::with_capacity(n);
        for k in 0..n {
            let r = &joint.state_offsets[k];
            let p_k = p.rows(r.start, r.len()).into_owned();
            scores.push(self.block_score(k, &p_k, mode, smoothing)?);
        }
        let inactive = match (mode, smoothing.is_exact()) {
            (ProblemMode::Reach { multiplier: Multiplier::Abnormal }, _) => None,
            (_, true) => Some(joint.lambda_total),
            (_, false) => None,
        };
        let pick = select_multiplexer(&scores, inactive);
        let mut u = DVector::zeros(joint.control_dim());
        if pick == 0 {
            return Ok((u, 0));
        }
        let k = pick - 1;
        let r = &joint.state_offsets[k];
        let p_k = p.rows(r.start, r.len()).into_owned();
        let block = match mode {
            ProblemMode::Reach { multiplier } => self.reach_control(k, &p_k, *multiplier, smoothing)?,
            ProblemMode::SparseLq => self.lq_control(k, &p_k, smoothing)?,
            ProblemMode::Mayer => self.mayer_control(k, &p_k, smoothing)?,
        };
        if block.amax() == 0.0 {
            return Ok((u, 0));
        }
        let c = &joint.control_offsets[k];
        u.rows_mut(c.start, c.len()).copy_from(&block);
        Ok((u, pick))
    }

    /// Score of one subsystem under the mode's law; blended when `eps > 0`.
    fn block_score(
        &self,
        k: usize,
        p_k: &DVector<f64>,
        mode: &ProblemMode,
        smoothing: Smoothing,
    ) -> Result<f64> {
        if smoothing.is_exact() {
            return match mode {
                ProblemMode::Reach { multiplier } => self.reach_score(k, p_k, *multiplier),
                ProblemMode::SparseLq => self.lq_score(k, p_k),
                ProblemMode::Mayer => self.mayer_score(k, p_k),
            };
        }
        let joint = self.joint();
        let sub = &self.subsystems()[k];
        // soft score: lambda_total + softplus(margin), which tends to the
        // exact two-branch score as eps -> 0
        let margin = match mode {
            ProblemMode::Reach { multiplier: Multiplier::Abnormal } => {
                return self.reach_score(k, p_k, Multiplier::Abnormal);
            }
            ProblemMode::Reach { .. } | ProblemMode::Mayer => {
                let c = sub.b.transpose() * p_k;
                let (mx, _) = sub.action_set.linear_max(&c).ok_or_else(|| {
                    Error::UnboundedActionSet(format!("subsystem {} in reach/Mayer mode", k + 1))
                })?;
                mx - sub.lambda
            }
            ProblemMode::SparseLq => {
                let r_inv = self
                    .r_inverse(k)
                    .ok_or_else(|| Error::MissingR(format!("subsystem {} has no R", k + 1)))?;
                let w = sub.b.transpose() * p_k;
                0.5 * w.dot(&(r_inv * &w)) - sub.lambda
            }
        };
        Ok(joint.lambda_total + softplus(margin, smoothing.eps()))
    }
}

/// Finite-horizon Riccati sweep for one subsystem: `P` at every node and the
/// gains `K(t) = R^{-1} B^T P(t)`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

/// Integrate the matrix Riccati equation
/// `dP/dt = -A^T P - P A - Q + P B R^{-1} B^T P`, `P(t_hat) = Qhat`
/// backward over the grid with RK4.
pub fn riccati_solve(sub: &LinearSubsystem, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let q = sub
        .q
        .as_ref()
        .ok_or_else(|| Error::MissingQ("Riccati sweep needs Q".into()))?;
    let r = sub
        .r
        .as_ref()
        .ok_or_else(|| Error::MissingR("Riccati sweep needs R".into()))?;
    let qhat = sub
        .qhat
        .as_ref()
        .ok_or_else(|| Error::MissingQ("Riccati sweep needs the terminal weight".into()))?;
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidMatrix("R not positive definite".into()))?
        .inverse();
    let gain_op = &r_inv * sub.b.transpose();
    let b_rinv_bt = &sub.b * &gain_op;
    let at = sub.a.transpose();

    let deriv = |p: &DMatrix<f64>| -> DMatrix<f64> { -(&at * p) - p * &sub.a - q + p * &b_rinv_bt * p };

    let n = grid.n_steps();
    let h = -grid.step();
    let mut p_nodes = vec![DMatrix::zeros(0, 0); n + 1];
    p_nodes[n] = qhat.clone();
    for i in (0..n).rev() {
        let p = &p_nodes[i + 1];
        let k1 = deriv(p);
        let k2 = deriv(&(p + &k1 * (0.5 * h)));
        let k3 = deriv(&(p + &k2 * (0.5 * h)));
        let k4 = deriv(&(p + &k3 * h));
        let next = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) || next.amax() > 1e12 {
            return Err(Error::FiniteEscape { node: i });
        }
        p_nodes[i] = next;
    }
    let gains = p_nodes.iter().map(|p| &gain_op * p).collect();
    Ok(RiccatiSolution { p: p_nodes, gains })
}

/// Sign convention for applying the Riccati feedback `u = sign * K(t) x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackSign {
    Plus,
    Minus,
}

impl FeedbackSign {
    pub fn factor(self) -> f64 {
        match self {
            FeedbackSign::Plus => 1.0,
            FeedbackSign::Minus => -1.0,
        }
    }
}

/// Simulate the closed loop `u = sign * K(t) x` with controls held constant
/// per cell, and return the states, node controls, and the quadratic cost
/// (trapezoidal running cost plus terminal cost).
pub fn riccati_closed_loop(
    sub: &LinearSubsystem,
    grid: &TimeGrid,
    riccati: &RiccatiSolution,
    sign: FeedbackSign,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> {
    let q = sub.q.as_ref().ok_or_else(|| Error::MissingQ("closed loop needs Q".into()))?;
    let r = sub.r.as_ref().ok_or_else(|| Error::MissingR("closed loop needs R".into()))?;
    let qhat = sub
        .qhat
        .as_ref()
        .ok_or_else(|| Error::MissingQ("closed loop needs the terminal weight".into()))?;
    let n = grid.n_steps();
    let h = grid.step();
    let s = sign.factor();
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n + 1);
    xs.push(sub.x0.clone());
    for i in 0..n {
        let u = (&riccati.gains[i] * &xs[i]) * s;
        let f = |x: &DVector<f64>| &sub.a * x + &sub.b * &u;
        let x = &xs[i];
        let k1 = f(x);
        let k2 = f(&(x + &k1 * (0.5 * h)));
        let k3 = f(&(x + &k2 * (0.5 * h)));
        let k4 = f(&(x + &k3 * h));
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                node: i + 1,
                what: "Riccati closed loop".into(),
            });
        }
        us.push(u);
        xs.push(next);
    }
    us.push((&riccati.gains[n] * &xs[n]) * s);
    let integrand: Vec<f64> = (0..=n)
        .map(|i| 0.5 * (xs[i].dot(&(q * &xs[i])) + us[i].dot(&(r * &us[i]))))
        .collect();
    let mut cost = 0.0;
    for i in 0..n {
        cost += 0.5 * h * (integrand[i] + integrand[i + 1]);
    }
    cost += 0.5 * xs[n].dot(&(qhat * &xs[n]));
    Ok((xs, us, cost))
}

/// Decide which feedback sign yields the lower quadratic cost for this
/// subsystem, returning the winner together with both costs.
pub fn riccati_feedback_sign(
    sub: &LinearSubsystem,
    grid: &TimeGrid,
) -> Result<(FeedbackSign, f64, f64)> {
    let riccati = riccati_solve(sub, grid)?;
    let plus = riccati_closed_loop(sub, grid, &riccati, FeedbackSign::Plus)
        .map(|(_, _, c)| c)
        .unwrap_or(f64::INFINITY);
    let minus = riccati_closed_loop(sub, grid, &riccati, FeedbackSign::Minus)
        .map(|(_, _, c)| c)
        .unwrap_or(f64::INFINITY);
    let sign = if minus <= plus {
        FeedbackSign::Minus
    } else {
        FeedbackSign::Plus
    };
    Ok((sign, plus, minus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ActionSet;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    /// Two-subsystem ensemble with weights (2, 1) and scalar interval action
    /// sets, mirroring the structure used throughout the laws' examples.
    fn two_interval_ensemble() -> Ensemble {
        let s1 = LinearSubsystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ActionSet::Interval { a: -1.0, b: 1.0 },
            2.0,
            DVector::zeros(2),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2) * 2.0, DMatrix::from_row_slice(1, 1, &[2.0]))
        .unwrap();
        let s2 = LinearSubsystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ActionSet::Interval { a: -1.0, b: 1.0 },
            1.0,
            DVector::zeros(2),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2), DMatrix::from_row_slice(1, 1, &[2.0]))
        .unwrap();
        Ensemble::new(vec![s1, s2]).unwrap()
    }

    /// Brute-force maximizer of the reach/Mayer pointwise map over a gridded
    /// interval, including the indicator bonus at v = 0.
    fn reach_oracle(bt_p: f64, lambda: f64, lo: f64, hi: f64) -> (f64, f64) {
        let steps = 4000;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=steps {
            let v = lo + (hi - lo) * i as f64 / steps as f64;
            let val = bt_p * v + if v == 0.0 { lambda } else { 0.0 };
            if val > best.0 {
                best = (val, v);
            }
        }
        // make sure v = 0 is on the grid
        let zero_val = lambda;
        if zero_val > best.0 {
            best = (zero_val, 0.0);
        }
        best
    }

    #[test]
    fn reach_law_active_branch() {
        let ens = two_interval_ensemble();
        // Interval [-1,1], B^T p = 3 > lambda = 2: bang at +1
        let p = DVector::from_row_slice(&[0.0, 3.0]);
        let u = ens
            .reach_control(0, &p, Multiplier::Normal, Smoothing::EXACT)
            .unwrap();
        assert_eq!(u[0], 1.0);
        let (_, v) = reach_oracle(3.0, 2.0, -1.0, 1.0);
        assert_eq!(u[0], v);
    }

    #[test]
    fn reach_law_inactive_branch() {
        let ens = two_interval_ensemble();
        let p = DVector::from_row_slice(&[0.0, 0.5]);
        let u = ens
            .reach_control(0, &p, Multiplier::Normal, Smoothing::EXACT)
            .unwrap();
        assert_eq!(u[0], 0.0);
        let (_, v) = reach_oracle(0.5, 2.0, -1.0, 1.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn reach_law_zero_functional_ties_to_zero() {
        let ens = two_interval_ensemble();
        let u = ens
            .reach_control(0, &DVector::zeros(2), Multiplier::Normal, Smoothing::EXACT)
            .unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn reach_law_threshold_equality_ties_to_zero() {
        let ens = two_interval_ensemble();
        // |B^T p| = lambda exactly: both 0 and the vertex maximize; pick 0
        let p = DVector::from_row_slice(&[0.0, 2.0]);
        let u = ens
            .reach_control(0, &p, Multiplier::Normal, Smoothing::EXACT)
            .unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn reach_law_abnormal_is_plain_sign() {
        let ens = two_interval_ensemble();
        let p = DVector::from_row_slice(&[0.0, -1.2]);
        let u = ens
            .reach_control(0, &p, Multiplier::Abnormal, Smoothing::EXACT)
            .unwrap();
        assert_eq!(u[0], -1.0);
    }

    #[test]
    fn reach_law_rejects_unbounded_set() {
        let sub = LinearSubsystem::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::zeros(1),
        )
        .unwrap();
        let ens = Ensemble::new(vec![sub]).unwrap();
        let r = ens.reach_control(0, &DVector::from_element(1, 1.0), Multiplier::Normal, Smoothing::EXACT);
        assert!(matches!(r, Err(Error::UnboundedActionSet(_))));
    }

    #[test]
    fn reach_score_examples() {
        let ens = two_interval_ensemble();
        // lambda = (2,1): k=1 has lambda_others = 1
        let p = DVector::from_row_slice(&[0.0, 3.0]);
        assert_eq!(ens.reach_score(0, &p, Multiplier::Normal).unwrap(), 4.0);
        let p = DVector::from_row_slice(&[0.0, 0.5]);
        assert_eq!(ens.reach_score(0, &p, Multiplier::Normal).unwrap(), 3.0);
        assert_eq!(
            ens.reach_score(0, &DVector::zeros(2), Multiplier::Abnormal).unwrap(),
            0.0
        );
    }

    /// Brute-force maximizer of the LQ pointwise map over a gridded line.
    fn lq_oracle(bt_p: f64, r: f64, lambda: f64) -> (f64, f64) {
        let steps = 200_000;
        let (lo, hi) = (-10.0, 10.0);
        let mut best = (lambda, 0.0); // v = 0 collects the indicator bonus
        for i in 0..=steps {
            let v = lo + (hi - lo) * i as f64 / steps as f64;
            let val = bt_p * v - 0.5 * r * v * v + if v == 0.0 { lambda } else { 0.0 };
            if val > best.0 {
                best = (val, v);
            }
        }
        best
    }

    #[test]
    fn lq_law_active_branch_matches_oracle() {
        let sub = LinearSubsystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::zeros(2),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2), DMatrix::from_row_slice(1, 1, &[2.0]))
        .unwrap();
        let ens = Ensemble::new(vec![sub]).unwrap();
        // B^T p = 3, R = 2: weighted norm 4.5 > 2 lambda = 2, so u = 1.5
        let p = DVector::from_row_slice(&[0.0, 3.0]);
        let u = ens.lq_control(0, &p, Smoothing::EXACT).unwrap();
        assert_relative_eq!(u[0], 1.5);
        let (_, v) = lq_oracle(3.0, 2.0, 1.0);
        assert!((u[0] - v).abs() < 1e-4);
    }

    #[test]
    fn lq_law_zero_gradient_gives_zero() {
        let sub = LinearSubsystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::zeros(2),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2), DMatrix::from_row_slice(1, 1, &[2.0]))
        .unwrap();
        let ens = Ensemble::new(vec![sub]).unwrap();
        let u = ens
            .lq_control(0, &DVector::from_row_slice(&[5.0, 0.0]), Smoothing::EXACT)
            .unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn lq_law_threshold_tie_goes_to_zero() {
        let sub = LinearSubsystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::zeros(2),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2), DMatrix::from_row_slice(1, 1, &[2.0]))
        .unwrap();
        let ens = Ensemble::new(vec![sub]).unwrap();
        // |p|^2 = 4/2 = 2 = 2 lambda: tie, and the oracle confirms both
        // v = 0 and v = 1 attain the same value
        let p = DVector::from_row_slice(&[0.0, 2.0]);
        let u = ens.lq_control(0, &p, Smoothing::EXACT).unwrap();
        assert_eq!(u[0], 0.0);
        let v_zero = 1.0; // psi at v = 0 (indicator bonus)
        let v_cand = 2.0 * 1.0 - 0.5 * 2.0 * 1.0; // psi at v = 1
        assert_eq!(v_zero, v_cand);
    }

    #[test]
    fn lq_law_requires_r() {
        let sub = LinearSubsystem::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::zeros(1),
        )
        .unwrap();
        let ens = Ensemble::new(vec![sub]).unwrap();
        let r = ens.lq_control(0, &DVector::from_element(1, 1.0), Smoothing::EXACT);
        assert!(matches!(r, Err(Error::MissingR(_))));
    }

    #[test]
    fn lq_score_examples() {
        let ens = two_interval_ensemble();
        // weights (2,1), R = 2 on both. k=1: pick p with |p^1|^2/2 = 5
        // => (B^T p)^2 / R = 10 => B^T p = sqrt(20)
        let p = DVector::from_row_slice(&[0.0, 20f64.sqrt()]);
        assert_relative_eq!(ens.lq_score(0, &p).unwrap(), 6.0, epsilon = 1e-12);
        // k=2 (lambda_others = 2): |p^2|^2/2 = 1.5 => score 3.5
        let p = DVector::from_row_slice(&[0.0, 6f64.sqrt()]);
        assert_relative_eq!(ens.lq_score(1, &p).unwrap(), 3.5, epsilon = 1e-12);
        // below threshold: score is lambda_total = 3
        let p = DVector::from_row_slice(&[0.0, 0.5]);
        assert_eq!(ens.lq_score(0, &p).unwrap(), 3.0);
    }

    #[test]
    fn select_multiplexer_examples() {
        assert_eq!(select_multiplexer(&[6.0, 3.5], Some(3.0)), 1);
        assert_eq!(select_multiplexer(&[3.0, 3.0], Some(3.0)), 0);
        assert_eq!(select_multiplexer(&[1.0], None), 1);
        // smallest index wins ties
        assert_eq!(select_multiplexer(&[4.0, 4.0], Some(3.0)), 1);
    }

    #[test]
    fn joint_control_zero_adjoint() {
        let ens = two_interval_ensemble();
        let (u, mux) = ens
            .joint_control(&DVector::zeros(4), &ProblemMode::SparseLq, Smoothing::EXACT)
            .unwrap();
        assert_eq!(u.amax(), 0.0);
        assert_eq!(mux, 0);
    }

    #[test]
    fn joint_control_picks_higher_scoring_block() {
        let ens = two_interval_ensemble();
        // |p^1|^2/2 = 5 (score 6), |p^2|^2/2 = 1.5 (score 3.5): system 1 wins
        let p = DVector::from_row_slice(&[0.0, 20f64.sqrt(), 0.0, 6f64.sqrt()]);
        let (u, mux) = ens
            .joint_control(&p, &ProblemMode::SparseLq, Smoothing::EXACT)
            .unwrap();
        assert_eq!(mux, 1);
        assert_relative_eq!(u[0], 20f64.sqrt() / 2.0, epsilon = 1e-12);
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn joint_control_abnormal_reach_selects_largest_functional() {
        let ens = two_interval_ensemble();
        let p = DVector::from_row_slice(&[0.0, 0.2, 0.0, -0.6]);
        let (u, mux) = ens
            .joint_control(
                &p,
                &ProblemMode::Reach {
                    multiplier: Multiplier::Abnormal,
                },
                Smoothing::EXACT,
            )
            .unwrap();
        // max |B^T p| over k: subsystem 2 with 0.6
        assert_eq!(mux, 2);
        assert_eq!(u[0], 0.0);
        assert_eq!(u[1], -1.0);
    }

    #[test]
    fn joint_control_smoothing_never_violates_multiplexing() {
        let ens = two_interval_ensemble();
        let p = DVector::from_row_slice(&[0.3, 1.9, -0.4, 1.1]);
        for eps in [1e-1, 1e-2, 1e-3] {
            let (u, mux) = ens
                .joint_control(&p, &ProblemMode::SparseLq, Smoothing::new(eps).unwrap())
                .unwrap();
            let nonzero: Vec<usize> = (0..2).filter(|&k| u[k] != 0.0).collect();
            assert!(nonzero.len() <= 1);
            if let Some(&k) = nonzero.first() {
                assert_eq!(mux, k + 1);
            }
        }
    }

    #[test]
    fn smoothing_converges_to_exact_law() {
        let ens = two_interval_ensemble();
        // comfortably above threshold: margin ~ 1
        let p = DVector::from_row_slice(&[0.0, 3.0]);
        let exact = ens
            .reach_control(0, &p, Multiplier::Normal, Smoothing::EXACT)
            .unwrap();
        let mut last_gap = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let blended = ens
                .reach_control(0, &p, Multiplier::Normal, Smoothing::new(eps).unwrap())
                .unwrap();
            let gap = (&blended - &exact).amax();
            // the logistic saturates to the exact law well away from the
            // threshold, so the gap may bottom out at zero
            assert!(gap <= last_gap);
            last_gap = gap;
        }
        assert!(last_gap < 1e-6);
    }

    #[test]
    fn reach_scaling_law() {
        // eta = 0 outputs do not depend on the weights at all; under eta = 1
        // scaling all weights by c and the adjoint by c preserves the law.
        let base = two_interval_ensemble();
        let scaled = {
            let mut subs = base.subsystems().to_vec();
            for s in &mut subs {
                s.lambda *= 3.0;
            }
            Ensemble::new(subs).unwrap()
        };
        for raw in [[0.1, 0.8, -0.3, 0.4], [0.0, 2.5, 0.0, -2.5], [1.0, -0.4, 0.2, 0.9]] {
            let p = DVector::from_row_slice(&raw);
            let u0_base = base
                .joint_control(&p, &ProblemMode::Reach { multiplier: Multiplier::Abnormal }, Smoothing::EXACT)
                .unwrap();
            let u0_scaled = scaled
                .joint_control(&p, &ProblemMode::Reach { multiplier: Multiplier::Abnormal }, Smoothing::EXACT)
                .unwrap();
            assert_eq!(u0_base, u0_scaled);
            let u1_base = base
                .joint_control(&p, &ProblemMode::Reach { multiplier: Multiplier::Normal }, Smoothing::EXACT)
                .unwrap();
            let u1_scaled = scaled
                .joint_control(&(&p * 3.0), &ProblemMode::Reach { multiplier: Multiplier::Normal }, Smoothing::EXACT)
                .unwrap();
            assert_eq!(u1_base.0, u1_scaled.0);
            assert_eq!(u1_base.1, u1_scaled.1);
        }
    }

    fn scalar_integrator() -> LinearSubsystem {
        LinearSubsystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::from_element(1, 1.0),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(1, 1), DMatrix::identity(1, 1))
        .unwrap()
        .with_terminal_weight(DMatrix::zeros(1, 1))
        .unwrap()
    }

    #[test]
    fn riccati_scalar_tanh() {
        // A=0, B=1, Q=1, R=1, Qhat=0: P(t) = tanh(t_hat - t)
        let sub = scalar_integrator();
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let sol = riccati_solve(&sub, &grid).unwrap();
        assert_relative_eq!(sol.p[0][(0, 0)], 1f64.tanh(), epsilon = 1e-10);
        for (i, p) in sol.p.iter().enumerate() {
            let t = grid.node(i);
            assert_relative_eq!(p[(0, 0)], (1.0 - t).tanh(), epsilon = 1e-9);
        }
    }

    #[test]
    fn riccati_stationary_when_terminal_solves_are() {
        // A=0, B=I, Q=I, R=I: algebraic equation P^2 = Q has P = I
        let sub = LinearSubsystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            ActionSet::Unbounded { dim: 2 },
            1.0,
            DVector::zeros(2),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2), DMatrix::identity(2, 2))
        .unwrap()
        .with_terminal_weight(DMatrix::identity(2, 2))
        .unwrap();
        let grid = TimeGrid::new(2.0, 500).unwrap();
        let sol = riccati_solve(&sub, &grid).unwrap();
        for p in &sol.p {
            assert!((p - DMatrix::identity(2, 2)).amax() < 1e-10);
        }
    }

    #[test]
    fn riccati_terminal_condition_exact() {
        let sub = scalar_integrator();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let sol = riccati_solve(&sub, &grid).unwrap();
        assert_eq!(sol.p[100], DMatrix::zeros(1, 1));
    }

    #[test]
    fn riccati_negative_feedback_wins() {
        // the cost-minimizing convention is u = -K x; u = +K x destabilizes
        let sub = LinearSubsystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::from_row_slice(&[1.0, 0.5]),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2) * 2.0, DMatrix::from_row_slice(1, 1, &[2.0]))
        .unwrap()
        .with_terminal_weight(DMatrix::identity(2, 2) * 200.0)
        .unwrap();
        let grid = TimeGrid::new(3.5, 2000).unwrap();
        let (sign, plus, minus) = riccati_feedback_sign(&sub, &grid).unwrap();
        assert_eq!(sign, FeedbackSign::Minus);
        assert!(minus < plus, "minus {minus} vs plus {plus}");
    }

    #[test]
    fn riccati_closed_loop_beats_random_open_loop() {
        use rand::{Rng, SeedableRng};
        let sub = LinearSubsystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ActionSet::Unbounded { dim: 1 },
            1.0,
            DVector::from_row_slice(&[1.0, 0.5]),
        )
        .unwrap()
        .with_running_cost(DMatrix::identity(2, 2), DMatrix::identity(1, 1))
        .unwrap()
        .with_terminal_weight(DMatrix::identity(2, 2))
        .unwrap();
        let grid = TimeGrid::new(2.0, 400).unwrap();
        let riccati = riccati_solve(&sub, &grid).unwrap();
        let (_, _, best) = riccati_closed_loop(&sub, &grid, &riccati, FeedbackSign::Minus).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = grid.step();
        let q = sub.q.as_ref().unwrap();
        let r = sub.r.as_ref().unwrap();
        let qhat = sub.qhat.as_ref().unwrap();
        for _ in 0..100 {
            let scale = rng.gen_range(0.0..2.0);
            let us: Vec<f64> = (0..=grid.n_steps()).map(|_| rng.gen_range(-scale..=scale)).collect();
            let mut x = sub.x0.clone();
            let mut integrand = vec![0.5 * (x.dot(&(q * &x)) + r[(0, 0)] * us[0] * us[0])];
            for i in 0..grid.n_steps() {
                let u = DVector::from_element(1, us[i]);
                let f = |x: &DVector<f64>| &sub.a * x + &sub.b * &u;
                let k1 = f(&x);
                let k2 = f(&(&x + &k1 * (0.5 * h)));
                let k3 = f(&(&x + &k2 * (0.5 * h)));
                let k4 = f(&(&x + &k3 * h));
                x = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                integrand.push(0.5 * (x.dot(&(q * &x)) + r[(0, 0)] * us[i + 1] * us[i + 1]));
            }
            let mut cost = 0.0;
            for i in 0..grid.n_steps() {
                cost += 0.5 * h * (integrand[i] + integrand[i + 1]);
            }
            cost += 0.5 * x.dot(&(qhat * &x));
            assert!(best <= cost + 1e-9, "closed loop {best} vs random {cost}");
        }
    }
}
