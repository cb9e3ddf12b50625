//! Finite ensembles of linear time-invariant subsystems and their
//! block-diagonal joint representation.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on symmetry defects and eigenvalue sign checks for cost matrices.
const MATRIX_TOL: f64 = 1e-10;

/// Set of admissible control actions for a single subsystem.
///
/// Every variant must admit the zero action: switching a controller off has
/// to be feasible for multiplexing to make sense.
#[derive(Debug, Clone)]
pub enum ActionSet {
    /// All of `R^dim`. Only admissible in sparse-LQ problems, where the
    /// quadratic control cost keeps the problem well posed.
    Unbounded { dim: usize },
    /// Componentwise box `[lower_i, upper_i]` with `lower <= 0 <= upper`.
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    /// Scalar interval `[a, b]` with `a <= 0 <= b`; shorthand for a 1-d box.
    Interval { a: f64, b: f64 },
    /// Finite list of action vectors; must contain the origin.
    Finite { points: Vec<DVector<f64>> },
}

impl ActionSet {
    /// Dimension of the actions in this set.
    pub fn dim(&self) -> usize {
        match self {
            ActionSet::Unbounded { dim } => *dim,
            ActionSet::Box { lower, .. } => lower.len(),
            ActionSet::Interval { .. } => 1,
            ActionSet::Finite { points } => points.first().map_or(0, |p| p.len()),
        }
    }

    /// Whether the set is compact (required by the reach and Mayer modes).
    pub fn is_compact(&self) -> bool {
        !matches!(self, ActionSet::Unbounded { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActionSet::Unbounded { dim } => {
                if *dim == 0 {
                    return Err(Error::DimensionMismatch("action set of dimension 0".into()));
                }
            }
            ActionSet::Box { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(Error::DimensionMismatch(format!(
                        "box bounds of lengths {} and {}",
                        lower.len(),
                        upper.len()
                    )));
                }
                for i in 0..lower.len() {
                    if !(lower[i] <= 0.0 && 0.0 <= upper[i]) {
                        return Err(Error::ZeroNotAdmissible(format!(
                            "box component {i} is [{}, {}]",
                            lower[i], upper[i]
                        )));
                    }
                }
            }
            ActionSet::Interval { a, b } => {
                if !(*a <= 0.0 && 0.0 <= *b) {
                    return Err(Error::ZeroNotAdmissible(format!("interval is [{a}, {b}]")));
                }
            }
            ActionSet::Finite { points } => {
                if points.is_empty() {
                    return Err(Error::ZeroNotAdmissible("finite action set is empty".into()));
                }
                let dim = points[0].len();
                if points.iter().any(|p| p.len() != dim) {
                    return Err(Error::DimensionMismatch(
                        "finite action set has mixed dimensions".into(),
                    ));
                }
                if !points.iter().any(|p| p.amax() == 0.0) {
                    return Err(Error::ZeroNotAdmissible(
                        "finite action set does not contain the zero vector".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Membership test with tolerance `tol` on box/interval bounds.
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        if v.len() != self.dim() {
            return false;
        }
        match self {
            ActionSet::Unbounded { .. } => true,
            ActionSet::Box { lower, upper } => (0..v.len())
                .all(|i| v[i] >= lower[i] - tol && v[i] <= upper[i] + tol),
            ActionSet::Interval { a, b } => v[0] >= a - tol && v[0] <= b + tol,
            ActionSet::Finite { points } => points.iter().any(|p| (p - v).amax() <= tol),
        }
    }

    /// Maximize the linear functional `<c, v>` over the set.
    ///
    /// Returns `(max value, maximizer)`, or `None` for unbounded sets. Ties
    /// resolve toward the origin so that thresholded laws stay sparse.
    pub fn linear_max(&self, c: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        match self {
            ActionSet::Unbounded { .. } => None,
            ActionSet::Box { lower, upper } => {
                let mut v = DVector::zeros(c.len());
                let mut value = 0.0;
                for i in 0..c.len() {
                    if c[i] > 0.0 {
                        v[i] = upper[i];
                    } else if c[i] < 0.0 {
                        v[i] = lower[i];
                    }
                    value += c[i] * v[i];
                }
                Some((value, v))
            }
            ActionSet::Interval { a, b } => {
                let v = if c[0] > 0.0 {
                    *b
                } else if c[0] < 0.0 {
                    *a
                } else {
                    0.0
                };
                Some((c[0] * v, DVector::from_element(1, v)))
            }
            ActionSet::Finite { points } => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = &points[0];
                for p in points {
                    let val = c.dot(p);
                    if val > best {
                        best = val;
                        arg = p;
                    }
                }
                // prefer the origin among tied maximizers
                if best <= 0.0 {
                    if let Some(z) = points.iter().find(|p| p.amax() == 0.0) {
                        if c.dot(z) == best {
                            arg = z;
                        }
                    }
                }
                Some((best, arg.clone()))
            }
        }
    }

    /// Clamp a vector into the set where that is well defined (box bounds);
    /// finite and unbounded sets pass through unchanged.
    pub fn clamp(&self, v: DVector<f64>) -> DVector<f64> {
        match self {
            ActionSet::Box { lower, upper } => {
                DVector::from_fn(v.len(), |i, _| v[i].clamp(lower[i], upper[i]))
            }
            ActionSet::Interval { a, b } => DVector::from_element(1, v[0].clamp(*a, *b)),
            _ => v,
        }
    }
}

/// One linear time-invariant subsystem of the ensemble, with its admissible
/// action set, sparsity weight, and optional quadratic cost data.
#[derive(Debug, Clone)]
pub struct LinearSubsystem {
    /// State matrix, `d_k x d_k`.
    pub a: DMatrix<f64>,
    /// Input matrix, `d_k x m_k`.
    pub b: DMatrix<f64>,
    pub action_set: ActionSet,
    /// Sparsity weight; strictly positive.
    pub lambda: f64,
    /// Running state cost (sparse-LQ only), symmetric nonnegative definite.
    pub q: Option<DMatrix<f64>>,
    /// Running control cost (sparse-LQ only), symmetric positive definite.
    pub r: Option<DMatrix<f64>>,
    /// Terminal state weight, symmetric nonnegative definite.
    pub qhat: Option<DMatrix<f64>>,
    /// Initial state.
    pub x0: DVector<f64>,
    /// Target state (reach and Mayer modes).
    pub xhat: Option<DVector<f64>>,
}

impl LinearSubsystem {
    /// Build a subsystem from its dynamics, validating dimensions, the
    /// weight, and admissibility of the zero action.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        action_set: ActionSet,
        lambda: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let sub = Self {
            a,
            b,
            action_set,
            lambda,
            q: None,
            r: None,
            qhat: None,
            x0,
            xhat: None,
        };
        sub.validate()?;
        Ok(sub)
    }

    /// Attach running costs `Q` (nonnegative definite) and `R` (positive
    /// definite). Both are symmetrized on ingestion.
    pub fn with_running_cost(mut self, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        self.q = Some(ingest_symmetric(q, "Q", self.state_dim(), false)?);
        self.r = Some(ingest_symmetric(r, "R", self.control_dim(), true)?);
        Ok(self)
    }

    /// Attach the terminal weight, symmetrized on ingestion.
    pub fn with_terminal_weight(mut self, qhat: DMatrix<f64>) -> Result<Self> {
        self.qhat = Some(ingest_symmetric(qhat, "Qhat", self.state_dim(), false)?);
        Ok(self)
    }

    /// Attach the target state used by the reach and Mayer modes.
    pub fn with_target(mut self, xhat: DVector<f64>) -> Result<Self> {
        if xhat.len() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "target of length {} for state dimension {}",
                xhat.len(),
                self.state_dim()
            )));
        }
        self.xhat = Some(xhat);
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.nrows();
        if self.a.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != d {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows for state dimension {}",
                self.b.nrows(),
                d
            )));
        }
        if self.x0.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "x0 of length {} for state dimension {}",
                self.x0.len(),
                d
            )));
        }
        if let Some(xhat) = &self.xhat {
            if xhat.len() != d {
                return Err(Error::DimensionMismatch("xhat length".into()));
            }
        }
        if self.action_set.dim() != self.control_dim() {
            return Err(Error::DimensionMismatch(format!(
                "action set of dimension {} for control dimension {}",
                self.action_set.dim(),
                self.control_dim()
            )));
        }
        self.action_set.validate()?;
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidWeight(self.lambda));
        }
        if let Some(q) = &self.q {
            check_symmetric(q, "Q", d, false)?;
        }
        if let Some(r) = &self.r {
            check_symmetric(r, "R", self.control_dim(), true)?;
        }
        if let Some(qhat) = &self.qhat {
            check_symmetric(qhat, "Qhat", d, false)?;
        }
        Ok(())
    }
}

/// Validate, then symmetrize `(M + M^T)/2`. Config files carry rounded
/// decimals, so small symmetry defects are repaired rather than rejected.
fn ingest_symmetric(m: DMatrix<f64>, name: &str, dim: usize, positive: bool) -> Result<DMatrix<f64>> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {dim}x{dim}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = (&m + m.transpose()) * 0.5;
    check_symmetric_against(&m, &sym, name)?;
    check_eigenvalues(&sym, name, positive)?;
    Ok(sym)
}

fn check_symmetric(m: &DMatrix<f64>, name: &str, dim: usize, positive: bool) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {dim}x{dim}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    check_symmetric_against(m, &sym, name)?;
    check_eigenvalues(&sym, name, positive)
}

fn check_symmetric_against(m: &DMatrix<f64>, sym: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = 1.0f64.max(m.amax());
    let defect = (m - sym).amax();
    if defect > MATRIX_TOL * scale {
        return Err(Error::InvalidMatrix(format!(
            "{name} has symmetry defect {defect:.3e}"
        )));
    }
    Ok(())
}

fn check_eigenvalues(sym: &DMatrix<f64>, name: &str, positive: bool) -> Result<()> {
    let eigs = sym.clone().symmetric_eigenvalues();
    let min = eigs.min();
    if positive {
        if !(min > 0.0) {
            return Err(Error::InvalidMatrix(format!(
                "{name} must be positive definite; min eigenvalue {min:.3e}"
            )));
        }
    } else if min < -MATRIX_TOL {
        return Err(Error::InvalidMatrix(format!(
            "{name} must be nonnegative definite; min eigenvalue {min:.3e}"
        )));
    }
    Ok(())
}

/// Block-diagonal lift of the ensemble: joint dynamics plus the index ranges
/// locating each subsystem inside joint state and control vectors.
#[derive(Debug, Clone)]
pub struct JointSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub state_offsets: Vec<Range<usize>>,
    pub control_offsets: Vec<Range<usize>>,
    /// For each subsystem, the sum of the other subsystems' weights.
    pub lambda_others: Vec<f64>,
    /// Sum of all weights.
    pub lambda_total: f64,
}

impl JointSystem {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn len(&self) -> usize {
        self.state_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state_offsets.is_empty()
    }
}

/// Assemble the block-diagonal joint system from a list of subsystems.
pub fn assemble_joint(subsystems: &[LinearSubsystem]) -> Result<JointSystem> {
    if subsystems.is_empty() {
        return Err(Error::DimensionMismatch("empty subsystem list".into()));
    }
    for sub in subsystems {
        sub.validate()?;
    }
    let d: usize = subsystems.iter().map(|s| s.state_dim()).sum();
    let m: usize = subsystems.iter().map(|s| s.control_dim()).sum();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, m);
    let mut state_offsets = Vec::with_capacity(subsystems.len());
    let mut control_offsets = Vec::with_capacity(subsystems.len());
    let (mut row, mut col) = (0usize, 0usize);
    for sub in subsystems {
        let (dk, mk) = (sub.state_dim(), sub.control_dim());
        a.view_mut((row, row), (dk, dk)).copy_from(&sub.a);
        b.view_mut((row, col), (dk, mk)).copy_from(&sub.b);
        state_offsets.push(row..row + dk);
        control_offsets.push(col..col + mk);
        row += dk;
        col += mk;
    }
    let lambda_total: f64 = subsystems.iter().map(|s| s.lambda).sum();
    let lambda_others = subsystems.iter().map(|s| lambda_total - s.lambda).collect();
    Ok(JointSystem {
        a,
        b,
        state_offsets,
        control_offsets,
        lambda_others,
        lambda_total,
    })
}

/// Split a joint vector into per-subsystem pieces along the given offsets.
pub fn split_joint(v: &DVector<f64>, offsets: &[Range<usize>]) -> Result<Vec<DVector<f64>>> {
    let total: usize = offsets.iter().map(|r| r.len()).sum();
    if v.len() != total {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} against offsets covering {total}",
            v.len()
        )));
    }
    Ok(offsets
        .iter()
        .map(|r| v.rows(r.start, r.len()).into_owned())
        .collect())
}

/// Stack per-subsystem pieces into a joint vector; inverse of [`split_joint`].
pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

/// The ensemble: validated subsystems plus their joint lift and the cached
/// inverse control costs used by the LQ law.
#[derive(Debug, Clone)]
pub struct Ensemble {
    subsystems: Vec<LinearSubsystem>,
    joint: JointSystem,
    r_inv: Vec<Option<DMatrix<f64>>>,
}

impl Ensemble {
    pub fn new(subsystems: Vec<LinearSubsystem>) -> Result<Self> {
        let joint = assemble_joint(&subsystems)?;
        let r_inv = subsystems
            .iter()
            .map(|s| {
                s.r.as_ref().map(|r| {
                    r.clone()
                        .cholesky()
                        .expect("validated positive definite")
                        .inverse()
                })
            })
            .collect();
        Ok(Self {
            subsystems,
            joint,
            r_inv,
        })
    }

    pub fn subsystems(&self) -> &[LinearSubsystem] {
        &self.subsystems
    }

    pub fn joint(&self) -> &JointSystem {
        &self.joint
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.joint.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.joint.control_dim()
    }

    /// Stacked initial state.
    pub fn initial_state(&self) -> DVector<f64> {
        stack(&self.subsystems.iter().map(|s| s.x0.clone()).collect::<Vec<_>>())
    }

    /// Stacked target state, if every subsystem carries one.
    pub fn target_state(&self) -> Option<DVector<f64>> {
        let parts: Option<Vec<_>> = self.subsystems.iter().map(|s| s.xhat.clone()).collect();
        parts.map(|p| stack(&p))
    }

    pub(crate) fn r_inverse(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.r_inv[k].as_ref()
    }
}
