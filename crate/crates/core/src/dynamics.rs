//! Fixed-step integration of the joint state and adjoint equations, and the
//! matrix exponential used for closed-form adjoint propagation.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::JointSystem;
use crate::error::{Error, Result};
use crate::pmp_law::ProblemMode;

/// Uniform time grid on `[0, t_hat]` with `n_steps` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_hat: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_hat: f64, n_steps: usize) -> Result<Self> {
        if !(t_hat > 0.0) || !t_hat.is_finite() {
            return Err(Error::InvalidConfig(format!("horizon t_hat = {t_hat}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps = 0".into()));
        }
        Ok(Self { t_hat, n_steps })
    }

    pub fn t_hat(&self) -> f64 {
        self.t_hat
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        self.t_hat / self.n_steps as f64
    }

    /// Node `i`, computed so that `node(0) == 0` and `node(n_steps) == t_hat`
    /// exactly.
    pub fn node(&self, i: usize) -> f64 {
        self.t_hat * (i as f64 / self.n_steps as f64)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }
}

/// Sweep direction for [`rk4_integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One classical RK4 step of size `h` from `(t, z)`.
pub fn rk4_step<F>(f: &F, t: f64, z: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, z);
    let k2 = f(t + 0.5 * h, &(z + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(z + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(z + &k3 * h));
    z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Classical fourth-order Runge-Kutta sweep over the grid.
///
/// `Forward` starts from `z0` at node 0; `Backward` starts from `z0` at the
/// last node and integrates down to node 0. Either way the result is indexed
/// by node. Fails with the offending node index if the state leaves the
/// finite floats.
pub fn rk4_integrate<F>(
    f: F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    direction: Direction,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let n = grid.n_steps();
    let check = |z: &DVector<f64>, node: usize| -> Result<()> {
        if z.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteState {
                node,
                what: "rk4 sweep".into(),
            })
        }
    };
    let mut out = vec![DVector::zeros(z0.len()); n + 1];
    match direction {
        Direction::Forward => {
            check(z0, 0)?;
            out[0] = z0.clone();
            for i in 0..n {
                let h = grid.node(i + 1) - grid.node(i);
                let next = rk4_step(&f, grid.node(i), &out[i], h);
                check(&next, i + 1)?;
                out[i + 1] = next;
            }
        }
        Direction::Backward => {
            check(z0, n)?;
            out[n] = z0.clone();
            for i in (0..n).rev() {
                let h = grid.node(i) - grid.node(i + 1);
                let next = rk4_step(&f, grid.node(i + 1), &out[i + 1], h);
                check(&next, i)?;
                out[i] = next;
            }
        }
    }
    Ok(out)
}

// Pade(13) numerator coefficients for the matrix exponential
// (Higham, "The Scaling and Squaring Method Revisited").
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const PADE13_THETA: f64 = 5.371920351148152;

/// Matrix exponential `e^{M t}` by scaling and squaring with a Pade(13)
/// approximant.
pub fn expm(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "expm of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) || !t.is_finite() {
        return Err(Error::NonFiniteState {
            node: 0,
            what: "expm input".into(),
        });
    }
    let a = m * t;
    let norm = one_norm(&a);
    let squarings = if norm > PADE13_THETA {
        (norm / PADE13_THETA).log2().ceil() as u32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings as i32);

    let eye = DMatrix::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u = &a
        * (&a6 * (&a6 * PADE13[13] + &a4 * PADE13[11] + &a2 * PADE13[9])
            + &a6 * PADE13[7]
            + &a4 * PADE13[5]
            + &a2 * PADE13[3]
            + &eye * PADE13[1]);
    let v = &a6 * (&a6 * PADE13[12] + &a4 * PADE13[10] + &a2 * PADE13[8])
        + &a6 * PADE13[6]
        + &a4 * PADE13[4]
        + &a2 * PADE13[2]
        + &eye * PADE13[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut exp = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::InvalidMatrix("singular Pade denominator in expm".into()))?;
    for _ in 0..squarings {
        exp = &exp * &exp;
    }
    Ok(exp)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Closed-form adjoint sweep `p(t_i) = e^{-A^T t_i} p0` for the modes whose
/// adjoint equation has no forcing term (reach and Mayer).
pub fn propagate_adjoint_closed_form(
    joint: &JointSystem,
    p0: &DVector<f64>,
    grid: &TimeGrid,
    mode: &ProblemMode,
) -> Result<Vec<DVector<f64>>> {
    if matches!(mode, ProblemMode::SparseLq) {
        return Err(Error::ModeMismatch(
            "sparse-LQ adjoint carries the forcing term Q x and must be co-integrated".into(),
        ));
    }
    if p0.len() != joint.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "adjoint of length {} for state dimension {}",
            p0.len(),
            joint.state_dim()
        )));
    }
    let step = expm(&(-joint.a.transpose()), grid.step())?;
    let mut out = Vec::with_capacity(grid.n_nodes());
    out.push(p0.clone());
    for i in 0..grid.n_steps() {
        let next = &step * &out[i];
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                node: i + 1,
                what: "adjoint sweep".into(),
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// A solved trajectory on the grid: states, adjoints, controls, the active
/// subsystem per node (0 meaning all controls zero), and the Hamiltonian
/// trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub x: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Active-subsystem index per node, in `0..=N`; 0 means no subsystem.
    pub mux: Vec<usize>,
    /// Hamiltonian value per node, computed post hoc from `(p, x, u)`.
    pub h: Vec<f64>,
}

impl Trajectory {
    /// Control samples of subsystem `k` at all nodes.
    pub fn subsystem_controls(&self, joint: &JointSystem, k: usize) -> Vec<DVector<f64>> {
        let r = &joint.control_offsets[k];
        self.u
            .iter()
            .map(|u| u.rows(r.start, r.len()).into_owned())
            .collect()
    }
}
