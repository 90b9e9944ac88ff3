//! Ground-truth plant: stacked LTI dynamics, quadratic costs, the Riccati
//! oracle and closed-loop stability metrics.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Numerical tolerance used when checking that weight matrices are PSD.
const PSD_TOLERANCE: f64 = 1e-9;

/// Default max-norm above which a rollout counts as blown up.
pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("matrix {0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("matrix {0} is not positive semi-definite (min eigenvalue {1:e})")]
    NotPsd(&'static str, f64),
    #[error("matrix {0} contains non-finite entries")]
    NonFinite(&'static str),
    #[error("Riccati iteration did not converge in {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("R + B'PB is singular")]
    Singular,
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("unknown model preset `{0}` (expected A5, A6 or A8)")]
    UnknownPreset(String),
}

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<(), DynamicsError> {
    if expected == actual {
        Ok(())
    } else {
        Err(DynamicsError::Dimension {
            what,
            expected,
            actual,
        })
    }
}

/// Stacked global LTI system `X(t+1) = A X(t) + B U(t)` with quadratic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MasModel {
    agents: usize,
    state_dim: usize,
    input_dim: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    s: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl MasModel {
    pub fn new(
        agents: usize,
        state_dim: usize,
        input_dim: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        s: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, DynamicsError> {
        let nx = agents * state_dim;
        let nu = agents * input_dim;
        check_dim("A rows", nx, a.nrows())?;
        check_dim("A cols", nx, a.ncols())?;
        check_dim("B rows", nx, b.nrows())?;
        check_dim("B cols", nu, b.ncols())?;
        check_dim("S rows", nx, s.nrows())?;
        check_dim("S cols", nx, s.ncols())?;
        check_dim("R rows", nu, r.nrows())?;
        check_dim("R cols", nu, r.ncols())?;
        for (name, m) in [("A", &a), ("B", &b), ("S", &s), ("R", &r)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(DynamicsError::NonFinite(name));
            }
        }
        for (name, m) in [("S", &s), ("R", &r)] {
            if (m - m.transpose()).amax() > PSD_TOLERANCE {
                return Err(DynamicsError::NotSymmetric(name));
            }
            let min_eig = m.clone().symmetric_eigenvalues().min();
            if min_eig < -PSD_TOLERANCE {
                return Err(DynamicsError::NotPsd(name, min_eig));
            }
        }
        Ok(Self {
            agents,
            state_dim,
            input_dim,
            a,
            b,
            s,
            r,
        })
    }

    /// Scalar-state, scalar-input agents with `B = S = R = I`.
    pub fn scalar_agents(a: DMatrix<f64>) -> Result<Self, DynamicsError> {
        let l = a.nrows();
        Self::new(
            l,
            1,
            1,
            a,
            DMatrix::identity(l, l),
            DMatrix::identity(l, l),
            DMatrix::identity(l, l),
        )
    }

    /// Named benchmark systems `A5`, `A6`, `A8` with `B = S = R = I`.
    pub fn preset(name: &str) -> Result<Self, DynamicsError> {
        let a = preset_matrix(name).ok_or_else(|| DynamicsError::UnknownPreset(name.into()))?;
        Self::scalar_agents(a)
    }

    pub fn agents(&self) -> usize {
        self.agents
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    /// Length of the global state vector (`nL`).
    pub fn state_len(&self) -> usize {
        self.agents * self.state_dim
    }
    /// Length of the global input vector (`mL`).
    pub fn input_len(&self) -> usize {
        self.agents * self.input_dim
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Index range of agent `agent` (0-based) inside the global state.
    pub fn state_range(&self, agent: usize) -> std::ops::Range<usize> {
        agent * self.state_dim..(agent + 1) * self.state_dim
    }

    /// Index range of agent `agent` (0-based) inside the global input.
    pub fn input_range(&self, agent: usize) -> std::ops::Range<usize> {
        agent * self.input_dim..(agent + 1) * self.input_dim
    }

    /// Diagonal block `R_ℓ` of the input weight.
    pub fn input_weight_block(&self, agent: usize) -> DMatrix<f64> {
        let r = self.input_range(agent);
        self.r
            .view((r.start, r.start), (self.input_dim, self.input_dim))
            .into_owned()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        check_dim("state", self.state_len(), x.len())?;
        check_dim("input", self.input_len(), u.len())?;
        Ok(&self.a * x + &self.b * u)
    }

    /// `XᵀSX + UᵀRU`.
    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, DynamicsError> {
        check_dim("state", self.state_len(), x.len())?;
        check_dim("input", self.input_len(), u.len())?;
        Ok(x.dot(&(&self.s * x)) + u.dot(&(&self.r * u)))
    }

    /// Closed-loop matrix `A − BK`.
    pub fn closed_loop(&self, gain: &GainMatrix) -> Result<DMatrix<f64>, DynamicsError> {
        check_dim("gain rows", self.input_len(), gain.matrix().nrows())?;
        check_dim("gain cols", self.state_len(), gain.matrix().ncols())?;
        Ok(&self.a - &self.b * gain.matrix())
    }
}

fn preset_matrix(name: &str) -> Option<DMatrix<f64>> {
    #[rustfmt::skip]
    const A8: [[f64; 8]; 8] = [
        [ 0.63,  0.05, -0.04,  0.03,  0.02, -0.01,  0.02, -0.01],
        [ 0.04,  0.59,  0.06, -0.03,  0.05,  0.00,  0.01,  0.00],
        [-0.02,  0.03,  0.56,  0.04, -0.02,  0.02, -0.02,  0.01],
        [ 0.03, -0.02,  0.02,  0.58,  0.06,  0.01, -0.00, -0.01],
        [ 0.02,  0.03, -0.02,  0.04,  0.57,  0.01,  0.00,  0.01],
        [ 0.02,  0.00, -0.03, -0.02, -0.02,  0.60, -0.01,  0.03],
        [-0.02, -0.03,  0.02, -0.00,  0.01,  0.02,  0.58, -0.03],
        [ 0.01, -0.01,  0.03,  0.02,  0.01, -0.00, -0.03,  0.59],
    ];
    // A5 and A6 are the leading principal blocks of A8.
    let size = match name {
        "A5" | "a5" => 5,
        "A6" | "a6" => 6,
        "A8" | "a8" => 8,
        _ => return None,
    };
    Some(DMatrix::from_fn(size, size, |i, j| A8[i][j]))
}

/// Stacked feedback gain `K` (mL × nL); agent ℓ owns rows `ℓm..(ℓ+1)m`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    k: DMatrix<f64>,
    input_dim: usize,
}

impl GainMatrix {
    pub fn new(k: DMatrix<f64>, input_dim: usize) -> Result<Self, DynamicsError> {
        if input_dim == 0 || k.nrows() % input_dim != 0 {
            return Err(DynamicsError::Dimension {
                what: "gain rows (multiple of input dim)",
                expected: input_dim,
                actual: k.nrows(),
            });
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("K"));
        }
        Ok(Self { k, input_dim })
    }

    pub fn zeros(model: &MasModel) -> Self {
        Self {
            k: DMatrix::zeros(model.input_len(), model.state_len()),
            input_dim: model.input_dim(),
        }
    }

    /// Stacks per-agent row blocks `K_ℓ` (each m × nL).
    pub fn from_agent_rows(rows: &[DMatrix<f64>]) -> Result<Self, DynamicsError> {
        let input_dim = rows.first().map_or(1, |r| r.nrows());
        let cols = rows.first().map_or(0, |r| r.ncols());
        let mut k = DMatrix::zeros(rows.len() * input_dim, cols);
        for (i, row) in rows.iter().enumerate() {
            check_dim("agent gain rows", input_dim, row.nrows())?;
            check_dim("agent gain cols", cols, row.ncols())?;
            k.view_mut((i * input_dim, 0), (input_dim, cols)).copy_from(row);
        }
        Self::new(k, input_dim)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn agents(&self) -> usize {
        self.k.nrows() / self.input_dim
    }

    /// Row block `K_ℓ` of agent `agent` (0-based).
    pub fn agent_block(&self, agent: usize) -> DMatrix<f64> {
        self.k
            .view((agent * self.input_dim, 0), (self.input_dim, self.k.ncols()))
            .into_owned()
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub gain: GainMatrix,
    /// Frobenius norm of the DARE defect at `p`.
    pub residual: f64,
    pub iterations: usize,
}

/// One application of the Riccati map; returns the updated `P` and the gain
/// `(R + BᵀPB)⁻¹BᵀPA` associated with the input `P`.
fn riccati_map(
    model: &MasModel,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    let (a, b) = (model.a(), model.b());
    let pa = p * a;
    let gram = model.r() + b.transpose() * p * b;
    let k = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&(b.transpose() * &pa)))
        .or_else(|| gram.clone().try_inverse().map(|g| g * b.transpose() * &pa))
        .ok_or(DynamicsError::Singular)?;
    let next = a.transpose() * &pa - a.transpose() * p * b * &k + model.s();
    Ok((symmetrize(next), k))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Solves the DARE by value iteration from `P₀ = S`, stopping once the
/// Frobenius defect `‖P − F(P)‖` drops below `tol`.
///
/// `(A, B)` must be stabilizable; this is not checked.
pub fn solve_dare(
    model: &MasModel,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, DynamicsError> {
    if !(tol > 0.0) {
        return Err(DynamicsError::BadTolerance(tol));
    }
    let mut p = model.s().clone();
    let mut residual = f64::INFINITY;
    for iteration in 0..=max_iter {
        let (next, k) = riccati_map(model, &p)?;
        residual = (&next - &p).norm();
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            return Ok(RiccatiSolution {
                p,
                gain: GainMatrix::new(k, model.input_dim())?,
                residual,
                iterations: iteration,
            });
        }
        p = next;
    }
    Err(DynamicsError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Frobenius norm of `P − (AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + S)`.
pub fn dare_residual(model: &MasModel, p: &DMatrix<f64>) -> Result<f64, DynamicsError> {
    let (next, _) = riccati_map(model, p)?;
    Ok((next - p).norm())
}

/// Largest eigenvalue modulus, including complex pairs (real Schur form).
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, DynamicsError> {
    check_dim("square matrix cols", m.nrows(), m.ncols())?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite("M"));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub blown_up: bool,
    /// Sum of `stage_costs`.
    pub cost: f64,
}

/// Simulates `U(t) = −K X(t)` for `horizon` steps. The run is truncated as
/// soon as a state's max-norm exceeds `blowup_threshold`.
pub fn rollout(
    model: &MasModel,
    gain: &GainMatrix,
    x0: &DVector<f64>,
    horizon: usize,
    blowup_threshold: f64,
) -> Result<Trajectory, DynamicsError> {
    check_dim("initial state", model.state_len(), x0.len())?;
    check_dim("gain rows", model.input_len(), gain.matrix().nrows())?;
    check_dim("gain cols", model.state_len(), gain.matrix().ncols())?;
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(horizon),
        stage_costs: Vec::with_capacity(horizon),
        blown_up: false,
        cost: 0.0,
    };
    let mut x = x0.clone();
    for _ in 0..horizon {
        if exceeds(&x, blowup_threshold) {
            traj.blown_up = true;
            return Ok(traj);
        }
        let u = -(gain.matrix() * &x);
        let c = model.stage_cost(&x, &u)?;
        x = model.step(&x, &u)?;
        traj.stage_costs.push(c);
        traj.cost += c;
        traj.inputs.push(u);
        traj.states.push(x.clone());
    }
    traj.blown_up = exceeds(&x, blowup_threshold);
    Ok(traj)
}

fn exceeds(x: &DVector<f64>, threshold: f64) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > threshold)
}
