//! Bosonized (Holstein–Primakoff) covariance dynamics for three modes.
//!
//! Mode ordering `u = (a, a†, b, b†, c, c†)`; `C_ij = ½⟨u_i u_j + u_j u_i⟩ −
//! ⟨u_i⟩⟨u_j⟩`. The quadrature basis is `(X_a, P_a, X_b, P_b, X_c, P_c)`
//! with `X = (l + l†)/√2`, `P = −i(l − l†)/√2`.

use nalgebra::{DMatrix, DVector};

use crate::algebra::{C64, I, ZERO};
use crate::error::{Error, Result};
use crate::model::{Stage, StageParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    pub mean: DVector<C64>,
    pub c: DMatrix<C64>,
}

impl CovarianceState {
    pub fn vacuum() -> Self {
        let mut c = DMatrix::zeros(6, 6);
        for m in 0..3 {
            c[(2 * m, 2 * m + 1)] = C64::new(0.5, 0.0);
            c[(2 * m + 1, 2 * m)] = C64::new(0.5, 0.0);
        }
        CovarianceState { mean: DVector::zeros(6), c }
    }

    /// Linear flow `u̇ = k u`, i.e. `C(t) = e^{kt} C e^{kᵀt}`.
    pub fn evolve(&self, kernel: &DMatrix<C64>, t: f64) -> Result<Self> {
        check_kernel(kernel)?;
        let e = (kernel * C64::new(t, 0.0)).exp();
        if e.iter().any(|z| !z.is_finite()) {
            return Err(Error::Integrator("matrix exponential overflow".into()));
        }
        Ok(CovarianceState { mean: &e * &self.mean, c: &e * &self.c * e.transpose() })
    }

    /// Fixed-step RK4 integration of `Ċ = kC + Ckᵀ`; a cross-check of [`Self::evolve`].
    pub fn evolve_rk4(&self, kernel: &DMatrix<C64>, t: f64, steps: usize) -> Result<Self> {
        check_kernel(kernel)?;
        if steps == 0 {
            return Err(Error::Integrator("zero RK4 steps".into()));
        }
        let h = C64::new(t / steps as f64, 0.0);
        let kt = kernel.transpose();
        let f = |c: &DMatrix<C64>| kernel * c + c * &kt;
        let g = |m: &DVector<C64>| kernel * m;
        let (mut c, mut m) = (self.c.clone(), self.mean.clone());
        let half = h * 0.5;
        for _ in 0..steps {
            let k1 = f(&c);
            let k2 = f(&(&c + &k1 * half));
            let k3 = f(&(&c + &k2 * half));
            let k4 = f(&(&c + &k3 * h));
            c += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * (h / 6.0);
            let l1 = g(&m);
            let l2 = g(&(&m + &l1 * half));
            let l3 = g(&(&m + &l2 * half));
            let l4 = g(&(&m + &l3 * h));
            m += (l1 + l2 * C64::new(2.0, 0.0) + l3 * C64::new(2.0, 0.0) + l4) * (h / 6.0);
        }
        if c.iter().any(|z| !z.is_finite()) {
            return Err(Error::Integrator("RK4 diverged".into()));
        }
        Ok(CovarianceState { mean: m, c })
    }

    pub fn to_xp(&self) -> XpState {
        let r = xp_transform();
        let cov = &r * &self.c * r.transpose();
        let mean = &r * &self.mean;
        XpState { mean: mean.map(|z| z.re), cov: cov.map(|z| z.re) }
    }
}

fn check_kernel(k: &DMatrix<C64>) -> Result<()> {
    if k.shape() != (6, 6) {
        return Err(Error::Shape { expected: 6, got: k.nrows() });
    }
    Ok(())
}

/// `R = diag(T, T, T)`, `T = [[1, 1], [−i, i]]/√2`.
pub fn xp_transform() -> DMatrix<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut r = DMatrix::zeros(6, 6);
    for m in 0..3 {
        let (x, p) = (2 * m, 2 * m + 1);
        r[(x, x)] = C64::new(s, 0.0);
        r[(x, p)] = C64::new(s, 0.0);
        r[(p, x)] = C64::new(0.0, -s);
        r[(p, p)] = C64::new(0.0, s);
    }
    r
}

/// Kernel of the entangling stage, with the c rows and columns zero.
pub fn covariance_kernel(params: &StageParams) -> Result<DMatrix<C64>> {
    if params.stage != Stage::Tms {
        return Err(Error::InvalidParameter("covariance kernel needs TMS stage parameters".into()));
    }
    let (na, nb) = (params.n[0] as f64, params.n[1] as f64);
    let da = params.detuning - na * params.chi[0][0];
    let db = params.detuning - nb * params.chi[1][1];
    let x = params.chi[0][1] * (na * nb).sqrt();
    let mut k = DMatrix::from_element(6, 6, ZERO);
    k[(0, 0)] = -I * da;
    k[(0, 3)] = I * x;
    k[(1, 1)] = I * da;
    k[(1, 2)] = -I * x;
    k[(2, 1)] = I * x;
    k[(2, 2)] = -I * db;
    k[(3, 0)] = -I * x;
    k[(3, 3)] = I * db;
    Ok(k)
}

/// Quadrature means and covariance `(X_a, P_a, X_b, P_b, X_c, P_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct XpState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl XpState {
    pub fn vacuum() -> Self {
        XpState { mean: DVector::zeros(6), cov: DMatrix::identity(6, 6) * 0.5 }
    }

    /// Resonant two-mode squeezed vacuum on (a, b) with signed strength `r`.
    pub fn tms_closed_form(r: f64) -> Self {
        let mut s = Self::vacuum();
        let (ch, sh) = (0.5 * (2.0 * r).cosh(), 0.5 * (2.0 * r).sinh());
        for i in 0..4 {
            s.cov[(i, i)] = ch;
        }
        s.cov[(0, 3)] = sh;
        s.cov[(3, 0)] = sh;
        s.cov[(1, 2)] = sh;
        s.cov[(2, 1)] = sh;
        s
    }

    pub fn apply(&self, s: &DMatrix<f64>) -> Self {
        XpState { mean: s * &self.mean, cov: s * &self.cov * s.transpose() }
    }

    /// Beam-splitter mixing of a and c by angle `θ`.
    pub fn bs(&self, theta: f64) -> Self {
        self.apply(&bs_matrix(theta))
    }

    /// `V[Σ w_i q_i]`
    pub fn variance(&self, w: &[f64; 6]) -> f64 {
        let w = DVector::from_row_slice(w);
        (w.transpose() * &self.cov * &w)[(0, 0)]
    }

    /// `det(2C)` restricted to the listed modes (0 = a, 1 = b, 2 = c).
    pub fn det2(&self, modes: &[usize]) -> f64 {
        let idx: Vec<usize> = modes.iter().flat_map(|&m| [2 * m, 2 * m + 1]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| 2.0 * self.cov[(idx[i], idx[j])]);
        sub.determinant()
    }

    /// Bosonized witness `(V[X_a + P_b] + V[X_b + P_a]) / 2`.
    pub fn witness(&self) -> f64 {
        0.5 * (self.variance(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]) + self.variance(&[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]))
    }

    /// Predicted `(V[S_y^b − S_z^a], V[S_z^b + S_y^a])` for ensembles of
    /// `n_a`, `n_b` spins polarized along lab `−x` (a) and `+x` (b).
    pub fn hybrid_variances(&self, n_a: usize, n_b: usize) -> (f64, f64) {
        let (ka, kb) = ((n_a as f64 / 2.0).sqrt(), (n_b as f64 / 2.0).sqrt());
        // S_z^a ≈ −ka X_a, S_y^a ≈ −ka P_a, S_y^b ≈ kb P_b, S_z^b ≈ −kb X_b
        (self.variance(&[ka, 0.0, 0.0, kb, 0.0, 0.0]), self.variance(&[0.0, ka, kb, 0.0, 0.0, 0.0]))
    }
}

/// `X_a' = cosθ X_a + sinθ P_c`, `P_a' = cosθ P_a − sinθ X_c`,
/// `X_c' = cosθ X_c + sinθ P_a`, `P_c' = cosθ P_c − sinθ X_a`.
pub fn bs_matrix(theta: f64) -> DMatrix<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    let mut m = DMatrix::identity(6, 6);
    m[(0, 0)] = c;
    m[(0, 5)] = s;
    m[(1, 1)] = c;
    m[(1, 4)] = -s;
    m[(4, 4)] = c;
    m[(4, 1)] = s;
    m[(5, 5)] = c;
    m[(5, 0)] = -s;
    m
}

/// Symplectic form `Ω = ⊕ [[0, 1], [−1, 0]]`.
pub fn symplectic_form() -> DMatrix<f64> {
    let mut w = DMatrix::zeros(6, 6);
    for m in 0..3 {
        w[(2 * m, 2 * m + 1)] = 1.0;
        w[(2 * m + 1, 2 * m)] = -1.0;
    }
    w
}

/// Real symplectic matrix of the linear flow `e^{kt}` in the XP basis.
pub fn flow_matrix(kernel: &DMatrix<C64>, t: f64) -> Result<DMatrix<f64>> {
    check_kernel(kernel)?;
    let r = xp_transform();
    let rinv = r.clone().try_inverse().ok_or_else(|| Error::Integrator("singular XP transform".into()))?;
    let e = (kernel * C64::new(t, 0.0)).exp();
    let s = &r * e * rinv;
    if s.iter().any(|z| z.im.abs() > 1e-9 * (1.0 + z.norm())) {
        return Err(Error::Integrator("flow is not real in the quadrature basis".into()));
    }
    Ok(s.map(|z| z.re))
}
