//! Witness, fidelities, squeezing, phase, Husimi-Q and scaling fits.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{collective_spin_ops, embed, DenseVector, Layout, SparseOperator, SpinOperatorSet, SpinRotor, C64, ZERO};
use crate::error::{Error, Result};
use crate::states;

/// Which basis the single-ensemble coordinates of a state are written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinBasis {
    Lab,
    Dressed,
}

fn lab_ops(n: usize, basis: SpinBasis) -> Result<SpinOperatorSet> {
    match basis {
        SpinBasis::Lab => collective_spin_ops(n),
        SpinBasis::Dressed => states::lab_operators_in_dressed(n),
    }
}

/// `(⟨A⟩, V[A])` for Hermitian `A`.
pub fn mean_and_variance(v: &DenseVector, op: &SparseOperator) -> (f64, f64) {
    let mut w = vec![ZERO; v.len()];
    op.apply_into(&v.amps, &mut w);
    let mean: C64 = v.amps.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
    let sq: f64 = w.iter().map(|z| z.norm_sqr()).sum();
    (mean.re, (sq - mean.re * mean.re).max(0.0))
}

/// Precomputed operators for repeated evaluation of
/// `V_s = (V[S_y^b − S_z^a] + V[S_z^b + S_y^a]) / (|⟨S_x^a⟩| + |⟨S_x^b⟩|)`
/// with lab-frame spin components.
#[derive(Debug, Clone)]
pub struct WitnessOps {
    minus: SparseOperator,
    plus: SparseOperator,
    sxa: SparseOperator,
    sxb: SparseOperator,
    n_bar: f64,
}

impl WitnessOps {
    pub fn new(layout: &Layout, slot_a: usize, slot_b: usize, basis: SpinBasis) -> Result<Self> {
        let dims = layout.dims();
        if slot_a >= dims.len() || slot_b >= dims.len() || slot_a == slot_b {
            return Err(Error::InvalidParameter(format!("witness slots ({slot_a}, {slot_b}) invalid for layout {dims:?}")));
        }
        let (na, nb) = (dims[slot_a] - 1, dims[slot_b] - 1);
        let oa = lab_ops(na, basis)?;
        let ob = lab_ops(nb, basis)?;
        let e = |op: &SparseOperator, slot| embed(op, slot, layout);
        let minus = e(&ob.sy, slot_b)?.sub(&e(&oa.sz, slot_a)?);
        let plus = e(&ob.sz, slot_b)?.add(&e(&oa.sy, slot_a)?);
        Ok(WitnessOps {
            minus,
            plus,
            sxa: e(&oa.sx, slot_a)?,
            sxb: e(&ob.sx, slot_b)?,
            n_bar: 0.5 * (na + nb) as f64,
        })
    }

    pub fn evaluate(&self, v: &DenseVector) -> Result<f64> {
        let (_, vm) = mean_and_variance(v, &self.minus);
        let (_, vp) = mean_and_variance(v, &self.plus);
        let den = v.expectation(&self.sxa).re.abs() + v.expectation(&self.sxb).re.abs();
        if den < 1e-9 * self.n_bar {
            return Err(Error::UndefinedWitness(den));
        }
        Ok((vm + vp) / den)
    }
}

/// One-shot witness evaluation; prefer [`WitnessOps`] inside scans.
pub fn witness_vs(v: &DenseVector, slot_a: usize, slot_b: usize, basis: SpinBasis) -> Result<f64> {
    WitnessOps::new(&v.layout, slot_a, slot_b, basis)?.evaluate(v)
}

pub fn density_matrix(v: &DenseVector) -> DMatrix<C64> {
    let d = v.len();
    DMatrix::from_fn(d, d, |i, j| v.amps[i] * v.amps[j].conj())
}

/// Reduced density matrix of one tensor slot.
pub fn reduced_density(v: &DenseVector, slot: usize) -> Result<DMatrix<C64>> {
    let dims = v.layout.dims();
    if slot >= dims.len() {
        return Err(Error::Shape { expected: dims.len(), got: slot });
    }
    let d = dims[slot];
    let inner: usize = dims[slot + 1..].iter().product();
    let outer: usize = dims[..slot].iter().product();
    let mut rho = DMatrix::<C64>::zeros(d, d);
    for o in 0..outer {
        for r in 0..inner {
            let base = o * d * inner + r;
            for i in 0..d {
                let ai = v.amps[base + i * inner];
                if ai == ZERO {
                    continue;
                }
                for j in 0..d {
                    rho[(i, j)] += ai * v.amps[base + j * inner].conj();
                }
            }
        }
    }
    Ok(rho)
}

/// `|⟨ψ|φ⟩|²`
pub fn fidelity_pure(psi: &DenseVector, phi: &DenseVector) -> Result<f64> {
    if psi.len() != phi.len() {
        return Err(Error::Shape { expected: psi.len(), got: phi.len() });
    }
    Ok(psi.inner(phi).norm_sqr())
}

/// `⟨ψ|ρ|ψ⟩`
pub fn fidelity_mixed_pure(rho: &DMatrix<C64>, psi: &DenseVector) -> Result<f64> {
    if rho.nrows() != psi.len() || rho.ncols() != psi.len() {
        return Err(Error::Shape { expected: psi.len(), got: rho.nrows() });
    }
    let mut acc = ZERO;
    for i in 0..psi.len() {
        for j in 0..psi.len() {
            acc += psi.amps[i].conj() * rho[(i, j)] * psi.amps[j];
        }
    }
    Ok(acc.re.clamp(0.0, 1.0))
}

fn hermitian_sqrt(m: &DMatrix<C64>) -> DMatrix<C64> {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let sq = eig.eigenvalues.map(|l| C64::new(l.max(0.0).sqrt(), 0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.adjoint()
}

/// `[Tr √(√ρ σ √ρ)]²`
pub fn uhlmann_fidelity(rho: &DMatrix<C64>, sigma: &DMatrix<C64>) -> Result<f64> {
    if rho.shape() != sigma.shape() || rho.nrows() != rho.ncols() {
        return Err(Error::Shape { expected: rho.nrows(), got: sigma.nrows() });
    }
    let s = hermitian_sqrt(rho);
    let m = &s * sigma * &s;
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let tr: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((tr * tr).clamp(0.0, 1.0))
}

/// Average fidelity of coherent-state teleportation for squeezing `s ≥ 0`.
pub fn hp_fidelity_sc(s: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * s).exp())
}

/// Same for a squeezed input with linear squeezing factor `xi` (ξ² < 1 squeezed).
pub fn hp_fidelity_ss(s: f64, xi: f64) -> f64 {
    let e = (-2.0 * s).exp();
    gaussian_overlap_fidelity(e, e, xi * xi)
}

/// Overlap of a Gaussian input with quadrature variances `ξ²/2, 1/(2ξ²)` and
/// its copy degraded by added noise `v1/2`, `v2/2` (in vacuum units).
pub fn gaussian_overlap_fidelity(v1: f64, v2: f64, xi2: f64) -> f64 {
    1.0 / ((1.0 + v1 * xi2) * (1.0 + v2 / xi2)).sqrt()
}

pub fn db_to_xi(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// First and (symmetrized) second moments of the collective spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinMoments {
    pub mean: [f64; 3],
    pub cov: [[f64; 3]; 3],
    pub n: usize,
}

pub fn spin_moments(v: &DenseVector) -> Result<SpinMoments> {
    let n = v.len().checked_sub(1).ok_or_else(|| Error::Size("empty state".into()))?;
    spin_moments_with(v, &collective_spin_ops(n)?)
}

pub fn spin_moments_with(v: &DenseVector, ops: &SpinOperatorSet) -> Result<SpinMoments> {
    if ops.dim() != v.len() {
        return Err(Error::Shape { expected: ops.dim(), got: v.len() });
    }
    let w: Vec<Vec<C64>> = [&ops.sx, &ops.sy, &ops.sz]
        .iter()
        .map(|op| {
            let mut w = vec![ZERO; v.len()];
            op.apply_into(&v.amps, &mut w);
            w
        })
        .collect();
    let dot = |x: &[C64], y: &[C64]| -> C64 { x.iter().zip(y).map(|(a, b)| a.conj() * b).sum() };
    let mut mean = [0.0; 3];
    for i in 0..3 {
        mean[i] = dot(&v.amps, &w[i]).re;
    }
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = dot(&w[i], &w[j]).re - mean[i] * mean[j];
        }
    }
    Ok(SpinMoments { mean, cov, n: ops.n })
}

impl SpinMoments {
    pub fn length(&self) -> f64 {
        self.mean.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Minimal variance over directions orthogonal to the mean spin.
    pub fn min_transverse_variance(&self) -> Result<f64> {
        let len = self.length();
        if len < 1e-9 * self.n.max(1) as f64 {
            return Err(Error::VanishingSpin);
        }
        let u = [self.mean[0] / len, self.mean[1] / len, self.mean[2] / len];
        // any vector not parallel to u
        let seed = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let e1 = normalize(cross(u, seed));
        let e2 = cross(u, e1);
        let q = |a: [f64; 3], b: [f64; 3]| -> f64 {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += a[i] * self.cov[i][j] * b[j];
                }
            }
            s
        };
        let (a, b, c) = (q(e1, e1), q(e1, e2), q(e2, e2));
        Ok(0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt())
    }

    /// Kitagawa–Ueda parameter `ξ² = 4 V_min,⊥ / N`.
    pub fn kitagawa_ueda_xi2(&self) -> Result<f64> {
        Ok(4.0 * self.min_transverse_variance()? / self.n as f64)
    }

    /// Wineland parameter `ξ² = N·V_min,⊥/|⟨S⟩|²`.
    pub fn wineland_xi2(&self) -> Result<f64> {
        let len = self.length();
        Ok(self.n as f64 * self.min_transverse_variance()? / (len * len))
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// `10 log₁₀ ξ²` of a single-ensemble state.
pub fn squeezing_db(v: &DenseVector) -> Result<f64> {
    Ok(10.0 * spin_moments(v)?.wineland_xi2()?.log10())
}

/// Azimuth of the mean spin in degrees, measured from `−x`, in (−180, 180].
pub fn phase_of(v: &DenseVector) -> Result<f64> {
    let m = spin_moments(v)?;
    phase_from_mean(m.mean, m.n)
}

pub fn phase_from_mean(mean: [f64; 3], n: usize) -> Result<f64> {
    if mean[0].abs() + mean[1].abs() < 1e-12 * n.max(1) as f64 {
        return Err(Error::VanishingSpin);
    }
    Ok((-mean[1]).atan2(-mean[0]).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// `P(M)` along a lab axis; index `k` holds `M = k − N/2`.
pub fn magnetization_distribution(v: &DenseVector, axis: Axis) -> Result<Vec<f64>> {
    let n = v.len().checked_sub(1).ok_or_else(|| Error::Size("empty state".into()))?;
    if axis == Axis::Z {
        return Ok(v.amps.iter().map(|a| a.norm_sqr()).collect());
    }
    magnetization_distribution_with(v, axis, &SpinRotor::new(n)?)
}

pub fn magnetization_distribution_with(v: &DenseVector, axis: Axis, rotor: &SpinRotor) -> Result<Vec<f64>> {
    if rotor.dim() != v.len() {
        return Err(Error::Shape { expected: rotor.dim(), got: v.len() });
    }
    let w = match axis {
        Axis::Z => return Ok(v.amps.iter().map(|a| a.norm_sqr()).collect()),
        Axis::X => v.amps.clone(),
        // S_y eigenvectors are e^{-iπ/2 S_z} applied to those of S_x
        Axis::Y => rotor.rz(-std::f64::consts::FRAC_PI_2, &v.amps),
    };
    let vx = rotor.sx_eigenvectors();
    Ok((0..v.len())
        .map(|k| w.iter().enumerate().map(|(i, a)| a * vx[(i, k)]).sum::<C64>().norm_sqr())
        .collect())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Husimi-Q on a `θ × φ` grid (row-major in θ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HusimiGrid {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    /// `|⟨ψ_SC(θ,φ)|ψ⟩|² / 4π`
    pub q: Vec<f64>,
    /// `(N+1)|⟨ψ_SC(θ,φ)|ψ⟩|² / 4π`, integrates to one over the sphere.
    pub q_normalized: Vec<f64>,
}

impl HusimiGrid {
    pub fn at(&self, i_theta: usize, i_phi: usize) -> f64 {
        self.q[i_theta * self.phi.len() + i_phi]
    }

    /// `(θ, φ)` of the largest grid value.
    pub fn argmax(&self) -> (f64, f64) {
        let (idx, _) = self.q.iter().enumerate().fold((0, f64::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        (self.theta[idx / self.phi.len()], self.phi[idx % self.phi.len()])
    }

    /// Riemann sum of the normalized variant over the sphere.
    pub fn integral(&self) -> f64 {
        let dt = std::f64::consts::PI / self.theta.len() as f64;
        let dp = 2.0 * std::f64::consts::PI / self.phi.len() as f64;
        let mut s = 0.0;
        for (i, th) in self.theta.iter().enumerate() {
            for j in 0..self.phi.len() {
                s += self.q_normalized[i * self.phi.len() + j] * th.sin() * dt * dp;
            }
        }
        s
    }
}

/// Midpoint grid in θ ∈ (0, π), uniform φ ∈ [0, 2π).
pub fn husimi_q(v: &DenseVector, n_theta: usize, n_phi: usize) -> Result<HusimiGrid> {
    if n_theta == 0 || n_phi == 0 || v.is_empty() {
        return Err(Error::InvalidParameter("empty Husimi grid".into()));
    }
    let n = v.len() - 1;
    let pi = std::f64::consts::PI;
    let theta: Vec<f64> = (0..n_theta).map(|i| (i as f64 + 0.5) * pi / n_theta as f64).collect();
    let phi: Vec<f64> = (0..n_phi).map(|j| j as f64 * 2.0 * pi / n_phi as f64).collect();
    let raw: Vec<f64> = theta
        .par_iter()
        .flat_map_iter(|&th| {
            // real magnitudes; the φ dependence is a pure phase per m
            let mags: Vec<f64> = states::spin_coherent_amps(n, th, 0.0).iter().map(|a| a.re).collect();
            phi.iter()
                .map(|&ph| {
                    let s = n as f64 / 2.0;
                    let ov: C64 = (0..=n).map(|k| v.amps[k] * mags[k] * C64::from_polar(1.0, ph * (k as f64 - s))).sum();
                    ov.norm_sqr()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let four_pi = 4.0 * pi;
    Ok(HusimiGrid {
        q: raw.iter().map(|x| x / four_pi).collect(),
        q_normalized: raw.iter().map(|x| x * (n + 1) as f64 / four_pi).collect(),
        theta,
        phi,
    })
}

/// `F̄(N̄) = 1 − A/N̄^p`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub amplitude: f64,
    pub exponent: f64,
    pub residual_norm: f64,
}

/// Least squares of `ln(1 − F̄) = ln A − p ln N̄`.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 4 {
        return Err(Error::DegenerateFit(format!("need at least 4 points, got {}", points.len())));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::DegenerateFit("N̄ values must be strictly increasing".into()));
    }
    if points.iter().any(|&(n, f)| n <= 0.0 || !(f < 1.0) || !f.is_finite()) {
        return Err(Error::DegenerateFit("requires N̄ > 0 and F̄ < 1".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (1.0 - p.1).ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx < 1e-300 {
        return Err(Error::DegenerateFit("zero spread in ln N̄".into()));
    }
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let residual_norm = xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum::<f64>().sqrt();
    Ok(FitResult { amplitude: icpt.exp(), exponent: -slope, residual_norm })
}
