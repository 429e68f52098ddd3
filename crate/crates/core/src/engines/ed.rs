//! Exact evolution `exp(−iHt)`: dense eigendecomposition on each invariant
//! block of `H` up to a size threshold, Lanczos exponential above it.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::algebra::{DenseVector, SparseOperator, C64, DENSE_THRESHOLD, ZERO};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdOptions {
    /// Largest block handled by dense diagonalization.
    pub dense_threshold: usize,
    /// Krylov subspace dimension.
    pub krylov_dim: usize,
    /// Local error tolerance per Krylov step.
    pub tol: f64,
}

impl Default for EdOptions {
    fn default() -> Self {
        EdOptions { dense_threshold: DENSE_THRESHOLD, krylov_dim: 40, tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Dense { idx: Vec<usize>, evals: Vec<f64>, evecs: faer::Mat<C64> },
    Krylov { idx: Vec<usize>, h: SparseOperator, norm_bound: f64 },
}

impl Block {
    fn idx(&self) -> &[usize] {
        match self {
            Block::Dense { idx, .. } | Block::Krylov { idx, .. } => idx,
        }
    }
}

/// Reusable propagator for a fixed Hermitian `H`.
#[derive(Debug, Clone)]
pub struct Propagator {
    dim: usize,
    blocks: Vec<Block>,
    opts: EdOptions,
}

fn sub_operator(h: &SparseOperator, idx: &[usize]) -> SparseOperator {
    let mut pos = vec![usize::MAX; h.dim];
    for (i, &g) in idx.iter().enumerate() {
        pos[g] = i;
    }
    let mut trip = Vec::new();
    for (i, &g) in idx.iter().enumerate() {
        for (c, v) in h.row(g) {
            trip.push((i, pos[c], v));
        }
    }
    SparseOperator::from_triplets(idx.len(), trip)
}

impl Propagator {
    pub fn new(h: &SparseOperator) -> Result<Self> {
        Self::with_options(h, EdOptions::default())
    }

    pub fn with_options(h: &SparseOperator, opts: EdOptions) -> Result<Self> {
        h.check_hermitian()?;
        if opts.krylov_dim < 2 || !(opts.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("bad propagator options {opts:?}")));
        }
        let blocks = h
            .invariant_blocks()
            .into_par_iter()
            .map(|idx| {
                let sub = sub_operator(h, &idx);
                if idx.len() <= opts.dense_threshold {
                    let d = sub.to_dense();
                    let m = faer::Mat::<C64>::from_fn(d.nrows(), d.ncols(), |i, j| 0.5 * (d[(i, j)] + d[(j, i)].conj()));
                    let eig = m
                        .self_adjoint_eigen(faer::Side::Lower)
                        .map_err(|e| Error::InvalidParameter(format!("eigendecomposition failed: {e:?}")))?;
                    let evals = (0..m.nrows()).map(|k| eig.S()[k].re).collect();
                    Ok(Block::Dense { idx, evals, evecs: eig.U().to_owned() })
                } else {
                    let norm_bound = (0..sub.dim).map(|r| sub.row(r).map(|(_, v)| v.norm()).sum::<f64>()).fold(0.0, f64::max);
                    Ok(Block::Krylov { idx, h: sub, norm_bound })
                }
            })
            .collect::<Result<_>>()?;
        Ok(Propagator { dim: h.dim, blocks, opts })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.idx().len()).collect()
    }

    pub fn uses_krylov(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b, Block::Krylov { .. }))
    }

    /// `exp(−iHt) v`. Negative `t` evolves backwards.
    pub fn evolve(&self, v: &[C64], t: f64) -> Result<Vec<C64>> {
        if v.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: v.len() });
        }
        if !t.is_finite() {
            return Err(Error::InvalidParameter(format!("evolution time {t}")));
        }
        let parts: Vec<Vec<C64>> = self
            .blocks
            .par_iter()
            .map(|b| {
                let x: Vec<C64> = b.idx().iter().map(|&i| v[i]).collect();
                if x.iter().all(|z| *z == ZERO) || t == 0.0 {
                    return Ok(x);
                }
                match b {
                    Block::Dense { evals, evecs, .. } => {
                        let xv = faer::Col::<C64>::from_fn(x.len(), |i| x[i]);
                        let mut c = evecs.adjoint() * &xv;
                        for (j, &e) in evals.iter().enumerate() {
                            c[j] *= C64::from_polar(1.0, -e * t);
                        }
                        let y = evecs * &c;
                        Ok((0..x.len()).map(|i| y[i]).collect())
                    }
                    Block::Krylov { h, norm_bound, .. } => krylov_expm(h, &x, t, *norm_bound, &self.opts),
                }
            })
            .collect::<Result<_>>()?;
        let mut out = vec![ZERO; self.dim];
        for (b, y) in self.blocks.iter().zip(parts) {
            for (&i, z) in b.idx().iter().zip(y) {
                out[i] = z;
            }
        }
        Ok(out)
    }

    pub fn evolve_vector(&self, v: &DenseVector, t: f64) -> Result<DenseVector> {
        DenseVector::with_layout(self.evolve(&v.amps, t)?, v.layout.clone())
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// One Lanczos step: returns `exp(−iHτ)x` and the local error estimate.
fn lanczos_step(h: &SparseOperator, x: &[C64], tau: f64, m: usize) -> (Vec<C64>, f64) {
    let n = x.len();
    let beta0 = norm(x);
    let mut basis: Vec<Vec<C64>> = vec![x.iter().map(|z| z / beta0).collect()];
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut w = vec![ZERO; n];
    let mut tail = 0.0;
    let m = m.min(n);
    for j in 0..m {
        h.apply_into(&basis[j], &mut w);
        let a = dot(&basis[j], &w).re;
        alpha.push(a);
        // full reorthogonalization on small blocks; on large ones only
        // against the last two vectors (three-term recurrence) since the
        // O(m²n) cost dominates the matvecs there
        let start = if n < 1024 { 0 } else { basis.len().saturating_sub(2) };
        let passes = if n < 1024 { 2 } else { 1 };
        for _ in 0..passes {
            for q in &basis[start..] {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = norm(&w);
        if j + 1 == m || b < 1e-13 * (a.abs() + 1.0) {
            tail = if j + 1 == m { b } else { 0.0 };
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|z| z / b).collect());
    }
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let coef: Vec<C64> = (0..k)
        .map(|i| {
            (0..k)
                .map(|l| eig.eigenvectors[(i, l)] * eig.eigenvectors[(0, l)] * C64::from_polar(1.0, -tau * eig.eigenvalues[l]))
                .sum::<C64>()
        })
        .collect();
    let mut y = vec![ZERO; n];
    for (q, c) in basis.iter().zip(&coef) {
        let c = c * beta0;
        for (yi, qi) in y.iter_mut().zip(q) {
            *yi += c * qi;
        }
    }
    let err = beta0 * tail * coef[k - 1].norm();
    (y, err)
}

fn krylov_expm(h: &SparseOperator, x: &[C64], t: f64, norm_bound: f64, opts: &EdOptions) -> Result<Vec<C64>> {
    let sign = t.signum();
    let total = t.abs();
    let mut done = 0.0;
    let mut tau = if norm_bound > 0.0 { total.min(10.0 / norm_bound) } else { total };
    let mut v = x.to_vec();
    let mut rejections = 0usize;
    while done < total {
        let step = tau.min(total - done);
        let (y, err) = lanczos_step(h, &v, sign * step, opts.krylov_dim);
        if err <= opts.tol {
            v = y;
            done += step;
            if err < 0.1 * opts.tol {
                tau = step * 1.5;
            }
        } else {
            tau = 0.5 * step;
            rejections += 1;
            if tau < total * 1e-14 || rejections > 10_000 {
                return Err(Error::KrylovNonConvergence(format!("step collapsed to {tau:e} s with error {err:e}")));
            }
        }
    }
    Ok(v)
}

/// `exp(−iHt) v` for `t ≥ 0`; builds a throwaway [`Propagator`].
pub fn ed_evolve(v: &DenseVector, h: &SparseOperator, t: f64) -> Result<DenseVector> {
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("negative evolution time {t}")));
    }
    Propagator::new(h)?.evolve_vector(v, t)
}

/// Applies `f` to the sub-vector on `slots` for every assignment of the
/// remaining tensor factors. The sub-vector is ordered as `slots` lists them.
pub fn apply_on_slots<F>(v: &DenseVector, slots: &[usize], f: F) -> Result<DenseVector>
where
    F: Fn(&[C64]) -> Result<Vec<C64>> + Sync,
{
    let dims = v.layout.dims().to_vec();
    if slots.is_empty() || slots.iter().any(|&s| s >= dims.len()) {
        return Err(Error::InvalidParameter(format!("slots {slots:?} invalid for layout {dims:?}")));
    }
    let strides = v.layout.strides();
    let rest: Vec<usize> = (0..dims.len()).filter(|s| !slots.contains(s)).collect();
    let sub_dims: Vec<usize> = slots.iter().map(|&s| dims[s]).collect();
    let sub_len: usize = sub_dims.iter().product();
    // flat offsets of the sub-vector entries relative to a slice base
    let offsets: Vec<usize> = (0..sub_len)
        .map(|mut k| {
            let mut off = 0;
            for (j, &s) in slots.iter().enumerate().rev() {
                off += (k % sub_dims[j]) * strides[s];
                k /= sub_dims[j];
            }
            off
        })
        .collect();
    let n_rest: usize = rest.iter().map(|&s| dims[s]).product();
    let bases: Vec<usize> = (0..n_rest)
        .map(|mut k| {
            let mut off = 0;
            for &s in rest.iter().rev() {
                off += (k % dims[s]) * strides[s];
                k /= dims[s];
            }
            off
        })
        .collect();
    let results: Vec<Vec<C64>> = bases
        .par_iter()
        .map(|&b| {
            let x: Vec<C64> = offsets.iter().map(|&o| v.amps[b + o]).collect();
            let y = f(&x)?;
            if y.len() != sub_len {
                return Err(Error::Shape { expected: sub_len, got: y.len() });
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![ZERO; v.len()];
    for (b, y) in bases.iter().zip(results) {
        for (o, z) in offsets.iter().zip(y) {
            out[b + o] = z;
        }
    }
    DenseVector::with_layout(out, v.layout.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{collective_spin_ops, embed, Layout, I};

    fn random_hermitian(dim: usize, seed: u64) -> SparseOperator {
        // deterministic pseudo-random banded Hermitian matrix
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut trip = Vec::new();
        for i in 0..dim {
            trip.push((i, i, C64::new(next(), 0.0)));
            for d in [1, 3] {
                if i + d < dim {
                    let z = C64::new(next(), next());
                    trip.push((i, i + d, z));
                    trip.push((i + d, i, z.conj()));
                }
            }
        }
        SparseOperator::from_triplets(dim, trip)
    }

    fn start(dim: usize) -> Vec<C64> {
        let mut v: Vec<C64> = (0..dim).map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|z| *z /= n);
        v
    }

    #[test]
    fn diagonal_gives_phases() {
        let h = SparseOperator::diagonal(&[C64::new(1.0, 0.0), C64::new(-2.0, 0.0), C64::new(0.5, 0.0)]);
        let v = start(3);
        let w = Propagator::new(&h).unwrap().evolve(&v, 0.7).unwrap();
        for i in 0..3 {
            assert!((w[i].norm() - v[i].norm()).abs() < 1e-14);
        }
        assert!((w[1] - v[1] * C64::from_polar(1.0, 1.4)).norm() < 1e-14);
    }

    #[test]
    fn dense_and_krylov_agree_with_expm() {
        let dim = 60;
        let h = random_hermitian(dim, 7);
        let v = start(dim);
        let t = 3.3;
        let exact = (h.to_dense() * (-I * t)).exp() * nalgebra::DVector::from_vec(v.clone());
        let dense = Propagator::new(&h).unwrap();
        assert!(!dense.uses_krylov());
        let kry = Propagator::with_options(&h, EdOptions { dense_threshold: 10, krylov_dim: 12, tol: 1e-11 }).unwrap();
        assert!(kry.uses_krylov());
        for p in [&dense, &kry] {
            let w = p.evolve(&v, t).unwrap();
            for i in 0..dim {
                assert!((w[i] - exact[i]).norm() < 1e-8, "{i}");
            }
        }
        let back = kry.evolve(&kry.evolve(&v, t).unwrap(), -t).unwrap();
        for i in 0..dim {
            assert!((back[i] - v[i]).norm() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_hermitian() {
        let h = SparseOperator::from_triplets(2, vec![(0, 1, C64::new(1.0, 0.0))]);
        assert!(matches!(Propagator::new(&h), Err(Error::NotHermitian { .. })));
        assert!(ed_evolve(&DenseVector::from_amps(start(2)), &SparseOperator::identity(2), -1.0).is_err());
    }

    #[test]
    fn energy_and_norm_conserved_n20() {
        let ops = collective_spin_ops(20).unwrap();
        let layout = Layout::new(vec![21, 21]);
        let flip = embed(&ops.sp, 0, &layout).unwrap().mul(&embed(&ops.sm, 1, &layout).unwrap());
        let h = flip.add(&flip.adjoint()).add(&embed(&ops.sx, 0, &layout).unwrap().scale_re(0.3));
        let v = DenseVector::with_layout(start(441), layout).unwrap();
        let e0 = v.expectation(&h).re;
        for opts in [EdOptions::default(), EdOptions { dense_threshold: 0, krylov_dim: 30, tol: 1e-10 }] {
            let p = Propagator::with_options(&h, opts).unwrap();
            let w = p.evolve_vector(&v, 2.0).unwrap();
            assert!((w.norm() - 1.0).abs() < 1e-9);
            assert!((w.expectation(&h).re - e0).abs() < 1e-9 * e0.abs().max(1.0));
        }
    }

    #[test]
    fn slots_application() {
        let layout = Layout::new(vec![2, 3, 2]);
        let v = DenseVector::with_layout(start(12), layout.clone()).unwrap();
        // swapping the two qubit slots' roles: apply X on slot 2 only
        let w = apply_on_slots(&v, &[2], |x| Ok(vec![x[1], x[0]])).unwrap();
        for d in 0..12 {
            let g = layout.digits(d);
            let src = layout.index(&[g[0], g[1], 1 - g[2]]);
            assert_eq!(w.amps[d], v.amps[src]);
        }
        // pair (2, 0) ordering: sub index = 2*digit2 + digit0
        let w = apply_on_slots(&v, &[2, 0], |x| Ok(vec![x[0], x[2], x[1], x[3]])).unwrap();
        for d in 0..12 {
            let g = layout.digits(d);
            let src = layout.index(&[g[2], g[1], g[0]]);
            assert_eq!(w.amps[d], v.amps[src]);
        }
    }
}
