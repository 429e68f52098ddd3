//! Collective spin operators in the maximal-spin (Dicke) sector, truncated
//! phonon ladders, and tensor-product composition.
//!
//! Basis convention: a single ensemble of `N` spins lives in an `N+1`
//! dimensional space with basis `|m>`, `m = -N/2 ..= N/2`, stored at index
//! `k = m + N/2`. Tensor layouts are row-major: slot 0 is the slowest
//! varying index.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Largest Hilbert-space dimension any builder will allocate.
pub const DEFAULT_DIM_BUDGET: usize = 1 << 24;

/// Below this dimension operators may be converted to dense form and
/// diagonalized directly.
pub const DENSE_THRESHOLD: usize = 4096;

/// Dimensions of the tensor factors of a composite Hilbert space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layout(pub Vec<usize>);

impl Layout {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Layout(dims.into())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().product()
    }

    /// Checked total dimension against a budget.
    pub fn checked_total(&self, budget: usize) -> Result<usize> {
        let mut acc: usize = 1;
        for &d in &self.0 {
            acc = acc
                .checked_mul(d)
                .filter(|&v| v <= budget)
                .ok_or_else(|| Error::Size(format!("layout {:?} exceeds dimension budget {budget}", self.0)))?;
        }
        Ok(acc)
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }

    pub fn index(&self, digits: &[usize]) -> usize {
        self.strides().iter().zip(digits).map(|(s, d)| s * d).sum()
    }

    pub fn digits(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.0.len()];
        for (slot, &d) in self.0.iter().enumerate().rev() {
            out[slot] = idx % d;
            idx /= d;
        }
        out
    }
}

/// Complex state vector over a declared tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    pub amps: Vec<C64>,
    pub layout: Layout,
}

impl DenseVector {
    pub fn zeros(layout: Layout) -> Self {
        DenseVector { amps: vec![ZERO; layout.total()], layout }
    }

    pub fn from_amps(amps: Vec<C64>) -> Self {
        let layout = Layout::new(vec![amps.len()]);
        DenseVector { amps, layout }
    }

    pub fn with_layout(amps: Vec<C64>, layout: Layout) -> Result<Self> {
        if amps.len() != layout.total() {
            return Err(Error::Shape { expected: layout.total(), got: amps.len() });
        }
        Ok(DenseVector { amps, layout })
    }

    pub fn basis(layout: Layout, index: usize) -> Self {
        let mut v = DenseVector::zeros(layout);
        v.amps[index] = ONE;
        v
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Normalizes in place and returns the previous norm.
    pub fn normalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            let inv = 1.0 / n;
            self.amps.iter_mut().for_each(|a| *a *= inv);
        }
        n
    }

    /// `<self|other>`
    pub fn inner(&self, other: &DenseVector) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    /// `<self|op|self>`
    pub fn expectation(&self, op: &SparseOperator) -> C64 {
        let mut acc = ZERO;
        for row in 0..op.dim {
            let mut s = ZERO;
            for idx in op.row_ptr[row]..op.row_ptr[row + 1] {
                s += op.vals[idx] * self.amps[op.cols[idx]];
            }
            acc += self.amps[row].conj() * s;
        }
        acc
    }

    /// Tensor product `self ⊗ other` with concatenated layouts.
    pub fn kron(&self, other: &DenseVector) -> DenseVector {
        let mut amps = Vec::with_capacity(self.len() * other.len());
        for a in &self.amps {
            for b in &other.amps {
                amps.push(a * b);
            }
        }
        let mut dims = self.layout.0.clone();
        dims.extend_from_slice(&other.layout.0);
        DenseVector { amps, layout: Layout(dims) }
    }
}

/// Compressed-row sparse complex matrix. No explicit zeros are stored and
/// column indices within a row are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOperator {
    /// Builds from (row, col, value) triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut rows = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r},{c}) out of bounds for dim {dim}");
            if let (Some(&lr), Some(&lc)) = (rows.last(), cols.last()) {
                if lr == r && lc == c {
                    *vals.last_mut().unwrap() += v;
                    continue;
                }
            }
            rows.push(r);
            cols.push(c);
            vals.push(v);
        }
        let mut out_cols = Vec::with_capacity(cols.len());
        let mut out_vals = Vec::with_capacity(vals.len());
        for ((r, c), v) in rows.into_iter().zip(cols).zip(vals) {
            if v != ZERO {
                row_ptr[r + 1] += 1;
                out_cols.push(c);
                out_vals.push(v);
            }
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseOperator { dim, row_ptr, cols: out_cols, vals: out_vals }
    }

    pub fn zeros(dim: usize) -> Self {
        SparseOperator { dim, row_ptr: vec![0; dim + 1], cols: vec![], vals: vec![] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![ONE; dim])
    }

    pub fn diagonal(diag: &[C64]) -> Self {
        Self::from_triplets(diag.len(), diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    pub fn from_dense(m: &DMatrix<C64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let mut t = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != ZERO {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), t)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Iterates `(row, col, value)` over stored entries.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |i| (r, self.cols[i], self.vals[i]))
        })
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |i| (self.cols[i], self.vals[i]))
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let slice = &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]];
        match slice.binary_search(&c) {
            Ok(pos) => self.vals[self.row_ptr[r] + pos],
            Err(_) => ZERO,
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    /// `y = A x`, allocating the output.
    pub fn apply(&self, v: &DenseVector) -> Result<DenseVector> {
        if v.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: v.len() });
        }
        let mut out = DenseVector { amps: vec![ZERO; self.dim], layout: v.layout.clone() };
        self.apply_into(&v.amps, &mut out.amps);
        Ok(out)
    }

    /// `y = A x` on raw slices; panics on length mismatch.
    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(y.len(), self.dim);
        let row = |r: usize| {
            let mut s = ZERO;
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[i] * x[self.cols[i]];
            }
            s
        };
        if self.dim >= 1 << 14 {
            use rayon::prelude::*;
            y.par_iter_mut().enumerate().with_min_len(4096).for_each(|(r, yr)| *yr = row(r));
        } else {
            for (r, yr) in y.iter_mut().enumerate() {
                *yr = row(r);
            }
        }
    }

    pub fn adjoint(&self) -> Self {
        Self::from_triplets(self.dim, self.entries().map(|(r, c, v)| (c, r, v.conj())).collect())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self::from_triplets(self.dim, self.entries().map(|(r, c, v)| (r, c, v * s)).collect())
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub fn add(&self, other: &SparseOperator) -> Self {
        assert_eq!(self.dim, other.dim, "dimension mismatch in add");
        let t = self.entries().chain(other.entries()).collect();
        Self::from_triplets(self.dim, t)
    }

    pub fn sub(&self, other: &SparseOperator) -> Self {
        self.add(&other.scale_re(-1.0))
    }

    /// Sparse matrix product `self * other`.
    pub fn mul(&self, other: &SparseOperator) -> Self {
        assert_eq!(self.dim, other.dim, "dimension mismatch in mul");
        let mut acc = vec![ZERO; self.dim];
        let mut touched = vec![false; self.dim];
        let mut list = Vec::new();
        let mut t = Vec::new();
        for r in 0..self.dim {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        list.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            for &c in &list {
                t.push((r, c, acc[c]));
                acc[c] = ZERO;
                touched[c] = false;
            }
            list.clear();
        }
        Self::from_triplets(self.dim, t)
    }

    pub fn commutator(&self, other: &SparseOperator) -> Self {
        self.mul(other).sub(&other.mul(self))
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &SparseOperator) -> Self {
        let dim = self.dim * other.dim;
        let mut t = Vec::with_capacity(self.nnz() * other.nnz());
        for (r1, c1, v1) in self.entries() {
            for (r2, c2, v2) in other.entries() {
                t.push((r1 * other.dim + r2, c1 * other.dim + c2, v1 * v2));
            }
        }
        Self::from_triplets(dim, t)
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// `max |A - A†|` over entries.
    pub fn hermiticity_deviation(&self) -> f64 {
        self.entries().map(|(r, c, v)| (v - self.get(c, r).conj()).norm()).fold(0.0, f64::max)
    }

    /// Verifies Hermiticity to `1e-12` relative to the largest entry.
    pub fn check_hermitian(&self) -> Result<()> {
        let dev = self.hermiticity_deviation();
        if dev > 1e-12 * self.max_abs().max(1.0) {
            return Err(Error::NotHermitian { deviation: dev });
        }
        Ok(())
    }

    /// Replaces the operator by `(A + A†)/2`, removing rounding asymmetry.
    pub fn hermitize(&self) -> Self {
        self.add(&self.adjoint()).scale_re(0.5)
    }

    /// Groups basis indices into the connected components of the
    /// operator's sparsity graph. Each component spans an invariant subspace.
    pub fn invariant_blocks(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.dim).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (r, c, _) in self.entries() {
            let (a, b) = (find(&mut parent, r), find(&mut parent, c));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..self.dim {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
        groups.into_values().collect()
    }
}

/// Places `op` at `slot` of `layout`: `I ⊗ … ⊗ op ⊗ … ⊗ I`, slot 0 slowest.
pub fn embed(op: &SparseOperator, slot: usize, layout: &Layout) -> Result<SparseOperator> {
    let dims = layout.dims();
    if slot >= dims.len() {
        return Err(Error::Size(format!("slot {slot} outside layout of {} factors", dims.len())));
    }
    if op.dim != dims[slot] {
        return Err(Error::Shape { expected: dims[slot], got: op.dim });
    }
    let left: usize = dims[..slot].iter().product();
    let right: usize = dims[slot + 1..].iter().product();
    let dim = left * op.dim * right;
    let mut t = Vec::with_capacity(left * op.nnz() * right);
    for l in 0..left {
        for (r, c, v) in op.entries() {
            let base_r = (l * op.dim + r) * right;
            let base_c = (l * op.dim + c) * right;
            for k in 0..right {
                t.push((base_r + k, base_c + k, v));
            }
        }
    }
    Ok(SparseOperator::from_triplets(dim, t))
}

/// `S_x, S_y, S_z, S_+, S_-` for `N` spins in the symmetric sector.
#[derive(Debug, Clone)]
pub struct SpinOperatorSet {
    pub n: usize,
    pub sx: SparseOperator,
    pub sy: SparseOperator,
    pub sz: SparseOperator,
    pub sp: SparseOperator,
    pub sm: SparseOperator,
}

impl SpinOperatorSet {
    pub fn dim(&self) -> usize {
        self.n + 1
    }

    pub fn spin(&self) -> f64 {
        self.n as f64 / 2.0
    }

    /// Eigenvalue `m` at basis index `k`.
    pub fn m_of(&self, k: usize) -> f64 {
        k as f64 - self.spin()
    }

    pub fn identity(&self) -> SparseOperator {
        SparseOperator::identity(self.dim())
    }
}

/// `S_± |m> = sqrt(s(s+1) - m(m±1)) |m±1>`.
pub fn ladder_amplitude(s: f64, m: f64, raise: bool) -> f64 {
    let v = if raise { s * (s + 1.0) - m * (m + 1.0) } else { s * (s + 1.0) - m * (m - 1.0) };
    v.max(0.0).sqrt()
}

pub fn collective_spin_ops(n: usize) -> Result<SpinOperatorSet> {
    collective_spin_ops_with_budget(n, DEFAULT_DIM_BUDGET)
}

pub fn collective_spin_ops_with_budget(n: usize, budget: usize) -> Result<SpinOperatorSet> {
    if n == 0 {
        return Err(Error::Size("ion count must be at least 1".into()));
    }
    let dim = n.checked_add(1).filter(|&d| d <= budget).ok_or_else(|| Error::Size(format!("N = {n} exceeds dimension budget {budget}")))?;
    let s = n as f64 / 2.0;
    let mut sp_t = Vec::with_capacity(n);
    let mut sz_d = Vec::with_capacity(dim);
    for k in 0..dim {
        let m = k as f64 - s;
        sz_d.push(C64::new(m, 0.0));
        if k + 1 < dim {
            sp_t.push((k + 1, k, C64::new(ladder_amplitude(s, m, true), 0.0)));
        }
    }
    let sp = SparseOperator::from_triplets(dim, sp_t);
    let sm = sp.adjoint();
    let sx = sp.add(&sm).scale_re(0.5);
    let sy = sp.sub(&sm).scale(C64::new(0.0, -0.5));
    let sz = SparseOperator::diagonal(&sz_d);
    Ok(SpinOperatorSet { n, sx, sy, sz, sp, sm })
}

/// Truncated bosonic ladder operators on `n_max + 1` Fock levels.
#[derive(Debug, Clone)]
pub struct PhononOperatorSet {
    pub n_max: usize,
    pub a: SparseOperator,
    pub adag: SparseOperator,
    pub number: SparseOperator,
}

impl PhononOperatorSet {
    pub fn new(n_max: usize) -> Self {
        let dim = n_max + 1;
        let a = SparseOperator::from_triplets(
            dim,
            (1..dim).map(|n| (n - 1, n, C64::new((n as f64).sqrt(), 0.0))).collect(),
        );
        let adag = a.adjoint();
        let number = SparseOperator::diagonal(&(0..dim).map(|n| C64::new(n as f64, 0.0)).collect::<Vec<_>>());
        PhononOperatorSet { n_max, a, adag, number }
    }

    pub fn dim(&self) -> usize {
        self.n_max + 1
    }
}

/// Dense rotations `exp(-i θ n·S)` on a single ensemble, built from one
/// cached eigendecomposition of `S_x`. Each application costs `O(dim²)`.
#[derive(Debug, Clone)]
pub struct SpinRotor {
    pub n: usize,
    /// Columns are the `S_x` eigenvectors ordered by eigenvalue `m` ascending.
    vx: DMatrix<f64>,
    m: Vec<f64>,
}

impl SpinRotor {
    pub fn new(n: usize) -> Result<Self> {
        let ops = collective_spin_ops(n)?;
        let dim = n + 1;
        let mut sx = DMatrix::<f64>::zeros(dim, dim);
        for (r, c, v) in ops.sx.entries() {
            sx[(r, c)] = v.re;
        }
        let eig = SymmetricEigen::new(sx);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let mut vx = DMatrix::<f64>::zeros(dim, dim);
        for (j, &src) in order.iter().enumerate() {
            let col = eig.eigenvectors.column(src);
            // fix the sign so the largest component is positive
            let pivot = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            vx.set_column(j, &(col * sign));
        }
        let s = n as f64 / 2.0;
        let m = (0..dim).map(|k| k as f64 - s).collect();
        Ok(SpinRotor { n, vx, m })
    }

    pub fn dim(&self) -> usize {
        self.n + 1
    }

    /// Eigenvectors of `S_x` (column `k` has eigenvalue `k - N/2`).
    pub fn sx_eigenvectors(&self) -> &DMatrix<f64> {
        &self.vx
    }

    /// `exp(-i θ S_z) v`
    pub fn rz(&self, theta: f64, v: &[C64]) -> Vec<C64> {
        v.iter().zip(&self.m).map(|(a, m)| a * C64::from_polar(1.0, -theta * m)).collect()
    }

    /// `exp(-i θ S_x) v`
    pub fn rx(&self, theta: f64, v: &[C64]) -> Vec<C64> {
        let dim = self.dim();
        let mut w = vec![ZERO; dim];
        for j in 0..dim {
            let mut s = ZERO;
            for i in 0..dim {
                s += v[i] * self.vx[(i, j)];
            }
            w[j] = s * C64::from_polar(1.0, -theta * self.m[j]);
        }
        let mut out = vec![ZERO; dim];
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = ZERO;
            for j in 0..dim {
                s += w[j] * self.vx[(i, j)];
            }
            *o = s;
        }
        out
    }

    /// `exp(-i θ S_y) v`, using `S_y = e^{-iπ/2 S_z} S_x e^{iπ/2 S_z}`.
    pub fn ry(&self, theta: f64, v: &[C64]) -> Vec<C64> {
        let half = std::f64::consts::FRAC_PI_2;
        let w = self.rz(-half, v);
        let w = self.rx(theta, &w);
        self.rz(half, &w)
    }

    /// `exp(-i angle n·S) v` for a unit axis `n`.
    pub fn rotate(&self, axis: [f64; 3], angle: f64, v: &[C64]) -> Vec<C64> {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if norm == 0.0 || angle == 0.0 {
            return v.to_vec();
        }
        let (nx, ny, nz) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
        let theta = nz.clamp(-1.0, 1.0).acos();
        let phi = ny.atan2(nx);
        // n·S = Rz(φ) Ry(θ) S_z Ry(-θ) Rz(-φ)
        let w = self.rz(-phi, v);
        let w = self.ry(-theta, &w);
        let w = self.rz(angle, &w);
        let w = self.ry(theta, &w);
        self.rz(phi, &w)
    }

    /// Dense matrix of `exp(-i θ S_y)`.
    pub fn ry_matrix(&self, theta: f64) -> DMatrix<C64> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = vec![ZERO; dim];
            e[j] = ONE;
            let col = self.ry(theta, &e);
            for i in 0..dim {
                out[(i, j)] = col[i];
            }
        }
        out
    }
}
