//! Checks shared by the property suites and the acceptance target. Each one
//! returns `Err(description)` on the first violation.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinport_core::algebra::{collective_spin_ops, embed, DenseVector, Layout, C64};
use spinport_core::engines::dtwa::{self, DtwaConfig, Segment};
use spinport_core::engines::ed::Propagator;
use spinport_core::metrics;
use spinport_core::model::{self, Drives, EnsembleLabel, SystemSpec};
use spinport_core::protocol::{self, measure_az_cz, tms_params, ProtocolConfig};
use spinport_core::states::{InputStateSpec, Twist};

pub type Check = Result<(), String>;

const I: C64 = C64::new(0.0, 1.0);

fn dist(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Independent dense J_z, J_+ for spin N/2 with index k = m + N/2.
fn dense_spin(n: usize) -> (DMatrix<C64>, DMatrix<C64>) {
    let j = n as f64 / 2.0;
    let d = n + 1;
    let mut jz = DMatrix::zeros(d, d);
    let mut jp = DMatrix::zeros(d, d);
    for k in 0..d {
        let m = k as f64 - j;
        jz[(k, k)] = C64::new(m, 0.0);
        if k + 1 < d {
            jp[(k + 1, k)] = C64::new((j * (j + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
        }
    }
    (jz, jp)
}

/// Commutators and the Casimir against a dense oracle.
pub fn algebra_check(n: usize, seed: u64) -> Check {
    let ops = collective_spin_ops(n).map_err(|e| e.to_string())?;
    let (jz, jp) = dense_spin(n);
    let jm = jp.adjoint();
    let half = C64::new(0.5, 0.0);
    let jx = (&jp + &jm) * half;
    let jy = (&jp - &jm) * C64::new(0.0, -0.5);
    let tol = 1e-10 * (1.0 + n as f64).powi(2);
    for (name, got, want) in [("S_x", &ops.sx, &jx), ("S_y", &ops.sy, &jy), ("S_z", &ops.sz, &jz), ("S_+", &ops.sp, &jp), ("S_-", &ops.sm, &jm)] {
        let e = dist(&got.to_dense(), want);
        if e > tol {
            return Err(format!("N={n}: {name} differs from the dense oracle by {e:e}"));
        }
    }
    let (x, y, z) = (ops.sx.to_dense(), ops.sy.to_dense(), ops.sz.to_dense());
    let comm = |a: &DMatrix<C64>, b: &DMatrix<C64>| a * b - b * a;
    for (name, lhs, rhs) in [
        ("[S_x,S_y]", comm(&x, &y), &z * I),
        ("[S_y,S_z]", comm(&y, &z), &x * I),
        ("[S_z,S_x]", comm(&z, &x), &y * I),
        ("[S_z,S_+]", comm(&z, &ops.sp.to_dense()), ops.sp.to_dense()),
        ("[S_+,S_-]", comm(&ops.sp.to_dense(), &ops.sm.to_dense()), &z * C64::new(2.0, 0.0)),
    ] {
        let e = dist(&lhs, &rhs);
        if e > tol {
            return Err(format!("N={n}: {name} violated by {e:e}"));
        }
    }
    let j = n as f64 / 2.0;
    let cas = &x * &x + &y * &y + &z * &z;
    let e = dist(&cas, &(DMatrix::identity(n + 1, n + 1) * C64::new(j * (j + 1.0), 0.0)));
    if e > tol {
        return Err(format!("N={n}: Casimir off by {e:e}"));
    }
    // sparse products agree with dense ones on a random vector
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = DenseVector::from_amps((0..=n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect());
    let lhs = ops.sp.mul(&ops.sm).sub(&ops.sm.mul(&ops.sp)).apply(&v).map_err(|e| e.to_string())?;
    let rhs = ops.sz.scale_re(2.0).apply(&v).map_err(|e| e.to_string())?;
    let e = lhs.amps.iter().zip(&rhs.amps).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    if e > tol {
        return Err(format!("N={n}: (S_+S_- − S_-S_+)v ≠ 2S_z v by {e:e}"));
    }
    Ok(())
}

fn small_system(n_a: usize, n_b: usize, n_c: usize, g_scale: f64) -> SystemSpec {
    let mut sys = SystemSpec::reference(n_a);
    sys.ensembles[1].n = n_b;
    sys.ensembles[2].n = n_c;
    for e in sys.ensembles.iter_mut() {
        e.g *= g_scale;
    }
    sys.n_max = 4;
    sys
}

/// Hermiticity of the full and effective Hamiltonians, the U(1) charges of
/// the effective stages, and norm/energy conservation under evolution.
pub fn hamiltonian_check(n_a: usize, n_b: usize, g_scale: f64, seed: u64) -> Check {
    let sys = small_system(n_a, n_b, n_a, g_scale);
    let fm = model::full_hamiltonian(&sys, &[EnsembleLabel::A, EnsembleLabel::B], &Drives::tms(&sys)).map_err(|e| e.to_string())?;
    let scale = fm.hamiltonian.max_abs();
    if fm.hamiltonian.hermiticity_deviation() > 1e-12 * scale {
        return Err(format!("full Hamiltonian not Hermitian ({:e})", fm.hamiltonian.hermiticity_deviation()));
    }
    let (oa, ob) = (collective_spin_ops(n_a).unwrap(), collective_spin_ops(n_b).unwrap());
    let p = tms_params(&sys);
    let (h, layout) = model::effective_ab_hamiltonian(&p, &oa, &ob).map_err(|e| e.to_string())?;
    let hs = h.max_abs().max(1e-300);
    if h.hermiticity_deviation() > 1e-12 * hs {
        return Err("effective a–b Hamiltonian not Hermitian".into());
    }
    // both effective stages are dressed-basis exchange models: S_z^1 + S_z^2
    // is conserved (squeezing comes from a and b being oppositely polarized)
    let q = embed(&oa.sz, 0, &layout).unwrap().add(&embed(&ob.sz, 1, &layout).unwrap());
    let c = h.commutator(&q).max_abs();
    if c > 1e-9 * hs {
        return Err(format!("[H_ab, S_z^a + S_z^b] = {c:e}"));
    }
    // some random couplings admit no beam-splitter frame; that is a valid rejection
    if let Ok(bs) = protocol::bs_params(&sys) {
        let (h2, l2) = model::effective_ac_hamiltonian(&bs, &oa, &collective_spin_ops(n_a).unwrap()).map_err(|e| e.to_string())?;
        let q2 = embed(&oa.sz, 0, &l2).unwrap().add(&embed(&oa.sz, 1, &l2).unwrap());
        let c2 = h2.commutator(&q2).max_abs();
        if c2 > 1e-9 * h2.max_abs().max(1e-300) {
            return Err(format!("[H_ac, S_z^a + S_z^c] = {c2:e}"));
        }
    }
    // evolution of a random state preserves norm and energy
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DenseVector::with_layout(
        (0..fm.layout.total()).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect(),
        fm.layout.clone(),
    )
    .unwrap();
    v.normalize();
    let prop = Propagator::new(&fm.hamiltonian).map_err(|e| e.to_string())?;
    let e0 = v.expectation(&fm.hamiltonian).re;
    let w = prop.evolve_vector(&v, 3e-4).map_err(|e| e.to_string())?;
    if (w.norm() - 1.0).abs() > 1e-9 {
        return Err(format!("norm drift {:e}", w.norm() - 1.0));
    }
    let e1 = w.expectation(&fm.hamiltonian).re;
    if (e1 - e0).abs() > 1e-8 * scale {
        return Err(format!("energy drift {:e} (scale {scale:e})", e1 - e0));
    }
    Ok(())
}

/// Outcome probabilities of a random a⊗b⊗c state sum to one and every
/// conditional b state is normalized.
pub fn measurement_check(n_a: usize, n_b: usize, n_c: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::new(vec![n_a + 1, n_b + 1, n_c + 1]);
    let mut v = DenseVector::with_layout(
        (0..layout.total()).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect(),
        layout,
    )
    .unwrap();
    v.normalize();
    let branches = measure_az_cz(&v).map_err(|e| e.to_string())?;
    if branches.len() != (n_a + 1) * (n_c + 1) {
        return Err(format!("{} outcomes for N_a={n_a}, N_c={n_c}", branches.len()));
    }
    let total: f64 = branches.iter().map(|b| b.2).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(format!("Σ P = {total}"));
    }
    for (ka, kc, p, b) in &branches {
        let nb: f64 = b.iter().map(|z| z.norm_sqr()).sum();
        if *p > 1e-14 && (nb / p - 1.0).abs() > 1e-9 {
            return Err(format!("branch ({ka},{kc}) unnormalized: |b|² = {nb}, P = {p}"));
        }
    }
    Ok(())
}

fn random_density(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> DMatrix<C64> {
    let a = DMatrix::from_fn(d, rank, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    let rho = &a * a.adjoint();
    let tr = rho.trace();
    rho / tr
}

fn random_pure(rng: &mut ChaCha8Rng, d: usize) -> DenseVector {
    let mut v = DenseVector::from_amps((0..d).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect());
    v.normalize();
    v
}

/// Uhlmann fidelity axioms on random 8-dimensional density matrices.
pub fn fidelity_check(seed: u64, lambda: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let r1 = rng.random_range(1..=d);
    let r2 = rng.random_range(1..=d);
    let rho = random_density(&mut rng, d, r1);
    let sigma = random_density(&mut rng, d, r2);
    let f = |a: &DMatrix<C64>, b: &DMatrix<C64>| metrics::uhlmann_fidelity(a, b).map_err(|e| e.to_string());
    let (fab, fba) = (f(&rho, &sigma)?, f(&sigma, &rho)?);
    if (fab - fba).abs() > 1e-8 {
        return Err(format!("asymmetric: {fab} vs {fba}"));
    }
    if !(-1e-12..=1.0 + 1e-9).contains(&fab) {
        return Err(format!("out of range: {fab}"));
    }
    let self_f = f(&rho, &rho)?;
    if (self_f - 1.0).abs() > 1e-8 {
        return Err(format!("F(ρ, ρ) = {self_f}"));
    }
    // pure ρ: mixed-state formula reduces to ⟨ψ|σ|ψ⟩ and mixing is monotone
    let psi = random_pure(&mut rng, d);
    let p = metrics::density_matrix(&psi);
    let direct = metrics::fidelity_mixed_pure(&sigma, &psi).map_err(|e| e.to_string())?;
    let via = f(&p, &sigma)?;
    // the matrix square root of a rank-one ρ costs ~√ε of precision
    if (direct - via).abs() > 1e-6 {
        return Err(format!("pure-state reduction {direct} vs {via}"));
    }
    let mix = &p * C64::new(lambda, 0.0) + &sigma * C64::new(1.0 - lambda, 0.0);
    let fm = f(&p, &mix)?;
    if fm < lambda - 1e-9 {
        return Err(format!("F(ψ, λψ + (1−λ)σ) = {fm} < λ = {lambda}"));
    }
    Ok(())
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

/// DTWA statistics and the protocol result do not depend on the worker count.
pub fn determinism_check(seed: u64) -> Check {
    let sys = SystemSpec::reference(6);
    let p = tms_params(&sys);
    let times = [0.0, p.time_for(0.2), p.time_for(0.4)];
    let sched = [Segment { duration: times[2], omega: Drives::tms(&sys).omega }];
    let mut cfg = DtwaConfig::new(200, seed);
    cfg.active = vec![EnsembleLabel::A, EnsembleLabel::B];
    let run = || dtwa::dtwa_run(&sys, &sched, &times, &cfg).map_err(|e| e.to_string());
    let (one, four) = (with_threads(1, run)?, with_threads(4, run)?);
    if one.mean != four.mean || one.cov != four.cov {
        return Err("DTWA moments depend on the worker count".into());
    }
    let pc = ProtocolConfig { input: InputStateSpec::Ss { twist: Twist::Angle(0.05) }, ..Default::default() };
    let go = || protocol::run_protocol(&sys, &pc).map_err(|e| e.to_string());
    let (a, b) = (with_threads(1, go)?, with_threads(3, go)?);
    if a.average_fidelity.to_bits() != b.average_fidelity.to_bits() || a.s_tms.to_bits() != b.s_tms.to_bits() {
        return Err("protocol result depends on the worker count".into());
    }
    let fa: Vec<u64> = a.records.iter().map(|r| r.fidelity.to_bits()).collect();
    let fb: Vec<u64> = b.records.iter().map(|r| r.fidelity.to_bits()).collect();
    if fa != fb {
        return Err("per-outcome fidelities depend on the worker count".into());
    }
    Ok(())
}
