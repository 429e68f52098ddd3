//! Four-stage teleportation: entangle a–b, mix a–c, measure lab `S_z` of a
//! and c, rotate b conditioned on the outcomes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{self, DenseVector, Layout, SpinRotor, C64};
use crate::engines::dtwa::{self, DtwaConfig, Segment};
use crate::engines::ed::{apply_on_slots, Propagator};
use crate::engines::Engine;
use crate::error::{Error, Result};
use crate::metrics::{self, HusimiGrid, SpinBasis, WitnessOps};
use crate::model::{self, derive_bs_params, derive_tms_params, Drives, EnsembleLabel, StageParams, SystemSpec};
use crate::states::{self, FrameMap, InputStateSpec, Twist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TmsMode {
    /// Scan `s = |r|` on a uniform grid up to `r_max`, take the grid minimum
    /// of `V_s` and refine it by golden section to `Δs = 1e-3`.
    Auto { r_max: f64, step: f64 },
    /// Fixed squeezing magnitude `s = |r|`.
    FixedR { r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeMode {
    EnumerateAll,
    Sample { n: usize, seed: u64 },
    MostProbable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub input: InputStateSpec,
    pub tms: TmsMode,
    /// Mixing angle `N̄|χ_ac| t_BS`.
    pub bs_angle: f64,
    pub outcomes: OutcomeMode,
    pub feedback: bool,
    pub engine: Engine,
    /// Replace the entangling stage by an ideal two-mode squeezed state of
    /// this strength written on Dicke excitations.
    pub oracle_r: Option<f64>,
    /// `[n_θ, n_φ]` of Husimi grids for input and teleported states.
    pub husimi: Option<[usize; 2]>,
    /// DTWA trajectories (DTWA engine only).
    pub n_traj: usize,
    pub seed: u64,
    /// Keep every branch's teleported state in the records.
    pub keep_states: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            input: InputStateSpec::sc(),
            tms: TmsMode::Auto { r_max: 1.5, step: 0.02 },
            bs_angle: std::f64::consts::FRAC_PI_4,
            outcomes: OutcomeMode::EnumerateAll,
            feedback: true,
            engine: Engine::Ed,
            oracle_r: None,
            husimi: None,
            n_traj: 10_000,
            seed: 0,
            keep_states: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bs_angle > 0.0 && self.bs_angle <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidParameter(format!("BS angle {} outside (0, π/2]", self.bs_angle)));
        }
        match self.tms {
            TmsMode::Auto { r_max, step } => {
                if !(step > 0.0) || !(r_max > 2.0 * step) || !r_max.is_finite() {
                    return Err(Error::InvalidParameter(format!("scan needs 0 < 2·step < r_max, got step {step}, r_max {r_max}")));
                }
            }
            TmsMode::FixedR { r } => {
                if !(r >= 0.0) || !r.is_finite() {
                    return Err(Error::InvalidParameter(format!("fixed r must be a finite magnitude ≥ 0, got {r}")));
                }
            }
        }
        if let OutcomeMode::Sample { n, .. } = self.outcomes {
            if n == 0 {
                return Err(Error::InvalidParameter("sample count must be ≥ 1".into()));
            }
        }
        if let Some(r) = self.oracle_r {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::InvalidParameter(format!("oracle strength {r}")));
            }
        }
        if let Some([a, b]) = self.husimi {
            if a == 0 || b == 0 {
                return Err(Error::InvalidParameter("empty Husimi grid".into()));
            }
        }
        if self.engine == Engine::Dtwa && self.n_traj == 0 {
            return Err(Error::InvalidParameter("n_traj must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Entangling-stage parameters at the configured drives.
pub fn tms_params(sys: &SystemSpec) -> StageParams {
    derive_tms_params(sys, sys.ensemble(EnsembleLabel::A).omega, sys.ensemble(EnsembleLabel::B).omega)
}

/// Beam-splitter parameters with a and c driven at `Ω_a`.
pub fn bs_params(sys: &SystemSpec) -> Result<StageParams> {
    derive_bs_params(sys, sys.ensemble(EnsembleLabel::A).omega)
}

/// Effective a–b evolution with the witness attached.
pub struct EsmTms {
    pub params: StageParams,
    prop: Propagator,
    witness: WitnessOps,
    init: DenseVector,
}

impl EsmTms {
    pub fn new(sys: &SystemSpec, a: &DenseVector, b: &DenseVector) -> Result<Self> {
        let params = tms_params(sys);
        let oa = crate::algebra::collective_spin_ops(params.n[0])?;
        let ob = crate::algebra::collective_spin_ops(params.n[1])?;
        let (h, layout) = model::effective_ab_hamiltonian(&params, &oa, &ob)?;
        let init = DenseVector::with_layout(a.kron(b).amps, layout.clone())?;
        Ok(EsmTms { prop: Propagator::new(&h)?, witness: WitnessOps::new(&layout, 0, 1, SpinBasis::Dressed)?, params, init })
    }

    pub fn state_at(&self, s: f64) -> Result<DenseVector> {
        self.prop.evolve_vector(&self.init, self.params.time_for(s))
    }

    pub fn witness_at(&self, s: f64) -> Result<f64> {
        self.witness.evaluate(&self.state_at(s)?)
    }
}

/// Uniform grid `0, step, …, ≤ r_max`.
pub fn r_grid(r_max: f64, step: f64) -> Vec<f64> {
    let n = (r_max / step + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

/// Grid minimum of `f` refined by golden section; returns `(trace, s_min)`.
pub fn scan_minimum<F>(f: F, r_max: f64, step: f64) -> Result<(Vec<(f64, f64)>, f64)>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let grid = r_grid(r_max, step);
    let vals: Vec<f64> = grid.par_iter().map(|&s| f(s)).collect::<Result<_>>()?;
    let trace: Vec<(f64, f64)> = grid.iter().cloned().zip(vals.iter().cloned()).collect();
    let (imin, _) = vals.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if imin == 0 || imin + 1 == grid.len() {
        return Err(Error::NoInteriorMinimum { r_max });
    }
    let (mut lo, mut hi) = (grid[imin - 1], grid[imin + 1]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    while hi - lo > 1e-3 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    let mid = 0.5 * (lo + hi);
    let best = [(grid[imin], vals[imin]), (mid, f(mid)?)].into_iter().fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    Ok((trace, best.0))
}

/// Which model produces the witness curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessModel {
    Esm,
    /// Full spin–phonon model; `include_spectator` adds ensemble c.
    Fm { include_spectator: bool },
}

/// `V_s` on a grid of `s = |r|` values (sorted ascending).
pub fn witness_scan(sys: &SystemSpec, grid: &[f64], model: WitnessModel) -> Result<Vec<f64>> {
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidParameter("witness grid must be sorted and non-negative".into()));
    }
    let prep = states::prepare_components(sys, &InputStateSpec::sc())?;
    match model {
        WitnessModel::Esm => {
            let esm = EsmTms::new(sys, &prep.a, &prep.b)?;
            grid.par_iter().map(|&s| esm.witness_at(s)).collect()
        }
        WitnessModel::Fm { include_spectator } => {
            let params = tms_params(sys);
            let mut active = vec![EnsembleLabel::A, EnsembleLabel::B];
            if include_spectator {
                active.push(EnsembleLabel::C);
            }
            let fm = model::full_hamiltonian(sys, &active, &Drives::tms(sys))?;
            let prop = Propagator::new(&fm.hamiltonian)?;
            let mut v = prep.a.kron(&prep.b);
            if include_spectator {
                v = v.kron(&prep.c);
            }
            let vac = DenseVector::basis(Layout::new(vec![sys.n_max + 1]), 0);
            let mut v = DenseVector::with_layout(v.kron(&vac).amps, fm.layout.clone())?;
            let witness = WitnessOps::new(&fm.layout, 0, 1, SpinBasis::Dressed)?;
            let gen = fm.frame_generator()?;
            let diag: Vec<f64> = (0..gen.dim).map(|i| gen.get(i, i).re).collect();
            let mut t_prev = 0.0;
            let mut out = Vec::with_capacity(grid.len());
            for &s in grid {
                let t = params.time_for(s);
                v = prop.evolve_vector(&v, t - t_prev)?;
                t_prev = t;
                // into the frame rotating at Ω_av
                let amps = v.amps.iter().zip(&diag).map(|(z, g)| z * C64::from_polar(1.0, params.frame_frequency * g * t)).collect();
                out.push(witness.evaluate(&DenseVector::with_layout(amps, v.layout.clone())?)?);
            }
            Ok(out)
        }
    }
}

/// Lab-frame first moments `[⟨S_x^a⟩, ⟨S_y^a⟩, ⟨S_z^a⟩, ⟨S_x^b⟩, ⟨S_y^b⟩, ⟨S_z^b⟩]`
/// of the full model (a, b and phonon) over the entangling stage, at
/// absolute times `times` (sorted).
pub fn fm_lab_moments(sys: &SystemSpec, times: &[f64]) -> Result<Vec<[f64; 6]>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidParameter("times must be sorted and non-negative".into()));
    }
    let prep = states::prepare_components(sys, &InputStateSpec::sc())?;
    let active = [EnsembleLabel::A, EnsembleLabel::B];
    let fm = model::full_hamiltonian(sys, &active, &Drives::tms(sys))?;
    let prop = Propagator::new(&fm.hamiltonian)?;
    let vac = DenseVector::basis(Layout::new(vec![sys.n_max + 1]), 0);
    let mut v = DenseVector::with_layout(prep.a.kron(&prep.b).kron(&vac).amps, fm.layout.clone())?;
    let mut ops = Vec::with_capacity(6);
    for (slot, &label) in active.iter().enumerate() {
        let lab = states::lab_operators_in_dressed(sys.ensemble(label).n)?;
        for op in [&lab.sx, &lab.sy, &lab.sz] {
            ops.push(algebra::embed(op, slot, &fm.layout)?);
        }
    }
    let mut t_prev = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        v = prop.evolve_vector(&v, t - t_prev)?;
        t_prev = t;
        let mut m = [0.0; 6];
        for (k, op) in ops.iter().enumerate() {
            m[k] = states::expect(&v, op);
        }
        out.push(m);
    }
    Ok(out)
}

/// DTWA estimate of the witness and of the EPR noise factors over the
/// entangling stage (full model, lab frame rotated into the Ω_av frame).
#[derive(Debug, Clone, Serialize)]
pub struct DtwaWitness {
    pub s: Vec<f64>,
    pub v_s: Vec<f64>,
    /// Approximate standard error of `V_s` (Gaussian sampling of variances).
    pub v_s_stderr: Vec<f64>,
    /// `V[S_y^b − S_z^a]` and `V[S_z^b + S_y^a]` over half the mean spin length.
    pub noise: Vec<[f64; 2]>,
    pub max_norm_drift: f64,
}

pub fn dtwa_witness(sys: &SystemSpec, grid: &[f64], n_traj: usize, seed: u64, include_spectator: bool) -> Result<DtwaWitness> {
    let params = tms_params(sys);
    let times: Vec<f64> = grid.iter().map(|&s| params.time_for(s)).collect();
    let total = times.iter().cloned().fold(0.0, f64::max);
    let d = Drives::tms(sys);
    let sched = [Segment { duration: total, omega: d.omega }];
    let mut cfg = DtwaConfig::new(n_traj, seed);
    cfg.active = if include_spectator { EnsembleLabel::ALL.to_vec() } else { vec![EnsembleLabel::A, EnsembleLabel::B] };
    let batch = dtwa::dtwa_run(sys, &sched, &times, &cfg)?;
    let (ia, ib) = (3 * EnsembleLabel::A.index(), 3 * EnsembleLabel::B.index());
    let mut out = DtwaWitness { s: grid.to_vec(), v_s: vec![], v_s_stderr: vec![], noise: vec![], max_norm_drift: batch.max_norm_drift };
    for (i, &t) in times.iter().enumerate() {
        // rotated-frame components: y' = y cosθ + z sinθ, z' = z cosθ − y sinθ
        let th = params.frame_frequency * t;
        let (c, s) = (th.cos(), th.sin());
        let mut minus = [0.0; dtwa::DIM];
        minus[ib + 1] += c;
        minus[ib + 2] += s;
        minus[ia + 2] -= c;
        minus[ia + 1] += s;
        let mut plus = [0.0; dtwa::DIM];
        plus[ib + 2] += c;
        plus[ib + 1] -= s;
        plus[ia + 1] += c;
        plus[ia + 2] += s;
        let den = batch.mean[i][ia].abs() + batch.mean[i][ib].abs();
        if den < 1e-9 {
            return Err(Error::UndefinedWitness(den));
        }
        let (vm, vp) = (batch.variance(i, &minus), batch.variance(i, &plus));
        let vs = (vm + vp) / den;
        out.v_s.push(vs);
        out.v_s_stderr.push(vs * (2.0 / (batch.n_traj.max(2) - 1) as f64).sqrt());
        out.noise.push([vm / (den / 2.0), vp / (den / 2.0)]);
    }
    Ok(out)
}

/// One measurement branch.
#[derive(Debug, Clone, Serialize)]
pub struct MeasurementRecord {
    pub k_a: usize,
    pub k_c: usize,
    pub m_a: f64,
    pub m_c: f64,
    pub beta_z: f64,
    pub beta_y: f64,
    pub probability: f64,
    pub fidelity: f64,
    /// Lab-basis teleported b state (kept for the most probable outcome).
    #[serde(skip)]
    pub state: Option<DenseVector>,
}

/// `D_π D_r` on a lab-basis b state: `D_r = exp[i(2/N)(β_z S_z + β_y S_y)]`,
/// `D_π = exp(iπ S_z)`.
pub fn feedback(b: &[C64], beta_z: f64, beta_y: f64, rotor: &SpinRotor) -> Vec<C64> {
    let n = rotor.n as f64;
    let mag = (beta_z * beta_z + beta_y * beta_y).sqrt();
    let w = if mag > 0.0 { rotor.rotate([0.0, beta_y, beta_z], -2.0 * mag / n, b) } else { b.to_vec() };
    rotor.rz(-std::f64::consts::PI, &w)
}

/// Lab-basis `[a, b, c]` state → all `(k_a, k_c)` branches with the
/// unnormalized b vector of each.
pub fn measure_az_cz(lab: &DenseVector) -> Result<Vec<(usize, usize, f64, Vec<C64>)>> {
    let dims = lab.layout.dims();
    if dims.len() != 3 {
        return Err(Error::Shape { expected: 3, got: dims.len() });
    }
    let (da, db, dc) = (dims[0], dims[1], dims[2]);
    let mut out = Vec::with_capacity(da * dc);
    for ka in 0..da {
        for kc in 0..dc {
            let v: Vec<C64> = (0..db).map(|kb| lab.amps[(ka * db + kb) * dc + kc]).collect();
            let p = v.iter().map(|z| z.norm_sqr()).sum::<f64>();
            out.push((ka, kc, p, v));
        }
    }
    Ok(out)
}

/// Diagnostics of the most probable branch.
#[derive(Debug, Clone, Serialize)]
pub struct TeleportDiagnostics {
    pub phase_in_deg: Option<f64>,
    pub phase_out_deg: Option<f64>,
    pub xi_in_db: Option<f64>,
    pub xi_out_db: Option<f64>,
    pub husimi_in: Option<HusimiGrid>,
    pub husimi_out: Option<HusimiGrid>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolResult {
    pub engine: Engine,
    pub input: InputStateSpec,
    pub n: [usize; 3],
    pub witness_trace: Vec<(f64, f64)>,
    pub s_tms: f64,
    pub t_tms: f64,
    pub t_bs: f64,
    pub v_s_at_tms: Option<f64>,
    pub records: Vec<MeasurementRecord>,
    pub probability_total: f64,
    pub average_fidelity: f64,
    pub most_probable: Option<MeasurementRecord>,
    pub diagnostics: Option<TeleportDiagnostics>,
    #[serde(skip)]
    pub input_lab: Option<DenseVector>,
    pub notes: Vec<String>,
}

/// Ideal two-mode squeezed state `Σ (i tanh r)^n |n, n⟩ / cosh r` (signed `r`)
/// written on the Dicke ladders of a (from its south pole) and b (from its
/// north pole), truncated to the available excitations and renormalized.
pub fn oracle_tms_state(n_a: usize, n_b: usize, r: f64) -> DenseVector {
    let (da, db) = (n_a + 1, n_b + 1);
    let mut v = DenseVector::zeros(Layout::new(vec![da, db]));
    let th = r.tanh();
    for k in 0..da.min(db) {
        let amp = C64::new(0.0, th).powu(k as u32) / r.cosh();
        v.amps[k * db + (n_b - k)] = amp;
    }
    v.normalize();
    v
}

fn squeezing_input_db(input: &InputStateSpec, n: usize) -> Result<Option<f64>> {
    Ok(match input {
        InputStateSpec::Ss { twist: Twist::TargetDb(d) } => Some(*d),
        InputStateSpec::Ss { twist: Twist::Angle(_) } => Some(metrics::squeezing_db(&input.prepare(n)?)?),
        _ => None,
    })
}

pub fn run_protocol(sys: &SystemSpec, cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    sys.validate()?;
    cfg.validate()?;
    match cfg.engine {
        Engine::Ed => run_ed(sys, cfg),
        Engine::Gauss | Engine::Dtwa => run_gaussian_estimate(sys, cfg),
    }
}

fn run_gaussian_estimate(sys: &SystemSpec, cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    let params = tms_params(sys);
    let nc = sys.ensemble(EnsembleLabel::C).n;
    let xi2 = match squeezing_input_db(&cfg.input, nc)? {
        Some(db) => metrics::db_to_xi(db).powi(2),
        None => match cfg.input {
            InputStateSpec::Dicke { .. } => {
                return Err(Error::InvalidParameter("Gaussian-overlap estimator only covers coherent and squeezed inputs".into()))
            }
            _ => 1.0,
        },
    };
    let mut notes = vec!["average fidelity from the Gaussian-overlap estimator, not from conditional states".to_string()];
    let (trace, s, noise) = match cfg.engine {
        Engine::Gauss => {
            let f = |s: f64| Ok((-2.0 * s).exp());
            let (trace, s) = match cfg.tms {
                TmsMode::FixedR { r } => (vec![(r, f(r)?)], r),
                TmsMode::Auto { r_max, step } => scan_minimum(f, r_max, step)?,
            };
            let e = (-2.0 * s).exp();
            (trace, s, [e, e])
        }
        _ => {
            let grid = match cfg.tms {
                TmsMode::FixedR { r } => vec![0.0, r],
                TmsMode::Auto { r_max, step } => r_grid(r_max, step),
            };
            let w = dtwa_witness(sys, &grid, cfg.n_traj, cfg.seed, false)?;
            let idx = match cfg.tms {
                TmsMode::FixedR { .. } => 1,
                TmsMode::Auto { r_max, .. } => {
                    let (i, _) = w.v_s.iter().enumerate().fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
                    if i == 0 || i + 1 == grid.len() {
                        return Err(Error::NoInteriorMinimum { r_max });
                    }
                    i
                }
            };
            notes.push(format!("DTWA with {} trajectories, seed {}", cfg.n_traj, cfg.seed));
            (grid.iter().cloned().zip(w.v_s.iter().cloned()).collect(), grid[idx], w.noise[idx])
        }
    };
    let f = metrics::gaussian_overlap_fidelity(noise[0], noise[1], xi2);
    Ok(ProtocolResult {
        engine: cfg.engine,
        input: cfg.input,
        n: [sys.ensembles[0].n, sys.ensembles[1].n, nc],
        v_s_at_tms: trace.iter().find(|p| (p.0 - s).abs() < 1e-12).map(|p| p.1),
        witness_trace: trace,
        s_tms: s,
        t_tms: params.time_for(s),
        t_bs: bs_params(sys).map(|p| cfg.bs_angle / p.rate.abs()).unwrap_or(f64::NAN),
        records: vec![],
        probability_total: 1.0,
        average_fidelity: f,
        most_probable: None,
        diagnostics: None,
        input_lab: None,
        notes,
    })
}

/// Ideal-squeezing strength for oracle runs: balances the finite-squeezing
/// error `e^{−2r}` against the depletion error `sinh²r / N̄`.
pub fn oracle_strength(n_bar: usize) -> f64 {
    0.25 * (4.0 * n_bar as f64).ln()
}

/// Mixes a (slot 0) and c (slot 2) of a dressed-basis a⊗b⊗c state for
/// `N̄|χ_ac| t = angle`. Returns the state and `t_BS`.
pub fn stage_bs(sys: &SystemSpec, abc: &DenseVector, angle: f64) -> Result<(DenseVector, f64)> {
    let n = [sys.ensembles[0].n, sys.ensembles[1].n, sys.ensembles[2].n];
    if abc.layout.dims() != [n[0] + 1, n[1] + 1, n[2] + 1] {
        return Err(Error::InvalidParameter(format!("layout {:?} does not match the a, b, c ensembles", abc.layout.dims())));
    }
    let bs = bs_params(sys)?;
    let t_bs = angle / bs.rate.abs();
    let oa = algebra::collective_spin_ops(n[0])?;
    let oc = algebra::collective_spin_ops(n[2])?;
    let (h_ac, _) = model::effective_ac_hamiltonian(&bs, &oa, &oc)?;
    let prop_ac = Propagator::new(&h_ac)?;
    Ok((apply_on_slots(abc, &[0, 2], |x| prop_ac.evolve(x, t_bs))?, t_bs))
}

fn run_ed(sys: &SystemSpec, cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    let n = [sys.ensembles[0].n, sys.ensembles[1].n, sys.ensembles[2].n];
    if n[1] != n[2] {
        return Err(Error::InvalidParameter(format!("fidelity needs N_b = N_c, got {} and {}", n[1], n[2])));
    }
    let prep = states::prepare_components(sys, &cfg.input)?;
    let tms = tms_params(sys);
    let mut notes = tms.diagnostics.clone();

    // stage 1: entangle a and b
    let (ab, trace, s_tms, t_tms, vs_tms) = if let Some(r) = cfg.oracle_r {
        notes.push(format!("entangling stage replaced by ideal two-mode squeezing, |r| = {r}"));
        let v = oracle_tms_state(n[0], n[1], r * tms.rate.signum());
        let w = metrics::witness_vs(&v, 0, 1, SpinBasis::Dressed)?;
        (v, vec![(r, w)], r, 0.0, Some(w))
    } else {
        let esm = EsmTms::new(sys, &prep.a, &prep.b)?;
        let (trace, s) = match cfg.tms {
            TmsMode::FixedR { r } => (vec![(r, esm.witness_at(r)?)], r),
            TmsMode::Auto { r_max, step } => scan_minimum(|s| esm.witness_at(s), r_max, step)?,
        };
        let state = esm.state_at(s)?;
        let w = esm.witness.evaluate(&state)?;
        (state, trace, s, tms.time_for(s), Some(w))
    };

    // stage 2: mix a and c
    let abc = DenseVector::with_layout(ab.kron(&prep.c).amps, Layout::new(vec![n[0] + 1, n[1] + 1, n[2] + 1]))?;
    let (abc, t_bs) = stage_bs(sys, &abc, cfg.bs_angle)?;

    // stage 3: to the lab basis, then project on (k_a, k_c)
    let frames: Vec<FrameMap> = n.iter().map(|&k| FrameMap::new(k)).collect::<Result<_>>()?;
    let mut lab = abc;
    for (slot, f) in frames.iter().enumerate() {
        lab = apply_on_slots(&lab, &[slot], |x| Ok(f.to_lab(x)))?;
    }
    let branches = measure_az_cz(&lab)?;
    let probability_total: f64 = branches.iter().map(|b| b.2).sum();

    let selected: Vec<usize> = match cfg.outcomes {
        OutcomeMode::EnumerateAll => (0..branches.len()).collect(),
        OutcomeMode::MostProbable => vec![argmax_prob(&branches)],
        OutcomeMode::Sample { n: count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cdf: Vec<f64> = branches
                .iter()
                .scan(0.0, |acc, b| {
                    *acc += b.2;
                    Some(*acc)
                })
                .collect();
            (0..count)
                .map(|_| {
                    let u = rng.random::<f64>() * probability_total;
                    cdf.partition_point(|&c| c < u).min(branches.len() - 1)
                })
                .collect()
        }
    };

    // stage 4: conditioned rotation of b and comparison with the input
    let rotor_b = frames[1].rotor();
    let target = &prep.input_lab;
    let half_a = n[0] as f64 / 2.0;
    let half_c = n[2] as f64 / 2.0;
    let make = |i: usize| -> MeasurementRecord {
        let (ka, kc, p, ref v) = branches[i];
        let (m_a, m_c) = (ka as f64 - half_a, kc as f64 - half_c);
        let (beta_z, beta_y) = (2f64.sqrt() * m_a, 2f64.sqrt() * m_c);
        let mut fidelity = 0.0;
        let mut state = None;
        if p > 0.0 {
            let norm = p.sqrt();
            let b: Vec<C64> = v.iter().map(|z| z / norm).collect();
            let out = if cfg.feedback { feedback(&b, beta_z, beta_y, rotor_b) } else { b };
            let ov: C64 = target.amps.iter().zip(&out).map(|(x, y)| x.conj() * y).sum();
            fidelity = ov.norm_sqr();
            state = Some(DenseVector::from_amps(out));
        }
        MeasurementRecord { k_a: ka, k_c: kc, m_a, m_c, beta_z, beta_y, probability: p, fidelity, state }
    };
    let mut records: Vec<MeasurementRecord> = selected.par_iter().map(|&i| make(i)).collect();
    let average_fidelity = match cfg.outcomes {
        OutcomeMode::EnumerateAll => records.iter().map(|r| r.probability * r.fidelity).sum::<f64>() / probability_total,
        OutcomeMode::MostProbable => records[0].fidelity,
        OutcomeMode::Sample { .. } => records.iter().map(|r| r.fidelity).sum::<f64>() / records.len() as f64,
    };
    let best = make(argmax_prob(&branches));
    if !cfg.keep_states {
        for r in records.iter_mut() {
            r.state = None;
        }
    }
    let diagnostics = best.state.as_ref().map(|out| {
        let ok = |r: Result<f64>| r.ok();
        TeleportDiagnostics {
            phase_in_deg: ok(metrics::phase_of(target)),
            phase_out_deg: ok(metrics::phase_of(out)),
            xi_in_db: ok(metrics::squeezing_db(target)),
            xi_out_db: ok(metrics::squeezing_db(out)),
            husimi_in: cfg.husimi.and_then(|[a, b]| metrics::husimi_q(target, a, b).ok()),
            husimi_out: cfg.husimi.and_then(|[a, b]| metrics::husimi_q(out, a, b).ok()),
        }
    });
    if (probability_total - 1.0).abs() > 1e-9 {
        notes.push(format!("outcome probabilities sum to {probability_total}"));
    }
    Ok(ProtocolResult {
        engine: Engine::Ed,
        input: cfg.input,
        n,
        witness_trace: trace,
        s_tms,
        t_tms,
        t_bs,
        v_s_at_tms: vs_tms,
        records,
        probability_total,
        average_fidelity,
        most_probable: Some(best),
        diagnostics,
        input_lab: Some(prep.input_lab.clone()),
        notes,
    })
}

fn argmax_prob(branches: &[(usize, usize, f64, Vec<C64>)]) -> usize {
    // ties resolve to the earliest index, so the choice is deterministic
    let mut best = 0;
    for (i, b) in branches.iter().enumerate() {
        if b.2 > branches[best].2 + 1e-15 {
            best = i;
        }
    }
    best
}

/// `(N̄, F̄)` for a list of ensemble sizes, with all three ensembles equal.
pub fn scaling_sweep(base: &SystemSpec, n_values: &[usize], cfg: &ProtocolConfig) -> Result<Vec<(usize, ProtocolResult)>> {
    n_values
        .iter()
        .map(|&nb| {
            let mut sys = base.clone();
            for e in sys.ensembles.iter_mut() {
                e.n = nb;
            }
            run_protocol(&sys, cfg).map(|r| (nb, r))
        })
        .collect()
}
