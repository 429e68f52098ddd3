//! Physical parameters, derived couplings, resonance conditions and
//! Hamiltonian builders for the dressed-frame spin–phonon model and the two
//! effective spin-exchange stages.
//!
//! All frequencies are angular (rad/s) and times are in seconds.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::algebra::{collective_spin_ops, embed, Layout, PhononOperatorSet, SparseOperator, SpinOperatorSet, C64, DEFAULT_DIM_BUDGET};
use crate::error::{Error, Result};

/// Converts a frequency quoted in kHz (cycles) to rad/s.
pub fn khz_to_rad(khz: f64) -> f64 {
    khz * 1e3 * TAU
}

pub fn rad_to_khz(rad: f64) -> f64 {
    rad / (1e3 * TAU)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleLabel {
    A,
    B,
    C,
}

impl EnsembleLabel {
    pub const ALL: [EnsembleLabel; 3] = [EnsembleLabel::A, EnsembleLabel::B, EnsembleLabel::C];

    pub fn index(self) -> usize {
        match self {
            EnsembleLabel::A => 0,
            EnsembleLabel::B => 1,
            EnsembleLabel::C => 2,
        }
    }
}

impl std::fmt::Display for EnsembleLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnsembleLabel::A => "a",
            EnsembleLabel::B => "b",
            EnsembleLabel::C => "c",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub label: EnsembleLabel,
    pub n: usize,
    /// Dressed-state Rabi frequency (rad/s).
    pub omega: f64,
    /// Single-ion spin–phonon coupling (rad/s).
    pub g: f64,
    /// Lab-frame Bloch direction of the initial polarization.
    pub orientation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub ensembles: [EnsembleSpec; 3],
    /// Phonon detuning `δ_M = ω_M − μ` (rad/s).
    pub delta_m: f64,
    /// Phonon Fock cutoff for the full model.
    pub n_max: usize,
}

impl SystemSpec {
    /// Reference parameters: Ω_a = Ω_c = −2π·19.1 kHz, Ω_b = −2π·18.8 kHz,
    /// g = 2π·3.6 kHz, δ_M = −2π·26 kHz, equal ensembles of `n_bar` ions.
    pub fn reference(n_bar: usize) -> Self {
        let g = khz_to_rad(3.6);
        let mk = |label, omega_khz, orientation| EnsembleSpec { label, n: n_bar, omega: khz_to_rad(omega_khz), g, orientation };
        SystemSpec {
            ensembles: [
                mk(EnsembleLabel::A, -19.1, [-1.0, 0.0, 0.0]),
                mk(EnsembleLabel::B, -18.8, [1.0, 0.0, 0.0]),
                mk(EnsembleLabel::C, -19.1, [-1.0, 0.0, 0.0]),
            ],
            delta_m: khz_to_rad(-26.0),
            n_max: 10,
        }
    }

    pub fn ensemble(&self, label: EnsembleLabel) -> &EnsembleSpec {
        &self.ensembles[label.index()]
    }

    pub fn ensemble_mut(&mut self, label: EnsembleLabel) -> &mut EnsembleSpec {
        &mut self.ensembles[label.index()]
    }

    pub fn total_n(&self) -> usize {
        self.ensembles.iter().map(|e| e.n).sum()
    }

    /// `𝒢_l = g_l / √N` with `N` the total ion count.
    pub fn coupling(&self, label: EnsembleLabel) -> f64 {
        self.ensemble(label).g / (self.total_n() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.ensembles.iter().enumerate() {
            if e.label.index() != i {
                return Err(Error::InvalidParameter(format!("ensemble slot {i} carries label {}", e.label)));
            }
            if e.n == 0 {
                return Err(Error::InvalidParameter(format!("ensemble {} has no ions", e.label)));
            }
            if !e.g.is_finite() || !e.omega.is_finite() {
                return Err(Error::InvalidParameter(format!("ensemble {} has non-finite couplings", e.label)));
            }
        }
        if !self.delta_m.is_finite() {
            return Err(Error::InvalidParameter("δ_M is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Tms,
    Bs,
}

/// Derived couplings for one effective two-ensemble stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageParams {
    pub stage: Stage,
    pub pair: [EnsembleLabel; 2],
    pub n: [usize; 2],
    /// `𝒢_l` of the two participating ensembles.
    pub coupling: [f64; 2],
    /// Rotating-frame frequency: `Ω_av` (TMS) or `f_r` (BS).
    pub frame_frequency: f64,
    /// `δ_ab` (TMS) or `δ_ac` (BS).
    pub detuning: f64,
    /// Signs multiplying `S_z` of each ensemble in the detuning term.
    pub detuning_signs: [f64; 2],
    /// Effective phonon detuning `Δ_M` of the stage.
    pub delta_m_eff: f64,
    /// `χ_αα' = 𝒢_α 𝒢_α' / (4 Δ_M)`.
    pub chi: [[f64; 2]; 2],
    /// `N̄ = √(N_1 N_2)`.
    pub n_bar: f64,
    /// Pair rate `χ_12 N̄`; dimensionless time is `r = χ_12 N̄ t`.
    pub rate: f64,
    /// `|δ − χ_ll N_l|` for each ensemble.
    pub resonance_residual: [f64; 2],
    /// `|Δ_M| / max_l 𝒢_l √N_l`.
    pub adiabatic_ratio: f64,
    pub valid: bool,
    pub diagnostics: Vec<String>,
}

impl StageParams {
    /// Time needed to reach dimensionless strength `|r|`.
    pub fn time_for(&self, r: f64) -> f64 {
        (r / self.rate).abs()
    }

    pub fn r_of(&self, t: f64) -> f64 {
        self.rate * t
    }
}

/// Thresholds used when flagging parameter regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityThresholds {
    /// Minimum `|Δ_M| / (𝒢_l √N_l)`.
    pub adiabatic: f64,
    /// Minimum `|f_r| / max(|δ_ac|, 𝒢_l √N_l, |Δ_M^ac|)`.
    pub frame: f64,
}

impl Default for ValidityThresholds {
    fn default() -> Self {
        ValidityThresholds { adiabatic: 3.0, frame: 2.0 }
    }
}

fn chi_table(g: [f64; 2], delta: f64) -> [[f64; 2]; 2] {
    let mut chi = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            chi[i][j] = g[i] * g[j] / (4.0 * delta);
        }
    }
    chi
}

fn adiabatic_ratio(delta: f64, g: [f64; 2], n: [usize; 2]) -> f64 {
    let collective = (g[0] * (n[0] as f64).sqrt()).abs().max((g[1] * (n[1] as f64).sqrt()).abs());
    if delta == 0.0 {
        0.0
    } else if collective == 0.0 {
        f64::INFINITY
    } else {
        delta.abs() / collective
    }
}

pub fn derive_tms_params(sys: &SystemSpec, omega_a: f64, omega_b: f64) -> StageParams {
    derive_tms_params_with(sys, omega_a, omega_b, ValidityThresholds::default())
}

pub fn derive_tms_params_with(sys: &SystemSpec, omega_a: f64, omega_b: f64, thr: ValidityThresholds) -> StageParams {
    let pair = [EnsembleLabel::A, EnsembleLabel::B];
    let n = [sys.ensemble(pair[0]).n, sys.ensemble(pair[1]).n];
    let g = [sys.coupling(pair[0]), sys.coupling(pair[1])];
    let omega_av = 0.5 * (omega_a + omega_b);
    let delta_ab = 0.5 * (omega_a - omega_b);
    let delta_m_eff = sys.delta_m - omega_av;
    let chi = chi_table(g, delta_m_eff);
    let n_bar = ((n[0] * n[1]) as f64).sqrt();
    let residual = [(delta_ab - chi[0][0] * n[0] as f64).abs(), (delta_ab - chi[1][1] * n[1] as f64).abs()];
    let ratio = adiabatic_ratio(delta_m_eff, g, n);
    let mut diagnostics = Vec::new();
    let valid = ratio >= thr.adiabatic && delta_m_eff != 0.0;
    if !valid {
        diagnostics.push(format!("adiabatic elimination questionable: |Δ_M^ab|/(𝒢√N) = {ratio:.3} < {}", thr.adiabatic));
    }
    StageParams {
        stage: Stage::Tms,
        pair,
        n,
        coupling: g,
        frame_frequency: omega_av,
        detuning: delta_ab,
        detuning_signs: [1.0, -1.0],
        delta_m_eff,
        chi,
        n_bar,
        rate: chi[0][1] * n_bar,
        resonance_residual: residual,
        adiabatic_ratio: ratio,
        valid,
        diagnostics,
    }
}

/// Roots of `f² − (Ω+δ_M) f + (Ω δ_M − N̄𝒢²/4) = 0`, larger first.
pub fn frame_frequency_roots(omega: f64, delta_m: f64, n_g2: f64) -> Option<(f64, f64)> {
    let disc = (omega - delta_m).powi(2) + n_g2;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // x² + b x + c with b = −(Ω+δ_M); q = −(b + sign(b)√disc)/2 avoids cancellation
    let b = -(omega + delta_m);
    let c = omega * delta_m - n_g2 / 4.0;
    let sign = if b >= 0.0 { 1.0 } else { -1.0 };
    let q = -0.5 * (b + sign * sq);
    let (r1, r2) = if q != 0.0 { (q, c / q) } else { (0.5 * sq, -0.5 * sq) };
    Some(if r1 >= r2 { (r1, r2) } else { (r2, r1) })
}

pub fn derive_bs_params(sys: &SystemSpec, omega: f64) -> Result<StageParams> {
    derive_bs_params_with(sys, omega, ValidityThresholds::default())
}

pub fn derive_bs_params_with(sys: &SystemSpec, omega: f64, thr: ValidityThresholds) -> Result<StageParams> {
    let pair = [EnsembleLabel::A, EnsembleLabel::C];
    let n = [sys.ensemble(pair[0]).n, sys.ensemble(pair[1]).n];
    let g = [sys.coupling(pair[0]), sys.coupling(pair[1])];
    let n_g2 = 0.5 * (n[0] as f64 * g[0] * g[0] + n[1] as f64 * g[1] * g[1]);
    let (r1, r2) = frame_frequency_roots(omega, sys.delta_m, n_g2).ok_or(Error::NoValidRoot { roots: vec![] })?;
    let assess = |f: f64| {
        let delta_ac = omega - f;
        let delta_m_eff = sys.delta_m - f;
        let ratio = adiabatic_ratio(delta_m_eff, g, n);
        let collective = (g[0] * (n[0] as f64).sqrt()).abs().max((g[1] * (n[1] as f64).sqrt()).abs());
        let scale = delta_ac.abs().max(collective).max(delta_m_eff.abs());
        let frame_ok = scale == 0.0 || f.abs() >= thr.frame * scale;
        let ok = delta_m_eff != 0.0 && ratio >= thr.adiabatic && frame_ok;
        (ok, ratio, delta_ac, delta_m_eff)
    };
    let candidates = [r1, r2];
    let best = candidates
        .iter()
        .map(|&f| (f, assess(f)))
        .filter(|(_, a)| a.0)
        .max_by(|x, y| x.1 .1.partial_cmp(&y.1 .1).unwrap_or(std::cmp::Ordering::Equal));
    let (f_r, (_, ratio, delta_ac, delta_m_eff)) = best.ok_or(Error::NoValidRoot { roots: vec![r1, r2] })?;
    let chi = chi_table(g, delta_m_eff);
    let n_bar = ((n[0] * n[1]) as f64).sqrt();
    let residual = [(delta_ac - chi[0][0] * n[0] as f64).abs(), (delta_ac - chi[1][1] * n[1] as f64).abs()];
    Ok(StageParams {
        stage: Stage::Bs,
        pair,
        n,
        coupling: g,
        frame_frequency: f_r,
        detuning: delta_ac,
        detuning_signs: [1.0, 1.0],
        delta_m_eff,
        chi,
        n_bar,
        rate: chi[0][1] * n_bar,
        resonance_residual: residual,
        adiabatic_ratio: ratio,
        valid: true,
        diagnostics: vec![],
    })
}

/// Residual of the frame condition `4(Ω − f_r)(δ_M − f_r) − N̄𝒢²`.
pub fn frame_condition_residual(omega: f64, delta_m: f64, n_g2: f64, f_r: f64) -> f64 {
    4.0 * (omega - f_r) * (delta_m - f_r) - n_g2
}

/// Microwave drives applied during a stage of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drives {
    pub omega: [f64; 3],
}

impl Drives {
    pub fn from_system(sys: &SystemSpec) -> Self {
        Drives { omega: [sys.ensembles[0].omega, sys.ensembles[1].omega, sys.ensembles[2].omega] }
    }

    /// Entangling stage: `Ω_c = 0`.
    pub fn tms(sys: &SystemSpec) -> Self {
        let mut d = Self::from_system(sys);
        d.omega[2] = 0.0;
        d
    }

    /// Beam-splitter stage: `Ω_b = 0`, `Ω_a = Ω_c = Ω`.
    pub fn bs(omega: f64) -> Self {
        Drives { omega: [omega, 0.0, omega] }
    }
}

/// Hamiltonian of the full dressed-frame model together with its layout
/// (active ensembles in a, b, c order, then the phonon mode).
#[derive(Debug, Clone)]
pub struct FullModel {
    pub hamiltonian: SparseOperator,
    pub layout: Layout,
    pub active: Vec<EnsembleLabel>,
    pub spins: Vec<SpinOperatorSet>,
    pub phonon: PhononOperatorSet,
}

impl FullModel {
    pub fn phonon_slot(&self) -> usize {
        self.active.len()
    }

    /// Embedded dressed-frame spin operator of an active ensemble.
    pub fn spin_op(&self, label: EnsembleLabel, pick: impl Fn(&SpinOperatorSet) -> &SparseOperator) -> Result<SparseOperator> {
        let slot = self
            .active
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::InvalidParameter(format!("ensemble {label} is not active")))?;
        embed(pick(&self.spins[slot]), slot, &self.layout)
    }

    /// `Σ_active S_z^l + m†m`, the generator of the stage rotating frame.
    pub fn frame_generator(&self) -> Result<SparseOperator> {
        let mut acc = embed(&self.phonon.number, self.phonon_slot(), &self.layout)?;
        for (slot, ops) in self.spins.iter().enumerate() {
            acc = acc.add(&embed(&ops.sz, slot, &self.layout)?);
        }
        Ok(acc)
    }
}

/// `H = Σ Ω_l S_z^l − Σ 𝒢_l (m + m†) S_x^l + δ_M m†m` over the active ensembles.
pub fn full_hamiltonian(sys: &SystemSpec, active: &[EnsembleLabel], drives: &Drives) -> Result<FullModel> {
    full_hamiltonian_with_budget(sys, active, drives, DEFAULT_DIM_BUDGET)
}

pub fn full_hamiltonian_with_budget(sys: &SystemSpec, active: &[EnsembleLabel], drives: &Drives, budget: usize) -> Result<FullModel> {
    if active.is_empty() {
        return Err(Error::InvalidParameter("full model needs at least one active ensemble".into()));
    }
    let mut active = active.to_vec();
    active.sort();
    active.dedup();
    let phonon = PhononOperatorSet::new(sys.n_max);
    let mut dims: Vec<usize> = active.iter().map(|&l| sys.ensemble(l).n + 1).collect();
    dims.push(phonon.dim());
    let layout = Layout::new(dims);
    layout.checked_total(budget)?;
    let spins: Vec<SpinOperatorSet> = active.iter().map(|&l| collective_spin_ops(sys.ensemble(l).n)).collect::<Result<_>>()?;
    let ph_slot = active.len();
    let x_ph = embed(&phonon.a.add(&phonon.adag), ph_slot, &layout)?;
    let mut h = embed(&phonon.number, ph_slot, &layout)?.scale_re(sys.delta_m);
    for (slot, (&label, ops)) in active.iter().zip(&spins).enumerate() {
        let omega = drives.omega[label.index()];
        if omega != 0.0 {
            h = h.add(&embed(&ops.sz, slot, &layout)?.scale_re(omega));
        }
        let g = sys.coupling(label);
        if g != 0.0 {
            let sx = embed(&ops.sx, slot, &layout)?;
            h = h.sub(&x_ph.mul(&sx).scale_re(g));
        }
    }
    let hamiltonian = h.hermitize();
    hamiltonian.check_hermitian()?;
    Ok(FullModel { hamiltonian, layout, active, spins, phonon })
}

/// Effective two-ensemble spin model obtained by eliminating the phonon:
///
/// `H = −(1/4Δ)(Σ 𝒢_l S_+^l)(Σ 𝒢_l S_−^l) + δ (σ_1 S_z^1 + σ_2 S_z^2)`
///
/// with the identity-multiple `𝒢_l² s_l(s_l+1)` dropped, i.e.
/// `−χ_12 (S_+^1 S_−^2 + h.c.) + Σ χ_ll ((S_z^l)² − S_z^l) + δ (σ_1 S_z^1 + σ_2 S_z^2)`.
/// Layout is `[N_1+1, N_2+1]`.
pub fn effective_hamiltonian(params: &StageParams, ops1: &SpinOperatorSet, ops2: &SpinOperatorSet) -> Result<(SparseOperator, Layout)> {
    if ops1.n != params.n[0] || ops2.n != params.n[1] {
        return Err(Error::Shape { expected: params.n[0], got: ops1.n });
    }
    let layout = Layout::new(vec![ops1.dim(), ops2.dim()]);
    let sz1 = embed(&ops1.sz, 0, &layout)?;
    let sz2 = embed(&ops2.sz, 1, &layout)?;
    let flip = embed(&ops1.sp, 0, &layout)?.mul(&embed(&ops2.sm, 1, &layout)?);
    let flip = flip.add(&flip.adjoint());
    let chi = params.chi;
    let self1 = sz1.mul(&sz1).sub(&sz1).scale_re(chi[0][0]);
    let self2 = sz2.mul(&sz2).sub(&sz2).scale_re(chi[1][1]);
    let shift = sz1.scale_re(params.detuning * params.detuning_signs[0]).add(&sz2.scale_re(params.detuning * params.detuning_signs[1]));
    let h = flip.scale_re(-chi[0][1]).add(&self1).add(&self2).add(&shift).hermitize();
    h.check_hermitian()?;
    Ok((h, layout))
}

/// Entangling stage model (a, b).
pub fn effective_ab_hamiltonian(params: &StageParams, ops_a: &SpinOperatorSet, ops_b: &SpinOperatorSet) -> Result<(SparseOperator, Layout)> {
    if params.stage != Stage::Tms {
        return Err(Error::InvalidParameter("a–b model needs TMS stage parameters".into()));
    }
    effective_hamiltonian(params, ops_a, ops_b)
}

/// Beam-splitter stage model (a, c).
pub fn effective_ac_hamiltonian(params: &StageParams, ops_a: &SpinOperatorSet, ops_c: &SpinOperatorSet) -> Result<(SparseOperator, Layout)> {
    if params.stage != Stage::Bs {
        return Err(Error::InvalidParameter("a–c model needs BS stage parameters".into()));
    }
    effective_hamiltonian(params, ops_a, ops_c)
}

/// Product form `−(1/4Δ)(Σ𝒢 S_+)(Σ𝒢 S_−) + δ(σ_1 S_z^1 + σ_2 S_z^2)` kept with
/// its identity part; used to cross-check [`effective_hamiltonian`].
pub fn effective_hamiltonian_product_form(params: &StageParams, ops1: &SpinOperatorSet, ops2: &SpinOperatorSet) -> Result<SparseOperator> {
    let layout = Layout::new(vec![ops1.dim(), ops2.dim()]);
    let g = params.coupling;
    let raise = embed(&ops1.sp, 0, &layout)?.scale_re(g[0]).add(&embed(&ops2.sp, 1, &layout)?.scale_re(g[1]));
    let lower = raise.adjoint();
    let sz1 = embed(&ops1.sz, 0, &layout)?;
    let sz2 = embed(&ops2.sz, 1, &layout)?;
    let shift = sz1.scale_re(params.detuning * params.detuning_signs[0]).add(&sz2.scale_re(params.detuning * params.detuning_signs[1]));
    Ok(raise.mul(&lower).scale(C64::new(-1.0 / (4.0 * params.delta_m_eff), 0.0)).add(&shift))
}
