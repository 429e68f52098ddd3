//! Input and ancilla state preparation.
//!
//! Single-ensemble states are built in the lab basis (eigenbasis of the lab
//! `S_z`). Dynamics run in the dressed basis, related to the lab one by
//! `−S_x^dressed ↔ S_z`, `S_y ↔ S_y`, `S_z^dressed ↔ S_x`. The conversion is
//! the π/2 rotation about `y` implemented by [`FrameMap`].

use serde::{Deserialize, Serialize};

use crate::algebra::{collective_spin_ops, DenseVector, Layout, SparseOperator, SpinOperatorSet, SpinRotor, C64, ONE, ZERO};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{EnsembleLabel, SystemSpec};

fn ln_binomial(n: usize, k: usize) -> f64 {
    fn ln_fact(n: usize) -> f64 {
        (1..=n).map(|i| (i as f64).ln()).sum()
    }
    ln_fact(n) - ln_fact(k) - ln_fact(n - k)
}

/// Amplitudes of `exp(−iφS_z) exp(−iθS_y) |m = +N/2⟩` in the lab basis.
pub fn spin_coherent_amps(n: usize, theta: f64, phi: f64) -> Vec<C64> {
    let s = n as f64 / 2.0;
    let (c, sn) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    (0..=n)
        .map(|k| {
            let (up, down) = (k, n - k);
            if (c == 0.0 && up > 0) || (sn == 0.0 && down > 0) {
                return ZERO;
            }
            let mut ln = 0.5 * ln_binomial(n, k);
            if up > 0 {
                ln += up as f64 * c.abs().ln();
            }
            if down > 0 {
                ln += down as f64 * sn.abs().ln();
            }
            let negative = (c < 0.0 && up % 2 == 1) ^ (sn < 0.0 && down % 2 == 1);
            let mag = if negative { -ln.exp() } else { ln.exp() };
            C64::from_polar(1.0, -phi * (k as f64 - s)) * mag
        })
        .collect()
}

pub fn spin_coherent(n: usize, theta: f64, phi: f64) -> DenseVector {
    DenseVector::from_amps(spin_coherent_amps(n, theta, phi))
}

/// Coherent state pointing along a lab-frame direction.
pub fn spin_coherent_along(n: usize, dir: [f64; 3]) -> DenseVector {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let theta = (dir[2] / norm).clamp(-1.0, 1.0).acos();
    let phi = dir[1].atan2(dir[0]);
    spin_coherent(n, theta, phi)
}

/// `exp(−iφ_c S_z) v`
pub fn phase_displaced(v: &DenseVector, phi_c: f64) -> DenseVector {
    let s = (v.len() - 1) as f64 / 2.0;
    let amps = v.amps.iter().enumerate().map(|(k, a)| a * C64::from_polar(1.0, -phi_c * (k as f64 - s))).collect();
    DenseVector { amps, layout: v.layout.clone() }
}

/// `exp(−iφ_ss S_z²) v`
pub fn one_axis_twisted(v: &DenseVector, phi_ss: f64) -> DenseVector {
    let s = (v.len() - 1) as f64 / 2.0;
    let amps = v
        .amps
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let m = k as f64 - s;
            a * C64::from_polar(1.0, -phi_ss * m * m)
        })
        .collect();
    DenseVector { amps, layout: v.layout.clone() }
}

/// `exp(−i(π/2)S_y) (S_+)^k |ψ_SC(π,0)⟩`, normalized after the ladder steps.
pub fn dicke_input(n: usize, k: usize) -> Result<DenseVector> {
    if k > n {
        return Err(Error::InvalidParameter(format!("Dicke excitation k = {k} exceeds N = {n}")));
    }
    // |ψ_SC(π,0)⟩ is the south pole with unit amplitude
    let mut amps = vec![ZERO; n + 1];
    amps[k] = ONE;
    let rotor = SpinRotor::new(n)?;
    Ok(DenseVector::from_amps(rotor.ry(std::f64::consts::FRAC_PI_2, &amps)))
}

/// How the squeezed input is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Twist {
    /// Twisting angle `φ_ss` in radians.
    Angle(f64),
    /// Target Wineland squeezing in dB; the angle is found by bisection.
    TargetDb(f64),
}

/// State to be teleported, prepared on ensemble c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputStateSpec {
    /// `|ψ_SC(θ,φ)⟩`
    Sc { theta: f64, phi: f64 },
    /// `exp(−iφ_c S_z)|ψ_SC(π/2,π)⟩`
    Pdsc { phi_c: f64 },
    /// `exp(−iφ_ss S_z²)|ψ_SC(π/2,π)⟩`
    Ss { twist: Twist },
    /// Rotated Dicke state with `k_c` excitations.
    Dicke { k_c: usize },
}

impl InputStateSpec {
    pub fn sc() -> Self {
        InputStateSpec::Sc { theta: std::f64::consts::FRAC_PI_2, phi: std::f64::consts::PI }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            InputStateSpec::Sc { .. } => "sc",
            InputStateSpec::Pdsc { .. } => "pdsc",
            InputStateSpec::Ss { .. } => "ss",
            InputStateSpec::Dicke { .. } => "dicke",
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let finite = match *self {
            InputStateSpec::Sc { theta, phi } => theta.is_finite() && phi.is_finite(),
            InputStateSpec::Pdsc { phi_c } => phi_c.is_finite(),
            InputStateSpec::Ss { twist: Twist::Angle(a) } => a.is_finite(),
            InputStateSpec::Ss { twist: Twist::TargetDb(d) } => d.is_finite() && d <= 0.0,
            InputStateSpec::Dicke { k_c } => {
                if k_c > n {
                    return Err(Error::InvalidParameter(format!("k_c = {k_c} exceeds N_c = {n}")));
                }
                true
            }
        };
        if !finite {
            return Err(Error::InvalidParameter(format!("input state parameters not finite: {self:?}")));
        }
        Ok(())
    }

    /// Prepares the lab-basis state of ensemble c.
    pub fn prepare(&self, n: usize) -> Result<DenseVector> {
        self.validate(n)?;
        let pi = std::f64::consts::PI;
        Ok(match *self {
            InputStateSpec::Sc { theta, phi } => spin_coherent(n, theta, phi),
            InputStateSpec::Pdsc { phi_c } => phase_displaced(&spin_coherent(n, pi / 2.0, pi), phi_c),
            InputStateSpec::Ss { twist } => {
                let phi_ss = match twist {
                    Twist::Angle(a) => a,
                    Twist::TargetDb(db) => calibrate_twist(n, db)?,
                };
                one_axis_twisted(&spin_coherent(n, pi / 2.0, pi), phi_ss)
            }
            InputStateSpec::Dicke { k_c } => dicke_input(n, k_c)?,
        })
    }
}

/// Finds `φ_ss ≥ 0` such that the twisted `|ψ_SC(π/2,π)⟩` has Wineland
/// squeezing `target_db` (within 0.02 dB; in practice far tighter).
pub fn calibrate_twist(n: usize, target_db: f64) -> Result<f64> {
    let pi = std::f64::consts::PI;
    let base = spin_coherent(n, pi / 2.0, pi);
    let xi = |phi: f64| metrics::squeezing_db(&one_axis_twisted(&base, phi)).unwrap_or(f64::INFINITY);
    if target_db >= 0.0 {
        return Ok(0.0);
    }
    // ξ(φ) decreases from 0 dB to a minimum, then rises: bracket the descending branch
    let mut step = 0.05 / (n as f64).powf(2.0 / 3.0);
    let (mut lo, mut hi) = (0.0, step);
    let mut prev = xi(0.0);
    loop {
        let cur = xi(hi);
        if cur <= target_db {
            break;
        }
        if cur > prev || hi > pi {
            return Err(Error::InvalidParameter(format!("squeezing {target_db} dB unreachable by one-axis twisting at N = {n}")));
        }
        prev = cur;
        lo = hi;
        step *= 1.3;
        hi += step;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if xi(mid) > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Converts single-ensemble vectors between lab and dressed bases.
#[derive(Debug, Clone)]
pub struct FrameMap {
    rotor: SpinRotor,
}

impl FrameMap {
    pub fn new(n: usize) -> Result<Self> {
        Ok(FrameMap { rotor: SpinRotor::new(n)? })
    }

    pub fn rotor(&self) -> &SpinRotor {
        &self.rotor
    }

    /// Lab-basis coordinates → dressed-basis coordinates: `exp(+i(π/2)S_y)`.
    pub fn to_dressed(&self, lab: &[C64]) -> Vec<C64> {
        self.rotor.ry(-std::f64::consts::FRAC_PI_2, lab)
    }

    /// Dressed-basis coordinates → lab-basis coordinates.
    pub fn to_lab(&self, dressed: &[C64]) -> Vec<C64> {
        self.rotor.ry(std::f64::consts::FRAC_PI_2, dressed)
    }
}

/// Lab-frame spin operators written as matrices in the dressed basis:
/// `S_x = 𝒮_z`, `S_y = 𝒮_y`, `S_z = −𝒮_x`.
pub fn lab_operators_in_dressed(n: usize) -> Result<SpinOperatorSet> {
    let d = collective_spin_ops(n)?;
    let sx = d.sz.clone();
    let sy = d.sy.clone();
    let sz = d.sx.scale_re(-1.0);
    let sp = sx.add(&sy.scale(C64::new(0.0, 1.0)));
    let sm = sp.adjoint();
    Ok(SpinOperatorSet { n, sx, sy, sz, sp, sm })
}

/// Dressed-basis product state of one ensemble polarized along its
/// configured lab orientation.
pub fn polarized_dressed(n: usize, orientation: [f64; 3], frame: &FrameMap) -> DenseVector {
    let lab = spin_coherent_along(n, orientation);
    DenseVector::from_amps(frame.to_dressed(&lab.amps))
}

/// Per-ensemble dressed-basis vectors of the initial product state.
#[derive(Debug, Clone)]
pub struct PreparedSystem {
    pub a: DenseVector,
    pub b: DenseVector,
    pub c: DenseVector,
    /// Lab-basis input on c, the reference for fidelities.
    pub input_lab: DenseVector,
}

pub fn prepare_components(sys: &SystemSpec, input: &InputStateSpec) -> Result<PreparedSystem> {
    sys.validate()?;
    let ea = sys.ensemble(EnsembleLabel::A);
    let eb = sys.ensemble(EnsembleLabel::B);
    let ec = sys.ensemble(EnsembleLabel::C);
    let fa = FrameMap::new(ea.n)?;
    let fb = FrameMap::new(eb.n)?;
    let fc = FrameMap::new(ec.n)?;
    let input_lab = input.prepare(ec.n)?;
    Ok(PreparedSystem {
        a: polarized_dressed(ea.n, ea.orientation, &fa),
        b: polarized_dressed(eb.n, eb.orientation, &fb),
        c: DenseVector::from_amps(fc.to_dressed(&input_lab.amps)),
        input_lab,
    })
}

/// Full product state `a ⊗ b ⊗ c` (⊗ phonon vacuum when `with_phonon`).
pub fn prepare_system(sys: &SystemSpec, input: &InputStateSpec, with_phonon: bool) -> Result<DenseVector> {
    let p = prepare_components(sys, input)?;
    let mut v = p.a.kron(&p.b).kron(&p.c);
    if with_phonon {
        let vac = DenseVector::basis(Layout::new(vec![sys.n_max + 1]), 0);
        v = v.kron(&vac);
    }
    v.layout.checked_total(crate::algebra::DEFAULT_DIM_BUDGET)?;
    Ok(v)
}

/// `⟨op⟩` on a single-ensemble vector; shorthand used throughout tests.
pub fn expect(v: &DenseVector, op: &SparseOperator) -> f64 {
    v.expectation(op).re
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::embed;
    use std::f64::consts::PI;

    #[test]
    fn coherent_poles() {
        let v = spin_coherent(6, 0.0, 0.0);
        assert!((v.amps[6] - ONE).norm() < 1e-14);
        let v = spin_coherent(6, PI, 0.0);
        assert!((v.amps[0].norm() - 1.0).abs() < 1e-14);
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coherent_matches_rotor() {
        let n = 9;
        let rotor = SpinRotor::new(n).unwrap();
        let mut top = vec![ZERO; n + 1];
        top[n] = ONE;
        for &(th, ph) in &[(0.3, 1.1), (PI / 2.0, PI), (2.5, -0.7)] {
            let via = rotor.rz(ph, &rotor.ry(th, &top));
            let direct = spin_coherent_amps(n, th, ph);
            for k in 0..=n {
                assert!((via[k] - direct[k]).norm() < 1e-11);
            }
        }
    }

    #[test]
    fn coherent_mean_sx() {
        let ops = collective_spin_ops(10).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let (th, ph) = (i as f64 * 0.6, j as f64 * 1.1);
                let v = spin_coherent(10, th, ph);
                assert!((expect(&v, &ops.sx) - 5.0 * th.sin() * ph.cos()).abs() < 1e-10);
                assert!((expect(&v, &ops.sy) - 5.0 * th.sin() * ph.sin()).abs() < 1e-10);
                assert!((expect(&v, &ops.sz) - 5.0 * th.cos()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn phase_displacement() {
        let v = spin_coherent(70, PI / 2.0, PI);
        assert_eq!(phase_displaced(&v, 0.0), v);
        let w = phase_displaced(&v, 6f64.to_radians());
        let phase = metrics::phase_of(&w).unwrap();
        assert!((phase - 6.0).abs() < 0.01, "{phase}");
        // integer spin: 2π returns the state, half-integer picks up −1
        let w = phase_displaced(&v, 2.0 * PI);
        assert!((v.inner(&w) - ONE).norm() < 1e-10);
        let odd = spin_coherent(3, 1.0, 0.4);
        let w = phase_displaced(&odd, 2.0 * PI);
        assert!((odd.inner(&w) + ONE).norm() < 1e-10);
    }

    #[test]
    fn twisting_preserves_sz_and_parity() {
        let ops = collective_spin_ops(70).unwrap();
        let v = spin_coherent(70, PI / 2.0, PI);
        assert_eq!(one_axis_twisted(&v, 0.0), v);
        let w = one_axis_twisted(&v, 0.02);
        assert!((expect(&v, &ops.sz) - expect(&w, &ops.sz)).abs() < 1e-12);
        let dist = metrics::magnetization_distribution(&w, metrics::Axis::X).unwrap();
        for (k, p) in dist.iter().enumerate() {
            // M_x + N/2 = k
            if k % 2 == 1 {
                assert!(*p < 1e-20, "odd M_x + N/2 = {k} has weight {p}");
            }
        }
    }

    #[test]
    fn twist_calibration() {
        let phi = calibrate_twist(70, -4.15).unwrap();
        let w = one_axis_twisted(&spin_coherent(70, PI / 2.0, PI), phi);
        assert!((metrics::squeezing_db(&w).unwrap() + 4.15).abs() < 0.02);
    }

    #[test]
    fn dicke_states() {
        // k = 0 is the rotated pole: a coherent state along −x
        let d0 = dicke_input(8, 0).unwrap();
        let sc = spin_coherent(8, PI / 2.0, PI);
        assert!((d0.inner(&sc).norm() - 1.0).abs() < 1e-10);
        // k = 1, N = 2: exp(−iπ/2 S_y)|m=0⟩ = (|−1⟩ − |+1⟩)/√2 up to phase
        let d = dicke_input(2, 1).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((d.amps[0].re - r).abs() < 1e-12 && d.amps[1].norm() < 1e-12 && (d.amps[2].re + r).abs() < 1e-12, "{:?}", d.amps);
        assert!(dicke_input(4, 5).is_err());
        // the π/2 rotation about y carries the S_z eigenvalue k − N/2 over to S_x
        let ops = collective_spin_ops(10).unwrap();
        let d = dicke_input(10, 2).unwrap();
        assert!((expect(&d, &ops.sx) + 3.0).abs() < 1e-10);
    }

    #[test]
    fn frame_map_dictionary() {
        let n = 7;
        let f = FrameMap::new(n).unwrap();
        let lab = collective_spin_ops(n).unwrap();
        let dressed_view = lab_operators_in_dressed(n).unwrap();
        let v = spin_coherent(n, 1.1, -0.4);
        let d = DenseVector::from_amps(f.to_dressed(&v.amps));
        for (a, b) in [(&lab.sx, &dressed_view.sx), (&lab.sy, &dressed_view.sy), (&lab.sz, &dressed_view.sz)] {
            assert!((expect(&v, a) - expect(&d, b)).abs() < 1e-11);
        }
        let back = f.to_lab(&d.amps);
        for k in 0..=n {
            assert!((back[k] - v.amps[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn prepared_system_poles() {
        let sys = SystemSpec::reference(6);
        let v = prepare_system(&sys, &InputStateSpec::sc(), true).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-12);
        let layout = v.layout.clone();
        let ops = collective_spin_ops(6).unwrap();
        let sza = embed(&ops.sz, 0, &layout).unwrap();
        let szb = embed(&ops.sz, 1, &layout).unwrap();
        let szc = embed(&ops.sz, 2, &layout).unwrap();
        assert!((v.expectation(&sza).re + 3.0).abs() < 1e-10);
        assert!((v.expectation(&szb).re - 3.0).abs() < 1e-10);
        assert!((v.expectation(&szc).re + 3.0).abs() < 1e-10);
        let ph = crate::algebra::PhononOperatorSet::new(sys.n_max);
        let num = embed(&ph.number, 3, &layout).unwrap();
        assert!(v.expectation(&num).norm() < 1e-14);
    }

    #[test]
    fn all_inputs_normalized_n70() {
        let sys = SystemSpec::reference(70);
        for input in [
            InputStateSpec::sc(),
            InputStateSpec::Pdsc { phi_c: 6f64.to_radians() },
            InputStateSpec::Ss { twist: Twist::TargetDb(-4.15) },
            InputStateSpec::Dicke { k_c: 1 },
        ] {
            let p = prepare_components(&sys, &input).unwrap();
            for v in [&p.a, &p.b, &p.c, &p.input_lab] {
                assert!((v.norm() - 1.0).abs() < 1e-12, "{input:?}");
            }
        }
    }
}
