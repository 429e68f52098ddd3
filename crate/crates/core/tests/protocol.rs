use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use spinport_core::algebra::{embed, DenseVector, Layout, SpinRotor, C64};
use spinport_core::metrics::{self, SpinBasis};
use spinport_core::model::SystemSpec;
use spinport_core::protocol::*;
use spinport_core::states::{self, FrameMap, InputStateSpec, Twist};

fn three_slot(sys: &SystemSpec, input: &InputStateSpec, s: f64) -> DenseVector {
    let prep = states::prepare_components(sys, input).unwrap();
    let esm = EsmTms::new(sys, &prep.a, &prep.b).unwrap();
    let ab = esm.state_at(s).unwrap();
    let n: Vec<usize> = sys.ensembles.iter().map(|e| e.n + 1).collect();
    DenseVector::with_layout(ab.kron(&prep.c).amps, Layout::new(n)).unwrap()
}

fn max_diff(a: &nalgebra::DMatrix<C64>, b: &nalgebra::DMatrix<C64>) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn double_mixing_swaps_single_excitation() {
    let sys = SystemSpec::reference(4);
    let prep = states::prepare_components(&sys, &InputStateSpec::sc()).unwrap();
    let pole = |v: &DenseVector| v.amps.iter().position(|z| z.norm() > 0.5).unwrap();
    let (ka, kb) = (pole(&prep.a), pole(&prep.b));
    let k1 = if ka == 0 { 1 } else { ka - 1 };
    let l = Layout::new(vec![5, 5, 5]);
    let v = DenseVector::basis(l.clone(), l.index(&[ka, kb, k1]));
    let (w, _) = stage_bs(&sys, &v, FRAC_PI_2).unwrap();
    assert!((w.amps[l.index(&[k1, kb, ka])].norm_sqr() - 1.0).abs() < 1e-9);
    let (h, _) = stage_bs(&sys, &v, FRAC_PI_4).unwrap();
    assert!((h.amps[l.index(&[k1, kb, ka])].norm_sqr() - 0.5).abs() < 1e-9);
}

#[test]
fn mixing_leaves_poles_alone() {
    // without entanglement a and c sit on the same pole, a fixed point
    let sys = SystemSpec::reference(6);
    let v = three_slot(&sys, &InputStateSpec::Pdsc { phi_c: 0.0 }, 0.0);
    let (w, _) = stage_bs(&sys, &v, FRAC_PI_4).unwrap();
    let lab = states::lab_operators_in_dressed(6).unwrap();
    for slot in [0, 2] {
        let z = embed(&lab.sz, slot, &v.layout).unwrap();
        assert!((v.expectation(&z).re - w.expectation(&z).re).abs() < 1e-9);
    }
}

#[test]
fn b_marginal_is_untouched_by_mixing_and_measurement() {
    let sys = SystemSpec::reference(8);
    let v = three_slot(&sys, &InputStateSpec::Ss { twist: Twist::Angle(0.1) }, 0.6);
    let before = metrics::reduced_density(&v, 1).unwrap();
    let (w, _) = stage_bs(&sys, &v, FRAC_PI_4).unwrap();
    let after = metrics::reduced_density(&w, 1).unwrap();
    assert!(max_diff(&before, &after) < 1e-9);

    // Σ over outcomes of the unnormalized conditional b states recovers the marginal
    let frames: Vec<FrameMap> = (0..3).map(|_| FrameMap::new(8).unwrap()).collect();
    let mut lab = w.clone();
    for (slot, f) in frames.iter().enumerate() {
        lab = spinport_core::engines::ed::apply_on_slots(&lab, &[slot], |x| Ok(f.to_lab(x))).unwrap();
    }
    let marginal = metrics::reduced_density(&lab, 1).unwrap();
    let mut sum = nalgebra::DMatrix::<C64>::zeros(9, 9);
    for (_, _, _, b) in measure_az_cz(&lab).unwrap() {
        let b = nalgebra::DVector::from_vec(b);
        sum += &b * b.adjoint();
    }
    assert!(max_diff(&marginal, &sum) < 1e-9);
}

#[test]
fn probabilities_complete_for_every_input() {
    let sys = SystemSpec::reference(10);
    for input in [
        InputStateSpec::sc(),
        InputStateSpec::Pdsc { phi_c: 0.1 },
        InputStateSpec::Ss { twist: Twist::TargetDb(-3.0) },
        InputStateSpec::Dicke { k_c: 1 },
        InputStateSpec::Dicke { k_c: 2 },
    ] {
        let r = run_protocol(&sys, &ProtocolConfig { input, ..Default::default() }).unwrap();
        assert!((r.probability_total - 1.0).abs() < 1e-9);
        let avg: f64 = r.records.iter().map(|x| x.probability * x.fidelity).sum();
        assert!((avg - r.average_fidelity).abs() < 1e-12);
        // enumeration order does not matter
        let rev: f64 = r.records.iter().rev().map(|x| x.probability * x.fidelity).sum();
        assert!((rev - avg).abs() < 1e-12);
        assert!(r.records.iter().all(|x| (0.0..=1.0 + 1e-12).contains(&x.fidelity)));
    }
}

#[test]
fn coherent_input_most_probable_outcome_is_zero_displacement() {
    let sys = SystemSpec::reference(70);
    let r = run_protocol(&sys, &ProtocolConfig::default()).unwrap();
    let mp = r.most_probable.unwrap();
    assert_eq!((mp.beta_z, mp.beta_y), (0.0, 0.0));
    assert!((mp.fidelity - 0.99).abs() <= 0.01);
}

#[test]
fn feedback_off_differs_by_pi_rotation_at_zero_displacement() {
    let sys = SystemSpec::reference(12);
    let base = ProtocolConfig { keep_states: true, ..Default::default() };
    let on = run_protocol(&sys, &base).unwrap();
    let off = run_protocol(&sys, &ProtocolConfig { feedback: false, ..base }).unwrap();
    let pick = |r: &ProtocolResult| r.records.iter().find(|x| x.beta_z == 0.0 && x.beta_y == 0.0).unwrap().state.clone().unwrap();
    let rotor = SpinRotor::new(12).unwrap();
    let want = rotor.rz(-PI, &pick(&off).amps);
    let got = pick(&on);
    assert!(want.iter().zip(&got.amps).all(|(a, b)| (a - b).norm() < 1e-12));
}

#[test]
fn no_entanglement_gives_classical_limit() {
    let sys = SystemSpec::reference(70);
    let r = run_protocol(&sys, &ProtocolConfig { tms: TmsMode::FixedR { r: 0.0 }, ..Default::default() }).unwrap();
    assert!((r.average_fidelity - 0.5).abs() < 0.1, "F̄ = {}", r.average_fidelity);
}

#[test]
fn ideal_squeezing_oracle_teleports_faithfully() {
    for n in [20usize, 40, 70] {
        let cfg = ProtocolConfig { oracle_r: Some(oracle_strength(n)), ..Default::default() };
        let r = run_protocol(&SystemSpec::reference(n), &cfg).unwrap();
        let bound = 1.0 - 10.0 / n as f64;
        assert!(r.most_probable.unwrap().fidelity > bound);
        assert!(r.average_fidelity > bound, "N̄ = {n}: F̄ = {}", r.average_fidelity);
    }
}

#[test]
fn entangling_stage_shrinks_hybrid_variance() {
    let sys = SystemSpec::reference(40);
    let v0 = three_slot(&sys, &InputStateSpec::sc(), 0.0);
    for s in [0.2, 0.4, 0.6] {
        let v = three_slot(&sys, &InputStateSpec::sc(), s);
        let lab = states::lab_operators_in_dressed(40).unwrap();
        let op = embed(&lab.sy, 1, &v.layout).unwrap().sub(&embed(&lab.sz, 0, &v.layout).unwrap());
        let ratio = metrics::mean_and_variance(&v, &op).1 / metrics::mean_and_variance(&v0, &op).1;
        assert!((ratio - (-2.0 * s).exp()).abs() < 5.0 / 40.0, "s = {s}: {ratio}");
    }
    let w = metrics::witness_vs(&three_slot(&sys, &InputStateSpec::sc(), 0.0), 0, 1, SpinBasis::Dressed).unwrap();
    assert!((w - 1.0).abs() < 1e-10);
}

#[test]
fn mixing_follows_linearized_relation() {
    let n = 40;
    let sys = SystemSpec::reference(n);
    let input = InputStateSpec::Pdsc { phi_c: 6f64.to_radians() };
    let prep = states::prepare_components(&sys, &input).unwrap();
    let esm = EsmTms::new(&sys, &prep.a, &prep.b).unwrap();
    let (_, s) = scan_minimum(|s| esm.witness_at(s), 1.5, 0.02).unwrap();
    let v = three_slot(&sys, &input, s);
    let lab = states::lab_operators_in_dressed(n).unwrap();
    let sza = embed(&lab.sz, 0, &v.layout).unwrap();
    let syc = embed(&lab.sy, 2, &v.layout).unwrap();
    let pred = (v.expectation(&syc).re + v.expectation(&sza).re) / 2f64.sqrt();
    let (w, _) = stage_bs(&sys, &v, FRAC_PI_4).unwrap();
    let got = w.expectation(&sza).re;
    assert!(((got - pred) / pred).abs() < 5.0 / n as f64, "{got} vs {pred}");
}

#[test]
fn witness_dips_below_one_before_minimum() {
    let sys = SystemSpec::reference(70);
    let grid = r_grid(1.5, 0.02);
    let v = witness_scan(&sys, &grid, WitnessModel::Esm).unwrap();
    let (imin, _) = v.iter().enumerate().fold((0, f64::INFINITY), |a, (i, &x)| if x < a.1 { (i, x) } else { a });
    assert!(imin > 0 && imin + 1 < grid.len());
    assert!(v[1..=imin].iter().all(|&x| x < 1.0));
}
