use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spinport_core::engines::dtwa::{self, DtwaConfig, Segment};
use spinport_core::engines::ed::Propagator;
use spinport_core::metrics;
use spinport_core::model::{self, Drives, EnsembleLabel, SystemSpec};
use spinport_core::protocol::{self, EsmTms, ProtocolConfig};
use spinport_core::states::{self, InputStateSpec};

fn esm_witness(c: &mut Criterion) {
    let mut g = c.benchmark_group("esm_witness");
    for n in [20usize, 70] {
        let sys = SystemSpec::reference(n);
        let prep = states::prepare_components(&sys, &InputStateSpec::sc()).unwrap();
        let esm = EsmTms::new(&sys, &prep.a, &prep.b).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &esm, |b, esm| b.iter(|| esm.witness_at(1.0).unwrap()));
    }
    g.finish();
}

fn full_model_step(c: &mut Criterion) {
    let sys = SystemSpec::reference(20);
    let fm = model::full_hamiltonian(&sys, &[EnsembleLabel::A, EnsembleLabel::B], &Drives::tms(&sys)).unwrap();
    let prop = Propagator::new(&fm.hamiltonian).unwrap();
    let mut v = vec![Default::default(); fm.layout.total()];
    v[0] = spinport_core::algebra::C64::new(1.0, 0.0);
    let t = protocol::tms_params(&sys).time_for(0.05);
    c.bench_function("full_model_step_n20", |b| b.iter(|| prop.evolve(&v, t).unwrap()));
}

fn dtwa_batch(c: &mut Criterion) {
    let sys = SystemSpec::reference(20);
    let t = protocol::tms_params(&sys).time_for(0.5);
    let sched = [Segment { duration: t, omega: Drives::tms(&sys).omega }];
    let mut cfg = DtwaConfig::new(500, 1);
    cfg.active = vec![EnsembleLabel::A, EnsembleLabel::B];
    let mut g = c.benchmark_group("dtwa");
    g.sample_size(10);
    g.bench_function("500_trajectories_n20", |b| b.iter(|| dtwa::dtwa_run(&sys, &sched, &[t], &cfg).unwrap()));
    g.finish();
}

fn teleport(c: &mut Criterion) {
    let mut g = c.benchmark_group("teleport");
    g.sample_size(10);
    for n in [10usize, 30] {
        let sys = SystemSpec::reference(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &sys, |b, sys| b.iter(|| protocol::run_protocol(sys, &ProtocolConfig::default()).unwrap()));
    }
    g.finish();
}

fn husimi(c: &mut Criterion) {
    let v = InputStateSpec::Dicke { k_c: 1 }.prepare(70).unwrap();
    c.bench_function("husimi_n70_60x120", |b| b.iter(|| metrics::husimi_q(&v, 60, 120).unwrap()));
}

criterion_group!(benches, esm_witness, full_model_step, dtwa_batch, teleport, husimi);
criterion_main!(benches);
