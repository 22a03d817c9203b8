use std::hint::black_box;

use cfiot::dl_power::{dl_sinr_closed_form, maxmin_dl_full, maxmin_dl_given_p, uniform_power, DEFAULT_TOL};
use cfiot::regressor::{FeatureSpec, NetSpec, Regressor};
use cfiot::rng::seeded;
use cfiot::ul_perf::{exact_mmse_sinr, rm_sinr_default, UlPowerAllocation};
use cfiot::ul_power::{maxmin_rm, DEFAULT_EPS, DEFAULT_MAX_ITER};
use cfiot::{compute_stats, draw_channel, generate_scenario, RadioConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;

fn uplink(c: &mut Criterion) {
    let radio = RadioConfig { pilot_len: 32, ..RadioConfig::default() };
    let scn = generate_scenario(256, 32, 1000.0, &radio, 1).unwrap();
    let stats = compute_stats(&scn).unwrap();
    let full = UlPowerAllocation::full_power(32);
    let draw = draw_channel(&scn, &stats, &mut seeded(2)).unwrap();
    let ones = DVector::from_element(32, 1.0);

    let mut g = c.benchmark_group("uplink_m256_k32");
    g.bench_function("draw_channel", |b| {
        let mut rng = seeded(3);
        b.iter(|| draw_channel(&scn, &stats, &mut rng).unwrap())
    });
    g.bench_function("exact_mmse_sinr", |b| b.iter(|| exact_mmse_sinr(black_box(&draw), &stats, &full, scn.rho_u)));
    g.bench_function("rm_sinr", |b| b.iter(|| rm_sinr_default(black_box(&stats), &full, scn.rho_u)));
    g.bench_function("maxmin_rm", |b| {
        b.iter(|| maxmin_rm(black_box(&stats), &ones, &ones, scn.rho_u, DEFAULT_EPS, DEFAULT_MAX_ITER))
    });
    g.finish();
}

fn downlink(c: &mut Criterion) {
    let radio = RadioConfig { pilot_len: 8, ..RadioConfig::default() };
    let scn = generate_scenario(32, 8, 122.5, &radio, 4).unwrap();
    let stats = compute_stats(&scn).unwrap();
    let p = DVector::from_element(32, 0.5);
    let alloc = uniform_power(&stats, &p).unwrap();
    let reg = Regressor::init(FeatureSpec::default(), &NetSpec::default(), &mut seeded(5)).unwrap();

    let mut g = c.benchmark_group("downlink_m32_k8");
    g.sample_size(10);
    g.bench_function("closed_form_sinr", |b| b.iter(|| dl_sinr_closed_form(&scn, &stats, black_box(&alloc))));
    g.bench_function("given_p", |b| b.iter(|| maxmin_dl_given_p(&stats, black_box(&p), scn.rho_d)));
    g.bench_function("full_maxmin", |b| b.iter(|| maxmin_dl_full(&scn, black_box(&stats), DEFAULT_TOL)));
    g.bench_function("predict_powers", |b| b.iter(|| reg.predict_powers(black_box(&scn.beta))));
    g.finish();
}

criterion_group!(benches, uplink, downlink);
criterion_main!(benches);
