use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use maxpressure::controller::ControllerKind;
use maxpressure::demand::scenario_matrix;
use maxpressure::experiment::{build_network, prepare, simulate, RunOptions, ScenarioConfig};
use maxpressure::network::{build_grid, IntersectionId, LinkTemplate, PhaseScheme};
use maxpressure::sensing::observe_ground_truth;
use maxpressure::stability::{boundary_problem, run_stability_trial, DemandShape, TrialConfig};

fn desk() -> ScenarioConfig {
    ScenarioConfig::desk()
        .with_fixed_occupancy()
        .apply(scenario_matrix()[0])
}

fn controllers(c: &mut Criterion) {
    let cfg = desk();
    let net = Arc::new(build_network(&cfg).unwrap());
    let prep = prepare(&cfg, Arc::clone(&net), 1).unwrap();
    // a loaded mid-peak state to observe
    let mut sim = maxpressure::dynamics::Simulation::new(Arc::clone(&net), &cfg.simulation).unwrap();
    let mut noise = maxpressure::rng::SeedStreams::new(1).stream("saturation", &[]);
    let mut cursor = 0;
    for step in 0..1200 {
        let signals = vec![((step / 10) % 4) as u32; net.intersections.len()];
        let mut batch = Vec::new();
        while cursor < prep.vehicles.len() && prep.vehicles[cursor].step == step {
            let p = &prep.vehicles[cursor];
            batch.push(maxpressure::dynamics::Vehicle::new(
                p.class,
                p.occupancy,
                Arc::clone(&p.route),
                step as f64,
                true,
            ));
            cursor += 1;
        }
        sim.advance_step(&signals, batch, &mut noise).unwrap();
    }
    let obs = observe_ground_truth(&sim, IntersectionId(5), &prep.turn_ratios);
    let mut g = c.benchmark_group("decide");
    for kind in ControllerKind::standard_set() {
        g.bench_function(kind.label(), |b| b.iter(|| kind.decide(black_box(&obs), 0)));
    }
    g.finish();
    c.bench_function("observe", |b| {
        b.iter(|| observe_ground_truth(black_box(&sim), IntersectionId(5), &prep.turn_ratios))
    });
}

fn runs(c: &mut Criterion) {
    let cfg = desk();
    let net = Arc::new(build_network(&cfg).unwrap());
    let mut g = c.benchmark_group("desk");
    g.sample_size(10);
    g.bench_function("prepare", |b| {
        b.iter(|| prepare(&cfg, Arc::clone(&net), black_box(1)).unwrap())
    });
    let prep = prepare(&cfg, Arc::clone(&net), 1).unwrap();
    g.bench_function("simulate OCC-MP", |b| {
        b.iter(|| simulate(&prep, &cfg, ControllerKind::OccMp, &cfg.sensing, &RunOptions::default()).unwrap())
    });
    g.finish();
}

fn stability(c: &mut Criterion) {
    let net = build_grid(1, 1, &LinkTemplate::default(), PhaseScheme::FourPhase).unwrap();
    let problem = boundary_problem(&net, IntersectionId(0), &DemandShape::default(), 1.0).unwrap();
    c.bench_function("min_cover 4-phase", |b| b.iter(|| black_box(&problem).min_cover()));
    let mut g = c.benchmark_group("stability");
    g.sample_size(10);
    let trial = TrialConfig::new(ControllerKind::OccMp, 0.8, 5_000, 1);
    g.bench_function("trial 5000 steps", |b| {
        b.iter(|| run_stability_trial(black_box(&trial)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, controllers, runs, stability);
criterion_main!(benches);
