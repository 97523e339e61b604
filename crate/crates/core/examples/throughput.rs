//! Quick throughput probe for training-step sizing.

use std::time::Instant;
use unifield_core::nn::{grad, Activation, HeadSpec, LossKind, LossSpec, LossTerm, Mlp, Sample};
use unifield_core::optim::{adam_step, AdamState};
use unifield_core::rng::derive_rng;
use rand::Rng;

fn bench(width: usize, steps: usize) {
    let heads = vec![HeadSpec::linear("noise", 2), HeadSpec::sigmoid("open", 1)];
    let mut mlp = Mlp::new(vec![11, width, width, width, 3], Activation::Relu, heads);
    mlp.init_all(&mut derive_rng(0, "bench", &[]));
    let spec = LossSpec {
        terms: vec![
            LossTerm { head: 0, kind: LossKind::SquaredL2, weight: 1.0 },
            LossTerm { head: 1, kind: LossKind::Bce, weight: 0.4 },
        ],
    };
    let mut rng = derive_rng(1, "bench/data", &[]);
    let batch: Vec<Sample> = (0..32)
        .map(|_| Sample {
            input: (0..11).map(|_| rng.random_range(-1.0..1.0)).collect(),
            targets: vec![
                (0..2).map(|_| rng.random_range(-0.5..0.5)).collect(),
                vec![1.0],
            ],
            weight: 1.0,
        })
        .collect();
    let mut state = AdamState::new(&mlp);
    let t0 = Instant::now();
    for step in 0..steps {
        let (g, _
        ) = grad(&mlp, &batch, &spec).unwrap();
        adam_step(&mut mlp, &g, &mut state, 1e-4 * (1.0 - step as f64 / steps as f64)).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "width {width}: {steps} steps in {dt:.2}s -> {:.0} steps/s ({:.1} min per 20k steps)",
        steps as f64 / dt,
        20_000.0 / (steps as f64 / dt) / 60.0
    );
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        println!("single thread:");
        bench(128, 300);
        bench(256, 150);
    });
    let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    pool2.install(|| {
        println!("two threads:");
        bench(128, 300);
        bench(256, 150);
    });
}
