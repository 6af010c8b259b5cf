use std::time::Instant;
use udeepsc::model::ModelConfig;
use udeepsc::tasks::TaskId;
use udeepsc::training::{TrainConfig, Trainer};

fn main() {
    let batch: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(16);
    let steps: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);
    let tc = TrainConfig {
        batch_size: batch,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<udeepsc::Real>::new(ModelConfig::default(), tc, &TaskId::ALL).unwrap();
    // warm up
    for _ in 0..3 {
        trainer.train_step().unwrap();
    }
    let t0 = Instant::now();
    for _ in 0..steps {
        trainer.train_step().unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "batch {batch}: {:.1} ms/step -> 20k steps ~ {:.1} min",
        dt / steps as f64 * 1e3,
        dt / steps as f64 * 20_000.0 / 60.0
    );
}
