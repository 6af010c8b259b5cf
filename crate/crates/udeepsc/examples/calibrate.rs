use udeepsc::evaluation::{evaluate_task, upper_bound_metric};
use udeepsc::model::{ModelConfig, RunOptions};
use udeepsc::tasks::TaskId;
use udeepsc::training::{TrainConfig, Trainer};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let every: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let tc = TrainConfig::default();
    let mut trainer = Trainer::<udeepsc::Real>::new(ModelConfig::default(), tc, &TaskId::ALL).unwrap();
    let sigma2 = udeepsc::channel::snr_to_sigma2(12.0, 1.0).unwrap();
    while trainer.step < steps {
        let target = (trainer.step + every).min(steps);
        while trainer.step < target {
            let r = trainer.train_step().unwrap();
            if r.step % 250 == 0 {
                println!("step {}: total {:.4} (p {:.4} c {:.4} r {:.4})", r.step, r.total, r.loss_p, r.loss_c, r.loss_r);
            }
        }
        println!("--- eval at step {} (12 dB, delta 0.8) ---", trainer.step);
        for task in TaskId::ALL {
            let ev = evaluate_task(&trainer.model, task, &RunOptions::eval(sigma2, 999), 0.8, 7).unwrap();
            let ub = upper_bound_metric(&trainer.model, task, true).unwrap();
            println!(
                "  {:9} metric {:7.4} ub {:7.4} exit {:.2} kept {:5.1} certs {:?}",
                task.name(), ev.metric, ub, ev.mean_exit, ev.mean_kept,
                ev.layer_certainty.iter().map(|c| (c * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
}
