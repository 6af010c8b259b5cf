use udeepsc::model::{Model, ModelConfig, Prediction, RunMode, RunOptions};
use udeepsc::multiexit::Phase;
use udeepsc::nn::{AdamW, Session};
use udeepsc::tasks::{gen_sample, Split, TaskId, TaskRegistry};

fn main() {
    let task = TaskId::parse(&std::env::args().nth(1).unwrap_or("img-cls".into())).unwrap();
    let quantize = std::env::args().nth(2).map(|s| s == "q").unwrap_or(false);
    let select = std::env::args().nth(3).map(|s| s == "s").unwrap_or(false);
    let noise = std::env::args().nth(4).map(|s| s == "n").unwrap_or(false);
    let clip = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    println!("task {} quantize {quantize} select {select} noise {noise} clip {clip} lr {lr}", task.name());

    let kt: usize = std::env::args().nth(8).and_then(|s| s.parse().ok()).unwrap_or(128);
    let registry = TaskRegistry::standard(1, 4);
    let config = ModelConfig {
        codebook_sizes: (128, kt, 64),
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(config, registry).unwrap();
    if quantize {
        model.warm_start_codebook(0xb00c).unwrap();
    }
    let mut opt = AdamW::new(&model.params, lr, 5e-3, Some(clip));
    let mut params_holder = model; // own it mutably
    let def = params_holder.task(task).clone();
    let batch_size = 16;

    let max_steps: u64 = std::env::args().nth(7).and_then(|s| s.parse().ok()).unwrap_or(1500);
    for step in 1..=max_steps {
        let sigma2 = if noise { udeepsc::channel::snr_to_sigma2(6.0, 1.0).unwrap() } else { 0.0 };
        let batch: Vec<_> = (0..batch_size)
            .map(|b| {
                let idx = ((step as usize * 31 + b) * 7) % def.data.train_size;
                gen_sample(&def.data, Split::Train, idx).unwrap()
            })
            .collect();
        let mut sess = Session::new(&params_holder.params);
        let opts = RunOptions {
            sigma2,
            quantize,
            select,
            noise_seed: step,
            mode: RunMode::Train { tau: 2.0, gumbel_seed: step ^ 5 },
        };
        let out = params_holder
            .task_train_forward(&mut sess, task, &batch, Phase::Two, &opts)
            .unwrap();
        let mut total = out.loss_p;
        if quantize {
            total = sess.tape.add(total, out.loss_c);
        }
        if select {
            total = sess.tape.add(total, out.loss_r);
        }
        let loss_val = sess.tape.scalar(total);
        // grad norm before clip
        let grads = sess.grads(total);
        if step % 300 == 0 || step == 1 {
            let gn: f32 = grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f32>()).sum::<f32>().sqrt();
            // quick val accuracy at last layer
            let data: Vec<_> = (0..128).map(|i| gen_sample(&def.data, Split::Val, i).unwrap()).collect();
            let samples: Vec<_> = data.iter().map(|(d, _)| d.clone()).collect();
            let (preds, _, _) = params_holder
                .eval_all_layers(task, &samples, &RunOptions { sigma2, quantize, select, noise_seed: 1, mode: RunMode::Eval })
                .unwrap();
            let labels: Vec<_> = data.iter().map(|(_, l)| l.clone()).collect();
            let metric = udeepsc::model::metric_of(task, preds.last().unwrap(), &labels);
            let _ = Prediction::Class(vec![]);
            println!("step {step}: loss {loss_val:.4} gradnorm {gn:.2} val-metric {metric:.4}");
        }
        opt.step(&mut params_holder.params, &grads);
    }
}
