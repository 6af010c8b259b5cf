//! Training orchestration: weighted two-task sampling, SNR sampling, the
//! combined loss (two-phase multi-exit + codebook + ratio + domain
//! adaptation), optimization, loss logging, and checkpointing.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, RunMode, RunOptions};
use crate::multiexit::Phase;
use crate::nn::AdamW;
use crate::scalar::Scalar;
use crate::tasks::{gen_sample, Label, SampleData, Split, TaskId, TaskRegistry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    /// Weight of the ratio loss.
    pub lambda_ratio: f64,
    /// Weight of the domain adaptation loss.
    pub lambda_da: f64,
    pub grad_clip: f64,
    pub master_seed: u64,
    pub data_seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 5e-3,
            snr_low_db: 0.0,
            snr_high_db: 12.0,
            lambda_ratio: 1.0,
            lambda_da: 0.1,
            grad_clip: 1.0,
            master_seed: 1,
            data_seed: 1,
            checkpoint_every: 5_000,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.snr_low_db > self.snr_high_db {
            return Err(Error::Config("inverted SNR range".into()));
        }
        Ok(())
    }
}

/// Draw two distinct tasks without replacement, each position weighted by
/// dataset size.
pub fn sample_task_pair(registry: &TaskRegistry, seed: u64) -> Result<(TaskId, TaskId)> {
    if registry.tasks.len() < 2 {
        return Err(Error::Usage("need at least two registered tasks".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pool: Vec<(TaskId, f64)> = registry
        .tasks
        .iter()
        .map(|t| (t.id, t.spec.dataset_size as f64))
        .collect();
    let mut draw = |pool: &mut Vec<(TaskId, f64)>| -> TaskId {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut x = rng.gen_range(0.0..total);
        for (i, (id, w)) in pool.iter().enumerate() {
            if x < *w {
                let id = *id;
                pool.remove(i);
                return id;
            }
            x -= w;
        }
        let (id, _) = pool.pop().expect("non-empty pool");
        id
    };
    let a = draw(&mut pool);
    let b = draw(&mut pool);
    Ok((a, b))
}

/// Per-step loss report; one CSV row.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub snr_db: f64,
    pub loss_p: f64,
    pub loss_c: f64,
    pub loss_r: f64,
    pub loss_a: f64,
    pub total: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str =
        "step,task_a,task_b,snr_db,loss_p,loss_c,loss_r,loss_a,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.task_a.name(),
            self.task_b.name(),
            self.snr_db,
            self.loss_p,
            self.loss_c,
            self.loss_r,
            self.loss_a,
            self.total
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(a.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(b.wrapping_mul(0x94d049bb133111eb))
}

/// Model + optimizer + step counter; the mutable training state.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub config: TrainConfig,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_config: ModelConfig, config: TrainConfig, tasks: &[TaskId]) -> Result<Self> {
        config.validate()?;
        let registry = TaskRegistry::subset(config.data_seed, model_config.dec_layers, tasks);
        let mut model = Model::new(model_config, registry)?;
        model.warm_start_codebook(mix(config.master_seed, 0xb00c, 0))?;
        let opt = AdamW::new(
            &model.params,
            config.lr,
            config.weight_decay,
            Some(config.grad_clip),
        );
        Ok(Trainer {
            model,
            opt,
            config,
            step: 0,
        })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = crate::checkpoint::load(path)?;
        let config: TrainConfig = match &ckpt.train_config {
            Some(v) => serde_json::from_value(v.clone())?,
            None => {
                return Err(Error::Checkpoint(
                    "archive has no training configuration to resume from".into(),
                ))
            }
        };
        let (model, opt) = crate::checkpoint::restore_model::<T>(&ckpt)?;
        let opt = match opt {
            Some(mut o) => {
                o.lr = crate::scalar::s(config.lr);
                o.weight_decay = crate::scalar::s(config.weight_decay);
                o.clip_norm = Some(crate::scalar::s(config.grad_clip));
                o
            }
            None => AdamW::new(
                &model.params,
                config.lr,
                config.weight_decay,
                Some(config.grad_clip),
            ),
        };
        Ok(Trainer {
            model,
            opt,
            config,
            step: ckpt.step,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save(
            path,
            &self.model,
            Some(&self.opt),
            self.config.data_seed,
            self.config.master_seed,
            self.step,
            Some(serde_json::to_value(&self.config)?),
        )
    }

    fn draw_batch(&self, task: TaskId, seed: u64) -> Vec<(SampleData, Label)> {
        let def = self.model.task(task);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..self.config.batch_size)
            .map(|_| {
                let idx = rng.gen_range(0..def.data.train_size);
                gen_sample(&def.data, Split::Train, idx).expect("index in range")
            })
            .collect()
    }

    /// One training step: sample two tasks and an SNR, run both forward
    /// passes on one tape, assemble the combined loss, and update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        self.step += 1;
        let i = self.step;
        let seed = self.config.master_seed;

        let (task_a, task_b) = sample_task_pair(&self.model.registry, mix(seed, i, 1))?;
        let snr_db = crate::channel::sample_training_snr(
            self.config.snr_low_db,
            self.config.snr_high_db,
            mix(seed, i, 2),
        )?;
        let sigma2 = crate::channel::snr_to_sigma2(snr_db, 1.0)?;
        let phase = Phase::for_step(i);
        let tau = self.model.config.selection.tau_at(i);

        let batch_a = self.draw_batch(task_a, mix(seed, i, 3));
        let batch_b = self.draw_batch(task_b, mix(seed, i, 4));

        let mut sess = crate::nn::Session::new(&self.model.params);
        let opts_a = RunOptions {
            sigma2,
            quantize: true,
            select: true,
            noise_seed: mix(seed, i, 5),
            mode: RunMode::Train {
                tau,
                gumbel_seed: mix(seed, i, 6),
            },
        };
        let opts_b = RunOptions {
            noise_seed: mix(seed, i, 7),
            mode: RunMode::Train {
                tau,
                gumbel_seed: mix(seed, i, 8),
            },
            ..opts_a
        };
        let out_a = self
            .model
            .task_train_forward(&mut sess, task_a, &batch_a, phase, &opts_a)?;
        let out_b = self
            .model
            .task_train_forward(&mut sess, task_b, &batch_b, phase, &opts_b)?;

        let lam_r = crate::scalar::s::<T>(self.config.lambda_ratio);
        let lam_a = crate::scalar::s::<T>(self.config.lambda_da);
        let mut total = sess.tape.add(out_a.loss_p, out_b.loss_p);
        total = sess.tape.add(total, out_a.loss_c);
        total = sess.tape.add(total, out_b.loss_c);
        let loss_r = sess.tape.add(out_a.loss_r, out_b.loss_r);
        total = sess.tape.add_scaled(total, loss_r, lam_r);

        // domain adaptation on every modality the two tasks share
        let mut loss_a_val = 0.0;
        for (ma, za) in &out_a.z_en {
            for (mb, zb) in &out_b.z_en {
                if ma == mb {
                    let da = sess.tape.domain_adaptation(*za, *zb);
                    loss_a_val += sess.tape.scalar(da).to_f64_lossy();
                    total = sess.tape.add_scaled(total, da, lam_a);
                }
            }
        }

        let report = StepReport {
            step: i,
            task_a,
            task_b,
            snr_db,
            loss_p: (sess.tape.scalar(out_a.loss_p) + sess.tape.scalar(out_b.loss_p))
                .to_f64_lossy(),
            loss_c: (sess.tape.scalar(out_a.loss_c) + sess.tape.scalar(out_b.loss_c))
                .to_f64_lossy(),
            loss_r: sess.tape.scalar(loss_r).to_f64_lossy(),
            loss_a: loss_a_val,
            total: sess.tape.scalar(total).to_f64_lossy(),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: i,
                task_a: task_a.name().into(),
                task_b: task_b.name().into(),
                sigma2,
                components: format!(
                    "loss_p {}, loss_c {}, loss_r {}, loss_a {}",
                    report.loss_p, report.loss_c, report.loss_r, report.loss_a
                ),
            });
        }

        let grads = sess.grads(total);
        self.opt.step(&mut self.model.params, &grads);
        Ok(report)
    }

    /// Run to `until` steps, appending loss rows and checkpointing
    /// periodically. Returns the reports that were logged.
    pub fn run(&mut self, out_dir: &Path, until: u64) -> Result<Vec<StepReport>> {
        std::fs::create_dir_all(out_dir)?;
        let loss_path = out_dir.join("loss.csv");
        let fresh = !loss_path.exists() || self.step == 0;
        let mut loss_file = std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&loss_path)?;
        if fresh {
            writeln!(loss_file, "{}", StepReport::CSV_HEADER)?;
        }
        let mut logged = Vec::new();
        while self.step < until {
            let report = self.train_step()?;
            let is_log = report.step % self.config.log_every == 0
                || report.step == 1
                || report.step == until;
            if is_log {
                writeln!(loss_file, "{}", report.csv_row())?;
                logged.push(report.clone());
            }
            if report.step % self.config.checkpoint_every == 0 || report.step == until {
                self.save_checkpoint(&out_dir.join("model.udsc"))?;
            }
        }
        loss_file.flush()?;
        Ok(logged)
    }
}

/// Exponential moving average of a series, for loss-trend checks.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = f64::NAN;
    for &v in values {
        acc = if acc.is_nan() { v } else { alpha * v + (1.0 - alpha) * acc };
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::SelectionConfig;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            ff: 32,
            enc_layers: 1,
            ch_layers: 2,
            dec_layers: 2,
            codebook_sizes: (16, 16, 8),
            selection: SelectionConfig {
                reduced_dim: 8,
                module_layers: vec![1, 2],
                ..SelectionConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch_size: 2,
            checkpoint_every: 2,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn task_pair_sampling_is_weighted_and_distinct() {
        let registry = TaskRegistry::standard(1, 2);
        for seed in 0..200 {
            let (a, b) = sample_task_pair(&registry, seed).unwrap();
            assert_ne!(a, b);
        }
        // two registered tasks are always both drawn
        let two = TaskRegistry::subset(1, 2, &[TaskId::ImgCls, TaskId::TxtSent]);
        for seed in 0..50 {
            let (a, b) = sample_task_pair(&two, seed).unwrap();
            assert_ne!(a, b);
        }
        // 900/100 weighting: the large task leads ~90% of draws
        let mut reg = TaskRegistry::subset(1, 2, &[TaskId::ImgCls, TaskId::TxtSent]);
        reg.tasks[0].spec.dataset_size = 900;
        reg.tasks[1].spec.dataset_size = 100;
        let big = reg.tasks[0].id;
        let hits = (0..10_000)
            .filter(|&s| sample_task_pair(&reg, s).unwrap().0 == big)
            .count();
        let freq = hits as f64 / 1e4;
        assert!((freq - 0.9).abs() < 0.02, "first-position frequency {freq}");
        // fewer than two tasks is a usage error
        let one = TaskRegistry::subset(1, 2, &[TaskId::ImgCls]);
        assert!(sample_task_pair(&one, 0).is_err());
    }

    #[test]
    fn smoke_run_emits_rows_and_is_seed_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut t1 =
            Trainer::<f32>::new(tiny_model_config(), tiny_train_config(), &TaskId::ALL).unwrap();
        let rows = t1.run(dir.path(), 4).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.total.is_finite()));
        assert!(dir.path().join("loss.csv").exists());
        assert!(dir.path().join("model.udsc").exists());

        // identical seeds give identical first-step loss
        let mut t2 =
            Trainer::<f32>::new(tiny_model_config(), tiny_train_config(), &TaskId::ALL).unwrap();
        let r2 = t2.train_step().unwrap();
        assert!(
            (rows[0].total - r2.total).abs() <= 1e-6,
            "{} vs {}",
            rows[0].total,
            r2.total
        );
    }

    #[test]
    fn resume_continues_step_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let mut t =
            Trainer::<f32>::new(tiny_model_config(), tiny_train_config(), &TaskId::ALL).unwrap();
        t.run(dir.path(), 2).unwrap();
        assert_eq!(t.step, 2);
        t.save_checkpoint(&dir.path().join("model.udsc")).unwrap();

        let mut resumed = Trainer::<f32>::from_checkpoint(&dir.path().join("model.udsc")).unwrap();
        assert_eq!(resumed.step, 2);
        let rows = resumed.run(dir.path(), 4).unwrap();
        assert_eq!(rows.first().unwrap().step, 3);
        assert_eq!(resumed.step, 4);
    }

    #[test]
    fn ema_smooths_monotonically_for_constant_series() {
        let v = vec![2.0; 10];
        let e = ema(&v, 4);
        assert!(e.iter().all(|x| (x - 2.0).abs() < 1e-12));
    }
}
