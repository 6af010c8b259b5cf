//! Command-line entry point: train / eval / sweep / report workflows with
//! layered configuration (JSON file with flat dotted keys, overridden by
//! flags).

use crate::error::{Error, Result};
use crate::evaluation::{
    self, codebook_points_to_csv, config_hash, exit_rows_to_csv, overhead_rows_to_csv,
    params_report_to_csv, snr_rows_to_csv, write_atomic, CodebookScheme,
};
use crate::model::{Model, ModelConfig};
use crate::tasks::TaskId;
use crate::training::{TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "udeepsc",
    version,
    about = "Unified multi-task semantic communication: train and evaluate the desk-scale system"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file with flat dotted keys (train.*, model.*,
    /// selection.*, exit.*); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for parameters, sampling, and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to $UDSC_OUT_DIR or ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unified model over the six toy tasks.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Resume from an existing checkpoint archive.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate one task at one SNR with confidence-gated exits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 12.0, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Metric / exit / overhead across an SNR list for one task.
    SweepSnr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "-6,0,6,12,18", allow_hyphen_values = true)]
        snrs: String,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Train small models per codebook size and scheme, compare them.
    SweepCodebook {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "64,128")]
        ks: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1500)]
        steps: u64,
        #[arg(long, default_value_t = 12.0, allow_hyphen_values = true)]
        eval_snr: f64,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Kept features and transmitted bits per task and SNR.
    ReportOverhead {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "0,6,12", allow_hyphen_values = true)]
        snrs: String,
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Parameter counts: unified model vs six per-task models.
    ReportParams {
        #[command(flatten)]
        common: Common,
    },
    /// Exit behavior across certainty thresholds for one task.
    ReportExit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 12.0, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long, default_value = "0.5,0.65,0.8,0.9,0.95")]
        deltas: String,
    },
}

/// Configuration resolved from file plus flags.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub exit_threshold: f64,
}

impl Default for Resolved {
    fn default() -> Self {
        Resolved {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            exit_threshold: 0.8,
        }
    }
}

fn set_usize(v: &serde_json::Value, key: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer")))
}

fn set_u64(v: &serde_json::Value, key: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer")))
}

fn set_f64(v: &serde_json::Value, key: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{key} must be a number")))
}

/// Apply a flat dotted-key JSON object onto the resolved config.
pub fn apply_config_file(resolved: &mut Resolved, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("config root must be a JSON object".into()))?;
    for (key, v) in obj {
        match key.as_str() {
            "train.steps" => resolved.train.steps = set_u64(v, key)?,
            "train.batch_size" => resolved.train.batch_size = set_usize(v, key)?,
            "train.lr" => resolved.train.lr = set_f64(v, key)?,
            "train.weight_decay" => resolved.train.weight_decay = set_f64(v, key)?,
            "train.snr_low_db" => resolved.train.snr_low_db = set_f64(v, key)?,
            "train.snr_high_db" => resolved.train.snr_high_db = set_f64(v, key)?,
            "train.lambda_ratio" => resolved.train.lambda_ratio = set_f64(v, key)?,
            "train.lambda_da" => resolved.train.lambda_da = set_f64(v, key)?,
            "train.grad_clip" => resolved.train.grad_clip = set_f64(v, key)?,
            "train.master_seed" => resolved.train.master_seed = set_u64(v, key)?,
            "train.data_seed" => resolved.train.data_seed = set_u64(v, key)?,
            "train.checkpoint_every" => resolved.train.checkpoint_every = set_u64(v, key)?,
            "train.log_every" => resolved.train.log_every = set_u64(v, key)?,
            "model.dim" => resolved.model.dim = set_usize(v, key)?,
            "model.heads" => resolved.model.heads = set_usize(v, key)?,
            "model.ff" => resolved.model.ff = set_usize(v, key)?,
            "model.enc_layers" => resolved.model.enc_layers = set_usize(v, key)?,
            "model.ch_layers" => resolved.model.ch_layers = set_usize(v, key)?,
            "model.dec_layers" => resolved.model.dec_layers = set_usize(v, key)?,
            "model.cls_queries" => resolved.model.cls_queries = set_usize(v, key)?,
            "model.lcm_hidden" => resolved.model.lcm_hidden = set_usize(v, key)?,
            "model.beta" => resolved.model.beta = set_f64(v, key)?,
            "model.codebook_image" => resolved.model.codebook_sizes.0 = set_usize(v, key)?,
            "model.codebook_text" => resolved.model.codebook_sizes.1 = set_usize(v, key)?,
            "model.codebook_speech" => resolved.model.codebook_sizes.2 = set_usize(v, key)?,
            "model.init_seed" => resolved.model.init_seed = set_u64(v, key)?,
            "selection.reduced_dim" => resolved.model.selection.reduced_dim = set_usize(v, key)?,
            "selection.tau_start" => resolved.model.selection.tau_start = set_f64(v, key)?,
            "selection.tau_end" => resolved.model.selection.tau_end = set_f64(v, key)?,
            "selection.tau_decay_steps" => {
                resolved.model.selection.tau_decay_steps = set_u64(v, key)?
            }
            "selection.lambda_rho" => resolved.model.selection.lambda_rho = set_f64(v, key)?,
            "exit.threshold" => resolved.exit_threshold = set_f64(v, key)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
    }
    Ok(())
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("'{s}' is not a number")))
        })
        .collect()
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("'{s}' is not an integer")))
        })
        .collect()
}

fn parse_tasks(text: &str) -> Result<Vec<TaskId>> {
    if text == "all" {
        return Ok(TaskId::ALL.to_vec());
    }
    text.split(',').map(|s| TaskId::parse(s.trim())).collect()
}

fn out_root(common: &Common) -> PathBuf {
    common
        .out_dir
        .clone()
        .or_else(|| std::env::var("UDSC_OUT_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve(common: &Common) -> Result<Resolved> {
    let mut resolved = Resolved::default();
    if let Some(path) = &common.config {
        apply_config_file(&mut resolved, path)?;
    }
    if let Some(seed) = common.seed {
        resolved.train.master_seed = seed;
        resolved.train.data_seed = seed;
        resolved.model.init_seed = seed;
    }
    Ok(resolved)
}

/// Run directory named by the hash of the resolved configuration, plus the
/// manifest that reproduces the run.
fn run_dir(common: &Common, label: &str, resolved: &Resolved, extra: &str) -> Result<PathBuf> {
    let key = format!("{}|{}", serde_json::to_string(resolved)?, extra);
    let dir = out_root(common).join(format!("{label}-{}", config_hash(&key)));
    std::fs::create_dir_all(&dir)?;
    let manifest = serde_json::json!({
        "command": label,
        "version": env!("CARGO_PKG_VERSION"),
        "config": resolved,
        "extra": extra,
    });
    write_atomic(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(dir)
}

fn load_model(ckpt: &Path) -> Result<Model<crate::Real>> {
    let archive = crate::checkpoint::load(ckpt)?;
    let (model, _) = crate::checkpoint::restore_model::<crate::Real>(&archive)?;
    Ok(model)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            steps,
            batch,
            lr,
            resume,
        } => {
            let mut resolved = resolve(&common)?;
            if let Some(s) = steps {
                resolved.train.steps = s;
            }
            if let Some(b) = batch {
                resolved.train.batch_size = b;
            }
            if let Some(l) = lr {
                resolved.train.lr = l;
            }
            let dir = run_dir(&common, "train", &resolved, "")?;
            let mut trainer = match &resume {
                Some(path) => Trainer::<crate::Real>::from_checkpoint(path)?,
                None => Trainer::<crate::Real>::new(
                    resolved.model.clone(),
                    resolved.train.clone(),
                    &TaskId::ALL,
                )?,
            };
            let until = resolved.train.steps;
            println!("training to step {until} in {}", dir.display());
            let rows = trainer.run(&dir, until)?;
            if let Some(last) = rows.last() {
                println!("final: {}", last.csv_row());
            }
            println!("checkpoint: {}", dir.join("model.udsc").display());
            Ok(())
        }
        Command::Eval {
            common,
            ckpt,
            task,
            snr,
            delta,
        } => {
            let resolved = resolve(&common)?;
            let threshold = delta.unwrap_or(resolved.exit_threshold);
            let task = TaskId::parse(&task)?;
            let model = load_model(&ckpt)?;
            let dir = run_dir(
                &common,
                "eval",
                &resolved,
                &format!("{ckpt:?}|{task:?}|{snr}|{threshold}"),
            )?;
            let sigma2 = crate::channel::snr_to_sigma2(snr, 1.0)?;
            let eval = evaluation::evaluate_task(
                &model,
                task,
                &crate::model::RunOptions::eval(sigma2, resolved.train.master_seed),
                threshold,
                resolved.train.master_seed,
            )?;
            let csv = format!(
                "task,snr_db,delta,metric,mean_exit,mean_kept,total_bits\n{},{},{},{},{},{},{}\n",
                task.name(),
                snr,
                threshold,
                eval.metric,
                eval.mean_exit,
                eval.mean_kept,
                eval.mean_index_bits + eval.mean_mask_bits
            );
            write_atomic(&dir.join(format!("eval_{}.csv", task.name())), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::SweepSnr {
            common,
            ckpt,
            task,
            snrs,
            delta,
        } => {
            let resolved = resolve(&common)?;
            let threshold = delta.unwrap_or(resolved.exit_threshold);
            let task = TaskId::parse(&task)?;
            let snr_list = parse_f64_list(&snrs)?;
            let model = load_model(&ckpt)?;
            let dir = run_dir(
                &common,
                "sweep-snr",
                &resolved,
                &format!("{ckpt:?}|{task:?}|{snrs}|{threshold}"),
            )?;
            let rows = evaluation::snr_sweep(
                &model,
                task,
                &snr_list,
                threshold,
                resolved.train.master_seed,
            )?;
            evaluation::emit_snr_sweep(&dir, &rows)?;
            print!("{}", snr_rows_to_csv(&rows));
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::SweepCodebook {
            common,
            ks,
            seeds,
            steps,
            eval_snr,
            delta,
        } => {
            let resolved = resolve(&common)?;
            let threshold = delta.unwrap_or(resolved.exit_threshold);
            let k_list = parse_usize_list(&ks)?;
            let dir = run_dir(
                &common,
                "sweep-codebook",
                &resolved,
                &format!("{ks}|{seeds}|{steps}|{eval_snr}"),
            )?;
            let mut train = resolved.train.clone();
            train.steps = steps;
            let seed_list: Vec<u64> =
                (0..seeds).map(|i| resolved.train.master_seed + i).collect();
            let points = evaluation::codebook_sweep(
                &resolved.model,
                &train,
                &k_list,
                &CodebookScheme::ALL,
                &seed_list,
                eval_snr,
                threshold,
                &mut |p| {
                    println!(
                        "done: {} K={} seed={} normalized={:.4}",
                        p.scheme.name(),
                        p.total_k,
                        p.seed,
                        p.mean_normalized
                    )
                },
            )?;
            write_atomic(
                &dir.join("fig_codebook.csv"),
                &codebook_points_to_csv(&points),
            )?;
            let means = evaluation::codebook_scheme_means(&points);
            let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for scheme in CodebookScheme::ALL {
                let pts: Vec<(f64, f64)> = means
                    .iter()
                    .filter(|(s, _, _)| *s == scheme)
                    .map(|(_, k, v)| (*k as f64, *v))
                    .collect();
                if !pts.is_empty() {
                    series.push((scheme.name().to_string(), pts));
                }
            }
            let svg = evaluation::line_chart_svg(
                "normalized performance vs codebook size",
                "total K",
                "mean normalized",
                &series,
            )?;
            write_atomic(&dir.join("fig_codebook.svg"), &svg)?;
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::ReportOverhead {
            common,
            ckpt,
            snrs,
            tasks,
            delta,
        } => {
            let resolved = resolve(&common)?;
            let threshold = delta.unwrap_or(resolved.exit_threshold);
            let snr_list = parse_f64_list(&snrs)?;
            let task_list = parse_tasks(&tasks)?;
            let model = load_model(&ckpt)?;
            let dir = run_dir(
                &common,
                "report-overhead",
                &resolved,
                &format!("{ckpt:?}|{snrs}|{tasks}"),
            )?;
            let rows = evaluation::overhead_report(
                &model,
                &task_list,
                &snr_list,
                threshold,
                resolved.train.master_seed,
            )?;
            let csv = overhead_rows_to_csv(&rows);
            write_atomic(&dir.join("fig_overhead.csv"), &csv)?;
            let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for task in &task_list {
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.task == *task)
                    .map(|r| (r.snr_db, r.mean_kept))
                    .collect();
                if !pts.is_empty() {
                    series.push((task.name().to_string(), pts));
                }
            }
            let svg = evaluation::line_chart_svg(
                "kept features vs SNR",
                "SNR (dB)",
                "mean kept features",
                &series,
            )?;
            write_atomic(&dir.join("fig_overhead.svg"), &svg)?;
            print!("{csv}");
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::ReportParams { common } => {
            let resolved = resolve(&common)?;
            let dir = run_dir(&common, "report-params", &resolved, "")?;
            let report = evaluation::params_report(&resolved.model, resolved.train.data_seed)?;
            let csv = params_report_to_csv(&report);
            write_atomic(&dir.join("params.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::ReportExit {
            common,
            ckpt,
            task,
            snr,
            deltas,
        } => {
            let resolved = resolve(&common)?;
            let task = TaskId::parse(&task)?;
            let delta_list = parse_f64_list(&deltas)?;
            let model = load_model(&ckpt)?;
            let dir = run_dir(
                &common,
                "report-exit",
                &resolved,
                &format!("{ckpt:?}|{task:?}|{snr}|{deltas}"),
            )?;
            let (rows, forced) = evaluation::exit_report(
                &model,
                task,
                snr,
                &delta_list,
                resolved.train.master_seed,
            )?;
            let csv = exit_rows_to_csv(task, snr, &rows);
            write_atomic(&dir.join(format!("fig_exit_{}.csv", task.name())), &csv)?;
            let mut forced_csv = String::from("layer,metric\n");
            for (i, m) in forced.iter().enumerate() {
                forced_csv.push_str(&format!("{},{}\n", i + 1, m));
            }
            write_atomic(
                &dir.join(format!("fig_exit_layers_{}.csv", task.name())),
                &forced_csv,
            )?;
            let series = vec![(
                "normalized".to_string(),
                rows.iter().map(|r| (r.mean_exit, r.normalized)).collect(),
            )];
            let svg = evaluation::line_chart_svg(
                &format!("{}: performance vs mean exit layer", task.name()),
                "mean exit layer",
                "normalized performance",
                &series,
            )?;
            write_atomic(&dir.join(format!("fig_exit_{}.svg", task.name())), &svg)?;
            print!("{csv}");
            Ok(())
        }
    }
}

/// CLI entry; returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap treats --help/--version as errors that print to stdout
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::Usage(_))) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_exits_one() {
        assert_eq!(run(vec!["udeepsc".into(), "frobnicate".into()]), 1);
    }

    #[test]
    fn config_file_applies_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"train.steps": 123, "model.dim": 16, "exit.threshold": 0.7}"#,
        )
        .unwrap();
        let mut resolved = Resolved::default();
        apply_config_file(&mut resolved, &path).unwrap();
        assert_eq!(resolved.train.steps, 123);
        assert_eq!(resolved.model.dim, 16);
        assert_eq!(resolved.exit_threshold, 0.7);

        std::fs::write(&path, r#"{"train.nope": 1}"#).unwrap();
        let err = apply_config_file(&mut Resolved::default(), &path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn list_parsers() {
        assert_eq!(parse_f64_list("-6, 0,6").unwrap(), vec![-6.0, 0.0, 6.0]);
        assert!(parse_f64_list("x").is_err());
        assert_eq!(parse_usize_list("64,128").unwrap(), vec![64, 128]);
        assert_eq!(parse_tasks("all").unwrap().len(), 6);
        assert_eq!(
            parse_tasks("img-cls,wav-cls").unwrap(),
            vec![TaskId::ImgCls, TaskId::WavCls]
        );
        assert!(parse_tasks("bogus").is_err());
    }
}
