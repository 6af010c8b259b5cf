//! Experiment harness: SNR sweeps, exit analyses, codebook-scheme sweeps,
//! overhead and parameter reports, with CSV and SVG emission.

use crate::error::{Error, Result};
use crate::features::Modality;
use crate::model::{metric_of, CodebookRouting, Model, ModelConfig, Prediction, RunOptions};
use crate::scalar::Scalar;
use crate::tasks::{gen_sample, Label, SampleData, Split, TaskId, TaskRegistry};
use crate::training::{TrainConfig, Trainer};
use std::path::Path;

/// Evaluation batch size; bounds tape memory during sweeps.
const EVAL_CHUNK: usize = 32;

/// Everything measured for one (task, SNR, threshold) cell.
#[derive(Debug, Clone)]
pub struct TaskEval {
    pub metric: f64,
    pub mean_exit: f64,
    pub exit_hist: Vec<usize>,
    pub mean_kept: f64,
    pub mean_index_bits: f64,
    pub mean_mask_bits: f64,
    /// Forced-exit metric per decoder layer.
    pub layer_metrics: Vec<f64>,
    /// Mean predicted certainty per decoder layer.
    pub layer_certainty: Vec<f64>,
    /// Per modality, per selection module: mean keep ratio.
    pub module_keep_ratios: Vec<(Modality, Vec<f64>)>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(a.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(b.wrapping_mul(0x94d049bb133111eb))
}

fn val_set<T: Scalar>(model: &Model<T>, task: TaskId) -> Result<(Vec<SampleData>, Vec<Label>)> {
    let def = model.task(task);
    let mut data = Vec::with_capacity(def.data.val_size);
    let mut labels = Vec::with_capacity(def.data.val_size);
    for i in 0..def.data.val_size {
        let (d, l) = gen_sample(&def.data, Split::Val, i)?;
        data.push(d);
        labels.push(l);
    }
    Ok((data, labels))
}

/// Evaluate one task at one channel state with confidence-gated exits.
pub fn evaluate_task<T: Scalar>(
    model: &Model<T>,
    task: TaskId,
    opts_base: &RunOptions,
    threshold: f64,
    seed: u64,
) -> Result<TaskEval> {
    let (data, labels) = val_set(model, task)?;
    let n_layers = model.config.dec_layers;
    let mut gated_preds: Vec<Prediction> = Vec::with_capacity(data.len());
    let mut exit_hist = vec![0usize; n_layers];
    let mut kept = 0.0;
    let mut index_bits = 0.0;
    let mut mask_bits = 0.0;
    let mut layer_preds: Vec<Vec<Prediction>> = vec![Vec::with_capacity(data.len()); n_layers];
    let mut cert_sums = vec![0.0; n_layers];
    let mut module_accam: Vec<(Modality, Vec<f64>)> = Vec::new();
    let mut chunks = 0usize;

    for (ci, chunk) in data.chunks(EVAL_CHUNK).enumerate() {
        let opts = RunOptions {
            noise_seed: mix(seed, task.index() as u64, ci as u64),
            ..*opts_base
        };
        let (gated, info) = model.eval_gated(task, chunk, threshold, &opts)?;
        for (pred, exit_layer, _) in gated {
            exit_hist[exit_layer - 1] += 1;
            gated_preds.push(pred);
        }
        for b in 0..chunk.len() {
            kept += info.kept[b] as f64;
            index_bits += info.index_bits[b] as f64;
            mask_bits += info.mask_bits[b] as f64;
        }
        let (per_layer, certs, _) = model.eval_all_layers(task, chunk, &opts)?;
        for (l, preds) in per_layer.into_iter().enumerate() {
            layer_preds[l].extend(preds);
            cert_sums[l] += certs[l].iter().sum::<f64>();
        }
        // running mean of per-module keep ratios
        let (_, _, info2) = (0, 0, info);
        for (mi, (m, ratios)) in info2.module_keep_ratios.iter().enumerate() {
            if module_accam.len() <= mi {
                module_accam.push((*m, vec![0.0; ratios.len()]));
            }
            for (q, r) in ratios.iter().enumerate() {
                module_accam[mi].1[q] += r;
            }
        }
        chunks += 1;
    }

    let n = data.len() as f64;
    let metric = metric_of(task, &gated_preds, &labels);
    let layer_metrics: Vec<f64> = layer_preds
        .iter()
        .map(|p| metric_of(task, p, &labels))
        .collect();
    let mean_exit = exit_hist
        .iter()
        .enumerate()
        .map(|(l, c)| (l + 1) as f64 * *c as f64)
        .sum::<f64>()
        / n;
    for (_, ratios) in &mut module_accam {
        for r in ratios.iter_mut() {
            *r /= chunks as f64;
        }
    }
    Ok(TaskEval {
        metric,
        mean_exit,
        exit_hist,
        mean_kept: kept / n,
        mean_index_bits: index_bits / n,
        mean_mask_bits: mask_bits / n,
        layer_metrics,
        layer_certainty: cert_sums.iter().map(|s| s / n).collect(),
        module_keep_ratios: module_accam,
    })
}

/// Last-layer metric with every feature delivered noiselessly; the
/// normalization reference. With `quantize` the codebook stays in the path
/// (the primary bound); without it the diagnostic bound.
pub fn upper_bound_metric<T: Scalar>(model: &Model<T>, task: TaskId, quantize: bool) -> Result<f64> {
    let (data, labels) = val_set(model, task)?;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let (per_layer, _, _) =
            model.eval_all_layers(task, chunk, &RunOptions::upper_bound(quantize))?;
        preds.extend(per_layer.into_iter().next_back().expect("decoder has layers"));
    }
    Ok(metric_of(task, &preds, &labels))
}

/// One row of the SNR sweep.
#[derive(Debug, Clone)]
pub struct SnrRow {
    pub task: TaskId,
    pub snr_db: f64,
    pub metric: f64,
    pub upper_bound: f64,
    pub upper_bound_noq: f64,
    pub normalized: f64,
    pub mean_exit: f64,
    pub mean_kept: f64,
    pub index_bits: f64,
    pub mask_bits: f64,
    pub total_bits: f64,
    pub layer_certainty: Vec<f64>,
}

pub const SNR_CSV_HEADER: &str = "task,snr_db,metric,upper_bound,upper_bound_noq,normalized,mean_exit,mean_kept,index_bits,mask_bits,total_bits";

/// Metric / exit / overhead per SNR for one task (the Fig. 6 style sweep).
pub fn snr_sweep<T: Scalar>(
    model: &Model<T>,
    task: TaskId,
    snr_list: &[f64],
    threshold: f64,
    seed: u64,
) -> Result<Vec<SnrRow>> {
    let ub = upper_bound_metric(model, task, true)?;
    let ub_noq = upper_bound_metric(model, task, false)?;
    let mut rows = Vec::with_capacity(snr_list.len());
    for &snr_db in snr_list {
        let sigma2 = crate::channel::snr_to_sigma2(snr_db, 1.0)?;
        let eval = evaluate_task(
            model,
            task,
            &RunOptions::eval(sigma2, mix(seed, 17, snr_db.to_bits())),
            threshold,
            seed,
        )?;
        rows.push(SnrRow {
            task,
            snr_db,
            metric: eval.metric,
            upper_bound: ub,
            upper_bound_noq: ub_noq,
            normalized: crate::tasks::normalized_performance(eval.metric, ub)?,
            mean_exit: eval.mean_exit,
            mean_kept: eval.mean_kept,
            index_bits: eval.mean_index_bits,
            mask_bits: eval.mean_mask_bits,
            total_bits: eval.mean_index_bits + eval.mean_mask_bits,
            layer_certainty: eval.layer_certainty,
        });
    }
    Ok(rows)
}

pub fn snr_rows_to_csv(rows: &[SnrRow]) -> String {
    let mut out = String::from(SNR_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.task.name(),
            r.snr_db,
            r.metric,
            r.upper_bound,
            r.upper_bound_noq,
            r.normalized,
            r.mean_exit,
            r.mean_kept,
            r.index_bits,
            r.mask_bits,
            r.total_bits
        ));
    }
    out
}

/// One row of the exit-threshold report.
#[derive(Debug, Clone)]
pub struct ExitRow {
    pub threshold: f64,
    pub mean_exit: f64,
    pub metric: f64,
    pub normalized: f64,
    pub exit_hist: Vec<usize>,
}

/// Exit behavior across thresholds, plus the forced-exit per-layer curve.
pub fn exit_report<T: Scalar>(
    model: &Model<T>,
    task: TaskId,
    snr_db: f64,
    thresholds: &[f64],
    seed: u64,
) -> Result<(Vec<ExitRow>, Vec<f64>)> {
    let sigma2 = crate::channel::snr_to_sigma2(snr_db, 1.0)?;
    let ub = upper_bound_metric(model, task, true)?;
    let mut rows = Vec::with_capacity(thresholds.len());
    let mut forced: Option<Vec<f64>> = None;
    for &threshold in thresholds {
        let eval = evaluate_task(
            model,
            task,
            &RunOptions::eval(sigma2, mix(seed, 23, snr_db.to_bits())),
            threshold,
            seed,
        )?;
        forced.get_or_insert_with(|| eval.layer_metrics.clone());
        rows.push(ExitRow {
            threshold,
            mean_exit: eval.mean_exit,
            metric: eval.metric,
            normalized: crate::tasks::normalized_performance(eval.metric, ub)?,
            exit_hist: eval.exit_hist,
        });
    }
    Ok((rows, forced.unwrap_or_default()))
}

pub fn exit_rows_to_csv(task: TaskId, snr_db: f64, rows: &[ExitRow]) -> String {
    let mut out = String::from("task,snr_db,threshold,mean_exit,metric,normalized,exit_hist\n");
    for r in rows {
        let hist = r
            .exit_hist
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("|");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            task.name(),
            snr_db,
            r.threshold,
            r.mean_exit,
            r.metric,
            r.normalized,
            hist
        ));
    }
    out
}

/// One row of the overhead report.
#[derive(Debug, Clone)]
pub struct OverheadRow {
    pub task: TaskId,
    pub snr_db: f64,
    pub mean_kept: f64,
    pub index_bits: f64,
    pub mask_bits: f64,
    pub total_bits: f64,
    pub module_keep_ratios: Vec<(Modality, Vec<f64>)>,
}

/// Kept features and transmitted bits per (task, SNR).
pub fn overhead_report<T: Scalar>(
    model: &Model<T>,
    tasks: &[TaskId],
    snr_list: &[f64],
    threshold: f64,
    seed: u64,
) -> Result<Vec<OverheadRow>> {
    let mut rows = Vec::new();
    for &task in tasks {
        for &snr_db in snr_list {
            let sigma2 = crate::channel::snr_to_sigma2(snr_db, 1.0)?;
            let eval = evaluate_task(
                model,
                task,
                &RunOptions::eval(sigma2, mix(seed, 29, snr_db.to_bits())),
                threshold,
                seed,
            )?;
            rows.push(OverheadRow {
                task,
                snr_db,
                mean_kept: eval.mean_kept,
                index_bits: eval.mean_index_bits,
                mask_bits: eval.mean_mask_bits,
                total_bits: eval.mean_index_bits + eval.mean_mask_bits,
                module_keep_ratios: eval.module_keep_ratios,
            });
        }
    }
    Ok(rows)
}

pub fn overhead_rows_to_csv(rows: &[OverheadRow]) -> String {
    let mut out =
        String::from("task,snr_db,mean_kept,index_bits,mask_bits,total_bits,module_keep_ratios\n");
    for r in rows {
        let ratios = r
            .module_keep_ratios
            .iter()
            .map(|(m, v)| {
                format!(
                    "{}:{}",
                    m.name(),
                    v.iter()
                        .map(|x| format!("{x:.4}"))
                        .collect::<Vec<_>>()
                        .join("|")
                )
            })
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task.name(),
            r.snr_db,
            r.mean_kept,
            r.index_bits,
            r.mask_bits,
            r.total_bits,
            ratios
        ));
    }
    out
}

/// Parameter accounting: unified model vs the sum of per-task models of the
/// same architecture.
#[derive(Debug, Clone)]
pub struct ParamsReport {
    pub unified: usize,
    pub per_task: Vec<(TaskId, usize)>,
    pub ratio: f64,
}

pub fn params_report(config: &ModelConfig, data_seed: u64) -> Result<ParamsReport> {
    let unified = Model::<f32>::new(
        config.clone(),
        TaskRegistry::standard(data_seed, config.dec_layers),
    )?
    .params
    .total_scalars();
    let mut per_task = Vec::new();
    let mut sum = 0usize;
    for task in TaskId::ALL {
        let solo = Model::<f32>::new(
            config.clone(),
            TaskRegistry::subset(data_seed, config.dec_layers, &[task]),
        )?
        .params
        .total_scalars();
        per_task.push((task, solo));
        sum += solo;
    }
    Ok(ParamsReport {
        unified,
        per_task,
        ratio: unified as f64 / sum as f64,
    })
}

pub fn params_report_to_csv(report: &ParamsReport) -> String {
    let mut out = String::from("model,parameters\n");
    for (task, n) in &report.per_task {
        out.push_str(&format!("per-task/{},{n}\n", task.name()));
    }
    let sum: usize = report.per_task.iter().map(|(_, n)| n).sum();
    out.push_str(&format!("per-task/total,{sum}\n"));
    out.push_str(&format!("unified,{}\n", report.unified));
    out.push_str(&format!("ratio,{}\n", report.ratio));
    out
}

/// Codebook ablation schemes (Fig. 8 legend semantics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookScheme {
    Joint,
    JointDa,
    PerModality,
    PerTask,
}

impl CodebookScheme {
    pub const ALL: [CodebookScheme; 4] = [
        CodebookScheme::Joint,
        CodebookScheme::JointDa,
        CodebookScheme::PerModality,
        CodebookScheme::PerTask,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CodebookScheme::Joint => "joint",
            CodebookScheme::JointDa => "joint+da",
            CodebookScheme::PerModality => "per-modality",
            CodebookScheme::PerTask => "per-task",
        }
    }

    fn routing(&self) -> CodebookRouting {
        match self {
            CodebookScheme::Joint | CodebookScheme::JointDa => CodebookRouting::Joint,
            CodebookScheme::PerModality => CodebookRouting::PerModality,
            CodebookScheme::PerTask => CodebookRouting::PerTask,
        }
    }

    fn wants_da(&self) -> bool {
        matches!(self, CodebookScheme::JointDa)
    }
}

/// One trained point of the codebook sweep.
#[derive(Debug, Clone)]
pub struct CodebookPoint {
    pub scheme: CodebookScheme,
    pub total_k: usize,
    pub seed: u64,
    pub mean_normalized: f64,
}

/// The tasks the sweep trains on: two image tasks plus one text task keeps
/// two modalities in play at a fraction of the full training cost.
pub const SWEEP_TASKS: [TaskId; 3] = [TaskId::ImgCls, TaskId::ImgRec, TaskId::TxtSent];

/// Sub-codebook sizes for a matched total K under each scheme, given that
/// only image and text are in play (speech keeps a 1-row stub).
fn sweep_sizes(scheme: CodebookScheme, total_k: usize) -> (usize, usize, usize) {
    match scheme {
        // routing ignores the partition; sizes only set the total
        CodebookScheme::Joint | CodebookScheme::JointDa | CodebookScheme::PerTask => {
            (total_k - 2, 1, 1)
        }
        CodebookScheme::PerModality => {
            let half = total_k / 2;
            (half, total_k - half - 1, 1)
        }
    }
}

/// Train one small model per (K, scheme, seed) and score its mean
/// normalized performance at the given eval SNR. Normalization uses each
/// model's own no-quantization bound so the codebook is the only thing the
/// ratio penalizes.
#[allow(clippy::too_many_arguments)]
pub fn codebook_sweep(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    k_list: &[usize],
    schemes: &[CodebookScheme],
    seeds: &[u64],
    eval_snr_db: f64,
    threshold: f64,
    progress: &mut dyn FnMut(&CodebookPoint),
) -> Result<Vec<CodebookPoint>> {
    let mut points = Vec::new();
    for &total_k in k_list {
        for &scheme in schemes {
            for &seed in seeds {
                let mut mc = base_model.clone();
                mc.codebook_sizes = sweep_sizes(scheme, total_k);
                mc.routing = scheme.routing();
                mc.init_seed = seed;
                let mut tc = base_train.clone();
                tc.master_seed = seed;
                tc.data_seed = seed;
                tc.lambda_da = if scheme.wants_da() { base_train.lambda_da } else { 0.0 };
                let mut trainer = Trainer::<f32>::new(mc, tc.clone(), &SWEEP_TASKS)?;
                for _ in 0..tc.steps {
                    trainer.train_step()?;
                }
                let sigma2 = crate::channel::snr_to_sigma2(eval_snr_db, 1.0)?;
                let mut total = 0.0;
                for task in SWEEP_TASKS {
                    let ub = upper_bound_metric(&trainer.model, task, false)?;
                    let eval = evaluate_task(
                        &trainer.model,
                        task,
                        &RunOptions::eval(sigma2, mix(seed, 31, task.index() as u64)),
                        threshold,
                        seed,
                    )?;
                    total += crate::tasks::normalized_performance(eval.metric, ub)?;
                }
                let point = CodebookPoint {
                    scheme,
                    total_k,
                    seed,
                    mean_normalized: total / SWEEP_TASKS.len() as f64,
                };
                progress(&point);
                points.push(point);
            }
        }
    }
    Ok(points)
}

pub fn codebook_points_to_csv(points: &[CodebookPoint]) -> String {
    let mut out = String::from("scheme,total_k,seed,mean_normalized\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.scheme.name(),
            p.total_k,
            p.seed,
            p.mean_normalized
        ));
    }
    out
}

/// Mean normalized performance per (scheme, K) across seeds.
pub fn codebook_scheme_means(points: &[CodebookPoint]) -> Vec<(CodebookScheme, usize, f64)> {
    let mut out = Vec::new();
    for scheme in CodebookScheme::ALL {
        let ks: std::collections::BTreeSet<usize> = points
            .iter()
            .filter(|p| p.scheme == scheme)
            .map(|p| p.total_k)
            .collect();
        for k in ks {
            let vals: Vec<f64> = points
                .iter()
                .filter(|p| p.scheme == scheme && p.total_k == k)
                .map(|p| p.mean_normalized)
                .collect();
            if !vals.is_empty() {
                out.push((scheme, k, vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
    }
    out
}

// ── file emission ───────────────────────────────────────────────────────

/// Write a file atomically (tmp + rename), creating parent directories.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Minimal SVG line chart: one polyline per series plus axes and a legend.
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<String> {
    if series.is_empty() || series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::Usage("cannot plot an empty table".into()));
    }
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 64.0;
    const MR: f64 = 24.0;
    const MT: f64 = 40.0;
    const MB: f64 = 52.0;
    let pts_iter = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts_iter {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x0 == x1 {
        x1 = x0 + 1.0;
    }
    if y0 == y1 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    // ticks
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n",
            sx(fx),
            H - MB + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n",
            ML - 6.0,
            sy(fy) + 4.0,
            fy
        ));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            sy(fy),
            W - MR,
            sy(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        y_label
    ));
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for (x, y) in pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(*x),
                sy(*y)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - MR - 150.0,
            MT + 16.0 * si as f64 + 4.0,
            name
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Emit the SNR sweep as CSV plus its figure analog.
pub fn emit_snr_sweep(out_dir: &Path, rows: &[SnrRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Usage("empty sweep table".into()));
    }
    let task = rows[0].task;
    write_atomic(
        &out_dir.join(format!("fig_snr_{}.csv", task.name())),
        &snr_rows_to_csv(rows),
    )?;
    let metric: Vec<(f64, f64)> = rows.iter().map(|r| (r.snr_db, r.metric)).collect();
    let normalized: Vec<(f64, f64)> = rows.iter().map(|r| (r.snr_db, r.normalized)).collect();
    let svg = line_chart_svg(
        &format!("{} vs SNR", task.name()),
        "SNR (dB)",
        "metric",
        &[
            ("metric".to_string(), metric),
            ("normalized".to_string(), normalized),
        ],
    )?;
    write_atomic(&out_dir.join(format!("fig_snr_{}.svg", task.name())), &svg)
}

/// FNV-1a hash of a resolved configuration, naming the run directory.
pub fn config_hash(content: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in content.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::SelectionConfig;

    fn tiny_model() -> Model<f32> {
        let config = ModelConfig {
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
        };
        let mut registry = TaskRegistry::standard(5, 2);
        for t in &mut registry.tasks {
            t.data.val_size = 16;
        }
        Model::new(config, registry).unwrap()
    }

    #[test]
    fn snr_sweep_rows_and_determinism() {
        let model = tiny_model();
        let rows = snr_sweep(&model, TaskId::ImgCls, &[-6.0, 0.0, 6.0, 12.0, 18.0], 0.8, 3).unwrap();
        assert_eq!(rows.len(), 5);
        let rows2 =
            snr_sweep(&model, TaskId::ImgCls, &[-6.0, 0.0, 6.0, 12.0, 18.0], 0.8, 3).unwrap();
        assert_eq!(snr_rows_to_csv(&rows), snr_rows_to_csv(&rows2));
        for r in &rows {
            assert!(r.metric.is_finite());
            assert!(r.mean_kept >= 1.0);
        }
    }

    #[test]
    fn exit_report_threshold_extremes() {
        let model = tiny_model();
        let (rows, forced) =
            exit_report(&model, TaskId::TxtSent, 12.0, &[1e-9, 1.0 - 1e-12], 4).unwrap();
        // near-zero threshold always exits at layer 1
        assert!((rows[0].mean_exit - 1.0).abs() < 1e-9);
        // near-one threshold never exits early
        assert!((rows[1].mean_exit - model.config.dec_layers as f64).abs() < 1e-9);
        assert_eq!(forced.len(), model.config.dec_layers);
    }

    #[test]
    fn params_report_orders_unified_below_half() {
        let report = params_report(&ModelConfig::default(), 1).unwrap();
        let sum: usize = report.per_task.iter().map(|(_, n)| n).sum();
        assert!(report.unified < sum);
        assert!(report.ratio < 0.5, "ratio {}", report.ratio);
        let csv = params_report_to_csv(&report);
        assert!(csv.contains("unified"));
    }

    #[test]
    fn svg_plot_emits_and_rejects_empty() {
        let svg = line_chart_svg(
            "t",
            "x",
            "y",
            &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)])],
        )
        .unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(line_chart_svg("t", "x", "y", &[]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.svg");
        write_atomic(&p, &svg).unwrap();
        write_atomic(&p, &svg).unwrap();
        assert!(p.exists());
    }

    #[test]
    fn config_hash_is_stable() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
    }
}
