//! Task registry, deterministic synthetic datasets for the six desk-scale
//! tasks, and the task metrics: accuracy, PSNR, and BLEU.

use crate::error::{Error, Result};
use crate::features::{Modality, TaskKind, TaskSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// The six built-in tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    ImgCls,
    ImgRec,
    TxtSent,
    TxtRec,
    MmMatch,
    WavCls,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::ImgCls,
        TaskId::ImgRec,
        TaskId::TxtSent,
        TaskId::TxtRec,
        TaskId::MmMatch,
        TaskId::WavCls,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskId::ImgCls => "img-cls",
            TaskId::ImgRec => "img-rec",
            TaskId::TxtSent => "txt-sent",
            TaskId::TxtRec => "txt-rec",
            TaskId::MmMatch => "mm-match",
            TaskId::WavCls => "wav-cls",
        }
    }

    pub fn parse(name: &str) -> Result<TaskId> {
        TaskId::ALL
            .iter()
            .find(|t| t.name() == name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown task '{name}'")))
    }

    pub fn index(&self) -> usize {
        TaskId::ALL.iter().position(|t| t == self).unwrap()
    }
}

/// Deterministic generator settings for one task's synthetic dataset.
/// Generation is a pure function of (spec, split, index).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub task: TaskId,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub image_size: usize,
    pub patch: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub min_text_len: usize,
    pub wave_len: usize,
    pub frame: usize,
}

impl ToyDatasetSpec {
    pub fn new(task: TaskId, seed: u64, train_size: usize, val_size: usize) -> Self {
        ToyDatasetSpec {
            task,
            seed,
            train_size,
            val_size,
            image_size: 16,
            patch: 4,
            vocab: 64,
            max_text_len: 12,
            min_text_len: 5,
            wave_len: 256,
            frame: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Raw sample payloads, still in f64; the model embeds them at its own
/// precision.
#[derive(Debug, Clone)]
pub enum SampleData {
    Image(Array2<f64>),
    Text(Vec<usize>),
    Wave(Vec<f64>),
    ImageText(Array2<f64>, Vec<usize>),
}

#[derive(Debug, Clone)]
pub enum Label {
    Class(usize),
    Image(Array2<f64>),
    Tokens(Vec<usize>),
}

impl Label {
    pub fn class(&self) -> usize {
        match self {
            Label::Class(c) => *c,
            _ => panic!("label is not a class"),
        }
    }
}

// Token id layout of the 64-word toy vocabulary.
pub const CLASS_TOKENS: std::ops::Range<usize> = 0..10;
pub const FILLER_TOKENS: std::ops::Range<usize> = 10..32;
pub const POSITIVE_TOKENS: std::ops::Range<usize> = 32..46;
pub const NEGATIVE_TOKENS: std::ops::Range<usize> = 46..60;
pub const MARKER_TOKENS: std::ops::Range<usize> = 60..64;

pub const NUM_IMAGE_CLASSES: usize = 10;
pub const NUM_WAVE_CLASSES: usize = 4;

fn sample_rng(spec: &ToyDatasetSpec, split: Split, index: usize) -> ChaCha20Rng {
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Val => 1u64,
    };
    let mix = spec
        .seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((spec.task.index() as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(split_tag.wrapping_mul(0x94d049bb133111eb))
        .wrapping_add(index as u64);
    ChaCha20Rng::seed_from_u64(mix)
}

/// Deterministic sample generation; errors above the split size.
pub fn gen_sample(
    spec: &ToyDatasetSpec,
    split: Split,
    index: usize,
) -> Result<(SampleData, Label)> {
    let size = match split {
        Split::Train => spec.train_size,
        Split::Val => spec.val_size,
    };
    if index >= size {
        return Err(Error::OutOfRange(format!(
            "sample {index} beyond split size {size}"
        )));
    }
    let mut rng = sample_rng(spec, split, index);
    Ok(match spec.task {
        TaskId::ImgCls => {
            let class = rng.gen_range(0..NUM_IMAGE_CLASSES);
            let img = gen_image(spec.image_size, class, &mut rng);
            (SampleData::Image(img), Label::Class(class))
        }
        TaskId::ImgRec => {
            let class = rng.gen_range(0..NUM_IMAGE_CLASSES);
            let img = gen_image(spec.image_size, class, &mut rng);
            (SampleData::Image(img.clone()), Label::Image(img))
        }
        TaskId::TxtSent => {
            let (tokens, label) = gen_sentiment_sentence(spec, &mut rng);
            (SampleData::Text(tokens), Label::Class(label))
        }
        TaskId::TxtRec => {
            let len = rng.gen_range(spec.min_text_len..=spec.max_text_len);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab)).collect();
            (SampleData::Text(tokens.clone()), Label::Tokens(tokens))
        }
        TaskId::MmMatch => {
            let class = rng.gen_range(0..NUM_IMAGE_CLASSES);
            let img = gen_image(spec.image_size, class, &mut rng);
            // balanced yes/no questions about the depicted class
            let matches = rng.gen_bool(0.5);
            let asked = if matches {
                class
            } else {
                let mut other = rng.gen_range(0..NUM_IMAGE_CLASSES - 1);
                if other >= class {
                    other += 1;
                }
                other
            };
            let question = vec![
                MARKER_TOKENS.start,
                CLASS_TOKENS.start + asked,
                rng.gen_range(FILLER_TOKENS.start..FILLER_TOKENS.end),
                rng.gen_range(FILLER_TOKENS.start..FILLER_TOKENS.end),
                MARKER_TOKENS.start + 1,
            ];
            (
                SampleData::ImageText(img, question),
                Label::Class(usize::from(matches)),
            )
        }
        TaskId::WavCls => {
            let class = rng.gen_range(0..NUM_WAVE_CLASSES);
            let wave = gen_wave(spec.wave_len, class, &mut rng);
            (SampleData::Wave(wave), Label::Class(class))
        }
    })
}

/// 16x16 grayscale pattern in [0,1]: ten procedural classes with jitter,
/// intensity variation, and additive noise.
fn gen_image(size: usize, class: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let n = size as i64;
    let amp: f64 = rng.gen_range(0.6..1.0);
    let bg: f64 = rng.gen_range(0.0..0.08);
    let dx: i64 = rng.gen_range(-1..=1);
    let dy: i64 = rng.gen_range(-1..=1);
    let cx = n / 2 + dx;
    let cy = n / 2 + dy;
    let mut img = Array2::from_elem((size, size), bg);
    for y in 0..n {
        for x in 0..n {
            let fx = x as f64;
            let fy = y as f64;
            let d2 = (fx - cx as f64).powi(2) + (fy - cy as f64).powi(2);
            let on = match class {
                0 => d2 <= 4.5 * 4.5,
                1 => {
                    let bx = (x - dx).clamp(0, n - 1);
                    let by = (y - dy).clamp(0, n - 1);
                    let border = bx.min(n - 1 - bx).min(by).min(n - 1 - by);
                    (3..5).contains(&border)
                }
                2 => (x - cx).abs() <= 1 || (y - cy).abs() <= 1,
                3 => (y + dy).rem_euclid(4) < 2,
                4 => (x + dx).rem_euclid(4) < 2,
                5 => (x - y + dx).abs() <= 2,
                6 => ((x + dx).div_euclid(4) + (y + dy).div_euclid(4)).rem_euclid(2) == 0,
                7 => (3.0..=5.5).contains(&d2.sqrt()),
                8 => (x - y + dx).abs() <= 1 || (x + y - (n - 1) + dx).abs() <= 1,
                9 => {
                    let near_x = x < 5 || x >= n - 5;
                    let near_y = y < 5 || y >= n - 5;
                    near_x && near_y
                }
                _ => panic!("class {class} out of range"),
            };
            if on {
                img[[y as usize, x as usize]] = amp;
            }
        }
    }
    img.mapv_inplace(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
    img
}

/// Template sentence with one or two sentiment words of a single polarity;
/// the label is that polarity (1 = positive).
fn gen_sentiment_sentence(spec: &ToyDatasetSpec, rng: &mut ChaCha20Rng) -> (Vec<usize>, usize) {
    let len = rng.gen_range(spec.min_text_len..=spec.max_text_len);
    let positive = rng.gen_bool(0.5);
    let lexicon = if positive {
        POSITIVE_TOKENS
    } else {
        NEGATIVE_TOKENS
    };
    let n_sent = if len >= 8 && rng.gen_bool(0.3) { 2 } else { 1 };
    let mut tokens: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(FILLER_TOKENS.start..FILLER_TOKENS.end))
        .collect();
    let mut used = std::collections::HashSet::new();
    for _ in 0..n_sent {
        loop {
            let pos = rng.gen_range(0..len);
            if used.insert(pos) {
                tokens[pos] = rng.gen_range(lexicon.start..lexicon.end);
                break;
            }
        }
    }
    (tokens, usize::from(positive))
}

/// Sinusoid mixture waveform; each class has its own frequency pair.
fn gen_wave(len: usize, class: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    const FREQS: [(f64, f64); NUM_WAVE_CLASSES] =
        [(3.0, 7.0), (5.0, 11.0), (9.0, 13.0), (4.0, 15.0)];
    let (f1, f2) = FREQS[class];
    let a1: f64 = rng.gen_range(0.6..1.0);
    let a2: f64 = rng.gen_range(0.3..0.7);
    let p1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let p2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..len)
        .map(|i| {
            let t = i as f64 / len as f64;
            let v = a1 * (std::f64::consts::TAU * f1 * t + p1).sin()
                + a2 * (std::f64::consts::TAU * f2 * t + p2).sin()
                + rng.gen_range(-0.05..0.05);
            v * 0.5
        })
        .collect()
}

/// Registered task with its dataset generator.
#[derive(Debug, Clone)]
pub struct TaskDef {
    pub id: TaskId,
    pub spec: TaskSpec,
    pub data: ToyDatasetSpec,
}

/// All tasks the model serves.
#[derive(Debug, Clone)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskDef>,
}

impl TaskRegistry {
    /// The standard six-task registry; `n_exits` fixes the loss-weight
    /// vectors (all ones).
    pub fn standard(seed: u64, n_exits: usize) -> Self {
        Self::subset(seed, n_exits, &TaskId::ALL)
    }

    /// A registry restricted to the given tasks, for small ablation runs.
    pub fn subset(seed: u64, n_exits: usize, ids: &[TaskId]) -> Self {
        #[allow(clippy::too_many_arguments)]
        fn make(
            id: TaskId,
            seed: u64,
            n_exits: usize,
            modalities: Vec<Modality>,
            kind: TaskKind,
            num_classes: usize,
            output_shape: (usize, usize),
            train: usize,
            val: usize,
        ) -> TaskDef {
            TaskDef {
                id,
                spec: TaskSpec {
                    task_id: id.name().to_string(),
                    modalities,
                    kind,
                    num_classes,
                    output_shape,
                    loss_weights: vec![1.0; n_exits],
                    dataset_size: train,
                },
                data: ToyDatasetSpec::new(id, seed, train, val),
            }
        }
        let all = vec![
            make(
                TaskId::ImgCls,
                seed,
                n_exits,
                vec![Modality::Image],
                TaskKind::Classification,
                NUM_IMAGE_CLASSES,
                (0, 0),
                2000,
                256,
            ),
            make(
                TaskId::ImgRec,
                seed,
                n_exits,
                vec![Modality::Image],
                TaskKind::Reconstruction,
                0,
                (16, 16),
                4000,
                256,
            ),
            make(
                TaskId::TxtSent,
                seed,
                n_exits,
                vec![Modality::Text],
                TaskKind::Classification,
                2,
                (0, 0),
                2000,
                256,
            ),
            make(
                TaskId::TxtRec,
                seed,
                n_exits,
                vec![Modality::Text],
                TaskKind::Reconstruction,
                0,
                (12, 64),
                4000,
                256,
            ),
            make(
                TaskId::MmMatch,
                seed,
                n_exits,
                vec![Modality::Image, Modality::Text],
                TaskKind::Classification,
                2,
                (0, 0),
                2400,
                256,
            ),
            make(
                TaskId::WavCls,
                seed,
                n_exits,
                vec![Modality::Speech],
                TaskKind::Classification,
                NUM_WAVE_CLASSES,
                (0, 0),
                2000,
                256,
            ),
        ];
        TaskRegistry {
            tasks: all.into_iter().filter(|t| ids.contains(&t.id)).collect(),
        }
    }

    pub fn get(&self, id: TaskId) -> &TaskDef {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .expect("registered task")
    }

    pub fn ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }
}

// ── metrics ─────────────────────────────────────────────────────────────

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Usage("accuracy of an empty set".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(&logits.row(*r).to_vec()) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the largest entry; the first maximum wins.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// PSNR cap substituting for +inf at exact reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB; exact match returns the 100 dB cap.
pub fn psnr(x: &Array2<f64>, x_hat: &Array2<f64>, max_val: f64) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Dimension(format!(
            "psnr shapes {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    if max_val <= 0.0 {
        return Err(Error::Domain("max_val must be positive".into()));
    }
    let mse = (x - x_hat).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// BLEU with clipped n-gram precisions (add-one smoothing for n >= 2) and
/// brevity penalty exp(min(0, 1 - |ref|/|hyp|)).
pub fn bleu(reference: &[usize], hypothesis: &[usize], max_n: usize) -> f64 {
    assert!(max_n >= 1);
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let weight = 1.0 / max_n as f64;
    for n in 1..=max_n {
        let (matches, total) = clipped_ngram_matches(reference, hypothesis, n);
        let p = if n == 1 {
            if total == 0 {
                return 0.0;
            }
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += weight * p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / hypothesis.len() as f64).min(0.0);
    (log_sum + bp).exp()
}

fn clipped_ngram_matches(reference: &[usize], hypothesis: &[usize], n: usize) -> (usize, usize) {
    use std::collections::HashMap;
    if hypothesis.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[usize], usize> = HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut hyp_counts: HashMap<&[usize], usize> = HashMap::new();
    for gram in hypothesis.windows(n) {
        *hyp_counts.entry(gram).or_insert(0) += 1;
    }
    let total = hypothesis.len() - n + 1;
    let matches = hyp_counts
        .iter()
        .map(|(gram, c)| (*c).min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matches, total)
}

/// Achieved metric divided by its upper-bound value.
pub fn normalized_performance(metric_value: f64, upper_bound_value: f64) -> Result<f64> {
    if upper_bound_value <= 0.0 {
        return Err(Error::Domain(format!(
            "upper bound must be positive, got {upper_bound_value}"
        )));
    }
    Ok(metric_value / upper_bound_value)
}

/// Plain cross-entropy of one logit row against a class, for oracle tests.
pub fn cross_entropy_row(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}
