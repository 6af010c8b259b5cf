//! Per-modality semantic encoders with task embedding tokens, the unified
//! semantic decoder driven by task-specific query vectors, and the
//! light-weight task heads.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::features::{Modality, TaskKind};
use crate::nn::{DecoderLayer, EncoderLayer, Init, LayerNorm, Linear, ParamId, ParamSet, Session};
use crate::scalar::{s, Scalar};
use crate::tasks::{SampleData, TaskDef, TaskId};
use ndarray::Array2;

/// Split a row-major image into flattened patches, one row per patch.
pub fn patchify(image: &Array2<f64>, patch: usize) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "patch {patch} does not divide image {h}x{w}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Array2::zeros((ph * pw, patch * patch));
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                for dx in 0..patch {
                    out[[py * pw + px, dy * patch + dx]] =
                        image[[py * patch + dy, px * patch + dx]];
                }
            }
        }
    }
    Ok(out)
}

/// Reassemble an image from flattened patch rows; inverse of `patchify`.
pub fn unpatchify(patches: &Array2<f64>, patch: usize, h: usize, w: usize) -> Result<Array2<f64>> {
    let (ph, pw) = (h / patch, w / patch);
    if patches.dim() != (ph * pw, patch * patch) {
        return Err(Error::Dimension(format!(
            "{:?} patches cannot fill {h}x{w} at patch {patch}",
            patches.dim()
        )));
    }
    let mut out = Array2::zeros((h, w));
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                for dx in 0..patch {
                    out[[py * patch + dy, px * patch + dx]] =
                        patches[[py * pw + px, dy * patch + dx]];
                }
            }
        }
    }
    Ok(out)
}

/// Frame a waveform into non-overlapping windows, one row per frame.
pub fn frame_wave(wave: &[f64], frame: usize) -> Result<Array2<f64>> {
    if wave.is_empty() || !wave.len().is_multiple_of(frame) {
        return Err(Error::Dimension(format!(
            "frame {frame} does not divide waveform length {}",
            wave.len()
        )));
    }
    let rows = wave.len() / frame;
    Ok(Array2::from_shape_fn((rows, frame), |(r, c)| {
        wave[r * frame + c]
    }))
}

/// Raw per-row representation of one sample for one modality, before any
/// learned projection.
#[derive(Debug, Clone)]
pub enum RawRows {
    /// Dense rows (image patches or waveform frames).
    Dense(Array2<f64>),
    /// Token ids (text).
    Tokens(Vec<usize>),
}

impl RawRows {
    pub fn rows(&self) -> usize {
        match self {
            RawRows::Dense(d) => d.nrows(),
            RawRows::Tokens(t) => t.len(),
        }
    }
}

/// Deterministic sample-to-rows preprocessing for one modality.
pub fn preprocess_raw(
    data: &SampleData,
    modality: Modality,
    patch: usize,
    frame: usize,
) -> Result<RawRows> {
    match (data, modality) {
        (SampleData::Image(img), Modality::Image) => Ok(RawRows::Dense(patchify(img, patch)?)),
        (SampleData::ImageText(img, _), Modality::Image) => {
            Ok(RawRows::Dense(patchify(img, patch)?))
        }
        (SampleData::Text(tokens), Modality::Text) => Ok(RawRows::Tokens(tokens.clone())),
        (SampleData::ImageText(_, tokens), Modality::Text) => Ok(RawRows::Tokens(tokens.clone())),
        (SampleData::Wave(w), Modality::Speech) => Ok(RawRows::Dense(frame_wave(w, frame)?)),
        _ => Err(Error::Usage(format!(
            "sample does not carry the {} modality",
            modality.name()
        ))),
    }
}

/// One modality's semantic encoder: input projection (or token embedding),
/// positional embeddings, per-task embedding tokens, and a transformer
/// stack.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub modality: Modality,
    /// Dense input projection; None for token inputs.
    pub input_proj: Option<Linear>,
    /// Token embedding table; None for dense inputs.
    pub token_table: Option<ParamId>,
    pub positional: ParamId,
    /// Task embedding row per task that uses this modality.
    pub task_tokens: Vec<(TaskId, ParamId)>,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl ModalityEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        modality: Modality,
        input_dim: usize,
        vocab: usize,
        max_rows: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        depth: usize,
        tasks: &[TaskId],
    ) -> Self {
        let name = format!("enc.{}", modality.name());
        let (input_proj, token_table) = match modality {
            Modality::Text => (
                None,
                Some(params.register(format!("{name}.vocab"), init.normal(vocab, dim, 0.5))),
            ),
            _ => (
                Some(Linear::new(params, init, &format!("{name}.in"), input_dim, dim)),
                None,
            ),
        };
        let positional = params.register(format!("{name}.pos"), init.normal(max_rows, dim, 0.1));
        let task_tokens = tasks
            .iter()
            .map(|t| {
                (
                    *t,
                    params.register(
                        format!("{name}.task.{}", t.name()),
                        init.normal::<T>(1, dim, 0.5),
                    ),
                )
            })
            .collect();
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(params, init, &format!("{name}.layer{i}"), dim, heads, hidden))
            .collect();
        ModalityEncoder {
            modality,
            input_proj,
            token_table,
            positional,
            task_tokens,
            layers,
            final_ln: LayerNorm::new(params, init, &format!("{name}.ln_out"), dim),
        }
    }

    fn task_token(&self, task: TaskId) -> ParamId {
        self.task_tokens
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| *p)
            .unwrap_or_else(|| panic!("task {} has no embedding for {}", task.name(), self.modality.name()))
    }

    /// Embed raw rows of a batch into the model dimension and add
    /// positional embeddings. Returns the stacked matrix.
    pub fn embed<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        batch: &[RawRows],
    ) -> (Var, Vec<usize>) {
        let lens: Vec<usize> = batch.iter().map(|r| r.rows()).collect();
        let embedded = match (&self.input_proj, &self.token_table) {
            (Some(proj), None) => {
                let total: usize = lens.iter().sum();
                let in_dim = match &batch[0] {
                    RawRows::Dense(d) => d.ncols(),
                    RawRows::Tokens(_) => unreachable!("dense encoder got tokens"),
                };
                let mut stacked = Array2::zeros((total, in_dim));
                let mut at = 0;
                for rows in batch {
                    let RawRows::Dense(d) = rows else {
                        unreachable!("dense encoder got tokens")
                    };
                    for r in 0..d.nrows() {
                        for c in 0..in_dim {
                            stacked[[at + r, c]] = s::<T>(d[[r, c]]);
                        }
                    }
                    at += d.nrows();
                }
                let x = sess.tape.constant(stacked);
                proj.forward(sess, x)
            }
            (None, Some(table)) => {
                let ids: Vec<usize> = batch
                    .iter()
                    .flat_map(|r| {
                        let RawRows::Tokens(t) = r else {
                            unreachable!("token encoder got dense rows")
                        };
                        t.iter().copied()
                    })
                    .collect();
                let tv = sess.p(*table);
                sess.tape.embedding(tv, &ids)
            }
            _ => unreachable!("encoder has exactly one input path"),
        };
        // positional embedding by within-segment position
        let pos_ids: Vec<usize> = lens.iter().flat_map(|&l| 0..l).collect();
        let pv = sess.p(self.positional);
        let pos = sess.tape.embedding(pv, &pos_ids);
        let x = sess.tape.add(embedded, pos);
        (x, lens)
    }

    /// Append the task token to every segment, run the transformer stack,
    /// and strip the task rows again: output row count equals input row
    /// count.
    pub fn encode<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        lens: &[usize],
        task: TaskId,
    ) -> (Var, Vec<usize>) {
        let token = self.task_token(task);
        let tok = sess.p(token);
        let mut parts: Vec<Var> = Vec::with_capacity(lens.len() * 2);
        let mut at = 0;
        for &len in lens {
            parts.push(sess.tape.slice_rows(x, at, len));
            parts.push(tok);
            at += len;
        }
        let mut h = sess.tape.concat_rows(&parts);
        let aug_lens: Vec<usize> = lens.iter().map(|&l| l + 1).collect();
        for layer in &self.layers {
            h = layer.forward(sess, h, &aug_lens, None);
        }
        let h = self.final_ln.forward(sess, h);
        // strip task rows
        let mut keep: Vec<Var> = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &len in lens {
            keep.push(sess.tape.slice_rows(h, at, len));
            at += len + 1;
        }
        (sess.tape.concat_rows(&keep), lens.to_vec())
    }
}

/// The unified transformer decoder: task-specific query vectors
/// cross-attending into the received features, with a shared tap
/// normalization for the per-layer outputs.
#[derive(Debug, Clone)]
pub struct UnifiedDecoder {
    pub layers: Vec<DecoderLayer>,
    pub tap_ln: LayerNorm,
    /// Per-task query bank of up to `max_queries` rows.
    pub queries: Vec<(TaskId, ParamId)>,
}

impl UnifiedDecoder {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        dim: usize,
        heads: usize,
        hidden: usize,
        depth: usize,
        query_rows: &[(TaskId, usize)],
    ) -> Self {
        let layers = (0..depth)
            .map(|i| DecoderLayer::new(params, init, &format!("dec.layer{i}"), dim, heads, hidden))
            .collect();
        let queries = query_rows
            .iter()
            .map(|(t, rows)| {
                (
                    *t,
                    params.register(format!("dec.query.{}", t.name()), init.normal::<T>(*rows, dim, 0.5)),
                )
            })
            .collect();
        UnifiedDecoder {
            layers,
            tap_ln: LayerNorm::new(params, init, "dec.ln_tap", dim),
            queries,
        }
    }

    pub fn query_param(&self, task: TaskId) -> ParamId {
        self.queries
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| *p)
            .unwrap_or_else(|| panic!("task {} has no query bank", task.name()))
    }

    /// Build the stacked query matrix for a batch with the given per-sample
    /// query counts.
    pub fn build_queries<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        task: TaskId,
        q_lens: &[usize],
    ) -> Var {
        let bank = self.query_param(task);
        let bank_var = sess.p(bank);
        let parts: Vec<Var> = q_lens
            .iter()
            .map(|&m| sess.tape.slice_rows(bank_var, 0, m))
            .collect();
        sess.tape.concat_rows(&parts)
    }

    /// Run up to `limit` decoder layers, returning the tap-normalized state
    /// after each.
    pub fn forward_taps<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        queries: Var,
        memory: Var,
        q_lens: &[usize],
        mem_lens: &[usize],
        limit: usize,
    ) -> Vec<Var> {
        let mut taps = Vec::with_capacity(limit);
        let mut state = queries;
        for layer in self.layers.iter().take(limit) {
            state = layer.forward(sess, state, memory, q_lens, mem_lens);
            taps.push(self.tap_ln.forward(sess, state));
        }
        taps
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Task head attached to one decoder layer.
#[derive(Debug, Clone)]
pub enum TaskHead {
    /// Mean-pooled queries -> class logits.
    Classify(Linear),
    /// Per-query-row projection to patch pixels, squashed to [0,1].
    ReconstructImage(Linear),
    /// Per-query-row projection to vocabulary logits.
    ReconstructTokens(Linear),
}

impl TaskHead {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        task: &TaskDef,
        dim: usize,
        patch_pixels: usize,
        vocab: usize,
    ) -> Self {
        match (task.spec.kind, task.id) {
            (TaskKind::Classification, _) => TaskHead::Classify(Linear::new(
                params,
                init,
                name,
                dim,
                task.spec.num_classes,
            )),
            (TaskKind::Reconstruction, TaskId::TxtRec) => {
                TaskHead::ReconstructTokens(Linear::new(params, init, name, dim, vocab))
            }
            (TaskKind::Reconstruction, _) => {
                TaskHead::ReconstructImage(Linear::new(params, init, name, dim, patch_pixels))
            }
        }
    }

    /// Head forward over the stacked query states.
    ///
    /// Classification pools each sample's query rows and returns one logit
    /// row per sample; reconstruction returns one output row per query row.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        tap: Var,
        q_lens: &[usize],
    ) -> Var {
        match self {
            TaskHead::Classify(lin) => {
                let total: usize = q_lens.iter().sum();
                let ones = sess.tape.constant(Array2::from_elem((total, 1), T::one()));
                let pooled = sess.tape.segment_masked_mean(tap, ones, q_lens);
                lin.forward(sess, pooled)
            }
            TaskHead::ReconstructImage(lin) => {
                let y = lin.forward(sess, tap);
                sess.tape.sigmoid(y)
            }
            TaskHead::ReconstructTokens(lin) => lin.forward(sess, tap),
        }
    }
}
