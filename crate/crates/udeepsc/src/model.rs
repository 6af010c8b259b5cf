//! The full unified model: per-modality semantic encoders, dynamic channel
//! encoders, the shared codebook, the AWGN channel, the unified multi-exit
//! decoder with task heads and certainty modules, and the train / eval
//! forward passes that tie them together.

use crate::autodiff::Var;
use crate::backbone::{
    preprocess_raw, unpatchify, ModalityEncoder, RawRows, TaskHead, UnifiedDecoder,
};
use crate::channel::gaussian_noise;
use crate::codebook::{quantize_rows, UnifiedCodebook};
use crate::error::{Error, Result};
use crate::features::{Modality, TaskKind};
use crate::multiexit::{
    certainty_target_classification, certainty_target_reconstruction, certainty_target_tokens,
    Lcm, Phase,
};
use crate::nn::{Init, ParamId, ParamSet, Session};
use crate::scalar::{s, Scalar};
use crate::selection::{DynamicChannelEncoder, RatioHead, SelectionConfig, SelectionMode};
use crate::tasks::{Label, SampleData, TaskDef, TaskId, TaskRegistry};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;

/// How encoded rows are routed into the codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodebookRouting {
    /// Each modality owns a contiguous sub-codebook (the main design).
    PerModality,
    /// Every row searches the whole codebook.
    Joint,
    /// Each task owns a contiguous slice of the codebook.
    PerTask,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub enc_layers: usize,
    pub ch_layers: usize,
    pub dec_layers: usize,
    pub cls_queries: usize,
    pub lcm_hidden: usize,
    pub codebook_sizes: (usize, usize, usize),
    pub beta: f64,
    pub routing: CodebookRouting,
    pub selection: SelectionConfig,
    pub init_seed: u64,
    pub image_size: usize,
    pub patch: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub wave_len: usize,
    pub frame: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            ff: 64,
            enc_layers: 2,
            ch_layers: 4,
            dec_layers: 4,
            cls_queries: 4,
            lcm_hidden: 32,
            codebook_sizes: (128, 128, 64),
            beta: 0.25,
            routing: CodebookRouting::PerModality,
            selection: SelectionConfig::default(),
            init_seed: 1,
            image_size: 16,
            patch: 4,
            vocab: 64,
            max_text_len: 12,
            wave_len: 256,
            frame: 32,
        }
    }
}

impl ModelConfig {
    fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.patch * self.patch,
            Modality::Text => 0,
            Modality::Speech => self.frame,
        }
    }

    fn max_rows(&self, m: Modality) -> usize {
        match m {
            Modality::Image => (self.image_size / self.patch).pow(2),
            Modality::Text => self.max_text_len,
            Modality::Speech => self.wave_len / self.frame,
        }
    }
}

/// How a forward pass runs.
#[derive(Debug, Clone, Copy)]
pub enum RunMode {
    Train { tau: f64, gumbel_seed: u64 },
    Eval,
}

/// Per-run knobs shared by train and eval paths.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub sigma2: f64,
    /// Quantize features through the codebook (off for the diagnostic
    /// no-quantization bound).
    pub quantize: bool,
    /// Run dynamic selection (off delivers every feature: the upper bound).
    pub select: bool,
    pub noise_seed: u64,
    pub mode: RunMode,
}

impl RunOptions {
    pub fn eval(sigma2: f64, noise_seed: u64) -> Self {
        RunOptions {
            sigma2,
            quantize: true,
            select: true,
            noise_seed,
            mode: RunMode::Eval,
        }
    }

    /// Noiseless upper bound: all features delivered, no channel noise.
    pub fn upper_bound(quantize: bool) -> Self {
        RunOptions {
            sigma2: 0.0,
            quantize,
            select: false,
            noise_seed: 0,
            mode: RunMode::Eval,
        }
    }
}

/// Transmitter-side result for one modality of a batch.
pub struct ModalityTx {
    pub modality: Modality,
    pub lens: Vec<usize>,
    /// Channel-encoder output before quantization (domain adaptation input).
    pub z_en: Var,
    /// Received rows: noisy kept features plus mask embeddings.
    pub received: Var,
    /// Hard keep decisions per row.
    pub keep: Vec<bool>,
    /// Selected codeword per row (all rows, kept or not).
    pub indices: Vec<usize>,
    /// Per-module mask vars for the ratio loss (train mode only).
    pub module_masks: Vec<Var>,
    /// Per-module hard keep flags.
    pub module_alive: Vec<Vec<bool>>,
    /// Keep probabilities per module.
    pub keep_probs: Vec<Vec<f64>>,
    /// Codebook training loss (train mode only).
    pub vq_loss: Option<Var>,
    /// Bits of the index range used by this modality's rows.
    pub index_bits: usize,
}

impl ModalityTx {
    pub fn kept_per_sample(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.lens.len());
        let mut at = 0;
        for &len in &self.lens {
            out.push(self.keep[at..at + len].iter().filter(|&&k| k).count());
            at += len;
        }
        out
    }
}

/// Everything the receiver needs, plus bookkeeping for reports.
pub struct BatchForward {
    pub memory: Var,
    pub mem_lens: Vec<usize>,
    pub q_lens: Vec<usize>,
    pub tx: Vec<ModalityTx>,
}

impl BatchForward {
    /// (kept features, index bits, mask bits) per sample, summed over
    /// modalities.
    pub fn overhead_per_sample(&self) -> Vec<(usize, usize, usize)> {
        let n = self.mem_lens.len();
        let mut out = vec![(0usize, 0usize, 0usize); n];
        for tx in &self.tx {
            let kept = tx.kept_per_sample();
            for b in 0..n {
                out[b].0 += kept[b];
                out[b].1 += kept[b] * tx.index_bits;
                out[b].2 += tx.lens[b];
            }
        }
        out
    }
}

/// Batched prediction values extracted from a head.
#[derive(Debug, Clone)]
pub enum Prediction {
    Class(Vec<f64>),
    Image(Array2<f64>),
    Tokens(Vec<usize>, Array2<f64>),
}

/// Per-task training losses from one batch.
pub struct TaskTrainOutput {
    pub loss_p: Var,
    pub loss_c: Var,
    pub loss_r: Var,
    /// Channel-encoder features per modality, for the domain adaptation
    /// loss when the step's two tasks share a modality.
    pub z_en: Vec<(Modality, Var)>,
}

/// The unified multi-task model.
pub struct Model<T: Scalar> {
    pub params: ParamSet<T>,
    pub config: ModelConfig,
    pub registry: TaskRegistry,
    pub encoders: HashMap<Modality, ModalityEncoder>,
    pub channel_encoders: HashMap<Modality, DynamicChannelEncoder>,
    pub mask_embed: HashMap<Modality, ParamId>,
    pub codebook: ParamId,
    pub codebook_sizes: (usize, usize, usize),
    pub decoder: UnifiedDecoder,
    /// heads[(task, layer)] in layer order per task.
    pub heads: HashMap<(TaskId, usize), TaskHead>,
    pub lcms: HashMap<TaskId, Lcm>,
    pub ratio_heads: HashMap<TaskId, RatioHead>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, registry: TaskRegistry) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut init = Init::new(config.init_seed);

        let mut modalities: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| registry.tasks.iter().any(|t| t.spec.uses(*m)))
            .collect();
        modalities.sort();

        let mut encoders = HashMap::new();
        let mut channel_encoders = HashMap::new();
        let mut mask_embed = HashMap::new();
        for &m in &modalities {
            let tasks_using: Vec<TaskId> = registry
                .tasks
                .iter()
                .filter(|t| t.spec.uses(m))
                .map(|t| t.id)
                .collect();
            encoders.insert(
                m,
                ModalityEncoder::new(
                    &mut params,
                    &mut init,
                    m,
                    config.input_dim(m),
                    config.vocab,
                    config.max_rows(m),
                    config.dim,
                    config.heads,
                    config.ff,
                    config.enc_layers,
                    &tasks_using,
                ),
            );
            channel_encoders.insert(
                m,
                DynamicChannelEncoder::new(
                    &mut params,
                    &mut init,
                    &format!("ch.{}", m.name()),
                    config.dim,
                    config.heads,
                    config.ff,
                    config.ch_layers,
                    config.selection.clone(),
                )?,
            );
            mask_embed.insert(
                m,
                params.register(
                    format!("rx.maskemb.{}", m.name()),
                    init.normal::<T>(1, config.dim, 0.1),
                ),
            );
        }

        // unused modalities keep a 1-row stub so sub-codebook ranges stay
        // well-formed
        let full = config.codebook_sizes;
        let sz = |m: Modality, k: usize| if modalities.contains(&m) { k } else { 1 };
        let codebook_sizes = (
            sz(Modality::Image, full.0),
            sz(Modality::Text, full.1),
            sz(Modality::Speech, full.2),
        );
        let book = UnifiedCodebook::<T>::init(codebook_sizes, config.dim, config.init_seed ^ 0xc0de)?;
        let codebook = params.register("codebook", book.basis().clone());

        let query_rows: Vec<(TaskId, usize)> = registry
            .tasks
            .iter()
            .map(|t| {
                let rows = match (t.spec.kind, t.id) {
                    (TaskKind::Classification, _) => config.cls_queries,
                    (TaskKind::Reconstruction, TaskId::TxtRec) => config.max_text_len,
                    (TaskKind::Reconstruction, _) => config.max_rows(Modality::Image),
                };
                (t.id, rows)
            })
            .collect();
        let decoder = UnifiedDecoder::new(
            &mut params,
            &mut init,
            config.dim,
            config.heads,
            config.ff,
            config.dec_layers,
            &query_rows,
        );

        let mut heads = HashMap::new();
        let mut lcms = HashMap::new();
        let mut ratio_heads = HashMap::new();
        for task in &registry.tasks {
            for layer in 0..config.dec_layers {
                heads.insert(
                    (task.id, layer),
                    TaskHead::new(
                        &mut params,
                        &mut init,
                        &format!("head.{}.{layer}", task.id.name()),
                        task,
                        config.dim,
                        config.patch * config.patch,
                        config.vocab,
                    ),
                );
            }
            lcms.insert(
                task.id,
                Lcm::new(
                    &mut params,
                    &mut init,
                    &format!("lcm.{}", task.id.name()),
                    config.dim,
                    config.lcm_hidden,
                ),
            );
            ratio_heads.insert(
                task.id,
                RatioHead::new(
                    &mut params,
                    &format!("ratio.{}", task.id.name()),
                    config.selection.rho_bounds.clone(),
                ),
            );
        }

        Ok(Model {
            params,
            config,
            registry,
            encoders,
            channel_encoders,
            mask_embed,
            codebook,
            codebook_sizes,
            decoder,
            heads,
            lcms,
            ratio_heads,
        })
    }

    pub fn task(&self, id: TaskId) -> &TaskDef {
        self.registry.get(id)
    }

    /// Codebook index range for rows of one modality under the active
    /// routing.
    pub fn code_range(&self, task: TaskId, modality: Modality) -> Range<usize> {
        let (ki, kt, ks) = self.codebook_sizes;
        let k = ki + kt + ks;
        match self.config.routing {
            CodebookRouting::Joint => 0..k,
            CodebookRouting::PerModality => match modality {
                Modality::Image => 0..ki,
                Modality::Text => ki..ki + kt,
                Modality::Speech => ki + kt..k,
            },
            CodebookRouting::PerTask => {
                let n = self.registry.tasks.len();
                let pos = self
                    .registry
                    .tasks
                    .iter()
                    .position(|t| t.id == task)
                    .expect("registered task");
                let per = k / n;
                let start = pos * per;
                let end = if pos + 1 == n { k } else { start + per };
                start..end
            }
        }
    }

    /// Preprocess one modality of a sample batch into raw rows.
    pub fn preprocess(&self, batch: &[SampleData], modality: Modality) -> Result<Vec<RawRows>> {
        batch
            .iter()
            .map(|d| preprocess_raw(d, modality, self.config.patch, self.config.frame))
            .collect()
    }

    /// Transmitter for one modality: semantic encode, dynamic channel
    /// encode, quantize, cross the channel, and fill dropped rows with the
    /// learned mask embedding.
    fn transmit_modality(
        &self,
        sess: &mut Session<T>,
        task: TaskId,
        modality: Modality,
        raw: &[RawRows],
        opts: &RunOptions,
    ) -> Result<ModalityTx> {
        let enc = self
            .encoders
            .get(&modality)
            .ok_or_else(|| Error::Usage(format!("no encoder for {}", modality.name())))?;
        let (x, lens) = enc.embed(sess, raw);
        let (u, lens) = enc.encode(sess, x, &lens, task);

        let ch = &self.channel_encoders[&modality];
        let sel_mode = if !opts.select {
            SelectionMode::Infer { rho_final: 1.0 }
        } else {
            match opts.mode {
                RunMode::Train { tau, gumbel_seed } => SelectionMode::Train {
                    tau,
                    seed: mix(gumbel_seed, modality as u64 + 1),
                },
                RunMode::Eval => {
                    let rho = self.ratio_heads[&task]
                        .targets_plain(&self.params, opts.sigma2);
                    SelectionMode::Infer {
                        rho_final: *rho.last().expect("at least one module"),
                    }
                }
            }
        };
        let outcome = ch.forward(sess, u, &lens, opts.sigma2, sel_mode)?;
        let keep = outcome.final_mask_bools(&sess.tape);

        // quantization against the routed codebook slice
        let range = self.code_range(task, modality);
        let index_bits = (usize::BITS - (range.len() - 1).leading_zeros()) as usize;
        let total: usize = lens.iter().sum();
        let ranges: Vec<Range<usize>> = vec![range; total];
        let (z_q, indices, vq_loss) = if opts.quantize {
            let book_values = self.params.value(self.codebook);
            let q = quantize_rows(sess.tape.value(outcome.features), &ranges, book_values)?;
            let st = sess.tape.vq_straight_through(outcome.features, &q.z_vq);
            let vq = match opts.mode {
                RunMode::Train { .. } => {
                    let book_var = sess.p(self.codebook);
                    Some(sess.tape.vq_codebook_loss_masked(
                        outcome.features,
                        book_var,
                        &q.indices,
                        s(self.config.beta),
                        &keep,
                    ))
                }
                RunMode::Eval => None,
            };
            (st, q.indices, vq)
        } else {
            (outcome.features, vec![0; total], None)
        };

        // channel: power-scaled AWGN on kept rows
        let noise = if opts.sigma2 > 0.0 {
            gaussian_noise::<T>(
                total,
                self.config.dim,
                opts.sigma2,
                mix(opts.noise_seed, modality as u64 + 11),
            )
        } else {
            Array2::zeros((total, self.config.dim))
        };
        let y = sess.tape.channel_transmit(z_q, outcome.mask, &lens, &noise);

        // dropped rows become the learned per-modality mask embedding
        let inv = {
            let neg = sess.tape.scale(outcome.mask, -T::one());
            sess.tape.add_const(neg, T::one())
        };
        let me = sess.p(self.mask_embed[&modality]);
        let me_rows = sess.tape.broadcast_segments(me, &[total]);
        let filler = sess.tape.mul_col(me_rows, inv);
        let received = sess.tape.add(y, filler);

        Ok(ModalityTx {
            modality,
            lens,
            z_en: outcome.features,
            received,
            keep,
            indices,
            module_masks: outcome.module_masks,
            module_alive: outcome.module_alive,
            keep_probs: outcome.keep_probs,
            vq_loss,
            index_bits,
        })
    }

    /// Seed the codebook from actual encoder features: each sub-codebook is
    /// filled with (jittered) channel-encoder output rows of its modality.
    /// Without this, one codeword wins every nearest-neighbor assignment
    /// from the first step and the rest stay dead, since there are no
    /// resets. Deterministic given the seed; call once before training.
    pub fn warm_start_codebook(&mut self, seed: u64) -> Result<()> {
        use rand::prelude::*;
        let mut collected: HashMap<Modality, Vec<Vec<T>>> = HashMap::new();
        let modalities: Vec<Modality> = self.encoders.keys().copied().collect();
        for m in modalities {
            // pool feature rows from every task of the modality so the
            // codewords cover all of its distributions
            let tasks: Vec<TaskId> = self
                .registry
                .tasks
                .iter()
                .filter(|t| t.spec.uses(m))
                .map(|t| t.id)
                .collect();
            let mut rows: Vec<Vec<T>> = Vec::new();
            for task in tasks {
                let def = self.task(task);
                let n = 16.min(def.data.train_size);
                let batch: Vec<SampleData> = (0..n)
                    .map(|i| crate::tasks::gen_sample(&def.data, crate::tasks::Split::Train, i))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .map(|(d, _)| d)
                    .collect();
                let mut sess = Session::new(&self.params);
                let raw = self.preprocess(&batch, m)?;
                let opts = RunOptions::upper_bound(false);
                let tx = self.transmit_modality(&mut sess, task, m, &raw, &opts)?;
                let z = sess.tape.value(tx.z_en);
                rows.extend((0..z.nrows()).map(|r| z.row(r).to_vec()));
            }
            collected.insert(m, rows);
        }
        let union: Vec<Vec<T>> = collected.values().flatten().cloned().collect();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let (ki, kt, ks) = self.codebook_sizes;
        let k = ki + kt + ks;
        let book = self.params.value_mut(self.codebook);
        for idx in 0..k {
            let m = if idx < ki {
                Modality::Image
            } else if idx < ki + kt {
                Modality::Text
            } else {
                Modality::Speech
            };
            let pool = match self.config.routing {
                CodebookRouting::PerModality => collected.get(&m).unwrap_or(&union),
                _ => &union,
            };
            if pool.is_empty() {
                continue;
            }
            let row = &pool[rng.gen_range(0..pool.len())];
            for (c, v) in row.iter().enumerate() {
                let jitter: f64 = rng.sample(rand_distr::StandardNormal);
                book[[idx, c]] = *v + s::<T>(jitter * 0.05);
            }
        }
        Ok(())
    }

    /// Full transmitter over all modalities of the task: produces the
    /// decoder memory (per-sample concatenation of received modality rows).
    pub fn transmit(
        &self,
        sess: &mut Session<T>,
        task: TaskId,
        batch: &[SampleData],
        opts: &RunOptions,
    ) -> Result<BatchForward> {
        let def = self.task(task);
        let mut modalities = def.spec.modalities.clone();
        modalities.sort();
        let mut tx = Vec::with_capacity(modalities.len());
        for m in modalities {
            let raw = self.preprocess(batch, m)?;
            tx.push(self.transmit_modality(sess, task, m, &raw, opts)?);
        }
        // interleave per sample: [mod0 rows of b, mod1 rows of b, ...]
        let n = batch.len();
        let mut mem_lens = vec![0usize; n];
        let (memory, mem_lens) = if tx.len() == 1 {
            (tx[0].received, tx[0].lens.clone())
        } else {
            let mut parts: Vec<Var> = Vec::with_capacity(n * tx.len());
            let mut offsets: Vec<usize> = vec![0; tx.len()];
            for (b, len_slot) in mem_lens.iter_mut().enumerate() {
                for (mi, t) in tx.iter().enumerate() {
                    let len = t.lens[b];
                    parts.push(sess.tape.slice_rows(t.received, offsets[mi], len));
                    offsets[mi] += len;
                    *len_slot += len;
                }
            }
            (sess.tape.concat_rows(&parts), mem_lens)
        };
        let q_lens = self.query_lens(task, batch)?;
        Ok(BatchForward {
            memory,
            mem_lens,
            q_lens,
            tx,
        })
    }

    /// Query rows per sample: fixed slots for classification, one slot per
    /// source position for reconstruction.
    pub fn query_lens(&self, task: TaskId, batch: &[SampleData]) -> Result<Vec<usize>> {
        let def = self.task(task);
        Ok(match (def.spec.kind, task) {
            (TaskKind::Classification, _) => vec![self.config.cls_queries; batch.len()],
            (TaskKind::Reconstruction, TaskId::TxtRec) => batch
                .iter()
                .map(|d| match d {
                    SampleData::Text(t) => Ok(t.len()),
                    _ => Err(Error::Usage("text task expects text samples".into())),
                })
                .collect::<Result<Vec<_>>>()?,
            (TaskKind::Reconstruction, _) => {
                vec![self.config.max_rows(Modality::Image); batch.len()]
            }
        })
    }

    /// All decoder taps for a batch (training and forced-exit evaluation).
    pub fn decode_taps(
        &self,
        sess: &mut Session<T>,
        task: TaskId,
        fwd: &BatchForward,
        limit: usize,
    ) -> Vec<Var> {
        let queries = self.decoder.build_queries(sess, task, &fwd.q_lens);
        self.decoder.forward_taps(
            sess,
            queries,
            fwd.memory,
            &fwd.q_lens,
            &fwd.mem_lens,
            limit,
        )
    }

    /// Head forward at one layer.
    pub fn head(&self, sess: &mut Session<T>, task: TaskId, layer: usize, tap: Var, q_lens: &[usize]) -> Var {
        self.heads[&(task, layer)].forward(sess, tap, q_lens)
    }

    /// LCM certainty for one layer's tap.
    pub fn certainty(
        &self,
        sess: &mut Session<T>,
        task: TaskId,
        tap: Var,
        q_lens: &[usize],
        sigma2: f64,
    ) -> Var {
        self.lcms[&task].predict(sess, tap, q_lens, sigma2)
    }

    /// Extract per-sample predictions from a head output.
    pub fn predictions(
        &self,
        sess: &Session<T>,
        task: TaskId,
        head_out: Var,
        q_lens: &[usize],
    ) -> Vec<Prediction> {
        let def = self.task(task);
        let v = sess.tape.value(head_out);
        match (def.spec.kind, task) {
            (TaskKind::Classification, _) => (0..q_lens.len())
                .map(|b| Prediction::Class(v.row(b).iter().map(|x| x.to_f64_lossy()).collect()))
                .collect(),
            (TaskKind::Reconstruction, TaskId::TxtRec) => {
                let mut out = Vec::with_capacity(q_lens.len());
                let mut at = 0;
                for &m in q_lens {
                    let logits = Array2::from_shape_fn((m, v.ncols()), |(r, c)| {
                        v[[at + r, c]].to_f64_lossy()
                    });
                    let tokens = (0..m)
                        .map(|r| crate::tasks::argmax(&logits.row(r).to_vec()))
                        .collect();
                    out.push(Prediction::Tokens(tokens, logits));
                    at += m;
                }
                out
            }
            (TaskKind::Reconstruction, _) => {
                let mut out = Vec::with_capacity(q_lens.len());
                let mut at = 0;
                for &m in q_lens {
                    let patches = Array2::from_shape_fn((m, v.ncols()), |(r, c)| {
                        v[[at + r, c]].to_f64_lossy()
                    });
                    let img = unpatchify(
                        &patches,
                        self.config.patch,
                        self.config.image_size,
                        self.config.image_size,
                    )
                    .expect("head emits one row per patch");
                    out.push(Prediction::Image(img));
                    at += m;
                }
                out
            }
        }
    }

    /// Task loss at one layer (tape scalar).
    pub fn task_loss(
        &self,
        sess: &mut Session<T>,
        task: TaskId,
        head_out: Var,
        labels: &[Label],
        q_lens: &[usize],
    ) -> Var {
        let def = self.task(task);
        match (def.spec.kind, task) {
            (TaskKind::Classification, _) => {
                let ys: Vec<usize> = labels.iter().map(|l| l.class()).collect();
                sess.tape.cross_entropy(head_out, &ys)
            }
            (TaskKind::Reconstruction, TaskId::TxtRec) => {
                let tokens: Vec<usize> = labels
                    .iter()
                    .flat_map(|l| match l {
                        Label::Tokens(t) => t.clone(),
                        _ => panic!("token labels expected"),
                    })
                    .collect();
                sess.tape.cross_entropy(head_out, &tokens)
            }
            (TaskKind::Reconstruction, _) => {
                let total: usize = q_lens.iter().sum();
                let mut target = Array2::zeros((total, self.config.patch * self.config.patch));
                let mut at = 0;
                for (label, &m) in labels.iter().zip(q_lens) {
                    let Label::Image(img) = label else {
                        panic!("image labels expected")
                    };
                    let patches =
                        crate::backbone::patchify(img, self.config.patch).expect("image geometry");
                    for r in 0..m {
                        for c in 0..patches.ncols() {
                            target[[at + r, c]] = s::<T>(patches[[r, c]]);
                        }
                    }
                    at += m;
                }
                sess.tape.mse(head_out, &target)
            }
        }
    }

    /// Ground-truth certainty per sample from a head output's values.
    pub fn certainty_targets(
        &self,
        sess: &Session<T>,
        task: TaskId,
        head_out: Var,
        labels: &[Label],
        q_lens: &[usize],
    ) -> Vec<f64> {
        let preds = self.predictions(sess, task, head_out, q_lens);
        preds
            .iter()
            .zip(labels)
            .map(|(p, l)| match (p, l) {
                (Prediction::Class(logits), Label::Class(y)) => {
                    certainty_target_classification(logits, *y)
                }
                (Prediction::Image(img), Label::Image(y)) => {
                    certainty_target_reconstruction(img, y).expect("matching shapes")
                }
                (Prediction::Tokens(_, logits), Label::Tokens(t)) => {
                    certainty_target_tokens(logits, t).expect("matching lengths")
                }
                _ => panic!("prediction and label kinds diverge"),
            })
            .collect()
    }

    /// Training forward for one task batch: returns the phase loss, the
    /// codebook loss, and the ratio loss, all on the tape.
    pub fn task_train_forward(
        &self,
        sess: &mut Session<T>,
        task: TaskId,
        batch: &[(SampleData, Label)],
        phase: Phase,
        opts: &RunOptions,
    ) -> Result<TaskTrainOutput> {
        let data: Vec<SampleData> = batch.iter().map(|(d, _)| d.clone()).collect();
        let labels: Vec<Label> = batch.iter().map(|(_, l)| l.clone()).collect();
        let fwd = self.transmit(sess, task, &data, opts)?;
        let taps = self.decode_taps(sess, task, &fwd, self.config.dec_layers);

        let def = self.task(task);
        let weights = def.spec.loss_weights.clone();
        let mut pairs: Vec<Option<(Var, Var)>> = vec![None; taps.len()];
        for (i, tap) in taps.iter().enumerate() {
            let active = match phase {
                Phase::One => i + 1 == taps.len(),
                Phase::Two => true,
            };
            if !active {
                continue;
            }
            let head_out = self.head(sess, task, i, *tap, &fwd.q_lens);
            let t_loss = self.task_loss(sess, task, head_out, &labels, &fwd.q_lens);
            let targets = self.certainty_targets(sess, task, head_out, &labels, &fwd.q_lens);
            let c = self.certainty(sess, task, *tap, &fwd.q_lens, opts.sigma2);
            let target_col =
                Array2::from_shape_fn((targets.len(), 1), |(r, _)| s::<T>(targets[r]));
            let l_loss = sess.tape.mse(c, &target_col);
            pairs[i] = Some((t_loss, l_loss));
        }
        let loss_p = crate::multiexit::multiexit_loss_tape(sess, &pairs, phase, &weights);

        // codebook loss summed over modalities
        let mut loss_c: Option<Var> = None;
        for tx in &fwd.tx {
            if let Some(vq) = tx.vq_loss {
                loss_c = Some(match loss_c {
                    Some(a) => sess.tape.add(a, vq),
                    None => vq,
                });
            }
        }
        let loss_c = loss_c.unwrap_or_else(|| sess.tape.constant(Array2::zeros((1, 1))));

        // ratio loss per modality with the task's shared targets
        let rhos = self.ratio_heads[&task].targets(sess, opts.sigma2);
        let mut loss_r: Option<Var> = None;
        for tx in &fwd.tx {
            if tx.module_masks.is_empty() {
                continue;
            }
            let term = crate::selection::ratio_loss_tape(
                sess,
                &rhos,
                &tx.module_masks,
                &tx.lens,
                self.config.selection.lambda_rho,
            );
            loss_r = Some(match loss_r {
                Some(a) => sess.tape.add(a, term),
                None => term,
            });
        }
        let loss_r = loss_r.unwrap_or_else(|| sess.tape.constant(Array2::zeros((1, 1))));

        Ok(TaskTrainOutput {
            loss_p,
            loss_c,
            loss_r,
            z_en: fwd.tx.iter().map(|t| (t.modality, t.z_en)).collect(),
        })
    }

    /// Evaluation with confidence-gated early exits, per sample; returns
    /// (prediction, exit layer, layers computed) per sample plus the shared
    /// transmitter bookkeeping.
    #[allow(clippy::type_complexity)]
    pub fn eval_gated(
        &self,
        task: TaskId,
        batch: &[SampleData],
        threshold: f64,
        opts: &RunOptions,
    ) -> Result<(Vec<(Prediction, usize, usize)>, BatchForwardInfo)> {
        let mut sess = Session::new(&self.params);
        let fwd = self.transmit(&mut sess, task, batch, opts)?;
        let info = BatchForwardInfo::from(&fwd);
        let n_layers = self.config.dec_layers;
        let mut results = Vec::with_capacity(batch.len());
        let mut mem_at = 0;
        for (b, &mem_len) in fwd.mem_lens.iter().enumerate() {
            let memory = sess.tape.slice_rows(fwd.memory, mem_at, mem_len);
            mem_at += mem_len;
            let m = fwd.q_lens[b];
            let q_lens = [m];
            let mem_lens = [mem_len];
            let bank = sess.p(self.decoder.query_param(task));
            let mut state = sess.tape.slice_rows(bank, 0, m);
            let mut computed = 0usize;
            let mut exit_layer = n_layers;
            let mut final_tap = None;
            for (i, layer) in self.decoder.layers.iter().enumerate() {
                state = layer.forward(&mut sess, state, memory, &q_lens, &mem_lens);
                computed += 1;
                let tap = self.decoder.tap_ln.forward(&mut sess, state);
                final_tap = Some(tap);
                let c = self.certainty(&mut sess, task, tap, &q_lens, opts.sigma2);
                let cv = sess.tape.scalar(c).to_f64_lossy();
                if cv > threshold || i + 1 == n_layers {
                    exit_layer = i + 1;
                    break;
                }
            }
            let tap = final_tap.expect("decoder has at least one layer");
            let head_out = self.head(&mut sess, task, exit_layer - 1, tap, &q_lens);
            let pred = self
                .predictions(&sess, task, head_out, &q_lens)
                .pop()
                .expect("one sample");
            results.push((pred, exit_layer, computed));
        }
        Ok((results, info))
    }

    /// Batched evaluation of every decoder layer: per-layer predictions and
    /// certainties.
    #[allow(clippy::type_complexity)]
    pub fn eval_all_layers(
        &self,
        task: TaskId,
        batch: &[SampleData],
        opts: &RunOptions,
    ) -> Result<(Vec<Vec<Prediction>>, Vec<Vec<f64>>, BatchForwardInfo)> {
        let mut sess = Session::new(&self.params);
        let fwd = self.transmit(&mut sess, task, batch, opts)?;
        let info = BatchForwardInfo::from(&fwd);
        let taps = self.decode_taps(&mut sess, task, &fwd, self.config.dec_layers);
        let mut layer_preds = Vec::with_capacity(taps.len());
        let mut layer_certs = Vec::with_capacity(taps.len());
        for (i, tap) in taps.iter().enumerate() {
            let head_out = self.head(&mut sess, task, i, *tap, &fwd.q_lens);
            layer_preds.push(self.predictions(&sess, task, head_out, &fwd.q_lens));
            let c = self.certainty(&mut sess, task, *tap, &fwd.q_lens, opts.sigma2);
            layer_certs.push(
                sess.tape
                    .value(c)
                    .column(0)
                    .iter()
                    .map(|v| v.to_f64_lossy())
                    .collect(),
            );
        }
        Ok((layer_preds, layer_certs, info))
    }
}

/// Value-level snapshot of the transmitter bookkeeping (no tape handles),
/// safe to return from evaluation.
#[derive(Debug, Clone)]
pub struct BatchForwardInfo {
    pub kept: Vec<usize>,
    pub index_bits: Vec<usize>,
    pub mask_bits: Vec<usize>,
    /// Per modality: per-module keep ratios averaged over the batch.
    pub module_keep_ratios: Vec<(Modality, Vec<f64>)>,
}

impl BatchForwardInfo {
    fn from(fwd: &BatchForward) -> Self {
        let overhead = fwd.overhead_per_sample();
        let module_keep_ratios = fwd
            .tx
            .iter()
            .map(|tx| {
                let ratios: Vec<f64> = tx
                    .module_alive
                    .iter()
                    .map(|alive| {
                        alive.iter().filter(|&&a| a).count() as f64 / alive.len().max(1) as f64
                    })
                    .collect();
                (tx.modality, ratios)
            })
            .collect();
        BatchForwardInfo {
            kept: overhead.iter().map(|o| o.0).collect(),
            index_bits: overhead.iter().map(|o| o.1).collect(),
            mask_bits: overhead.iter().map(|o| o.2).collect(),
            module_keep_ratios,
        }
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9))
}

/// Task metric over predictions: accuracy, mean PSNR, or mean BLEU-2.
pub fn metric_of(task: TaskId, preds: &[Prediction], labels: &[Label]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    match task {
        TaskId::ImgRec => {
            let mut total = 0.0;
            for (p, l) in preds.iter().zip(labels) {
                let (Prediction::Image(img), Label::Image(y)) = (p, l) else {
                    panic!("image prediction expected")
                };
                total += crate::tasks::psnr(y, img, 1.0).expect("matching shapes");
            }
            total / preds.len() as f64
        }
        TaskId::TxtRec => {
            let mut total = 0.0;
            for (p, l) in preds.iter().zip(labels) {
                let (Prediction::Tokens(tokens, _), Label::Tokens(y)) = (p, l) else {
                    panic!("token prediction expected")
                };
                total += crate::tasks::bleu(y, tokens, 2);
            }
            total / preds.len() as f64
        }
        _ => {
            let mut correct = 0usize;
            for (p, l) in preds.iter().zip(labels) {
                let (Prediction::Class(logits), Label::Class(y)) = (p, l) else {
                    panic!("class prediction expected")
                };
                if crate::tasks::argmax(logits) == *y {
                    correct += 1;
                }
            }
            correct as f64 / preds.len() as f64
        }
    }
}
