//! Neural building blocks on top of the tape: parameter registry, linear /
//! layer-norm / multi-head attention layers, pre-norm transformer encoder and
//! decoder stacks, and the AdamW optimizer.

use crate::autodiff::{Grads, Tape, Var};
use crate::scalar::{s, Scalar};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Handle to a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter storage; the master copy that persists across steps.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    pub(crate) values: Vec<Array2<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Total scalars in parameters whose name starts with `prefix`.
    pub fn scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(self.values.iter())
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// Deterministic initializers, one RNG stream per parameter.
pub struct Init {
    seed: u64,
    counter: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed, counter: 0 }
    }

    fn next_rng(&mut self) -> ChaCha20Rng {
        self.counter += 1;
        ChaCha20Rng::seed_from_u64(self.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ self.counter)
    }

    /// Glorot-uniform weight matrix.
    pub fn glorot<T: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        let mut rng = self.next_rng();
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| s::<T>(rng.gen_range(-bound..bound)))
    }

    /// Small-normal matrix for embeddings and queries.
    pub fn normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let mut rng = self.next_rng();
        Array2::from_shape_fn((rows, cols), |_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            s::<T>(z * std)
        })
    }

    pub fn zeros<T: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::zeros((rows, cols))
    }

    pub fn ones<T: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::from_elem((rows, cols), T::one())
    }
}

/// One forward pass: a tape plus lazy bindings of parameters onto it.
pub struct Session<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Bind a parameter onto the tape (idempotent per session).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Backward pass; returns gradients aligned with the parameter set
    /// (None for parameters that were never bound or never reached).
    pub fn grads(&self, loss: Var) -> Vec<Option<Array2<T>>> {
        let mut grads = self.tape.backward(loss);
        self.collect(&mut grads)
    }

    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<Option<Array2<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Affine layer: y = x W + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self::new_scaled(params, init, name, d_in, d_out, 1.0)
    }

    /// Linear layer with the weight init scaled down; residual-branch
    /// output projections start small so the stream stays
    /// embedding-dominated at init.
    pub fn new_scaled<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
    ) -> Self {
        let w = init.glorot::<T>(d_in, d_out).mapv(|v| v * s::<T>(scale));
        Linear {
            w: params.register(format!("{name}.w"), w),
            b: params.register(format!("{name}.b"), init.zeros(1, d_out)),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Var {
        let w = sess.p(self.w);
        let b = sess.p(self.b);
        let y = sess.tape.matmul(x, w);
        sess.tape.add_row(y, b)
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
    ) -> Self {
        LayerNorm {
            gain: params.register(format!("{name}.g"), init.ones(1, dim)),
            bias: params.register(format!("{name}.b"), init.zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Var {
        let g = sess.p(self.gain);
        let b = sess.p(self.bias);
        sess.tape.layer_norm(x, g, b, s(1e-5))
    }
}

/// Multi-head attention with learned Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0);
        MultiHeadAttention {
            wq: Linear::new(params, init, &format!("{name}.q"), dim, dim),
            wk: Linear::new(params, init, &format!("{name}.k"), dim, dim),
            wv: Linear::new(params, init, &format!("{name}.v"), dim, dim),
            wo: Linear::new_scaled(params, init, &format!("{name}.o"), dim, dim, 0.2),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        q_in: Var,
        kv_in: Var,
        q_lens: &[usize],
        kv_lens: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Var {
        let q = self.wq.forward(sess, q_in);
        let k = self.wk.forward(sess, kv_in);
        let v = self.wv.forward(sess, kv_in);
        let attn = sess
            .tape
            .attention(q, k, v, q_lens, kv_lens, self.heads, key_mask);
        self.wo.forward(sess, attn)
    }
}

/// Position-wise feed-forward: W2 gelu(W1 x).
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(params, init, &format!("{name}.ff1"), dim, hidden),
            lin2: Linear::new_scaled(params, init, &format!("{name}.ff2"), hidden, dim, 0.2),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Var {
        let h = self.lin1.forward(sess, x);
        let h = sess.tape.gelu(h);
        self.lin2.forward(sess, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(params, init, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(params, init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(params, init, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(params, init, &format!("{name}.ffn"), dim, hidden),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        lens: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Var {
        let normed = self.ln1.forward(sess, x);
        let attn = self
            .attn
            .forward(sess, normed, normed, lens, lens, key_mask);
        let x = sess.tape.add(x, attn);
        let normed = self.ln2.forward(sess, x);
        let ff = self.ff.forward(sess, normed);
        sess.tape.add(x, ff)
    }
}

/// Pre-norm transformer decoder layer: query self-attention, cross-attention
/// into the received memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(params, init, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(params, init, &format!("{name}.self"), dim, heads),
            ln2: LayerNorm::new(params, init, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(params, init, &format!("{name}.cross"), dim, heads),
            ln3: LayerNorm::new(params, init, &format!("{name}.ln3"), dim),
            ff: FeedForward::new(params, init, &format!("{name}.ffn"), dim, hidden),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        queries: Var,
        memory: Var,
        q_lens: &[usize],
        mem_lens: &[usize],
    ) -> Var {
        let normed = self.ln1.forward(sess, queries);
        let attn = self
            .self_attn
            .forward(sess, normed, normed, q_lens, q_lens, None);
        let x = sess.tape.add(queries, attn);
        let normed = self.ln2.forward(sess, x);
        let cross = self
            .cross_attn
            .forward(sess, normed, memory, q_lens, mem_lens, None);
        let x = sess.tape.add(x, cross);
        let normed = self.ln3.forward(sess, x);
        let ff = self.ff.forward(sess, normed);
        sess.tape.add(x, ff)
    }
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub clip_norm: Option<T>,
    pub step_count: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        AdamW {
            lr: s(lr),
            beta1: s(0.9),
            beta2: s(0.999),
            eps: s(1e-8),
            weight_decay: s(weight_decay),
            clip_norm: clip_norm.map(s),
            step_count: 0,
            m: params.values.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.values.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    /// One optimizer update. `grads` is aligned with the parameter set;
    /// `None` entries are untouched parameters.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Array2<T>>]) {
        assert_eq!(grads.len(), params.len());
        self.step_count += 1;
        let t = self.step_count as i32;

        // Global-norm clipping over present gradients.
        let mut scale = T::one();
        if let Some(clip) = self.clip_norm {
            let total: T = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|v| *v * *v).sum::<T>())
                .sum();
            let norm = total.sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }

        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let g = grad.mapv(|v| v * scale);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, g| {
                *m = self.beta1 * *m + (T::one() - self.beta1) * *g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, g| {
                *v = self.beta2 * *v + (T::one() - self.beta2) * *g * *g;
            });
            let p = &mut params.values[i];
            // decoupled decay on weight matrices only
            let decay = if p.nrows() > 1 {
                self.weight_decay
            } else {
                T::zero()
            };
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, m, v| {
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *p);
                });
        }
    }

    pub fn state(&self) -> (&[Array2<T>], &[Array2<T>], u64) {
        (&self.m, &self.v, self.step_count)
    }

    pub fn restore(&mut self, m: Vec<Array2<T>>, v: Vec<Array2<T>>, step_count: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::prelude::*;

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-0.8..0.8))
    }

    /// Finite differences through a whole encoder layer, probing one weight.
    #[test]
    fn encoder_layer_grad_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut init = Init::new(1);
        let layer = EncoderLayer::new(&mut params, &mut init, "enc", 8, 2, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x0 = rand_mat(&mut rng, 5, 8);
        let lens = [3usize, 2];
        let mask = [true, true, false, true, true];

        let loss_of = |params: &ParamSet<f64>| -> f64 {
            let mut sess = Session::new(params);
            let x = sess.tape.constant(x0.clone());
            let y = layer.forward(&mut sess, x, &lens, Some(&mask));
            let l = sess.tape.mean(y);
            sess.tape.scalar(l)
        };

        let mut sess = Session::new(&params);
        let x = sess.tape.constant(x0.clone());
        let y = layer.forward(&mut sess, x, &lens, Some(&mask));
        let l = sess.tape.mean(y);
        let grads = sess.grads(l);

        let probe = layer.attn.wq.w.0;
        let g = grads[probe].as_ref().expect("wq gradient").clone();
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (3, 5), (7, 7)] {
            let mut pp = params.clone();
            pp.values[probe][[r, c]] += h;
            let lp = loss_of(&pp);
            let mut pm = params.clone();
            pm.values[probe][[r, c]] -= h;
            let lm = loss_of(&pm);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[[r, c]]).abs() / fd.abs().max(1e-5) < 1e-3,
                "({r},{c}): fd {fd} vs {}",
                g[[r, c]]
            );
        }
    }

    #[test]
    fn decoder_layer_grad_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut init = Init::new(3);
        let layer = DecoderLayer::new(&mut params, &mut init, "dec", 8, 2, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let q0 = rand_mat(&mut rng, 4, 8);
        let mem0 = rand_mat(&mut rng, 7, 8);
        let q_lens = [2usize, 2];
        let mem_lens = [3usize, 4];

        let loss_of = |params: &ParamSet<f64>| -> f64 {
            let mut sess = Session::new(params);
            let q = sess.tape.constant(q0.clone());
            let mem = sess.tape.constant(mem0.clone());
            let y = layer.forward(&mut sess, q, mem, &q_lens, &mem_lens);
            let ysq = sess.tape.mul(y, y);
            let l = sess.tape.mean(ysq);
            sess.tape.scalar(l)
        };

        let mut sess = Session::new(&params);
        let q = sess.tape.constant(q0.clone());
        let mem = sess.tape.constant(mem0.clone());
        let y = layer.forward(&mut sess, q, mem, &q_lens, &mem_lens);
        let ysq = sess.tape.mul(y, y);
        let l = sess.tape.mean(ysq);
        let grads = sess.grads(l);
        let probe = layer.cross_attn.wk.w.0;
        let g = grads[probe].as_ref().expect("cross wk gradient").clone();
        let h = 1e-6;
        for &(r, c) in &[(0usize, 1usize), (5, 2)] {
            let mut pp = params.clone();
            pp.values[probe][[r, c]] += h;
            let lp = loss_of(&pp);
            let mut pm = params.clone();
            pm.values[probe][[r, c]] -= h;
            let lm = loss_of(&pm);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[[r, c]]).abs() / fd.abs().max(1e-5) < 1e-3,
                "({r},{c}): fd {fd} vs {}",
                g[[r, c]]
            );
        }
    }

    #[test]
    fn adamw_reduces_a_quadratic() {
        let mut params = ParamSet::<f64>::new();
        let mut init = Init::new(5);
        let w = params.register("w", init.normal(4, 3, 1.0));
        let mut opt = AdamW::new(&params, 0.05, 0.0, Some(1.0));
        let target = arr2(&[[0.5; 3]; 4]);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..300 {
            let mut sess = Session::new(&params);
            let wv = sess.p(w);
            let loss = sess.tape.mse(wv, &target);
            last = sess.tape.scalar(loss);
            first.get_or_insert(last);
            let grads = sess.grads(loss);
            opt.step(&mut params, &grads);
        }
        assert!(last < 0.01 * first.unwrap(), "loss {last} did not drop");
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut params = ParamSet::<f64>::new();
        let mut init = Init::new(6);
        let w = params.register("w", init.glorot(2, 2));
        let mut sess = Session::new(&params);
        let a = sess.p(w);
        let b = sess.p(w);
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = Init::new(9);
        let mut b = Init::new(9);
        assert_eq!(a.glorot::<f64>(3, 3), b.glorot::<f64>(3, 3));
        let mut c = Init::new(10);
        assert_ne!(a.glorot::<f64>(3, 3), c.glorot::<f64>(3, 3));
    }
}
