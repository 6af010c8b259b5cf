//! Unified vector-quantization codebook: three contiguous sub-codebooks
//! (image / text / speech), nearest-neighbor quantization with a
//! straight-through gradient, the two-term stop-gradient training loss, and
//! the domain-adaptation similarity loss that pulls task features into a
//! shared domain.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Modality};
use crate::scalar::{s, Scalar};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::ops::Range;

/// Unified codebook: K x D basis matrix split into contiguous per-modality
/// index ranges `0..K_I`, `K_I..K_I+K_T`, `K_I+K_T..K`.
///
/// Basis rows are initialized standard-normal so they live on the same scale
/// as the layer-normalized encoder features they quantize; a smaller init
/// leaves almost every codeword dead from the first step (and there are no
/// resets).
#[derive(Debug, Clone)]
pub struct UnifiedCodebook<T: Scalar> {
    basis: Array2<T>,
    sizes: (usize, usize, usize),
}

impl<T: Scalar> UnifiedCodebook<T> {
    /// Random initialization: i.i.d. standard-normal rows.
    pub fn init(sizes: (usize, usize, usize), dim: usize, seed: u64) -> Result<Self> {
        let (ki, kt, ks) = sizes;
        if ki == 0 || kt == 0 || ks == 0 || dim == 0 {
            return Err(Error::Usage(
                "every sub-codebook needs at least one basis vector".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = ki + kt + ks;
        let mut basis = Array2::zeros((k, dim));
        for r in 0..k {
            for c in 0..dim {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                basis[[r, c]] = s::<T>(z);
            }
        }
        Ok(UnifiedCodebook { basis, sizes })
    }

    pub fn from_parts(basis: Array2<T>, sizes: (usize, usize, usize)) -> Result<Self> {
        let (ki, kt, ks) = sizes;
        if ki + kt + ks != basis.nrows() {
            return Err(Error::Dimension(format!(
                "sub-codebook sizes {:?} do not sum to {} rows",
                sizes,
                basis.nrows()
            )));
        }
        if ki == 0 || kt == 0 || ks == 0 {
            return Err(Error::Usage(
                "every sub-codebook needs at least one basis vector".into(),
            ));
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("codebook has non-finite entries".into()));
        }
        Ok(UnifiedCodebook { basis, sizes })
    }

    pub fn len(&self) -> usize {
        self.basis.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &Array2<T> {
        &self.basis
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        self.sizes
    }

    /// Index range of one modality's sub-codebook.
    pub fn range(&self, m: Modality) -> Range<usize> {
        let (ki, kt, _ks) = self.sizes;
        match m {
            Modality::Image => 0..ki,
            Modality::Text => ki..ki + kt,
            Modality::Speech => ki + kt..self.len(),
        }
    }
}

/// Result of quantizing a sequence: selected row ids and the basis vectors.
#[derive(Debug, Clone)]
pub struct QuantizationResult<T: Scalar> {
    pub indices: Vec<usize>,
    pub z_vq: Array2<T>,
}

/// Nearest basis vector per row, each row searching only the given index
/// range. Ties break to the lowest index.
///
/// Uses the expansion |z - e|^2 = |z|^2 - 2 z.e + |e|^2; |z|^2 is constant
/// per row and dropped.
pub fn quantize_rows<T: Scalar>(
    values: &Array2<T>,
    ranges: &[Range<usize>],
    basis: &Array2<T>,
) -> Result<QuantizationResult<T>> {
    if values.ncols() != basis.ncols() {
        return Err(Error::Dimension(format!(
            "feature dim {} != codebook dim {}",
            values.ncols(),
            basis.ncols()
        )));
    }
    if ranges.len() != values.nrows() {
        return Err(Error::Usage(format!(
            "{} ranges for {} rows",
            ranges.len(),
            values.nrows()
        )));
    }
    let k = basis.nrows();
    let norms: Vec<T> = (0..k)
        .map(|j| basis.row(j).iter().map(|v| *v * *v).sum())
        .collect();
    // scores = -2 z e^T, one row per input row
    let scores = values.dot(&basis.t());
    let two = s::<T>(2.0);
    let mut indices = Vec::with_capacity(values.nrows());
    let mut z_vq = Array2::zeros(values.dim());
    for (r, range) in ranges.iter().enumerate() {
        if range.start >= range.end || range.end > k {
            return Err(Error::OutOfRange(format!(
                "row {r}: sub-codebook range {range:?} outside 0..{k}"
            )));
        }
        let mut best = range.start;
        let mut best_score = norms[range.start] - two * scores[[r, range.start]];
        for j in range.start + 1..range.end {
            let score = norms[j] - two * scores[[r, j]];
            if score < best_score {
                best_score = score;
                best = j;
            }
        }
        indices.push(best);
        z_vq.row_mut(r).assign(&basis.row(best));
    }
    Ok(QuantizationResult { indices, z_vq })
}

/// Quantize a tagged sequence against its per-modality sub-codebooks.
pub fn quantize<T: Scalar>(
    z_en: &FeatureSequence<T>,
    book: &UnifiedCodebook<T>,
) -> Result<QuantizationResult<T>> {
    let ranges: Vec<Range<usize>> = z_en
        .row_modalities()
        .into_iter()
        .map(|m| book.range(m))
        .collect();
    quantize_rows(z_en.values(), &ranges, book.basis())
}

/// Basis vectors for a list of transmitted indices, in order.
pub fn lookup<T: Scalar>(
    indices: &[usize],
    book: &UnifiedCodebook<T>,
) -> Result<Array2<T>> {
    let mut out = Array2::zeros((indices.len(), book.dim()));
    for (r, &idx) in indices.iter().enumerate() {
        if idx >= book.len() {
            return Err(Error::OutOfRange(format!(
                "index {idx} outside codebook of {} rows",
                book.len()
            )));
        }
        out.row_mut(r).assign(&book.basis().row(idx));
    }
    Ok(out)
}

/// How many times each codeword was selected; reporting only, no resets.
pub fn usage_counts(indices: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i] += 1;
    }
    counts
}

/// Similarity-based domain adaptation loss between two feature matrices:
/// -|E_A E_B^T|_F / (N_A N_B). More similar features give a more negative
/// value; the normalization makes the magnitude batch-size invariant.
pub fn domain_adaptation_loss<T: Scalar>(e_a: &Array2<T>, e_b: &Array2<T>) -> Result<T> {
    if e_a.ncols() != e_b.ncols() {
        return Err(Error::Dimension(format!(
            "inner dims differ: {} vs {}",
            e_a.ncols(),
            e_b.ncols()
        )));
    }
    let prod = e_a.dot(&e_b.t());
    let frob = prod.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let denom = s::<T>((e_a.nrows() * e_b.nrows()) as f64);
    Ok(-frob / denom)
}

impl<T: Scalar> Tape<T> {
    /// Quantization straight-through: forward value is `z_vq`, gradient of
    /// anything downstream with respect to `z_en` is the identity
    /// pass-through.
    pub fn vq_straight_through(&mut self, z_en: Var, z_vq: &Array2<T>) -> Var {
        assert_eq!(self.value(z_en).dim(), z_vq.dim(), "straight-through shape mismatch");
        let z = self.constant(z_vq.clone());
        // out = z_vq + (z_en - stop_grad(z_en)): value z_vq, gradient to z_en.
        let frozen = self.constant(self.value(z_en).clone());
        let delta = self.sub(z_en, frozen);
        self.add(z, delta)
    }

    /// Two-term codebook loss, summed per row and averaged over rows:
    /// |ng(z_en) - e|^2 + beta |z_en - ng(e)|^2. The first term reaches only
    /// the selected codebook rows, the second only the encoder output.
    pub fn vq_codebook_loss(
        &mut self,
        z_en: Var,
        book: Var,
        indices: &[usize],
        beta: T,
    ) -> Var {
        assert!(beta >= T::zero());
        let frozen_e = {
            let bv = self.value(book);
            let mut sel = Array2::zeros(self.value(z_en).dim());
            for (r, &idx) in indices.iter().enumerate() {
                sel.row_mut(r).assign(&bv.row(idx));
            }
            self.constant(sel)
        };
        // commitment term: beta * mean_row |z_en - ng(e)|^2
        let diff = self.sub(z_en, frozen_e);
        let sq = self.mul(diff, diff);
        let per_row_sum = self.sum(sq);
        let n = s::<T>(indices.len() as f64);
        let commit = self.scale(per_row_sum, beta / n);
        // codebook term: mean_row |ng(z_en) - e_sel|^2 via gathered rows
        let frozen_z = self.constant(self.value(z_en).clone());
        let gathered = self.embedding(book, indices);
        let diff2 = self.sub(frozen_z, gathered);
        let sq2 = self.mul(diff2, diff2);
        let sum2 = self.sum(sq2);
        let book_term = self.scale(sum2, T::one() / n);
        self.add(book_term, commit)
    }

    /// Codebook loss restricted to kept rows: dropped features are not
    /// transmitted, so neither the codebook nor the commitment term should
    /// train toward them. The mask is hard side information.
    pub fn vq_codebook_loss_masked(
        &mut self,
        z_en: Var,
        book: Var,
        indices: &[usize],
        beta: T,
        keep: &[bool],
    ) -> Var {
        assert_eq!(keep.len(), indices.len());
        let kept: Vec<usize> = (0..keep.len()).filter(|i| keep[*i]).collect();
        if kept.is_empty() {
            return self.constant(Array2::zeros((1, 1)));
        }
        if kept.len() == keep.len() {
            return self.vq_codebook_loss(z_en, book, indices, beta);
        }
        // gather kept rows of z_en, then reuse the dense loss
        let dim = self.value(z_en).ncols();
        let rows = self.value(z_en).nrows();
        let kept_rows = {
            let zv = self.value(z_en);
            let mut out = Array2::zeros((kept.len(), dim));
            for (r, &i) in kept.iter().enumerate() {
                out.row_mut(r).assign(&zv.row(i));
            }
            out
        };
        let kept_idx: Vec<usize> = kept.iter().map(|&i| indices[i]).collect();
        let kept_list = kept.clone();
        let gathered = {
            let z_kept = self.record(kept_rows, &[z_en], move |_, g, grads| {
                grads.accum_view(
                    z_en,
                    |gz| {
                        for (r, &i) in kept_list.iter().enumerate() {
                            let mut row = gz.row_mut(i);
                            row += &g.row(r);
                        }
                    },
                    (rows, dim),
                );
            });
            z_kept
        };
        self.vq_codebook_loss(gathered, book, &kept_idx, beta)
    }

    /// Tape version of the domain adaptation loss.
    pub fn domain_adaptation(&mut self, e_a: Var, e_b: Var) -> Var {
        let denom = s::<T>((self.value(e_a).nrows() * self.value(e_b).nrows()) as f64);
        let prod = self.matmul_bt(e_a, e_b);
        let frob = self.frobenius(prod);
        self.scale(frob, -T::one() / denom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use rand::prelude::*;

    /// Independent brute-force oracle: direct squared distances, first
    /// minimum wins.
    pub(crate) fn brute_force_nearest<T: Scalar>(
        row: &[T],
        range: Range<usize>,
        basis: &Array2<T>,
    ) -> usize {
        let mut best = range.start;
        let mut best_d = T::infinity();
        for j in range.clone() {
            let mut d = T::zero();
            for (c, v) in row.iter().enumerate() {
                let diff = *v - basis[[j, c]];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    #[test]
    fn quantize_basic_and_tie_rule() {
        let basis = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let book = UnifiedCodebook::from_parts(
            ndarray::concatenate(
                ndarray::Axis(0),
                &[basis.view(), arr2(&[[9.0, 9.0], [8.0, 8.0]]).view()],
            )
            .unwrap(),
            (2, 1, 1),
        )
        .unwrap();
        // (0.1, 0.2) is nearest to (0,0)
        let z = FeatureSequence::new(arr2(&[[0.1, 0.2]]), Modality::Image).unwrap();
        let q = quantize(&z, &book).unwrap();
        assert_eq!(q.indices, vec![0]);
        // exact match lands on its own index with distance zero
        let z = FeatureSequence::new(arr2(&[[1.0, 1.0]]), Modality::Image).unwrap();
        let q = quantize(&z, &book).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.z_vq, arr2(&[[1.0, 1.0]]));
        // equidistant -> lowest index
        let z = FeatureSequence::new(arr2(&[[0.5, 0.5]]), Modality::Image).unwrap();
        let q = quantize(&z, &book).unwrap();
        assert_eq!(q.indices, vec![0]);
    }

    #[test]
    fn quantize_respects_sub_codebook_ranges() {
        let book = UnifiedCodebook::<f64>::init((4, 3, 2), 5, 11).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for m in Modality::ALL {
            let v = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
            let z = FeatureSequence::new(v, m).unwrap();
            let q = quantize(&z, &book).unwrap();
            for &idx in &q.indices {
                assert!(book.range(m).contains(&idx), "{idx} escaped {m:?}");
            }
        }
    }

    #[test]
    fn quantize_matches_brute_force_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for trial in 0..20 {
            let ki = rng.gen_range(1..12);
            let kt = rng.gen_range(1..12);
            let ks = rng.gen_range(1..12);
            let dim = rng.gen_range(1..9);
            let book = UnifiedCodebook::<f64>::init((ki, kt, ks), dim, trial).unwrap();
            let mods = [Modality::Image, Modality::Text, Modality::Speech];
            let v = Array2::from_shape_fn((30, dim), |_| rng.gen_range(-2.0..2.0));
            let m = mods[rng.gen_range(0..3)];
            let z = FeatureSequence::new(v, m).unwrap();
            let q = quantize(&z, &book).unwrap();
            for (r, &idx) in q.indices.iter().enumerate() {
                let row: Vec<f64> = z.values().row(r).to_vec();
                let want = brute_force_nearest(&row, book.range(m), book.basis());
                assert_eq!(idx, want, "trial {trial}, row {r}");
            }
        }
    }

    #[test]
    fn lookup_roundtrip_and_bounds() {
        let book = UnifiedCodebook::<f64>::init((4, 4, 4), 6, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let v = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let z = FeatureSequence::new(v, Modality::Text).unwrap();
        let q = quantize(&z, &book).unwrap();
        let back = lookup(&q.indices, &book).unwrap();
        assert_eq!(back, q.z_vq);
        assert!(lookup(&[book.len()], &book).is_err());
        let empty = lookup::<f64>(&[], &book).unwrap();
        assert_eq!(empty.nrows(), 0);
    }

    #[test]
    fn domain_adaptation_hand_values() {
        // orthogonal rows -> 0
        let a = arr2(&[[1.0, 0.0]]);
        let b = arr2(&[[0.0, 1.0]]);
        assert_relative_eq!(domain_adaptation_loss(&a, &b).unwrap(), 0.0);
        // identity vs identity: -sqrt(2)/4
        let eye = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_relative_eq!(
            domain_adaptation_loss(&eye, &eye).unwrap(),
            -2f64.sqrt() / 4.0,
            max_relative = 1e-12
        );
        // positive homogeneity in either argument
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let e1 = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let e2 = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let base = domain_adaptation_loss(&e1, &e2).unwrap();
        let scaled = domain_adaptation_loss(&e1.mapv(|v| 3.0 * v), &e2).unwrap();
        assert_relative_eq!(scaled, 3.0 * base, max_relative = 1e-12);
        // more similar => more negative
        let same = domain_adaptation_loss(&eye, &eye).unwrap();
        let orth = domain_adaptation_loss(&eye, &arr2(&[[0.0, 1.0], [-1.0, 0.0]])).unwrap();
        assert!(same <= orth);
    }

    #[test]
    fn straight_through_value_and_identity_grad() {
        let mut tape = Tape::<f64>::new();
        let z_en = tape.leaf(arr2(&[[0.3, -0.2], [1.5, 0.8]]));
        let z_vq = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let out = tape.vq_straight_through(z_en, &z_vq);
        assert_eq!(tape.value(out), &z_vq);
        let loss = tape.sum(out);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(z_en).unwrap(), &Array2::from_elem((2, 2), 1.0));
    }

    #[test]
    fn straight_through_matches_finite_differences_on_value_surrogate() {
        // Tape gradient w.r.t. z_en must equal the finite-difference gradient
        // of the downstream loss with respect to the forwarded value.
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let z0 = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let z_vq = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));

        let downstream = |t: &mut Tape<f64>, x: Var| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            let y = t.tanh(y);
            t.mean(y)
        };

        let mut tape = Tape::new();
        let z_en = tape.leaf(z0.clone());
        let st = tape.vq_straight_through(z_en, &z_vq);
        let loss = downstream(&mut tape, st);
        let grads = tape.backward(loss);
        let got = grads.get(z_en).unwrap().clone();

        let h = 1e-6;
        for r in 0..3 {
            for c in 0..4 {
                let eval = |delta: f64| {
                    let mut v = z_vq.clone();
                    v[[r, c]] += delta;
                    let mut t = Tape::new();
                    let x = t.leaf(v);
                    let l = downstream(&mut t, x);
                    t.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - got[[r, c]]).abs() / fd.abs().max(1e-4) < 1e-4,
                    "({r},{c}): fd {fd} vs {}",
                    got[[r, c]]
                );
            }
        }
    }

    #[test]
    fn codebook_loss_hand_value_and_stop_gradients() {
        // z_en=(1,0), e=(0,0), beta=0.25 -> 1 + 0.25 = 1.25
        let mut tape = Tape::<f64>::new();
        let z_en = tape.leaf(arr2(&[[1.0, 0.0]]));
        let book = tape.leaf(arr2(&[[0.0, 0.0], [5.0, 5.0]]));
        let loss = tape.vq_codebook_loss(z_en, book, &[0], 0.25);
        assert_relative_eq!(tape.scalar(loss), 1.25);
        // zero when z_en equals the selected codeword
        let mut tape = Tape::<f64>::new();
        let z_en = tape.leaf(arr2(&[[5.0, 5.0]]));
        let book = tape.leaf(arr2(&[[0.0, 0.0], [5.0, 5.0]]));
        let loss = tape.vq_codebook_loss(z_en, book, &[1], 0.25);
        assert_relative_eq!(tape.scalar(loss), 0.0);

        // gradient structure: z_en grad comes only from the beta term,
        // codebook grad only from the first term
        let mut tape = Tape::<f64>::new();
        let z_en = tape.leaf(arr2(&[[1.0, 0.0]]));
        let book = tape.leaf(arr2(&[[0.2, -0.1], [5.0, 5.0]]));
        let loss = tape.vq_codebook_loss(z_en, book, &[0], 0.25);
        let grads = tape.backward(loss);
        // d/dz = 2 beta (z - e) = 0.5 * (0.8, 0.1)
        let gz = grads.get(z_en).unwrap();
        assert_relative_eq!(gz[[0, 0]], 0.5 * 0.8, max_relative = 1e-12);
        assert_relative_eq!(gz[[0, 1]], 0.5 * 0.1, max_relative = 1e-12);
        // d/de = 2 (e - z) on the selected row, zero elsewhere
        let gb = grads.get(book).unwrap();
        assert_relative_eq!(gb[[0, 0]], 2.0 * (0.2 - 1.0), max_relative = 1e-12);
        assert_relative_eq!(gb[[0, 1]], 2.0 * (-0.1 - 0.0), max_relative = 1e-12);
        assert_eq!(gb[[1, 0]], 0.0);
        assert_eq!(gb[[1, 1]], 0.0);
    }

    #[test]
    fn codebook_loss_z_grad_ignores_codebook_perturbation_direction() {
        // Perturbing e_sel must not change the *path* by which z_en gets its
        // gradient: it enters only through the beta commitment term.
        let z0 = arr2(&[[1.0, 0.5]]);
        let grad_for = |e: f64| {
            let mut tape = Tape::<f64>::new();
            let z_en = tape.leaf(z0.clone());
            let book = tape.leaf(arr2(&[[e, 0.0]]));
            let loss = tape.vq_codebook_loss(z_en, book, &[0], 0.25);
            let grads = tape.backward(loss);
            grads.get(z_en).unwrap().clone()
        };
        let g1 = grad_for(0.0);
        let g2 = grad_for(0.3);
        // beta * 2 * (z - e): changes exactly by beta*2*delta_e in column 0
        assert_relative_eq!(g1[[0, 0]] - g2[[0, 0]], 0.5 * 0.3, max_relative = 1e-9);
        assert_relative_eq!(g1[[0, 1]], g2[[0, 1]], max_relative = 1e-12);
    }

    #[test]
    fn domain_adaptation_tape_matches_plain() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let a = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let loss = tape.domain_adaptation(av, bv);
        assert_relative_eq!(
            tape.scalar(loss),
            domain_adaptation_loss(&a, &b).unwrap(),
            max_relative = 1e-12
        );
        // and it is differentiable toward both feature matrices
        let grads = tape.backward(loss);
        assert!(grads.get(av).unwrap().iter().any(|v| *v != 0.0));
        assert!(grads.get(bv).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn usage_counts_report() {
        let counts = usage_counts(&[0, 2, 2, 3], 5);
        assert_eq!(counts, vec![1, 0, 2, 1, 0]);
    }

    #[test]
    fn masked_codebook_loss_sees_only_kept_rows() {
        // two rows; only row 0 kept -> loss equals the single-row loss
        let mut tape = Tape::<f64>::new();
        let z_en = tape.leaf(arr2(&[[1.0, 0.0], [9.0, 9.0]]));
        let book = tape.leaf(arr2(&[[0.0, 0.0], [1.0, 1.0]]));
        let loss = tape.vq_codebook_loss_masked(z_en, book, &[0, 1], 0.25, &[true, false]);
        assert_relative_eq!(tape.scalar(loss), 1.25);
        let grads = tape.backward(loss);
        // dropped row contributes no gradient anywhere
        let gz = grads.get(z_en).unwrap();
        assert_eq!(gz[[1, 0]], 0.0);
        assert_eq!(gz[[1, 1]], 0.0);
        let gb = grads.get(book).unwrap();
        assert_eq!(gb[[1, 0]], 0.0);
        assert_eq!(gb[[1, 1]], 0.0);
        // all rows kept falls back to the dense path
        let mut tape = Tape::<f64>::new();
        let z_en = tape.leaf(arr2(&[[1.0, 0.0]]));
        let book = tape.leaf(arr2(&[[0.0, 0.0]]));
        let loss = tape.vq_codebook_loss_masked(z_en, book, &[0], 0.25, &[true]);
        assert_relative_eq!(tape.scalar(loss), 1.25);
    }
}
