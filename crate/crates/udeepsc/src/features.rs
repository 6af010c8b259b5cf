//! Core domain types: feature sequences with per-row modality tags, task
//! descriptions, channel state, and exit configuration.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

/// Source modality of a feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
    Speech,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Speech];

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Speech => "speech",
        }
    }
}

/// A sequence of N feature vectors of dimension E, the unit that flows
/// through encoders, channel, and decoder.
///
/// Modality tags travel with the rows as run-length spans so the receiver can
/// route each row to the correct sub-codebook after concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T: Scalar> {
    values: Array2<T>,
    spans: Vec<(Modality, usize)>,
}

impl<T: Scalar> FeatureSequence<T> {
    /// Single-modality sequence. N >= 1, E >= 1, finite entries.
    pub fn new(values: Array2<T>, modality: Modality) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "feature sequence must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(
                "feature sequence contains non-finite entries".into(),
            ));
        }
        let n = values.nrows();
        Ok(FeatureSequence {
            values,
            spans: vec![(modality, n)],
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }

    /// Run-length modality spans, in row order.
    pub fn spans(&self) -> &[(Modality, usize)] {
        &self.spans
    }

    /// Modality of row `i`.
    pub fn modality_of(&self, i: usize) -> Modality {
        let mut at = 0;
        for &(m, len) in &self.spans {
            at += len;
            if i < at {
                return m;
            }
        }
        panic!("row {i} out of range {}", self.rows());
    }

    /// Per-row modality tags, expanded.
    pub fn row_modalities(&self) -> Vec<Modality> {
        let mut out = Vec::with_capacity(self.rows());
        for &(m, len) in &self.spans {
            out.extend(std::iter::repeat_n(m, len));
        }
        out
    }

    /// The single modality if the sequence is uniform.
    pub fn uniform_modality(&self) -> Option<Modality> {
        match self.spans.as_slice() {
            [(m, _)] => Some(*m),
            _ => None,
        }
    }

    /// Slice rows `start..start+len`, keeping the covered modality tags.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows() || len == 0 {
            return Err(Error::OutOfRange(format!(
                "slice {start}..{} of {} rows",
                start + len,
                self.rows()
            )));
        }
        let values = self
            .values
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let mods = self.row_modalities();
        let mut spans: Vec<(Modality, usize)> = Vec::new();
        for m in &mods[start..start + len] {
            match spans.last_mut() {
                Some((lm, n)) if lm == m => *n += 1,
                _ => spans.push((*m, 1)),
            }
        }
        Ok(FeatureSequence { values, spans })
    }

    /// Replace the value matrix, keeping tags. Shape must match.
    pub fn with_values(&self, values: Array2<T>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::Dimension(format!(
                "replacement shape {:?} != {:?}",
                values.dim(),
                self.values.dim()
            )));
        }
        Ok(FeatureSequence {
            values,
            spans: self.spans.clone(),
        })
    }
}

/// Concatenate encoded per-modality features into one sequence, preserving
/// row order and per-row modality tags.
pub fn concat_encoded<T: Scalar>(parts: &[FeatureSequence<T>]) -> Result<FeatureSequence<T>> {
    if parts.is_empty() {
        return Err(Error::Usage("concat_encoded needs at least one part".into()));
    }
    let dim = parts[0].dim();
    for (i, p) in parts.iter().enumerate() {
        if p.dim() != dim {
            return Err(Error::Dimension(format!(
                "part {i} has dimension {} but part 0 has {dim}",
                p.dim()
            )));
        }
    }
    let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
    let values =
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    let mut spans: Vec<(Modality, usize)> = Vec::new();
    for p in parts {
        for &(m, len) in &p.spans {
            match spans.last_mut() {
                Some((lm, n)) if *lm == m => *n += len,
                _ => spans.push((m, len)),
            }
        }
    }
    Ok(FeatureSequence { values, spans })
}

/// Task kind: drives loss, metric, and head shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classification,
    Reconstruction,
}

/// Description of one task the unified model serves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub modalities: Vec<Modality>,
    pub kind: TaskKind,
    /// Classes for classification tasks.
    pub num_classes: usize,
    /// Output shape (rows, cols) for reconstruction tasks.
    pub output_shape: (usize, usize),
    /// Per-exit loss weights; all positive.
    pub loss_weights: Vec<f64>,
    pub dataset_size: usize,
}

impl TaskSpec {
    pub fn validate(&self, n_exits: usize) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Usage(format!(
                "task {} has no modalities",
                self.task_id
            )));
        }
        if self.loss_weights.len() != n_exits {
            return Err(Error::Usage(format!(
                "task {} has {} loss weights for {} exits",
                self.task_id,
                self.loss_weights.len(),
                n_exits
            )));
        }
        if self.loss_weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::Usage(format!(
                "task {} has a non-positive loss weight",
                self.task_id
            )));
        }
        Ok(())
    }

    pub fn uses(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }
}

/// Channel state: noise variance, SNR, and mean symbol power.
///
/// Invariant: `sigma2 = power / 10^(snr_db/10)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub sigma2: f64,
    pub snr_db: f64,
    pub power: f64,
}

impl ChannelState {
    /// State for a given SNR at unit mean symbol power.
    pub fn from_snr_db(snr_db: f64) -> Self {
        ChannelState {
            sigma2: crate::channel::snr_to_sigma2(snr_db, 1.0).expect("unit power is positive"),
            snr_db,
            power: 1.0,
        }
    }
}

/// Early-exit configuration: certainty threshold and decoder depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitConfig {
    pub threshold: f64,
    pub max_layers: usize,
}

impl ExitConfig {
    pub fn new(threshold: f64, max_layers: usize) -> Result<Self> {
        if !(0.0 < threshold && threshold < 1.0) {
            return Err(Error::Domain(format!(
                "exit threshold must be in (0,1), got {threshold}"
            )));
        }
        if max_layers == 0 {
            return Err(Error::Domain("decoder needs at least one layer".into()));
        }
        Ok(ExitConfig {
            threshold,
            max_layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn seq(rows: usize, cols: usize, m: Modality, fill: f64) -> FeatureSequence<f64> {
        FeatureSequence::new(Array2::from_elem((rows, cols), fill), m).unwrap()
    }

    #[test]
    fn concat_adds_row_counts_and_keeps_tags() {
        let img = seq(16, 8, Modality::Image, 1.0);
        let txt = seq(8, 8, Modality::Text, 2.0);
        let cat = concat_encoded(&[img, txt]).unwrap();
        assert_eq!(cat.rows(), 24);
        assert_eq!(cat.spans(), &[(Modality::Image, 16), (Modality::Text, 8)]);
        assert_eq!(cat.modality_of(0), Modality::Image);
        assert_eq!(cat.modality_of(16), Modality::Text);
    }

    #[test]
    fn concat_singleton_is_identity() {
        let img = seq(16, 4, Modality::Image, 0.5);
        let cat = concat_encoded(std::slice::from_ref(&img)).unwrap();
        assert_eq!(cat, img);
    }

    #[test]
    fn concat_rejects_mismatched_dims_and_empty_lists() {
        let a = seq(4, 8, Modality::Image, 0.0);
        let b = seq(4, 16, Modality::Text, 0.0);
        assert!(matches!(concat_encoded(&[a, b]), Err(Error::Dimension(_))));
        assert!(matches!(concat_encoded::<f64>(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(FeatureSequence::new(Array2::<f64>::zeros((0, 4)), Modality::Image).is_err());
        let mut bad = Array2::from_elem((2, 2), 1.0);
        bad[[0, 0]] = f64::NAN;
        assert!(FeatureSequence::new(bad, Modality::Image).is_err());
    }

    #[test]
    fn channel_state_invariant() {
        let st = ChannelState::from_snr_db(10.0);
        assert!((st.sigma2 - st.power / 10f64.powf(st.snr_db / 10.0)).abs() < 1e-12);
    }

    #[test]
    fn exit_config_bounds() {
        assert!(ExitConfig::new(0.8, 4).is_ok());
        assert!(ExitConfig::new(0.0, 4).is_err());
        assert!(ExitConfig::new(1.0, 4).is_err());
        assert!(ExitConfig::new(0.5, 0).is_err());
    }

    proptest! {
        /// Row content of concat is associative, and slicing by recorded part
        /// lengths recovers the inputs exactly.
        #[test]
        fn concat_associative_and_sliceable(
            na in 1usize..6, nb in 1usize..6, nc in 1usize..6, cols in 1usize..5,
            fa in -3.0f64..3.0, fb in -3.0f64..3.0, fc in -3.0f64..3.0,
        ) {
            let a = seq(na, cols, Modality::Image, fa);
            let b = seq(nb, cols, Modality::Text, fb);
            let c = seq(nc, cols, Modality::Speech, fc);
            let ab = concat_encoded(&[a.clone(), b.clone()]).unwrap();
            let ab_c = concat_encoded(&[ab, c.clone()]).unwrap();
            let abc = concat_encoded(&[a.clone(), b.clone(), c.clone()]).unwrap();
            prop_assert_eq!(&ab_c, &abc);

            let mut at = 0;
            for part in [&a, &b, &c] {
                let back = abc.slice_rows(at, part.rows()).unwrap();
                prop_assert_eq!(&back, part);
                at += part.rows();
            }
        }
    }
}
