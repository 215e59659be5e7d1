//! Posterior vectors, per-class grouping into senone matrices, and the
//! two-decimal storage rule for soft targets.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::rng::seeded;

/// Tolerance on `Σ p = 1` for a valid posterior.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default floor applied before taking logarithms.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Default decimal places kept when storing soft targets.
pub const DEFAULT_DECIMALS: u32 = 2;

/// Default column cap per class matrix.
pub const DEFAULT_CLASS_CAP: usize = 10_000;

/// A point on the probability simplex over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PosteriorVector {
    probs: Vec<f64>,
}

impl PosteriorVector {
    /// Validates an already-normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return invalid("posterior must have at least one class");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return invalid("posterior entries must be finite and non-negative");
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return invalid(format!("posterior sums to {sum}, not 1"));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, class_count: usize) -> Result<Self> {
        if class >= class_count {
            return invalid(format!("class {class} out of range for K={class_count}"));
        }
        let mut probs = vec![0.0; class_count];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(class_count: usize) -> Self {
        Self {
            probs: vec![1.0 / class_count as f64; class_count],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!(Self::new(probs.clone()).is_ok());
        Self { probs }
    }
}

impl AsRef<[f64]> for PosteriorVector {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

/// Divides a non-negative vector by its sum.
pub fn make_posterior(raw: &[f64]) -> Result<PosteriorVector> {
    if raw.is_empty() {
        return invalid("make_posterior: empty vector");
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid("make_posterior: entries must be finite and non-negative");
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return invalid("make_posterior: all entries are zero");
    }
    let mut probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    // a second pass absorbs the division round-off
    let resum: f64 = probs.iter().sum();
    if resum != 1.0 {
        probs.iter_mut().for_each(|p| *p /= resum);
    }
    PosteriorVector::new(probs)
}

/// Frame-level class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    labels: Vec<u32>,
}

impl Alignment {
    pub fn new(labels: Vec<u32>, class_count: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| **l as usize >= class_count) {
            return invalid(format!("label {bad} out of range for K={class_count}"));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, t: usize) -> usize {
        self.labels[t] as usize
    }
}

/// Posteriors aligned to one class, stacked as columns of a `K × N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SenoneMatrix {
    pub class_id: usize,
    columns: Matrix,
    /// Source frame of each column, ascending.
    pub frame_indices: Vec<usize>,
}

impl SenoneMatrix {
    pub fn from_posteriors(
        class_id: usize,
        posteriors: &[PosteriorVector],
        frame_indices: Vec<usize>,
    ) -> Result<Self> {
        if posteriors.len() != frame_indices.len() {
            return invalid("senone matrix: frame index count mismatch");
        }
        let k = posteriors.first().map_or(0, PosteriorVector::class_count);
        if posteriors.iter().any(|p| p.class_count() != k) {
            return invalid("senone matrix: posteriors disagree on K");
        }
        let cols: Vec<Vec<f64>> = posteriors.iter().map(|p| p.probs.clone()).collect();
        let columns = if cols.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_columns(&cols)?
        };
        Ok(Self {
            class_id,
            columns,
            frame_indices,
        })
    }

    pub fn class_count(&self) -> usize {
        self.columns.rows()
    }

    /// Number of stacked posteriors.
    pub fn len(&self) -> usize {
        self.columns.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.columns
    }

    pub fn column(&self, j: usize) -> PosteriorVector {
        PosteriorVector {
            probs: self.columns.col(j),
        }
    }

    pub fn posteriors(&self) -> Vec<PosteriorVector> {
        (0..self.len()).map(|j| self.column(j)).collect()
    }
}

/// Groups posteriors by aligned class. A class with more than `cap` frames
/// keeps a seeded uniform subsample of `cap` of them, in frame order.
pub fn group_by_class(
    posteriors: &[PosteriorVector],
    align: &Alignment,
    cap: usize,
    seed: u64,
) -> Result<BTreeMap<usize, SenoneMatrix>> {
    if posteriors.len() != align.len() {
        return invalid(format!(
            "group_by_class: {} posteriors vs {} labels",
            posteriors.len(),
            align.len()
        ));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in 0..align.len() {
        members.entry(align.get(t)).or_default().push(t);
    }
    let mut out = BTreeMap::new();
    for (class, frames) in members {
        let kept = if frames.len() > cap {
            let mut rng = seeded(seed, class as u64);
            let mut picked: Vec<usize> = sample(&mut rng, frames.len(), cap)
                .into_iter()
                .map(|i| frames[i])
                .collect();
            picked.sort_unstable();
            picked
        } else {
            frames
        };
        if kept.is_empty() {
            continue;
        }
        let cols: Vec<PosteriorVector> = kept.iter().map(|&t| posteriors[t].clone()).collect();
        out.insert(class, SenoneMatrix::from_posteriors(class, &cols, kept)?);
    }
    Ok(out)
}

/// Rounds every entry half away from zero to `decimals` places, then
/// renormalizes. If everything rounds to zero the largest original entry is
/// set to `10^-decimals` first.
pub fn quantize_store(p: &PosteriorVector, decimals: u32) -> Result<PosteriorVector> {
    if decimals == 0 {
        return invalid("quantize_store: decimals must be at least 1");
    }
    let scale = 10f64.powi(decimals as i32);
    let mut rounded: Vec<f64> = p
        .probs
        .iter()
        .map(|v| (v * scale).round() / scale)
        .collect();
    if rounded.iter().all(|v| *v == 0.0) {
        rounded[p.argmax()] = 1.0 / scale;
    }
    make_posterior(&rounded)
}

/// Componentwise `ln(max(p, eps))`.
pub fn log_floor(p: &PosteriorVector, eps: f64) -> Vec<f64> {
    p.probs.iter().map(|v| v.max(eps).ln()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> PosteriorVector {
        make_posterior(v).unwrap()
    }

    #[test]
    fn make_posterior_examples() {
        assert_eq!(pv(&[1.0, 1.0, 1.0, 1.0]).probs(), &[0.25; 4]);
        assert_eq!(pv(&[2.0, 0.0, 0.0]).probs(), &[1.0, 0.0, 0.0]);
        // 1/4, 3/4
        assert_eq!(pv(&[1.0, 3.0]).probs(), &[0.25, 0.75]);
    }

    #[test]
    fn make_posterior_rejects_zero_and_negative() {
        assert!(make_posterior(&[0.0, 0.0]).is_err());
        assert!(make_posterior(&[1.0, -0.1]).is_err());
        assert!(make_posterior(&[]).is_err());
    }

    #[test]
    fn group_by_class_examples() {
        let ps = vec![pv(&[1.0, 2.0]), pv(&[2.0, 1.0]), pv(&[1.0, 1.0])];
        let align = Alignment::new(vec![0, 1, 0], 2).unwrap();
        let groups = group_by_class(&ps, &align, 10, 7).unwrap();
        assert_eq!(groups[&0].len(), 2);
        assert_eq!(groups[&1].len(), 1);
        assert_eq!(groups[&0].frame_indices, vec![0, 2]);
        assert_eq!(groups[&0].column(1), ps[2]);

        let five: Vec<_> = (1..=5).map(|i| pv(&[i as f64, 1.0])).collect();
        let align = Alignment::new(vec![1; 5], 3).unwrap();
        let a = group_by_class(&five, &align, 2, 11).unwrap();
        let b = group_by_class(&five, &align, 2, 11).unwrap();
        assert_eq!(a[&1].len(), 2);
        assert!(!a.contains_key(&0) && !a.contains_key(&2));
        assert_eq!(a[&1], b[&1]);
    }

    #[test]
    fn group_by_class_rejects_length_mismatch() {
        let ps = vec![pv(&[1.0, 2.0])];
        let align = Alignment::new(vec![0, 1], 2).unwrap();
        assert!(group_by_class(&ps, &align, 10, 0).is_err());
    }

    #[test]
    fn alignment_rejects_out_of_range() {
        assert!(Alignment::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(
            quantize_store(&pv(&[0.5, 0.5]), 2).unwrap().probs(),
            &[0.5, 0.5]
        );
        let q = quantize_store(&pv(&[1.0, 2.0]), 2).unwrap();
        // round → (0.33, 0.67), sum 1.00
        assert!((q.probs()[0] - 0.33).abs() < 1e-12);
        assert!((q.probs()[1] - 0.67).abs() < 1e-12);
        let q = quantize_store(&pv(&[0.004, 0.996]), 2).unwrap();
        assert_eq!(q.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn quantize_all_rounding_to_zero_keeps_argmax() {
        let p = PosteriorVector::uniform(400);
        let q = quantize_store(&p, 2).unwrap();
        assert_eq!(q.probs()[0], 1.0);
        assert_eq!(q.probs().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn quantize_rejects_zero_decimals() {
        assert!(quantize_store(&pv(&[1.0]), 0).is_err());
    }

    #[test]
    fn log_floor_examples() {
        let l = log_floor(&pv(&[1.0, 0.0]), 1e-8);
        assert_eq!(l, vec![0.0, 1e-8f64.ln()]);
        let l = log_floor(&PosteriorVector::uniform(4), 1e-8);
        assert!(l.iter().all(|v| *v == 0.25f64.ln()));
        let l = log_floor(&pv(&[0.5, 0.5]), 1e-8);
        assert_eq!(l, vec![0.5f64.ln(), 0.5f64.ln()]);
    }

    proptest! {
        #[test]
        fn quantize_is_valid_and_nearly_idempotent(
            raw in prop::collection::vec(0.0f64..10.0, 1..12),
            decimals in 1u32..5,
        ) {
            prop_assume!(raw.iter().any(|v| *v > 0.0));
            let p = make_posterior(&raw).unwrap();
            let q = quantize_store(&p, decimals).unwrap();
            prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(q.probs().iter().all(|v| *v >= 0.0));
            let qq = quantize_store(&q, decimals).unwrap();
            let step = 10f64.powi(-(decimals as i32));
            for (a, b) in q.probs().iter().zip(qq.probs()) {
                prop_assert!((a - b).abs() <= step + 1e-12);
            }
        }

        #[test]
        fn grouping_partitions_frames(
            labels in prop::collection::vec(0u32..4, 1..60),
            cap in 1usize..20,
            seed in any::<u64>(),
        ) {
            let ps: Vec<_> = labels
                .iter()
                .enumerate()
                .map(|(t, l)| make_posterior(&[1.0 + t as f64, 1.0 + *l as f64, 0.5, 2.0]).unwrap())
                .collect();
            let align = Alignment::new(labels.clone(), 4).unwrap();
            let groups = group_by_class(&ps, &align, cap, seed).unwrap();
            let total: usize = groups.values().map(SenoneMatrix::len).sum();
            prop_assert!(total <= labels.len());
            for (class, m) in &groups {
                prop_assert!(m.len() <= cap);
                for (j, &t) in m.frame_indices.iter().enumerate() {
                    prop_assert_eq!(labels[t] as usize, *class);
                    prop_assert_eq!(&m.column(j), &ps[t]);
                }
            }
        }
    }
}
