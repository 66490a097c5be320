//! Prompt relevance from cross-attention logits.
//!
//! Each patch scores the maximum of its row of `Q Kᵀ` over text tokens.
//! Scores are min-max normalized per map and thresholded into relevant and
//! irrelevant patch sets.

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

use crate::backend::{Modality, ProbeData};
use crate::error::{Error, Result};
use crate::rng::Branch;

/// Normalized relevance scores in `[0, 1]`, one per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub scores: Array1<f64>,
    /// Set when the raw scores were constant and normalization fell back to zeros.
    pub degenerate: bool,
    pub layers: Vec<String>,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ThresholdConfig {
    pub tau_a: f64,
    pub tau_v: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { tau_a: 0.8, tau_v: 0.8 }
    }
}

/// Relevant (`positive`) and irrelevant (`negative`) patch indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct PatchIndexSets {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub modality: Option<Modality>,
    pub branch: Option<Branch>,
}

/// Row-wise maximum of a logits matrix.
pub fn row_max(logits: &Array2<f64>) -> Array1<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
        .collect()
}

/// Min-max normalization; a constant input maps to all zeros and reports
/// `true` as the degenerate flag.
pub fn minmax(raw: ArrayView1<'_, f64>) -> (Array1<f64>, bool) {
    let min = raw.fold(f64::INFINITY, |m, &v| m.min(v));
    let max = raw.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let range = max - min;
    if !(range > 0.0) || !range.is_finite() {
        return (Array1::zeros(raw.len()), true);
    }
    (raw.mapv(|v| ((v - min) / range).clamp(0.0, 1.0)), false)
}

/// Raw per-patch scores. A single layer yields its row maxima; several
/// layers are averaged after normalizing each one.
pub fn relevance_scores(probes: &ProbeData) -> Result<Array1<f64>> {
    let first = probes
        .layers
        .first()
        .ok_or_else(|| Error::Backend("relevance needs at least one probed layer".into()))?;
    if probes.layers.len() == 1 {
        return Ok(row_max(&first.logits));
    }
    let n = first.logits.nrows();
    let mut acc = Array1::zeros(n);
    for layer in &probes.layers {
        if layer.logits.nrows() != n {
            return Err(Error::Shape {
                context: "relevance layer aggregation",
                expected: vec![n],
                found: vec![layer.logits.nrows()],
            });
        }
        acc += &minmax(row_max(&layer.logits).view()).0;
    }
    Ok(acc / probes.layers.len() as f64)
}

pub fn minmax_normalize(raw: ArrayView1<'_, f64>, branch: Branch) -> Result<RelevanceMap> {
    if raw.is_empty() {
        return Err(Error::config("relevance", "cannot normalize an empty score vector"));
    }
    let (scores, degenerate) = minmax(raw);
    if degenerate {
        log::warn!("constant relevance scores on the {branch:?} branch; no patch marked relevant");
    }
    Ok(RelevanceMap {
        scores,
        degenerate,
        layers: Vec::new(),
        branch,
    })
}

/// Relevance map for one branch's probes.
pub fn relevance_map(probes: &ProbeData, branch: Branch) -> Result<RelevanceMap> {
    let raw = relevance_scores(probes)?;
    let mut map = minmax_normalize(raw.view(), branch)?;
    map.layers = probes.layers.iter().map(|l| l.layer.clone()).collect();
    Ok(map)
}

/// `I⁺ = {i : s_i > τ}`, `I⁻ = {i : s_i ≤ τ}`.
pub fn threshold_patches(map: &RelevanceMap, tau: f64) -> Result<PatchIndexSets> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config("tau", format!("threshold {tau} outside [0, 1]")));
    }
    let (positive, negative): (Vec<usize>, Vec<usize>) = (0..map.scores.len()).partition(|&i| map.scores[i] > tau);
    Ok(PatchIndexSets {
        positive,
        negative,
        modality: None,
        branch: Some(map.branch),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::LayerProbe;
    use ndarray::array;
    use proptest::prelude::*;

    fn map(scores: Array1<f64>) -> RelevanceMap {
        RelevanceMap {
            scores,
            degenerate: false,
            layers: vec![],
            branch: Branch::Target,
        }
    }

    fn probes(logits: Array2<f64>) -> ProbeData {
        let (n, k) = logits.dim();
        ProbeData {
            layers: vec![LayerProbe {
                layer: "l0".into(),
                queries: Array2::zeros((n, 1)),
                keys: Array2::zeros((k, 1)),
                attention: Array2::zeros((n, k)),
                hidden: Array2::zeros((n, 1)),
                logits,
            }],
        }
    }

    #[test]
    fn row_max_scores() {
        assert_eq!(relevance_scores(&probes(array![[1.0, 2.0], [3.0, 0.0]])).unwrap(), array![2.0, 3.0]);
        assert_eq!(relevance_scores(&probes(array![[0.5], [-1.0]])).unwrap(), array![0.5, -1.0]);
        assert!(relevance_scores(&ProbeData::default()).is_err());
    }

    #[test]
    fn multi_layer_mean_of_normalized() {
        let mut p = probes(array![[1.0, 2.0], [3.0, 0.0], [0.0, 0.0]]);
        let mut second = p.layers[0].clone();
        second.logits = array![[10.0], [0.0], [5.0]];
        p.layers.push(second);
        // layer 0 raw [2,3,0] -> [2/3, 1, 0]; layer 1 raw [10,0,5] -> [1, 0, 0.5]
        let s = relevance_scores(&p).unwrap();
        let expected = array![(2.0 / 3.0 + 1.0) / 2.0, 0.5, 0.25];
        for (a, b) in s.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_examples() {
        let n = |v: Array1<f64>| minmax_normalize(v.view(), Branch::Target).unwrap();
        assert_eq!(n(array![2.0, 4.0, 6.0]).scores, array![0.0, 0.5, 1.0]);
        let d = n(array![3.0, 3.0, 3.0]);
        assert_eq!(d.scores, array![0.0, 0.0, 0.0]);
        assert!(d.degenerate);
        let s = n(array![0.1, 0.5, 0.9]).scores;
        assert!((s[1] - 0.5).abs() < 1e-12 && s[0] == 0.0 && s[2] == 1.0);
    }

    #[test]
    fn threshold_examples() {
        let sets = threshold_patches(&map(array![0.9, 0.5, 0.85]), 0.8).unwrap();
        assert_eq!(sets.positive, vec![0, 2]);
        assert_eq!(sets.negative, vec![1]);
        let tie = threshold_patches(&map(array![0.8]), 0.8).unwrap();
        assert!(tie.positive.is_empty());
        assert_eq!(tie.negative, vec![0]);
        assert!(threshold_patches(&map(array![0.8]), 1.2).is_err());
        assert_eq!(ThresholdConfig::default(), ThresholdConfig { tau_a: 0.8, tau_v: 0.8 });
    }

    proptest! {
        #[test]
        fn affine_invariance(v in proptest::collection::vec(-100.0f64..100.0, 2..32), a in 0.01f64..50.0, b in -50.0f64..50.0) {
            let x = Array1::from(v);
            let (base, degenerate) = minmax(x.view());
            prop_assume!(!degenerate);
            let (moved, _) = minmax(x.mapv(|v| a * v + b).view());
            for (p, q) in base.iter().zip(moved.iter()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn partition_and_monotone(v in proptest::collection::vec(0.0f64..1.0, 1..32), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let m = map(Array1::from(v.clone()));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = threshold_patches(&m, lo).unwrap();
            let b = threshold_patches(&m, hi).unwrap();
            let mut all: Vec<usize> = a.positive.iter().chain(&a.negative).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..v.len()).collect::<Vec<_>>());
            prop_assert!(b.positive.iter().all(|i| a.positive.contains(i)));
        }
    }
}
