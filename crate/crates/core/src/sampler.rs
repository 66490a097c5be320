//! Random selection of patch embeddings for the contrastive loss.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;

use crate::backend::Modality;
use crate::error::{Error, Result};
use crate::relevance::PatchIndexSets;
use crate::rng::{Branch, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Origin {
    pub modality: Modality,
    pub branch: Branch,
    pub polarity: Polarity,
}

/// Hidden-state rows gathered from a set of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `n × d`, row `k` taken from patch `source_indices[k]`.
    pub vectors: Array2<f64>,
    pub source_indices: Vec<usize>,
    pub origin: Origin,
}

impl EmbeddingBatch {
    pub fn empty(dim: usize, origin: Origin) -> Self {
        Self {
            vectors: Array2::zeros((0, dim)),
            source_indices: Vec::new(),
            origin,
        }
    }

    pub fn gather(hidden: ArrayView2<'_, f64>, indices: Vec<usize>, origin: Origin) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= hidden.nrows()) {
            return Err(Error::Shape {
                context: "embedding gather",
                expected: vec![hidden.nrows()],
                found: vec![bad],
            });
        }
        Ok(Self {
            vectors: hidden.select(Axis(0), &indices),
            source_indices: indices,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Keep the rows at `positions`, in the given order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select(Axis(0), positions),
            source_indices: positions.iter().map(|&p| self.source_indices[p]).collect(),
            origin: self.origin,
        }
    }
}

/// `⌈rate · n⌉`, tolerant of floating-point overshoot.
pub fn sample_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config("rate", format!("sampling rate {rate} outside (0, 1]")));
    }
    Ok(())
}

/// Uniform sample without replacement of `⌈rate·|pool|⌉` patches of `pool`.
pub fn sample_from<R: Rng + ?Sized>(
    hidden: ArrayView2<'_, f64>,
    pool: &[usize],
    rate: f64,
    rng: &mut R,
    origin: Origin,
) -> Result<EmbeddingBatch> {
    check_rate(rate)?;
    if pool.is_empty() {
        return Ok(EmbeddingBatch::empty(hidden.ncols(), origin));
    }
    let k = sample_count(rate, pool.len()).min(pool.len());
    let chosen = index::sample(rng, pool.len(), k).into_iter().map(|p| pool[p]).collect();
    EmbeddingBatch::gather(hidden, chosen, origin)
}

/// Relevant target patches.
pub fn sample_positive<R: Rng + ?Sized>(
    hidden: ArrayView2<'_, f64>,
    idx: &PatchIndexSets,
    rate: f64,
    rng: &mut R,
    modality: Modality,
) -> Result<EmbeddingBatch> {
    let origin = Origin {
        modality,
        branch: idx.branch.unwrap_or(Branch::Target),
        polarity: Polarity::Positive,
    };
    sample_from(hidden, &idx.positive, rate, rng, origin)
}

/// Irrelevant patches from both branches, each drawn from its own branch's
/// negative set. The source batch is drawn first.
pub fn sample_negative<R: Rng + ?Sized>(
    hidden_src: ArrayView2<'_, f64>,
    hidden_trg: ArrayView2<'_, f64>,
    idx_src: &PatchIndexSets,
    idx_trg: &PatchIndexSets,
    rate: f64,
    rng: &mut R,
    modality: Modality,
) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    let origin = |branch| Origin {
        modality,
        branch,
        polarity: Polarity::Negative,
    };
    let src = sample_from(hidden_src, &idx_src.negative, rate, rng, origin(Branch::Source))?;
    let trg = sample_from(hidden_trg, &idx_trg.negative, rate, rng, origin(Branch::Target))?;
    Ok((src, trg))
}

/// Truncate the longer batch to the shorter one's length by dropping rows
/// chosen uniformly at random. Survivors keep their order.
pub fn align_counts<R: Rng + ?Sized>(
    a: EmbeddingBatch,
    b: EmbeddingBatch,
    rng: &mut R,
) -> (EmbeddingBatch, EmbeddingBatch) {
    use std::cmp::Ordering;
    let shrink = |batch: EmbeddingBatch, keep: usize, rng: &mut R| {
        let mut kept = index::sample(rng, batch.len(), keep).into_vec();
        kept.sort_unstable();
        batch.select(&kept)
    };
    match a.len().cmp(&b.len()) {
        Ordering::Equal => (a, b),
        Ordering::Greater => {
            let n = b.len();
            (shrink(a, n, rng), b)
        }
        Ordering::Less => {
            let n = a.len();
            let b = shrink(b, n, rng);
            (a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn origin() -> Origin {
        Origin {
            modality: Modality::Audio,
            branch: Branch::Target,
            polarity: Polarity::Positive,
        }
    }

    fn hidden(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 3), |(i, j)| (i * 10 + j) as f64)
    }

    fn batch(n: usize) -> EmbeddingBatch {
        EmbeddingBatch::gather(hidden(n).view(), (0..n).collect(), origin()).unwrap()
    }

    #[test]
    fn ceiling_counts() {
        assert_eq!(sample_count(0.8, 10), 8);
        assert_eq!(sample_count(0.7, 10), 7);
        assert_eq!(sample_count(0.5, 1), 1);
        assert_eq!(sample_count(0.5, 3), 2);
        assert_eq!(sample_count(0.5, 0), 0);
    }

    #[test]
    fn positive_sample_is_subset_with_exact_count() {
        let idx = PatchIndexSets {
            positive: vec![0, 1, 2, 3],
            negative: vec![4, 5],
            ..Default::default()
        };
        let h = hidden(6);
        let b = sample_positive(h.view(), &idx, 0.5, &mut ChaCha8Rng::seed_from_u64(0), Modality::Audio).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.source_indices.iter().all(|i| idx.positive.contains(i)));
        for (k, &i) in b.source_indices.iter().enumerate() {
            assert_eq!(b.vectors.row(k), h.row(i));
        }
        let empty = PatchIndexSets::default();
        let e = sample_positive(h.view(), &empty, 0.5, &mut ChaCha8Rng::seed_from_u64(0), Modality::Audio).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.dim(), 3);
    }

    #[test]
    fn negative_samples_per_branch_are_reproducible() {
        let h = hidden(12);
        let idx = PatchIndexSets {
            positive: vec![10, 11],
            negative: (0..10).collect(),
            ..Default::default()
        };
        let run = |seed| {
            sample_negative(h.view(), h.view(), &idx, &idx, 0.8, &mut ChaCha8Rng::seed_from_u64(seed), Modality::VideoGrid)
                .unwrap()
        };
        let (s, t) = run(4);
        assert_eq!(s.len(), 8);
        assert_eq!(t.len(), 8);
        assert_eq!(run(4), (s.clone(), t));
        assert_eq!(s.origin.branch, Branch::Source);
        let mut sorted = s.source_indices.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
    }

    #[test]
    fn invalid_rate_rejected() {
        let h = hidden(2);
        assert!(sample_from(h.view(), &[0], 1.5, &mut ChaCha8Rng::seed_from_u64(0), origin()).is_err());
        assert!(sample_from(h.view(), &[0], 0.0, &mut ChaCha8Rng::seed_from_u64(0), origin()).is_err());
    }

    #[test]
    fn align_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = align_counts(batch(5), batch(3), &mut rng);
        assert_eq!((a.len(), b.len()), (3, 3));
        assert_eq!(b, batch(3));
        assert!(a.source_indices.windows(2).all(|w| w[0] < w[1]));
        let (a, b) = align_counts(batch(4), batch(4), &mut rng);
        assert_eq!(a, batch(4));
        assert_eq!(b, batch(4));
        let (a, b) = align_counts(batch(2), batch(0), &mut rng);
        assert!(a.is_empty() && b.is_empty());
    }

    #[test]
    fn align_survival_is_uniform() {
        let trials = 10_000;
        let mut survived = [0usize; 4];
        for seed in 0..trials {
            let (a, _) = align_counts(batch(4), batch(2), &mut ChaCha8Rng::seed_from_u64(seed));
            for i in a.source_indices {
                survived[i] += 1;
            }
        }
        for s in survived {
            let f = s as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.02, "{f}");
        }
    }
}
