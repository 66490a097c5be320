//! Patch-level InfoNCE and the cross-modal combination used during editing.
//!
//! Every loss here comes with its exact gradient with respect to the input
//! embeddings so it can be propagated back through a denoiser.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::EmbeddingBatch;

/// Which pairs count as positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingVariant {
    /// Relevant audio/video target patches pair with each other, irrelevant
    /// video/audio source patches pair with each other.
    #[default]
    CrossModal,
    /// Additionally pairs same-index irrelevant patches across the source and
    /// target branch of each modality.
    CrossModalPlusIntramodal,
}

impl std::str::FromStr for PairingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-modal" => Ok(Self::CrossModal),
            "cross-modal-plus-intramodal" => Ok(Self::CrossModalPlusIntramodal),
            other => Err(Error::config(
                "pairing_variant",
                format!("unknown variant `{other}` (expected cross-modal or cross-modal-plus-intramodal)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub alpha: f64,
    pub cosine_epsilon: f64,
    pub pairing_variant: PairingVariant,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.07,
            cosine_epsilon: 1e-8,
            pairing_variant: PairingVariant::CrossModal,
        }
    }
}

/// `x·y / max(‖x‖‖y‖, ε)`.
pub fn cosine(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, eps: f64) -> f64 {
    let denom = (x.dot(&x).sqrt() * y.dot(&y).sqrt()).max(eps);
    x.dot(&y) / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    /// `N = 0`: the loss is defined as zero.
    pub degenerate: bool,
    pub grad_x: Array2<f64>,
    pub grad_y: Array2<f64>,
}

fn check_pair(fx: &ArrayView2<'_, f64>, fy: &ArrayView2<'_, f64>) -> Result<()> {
    if fx.dim() != fy.dim() {
        return Err(Error::Shape {
            context: "info_nce",
            expected: fx.shape().to_vec(),
            found: fy.shape().to_vec(),
        });
    }
    Ok(())
}

/// InfoNCE with row `i` of `fx` and `fy` as the positive pair, together with
/// its gradient.
pub fn info_nce_with_grad(fx: ArrayView2<'_, f64>, fy: ArrayView2<'_, f64>, alpha: f64, eps: f64) -> Result<InfoNce> {
    check_pair(&fx, &fy)?;
    if !(alpha > 0.0) {
        return Err(Error::config("alpha", "temperature must be positive"));
    }
    let n = fx.nrows();
    if n == 0 {
        return Ok(InfoNce {
            loss: 0.0,
            degenerate: true,
            grad_x: Array2::zeros(fx.raw_dim()),
            grad_y: Array2::zeros(fy.raw_dim()),
        });
    }
    let nx: Array1<f64> = fx.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let ny: Array1<f64> = fy.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let dots = fx.dot(&fy.t());
    let denom = Array2::from_shape_fn((n, n), |(i, j)| (nx[i] * ny[j]).max(eps));
    let sims = &dots / &denom / alpha;
    let mut loss = 0.0;
    // dL/dS = (softmax(S) - I) / N
    let mut g = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = sims.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - sims[[i, i]];
        for j in 0..n {
            g[[i, j]] = (sims[[i, j]] - lse).exp() / n as f64;
        }
        g[[i, i]] -= 1.0 / n as f64;
    }
    // cos_ij = x_i·y_j / d_ij. Where d_ij = ‖x_i‖‖y_j‖ > ε:
    //   ∂cos/∂x_i = y_j/d_ij − x_i·cos_ij/‖x_i‖², symmetric in y;
    // below ε the denominator is the constant ε.
    let w = g / alpha;
    let a = &w / &denom;
    let mut bx = Array1::<f64>::zeros(n);
    let mut by = Array1::<f64>::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if nx[i] * ny[j] > eps {
                let c = a[[i, j]] * dots[[i, j]];
                bx[i] += c / (nx[i] * nx[i]);
                by[j] += c / (ny[j] * ny[j]);
            }
        }
    }
    let mut grad_x = a.dot(&fy);
    let mut grad_y = a.t().dot(&fx);
    grad_x -= &(&fx * &bx.insert_axis(Axis(1)));
    grad_y -= &(&fy * &by.insert_axis(Axis(1)));
    Ok(InfoNce {
        loss: loss / n as f64,
        degenerate: false,
        grad_x,
        grad_y,
    })
}

pub fn info_nce(fx: ArrayView2<'_, f64>, fy: ArrayView2<'_, f64>, alpha: f64, eps: f64) -> Result<(f64, bool)> {
    let r = info_nce_with_grad(fx, fy, alpha, eps)?;
    Ok((r.loss, r.degenerate))
}

/// Linear-interpolation operator taking `from`-dim vectors to `to` dims,
/// treating features as uniformly spaced samples with aligned endpoints.
pub fn resample_matrix(from: usize, to: usize) -> Array2<f64> {
    let mut r = Array2::zeros((to, from));
    for k in 0..to {
        let pos = if to > 1 {
            k as f64 * (from - 1) as f64 / (to - 1) as f64
        } else {
            0.0
        };
        let i0 = (pos.floor() as usize).min(from - 1);
        let frac = pos - i0 as f64;
        r[[k, i0]] += 1.0 - frac;
        if frac > 0.0 && i0 + 1 < from {
            r[[k, i0 + 1]] += frac;
        }
    }
    r
}

/// Resample every vector of a batch to `target_dim` features.
pub fn match_dims(batch: &EmbeddingBatch, target_dim: usize) -> Result<EmbeddingBatch> {
    if target_dim == 0 {
        return Err(Error::config("target_dim", "must be at least 1"));
    }
    if batch.dim() == target_dim {
        return Ok(batch.clone());
    }
    if batch.dim() == 0 {
        return Err(Error::config("match_dims", "cannot resample zero-dimensional embeddings"));
    }
    let r = resample_matrix(batch.dim(), target_dim);
    Ok(EmbeddingBatch {
        vectors: batch.vectors.dot(&r.t()),
        source_indices: batch.source_indices.clone(),
        origin: batch.origin,
    })
}

/// Batches feeding one grid's pair of contrastive terms. Counts must already
/// be aligned: `audio_pos ↔ video_pos` and `video_neg_src ↔ audio_neg_src`.
#[derive(Debug, Clone)]
pub struct GridPairing {
    pub audio_pos: EmbeddingBatch,
    pub video_pos: EmbeddingBatch,
    pub video_neg_src: EmbeddingBatch,
    pub audio_neg_src: EmbeddingBatch,
}

#[derive(Debug, Clone, Default)]
pub struct GridPairingGrad {
    pub audio_pos: Array2<f64>,
    pub video_pos: Array2<f64>,
    pub video_neg_src: Array2<f64>,
    pub audio_neg_src: Array2<f64>,
}

/// Same-index irrelevant patches of the source and target branches.
#[derive(Debug, Clone)]
pub struct IntramodalPairs {
    pub audio: (EmbeddingBatch, EmbeddingBatch),
    /// One `(source, target)` pair per grid.
    pub video: Vec<(EmbeddingBatch, EmbeddingBatch)>,
}

#[derive(Debug, Clone)]
pub struct IntramodalGrad {
    pub audio: (Array2<f64>, Array2<f64>),
    pub video: Vec<(Array2<f64>, Array2<f64>)>,
}

#[derive(Debug, Clone)]
pub struct CmdsLoss {
    pub loss: f64,
    /// Grids whose concatenated lists were empty.
    pub degenerate_grids: usize,
    pub grids: Vec<GridPairingGrad>,
    pub intramodal: Option<IntramodalGrad>,
}

impl CmdsLoss {
    pub fn degenerate(&self) -> bool {
        self.degenerate_grids > 0
    }
}

fn stack(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            context: "cmds concatenation (run match_dims first)",
            expected: vec![a.dim()],
            found: vec![b.dim()],
        });
    }
    Ok(concatenate(Axis(0), &[a.vectors.view(), b.vectors.view()]).expect("equal widths"))
}

fn counts_aligned(a: &EmbeddingBatch, b: &EmbeddingBatch, what: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: what,
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    Ok(())
}

/// Cross-modal contrastive loss averaged over grids:
///
/// ```text
/// (1/M) Σᵢ [ L([a⁺, v⁻ₛ[i]], [v⁺[i], a⁻ₛ]) + L([v⁺[i], a⁻ₛ], [a⁺, v⁻ₛ[i]]) ]
/// ```
///
/// plus, when `intramodal` is given, `L(a⁻ₛ, a⁻ₜ) + (1/M) Σᵢ L(v⁻ₛ[i], v⁻ₜ[i])`.
pub fn cmds_loss(grids: &[GridPairing], intramodal: Option<&IntramodalPairs>, config: &ContrastiveConfig) -> Result<CmdsLoss> {
    if grids.is_empty() {
        return Err(Error::config("cmds", "at least one grid is required"));
    }
    let m = grids.len() as f64;
    let (alpha, eps) = (config.alpha, config.cosine_epsilon);
    let mut loss = 0.0;
    let mut degenerate_grids = 0;
    let mut grads = Vec::with_capacity(grids.len());
    for g in grids {
        counts_aligned(&g.audio_pos, &g.video_pos, "cmds positive counts")?;
        counts_aligned(&g.video_neg_src, &g.audio_neg_src, "cmds negative counts")?;
        let left = stack(&g.audio_pos, &g.video_neg_src)?;
        let right = stack(&g.video_pos, &g.audio_neg_src)?;
        if left.dim() != right.dim() {
            return Err(Error::Shape {
                context: "cmds lists",
                expected: left.shape().to_vec(),
                found: right.shape().to_vec(),
            });
        }
        let mut g_left = Array2::zeros(left.raw_dim());
        let mut g_right = Array2::zeros(right.raw_dim());
        if left.nrows() == 0 {
            degenerate_grids += 1;
        } else {
            let forward = info_nce_with_grad(left.view(), right.view(), alpha, eps)?;
            let backward = info_nce_with_grad(right.view(), left.view(), alpha, eps)?;
            loss += (forward.loss + backward.loss) / m;
            g_left = (forward.grad_x + backward.grad_y) / m;
            g_right = (forward.grad_y + backward.grad_x) / m;
        }
        let split = g.audio_pos.len();
        grads.push(GridPairingGrad {
            audio_pos: g_left.slice(s![..split, ..]).to_owned(),
            video_neg_src: g_left.slice(s![split.., ..]).to_owned(),
            video_pos: g_right.slice(s![..split, ..]).to_owned(),
            audio_neg_src: g_right.slice(s![split.., ..]).to_owned(),
        });
    }

    let intramodal = match intramodal {
        None => None,
        Some(pairs) => {
            if pairs.video.len() != grids.len() {
                return Err(Error::Shape {
                    context: "intramodal grid count",
                    expected: vec![grids.len()],
                    found: vec![pairs.video.len()],
                });
            }
            let (a_src, a_trg) = &pairs.audio;
            counts_aligned(a_src, a_trg, "intramodal audio counts")?;
            let a = info_nce_with_grad(a_src.vectors.view(), a_trg.vectors.view(), alpha, eps)?;
            loss += a.loss;
            let mut video = Vec::with_capacity(pairs.video.len());
            for (src, trg) in &pairs.video {
                counts_aligned(src, trg, "intramodal video counts")?;
                let v = info_nce_with_grad(src.vectors.view(), trg.vectors.view(), alpha, eps)?;
                loss += v.loss / m;
                video.push((v.grad_x / m, v.grad_y / m));
            }
            Some(IntramodalGrad {
                audio: (a.grad_x, a.grad_y),
                video,
            })
        }
    };

    Ok(CmdsLoss {
        loss,
        degenerate_grids,
        grids: grads,
        intramodal,
    })
}
