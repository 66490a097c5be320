//! Latent tensors, prompts, timesteps and the forward-noising primitive.

use ndarray::{Array, Array3, Array4, ArrayView, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_shape, Error, Result};

/// Video latent laid out as `frames × channels × width × height`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    pub data: Array4<f64>,
    pub frame_rate: f64,
}

impl VideoLatent {
    pub fn new(data: Array4<f64>, frame_rate: f64) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(Error::config("video.frames", "a video latent needs at least one frame"));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::config("video.frame_rate", "frame rate must be positive"));
        }
        check_finite("video latent", data.iter())?;
        Ok(Self { data, frame_rate })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Audio latent laid out as `channels × width × height` over a spectrogram grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioLatent {
    pub data: Array3<f64>,
    pub duration: f64,
}

impl AudioLatent {
    pub fn new(data: Array3<f64>, duration: f64) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::config("audio.duration", "duration must be positive"));
        }
        check_finite("audio latent", data.iter())?;
        Ok(Self { data, duration })
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Source and target descriptions. A missing source prompt falls back to
/// the null prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub source: Option<String>,
    pub target: String,
}

impl PromptPair {
    pub const NULL_PROMPT: &'static str = "";

    pub fn new(source: Option<String>, target: impl Into<String>) -> Result<Self> {
        let target = target.into();
        if target.trim().is_empty() {
            return Err(Error::config("prompts.target", "target prompt must be nonempty"));
        }
        Ok(Self {
            source: source.filter(|s| !s.trim().is_empty()),
            target,
        })
    }

    pub fn source_or_null(&self) -> &str {
        self.source.as_deref().unwrap_or(Self::NULL_PROMPT)
    }
}

/// A continuous timestep together with the index of the nearest step on the
/// backend's discrete schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTimestep {
    pub t: f64,
    pub index: usize,
}

/// Discrete cumulative signal fractions, `alphas_cumprod[i]` for step `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_table(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.is_empty() {
            return Err(Error::config("schedule", "schedule table is empty"));
        }
        if alphas_cumprod.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::config("schedule", "entries must lie in (0, 1]"));
        }
        if alphas_cumprod.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("schedule", "table must be non-increasing in the step index"));
        }
        Ok(Self { alphas_cumprod })
    }

    /// The "scaled linear" beta schedule used by latent diffusion models.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("schedule.steps", "need at least two steps"));
        }
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let table = (0..steps)
            .map(|i| {
                let b = s + (e - s) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - b * b;
                acc
            })
            .collect();
        Self::from_table(table)
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn table(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn nearest_index(&self, t: f64) -> usize {
        let last = (self.len() - 1) as f64;
        ((t * last).round() as usize).min(self.len() - 1)
    }

    pub fn alpha_bar(&self, step: &DiffusionTimestep) -> f64 {
        self.alphas_cumprod[step.index.min(self.len() - 1)]
    }
}

/// Draw `t` uniformly from the open interval `t_range` and map it onto the
/// schedule.
pub fn sample_timestep<R: Rng + ?Sized>(
    rng: &mut R,
    t_range: (f64, f64),
    schedule: &NoiseSchedule,
) -> Result<DiffusionTimestep> {
    let (lo, hi) = t_range;
    if !(lo >= 0.0 && hi <= 1.0 && lo < hi) {
        return Err(Error::config(
            "t_range",
            format!("({lo}, {hi}) is not a nonempty sub-interval of (0, 1)"),
        ));
    }
    let t = loop {
        let t = rng.random_range(lo..hi);
        if t > 0.0 && t > lo {
            break t;
        }
    };
    Ok(DiffusionTimestep {
        t,
        index: schedule.nearest_index(t),
    })
}

/// Standard-normal tensor of the given shape.
pub fn gaussian<R: Rng + ?Sized, D: Dimension>(rng: &mut R, shape: D) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Variance-preserving forward process with an explicit signal fraction.
pub fn noise_with_alpha_bar<D: Dimension>(
    z0: &ArrayView<f64, D>,
    eps: &ArrayView<f64, D>,
    alpha_bar: f64,
) -> Result<Array<f64, D>> {
    check_shape("noise_latent", z0.shape(), eps.shape())?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::config("alpha_bar", "must lie in [0, 1]"));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| a * z + b * e))
}

/// `sqrt(alpha_bar(t)) * z0 + sqrt(1 - alpha_bar(t)) * eps`.
pub fn noise_latent<D: Dimension>(
    z0: &ArrayView<f64, D>,
    t: &DiffusionTimestep,
    eps: &ArrayView<f64, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    noise_with_alpha_bar(z0, eps, schedule.alpha_bar(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(1000, 0.00085, 0.012).unwrap()
    }

    #[test]
    fn timestep_is_deterministic_under_seed() {
        let s = schedule();
        let a = sample_timestep(&mut ChaCha8Rng::seed_from_u64(0), (0.0, 1.0), &s).unwrap();
        let b = sample_timestep(&mut ChaCha8Rng::seed_from_u64(0), (0.0, 1.0), &s).unwrap();
        assert_eq!(a, b);
        assert!(a.t > 0.0 && a.t < 1.0);
        assert!(a.index < s.len());
    }

    #[test]
    fn empty_range_is_rejected() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_timestep(&mut rng, (0.5, 0.5), &s).is_err());
        assert!(sample_timestep(&mut rng, (0.2, 1.5), &s).is_err());
    }

    #[test]
    fn timestep_mean_is_one_half() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_timestep(&mut rng, (0.0, 1.0), &s).unwrap().t)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn nearest_index_maps_endpoints() {
        let s = schedule();
        assert_eq!(s.nearest_index(0.0), 0);
        assert_eq!(s.nearest_index(1.0), 999);
        assert_eq!(s.nearest_index(0.5), 500);
    }

    #[test]
    fn noising_edge_cases() {
        let z0 = array![1.0, 0.0];
        let eps = array![0.0, 1.0];
        assert_eq!(noise_with_alpha_bar(&z0.view(), &eps.view(), 1.0).unwrap(), z0);
        assert_eq!(noise_with_alpha_bar(&z0.view(), &eps.view(), 0.0).unwrap(), eps);
        let mid = noise_with_alpha_bar(&z0.view(), &eps.view(), 0.25).unwrap();
        assert_eq!(mid, array![0.5, 0.75f64.sqrt()]);
        let bad = array![1.0, 2.0, 3.0];
        assert!(noise_with_alpha_bar(&z0.view(), &bad.view(), 0.5).is_err());
    }

    #[test]
    fn schedule_rejects_increasing_tables() {
        assert!(NoiseSchedule::from_table(vec![0.5, 0.9]).is_err());
        assert!(NoiseSchedule::from_table(vec![1.0, 0.0]).is_err());
        let s = schedule();
        assert!(s.table().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn prompt_pair_rules() {
        assert!(PromptPair::new(None, "  ").is_err());
        let p = PromptPair::new(None, "a lion").unwrap();
        assert_eq!(p.source_or_null(), "");
        let p = PromptPair::new(Some("a dog".into()), "a lion").unwrap();
        assert_eq!(p.source_or_null(), "a dog");
    }

    proptest::proptest! {
        #[test]
        fn noising_is_linear(
            z in proptest::collection::vec(-5.0f64..5.0, 6),
            e in proptest::collection::vec(-5.0f64..5.0, 6),
            a in -3.0f64..3.0,
            ab in 0.0f64..1.0,
        ) {
            let z = ndarray::Array1::from(z);
            let e = ndarray::Array1::from(e);
            let lhs = noise_with_alpha_bar(&(&z * a).view(), &(&e * a).view(), ab).unwrap();
            let rhs = noise_with_alpha_bar(&z.view(), &e.view(), ab).unwrap() * a;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                proptest::prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }
    }
}
