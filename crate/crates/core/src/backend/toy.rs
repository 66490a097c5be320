//! A single cross-attention block with seeded, fixed weights.
//!
//! Patches are the spatial positions of the latent image (`i = w * H + h`),
//! each carrying its channel vector. The block computes
//!
//! ```text
//! Q = X Wqᵀ + t·bq      K = E Wkᵀ      V = E Wvᵀ
//! A = softmax(Q Kᵀ / √d)
//! h = A V + Q
//! ε̂ = X + h Woutᵀ
//! ```
//!
//! and differentiates it exactly.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BackendInfo, Denoiser, LayerProbe, Modality, NoisePrediction, OutputGrad, ProbeData, PromptEmbedding};
use crate::error::{check_finite, check_shape, Error, Result};
use crate::latent::{DiffusionTimestep, NoiseSchedule};

pub const TOY_LAYER: &str = "toy.cross_attn.0";
const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    info: BackendInfo,
    seed: u64,
    text_dim: usize,
    n_tokens: usize,
    w_q: Array2<f64>,
    b_q: Array1<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_out: Array2<f64>,
    positions: Array2<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

impl ToyDenoiser {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        modality: Modality,
        latent_shape: [usize; 3],
        n_tokens: usize,
        hidden_dim: usize,
        text_dim: usize,
        head_scale: f64,
        seed: u64,
        schedule: NoiseSchedule,
        guidance: f64,
        dds_gradient_divisor: f64,
    ) -> Result<Self> {
        if latent_shape.contains(&0) {
            return Err(Error::config("latent_shape", "all latent dimensions must be positive"));
        }
        if n_tokens == 0 || hidden_dim == 0 || text_dim == 0 {
            return Err(Error::config("toy", "token count and dimensions must be positive"));
        }
        let channels = latent_shape[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match modality {
            Modality::VideoGrid => 1,
            Modality::Audio => 2,
        });
        let w_q = normal_matrix(&mut rng, hidden_dim, channels, (1.0 / channels as f64).sqrt());
        let b_q = Array1::from_shape_simple_fn(hidden_dim, || 0.5 * rng.sample::<f64, _>(StandardNormal));
        let w_k = normal_matrix(&mut rng, hidden_dim, text_dim, (1.0 / text_dim as f64).sqrt());
        let w_v = normal_matrix(&mut rng, hidden_dim, text_dim, (1.0 / text_dim as f64).sqrt());
        let w_out = normal_matrix(&mut rng, channels, hidden_dim, head_scale / (hidden_dim as f64).sqrt());
        let positions = normal_matrix(&mut rng, n_tokens, text_dim, 0.1);
        Ok(Self {
            info: BackendInfo {
                modality,
                latent_shape,
                schedule,
                probe_layers: vec![TOY_LAYER.to_string()],
                guidance,
                dds_gradient_divisor,
            },
            seed,
            text_dim,
            n_tokens,
            w_q,
            b_q,
            w_k,
            w_v,
            w_out,
            positions,
        })
    }

    /// Small toy denoiser with default dimensions and schedule.
    pub fn with_shape(modality: Modality, latent_shape: [usize; 3], n_tokens: usize, seed: u64) -> Result<Self> {
        let hidden = match modality {
            Modality::VideoGrid => 6,
            Modality::Audio => 8,
        };
        Self::new(
            modality,
            latent_shape,
            n_tokens,
            hidden,
            8,
            0.3,
            seed,
            NoiseSchedule::scaled_linear(1000, 0.00085, 0.012)?,
            match modality {
                Modality::VideoGrid => 7.5,
                Modality::Audio => 3.5,
            },
            1.0,
        )
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_q.nrows()
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        Array1::from_shape_simple_fn(self.text_dim, || rng.sample::<f64, _>(StandardNormal))
    }

    fn patches(&self, z: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        check_shape("toy denoiser input", &self.info.latent_shape, z.shape())?;
        check_finite("toy denoiser input", z.iter())?;
        let [c, w, h] = self.info.latent_shape;
        // (C, W, H) -> (W, H, C) -> (W*H, C)
        let x = z.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
        Ok(x.into_shape_with_order((w * h, c)).expect("contiguous patch layout"))
    }

    fn unpatch(&self, x: Array2<f64>) -> Array3<f64> {
        let [c, w, h] = self.info.latent_shape;
        let x = x.into_shape_with_order((w, h, c)).expect("patch count matches latent");
        x.permuted_axes([2, 0, 1]).as_standard_layout().to_owned()
    }

    fn check_prompt(&self, prompt: &PromptEmbedding) -> Result<()> {
        check_shape("prompt embedding", &[self.n_tokens, self.text_dim], prompt.tokens.shape())
    }
}

struct Forward {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    logits: Array2<f64>,
    attention: Array2<f64>,
    hidden: Array2<f64>,
}

impl ToyDenoiser {
    fn forward(&self, z: ArrayView3<'_, f64>, prompt: &PromptEmbedding, t: &DiffusionTimestep) -> Result<Forward> {
        self.check_prompt(prompt)?;
        let x = self.patches(z)?;
        let q = x.dot(&self.w_q.t()) + &(&self.b_q * t.t);
        let k = prompt.tokens.dot(&self.w_k.t());
        let v = prompt.tokens.dot(&self.w_v.t());
        let logits = q.dot(&k.t());
        let scale = 1.0 / (self.hidden_dim() as f64).sqrt();
        let mut attention = &logits * scale;
        for mut row in attention.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let hidden = attention.dot(&v) + &q;
        Ok(Forward {
            x,
            q,
            k,
            v,
            logits,
            attention,
            hidden,
        })
    }
}

impl Denoiser for ToyDenoiser {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn encode_text(&self, prompt: &str) -> Result<PromptEmbedding> {
        let words: Vec<String> = prompt
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        let mut tokens = Array2::zeros((self.n_tokens, self.text_dim));
        for (j, mut row) in tokens.axis_iter_mut(Axis(0)).enumerate() {
            let word = words.get(j).map(String::as_str).unwrap_or(PAD_TOKEN);
            row.assign(&(self.token_vector(word) + self.positions.row(j)));
        }
        Ok(PromptEmbedding { tokens })
    }

    fn predict_noise(
        &self,
        z_t: ArrayView3<'_, f64>,
        prompt: &PromptEmbedding,
        t: &DiffusionTimestep,
        capture_probes: bool,
    ) -> Result<NoisePrediction> {
        let f = self.forward(z_t, prompt, t)?;
        let eps = self.unpatch(&f.x + &f.hidden.dot(&self.w_out.t()));
        let probes = capture_probes.then(|| ProbeData {
            layers: vec![LayerProbe {
                layer: TOY_LAYER.to_string(),
                queries: f.q,
                keys: f.k,
                logits: f.logits,
                attention: f.attention,
                hidden: f.hidden,
            }],
        });
        Ok(NoisePrediction { eps, probes })
    }

    fn vjp(
        &self,
        z_t: ArrayView3<'_, f64>,
        prompt: &PromptEmbedding,
        t: &DiffusionTimestep,
        grad: &OutputGrad,
    ) -> Result<Array3<f64>> {
        let f = self.forward(z_t, prompt, t)?;
        let n = f.x.nrows();
        let d = self.hidden_dim();

        let mut g_x = Array2::<f64>::zeros(f.x.raw_dim());
        let mut g_hidden = Array2::<f64>::zeros((n, d));
        if let Some(g_eps) = &grad.eps {
            check_shape("vjp eps gradient", &self.info.latent_shape, g_eps.shape())?;
            let g = self.patches(g_eps.view())?;
            g_hidden += &g.dot(&self.w_out);
            g_x += &g;
        }
        for (layer, g) in &grad.hidden {
            if *layer != 0 {
                return Err(Error::Backend(format!("toy backend has no probe layer {layer}")));
            }
            check_shape("vjp hidden gradient", &[n, d], g.shape())?;
            g_hidden += g;
        }

        // h = A V + Q
        let mut g_q = g_hidden.clone();
        let g_a = g_hidden.dot(&f.v.t());
        let scale = 1.0 / (d as f64).sqrt();
        let mut g_logits = &f.attention * &g_a;
        for (mut row, a) in g_logits.rows_mut().into_iter().zip(f.attention.rows()) {
            let s = row.sum();
            row.zip_mut_with(&a, |g, &a| *g -= a * s);
        }
        g_logits *= scale;
        g_q += &g_logits.dot(&f.k);
        g_x += &g_q.dot(&self.w_q);
        Ok(self.unpatch(g_x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy() -> ToyDenoiser {
        ToyDenoiser::with_shape(Modality::Audio, [2, 3, 4], 4, 0).unwrap()
    }

    fn step() -> DiffusionTimestep {
        DiffusionTimestep { t: 0.4, index: 400 }
    }

    fn latent(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::latent::gaussian(&mut rng, ndarray::Ix3(2, 3, 4))
    }

    #[test]
    fn same_seed_same_weights() {
        let a = toy();
        let b = toy();
        assert_eq!(a.w_q, b.w_q);
        assert_eq!(a.w_out, b.w_out);
        let c = ToyDenoiser::with_shape(Modality::Audio, [2, 3, 4], 4, 1).unwrap();
        assert_ne!(a.w_q, c.w_q);
    }

    #[test]
    fn text_encoding_is_deterministic_and_prompt_sensitive() {
        let d = toy();
        assert_eq!(d.encode_text("dog").unwrap(), d.encode_text("dog").unwrap());
        assert_ne!(d.encode_text("dog").unwrap(), d.encode_text("lion").unwrap());
        let null = d.encode_text("").unwrap();
        assert_eq!(null.tokens.shape(), &[4, 8]);
    }

    #[test]
    fn zero_latent_is_finite_and_attention_is_stochastic() {
        let d = toy();
        let y = d.encode_text("a barking dog").unwrap();
        let p = d.predict_noise(Array3::zeros((2, 3, 4)).view(), &y, &step(), true).unwrap();
        assert!(p.eps.iter().all(|v| v.is_finite()));
        let probes = p.probes.unwrap();
        for row in probes.layers[0].attention.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert_eq!(probes.layers[0].queries.nrows(), 12);
    }

    #[test]
    fn probe_capture_does_not_change_prediction() {
        let d = toy();
        let y = d.encode_text("lion").unwrap();
        let z = latent(3);
        let with = d.predict_noise(z.view(), &y, &step(), true).unwrap();
        let without = d.predict_noise(z.view(), &y, &step(), false).unwrap();
        assert_eq!(with.eps, without.eps);
        assert!(without.probes.is_none());
    }

    #[test]
    fn logits_equal_query_key_product() {
        let d = toy();
        let y = d.encode_text("lion roaring").unwrap();
        let p = d.predict_noise(latent(5).view(), &y, &step(), true).unwrap();
        let l = &p.probes.unwrap().layers[0];
        for i in 0..l.queries.nrows() {
            for j in 0..l.keys.nrows() {
                let dot: f64 = (0..l.queries.ncols()).map(|c| l.queries[[i, c]] * l.keys[[j, c]]).sum();
                assert!((dot - l.logits[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let d = toy();
        let y = d.encode_text("lion").unwrap();
        assert!(d.predict_noise(Array3::zeros((2, 4, 3)).view(), &y, &step(), false).is_err());
        let mut bad = Array3::zeros((2, 3, 4));
        bad[[0, 0, 0]] = f64::NAN;
        assert!(d.predict_noise(bad.view(), &y, &step(), false).is_err());
    }

    fn central_difference(d: &ToyDenoiser, z: &Array3<f64>, y: &PromptEmbedding, f: impl Fn(&NoisePrediction) -> f64) -> Array3<f64> {
        let h = 1e-4;
        let mut g = Array3::zeros(z.raw_dim());
        for idx in ndarray::indices(z.raw_dim()) {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fp = f(&d.predict_noise(zp.view(), y, &step(), true).unwrap());
            let fm = f(&d.predict_noise(zm.view(), y, &step(), true).unwrap());
            g[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let norm = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        diff / norm.max(1e-300)
    }

    #[test]
    fn vjp_of_eps_sum_matches_finite_differences() {
        let d = toy();
        let y = d.encode_text("a roaring lion").unwrap();
        let z = latent(9);
        let fd = central_difference(&d, &z, &y, |p| p.eps.sum());
        let grad = OutputGrad {
            eps: Some(Array3::ones(z.raw_dim())),
            hidden: vec![],
        };
        let exact = d.vjp(z.view(), &y, &step(), &grad).unwrap();
        assert!(rel_err(&fd, &exact) < 1e-4, "{}", rel_err(&fd, &exact));
    }

    #[test]
    fn vjp_of_hidden_functional_matches_finite_differences() {
        let d = toy();
        let y = d.encode_text("a roaring lion").unwrap();
        let z = latent(10);
        let weights = {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            crate::latent::gaussian(&mut rng, ndarray::Ix2(12, 8))
        };
        let fd = central_difference(&d, &z, &y, |p| {
            let h = p.probes.as_ref().unwrap().hidden().unwrap();
            (h * &weights).sum() + h.mapv(|v| v.powi(2)).sum() * 0.1
        });
        let h = d.predict_noise(z.view(), &y, &step(), true).unwrap().probes.unwrap().layers[0].hidden.clone();
        let grad = OutputGrad {
            eps: None,
            hidden: vec![(0, &weights + &(&h * 0.2))],
        };
        let exact = d.vjp(z.view(), &y, &step(), &grad).unwrap();
        assert!(rel_err(&fd, &exact) < 1e-4, "{}", rel_err(&fd, &exact));
    }
}
