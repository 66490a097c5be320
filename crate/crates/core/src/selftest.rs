//! Quick oracle checks on the toy backend, runnable from the command line.

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::Backends;
use crate::contrastive::info_nce;
use crate::edit::{cmds_objective, run_edit, sample_plan, EditConfig, EditContext, RunState, StepNoise};
use crate::error::Result;
use crate::grid::{pack_grid, shuffle_frames, unpack_grid, GridSpec};
use crate::guidance::{cfg_predict, dds_gradient, dds_loss};
use crate::latent::{gaussian, AudioLatent, PromptPair, VideoLatent};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Small toy problem: 4 frames of 2×2 latents in one 2×2 grid, 4×4 audio.
pub fn small_problem(seed: u64) -> Result<(Backends, VideoLatent, AudioLatent, PromptPair)> {
    let backends = Backends::toy_with_shapes(0, 2, [4, 4, 4], [2, 4, 4])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = VideoLatent::new(gaussian(&mut rng, ndarray::Dim([4, 4, 2, 2])) * 0.5, 4.0)?;
    let audio = AudioLatent::new(gaussian(&mut rng, ndarray::Dim([2, 4, 4])) * 0.5, 1.0)?;
    let prompts = PromptPair::new(Some("a dog barking".into()), "a lion roaring")?;
    Ok((backends, video, audio, prompts))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Exact and central-difference gradients of the contrastive loss at a
/// random small problem, as flat vectors (video entries then audio entries).
pub fn cmds_gradient_check(seed: u64, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (backends, video, audio, prompts) = small_problem(seed)?;
    let config = EditConfig {
        seed,
        warmup_steps: 0,
        grad_clip_norm: 0.0,
        tau_a: 0.6,
        tau_v: 0.6,
        ..Default::default()
    };
    let ctx = EditContext::new(&backends, &prompts, &config, &video, &audio)?;
    let state = RunState::new(video, audio, seed);
    let noise = StepNoise::draw(&ctx, &state.streams, 0)?;
    let plan = sample_plan(&ctx, &state, &noise)?;
    let (_, gv, ga) = cmds_objective(&ctx, &state, &noise, &plan)?;
    let exact: Vec<f64> = gv.iter().chain(ga.iter()).copied().collect();

    let eval = |v: &Array4<f64>, a: &Array3<f64>| -> Result<f64> {
        let mut s = state.clone();
        s.theta_video.data = v.clone();
        s.theta_audio.data = a.clone();
        Ok(cmds_objective(&ctx, &s, &noise, &plan)?.0)
    };
    let mut fd = Vec::with_capacity(exact.len());
    let (v0, a0) = (state.theta_video.data.clone(), state.theta_audio.data.clone());
    for i in 0..v0.len() {
        let (mut p, mut m) = (v0.clone(), v0.clone());
        p.as_slice_mut().expect("standard layout")[i] += h;
        m.as_slice_mut().expect("standard layout")[i] -= h;
        fd.push((eval(&p, &a0)? - eval(&m, &a0)?) / (2.0 * h));
    }
    for i in 0..a0.len() {
        let (mut p, mut m) = (a0.clone(), a0.clone());
        p.as_slice_mut().expect("standard layout")[i] += h;
        m.as_slice_mut().expect("standard layout")[i] -= h;
        fd.push((eval(&v0, &p)? - eval(&v0, &m)?) / (2.0 * h));
    }
    Ok((exact, fd))
}

pub fn run_selftest() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(check("cfg identities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c: Array3<f64> = gaussian(&mut rng, ndarray::Dim([2, 3, 3]));
        let n: Array3<f64> = gaussian(&mut rng, ndarray::Dim([2, 3, 3]));
        let ok = cfg_predict(&c.view(), &n.view(), 0.0)? == c && cfg_predict(&c.view(), &n.view(), -1.0)? == n;
        Ok((ok, String::new()))
    }));
    out.push(check("dds zero on identical branches", || {
        let e: Array3<f64> = gaussian(&mut ChaCha8Rng::seed_from_u64(2), ndarray::Dim([2, 3, 3]));
        let ok = dds_loss(&e.view(), &e.view())? == 0.0 && dds_gradient(&e.view(), &e.view())?.iter().all(|&v| v == 0.0);
        Ok((ok, String::new()))
    }));
    out.push(check("info_nce orthonormal pair", || {
        let x = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let (l, _) = info_nce(x.view(), x.view(), 1.0, 1e-8)?;
        let want = (1.0 + (-1.0f64).exp()).ln();
        Ok(((l - want).abs() < 1e-9, format!("{l:.12} vs {want:.12}")))
    }));
    out.push(check("grid roundtrip", || {
        let v: Array4<f64> = gaussian(&mut ChaCha8Rng::seed_from_u64(3), ndarray::Dim([8, 2, 3, 3]));
        let spec = GridSpec::new(2, 8, 3, 3)?;
        let perm = shuffle_frames(8, &mut ChaCha8Rng::seed_from_u64(4));
        let back = unpack_grid(pack_grid(v.view(), &spec, &perm)?.view(), &spec, &perm)?;
        Ok((back == v, format!("M = {}", spec.grids())))
    }));
    out.push(check("contrastive gradient vs finite differences", || {
        let (exact, fd) = cmds_gradient_check(5, 1e-4)?;
        let e = rel_err(&exact, &fd);
        Ok((e < 1e-4, format!("relative error {e:.2e}")))
    }));
    out.push(check("short run is deterministic", || {
        let (backends, video, audio, prompts) = small_problem(6)?;
        let config = EditConfig {
            total_steps: 20,
            warmup_steps: 5,
            ..Default::default()
        };
        let a = run_edit(&video, &audio, &prompts, &backends, &config)?;
        let b = run_edit(&video, &audio, &prompts, &backends, &config)?;
        let same = a.log.to_jsonl()? == b.log.to_jsonl()? && a.video.data == b.video.data && a.audio.data == b.audio.data;
        let finite = a.video.data.iter().chain(a.audio.data.iter()).all(|v| v.is_finite());
        Ok((same && finite, format!("{} records", a.log.records.len())))
    }));
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for r in super::run_selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
