//! Tiling of shuffled video frames into grid images.
//!
//! Tile `(r, c)` of grid `m` holds frame `perm[m·n² + r·n + c]`, with `r`
//! running along the width axis and `c` along the height axis. Grid images
//! are `n·W × n·H` for frame latents of `W × H`, so packing is lossless.

use ndarray::{s, Array4, ArrayView4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid_size: usize,
    pub frames: usize,
    pub frame_width: usize,
    pub frame_height: usize,
}

impl GridSpec {
    pub fn new(grid_size: usize, frames: usize, frame_width: usize, frame_height: usize) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::Grid("grid size must be at least 1".into()));
        }
        let per = grid_size * grid_size;
        if frames == 0 || !frames.is_multiple_of(per) {
            return Err(Error::Grid(format!(
                "{frames} frames do not fill {grid_size}x{grid_size} grids ({per} frames each)"
            )));
        }
        if frame_width == 0 || frame_height == 0 {
            return Err(Error::Grid("frame latents must be nonempty".into()));
        }
        Ok(Self {
            grid_size,
            frames,
            frame_width,
            frame_height,
        })
    }

    pub fn for_latent(grid_size: usize, latent: ArrayView4<'_, f64>) -> Result<Self> {
        let sh = latent.shape();
        Self::new(grid_size, sh[0], sh[2], sh[3])
    }

    pub fn frames_per_grid(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Number of grid images `M`.
    pub fn grids(&self) -> usize {
        self.frames / self.frames_per_grid()
    }

    pub fn grid_width(&self) -> usize {
        self.grid_size * self.frame_width
    }

    pub fn grid_height(&self) -> usize {
        self.grid_size * self.frame_height
    }

    /// Map a patch of grid image `grid` (index `w·H_g + h`) to
    /// `(frame, w, h)` in frame coordinates.
    pub fn patch_to_frame(&self, perm: &FramePermutation, grid: usize, patch: usize) -> (usize, usize, usize) {
        let (gw, gh) = (patch / self.grid_height(), patch % self.grid_height());
        let (r, c) = (gw / self.frame_width, gh / self.frame_height);
        let frame = perm.order[grid * self.frames_per_grid() + r * self.grid_size + c];
        (frame, gw % self.frame_width, gh % self.frame_height)
    }
}

/// A bijection on frame indices; slot `k` of the packed sequence holds
/// frame `order[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePermutation {
    pub order: Vec<usize>,
}

impl FramePermutation {
    pub fn identity(frames: usize) -> Self {
        Self {
            order: (0..frames).collect(),
        }
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        self.order
            .iter()
            .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    }
}

/// Uniformly random permutation of `frames` indices.
pub fn shuffle_frames<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> FramePermutation {
    let mut order: Vec<usize> = (0..frames).collect();
    order.shuffle(rng);
    FramePermutation { order }
}

fn check_perm(spec: &GridSpec, perm: &FramePermutation) -> Result<()> {
    if perm.order.len() != spec.frames || !perm.is_valid() {
        return Err(Error::Grid(format!(
            "permutation of {} entries is not a bijection on {} frames",
            perm.order.len(),
            spec.frames
        )));
    }
    Ok(())
}

/// Pack `frames × C × W × H` into `M × C × nW × nH`.
pub fn pack_grid(video: ArrayView4<'_, f64>, spec: &GridSpec, perm: &FramePermutation) -> Result<Array4<f64>> {
    check_perm(spec, perm)?;
    let sh = video.shape();
    if sh[0] != spec.frames || sh[2] != spec.frame_width || sh[3] != spec.frame_height {
        return Err(Error::Shape {
            context: "pack_grid",
            expected: vec![spec.frames, sh[1], spec.frame_width, spec.frame_height],
            found: sh.to_vec(),
        });
    }
    let (n, fw, fh) = (spec.grid_size, spec.frame_width, spec.frame_height);
    let mut out = Array4::zeros((spec.grids(), sh[1], spec.grid_width(), spec.grid_height()));
    for (slot, &frame) in perm.order.iter().enumerate() {
        let (m, r, c) = (slot / (n * n), (slot % (n * n)) / n, slot % n);
        out.slice_mut(s![m, .., r * fw..(r + 1) * fw, c * fh..(c + 1) * fh])
            .assign(&video.slice(s![frame, .., .., ..]));
    }
    Ok(out)
}

/// Inverse of [`pack_grid`].
pub fn unpack_grid(grids: ArrayView4<'_, f64>, spec: &GridSpec, perm: &FramePermutation) -> Result<Array4<f64>> {
    check_perm(spec, perm)?;
    let sh = grids.shape();
    if sh[0] != spec.grids() || sh[2] != spec.grid_width() || sh[3] != spec.grid_height() {
        return Err(Error::Shape {
            context: "unpack_grid",
            expected: vec![spec.grids(), sh[1], spec.grid_width(), spec.grid_height()],
            found: sh.to_vec(),
        });
    }
    let (n, fw, fh) = (spec.grid_size, spec.frame_width, spec.frame_height);
    let mut out = Array4::zeros((spec.frames, sh[1], fw, fh));
    for (slot, &frame) in perm.order.iter().enumerate() {
        let (m, r, c) = (slot / (n * n), (slot % (n * n)) / n, slot % n);
        out.slice_mut(s![frame, .., .., ..])
            .assign(&grids.slice(s![m, .., r * fw..(r + 1) * fw, c * fh..(c + 1) * fh]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(frames: usize, w: usize, h: usize) -> Array4<f64> {
        Array4::from_shape_fn((frames, 2, w, h), |(f, c, x, y)| (f * 1000 + c * 100 + x * 10 + y) as f64)
    }

    #[test]
    fn grid_counts() {
        assert_eq!(GridSpec::new(2, 40, 4, 4).unwrap().grids(), 10);
        assert_eq!(GridSpec::new(1, 7, 4, 4).unwrap().grids(), 7);
        assert!(GridSpec::new(3, 40, 4, 4).is_err());
        assert!(GridSpec::new(0, 4, 4, 4).is_err());
    }

    #[test]
    fn unit_grid_is_identity_layout() {
        let v = video(3, 2, 3);
        let spec = GridSpec::new(1, 3, 2, 3).unwrap();
        let packed = pack_grid(v.view(), &spec, &FramePermutation::identity(3)).unwrap();
        assert_eq!(packed, v);
    }

    #[test]
    fn tile_layout_follows_permutation() {
        let v = video(8, 2, 2);
        let spec = GridSpec::new(2, 8, 2, 2).unwrap();
        let perm = shuffle_frames(8, &mut ChaCha8Rng::seed_from_u64(3));
        let g = pack_grid(v.view(), &spec, &perm).unwrap();
        // grid 1, tile (1, 0) holds slot 4 + 2 = 6
        assert_eq!(g.slice(s![1, .., 2..4, 0..2]), v.slice(s![perm.order[6], .., .., ..]));
    }

    #[test]
    fn wrong_permutation_reorders_frames() {
        let v = video(4, 2, 2);
        let spec = GridSpec::new(2, 4, 2, 2).unwrap();
        let p = FramePermutation { order: vec![1, 0, 3, 2] };
        let q = FramePermutation { order: vec![0, 1, 2, 3] };
        let back = unpack_grid(pack_grid(v.view(), &spec, &p).unwrap().view(), &spec, &q).unwrap();
        assert_ne!(back, v);
        let key = |a: &Array4<f64>| {
            let mut frames: Vec<Vec<u64>> = a.outer_iter().map(|f| f.iter().map(|x| x.to_bits()).collect()).collect();
            frames.sort();
            frames
        };
        assert_eq!(key(&back), key(&v));
    }

    #[test]
    fn invalid_permutation_rejected() {
        let v = video(4, 2, 2);
        let spec = GridSpec::new(2, 4, 2, 2).unwrap();
        let bad = FramePermutation { order: vec![0, 0, 1, 2] };
        assert!(pack_grid(v.view(), &spec, &bad).is_err());
    }

    #[test]
    fn patch_index_mapping_roundtrips() {
        let spec = GridSpec::new(2, 8, 3, 2).unwrap();
        let v = video(8, 3, 2);
        let perm = shuffle_frames(8, &mut ChaCha8Rng::seed_from_u64(5));
        let g = pack_grid(v.view(), &spec, &perm).unwrap();
        for m in 0..spec.grids() {
            for patch in 0..spec.grid_width() * spec.grid_height() {
                let (gw, gh) = (patch / spec.grid_height(), patch % spec.grid_height());
                let (f, w, h) = spec.patch_to_frame(&perm, m, patch);
                assert_eq!(g[[m, 1, gw, gh]], v[[f, 1, w, h]]);
            }
        }
    }

    #[test]
    fn shuffle_is_uniform_over_permutations() {
        let trials = 10_000;
        let mut counts = std::collections::HashMap::new();
        for seed in 0..trials {
            let p = shuffle_frames(4, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(p.is_valid());
            *counts.entry(p.order).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        for c in counts.values() {
            assert!((*c as f64 / trials as f64 - 1.0 / 24.0).abs() < 0.01);
        }
        assert_eq!(shuffle_frames(1, &mut ChaCha8Rng::seed_from_u64(0)).order, vec![0]);
    }

    proptest::proptest! {
        #[test]
        fn pack_unpack_roundtrip(seed in 0u64..1000, n in 1usize..4) {
            let frames = n * n * 2;
            let v = video(frames, 2, 3);
            let spec = GridSpec::new(n, frames, 2, 3).unwrap();
            let perm = shuffle_frames(frames, &mut ChaCha8Rng::seed_from_u64(seed));
            let back = unpack_grid(pack_grid(v.view(), &spec, &perm).unwrap().view(), &spec, &perm).unwrap();
            proptest::prop_assert_eq!(back, v);
        }
    }
}
