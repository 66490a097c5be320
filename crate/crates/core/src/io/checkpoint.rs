//! Latent checkpoints in the safetensors layout: a JSON header with shapes
//! and dtypes followed by little-endian tensor bytes.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array3, Array4};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub seed: u64,
    pub video: Array4<f64>,
    pub audio: Array3<f64>,
}

fn bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Media(format!("checkpoint: {e}"))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let video = bytes(ckpt.video.iter().copied());
    let audio = bytes(ckpt.audio.iter().copied());
    let views = [
        ("theta_video", TensorView::new(Dtype::F64, ckpt.video.shape().to_vec(), &video).map_err(st_err)?),
        ("theta_audio", TensorView::new(Dtype::F64, ckpt.audio.shape().to_vec(), &audio).map_err(st_err)?),
    ];
    let meta = HashMap::from([
        ("step".to_string(), ckpt.step.to_string()),
        ("seed".to_string(), ckpt.seed.to_string()),
    ]);
    let data = safetensors::serialize(views, &Some(meta)).map_err(st_err)?;
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

fn floats(view: &TensorView<'_>) -> Result<Vec<f64>> {
    if view.dtype() != Dtype::F64 {
        return Err(Error::Media(format!("checkpoint tensor has dtype {:?}, expected F64", view.dtype())));
    }
    Ok(view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&data).map_err(st_err)?;
    let st = SafeTensors::deserialize(&data).map_err(st_err)?;
    let meta = meta.metadata().clone().unwrap_or_default();
    let field = |k: &str| -> Result<String> {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Media(format!("checkpoint metadata lacks `{k}`")))
    };
    let parse = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| Error::Media(format!("bad checkpoint `{k}`"))) };
    let v = st.tensor("theta_video").map_err(st_err)?;
    let a = st.tensor("theta_audio").map_err(st_err)?;
    let vs: [usize; 4] = v.shape().try_into().map_err(|_| Error::Media("theta_video must be 4-d".into()))?;
    let as_: [usize; 3] = a.shape().try_into().map_err(|_| Error::Media("theta_audio must be 3-d".into()))?;
    Ok(Checkpoint {
        step: parse("step")? as usize,
        seed: parse("seed")?,
        video: Array4::from_shape_vec(vs, floats(&v)?).map_err(|e| Error::Media(e.to_string()))?,
        audio: Array3::from_shape_vec(as_, floats(&a)?).map_err(|e| Error::Media(e.to_string()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        let c = Checkpoint {
            step: 42,
            seed: 7,
            video: Array4::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| (a * 27 + b * 9 + c * 3 + d) as f64 * 0.1 - 1.0),
            audio: Array3::from_shape_fn((2, 4, 3), |(a, b, c)| (a + b * c) as f64 / 3.0),
        };
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }
}
