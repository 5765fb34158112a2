//! Binary checkpoint format.
//!
//! Layout: `b"S4DG"`, `u32` format version, `u64` metadata length, JSON
//! metadata, every tensor as little-endian `f64` in the order listed in
//! the metadata, then a CRC32 of all preceding bytes. All integers are
//! little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{CloudMoments, Moments};
use crate::deformation::{Aabb, DeformationField};
use crate::error::{Error, Result};
use crate::scene::{CameraSpec, GaussianCloud};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"S4DG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    iteration: usize,
    config: TrainConfig,
    gaussians: usize,
    sh_degree: usize,
    max_sh_degree: usize,
    bbox: Aabb,
    scene_extent: f64,
    camera: CameraSpec,
    cloud_step: u64,
    field_step: u64,
    tensors: Vec<TensorInfo>,
}

fn cloud_shapes(n: usize, sh_stride: usize) -> [(&'static str, Vec<usize>); 5] {
    [
        ("positions", vec![n, 3]),
        ("rotations", vec![n, 4]),
        ("log_scales", vec![n, 3]),
        ("opacity_logits", vec![n]),
        ("sh_coeffs", vec![n, sh_stride]),
    ]
}

/// Names and shapes of every stored tensor, in file order.
fn layout(cloud: &GaussianCloud, field: &DeformationField) -> Vec<TensorInfo> {
    let cloud_t = cloud_shapes(cloud.len(), cloud.sh_stride());
    let field_t: Vec<(String, Vec<usize>)> = field
        .tensor_shapes()
        .into_iter()
        .enumerate()
        .map(|(k, s)| (format!("field.{k}"), s))
        .collect();
    let mut out: Vec<TensorInfo> = Vec::new();
    let params = cloud_t
        .iter()
        .map(|(n, s)| (n.to_string(), s.clone()))
        .chain(field_t.iter().cloned());
    out.extend(params.map(|(name, shape)| TensorInfo { name, shape }));
    for moment in ["m", "v"] {
        for (n, s) in &cloud_t {
            out.push(TensorInfo {
                name: format!("adam.{moment}.{n}"),
                shape: s.clone(),
            });
        }
        for (n, s) in &field_t {
            out.push(TensorInfo {
                name: format!("adam.{moment}.{n}"),
                shape: s.clone(),
            });
        }
    }
    out
}

fn cloud_tensors(c: &GaussianCloud) -> [&[f64]; 5] {
    [
        c.positions.as_flattened(),
        c.rotations.as_flattened(),
        c.log_scales.as_flattened(),
        &c.opacity_logits,
        &c.sh_coeffs,
    ]
}

fn data_tensors(state: &TrainState) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = cloud_tensors(&state.cloud).to_vec();
    v.extend(state.field.tensors());
    let field_m: Vec<&Moments> = state.field_moments.iter().collect();
    let cloud_m = state.cloud_moments.tensors();
    v.extend(cloud_m.iter().map(|m| m.m.as_slice()));
    v.extend(field_m.iter().map(|m| m.m.as_slice()));
    v.extend(cloud_m.iter().map(|m| m.v.as_slice()));
    v.extend(field_m.iter().map(|m| m.v.as_slice()));
    v
}

/// Serializes `state` to bytes.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let tensors = layout(&state.cloud, &state.field);
    let data = data_tensors(state);
    for (info, d) in tensors.iter().zip(&data) {
        if info.shape.iter().product::<usize>() != d.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} does not match its shape",
                info.name
            )));
        }
    }
    let meta = Metadata {
        iteration: state.iteration,
        config: state.config.clone(),
        gaussians: state.cloud.len(),
        sh_degree: state.cloud.sh_degree,
        max_sh_degree: state.cloud.max_sh_degree(),
        bbox: state.field.grid.bbox,
        scene_extent: state.scene_extent,
        camera: state.camera.clone(),
        cloud_step: state.cloud_step,
        field_step: state.field_step,
        tensors,
    };
    let json = serde_json::to_vec(&meta).map_err(|source| Error::Json {
        context: "checkpoint metadata".into(),
        source,
    })?;
    let total: usize = data.iter().map(|d| d.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for d in data {
        for v in d {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

/// Parses bytes produced by [`to_bytes`]. Nothing is returned unless the
/// whole file validates.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 20 {
        return Err(truncated());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if json_len > body.len() - 16 {
        return Err(truncated());
    }
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let meta: Option<Metadata> = serde_json::from_slice(&body[16..16 + json_len]).ok();
    let expected_len = meta.as_ref().map(|m| {
        16 + json_len
            + 8 * m
                .tensors
                .iter()
                .map(|t| t.shape.iter().product::<usize>())
                .sum::<usize>()
    });
    if expected_len.is_some_and(|n| body.len() < n) {
        return Err(truncated());
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let meta = meta.ok_or_else(|| Error::Checkpoint("unreadable metadata".into()))?;
    if expected_len != Some(body.len()) {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }

    let mut cloud = GaussianCloud::new(meta.max_sh_degree);
    if meta.sh_degree > meta.max_sh_degree {
        return Err(Error::Shape("active sh degree exceeds maximum".into()));
    }
    cloud.sh_degree = meta.sh_degree;
    meta.bbox.validate()?;
    meta.config.validate()?;
    let mut field = DeformationField::new(
        meta.config.deformation.clone(),
        meta.bbox,
        meta.max_sh_degree,
        0,
    );
    let expected = layout(
        &{
            let mut c = GaussianCloud::new(meta.max_sh_degree);
            c.positions = vec![[0.0; 3]; meta.gaussians];
            c
        },
        &field,
    );
    if expected != meta.tensors {
        return Err(Error::Shape(
            "stored tensor shapes do not match the configured cloud and deformation grid".into(),
        ));
    }

    let mut offset = 16 + json_len;
    let mut next = |len: usize| -> Vec<f64> {
        let v = body[offset..offset + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * len;
        v
    };
    let n = meta.gaussians;
    let stride = cloud.sh_stride();
    let to3 = |v: Vec<f64>| {
        v.chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect::<Vec<_>>()
    };
    cloud.positions = to3(next(3 * n));
    cloud.rotations = next(4 * n)
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    cloud.log_scales = to3(next(3 * n));
    cloud.opacity_logits = next(n);
    cloud.sh_coeffs = next(stride * n);
    for t in field.tensors_mut() {
        let v = next(t.len());
        t.copy_from_slice(&v);
    }
    let sizes = [3 * n, 4 * n, 3 * n, n, stride * n];
    let field_sizes: Vec<usize> = field.tensors().iter().map(|t| t.len()).collect();
    let mut cloud_m: Vec<Vec<f64>> = sizes.iter().map(|&s| next(s)).collect();
    let mut field_m: Vec<Vec<f64>> = field_sizes.iter().map(|&s| next(s)).collect();
    let cloud_v: Vec<Vec<f64>> = sizes.iter().map(|&s| next(s)).collect();
    let field_v: Vec<Vec<f64>> = field_sizes.iter().map(|&s| next(s)).collect();
    let mut cloud_moments = CloudMoments::default();
    for (dst, (m, v)) in cloud_moments
        .tensors_mut()
        .into_iter()
        .zip(cloud_m.drain(..).zip(cloud_v))
    {
        *dst = Moments { m, v };
    }
    let field_moments = field_m
        .drain(..)
        .zip(field_v)
        .map(|(m, v)| Moments { m, v })
        .collect();

    Ok(TrainState {
        config: meta.config,
        iteration: meta.iteration,
        cloud,
        field,
        cloud_moments,
        field_moments,
        cloud_step: meta.cloud_step,
        field_step: meta.field_step,
        scene_extent: meta.scene_extent,
        camera: meta.camera,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    crate::io::write_file(path, &to_bytes(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
