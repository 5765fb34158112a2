//! Gaussian cloud export in the conventional splatting PLY layout.
//!
//! Vertex properties (all `float`): `x y z nx ny nz f_dc_0..2 f_rest_*
//! opacity scale_0..2 rot_0..3`. Values are raw parameters (opacity logit,
//! log-scale, unnormalized quaternion); `f_rest_*` is channel-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{shortest_axis_normal, GaussianCloud, GaussianParams};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Property names in file order for a cloud of maximum SH degree `degree`.
pub fn property_names(degree: usize) -> Vec<String> {
    let rest = 3 * (sh::num_bands(degree) - 1);
    let mut names: Vec<String> = [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((0..rest).map(|k| format!("f_rest_{k}")));
    names.push("opacity".into());
    names.extend((0..3).map(|k| format!("scale_{k}")));
    names.extend((0..4).map(|k| format!("rot_{k}")));
    names
}

fn row(cloud: &GaussianCloud, i: usize) -> Vec<f64> {
    let bands = sh::num_bands(cloud.max_sh_degree());
    let coeffs = cloud.sh(i);
    let n = shortest_axis_normal(cloud.unit_rotation(i), cloud.scale(i));
    let mut r = Vec::with_capacity(14 + 3 * bands);
    r.extend_from_slice(&cloud.positions[i]);
    r.extend_from_slice(&[n.x, n.y, n.z]);
    r.extend_from_slice(&coeffs[..3]);
    for c in 0..3 {
        for k in 1..bands {
            r.push(coeffs[k * 3 + c]);
        }
    }
    r.push(cloud.opacity_logits[i]);
    r.extend_from_slice(&cloud.log_scales[i]);
    r.extend_from_slice(&cloud.rotations[i]);
    r
}

pub fn to_bytes(cloud: &GaussianCloud, format: PlyFormat) -> Vec<u8> {
    let names = property_names(cloud.max_sh_degree());
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len());
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for i in 0..cloud.len() {
        let r = row(cloud, i);
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = r.iter().map(|v| format!("{}", *v as f32)).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in r {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(cloud: &GaussianCloud, path: &Path, format: PlyFormat) -> Result<()> {
    crate::io::write_file(path, &to_bytes(cloud, format))
}

fn ply_err(message: impl Into<String>) -> Error {
    Error::Shape(format!("ply: {}", message.into()))
}

/// Reads a file written by [`to_bytes`] (either format) back into a cloud
/// at `f32` precision. The active SH degree is set to the maximum.
pub fn from_bytes(bytes: &[u8]) -> Result<GaussianCloud> {
    let end = b"end_header\n";
    let split = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| ply_err("missing end_header"))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| ply_err("header is not text"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(ply_err("missing magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut names = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["element", "vertex", n] => count = n.parse::<usize>().ok(),
            ["property", "float", name] => names.push(name.to_string()),
            ["end_header"] | ["comment", ..] => {}
            _ => return Err(ply_err(format!("unsupported header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| ply_err("missing format"))?;
    let count = count.ok_or_else(|| ply_err("missing vertex count"))?;
    let degree = (0..=sh::MAX_SH_DEGREE)
        .find(|&d| property_names(d) == names)
        .ok_or_else(|| ply_err("property list does not match the splatting layout"))?;
    let width = names.len();
    let body = &bytes[split..];
    let values: Vec<f64> = match format {
        PlyFormat::BinaryLittleEndian => {
            if body.len() != 4 * width * count {
                return Err(ply_err("vertex data has the wrong length"));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| ply_err("ascii body is not text"))?;
            let v: Vec<f64> = text
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| ply_err(format!("bad number {t:?}")))
                })
                .collect::<Result<_>>()?;
            if v.len() != width * count {
                return Err(ply_err("vertex data has the wrong length"));
            }
            v
        }
    };
    let bands = sh::num_bands(degree);
    let mut cloud = GaussianCloud::new(degree);
    cloud.sh_degree = degree;
    for r in values.chunks_exact(width) {
        let mut coeffs = vec![0.0; 3 * bands];
        coeffs[..3].copy_from_slice(&r[6..9]);
        for c in 0..3 {
            for k in 1..bands {
                coeffs[k * 3 + c] = r[9 + c * (bands - 1) + (k - 1)];
            }
        }
        let o = 9 + 3 * (bands - 1);
        cloud.push(GaussianParams {
            position: [r[0], r[1], r[2]],
            opacity_logit: r[o],
            log_scale: [r[o + 1], r[o + 2], r[o + 3]],
            rotation: [r[o + 4], r[o + 5], r[o + 6], r[o + 7]],
            sh: coeffs,
        });
    }
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
