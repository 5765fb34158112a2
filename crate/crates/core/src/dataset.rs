//! Sequence manifests, lazy frame loading and the train/validation split.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_prior::{depth_gradients, pseudo_normal_map, recover_metric_depth, DepthMap};
use crate::error::{Error, Result};
use crate::io;
use crate::scene::{Camera, CameraSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthKind {
    Inverse,
    Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub image: PathBuf,
    pub depth: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    pub time: f64,
    #[serde(default)]
    pub camera: Option<CameraSpec>,
}

/// On-disk manifest. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub camera: Option<CameraSpec>,
    pub beta: f64,
    pub depth_kind: DepthKind,
    pub frames: Vec<FrameRecord>,
}

/// One fully decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub index: usize,
    /// Normalized to `[0,1]` over the sequence.
    pub time: f64,
    pub camera: Camera,
    pub image: Vec<[f64; 3]>,
    pub depth: DepthMap,
    pub mask: Vec<bool>,
    /// Pseudo normals of the depth prior.
    pub normals: Vec<[f64; 3]>,
}

/// A validated manifest whose frames are decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    cameras: Vec<Camera>,
    times: Vec<f64>,
}

fn frame_err(frame: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        frame: Some(frame),
        message: message.into(),
    }
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: format!("manifest {}", path.display()),
            source,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: Manifest, root: PathBuf) -> Result<Self> {
        if manifest.frames.is_empty() {
            return Err(Error::Manifest {
                frame: None,
                message: "no frames".into(),
            });
        }
        if !(manifest.beta > 0.0 && manifest.beta.is_finite()) {
            return Err(Error::Manifest {
                frame: None,
                message: format!("beta must be positive, got {}", manifest.beta),
            });
        }
        let shared = manifest
            .camera
            .as_ref()
            .map(Camera::try_from)
            .transpose()
            .map_err(|e| Error::Manifest {
                frame: None,
                message: format!("shared camera: {e}"),
            })?;
        let mut cameras = Vec::with_capacity(manifest.frames.len());
        for (i, f) in manifest.frames.iter().enumerate() {
            let cam = match (&f.camera, &shared) {
                (Some(spec), _) => {
                    Camera::try_from(spec).map_err(|e| frame_err(i, format!("camera: {e}")))?
                }
                (None, Some(c)) => c.clone(),
                (None, None) => return Err(frame_err(i, "no camera given")),
            };
            cameras.push(cam);
            if !f.time.is_finite() {
                return Err(frame_err(i, "non-finite timestamp"));
            }
            if i > 0 && !(f.time > manifest.frames[i - 1].time) {
                return Err(frame_err(i, "timestamps must be strictly increasing"));
            }
            let paths = [Some(&f.image), Some(&f.depth), f.mask.as_ref()];
            for p in paths.into_iter().flatten() {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(frame_err(i, format!("missing file {}", full.display())));
                }
            }
        }
        let (t0, t1) = (
            manifest.frames[0].time,
            manifest.frames.last().map_or(0.0, |f| f.time),
        );
        let times = manifest
            .frames
            .iter()
            .map(|f| {
                if t1 > t0 {
                    (f.time - t0) / (t1 - t0)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            root,
            manifest,
            cameras,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn camera(&self, index: usize) -> &Camera {
        &self.cameras[index]
    }

    /// Normalized timestamps.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Decodes one frame and checks that all its buffers agree in size.
    pub fn frame(&self, index: usize) -> Result<FrameSample> {
        let rec = self
            .manifest
            .frames
            .get(index)
            .ok_or_else(|| frame_err(index, "frame index out of range"))?;
        let camera = self.cameras[index].clone();
        let (w, h) = (camera.width, camera.height);
        let dim = |what: &str, fw: usize, fh: usize| -> Result<()> {
            if (fw, fh) != (w, h) {
                return Err(Error::Dimension {
                    frame: index,
                    message: format!("{what} is {fw}x{fh}, camera is {w}x{h}"),
                });
            }
            Ok(())
        };
        let (iw, ih, image) = io::load_rgb(&self.root.join(&rec.image))?;
        dim("image", iw, ih)?;
        let raw = io::load_depth_file(&self.root.join(&rec.depth))?;
        dim("depth", raw.width, raw.height)?;
        let depth = match self.manifest.depth_kind {
            DepthKind::Inverse => recover_metric_depth(w, h, &raw.values, self.manifest.beta)?,
            DepthKind::Metric => DepthMap::from_metric(w, h, raw.values)?,
        };
        let mask = match &rec.mask {
            Some(p) => {
                let (mw, mh, m) = io::load_mask(&self.root.join(p))?;
                dim("mask", mw, mh)?;
                m
            }
            None => vec![true; w * h],
        };
        let (gw, gh) = depth_gradients(&depth);
        Ok(FrameSample {
            index,
            time: self.times[index],
            camera,
            image,
            depth,
            mask,
            normals: pseudo_normal_map(&gw, &gh),
        })
    }

    /// Decodes the given frames in parallel, preserving order.
    pub fn frames(&self, indices: &[usize]) -> Result<Vec<FrameSample>> {
        indices.par_iter().map(|&i| self.frame(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Every eighth frame (index ≡ 7 mod 8) is held out.
    #[default]
    Interleaved,
    /// The trailing `n / 8` frames are held out.
    Block,
}

/// Indices of training and validation frames in a 7:1 ratio. Fewer than
/// eight frames puts everything in training.
pub fn split_train_val(num_frames: usize, mode: SplitMode) -> (Vec<usize>, Vec<usize>) {
    if num_frames < 8 {
        log::warn!("{num_frames} frames is fewer than 8; validation split is empty");
        return ((0..num_frames).collect(), Vec::new());
    }
    let is_val = |i: usize| match mode {
        SplitMode::Interleaved => i % 8 == 7,
        SplitMode::Block => i >= num_frames - num_frames / 8,
    };
    (0..num_frames).partition(|&i| !is_val(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_frames(dir: &Path, n: usize, w: usize, h: usize) -> Manifest {
        let mut frames = Vec::new();
        for i in 0..n {
            let img = dir.join(format!("img{i}.png"));
            io::save_rgb(&img, w, h, &vec![[0.2, 0.4, 0.6]; w * h]).unwrap();
            let depth = dir.join(format!("d{i}.png"));
            io::save_u16(&depth, w, h, &vec![500.0; w * h]).unwrap();
            frames.push(FrameRecord {
                image: format!("img{i}.png").into(),
                depth: format!("d{i}.png").into(),
                mask: None,
                time: 10.0 + 2.0 * i as f64,
                camera: None,
            });
        }
        Manifest {
            camera: Some(Camera::looking_down_z(8.0, 8.0, 3.5, 2.5, w, h).to_spec()),
            beta: 1000.0,
            depth_kind: DepthKind::Inverse,
            frames,
        }
    }

    #[test]
    fn loads_manifest_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_frames(dir.path(), 8, 8, 6);
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.times()[0], 0.0);
        assert_eq!(ds.times()[7], 1.0);
        let frames = ds.frames(&(0..8).collect::<Vec<_>>()).unwrap();
        assert_eq!(frames.len(), 8);
        let f = &frames[3];
        assert_eq!(f.index, 3);
        assert!(f.mask.iter().all(|&m| m));
        assert!(f.depth.values.iter().all(|&d| d == 2.0));
        assert!(f.normals.iter().all(|n| *n == [0.0, 0.0, 1.0]));
    }

    #[test]
    fn reports_frame_of_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_frames(dir.path(), 3, 8, 6);
        m.frames[2].time = m.frames[1].time;
        match Dataset::from_manifest(m.clone(), dir.path().into()) {
            Err(Error::Manifest { frame: Some(2), .. }) => {}
            other => panic!("{other:?}"),
        }
        m.frames[2].time = 100.0;
        m.frames[1].depth = "nope.png".into();
        assert!(matches!(
            Dataset::from_manifest(m.clone(), dir.path().into()),
            Err(Error::Manifest { frame: Some(1), .. })
        ));
        m.frames[1].depth = "d1.png".into();
        io::save_mask(&dir.path().join("small.png"), 4, 4, &[true; 16]).unwrap();
        m.frames[1].mask = Some("small.png".into());
        let ds = Dataset::from_manifest(m.clone(), dir.path().into()).unwrap();
        assert!(matches!(
            ds.frame(1),
            Err(Error::Dimension { frame: 1, .. })
        ));
        m.camera = None;
        assert!(matches!(
            Dataset::from_manifest(m, dir.path().into()),
            Err(Error::Manifest { frame: Some(0), .. })
        ));
    }

    #[test]
    fn rejects_schema_violations() {
        let bad = r#"{"beta": 1000, "depth_kind": "log", "frames": []}"#;
        assert!(serde_json::from_str::<Manifest>(bad).is_err());
        let extra = r#"{"beta": 1, "depth_kind": "metric", "frames": [], "x": 1}"#;
        assert!(serde_json::from_str::<Manifest>(extra).is_err());
    }

    #[test]
    fn split_examples() {
        let (t, v) = split_train_val(16, SplitMode::Interleaved);
        assert_eq!((t.len(), v), (14, vec![7, 15]));
        let (t, v) = split_train_val(8, SplitMode::Interleaved);
        assert_eq!((t.len(), v.len()), (7, 1));
        let (t, v) = split_train_val(5, SplitMode::Interleaved);
        assert_eq!((t.len(), v.len()), (5, 0));
        let (_, v) = split_train_val(16, SplitMode::Block);
        assert_eq!(v, vec![14, 15]);
    }

    proptest! {
        #[test]
        fn split_partitions(n in 0usize..200, block in any::<bool>()) {
            let mode = if block { SplitMode::Block } else { SplitMode::Interleaved };
            let (t, v) = split_train_val(n, mode);
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            if n % 8 == 0 && n > 0 {
                prop_assert_eq!(t.len(), 7 * v.len());
            }
        }
    }
}
