//! Synthetic grayscale renders of a person seen from the drone camera.
//!
//! Drone frame: x forward (depth), y left, z up. A label `(x, y, z, phi)` is
//! the subject's head position and its yaw relative to the camera axis
//! (`phi = 0` faces the camera). The renderer projects a head disk, a torso
//! whose apparent width shrinks with `|sin phi|` and whose shading tilts
//! with `sin phi`, and a face marker that slides sideways with `sin phi`,
//! all through a pinhole camera.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::OUTPUTS;
use crate::artifact::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEAD_RADIUS: f64 = 0.11;
const TORSO_TOP: f64 = 0.16;
const TORSO_BOTTOM: f64 = 0.62;
const TORSO_HALF_WIDTH: f64 = 0.21;
const MARKER_RADIUS: f64 = 0.055;
const MARKER_OFFSET: f64 = 0.08;

const HEAD_SHADE: f64 = 0.68;
const TORSO_SHADE: f64 = 0.62;
const TORSO_TILT: f64 = 0.35;
const MARKER_SHADE: f64 = 0.12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub h: usize,
    pub w: usize,
    /// Horizontal field of view in degrees.
    pub hfov_deg: f64,
}

impl Camera {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, hfov_deg: 87.0 }
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.w as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan()
    }

    /// Image coordinates `(u, v)` of a drone-frame point with `x > 0`.
    pub fn project(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        let f = self.focal();
        (self.w as f64 / 2.0 - f * y / x, self.h as f64 / 2.0 - f * z / x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelRanges {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub phi: [f64; 2],
}

impl Default for LabelRanges {
    fn default() -> Self {
        Self {
            x: [1.0, 3.0],
            y: [-0.8, 0.8],
            z: [-0.4, 0.4],
            phi: [-1.2, 1.2],
        }
    }
}

impl LabelRanges {
    pub fn as_array(&self) -> [[f64; 2]; OUTPUTS] {
        [self.x, self.y, self.z, self.phi]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in super::OUTPUT_NAMES.iter().zip(self.as_array()) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!("empty range for {name}: [{lo}, {hi}]")));
            }
        }
        if self.x[0] <= 0.0 {
            return Err(Error::InvalidArgument("subject must stay in front of the camera (x > 0)".into()));
        }
        Ok(())
    }

    pub fn contains(&self, label: &[f64; OUTPUTS]) -> bool {
        label
            .iter()
            .zip(self.as_array())
            .all(|(v, [lo, hi])| (lo..=hi).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// Row-major `h * w` values in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: [f32; OUTPUTS],
}

/// Per-pixel coverage of the subject's parts.
struct Layers {
    head: Vec<f64>,
    torso: Vec<f64>,
    /// Torso shade per pixel (side lit according to the subject's yaw).
    torso_shade: Vec<f64>,
    marker: Vec<f64>,
}

fn coverage(cam: &Camera, label: &[f64; OUTPUTS]) -> Layers {
    let [x, y, z, phi] = *label;
    let f = cam.focal();
    let s = f / x;
    let (uc, vc) = cam.project(x, y, z);
    let head_r = HEAD_RADIUS * s;
    let half_w = TORSO_HALF_WIDTH * (0.55 + 0.45 * phi.cos().abs()) * s;
    let top = vc + TORSO_TOP * s;
    let bottom = vc + TORSO_BOTTOM * s;
    let mu = uc - phi.sin() * MARKER_OFFSET * s;
    let mr = MARKER_RADIUS * s;

    let n = cam.h * cam.w;
    let mut out = Layers {
        head: vec![0.0; n],
        torso: vec![0.0; n],
        torso_shade: vec![TORSO_SHADE; n],
        marker: vec![0.0; n],
    };
    for row in 0..cam.h {
        let pv = row as f64 + 0.5;
        for col in 0..cam.w {
            let pu = col as f64 + 0.5;
            let i = row * cam.w + col;
            // signed distance inside each shape, in pixels, mapped to a 1-px ramp
            let d_head = head_r - ((pu - uc).powi(2) + (pv - vc).powi(2)).sqrt();
            out.head[i] = ramp(d_head);
            let d_torso = (half_w - (pu - uc).abs()).min(pv - top).min(bottom - pv);
            out.torso[i] = ramp(d_torso);
            let across = ((pu - uc) / half_w).clamp(-1.0, 1.0);
            out.torso_shade[i] = TORSO_SHADE - TORSO_TILT * phi.sin() * across;
            let d_marker = mr - ((pu - mu).powi(2) + (pv - vc).powi(2)).sqrt();
            out.marker[i] = ramp(d_marker).min(out.head[i]);
        }
    }
    out
}

fn ramp(d: f64) -> f64 {
    (d + 0.5).clamp(0.0, 1.0)
}

/// Renders one frame. Background texture and sensor noise come from `rng`.
pub fn render<R: Rng + ?Sized>(cam: &Camera, label: &[f64; OUTPUTS], rng: &mut R) -> Vec<f32> {
    let cov = coverage(cam, label);
    let base = rng.random_range(0.2..0.45);
    let gx = rng.random_range(-0.1..0.1);
    let gy = rng.random_range(-0.1..0.1);
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut img = Vec::with_capacity(cam.h * cam.w);
    for row in 0..cam.h {
        for col in 0..cam.w {
            let i = row * cam.w + col;
            let bg = base + gx * (col as f64 / cam.w as f64 - 0.5) + gy * (row as f64 / cam.h as f64 - 0.5);
            let mut v = bg * (1.0 - cov.torso[i]) + cov.torso_shade[i] * cov.torso[i];
            v = v * (1.0 - cov.head[i]) + HEAD_SHADE * cov.head[i];
            v = v * (1.0 - cov.marker[i]) + MARKER_SHADE * cov.marker[i];
            v += noise.sample(rng);
            img.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    img
}

/// Visible subject area in pixels (union of head and torso coverage).
pub fn silhouette_area(cam: &Camera, label: &[f64; OUTPUTS]) -> f64 {
    let cov = coverage(cam, label);
    cov.head.iter().zip(&cov.torso).map(|(h, t)| h.max(*t)).sum()
}

/// Images and labels stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub camera: Camera,
    pub ranges: LabelRanges,
    pub seed: u64,
    images: Vec<f32>,
    labels: Vec<f32>,
}

pub fn generate_dataset(n: usize, seed: u64, ranges: &LabelRanges, camera: &Camera) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be > 0".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * camera.h * camera.w);
    let mut labels = Vec::with_capacity(n * OUTPUTS);
    for _ in 0..n {
        let mut label = [0.0; OUTPUTS];
        for (v, [lo, hi]) in label.iter_mut().zip(ranges.as_array()) {
            *v = rng.random_range(lo..hi);
        }
        images.extend(render(camera, &label, &mut rng));
        labels.extend(label.iter().map(|&v| v as f32));
    }
    Ok(Dataset {
        camera: *camera,
        ranges: *ranges,
        seed,
        images,
        labels,
    })
}

const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    n: usize,
    seed: u64,
    camera: Camera,
    ranges: LabelRanges,
    images_file: String,
    images_sha256: String,
    labels_file: String,
    labels_sha256: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len() / OUTPUTS
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.camera.h * self.camera.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn label(&self, i: usize) -> [f32; OUTPUTS] {
        let mut l = [0.0; OUTPUTS];
        l.copy_from_slice(&self.labels[i * OUTPUTS..(i + 1) * OUTPUTS]);
        l
    }

    pub fn sample(&self, i: usize) -> SyntheticSample {
        SyntheticSample {
            image: self.image(i).to_vec(),
            label: self.label(i),
        }
    }

    pub fn labels(&self) -> &[f32] {
        &self.labels
    }

    /// `([B,1,H,W], [B,4])` for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let p = self.pixels();
        let mut x = Vec::with_capacity(idx.len() * p);
        let mut y = Vec::with_capacity(idx.len() * OUTPUTS);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample {i} out of range")));
            }
            x.extend_from_slice(self.image(i));
            y.extend_from_slice(&self.labels[i * OUTPUTS..(i + 1) * OUTPUTS]);
        }
        Ok((
            Tensor::new(vec![idx.len(), 1, self.camera.h, self.camera.w], x)?,
            Tensor::new(vec![idx.len(), OUTPUTS], y)?,
        ))
    }

    /// First `n_train` samples and the rest.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n_train} outside (0, {})",
                self.len()
            )));
        }
        let p = self.pixels();
        let part = |imgs: &[f32], labels: &[f32]| Dataset {
            camera: self.camera,
            ranges: self.ranges,
            seed: self.seed,
            images: imgs.to_vec(),
            labels: labels.to_vec(),
        };
        Ok((
            part(&self.images[..n_train * p], &self.labels[..n_train * OUTPUTS]),
            part(&self.images[n_train * p..], &self.labels[n_train * OUTPUTS..]),
        ))
    }

    pub fn label_means(&self) -> [f64; OUTPUTS] {
        let mut m = [0.0; OUTPUTS];
        for row in self.labels.chunks(OUTPUTS) {
            for (a, &v) in m.iter_mut().zip(row) {
                *a += f64::from(v);
            }
        }
        m.map(|v| v / self.len() as f64)
    }

    /// Writes `dataset.json`, `images.bin` and `labels.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let images: Vec<u8> = self.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        let labels: Vec<u8> = self.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&dir.join("images.bin"), &images)?;
        write_atomic(&dir.join("labels.bin"), &labels)?;
        let manifest = DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            n: self.len(),
            seed: self.seed,
            camera: self.camera,
            ranges: self.ranges,
            images_file: "images.bin".into(),
            images_sha256: sha256_hex(&images),
            labels_file: "labels.bin".into(),
            labels_sha256: sha256_hex(&labels),
        };
        write_atomic(&dir.join("dataset.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let m: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
        if m.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: m.schema_version,
                expected: DATASET_SCHEMA_VERSION,
            });
        }
        let read = |file: &str, sha: &str, len: usize| -> Result<Vec<f32>> {
            let bytes = fs::read(dir.join(file))?;
            if sha256_hex(&bytes) != sha {
                return Err(Error::Format(format!("{file}: checksum mismatch")));
            }
            if bytes.len() != len * 4 {
                return Err(Error::Format(format!("{file}: expected {len} floats")));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let images = read(&m.images_file, &m.images_sha256, m.n * m.camera.h * m.camera.w)?;
        let labels = read(&m.labels_file, &m.labels_sha256, m.n * OUTPUTS)?;
        Ok(Dataset {
            camera: m.camera,
            ranges: m.ranges,
            seed: m.seed,
            images,
            labels,
        })
    }
}
