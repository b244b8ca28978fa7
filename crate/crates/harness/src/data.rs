//! Synthetic rotated-glyph dataset.
//!
//! Each sample is one of a few asymmetric glyphs rendered anti-aliased at
//! the grid center and rotated by `(360/n) * u + eta` degrees, where `u` is a
//! uniform group element and `eta` is Gaussian angular jitter. The jitter
//! standard deviation is the dataset's symmetry-breaking knob: at zero every
//! rotation is an exact group angle; growing it moves rotations off the
//! group. Pixel noise is additive Gaussian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use rre_core::io::{self, Dtype};
use rre_core::rng::Rng;
use rre_core::tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub group_order: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Std of the angular noise, in degrees.
    pub jitter_degrees: f64,
    /// Std of the additive pixel noise.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            group_order: 4,
            num_classes: 4,
            image_size: 32,
            train_samples: 2000,
            test_samples: 500,
            jitter_degrees: 0.0,
            noise_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.num_classes > GLYPHS.len() {
            return Err(Error::Config(format!(
                "{} classes requested but only {} glyphs available",
                self.num_classes,
                GLYPHS.len()
            )));
        }
        if self.group_order == 0 || self.image_size == 0 {
            return Err(Error::Config("group order and image size must be positive".into()));
        }
        if self.jitter_degrees < 0.0 || self.noise_amplitude < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLabel {
    pub id: String,
    pub class: usize,
    pub angle_degrees: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, 1, S, S]`.
    pub images: Tensor,
    pub labels: Vec<SampleLabel>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[3]
    }

    /// Gathers the given sample indices into a `[B, 1, S, S]` batch plus
    /// targets.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.image_size();
        let plane = s * s;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            targets.push(self.labels[i].class);
        }
        (
            Tensor::from_vec(&[indices.len(), 1, s, s], data).expect("sized by construction"),
            targets,
        )
    }

    /// First `k` samples as a batch (for the epsilon probe).
    pub fn head_batch(&self, k: usize) -> Tensor {
        let k = k.min(self.len()).max(1);
        let idx: Vec<usize> = (0..k).collect();
        self.batch(&idx).0
    }
}

// --- glyph rendering ---------------------------------------------------------

struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

const fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Rect {
    Rect { x0, x1, y0, y1 }
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

pub const GLYPHS: [&str; 6] = ["l", "t", "arrow", "hook", "f", "z"];

/// Inside test for glyph `class` at glyph-frame coordinates. All glyphs fit
/// inside radius 0.95 so rotations never clip.
fn glyph_inside(class: usize, x: f64, y: f64) -> bool {
    match class {
        // L
        0 => {
            rect(-0.55, -0.15, -0.70, 0.70).contains(x, y)
                || rect(-0.55, 0.60, -0.70, -0.30).contains(x, y)
        }
        // T
        1 => {
            rect(-0.60, 0.60, 0.30, 0.70).contains(x, y)
                || rect(-0.20, 0.20, -0.70, 0.30).contains(x, y)
        }
        // arrow pointing up
        2 => {
            rect(-0.15, 0.15, -0.70, 0.10).contains(x, y)
                || (y >= 0.10 && y <= 0.70 && x.abs() <= 0.5 * (0.70 - y) / 0.60)
        }
        // hook (J-like)
        3 => {
            rect(-0.50, 0.50, 0.45, 0.75).contains(x, y)
                || rect(0.15, 0.50, -0.45, 0.45).contains(x, y)
                || rect(-0.50, 0.50, -0.75, -0.45).contains(x, y)
                || rect(-0.50, -0.15, -0.45, -0.05).contains(x, y)
        }
        // F
        4 => {
            rect(-0.50, -0.15, -0.70, 0.70).contains(x, y)
                || rect(-0.15, 0.55, 0.35, 0.70).contains(x, y)
                || rect(-0.15, 0.35, -0.10, 0.20).contains(x, y)
        }
        // Z
        5 => {
            rect(-0.55, 0.55, 0.42, 0.70).contains(x, y)
                || rect(-0.55, 0.55, -0.70, -0.42).contains(x, y)
                || ((x - 0.9 * y).abs() <= 0.20 && y.abs() <= 0.42)
        }
        _ => false,
    }
}

/// Renders one glyph rotated counterclockwise by `angle_degrees`, 4x4
/// supersampled. Pixel values are coverage fractions in `[0, 1]`.
pub fn render_glyph(class: usize, angle_degrees: f64, size: usize) -> Vec<f64> {
    const SS: usize = 4;
    const EXTENT: f64 = 1.15;
    let theta = angle_degrees.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let center = size as f64 / 2.0;
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut hits = 0usize;
            for sr in 0..SS {
                let py = (center - (r as f64 + (sr as f64 + 0.5) / SS as f64)) / center * EXTENT;
                for sc in 0..SS {
                    let px =
                        ((c as f64 + (sc as f64 + 0.5) / SS as f64) - center) / center * EXTENT;
                    // inverse-rotate the sample point into the glyph frame
                    let gx = cos_t * px + sin_t * py;
                    let gy = -sin_t * px + cos_t * py;
                    if glyph_inside(class, gx, gy) {
                        hits += 1;
                    }
                }
            }
            img[r * size + c] = hits as f64 / (SS * SS) as f64;
        }
    }
    img
}

// --- generation --------------------------------------------------------------

fn generate_split(cfg: &DatasetConfig, split: &str, count: usize, stream: u64) -> Dataset {
    let mut rng = Rng::with_stream(cfg.seed, stream);
    let s = cfg.image_size;
    let plane = s * s;
    let mut data = Vec::with_capacity(count * plane);
    let mut labels = Vec::with_capacity(count);
    let step = 360.0 / cfg.group_order as f64;
    for i in 0..count {
        let class = i % cfg.num_classes;
        let u = rng.below(cfg.group_order);
        let eta = rng.normal() * cfg.jitter_degrees;
        let angle = step * u as f64 + eta;
        let mut img = render_glyph(class, angle, s);
        if cfg.noise_amplitude > 0.0 {
            for px in &mut img {
                *px += cfg.noise_amplitude * rng.normal();
            }
        }
        data.extend_from_slice(&img);
        labels.push(SampleLabel {
            id: format!("{split}-{i:05}"),
            class,
            angle_degrees: angle,
        });
    }
    Dataset {
        images: Tensor::from_vec(&[count, 1, s, s], data).expect("sized by construction"),
        labels,
    }
}

/// Generates the train and test splits. The two splits draw from disjoint
/// seed streams, and class labels are balanced by construction.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let train = generate_split(cfg, "train", cfg.train_samples, 1);
    let test = generate_split(cfg, "test", cfg.test_samples, 2);
    Ok((train, test))
}

// --- disk layout ---------------------------------------------------------------

fn images_path(dir: &Path, split: &str) -> std::path::PathBuf {
    dir.join(format!("{split}-images.rrefbank"))
}

fn labels_path(dir: &Path, split: &str) -> std::path::PathBuf {
    dir.join(format!("{split}-labels.json"))
}

fn config_path(dir: &Path) -> std::path::PathBuf {
    dir.join("dataset.json")
}

fn save_split(dir: &Path, split: &str, ds: &Dataset) -> Result<()> {
    io::write_bank(
        &images_path(dir, split),
        &[("images", &ds.images, Dtype::F64)],
        serde_json::json!({ "split": split }),
    )?;
    let mut text = serde_json::to_string_pretty(&ds.labels)?;
    text.push('\n');
    std::fs::write(labels_path(dir, split), text)?;
    Ok(())
}

pub fn save_dataset(dir: &Path, cfg: &DatasetConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    std::fs::write(config_path(dir), text)?;
    save_split(dir, "train", train)?;
    save_split(dir, "test", test)?;
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let (records, _) = io::read_bank(&images_path(dir, split))?;
    let images = io::find_tensor(&records, "images")?.tensor.clone();
    let text = std::fs::read_to_string(labels_path(dir, split))
        .map_err(|e| Error::file(labels_path(dir, split), e))?;
    let labels: Vec<SampleLabel> = serde_json::from_str(&text)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Dataset(format!(
            "{split}: {} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    Ok(Dataset { images, labels })
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetConfig, Dataset, Dataset)> {
    let text = std::fs::read_to_string(config_path(dir))
        .map_err(|e| Error::file(config_path(dir), e))?;
    let cfg: DatasetConfig = serde_json::from_str(&text)?;
    let train = load_split(dir, "train")?;
    let test = load_split(dir, "test")?;
    Ok((cfg, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            group_order: 4,
            num_classes: 4,
            image_size: 16,
            train_samples: 40,
            test_samples: 20,
            jitter_degrees: 0.0,
            noise_amplitude: 0.0,
            seed: 9,
        }
    }

    #[test]
    fn zero_jitter_means_exact_group_angles() {
        let (train, test) = generate_dataset(&small_cfg()).unwrap();
        for s in train.labels.iter().chain(&test.labels) {
            let rem = s.angle_degrees.rem_euclid(90.0);
            assert!(rem == 0.0, "angle {} not a group angle", s.angle_degrees);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = DatasetConfig {
            jitter_degrees: 10.0,
            noise_amplitude: 0.2,
            ..small_cfg()
        };
        let (a, _) = generate_dataset(&cfg).unwrap();
        let (b, _) = generate_dataset(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        for (x, y) in a.labels.iter().zip(&b.labels) {
            assert_eq!(x.angle_degrees.to_bits(), y.angle_degrees.to_bits());
        }
    }

    #[test]
    fn jitter_std_matches_over_many_samples() {
        let cfg = DatasetConfig {
            train_samples: 10_000,
            test_samples: 2,
            jitter_degrees: 10.0,
            noise_amplitude: 0.0,
            ..small_cfg()
        };
        let (train, _) = generate_dataset(&cfg).unwrap();
        // deviation from the nearest multiple of 90 degrees
        let mut sq = 0.0;
        for s in &train.labels {
            let mut d = s.angle_degrees.rem_euclid(90.0);
            if d > 45.0 {
                d -= 90.0;
            }
            sq += d * d;
        }
        let std = (sq / train.len() as f64).sqrt();
        assert!((8.0..=12.0).contains(&std), "empirical std {std}");
    }

    #[test]
    fn classes_are_balanced_and_ids_disjoint() {
        let (train, test) = generate_dataset(&small_cfg()).unwrap();
        let mut counts = [0usize; 4];
        for s in &train.labels {
            counts[s.class] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        let train_ids: std::collections::HashSet<&str> =
            train.labels.iter().map(|s| s.id.as_str()).collect();
        assert!(test.labels.iter().all(|s| !train_ids.contains(s.id.as_str())));
    }

    #[test]
    fn too_many_classes_is_rejected() {
        let cfg = DatasetConfig {
            num_classes: 7,
            ..small_cfg()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn glyphs_render_inside_frame_with_antialiasing() {
        for class in 0..GLYPHS.len() {
            let img = render_glyph(class, 33.0, 24);
            let mass: f64 = img.iter().sum();
            assert!(mass > 10.0, "glyph {class} too faint: {mass}");
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let fractional = img.iter().filter(|&&v| v > 0.0 && v < 1.0).count();
            assert!(fractional > 0, "glyph {class} has no anti-aliased edge");
        }
    }

    #[test]
    fn roundtrip_through_disk() {
        let cfg = DatasetConfig {
            jitter_degrees: 5.0,
            noise_amplitude: 0.1,
            ..small_cfg()
        };
        let (train, test) = generate_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("rre-data-test-{}", std::process::id()));
        save_dataset(&dir, &cfg, &train, &test).unwrap();
        let (cfg2, train2, test2) = load_dataset(&dir).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(train.images, train2.images);
        assert_eq!(test.labels.len(), test2.labels.len());
        std::fs::remove_dir_all(dir).unwrap();
    }
}
