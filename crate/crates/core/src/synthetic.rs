//! Procedurally generated melt-pool-like images for desk-scale runs.
//!
//! Each image is drawn from a latent defect severity in [0, 1]; class 1
//! ("defect") iff severity > 0.5. Severity elongates the bright pool and
//! adds spatter dots, so samples near 0.5 are the hard ones.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};

/// Directory names; sorted order puts "nominal" at class 0.
pub const CLASS_NAMES: [&str; 2] = ["0_nominal", "1_defect"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub side: u32,
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
    /// Half-width of the severity band around 0.5 that is never sampled.
    pub margin: f64,
    /// Pixel noise standard deviation, in 0..255 units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            side: 32,
            train_per_class: 150,
            validation_per_class: 50,
            test_per_class: 50,
            margin: 0.05,
            noise: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Validation => self.validation_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// Renders one image for the given severity.
pub fn render(severity: f64, side: u32, noise: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = f64::from(side);
    let cx = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let cy = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let rx = s * rng.random_range(0.12..0.18);
    let ry = rx * (1.0 + 0.6 * severity);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = angle.sin_cos();
    let peak = rng.random_range(0.45..0.55);

    // Spatter brightness tracks severity; it is the main class cue.
    let spatter_level = 0.2 + 0.8 * severity;
    let spatter: Vec<(f64, f64)> = (0..3)
        .map(|_| {
            let r = rng.random_range(0.25..0.42) * s;
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (s / 2.0 + r * t.cos(), s / 2.0 + r * t.sin())
        })
        .collect();

    let pixel_noise = Normal::new(0.0, noise.max(1e-9)).expect("finite noise");
    RgbImage::from_fn(side, side, |x, y| {
        let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let (dx, dy) = (px - cx, py - cy);
        let u = (dx * cos + dy * sin) / rx;
        let v = (-dx * sin + dy * cos) / ry;
        let mut intensity = peak * (-(u * u + v * v)).exp();
        for &(sx, sy) in &spatter {
            let d2 = (px - sx).powi(2) + (py - sy).powi(2);
            intensity = intensity.max(spatter_level * (-d2 / 4.0).exp());
        }
        let base = 20.0 + 235.0 * intensity.min(1.0);
        let channel = |scale: f64, rng: &mut ChaCha8Rng| {
            (base * scale + pixel_noise.sample(rng)).clamp(0.0, 255.0) as u8
        };
        Rgb([channel(1.0, rng), channel(0.86, rng), channel(0.6, rng)])
    })
}

/// Writes a balanced dataset in the `split_dirs` layout under `root`.
pub fn generate_dataset(root: &Path, spec: &SyntheticSpec) -> Result<usize> {
    if spec.side < 32 {
        return Err(Error::Range(format!("side {} below 32", spec.side)));
    }
    if !(0.0..0.5).contains(&spec.margin) {
        return Err(Error::Range(format!("margin {} not in [0, 0.5)", spec.margin)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut written = 0;
    for split in Split::ALL {
        for (class, name) in CLASS_NAMES.iter().enumerate() {
            let dir = root.join(split.as_str()).join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..spec.per_class(split) {
                let lo = if class == 0 { 0.0 } else { 0.5 + spec.margin };
                let hi = if class == 0 { 0.5 - spec.margin } else { 1.0 };
                let severity = rng.random_range(lo..=hi);
                let img = render(severity, spec.side, spec.noise, &mut rng);
                let path = dir.join(format!("{i:05}.png"));
                img.save(&path)
                    .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

/// Small generated tree plus its manifest, for unit tests elsewhere in the crate.
#[cfg(test)]
pub(crate) fn tiny_dataset(per_class: usize) -> (tempfile::TempDir, crate::dataset::DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        train_per_class: per_class,
        validation_per_class: 2,
        test_per_class: 2,
        ..Default::default()
    };
    generate_dataset(dir.path(), &spec).unwrap();
    let m = crate::dataset::scan_directory(dir.path(), crate::dataset::Layout::SplitDirs).unwrap();
    (dir, m)
}
