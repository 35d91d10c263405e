use image::imageops::FilterType;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

/// Decoded, resized and normalized image, laid out as (H, W, 3).
pub type ImageTensor = Array3<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub side: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocessConfig {
    /// ImageNet statistics the VGG16 weights were trained with (RGB, 0..1 scale).
    pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

    pub fn with_side(side: u32) -> Self {
        PreprocessConfig {
            side,
            ..Default::default()
        }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            side: 224,
            mean: Self::IMAGENET_MEAN,
            std: Self::IMAGENET_STD,
        }
    }
}

pub fn preprocess_image(sample: &Sample, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    let decode_err = |message: String| Error::Decode {
        sample_id: sample.id.clone(),
        message,
    };
    let bytes = std::fs::read(&sample.image_ref)
        .map_err(|e| decode_err(format!("{}: {e}", sample.image_ref.display())))?;
    let img = image::load_from_memory(&bytes).map_err(|e| decode_err(e.to_string()))?;
    let rgb = img.to_rgb8();
    let side = cfg.side;
    let rgb = if rgb.width() == side && rgb.height() == side {
        rgb
    } else {
        image::imageops::resize(&rgb, side, side, FilterType::Triangle)
    };

    let n = side as usize;
    let mut out = Array3::<f32>::zeros((n, n, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            let v = f32::from(px[c]) / 255.0;
            out[[y as usize, x as usize, c]] = (v - cfg.mean[c]) / cfg.std[c];
        }
    }
    Ok(out)
}
