use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// value / 255, so every channel lies in [0, 1].
    #[default]
    Unit,
    /// (value / 255 - mean) / std with the ImageNet channel statistics.
    Imagenet,
}

impl std::str::FromStr for ScalingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "unit" => Ok(ScalingMode::Unit),
            "imagenet" => Ok(ScalingMode::Imagenet),
            other => Err(format!("unknown scaling mode '{other}' (expected unit or imagenet)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_height: usize,
    pub target_width: usize,
    #[serde(default)]
    pub scaling_mode: ScalingMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_height: 175,
            target_width: 175,
            scaling_mode: ScalingMode::Unit,
        }
    }
}

impl PreprocessConfig {
    pub fn square(size: usize) -> Self {
        Self {
            target_height: size,
            target_width: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_height < 8 || self.target_width < 8 {
            return Err(DatasetError::BadConfig(format!(
                "target dimensions must be at least 8x8, got {}x{}",
                self.target_height, self.target_width
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.target_height, self.target_width, 3]
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
///
/// Interpolation uses the `a + (b - a) * t` form so flat regions reproduce
/// their value exactly. Output is `height × width × 3`, row-major.
pub fn resize_bilinear(img: &RgbImage, height: usize, width: usize) -> Vec<f32> {
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let px = |y: usize, x: usize, c: usize| raw[(y * in_w + x) * 3 + c] as f32;
    let axis = |out: usize, len: usize, size: usize| -> (usize, usize, f32) {
        let scale = len as f32 / size as f32;
        let src = ((out as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f32)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, in_w, width)).collect();
    let mut out = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let (y0, y1, ty) = axis(y, in_h, height);
        for &(x0, x1, tx) in &cols {
            for c in 0..3 {
                let top = px(y0, x0, c) + (px(y0, x1, c) - px(y0, x0, c)) * tx;
                let bottom = px(y1, x0, c) + (px(y1, x1, c) - px(y1, x0, c)) * tx;
                out.push(top + (bottom - top) * ty);
            }
        }
    }
    out
}

/// Decodes a JPEG/PNG file into a normalized `H×W×3` tensor.
///
/// Grayscale is replicated to three channels and alpha is dropped before the
/// bilinear stretch to the target size.
pub fn load_and_preprocess(path: &Path, config: &PreprocessConfig) -> Result<Tensor<f32>> {
    config.validate()?;
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let decode_err = |reason: String| DatasetError::DecodeError {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?
        .to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(decode_err("image has zero extent".into()));
    }
    let mut data = resize_bilinear(&img, config.target_height, config.target_width);
    match config.scaling_mode {
        ScalingMode::Unit => {
            for v in &mut data {
                *v = (*v / 255.0).clamp(0.0, 1.0);
            }
        }
        ScalingMode::Imagenet => {
            for px in data.chunks_exact_mut(3) {
                for c in 0..3 {
                    px[c] = (px[c] / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                }
            }
        }
    }
    Ok(Tensor::from_vec(&config.input_shape(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, Rgba, RgbaImage};

    #[test]
    fn jpeg_resized_to_target_in_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("city.jpg");
        RgbImage::from_fn(350, 350, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
            .save(&path)
            .unwrap();
        let t = load_and_preprocess(&path, &PreprocessConfig::default()).unwrap();
        assert_eq!(t.shape(), [175, 175, 3]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn white_png_is_exactly_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        RgbImage::from_pixel(37, 91, Rgb([255, 255, 255])).save(&path).unwrap();
        let t = load_and_preprocess(&path, &PreprocessConfig::default()).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grayscale_and_alpha_become_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("g.png");
        GrayImage::from_pixel(10, 10, Luma([51])).save(&gray).unwrap();
        let t = load_and_preprocess(&gray, &PreprocessConfig::square(8)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.2));

        let rgba = dir.path().join("a.png");
        RgbaImage::from_pixel(10, 10, Rgba([255, 0, 0, 10])).save(&rgba).unwrap();
        let t = load_and_preprocess(&rgba, &PreprocessConfig::square(8)).unwrap();
        assert_eq!(&t.data()[..3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn imagenet_mode_normalizes_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        RgbImage::from_pixel(8, 8, Rgb([255, 255, 255])).save(&path).unwrap();
        let cfg = PreprocessConfig {
            scaling_mode: ScalingMode::Imagenet,
            ..PreprocessConfig::square(8)
        };
        let t = load_and_preprocess(&path, &cfg).unwrap();
        for c in 0..3 {
            assert_eq!(t.data()[c], (1.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
    }

    #[test]
    fn bilinear_midpoint_on_upscale() {
        // 2 px wide -> 4 px: half-pixel centres sample at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let img = RgbImage::from_fn(2, 1, |x, _| Rgb([if x == 0 { 0 } else { 200 }; 3]));
        let out = resize_bilinear(&img, 1, 4);
        let reds: Vec<f32> = out.chunks(3).map(|p| p[0]).collect();
        assert_eq!(reds, vec![0.0, 50.0, 150.0, 200.0]);
    }

    #[test]
    fn decode_and_missing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let fake = dir.path().join("notes.jpg");
        std::fs::write(&fake, "this is plain text, not a jpeg").unwrap();
        assert!(matches!(
            load_and_preprocess(&fake, &PreprocessConfig::default()),
            Err(DatasetError::DecodeError { .. })
        ));
        assert!(matches!(
            load_and_preprocess(&dir.path().join("gone.png"), &PreprocessConfig::default()),
            Err(DatasetError::MissingFile(_))
        ));
        assert!(matches!(
            load_and_preprocess(&fake, &PreprocessConfig::square(4)),
            Err(DatasetError::BadConfig(_))
        ));
    }
}
