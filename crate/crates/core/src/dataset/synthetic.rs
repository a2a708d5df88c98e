//! Generator for hue-coded image datasets.
//!
//! Class `c` of `n` gets base hue `360·c/n` degrees. Each image fills its
//! canvas with a jittered version of that hue, overlays a few small
//! random-colour rectangles as distractors and adds per-pixel noise.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::Result;
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct HueDatasetConfig {
    pub class_names: Vec<String>,
    pub images_per_class: usize,
    pub height: u32,
    pub width: u32,
    /// Max absolute hue offset in degrees.
    pub hue_jitter: f64,
    /// Max absolute per-channel noise in 8-bit units.
    pub pixel_noise: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for HueDatasetConfig {
    fn default() -> Self {
        Self {
            class_names: ["Ahmedabad", "Delhi", "Kerala", "Kolkata", "Mumbai"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            images_per_class: 100,
            height: 175,
            width: 175,
            hue_jitter: 10.0,
            pixel_noise: 30.0,
            distractors: 3,
            seed: 0,
        }
    }
}

/// HSV (h in degrees, s and v in [0,1]) to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn render(config: &HueDatasetConfig, base_hue: f64, rng: &mut SplitMix64) -> RgbImage {
    let (w, h) = (config.width, config.height);
    let hue = base_hue + rng.uniform(-config.hue_jitter, config.hue_jitter);
    let background = hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.55, 1.0));
    let mut canvas: Vec<[f64; 3]> = vec![background; (w * h) as usize];
    for _ in 0..config.distractors {
        let colour = hsv_to_rgb(rng.uniform(0.0, 360.0), rng.uniform(0.0, 1.0), rng.uniform(0.2, 1.0));
        let rw = (rng.uniform(0.05, 0.2) * w as f64) as u32 + 1;
        let rh = (rng.uniform(0.05, 0.2) * h as f64) as u32 + 1;
        let x0 = (rng.next_f64() * (w - rw.min(w)) as f64) as u32;
        let y0 = (rng.next_f64() * (h - rh.min(h)) as f64) as u32;
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                canvas[(y * w + x) as usize] = colour;
            }
        }
    }
    RgbImage::from_fn(w, h, |x, y| {
        let px = canvas[(y * w + x) as usize];
        Rgb(px.map(|v| (v + rng.uniform(-config.pixel_noise, config.pixel_noise)).round().clamp(0.0, 255.0) as u8))
    })
}

/// Writes `<root>/<class>/<class>_<k>.png` for every class and index.
pub fn write_hue_dataset(root: &Path, config: &HueDatasetConfig) -> Result<()> {
    let mut rng = SplitMix64::new(config.seed);
    let n = config.class_names.len().max(1) as f64;
    for (c, name) in config.class_names.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        let base_hue = 360.0 * c as f64 / n;
        for k in 0..config.images_per_class {
            let img = render(config, base_hue, &mut rng);
            img.save(dir.join(format!("{name}_{k:04}.png")))
                .map_err(|e| super::DatasetError::Io(std::io::Error::other(e)))?;
        }
    }
    Ok(())
}
