#![allow(dead_code)]

use cityscope_core::dataset::{LoadedSplit, Split};
use cityscope_core::rng::SplitMix64;

/// Class `c` lights up channel `c % 3` with brightness set by `c / 3`, plus
/// uniform noise. Separable but not trivially so.
pub fn colour_split(split: Split, side: usize, classes: usize, per_class: usize, seed: u64) -> LoadedSplit {
    let mut rng = SplitMix64::new(seed);
    let mut inputs = Vec::with_capacity(classes * per_class * side * side * 3);
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        let level = 0.5 + 0.4 * (c / 3) as f64;
        for _ in 0..side * side {
            for ch in 0..3 {
                let base = if ch == c % 3 { level } else { 0.2 };
                inputs.push((base + rng.uniform(-0.15, 0.15)) as f32);
            }
        }
        labels.push(c);
    }
    LoadedSplit::from_parts(split, [side, side, 3], classes, inputs, labels)
}
