//! Procedural 32x32 RGB image families with distinct pixel statistics, used
//! as a desk-scale stand-in for real image collections.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::substream;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// A bright warm blob on a dark background; the class picks the quadrant.
    BrightBlobs,
    /// Dark stripes on a dim background; the class picks the orientation.
    DarkStripes,
    /// Per-pixel uniform noise; the class picks a boosted channel.
    UniformNoise,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::BrightBlobs, Family::DarkStripes, Family::UniformNoise];

    pub fn name(self) -> &'static str {
        match self {
            Family::BrightBlobs => "bright_blobs",
            Family::DarkStripes => "dark_stripes",
            Family::UniformNoise => "uniform_noise",
        }
    }

    /// Classes this family can render distinctly.
    pub fn max_classes(self) -> usize {
        match self {
            Family::BrightBlobs | Family::DarkStripes => 4,
            Family::UniformNoise => 3,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown image family `{s}` (expected bright_blobs, dark_stripes or uniform_noise)"))
    }
}

/// `[N,3,32,32]` u8 pixels with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn put(img: &mut [u8], c: usize, y: usize, x: usize, v: f64) {
    img[(c * SIDE + y) * SIDE + x] = v.round().clamp(0.0, 255.0) as u8;
}

/// Renders `n` images; labels cycle through `0..num_classes` so every class
/// is represented when `n >= num_classes`.
pub fn generate(family: Family, n: usize, num_classes: usize, seed: u64) -> SyntheticSet {
    let classes = num_classes.clamp(1, family.max_classes());
    let mut rng = substream(seed, 0x5eed_0000 + family as u64);
    let mut pixels = vec![0u8; n * PIXELS];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in pixels.chunks_mut(PIXELS).enumerate() {
        let class = i % classes;
        labels.push(class as u16);
        match family {
            Family::BrightBlobs => {
                let qy = if class / 2 == 0 { 9.0 } else { 23.0 };
                let qx = if class % 2 == 0 { 9.0 } else { 23.0 };
                let cy = qy + rng.gen_range(-3.0..3.0);
                let cx = qx + rng.gen_range(-3.0..3.0);
                let r = rng.gen_range(4.0..7.0f64);
                let bg = rng.gen_range(20.0..50.0);
                let tint = [1.0, 0.85, 0.55];
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let w = (-d2 / (2.0 * r * r)).exp();
                        for (c, t) in tint.iter().enumerate() {
                            put(img, c, y, x, bg + w * 230.0 * t + rng.gen_range(-6.0..6.0));
                        }
                    }
                }
            }
            Family::DarkStripes => {
                let period = rng.gen_range(4..8usize);
                let phase = rng.gen_range(0..period);
                let bg = rng.gen_range(70.0..100.0);
                let tint = [0.7, 0.9, 1.0];
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let t = match class {
                            0 => y,
                            1 => x,
                            2 => x + y,
                            _ => x + SIDE - y,
                        };
                        let on = (t + phase) % period < period / 2;
                        let v = if on { 10.0 } else { bg };
                        for (c, k) in tint.iter().enumerate() {
                            put(img, c, y, x, v * k + rng.gen_range(-4.0..4.0));
                        }
                    }
                }
            }
            Family::UniformNoise => {
                for c in 0..3 {
                    let boost = if c == class { 60.0 } else { 0.0 };
                    for y in 0..SIDE {
                        for x in 0..SIDE {
                            put(img, c, y, x, rng.gen_range(60.0..200.0) + boost);
                        }
                    }
                }
            }
        }
    }
    SyntheticSet { pixels, labels }
}

/// Adds `delta` (in `[0,1]` intensity units) to every pixel, clamping at 255.
pub fn shift_brightness(pixels: &mut [u8], delta: f64) {
    let add = delta * 255.0;
    for p in pixels {
        *p = (*p as f64 + add).round().clamp(0.0, 255.0) as u8;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(p: &[u8]) -> f64 {
        p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64
    }

    #[test]
    fn deterministic_and_labeled() {
        let a = generate(Family::BrightBlobs, 10, 4, 7);
        assert_eq!(a, generate(Family::BrightBlobs, 10, 4, 7));
        assert_ne!(a, generate(Family::BrightBlobs, 10, 4, 8));
        assert_eq!(a.pixels.len(), 10 * PIXELS);
        assert_eq!(&a.labels[..5], &[0, 1, 2, 3, 0]);
    }

    #[test]
    fn families_differ_in_brightness() {
        let s = generate(Family::DarkStripes, 20, 2, 1);
        let n = generate(Family::UniformNoise, 20, 3, 1);
        assert!(mean(&s.pixels) + 40.0 < mean(&n.pixels));
        assert_eq!(n.labels.iter().max(), Some(&2));
    }

    #[test]
    fn brightness_shift_clamps() {
        let mut p = vec![0u8, 100, 250];
        shift_brightness(&mut p, 0.5);
        assert_eq!(p, vec![128, 228, 255]);
        assert_eq!("dark_stripes".parse::<Family>().unwrap(), Family::DarkStripes);
        assert!("x".parse::<Family>().is_err());
    }
}
