use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotate by a uniformly drawn multiple of 90°.
    pub rotations90: bool,
    pub hflip_p: f64,
    pub vflip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotations90: true,
            hflip_p: 0.5,
            vflip_p: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotations90: false,
            hflip_p: 0.0,
            vflip_p: 0.0,
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Augmentation {
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let quarter_turns = if cfg.rotations90 { rng.random_range(0..4u8) } else { 0 };
        Self {
            quarter_turns,
            hflip: rng.random_bool(cfg.hflip_p.clamp(0.0, 1.0)),
            vflip: rng.random_bool(cfg.vflip_p.clamp(0.0, 1.0)),
        }
    }

    /// Applies rotation, then horizontal flip, then vertical flip. Vectors
    /// pass through; non-square images only take half turns so the shape
    /// is kept.
    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Tensor<T> {
        if x.ndim() != 3 {
            return x.clone();
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let turns = if h == w { self.quarter_turns % 4 } else { self.quarter_turns & 2 };
        let mut data = x.data().to_vec();
        if h == w {
            for _ in 0..turns {
                data = rot90(&data, c, h);
            }
        } else if turns == 2 {
            for plane in data.chunks_exact_mut(h * w) {
                plane.reverse();
            }
        }
        if self.hflip {
            for row in data.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if self.vflip {
            for plane in data.chunks_exact_mut(h * w) {
                for r in 0..h / 2 {
                    let (top, bottom) = plane.split_at_mut((h - 1 - r) * w);
                    top[r * w..(r + 1) * w].swap_with_slice(&mut bottom[..w]);
                }
            }
        }
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }
}

/// Quarter turn counter-clockwise of each n×n plane.
fn rot90<T: Copy>(src: &[T], c: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(c * n * n);
    for plane in src.chunks_exact(n * n) {
        for i in 0..n {
            for j in 0..n {
                out.push(plane[j * n + (n - 1 - i)]);
            }
        }
    }
    out
}

/// Draws and applies one augmentation.
pub fn augment<T: Element>(x: &Tensor<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor<T> {
    Augmentation::draw(cfg, rng).apply(x)
}
