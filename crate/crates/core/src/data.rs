//! Procedural image families used as small continual-learning tasks.

use crate::error::{config, contract, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Blobs,
    Stripes,
    Checkers,
    Rings,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Blobs, Family::Stripes, Family::Checkers, Family::Rings];

    fn salt(self) -> u64 {
        match self {
            Family::Blobs => 0x0B10B,
            Family::Stripes => 0x57121,
            Family::Checkers => 0xC4EC4,
            Family::Rings => 0x21265,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Blobs => "blobs",
            Family::Stripes => "stripes",
            Family::Checkers => "checkers",
            Family::Rings => "rings",
        };
        f.write_str(s)
    }
}

impl FromStr for Family {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Family> {
        match s {
            "blobs" => Ok(Family::Blobs),
            "stripes" => Ok(Family::Stripes),
            "checkers" => Ok(Family::Checkers),
            "rings" => Ok(Family::Rings),
            other => Err(config(format!("unknown family {:?} (blobs, stripes, checkers, rings)", other))),
        }
    }
}

/// Images `[N, 3, S, S]` in `[-1, 1]` with task-local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_labels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.slice_rows(start, len)?,
            labels: self.labels[start..start + len].to_vec(),
            n_labels: self.n_labels,
        })
    }

    /// Concatenates datasets whose labels are already in a shared space.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let imgs: Vec<&Tensor<f32>> = parts.iter().map(|d| &d.images).collect();
        Ok(Dataset {
            images: Tensor::cat_rows(&imgs)?,
            labels: parts.iter().flat_map(|d| d.labels.iter().copied()).collect(),
            n_labels: parts.iter().map(|d| d.n_labels).max().unwrap_or(0),
        })
    }

    /// Same images with every label replaced by `label` over `n_labels` classes.
    pub fn relabel(mut self, label: usize, n_labels: usize) -> Dataset {
        self.labels.iter_mut().for_each(|l| *l = label);
        self.n_labels = n_labels;
        self
    }
}

type Rgb = [f32; 3];

fn palette(rng: &mut ChaCha8Rng) -> [Rgb; 3] {
    let mut col = || -> Rgb { [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)] };
    [col(), col(), col()]
}

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Deterministic images of one family. The palette and every per-image
/// parameter derive from `palette_seed`.
pub fn synth(family: Family, palette_seed: u64, n: usize, size: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(contract("synthetic dataset needs n > 0"));
    }
    if size < 4 {
        return Err(contract(format!("image size {} too small", size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(palette_seed ^ family.salt().wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let pal = palette(&mut rng);
    let plane = size * size;
    let mut data = vec![0f32; n * 3 * plane];
    let s = size as f32;
    for (idx, img) in data.chunks_exact_mut(3 * plane).enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen::<u64>() ^ idx as u64);
        let pixel: Box<dyn Fn(f32, f32) -> Rgb> = match family {
            Family::Blobs => {
                let count = r.gen_range(1..=3);
                let blobs: Vec<(f32, f32, f32, Rgb)> = (0..count)
                    .map(|_| {
                        let c = if r.gen_bool(0.5) { pal[1] } else { pal[2] };
                        (r.gen_range(0.2..0.8) * s, r.gen_range(0.2..0.8) * s, r.gen_range(0.1..0.25) * s, c)
                    })
                    .collect();
                let bg = pal[0];
                Box::new(move |x, y| {
                    let mut c = bg;
                    for &(cx, cy, rad, col) in &blobs {
                        let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (rad * rad);
                        c = lerp(c, col, (-d2).exp());
                    }
                    c
                })
            }
            Family::Stripes => {
                let angle: f32 = r.gen_range(0.0..std::f32::consts::PI);
                let period = r.gen_range(0.15..0.35) * s;
                let phase: f32 = r.gen_range(0.0..std::f32::consts::TAU);
                let (a, b) = (pal[0], pal[1]);
                Box::new(move |x, y| {
                    let u = x * angle.cos() + y * angle.sin();
                    let t = 0.5 + 0.5 * (u / period * std::f32::consts::TAU + phase).sin();
                    lerp(a, b, t)
                })
            }
            Family::Checkers => {
                let cell = r.gen_range(2..=(size / 4).max(2)) as f32;
                let (ox, oy) = (r.gen_range(0.0..cell), r.gen_range(0.0..cell));
                let (a, b) = (pal[1], pal[2]);
                Box::new(move |x, y| {
                    let p = ((x + ox) / cell).floor() as i64 + ((y + oy) / cell).floor() as i64;
                    if p.rem_euclid(2) == 0 {
                        a
                    } else {
                        b
                    }
                })
            }
            Family::Rings => {
                let (cx, cy) = (r.gen_range(0.25..0.75) * s, r.gen_range(0.25..0.75) * s);
                let period = r.gen_range(0.15..0.3) * s;
                let (a, b) = (pal[0], pal[2]);
                Box::new(move |x, y| {
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    let t = 0.5 + 0.5 * (d / period * std::f32::consts::TAU).cos();
                    lerp(a, b, t)
                })
            }
        };
        let noise = 0.03;
        for yy in 0..size {
            for xx in 0..size {
                let c = pixel(xx as f32 + 0.5, yy as f32 + 0.5);
                for ch in 0..3 {
                    let v = c[ch] + r.gen_range(-noise..noise);
                    img[ch * plane + yy * size + xx] = v.clamp(-1.0, 1.0);
                }
            }
        }
    }
    Ok(Dataset { images: Tensor::new(vec![n, 3, size, size], data)?, labels: vec![0; n], n_labels: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        for f in Family::ALL {
            let a = synth(f, 7, 3, 8).unwrap();
            let b = synth(f, 7, 3, 8).unwrap();
            assert_eq!(a, b);
            assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_image_and_errors() {
        let d = synth(Family::Rings, 1, 1, 16).unwrap();
        assert_eq!(d.images.shape(), &[1, 3, 16, 16]);
        assert!(synth(Family::Rings, 1, 0, 16).is_err());
        assert!("plaid".parse::<Family>().is_err());
    }
}
