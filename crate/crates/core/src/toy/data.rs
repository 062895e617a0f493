//! Synthetic mini-sequences: a rectangle bouncing across a small grid,
//! observed through a per-sequence random linear mixing of a few sources.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::instances::rng;
use crate::tensor::Tensor;

/// Standard deviation of the noise added to the target indicator source.
pub const INDICATOR_NOISE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFrame {
    /// `H×W×C`.
    pub features: Tensor,
    /// `H×W×1`, entries in {0, 1}.
    pub mask: Tensor,
    /// Noisy indicator source before mixing, `H×W×1`.
    pub indicator: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySequence {
    pub frames: Vec<ToyFrame>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Target {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: usize,
    h: usize,
}

impl Target {
    fn mask(&self, h: usize, w: usize) -> Tensor {
        let (x0, y0) = (self.x.round() as usize, self.y.round() as usize);
        Tensor::from_fn(&[h, w, 1], |i| {
            let (r, c) = (i / w, i % w);
            f64::from(r >= y0 && r < y0 + self.h && c >= x0 && c < x0 + self.w)
        })
    }

    fn advance(&mut self, h: usize, w: usize) {
        let max_x = (w - self.w) as f64;
        let max_y = (h - self.h) as f64;
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 || self.x > max_x {
            self.vx = -self.vx;
            self.x = self.x.clamp(0.0, max_x);
        }
        if self.y < 0.0 || self.y > max_y {
            self.vy = -self.vy;
            self.y = self.y.clamp(0.0, max_y);
        }
    }
}

pub fn generate_sequence(seed: u64, h: usize, w: usize, c: usize, q: usize) -> Result<ToySequence> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("grid must be at least 8x8, got {h}x{w}")));
    }
    if q < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {q}")));
    }
    if c == 0 {
        return Err(Error::InvalidArgument("need at least one feature channel".into()));
    }
    let mut rng = rng(seed);
    let n_noise = c.saturating_sub(3).max(1);
    let n_src = 3 + n_noise;
    let scale = 1.0 / (n_src as f64).sqrt();
    let mixing: Vec<f64> = (0..c * n_src)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();

    let tw = w / 2 + rng.random_range(0..=w / 8);
    let th = h / 2 + rng.random_range(0..=h / 8);
    let speed = |rng: &mut rand_chacha::ChaCha8Rng| {
        let v: f64 = rng.random_range(0.5..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    };
    let mut target = Target {
        x: rng.random_range(0..=w - tw) as f64,
        y: rng.random_range(0..=h - th) as f64,
        vx: speed(&mut rng),
        vy: speed(&mut rng),
        w: tw,
        h: th,
    };

    let noise = Normal::new(0.0, INDICATOR_NOISE).expect("valid noise scale");
    let xs = |col: usize| 2.0 * col as f64 / (w - 1) as f64 - 1.0;
    let ys = |row: usize| 2.0 * row as f64 / (h - 1) as f64 - 1.0;
    let mut frames = Vec::with_capacity(q);
    let mut src = vec![0.0; n_src];
    for _ in 0..q {
        let mask = target.mask(h, w);
        let mut features = vec![0.0; h * w * c];
        let mut indicator = vec![0.0; h * w];
        for p in 0..h * w {
            src[0] = mask.data()[p] + noise.sample(&mut rng);
            src[1] = xs(p % w);
            src[2] = ys(p / w);
            for s in src.iter_mut().skip(3) {
                *s = StandardNormal.sample(&mut rng);
            }
            indicator[p] = src[0];
            for (ch, out) in features[p * c..(p + 1) * c].iter_mut().enumerate() {
                *out = mixing[ch * n_src..(ch + 1) * n_src]
                    .iter()
                    .zip(&src)
                    .map(|(a, s)| a * s)
                    .sum();
            }
        }
        frames.push(ToyFrame {
            features: Tensor::new(vec![h, w, c], features)?,
            mask,
            indicator: Tensor::new(vec![h, w, 1], indicator)?,
        });
        target.advance(h, w);
    }
    Ok(ToySequence { frames, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::iou;

    #[test]
    fn deterministic() {
        let a = generate_sequence(9, 16, 16, 8, 4).unwrap();
        let b = generate_sequence(9, 16, 16, 8, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(10, 16, 16, 8, 4).unwrap();
        assert_ne!(a.frames[0].features, c.frames[0].features);
    }

    #[test]
    fn shapes_and_binary_masks() {
        let s = generate_sequence(1, 12, 10, 5, 2).unwrap();
        assert_eq!(s.frames.len(), 2);
        for f in &s.frames {
            assert_eq!(f.features.shape(), &[12, 10, 5]);
            assert_eq!(f.mask.shape(), &[12, 10, 1]);
            assert!(f.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(f.mask.data().contains(&1.0));
        }
    }

    #[test]
    fn target_moves() {
        let s = generate_sequence(4, 16, 16, 8, 6).unwrap();
        assert_ne!(s.frames[0].mask, s.frames[5].mask);
    }

    #[test]
    fn indicator_recovers_mask() {
        let mut total = 0.0;
        let mut n = 0.0;
        for seed in 0..10 {
            let s = generate_sequence(seed, 16, 16, 8, 4).unwrap();
            for f in &s.frames {
                let pred = f.indicator.map(|v| f64::from(v > 0.5));
                total += iou(&pred, &f.mask);
                n += 1.0;
            }
        }
        let mean = total / n;
        assert!(mean >= 0.8, "mean IoU {mean}");
        assert!((mean - 0.863355).abs() < 1e-6, "regression value moved: {mean}");
    }

    #[test]
    fn rejects_degenerate() {
        assert!(generate_sequence(0, 7, 16, 8, 4).is_err());
        assert!(generate_sequence(0, 16, 16, 8, 1).is_err());
        assert!(generate_sequence(0, 16, 16, 0, 4).is_err());
    }
}
