//! Mask-to-box estimation and search-region arithmetic.
//!
//! Pixel `(row i, column j)` sits at continuous coordinate `(x=j, y=i)` with
//! the origin at the top-left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SCALE_CHANGE: f64 = 0.95;
pub const MAX_SCALE_CHANGE: f64 = 1.1;
pub const SEARCH_SCALE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxEstimate {
    pub center: [f64; 2],
    /// `4σ` per axis before the scale-change limit.
    pub raw_size: [f64; 2],
    /// Previous size scaled by the clamped change.
    pub size: [f64; 2],
    pub delta_raw: f64,
    pub delta: f64,
}

/// Centre of mass and variance-based size of a soft mask, with the size
/// change relative to `prev_size` limited to `[0.95, 1.1]`.
pub fn mask_to_box(mask: &Tensor, prev_size: [f64; 2]) -> Result<BoxEstimate> {
    let (h, w, c) = mask.dims3()?;
    if c != 1 {
        return Err(Error::dim("mask channels", 1, c));
    }
    if !(prev_size[0] > 0.0 && prev_size[1] > 0.0) {
        return Err(Error::InvalidArgument(format!("previous size must be positive, got {prev_size:?}")));
    }
    let m = mask.data();
    let z: f64 = m.iter().sum();
    if !(z > 0.0) {
        return Err(Error::EmptyTarget);
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = m[i * w + j];
            cx += j as f64 * v;
            cy += i as f64 * v;
        }
    }
    cx /= z;
    cy /= z;
    let (mut vx, mut vy) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = m[i * w + j];
            vx += (j as f64 - cx).powi(2) * v;
            vy += (i as f64 - cy).powi(2) * v;
        }
    }
    let raw_size = [4.0 * (vx / z).sqrt(), 4.0 * (vy / z).sqrt()];
    let delta_raw = (raw_size[0] * raw_size[1] / (prev_size[0] * prev_size[1])).sqrt();
    let delta = delta_raw.clamp(MIN_SCALE_CHANGE, MAX_SCALE_CHANGE);
    Ok(BoxEstimate {
        center: [cx, cy],
        raw_size,
        size: [delta * prev_size[0], delta * prev_size[1]],
        delta_raw,
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    /// `[x0, y0, width, height]` in image coordinates, inside `[0, W]×[0, H]`.
    pub rect: [f64; 4],
    /// Resampled `(width, height)` fitting inside the requested resolution.
    pub out_size: [usize; 2],
}

/// Crop `scale_factor` times the box, centred on it, limited to the image
/// and shifted back inside it.
pub fn search_region(
    bbox: &BoxEstimate,
    image_size: [f64; 2],
    scale_factor: f64,
    out_resolution: [usize; 2],
) -> Result<SearchRegion> {
    if !(image_size[0] > 0.0 && image_size[1] > 0.0) || out_resolution.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "degenerate image {image_size:?} or output {out_resolution:?}"
        )));
    }
    if !(bbox.size[0] > 0.0 && bbox.size[1] > 0.0) {
        return Err(Error::InvalidArgument("box size must be positive".into()));
    }
    let mut rect = [0.0; 4];
    for axis in 0..2 {
        let extent = (scale_factor * bbox.size[axis]).min(image_size[axis]);
        let start = (bbox.center[axis] - extent / 2.0).clamp(0.0, image_size[axis] - extent);
        rect[axis] = start;
        rect[axis + 2] = extent;
    }
    let s = (out_resolution[0] as f64 / rect[2]).min(out_resolution[1] as f64 / rect[3]);
    let out_size = [
        ((rect[2] * s).round() as usize).clamp(1, out_resolution[0]),
        ((rect[3] * s).round() as usize).clamp(1, out_resolution[1]),
    ];
    Ok(SearchRegion { rect, out_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + b.abs())
    }

    #[test]
    fn uniform_square() {
        let prev = 4.0 * 1.25f64.sqrt();
        let b = mask_to_box(&Tensor::filled(&[4, 4], 1.0), [prev, prev]).unwrap();
        assert_eq!(b.center, [1.5, 1.5]);
        assert!(close(b.raw_size[0], 4.0 * 1.25f64.sqrt()));
        assert!(close(b.delta, 1.0));
        assert!(close(b.size[0], prev) && close(b.size[1], prev));
    }

    #[test]
    fn single_pixel_hits_lower_clamp() {
        let mut m = Tensor::zeros(&[8, 8]);
        m.data_mut()[5 * 8 + 3] = 1.0;
        let b = mask_to_box(&m, [10.0, 10.0]).unwrap();
        assert_eq!(b.center, [3.0, 5.0]);
        assert_eq!(b.raw_size, [0.0, 0.0]);
        assert_eq!(b.delta_raw, 0.0);
        assert_eq!(b.delta, 0.95);
        assert!(close(b.size[0], 9.5) && close(b.size[1], 9.5));
    }

    #[test]
    fn doubling_hits_upper_clamp() {
        let m = Tensor::filled(&[4, 4], 1.0);
        let raw = 4.0 * 1.25f64.sqrt();
        let b = mask_to_box(&m, [raw / 2.0, raw / 2.0]).unwrap();
        assert!(close(b.delta_raw, 2.0));
        assert_eq!(b.delta, 1.1);
        assert!(close(b.size[0], 1.1 * raw / 2.0));
    }

    #[test]
    fn empty_mask_signals_empty_target() {
        assert!(matches!(mask_to_box(&Tensor::zeros(&[3, 3]), [1.0, 1.0]), Err(Error::EmptyTarget)));
    }

    fn est(center: [f64; 2], size: [f64; 2]) -> BoxEstimate {
        BoxEstimate {
            center,
            raw_size: size,
            size,
            delta_raw: 1.0,
            delta: 1.0,
        }
    }

    #[test]
    fn region_table() {
        let img = [100.0, 100.0];
        let r = search_region(&est([50.0, 50.0], [10.0, 10.0]), img, SEARCH_SCALE, [832, 480]).unwrap();
        assert_eq!(r.rect, [25.0, 25.0, 50.0, 50.0]);
        assert_eq!(r.out_size, [480, 480]);
        let r = search_region(&est([50.0, 50.0], [30.0, 30.0]), img, SEARCH_SCALE, [832, 480]).unwrap();
        assert_eq!(r.rect, [0.0, 0.0, 100.0, 100.0]);
        // corner cases, worked by hand: 50×50 windows pushed back inside
        let r = search_region(&est([2.0, 2.0], [10.0, 10.0]), img, SEARCH_SCALE, [64, 64]).unwrap();
        assert_eq!(r.rect, [0.0, 0.0, 50.0, 50.0]);
        let r = search_region(&est([98.0, 50.0], [10.0, 10.0]), img, SEARCH_SCALE, [64, 64]).unwrap();
        assert_eq!(r.rect, [50.0, 25.0, 50.0, 50.0]);
        let r = search_region(&est([95.0, 3.0], [4.0, 20.0]), img, SEARCH_SCALE, [64, 64]).unwrap();
        assert_eq!(r.rect, [80.0, 0.0, 20.0, 100.0]);
        assert_eq!(r.out_size, [13, 64]);
    }

    #[test]
    fn region_errors() {
        assert!(search_region(&est([1.0, 1.0], [1.0, 1.0]), [0.0, 10.0], 5.0, [8, 8]).is_err());
        assert!(search_region(&est([1.0, 1.0], [0.0, 1.0]), [10.0, 10.0], 5.0, [8, 8]).is_err());
    }

    fn random_mask(seed: u64, h: usize, w: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Tensor::from_fn(&[h, w], |_| if r.random_bool(0.3) { r.random_range(0.0..1.0) } else { 0.0 });
        m.data_mut()[0] = 0.5;
        m
    }

    proptest! {
        #[test]
        fn translation_equivariance(seed in any::<u64>(), dx in 0usize..5, dy in 0usize..5) {
            let m = random_mask(seed, 6, 7);
            let mut shifted = Tensor::zeros(&[6 + dy, 7 + dx]);
            for i in 0..6 {
                for j in 0..7 {
                    shifted.data_mut()[(i + dy) * (7 + dx) + j + dx] = m.data()[i * 7 + j];
                }
            }
            let a = mask_to_box(&m, [3.0, 3.0]).unwrap();
            let b = mask_to_box(&shifted, [3.0, 3.0]).unwrap();
            prop_assert!((b.center[0] - a.center[0] - dx as f64).abs() < 1e-9);
            prop_assert!((b.center[1] - a.center[1] - dy as f64).abs() < 1e-9);
            prop_assert!((a.size[0] - b.size[0]).abs() < 1e-9 && (a.size[1] - b.size[1]).abs() < 1e-9);
        }

        #[test]
        fn scale_invariance_and_clamp(seed in any::<u64>(), s in 0.01f64..100.0, pw in 0.5f64..20.0, ph in 0.5f64..20.0) {
            let m = random_mask(seed, 9, 5);
            let a = mask_to_box(&m, [pw, ph]).unwrap();
            let b = mask_to_box(&m.scale(s), [pw, ph]).unwrap();
            for k in 0..2 {
                prop_assert!((a.center[k] - b.center[k]).abs() < 1e-9);
                prop_assert!((a.raw_size[k] - b.raw_size[k]).abs() < 1e-9);
            }
            let ratio = (a.size[0] * a.size[1] / (pw * ph)).sqrt();
            prop_assert!((MIN_SCALE_CHANGE - 1e-12..=MAX_SCALE_CHANGE + 1e-12).contains(&ratio));
        }
    }
}
