//! Training-time image augmentation and input standardization.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationParams {
    pub enabled: bool,
    /// Rotation angle is drawn from `[-limit, +limit]` degrees.
    pub rotation_limit_deg: f64,
    /// Box-blur kernel size range; only odd sizes are drawn.
    pub blur_limit: (u32, u32),
    /// Additive brightness offset range (fraction of full scale).
    pub brightness_limit: (f64, f64),
    /// Contrast gain range, applied as `1 + c`.
    pub contrast_limit: (f64, f64),
    /// Number of zero-filled rectangles.
    pub holes: (u32, u32),
    /// Side length range of each rectangle, pixels.
    pub hole_size: (u32, u32),
    pub normalization_mean: [f32; 3],
    pub normalization_std: [f32; 3],
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            enabled: true,
            rotation_limit_deg: 15.0,
            blur_limit: (1, 9),
            brightness_limit: (-0.2, 0.4),
            contrast_limit: (-0.2, 0.4),
            holes: (5, 10),
            hole_size: (8, 8),
            normalization_mean: [0.485, 0.456, 0.406],
            normalization_std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationParams {
    /// Inference path: replicate and standardize only.
    pub fn disabled() -> Self {
        AugmentationParams {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(format!("augmentation: {m}")));
        if !(self.rotation_limit_deg >= 0.0) {
            return bad("rotation_limit_deg must be >= 0");
        }
        if self.blur_limit.0 < 1 || self.blur_limit.0 > self.blur_limit.1 {
            return bad("blur_limit must satisfy 1 <= lo <= hi");
        }
        if !(self.brightness_limit.0 <= self.brightness_limit.1)
            || !(self.contrast_limit.0 <= self.contrast_limit.1)
        {
            return bad("brightness/contrast ranges must be ordered");
        }
        if self.holes.0 > self.holes.1 || self.hole_size.0 > self.hole_size.1 || self.hole_size.0 == 0 {
            return bad("hole ranges must be ordered and non-empty");
        }
        if self.normalization_std.iter().any(|s| !(*s > 0.0)) {
            return bad("normalization_std must be positive");
        }
        Ok(())
    }
}

/// Bilinear rotation about the image centre; uncovered pixels become 0.
pub(crate) fn rotate(img: &Array2<f32>, degrees: f64) -> Array2<f32> {
    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(r, col)| {
        let (y, x) = (r as f64 - cy, col as f64 - cx);
        // Inverse mapping: source = R(-theta) * destination.
        let sx = c * x + s * y + cx;
        let sy = -s * x + c * y + cy;
        if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
            return 0.0;
        }
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Separable box blur with edge replication.
pub(crate) fn box_blur(img: &Array2<f32>, k: usize) -> Array2<f32> {
    if k <= 1 {
        return img.clone();
    }
    let r = (k / 2) as isize;
    let (h, w) = img.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = Array2::from_shape_fn((h, w), |(y, x)| {
        (-r..=r).map(|d| img[[y, clamp(x as isize + d, w)]]).sum::<f32>() / k as f32
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        (-r..=r).map(|d| horiz[[clamp(y as isize + d, h), x]]).sum::<f32>() / k as f32
    })
}

fn odd_kernel<R: Rng>(rng: &mut R, (lo, hi): (u32, u32)) -> usize {
    let lo = if lo % 2 == 0 { lo + 1 } else { lo };
    let hi = if hi % 2 == 0 { hi - 1 } else { hi };
    if hi < lo {
        return 1;
    }
    let choices = (hi - lo) / 2 + 1;
    (lo + 2 * rng.gen_range(0..choices)) as usize
}

/// Replicate a single-channel image to three channels and standardize each
/// with its mean and std.
pub fn standardize(image: &Array2<f32>, params: &AugmentationParams) -> Array3<f32> {
    let (h, w) = image.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        (image[[y, x]] - params.normalization_mean[c]) / params.normalization_std[c]
    })
}

/// Apply rotation, blur, brightness/contrast jitter and hole masking (when
/// enabled), then [`standardize`]. All randomness comes from `rng`.
pub fn augment<R: Rng>(image: &Array2<f32>, params: &AugmentationParams, rng: &mut R) -> Array3<f32> {
    if !params.enabled {
        return standardize(image, params);
    }
    let angle = if params.rotation_limit_deg > 0.0 {
        rng.gen_range(-params.rotation_limit_deg..=params.rotation_limit_deg)
    } else {
        0.0
    };
    let mut img = rotate(image, angle);

    let k = odd_kernel(rng, params.blur_limit);
    img = box_blur(&img, k);

    let draw = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let alpha = 1.0 + draw(rng, params.contrast_limit) as f32;
    let beta = draw(rng, params.brightness_limit) as f32;
    img.mapv_inplace(|v| (alpha * v + beta).clamp(0.0, 1.0));

    let (h, w) = img.dim();
    let n_holes = rng.gen_range(params.holes.0..=params.holes.1);
    for _ in 0..n_holes {
        let hh = (rng.gen_range(params.hole_size.0..=params.hole_size.1) as usize).min(h);
        let hw = (rng.gen_range(params.hole_size.0..=params.hole_size.1) as usize).min(w);
        let y = rng.gen_range(0..=h - hh);
        let x = rng.gen_range(0..=w - hw);
        img.slice_mut(ndarray::s![y..y + hh, x..x + hw]).fill(0.0);
    }
    standardize(&img, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image() -> Array2<f32> {
        Array2::from_shape_fn((150, 150), |(y, x)| ((x + 2 * y) % 150) as f32 / 149.0)
    }

    #[test]
    fn disabled_only_standardizes() {
        let p = AugmentationParams::disabled();
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &p, &mut rng);
        assert_eq!(out.dim(), (3, 150, 150));
        for c in 0..3 {
            let expect = (img[[7, 9]] - p.normalization_mean[c]) / p.normalization_std[c];
            assert_eq!(out[[c, 7, 9]], expect);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = AugmentationParams::default();
        let img = test_image();
        let a = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(5));
        let c = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rotation_within_limit() {
        // A single bright pixel at radius 60 moves along an arc of at most 15 degrees.
        let mut img = Array2::zeros((150, 150));
        img[[74, 134]] = 1.0;
        let p = AugmentationParams {
            blur_limit: (1, 1),
            brightness_limit: (0.0, 0.0),
            contrast_limit: (0.0, 0.0),
            holes: (0, 0),
            ..Default::default()
        };
        for seed in 0..50 {
            let out = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(seed));
            let ch = out.index_axis(ndarray::Axis(0), 0);
            let ((r, c), _) = ch
                .indexed_iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let angle = (74.5 - r as f64).atan2(c as f64 - 74.5).to_degrees();
            assert!(angle.abs() <= 15.0 + 2.0, "angle {angle}");
        }
    }

    #[test]
    fn holes_and_kernel_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let k = odd_kernel(&mut rng, (1, 9));
            assert!(k % 2 == 1 && (1..=9).contains(&k));
        }
        let img = Array2::from_elem((150, 150), 0.5f32);
        let p = AugmentationParams {
            rotation_limit_deg: 0.0,
            blur_limit: (1, 1),
            brightness_limit: (0.0, 0.0),
            contrast_limit: (0.0, 0.0),
            ..Default::default()
        };
        let out = augment(&img, &p, &mut rng);
        let zero_level = (0.0 - p.normalization_mean[0]) / p.normalization_std[0];
        let masked = out.index_axis(ndarray::Axis(0), 0).iter().filter(|&&v| v == zero_level).count();
        assert!(masked >= 64 && masked <= 10 * 64, "{masked}");
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Array2::from_elem((20, 20), 0.3f32);
        let out = box_blur(&img, 9);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn validation() {
        assert!(AugmentationParams::default().validate().is_ok());
        let p = AugmentationParams { rotation_limit_deg: -1.0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = AugmentationParams { holes: (10, 5), ..Default::default() };
        assert!(p.validate().is_err());
    }
}
