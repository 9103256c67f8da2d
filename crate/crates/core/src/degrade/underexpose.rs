//! Underexposure simulation: a piecewise-linear compression of the HSV
//! value channel below a per-image threshold, expansion above it.

use super::hsv::{hsv_to_rgb, rgb_to_hsv};
use crate::error::{IonError, Result};
use crate::image::{ColorSpace, Image};
use crate::rng::Rng;
use rand::Rng as _;

/// Lower clamp on theta1; keeps the dark-branch division away from zero for
/// near-black images, and the bright branch valid for near-white ones.
pub const THETA_EPS: f64 = 1e-3;

/// Per-image underexposure parameters. `theta2` is 0.1 * `theta1` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnderexposeParams {
    pub theta1: f64,
    pub theta2: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl UnderexposeParams {
    pub fn from_theta1(theta1: f64, mu: f64, sigma: f64) -> Self {
        UnderexposeParams { theta1, theta2: 0.1 * theta1, mu, sigma }
    }
}

/// Mean and population standard deviation of the value channel (max of
/// R,G,B per pixel) of an RGB image.
pub fn value_stats(img: &Image) -> (f64, f64) {
    let n = (img.height * img.width) as f64;
    let mut sum = 0.0f64;
    for px in img.pixels.chunks(3) {
        sum += px[0].max(px[1]).max(px[2]) as f64;
    }
    let mu = sum / n;
    let mut var = 0.0f64;
    for px in img.pixels.chunks(3) {
        let v = px[0].max(px[1]).max(px[2]) as f64 - mu;
        var += v * v;
    }
    (mu, (var / n).sqrt())
}

/// Draws theta1 uniformly on [max(mu - sigma, eps), mu], clamped into
/// (0,1), and derives theta2 = 0.1 * theta1.
pub fn sample_theta(img: &Image, rng: &mut Rng) -> Result<UnderexposeParams> {
    if img.space != ColorSpace::Rgb {
        return Err(IonError::InvalidArg {
            op: "sample_theta",
            detail: "image must be RGB".into(),
        });
    }
    let (mu, sigma) = value_stats(img);
    let lo = (mu - sigma).max(THETA_EPS);
    let hi = mu.min(1.0 - THETA_EPS);
    let theta1 = if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        // degenerate interval: all-black images land on the lower clamp,
        // all-white ones on the upper
        lo.min(1.0 - THETA_EPS)
    };
    Ok(UnderexposeParams::from_theta1(theta1, mu, sigma))
}

/// The value-channel mapping: compresses below theta1 by theta2/theta1,
/// expands above. Continuous at theta1, fixes 0 and 1.
#[inline]
pub fn map_value(v: f64, p: &UnderexposeParams) -> f64 {
    if v <= p.theta1 {
        v * (p.theta2 / p.theta1)
    } else {
        (1.0 - p.theta2) * (v - p.theta1) / (1.0 - p.theta1) + p.theta2
    }
}

/// Applies the mapping to the V channel in HSV space, leaving H and S
/// untouched, and converts back to RGB.
pub fn underexpose(img: &Image, p: &UnderexposeParams) -> Result<Image> {
    if !(p.theta1 > 0.0 && p.theta1 < 1.0) {
        return Err(IonError::InvalidArg {
            op: "underexpose",
            detail: format!("theta1 must lie in (0,1), got {}", p.theta1),
        });
    }
    let mut hsv = rgb_to_hsv(img)?;
    for px in hsv.pixels.chunks_mut(3) {
        px[2] = map_value(px[2] as f64, p).clamp(0.0, 1.0) as f32;
    }
    hsv_to_rgb(&hsv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(theta1: f64) -> UnderexposeParams {
        UnderexposeParams::from_theta1(theta1, 0.0, 0.0)
    }

    #[test]
    fn dark_branch_is_tenth_of_input() {
        let p = params(0.4);
        for v in [0.0, 0.1, 0.25, 0.4] {
            assert!((map_value(v, &p) - 0.1 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn endpoints_are_fixed() {
        for theta1 in [0.05, 0.3, 0.7, 0.95] {
            let p = params(theta1);
            assert_eq!(map_value(0.0, &p), 0.0);
            assert!((map_value(1.0, &p) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bright_branch_worked_example() {
        // theta1 = 0.4, theta2 = 0.04, v = 0.7:
        // 0.96 * 0.3 / 0.6 + 0.04 = 0.52
        let p = params(0.4);
        assert!((map_value(0.7, &p) - 0.52).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_threshold_and_monotone() {
        for theta1 in [0.1, 0.37, 0.5, 0.81] {
            let p = params(theta1);
            let below = map_value(theta1, &p);
            let above = map_value(theta1 + 1e-12, &p);
            assert!((below - p.theta2).abs() < 1e-12);
            assert!((above - p.theta2).abs() < 1e-6);
            let mut prev = -1.0;
            for i in 0..=1000 {
                let v = i as f64 / 1000.0;
                let m = map_value(v, &p);
                assert!(m >= prev, "not monotone at v={v}");
                assert!((0.0..=1.0).contains(&m));
                prev = m;
            }
        }
    }

    #[test]
    fn sample_theta_examples() {
        // constant V = 0.6: sigma = 0, theta1 = 0.6 exactly
        let img = Image::filled(4, 4, [0.6, 0.6, 0.6]);
        let mut rng = crate::rng::rng_from(1, "theta", 0);
        let p = sample_theta(&img, &mut rng).unwrap();
        assert_eq!(p.sigma, 0.0);
        assert_eq!(p.theta1, 0.6f32 as f64, "zero-width interval: theta1 = mu exactly");
        assert_eq!(p.theta2, 0.1 * (0.6f32 as f64));

        // all black: lower clamp
        let img = Image::filled(4, 4, [0.0; 3]);
        let p = sample_theta(&img, &mut rng).unwrap();
        assert_eq!(p.theta1, THETA_EPS);

        // two-tone {0.2, 0.8}: mu = 0.5, sigma = 0.3, theta1 in [0.2, 0.5]
        let mut img = Image::filled(2, 2, [0.2; 3]);
        img.set(0, 1, [0.8; 3]);
        img.set(1, 1, [0.8; 3]);
        for i in 0..50 {
            let mut rng = crate::rng::rng_from(2, "theta", i);
            let p = sample_theta(&img, &mut rng).unwrap();
            assert!((p.mu - 0.5).abs() < 1e-7);
            assert!((p.sigma - 0.3).abs() < 1e-7);
            assert!(p.theta1 >= 0.2 - 1e-7 && p.theta1 <= 0.5 + 1e-7, "{}", p.theta1);
        }
    }

    #[test]
    fn underexpose_preserves_hue_and_saturation_exactly() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from(3, "hs", 0);
        let mut img = Image::new(6, 6, crate::image::ColorSpace::Rgb);
        for v in img.pixels.iter_mut() {
            *v = rng.gen_range(0.0..=1.0);
        }
        let p = params(0.35);
        // H and S agree before re-conversion: compare HSV of input with the
        // intermediate mapping applied manually
        let hsv_in = super::rgb_to_hsv(&img).unwrap();
        let out = underexpose(&img, &p).unwrap();
        let hsv_out_direct = {
            let mut h = hsv_in.clone();
            for px in h.pixels.chunks_mut(3) {
                px[2] = map_value(px[2] as f64, &p).clamp(0.0, 1.0) as f32;
            }
            h
        };
        let expect = super::hsv_to_rgb(&hsv_out_direct).unwrap();
        assert_eq!(out.pixels, expect.pixels);
        for (a, b) in hsv_in.pixels.chunks(3).zip(hsv_out_direct.pixels.chunks(3)) {
            assert_eq!(a[0], b[0], "hue changed");
            assert_eq!(a[1], b[1], "saturation changed");
        }
    }

    #[test]
    fn invalid_theta_rejected() {
        let img = Image::filled(2, 2, [0.5; 3]);
        assert!(underexpose(&img, &params(0.0)).is_err());
        assert!(underexpose(&img, &params(1.0)).is_err());
    }
}
