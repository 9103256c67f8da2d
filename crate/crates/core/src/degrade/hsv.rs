//! RGB <-> HSV hexcone conversion. Hue is stored as a fraction of a turn
//! in [0,1); achromatic pixels take hue 0 by convention.

use crate::error::{IonError, Result};
use crate::image::{ColorSpace, Image};

#[inline]
pub fn rgb_px_to_hsv(px: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = px;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else {
        let h6 = if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        };
        let h = h6 / 6.0;
        if h >= 1.0 {
            h - 1.0
        } else {
            h
        }
    };
    [h, s, v]
}

#[inline]
pub fn hsv_px_to_rgb(px: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = px;
    if s <= 0.0 {
        return [v, v, v];
    }
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as i32).clamp(0, 5);
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Converts an RGB-tagged image to HSV storage.
pub fn rgb_to_hsv(img: &Image) -> Result<Image> {
    if img.space != ColorSpace::Rgb {
        return Err(IonError::InvalidArg {
            op: "rgb_to_hsv",
            detail: "image is not tagged RGB".into(),
        });
    }
    let mut out = img.clone();
    out.space = ColorSpace::Hsv;
    for px in out.pixels.chunks_mut(3) {
        let hsv = rgb_px_to_hsv([px[0], px[1], px[2]]);
        px.copy_from_slice(&hsv);
    }
    Ok(out)
}

/// Converts an HSV-tagged image back to RGB storage.
pub fn hsv_to_rgb(img: &Image) -> Result<Image> {
    if img.space != ColorSpace::Hsv {
        return Err(IonError::InvalidArg {
            op: "hsv_to_rgb",
            detail: "image is not tagged HSV".into(),
        });
    }
    let mut out = img.clone();
    out.space = ColorSpace::Rgb;
    for px in out.pixels.chunks_mut(3) {
        let rgb = hsv_px_to_rgb([px[0], px[1], px[2]]);
        px.copy_from_slice(&rgb);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn primary_colours_and_grey() {
        assert_eq!(rgb_px_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        let [h, s, v] = rgb_px_to_hsv([0.5, 0.5, 0.5]);
        assert_eq!((h, s, v), (0.0, 0.0, 0.5));
        let [h, _, _] = rgb_px_to_hsv([0.0, 1.0, 0.0]);
        assert!((h - 1.0 / 3.0).abs() < 1e-6);
        let [h, _, _] = rgb_px_to_hsv([0.0, 0.0, 1.0]);
        assert!((h - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn round_trip_within_1e5() {
        let mut rng = crate::rng::rng_from(21, "hsv", 0);
        let mut img = Image::new(8, 8, ColorSpace::Rgb);
        for v in img.pixels.iter_mut() {
            *v = rng.gen_range(0.0..=1.0);
        }
        let back = hsv_to_rgb(&rgb_to_hsv(&img).unwrap()).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn wrong_tag_rejected() {
        let img = Image::new(2, 2, ColorSpace::Rgb);
        assert!(hsv_to_rgb(&img).is_err());
        let hsv = rgb_to_hsv(&img).unwrap();
        assert!(rgb_to_hsv(&hsv).is_err());
    }
}
