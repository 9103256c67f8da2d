//! Synthetic classification scenes: one of six anti-aliased shapes at a
//! random pose and colour over a textured background. Labels cycle through
//! the classes so any multiple of six is exactly balanced.

use super::draw::*;
use super::ClsSample;
use crate::image::{ColorSpace, Image};
use crate::rng::{rng_from, Rng};
use rand::Rng as _;

pub const CLS_CLASSES: usize = 6;
pub const CLS_CLASS_NAMES: [&str; CLS_CLASSES] =
    ["circle", "square", "triangle", "cross", "ring", "bar"];

/// Generates `n` samples of `size` x `size` pixels, deterministic in
/// `seed`. Sample `i` has label `i % 6`.
pub fn gen_shapes_cls(n: usize, size: usize, seed: u64) -> Vec<ClsSample> {
    (0..n)
        .map(|i| {
            let label = (i % CLS_CLASSES) as u32;
            let mut rng = rng_from(seed, "shapes_cls", i as u64);
            let image = render(label, size, &mut rng);
            ClsSample { image, label, domain: "clean".to_string() }
        })
        .collect()
}

fn render(label: u32, size: usize, rng: &mut Rng) -> Image {
    let s = size as f32;
    let base: [f32; 3] = [
        rng.gen_range(0.35..0.65),
        rng.gen_range(0.35..0.65),
        rng.gen_range(0.35..0.65),
    ];
    // low-frequency texture so the scene is not trivially flat
    let fx = rng.gen_range(0.5..2.0);
    let fy = rng.gen_range(0.5..2.0);
    let (ph1, ph2) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
    let amp = 0.05;

    let pose = Pose {
        cx: rng.gen_range(0.34 * s..0.66 * s),
        cy: rng.gen_range(0.34 * s..0.66 * s),
        rot: rng.gen_range(0.0..std::f32::consts::TAU),
    };
    let r = rng.gen_range(0.22 * s..0.34 * s);
    let contrast: f32 = rng.gen_range(0.15..0.30);
    let signs: [f32; 3] = [
        if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
    ];
    let shape_colour = [
        (base[0] + signs[0] * contrast).clamp(0.02, 0.98),
        (base[1] + signs[1] * contrast).clamp(0.02, 0.98),
        (base[2] + signs[2] * contrast).clamp(0.02, 0.98),
    ];

    let mut img = Image::new(size, size, ColorSpace::Rgb);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let tex = amp
                * (std::f32::consts::TAU * fx * xf / s + ph1).sin()
                * (std::f32::consts::TAU * fy * yf / s + ph2).sin();
            let bg = [
                (base[0] + tex).clamp(0.0, 1.0),
                (base[1] + tex).clamp(0.0, 1.0),
                (base[2] + tex).clamp(0.0, 1.0),
            ];
            let (lx, ly) = pose.local(xf, yf);
            let sd = match label {
                0 => sd_circle(lx, ly, r),
                1 => sd_box(lx, ly, 0.8 * r, 0.8 * r),
                2 => sd_triangle(lx, ly, 1.1 * r),
                3 => sd_cross(lx, ly, r),
                4 => sd_ring(lx, ly, r),
                _ => sd_box(lx, ly, r, r / 3.2),
            };
            img.set(y, x, mix3(bg, shape_colour, coverage(sd)));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let a = gen_shapes_cls(12, 32, 5);
        let b = gen_shapes_cls(12, 32, 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.pixels, y.image.pixels);
            assert_eq!(x.label, y.label);
        }
        let c = gen_shapes_cls(12, 32, 6);
        assert!(a.iter().zip(&c).any(|(x, y)| x.image.pixels != y.image.pixels));
    }

    #[test]
    fn labels_are_exactly_balanced() {
        let samples = gen_shapes_cls(600, 32, 1);
        let mut hist = [0usize; CLS_CLASSES];
        for s in &samples {
            hist[s.label as usize] += 1;
        }
        assert_eq!(hist, [100; CLS_CLASSES]);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for s in gen_shapes_cls(18, 32, 2) {
            assert!(s.image.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
