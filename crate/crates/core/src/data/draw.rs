//! Signed-distance helpers for the synthetic scene generators. Coverage is
//! anti-aliased over a one-pixel band around each boundary.

#[derive(Debug, Clone, Copy)]
pub struct Pose {
    pub cx: f32,
    pub cy: f32,
    pub rot: f32,
}

impl Pose {
    /// Rotates a pixel position into shape-local coordinates.
    #[inline]
    pub fn local(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }
}

#[inline]
pub fn sd_circle(px: f32, py: f32, r: f32) -> f32 {
    (px * px + py * py).sqrt() - r
}

/// Chebyshev box: exact on faces, slightly rounded corners; fine for
/// anti-aliasing.
#[inline]
pub fn sd_box(px: f32, py: f32, hx: f32, hy: f32) -> f32 {
    (px.abs() - hx).max(py.abs() - hy)
}

/// Equilateral triangle with circumradius `r`, via its three edge
/// half-planes.
#[inline]
pub fn sd_triangle(px: f32, py: f32, r: f32) -> f32 {
    let inradius = r * 0.5;
    let mut sd = f32::NEG_INFINITY;
    for k in 0..3 {
        let ang = std::f32::consts::FRAC_PI_2 + k as f32 * 2.0 * std::f32::consts::FRAC_PI_3;
        let (s, c) = ang.sin_cos();
        sd = sd.max(px * c + py * s - inradius);
    }
    sd
}

#[inline]
pub fn sd_ring(px: f32, py: f32, r: f32) -> f32 {
    (sd_circle(px, py, 0.0) - 0.75 * r).abs() - 0.28 * r
}

#[inline]
pub fn sd_cross(px: f32, py: f32, r: f32) -> f32 {
    sd_box(px, py, r, r / 3.0).min(sd_box(px, py, r / 3.0, r))
}

/// Anti-aliased coverage from a signed distance in pixels.
#[inline]
pub fn coverage(sd: f32) -> f32 {
    (0.5 - sd).clamp(0.0, 1.0)
}

#[inline]
pub fn mix3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] * (1.0 - t) + b[0] * t,
        a[1] * (1.0 - t) + b[1] * t,
        a[2] * (1.0 - t) + b[2] * t,
    ]
}
