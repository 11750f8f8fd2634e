//! Sprite rasterizer with exact foreground masks.
//!
//! Rendering is pure: same identity + context + resolution gives the same
//! pixels. Coverage is estimated with 4x4 supersampling. A pixel belongs to
//! the foreground mask when at least half of its subsamples fall inside the
//! shape; masked pixels take their color purely from the identity (no
//! background blending), so the foreground is background-independent by
//! construction. Pixels below half coverage are alpha-blended for
//! anti-aliasing.

use super::{RenderContext, Shape, SpriteIdentity};
use crate::error::{Error, Result};

const SUPERSAMPLE: usize = 4;

/// An H x W x 3 image with values in [0, 1] plus a binary H x W mask, both in
/// row-major order.
#[derive(Debug, Clone)]
pub struct RenderedSprite {
    pub resolution: usize,
    /// len = resolution * resolution * 3, interleaved RGB.
    pub image: Vec<f32>,
    /// len = resolution * resolution, values 0 or 1.
    pub mask: Vec<u8>,
}

impl RenderedSprite {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// Area of the unit-circumradius shape primitive. Used by tests as an
/// independent oracle for rasterized mask areas.
pub fn unit_shape_area(shape: Shape) -> f64 {
    match shape {
        Shape::Circle => std::f64::consts::PI,
        // Equilateral triangle with circumradius 1.
        Shape::Triangle => 3.0 * 3f64.sqrt() / 4.0,
        // Square with circumradius 1 (half-diagonal 1, side sqrt(2)).
        Shape::Square => 2.0,
        // Five-pointed star: 10-gon with alternating radii 1 and STAR_INNER.
        Shape::Star => 5.0 * STAR_INNER * (std::f64::consts::PI / 5.0).sin(),
    }
}

const STAR_INNER: f64 = 0.45;

fn shape_vertices(shape: Shape) -> Vec<(f64, f64)> {
    let polygon = |n: usize, radii: &dyn Fn(usize) -> f64| -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let theta = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                (radii(i) * theta.cos(), radii(i) * theta.sin())
            })
            .collect()
    };
    match shape {
        Shape::Triangle => polygon(3, &|_| 1.0),
        Shape::Star => polygon(10, &|i| if i % 2 == 0 { 1.0 } else { STAR_INNER }),
        _ => Vec::new(),
    }
}

fn point_in_polygon(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if ((yi > y) != (yj > y)) && (x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn inside_unit_shape(shape: Shape, verts: &[(f64, f64)], u: f64, v: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= 1.0,
        Shape::Square => u.abs().max(v.abs()) <= std::f64::consts::FRAC_1_SQRT_2,
        Shape::Triangle | Shape::Star => point_in_polygon(verts, u, v),
    }
}

/// Stripe texture in sprite-local coordinates: a sinusoidal mix of the two
/// identity colors, independent of the render context.
fn texture_color(id: &SpriteIdentity, u: f64, v: f64) -> [f64; 3] {
    let phase = 2.0 * std::f64::consts::PI * id.texture_freq * (u + 0.31 * v);
    let m = 0.5 + 0.5 * phase.sin();
    [
        id.primary_color[0] * m + id.secondary_color[0] * (1.0 - m),
        id.primary_color[1] * m + id.secondary_color[1] * (1.0 - m),
        id.primary_color[2] * m + id.secondary_color[2] * (1.0 - m),
    ]
}

/// Rasterize `id` under `ctx` onto a `resolution`-sized canvas.
pub fn render(id: &SpriteIdentity, ctx: &RenderContext, resolution: usize) -> Result<RenderedSprite> {
    if resolution != 32 && resolution != 64 {
        return Err(Error::contract(format!(
            "resolution must be 32 or 64, got {resolution}"
        )));
    }
    id.validate()?;
    if ctx.scale <= 0.0 {
        return Err(Error::contract("context scale must be > 0"));
    }
    let half = resolution as f64 / 2.0;
    for axis in 0..2 {
        if ctx.position[axis].abs() + ctx.scale > half {
            return Err(Error::OutOfBounds(format!(
                "position {:?} with scale {} exceeds canvas of side {}",
                ctx.position, ctx.scale, resolution
            )));
        }
    }

    let verts = shape_vertices(id.shape);
    let center = (half + ctx.position[0], half + ctx.position[1]);
    let rot = ctx.rotation.to_radians();
    let (sin_r, cos_r) = rot.sin_cos();
    let to_local = |px: f64, py: f64| -> (f64, f64) {
        let dx = px - center.0;
        let dy = py - center.1;
        // Inverse rotation then inverse scale.
        let u = (dx * cos_r + dy * sin_r) / ctx.scale;
        let v = (-dx * sin_r + dy * cos_r) / ctx.scale;
        (u, v)
    };

    let mut image = vec![0f32; resolution * resolution * 3];
    let mut mask = vec![0u8; resolution * resolution];
    let ss = SUPERSAMPLE as f64;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut hits = 0usize;
            let mut fg = [0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / ss;
                    let py = y as f64 + (sy as f64 + 0.5) / ss;
                    let (u, v) = to_local(px, py);
                    if inside_unit_shape(id.shape, &verts, u, v) {
                        hits += 1;
                        let c = texture_color(id, u, v);
                        fg[0] += c[0];
                        fg[1] += c[1];
                        fg[2] += c[2];
                    }
                }
            }
            let total = SUPERSAMPLE * SUPERSAMPLE;
            let coverage = hits as f64 / total as f64;
            let idx = (y * resolution + x) * 3;
            if hits > 0 {
                fg = [fg[0] / hits as f64, fg[1] / hits as f64, fg[2] / hits as f64];
            }
            let is_fg = coverage >= 0.5;
            mask[y * resolution + x] = is_fg as u8;
            for ch in 0..3 {
                let value = if is_fg {
                    fg[ch]
                } else {
                    ctx.background_color[ch] * (1.0 - coverage) + fg[ch] * coverage
                };
                image[idx + ch] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let rendered = RenderedSprite {
        resolution,
        image,
        mask,
    };
    debug_assert!(rendered.mask_area() > 0, "valid context rendered empty mask");
    Ok(rendered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprite::generate_identity;

    fn centered_ctx(scale: f64) -> RenderContext {
        RenderContext {
            background_color: [0.2, 0.4, 0.6],
            position: [0.0, 0.0],
            rotation: 0.0,
            scale,
        }
    }

    #[test]
    fn mask_area_matches_analytic_shape_area() {
        for seed in 0..12u64 {
            let id = generate_identity(seed);
            let resolution = 32;
            let scale = 9.0;
            let out = render(&id, &centered_ctx(scale), resolution).unwrap();
            let analytic = unit_shape_area(id.shape) * scale * scale;
            let canvas = (resolution * resolution) as f64;
            let diff = (out.mask_area() as f64 - analytic).abs();
            assert!(
                diff <= 0.02 * canvas,
                "shape {:?}: mask {} vs analytic {:.1}",
                id.shape,
                out.mask_area(),
                analytic
            );
        }
    }

    #[test]
    fn foreground_pixels_ignore_background() {
        let id = generate_identity(5);
        let mut ctx_a = centered_ctx(8.0);
        let mut ctx_b = centered_ctx(8.0);
        ctx_a.background_color = [0.0, 0.0, 0.0];
        ctx_b.background_color = [1.0, 1.0, 1.0];
        let a = render(&id, &ctx_a, 32).unwrap();
        let b = render(&id, &ctx_b, 32).unwrap();
        assert_eq!(a.mask, b.mask);
        for (i, &m) in a.mask.iter().enumerate() {
            if m == 1 {
                for ch in 0..3 {
                    assert_eq!(a.image[i * 3 + ch], b.image[i * 3 + ch]);
                }
            }
        }
    }

    #[test]
    fn mask_is_never_empty_for_valid_context() {
        for seed in 0..8u64 {
            let id = generate_identity(seed);
            let out = render(&id, &centered_ctx(6.0), 32).unwrap();
            assert!(out.mask_area() > 0);
        }
    }

    #[test]
    fn off_canvas_context_is_rejected() {
        let id = generate_identity(0);
        let mut ctx = centered_ctx(8.0);
        ctx.position = [12.0, 0.0];
        let err = render(&id, &ctx, 32).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds(_)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let id = generate_identity(9);
        let ctx = centered_ctx(7.5);
        let a = render(&id, &ctx, 64).unwrap();
        let b = render(&id, &ctx, 64).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }
}
