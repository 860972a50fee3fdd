use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};

/// Planar RGB image with values in `[0, 1]`, layout `3 x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for (c, v) in rgb.iter().enumerate() {
            img.plane_mut(c).iter_mut().for_each(|p| *p = *v);
        }
        img
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.height * self.width;
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let p = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let p = self.height * self.width;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[p + i] = rgb[1];
        self.data[2 * p + i] = rgb[2];
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            out.set_pixel(
                x as usize,
                y as usize,
                [
                    px[0] as f32 / 255.0,
                    px[1] as f32 / 255.0,
                    px[2] as f32 / 255.0,
                ],
            );
        }
        out
    }

    pub fn to_rgb(&self) -> RgbImage {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb([q(p[0]), q(p[1]), q(p[2])])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_rgb(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb().save(path)?;
        Ok(())
    }

    /// Bilinear sample at continuous position `(x, y)` (pixel `j` covers
    /// `[j, j + 1)`); zero outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
        let mut out = [0.0f32; 3];
        for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
            for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
                let (sx, sy) = (x0 + dx, y0 + dy);
                if sx < 0.0 || sy < 0.0 || sx >= self.width as f64 || sy >= self.height as f64 {
                    continue;
                }
                let wgt = wx * wy;
                if wgt == 0.0 {
                    continue;
                }
                let p = self.pixel(sx as usize, sy as usize);
                for c in 0..3 {
                    out[c] += wgt * p[c];
                }
            }
        }
        out
    }
}

/// 2D affine map `x' = a x + b y + c`, `y' = d x + e y + f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [f64; 6],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self {
            m: [s, 0.0, 0.0, 0.0, s, 0.0],
        }
    }

    /// Rotation about the origin; positive angles turn +x toward +y.
    pub fn rotation_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self {
            m: [c, -s, 0.0, s, c, 0.0],
        }
    }

    pub fn mirror_x() -> Self {
        Self {
            m: [-1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Affine2) -> Affine2 {
        let [a, b, c, d, e, f] = self.m;
        let [p, q, r, s, t, u] = next.m;
        Affine2 {
            m: [
                p * a + q * d,
                p * b + q * e,
                p * c + q * f + r,
                s * a + t * d,
                s * b + t * e,
                s * c + t * f + u,
            ],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return Err(FpdError::InvalidInput("affine map is singular".into()));
        }
        let [a, b, c, d, e, f] = self.m;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Affine2 {
            m: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        })
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [a, b, c, d, e, f] = self.m;
        [a * p[0] + b * p[1] + c, d * p[0] + e * p[1] + f]
    }

    /// Isotropic length scale, `sqrt(|det|)`.
    pub fn scale_factor(&self) -> f64 {
        self.determinant().abs().sqrt()
    }
}

/// Resamples `src` through `forward` (source -> destination coordinates)
/// into an `out_h x out_w` image.
pub fn warp_affine(src: &Image, forward: &Affine2, out_h: usize, out_w: usize) -> Result<Image> {
    let inv = forward.inverse()?;
    let mut out = Image::new(out_h, out_w);
    for v in 0..out_h {
        for u in 0..out_w {
            let [sx, sy] = inv.apply([u as f64 + 0.5, v as f64 + 0.5]);
            out.set_pixel(u, v, src.sample_bilinear(sx, sy));
        }
    }
    Ok(out)
}
