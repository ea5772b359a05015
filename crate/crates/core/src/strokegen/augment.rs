//! Random resized crop applied jointly to an input image and its targets.
//!
//! The crop rectangle lives in normalized `[0, 1]` coordinates, so one draw
//! applies to rasters of different sizes.

use rand::Rng;

use super::Image;
use crate::error::{Result, SaeError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub attempts: usize,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams { scale: (0.8, 1.0), ratio: (3.0 / 4.0, 4.0 / 3.0), attempts: 10 }
    }
}

/// Normalized crop box: origin `(x, y)` and extent `(w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropRect {
    pub const FULL: CropRect = CropRect { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cropped {
    pub input: Image,
    pub targets: Vec<Image>,
    pub rect: CropRect,
}

/// Draws a rectangle with area fraction in `scale` and aspect ratio in `ratio`
/// (log-uniform). Falls back to the full image when every attempt overflows.
pub fn sample_crop_rect<R: Rng + ?Sized>(rng: &mut R, p: &CropParams) -> CropRect {
    let (lr0, lr1) = (p.ratio.0.ln(), p.ratio.1.ln());
    for _ in 0..p.attempts {
        let area = rng.gen_range(p.scale.0..=p.scale.1);
        let aspect = rng.gen_range(lr0..=lr1).exp();
        let w = (area * aspect).sqrt();
        let h = (area / aspect).sqrt();
        if w <= 1.0 && h <= 1.0 {
            let x = rng.gen_range(0.0..=1.0 - w);
            let y = rng.gen_range(0.0..=1.0 - h);
            return CropRect { x, y, w, h };
        }
    }
    CropRect::FULL
}

/// Bilinear resample of `rect` back to the full raster size.
pub fn apply_crop(img: &Image, rect: &CropRect) -> Image {
    let n = img.size();
    let s = n as f64;
    let src = img.pixels();
    let sample = |fx: f64, fy: f64| -> f64 {
        let fx = fx.clamp(0.0, s - 1.0);
        let fy = fy.clamp(0.0, s - 1.0);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let top = src[y0 * n + x0] * (1.0 - tx) + src[y0 * n + x1] * tx;
        let bot = src[y1 * n + x0] * (1.0 - tx) + src[y1 * n + x1] * tx;
        top * (1.0 - ty) + bot * ty
    };
    let mut out = Image::blank(n);
    let px = out.pixels_mut();
    for v in 0..n {
        let fy = (rect.y + (v as f64 + 0.5) / s * rect.h) * s - 0.5;
        for u in 0..n {
            let fx = (rect.x + (u as f64 + 0.5) / s * rect.w) * s - 0.5;
            px[v * n + u] = sample(fx, fy);
        }
    }
    out
}

/// Applies one sampled rectangle to `input` and every target.
pub fn random_resized_crop<R: Rng + ?Sized>(
    input: &Image,
    targets: &[Image],
    rng: &mut R,
    params: &CropParams,
) -> Result<Cropped> {
    let (s0, s1) = params.scale;
    let (r0, r1) = params.ratio;
    if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
        return Err(SaeError::Range(format!("invalid crop parameters {params:?}")));
    }
    if let Some(t) = targets.windows(2).find(|w| w[0].size() != w[1].size()) {
        return Err(SaeError::dim(format!(
            "crop targets differ in size ({} vs {})",
            t[0].size(),
            t[1].size()
        )));
    }
    let rect = sample_crop_rect(rng, params);
    Ok(Cropped {
        input: apply_crop(input, &rect),
        targets: targets.iter().map(|t| apply_crop(t, &rect)).collect(),
        rect,
    })
}
