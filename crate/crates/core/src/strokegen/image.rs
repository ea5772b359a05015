use std::io::Write;
use std::path::Path;

use crate::error::{Result, SaeError};
use crate::tensor::Tensor;

/// Square grayscale raster, row-major, values in `[0, 1]` with ink = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn blank(size: usize) -> Self {
        Image { size, pixels: vec![0.0; size * size] }
    }

    pub fn from_pixels(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if size == 0 || pixels.len() != size * size {
            return Err(SaeError::dim(format!(
                "{} pixels do not form a {size}x{size} image",
                pixels.len()
            )));
        }
        Ok(Image { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.size + x]
    }

    pub fn is_blank(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0.0)
    }

    /// Pixel-wise maximum.
    pub fn max_with(&self, other: &Image) -> Image {
        assert_eq!(self.size, other.size);
        Image {
            size: self.size,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    /// True when every pixel of `self` is ≥ the matching pixel of `other`.
    pub fn dominates(&self, other: &Image) -> bool {
        self.size == other.size && self.pixels.iter().zip(&other.pixels).all(|(a, b)| a >= b)
    }

    pub fn ink_fraction(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(vec![self.size, self.size], self.pixels.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        match *t.shape() {
            [h, w] if h == w => Image::from_pixels(h, t.data().to_vec()),
            _ => Err(SaeError::dim(format!("{:?} is not a square image", t.shape()))),
        }
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.size, other.size);
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.pixels.len() as f64
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_gray(path.as_ref(), img.size, img.size, |x, y| img.get(x, y))
}

fn write_gray(path: &Path, w: usize, h: usize, px: impl Fn(usize, usize) -> f64) -> Result<()> {
    let mut out = Vec::with_capacity(w * h + 32);
    write!(out, "P5\n{w} {h}\n255\n").expect("writing to a Vec cannot fail");
    for y in 0..h {
        for x in 0..w {
            out.push(to_byte(px(x, y)));
        }
    }
    std::fs::write(path, out).map_err(|e| SaeError::io(path, e))
}

/// Grid of equally sized frames: one row per slice, frames left to right.
pub fn write_strip(path: impl AsRef<Path>, rows: &[Vec<Image>]) -> Result<()> {
    let size = rows
        .iter()
        .flatten()
        .next()
        .map(Image::size)
        .ok_or_else(|| SaeError::Usage("strip needs at least one frame".into()))?;
    if rows.iter().flatten().any(|f| f.size() != size) {
        return Err(SaeError::dim("strip frames differ in size"));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    write_gray(path.as_ref(), cols * size, rows.len() * size, |x, y| {
        rows[y / size]
            .get(x / size)
            .map_or(0.0, |f| f.get(x % size, y % size))
    })
}

/// Reads a square binary PGM written by [`write_pgm`] (maxval 255).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| SaeError::io(path, e))?;
    let bad = |m: &str| SaeError::Parse { context: path.display().to_string(), message: m.into() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if w != h || bytes.len() < pos + w * h {
        return Err(bad("expected a square image with full pixel data"));
    }
    let pixels = bytes[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_pixels(w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_on_binary_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Image::from_pixels(3, vec![0., 1., 0., 1., 1., 0., 0., 0., 1.]).unwrap();
        write_pgm(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 9);
        assert_eq!(read_pgm(&p).unwrap(), img);
    }

    #[test]
    fn strip_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        let a = Image::from_pixels(2, vec![1.0; 4]).unwrap();
        let b = Image::blank(2);
        write_strip(&p, &[vec![a.clone(), b.clone()], vec![b, a]]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        let px = &bytes[bytes.len() - 16..];
        assert_eq!(px[0], 255);
        assert_eq!(px[2], 0);
        assert_eq!(px[15], 255);
    }
}
