//! Stroke data model, ingestion, rasterization and dataset utilities.
//!
//! Characters are ordered lists of strokes; each stroke has one of five
//! classes (horizontal, vertical, left-falling, right-falling, turning) and a
//! centre-line polyline in a 1024×1024 glyph box with y pointing down.

mod augment;
mod image;
mod io;
mod raster;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use augment::{apply_crop, random_resized_crop, sample_crop_rect, CropParams, CropRect, Cropped};
pub use image::{read_pgm, write_pgm, write_strip, Image};
pub use io::{load_stroke_file, parse_stroke_records, save_stroke_file};
pub use raster::{
    default_stroke_width, make_prefix_samples, pad_sequence, rasterize, render_full, Form,
    PrefixSample, StrokeImageSequence,
};
pub use split::{default_test_count, split_classes, DatasetSplit};
pub use synth::{
    builtin_radicals, jitter, render_radical, synthetic_alphabet, Composition, Layout, Radical,
    SyntheticAlphabet,
};

use crate::error::{Result, SaeError};

/// Side of the glyph coordinate box.
pub const GLYPH_BOX: f64 = 1024.0;

/// Largest stroke count a character may have.
pub const MAX_STROKES: usize = 24;

/// One of the five basic stroke categories, encoded 1..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct StrokeClass(u8);

impl StrokeClass {
    pub const HORIZONTAL: StrokeClass = StrokeClass(1);
    pub const VERTICAL: StrokeClass = StrokeClass(2);
    pub const LEFT_FALLING: StrokeClass = StrokeClass(3);
    pub const RIGHT_FALLING: StrokeClass = StrokeClass(4);
    pub const TURNING: StrokeClass = StrokeClass(5);

    pub fn new(code: u8) -> Result<Self> {
        if (1..=5).contains(&code) {
            Ok(StrokeClass(code))
        } else {
            Err(SaeError::Data(format!("stroke class {code} outside 1..=5")))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn digit(self) -> char {
        char::from(b'0' + self.0)
    }
}

impl TryFrom<u8> for StrokeClass {
    type Error = SaeError;

    fn try_from(code: u8) -> Result<Self> {
        StrokeClass::new(code)
    }
}

impl From<StrokeClass> for u8 {
    fn from(c: StrokeClass) -> u8 {
        c.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    #[serde(rename = "class")]
    pub class: StrokeClass,
    /// Centre-line points `[x, y]` in glyph-box units.
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub label: String,
    pub strokes: Vec<Stroke>,
}

impl CharacterSpec {
    /// Checks the stroke-count bound and that every polyline has at least two
    /// points inside the glyph box.
    pub fn validate(&self) -> Result<()> {
        let n = self.strokes.len();
        if n == 0 || n > MAX_STROKES {
            return Err(SaeError::Data(format!(
                "`{}` has {n} strokes; expected 1..={MAX_STROKES}",
                self.label
            )));
        }
        for (i, s) in self.strokes.iter().enumerate() {
            if s.points.len() < 2 {
                return Err(SaeError::Data(format!(
                    "`{}` stroke {i} has {} point(s); need at least 2",
                    self.label,
                    s.points.len()
                )));
            }
            if let Some(p) = s
                .points
                .iter()
                .find(|p| !p.iter().all(|c| c.is_finite() && (0.0..=GLYPH_BOX).contains(c)))
            {
                return Err(SaeError::Data(format!(
                    "`{}` stroke {i} point {p:?} outside the glyph box",
                    self.label
                )));
            }
        }
        Ok(())
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes.len()
    }

    pub fn classes(&self) -> Vec<StrokeClass> {
        self.strokes.iter().map(|s| s.class).collect()
    }
}

/// Concatenated stroke-class digits in writing order, e.g. `"25135451"`.
pub fn encode_strokes(spec: &CharacterSpec) -> String {
    spec.strokes.iter().map(|s| s.class.digit()).collect()
}

/// Inverse of [`encode_strokes`] at the class level.
pub fn decode_stroke_string(s: &str) -> Result<Vec<StrokeClass>> {
    s.bytes()
        .map(|b| {
            if b.is_ascii_digit() {
                StrokeClass::new(b - b'0')
            } else {
                Err(SaeError::Data(format!("`{s}` is not a stroke string")))
            }
        })
        .collect()
}
