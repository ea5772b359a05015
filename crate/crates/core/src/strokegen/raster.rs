use super::{CharacterSpec, Image, GLYPH_BOX};
use crate::error::{Result, SaeError};

/// Frame composition: `A` accumulates strokes 1..=t, `B` shows stroke t alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Form {
    A,
    B,
}

impl std::str::FromStr for Form {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Form::A),
            "B" | "b" => Ok(Form::B),
            _ => Err(SaeError::Config(format!("unknown form `{s}`; expected A or B"))),
        }
    }
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Form::A => "A",
            Form::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrokeImageSequence {
    pub label: String,
    pub form: Form,
    pub frames: Vec<Image>,
    /// Real strokes; frames past this index are padding.
    pub stroke_count: usize,
}

impl StrokeImageSequence {
    pub fn frame_size(&self) -> usize {
        self.frames[0].size()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.frames.len()).map(|i| i < self.stroke_count).collect()
    }
}

/// Default pen width in pixels: 6% of the raster side, never below one pixel.
pub fn default_stroke_width(size: usize) -> f64 {
    (0.06 * size as f64).max(1.0)
}

/// Binary mask of one polyline drawn with round caps and joins.
fn stroke_mask(points: &[[f64; 2]], size: usize, width: f64) -> Image {
    let scale = size as f64 / GLYPH_BOX;
    let pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0] * scale, p[1] * scale]).collect();
    let r = width / 2.0;
    let mut img = Image::blank(size);
    for seg in pts.windows(2) {
        let [a, b] = [seg[0], seg[1]];
        let lo_x = (a[0].min(b[0]) - r - 0.5).floor().max(0.0) as usize;
        let hi_x = ((a[0].max(b[0]) + r - 0.5).ceil().max(0.0) as usize).min(size - 1);
        let lo_y = (a[1].min(b[1]) - r - 0.5).floor().max(0.0) as usize;
        let hi_y = ((a[1].max(b[1]) + r - 0.5).ceil().max(0.0) as usize).min(size - 1);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let c = [x as f64 + 0.5, y as f64 + 0.5];
                let t = if len2 > 0.0 {
                    (((c[0] - a[0]) * d[0] + (c[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let px = c[0] - (a[0] + t * d[0]);
                let py = c[1] - (a[1] + t * d[1]);
                if px * px + py * py <= r * r {
                    img.pixels_mut()[y * size + x] = 1.0;
                }
            }
        }
    }
    img
}

/// Renders one frame per stroke at `size`×`size`.
///
/// Pixels are exactly 0 (background) or 1 (ink). A stroke whose points all
/// coincide is rejected, since it would draw nothing but a dot.
pub fn rasterize(spec: &CharacterSpec, size: usize, width: f64, form: Form) -> Result<StrokeImageSequence> {
    if size < 8 || !(width >= 1.0) {
        return Err(SaeError::Range(format!(
            "raster size {size} must be >= 8 and stroke width {width} >= 1"
        )));
    }
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.strokes.len());
    let mut acc = Image::blank(size);
    for (i, s) in spec.strokes.iter().enumerate() {
        let first = s.points[0];
        if s.points.iter().all(|p| *p == first) {
            return Err(SaeError::Render {
                stroke: i,
                message: format!("`{}` stroke {i} has zero length", spec.label),
            });
        }
        let mask = stroke_mask(&s.points, size, width);
        frames.push(match form {
            Form::A => {
                acc = acc.max_with(&mask);
                acc.clone()
            }
            Form::B => mask,
        });
    }
    Ok(StrokeImageSequence {
        label: spec.label.clone(),
        form,
        stroke_count: frames.len(),
        frames,
    })
}

/// The complete character image (last Form A frame).
pub fn render_full(spec: &CharacterSpec, size: usize, width: f64) -> Result<Image> {
    let seq = rasterize(spec, size, width, Form::A)?;
    Ok(seq.frames.into_iter().last().expect("validated specs have strokes"))
}

/// Appends blank frames up to `pad_len`.
pub fn pad_sequence(seq: &StrokeImageSequence, pad_len: usize) -> Result<StrokeImageSequence> {
    if seq.frames.len() > pad_len {
        return Err(SaeError::Range(format!(
            "`{}` has {} frames, more than pad length {pad_len}",
            seq.label,
            seq.frames.len()
        )));
    }
    let mut out = seq.clone();
    let size = seq.frame_size();
    out.frames.resize_with(pad_len, || Image::blank(size));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSample {
    pub k: usize,
    /// Union of the first `k` strokes.
    pub input: Image,
    /// First `k` frames of the source sequence.
    pub targets: Vec<Image>,
}

/// One sample per prefix length `k = 1..=m` of an unpadded Form A sequence.
pub fn make_prefix_samples(seq: &StrokeImageSequence) -> Result<Vec<PrefixSample>> {
    if seq.form != Form::A {
        return Err(SaeError::Usage("prefix samples need a Form A sequence".into()));
    }
    Ok((1..=seq.stroke_count)
        .map(|k| PrefixSample {
            k,
            input: seq.frames[k - 1].clone(),
            targets: seq.frames[..k].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strokegen::{Stroke, StrokeClass};
    use proptest::prelude::*;

    fn spec(lines: &[([f64; 2], [f64; 2])]) -> CharacterSpec {
        CharacterSpec {
            label: "t".into(),
            strokes: lines
                .iter()
                .map(|&(a, b)| Stroke { class: StrokeClass::HORIZONTAL, points: vec![a, b] })
                .collect(),
        }
    }

    #[test]
    fn horizontal_line_covers_the_expected_rows() {
        // Size 32, width 2: a line along y = 16 px covers pixel rows 15 and 16.
        let s = spec(&[([128.0, 512.0], [896.0, 512.0])]);
        let img = render_full(&s, 32, 2.0).unwrap();
        for y in 0..32 {
            let ink: f64 = (0..32).map(|x| img.get(x, y)).sum();
            if y == 15 || y == 16 {
                assert!(ink >= 24.0, "row {y} has {ink}");
            } else {
                assert_eq!(ink, 0.0, "row {y}");
            }
        }
    }

    #[test]
    fn zero_length_stroke_is_a_render_error() {
        let s = spec(&[([10.0, 10.0], [500.0, 10.0]), ([300.0, 300.0], [300.0, 300.0])]);
        match rasterize(&s, 16, 1.0, Form::A) {
            Err(SaeError::Render { stroke, .. }) => assert_eq!(stroke, 1),
            other => panic!("{other:?}"),
        }
        assert!(rasterize(&s, 7, 1.0, Form::A).is_err());
    }

    #[test]
    fn padding_and_mask() {
        let s = spec(&[([10.0, 10.0], [500.0, 10.0]), ([10.0, 900.0], [900.0, 900.0])]);
        let seq = rasterize(&s, 16, 1.0, Form::B).unwrap();
        let padded = pad_sequence(&seq, 5).unwrap();
        assert_eq!(padded.frames.len(), 5);
        assert_eq!(padded.mask(), vec![true, true, false, false, false]);
        assert!(padded.frames[2..].iter().all(Image::is_blank));
        assert!(pad_sequence(&seq, 1).is_err());
    }

    #[test]
    fn prefix_samples_take_leading_frames() {
        let s = spec(&[([10.0, 10.0], [500.0, 10.0]), ([10.0, 900.0], [900.0, 900.0])]);
        let seq = rasterize(&s, 16, 1.0, Form::A).unwrap();
        let samples = make_prefix_samples(&seq).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].targets, vec![samples[0].input.clone()]);
        assert_eq!(samples[1].input, render_full(&s, 16, 1.0).unwrap());
        let b = rasterize(&s, 16, 1.0, Form::B).unwrap();
        assert!(matches!(make_prefix_samples(&b), Err(SaeError::Usage(_))));
    }

    fn arb_spec() -> impl Strategy<Value = CharacterSpec> {
        let pt = (0.0..1024.0f64, 0.0..1024.0f64).prop_map(|(x, y)| [x, y]);
        let stroke = (1u8..=5, proptest::collection::vec(pt, 2..5))
            .prop_filter("non-degenerate", |(_, p)| p.iter().any(|q| *q != p[0]))
            .prop_map(|(c, points)| Stroke { class: StrokeClass::new(c).unwrap(), points });
        proptest::collection::vec(stroke, 1..10)
            .prop_map(|strokes| CharacterSpec { label: "p".into(), strokes })
    }

    proptest! {
        #[test]
        fn form_a_is_monotone_and_binary(s in arb_spec(), size in 8usize..40) {
            let w = default_stroke_width(size);
            let a = rasterize(&s, size, w, Form::A).unwrap();
            prop_assert_eq!(a.frames.len(), s.strokes.len());
            for f in &a.frames {
                prop_assert!(f.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
            }
            for pair in a.frames.windows(2) {
                prop_assert!(pair[1].dominates(&pair[0]));
            }
        }

        #[test]
        fn form_a_final_is_union_of_form_b(s in arb_spec(), size in 8usize..40) {
            let w = default_stroke_width(size);
            let a = rasterize(&s, size, w, Form::A).unwrap();
            let b = rasterize(&s, size, w, Form::B).unwrap();
            let union = b.frames.iter().skip(1).fold(b.frames[0].clone(), |u, f| u.max_with(f));
            prop_assert_eq!(a.frames.last().unwrap(), &union);
        }
    }
}
