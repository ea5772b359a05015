//! Training-example assembly shared by the pipeline drivers.

use rand::Rng;

use crate::error::Result;
use crate::rnt::{RntConfig, RntSample};
use crate::strokegen::{
    apply_crop, default_stroke_width, pad_sequence, rasterize, sample_crop_rect, CharacterSpec, CropParams, Form,
    Image,
};
use crate::vit::{VitConfig, VitSample};

/// ViT examples for each character. With `prefixes`, every prefix length
/// `k = 1..=m` yields one example (input: first `k` strokes, targets: frames
/// `1..=k`); otherwise only the complete character.
pub fn vit_samples(specs: &[CharacterSpec], cfg: &VitConfig, form: Form, prefixes: bool) -> Result<Vec<VitSample>> {
    let w_in = default_stroke_width(cfg.image_size);
    let w_out = default_stroke_width(cfg.frame_size);
    let mut out = Vec::new();
    for spec in specs {
        let input = rasterize(spec, cfg.image_size, w_in, Form::A)?;
        let target = rasterize(spec, cfg.frame_size, w_out, form)?;
        let m = spec.stroke_count();
        let ks = if prefixes { 1 } else { m };
        for k in ks..=m {
            out.push(VitSample { input: input.frames[k - 1].clone(), targets: target.frames[..k].to_vec() });
        }
    }
    Ok(out)
}

/// RNT examples: the full character image and its padded frame sequence.
pub fn rnt_samples(specs: &[CharacterSpec], cfg: &RntConfig, form: Form) -> Result<Vec<RntSample>> {
    let w = default_stroke_width(cfg.image_size);
    specs
        .iter()
        .map(|spec| {
            let seq = rasterize(spec, cfg.image_size, w, form)?;
            let image = rasterize(spec, cfg.image_size, w, Form::A)?.frames.pop().expect("non-empty");
            let frames = pad_sequence(&seq, cfg.pad_len)?.frames;
            Ok(RntSample { image, frames, stroke_count: spec.stroke_count() })
        })
        .collect()
}

/// One crop rectangle applied to an input and all of its targets.
pub fn crop_pair<R: Rng + ?Sized>(input: &Image, targets: &[Image], rng: &mut R, p: &CropParams) -> (Image, Vec<Image>) {
    let rect = sample_crop_rect(rng, p);
    (apply_crop(input, &rect), targets.iter().map(|t| apply_crop(t, &rect)).collect())
}

/// Mean squared value of the frames: the loss of predicting all blanks.
pub fn blank_mse(frames: &[Image]) -> f64 {
    let n: usize = frames.iter().map(|f| f.pixels().len()).sum();
    frames.iter().flat_map(|f| f.pixels()).map(|v| v * v).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strokegen::synthetic_alphabet;

    #[test]
    fn prefix_samples_per_character() {
        let alpha = synthetic_alphabet(12, 12, 0).unwrap();
        let cfg = VitConfig::desk();
        let all = vit_samples(&alpha.chars, &cfg, Form::A, true).unwrap();
        let total: usize = alpha.chars.iter().map(CharacterSpec::stroke_count).sum();
        assert_eq!(all.len(), total);
        let full = vit_samples(&alpha.chars, &cfg, Form::B, false).unwrap();
        assert_eq!(full.len(), 12);
        assert_eq!(full[0].targets.len(), alpha.chars[0].stroke_count());
        assert_eq!(full[0].input.size(), 56);
        assert_eq!(full[0].targets[0].size(), 14);
    }

    #[test]
    fn blank_baseline_is_ink_fraction_on_binary_frames() {
        let f = Image::from_pixels(8, (0..64).map(|i| (i % 4 == 0) as u8 as f64).collect()).unwrap();
        assert_eq!(blank_mse(&[f.clone(), Image::blank(8)]), 0.125);
        assert_eq!(blank_mse(&[f.clone()]), f.ink_fraction());
    }
}
