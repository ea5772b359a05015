//! Vision-transformer stroke autoencoder.
//!
//! The character image is cut into a `grid × grid` patch grid; each patch is
//! projected to a token, positional embeddings are added and the tokens pass
//! through the encoder blocks. The decoder adds its own positional table, runs
//! self-attention blocks, and a linear head maps token `t` to the pixels of
//! stroke frame `t`. Tokens past `pad_len` are trained towards blank frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Result, SaeError};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::optim::AdamW;
use crate::params::{ParamStore, Parameterized};
use crate::strokegen::{Form, Image, StrokeImageSequence};
use crate::tensor::Tensor;

pub const ARCH: &str = "vit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    /// Patches per side; the token count is `grid²`.
    pub grid: usize,
    /// Side of each predicted stroke frame.
    pub frame_size: usize,
    pub pad_len: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// 140×140 input, 5×5 patches, 28×28 frames, width 256.
    pub fn full() -> Self {
        VitConfig {
            image_size: 140,
            grid: 5,
            frame_size: 28,
            pad_len: 24,
            width: 256,
            heads: 4,
            mlp_ratio: 4,
            encoder_depth: 4,
            decoder_depth: 4,
        }
    }

    /// 56×56 input, 4×4 patches of 14 px, 14×14 frames, 8 stroke slots, width 64.
    pub fn desk() -> Self {
        VitConfig {
            image_size: 56,
            grid: 4,
            frame_size: 14,
            pad_len: 8,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            encoder_depth: 4,
            decoder_depth: 4,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size() * self.patch_size()
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_size * self.frame_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaeError::Config(m));
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return bad(format!("image size {} is not divisible by grid {}", self.image_size, self.grid));
        }
        if self.pad_len == 0 || self.tokens() < self.pad_len {
            return bad(format!("{} tokens cannot hold {} stroke frames", self.tokens(), self.pad_len));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.frame_size < 8 || self.image_size < 8 {
            return bad("image and frame sizes must be at least 8".into());
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 || self.mlp_ratio == 0 {
            return bad("depths and mlp ratio must be positive".into());
        }
        Ok(())
    }
}

/// Row-major non-overlapping patches, one flattened patch per row.
pub fn patchify(img: &Image, grid: usize) -> Result<Tensor> {
    let n = img.size();
    if grid == 0 || n % grid != 0 {
        return Err(SaeError::dim(format!("{n}x{n} image does not split into a {grid}x{grid} grid")));
    }
    let p = n / grid;
    let px = img.pixels();
    let mut data = Vec::with_capacity(n * n);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in 0..p {
                let row = (gy * p + y) * n + gx * p;
                data.extend_from_slice(&px[row..row + p]);
            }
        }
    }
    Ok(Tensor::from_raw(vec![grid * grid, p * p], data))
}

pub fn unpatchify(tokens: &Tensor, grid: usize) -> Result<Image> {
    let (t, d) = tokens.dims2()?;
    let p = (d as f64).sqrt().round() as usize;
    if t != grid * grid || p * p != d {
        return Err(SaeError::dim(format!("{t}x{d} tokens are not a {grid}x{grid} grid of square patches")));
    }
    let n = grid * p;
    let mut px = vec![0.0; n * n];
    for (i, patch) in tokens.data().chunks(d).enumerate() {
        let (gy, gx) = (i / grid, i % grid);
        for y in 0..p {
            let row = (gy * p + y) * n + gx * p;
            px[row..row + p].copy_from_slice(&patch[y * p..(y + 1) * p]);
        }
    }
    Image::from_pixels(n, px)
}

/// One training example: the input image and up to `tokens` target frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VitSample {
    pub input: Image,
    pub targets: Vec<Image>,
}

pub struct VitOutput {
    /// `[batch·tokens, frame_dim]`, pre-clamp.
    pub frames: Var,
    /// Token sequence after the captured decoder block, if requested.
    pub captured: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct VitModel {
    pub config: VitConfig,
    pub params: ParamStore,
    proj: Linear,
    encoder: Vec<TransformerBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<TransformerBlock>,
    decoder_norm: LayerNorm,
    head: Linear,
}

impl VitModel {
    fn layout(config: VitConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let block = |part: &str, i: usize| {
            TransformerBlock::new(format!("vit.{part}.block{i}"), d, config.heads, config.mlp_ratio, false, false)
        };
        Ok(VitModel {
            proj: Linear::new("vit.proj", config.patch_dim(), d),
            encoder: (1..=config.encoder_depth).map(|i| block("encoder", i)).collect::<Result<_>>()?,
            encoder_norm: LayerNorm::new("vit.encoder.norm", d),
            decoder: (1..=config.decoder_depth).map(|i| block("decoder", i)).collect::<Result<_>>()?,
            decoder_norm: LayerNorm::new("vit.decoder.norm", d),
            head: Linear::new("vit.head", d, config.frame_dim()),
            config,
            params,
        })
    }

    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        let mut m = Self::layout(config, ParamStore::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (m.config.tokens(), m.config.width);
        let p = &mut m.params;
        m.proj.init(p, &mut rng);
        p.insert("vit.encoder.pos", Tensor::randn(&[n, d], 0.02, &mut rng), true);
        for b in &m.encoder {
            b.init(p, &mut rng);
        }
        m.encoder_norm.init(p);
        p.insert("vit.decoder.pos", Tensor::randn(&[n, d], 0.02, &mut rng), true);
        for b in &m.decoder {
            b.init(p, &mut rng);
        }
        m.decoder_norm.init(p);
        m.head.init(p, &mut rng);
        Ok(m)
    }

    /// Rebuilds a model around existing parameters, checking every expected
    /// entry exists with the right shape.
    pub fn from_params(config: VitConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, p) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != p.value.shape() {
                return Err(SaeError::dim(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Self::layout(config, params)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::new(self.params.clone())
            .with_meta("arch", ARCH)
            .with_meta("vit.config", serde_json::to_string(&self.config).expect("config serializes"))
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.meta("arch")? != ARCH {
            return Err(SaeError::Config(format!("checkpoint is `{}`, not {ARCH}", ck.meta("arch")?)));
        }
        let config: VitConfig = serde_json::from_str(ck.meta("vit.config")?)
            .map_err(|e| SaeError::Config(format!("bad vit config in checkpoint: {e}")))?;
        Self::from_params(config, ck.params.clone())
    }

    /// `[batch·tokens, width]` from stacked patch rows.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a>, tokens: Var) -> Result<Var> {
        let n = self.config.tokens();
        let x = self.proj.forward(g, &self.params, tokens)?;
        let pos = g.param(&self.params, "vit.encoder.pos")?;
        let mut x = g.add_tiled(x, pos)?;
        for b in &self.encoder {
            x = b.forward(g, &self.params, x, n, None)?;
        }
        self.encoder_norm.forward(g, &self.params, x)
    }

    /// Frame predictions for encoded tokens. `capture` (1-based) keeps the
    /// token sequence right after that decoder block.
    pub fn decode<'a>(&'a self, g: &mut Graph<'a>, y: Var, capture: Option<usize>) -> Result<VitOutput> {
        let n = self.config.tokens();
        let pos = g.param(&self.params, "vit.decoder.pos")?;
        let mut x = g.add_tiled(y, pos)?;
        let mut captured = None;
        for (i, b) in self.decoder.iter().enumerate() {
            x = b.forward(g, &self.params, x, n, None)?;
            if capture == Some(i + 1) {
                captured = Some(x);
            }
        }
        if let Some(c) = capture {
            if captured.is_none() {
                return Err(SaeError::Range(format!(
                    "decoder block {c} outside 1..={}",
                    self.decoder.len()
                )));
            }
        }
        let x = self.decoder_norm.forward(g, &self.params, x)?;
        let frames = self.head.forward(g, &self.params, x)?;
        Ok(VitOutput { frames, captured })
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, tokens: Var, capture: Option<usize>) -> Result<VitOutput> {
        let y = self.encode(g, tokens)?;
        self.decode(g, y, capture)
    }

    /// Stacked patch tokens for a batch of input images.
    pub fn batch_tokens(&self, images: &[&Image]) -> Result<Tensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(images.len() * c.tokens() * c.patch_dim());
        for img in images {
            if img.size() != c.image_size {
                return Err(SaeError::dim(format!(
                    "input is {}x{0}, model expects {}x{1}",
                    img.size(),
                    c.image_size
                )));
            }
            data.extend_from_slice(patchify(img, c.grid)?.data());
        }
        Ok(Tensor::from_raw(vec![images.len() * c.tokens(), c.patch_dim()], data))
    }

    /// Stacked target rows: each sample's frames followed by blanks.
    pub fn batch_targets(&self, batch: &[VitSample]) -> Result<Tensor> {
        let c = &self.config;
        let (n, fd) = (c.tokens(), c.frame_dim());
        let mut data = vec![0.0; batch.len() * n * fd];
        for (b, s) in batch.iter().enumerate() {
            if s.targets.len() > n {
                return Err(SaeError::Range(format!("{} target frames exceed {n} tokens", s.targets.len())));
            }
            for (t, f) in s.targets.iter().enumerate() {
                if f.size() != c.frame_size {
                    return Err(SaeError::dim(format!(
                        "target frame is {}x{0}, model predicts {}x{1}",
                        f.size(),
                        c.frame_size
                    )));
                }
                let at = (b * n + t) * fd;
                data[at..at + fd].copy_from_slice(f.pixels());
            }
        }
        Ok(Tensor::from_raw(vec![batch.len() * n, fd], data))
    }

    /// Mean squared error over every target pixel, blanks included.
    pub fn loss(&self, batch: &[VitSample]) -> Result<f64> {
        let inputs: Vec<&Image> = batch.iter().map(|s| &s.input).collect();
        let mut g = Graph::new();
        let x = g.constant(self.batch_tokens(&inputs)?);
        let t = g.constant(self.batch_targets(batch)?);
        let out = self.forward(&mut g, x, None)?;
        let l = g.mse_loss(out.frames, t)?;
        g.value(l).item()
    }

    /// Predicted frames, clamped to `[0, 1]` and truncated to `pad_len`.
    pub fn reconstruct(&self, image: &Image) -> Result<StrokeImageSequence> {
        let mut g = Graph::new();
        let x = g.constant(self.batch_tokens(&[image])?);
        let out = self.forward(&mut g, x, None)?;
        let frames = g.value(out.frames);
        let fd = self.config.frame_dim();
        let frames = frames.data()[..self.config.pad_len * fd]
            .chunks(fd)
            .map(|c| Image::from_pixels(self.config.frame_size, c.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(StrokeImageSequence {
            label: String::new(),
            form: Form::A,
            stroke_count: self.config.pad_len,
            frames,
        })
    }
}

impl Parameterized for VitModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// One AdamW update on the batch's reconstruction MSE; returns the loss
/// before the update.
pub fn pretrain_step(model: &mut VitModel, opt: &mut AdamW, batch: &[VitSample], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(SaeError::Usage("empty batch".into()));
    }
    let inputs: Vec<&Image> = batch.iter().map(|s| &s.input).collect();
    let tokens = model.batch_tokens(&inputs)?;
    let targets = model.batch_targets(batch)?;
    let (loss, grads) = {
        let mut g = Graph::new();
        let x = g.constant(tokens);
        let t = g.constant(targets);
        let out = model.forward(&mut g, x, None)?;
        let l = g.mse_loss(out.frames, t)?;
        let grads = g.backward(l)?.named(&g);
        (g.value(l).item()?, grads)
    };
    opt.step(&mut model.params, &grads, lr)?;
    Ok(loss)
}
