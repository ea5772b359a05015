//! Residual-conv encoder with a teacher-forced transformer decoder.
//!
//! The encoder (stem + three residual blocks, one of them stride 2) maps an
//! `H×W` image to an `H/2 × W/2` grid of width-`d` patch tokens. Each stroke
//! frame is embedded by the same encoder followed by a fully connected layer.
//! The decoder runs causal self-attention over step tokens and
//! cross-attention to the image patches; a linear head predicts frame pixels.
//! Step 0 is fed the embedding of a blank frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Result, SaeError};
use crate::nn::{BnUpdates, ConvStem, LayerNorm, Linear, NormMode, ResidualBlock, TransformerBlock};
use crate::optim::AdamW;
use crate::params::{ParamStore, Parameterized};
use crate::strokegen::Image;
use crate::tensor::Tensor;

pub const ARCH: &str = "rnt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RntConfig {
    pub image_size: usize,
    pub width: usize,
    pub pad_len: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
}

impl Default for RntConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RntConfig {
    /// 28×28 input, width 256, 24 steps, one decoder block.
    pub fn full() -> Self {
        RntConfig { image_size: 28, width: 256, pad_len: 24, heads: 4, mlp_ratio: 4, decoder_depth: 1 }
    }

    /// 16×16 input, width 32, 8 steps.
    pub fn desk() -> Self {
        RntConfig { image_size: 16, width: 32, pad_len: 8, heads: 4, mlp_ratio: 4, decoder_depth: 1 }
    }

    pub fn grid(&self) -> usize {
        self.image_size / 2
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn frame_dim(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(SaeError::Config(format!("image size {} must be even and >= 8", self.image_size)));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(SaeError::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.pad_len == 0 || self.decoder_depth == 0 || self.mlp_ratio == 0 {
            return Err(SaeError::Config("pad length, decoder depth and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Stem (`block1`), a stride-2 residual block (`block2`) and two more
/// residual blocks (`block3`, `block4`), all at the model width.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    stem: ConvStem,
    blocks: Vec<ResidualBlock>,
    width: usize,
}

impl ConvEncoder {
    pub fn new(prefix: &str, width: usize) -> Self {
        ConvEncoder {
            stem: ConvStem::new(format!("{prefix}.block1"), 1, width),
            blocks: vec![
                ResidualBlock::new(format!("{prefix}.block2"), width, width, 2),
                ResidualBlock::new(format!("{prefix}.block3"), width, width, 1),
                ResidualBlock::new(format!("{prefix}.block4"), width, width, 1),
            ],
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.stem.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// `[N, 1, H, W]` → `[N, width, H/2, W/2]`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        mode: NormMode,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let mut h = self.stem.forward(g, store, x, mode, updates)?;
        for b in &self.blocks {
            h = b.forward(g, store, h, mode, updates)?;
        }
        Ok(h)
    }

    /// Feature maps `[N, C, h, w]` as stacked tokens `[N·h·w, C]`.
    pub fn to_tokens(&self, g: &mut Graph<'_>, feats: Var) -> Result<Var> {
        let shape = g.value(feats).shape().to_vec();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = g.reshape(feats, &[n, c, hw])?;
        let x = g.transpose(x)?;
        g.reshape(x, &[n * hw, self.width])
    }
}

/// Stacks square images as `[N, 1, H, W]`.
pub fn image_batch(images: &[&Image], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.size() != size {
            return Err(SaeError::dim(format!("image is {}x{0}, expected {size}x{size}", img.size())));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

/// Decoder stack shared by the reconstruction and recognition models:
/// learned step positions, causal self-attention plus cross-attention to
/// position-tagged image patches, and a final layer norm.
///
/// The position table always has `pad_len + 1` rows so both models share its
/// shape; the reconstruction model uses the first `pad_len`, the recognizer
/// all of them (strokes plus the end symbol).
#[derive(Clone, Debug)]
pub struct StepDecoder {
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    steps: usize,
    table_rows: usize,
    patches: usize,
    width: usize,
}

impl StepDecoder {
    pub fn new(cfg: &RntConfig, steps: usize) -> Result<Self> {
        if steps == 0 || steps > cfg.pad_len + 1 {
            return Err(SaeError::Config(format!("{steps} decoder steps outside 1..={}", cfg.pad_len + 1)));
        }
        Ok(StepDecoder {
            blocks: (1..=cfg.decoder_depth)
                .map(|i| {
                    TransformerBlock::new(format!("rnt.decoder.block{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, true, true)
                })
                .collect::<Result<_>>()?,
            norm: LayerNorm::new("rnt.decoder.norm", cfg.width),
            steps,
            table_rows: cfg.pad_len + 1,
            patches: cfg.patches(),
            width: cfg.width,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert("rnt.decoder.pos", Tensor::randn(&[self.table_rows, self.width], 0.02, rng), true);
        store.insert("rnt.decoder.memory_pos", Tensor::randn(&[self.patches, self.width], 0.02, rng), true);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.norm.init(store);
    }

    /// `inputs`: `[B·steps, d]` step embeddings; `memory`: `[B·patches, d]`.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, inputs: Var, memory: Var) -> Result<Var> {
        let mut pos = g.param(store, "rnt.decoder.pos")?;
        if self.steps < self.table_rows {
            pos = g.gather_rows(pos, &(0..self.steps).collect::<Vec<_>>())?;
        }
        let mut x = g.add_tiled(inputs, pos)?;
        let mpos = g.param(store, "rnt.decoder.memory_pos")?;
        let mem = g.add_tiled(memory, mpos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, self.steps, Some((mem, self.patches)))?;
        }
        self.norm.forward(g, store, x)
    }
}

/// One pre-training example: full image and its frames padded to `pad_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct RntSample {
    pub image: Image,
    pub frames: Vec<Image>,
    pub stroke_count: usize,
}

#[derive(Clone, Debug)]
pub struct RntModel {
    pub config: RntConfig,
    pub params: ParamStore,
    encoder: ConvEncoder,
    label_fc: Linear,
    decoder: StepDecoder,
    head: Linear,
}

impl RntModel {
    fn layout(config: RntConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        Ok(RntModel {
            encoder: ConvEncoder::new("rnt.encoder", d),
            label_fc: Linear::new("rnt.embed.label_fc", d * config.patches(), d),
            decoder: StepDecoder::new(&config, config.pad_len)?,
            head: Linear::new("rnt.head", d, config.frame_dim()),
            config,
            params,
        })
    }

    pub fn new(config: RntConfig, seed: u64) -> Result<Self> {
        let mut m = Self::layout(config, ParamStore::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.encoder.init(&mut m.params, &mut rng);
        m.label_fc.init(&mut m.params, &mut rng);
        m.decoder.init(&mut m.params, &mut rng);
        m.head.init(&mut m.params, &mut rng);
        Ok(m)
    }

    pub fn from_params(config: RntConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        check_layout(&reference.params, &params)?;
        Self::layout(config, params)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::new(self.params.clone())
            .with_meta("arch", ARCH)
            .with_meta("rnt.config", serde_json::to_string(&self.config).expect("config serializes"))
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.meta("arch")? != ARCH {
            return Err(SaeError::Config(format!("checkpoint is `{}`, not {ARCH}", ck.meta("arch")?)));
        }
        let config: RntConfig = serde_json::from_str(ck.meta("rnt.config")?)
            .map_err(|e| SaeError::Config(format!("bad rnt config in checkpoint: {e}")))?;
        Self::from_params(config, ck.params.clone())
    }

    /// Patch tokens `[N·patches, d]` for `[N, 1, H, W]` images.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a>, images: Var, mode: NormMode, upd: &mut BnUpdates) -> Result<Var> {
        let f = self.encoder.forward(g, &self.params, images, mode, upd)?;
        self.encoder.to_tokens(g, f)
    }

    /// Word vectors `[N, d]` for `[N, 1, H, W]` frames.
    pub fn embed<'a>(&'a self, g: &mut Graph<'a>, frames: Var, mode: NormMode, upd: &mut BnUpdates) -> Result<Var> {
        let f = self.encoder.forward(g, &self.params, frames, mode, upd)?;
        let n = g.value(f).shape()[0];
        let flat = g.reshape(f, &[n, self.config.width * self.config.patches()])?;
        self.label_fc.forward(g, &self.params, flat)
    }

    /// Pixel predictions `[B·steps, H·W]` given each sample's step inputs
    /// (`[B·steps, 1, H, W]`: blank, then frames `1..steps−1`).
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        images: Var,
        step_inputs: Var,
        mode: NormMode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let memory = self.encode(g, images, mode, upd)?;
        let x = self.embed(g, step_inputs, mode, upd)?;
        let h = self.decoder.forward(g, &self.params, x, memory)?;
        self.head.forward(g, &self.params, h)
    }

    fn step_inputs(&self, frames_per_sample: &[&[Image]]) -> Result<Tensor> {
        let (t, n) = (self.config.pad_len, self.config.image_size);
        let blank = Image::blank(n);
        let mut inputs: Vec<&Image> = Vec::with_capacity(frames_per_sample.len() * t);
        for frames in frames_per_sample {
            if frames.len() != t {
                return Err(SaeError::dim(format!("{} frames given, decoder runs {t} steps", frames.len())));
            }
            inputs.push(&blank);
            inputs.extend(frames[..t - 1].iter());
        }
        image_batch(&inputs, n)
    }

    fn targets(&self, batch: &[RntSample]) -> Result<Tensor> {
        let rows: Vec<f64> = batch.iter().flat_map(|s| s.frames.iter().flat_map(|f| f.pixels().iter().copied())).collect();
        Tensor::new(vec![batch.len() * self.config.pad_len, self.config.frame_dim()], rows)
    }

    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image_batch(&[image], self.config.image_size)?);
        let t = self.encode(&mut g, x, NormMode::Eval, &mut BnUpdates::default())?;
        Ok(g.value(t).clone())
    }

    pub fn embed_label(&self, frame: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image_batch(&[frame], self.config.image_size)?);
        let e = self.embed(&mut g, x, NormMode::Eval, &mut BnUpdates::default())?;
        g.value(e).reshape(&[self.config.width])
    }

    /// Raw `[steps, H·W]` predictions with ground-truth frames fed back.
    pub fn decode_teacher_forced(&self, image: &Image, targets: &[Image]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image_batch(&[image], self.config.image_size)?);
        let s = g.constant(self.step_inputs(&[targets])?);
        let p = self.forward(&mut g, x, s, NormMode::Eval, &mut BnUpdates::default())?;
        Ok(g.value(p).clone())
    }

    /// Step-by-step decoding; `feedback(t, prediction)` picks the frame fed
    /// to step `t + 1`. Unknown future inputs are blank.
    fn autoregress(&self, image: &Image, mut feedback: impl FnMut(usize, Image) -> Image) -> Result<Vec<Image>> {
        let (t_max, n) = (self.config.pad_len, self.config.image_size);
        let mut fed: Vec<Image> = vec![Image::blank(n); t_max];
        let mut out = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let pred = self.decode_teacher_forced(image, &fed)?;
            let fd = self.config.frame_dim();
            let row = &pred.data()[t * fd..(t + 1) * fd];
            let frame = Image::from_pixels(n, row.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
            fed[t] = feedback(t, frame.clone());
            out.push(frame);
        }
        Ok(out)
    }

    /// Predicted frames, each fed back as the next step's input; clamped to `[0, 1]`.
    pub fn decode_autoregressive(&self, image: &Image) -> Result<Vec<Image>> {
        self.autoregress(image, |_, f| f)
    }

    /// Teacher-forced MSE in inference mode.
    pub fn loss(&self, batch: &[RntSample]) -> Result<f64> {
        let mut g = Graph::new();
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let frames: Vec<&[Image]> = batch.iter().map(|s| s.frames.as_slice()).collect();
        let x = g.constant(image_batch(&images, self.config.image_size)?);
        let s = g.constant(self.step_inputs(&frames)?);
        let t = g.constant(self.targets(batch)?);
        let p = self.forward(&mut g, x, s, NormMode::Eval, &mut BnUpdates::default())?;
        let l = g.mse_loss(p, t)?;
        g.value(l).item()
    }
}

impl Parameterized for RntModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Every parameter of `reference` must exist in `params` with the same shape.
pub(crate) fn check_layout(reference: &ParamStore, params: &ParamStore) -> Result<()> {
    for (name, p) in reference.iter() {
        let got = params.get(name)?;
        if got.shape() != p.value.shape() {
            return Err(SaeError::dim(format!(
                "`{name}` has shape {:?}, config expects {:?}",
                got.shape(),
                p.value.shape()
            )));
        }
    }
    Ok(())
}

/// Teacher-forced MSE step with batch statistics; running statistics are
/// refreshed after the parameter update. Returns the pre-update loss.
pub fn pretrain_step(model: &mut RntModel, opt: &mut AdamW, batch: &[RntSample], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(SaeError::Usage("empty batch".into()));
    }
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let frames: Vec<&[Image]> = batch.iter().map(|s| s.frames.as_slice()).collect();
    let x = image_batch(&images, model.config.image_size)?;
    let s = model.step_inputs(&frames)?;
    let t = model.targets(batch)?;
    let mut updates = BnUpdates::default();
    let (loss, grads) = {
        let mut g = Graph::new();
        let x = g.constant(x);
        let s = g.constant(s);
        let t = g.constant(t);
        let p = model.forward(&mut g, x, s, NormMode::Train, &mut updates)?;
        let l = g.mse_loss(p, t)?;
        let grads = g.backward(l)?.named(&g);
        (g.value(l).item()?, grads)
    };
    opt.step(&mut model.params, &grads, lr)?;
    updates.apply(&mut model.params)?;
    Ok(loss)
}
