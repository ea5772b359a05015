//! Run configuration and the drivers behind each command: dataset
//! generation, pre-training, recognizer fine-tuning with surgery, zero-shot
//! evaluation, reconstruction strips and embedding export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::{blank_mse, crop_pair, rnt_samples, vit_samples};
use crate::embed::{
    cosine_matrix, embed_character, export_embeddings, export_similarity, kmeans_cosine, shuffle_control,
    CharEmbedding, ShuffleControl,
};
use crate::error::{Result, SaeError};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rnt::{self, RntConfig, RntModel, RntSample};
use crate::strokegen::{
    default_stroke_width, encode_strokes, jitter, load_stroke_file, pad_sequence, rasterize, render_full,
    save_stroke_file, split_classes, synthetic_alphabet, write_pgm, write_strip, CharacterSpec, CropParams,
    DatasetSplit, Form, Image,
};
use crate::vit::{self, VitConfig, VitModel, VitSample};
use crate::zeroshot::{
    apply_surgery, build_confusable_sets, confusable_sets_json, evaluate_zero_shot, finetune_step, random_baseline,
    RecognitionSample, Recognizer, SurgeryAudit, SurgeryPlan, ZeroShotReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vit,
    Rnt,
}

impl std::str::FromStr for Arch {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Arch::Vit),
            "rnt" => Ok(Arch::Rnt),
            _ => Err(SaeError::Config(format!("unknown architecture `{s}`; expected vit or rnt"))),
        }
    }
}

impl Arch {
    /// ViT reconstructs cumulative frames, the conv model single strokes.
    pub fn default_form(self) -> Form {
        match self {
            Arch::Vit => Form::A,
            Arch::Rnt => Form::B,
        }
    }
}

/// Recognizer training, surgery and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Point jitter in glyph units (the box is 1024 wide).
    pub jitter_sigma: f64,
    /// Jittered renders per seen class for training.
    pub train_copies: usize,
    /// Jittered renders per seen class held out for validation.
    pub val_copies: usize,
    /// Jittered renders per unseen class for testing.
    pub test_copies: usize,
    /// Epochs of recognizer training before surgery.
    pub epochs: usize,
    /// Epochs of training after surgery.
    pub surgery_epochs: usize,
    pub plan: SurgeryPlan,
    pub baseline_trials: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            jitter_sigma: 16.0,
            train_copies: 16,
            val_copies: 4,
            test_copies: 4,
            epochs: 30,
            surgery_epochs: 30,
            plan: SurgeryPlan::default(),
            baseline_trials: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    /// Defaults to the architecture's form.
    pub form: Option<Form>,
    /// Stroke-JSON file; the synthetic alphabet is used when absent.
    pub source: Option<PathBuf>,
    pub n_radicals: usize,
    pub n_chars: usize,
    pub n_seen: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Prefix samples for the ViT (one example per stroke count).
    pub prefixes: bool,
    /// Paired random-resized crops during pre-training.
    pub augment: bool,
    pub optim: AdamWConfig,
    pub vit: VitConfig,
    pub rnt: RntConfig,
    pub finetune: FinetuneConfig,
    /// Characters to embed; all when absent.
    pub embed_count: Option<usize>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Vit,
            form: None,
            source: None,
            n_radicals: 12,
            n_chars: 60,
            n_seen: 45,
            epochs: 200,
            seed: 7,
            prefixes: true,
            augment: false,
            optim: AdamWConfig::default(),
            vit: VitConfig::desk(),
            rnt: RntConfig::desk(),
            finetune: FinetuneConfig::default(),
            embed_count: None,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Settings used for the desk-scale checks: the defaults with a higher
    /// peak learning rate, since the small models see few updates.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.optim.lr_max = 1e-3;
        c
    }

    pub fn form(&self) -> Form {
        self.form.unwrap_or_else(|| self.arch.default_form())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SaeError::Config(format!("config file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SaeError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.rnt.validate()?;
        if self.epochs == 0 {
            return Err(SaeError::Config("epochs must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr_max > 0.0) || !(o.lr_min >= 0.0) || o.lr_min > o.lr_max || o.batch_size == 0 {
            return Err(SaeError::Config(format!(
                "optimizer needs 0 <= lr_min <= lr_max, lr_max > 0 and a positive batch (got {o:?})"
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(SaeError::Config(format!("bad optimizer moments or decay: {o:?}")));
        }
        let f = &self.finetune;
        if !(f.jitter_sigma > 0.0) || f.train_copies == 0 || f.val_copies == 0 || f.test_copies == 0 {
            return Err(SaeError::Config("fine-tuning needs positive jitter and copy counts".into()));
        }
        if f.baseline_trials == 0 {
            return Err(SaeError::Config("baseline trials must be positive".into()));
        }
        if self.source.is_none() {
            split_classes(self.n_chars, self.n_seen)?;
        }
        Ok(())
    }

    fn trainer(&self) -> AdamW {
        AdamW::new(self.optim.clone())
    }
}

/// Creates `dir` (which must not exist or be empty) and records the config.
pub fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| SaeError::io(dir, e))?;
        if entries.next().is_some() {
            return Err(SaeError::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty"),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| SaeError::io(dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SaeError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SaeError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| SaeError::Parse { context: path.display().to_string(), message: e.to_string() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub total: usize,
    pub n_seen: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub unused: Vec<String>,
}

/// Characters, their split, and (for the synthetic alphabet) the radicals
/// each character is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub specs: Vec<CharacterSpec>,
    pub split: DatasetSplit,
    /// Synthetic radicals, sorted by name.
    pub radicals: Vec<CharacterSpec>,
    /// Character label → indices into `radicals`.
    pub composition: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let (specs, radicals, composition) = match &cfg.source {
            Some(path) => (load_stroke_file(path)?, Vec::new(), BTreeMap::new()),
            None => {
                let alpha = synthetic_alphabet(cfg.n_radicals, cfg.n_chars, cfg.seed)?;
                let names: BTreeMap<String, Vec<String>> = alpha
                    .chars
                    .iter()
                    .zip(&alpha.compositions)
                    .map(|(c, comp)| (c.label.clone(), comp.radicals.iter().map(|&r| alpha.radicals[r].name.clone()).collect()))
                    .collect();
                let mut radicals: Vec<CharacterSpec> = alpha.radicals.iter().map(|r| r.to_spec()).collect();
                radicals.sort_by(|a, b| a.label.cmp(&b.label));
                let composition = composition_indices(&radicals, &names)?;
                (alpha.chars, radicals, composition)
            }
        };
        let split = split_classes(specs.len(), cfg.n_seen)?;
        Ok(Dataset { specs, split, radicals, composition })
    }

    pub fn seen(&self) -> Vec<CharacterSpec> {
        self.split.train.iter().map(|&i| self.specs[i].clone()).collect()
    }

    pub fn unseen(&self) -> Vec<CharacterSpec> {
        self.split.test.iter().map(|&i| self.specs[i].clone()).collect()
    }

    pub fn manifest(&self) -> SplitManifest {
        let labels = |idx: &[usize]| idx.iter().map(|&i| self.specs[i].label.clone()).collect();
        SplitManifest {
            total: self.specs.len(),
            n_seen: self.split.train.len(),
            train: labels(&self.split.train),
            test: labels(&self.split.test),
            unused: labels(&self.split.unused),
        }
    }

    /// Writes `strokes.jsonl`, `split.json`, golden renders and, for the
    /// synthetic alphabet, `radicals.jsonl` plus `composition.json`.
    pub fn save(&self, dir: &Path, golden_size: usize) -> Result<()> {
        save_stroke_file(dir.join("strokes.jsonl"), &self.specs)?;
        write_json(&dir.join("split.json"), &self.manifest())?;
        if !self.radicals.is_empty() {
            save_stroke_file(dir.join("radicals.jsonl"), &self.radicals)?;
            let names: BTreeMap<&String, Vec<&str>> = self
                .composition
                .iter()
                .map(|(c, rs)| (c, rs.iter().map(|&r| self.radicals[r].label.as_str()).collect()))
                .collect();
            write_json(&dir.join("composition.json"), &names)?;
        }
        let golden = dir.join("golden");
        fs::create_dir_all(&golden).map_err(|e| SaeError::io(&golden, e))?;
        let w = default_stroke_width(golden_size);
        for (i, spec) in self.specs.iter().enumerate() {
            write_pgm(golden.join(format!("{i:04}.pgm")), &render_full(spec, golden_size, w)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let specs = load_stroke_file(dir.join("strokes.jsonl"))?;
        let manifest: SplitManifest = read_json(&dir.join("split.json"))?;
        let index: BTreeMap<&str, usize> = specs.iter().enumerate().map(|(i, s)| (s.label.as_str(), i)).collect();
        let lookup = |labels: &[String]| -> Result<Vec<usize>> {
            labels
                .iter()
                .map(|l| index.get(l.as_str()).copied().ok_or_else(|| SaeError::Data(format!("split lists unknown `{l}`"))))
                .collect()
        };
        let split = DatasetSplit { train: lookup(&manifest.train)?, test: lookup(&manifest.test)?, unused: lookup(&manifest.unused)? };
        let rad_path = dir.join("radicals.jsonl");
        let (radicals, composition) = if rad_path.exists() {
            let radicals = load_stroke_file(&rad_path)?;
            let names = read_json(&dir.join("composition.json"))?;
            let composition = composition_indices(&radicals, &names)?;
            (radicals, composition)
        } else {
            (Vec::new(), BTreeMap::new())
        };
        Ok(Dataset { specs, split, radicals, composition })
    }
}

fn composition_indices(
    radicals: &[CharacterSpec],
    names: &BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let index: BTreeMap<&str, usize> = radicals.iter().enumerate().map(|(i, r)| (r.label.as_str(), i)).collect();
    names
        .iter()
        .map(|(c, rs)| {
            let idx = rs
                .iter()
                .map(|r| index.get(r.as_str()).copied().ok_or_else(|| SaeError::Data(format!("`{c}` uses unknown radical `{r}`"))))
                .collect::<Result<_>>()?;
            Ok((c.clone(), idx))
        })
        .collect()
}

/// Builds the dataset described by `cfg` and writes it to `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    if let Some(src) = &cfg.source {
        if !src.exists() {
            return Err(SaeError::io(src, std::io::Error::new(std::io::ErrorKind::NotFound, "stroke source not found")));
        }
    }
    let ds = Dataset::from_config(cfg)?;
    prepare_run_dir(out, cfg)?;
    ds.save(out, cfg.vit.image_size)?;
    log::info!("wrote {} characters ({} seen, {} held out) to {}", ds.specs.len(), ds.split.train.len(), ds.split.test.len(), out.display());
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub arch: Arch,
    pub form: Form,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Held-out MSE of predicting blank frames.
    pub blank_mse: f64,
}

impl PretrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for m in &self.metrics {
            s.push_str(&format!("{},{},{}\n", m.epoch, m.train_mse, m.val_mse));
        }
        s
    }
}

pub struct Pretrained {
    pub report: PretrainReport,
    /// Parameters at the epoch with the lowest held-out MSE.
    pub best: ModelCheckpoint,
    /// Parameters and optimizer state after the last epoch.
    pub last: ModelCheckpoint,
}

trait Reconstructor {
    type Sample: Clone;
    fn step(&mut self, opt: &mut AdamW, batch: &[Self::Sample], lr: f64) -> Result<f64>;
    fn augment(&self, s: &Self::Sample, rng: &mut ChaCha8Rng) -> Self::Sample;
    /// Mean per-pixel MSE of clamped predictions over `pad_len` frames, and
    /// the matching blank baseline.
    fn held_out(&self, samples: &[Self::Sample]) -> Result<(f64, f64)>;
    fn checkpoint(&self) -> ModelCheckpoint;
}

fn frame_mse(pred: &[Image], target: &[Image]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| a.mse(b)).sum::<f64>() / target.len() as f64
}

impl Reconstructor for VitModel {
    type Sample = VitSample;

    fn step(&mut self, opt: &mut AdamW, batch: &[VitSample], lr: f64) -> Result<f64> {
        vit::pretrain_step(self, opt, batch, lr)
    }

    fn augment(&self, s: &VitSample, rng: &mut ChaCha8Rng) -> VitSample {
        let (input, targets) = crop_pair(&s.input, &s.targets, rng, &CropParams::default());
        VitSample { input, targets }
    }

    fn held_out(&self, samples: &[VitSample]) -> Result<(f64, f64)> {
        let (mut err, mut blank) = (0.0, 0.0);
        for s in samples {
            let mut target = s.targets.clone();
            target.resize(self.config.pad_len, Image::blank(self.config.frame_size));
            err += frame_mse(&self.reconstruct(&s.input)?.frames, &target);
            blank += blank_mse(&target);
        }
        Ok((err / samples.len() as f64, blank / samples.len() as f64))
    }

    fn checkpoint(&self) -> ModelCheckpoint {
        self.to_checkpoint()
    }
}

/// Teacher-forced frame predictions, clamped to `[0, 1]`.
pub fn rnt_teacher_forced(model: &RntModel, s: &RntSample) -> Result<Vec<Image>> {
    let raw = model.decode_teacher_forced(&s.image, &s.frames)?;
    let n = model.config.image_size;
    raw.data()
        .chunks(model.config.frame_dim())
        .map(|c| Image::from_pixels(n, c.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
        .collect()
}

impl Reconstructor for RntModel {
    type Sample = RntSample;

    fn step(&mut self, opt: &mut AdamW, batch: &[RntSample], lr: f64) -> Result<f64> {
        rnt::pretrain_step(self, opt, batch, lr)
    }

    fn augment(&self, s: &RntSample, rng: &mut ChaCha8Rng) -> RntSample {
        let (image, frames) = crop_pair(&s.image, &s.frames, rng, &CropParams::default());
        RntSample { image, frames, stroke_count: s.stroke_count }
    }

    fn held_out(&self, samples: &[RntSample]) -> Result<(f64, f64)> {
        let (mut err, mut blank) = (0.0, 0.0);
        for s in samples {
            err += frame_mse(&rnt_teacher_forced(self, s)?, &s.frames);
            blank += blank_mse(&s.frames);
        }
        Ok((err / samples.len() as f64, blank / samples.len() as f64))
    }

    fn checkpoint(&self) -> ModelCheckpoint {
        self.to_checkpoint()
    }
}

fn run_pretraining<M: Reconstructor>(
    model: &mut M,
    cfg: &RunConfig,
    train: &[M::Sample],
    held_out: &[M::Sample],
) -> Result<(Vec<EpochMetrics>, usize, f64, f64, ModelCheckpoint, AdamW)> {
    if train.is_empty() || held_out.is_empty() {
        return Err(SaeError::Usage("pre-training needs training and held-out samples".into()));
    }
    let mut opt = cfg.trainer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelCheckpoint)> = None;
    let mut blank = 0.0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.optim.lr_max, cfg.optim.lr_min)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.optim.batch_size) {
            let batch: Vec<M::Sample> = chunk
                .iter()
                .map(|&i| if cfg.augment { model.augment(&train[i], &mut rng) } else { train[i].clone() })
                .collect();
            total += model.step(&mut opt, &batch, lr)? * batch.len() as f64;
        }
        let (val, b) = model.held_out(held_out)?;
        blank = b;
        let m = EpochMetrics { epoch: epoch + 1, train_mse: total / train.len() as f64, val_mse: val };
        log::info!("epoch {} train {:.5} val {:.5} (blank {:.5}) lr {:.2e}", m.epoch, m.train_mse, m.val_mse, b, lr);
        if best.as_ref().map_or(true, |(_, v, _)| val < *v) {
            best = Some((m.epoch, val, model.checkpoint()));
        }
        metrics.push(m);
    }
    let (best_epoch, best_val, ck) = best.expect("at least one epoch");
    Ok((metrics, best_epoch, best_val, blank, ck.with_meta("epoch", best_epoch), opt))
}

/// Pre-trains the configured architecture on the seen classes, validating
/// on the held-out classes after every epoch.
pub fn pretrain(cfg: &RunConfig, ds: &Dataset) -> Result<Pretrained> {
    cfg.validate()?;
    let form = cfg.form();
    let (seen, unseen) = (ds.seen(), ds.unseen());
    let (metrics, best_epoch, best_val, blank, best, last) = match cfg.arch {
        Arch::Vit => {
            let train = vit_samples(&seen, &cfg.vit, form, cfg.prefixes)?;
            let held = vit_samples(&unseen, &cfg.vit, form, false)?;
            let mut model = VitModel::new(cfg.vit.clone(), cfg.seed)?;
            let (m, e, v, b, best, opt) = run_pretraining(&mut model, cfg, &train, &held)?;
            let mut last = model.to_checkpoint();
            last.optimizer = Some(opt);
            (m, e, v, b, best, last)
        }
        Arch::Rnt => {
            let train = rnt_samples(&seen, &cfg.rnt, form)?;
            let held = rnt_samples(&unseen, &cfg.rnt, form)?;
            let mut model = RntModel::new(cfg.rnt.clone(), cfg.seed)?;
            let (m, e, v, b, best, opt) = run_pretraining(&mut model, cfg, &train, &held)?;
            let mut last = model.to_checkpoint();
            last.optimizer = Some(opt);
            (m, e, v, b, best, last)
        }
    };
    let report = PretrainReport { arch: cfg.arch, form, metrics, best_epoch, best_val_mse: best_val, blank_mse: blank };
    let tag = |ck: ModelCheckpoint| ck.with_meta("form", form);
    Ok(Pretrained { report, best: tag(best), last: tag(last) })
}

/// Writes `metrics.csv`, `pretrain.json`, `best.ckpt` and `last.ckpt`.
pub fn save_pretrained(p: &Pretrained, dir: &Path) -> Result<()> {
    write_text(&dir.join("metrics.csv"), &p.report.metrics_csv())?;
    write_json(&dir.join("pretrain.json"), &p.report)?;
    p.best.save(dir.join("best.ckpt"))?;
    p.last.save(dir.join("last.ckpt"))
}

/// `copies` jittered renders of each character at the recognizer's size.
pub fn recognition_samples(
    specs: &[CharacterSpec],
    cfg: &RunConfig,
    copies: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(RecognitionSample, String)>> {
    let size = cfg.rnt.image_size;
    let w = default_stroke_width(size);
    let mut out = Vec::with_capacity(specs.len() * copies);
    for spec in specs {
        let strokes = encode_strokes(spec);
        for _ in 0..copies {
            let j = jitter(spec, cfg.finetune.jitter_sigma, rng)?;
            out.push((RecognitionSample { image: render_full(&j, size, w)?, strokes: strokes.clone() }, spec.label.clone()));
        }
    }
    Ok(out)
}

/// Jittered seen-validation and unseen-test renders, each drawn from its own
/// seeded stream. Training renders are redrawn every epoch by
/// [`train_recognizer`].
pub struct RecognitionData {
    pub val: Vec<RecognitionSample>,
    pub test: Vec<(Image, String)>,
}

impl RecognitionData {
    pub fn new(cfg: &RunConfig, ds: &Dataset) -> Result<Self> {
        let f = &cfg.finetune;
        let stream = |k: u64| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(k));
        Ok(RecognitionData {
            val: recognition_samples(&ds.seen(), cfg, f.val_copies, &mut stream(2))?.into_iter().map(|(s, _)| s).collect(),
            test: recognition_samples(&ds.unseen(), cfg, f.test_copies, &mut stream(3))?
                .into_iter()
                .map(|(s, l)| (s.image, l))
                .collect(),
        })
    }
}

/// Fraction of samples whose predicted string is exactly right.
pub fn stroke_match_rate(model: &Recognizer, samples: &[RecognitionSample]) -> Result<f64> {
    let mut hits = 0;
    for s in samples {
        if model.predict(&s.image)?.strokes == s.strokes {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Cosine-annealed cross-entropy training on `train_copies` fresh jittered
/// renders of each spec per epoch; returns the mean loss per epoch.
pub fn train_recognizer(
    model: &mut Recognizer,
    cfg: &RunConfig,
    specs: &[CharacterSpec],
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if specs.is_empty() || cfg.finetune.train_copies == 0 {
        return Err(SaeError::Usage("no recognition samples".into()));
    }
    let mut opt = cfg.trainer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, cfg.optim.lr_max, cfg.optim.lr_min)?;
        let mut data: Vec<RecognitionSample> =
            recognition_samples(specs, cfg, cfg.finetune.train_copies, &mut rng)?.into_iter().map(|(s, _)| s).collect();
        data.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in data.chunks(cfg.optim.batch_size) {
            total += finetune_step(model, &mut opt, batch, lr)? * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::info!("recognizer epoch {} loss {mean:.4} lr {lr:.2e}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub trained_loss: Vec<f64>,
    pub surgery_loss: Vec<f64>,
    /// Seen-class validation exact-match before and after surgery.
    pub seen_match_before: f64,
    pub seen_match: f64,
    pub overwrite: usize,
    pub freeze: usize,
    pub tune: usize,
}

pub struct Finetuned {
    pub trained: ModelCheckpoint,
    pub model: Recognizer,
    pub audit: SurgeryAudit,
    pub report: FinetuneReport,
}

/// Trains a recognizer on jittered seen renders (unless `trained` is
/// given), applies surgery from the pre-trained reconstruction checkpoint,
/// and trains the tune set.
pub fn finetune(
    cfg: &RunConfig,
    ds: &Dataset,
    pretrained: &ModelCheckpoint,
    trained: Option<&ModelCheckpoint>,
) -> Result<Finetuned> {
    cfg.validate()?;
    if pretrained.meta("arch")? != rnt::ARCH {
        return Err(SaeError::Config(format!("surgery needs an rnt checkpoint, got `{}`", pretrained.meta("arch")?)));
    }
    let data = RecognitionData::new(cfg, ds)?;
    let seen = ds.seen();
    let (trained, trained_loss) = match trained {
        Some(ck) => (ck.clone(), Vec::new()),
        None => {
            let mut m = Recognizer::new(cfg.rnt.clone(), cfg.seed)?;
            let losses = train_recognizer(&mut m, cfg, &seen, cfg.finetune.epochs, cfg.seed ^ 0xf17e)?;
            (m.to_checkpoint(), losses)
        }
    };
    let seen_match_before = stroke_match_rate(&Recognizer::from_checkpoint(&trained)?, &data.val)?;
    let (mut model, audit) = apply_surgery(&trained, pretrained, &cfg.finetune.plan)?;
    let surgery_loss = train_recognizer(&mut model, cfg, &seen, cfg.finetune.surgery_epochs, cfg.seed ^ 0x5e6)?;
    let seen_match = stroke_match_rate(&model, &data.val)?;
    use crate::zeroshot::Disposition::*;
    let report = FinetuneReport {
        trained_loss,
        surgery_loss,
        seen_match_before,
        seen_match,
        overwrite: audit.count(Overwrite),
        freeze: audit.count(Freeze),
        tune: audit.count(Tune),
    };
    log::info!("seen-class exact match {seen_match_before:.3} before surgery, {seen_match:.3} after");
    Ok(Finetuned { trained, model, audit, report })
}

pub fn save_finetuned(f: &Finetuned, dir: &Path) -> Result<()> {
    f.trained.save(dir.join("trained.ckpt"))?;
    f.model.to_checkpoint().save(dir.join("finetuned.ckpt"))?;
    write_text(&dir.join("surgery_audit.csv"), &f.audit.to_csv())?;
    write_json(&dir.join("finetune.json"), &f.report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub report: ZeroShotReport,
    pub random_baseline: f64,
}

/// Zero-shot evaluation on jittered renders of the held-out classes, with
/// confusable sets over those classes built from clean renders.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, model: &Recognizer) -> Result<(Evaluation, String)> {
    let unseen = ds.unseen();
    let size = model.config.image_size;
    let w = default_stroke_width(size);
    let sets = build_confusable_sets(&unseen, |s| model.encode_image(&render_full(s, size, w)?))?;
    let data = RecognitionData::new(cfg, ds)?;
    let report = evaluate_zero_shot(model, &sets, &data.test, ds.split.train.len())?;
    let labels: Vec<String> = data.test.iter().map(|(_, l)| l.clone()).collect();
    let random_baseline = random_baseline(&sets, &labels, cfg.finetune.baseline_trials, cfg.seed)?;
    log::info!(
        "zero-shot accuracy {:.4}, stroke match {:.4}, random baseline {random_baseline:.6}",
        report.accuracy,
        report.stroke_match_rate
    );
    Ok((Evaluation { report, random_baseline }, confusable_sets_json(&sets)))
}

pub fn save_evaluation(e: &Evaluation, sets_json: &str, dir: &Path) -> Result<()> {
    e.report.write(dir)?;
    write_json(&dir.join("baseline.json"), &serde_json::json!({ "random_baseline": e.random_baseline }))?;
    write_text(&dir.join("confusable_sets.json"), sets_json)
}

/// One strip per character: ground-truth frames above, reconstruction
/// below, `pad_len` frames each. Returns the number of strips written.
pub fn reconstruct(ds: &Dataset, ck: &ModelCheckpoint, dir: &Path) -> Result<usize> {
    let form: Form = ck.meta_parse("form").unwrap_or(Form::A);
    let strips = dir.join("strips");
    fs::create_dir_all(&strips).map_err(|e| SaeError::io(&strips, e))?;
    let mut mse = Vec::with_capacity(ds.specs.len());
    for (i, spec) in ds.specs.iter().enumerate() {
        let (truth, pred) = match ck.meta("arch")? {
            vit::ARCH => {
                let m = VitModel::from_checkpoint(ck)?;
                let c = &m.config;
                let input = render_full(spec, c.image_size, default_stroke_width(c.image_size))?;
                let seq = rasterize(spec, c.frame_size, default_stroke_width(c.frame_size), form)?;
                (pad_sequence(&seq, c.pad_len)?.frames, m.reconstruct(&input)?.frames)
            }
            rnt::ARCH => {
                let m = RntModel::from_checkpoint(ck)?;
                let s = rnt_samples(std::slice::from_ref(spec), &m.config, form)?.remove(0);
                (s.frames.clone(), m.decode_autoregressive(&s.image)?)
            }
            other => return Err(SaeError::Config(format!("cannot reconstruct with a `{other}` checkpoint"))),
        };
        mse.push(serde_json::json!({ "label": spec.label, "mse": frame_mse(&pred, &truth) }));
        write_strip(strips.join(format!("{i:04}.pgm")), &[truth, pred])?;
    }
    write_json(&dir.join("reconstruction.json"), &mse)?;
    Ok(ds.specs.len())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbedReport {
    pub characters: usize,
    pub radical_check: Option<ShuffleControl>,
}

/// Character embeddings from the ViT decoder. For the synthetic alphabet
/// also radical embeddings, the character × radical similarity matrix, a
/// k-means clustering and the shuffled-label retrieval control.
pub fn embed(cfg: &RunConfig, ds: &Dataset, ck: &ModelCheckpoint, dir: &Path) -> Result<EmbedReport> {
    let model = VitModel::from_checkpoint(ck)?;
    let n = cfg.embed_count.unwrap_or(ds.specs.len());
    if n == 0 || n > ds.specs.len() {
        return Err(SaeError::Config(format!("embed count {n} outside 1..={}", ds.specs.len())));
    }
    let chars = embed_specs(&model, &ds.specs[..n])?;
    export_embeddings(dir.join("embeddings.csv"), &chars)?;
    let vectors: Vec<Vec<f64>> = chars.iter().map(|e| e.vector.clone()).collect();
    let k = if ds.radicals.is_empty() { (n as f64).sqrt().ceil() as usize } else { ds.radicals.len().min(n) };
    let km = kmeans_cosine(&vectors, k, cfg.seed, 100)?;
    let mut clusters = String::from("label,cluster\n");
    for (e, c) in chars.iter().zip(&km.assignments) {
        clusters.push_str(&format!("{},{c}\n", e.label));
    }
    write_text(&dir.join("clusters.csv"), &clusters)?;
    let radical_check = if ds.radicals.is_empty() {
        None
    } else {
        let (check, _) = radical_retrieval(&model, ds, &chars, cfg.seed, Some(dir))?;
        Some(check)
    };
    let report = EmbedReport { characters: n, radical_check };
    write_json(&dir.join("embed.json"), &report)?;
    Ok(report)
}

pub fn embed_specs(model: &VitModel, specs: &[CharacterSpec]) -> Result<Vec<CharEmbedding>> {
    let size = model.config.image_size;
    let w = default_stroke_width(size);
    specs
        .iter()
        .map(|s| embed_character(model, &s.label, &render_full(s, size, w)?, s.stroke_count()))
        .collect()
}

/// Ranks each character's radicals among all radicals by cosine and
/// compares against 20 shuffled radical labellings.
pub fn radical_retrieval(
    model: &VitModel,
    ds: &Dataset,
    chars: &[CharEmbedding],
    seed: u64,
    export: Option<&Path>,
) -> Result<(ShuffleControl, Vec<CharEmbedding>)> {
    let radicals = embed_specs(model, &ds.radicals)?;
    let a: Vec<Vec<f64>> = chars.iter().map(|e| e.vector.clone()).collect();
    let b: Vec<Vec<f64>> = radicals.iter().map(|e| e.vector.clone()).collect();
    let sim = cosine_matrix(&a, &b)?;
    let truth = chars
        .iter()
        .map(|e| ds.composition.get(&e.label).cloned().ok_or_else(|| SaeError::Data(format!("`{}` has no composition", e.label))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = export {
        let rows: Vec<String> = chars.iter().map(|e| e.label.clone()).collect();
        let cols: Vec<String> = radicals.iter().map(|e| e.label.clone()).collect();
        export_similarity(dir.join("similarity.csv"), &rows, &cols, &sim)?;
        export_embeddings(dir.join("radical_embeddings.csv"), &radicals)?;
    }
    Ok((shuffle_control(&sim, &truth, 20, seed)?, radicals))
}
