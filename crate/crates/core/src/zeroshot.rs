//! Stroke-class recognition on top of the residual-conv encoder and step
//! decoder, confusable-set resolution, parameter surgery and zero-shot
//! evaluation.
//!
//! The recognizer reads an image and emits stroke classes one step at a
//! time. Characters sharing a stroke string form a confusable set; a
//! predicted string selects the set and, when it has several members, the
//! member whose clean-render features are closest in cosine to the input's
//! wins.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ModelCheckpoint;
use crate::embed::cosine;
use crate::error::{Result, SaeError};
use crate::nn::{BnUpdates, Linear, NormMode};
use crate::optim::AdamW;
use crate::params::{ParamStore, Parameterized};
use crate::rnt::{check_layout, image_batch, ConvEncoder, RntConfig, StepDecoder};
use crate::strokegen::{decode_stroke_string, encode_strokes, CharacterSpec, Image};
use crate::tensor::Tensor;

pub const ARCH: &str = "rnt-recognizer";

pub const PAD: usize = 0;
pub const BOS: usize = 6;
pub const EOS: usize = 7;
pub const VOCAB_SIZE: usize = 8;

/// Decoder targets for a stroke string: class codes, then EOS, then PAD up
/// to `steps`.
pub fn target_symbols(strokes: &str, steps: usize) -> Result<Vec<usize>> {
    let classes = decode_stroke_string(strokes)?;
    if classes.len() + 1 > steps {
        return Err(SaeError::Data(format!(
            "stroke string of length {} does not fit {steps} decoder steps",
            classes.len()
        )));
    }
    let mut t: Vec<usize> = classes.iter().map(|c| c.code() as usize).collect();
    t.push(EOS);
    t.resize(steps, PAD);
    Ok(t)
}

/// Decoder inputs for targets: BOS, then the targets shifted right by one.
fn shifted_inputs(targets: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(targets[..targets.len() - 1].iter().copied()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionSample {
    pub image: Image,
    pub strokes: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Prediction {
    pub strokes: String,
    /// False when decoding hit the step limit without emitting EOS.
    pub terminated: bool,
}

/// Anything that can read stroke strings and produce resolution features.
pub trait StrokeRecognizer {
    fn predict_strokes(&self, image: &Image) -> Result<Prediction>;
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Encoder and decoder as in the reconstruction model, with symbol
/// embeddings in place of frame embeddings and a class head.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub config: RntConfig,
    pub params: ParamStore,
    /// Set by surgery: batch norms use their running statistics and are no
    /// longer updated.
    pub bn_frozen: bool,
    encoder: ConvEncoder,
    decoder: StepDecoder,
    head: Linear,
}

const SYMBOLS: &str = "rnt.embed.symbols";

impl Recognizer {
    fn layout(config: RntConfig, params: ParamStore, bn_frozen: bool) -> Result<Self> {
        config.validate()?;
        Ok(Recognizer {
            encoder: ConvEncoder::new("rnt.encoder", config.width),
            decoder: StepDecoder::new(&config, config.pad_len + 1)?,
            head: Linear::new("rnt.head", config.width, VOCAB_SIZE),
            config,
            params,
            bn_frozen,
        })
    }

    pub fn new(config: RntConfig, seed: u64) -> Result<Self> {
        let mut m = Self::layout(config, ParamStore::new(), false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.encoder.init(&mut m.params, &mut rng);
        m.params.insert(SYMBOLS, Tensor::randn(&[VOCAB_SIZE, m.config.width], 0.02, &mut rng), true);
        m.decoder.init(&mut m.params, &mut rng);
        m.head.init(&mut m.params, &mut rng);
        Ok(m)
    }

    pub fn from_params(config: RntConfig, params: ParamStore, bn_frozen: bool) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        check_layout(&reference.params, &params)?;
        Self::layout(config, params, bn_frozen)
    }

    /// Decoder steps: the longest stroke string plus EOS.
    pub fn steps(&self) -> usize {
        self.decoder.steps()
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::new(self.params.clone())
            .with_meta("arch", ARCH)
            .with_meta("rnt.config", serde_json::to_string(&self.config).expect("config serializes"))
            .with_meta("bn_frozen", self.bn_frozen.to_string())
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.meta("arch")? != ARCH {
            return Err(SaeError::Config(format!("checkpoint is `{}`, not {ARCH}", ck.meta("arch")?)));
        }
        let config: RntConfig = serde_json::from_str(ck.meta("rnt.config")?)
            .map_err(|e| SaeError::Config(format!("bad rnt config in checkpoint: {e}")))?;
        let frozen = ck.meta_parse::<bool>("bn_frozen")?;
        Self::from_params(config, ck.params.clone(), frozen)
    }

    fn norm_mode(&self, training: bool) -> NormMode {
        if training && !self.bn_frozen {
            NormMode::Train
        } else {
            NormMode::Eval
        }
    }

    fn encode<'a>(&'a self, g: &mut Graph<'a>, images: Var, mode: NormMode, upd: &mut BnUpdates) -> Result<Var> {
        let f = self.encoder.forward(g, &self.params, images, mode, upd)?;
        self.encoder.to_tokens(g, f)
    }

    fn decode<'a>(&'a self, g: &mut Graph<'a>, memory: Var, inputs: &[usize]) -> Result<Var> {
        let table = g.param(&self.params, SYMBOLS)?;
        let x = g.gather_rows(table, inputs)?;
        let h = self.decoder.forward(g, &self.params, x, memory)?;
        self.head.forward(g, &self.params, h)
    }

    /// Logits `[B·steps, VOCAB_SIZE]` for `[B, 1, H, W]` images and stacked
    /// per-sample decoder inputs.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        images: Var,
        inputs: &[usize],
        mode: NormMode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let memory = self.encode(g, images, mode, upd)?;
        self.decode(g, memory, inputs)
    }

    /// Summed per-step cross entropy up to EOS, averaged over the batch.
    fn batch_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        batch: &[RecognitionSample],
        mode: NormMode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let steps = self.steps();
        let mut inputs = Vec::with_capacity(batch.len() * steps);
        let mut targets = Vec::with_capacity(batch.len() * steps);
        for s in batch {
            let t = target_symbols(&s.strokes, steps)?;
            inputs.extend(shifted_inputs(&t));
            targets.extend(t.iter().map(|&v| (v != PAD).then_some(v)));
        }
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let x = g.constant(image_batch(&images, self.config.image_size)?);
        let logits = self.forward(g, x, &inputs, mode, upd)?;
        let l = g.softmax_cross_entropy_masked(logits, &targets)?;
        g.scale(l, 1.0 / batch.len() as f64)
    }

    /// Loss in inference mode.
    pub fn loss(&self, batch: &[RecognitionSample]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.batch_loss(&mut g, batch, NormMode::Eval, &mut BnUpdates::default())?;
        g.value(l).item()
    }

    /// Patch tokens of the image, flattened.
    pub fn encode_image(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(image_batch(&[image], self.config.image_size)?);
        let t = self.encode(&mut g, x, NormMode::Eval, &mut BnUpdates::default())?;
        Ok(g.value(t).data().to_vec())
    }

    /// Greedy decoding from BOS. PAD and BOS are never emitted, and EOS is
    /// barred at the first step so at least one stroke comes out.
    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let memory = {
            let mut g = Graph::new();
            let x = g.constant(image_batch(&[image], self.config.image_size)?);
            let t = self.encode(&mut g, x, NormMode::Eval, &mut BnUpdates::default())?;
            g.value(t).clone()
        };
        let steps = self.steps();
        let mut inputs = vec![PAD; steps];
        inputs[0] = BOS;
        let mut strokes = String::new();
        for t in 0..steps {
            let mut g = Graph::new();
            let mem = g.constant(memory.clone());
            let logits = self.decode(&mut g, mem, &inputs)?;
            let row = &g.value(logits).data()[t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE];
            let mut best = (0, f64::NEG_INFINITY);
            for (sym, &v) in row.iter().enumerate() {
                let allowed = sym != PAD && sym != BOS && !(t == 0 && sym == EOS);
                if allowed && v > best.1 {
                    best = (sym, v);
                }
            }
            if best.0 == EOS {
                return Ok(Prediction { strokes, terminated: true });
            }
            strokes.push(char::from(b'0' + best.0 as u8));
            if t + 1 < steps {
                inputs[t + 1] = best.0;
            }
        }
        log::debug!("no end symbol within {steps} steps; prediction `{strokes}` truncated");
        Ok(Prediction { strokes, terminated: false })
    }
}

impl StrokeRecognizer for Recognizer {
    fn predict_strokes(&self, image: &Image) -> Result<Prediction> {
        self.predict(image)
    }

    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        self.encode_image(image)
    }
}

impl Parameterized for Recognizer {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// One teacher-forced cross-entropy update of the trainable parameters;
/// returns the loss before the update.
pub fn finetune_step(model: &mut Recognizer, opt: &mut AdamW, batch: &[RecognitionSample], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(SaeError::Usage("empty batch".into()));
    }
    let mode = model.norm_mode(true);
    let mut updates = BnUpdates::default();
    let (loss, grads) = {
        let mut g = Graph::new();
        let l = model.batch_loss(&mut g, batch, mode, &mut updates)?;
        let grads = g.backward(l)?.named(&g);
        (g.value(l).item()?, grads)
    };
    opt.step(&mut model.params, &grads, lr)?;
    updates.apply(&mut model.params)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfusableSet {
    pub key: String,
    pub members: Vec<String>,
    #[serde(skip)]
    pub features: Vec<Vec<f64>>,
}

/// Groups characters by stroke string, sorted by key; members keep input
/// order. `features` gives each member's reference vector.
pub fn build_confusable_sets(
    specs: &[CharacterSpec],
    mut features: impl FnMut(&CharacterSpec) -> Result<Vec<f64>>,
) -> Result<Vec<ConfusableSet>> {
    let mut by_key: BTreeMap<String, ConfusableSet> = BTreeMap::new();
    for spec in specs {
        let key = encode_strokes(spec);
        let f = features(spec)?;
        let set = by_key.entry(key.clone()).or_insert_with(|| ConfusableSet { key, members: vec![], features: vec![] });
        if set.members.contains(&spec.label) {
            return Err(SaeError::Data(format!("duplicate character `{}`", spec.label)));
        }
        set.members.push(spec.label.clone());
        set.features.push(f);
    }
    Ok(by_key.into_values().collect())
}

/// JSON object mapping each stroke string to its member labels.
pub fn confusable_sets_json(sets: &[ConfusableSet]) -> String {
    let map: BTreeMap<&str, &[String]> = sets.iter().map(|s| (s.key.as_str(), s.members.as_slice())).collect();
    serde_json::to_string_pretty(&map).expect("string map serializes")
}

/// Member with the highest cosine to `f` (lowest index on ties), and that
/// cosine.
pub fn resolve_confusable(f: &[f64], set: &ConfusableSet) -> Result<(usize, f64)> {
    if set.features.is_empty() {
        return Err(SaeError::Data(format!("confusable set `{}` is empty", set.key)));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in set.features.iter().enumerate() {
        let s = cosine(f, r)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    Overwrite,
    Freeze,
    Tune,
}

/// Parameter-name prefixes selecting the overwrite and freeze sets;
/// everything else is tuned.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SurgeryPlan {
    pub overwrite: Vec<String>,
    pub freeze: Vec<String>,
}

impl Default for SurgeryPlan {
    /// Last encoder block and the decoder take pre-trained values; the first
    /// three encoder blocks are frozen. The class head cannot be overwritten
    /// since its output width differs from the reconstruction head.
    fn default() -> Self {
        SurgeryPlan {
            overwrite: vec!["rnt.encoder.block4.".into(), "rnt.decoder.".into()],
            freeze: ["rnt.encoder.block1.", "rnt.encoder.block2.", "rnt.encoder.block3."].map(String::from).to_vec(),
        }
    }
}

impl SurgeryPlan {
    pub fn disposition(&self, name: &str) -> Result<Disposition> {
        let o = self.overwrite.iter().any(|p| name.starts_with(p.as_str()));
        let f = self.freeze.iter().any(|p| name.starts_with(p.as_str()));
        match (o, f) {
            (true, true) => Err(SaeError::Surgery {
                param: name.to_string(),
                message: "selected for both overwrite and freeze".into(),
            }),
            (true, false) => Ok(Disposition::Overwrite),
            (false, true) => Ok(Disposition::Freeze),
            (false, false) => Ok(Disposition::Tune),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurgeryAudit {
    pub entries: Vec<(String, Disposition)>,
}

impl SurgeryAudit {
    pub fn count(&self, d: Disposition) -> usize {
        self.entries.iter().filter(|(_, x)| *x == d).count()
    }

    pub fn names(&self, d: Disposition) -> Vec<&str> {
        self.entries.iter().filter(|(_, x)| *x == d).map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,disposition\n");
        for (n, d) in &self.entries {
            let d = match d {
                Disposition::Overwrite => "overwrite",
                Disposition::Freeze => "freeze",
                Disposition::Tune => "tune",
            };
            s.push_str(&format!("{n},{d}\n"));
        }
        s
    }
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Overwrites the plan's overwrite set of a trained recognizer with
/// pre-trained values, freezes the freeze set and marks the rest trainable.
/// Batch-norm running statistics stay non-trainable and stop updating.
pub fn apply_surgery(
    trained: &ModelCheckpoint,
    pretrained: &ModelCheckpoint,
    plan: &SurgeryPlan,
) -> Result<(Recognizer, SurgeryAudit)> {
    let base = Recognizer::from_checkpoint(trained)?;
    let mut params = base.params.clone();
    let mut entries = Vec::with_capacity(params.len());
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let d = plan.disposition(&name)?;
        if d == Disposition::Overwrite {
            let src = pretrained.params.get(&name).map_err(|_| SaeError::Surgery {
                param: name.clone(),
                message: "missing from the pre-trained checkpoint".into(),
            })?;
            let dst = params.get_mut(&name)?;
            if src.shape() != dst.shape() {
                return Err(SaeError::Surgery {
                    param: name.clone(),
                    message: format!("pre-trained shape {:?}, model shape {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
        }
        params.set_trainable(&name, d != Disposition::Freeze && !is_running_stat(&name))?;
        entries.push((name, d));
    }
    let model = Recognizer::from_params(base.config, params, true)?;
    Ok((model, SurgeryAudit { entries }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemResult {
    pub label: String,
    pub truth: String,
    pub predicted: String,
    pub terminated: bool,
    pub resolved: Option<String>,
    pub stroke_match: bool,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub n_seen: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub stroke_match_rate: f64,
    /// Predictions whose string matched no set.
    pub unmatched: usize,
    pub items: Vec<ItemResult>,
}

impl ZeroShotReport {
    pub fn summary_csv(&self) -> String {
        format!(
            "n_seen,accuracy,stroke_match_rate,n_test\n{},{},{},{}\n",
            self.n_seen, self.accuracy, self.stroke_match_rate, self.n_test
        )
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let summary = dir.join("eval.csv");
        std::fs::write(&summary, self.summary_csv()).map_err(|e| SaeError::io(&summary, e))?;
        let items = dir.join("eval_items.json");
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&items, json).map_err(|e| SaeError::io(&items, e))
    }
}

fn label_index(sets: &[ConfusableSet]) -> HashMap<&str, (usize, usize)> {
    let mut idx = HashMap::new();
    for (s, set) in sets.iter().enumerate() {
        for (m, label) in set.members.iter().enumerate() {
            idx.insert(label.as_str(), (s, m));
        }
    }
    idx
}

/// Predict, look up the set by stroke string, resolve within the set, and
/// score exact label matches. Every test label must belong to a set.
pub fn evaluate_zero_shot(
    model: &impl StrokeRecognizer,
    sets: &[ConfusableSet],
    test: &[(Image, String)],
    n_seen: usize,
) -> Result<ZeroShotReport> {
    if test.is_empty() {
        return Err(SaeError::Usage("no test images".into()));
    }
    let labels = label_index(sets);
    let keys: HashMap<&str, usize> = sets.iter().enumerate().map(|(i, s)| (s.key.as_str(), i)).collect();
    let mut items = Vec::with_capacity(test.len());
    let mut unmatched = 0;
    for (image, label) in test {
        let &(truth_set, _) = labels
            .get(label.as_str())
            .ok_or_else(|| SaeError::Data(format!("test label `{label}` is in no confusable set")))?;
        let pred = model.predict_strokes(image)?;
        let resolved = match keys.get(pred.strokes.as_str()) {
            None => {
                unmatched += 1;
                log::debug!("`{label}`: predicted `{}` matches no confusable set", pred.strokes);
                None
            }
            Some(&s) => {
                let set = &sets[s];
                let i = if set.members.len() == 1 { 0 } else { resolve_confusable(&model.features(image)?, set)?.0 };
                Some(set.members[i].clone())
            }
        };
        let truth = sets[truth_set].key.clone();
        items.push(ItemResult {
            label: label.clone(),
            stroke_match: pred.strokes == truth,
            correct: resolved.as_deref() == Some(label.as_str()),
            truth,
            predicted: pred.strokes,
            terminated: pred.terminated,
            resolved,
        });
    }
    let n = items.len() as f64;
    Ok(ZeroShotReport {
        n_seen,
        n_test: items.len(),
        accuracy: items.iter().filter(|i| i.correct).count() as f64 / n,
        stroke_match_rate: items.iter().filter(|i| i.stroke_match).count() as f64 / n,
        unmatched,
        items,
    })
}

/// Predicts stroke strings of a length drawn from `lengths` with uniform
/// classes, and random feature vectors.
pub struct RandomRecognizer {
    lengths: Vec<usize>,
    feature_dim: usize,
    rng: RefCell<ChaCha8Rng>,
}

impl RandomRecognizer {
    pub fn new(lengths: Vec<usize>, feature_dim: usize, seed: u64) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) || feature_dim == 0 {
            return Err(SaeError::Config("random recognizer needs positive lengths and feature width".into()));
        }
        Ok(RandomRecognizer { lengths, feature_dim, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) })
    }
}

fn random_string<R: Rng + ?Sized>(lengths: &[usize], rng: &mut R) -> String {
    let len = *lengths.choose(rng).expect("non-empty");
    (0..len).map(|_| char::from(b'0' + rng.gen_range(1..=5u8))).collect()
}

impl StrokeRecognizer for RandomRecognizer {
    fn predict_strokes(&self, _: &Image) -> Result<Prediction> {
        Ok(Prediction { strokes: random_string(&self.lengths, &mut *self.rng.borrow_mut()), terminated: true })
    }

    fn features(&self, _: &Image) -> Result<Vec<f64>> {
        Ok(crate::embed::random_direction(self.feature_dim, &mut *self.rng.borrow_mut()))
    }
}

/// Expected accuracy of guessing: a string whose length is drawn from the
/// test keys' lengths and whose classes are uniform, resolved to a uniformly
/// chosen member of the matching set. Estimated over `trials` passes of the
/// test labels.
pub fn random_baseline(sets: &[ConfusableSet], test_labels: &[String], trials: usize, seed: u64) -> Result<f64> {
    if test_labels.is_empty() || trials == 0 {
        return Err(SaeError::Usage("random baseline needs test labels and trials".into()));
    }
    let labels = label_index(sets);
    let keys: HashMap<&str, usize> = sets.iter().enumerate().map(|(i, s)| (s.key.as_str(), i)).collect();
    let mut lengths = Vec::with_capacity(test_labels.len());
    for l in test_labels {
        let &(s, _) = labels.get(l.as_str()).ok_or_else(|| SaeError::Data(format!("test label `{l}` is in no set")))?;
        lengths.push(sets[s].key.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        for l in test_labels {
            let guess = random_string(&lengths, &mut rng);
            if let Some(&s) = keys.get(guess.as_str()) {
                if sets[s].members.choose(&mut rng) == Some(l) {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / (trials * test_labels.len()) as f64)
}
