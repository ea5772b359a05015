//! Layers assembled from graph operations. Each layer is a small descriptor
//! (parameter-name prefix plus extents); the values live in a [`ParamStore`].

use rand::Rng;

use crate::autodiff::{AttnSpec, BnMode, BnStats, ConvGeom, Graph, Var};
use crate::error::{Result, SaeError};
use crate::params::{init, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Affine map `x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(self.weight(), init::xavier(self.in_dim, self.out_dim, rng), true);
        store.insert(self.bias(), Tensor::zeros(&[self.out_dim]), true);
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight())?;
        let b = g.param(store, &self.bias())?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.dim]), true);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]), true);
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(SaeError::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        let name = name.into();
        Ok(MultiHeadAttention {
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            out: Linear::new(format!("{name}.out"), dim, dim),
            name,
            dim,
            heads,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng);
        }
    }

    /// Self-attention when `memory` is `None`; otherwise queries come from `x`
    /// and keys/values from `memory` (`kv_len` rows per sequence).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        seq_len: usize,
        memory: Option<(Var, usize)>,
        causal: bool,
    ) -> Result<Var> {
        let (src, kv_len) = memory.unwrap_or((x, seq_len));
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, src)?;
        let v = self.v.forward(g, store, src)?;
        let spec = AttnSpec { heads: self.heads, q_len: seq_len, kv_len, causal };
        let a = g.attention(q, k, v, spec)?;
        self.out.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(norm(x))`, optionally
/// `x + cross(norm(x), memory)`, then `x + ffn(norm(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub name: String,
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    norm2: LayerNorm,
    ffn: FeedForward,
    causal: bool,
}

impl TransformerBlock {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        cross_attention: bool,
        causal: bool,
    ) -> Result<Self> {
        let name = name.into();
        let cross = if cross_attention {
            Some((
                LayerNorm::new(format!("{name}.norm_cross"), dim),
                MultiHeadAttention::new(format!("{name}.cross"), dim, heads)?,
            ))
        } else {
            None
        };
        Ok(TransformerBlock {
            norm1: LayerNorm::new(format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(format!("{name}.attn"), dim, heads)?,
            cross,
            norm2: LayerNorm::new(format!("{name}.norm2"), dim),
            ffn: FeedForward::new(&format!("{name}.mlp"), dim, dim * mlp_ratio),
            name,
            causal,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.norm1.init(store);
        self.attn.init(store, rng);
        if let Some((n, a)) = &self.cross {
            n.init(store);
            a.init(store, rng);
        }
        self.norm2.init(store);
        self.ffn.init(store, rng);
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        seq_len: usize,
        memory: Option<(Var, usize)>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, seq_len, None, self.causal)?;
        let mut x = g.add(x, h)?;
        if let Some((norm, cross)) = &self.cross {
            let mem = memory.ok_or_else(|| {
                SaeError::Usage(format!("{}: cross-attention block needs memory", self.name))
            })?;
            let h = norm.forward(g, store, x)?;
            let h = cross.forward(g, store, h, seq_len, Some(mem), false)?;
            x = g.add(x, h)?;
        }
        let h = self.norm2.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Whether batch norms use batch statistics or their running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running-statistic updates collected during a training forward pass,
/// applied after the optimizer step.
#[derive(Default, Debug)]
pub struct BnUpdates {
    pub entries: Vec<(String, BnStats)>,
}

impl BnUpdates {
    /// `running = (1 - momentum)·running + momentum·batch`, in call order.
    pub fn apply(self, store: &mut ParamStore) -> Result<()> {
        for (name, stats) in self.entries {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let t = store.get_mut(&format!("{name}.{suffix}"))?;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm { name: name.into(), channels }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[c]), true);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[c]), true);
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[c]), false);
        store.insert(format!("{}.running_var", self.name), Tensor::ones(&[c]), false);
    }

    /// Batch statistics are used only in training mode and only while the
    /// layer's scale is trainable; frozen layers always use running estimates.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        mode: NormMode,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let gname = format!("{}.gamma", self.name);
        let gamma = g.param(store, &gname)?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        let use_batch = mode == NormMode::Train && store.is_trainable(&gname);
        let bn_mode = if use_batch {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: store.get(&format!("{}.running_mean", self.name))?.data(),
                var: store.get(&format!("{}.running_var", self.name))?.data(),
            }
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, bn_mode, BN_EPS)?;
        if let Some(stats) = stats {
            updates.entries.push((self.name.clone(), stats));
        }
        Ok(y)
    }
}

/// conv3x3 → BN → ReLU → conv3x3 → BN, plus shortcut, then ReLU. The shortcut
/// is a strided 1×1 conv + BN when the block downsamples or changes width.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub name: String,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    bn1: BatchNorm,
    bn2: BatchNorm,
    shortcut: Option<BatchNorm>,
}

impl ResidualBlock {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let name = name.into();
        let shortcut = (stride != 1 || in_ch != out_ch)
            .then(|| BatchNorm::new(format!("{name}.shortcut.bn"), out_ch));
        ResidualBlock {
            bn1: BatchNorm::new(format!("{name}.bn1"), out_ch),
            bn2: BatchNorm::new(format!("{name}.bn2"), out_ch),
            shortcut,
            name,
            in_ch,
            out_ch,
            stride,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let n = &self.name;
        store.insert(format!("{n}.conv1.weight"), init::kaiming_conv(self.out_ch, self.in_ch, 3, rng), true);
        store.insert(format!("{n}.conv2.weight"), init::kaiming_conv(self.out_ch, self.out_ch, 3, rng), true);
        self.bn1.init(store);
        self.bn2.init(store);
        if let Some(bn) = &self.shortcut {
            store.insert(format!("{n}.shortcut.conv.weight"), init::kaiming_conv(self.out_ch, self.in_ch, 1, rng), true);
            bn.init(store);
        }
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        mode: NormMode,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let n = &self.name;
        let w1 = g.param(store, &format!("{n}.conv1.weight"))?;
        let w2 = g.param(store, &format!("{n}.conv2.weight"))?;
        let h = g.conv2d(x, w1, ConvGeom { stride: self.stride, pad: 1 })?;
        let h = self.bn1.forward(g, store, h, mode, updates)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, w2, ConvGeom { stride: 1, pad: 1 })?;
        let h = self.bn2.forward(g, store, h, mode, updates)?;
        let skip = match &self.shortcut {
            Some(bn) => {
                let ws = g.param(store, &format!("{n}.shortcut.conv.weight"))?;
                let s = g.conv2d(x, ws, ConvGeom { stride: self.stride, pad: 0 })?;
                bn.forward(g, store, s, mode, updates)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        g.relu(y)
    }
}

/// Stem: conv3x3 → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvStem {
    pub name: String,
    in_ch: usize,
    out_ch: usize,
    bn: BatchNorm,
}

impl ConvStem {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        let name = name.into();
        ConvStem { bn: BatchNorm::new(format!("{name}.bn"), out_ch), name, in_ch, out_ch }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(
            format!("{}.conv.weight", self.name),
            init::kaiming_conv(self.out_ch, self.in_ch, 3, rng),
            true,
        );
        self.bn.init(store);
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        mode: NormMode,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let w = g.param(store, &format!("{}.conv.weight", self.name))?;
        let h = g.conv2d(x, w, ConvGeom { stride: 1, pad: 1 })?;
        let h = self.bn.forward(g, store, h, mode, updates)?;
        g.relu(h)
    }
}
