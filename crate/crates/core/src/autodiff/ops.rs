//! Differentiable operations: forward evaluation and vector-Jacobian products.

use super::{Graph, Var};
use crate::error::{Result, SaeError};
use crate::tensor::{gemm, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

/// Shape of a fused scaled-dot-product attention call over `batch` independent
/// sequences stacked along the row axis: queries are `batch·q_len` rows and
/// keys/values `batch·kv_len` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub causal: bool,
}

/// Batch-norm mode: batch statistics, or frozen running statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'t> {
    Train,
    Eval { mean: &'t [f64], var: &'t [f64] },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    batched: bool,
}

pub(super) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, bias: Var },
    AddTiled { x: Var, table: Var },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
    SoftmaxCe { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::AddTiled { .. } => "add_tiled",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Attention { .. } => "attention",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse { .. } => "mse_loss",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }

    pub(super) fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
            Op::AddRow { x, bias } => vec![x, bias],
            Op::AddTiled { x, table } => vec![x, table],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::GatherRows { x, .. } => vec![x],
            Op::Mse { pred, target } => vec![pred, target],
            Op::SoftmaxCe { logits, .. } => vec![logits],
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    let (n, c, h, wd, batched) = match *x {
        [c, h, w] => (1, c, h, w, false),
        [n, c, h, w] => (n, c, h, w, true),
        _ => return Err(SaeError::dim(format!("conv2d input must be CxHxW or NxCxHxW, got {x:?}"))),
    };
    let [f, wc, kh, kw] = *w else {
        return Err(SaeError::dim(format!("conv2d kernel must be FxCxKhxKw, got {w:?}")));
    };
    if wc != c {
        return Err(SaeError::dim(format!("conv2d channel mismatch: input {c}, kernel {wc}")));
    }
    if geom.stride == 0 {
        return Err(SaeError::Config("conv2d stride must be positive".into()));
    }
    let (ph, pw) = (h + 2 * geom.pad, wd + 2 * geom.pad);
    if kh > ph || kw > pw {
        return Err(SaeError::dim(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {ph}x{pw}: non-positive output extent"
        )));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w: wd,
        f,
        kh,
        kw,
        oh: (ph - kh) / geom.stride + 1,
        ow: (pw - kw) / geom.stride + 1,
        batched,
    })
}

fn im2col(img: &[f64], d: &ConvDims, geom: ConvGeom, cols: &mut [f64]) {
    let plane = d.oh * d.ow;
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let y = (oy * geom.stride + i) as isize - geom.pad as isize;
                    for ox in 0..d.ow {
                        let x = (ox * geom.stride + j) as isize - geom.pad as isize;
                        dst[oy * d.ow + ox] = if y >= 0 && x >= 0 && (y as usize) < d.h && (x as usize) < d.w {
                            img[(c * d.h + y as usize) * d.w + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, geom: ConvGeom, img: &mut [f64]) {
    let plane = d.oh * d.ow;
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let y = (oy * geom.stride + i) as isize - geom.pad as isize;
                    if y < 0 || y as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let x = (ox * geom.stride + j) as isize - geom.pad as isize;
                        if x >= 0 && (x as usize) < d.w {
                            img[(c * d.h + y as usize) * d.w + x as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape into (outer count, channels, inner plane) for batch norm.
fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h * w)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(SaeError::dim(format!("batch_norm input must be CxHxW or NxCxHxW, got {shape:?}"))),
    }
}

impl<'a> Graph<'a> {
    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).sub(self.val(b))?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.val(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    /// Adds a vector along the last axis (bias broadcast).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(bias));
        let n = *xv.shape().last().unwrap();
        if bv.len() != n {
            return Err(SaeError::dim(format!(
                "add_row: bias of {} values for last extent {n}",
                bv.len()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow { x, bias })
    }

    /// `x` is `g` stacked copies of the shape of `table` along rows; the table
    /// is added to each copy (positional tables over a batch of sequences).
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.val(x), self.val(table));
        let (r, c) = xv.dims2()?;
        let (tr, tc) = tv.dims2()?;
        if tc != c || tr == 0 || r % tr != 0 {
            return Err(SaeError::dim(format!(
                "add_tiled: {:?} is not a stack of {:?}",
                xv.shape(),
                tv.shape()
            )));
        }
        let mut out = xv.clone();
        for block in out.data_mut().chunks_mut(tr * tc) {
            for (o, t) in block.iter_mut().zip(tv.data()) {
                *o += t;
            }
        }
        self.push(out, Op::AddTiled { x, table })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .val(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Layer normalization over the last axis of a matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.val(x);
        let (rows, d) = xv.dims2()?;
        let (gv, bv) = (self.val(gamma), self.val(beta));
        if gv.len() != d || bv.len() != d {
            return Err(SaeError::dim(format!("layer_norm: affine params must have {d} values")));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_raw(vec![rows, d], out);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Per-channel batch normalization of `CxHxW` or `NxCxHxW` input. In
    /// training mode the statistics of this call are returned so the caller
    /// can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats>)> {
        let xv = self.val(x);
        let (n, c, plane) = bn_layout(xv.shape())?;
        let (gv, bv) = (self.val(gamma), self.val(beta));
        if gv.len() != c || bv.len() != c {
            return Err(SaeError::dim(format!("batch_norm: affine params must have {c} values")));
        }
        let count = (n * plane) as f64;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let it = (0..n).flat_map(|b| {
                        let off = (b * c + ch) * plane;
                        xv.data()[off..off + plane].iter()
                    });
                    let m = it.clone().sum::<f64>() / count;
                    mean[ch] = m;
                    var[ch] = it.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
                }
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BnStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(SaeError::dim(format!("batch_norm: running stats must have {c} values")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for k in off..off + plane {
                    let h = (xv.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = h * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train })?;
        Ok((v, stats))
    }

    /// 2-D cross-correlation. `x` is `CxHxW` or `NxCxHxW`; `w` is `FxCxKhxKw`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let d = conv_dims(xv.shape(), wv.shape(), geom)?;
        let krows = d.c * d.kh * d.kw;
        let plane = d.oh * d.ow;
        let mut cols = vec![0.0; d.n * krows * plane];
        let mut out = vec![0.0; d.n * d.f * plane];
        let img_len = d.c * d.h * d.w;
        for b in 0..d.n {
            let col = &mut cols[b * krows * plane..(b + 1) * krows * plane];
            im2col(&xv.data()[b * img_len..(b + 1) * img_len], &d, geom, col);
            gemm(
                d.f,
                krows,
                plane,
                wv.data(),
                false,
                col,
                false,
                &mut out[b * d.f * plane..(b + 1) * d.f * plane],
                false,
            );
        }
        let shape = if d.batched {
            vec![d.n, d.f, d.oh, d.ow]
        } else {
            vec![d.f, d.oh, d.ow]
        };
        self.push(Tensor::from_raw(shape, out), Op::Conv2d { x, w, geom, cols })
    }

    /// Fused multi-head scaled dot-product attention (no projections).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (qr, d) = qv.dims2()?;
        let (kr, dk) = kv.dims2()?;
        if vv.shape() != kv.shape() || dk != d {
            return Err(SaeError::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(SaeError::Config(format!(
                "width {d} is not divisible by {} heads",
                spec.heads
            )));
        }
        if spec.q_len == 0 || spec.kv_len == 0 || qr % spec.q_len != 0 || kr % spec.kv_len != 0 {
            return Err(SaeError::dim("attention: rows are not whole sequences"));
        }
        let batch = qr / spec.q_len;
        if kr / spec.kv_len != batch {
            return Err(SaeError::dim("attention: query and key batch counts differ"));
        }
        if spec.causal && spec.q_len != spec.kv_len {
            return Err(SaeError::Config("causal attention needs equal query and key lengths".into()));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (spec.q_len, spec.kv_len);
        let mut probs = vec![0.0; batch * spec.heads * lq * lk];
        let mut out = vec![0.0; qr * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..spec.heads {
                let col = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + col..][..dh];
                    let p = &mut probs[((b * spec.heads + h) * lq + i) * lk..][..lk];
                    let visible = if spec.causal { i + 1 } else { lk };
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        let krow = &kd[(b * lk + j) * d + col..][..dh];
                        *pj = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut p[..visible]);
                    let orow = &mut out[(b * lq + i) * d + col..][..dh];
                    for (j, &pj) in p.iter().enumerate().take(visible) {
                        let vrow = &vd[(b * lk + j) * d + col..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_raw(vec![qr, d], out);
        self.push(out, Op::Attention { q, k, v, spec, probs })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = transpose_last2(self.val(x))?;
        self.push(out, Op::Transpose(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        let (r, c) = xv.dims2()?;
        if idx.is_empty() {
            return Err(SaeError::dim("gather_rows: empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(SaeError::Range(format!("gather_rows: row {i} of {r}")));
            }
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_raw(vec![idx.len(), c], out);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.val(pred), self.val(target));
        p.expect_same_shape(t, "mse_loss")?;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        self.push(Tensor::scalar(s), Op::Mse { pred, target })
    }

    /// Summed negative log-likelihood of the target class in each row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
        self.softmax_cross_entropy_masked(logits, &t)
    }

    /// As [`Graph::softmax_cross_entropy`]; rows whose target is `None` are
    /// skipped.
    pub fn softmax_cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var> {
        let lv = self.val(logits);
        let (n, k) = lv.dims2()?;
        if targets.len() != n {
            return Err(SaeError::dim(format!("cross entropy: {n} rows, {} targets", targets.len())));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if let Some(t) = *t {
                if t >= k {
                    return Err(SaeError::Data(format!("target class {t} outside 0..{k}")));
                }
                loss += lse - row[t];
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Vector-Jacobian products of node `i` given its output gradient.
    pub(super) fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k) = av.dims2()?;
                let n = bv.shape()[1];
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    res.push((a, Tensor::from_raw(vec![m, k], ga)));
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                    res.push((b, Tensor::from_raw(vec![k, n], gb)));
                }
            }
            &Op::Add(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.scale(-1.0)));
            }
            &Op::Mul(a, b) => {
                res.push((a, g.zip_map(self.val(b), |x, y| x * y)?));
                res.push((b, g.zip_map(self.val(a), |x, y| x * y)?));
            }
            &Op::Scale(x, s) => res.push((x, g.scale(s))),
            &Op::AddRow { x, bias } => {
                let n = self.val(bias).len();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                res.push((x, g.clone()));
                res.push((bias, Tensor::from_raw(self.val(bias).shape().to_vec(), gb)));
            }
            &Op::AddTiled { x, table } => {
                let tv = self.val(table);
                let mut gt = vec![0.0; tv.len()];
                for block in g.data().chunks(tv.len()) {
                    for (acc, v) in gt.iter_mut().zip(block) {
                        *acc += v;
                    }
                }
                res.push((x, g.clone()));
                res.push((table, Tensor::from_raw(tv.shape().to_vec(), gt)));
            }
            &Op::Relu(x) => {
                let gx = g.zip_map(self.val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                res.push((x, gx));
            }
            &Op::Gelu(x) => {
                let gx = g.zip_map(self.val(x), |gv, v| {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })?;
                res.push((x, gx));
            }
            &Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let mut gx = vec![0.0; out.len()];
                for ((gr, yr), dst) in g.data().chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((x, Tensor::from_raw(out.shape().to_vec(), gx)));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, d) = out.dims2()?;
                let gv = self.val(*gamma);
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gv.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        gg[j] += gy[j] * xh[j];
                        gbeta[j] += gy[j];
                    }
                    let k = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gv.data()[j];
                        gx[r * d + j] = k * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                res.push((*x, Tensor::from_raw(vec![rows, d], gx)));
                res.push((*gamma, Tensor::from_raw(gv.shape().to_vec(), gg)));
                res.push((*beta, Tensor::from_raw(self.val(*beta).shape().to_vec(), gbeta)));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, plane) = bn_layout(out.shape())?;
                let gv = self.val(*gamma);
                let count = (n * plane) as f64;
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for k in off..off + plane {
                            gg[ch] += g.data()[k] * xhat[k];
                            gbeta[ch] += g.data()[k];
                        }
                    }
                }
                let mut gx = vec![0.0; out.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let s = gv.data()[ch] * inv_std[ch];
                        for k in off..off + plane {
                            gx[k] = if *train {
                                s / count * (count * g.data()[k] - gbeta[ch] - xhat[k] * gg[ch])
                            } else {
                                s * g.data()[k]
                            };
                        }
                    }
                }
                res.push((*x, Tensor::from_raw(out.shape().to_vec(), gx)));
                res.push((*gamma, Tensor::from_raw(gv.shape().to_vec(), gg)));
                res.push((*beta, Tensor::from_raw(self.val(*beta).shape().to_vec(), gbeta)));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let d = conv_dims(xv.shape(), wv.shape(), *geom)?;
                let krows = d.c * d.kh * d.kw;
                let plane = d.oh * d.ow;
                let img_len = d.c * d.h * d.w;
                if needs(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    for b in 0..d.n {
                        gemm(
                            d.f,
                            plane,
                            krows,
                            &g.data()[b * d.f * plane..(b + 1) * d.f * plane],
                            false,
                            &cols[b * krows * plane..(b + 1) * krows * plane],
                            true,
                            &mut gw,
                            b > 0,
                        );
                    }
                    res.push((*w, Tensor::from_raw(wv.shape().to_vec(), gw)));
                }
                if needs(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    let mut gcols = vec![0.0; krows * plane];
                    for b in 0..d.n {
                        gemm(
                            krows,
                            d.f,
                            plane,
                            wv.data(),
                            true,
                            &g.data()[b * d.f * plane..(b + 1) * d.f * plane],
                            false,
                            &mut gcols,
                            false,
                        );
                        col2im(&gcols, &d, *geom, &mut gx[b * img_len..(b + 1) * img_len]);
                    }
                    res.push((*x, Tensor::from_raw(xv.shape().to_vec(), gx)));
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let (qr, d) = qv.dims2()?;
                let (kr, _) = kv.dims2()?;
                let (lq, lk) = (spec.q_len, spec.kv_len);
                let batch = qr / lq;
                let dh = d / spec.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut gq = vec![0.0; qr * d];
                let mut gk = vec![0.0; kr * d];
                let mut gvv = vec![0.0; kr * d];
                let mut dp = vec![0.0; lk];
                for b in 0..batch {
                    for h in 0..spec.heads {
                        let col = h * dh;
                        for i in 0..lq {
                            let p = &probs[((b * spec.heads + h) * lq + i) * lk..][..lk];
                            let visible = if spec.causal { i + 1 } else { lk };
                            let grow = &gd[(b * lq + i) * d + col..][..dh];
                            let mut dot = 0.0;
                            for j in 0..visible {
                                let vrow = &vd[(b * lk + j) * d + col..][..dh];
                                dp[j] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                                dot += p[j] * dp[j];
                                let gvrow = &mut gvv[(b * lk + j) * d + col..][..dh];
                                for (o, gx) in gvrow.iter_mut().zip(grow) {
                                    *o += p[j] * gx;
                                }
                            }
                            let qrow = &qd[(b * lq + i) * d + col..][..dh];
                            for j in 0..visible {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kd[(b * lk + j) * d + col..][..dh];
                                let gqrow = &mut gq[(b * lq + i) * d + col..][..dh];
                                for (o, kx) in gqrow.iter_mut().zip(krow) {
                                    *o += ds * kx;
                                }
                                let gkrow = &mut gk[(b * lk + j) * d + col..][..dh];
                                for (o, qx) in gkrow.iter_mut().zip(qrow) {
                                    *o += ds * qx;
                                }
                            }
                        }
                    }
                }
                res.push((*q, Tensor::from_raw(vec![qr, d], gq)));
                res.push((*k, Tensor::from_raw(vec![kr, d], gk)));
                res.push((*v, Tensor::from_raw(vec![kr, d], gvv)));
            }
            &Op::Reshape(x) => res.push((x, g.reshape(self.val(x).shape())?)),
            &Op::Transpose(x) => res.push((x, transpose_last2(g)?)),
            Op::GatherRows { x, idx } => {
                let xv = self.val(*x);
                let (_, c) = xv.dims2()?;
                let mut gx = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g.data()[r * c + j];
                    }
                }
                res.push((*x, Tensor::from_raw(xv.shape().to_vec(), gx)));
            }
            &Op::Sum(x) => {
                res.push((x, Tensor::full(self.val(x).shape(), g.data()[0])));
            }
            &Op::Mean(x) => {
                let xv = self.val(x);
                res.push((x, Tensor::full(xv.shape(), g.data()[0] / xv.len() as f64)));
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (self.val(pred), self.val(target));
                let k = 2.0 * g.data()[0] / p.len() as f64;
                let gp = p.zip_map(t, |a, b| k * (a - b))?;
                if needs(target) {
                    res.push((target, gp.scale(-1.0)));
                }
                res.push((pred, gp));
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let lv = self.val(*logits);
                let k = lv.shape()[1];
                let s = g.data()[0];
                let mut gl = vec![0.0; lv.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..k {
                            gl[r * k + j] = s * probs[r * k + j];
                        }
                        gl[r * k + t] -= s;
                    }
                }
                res.push((*logits, Tensor::from_raw(lv.shape().to_vec(), gl)));
            }
        }
        Ok(res)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [_, _] => t.transpose2d(),
        [n, r, c] => {
            let mut out = vec![0.0; t.len()];
            for b in 0..n {
                let src = &t.data()[b * r * c..(b + 1) * r * c];
                let dst = &mut out[b * r * c..(b + 1) * r * c];
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }
            Ok(Tensor::from_raw(vec![n, c, r], out))
        }
        _ => Err(SaeError::dim(format!("transpose needs rank 2 or 3, got {:?}", t.shape()))),
    }
}
