//! Small neural-network building blocks over candle tensors.
//!
//! Every module works on unbatched `(positions, features)` matrices. Parameters carry a
//! trainable flag: a frozen parameter is handed to the forward pass detached from the graph, so
//! it never receives a gradient and is never seen by an optimizer.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::lora::{LoraAdapter, LoraConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
    Query,
    LoraA,
    LoraB,
}

impl ParamKind {
    pub fn is_bias_or_norm(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift)
    }

    pub fn is_lora(self) -> bool {
        matches!(self, ParamKind::LoraA | ParamKind::LoraB)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    var: Var,
    kind: ParamKind,
    trainable: bool,
}

impl Param {
    pub fn new(value: Tensor, kind: ParamKind) -> Result<Self> {
        Ok(Param {
            var: Var::from_tensor(&value)?,
            kind,
            trainable: true,
        })
    }

    /// Value for use in a forward pass; detached when frozen.
    pub fn tensor(&self) -> Tensor {
        if self.trainable {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
    }

    /// Overwrites the value in place; the shape must match.
    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.var.dims() {
            return Err(Error::ShapeMismatch(format!(
                "cannot set {:?} parameter from {:?}",
                self.var.dims(),
                value.dims()
            )));
        }
        self.var.set(&value.to_dtype(self.var.dtype())?)?;
        Ok(())
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(self.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn named_params(&self, prefix: &str) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit_params(prefix, &mut |n, p| out.push((n, p.clone())));
        out
    }

    fn set_trainable(&mut self, flag: bool) {
        self.visit_params_mut("", &mut |_, p| p.set_trainable(flag));
    }

    /// True when every parameter is trainable.
    fn is_trainable(&self) -> bool {
        let mut all = true;
        self.visit_params("", &mut |_, p| all &= p.is_trainable());
        all
    }

    fn trainable_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit_params("", &mut |_, p| {
            if p.is_trainable() {
                out.push(p.var().clone())
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.var().elem_count());
        n
    }
}

/// SHA-256 over parameter names and raw values, in visiting order.
pub fn checksum(params: &[(String, Param)]) -> Result<String> {
    let mut h = Sha256::new();
    for (name, p) in params {
        h.update(name.as_bytes());
        h.update(format!("{:?}", p.var().dims()).as_bytes());
        for v in p.to_f64_vec()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, &self.device)?)
    }
}

/// Affine map `x W^T + b` with an optional low-rank adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, init: &mut Init) -> Result<Self> {
        let weight = Param::new(
            init.normal(&[d_out, d_in], (1.0 / d_in as f64).sqrt())?,
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(Param::new(init.zeros(&[d_out])?, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            adapter: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.var().dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.var().dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor();
        let mut y = x.matmul(&w.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.tensor())?;
        }
        if let Some(adapter) = self.adapter.as_ref().filter(|a| !a.is_merged()) {
            y = (y + adapter.delta(x)?)?;
        }
        Ok(y)
    }

    pub fn attach_adapter(&mut self, cfg: &LoraConfig, init: &mut Init) -> Result<()> {
        self.adapter = Some(LoraAdapter::new(self.d_in(), self.d_out(), cfg.rank, cfg.alpha, init)?);
        Ok(())
    }

    /// Folds the adapter into the base weight.
    pub fn merge_adapter(&mut self) -> Result<()> {
        let Some(adapter) = self.adapter.as_mut() else {
            return Ok(());
        };
        let merged = crate::lm::lora::lora_merge(self.weight.var().as_tensor(), adapter)?;
        self.weight.set(&merged)?;
        adapter.mark_merged();
        Ok(())
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
        if let Some(a) = &self.adapter {
            a.visit_params(&join(prefix, "lora"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
        if let Some(a) = &mut self.adapter {
            a.visit_params_mut(&join(prefix, "lora"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: Param,
    pub shift: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize, init: &Init) -> Result<Self> {
        Ok(LayerNorm {
            scale: Param::new(init.ones(&[d])?, ParamKind::NormScale)?,
            shift: Param::new(init.zeros(&[d])?, ParamKind::NormShift)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.scale.tensor())?
            .broadcast_add(&self.shift.tensor())?)
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "scale"), &self.scale);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "shift"), &mut self.shift);
    }
}

/// Multi-head attention from `queries` onto `context`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    n_heads: usize,
}

impl Attention {
    pub fn new(d_model: usize, n_heads: usize, init: &mut Init) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(d_model, d_model, true, init)?,
            k: Linear::new(d_model, d_model, true, init)?,
            v: Linear::new(d_model, d_model, true, init)?,
            o: Linear::new(d_model, d_model, true, init)?,
            n_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (t, d) = x.dims2()?;
        Ok(x.reshape((t, self.n_heads, d / self.n_heads))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    pub fn forward(&self, queries: &Tensor, context: &Tensor, causal: bool) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(queries)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        self.attend(&q, &k, &v, causal)
    }

    /// Causal self-attention over `x` appended to the keys and values already in `cache`.
    pub fn forward_cached(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(x)?)?;
        let mut k = self.split_heads(&self.k.forward(x)?)?;
        let mut v = self.split_heads(&self.v.forward(x)?)?;
        if let (Some(pk), Some(pv)) = (&cache.k, &cache.v) {
            k = Tensor::cat(&[pk, &k], 1)?;
            v = Tensor::cat(&[pv, &v], 1)?;
        }
        cache.k = Some(k.clone());
        cache.v = Some(v.clone());
        self.attend(&q, &k, &v, true)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
        let (_, tq, head_dim) = q.dims3()?;
        let tk = k.dim(1)?;
        let d = head_dim * self.n_heads;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (head_dim as f64).sqrt()))?;
        if causal {
            let mask = causal_mask(tq, tk, scores.dtype(), scores.device())?;
            scores = scores.broadcast_add(&mask)?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights.matmul(v)?.transpose(0, 1)?.reshape((tq, d))?;
        self.o.forward(&out)
    }
}

impl Parameterized for Attention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.o.visit_params(&join(prefix, "o"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.q.visit_params_mut(&join(prefix, "q"), f);
        self.k.visit_params_mut(&join(prefix, "k"), f);
        self.v.visit_params_mut(&join(prefix, "v"), f);
        self.o.visit_params_mut(&join(prefix, "o"), f);
    }
}

/// Keys and values of the positions seen so far, per attention layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

/// `(tq, tk)` additive mask; query `i` sees keys `j <= i + (tk - tq)`.
pub fn causal_mask(tq: usize, tk: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let offset = tk.saturating_sub(tq);
    let values: Vec<f32> = (0..tq)
        .flat_map(|i| (0..tk).map(move |j| if j <= i + offset { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(values, (tq, tk), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(d_model: usize, d_hidden: usize, init: &mut Init) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(d_model, d_hidden, true, init)?,
            down: Linear::new(d_hidden, d_model, true, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

impl Parameterized for FeedForward {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.up.visit_params(&join(prefix, "up"), f);
        self.down.visit_params(&join(prefix, "down"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.up.visit_params_mut(&join(prefix, "up"), f);
        self.down.visit_params_mut(&join(prefix, "down"), f);
    }
}

/// Pre-norm transformer block: self-attention then feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(d_model: usize, n_heads: usize, ffn_mult: usize, init: &mut Init) -> Result<Self> {
        Ok(SelfAttentionBlock {
            norm_attn: LayerNorm::new(d_model, init)?,
            attn: Attention::new(d_model, n_heads, init)?,
            norm_ff: LayerNorm::new(d_model, init)?,
            ff: FeedForward::new(d_model, ffn_mult * d_model, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let h = self.norm_attn.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, causal)?)?;
        let h = self.norm_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }

    pub fn forward_cached(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let h = self.norm_attn.forward(x)?;
        let x = (x + self.attn.forward_cached(&h, cache)?)?;
        let h = self.norm_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

impl Parameterized for SelfAttentionBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.norm_attn.visit_params(&join(prefix, "norm_attn"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm_ff.visit_params(&join(prefix, "norm_ff"), f);
        self.ff.visit_params(&join(prefix, "ff"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.norm_attn.visit_params_mut(&join(prefix, "norm_attn"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.norm_ff.visit_params_mut(&join(prefix, "norm_ff"), f);
        self.ff.visit_params_mut(&join(prefix, "ff"), f);
    }
}

/// Fixed sinusoidal position table, `(len, d)`.
pub fn sinusoidal_positions(len: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut values = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            values.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Ok(Tensor::from_vec(values, (len, d), device)?.to_dtype(dtype)?)
}
