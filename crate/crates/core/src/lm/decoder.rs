//! Causal transformer decoder over embedding sequences.

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use super::lora::LoraConfig;
use crate::error::{Error, Result};
use crate::nn::{
    join, sinusoidal_positions, Init, KvCache, LayerNorm, Linear, Param, ParamKind, Parameterized, SelfAttentionBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    TinyBuiltin,
    ExternalAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub ffn_mult: usize,
    pub backbone: Backbone,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 128,
            n_layers: 3,
            n_heads: 4,
            vocab_size: super::tokenizer::Tokenizer.vocab_size(),
            context_len: 4096,
            ffn_mult: 4,
            backbone: Backbone::TinyBuiltin,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone == Backbone::ExternalAdapter {
            return Err(Error::Config(
                "external decoder backbones are loaded through an adapter, not built in".into(),
            ));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.context_len == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "decoder d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AdapterState {
    config: LoraConfig,
    /// Base values of biases and norms, restored on detach.
    base_bias_norm: Vec<(String, Tensor)>,
    /// Base attention weights saved before merging.
    premerge_weights: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embed: Param,
    pub layers: Vec<SelfAttentionBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    adapters: Option<AdapterState>,
}

impl Decoder {
    pub fn new(config: DecoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = Param::new(init.normal(&[config.vocab_size, d], 1.0)?, ParamKind::Embedding)?;
        let layers = (0..config.n_layers)
            .map(|_| SelfAttentionBlock::new(d, config.n_heads, config.ffn_mult, init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            final_norm: LayerNorm::new(d, init)?,
            head: Linear::new(d, config.vocab_size, true, init)?,
            embed,
            layers,
            config,
            adapters: None,
        })
    }

    pub fn dtype(&self) -> DType {
        self.embed.var().dtype()
    }

    pub fn device(&self) -> &Device {
        self.embed.var().device()
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary")));
        }
        let idx = Tensor::new(ids, self.device())?;
        Ok(self.embed.tensor().index_select(&idx, 0)?)
    }

    fn bos(&self) -> Result<Tensor> {
        self.embed_tokens(&[super::tokenizer::Special::Bos.id()])
    }

    /// Logits for an embedded sequence `(T, d_model)` whose first row sits at `offset`.
    fn logits(&self, x: &Tensor, offset: usize, mut caches: Option<&mut [KvCache]>) -> Result<Tensor> {
        let t = x.dim(0)?;
        let pe = sinusoidal_positions(offset + t, self.config.d_model, x.dtype(), x.device())?.i(offset..)?;
        let mut h = x.broadcast_add(&pe)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match caches.as_deref_mut() {
                Some(c) => layer.forward_cached(&h, &mut c[i])?,
                None => layer.forward(&h, true)?,
            };
        }
        self.head.forward(&self.final_norm.forward(&h)?)
    }

    /// Log-probability rows for an embedded sequence of `T` positions. A `bos` embedding is
    /// prepended, so there are `T + 1` rows: row `t < T` is the distribution of position `t`
    /// given positions before it, and row `T` predicts the next token.
    pub fn score_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(0)?;
        if t + 1 > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: t + 1,
                limit: self.config.context_len,
            });
        }
        let input = Tensor::cat(&[&self.bos()?.to_dtype(x.dtype())?, x], 0)?;
        Ok(candle_nn::ops::log_softmax(&self.logits(&input, 0, None)?, D::Minus1)?)
    }

    /// Starts incremental decoding: consumes `bos` plus the prefix and returns the
    /// next-token log-probabilities.
    pub fn start(&self, prefix: &Tensor) -> Result<(Vec<KvCache>, Tensor, usize)> {
        let input = Tensor::cat(&[&self.bos()?.to_dtype(prefix.dtype())?, prefix], 0)?;
        let n = input.dim(0)?;
        let mut caches = vec![KvCache::default(); self.layers.len()];
        let logits = self.logits(&input, 0, Some(&mut caches))?;
        let last = logits.i(n - 1)?;
        Ok((caches, candle_nn::ops::log_softmax(&last, D::Minus1)?, n))
    }

    /// Feeds one token at position `pos` and returns the next-token log-probabilities.
    pub fn step(&self, caches: &mut [KvCache], token: u32, pos: usize) -> Result<Tensor> {
        let x = self.embed_tokens(&[token])?;
        let logits = self.logits(&x, pos, Some(caches))?;
        Ok(candle_nn::ops::log_softmax(&logits.i(0)?, D::Minus1)?)
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.is_some()
    }

    pub fn adapter_config(&self) -> Option<&LoraConfig> {
        self.adapters.as_ref().map(|a| &a.config)
    }

    /// Attaches fresh adapters to the configured attention projections of every layer and
    /// records the current biases and norms so detaching restores them.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, init: &mut Init) -> Result<()> {
        cfg.validate()?;
        if self.adapters.is_some() {
            return Err(Error::Precondition("decoder already has adapters".into()));
        }
        let mut base_bias_norm = Vec::new();
        self.visit_params("", &mut |name, p| {
            if p.kind().is_bias_or_norm() {
                base_bias_norm.push((name, p.var().as_tensor().copy().expect("cpu copy")));
            }
        });
        for layer in &mut self.layers {
            for (name, lin) in attention_targets(&mut layer.attn) {
                if cfg.targets.contains(name) {
                    lin.attach_adapter(cfg, init)?;
                }
            }
        }
        self.adapters = Some(AdapterState {
            config: cfg.clone(),
            base_bias_norm,
            premerge_weights: Vec::new(),
        });
        Ok(())
    }

    /// Folds every adapter into its base weight.
    pub fn merge_lora(&mut self) -> Result<()> {
        let Some(state) = self.adapters.as_mut() else {
            return Err(Error::Precondition("decoder has no adapters to merge".into()));
        };
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, lin) in attention_targets(&mut layer.attn) {
                if let Some(a) = &lin.adapter {
                    if a.is_merged() {
                        return Err(Error::DoubleMerge);
                    }
                    state.premerge_weights.push((
                        format!("layers.{l}.attn.{name}.weight"),
                        lin.weight.var().as_tensor().copy()?,
                    ));
                    lin.merge_adapter()?;
                }
            }
        }
        Ok(())
    }

    /// Removes adapters and restores the base weights, biases and norms exactly.
    pub fn detach_lora(&mut self) -> Result<()> {
        let Some(state) = self.adapters.take() else {
            return Ok(());
        };
        for layer in &mut self.layers {
            for (_, lin) in attention_targets(&mut layer.attn) {
                lin.adapter = None;
            }
        }
        let restore: std::collections::HashMap<String, Tensor> =
            state.base_bias_norm.into_iter().chain(state.premerge_weights).collect();
        let mut result = Ok(());
        self.visit_params("", &mut |name, p| {
            if let Some(t) = restore.get(&name) {
                if let Err(e) = p.set(t) {
                    result = Err(e);
                }
            }
        });
        result
    }

    /// Base values of biases and norms recorded at attach time, or the live values.
    pub fn base_bias_norm(&self) -> Vec<(String, Tensor)> {
        match &self.adapters {
            Some(s) => s.base_bias_norm.clone(),
            None => {
                let mut out = Vec::new();
                self.visit_params("", &mut |n, p| {
                    if p.kind().is_bias_or_norm() {
                        out.push((n, p.var().as_tensor().clone()));
                    }
                });
                out
            }
        }
    }
}

fn attention_targets(attn: &mut crate::nn::Attention) -> [(&'static str, &mut Linear); 4] {
    [
        ("q", &mut attn.q),
        ("k", &mut attn.k),
        ("v", &mut attn.v),
        ("o", &mut attn.o),
    ]
}

impl Parameterized for Decoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "embed"), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_norm.visit_params(&join(prefix, "final_norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "embed"), &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_norm.visit_params_mut(&join(prefix, "final_norm"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
