//! Low-rank adapters: `W x + (alpha / r) B (A x)`.

use std::collections::BTreeSet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, Param, ParamKind, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Attention projection names among `q`, `k`, `v`, `o`.
    pub targets: BTreeSet<String>,
    pub train_bias_and_norm: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            targets: ["q", "k", "v", "o"].iter().map(|s| s.to_string()).collect(),
            train_bias_and_norm: true,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::ShapeMismatch("adapter rank must be at least 1".into()));
        }
        if let Some(t) = self
            .targets
            .iter()
            .find(|t| !["q", "k", "v", "o"].contains(&t.as_str()))
        {
            return Err(Error::Config(format!("unknown adapter target `{t}`")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `r x d_in`, random.
    pub a: Param,
    /// `d_out x r`, zero at construction.
    pub b: Param,
    pub rank: usize,
    pub alpha: f64,
    merged: bool,
}

impl LoraAdapter {
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, init: &mut Init) -> Result<Self> {
        if rank == 0 {
            return Err(Error::ShapeMismatch("adapter rank must be at least 1".into()));
        }
        Ok(LoraAdapter {
            a: Param::new(
                init.normal(&[rank, d_in], (1.0 / d_in as f64).sqrt())?,
                ParamKind::LoraA,
            )?,
            b: Param::new(init.zeros(&[d_out, rank])?, ParamKind::LoraB)?,
            rank,
            alpha,
            merged: false,
        })
    }

    /// Builds an adapter from explicit factors.
    pub fn from_factors(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (rank, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if rank == 0 || rb != rank {
            return Err(Error::ShapeMismatch(format!(
                "adapter factors {:?} and {:?} do not conform",
                a.dims(),
                b.dims()
            )));
        }
        Ok(LoraAdapter {
            a: Param::new(a, ParamKind::LoraA)?,
            b: Param::new(b, ParamKind::LoraB)?,
            rank,
            alpha,
            merged: false,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub(crate) fn mark_merged(&mut self) {
        self.merged = true;
    }

    /// Allows merging again, e.g. after the base weight was restored.
    pub fn reset_merge(&mut self) {
        self.merged = false;
    }

    /// Adapter contribution for row-major inputs `x: (n, d_in)`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.a.tensor().t()?)?;
        Ok((h.matmul(&self.b.tensor().t()?)? * self.scale())?)
    }

    /// `(alpha / r) B A`, shaped like the base weight.
    pub fn dense_delta(&self) -> Result<Tensor> {
        Ok((self.b.tensor().matmul(&self.a.tensor())? * self.scale())?)
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        let (d_out, d_in) = w.dims2()?;
        let (_, a_in) = self.a.var().dims2()?;
        let (b_out, _) = self.b.var().dims2()?;
        if a_in != d_in || b_out != d_out {
            return Err(Error::ShapeMismatch(format!(
                "adapter ({b_out} x r)(r x {a_in}) does not fit weight {d_out} x {d_in}"
            )));
        }
        Ok(())
    }
}

impl Parameterized for LoraAdapter {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "a"), &self.a);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "a"), &mut self.a);
        f(join(prefix, "b"), &mut self.b);
    }
}

/// `W x + (alpha / r) B (A x)` for a column vector `x` of length `d_in`. `W` is not modified.
pub fn lora_apply(x: &Tensor, w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(w)?;
    let x = x.flatten_all()?;
    let d_in = w.dims2()?.1;
    if x.dim(0)? != d_in {
        return Err(Error::ShapeMismatch(format!(
            "input of length {} for weight with {d_in} columns",
            x.dim(0)?
        )));
    }
    let col = x.unsqueeze(1)?;
    let base = w.matmul(&col)?;
    let low = adapter.b.tensor().matmul(&adapter.a.tensor().matmul(&col)?)?;
    Ok((base + (low * adapter.scale())?)?.squeeze(1)?)
}

/// `W + (alpha / r) B A`. Fails if this adapter was already merged.
pub fn lora_merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if adapter.is_merged() {
        return Err(Error::DoubleMerge);
    }
    adapter.check(w)?;
    Ok((w + adapter.dense_delta()?.to_dtype(w.dtype())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn hand_example() {
        let dev = Device::Cpu;
        let w = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &dev).unwrap();
        let a = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let b = Tensor::new(&[[0.0f64], [1.0]], &dev).unwrap();
        let adapter = LoraAdapter::from_factors(a, b, 1.0).unwrap();
        let x = Tensor::new(&[1.0f64, 0.0], &dev).unwrap();
        let y = lora_apply(&x, &w, &adapter).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_b_merge_is_exact_and_double_merge_fails() {
        let mut init = Init::new(3, DType::F32, Device::Cpu);
        let w = init.normal(&[5, 4], 1.0).unwrap();
        let mut adapter = LoraAdapter::new(4, 5, 2, 2.0, &mut init).unwrap();
        let merged = lora_merge(&w, &adapter).unwrap();
        assert_eq!(merged.to_vec2::<f32>().unwrap(), w.to_vec2::<f32>().unwrap());
        adapter.mark_merged();
        assert!(matches!(lora_merge(&w, &adapter), Err(Error::DoubleMerge)));
        adapter.reset_merge();
        assert!(lora_merge(&w, &adapter).is_ok());
    }

    #[test]
    fn rank_zero_and_bad_shapes_are_rejected() {
        let mut init = Init::new(0, DType::F32, Device::Cpu);
        assert!(matches!(
            LoraAdapter::new(4, 4, 0, 1.0, &mut init),
            Err(Error::ShapeMismatch(_))
        ));
        let adapter = LoraAdapter::new(3, 3, 1, 1.0, &mut init).unwrap();
        let w = init.zeros(&[4, 4]).unwrap();
        assert!(matches!(lora_merge(&w, &adapter), Err(Error::ShapeMismatch(_))));
    }
}
