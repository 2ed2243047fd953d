//! Masked negative log-likelihood over log-probability rows.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, MixedSequence};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Summed over target positions; batches divide by the number of sequences.
    SumPerRound,
    /// Averaged over target positions.
    #[default]
    MeanPerToken,
}

/// Summed NLL of `targets[t]` under row `t` of `logp` at every position where `mask[t]`.
///
/// Only the selected rows enter the computation, so values at unmasked positions (in `targets`
/// or in `logp`) cannot affect the result.
pub fn masked_nll_sum(logp: &Tensor, targets: &[u32], mask: &[bool]) -> Result<(Tensor, usize)> {
    if targets.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets but {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let rows = logp.dim(0)?;
    if rows < targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{rows} log-probability rows for {} targets",
            targets.len()
        )));
    }
    let (pos, tok): (Vec<u32>, Vec<u32>) = mask
        .iter()
        .zip(targets)
        .enumerate()
        .filter(|(_, (m, _))| **m)
        .map(|(i, (_, t))| (i as u32, *t))
        .unzip();
    if pos.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let n = pos.len();
    let dev = logp.device();
    let picked = logp.index_select(&Tensor::new(pos, dev)?, 0)?;
    let tok = Tensor::new(tok, dev)?.unsqueeze(1)?;
    let lp = picked.gather(&tok, D::Minus1)?.squeeze(1)?;
    Ok((lp.sum_all()?.neg()?, n))
}

pub fn masked_nll(logp: &Tensor, targets: &[u32], mask: &[bool], reduction: LossReduction) -> Result<Tensor> {
    let (sum, n) = masked_nll_sum(logp, targets, mask)?;
    match reduction {
        LossReduction::SumPerRound => Ok(sum),
        LossReduction::MeanPerToken => Ok((sum / n as f64)?),
    }
}

/// Summed target NLL of one sequence and its target count.
pub fn sequence_nll(lm: &LanguageModel, seq: &MixedSequence) -> Result<(Tensor, usize)> {
    let logp = lm.score(seq)?;
    masked_nll_sum(&logp, &seq.position_tokens(), &seq.target_mask())
}
