//! Width and depth sweeps of a fixed architecture pattern.

use serde::{Deserialize, Serialize};

use crate::attention::CandidateOp;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::space::{Architecture, MacroConfig};
use crate::train::{count_params, train_final, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub channels: usize,
    pub stages: usize,
    pub layers: usize,
    pub params: usize,
    /// Best test accuracy; empty when the sweep does not train.
    pub top1_acc: Option<f64>,
}

/// The architecture obtained by cycling `pattern` over the layers of `cfg`.
pub fn patterned_arch(cfg: &MacroConfig, pattern: &[CandidateOp], seed: u64) -> Result<Architecture> {
    if pattern.is_empty() {
        return Err(Error::Config("empty operation pattern".into()));
    }
    let choices = (0..cfg.num_layers()).map(|i| pattern[i % pattern.len()]).collect();
    Architecture::new(cfg.clone(), choices, seed, "scale".into())
}

/// Every `(stage count, channels)` combination of `base`; trains each one
/// when `data` is given and `train.epochs > 0`.
pub fn scale_sweep(
    base: &MacroConfig,
    pattern: &[CandidateOp],
    channels: &[usize],
    stage_counts: &[usize],
    train: &TrainConfig,
    data: Option<(&ImageDataset, &ImageDataset)>,
) -> Result<Vec<ScaleRow>> {
    let mut rows = Vec::new();
    for &stages in stage_counts {
        if stages == 0 {
            return Err(Error::Config("stage count must be positive".into()));
        }
        let cfg = base.with_stage_count(stages);
        cfg.validate()?;
        let arch = patterned_arch(&cfg, pattern, train.seed)?;
        for &c in channels {
            let net = Network::instantiate(&arch, Some(c), train.seed)?;
            let top1_acc = match data {
                Some((tr, te)) if train.epochs > 0 => {
                    let cfg = TrainConfig {
                        initial_channels: Some(c),
                        ..train.clone()
                    };
                    Some(train_final(&arch, &cfg, tr, te)?.best_top1_acc)
                }
                _ => None,
            };
            rows.push(ScaleRow {
                channels: c,
                stages,
                layers: cfg.num_layers(),
                params: count_params(&net),
                top1_acc,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CANDIDATES;

    #[test]
    fn params_grow_along_both_axes() {
        let rows = scale_sweep(&MacroConfig::desk(), &[CANDIDATES[0]], &[8, 16], &[2, 3], &TrainConfig::default(), None).unwrap();
        assert_eq!(rows.len(), 4);
        let p = |s, c| rows.iter().find(|r| r.stages == s && r.channels == c).unwrap().params;
        assert!(p(2, 8) < p(2, 16) && p(3, 8) < p(3, 16));
        assert!(p(2, 8) < p(3, 8) && p(2, 16) < p(3, 16));
        assert!(rows.iter().all(|r| r.top1_acc.is_none()));
    }

    #[test]
    fn stage_extension_halves_until_small() {
        let cfg = MacroConfig::desk().with_stage_count(4);
        assert_eq!(cfg.stages.len(), 4);
        assert_eq!(cfg.stages[2].channels, 64);
        assert_eq!(cfg.stages[2].stride, 2);
        assert_eq!(cfg.stages[3].stride, 1);
        assert_eq!(cfg.feature_size(), 2);
        assert_eq!(MacroConfig::desk().with_stage_count(1).stages.len(), 1);
    }
}
