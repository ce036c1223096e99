//! Standalone networks instantiated from an [`Architecture`] and the
//! [`Model`] interface shared with the supernet.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionBlock, LinearParams};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup, ParamStore};
use crate::space::{head_count, head_params, Architecture, MacroConfig};

/// Anything with a stem-to-features body and a linear classification head.
pub trait Model {
    fn config(&self) -> &MacroConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn head(&self) -> LinearParams;

    /// Body output `[B, h, w, C]` before global pooling.
    fn features<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>>;

    /// Class logits `[B, classes]`.
    fn logits<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.features(b, x)?.relu().mean_spatial()?;
        self.head().forward(b, f)
    }

    /// Trainable scalars excluding architecture parameters.
    fn weight_count(&self) -> usize {
        self.store().numel(ParamGroup::Weight)
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Architecture,
    pub config: MacroConfig,
    pub store: ParamStore,
    pub stem: AttentionBlock,
    pub layers: Vec<AttentionBlock>,
    pub head: LinearParams,
}

impl Network {
    /// Fresh parameters for `arch`, optionally widened so the stem has
    /// `initial_channels` channels.
    pub fn instantiate(arch: &Architecture, initial_channels: Option<usize>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let config = match initial_channels {
            Some(c) => arch.macro_config.scaled(c)?,
            None => arch.macro_config.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = AttentionBlock::new(
            &mut store,
            &mut rng,
            "stem",
            config.stem_op,
            config.input_channels,
            config.stem_channels,
            1,
        )?;
        let mut layers = Vec::new();
        for (i, (spec, &op)) in config.layer_specs().iter().zip(&arch.choices).enumerate() {
            let blk = AttentionBlock::new(&mut store, &mut rng, &format!("layer{i}"), op, spec.cin, spec.cout, spec.stride)
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            layers.push(blk);
        }
        let head = head_params(&mut store, &mut rng, &config);
        Ok(Network {
            arch: arch.clone(),
            config,
            store,
            stem,
            layers,
            head,
        })
    }

    /// Closed-form weight count of `arch` at the given width.
    pub fn analytic_weight_count(arch: &Architecture, initial_channels: Option<usize>) -> Result<usize> {
        let cfg = match initial_channels {
            Some(c) => arch.macro_config.scaled(c)?,
            None => arch.macro_config.clone(),
        };
        let mut n = AttentionBlock::param_count(cfg.stem_op, cfg.input_channels, cfg.stem_channels);
        for (l, &op) in cfg.layer_specs().iter().zip(&arch.choices) {
            n += AttentionBlock::param_count(op, l.cin, l.cout);
        }
        Ok(n + head_count(&cfg))
    }
}

impl Model for Network {
    fn config(&self) -> &MacroConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn head(&self) -> LinearParams {
        self.head
    }

    fn features<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.stem.forward(b, x)?;
        for blk in &self.layers {
            h = blk.forward(b, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CandidateOp;

    #[test]
    fn all_non_local_count_matches() {
        let cfg = MacroConfig::desk();
        let arch = Architecture::new(cfg.clone(), vec![CandidateOp::NonLocalSa; 4], 0, String::new()).unwrap();
        for width in [None, Some(32)] {
            let net = Network::instantiate(&arch, width, 1).unwrap();
            assert_eq!(net.weight_count(), Network::analytic_weight_count(&arch, width).unwrap());
        }
    }

    #[test]
    fn wrong_choice_count_is_rejected() {
        let cfg = MacroConfig::desk();
        assert!(Architecture::new(cfg, vec![CandidateOp::NonLocalSa; 3], 0, String::new()).is_err());
    }
}
