//! Stage-wise macro-architecture, the weight-sharing supernet with
//! softmax-weighted mixed layers, and discretization into an [`Architecture`].

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, CandidateOp, LinearParams, CANDIDATES, NUM_CANDIDATES};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ARCH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub layers: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_op: CandidateOp,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

/// Position and geometry of one searchable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub stage: usize,
    pub index_in_stage: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// Spatial extent of the layer input.
    pub input_size: usize,
}

const STEM_OP: CandidateOp = CandidateOp::LocalSa { window: 3, heads: 8 };

impl MacroConfig {
    /// Five stages of three layers on 32×32×3 inputs, ten classes.
    pub fn full_size() -> Self {
        let stage = |channels, stride| StageSpec { channels, layers: 3, stride };
        MacroConfig {
            input_size: 32,
            input_channels: 3,
            stem_channels: 16,
            stem_op: STEM_OP,
            stages: vec![stage(16, 1), stage(32, 2), stage(32, 1), stage(64, 2), stage(64, 1)],
            num_classes: 10,
        }
    }

    /// Two stride-2 stages of two layers on 16×16 inputs, three classes.
    pub fn desk() -> Self {
        let stage = |channels| StageSpec { channels, layers: 2, stride: 2 };
        MacroConfig {
            input_size: 16,
            input_channels: 3,
            stem_channels: 16,
            stem_op: STEM_OP,
            stages: vec![stage(16), stage(32)],
            num_classes: 3,
        }
    }

    /// Depth scaling: repeat the given stages (1-based) once more, keeping
    /// order. `[1, 3, 5]` on the default yields eight stages.
    pub fn with_repeated_stages(&self, repeat: &[usize]) -> Self {
        let mut stages = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            stages.push(s.clone());
            if repeat.contains(&(i + 1)) {
                stages.push(StageSpec { stride: 1, ..s.clone() });
            }
        }
        MacroConfig { stages, ..self.clone() }
    }

    /// Keep the first `n` stages, or extend with stages of doubled width
    /// (stride 2 while the map is at least 4 wide, then stride 1).
    pub fn with_stage_count(&self, n: usize) -> Self {
        let mut cfg = self.clone();
        cfg.stages.truncate(n);
        while cfg.stages.len() < n {
            let last = cfg.stages.last().cloned().unwrap_or(StageSpec {
                channels: cfg.stem_channels / 2,
                layers: 1,
                stride: 1,
            });
            let stride = if cfg.feature_size() >= 4 { 2 } else { 1 };
            cfg.stages.push(StageSpec {
                channels: last.channels * 2,
                layers: last.layers,
                stride,
            });
        }
        cfg
    }

    pub fn num_layers(&self) -> usize {
        self.stages.iter().map(|s| s.layers).sum()
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    /// Number of stride-2 stages.
    pub fn downsamplings(&self) -> usize {
        self.stages.iter().filter(|s| s.stride == 2).count()
    }

    pub fn feature_size(&self) -> usize {
        self.input_size >> self.downsamplings()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut cin = self.stem_channels;
        let mut size = self.input_size;
        for (si, st) in self.stages.iter().enumerate() {
            for li in 0..st.layers {
                let stride = if li == 0 { st.stride } else { 1 };
                out.push(LayerSpec {
                    stage: si,
                    index_in_stage: li,
                    cin,
                    cout: st.channels,
                    stride,
                    input_size: size,
                });
                cin = st.channels;
                size /= stride;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.layers == 0) {
            return Err(Error::Config("every stage needs at least one layer".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.input_size % (1 << self.downsamplings()) != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{}",
                self.input_size,
                self.downsamplings()
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::Config(format!("stage {} stride {}", i + 1, s.stride)));
            }
        }
        Ok(())
    }

    /// Proportional channel ladder for a given stem width: every width is
    /// multiplied by `initial / stem_channels` and rounded to the nearest
    /// multiple of 8.
    pub fn scaled(&self, initial_channels: usize) -> Result<MacroConfig> {
        if initial_channels == 0 {
            return Err(Error::Config("initial channels must be positive".into()));
        }
        let ratio = initial_channels as f64 / self.stem_channels as f64;
        let round8 = |c: usize| (((c as f64 * ratio) / 8.0).round() as usize).max(1) * 8;
        let mut cfg = self.clone();
        cfg.stem_channels = round8(self.stem_channels);
        for s in &mut cfg.stages {
            s.channels = round8(s.channels);
        }
        Ok(cfg)
    }

    /// Input shape of every row of the macro table: stem, stages, pooling,
    /// output.
    pub fn shape_table(&self) -> Vec<(String, [usize; 3])> {
        let mut rows = vec![(
            "Stem".to_string(),
            [self.input_size, self.input_size, self.input_channels],
        )];
        let specs = self.layer_specs();
        for (si, _) in self.stages.iter().enumerate() {
            let first = specs.iter().find(|l| l.stage == si).unwrap();
            rows.push((
                format!("Stage {}", si + 1),
                [first.input_size, first.input_size, first.cin],
            ));
        }
        let f = self.feature_size();
        rows.push(("Pooling layer".into(), [f, f, self.final_channels()]));
        rows.push(("Output".into(), [1, 1, self.final_channels()]));
        rows
    }

    /// Row of the architecture-parameter matrix used by each layer. With
    /// `tie_stages`, layer `j` of every odd-numbered stage shares one row and
    /// layer `j` of every even-numbered stage shares another.
    pub fn alpha_rows(&self, tie_stages: bool) -> Result<Vec<usize>> {
        if !tie_stages {
            return Ok((0..self.num_layers()).collect());
        }
        let mut group_len = [None::<usize>; 2];
        for (i, s) in self.stages.iter().enumerate() {
            let g = &mut group_len[i % 2];
            match *g {
                None => *g = Some(s.layers),
                Some(n) if n != s.layers => {
                    return Err(Error::Config(format!(
                        "tied stages need equal depth; stage {} has {} layers, expected {n}",
                        i + 1,
                        s.layers
                    )))
                }
                _ => {}
            }
        }
        let offset = [0, group_len[0].unwrap_or(0)];
        Ok(self
            .layer_specs()
            .iter()
            .map(|l| offset[l.stage % 2] + l.index_in_stage)
            .collect())
    }
}

/// Number of discrete architectures: `7^L`.
pub fn space_size(cfg: &MacroConfig) -> BigUint {
    BigUint::from(NUM_CANDIDATES).pow(cfg.num_layers() as u32)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-layer argmax of `alpha` (`[rows, 7]`) through the layer→row map.
pub fn discretize(alpha: &Tensor, layer_rows: &[usize]) -> Vec<CandidateOp> {
    let cols = alpha.shape()[1];
    layer_rows
        .iter()
        .map(|&r| CANDIDATES[argmax(&alpha.data()[r * cols..(r + 1) * cols])])
        .collect()
}

/// A discrete network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    #[serde(rename = "macro")]
    pub macro_config: MacroConfig,
    pub choices: Vec<CandidateOp>,
    pub seed: u64,
    pub config_hash: String,
    pub version: u32,
}

impl Architecture {
    pub fn new(macro_config: MacroConfig, choices: Vec<CandidateOp>, seed: u64, config_hash: String) -> Result<Self> {
        let arch = Architecture {
            macro_config,
            choices,
            seed,
            config_hash,
            version: ARCH_FORMAT_VERSION,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.macro_config.validate()?;
        if self.choices.len() != self.macro_config.num_layers() {
            return Err(Error::Config(format!(
                "architecture has {} choices for {} layers",
                self.choices.len(),
                self.macro_config.num_layers()
            )));
        }
        if self.version != ARCH_FORMAT_VERSION {
            return Err(Error::Incompatible {
                found: self.version,
                expected: ARCH_FORMAT_VERSION,
            });
        }
        Ok(())
    }
}

/// Seven candidate blocks blended by `softmax(α_row)`.
#[derive(Debug, Clone)]
pub struct MixedLayer {
    pub spec: LayerSpec,
    pub blocks: Vec<AttentionBlock>,
    pub alpha_row: usize,
}

impl MixedLayer {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        spec: LayerSpec,
        alpha_row: usize,
    ) -> Result<Self> {
        let blocks = CANDIDATES
            .iter()
            .map(|&op| AttentionBlock::new(store, rng, &format!("{name}.{op}"), op, spec.cin, spec.cout, spec.stride))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixedLayer { spec, blocks, alpha_row })
    }
}

/// Weighted combination of the candidate outputs.
pub fn mixed_forward<'t>(
    b: &Binder<'t, '_>,
    x: Var<'t>,
    layer: &MixedLayer,
    alpha: Var<'t>,
) -> Result<Var<'t>> {
    let weights = alpha.select_row(layer.alpha_row)?.softmax(0)?;
    let outs = layer
        .blocks
        .iter()
        .map(|blk| blk.forward(b, x))
        .collect::<Result<Vec<_>>>()?;
    Var::weighted_sum(weights, &outs)
}

#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: MacroConfig,
    pub store: ParamStore,
    pub stem: AttentionBlock,
    pub layers: Vec<MixedLayer>,
    pub head: LinearParams,
    pub alpha: ParamId,
    pub layer_rows: Vec<usize>,
}

impl Supernet {
    /// Deterministic in `seed`. Architecture parameters start at zero.
    pub fn build(cfg: &MacroConfig, seed: u64, tie_stages: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = AttentionBlock::new(
            &mut store,
            &mut rng,
            "stem",
            cfg.stem_op,
            cfg.input_channels,
            cfg.stem_channels,
            1,
        )?;
        let layer_rows = cfg.alpha_rows(tie_stages)?;
        let mut layers = Vec::new();
        for (i, spec) in cfg.layer_specs().into_iter().enumerate() {
            let stage = spec.stage + 1;
            let layer = MixedLayer::new(&mut store, &mut rng, &format!("layer{i}"), spec, layer_rows[i])
                .map_err(|e| Error::Config(format!("layer {i} (stage {stage}): {e}")))?;
            layers.push(layer);
        }
        let head = head_params(&mut store, &mut rng, cfg);
        let rows = layer_rows.iter().max().map_or(0, |m| m + 1);
        let alpha = store.add("alpha", Tensor::zeros(&[rows, NUM_CANDIDATES]), ParamGroup::Arch);
        Ok(Supernet {
            config: cfg.clone(),
            store,
            stem,
            layers,
            head,
            alpha,
            layer_rows,
        })
    }

    pub fn alpha(&self) -> &Tensor {
        self.store.get(self.alpha)
    }

    pub fn set_alpha(&mut self, alpha: &Tensor) -> Result<()> {
        if alpha.shape() != self.alpha().shape() {
            return Err(Error::Config(format!(
                "architecture parameters {:?} do not fit {:?}",
                alpha.shape(),
                self.alpha().shape()
            )));
        }
        *self.store.get_mut(self.alpha) = alpha.clone();
        Ok(())
    }

    pub fn choices(&self) -> Vec<CandidateOp> {
        discretize(self.alpha(), &self.layer_rows)
    }

    pub fn discretize(&self, seed: u64, config_hash: String) -> Result<Architecture> {
        Architecture::new(self.config.clone(), self.choices(), seed, config_hash)
    }

    /// Body forward recording `(row name, input shape)` for the stem, each
    /// stage, the pooling layer and the output.
    pub fn trace_shapes(&self, input: Tensor) -> Result<Vec<(String, Vec<usize>)>> {
        let tape = crate::autodiff::Tape::new();
        let b = Binder::new(&tape, &self.store, None);
        let mut trace = Vec::new();
        let x = tape.constant(input);
        trace.push(("Stem".to_string(), x.shape()[1..].to_vec()));
        let mut h = self.stem.forward(&b, x)?;
        let alpha = b.var(self.alpha);
        for layer in &self.layers {
            if layer.spec.index_in_stage == 0 {
                trace.push((format!("Stage {}", layer.spec.stage + 1), h.shape()[1..].to_vec()));
            }
            h = mixed_forward(&b, h, layer, alpha)?;
        }
        trace.push(("Pooling layer".into(), h.shape()[1..].to_vec()));
        let pooled = h.mean_spatial()?;
        trace.push(("Output".into(), vec![1, 1, pooled.shape()[1]]));
        Ok(trace)
    }

    /// Closed-form count of network weights (excluding `α`).
    pub fn analytic_weight_count(cfg: &MacroConfig) -> usize {
        let mut n = AttentionBlock::param_count(cfg.stem_op, cfg.input_channels, cfg.stem_channels);
        for l in cfg.layer_specs() {
            n += CANDIDATES
                .iter()
                .map(|&op| AttentionBlock::param_count(op, l.cin, l.cout))
                .sum::<usize>();
        }
        n + head_count(cfg)
    }
}

pub(crate) fn head_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &MacroConfig) -> LinearParams {
    let c = cfg.final_channels();
    let weight = store.add(
        "head.weight",
        crate::params::fan_in_uniform(rng, &[c, cfg.num_classes], c),
        ParamGroup::Weight,
    );
    let bias = store.add("head.bias", Tensor::zeros(&[cfg.num_classes]), ParamGroup::Weight);
    LinearParams { weight, bias }
}

pub(crate) fn head_count(cfg: &MacroConfig) -> usize {
    cfg.final_channels() * cfg.num_classes + cfg.num_classes
}

impl Model for Supernet {
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
        let alpha = b.var(self.alpha);
        for layer in &self.layers {
            h = mixed_forward(b, h, layer, alpha)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_macro_table() {
        let cfg = MacroConfig::full_size();
        assert_eq!(cfg.num_layers(), 15);
        let rows = cfg.shape_table();
        let expected = [
            ("Stem", [32, 32, 3]),
            ("Stage 1", [32, 32, 16]),
            ("Stage 2", [32, 32, 16]),
            ("Stage 3", [16, 16, 32]),
            ("Stage 4", [16, 16, 32]),
            ("Stage 5", [8, 8, 64]),
            ("Pooling layer", [8, 8, 64]),
            ("Output", [1, 1, 64]),
        ];
        assert_eq!(rows.len(), expected.len());
        for ((name, shape), (en, es)) in rows.iter().zip(expected) {
            assert_eq!((name.as_str(), *shape), (en, es));
        }
    }

    #[test]
    fn space_sizes() {
        let cfg = MacroConfig::full_size();
        assert_eq!(space_size(&cfg), BigUint::from(7u32).pow(15));
        let mut one = MacroConfig::desk();
        one.stages.truncate(1);
        one.stages[0].layers = 1;
        assert_eq!(space_size(&one), BigUint::from(7u32));
        assert_eq!(space_size(&MacroConfig::desk()), BigUint::from(2401u32));
    }

    #[test]
    fn argmax_ties_and_examples() {
        assert_eq!(argmax(&[0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 7]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn channel_scaling() {
        let cfg = MacroConfig::full_size();
        let ladder = |c: &MacroConfig| {
            let mut v = vec![c.stem_channels];
            v.extend(c.stages.iter().map(|s| s.channels));
            v
        };
        assert_eq!(ladder(&cfg.scaled(16).unwrap()), vec![16, 16, 32, 32, 64, 64]);
        assert_eq!(ladder(&cfg.scaled(96).unwrap()), vec![96, 96, 192, 192, 384, 384]);
    }

    #[test]
    fn depth_scaling_repeats_odd_stages() {
        let cfg = MacroConfig::full_size().with_repeated_stages(&[1, 3, 5]);
        assert_eq!(cfg.stages.len(), 8);
        assert_eq!(cfg.downsamplings(), 2);
    }

    #[test]
    fn tied_rows() {
        let cfg = MacroConfig::full_size();
        let rows = cfg.alpha_rows(true).unwrap();
        assert_eq!(rows, vec![0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5, 0, 1, 2]);
        let mut bad = cfg.clone();
        bad.stages[2].layers = 2;
        assert!(bad.alpha_rows(true).is_err());
    }

    #[test]
    fn desk_supernet_layers() {
        let mut cfg = MacroConfig::desk();
        cfg.stages[0].channels = 8;
        cfg.stages[1].channels = 16;
        let net = Supernet::build(&cfg, 0, false).unwrap();
        assert_eq!(net.layers.len(), 4);
        assert!(net.alpha().data().iter().all(|&v| v == 0.0));
    }
}
