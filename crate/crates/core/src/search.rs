//! Two-phase differentiable search: alternating first-order updates of the
//! architecture parameters (on the validation split) and the network weights
//! (on the training split), first under the reconstruction task and then
//! under classification, followed by discretization.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::car::{car_forward, car_loss, mask_batch, CarConfig, Decoder, Fill, LossRegion};
use crate::data::{self, stream_rng, ImageDataset, Normalization, SplitSpec};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::optim::{LrSchedule, OptimizerState};
use crate::params::{Binder, ParamGrads, ParamGroup, ParamStore};
use crate::persist::{Checkpoint, HistoryRow};
use crate::space::{Architecture, MacroConfig, Supernet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CarSearch,
    Finetune,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::CarSearch => "car_search",
            Phase::Finetune => "finetune",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::CarSearch => 1,
            Phase::Finetune => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaInit {
    Zeros,
    Uniform { eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub phase: Phase,
    pub epochs: u64,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_weight_decay: f64,
    pub split_ratio: f64,
    pub seed: u64,
    pub alpha_init: AlphaInit,
    /// Share architecture rows between odd-numbered and between
    /// even-numbered stages.
    pub tie_stages: bool,
    pub car: CarConfig,
    pub label_smoothing: f64,
    /// Global-norm clipping of weight gradients; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Start fine-tuning from the reconstruction phase's encoder weights
    /// instead of fresh ones.
    #[serde(default)]
    pub warm_start_weights: bool,
}

impl SearchConfig {
    /// Reconstruction-supervised search: 20 epochs, SGD 0.025 with cosine
    /// decay, Adam 3e-4 on the architecture parameters.
    pub fn car_search() -> Self {
        SearchConfig {
            phase: Phase::CarSearch,
            epochs: 20,
            batch_size: 64,
            w_lr: 0.025,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_weight_decay: 1e-3,
            split_ratio: 0.5,
            seed: 0,
            alpha_init: AlphaInit::Zeros,
            tie_stages: false,
            car: CarConfig::default(),
            label_smoothing: 0.0,
            clip_norm: None,
            warm_start_weights: false,
        }
    }

    /// Classification fine-tuning: 50 epochs, Adam 1e-4 on the architecture
    /// parameters.
    pub fn finetune() -> Self {
        SearchConfig {
            phase: Phase::Finetune,
            epochs: 50,
            alpha_lr: 1e-4,
            ..Self::car_search()
        }
    }

    /// Five reconstruction epochs at batch 32 with faster rates, sized for
    /// the 16×16 desk task.
    pub fn desk_car() -> Self {
        SearchConfig {
            epochs: 5,
            batch_size: 32,
            w_lr: 0.1,
            alpha_lr: 3e-3,
            ..Self::car_search()
        }
    }

    pub fn desk_finetune() -> Self {
        SearchConfig {
            epochs: 10,
            batch_size: 32,
            w_lr: 0.1,
            ..Self::finetune()
        }
    }

    /// Short content hash used as provenance in architecture files.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Training and validation halves with normalization from the full set.
#[derive(Debug, Clone)]
pub struct SearchData {
    pub train: ImageDataset,
    pub val: ImageDataset,
    pub norm: Normalization,
}

impl SearchData {
    pub fn split(ds: &ImageDataset, ratio: f64, seed: u64) -> Self {
        let norm = ds.channel_stats();
        let (train, val) = data::split(ds, &SplitSpec { ratio, seed });
        SearchData { train, val, norm }
    }
}

/// Everything needed to continue a search bitwise.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub config: SearchConfig,
    pub supernet: Supernet,
    pub decoder: Option<Decoder>,
    pub w_opt: OptimizerState,
    pub alpha_opt: OptimizerState,
    pub epoch: u64,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

impl SearchState {
    pub fn new(cfg: &SearchConfig, macro_cfg: &MacroConfig) -> Result<Self> {
        let build_seed = cfg.seed.wrapping_mul(2).wrapping_add(cfg.phase.stream());
        let mut supernet = Supernet::build(macro_cfg, build_seed, cfg.tie_stages)?;
        let decoder = match cfg.phase {
            Phase::CarSearch => {
                let mut rng = stream_rng(build_seed, 7, 0);
                Some(Decoder::new(&mut supernet.store, &mut rng, macro_cfg))
            }
            Phase::Finetune => None,
        };
        if let AlphaInit::Uniform { eps } = cfg.alpha_init {
            use rand::Rng;
            let mut rng = stream_rng(cfg.seed, 8, 0);
            let shape = supernet.alpha().shape().to_vec();
            supernet.set_alpha(&Tensor::from_fn(&shape, |_| rng.gen_range(-eps..=eps)))?;
        }
        let w_opt = OptimizerState::sgd(
            supernet.store.ids(ParamGroup::Weight),
            &supernet.store,
            cfg.w_lr,
            cfg.w_momentum,
            cfg.w_weight_decay,
        );
        let alpha_opt = OptimizerState::adam(vec![supernet.alpha], &supernet.store, cfg.alpha_lr, cfg.alpha_weight_decay);
        Ok(SearchState {
            config: cfg.clone(),
            supernet,
            decoder,
            w_opt,
            alpha_opt,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn alpha(&self) -> &Tensor {
        self.supernet.alpha()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Cosine {
            base_lr: self.config.w_lr,
            total_steps: self.config.epochs.max(1),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.counters.push(("epoch".into(), self.epoch));
        ck.counters.push(("w_opt.step".into(), self.w_opt.step));
        ck.counters.push(("alpha_opt.step".into(), self.alpha_opt.step));
        ck.texts.push(("config".into(), serde_json::to_string(&self.config).unwrap()));
        ck.texts.push(("macro".into(), serde_json::to_string(&self.supernet.config).unwrap()));
        ck.texts.push(("history".into(), serde_json::to_string(&self.history).unwrap()));
        for e in self.supernet.store.entries() {
            ck.tensors.push((format!("param/{}", e.name), e.value.clone()));
        }
        push_buffers(&mut ck, "w_opt", &self.w_opt, &self.supernet.store);
        push_buffers(&mut ck, "alpha_opt", &self.alpha_opt, &self.supernet.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parse = |name: &str| ck.text(name).map(str::to_owned);
        let config: SearchConfig =
            serde_json::from_str(&parse("config")?).map_err(|e| Error::Parse(format!("config: {e}")))?;
        let macro_cfg: MacroConfig =
            serde_json::from_str(&parse("macro")?).map_err(|e| Error::Parse(format!("macro: {e}")))?;
        let mut state = SearchState::new(&config, &macro_cfg)?;
        state.history =
            serde_json::from_str(&parse("history")?).map_err(|e| Error::Parse(format!("history: {e}")))?;
        state.epoch = ck.counter("epoch")?;
        state.w_opt.step = ck.counter("w_opt.step")?;
        state.alpha_opt.step = ck.counter("alpha_opt.step")?;
        let store = &mut state.supernet.store;
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = ck.tensor(&format!("param/{name}"))?;
            let slot = store.get_mut(crate::params::ParamId(i));
            if slot.shape() != t.shape() {
                return Err(Error::Corrupt(format!("parameter `{name}` has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
        load_buffers(ck, "w_opt", &mut state.w_opt, &state.supernet.store)?;
        load_buffers(ck, "alpha_opt", &mut state.alpha_opt, &state.supernet.store)?;
        Ok(state)
    }
}

fn push_buffers(ck: &mut Checkpoint, prefix: &str, opt: &OptimizerState, store: &ParamStore) {
    for (slot, &pid) in opt.params.iter().enumerate() {
        let name = &store.entry(pid).name;
        ck.tensors.push((format!("{prefix}.first/{name}"), opt.first[slot].clone()));
        if let Some(s) = opt.second.get(slot) {
            ck.tensors.push((format!("{prefix}.second/{name}"), s.clone()));
        }
    }
}

fn load_buffers(ck: &Checkpoint, prefix: &str, opt: &mut OptimizerState, store: &ParamStore) -> Result<()> {
    for (slot, &pid) in opt.params.iter().enumerate() {
        let name = &store.entry(pid).name;
        opt.first[slot] = ck.tensor(&format!("{prefix}.first/{name}"))?.clone();
        if slot < opt.second.len() {
            opt.second[slot] = ck.tensor(&format!("{prefix}.second/{name}"))?.clone();
        }
    }
    Ok(())
}

struct StepOutcome {
    loss: f64,
    correct: Option<usize>,
    grads: ParamGrads,
}

fn fill_value(fill: Fill, norm: &Normalization) -> [f64; 3] {
    match fill {
        Fill::Mean => [0.0; 3],
        Fill::Zero => std::array::from_fn(|c| -norm.mean[c] / norm.std[c]),
    }
}

/// Loss of one batch with gradients for `group` only.
fn batch_step(
    state: &SearchState,
    ds: &ImageDataset,
    idx: &[usize],
    norm: &Normalization,
    group: ParamGroup,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let b = Binder::new(&tape, &state.supernet.store, Some(group));
    let batch = ds.batch(idx, norm, None);
    let (loss, correct): (Var<'_>, Option<usize>) = match state.config.phase {
        Phase::CarSearch => {
            let car = &state.config.car;
            let (masked, weights) = mask_batch(&batch, car, fill_value(car.fill, norm), rng)?;
            let decoder = state.decoder.as_ref().expect("reconstruction phase has a decoder");
            let recon = car_forward(&state.supernet, decoder, &b, tape.constant(masked))?;
            let region = match car.loss_region {
                LossRegion::All => None,
                LossRegion::Masked => Some(weights),
            };
            (car_loss(recon, tape.constant(batch), region)?, None)
        }
        Phase::Finetune => {
            let labels = ds.labels_for(idx)?;
            let logits = state.supernet.logits(&b, tape.constant(batch))?;
            let correct = count_correct(&logits.value(), &labels);
            (logits.cross_entropy(&labels, state.config.label_smoothing)?, Some(correct))
        }
    };
    let grads = tape.backward(loss)?;
    Ok(StepOutcome {
        loss: loss.item(),
        correct,
        grads: b.param_grads(&grads),
    })
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| crate::space::argmax(row) == y)
        .count()
}

/// One pass of paired updates: for each iteration an architecture step on a
/// validation batch (weights frozen), then a weight step on a training batch
/// (architecture frozen). The shorter split is cycled.
pub fn bilevel_epoch(state: &mut SearchState, data: &SearchData) -> Result<EpochSummary> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("search needs non-empty training and validation splits".into()));
    }
    let cfg = state.config.clone();
    let mut rng = stream_rng(cfg.seed, cfg.phase.stream(), state.epoch);
    let train_batches = data::shuffled_batches(data.train.len(), cfg.batch_size, &mut rng);
    let val_batches = data::shuffled_batches(data.val.len(), cfg.batch_size, &mut rng);
    let iters = train_batches.len().max(val_batches.len());
    state.w_opt.lr = state.schedule().lr_at(state.epoch);

    let (mut tl, mut vl) = (0.0, 0.0);
    let (mut tc, mut vc, mut tn, mut vn) = (0, 0, 0, 0);
    for it in 0..iters {
        let vb = &val_batches[it % val_batches.len()];
        let out = batch_step(state, &data.val, vb, &data.norm, ParamGroup::Arch, &mut rng)?;
        state.alpha_opt.step(&mut state.supernet.store, &out.grads);
        vl += out.loss * vb.len() as f64;
        vc += out.correct.unwrap_or(0);
        vn += vb.len();

        let tb = &train_batches[it % train_batches.len()];
        let mut out = batch_step(state, &data.train, tb, &data.norm, ParamGroup::Weight, &mut rng)?;
        if let Some(c) = cfg.clip_norm {
            out.grads.clip_norm(c);
        }
        state.w_opt.step(&mut state.supernet.store, &out.grads);
        tl += out.loss * tb.len() as f64;
        tc += out.correct.unwrap_or(0);
        tn += tb.len();
    }
    if !(tl.is_finite() && vl.is_finite()) {
        return Err(Error::Numerical(format!(
            "{} epoch {}: loss became non-finite",
            cfg.phase.label(),
            state.epoch + 1
        )));
    }
    state.epoch += 1;
    let classify = cfg.phase == Phase::Finetune;
    let summary = EpochSummary {
        train_loss: tl / tn as f64,
        val_loss: vl / vn as f64,
        train_acc: classify.then(|| tc as f64 / tn as f64),
        val_acc: classify.then(|| vc as f64 / vn as f64),
    };
    for (split, loss, acc) in [
        ("train", summary.train_loss, summary.train_acc),
        ("val", summary.val_loss, summary.val_acc),
    ] {
        state.history.push(HistoryRow {
            phase: cfg.phase.label().into(),
            epoch: state.epoch,
            split: split.into(),
            loss,
            acc,
        });
    }
    Ok(summary)
}

/// Run the remaining epochs of `state`, calling `on_epoch` after each.
pub fn run_epochs(
    state: &mut SearchState,
    data: &SearchData,
    mut on_epoch: impl FnMut(&SearchState, &EpochSummary) -> Result<()>,
) -> Result<()> {
    while state.epoch < state.config.epochs {
        let s = bilevel_epoch(state, data)?;
        on_epoch(state, &s)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub alpha: Tensor,
    pub history: Vec<HistoryRow>,
    pub state: SearchState,
}

/// Initial state and data split for the reconstruction phase.
pub fn prepare_car_search(
    cfg: &SearchConfig,
    macro_cfg: &MacroConfig,
    dataset: &ImageDataset,
) -> Result<(SearchState, SearchData)> {
    let cfg = SearchConfig {
        phase: Phase::CarSearch,
        ..cfg.clone()
    };
    let data = SearchData::split(dataset, cfg.split_ratio, cfg.seed);
    Ok((SearchState::new(&cfg, macro_cfg)?, data))
}

/// Reconstruction-supervised phase on unlabeled images. Only the final
/// architecture parameters are meant to be carried forward.
pub fn run_car_search(cfg: &SearchConfig, macro_cfg: &MacroConfig, dataset: &ImageDataset) -> Result<SearchOutcome> {
    let (mut state, data) = prepare_car_search(cfg, macro_cfg, dataset)?;
    run_epochs(&mut state, &data, |_, _| Ok(()))?;
    Ok(SearchOutcome::from(state))
}

impl From<SearchState> for SearchOutcome {
    fn from(state: SearchState) -> Self {
        SearchOutcome {
            alpha: state.alpha().clone(),
            history: state.history.clone(),
            state,
        }
    }
}

/// Classification phase with fresh weights, starting from `alpha_init`
/// (zeros or the configured random init when `None`).
pub fn run_finetune(
    cfg: &SearchConfig,
    macro_cfg: &MacroConfig,
    dataset: &ImageDataset,
    alpha_init: Option<&Tensor>,
) -> Result<SearchOutcome> {
    run_finetune_from(cfg, macro_cfg, dataset, alpha_init, None)
}

/// Initial state and data split for the classification phase. Encoder
/// weights of `weights_from` whose name and shape match are copied over.
pub fn prepare_finetune(
    cfg: &SearchConfig,
    macro_cfg: &MacroConfig,
    dataset: &ImageDataset,
    alpha_init: Option<&Tensor>,
    weights_from: Option<&ParamStore>,
) -> Result<(SearchState, SearchData)> {
    let cfg = SearchConfig {
        phase: Phase::Finetune,
        ..cfg.clone()
    };
    if dataset.labels.is_none() {
        return Err(Error::Input("fine-tuning needs a labeled dataset".into()));
    }
    if dataset.num_classes != macro_cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network head has {}",
            dataset.num_classes, macro_cfg.num_classes
        )));
    }
    let data = SearchData::split(dataset, cfg.split_ratio, cfg.seed);
    let mut state = SearchState::new(&cfg, macro_cfg)?;
    if let Some(a) = alpha_init {
        state.supernet.set_alpha(a)?;
    }
    if let Some(src) = weights_from {
        let store = &mut state.supernet.store;
        for id in store.ids(ParamGroup::Weight) {
            let name = store.entry(id).name.clone();
            if let Some(sid) = src.find(&name) {
                if src.get(sid).shape() == store.get(id).shape() {
                    *store.get_mut(id) = src.get(sid).clone();
                }
            }
        }
    }
    Ok((state, data))
}

/// [`run_finetune`], optionally copying matching encoder weights of
/// `weights_from`.
pub fn run_finetune_from(
    cfg: &SearchConfig,
    macro_cfg: &MacroConfig,
    dataset: &ImageDataset,
    alpha_init: Option<&Tensor>,
    weights_from: Option<&ParamStore>,
) -> Result<SearchOutcome> {
    let (mut state, data) = prepare_finetune(cfg, macro_cfg, dataset, alpha_init, weights_from)?;
    run_epochs(&mut state, &data, |_, _| Ok(()))?;
    Ok(SearchOutcome::from(state))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub architecture: Architecture,
    pub history: Vec<HistoryRow>,
    pub car_alpha: Option<Tensor>,
    pub final_alpha: Tensor,
    /// Mean validation loss of the last fine-tuning epoch.
    pub final_val_loss: f64,
}

/// Provenance hash of a two-phase run.
pub fn pipeline_hash(car_cfg: &SearchConfig, ft_cfg: &SearchConfig, skip_car: bool) -> String {
    let mut h = Sha256::new();
    h.update(car_cfg.hash());
    h.update(ft_cfg.hash());
    h.update([skip_car as u8]);
    hex::encode(&h.finalize()[..8])
}

/// Reconstruction search (unless `skip_car`), then fine-tuning warm-started
/// from its architecture parameters, then discretization.
pub fn run_full_pipeline(
    car_cfg: &SearchConfig,
    ft_cfg: &SearchConfig,
    macro_cfg: &MacroConfig,
    search_corpus: &ImageDataset,
    target: &ImageDataset,
    skip_car: bool,
) -> Result<PipelineOutcome> {
    let mut history = Vec::new();
    let car = if skip_car {
        None
    } else {
        let out = run_car_search(car_cfg, macro_cfg, search_corpus)?;
        history.extend(out.history.iter().cloned());
        Some(out)
    };
    let car_alpha = car.as_ref().map(|c| c.alpha.clone());
    let weights = car
        .as_ref()
        .filter(|_| ft_cfg.warm_start_weights)
        .map(|c| &c.state.supernet.store);
    let ft = run_finetune_from(ft_cfg, macro_cfg, target, car_alpha.as_ref(), weights)?;
    history.extend(ft.history.iter().cloned());
    let final_val_loss = ft
        .history
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .map_or(f64::NAN, |r| r.loss);
    let architecture = ft
        .state
        .supernet
        .discretize(ft_cfg.seed, pipeline_hash(car_cfg, ft_cfg, skip_car))?;
    Ok(PipelineOutcome {
        architecture,
        history,
        car_alpha,
        final_alpha: ft.alpha,
        final_val_loss,
    })
}
