//! Training a discretized architecture from scratch, and evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, stream_rng, Augmentation, ImageDataset, Normalization, SplitSpec};
use crate::error::{Error, Result};
use crate::network::{Model, Network};
use crate::optim::{LrSchedule, OptimizerState};
use crate::params::{Binder, ParamGroup};
use crate::persist::{Checkpoint, MetricsRow};
use crate::search::count_correct;
use crate::space::Architecture;
use crate::tensor::Tensor;

/// How the reported model is picked among epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// Highest test accuracy.
    Test,
    /// Highest accuracy on a held-out part of the training set.
    Validation { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Width of the stem; `None` keeps the architecture's own widths.
    pub initial_channels: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augmentation: Option<Augmentation>,
    pub label_smoothing: f64,
    pub seed: u64,
    pub selection: Selection,
    /// Global-norm clipping of weight gradients; `None` disables it.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    /// 500 epochs at 96 channels, SGD 0.04 with cosine decay, weight decay 4e-4.
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            initial_channels: Some(96),
            batch_size: 64,
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 4e-4,
            augmentation: Some(Augmentation::default()),
            label_smoothing: 0.0,
            seed: 0,
            selection: Selection::Test,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// 60 epochs at 32 channels, batch 32, SGD 0.1 with gradients clipped
    /// to norm 5, crops padded by 2 for 16-pixel images.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            augmentation: Some(Augmentation { pad: 2, flip: true }),
            initial_channels: Some(32),
            batch_size: 32,
            lr: 0.1,
            clip_norm: Some(5.0),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_error: f64,
    /// Reported only with at least five classes.
    pub top5_error: Option<f64>,
    pub loss: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn top1_acc(&self) -> f64 {
        1.0 - self.top1_error
    }
}

/// Classification metrics without augmentation. Ties in the argmax go to the
/// lowest class index.
pub fn evaluate<M: Model + ?Sized>(
    model: &M,
    ds: &ImageDataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<EvalReport> {
    if ds.num_classes != model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network head has {}",
            ds.num_classes,
            model.config().num_classes
        )));
    }
    let k = ds.num_classes;
    let (mut loss, mut top1, mut top5) = (0.0, 0usize, 0usize);
    for idx in data::sequential_batches(ds.len(), batch_size.max(1)) {
        let labels = ds.labels_for(&idx)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, model.store(), None);
        let logits = model.logits(&b, tape.constant(ds.batch(&idx, norm, None)))?;
        loss += logits.cross_entropy(&labels, 0.0)?.item() * idx.len() as f64;
        let lv = logits.value();
        top1 += count_correct(&lv, &labels);
        for (row, &y) in lv.data().chunks(k).zip(&labels) {
            // Rank of the true class under the same lowest-index tie rule.
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
                .count();
            top5 += usize::from(rank < 5);
        }
    }
    let n = ds.len().max(1) as f64;
    Ok(EvalReport {
        top1_error: 1.0 - top1 as f64 / n,
        top5_error: (k >= 5).then(|| 1.0 - top5 as f64 / n),
        loss: loss / n,
        count: ds.len(),
    })
}

/// Number of trainable scalars.
pub fn count_params<M: Model + ?Sized>(model: &M) -> usize {
    model.store().numel(ParamGroup::Weight)
}

/// A trained network together with the normalization it was trained under.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub norm: Normalization,
    pub initial_channels: Option<usize>,
}

impl TrainedModel {
    pub fn evaluate(&self, ds: &ImageDataset, batch_size: usize) -> Result<EvalReport> {
        evaluate(&self.network, ds, &self.norm, batch_size)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.counters.push(("initial_channels".into(), self.initial_channels.unwrap_or(0) as u64));
        ck.texts.push(("arch".into(), crate::persist::arch_to_json(&self.network.arch)?));
        ck.tensors.push(("norm.mean".into(), Tensor::new(&[3], self.norm.mean.to_vec())?));
        ck.tensors.push(("norm.std".into(), Tensor::new(&[3], self.norm.std.to_vec())?));
        for e in self.network.store.entries() {
            ck.tensors.push((format!("param/{}", e.name), e.value.clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = crate::persist::arch_from_json(ck.text("arch")?)?;
        let initial_channels = match ck.counter("initial_channels")? {
            0 => None,
            c => Some(c as usize),
        };
        let mut network = Network::instantiate(&arch, initial_channels, 0)?;
        for i in 0..network.store.len() {
            let id = crate::params::ParamId(i);
            let name = network.store.entry(id).name.clone();
            let t = ck.tensor(&format!("param/{name}"))?;
            if t.shape() != network.store.get(id).shape() {
                return Err(Error::Corrupt(format!("parameter `{name}` has shape {:?}", t.shape())));
            }
            *network.store.get_mut(id) = t.clone();
        }
        let three = |name: &str| -> Result<[f64; 3]> {
            let t = ck.tensor(name)?;
            <[f64; 3]>::try_from(t.data()).map_err(|_| Error::Corrupt(format!("`{name}` is not 3 values")))
        };
        let norm = Normalization {
            mean: three("norm.mean")?,
            std: three("norm.std")?,
        };
        Ok(TrainedModel {
            network,
            norm,
            initial_channels,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub model: TrainedModel,
    pub metrics: Vec<MetricsRow>,
    pub best_epoch: u64,
    pub best_top1_acc: f64,
    pub params: usize,
}

/// Train `arch` from fresh weights on `train`, evaluating on `test` after
/// every epoch (row 0 is the untrained network).
pub fn train_final(
    arch: &Architecture,
    cfg: &TrainConfig,
    train: &ImageDataset,
    test: &ImageDataset,
) -> Result<TrainOutcome> {
    train_with_callback(arch, cfg, train, test, |_| {})
}

pub fn train_with_callback(
    arch: &Architecture,
    cfg: &TrainConfig,
    train: &ImageDataset,
    test: &ImageDataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    arch.validate()?;
    for ds in [train, test] {
        if ds.labels.is_none() {
            return Err(Error::Input(format!("dataset `{}` has no labels", ds.tag)));
        }
        if ds.num_classes != arch.macro_config.num_classes {
            return Err(Error::Config(format!(
                "dataset `{}` has {} classes, architecture head has {}",
                ds.tag, ds.num_classes, arch.macro_config.num_classes
            )));
        }
    }
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("training needs data and a positive batch size".into()));
    }
    let (fit, holdout) = match cfg.selection {
        Selection::Test => (train.clone(), None),
        Selection::Validation { ratio } => {
            let (a, b) = data::split(train, &SplitSpec { ratio, seed: cfg.seed });
            (a, Some(b))
        }
    };
    let norm = fit.channel_stats();
    let mut network = Network::instantiate(arch, cfg.initial_channels, cfg.seed)?;
    let mut opt = OptimizerState::sgd(
        network.store.ids(ParamGroup::Weight),
        &network.store,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    let schedule = LrSchedule::Cosine {
        base_lr: cfg.lr,
        total_steps: cfg.epochs.max(1),
    };
    let eval_bs = cfg.batch_size.max(64);
    let selection_acc = |net: &Network| -> Result<f64> {
        let ds = holdout.as_ref().unwrap_or(test);
        Ok(evaluate(net, ds, &norm, eval_bs)?.top1_acc())
    };

    let initial = evaluate(&network, test, &norm, eval_bs)?;
    let row0 = MetricsRow {
        epoch: 0,
        train_loss: evaluate(&network, &fit, &norm, eval_bs)?.loss,
        test_top1: initial.top1_acc(),
        test_top5: initial.top5_error.map(|e| 1.0 - e),
    };
    on_epoch(&row0);
    let mut metrics = vec![row0];
    let mut best = (0, selection_acc(&network)?, network.store.clone());

    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, 3, epoch);
        opt.lr = schedule.lr_at(epoch);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in data::shuffled_batches(fit.len(), cfg.batch_size, &mut rng) {
            let labels = fit.labels_for(&idx)?;
            let x = fit.batch(&idx, &norm, cfg.augmentation.as_ref().map(|a| (a, &mut rng)));
            let mut grads = {
                let tape = Tape::new();
                let b = Binder::new(&tape, &network.store, Some(ParamGroup::Weight));
                let loss = network.logits(&b, tape.constant(x))?.cross_entropy(&labels, cfg.label_smoothing)?;
                sum += loss.item() * idx.len() as f64;
                n += idx.len();
                b.param_grads(&tape.backward(loss)?)
            };
            if let Some(c) = cfg.clip_norm {
                grads.clip_norm(c);
            }
            opt.step(&mut network.store, &grads);
        }
        if !sum.is_finite() {
            return Err(Error::Numerical(format!("training epoch {}: loss became non-finite", epoch + 1)));
        }
        let report = evaluate(&network, test, &norm, eval_bs)?;
        let row = MetricsRow {
            epoch: epoch + 1,
            train_loss: sum / n as f64,
            test_top1: report.top1_acc(),
            test_top5: report.top5_error.map(|e| 1.0 - e),
        };
        on_epoch(&row);
        metrics.push(row);
        let acc = match holdout {
            None => report.top1_acc(),
            Some(_) => selection_acc(&network)?,
        };
        if acc > best.1 {
            best = (epoch + 1, acc, network.store.clone());
        }
    }
    let (best_epoch, best_top1_acc, store) = best;
    network.store = store;
    let params = count_params(&network);
    Ok(TrainOutcome {
        model: TrainedModel {
            network,
            norm,
            initial_channels: cfg.initial_channels,
        },
        metrics,
        best_epoch,
        best_top1_acc,
        params,
    })
}
