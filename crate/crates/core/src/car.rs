//! Context auto-regression: random rectangular masks, an upsampling decoder
//! on top of the encoder features, and an L1 reconstruction objective.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LinearParams;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::params::{fan_in_uniform, Binder, ParamGroup, ParamStore};
use crate::space::MacroConfig;
use crate::tensor::Tensor;

/// Largest fraction of the image the union of masks may cover.
pub const MAX_COVERAGE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rects: Vec<Rect>,
    pub size: usize,
}

impl MaskSpec {
    pub fn empty(size: usize) -> Self {
        MaskSpec { rects: Vec::new(), size }
    }

    /// Row-major `size × size` membership grid of the union.
    pub fn grid(&self) -> Vec<bool> {
        let mut g = vec![false; self.size * self.size];
        for r in &self.rects {
            paint(&mut g, self.size, r);
        }
        g
    }

    pub fn coverage(&self) -> f64 {
        let g = self.grid();
        g.iter().filter(|&&v| v).count() as f64 / g.len() as f64
    }
}

fn paint(g: &mut [bool], size: usize, r: &Rect) {
    for y in r.top..r.top + r.height {
        for x in r.left..r.left + r.width {
            g[y * size + x] = true;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    /// Per-channel dataset mean (zero after normalization).
    Mean,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRegion {
    All,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarConfig {
    /// Inclusive range of rectangle counts.
    pub count_range: (usize, usize),
    /// Inclusive side-length range in pixels; `None` means `[H/8, H/3]`.
    pub size_range: Option<(usize, usize)>,
    pub fill: Fill,
    pub loss_region: LossRegion,
}

impl Default for CarConfig {
    fn default() -> Self {
        CarConfig {
            count_range: (2, 5),
            size_range: None,
            fill: Fill::Mean,
            loss_region: LossRegion::All,
        }
    }
}

impl CarConfig {
    pub fn side_range(&self, image_size: usize) -> (usize, usize) {
        self.size_range
            .unwrap_or(((image_size / 8).max(1), (image_size / 3).max(1)))
    }
}

/// Draw rectangles i.i.d., then keep them in draw order while the union
/// stays within [`MAX_COVERAGE`].
pub fn generate_masks(
    rng: &mut ChaCha8Rng,
    image_size: usize,
    count_range: (usize, usize),
    size_range: (usize, usize),
) -> Result<MaskSpec> {
    let (cmin, cmax) = count_range;
    let (smin, smax) = size_range;
    if cmin > cmax || smin == 0 || smin > smax || smax > image_size {
        return Err(Error::Config(format!(
            "invalid mask ranges: count {count_range:?}, size {size_range:?} for {image_size}px"
        )));
    }
    let count = rng.gen_range(cmin..=cmax);
    let drawn: Vec<Rect> = (0..count)
        .map(|_| {
            let height = rng.gen_range(smin..=smax);
            let width = rng.gen_range(smin..=smax);
            Rect {
                top: rng.gen_range(0..=image_size - height),
                left: rng.gen_range(0..=image_size - width),
                height,
                width,
            }
        })
        .collect();
    let limit = (MAX_COVERAGE * (image_size * image_size) as f64).floor() as usize;
    let mut grid = vec![false; image_size * image_size];
    let mut covered = 0;
    let mut rects = Vec::new();
    for r in drawn {
        let mut next = grid.clone();
        paint(&mut next, image_size, &r);
        let n = next.iter().filter(|&&v| v).count();
        if n <= limit {
            grid = next;
            covered = n;
            rects.push(r);
        }
    }
    debug_assert!(covered <= limit);
    Ok(MaskSpec { rects, size: image_size })
}

/// Set masked pixels of an `[H, W, 3]` image to `fill`.
pub fn apply_masks(image: &Tensor, m: &MaskSpec, fill: [f64; 3]) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != m.size || s[1] != m.size || s[2] != 3 {
        return Err(Error::Input(format!(
            "mask drawn for {0}×{0} cannot apply to image {s:?}",
            m.size
        )));
    }
    let mut out = image.clone();
    for (p, on) in m.grid().into_iter().enumerate() {
        if on {
            out.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&fill);
        }
    }
    Ok(out)
}

/// Upsampling decoder: one (nearest 2× → linear → ReLU) step per stride-2
/// stage, halving channels each step, then a linear map to RGB.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub steps: Vec<LinearParams>,
    pub out: LinearParams,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &MacroConfig) -> Self {
        let mut c = cfg.final_channels();
        let mut steps = Vec::new();
        let mut linear = |store: &mut ParamStore, name: String, cin: usize, cout: usize| {
            let weight = store.add(
                format!("{name}.weight"),
                fan_in_uniform(rng, &[cin, cout], cin),
                ParamGroup::Weight,
            );
            let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Weight);
            LinearParams { weight, bias }
        };
        for i in 0..cfg.downsamplings() {
            let next = (c / 2).max(4);
            steps.push(linear(store, format!("decoder.up{i}"), c, next));
            c = next;
        }
        let out = linear(store, "decoder.out".into(), c, 3);
        Decoder { steps, out }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, features: Var<'t>) -> Result<Var<'t>> {
        let mut h = features;
        for step in &self.steps {
            h = step.forward(b, h.upsample_nearest2x()?)?.relu();
        }
        self.out.forward(b, h)
    }
}

/// Reconstruction of a masked batch through encoder features and decoder.
pub fn car_forward<'t, M: Model + ?Sized>(
    model: &M,
    decoder: &Decoder,
    b: &Binder<'t, '_>,
    masked: Var<'t>,
) -> Result<Var<'t>> {
    let f = model.features(b, masked)?;
    decoder.forward(b, f)
}

/// Mean absolute reconstruction error over the whole image, or over masked
/// pixels only when `mask` weights are given.
pub fn car_loss<'t>(recon: Var<'t>, original: Var<'t>, mask: Option<Vec<f64>>) -> Result<Var<'t>> {
    recon.l1_loss_weighted(original, mask)
}

/// Masked batch, original batch and per-element mask weights for a
/// normalized `[B, H, W, 3]` batch.
pub fn mask_batch(
    batch: &Tensor,
    cfg: &CarConfig,
    fill: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<f64>)> {
    let s = batch.shape();
    let (n, size) = (s[0], s[1]);
    let side = cfg.side_range(size);
    let per = size * size * 3;
    let mut masked = batch.clone();
    let mut weights = vec![0.0; batch.numel()];
    for i in 0..n {
        let m = generate_masks(rng, size, cfg.count_range, side)?;
        for (p, on) in m.grid().into_iter().enumerate() {
            if on {
                let o = i * per + p * 3;
                masked.data_mut()[o..o + 3].copy_from_slice(&fill);
                weights[o..o + 3].fill(1.0);
            }
        }
    }
    Ok((masked, weights))
}
