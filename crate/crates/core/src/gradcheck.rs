//! Central finite-difference checks of every differentiable operation.
//!
//! Each case builds random inputs as parameters, reduces the operation's
//! output to a scalar through a fixed random projection, and compares the
//! tape gradient of every input element against `(f(x+h) - f(x-h)) / 2h`.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{local_multihead_sa, non_local_sa, AttentionBlock, AttnVars, CandidateOp};
use crate::autodiff::{Tape, Var};
use crate::data::stream_rng;
use crate::error::Result;
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::space::{mixed_forward, LayerSpec, MixedLayer};
use crate::tensor::{with_precision, Precision, Tensor};

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
/// Differences below this are roundoff of the difference quotient itself and
/// pass regardless of their relative size.
pub const ABS_TOL: f64 = 1e-8;
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CaseResult {
    /// Largest relative error among elements with a gradient of magnitude
    /// at least [`REL_FLOOR`].
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
    pub failures: usize,
}

impl CaseResult {
    fn merge(&mut self, o: &CaseResult) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.max_abs = self.max_abs.max(o.max_abs);
        self.checked += o.checked;
        self.failures += o.failures;
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for inputs of kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn project<'t>(out: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    let n = out.shape().iter().product();
    let rv = out.tape().constant(r.clone());
    Ok(out.reshape(&[1, n])?.matmul(rv)?.sum())
}

/// Compare tape and finite-difference gradients of `f` with respect to
/// `wrt` (every parameter of `store` when `None`).
pub fn check_store<F>(store: &mut ParamStore, wrt: Option<&[ParamId]>, rng: &mut ChaCha8Rng, f: F) -> Result<CaseResult>
where
    F: for<'t, 's> Fn(&Binder<'t, 's>) -> Result<Var<'t>>,
{
    let ids: Vec<ParamId> = match wrt {
        Some(ids) => ids.to_vec(),
        None => (0..store.len()).map(ParamId).collect(),
    };
    let (r, analytic) = {
        let tape = Tape::new();
        let b = Binder::selected(&tape, store, &ids);
        let out = f(&b)?;
        let n: usize = out.shape().iter().product();
        let r = uniform(rng, &[n, 1], -1.0, 1.0);
        let loss = project(out, &r)?;
        let grads = tape.backward(loss)?;
        (r, b.param_grads(&grads))
    };
    // The difference quotient divides rounding error by 2h, so the scalar is
    // accumulated with compensated summation.
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let b = Binder::new(&tape, store, None);
        let out = f(&b)?;
        let out = out.value();
        Ok(neumaier_dot(out.data(), r.data()))
    };
    let mut res = CaseResult::default();
    for &id in &ids {
        let numel = store.get(id).numel();
        let zeros = Tensor::zeros(store.get(id).shape());
        let a = analytic.get(id).unwrap_or(&zeros).data().to_vec();
        for (j, &aj) in a.iter().enumerate().take(numel) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let lp = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let lm = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * STEP);
            let abs = (aj - num).abs();
            let scale = aj.abs().max(num.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            res.checked += 1;
            res.max_abs = res.max_abs.max(abs);
            if scale >= REL_FLOOR {
                res.max_rel = res.max_rel.max(rel);
            }
            if abs > ABS_TOL && rel > REL_TOL {
                res.failures += 1;
            }
        }
    }
    Ok(res)
}

fn neumaier_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let perr = x.mul_add(*y, -p);
        let t = sum + p;
        comp += if sum.abs() >= p.abs() { (sum - t) + p } else { (p - t) + sum };
        comp += perr;
        sum = t;
    }
    sum + comp
}

fn inputs(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), uniform(rng, s, -1.0, 1.0), ParamGroup::Weight))
        .collect();
    (store, ids)
}

fn attn_store(rng: &mut ChaCha8Rng, x: &[usize], c: usize, rel: Option<[usize; 2]>) -> (ParamStore, Vec<ParamId>) {
    let mut shapes: Vec<Vec<usize>> = vec![x.to_vec(), vec![c, c], vec![c, c], vec![c, c]];
    shapes.extend(rel.map(|r| r.to_vec()));
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    inputs(rng, &refs)
}

fn attn_vars<'t>(b: &Binder<'t, '_>, ids: &[ParamId]) -> AttnVars<'t> {
    AttnVars {
        query: b.var(ids[1]),
        key: b.var(ids[2]),
        value: b.var(ids[3]),
        rel: ids.get(4).map(|&id| b.var(id)),
    }
}

/// Names of all cases in report order.
pub const CASES: &[&str] = &[
    "matmul",
    "bmm",
    "bmm_trans_b",
    "linear",
    "linear_no_bias",
    "add",
    "add_broadcast",
    "scale",
    "relu",
    "softmax",
    "reshape",
    "permute",
    "avgpool2d",
    "unfold",
    "upsample_nearest2x",
    "mean_spatial",
    "sum",
    "mean",
    "select_row",
    "weighted_sum",
    "l1_loss",
    "l1_loss_weighted",
    "cross_entropy",
    "cross_entropy_smoothed",
    "local_multihead_sa",
    "local_multihead_sa_k5_h8",
    "non_local_sa",
    "block_local_sa",
    "block_non_local_sa",
    "mixed_layer_alpha",
];

/// Run one named case for one seed.
pub fn run_case(name: &str, seed: u64) -> Result<CaseResult> {
    with_precision(Precision::F64, || run_case_f64(name, seed))
}

fn run_case_f64(name: &str, seed: u64) -> Result<CaseResult> {
    let rng = &mut stream_rng(seed, 11, CASES.iter().position(|&c| c == name).unwrap_or(usize::MAX) as u64);
    macro_rules! simple {
        ($shapes:expr, |$b:ident, $v:ident| $body:expr) => {{
            let (mut store, ids) = inputs(rng, $shapes);
            let mut check_rng = rng.clone();
            check_store(&mut store, None, &mut check_rng, |$b| {
                let $v: Vec<Var<'_>> = ids.iter().map(|&id| $b.var(id)).collect();
                $body
            })
        }};
    }
    match name {
        "matmul" => simple!(&[&[3, 4], &[4, 5]], |b, v| v[0].matmul(v[1])),
        "bmm" => simple!(&[&[2, 3, 4], &[2, 4, 5]], |b, v| v[0].bmm(v[1], false)),
        "bmm_trans_b" => simple!(&[&[2, 3, 4], &[2, 5, 4]], |b, v| v[0].bmm(v[1], true)),
        "linear" => simple!(&[&[2, 3, 4], &[4, 5], &[5]], |b, v| v[0].linear(v[1], Some(v[2]))),
        "linear_no_bias" => simple!(&[&[6, 4], &[4, 3]], |b, v| v[0].linear(v[1], None)),
        "add" => simple!(&[&[3, 4], &[3, 4]], |b, v| v[0].add(v[1])),
        "add_broadcast" => simple!(&[&[2, 3, 4], &[4]], |b, v| v[0].add(v[1])),
        "scale" => simple!(&[&[3, 4]], |b, v| Ok(v[0].scale(-1.7))),
        "relu" => {
            let mut store = ParamStore::new();
            store.add("in0", away_from_zero(rng, &[4, 5]), ParamGroup::Weight);
            check_store(&mut store, None, rng, |b| Ok(b.var(ParamId(0)).relu()))
        }
        "softmax" => simple!(&[&[2, 3, 4]], |b, v| {
            let x = v[0].scale(2.0);
            x.softmax(0)?.add(x.softmax(1)?)?.add(x.softmax(2)?)
        }),
        "reshape" => simple!(&[&[2, 6]], |b, v| v[0].reshape(&[3, 4])?.softmax(1)),
        "permute" => simple!(&[&[2, 3, 4]], |b, v| v[0].permute(&[2, 0, 1])?.softmax(2)),
        "avgpool2d" => simple!(&[&[2, 4, 6, 3]], |b, v| v[0].avgpool2d()),
        "unfold" => simple!(&[&[1, 4, 4, 2]], |b, v| v[0].unfold(3)?.add(v[0].unfold(3)?.scale(0.5))),
        "upsample_nearest2x" => simple!(&[&[2, 3, 3, 2]], |b, v| v[0].upsample_nearest2x()),
        "mean_spatial" => simple!(&[&[2, 3, 3, 4]], |b, v| v[0].mean_spatial()),
        "sum" => simple!(&[&[3, 4]], |b, v| Ok(v[0].sum())),
        "mean" => simple!(&[&[3, 4]], |b, v| Ok(v[0].mean())),
        "select_row" => simple!(&[&[3, 4]], |b, v| v[0].select_row(1)),
        "weighted_sum" => simple!(&[&[3], &[2, 3], &[2, 3], &[2, 3]], |b, v| Var::weighted_sum(v[0], &v[1..])),
        "l1_loss" | "l1_loss_weighted" => {
            let mut store = ParamStore::new();
            let target = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
            let gap = away_from_zero(rng, &[2, 3, 3, 3]);
            let pred = Tensor::new(
                target.shape(),
                target.data().iter().zip(gap.data()).map(|(t, g)| t + g).collect(),
            )?;
            store.add("pred", pred, ParamGroup::Weight);
            store.add("target", target, ParamGroup::Weight);
            let weights = (name == "l1_loss_weighted").then(|| (0..54).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>());
            check_store(&mut store, None, rng, |b| {
                b.var(ParamId(0)).l1_loss_weighted(b.var(ParamId(1)), weights.clone())
            })
        }
        "cross_entropy" | "cross_entropy_smoothed" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let smoothing = if name == "cross_entropy" { 0.0 } else { 0.1 };
            simple!(&[&[4, 5]], |b, v| v[0].scale(3.0).cross_entropy(&labels, smoothing))
        }
        "local_multihead_sa" => {
            let (mut store, ids) = attn_store(rng, &[2, 4, 4, 8], 8, Some([9, 2]));
            check_store(&mut store, None, rng, |b| {
                local_multihead_sa(b.var(ids[0]), &attn_vars(b, &ids), 3, 4)
            })
        }
        "local_multihead_sa_k5_h8" => {
            let (mut store, ids) = attn_store(rng, &[1, 3, 4, 8], 8, Some([25, 1]));
            check_store(&mut store, None, rng, |b| {
                local_multihead_sa(b.var(ids[0]), &attn_vars(b, &ids), 5, 8)
            })
        }
        "non_local_sa" => {
            let (mut store, ids) = attn_store(rng, &[2, 3, 3, 4], 4, None);
            check_store(&mut store, None, rng, |b| non_local_sa(b.var(ids[0]), &attn_vars(b, &ids)))
        }
        "block_local_sa" | "block_non_local_sa" => {
            let mut store = ParamStore::new();
            let (op, cin, cout, stride) = if name == "block_local_sa" {
                (CandidateOp::LocalSa { window: 3, heads: 4 }, 8, 16, 1)
            } else {
                (CandidateOp::NonLocalSa, 16, 16, 2)
            };
            let x = store.add("x", uniform(rng, &[2, 4, 4, cin], -1.0, 1.0), ParamGroup::Weight);
            let blk = AttentionBlock::new(&mut store, rng, "blk", op, cin, cout, stride)?;
            randomize_biases(&mut store, rng);
            check_store(&mut store, None, rng, |b| blk.forward(b, b.var(x)))
        }
        "mixed_layer_alpha" => {
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(rng, &[1, 4, 4, 8], -1.0, 1.0), ParamGroup::Weight);
            let alpha = store.add("alpha", uniform(rng, &[2, 7], -1.0, 1.0), ParamGroup::Arch);
            let spec = LayerSpec {
                stage: 0,
                index_in_stage: 0,
                cin: 8,
                cout: 8,
                stride: 1,
                input_size: 4,
            };
            let layer = MixedLayer::new(&mut store, rng, "mixed", spec, 1)?;
            check_store(&mut store, Some(&[x, alpha]), rng, |b| mixed_forward(b, b.var(x), &layer, b.var(alpha)))
        }
        other => Err(crate::Error::Config(format!("unknown gradient check `{other}`"))),
    }
}

/// Zero-initialized biases would leave some gradients structurally exact;
/// random ones exercise the general case.
fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for i in 0..store.len() {
        let id = ParamId(i);
        if store.entry(id).name.ends_with(".bias") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = uniform(rng, &shape, -0.5, 0.5);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub name: String,
    pub seeds: usize,
    pub result: CaseResult,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.result.failures == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<OpReport>,
    pub elapsed_s: f64,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(OpReport::passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>5} {:>8} {:>12} {:>12}  status", "op", "seeds", "checked", "max_rel", "max_abs")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<26} {:>5} {:>8} {:>12.3e} {:>12.3e}  {}",
                r.name,
                r.seeds,
                r.result.checked,
                r.result.max_rel,
                r.result.max_abs,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{:.1}s", self.elapsed_s)
    }
}

/// Every case over seeds `first_seed..first_seed + seeds`, in 64-bit mode.
pub fn run_gradcheck(first_seed: u64, seeds: usize) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for &name in CASES {
        let mut result = CaseResult::default();
        for s in 0..seeds as u64 {
            result.merge(&run_case(name, first_seed + s)?);
        }
        rows.push(OpReport {
            name: name.to_string(),
            seeds,
            result,
        });
    }
    Ok(GradcheckReport {
        rows,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = stream_rng(0, 0, 0);
        let mut store = ParamStore::new();
        let x = store.add("x", uniform(&mut rng, &[3], -1.0, 1.0), ParamGroup::Weight);
        // The tape sees x + const, but the function value is 2x.
        let res = check_store(&mut store, None, &mut rng, |b| {
            let v = b.var(x);
            v.add(b.tape().constant(v.to_tensor()))
        })
        .unwrap();
        assert_eq!(res.failures, 3);
        assert!(res.max_rel > 0.4);
    }

    #[test]
    fn unknown_case_is_rejected() {
        assert!(run_case("nope", 0).is_err());
    }
}
