//! Candidate self-attention operations and the bottleneck block that wraps them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{local_attention, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{fan_in_uniform, Binder, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// One of the seven searchable attention operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateOp {
    /// Multi-head attention over a `window × window` neighborhood.
    LocalSa { window: usize, heads: usize },
    /// Attention across all spatial positions.
    NonLocalSa,
}

/// The candidate set in column order of the architecture parameters.
pub const CANDIDATES: [CandidateOp; 7] = [
    CandidateOp::LocalSa { window: 3, heads: 4 },
    CandidateOp::LocalSa { window: 3, heads: 8 },
    CandidateOp::LocalSa { window: 5, heads: 4 },
    CandidateOp::LocalSa { window: 5, heads: 8 },
    CandidateOp::LocalSa { window: 7, heads: 4 },
    CandidateOp::LocalSa { window: 7, heads: 8 },
    CandidateOp::NonLocalSa,
];

pub const NUM_CANDIDATES: usize = CANDIDATES.len();

impl CandidateOp {
    pub fn index(self) -> usize {
        CANDIDATES.iter().position(|&c| c == self).expect("not a candidate")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        CANDIDATES.get(i).copied()
    }

    pub fn name(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CandidateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateOp::LocalSa { window, heads } => write!(f, "LocalSA_k{window}_h{heads}"),
            CandidateOp::NonLocalSa => f.write_str("NonLocalSA"),
        }
    }
}

impl FromStr for CandidateOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CANDIDATES
            .iter()
            .copied()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown candidate operation `{s}`")))
    }
}

impl Serialize for CandidateOp {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CandidateOp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Channel width inside a bottleneck: a quarter of the output, at least 8.
pub fn bottleneck_width(cout: usize) -> usize {
    (cout / 4).max(8)
}

/// Projection variables of one attention operation.
#[derive(Clone, Copy)]
pub struct AttnVars<'t> {
    pub query: Var<'t>,
    pub key: Var<'t>,
    pub value: Var<'t>,
    /// `[window², C/heads]` relative-position table (local attention only).
    pub rel: Option<Var<'t>>,
}

fn as_batched<'t>(x: Var<'t>) -> Result<(Var<'t>, bool)> {
    match x.shape().len() {
        3 => {
            let s = x.shape();
            Ok((x.reshape(&[1, s[0], s[1], s[2]])?, true))
        }
        4 => Ok((x, false)),
        _ => Err(shape_err(format!(
            "attention input must be [H, W, C] or [B, H, W, C], got {:?}",
            x.shape()
        ))),
    }
}

fn unbatch<'t>(y: Var<'t>, squeeze: bool) -> Result<Var<'t>> {
    if squeeze {
        let s = y.shape();
        y.reshape(&s[1..])
    } else {
        Ok(y)
    }
}

/// Local multi-head self-attention.
///
/// Per pixel and head: the query attends over the zero-padded `window²`
/// neighborhood with logits `q·k / sqrt(d) + q·r[offset]`, and the output is
/// the softmax-weighted sum of neighborhood values. Heads own contiguous
/// channel groups of width `d = C / heads`.
pub fn local_multihead_sa<'t>(
    x: Var<'t>,
    p: &AttnVars<'t>,
    window: usize,
    heads: usize,
) -> Result<Var<'t>> {
    local_sa(x, p, window, heads, false).map(|(y, _)| y)
}

/// [`local_multihead_sa`] also returning the `[B·H·W·heads, 1, window²]`
/// attention weights.
pub fn local_multihead_sa_with_weights<'t>(
    x: Var<'t>,
    p: &AttnVars<'t>,
    window: usize,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let (y, attn) = local_sa(x, p, window, heads, true)?;
    Ok((y, x.tape().constant(attn.expect("weights requested"))))
}

fn local_sa<'t>(
    x: Var<'t>,
    p: &AttnVars<'t>,
    window: usize,
    heads: usize,
    keep_weights: bool,
) -> Result<(Var<'t>, Option<Tensor>)> {
    let (x, squeeze) = as_batched(x)?;
    let s = x.shape();
    let c = s[3];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{c} channels are not divisible into {heads} heads"
        )));
    }
    if window % 2 == 0 {
        return Err(Error::Config(format!("window {window} must be odd")));
    }
    let q = x.linear(p.query, None)?;
    let k = x.linear(p.key, None)?;
    let v = x.linear(p.value, None)?;
    let (out, attn) = local_attention(q, k, v, p.rel, window, heads, keep_weights)?;
    Ok((unbatch(out, squeeze)?, attn))
}

/// Global self-attention over all `H·W` positions with `1/sqrt(C)` scaling.
pub fn non_local_sa<'t>(x: Var<'t>, p: &AttnVars<'t>) -> Result<Var<'t>> {
    non_local_sa_with_weights(x, p).map(|(y, _)| y)
}

/// [`non_local_sa`] also returning the `[B, N, N]` attention matrix.
pub fn non_local_sa_with_weights<'t>(x: Var<'t>, p: &AttnVars<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (x, squeeze) = as_batched(x)?;
    let s = x.shape();
    let (b, n, c) = (s[0], s[1] * s[2], s[3]);
    let tokens = |proj: Var<'t>| x.linear(proj, None)?.reshape(&[b, n, c]);
    let q = tokens(p.query)?;
    let k = tokens(p.key)?;
    let v = tokens(p.value)?;
    let attn = q.bmm(k, true)?.scale(1.0 / (c as f64).sqrt()).softmax(2)?;
    let out = attn.bmm(v, false)?.reshape(&s)?;
    Ok((unbatch(out, squeeze)?, attn))
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cin, cout], cin),
            ParamGroup::Weight,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Weight);
        LinearParams { weight, bias }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(b.var(self.weight), Some(b.var(self.bias)))
    }
}

/// Bottleneck block: reduce → ReLU → attention → ReLU → expand, plus a
/// shortcut. Stride 2 average-pools both the branch and the shortcut.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub op: CandidateOp,
    pub cin: usize,
    pub cmid: usize,
    pub cout: usize,
    pub stride: usize,
    pub reduce: LinearParams,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub rel: Option<ParamId>,
    pub expand: LinearParams,
    /// Present only when `cin != cout`.
    pub shortcut: Option<LinearParams>,
}

impl AttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        op: CandidateOp,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("{name}: stride {stride} not in {{1, 2}}")));
        }
        let cmid = bottleneck_width(cout);
        if let CandidateOp::LocalSa { heads, window } = op {
            if cmid % heads != 0 {
                return Err(Error::Config(format!(
                    "{name}: bottleneck width {cmid} not divisible by {heads} heads for {op}"
                )));
            }
            if window % 2 == 0 {
                return Err(Error::Config(format!("{name}: window {window} must be odd")));
            }
        }
        let reduce = LinearParams::new(store, rng, &format!("{name}.reduce"), cin, cmid);
        let mut proj = |store: &mut ParamStore, which: &str| {
            store.add(
                format!("{name}.attn.{which}"),
                fan_in_uniform(rng, &[cmid, cmid], cmid),
                ParamGroup::Weight,
            )
        };
        let query = proj(store, "query");
        let key = proj(store, "key");
        let value = proj(store, "value");
        let rel = match op {
            CandidateOp::LocalSa { window, heads } => {
                let d = cmid / heads;
                Some(store.add(
                    format!("{name}.attn.rel"),
                    fan_in_uniform(rng, &[window * window, d], d),
                    ParamGroup::Weight,
                ))
            }
            CandidateOp::NonLocalSa => None,
        };
        let expand = LinearParams::new(store, rng, &format!("{name}.expand"), cmid, cout);
        let shortcut =
            (cin != cout).then(|| LinearParams::new(store, rng, &format!("{name}.shortcut"), cin, cout));
        Ok(AttentionBlock {
            op,
            cin,
            cmid,
            cout,
            stride,
            reduce,
            query,
            key,
            value,
            rel,
            expand,
            shortcut,
        })
    }

    /// Closed-form trainable-scalar count of a block.
    pub fn param_count(op: CandidateOp, cin: usize, cout: usize) -> usize {
        let cmid = bottleneck_width(cout);
        let mut n = cin * cmid + cmid + 3 * cmid * cmid + cmid * cout + cout;
        if let CandidateOp::LocalSa { window, heads } = op {
            n += window * window * (cmid / heads);
        }
        if cin != cout {
            n += cin * cout + cout;
        }
        n
    }

    /// Parameter ids owned by this block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.reduce.weight, self.reduce.bias, self.query, self.key, self.value];
        ids.extend(self.rel);
        ids.extend([self.expand.weight, self.expand.bias]);
        if let Some(s) = self.shortcut {
            ids.extend([s.weight, s.bias]);
        }
        ids
    }

    pub fn attn_vars<'t>(&self, b: &Binder<'t, '_>) -> AttnVars<'t> {
        AttnVars {
            query: b.var(self.query),
            key: b.var(self.key),
            value: b.var(self.value),
            rel: self.rel.map(|r| b.var(r)),
        }
    }

    /// Block output for `[B, H, W, Cin]` (or unbatched `[H, W, Cin]`) input.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() < 3 || s[s.len() - 1] != self.cin {
            return Err(shape_err(format!(
                "block expects [.., H, W, {}], got {s:?}",
                self.cin
            )));
        }
        let r = s.len();
        if self.stride == 2 && (s[r - 3] % 2 != 0 || s[r - 2] % 2 != 0) {
            return Err(shape_err(format!("stride 2 needs even spatial extents, got {s:?}")));
        }
        let h = self.reduce.forward(b, x)?.relu();
        let p = self.attn_vars(b);
        let a = match self.op {
            CandidateOp::LocalSa { window, heads } => local_multihead_sa(h, &p, window, heads)?,
            CandidateOp::NonLocalSa => non_local_sa(h, &p)?,
        }
        .relu();
        let mut y = self.expand.forward(b, a)?;
        let mut shortcut = x;
        if self.stride == 2 {
            y = y.avgpool2d()?;
            shortcut = shortcut.avgpool2d()?;
        }
        if let Some(proj) = &self.shortcut {
            shortcut = proj.forward(b, shortcut)?;
        }
        y.add(shortcut)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn candidate_names_round_trip() {
        let names: Vec<String> = CANDIDATES.iter().map(|c| c.to_string()).collect();
        assert_eq!(
            names,
            [
                "LocalSA_k3_h4",
                "LocalSA_k3_h8",
                "LocalSA_k5_h4",
                "LocalSA_k5_h8",
                "LocalSA_k7_h4",
                "LocalSA_k7_h8",
                "NonLocalSA"
            ]
        );
        for c in CANDIDATES {
            assert_eq!(c.name().parse::<CandidateOp>().unwrap(), c);
        }
        let err = "LocalSA_k9_h4".parse::<CandidateOp>().unwrap_err();
        assert!(err.to_string().contains("LocalSA_k9_h4"));
    }

    #[test]
    fn head_divisibility_is_checked() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2, 6]));
        let w = tape.constant(Tensor::eye(6));
        let p = AttnVars { query: w, key: w, value: w, rel: None };
        assert!(matches!(local_multihead_sa(x, &p, 3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[8, 8, 16], |_| rng.gen_range(-1.0..1.0)));
        let w = tape.constant(fan_in_uniform(&mut rng, &[16, 16], 16));
        let rel = tape.constant(Tensor::zeros(&[49, 2]));
        let p = AttnVars { query: w, key: w, value: w, rel: Some(rel) };
        assert_eq!(local_multihead_sa(x, &p, 7, 8).unwrap().shape(), vec![8, 8, 16]);
        let p = AttnVars { rel: None, ..p };
        assert_eq!(non_local_sa(x, &p).unwrap().shape(), vec![8, 8, 16]);
    }

    #[test]
    fn single_token_non_local_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4], |_| rng.gen_range(-1.0..1.0)));
        let wq = tape.constant(fan_in_uniform(&mut rng, &[4, 4], 4));
        let wk = tape.constant(fan_in_uniform(&mut rng, &[4, 4], 4));
        let wv = tape.constant(fan_in_uniform(&mut rng, &[4, 4], 4));
        let p = AttnVars { query: wq, key: wk, value: wv, rel: None };
        let y = non_local_sa(x, &p).unwrap().to_tensor();
        let v = x.linear(wv, None).unwrap().to_tensor();
        assert!(y.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn single_pixel_local_attention_weighs_center_against_padding() {
        // Padded slots carry zero keys and values, so only the center value
        // contributes, scaled by its softmax weight among all window² logits.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 8], |_| rng.gen_range(-1.0..1.0)));
        let wq = tape.constant(fan_in_uniform(&mut rng, &[8, 8], 8));
        let wk = tape.constant(fan_in_uniform(&mut rng, &[8, 8], 8));
        let wv = tape.constant(fan_in_uniform(&mut rng, &[8, 8], 8));
        let p = AttnVars { query: wq, key: wk, value: wv, rel: None };
        let y = local_multihead_sa(x, &p, 3, 4).unwrap().to_tensor();
        let q = x.linear(wq, None).unwrap().to_tensor();
        let k = x.linear(wk, None).unwrap().to_tensor();
        let v = x.linear(wv, None).unwrap().to_tensor();
        for head in 0..4 {
            let dot: f64 = (0..2).map(|i| q.data()[head * 2 + i] * k.data()[head * 2 + i]).sum();
            let e = (dot / 2f64.sqrt()).exp();
            let wc = e / (e + 8.0);
            for i in 0..2 {
                let c = head * 2 + i;
                assert!((y.data()[c] - wc * v.data()[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_expand_identity_shortcut_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, &mut rng, "b", CANDIDATES[0], 16, 16, 1).unwrap();
        *store.get_mut(blk.expand.weight) = Tensor::zeros(&[8, 16]);
        let tape = Tape::new();
        let b = Binder::all(&tape, &store);
        let xt = Tensor::from_fn(&[4, 4, 16], |_| rng.gen_range(-1.0..1.0));
        let y = blk.forward(&b, tape.constant(xt.clone())).unwrap();
        assert_eq!(y.to_tensor(), xt);
    }

    #[test]
    fn stride_two_halves_and_rejects_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let blk =
            AttentionBlock::new(&mut store, &mut rng, "b", CandidateOp::NonLocalSa, 16, 32, 2).unwrap();
        let tape = Tape::new();
        let b = Binder::all(&tape, &store);
        let y = blk.forward(&b, tape.constant(Tensor::zeros(&[8, 8, 16]))).unwrap();
        assert_eq!(y.shape(), vec![4, 4, 32]);
        let err = blk.forward(&b, tape.constant(Tensor::zeros(&[5, 4, 16])));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn analytic_count_matches_instantiated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for op in CANDIDATES {
            for (cin, cout) in [(3, 16), (16, 16), (16, 32), (64, 64)] {
                let mut store = ParamStore::new();
                AttentionBlock::new(&mut store, &mut rng, "b", op, cin, cout, 1).unwrap();
                assert_eq!(store.numel(ParamGroup::Weight), AttentionBlock::param_count(op, cin, cout));
            }
        }
    }
}
