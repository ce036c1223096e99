//! Shared reference implementations for the integration tests.
#![allow(dead_code)]

use attnas::attention::AttnVars;
use attnas::autodiff::Tape;
use attnas::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn attn_params<'t>(tape: &'t Tape, r: &mut ChaCha8Rng, c: usize, rel: Option<(usize, usize)>, zero_rel: bool) -> AttnVars<'t> {
    AttnVars {
        query: tape.param(random(r, &[c, c])),
        key: tape.param(random(r, &[c, c])),
        value: tape.param(random(r, &[c, c])),
        rel: rel.map(|(k2, d)| {
            let v = if zero_rel { Tensor::zeros(&[k2, d]) } else { random(r, &[k2, d]) };
            tape.param(v)
        }),
    }
}

fn project(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    let s = x.shape();
    let c = s[2];
    let cout = w.shape()[1];
    (0..s[0] * s[1])
        .map(|p| {
            (0..cout)
                .map(|o| (0..c).map(|i| x.data()[p * c + i] * w.data()[i * cout + o]).sum())
                .collect()
        })
        .collect()
}

/// Windowed attention, one pixel and head at a time.
pub fn local_oracle(x: &Tensor, p: &AttnVars<'_>, k: usize, heads: usize) -> Tensor {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let q = project(x, &p.query.to_tensor());
    let kk = project(x, &p.key.to_tensor());
    let v = project(x, &p.value.to_tensor());
    let rel = p.rel.map(|r| r.to_tensor());
    let r = (k / 2) as i64;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h as i64 {
        for xx in 0..w as i64 {
            let pi = (y * w as i64 + xx) as usize;
            for head in 0..heads {
                let ch = head * d..(head + 1) * d;
                let mut logits = Vec::new();
                let mut vals = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let slot = ((dy + r) * k as i64 + dx + r) as usize;
                        let (ny, nx) = (y + dy, xx + dx);
                        let inside = ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64;
                        let ni = (ny * w as i64 + nx) as usize;
                        let mut logit = 0.0;
                        for (j, cc) in ch.clone().enumerate() {
                            let key = if inside { kk[ni][cc] } else { 0.0 };
                            logit += q[pi][cc] * key / (d as f64).sqrt();
                            if let Some(rt) = &rel {
                                logit += q[pi][cc] * rt.data()[slot * d + j];
                            }
                        }
                        logits.push(logit);
                        vals.push(ch.clone().map(|cc| if inside { v[ni][cc] } else { 0.0 }).collect::<Vec<_>>());
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (l, val) in logits.iter().zip(&vals) {
                    let wgt = (l - m).exp() / z;
                    for (j, cc) in ch.clone().enumerate() {
                        out[pi * c + cc] += wgt * val[j];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, c], out).unwrap()
}

/// Global attention as a double loop over token pairs.
pub fn non_local_oracle(x: &Tensor, p: &AttnVars<'_>) -> Tensor {
    let s = x.shape();
    let (n, c) = (s[0] * s[1], s[2]);
    let q = project(x, &p.query.to_tensor());
    let k = project(x, &p.key.to_tensor());
    let v = project(x, &p.value.to_tensor());
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..c).map(|cc| q[i][cc] * k[j][cc]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            let w = (logits[j] - m).exp() / z;
            for cc in 0..c {
                out[i * c + cc] += w * v[j][cc];
            }
        }
    }
    Tensor::new(s, out).unwrap()
}
