//! Local and global self-attention on a tiny feature map, with the attention
//! weights they produce.
//!
//! cargo run --example attention_ops

use attnas::attention::{local_multihead_sa_with_weights, non_local_sa_with_weights, AttnVars};
use attnas::autodiff::Tape;
use attnas::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn main() -> attnas::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, window, heads) = (8, 3, 4);
    let tape = Tape::new();
    let x = tape.param(random(&mut rng, &[4, 4, c]));
    let p = AttnVars {
        query: tape.param(random(&mut rng, &[c, c])),
        key: tape.param(random(&mut rng, &[c, c])),
        value: tape.param(random(&mut rng, &[c, c])),
        rel: Some(tape.param(random(&mut rng, &[window * window, c / heads]))),
    };

    let (y, w) = local_multihead_sa_with_weights(x, &p, window, heads)?;
    let w = w.to_tensor();
    println!("local  k{window} h{heads}: {:?} -> {:?}, weights {:?}", x.shape(), y.shape(), w.shape());
    let first: Vec<String> = w.data()[..window * window].iter().map(|v| format!("{v:.3}")).collect();
    println!("  pixel (0,0) head 0 over its 3x3 window: [{}]", first.join(", "));

    let global = AttnVars { rel: None, ..p };
    let (y, a) = non_local_sa_with_weights(x, &global)?;
    let a = a.to_tensor();
    let n = a.shape()[1];
    let row_sums: Vec<f64> = (0..n).map(|i| a.data()[i * n..(i + 1) * n].iter().sum()).collect();
    println!("non-local: {:?} -> {:?}, attention {:?}", x.shape(), y.shape(), a.shape());
    println!(
        "  row sums within [{:.15}, {:.15}]",
        row_sums.iter().cloned().fold(f64::INFINITY, f64::min),
        row_sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );

    let grads = tape.backward(y.sum())?;
    println!("  |d sum(y) / dx|_1 = {:.4}", grads.get(x).expect("x is a parameter").data().iter().map(|v| v.abs()).sum::<f64>());
    Ok(())
}
