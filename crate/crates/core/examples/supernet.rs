//! The search space: macro table, mixed layers, size of the space and
//! discretization of random architecture parameters.
//!
//! cargo run --example supernet

use attnas::network::{Model, Network};
use attnas::space::{space_size, MacroConfig, Supernet};
use attnas::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> attnas::Result<()> {
    let full = MacroConfig::full_size();
    println!("full-scale macro config ({} searchable layers, {} architectures):", full.num_layers(), space_size(&full));
    for (row, shape) in full.shape_table() {
        println!("  {row:<10} {shape:?}");
    }

    let desk = MacroConfig::desk();
    let mut net = Supernet::build(&desk, 0, false)?;
    println!(
        "\ndesk supernet: {} layers, alpha {:?}, {} weights (analytic {})",
        desk.num_layers(),
        net.alpha().shape(),
        net.weight_count(),
        Supernet::analytic_weight_count(&desk)
    );
    for (name, shape) in net.trace_shapes(Tensor::zeros(&[1, 16, 16, 3]))? {
        println!("  {name:<14} {shape:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = net.alpha().shape().to_vec();
    net.set_alpha(&Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)))?;
    let arch = net.discretize(3, "example".into())?;
    let choices: Vec<String> = arch.choices.iter().map(|c| c.to_string()).collect();
    println!("\ndiscretized: {}", choices.join(" "));
    let standalone = Network::instantiate(&arch, Some(32), 0)?;
    println!(
        "standalone at 32 channels: {} weights (analytic {})",
        standalone.weight_count(),
        Network::analytic_weight_count(&arch, Some(32))?
    );
    Ok(())
}
