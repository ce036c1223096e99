//! Reconstruction search, classification fine-tuning and discretization on
//! a small synthetic corpus.
//!
//! cargo run --example search_pipeline -- [images] [car epochs] [finetune epochs]

use attnas::data::synth_shapes;
use attnas::search::{run_full_pipeline, SearchConfig};
use attnas::space::MacroConfig;

fn arg(i: usize, default: u64) -> u64 {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> attnas::Result<()> {
    let n = arg(1, 160) as usize;
    let mut car = SearchConfig::desk_car();
    car.epochs = arg(2, 2);
    let mut ft = SearchConfig::desk_finetune();
    ft.epochs = arg(3, 3);
    let macro_cfg = MacroConfig::desk().scaled(8)?;
    let ds = synth_shapes(0, n, 16, 3)?;

    let out = run_full_pipeline(&car, &ft, &macro_cfg, &ds, &ds, false)?;
    println!("{:<11} {:>5} {:<5} {:>8} {:>6}", "phase", "epoch", "split", "loss", "acc");
    for r in &out.history {
        let acc = r.acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        println!("{:<11} {:>5} {:<5} {:>8.4} {:>6}", r.phase, r.epoch, r.split, r.loss, acc);
    }
    let choices: Vec<String> = out.architecture.choices.iter().map(|c| c.to_string()).collect();
    println!("architecture: {}", choices.join(" "));
    println!("{}", attnas::persist::arch_to_json(&out.architecture)?);
    Ok(())
}
