//! Train a fixed architecture from scratch and evaluate it, then check the
//! saved model reproduces the same report.
//!
//! cargo run --example train_eval -- [epochs]

use attnas::attention::CandidateOp;
use attnas::data::synth_shapes;
use attnas::persist::Checkpoint;
use attnas::scale::patterned_arch;
use attnas::space::MacroConfig;
use attnas::train::{train_with_callback, TrainConfig, TrainedModel};

fn main() -> attnas::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let arch = patterned_arch(&MacroConfig::desk(), &[CandidateOp::LocalSa { window: 3, heads: 4 }], 0)?;
    let train = synth_shapes(0, 300, 16, 3)?;
    let test = synth_shapes(1, 150, 16, 3)?;
    let cfg = TrainConfig {
        epochs,
        initial_channels: Some(16),
        ..TrainConfig::desk()
    };
    let out = train_with_callback(&arch, &cfg, &train, &test, |r| {
        println!("epoch {:>2}  train loss {:.4}  test top-1 {:.3}", r.epoch, r.train_loss, r.test_top1);
    })?;
    println!("{} weights, best epoch {} ({:.3})", out.params, out.best_epoch, out.best_top1_acc);

    let report = out.model.evaluate(&test, 64)?;
    let bytes = out.model.to_checkpoint()?.to_bytes();
    let restored = TrainedModel::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    let again = restored.evaluate(&test, 64)?;
    println!("checkpoint {} bytes, reload report identical: {}", bytes.len(), report == again);
    Ok(())
}
