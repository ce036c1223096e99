//! Round trips through every on-disk format: architecture JSON, the
//! checkpoint container, history CSV and CIFAR binary batches.
//!
//! cargo run --example persistence

use attnas::data::{encode_cifar, load_cifar_binary, synth_shapes};
use attnas::persist::{self, Checkpoint, HistoryRow};
use attnas::space::{MacroConfig, Supernet};
use attnas::Tensor;

fn main() -> attnas::Result<()> {
    let dir = std::env::temp_dir().join(format!("attnas-persistence-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| attnas::Error::io(&dir, e))?;

    let arch = Supernet::build(&MacroConfig::desk(), 0, false)?.discretize(0, "demo".into())?;
    persist::save_arch(&arch, dir.join("arch.json"))?;
    println!("arch.json round trip: {}", persist::load_arch(dir.join("arch.json"))? == arch);

    let mut ck = Checkpoint::default();
    ck.counters.push(("epoch".into(), 3));
    ck.texts.push(("note".into(), "hello".into()));
    ck.tensors.push(("w".into(), Tensor::new(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 1e300])?));
    persist::save_checkpoint(&ck, dir.join("state.ckpt"))?;
    let back = persist::load_checkpoint(dir.join("state.ckpt"))?;
    println!("checkpoint round trip: {} ({} bytes)", back == ck, ck.to_bytes().len());

    let rows = vec![
        HistoryRow { phase: "car_search".into(), epoch: 1, split: "train".into(), loss: 0.8, acc: None },
        HistoryRow { phase: "finetune".into(), epoch: 1, split: "val".into(), loss: 1.05, acc: Some(0.4) },
    ];
    persist::write_csv(&rows, dir.join("history.csv"))?;
    println!("history.csv round trip: {}", persist::read_csv::<HistoryRow>(dir.join("history.csv"))? == rows);

    let mut ds = synth_shapes(0, 8, 32, 10)?;
    ds.pixels.iter_mut().for_each(|p| *p = (*p * 255.0).round() / 255.0);
    std::fs::write(dir.join("batch.bin"), encode_cifar(&ds)?).map_err(|e| attnas::Error::io(&dir, e))?;
    let loaded = load_cifar_binary(dir.join("batch.bin"))?;
    println!("CIFAR batch round trip: {}", loaded.pixels == ds.pixels && loaded.labels == ds.labels);

    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
