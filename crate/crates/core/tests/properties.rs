//! Randomized invariants.

use attnas::autodiff::Tape;
use attnas::car::{apply_masks, generate_masks, MAX_COVERAGE};
use attnas::data::{encode_cifar, load_cifar_binary, split, split_indices, synth_shapes, SplitSpec};
use attnas::optim::LrSchedule;
use attnas::persist::{self, Checkpoint, HistoryRow, MetricsRow};
use attnas::search::SearchData;
use attnas::space::{discretize, MacroConfig, Supernet};
use attnas::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(max_rank: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..=max_rank).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let tape = Tape::new();
        let n = v.len();
        let s = tape.constant(Tensor::new(&[n], v).unwrap()).softmax(0).unwrap().to_tensor();
        prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        prop_assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discretize_ignores_row_shifts(
        alpha in prop::collection::vec(-5.0f64..5.0, 4 * 7),
        shifts in prop::collection::vec(-100.0f64..100.0, 4),
    ) {
        let a = Tensor::new(&[4, 7], alpha.clone()).unwrap();
        let shifted = Tensor::from_fn(&[4, 7], |i| alpha[i] + shifts[i / 7]);
        let rows = [0, 1, 2, 3];
        prop_assert_eq!(discretize(&a, &rows), discretize(&shifted, &rows));
    }

    #[test]
    fn masks_stay_under_a_quarter(seed in any::<u64>(), size in 8usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = generate_masks(&mut rng, size, (2, 5), ((size / 8).max(1), (size / 3).max(1))).unwrap();
        prop_assert!(m.coverage() <= MAX_COVERAGE);
    }

    #[test]
    fn masked_pixels_take_the_fill(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[16, 16, 3], |i| (i % 7) as f64 / 7.0);
        let m = generate_masks(&mut rng, 16, (2, 5), (2, 5)).unwrap();
        let fill = [9.0, -9.0, 0.5];
        let out = apply_masks(&img, &m, fill).unwrap();
        for (p, on) in m.grid().into_iter().enumerate() {
            for c in 0..3 {
                let want = if on { fill[c] } else { img.data()[p * 3 + c] };
                prop_assert_eq!(out.data()[p * 3 + c], want);
            }
        }
    }

    #[test]
    fn l1_is_zero_iff_equal(a in tensor(3), bump in 0usize..1000, delta in 1e-3f64..1.0) {
        let tape = Tape::new();
        let va = tape.constant(a.clone());
        prop_assert_eq!(va.l1_loss(tape.constant(a.clone())).unwrap().item(), 0.0);
        let mut b = a.clone();
        let i = bump % b.numel();
        b.data_mut()[i] += delta;
        prop_assert!(va.l1_loss(tape.constant(b)).unwrap().item() > 0.0);
    }

    #[test]
    fn checkpoints_round_trip_bitwise(ts in prop::collection::vec(tensor(3), 0..4), step in any::<u64>()) {
        let mut ck = Checkpoint::default();
        ck.counters.push(("step".into(), step));
        ck.texts.push(("note".into(), "é∑".into()));
        for (i, t) in ts.into_iter().enumerate() {
            ck.tensors.push((format!("t{i}"), t));
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(t in tensor(2), cut in 1usize..64) {
        let mut ck = Checkpoint::default();
        ck.tensors.push(("t".into(), t));
        let bytes = ck.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn split_is_a_partition(n in 0usize..300, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let (a, b) = split_indices(n, &SplitSpec { ratio, seed });
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn cosine_lr_is_monotone_and_bounded(base in 1e-4f64..1.0, total in 1u64..500) {
        let s = LrSchedule::Cosine { base_lr: base, total_steps: total };
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = s.lr_at(step);
            prop_assert!((0.0..=base).contains(&lr));
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn history_and_metrics_csv_round_trip(
        losses in prop::collection::vec(-1e3f64..1e3, 1..6),
        acc in prop::option::of(0.0f64..=1.0),
    ) {
        let hist: Vec<HistoryRow> = losses.iter().enumerate().map(|(i, &loss)| HistoryRow {
            phase: "finetune".into(), epoch: i as u64, split: "val".into(), loss, acc,
        }).collect();
        prop_assert_eq!(persist::parse_csv::<HistoryRow>(&persist::csv_string(&hist).unwrap()).unwrap(), hist);
        let metrics: Vec<MetricsRow> = losses.iter().enumerate().map(|(i, &l)| MetricsRow {
            epoch: i as u64, train_loss: l, test_top1: acc.unwrap_or(0.5), test_top5: acc,
        }).collect();
        prop_assert_eq!(persist::parse_csv::<MetricsRow>(&persist::csv_string(&metrics).unwrap()).unwrap(), metrics);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn arch_json_round_trips(seed in any::<u64>(), stages in 1usize..4) {
        let cfg = MacroConfig::desk().with_stage_count(stages);
        let mut net = Supernet::build(&cfg, 0, false).unwrap();
        let shape = net.alpha().shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.set_alpha(&Tensor::from_fn(&shape, |_| rand::Rng::gen_range(&mut rng, -1.0..1.0))).unwrap();
        let arch = net.discretize(seed, "p".into()).unwrap();
        let json = persist::arch_to_json(&arch).unwrap();
        let back = persist::arch_from_json(&json).unwrap();
        prop_assert_eq!(persist::arch_to_json(&back).unwrap(), json);
        prop_assert_eq!(back, arch);
    }

    #[test]
    fn cifar_bytes_round_trip(seed in any::<u64>(), n in 1usize..6) {
        let mut ds = synth_shapes(seed, n, 32, 10).unwrap();
        ds.pixels.iter_mut().for_each(|p| *p = (*p * 255.0).round() / 255.0);
        let bytes = encode_cifar(&ds).unwrap();
        prop_assert_eq!(bytes.len(), n * attnas::data::CIFAR_RECORD);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &bytes).unwrap();
        let back = load_cifar_binary(&path).unwrap();
        prop_assert_eq!(&back.pixels, &ds.pixels);
        prop_assert_eq!(&back.labels, &ds.labels);
    }

    #[test]
    fn normalization_ignores_the_split_seed(a in any::<u64>(), b in any::<u64>()) {
        let ds = synth_shapes(3, 40, 16, 3).unwrap();
        let x = SearchData::split(&ds, 0.5, a);
        let y = SearchData::split(&ds, 0.5, b);
        prop_assert_eq!(x.norm, y.norm);
        prop_assert_eq!(x.norm, ds.channel_stats());
        let (p, q) = split(&ds, &SplitSpec { ratio: 0.5, seed: a });
        prop_assert_eq!(p.len() + q.len(), ds.len());
    }

    #[test]
    fn synth_is_balanced(seed in any::<u64>(), n in 1usize..80, classes in 2usize..10) {
        let ds = synth_shapes(seed, n, 16, classes).unwrap();
        let h = ds.class_histogram();
        prop_assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        prop_assert_eq!(ds.pixels, synth_shapes(seed, n, 16, classes).unwrap().pixels);
    }
}
