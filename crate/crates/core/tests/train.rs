use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simclr_s2_core::autodiff::{OptimizerConfig, Tensor};
use simclr_s2_core::contrastive::{pretrain, ContrastiveConfig};
use simclr_s2_core::eval::{confusion_metrics, Prediction};
use simclr_s2_core::model::*;
use simclr_s2_core::raster::*;
use simclr_s2_core::train::*;

fn manifest(irrigated: usize, not: usize, unlabeled: usize, seed: u64) -> DatasetManifest {
    let mut entries: Vec<ManifestEntry> = (0..irrigated + not)
        .map(|i| {
            ManifestEntry::labeled(format!("l{i}"), if i < irrigated { Label::Irrigated } else { Label::NotIrrigated })
        })
        .chain((0..unlabeled).map(|i| ManifestEntry::unlabeled(format!("u{i}"))))
        .collect();
    // Interleave so indices do not encode the class.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..entries.len()).rev() {
        entries.swap(i, rng.gen_range(0..=i));
    }
    DatasetManifest::new(entries).unwrap()
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.binary_search(x).is_ok())
}

#[test]
fn split_ladder_on_full_pool() {
    let m = manifest(9512, 9512, 3, 0);
    let mut previous: Option<SplitPlan> = None;
    for f in SPLIT_FRACTIONS {
        let plan = make_splits(&m, f, 42).unwrap();
        assert_eq!(plan.train_counts.irrigated, plan.train_counts.not_irrigated);
        assert_eq!(plan.holdout.len(), 570);
        if let Some(p) = &previous {
            assert!(is_subset(&p.train, &plan.train));
            assert_eq!(p.holdout, plan.holdout);
        }
        previous = Some(plan);
    }
    assert_eq!(make_splits(&m, 0.01, 42).unwrap().size(), 190);
    assert_eq!(make_splits(&m, 0.03, 42).unwrap().size(), 570);
    assert_eq!(make_splits(&m, 0.10, 42).unwrap().size(), 1902);
    assert_eq!(make_splits(&m, 0.25, 42).unwrap().size(), 4756);
    assert_eq!(make_splits(&m, 0.50, 42).unwrap().size(), 9512);
}

#[test]
fn split_errors_and_manifests() {
    let m = manifest(1, 10, 0, 0);
    assert!(matches!(
        make_splits(&m, 0.5, 0),
        Err(TrainError::InsufficientClassRecords { label: Label::Irrigated, count: 1 })
    ));
    let m = manifest(10, 10, 2, 0);
    assert!(matches!(make_splits(&m, 0.0, 0), Err(TrainError::InvalidFraction(_))));
    assert!(matches!(make_splits(&m, 1.5, 0), Err(TrainError::InvalidFraction(_))));
    assert!(matches!(make_splits(&m, 0.01, 0), Err(TrainError::EmptySplit)));
    let plan = make_splits(&m, 0.5, 3).unwrap();
    let text = plan.split_manifest(&m).to_text();
    let back = DatasetManifest::parse(&text).unwrap();
    assert_eq!(back.with_split(Split::Train).len(), plan.size());
    assert_eq!(back.with_split(Split::Holdout).len(), plan.holdout.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_balanced_disjoint_nested_and_deterministic(
        irrigated in 2usize..300, not in 2usize..300, unlabeled in 0usize..20, order in 0u64..1000,
        f1 in 0.01f64..=1.0, f2 in 0.01f64..=1.0, hf in 0.0f64..0.3, seed in any::<u64>(),
    ) {
        let m = manifest(irrigated, not, unlabeled, order);
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let a = make_splits_with_holdout(&m, lo, hf, seed);
        let b = make_splits_with_holdout(&m, hi, hf, seed);
        if let (Ok(a), Ok(b)) = (a, b) {
            for plan in [&a, &b] {
                prop_assert_eq!(plan.train_counts.irrigated, plan.train_counts.not_irrigated);
                prop_assert_eq!(plan.holdout_counts.irrigated, plan.holdout_counts.not_irrigated);
                prop_assert!(plan.train.iter().all(|i| plan.holdout.binary_search(i).is_err()));
                prop_assert!(plan.size() <= (hi * (irrigated + not) as f64) as usize);
                prop_assert_eq!(plan.size() % 2, 0);
                let count = |idx: &[usize], l: Label| idx.iter().filter(|&&i| m.entries[i].label == Some(l)).count();
                prop_assert_eq!(count(&plan.train, Label::Irrigated), plan.train_counts.irrigated);
                prop_assert_eq!(count(&plan.holdout, Label::NotIrrigated), plan.holdout_counts.not_irrigated);
                prop_assert!(plan.train.iter().all(|&i| m.entries[i].label.is_some()));
            }
            prop_assert!(is_subset(&a.train, &b.train));
            prop_assert_eq!(&a.holdout, &b.holdout);
            prop_assert_eq!(make_splits_with_holdout(&m, lo, hf, seed).unwrap(), a);
        }
    }
}

fn shape(size: usize) -> InputShape {
    InputShape { height: size, width: size, bands: 10 }
}

fn labeled_set(seed: u64, n: usize, size: usize, signal: f64) -> (DatasetManifest, Vec<MultispectralChip>) {
    let samples: Vec<SynthSample> = synthesize(&SynthParams::new(seed, 1, n, size, signal))
        .unwrap()
        .into_iter()
        .filter(|s| s.entry.label.is_some())
        .collect();
    let chips = samples.iter().map(|s| s.chip.clone()).collect();
    (DatasetManifest::new(samples.into_iter().map(|s| s.entry).collect()).unwrap(), chips)
}

fn take(m: &DatasetManifest, chips: &[MultispectralChip], idx: &[usize]) -> Vec<LabeledChip> {
    idx.iter().map(|&i| LabeledChip { chip: chips[i].clone(), label: m.entries[i].label.unwrap() }).collect()
}

fn f1_on(net: &Network, set: &[LabeledChip]) -> f64 {
    let chips: Vec<&MultispectralChip> = set.iter().map(|s| &s.chip).collect();
    let probs = irrigated_probabilities(net, &chips).unwrap();
    let preds: Vec<Prediction> =
        probs.iter().enumerate().map(|(i, &p)| Prediction::new(i.to_string(), p).unwrap()).collect();
    let labels: Vec<Label> = set.iter().map(|s| s.label).collect();
    confusion_metrics(&preds, &labels).unwrap().f1
}

fn quick(epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size, optimizer: OptimizerConfig::Adam { lr: 5e-3 }, seed }
}

#[test]
fn memorizes_a_single_sample() {
    let (m, chips) = labeled_set(1, 2, 8, 0.5);
    let one = take(&m, &chips, &[0]);
    let stats = band_stats_of_chips(&chips).unwrap();
    let encoder = EncoderConfig::zoo("micro", shape(8)).unwrap();
    let out = train_supervised(&one, &stats, &encoder, &Init::Scratch, &quick(60, 1, 3), &mut |_| {}).unwrap();
    assert!(out.log.last().unwrap().loss < 0.01, "{:?}", out.log.last());
    let again = train_supervised(&one, &stats, &encoder, &Init::Scratch, &quick(60, 1, 3), &mut |_| {}).unwrap();
    assert_eq!(out.checkpoint.digest(), again.checkpoint.digest());
    assert_eq!(out.checkpoint.provenance().lineage, vec![Stage::Supervised]);
    assert!(train_log_csv(&out.log).starts_with("epoch,loss,lr\n1,"));
    assert!(matches!(
        train_supervised(&[], &stats, &encoder, &Init::Scratch, &quick(1, 1, 3), &mut |_| {}),
        Err(TrainError::EmptySplit)
    ));
}

/// Logistic regression on per-band chip means, fitted by gradient descent.
fn linear_probe_f1(train: &[LabeledChip], holdout: &[LabeledChip]) -> f64 {
    let features = |c: &MultispectralChip| -> Vec<f64> { (0..c.bands().len()).map(|b| c.plane_mean(b)).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|s| features(&s.chip)).collect();
    let dim = xs[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / xs.len() as f64).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / xs.len() as f64).sqrt().max(1e-9))
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { (0..dim).map(|j| (x[j] - mean[j]) / sd[j]).collect() };
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    for _ in 0..500 {
        let (mut gw, mut gb) = (vec![0.0; dim], 0.0);
        for (x, s) in xs.iter().zip(train) {
            let x = z(x);
            let p = 1.0 / (1.0 + (-(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())).exp());
            let err = p - if s.label.is_irrigated() { 1.0 } else { 0.0 };
            gw.iter_mut().zip(&x).for_each(|(g, v)| *g += err * v);
            gb += err;
        }
        w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= 0.5 * g / xs.len() as f64);
        b -= 0.5 * gb / xs.len() as f64;
    }
    let preds: Vec<Prediction> = holdout
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let x = z(&features(&s.chip));
            let p = 1.0 / (1.0 + (-(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())).exp());
            Prediction::new(i.to_string(), p).unwrap()
        })
        .collect();
    let labels: Vec<Label> = holdout.iter().map(|s| s.label).collect();
    confusion_metrics(&preds, &labels).unwrap().f1
}

#[test]
fn full_split_learns_the_synthetic_task() {
    let (m, chips) = labeled_set(8, 240, 16, 0.8);
    let plan = make_splits_with_holdout(&m, 1.0, 0.25, 5).unwrap();
    let (train, holdout) = (take(&m, &chips, &plan.train), take(&m, &chips, &plan.holdout));
    let probe = linear_probe_f1(&train, &holdout);
    assert!(probe >= 0.9, "linear probe F1 {probe}");
    let train_chips: Vec<&MultispectralChip> = train.iter().map(|s| &s.chip).collect();
    let stats = band_stats_of_chips(train_chips).unwrap();
    let encoder = EncoderConfig::zoo("tiny", shape(16)).unwrap();
    let config = TrainConfig { epochs: 15, batch_size: 32, optimizer: OptimizerConfig::Adam { lr: 2e-3 }, seed: 1 };
    let out = train_supervised(&train, &stats, &encoder, &Init::Scratch, &config, &mut |_| {}).unwrap();
    let f1 = f1_on(out.checkpoint.network(), &holdout);
    assert!(f1 >= 0.9, "supervised F1 {f1}, probe {probe}");
}

fn pretrained(size: usize, seed: u64) -> (Checkpoint, Vec<MultispectralChip>, BandStats) {
    let pool: Vec<MultispectralChip> = synthesize(&SynthParams::new(seed, 24, 2, size, 0.8))
        .unwrap()
        .into_iter()
        .filter(|s| s.entry.label.is_none())
        .map(|s| s.chip)
        .collect();
    let stats = band_stats_of_chips(&pool).unwrap();
    let config = ContrastiveConfig { epochs: 1, batch_size: 8, seed, ..Default::default() };
    let encoder = EncoderConfig::zoo("micro", shape(size)).unwrap();
    let ckpt = pretrain(&pool, &stats, &encoder, 8, &config, &mut |_| {}).unwrap().checkpoint;
    (ckpt, pool, stats)
}

fn finetune_config(freeze: bool) -> FinetuneConfig {
    FinetuneConfig { freeze_encoder: freeze, expected_encoder: None, train: quick(3, 4, 2) }
}

#[test]
fn freezing_contract() {
    let (pre, _, _) = pretrained(8, 4);
    let (m, chips) = labeled_set(4, 12, 8, 0.8);
    let train = take(&m, &chips, &(0..12).collect::<Vec<_>>());
    let frozen = finetune(&pre, &train, &finetune_config(true), &mut |_| {}).unwrap().checkpoint;
    let before = pre.network();
    let after = frozen.network();
    for (name, t) in before.params().iter().chain(before.buffers()) {
        let u = after.params().get(name).or_else(|| after.buffers().get(name)).unwrap();
        let same = t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("cls.") {
            assert!(!same, "{name} should be retrained");
        } else {
            assert!(same, "{name} changed while frozen");
        }
    }
    let unfrozen = finetune(&pre, &train, &finetune_config(false), &mut |_| {}).unwrap().checkpoint;
    let changed = unfrozen
        .network()
        .params()
        .iter()
        .filter(|(n, _)| Network::is_encoder_tensor(n))
        .any(|(n, t)| t.data() != before.params()[n].data());
    assert!(changed);
    assert_eq!(frozen.provenance().lineage, vec![Stage::Pretrain, Stage::Finetune]);
    assert_eq!(frozen.provenance().source.as_deref(), Some(pre.id().as_str()));
}

#[test]
fn finetune_preconditions() {
    let (pre, _, _) = pretrained(8, 6);
    let (m, chips) = labeled_set(6, 4, 8, 0.8);
    let train = take(&m, &chips, &[0, 1, 2, 3]);
    let fine = finetune(&pre, &train, &finetune_config(true), &mut |_| {}).unwrap().checkpoint;
    let err = finetune(&fine, &train, &finetune_config(true), &mut |_| {}).err().unwrap();
    assert!(matches!(err, TrainError::Model(ModelError::StageViolation(_))), "{err}");
    let mut config = finetune_config(true);
    config.expected_encoder = Some(EncoderConfig::zoo("tiny", shape(8)).unwrap());
    let err = finetune(&pre, &train, &config, &mut |_| {}).err().unwrap();
    assert!(matches!(err, TrainError::Model(ModelError::ConfigMismatch(_))), "{err}");
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n, NUM_CLASSES], (0..n * NUM_CLASSES).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap()
}

/// `T²/B · Σ KL(softmax(t/T) ‖ softmax(s/T))` summed directly.
fn kl_oracle(teacher: &Tensor, student: &Tensor, temperature: f64) -> f64 {
    let softmax = |r: &[f64]| -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|v| ((v - m) / temperature).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let mut total = 0.0;
    for (t, s) in teacher.rows().zip(student.rows()) {
        let (p, q) = (softmax(t), softmax(s));
        total += p.iter().zip(&q).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum::<f64>();
    }
    temperature * temperature * total / teacher.shape()[0] as f64
}

#[test]
fn distillation_loss_matches_kl_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for temperature in [1.0, 2.0, 4.0] {
        for n in [1, 3, 8] {
            let (t, s) = (random_logits(&mut rng, n), random_logits(&mut rng, n));
            let got = distillation_loss(&t, &s, temperature).unwrap();
            let want = kl_oracle(&t, &s, temperature);
            assert!((got - want).abs() < 1e-8, "T={temperature} n={n}: {got} vs {want}");
            assert!(got >= 0.0);
            assert!(distillation_loss(&t, &t, temperature).unwrap().abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_teacher_term() {
    let uniform = Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap();
    for temperature in [1.0, 2.0] {
        let s = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let q0 = 1.0 / (1.0 + (-1.5f64 / temperature).exp());
        let kl = 0.5 * (0.5 / q0).ln() + 0.5 * (0.5 / (1.0 - q0)).ln();
        let got = distillation_loss(&uniform, &s, temperature).unwrap();
        assert!((got - temperature * temperature * kl).abs() < 1e-12);
        let flat = Tensor::new(vec![1, 2], vec![-2.0, -2.0]).unwrap();
        assert!(distillation_loss(&uniform, &flat, temperature).unwrap().abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distillation_loss_is_nonnegative(seed in any::<u64>(), n in 1usize..6, temperature in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, s) = (random_logits(&mut rng, n), random_logits(&mut rng, n));
        let got = distillation_loss(&t, &s, temperature).unwrap();
        prop_assert!(got >= -1e-12);
        prop_assert!((got - kl_oracle(&t, &s, temperature)).abs() < 1e-8);
    }
}

#[test]
fn self_distillation_fixed_point() {
    let (pre, pool, _) = pretrained(8, 9);
    let (m, chips) = labeled_set(9, 8, 8, 0.8);
    let train = take(&m, &chips, &(0..8).collect::<Vec<_>>());
    let teacher = finetune(&pre, &train, &finetune_config(true), &mut |_| {}).unwrap().checkpoint;
    let net = teacher.network();
    let refs: Vec<&MultispectralChip> = pool.iter().take(6).collect();
    let x = net.input_batch(&refs).unwrap();
    let logits = net.logits(&x).unwrap();
    let (loss, grads) = distillation_gradients(net, &x, &logits, 2.0, false).unwrap();
    assert!(loss.abs() < 1e-10, "{loss}");
    let worst = grads.values().flat_map(|g| g.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn distillation_chain_and_errors() {
    let (pre, pool, _) = pretrained(8, 12);
    let (m, chips) = labeled_set(12, 8, 8, 0.8);
    let train = take(&m, &chips, &(0..8).collect::<Vec<_>>());
    let teacher = finetune(&pre, &train, &finetune_config(true), &mut |_| {}).unwrap().checkpoint;
    let config = DistillConfig { temperature: 2.0, student: StudentSpec::SameAsTeacher, train: quick(2, 8, 4) };
    let mut seen = 0;
    let out = distill(&teacher, &pool, &config, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    let p = out.checkpoint.provenance();
    assert_eq!(p.lineage, vec![Stage::Pretrain, Stage::Finetune, Stage::Distill]);
    assert_eq!(p.source.as_deref(), Some(teacher.id().as_str()));
    assert!(out.log.iter().all(|r| r.loss >= 0.0 && r.loss.is_finite()));
    let again = distill(&teacher, &pool, &config, &mut |_| {}).unwrap();
    assert_eq!(again.checkpoint.digest(), out.checkpoint.digest());

    let err = distill(&pre, &pool, &config, &mut |_| {}).err().unwrap();
    assert!(matches!(err, TrainError::Model(ModelError::StageViolation(_))), "{err}");
    assert!(matches!(distill(&teacher, &[], &config, &mut |_| {}), Err(TrainError::EmptyPool)));
    let big = DistillConfig {
        student: StudentSpec::Smaller(EncoderConfig::zoo("small", shape(8)).unwrap()),
        ..config.clone()
    };
    assert!(matches!(distill(&teacher, &pool, &big, &mut |_| {}), Err(TrainError::InvalidConfig(_))));
    let bad_t = DistillConfig { temperature: 0.0, ..config };
    assert!(distill(&teacher, &pool, &bad_t, &mut |_| {}).is_err());
}
