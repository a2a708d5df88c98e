//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p cityscope-core --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use cityscope_core::dataset::{
    apportion, load_and_preprocess, scan_dataset, split_dataset, synthetic::write_hue_dataset, synthetic::HueDatasetConfig,
    ClassVocabulary, DatasetManifest, ImageRecord, LoadedSplit, PreprocessConfig, Split, SplitRatios,
};
use cityscope_core::evaluation::{confusion_and_per_class, evaluate_loaded};
use cityscope_core::model::{
    build_vanilla_cnn, build_vgg16_transfer, compute_gradients, count_parameters, forward, import_pretrained_weights,
    init_parameters, load_checkpoint, save_checkpoint, write_weight_bundle, ArchitectureSpec, Checkpoint, HeadConfig,
    LayerKind, LayerSpec, Mode, ModelError, ParameterStore, TrainabilityMask, VanillaConfig,
};
use cityscope_core::reports::{plot_training_history, predict_image};
use cityscope_core::rng::SplitMix64;
use cityscope_core::tensor::Tensor;
use cityscope_core::training::{
    adam_step, categorical_cross_entropy, early_stopping_update, fine_tune_two_stage, fit, fit_manifest,
    reduce_lr_on_plateau_update, softmax, AdamConfig, CallbackState, OptimizerState, StopDecision, TrainConfig,
};

// Pinned tolerances and limits.
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_FD_EPS: f64 = 1e-3;
/// Denominator floor for the relative error, so gradients that are zero in
/// exact arithmetic (conv bias ahead of batchnorm) compare absolutely.
const GRAD_REL_FLOOR: f64 = 1e-6;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
const ADAM_TOL: f64 = 1e-12;
const UNIFORM_LOSS_TOL: f64 = 1e-9;
const PERFECT_LOSS_MAX: f64 = 1.2e-7;
const SOFTMAX_SUM_TOL: f32 = 1e-6;
const E2E_VAL_ACCURACY: f64 = 0.95;
const E2E_MAX_EPOCHS: usize = 15;
const E2E_TIME_LIMIT: Duration = Duration::from_secs(600);

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn onehot<T: cityscope_core::tensor::Scalar>(classes: &[usize], k: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); classes.len() * k];
    for (r, &c) in classes.iter().enumerate() {
        data[r * k + c] = T::one();
    }
    Tensor::from_vec(&[classes.len(), k], data)
}

fn random_tensor<T: cityscope_core::tensor::Scalar>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of_f64(rng.uniform(lo, hi))).collect())
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let config = VanillaConfig {
        filters: vec![4],
        block_dropout: vec![0.0],
        dense_width: 8,
        head_dropout: 0.0,
    };
    let arch = build_vanilla_cnn([8, 8, 3], 5, &config).map_err(|e| e.to_string())?;
    let mask = TrainabilityMask::all_trainable(&arch);
    let total = count_parameters(&arch, &mask).total;
    ensure(total <= 5000, || format!("{total} parameters"))?;
    let params: ParameterStore<f64> = init_parameters(&arch, 3).cast();
    let x = random_tensor::<f64>(&[4, 8, 8, 3], 4, -1.0, 1.0);
    let y = onehot::<f64>(&[0, 2, 4, 1], 5);
    let frozen = TrainabilityMask::all_frozen(&arch);
    let loss = |p: &ParameterStore<f64>| compute_gradients(&arch, p, &frozen, &x, &y, Mode::Train, None).unwrap().loss;
    let analytic = compute_gradients(&arch, &params, &mask, &x, &y, Mode::Train, None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in mask.trainable_names() {
        let g = analytic.grads.get(name).ok_or_else(|| format!("no gradient for {name}"))?;
        for i in 0..g.len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += GRAD_FD_EPS;
            let up = loss(&p);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * GRAD_FD_EPS;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * GRAD_FD_EPS);
            let a = g.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
            worst = worst.max(err);
            ensure(err <= GRAD_REL_TOL, || format!("{name}[{i}] analytic {a:e} numeric {numeric:e}"))?;
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < GRAD_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("{checked} entries, {total} params, worst rel err {worst:.2e}, {elapsed:.2?}"))
}

/// theta after steps 1..=5, from scripts/oracles/adam_scalar.py.
const ADAM_REFERENCE: [f64; 5] = [0.49900000005, 0.4980000001, 0.49700000015, 0.4960000002, 0.49500000025];

fn criterion_2() -> Check {
    let mut params = ParameterStore::<f64>::new();
    params.insert("theta", Tensor::from_vec(&[1], vec![0.5]));
    let mut grads = BTreeMap::new();
    grads.insert("theta".to_string(), Tensor::from_vec(&[1], vec![0.2]));
    let mut state = OptimizerState::<f64>::new(1e-3);
    let config = AdamConfig::default();
    let mut worst = 0.0f64;
    for (t, expected) in ADAM_REFERENCE.iter().enumerate() {
        adam_step(&mut params, &grads, &mut state, &config).map_err(|e| e.to_string())?;
        let got = params.get("theta").unwrap().data()[0];
        worst = worst.max((got - expected).abs());
        ensure((got - expected).abs() <= ADAM_TOL, || format!("step {}: {got} vs {expected}", t + 1))?;
    }
    let m = state.first_moment["theta"].data()[0];
    ensure((m - 0.081902).abs() < 1e-12, || format!("first moment {m}"))?;
    Ok(format!("5 steps, max |diff| {worst:.1e}"))
}

struct Script {
    losses: Vec<f64>,
    patience: usize,
    min_delta: f64,
    lr_patience: usize,
}

fn script(losses: &[f64], patience: usize, min_delta: f64, lr_patience: usize) -> Script {
    Script {
        losses: losses.to_vec(),
        patience,
        min_delta,
        lr_patience,
    }
}

/// (stop flag, best epoch, lr) after every value, until the stop.
fn reference_trace(s: &Script, lr0: f64, factor: f64, min_lr: f64) -> Vec<(bool, Option<usize>, f64)> {
    let mut out = Vec::new();
    let (mut best, mut count, mut best_epoch) = (f64::INFINITY, 0usize, None);
    let (mut lr_best, mut lr_count, mut lr) = (f64::INFINITY, 0usize, lr0);
    for (i, &l) in s.losses.iter().enumerate() {
        if l < lr_best {
            lr_best = l;
            lr_count = 0;
        } else {
            lr_count += 1;
            if lr_count >= s.lr_patience {
                let reduced = lr * factor;
                let floored = if reduced < min_lr { min_lr } else { reduced };
                if floored < lr {
                    lr = floored;
                }
                lr_count = 0;
            }
        }
        if l < best - s.min_delta {
            best = l;
            count = 0;
            best_epoch = Some(i + 1);
        } else {
            count += 1;
        }
        let stop = count >= s.patience;
        out.push((stop, best_epoch, lr));
        if stop {
            break;
        }
    }
    out
}

fn library_trace(s: &Script, lr0: f64, factor: f64, min_lr: f64) -> Result<Vec<(bool, Option<usize>, f64)>, String> {
    let mut out = Vec::new();
    let mut state = CallbackState::default();
    let mut lr = lr0;
    for &l in &s.losses {
        let (next, new_lr) =
            reduce_lr_on_plateau_update(&state, l, lr, s.lr_patience, factor, min_lr).map_err(|e| e.to_string())?;
        lr = new_lr;
        let outcome = early_stopping_update(&next, l, s.patience, s.min_delta).map_err(|e| e.to_string())?;
        state = outcome.state;
        let stop = outcome.decision == StopDecision::Stop;
        out.push((stop, state.best_epoch, lr));
        if stop {
            break;
        }
    }
    Ok(out)
}

fn criterion_3() -> Check {
    let scripts = [
        script(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 2, 0.0, 2),
        script(&[1.0; 8], 3, 0.0, 2),
        script(&[1.0, 0.8, 0.9, 0.7, 0.95, 0.75, 0.96, 0.74], 2, 0.0, 1),
        script(&[1.0, 0.99, 0.98, 0.97], 2, 0.01, 1),
        script(&[1.0, 0.989, 0.978, 0.967], 2, 0.01, 2),
        script(&[0.5, 0.5, 0.5, 0.49], 3, 0.0, 5),
        script(&[2.0, 1.0, 1.5, 0.9, 1.2, 1.3, 1.4], 3, 0.0, 2),
        script(&[1.0, 0.9, 0.91, 0.92], 2, 0.0, 10),
        script(&[1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6], 5, 0.0, 2),
        script(&[3.0, 2.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5], 4, 0.0, 2),
        script(&[1.0, 0.95, 0.9, 0.85], 1, 0.1, 1),
        script(&[1.0, 0.9, 1.0, 0.9, 1.0, 0.9], 2, 0.0, 1),
        script(&[0.1, 0.2, 0.05, 0.3, 0.04, 0.5], 2, 0.0, 1),
        script(&[1.0, 0.5, 0.25, 0.125, 0.0625], 1, 0.2, 1),
        script(&[5.0, 4.0, 4.0, 3.0, 3.0, 3.0, 2.0], 3, 0.5, 2),
        script(&[1.0, 1.0, 0.999999, 0.999998, 0.999997], 2, 1e-5, 1),
        script(&[0.7, 0.6, 0.65, 0.62, 0.61, 0.605, 0.6, 0.59], 4, 0.0, 3),
        script(&[1e3, 1e2, 1e1, 1e0, 1e-1, 1e-2, 1e-2, 1e-2], 2, 0.0, 1),
        script(&[1.0, 2.0, 3.0, 0.5, 0.6, 0.7, 0.8], 3, 0.0, 2),
        script(&[0.3, 0.3, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1], 4, 0.05, 2),
    ];
    // Low floor so some scripts hit it.
    let (lr0, factor, min_lr) = (1e-3, 0.5, 2e-4);
    for (i, s) in scripts.iter().enumerate() {
        let want = reference_trace(s, lr0, factor, min_lr);
        let got = library_trace(s, lr0, factor, min_lr)?;
        ensure(got == want, || format!("script {}: {got:?} vs {want:?}", i + 1))?;
    }

    // Traced examples.
    let trace = library_trace(&script(&[1.0, 0.9, 0.91, 0.92], 2, 0.0, 100), 1e-3, 0.5, 1e-6)?;
    ensure(trace.len() == 4 && trace[3].0 && !trace[2].0 && trace[3].1 == Some(2), || format!("early stop {trace:?}"))?;
    let trace = library_trace(&script(&[1.0, 1.0, 1.0], 100, 0.0, 2), 1e-3, 0.5, 1e-6)?;
    let lrs: Vec<f64> = trace.iter().map(|t| t.2).collect();
    ensure(lrs == [1e-3, 1e-3, 5e-4], || format!("lr trace {lrs:?}"))?;
    Ok(format!("{} scripts agree, both traced examples reproduce", scripts.len()))
}

fn synthetic_manifest(per_class: usize) -> DatasetManifest {
    let names: Vec<String> = (0..5).map(|c| format!("city{c}")).collect();
    let records = (0..5 * per_class)
        .map(|i| ImageRecord {
            path: format!("city{}/{:04}.png", i % 5, i / 5),
            class_index: i % 5,
            split: Split::Unassigned,
        })
        .collect();
    DatasetManifest {
        root: "/nonexistent".into(),
        vocabulary: ClassVocabulary::new(names).unwrap(),
        ratios: None,
        split_seed: None,
        records,
    }
}

fn per_class_counts(m: &DatasetManifest) -> Vec<[usize; 3]> {
    let mut counts = vec![[0usize; 3]; m.vocabulary.len()];
    for r in &m.records {
        let slot = match r.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Unassigned => continue,
        };
        counts[r.class_index][slot] += 1;
    }
    counts
}

fn criterion_4() -> Check {
    let ratios = SplitRatios::new(0.70, 0.15, 0.15).map_err(|e| e.to_string())?;
    let manifest = synthetic_manifest(100);
    let a = split_dataset(&manifest, ratios, 42, false).map_err(|e| e.to_string())?;
    let b = split_dataset(&manifest, ratios, 42, false).map_err(|e| e.to_string())?;
    for (c, counts) in per_class_counts(&a).iter().enumerate() {
        ensure(*counts == [70, 15, 15], || format!("class {c}: {counts:?}"))?;
    }
    ensure(a.records == b.records, || "same seed gave different assignments".into())?;
    let c = split_dataset(&manifest, ratios, 43, false).map_err(|e| e.to_string())?;
    ensure(a.records != c.records, || "different seeds gave identical assignments".into())?;
    let seven = apportion(7, &ratios);
    ensure(seven == [5, 1, 1], || format!("7 records: {seven:?}"))?;
    Ok("70/15/15 per class, deterministic, 7 -> 5/1/1".into())
}

fn write_hue(root: &Path, side: u32, per_class: usize, seed: u64) -> Result<DatasetManifest, String> {
    let config = HueDatasetConfig {
        images_per_class: per_class,
        height: side,
        width: side,
        seed,
        ..HueDatasetConfig::default()
    };
    write_hue_dataset(root, &config).map_err(|e| e.to_string())?;
    let (manifest, _) = scan_dataset(root).map_err(|e| e.to_string())?;
    let ratios = SplitRatios::new(0.70, 0.15, 0.15).map_err(|e| e.to_string())?;
    split_dataset(&manifest, ratios, seed, false).map_err(|e| e.to_string())
}

/// Independent formula for a 3×3 conv and a dense layer.
fn conv_count(cin: usize, cout: usize) -> usize {
    9 * cin * cout + cout
}

fn dense_count(n_in: usize, n_out: usize) -> usize {
    n_in * n_out + n_out
}

fn criterion_5() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = write_hue(&dir.path().join("data"), 32, 10, 5)?;
    let preprocess = PreprocessConfig::square(32);
    let train = LoadedSplit::load(&manifest, Split::Train, &preprocess).map_err(|e| e.to_string())?;
    let val = LoadedSplit::load(&manifest, Split::Val, &preprocess).map_err(|e| e.to_string())?;

    let (arch, mask) = build_vgg16_transfer([32, 32, 3], 5, &HeadConfig::default()).map_err(|e| e.to_string())?;
    let donor = init_parameters(&arch, 77);
    let bundle = dir.path().join("bundle");
    write_weight_bundle(&bundle, donor.iter().filter(|(k, _)| k.starts_with("block")).map(|(k, v)| (k.as_str(), v)))
        .map_err(|e| e.to_string())?;
    let (imported, report) =
        import_pretrained_weights(&bundle, &arch, &init_parameters(&arch, 1), true).map_err(|e| e.to_string())?;
    ensure(report.loaded.len() == 26, || format!("loaded {}", report.loaded.len()))?;

    let stage1 = TrainConfig {
        max_epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let stage2 = TrainConfig {
        max_epochs: 2,
        batch_size: 16,
        ..TrainConfig::fine_tune_default()
    };
    let (out, stage2_mask) = fine_tune_two_stage(&arch, imported.clone(), &mask, &train, &val, &stage1, &stage2, &["block5".into()], "vgg16")
        .map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (name, before) in imported.iter().filter(|(k, _)| ["block1", "block2", "block3", "block4"].iter().any(|b| k.starts_with(b))) {
        let after = out.params.get(name).ok_or_else(|| format!("{name} missing"))?;
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("{name} changed"))?;
        compared += 1;
    }
    let block5_moved = out.params.get("block5_conv3.weight").unwrap().data() != imported.get("block5_conv3.weight").unwrap().data();
    ensure(block5_moved, || "block5 did not train in stage 2".into())?;

    let block5 = conv_count(512, 512) * 3;
    let head = dense_count(512, 256) + dense_count(256, 5);
    let trainable = count_parameters(&arch, &stage2_mask).trainable;
    ensure(block5 == 7_079_424, || format!("block5 formula {block5}"))?;
    ensure(trainable == head + block5, || format!("stage-2 trainable {trainable} vs {}", head + block5))?;
    Ok(format!("{compared} block1-4 tensors bit-identical, stage-2 trainable {trainable} = head {head} + {block5}"))
}

fn criterion_6() -> Check {
    // Values printed by scripts/oracles/param_counts.py.
    const CONV_3_32: usize = 896;
    const DENSE_12800_256: usize = 3_277_056;
    const VGG16_BACKBONE: usize = 14_714_688;

    let conv = ArchitectureSpec::new(
        [4, 4, 3],
        vec![
            LayerSpec::new("conv", LayerKind::Conv2d { filters: 32 }),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("logits", LayerKind::Dense { width: 2 }),
            LayerSpec::new("softmax", LayerKind::Softmax),
        ],
        2,
    )
    .map_err(|e| e.to_string())?;
    let conv_total = count_parameters(&conv, &TrainabilityMask::all_trainable(&conv)).total - dense_count(4 * 4 * 32, 2);
    ensure(conv_total == CONV_3_32 && conv_count(3, 32) == CONV_3_32, || format!("conv {conv_total}"))?;

    let vanilla = build_vanilla_cnn([175, 175, 3], 5, &VanillaConfig::default()).map_err(|e| e.to_string())?;
    let mut only_dense = TrainabilityMask::all_frozen(&vanilla);
    only_dense.set("dense.weight", true);
    only_dense.set("dense.bias", true);
    let dense = count_parameters(&vanilla, &only_dense).trainable;
    ensure(dense == DENSE_12800_256 && dense_count(12800, 256) == DENSE_12800_256, || format!("dense {dense}"))?;

    let (vgg, mask) = build_vgg16_transfer([175, 175, 3], 5, &HeadConfig::default()).map_err(|e| e.to_string())?;
    let backbone = count_parameters(&vgg, &mask).frozen;
    ensure(backbone == VGG16_BACKBONE, || format!("backbone {backbone}"))?;
    Ok(format!("conv {conv_total}, dense {dense}, backbone {backbone}"))
}

/// Mean of the first and last third of a series.
fn thirds(values: &[f64]) -> (f64, f64) {
    let k = (values.len() / 3).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&values[..k]), mean(&values[values.len() - k..]))
}

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = write_hue(&dir.path().join("data"), 175, 100, 7)?;
    let preprocess = PreprocessConfig::default();
    let arch = build_vanilla_cnn(preprocess.input_shape(), 5, &VanillaConfig::default()).map_err(|e| e.to_string())?;
    let mask = TrainabilityMask::all_trainable(&arch);
    let config = TrainConfig {
        max_epochs: E2E_MAX_EPOCHS,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = fit_manifest(&arch, init_parameters(&arch, config.init_seed), &mask, &manifest, &preprocess, &config, "vanilla")
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(elapsed < E2E_TIME_LIMIT, || format!("training took {elapsed:?}"))?;

    let val = LoadedSplit::load(&manifest, Split::Val, &preprocess).map_err(|e| e.to_string())?;
    let report = evaluate_loaded(&arch, &out.params, &val, 32, manifest.vocabulary.names()).map_err(|e| e.to_string())?;
    ensure(report.accuracy >= E2E_VAL_ACCURACY, || format!("val accuracy {:.3} after {elapsed:.1?}", report.accuracy))?;

    let plots = plot_training_history(&out.history, &dir.path().join("plots")).map_err(|e| e.to_string())?;
    for p in &plots {
        let svg = std::fs::read_to_string(p).map_err(|e| e.to_string())?;
        ensure(svg.contains(">epoch</text>") && svg.matches("<polyline").count() == 2, || format!("{} malformed", p.display()))?;
    }
    let epochs = &out.history.epochs;
    let train_loss: Vec<f64> = epochs.iter().map(|e| e.train_loss).collect();
    let train_acc: Vec<f64> = epochs.iter().map(|e| e.train_accuracy).collect();
    let val_acc: Vec<f64> = epochs.iter().map(|e| e.val_accuracy).collect();
    let (l0, l1) = thirds(&train_loss);
    let (a0, a1) = thirds(&train_acc);
    let (v0, v1) = thirds(&val_acc);
    ensure(l1 < l0 && a1 > a0 && v1 >= v0, || format!("curves not trending: loss {l0:.3}->{l1:.3}, acc {a0:.3}->{a1:.3}, val {v0:.3}->{v1:.3}"))?;
    let final_train = *train_acc.last().unwrap();
    Ok(format!(
        "val accuracy {:.3} (final train {final_train:.3}), {} epochs in {elapsed:.1?}, plots {}",
        report.accuracy,
        epochs.len(),
        plots.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>().join(", ")
    ))
}

fn criterion_8() -> Check {
    let uniform = Tensor::from_vec(&[4, 5], vec![0.2f64; 20]);
    let labels = onehot::<f64>(&[0, 1, 2, 4], 5);
    let loss = categorical_cross_entropy(&uniform, &labels).map_err(|e| e.to_string())?;
    ensure((loss - 5f64.ln()).abs() <= UNIFORM_LOSS_TOL, || format!("uniform loss {loss}"))?;

    let perfect = categorical_cross_entropy(&labels, &labels).map_err(|e| e.to_string())?;
    ensure(perfect <= PERFECT_LOSS_MAX, || format!("perfect loss {perfect}"))?;
    let confident: Vec<f32> = softmax(&[50.0f32, 0.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let confident_loss = categorical_cross_entropy(&Tensor::from_vec(&[1, 5], confident), &onehot::<f32>(&[0], 5))
        .map_err(|e| e.to_string())?;
    ensure(confident_loss <= PERFECT_LOSS_MAX, || format!("confident loss {confident_loss}"))?;

    let mut rng = SplitMix64::new(8);
    let mut worst = 0.0f32;
    for row in 0..2000 {
        let scale = [1.0, 10.0, 100.0, 1000.0][row % 4];
        let logits: Vec<f32> = (0..5).map(|_| rng.uniform(-scale, scale) as f32).collect();
        let p = softmax(&logits).map_err(|e| e.to_string())?;
        let sum: f32 = p.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        ensure(p.iter().all(|v| v.is_finite()), || format!("non-finite softmax for {logits:?}"))?;
    }
    ensure(worst <= SOFTMAX_SUM_TOL, || format!("row sum off by {worst}"))?;
    Ok(format!("ln5 loss {loss:.12}, perfect {perfect:.1e}, worst row-sum error {worst:.1e}"))
}

fn criterion_9() -> Check {
    let mut rng = SplitMix64::new(9);
    for trial in 0..200 {
        let k = 2 + (rng.next_u64() % 5) as usize;
        let names: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
        let preds: Vec<usize> = (0..100).map(|_| (rng.next_u64() % k as u64) as usize).collect();
        let truths: Vec<usize> = (0..100).map(|_| (rng.next_u64() % k as u64) as usize).collect();
        let (cm, per) = confusion_and_per_class(&preds, &truths, &names).map_err(|e| e.to_string())?;
        let mut correct = 0;
        for i in 0..100 {
            if preds[i] == truths[i] {
                correct += 1;
            }
        }
        ensure(cm.accuracy() == correct as f64 / 100.0, || format!("trial {trial}: accuracy"))?;
        for (c, metrics) in per.iter().enumerate() {
            let (mut tp, mut predicted, mut actual) = (0u64, 0u64, 0u64);
            for i in 0..100 {
                if preds[i] == c && truths[i] == c {
                    tp += 1;
                }
                if preds[i] == c {
                    predicted += 1;
                }
                if truths[i] == c {
                    actual += 1;
                }
            }
            let p = if predicted == 0 { None } else { Some(tp as f64 / predicted as f64) };
            let r = if actual == 0 { None } else { Some(tp as f64 / actual as f64) };
            ensure(metrics.precision == p && metrics.recall == r, || format!("trial {trial} class {c}"))?;
        }
    }
    Ok("200 trials of 100 pairs over 2-6 classes match the brute-force counter".into())
}

fn tiny_checkpoint(dir: &Path) -> Result<Checkpoint, String> {
    let manifest = write_hue(&dir.join("ckpt_data"), 16, 6, 10)?;
    let preprocess = PreprocessConfig::square(16);
    let config = VanillaConfig {
        filters: vec![4, 8],
        block_dropout: vec![0.0, 0.25],
        dense_width: 16,
        head_dropout: 0.5,
    };
    let arch = build_vanilla_cnn([16, 16, 3], 5, &config).map_err(|e| e.to_string())?;
    let mask = TrainabilityMask::all_trainable(&arch);
    let train_config = TrainConfig {
        max_epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let train = LoadedSplit::load(&manifest, Split::Train, &preprocess).map_err(|e| e.to_string())?;
    let val = LoadedSplit::load(&manifest, Split::Val, &preprocess).map_err(|e| e.to_string())?;
    let out = fit(&arch, init_parameters(&arch, 0), &mask, &train, &val, &train_config, "tiny").map_err(|e| e.to_string())?;
    Ok(Checkpoint {
        label: "tiny".into(),
        arch,
        params: out.params,
        mask,
        optimizer: Some(out.optimizer),
        preprocess,
        class_names: manifest.vocabulary.names().to_vec(),
    })
}

fn tensor_bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = tiny_checkpoint(dir.path())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(back.arch == ckpt.arch && back.mask == ckpt.mask && back.class_names == ckpt.class_names, || "metadata differs".into())?;
    for (name, t) in ckpt.params.iter() {
        ensure(back.params.get(name).map(tensor_bits) == Some(tensor_bits(t)), || format!("param {name}"))?;
    }
    let (a, b) = (ckpt.optimizer.as_ref().unwrap(), back.optimizer.as_ref().ok_or("optimizer state lost")?);
    ensure(a.step == b.step && a.learning_rate.to_bits() == b.learning_rate.to_bits(), || "optimizer scalars".into())?;
    ensure(!a.first_moment.is_empty(), || "no moments to compare".into())?;
    for (name, t) in &a.first_moment {
        ensure(b.first_moment.get(name).map(tensor_bits) == Some(tensor_bits(t)), || format!("m {name}"))?;
        ensure(b.second_moment.get(name).map(tensor_bits) == Some(tensor_bits(&a.second_moment[name])), || format!("v {name}"))?;
    }

    // Rewrite the header with format_version 99.
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| e.to_string())?;
    header["format_version"] = 99.into();
    let new_header = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    let mut bumped = bytes[..8].to_vec();
    bumped.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
    bumped.extend_from_slice(&new_header);
    bumped.extend_from_slice(&bytes[16 + len..]);
    let v99 = dir.path().join("v99.ckpt");
    std::fs::write(&v99, bumped).map_err(|e| e.to_string())?;
    match load_checkpoint(&v99) {
        Err(ModelError::VersionMismatch { found: 99, .. }) => {}
        other => return Err(format!("version 99 gave {:?}", other.map(|_| ()))),
    }
    let short = dir.path().join("short.ckpt");
    std::fs::write(&short, &bytes[..bytes.len() - 7]).map_err(|e| e.to_string())?;
    match load_checkpoint(&short) {
        Err(ModelError::CorruptCheckpoint(_)) => {}
        other => return Err(format!("truncation gave {:?}", other.map(|_| ()))),
    }
    Ok(format!("{} params and {} moment pairs bit-exact; v99 and truncation rejected", ckpt.params.len(), a.first_moment.len()))
}

fn criterion_11() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = tiny_checkpoint(dir.path())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let (manifest, _) = scan_dataset(&dir.path().join("ckpt_data")).map_err(|e| e.to_string())?;
    let ratios = SplitRatios::new(0.70, 0.15, 0.15).map_err(|e| e.to_string())?;
    let manifest = split_dataset(&manifest, ratios, 10, false).map_err(|e| e.to_string())?;
    let test = LoadedSplit::load(&manifest, Split::Test, &ckpt.preprocess).map_err(|e| e.to_string())?;
    let records: Vec<&ImageRecord> = manifest.split_records(Split::Test).collect();
    let mut compared = 0;
    for (i, record) in records.iter().enumerate() {
        let image = manifest.resolve(record);
        let direct = load_and_preprocess(&image, &ckpt.preprocess).map_err(|e| e.to_string())?;
        let same = direct.data().iter().zip(test.sample(i)).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && direct.len() == test.sample(i).len(), || format!("{} differs", record.path))?;

        let batch = Tensor::from_vec(&[1, 16, 16, 3], test.sample(i).to_vec());
        let train_path = forward(&ckpt.arch, &ckpt.params, &batch, Mode::Eval, None).map_err(|e| e.to_string())?;
        let predicted = predict_image(&image, &path, 5).map_err(|e| e.to_string())?;
        for entry in &predicted.top {
            let c = ckpt.class_names.iter().position(|n| *n == entry.class).unwrap();
            let p = train_path.probabilities.data()[c] as f64;
            ensure((p - entry.probability).abs() < 1e-6, || format!("{}: {p} vs {}", entry.class, entry.probability))?;
        }
        compared += 1;
    }
    Ok(format!("{compared} test images bit-identical across paths"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", criterion_1),
        ("adam oracle", criterion_2),
        ("callback oracles", criterion_3),
        ("split determinism and stratification", criterion_4),
        ("freeze semantics", criterion_5),
        ("parameter-count oracles", criterion_6),
        ("synthetic end-to-end", criterion_7),
        ("softmax and cross-entropy", criterion_8),
        ("evaluation oracle", criterion_9),
        ("checkpoint round trip", criterion_10),
        ("preprocessing parity", criterion_11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        match check() {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{:.1?}]", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{:.1?}]", start.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
