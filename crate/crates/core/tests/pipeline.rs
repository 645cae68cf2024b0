use alfred_core::ablation::run_ablation;
use alfred_core::checkpoint::{load_model, save_model};
use alfred_core::data::synth::synth_directions;
use alfred_core::data::{generate_synthetic, Dataset, Split, SynthConfig};
use alfred_core::train::fit;
use alfred_core::{evaluate, ModelParams, TrainConfig, VariantKind};

fn small(seed: u64) -> (Dataset, TrainConfig) {
    let synth = SynthConfig {
        samples_per_class: 12,
        d: 8,
        num_classes: 6,
        seed,
        ..Default::default()
    };
    let cfg = TrainConfig {
        d: 8,
        num_classes: 6,
        epochs: 5,
        batch_size: 8,
        lr: 1e-3,
        ..Default::default()
    };
    (generate_synthetic(&synth).unwrap(), cfg)
}

#[test]
fn disk_round_trip_preserves_training_and_metrics() {
    let (data, cfg) = small(1);
    let dir = tempfile::tempdir().unwrap();
    let manifest = data.write(dir.path()).unwrap();
    let loaded = Dataset::load(&manifest).unwrap();

    let a = fit(&data, &cfg).unwrap();
    let b = fit(&loaded, &cfg).unwrap();
    assert_eq!(a.history, b.history);

    let path = dir.path().join("model.ckpt");
    save_model(&a.best, &path).unwrap();
    let back = load_model(&path).unwrap();

    let test = loaded.split(Split::Test);
    let before = evaluate(&a.best, &test).unwrap().confusion.report(&[]).unwrap();
    let after = evaluate(&back, &test).unwrap().confusion.report(&[]).unwrap();
    assert_eq!(before.confusion, after.confusion);
    assert_eq!(before.macro_f1.to_bits(), after.macro_f1.to_bits());
}

#[test]
fn zero_signal_stays_near_chance() {
    let synth = SynthConfig {
        samples_per_class: 60,
        d: 8,
        num_classes: 6,
        signal_emotion: 0.0,
        signal_text: 0.0,
        signal_image: 0.0,
        seed: 2,
        ..Default::default()
    };
    let data = generate_synthetic(&synth).unwrap();
    let cfg = TrainConfig {
        d: 8,
        num_classes: 6,
        epochs: 10,
        lr: 1e-3,
        ..Default::default()
    };
    let out = fit(&data, &cfg).unwrap();
    let test = data.split(Split::Test);
    let acc = evaluate(&out.last, &test).unwrap().confusion.accuracy();
    let n = test.len() as f64;
    let p = 1.0 / 6.0;
    let stderr = (p * (1.0 - p) / n).sqrt();
    assert!((acc - p).abs() <= 3.0 * stderr, "accuracy {acc} on {n} samples");
}

#[test]
fn overfit_loss_decreases_over_windows() {
    let synth = SynthConfig {
        samples_per_class: 29,
        d: 16,
        num_classes: 6,
        signal_image: 0.0,
        seed: 0,
        ..Default::default()
    };
    let data = generate_synthetic(&synth).unwrap();
    let cfg = TrainConfig {
        d: 16,
        num_classes: 6,
        epochs: 60,
        lr: 1e-3,
        ..Default::default()
    };
    let out = fit(&data, &cfg).unwrap();
    let windows: Vec<f64> = out
        .history
        .chunks(10)
        .map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "window means {windows:?}");
    }
}

#[test]
fn best_checkpoint_matches_its_recorded_epoch() {
    let (data, cfg) = small(3);
    let out = fit(&data, &cfg).unwrap();
    assert!(out.best_epoch >= 1 && out.best_epoch <= cfg.epochs);
    let val = data.split(Split::Val);
    let f1 = evaluate(&out.best, &val).unwrap().confusion.macro_f1();
    let recorded = out.history[out.best_epoch - 1].val_macro_f1;
    assert_eq!(f1.to_bits(), recorded.to_bits());
    let max = out.history.iter().map(|r| r.val_macro_f1).fold(f64::MIN, f64::max);
    assert_eq!(recorded, max);
}

#[test]
fn untrained_initialization_is_reproducible() {
    let (_, cfg) = small(0);
    let a = ModelParams::init(cfg.model_spec(), 9).unwrap();
    let b = ModelParams::init(cfg.model_spec(), 9).unwrap();
    let c = ModelParams::init(cfg.model_spec(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn no_variant_beats_chance_without_signal() {
    let synth = SynthConfig {
        samples_per_class: 60,
        d: 8,
        num_classes: 6,
        signal_emotion: 0.0,
        signal_text: 0.0,
        signal_image: 0.0,
        seed: 7,
        ..Default::default()
    };
    let data = generate_synthetic(&synth).unwrap();
    let cfg = TrainConfig {
        d: 8,
        num_classes: 6,
        epochs: 5,
        lr: 1e-3,
        ..Default::default()
    };
    let report = run_ablation(&data, &cfg, &VariantKind::ALL, &[0, 1, 2, 3, 4]).unwrap();
    let n = data.split(Split::Test).len() as f64;
    let p = 1.0 / 6.0;
    let bound = p + 3.0 * (p * (1.0 - p) / n).sqrt();
    for s in &report.summary {
        assert!(s.accuracy_mean <= bound, "{}: {} > {bound}", s.variant, s.accuracy_mean);
    }
}

#[test]
fn emotion_row_means_converge_to_the_planted_direction() {
    let synth = SynthConfig {
        samples_per_class: 200,
        d: 8,
        num_classes: 6,
        signal_emotion: 4.0,
        noise: 1.0,
        seed: 12,
        ..Default::default()
    };
    let data = generate_synthetic(&synth).unwrap();
    let dirs = synth_directions(&synth).unwrap();
    for class in 0..6 {
        let rows: Vec<Vec<f64>> = data
            .samples
            .iter()
            .filter(|s| s.bundle.label == Some(class))
            .map(|s| {
                let e = &s.bundle.emotion;
                (0..8).map(|j| (0..e.rows()).map(|r| e.row(r)[j]).sum::<f64>() / e.rows() as f64).collect()
            })
            .collect();
        let n = rows.len() as f64;
        for j in 0..8 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let planted = synth.signal_emotion * dirs.emotion.get(class)[j];
            assert!((mean - planted).abs() <= 3.0 * synth.noise / n.sqrt(), "class {class} dim {j}");
        }
    }
}
