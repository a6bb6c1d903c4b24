use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use crossdepth::augmentation::{augment_pipeline, sample_rng};
use crossdepth::data::{synthesize_split, Split, SynthOptions};
use crossdepth::losses::{ssi_loss, total_loss, urcd_loss, UrcdOptions};
use crossdepth::models::{load_checkpoint, DualModel, ParamGroup};
use crossdepth::trainer::*;
use crossdepth::{Error, Sample};

fn samples(n: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    let opts = SynthOptions {
        height: h,
        width: w,
        seed,
        ..SynthOptions::default()
    };
    synthesize_split(&opts, Split::Train, n).unwrap()
}

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn loss_on(model: &DualModel, batch: &Batch, cfg: &TrainConfig) -> f64 {
    let out = model.dual_forward(&batch.images, false).unwrap();
    let terms = total_loss(
        &out.transformer,
        &out.cnn,
        &batch.gt,
        &batch.mask,
        &cfg.weights,
        cfg.ablation.switches(false),
    )
    .unwrap();
    terms.bundle().unwrap().total
}

#[test]
fn one_step_lowers_the_loss_on_a_fixed_batch() {
    let data = samples(4, 32, 32, 1);
    let mut drops = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let model = DualModel::new(&cfg.model_config(), seed, &Device::Cpu).unwrap();
        let batch = Batch::new(&data, cfg.depth_range, &Device::Cpu).unwrap();
        // Settle the running statistics so eval-mode losses are comparable.
        for _ in 0..3 {
            model.dual_forward(&batch.images, true).unwrap();
        }
        let before = loss_on(&model, &batch, &cfg);
        let mut adam = Adam::new(&model.store().trainable()).unwrap();
        train_step(&model, &mut adam, &batch, &cfg, 0, 100).unwrap();
        drops.push(before - loss_on(&model, &batch, &cfg));
    }
    let mean = drops.iter().sum::<f64>() / drops.len() as f64;
    assert!(mean > 0.0, "{drops:?}");
}

#[test]
fn baseline_row_reduces_to_two_supervised_losses() {
    let data = samples(2, 32, 32, 2);
    let cfg = TrainConfig {
        ablation: Ablation::row(1).unwrap(),
        ..TrainConfig::default()
    };
    let model = DualModel::new(&cfg.model_config(), 0, &Device::Cpu).unwrap();
    let batch = Batch::new(&data, cfg.depth_range, &Device::Cpu).unwrap();
    let out = model.dual_forward(&batch.images, false).unwrap();
    let w = cfg.weights;
    let expected = ssi_loss(&out.transformer.depth, &batch.gt, &batch.mask, w.kappa, w.eta)
        .unwrap()
        .to_scalar::<f32>()
        .unwrap() as f64
        + ssi_loss(&out.cnn.depth, &batch.gt, &batch.mask, w.kappa, w.eta)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap() as f64;
    let terms = total_loss(&out.transformer, &out.cnn, &batch.gt, &batch.mask, &w, cfg.ablation.switches(false))
        .unwrap();
    let b = terms.bundle().unwrap();
    assert_eq!(b.urcd, 0.0);
    assert_eq!(b.u, 0.0);
    assert!((b.total - expected).abs() < 1e-5 * expected.abs());
}

#[test]
fn distillation_only_row_uses_unit_weights() {
    let data = samples(2, 32, 32, 3);
    let cfg = TrainConfig {
        ablation: Ablation::row(2).unwrap(),
        ..TrainConfig::default()
    };
    let model = DualModel::new(&cfg.model_config(), 1, &Device::Cpu).unwrap();
    let batch = Batch::new(&data, cfg.depth_range, &Device::Cpu).unwrap();
    let out = model.dual_forward(&batch.images, false).unwrap();
    let terms = total_loss(
        &out.transformer,
        &out.cnn,
        &batch.gt,
        &batch.mask,
        &cfg.weights,
        cfg.ablation.switches(false),
    )
    .unwrap();
    let unit = urcd_loss(
        &out.transformer.depth,
        &out.cnn.depth,
        &out.transformer.uncertainty,
        &out.cnn.uncertainty,
        Some(&batch.mask),
        UrcdOptions {
            rectify: false,
            valid_only: false,
        },
    )
    .unwrap();
    let b = terms.bundle().unwrap();
    assert_eq!(b.urcd, unit.to_scalar::<f32>().unwrap() as f64);
    assert_eq!(b.u, 0.0);
    assert_eq!(terms.weights.lambda2, 0.0);
    assert_eq!(terms.weights.lambda1, 0.1);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let data = samples(2, 32, 32, 4);
    let mut cfg = TrainConfig::default();
    // Weights bypass validation here; the uncertainty loss is strictly positive.
    cfg.weights.lambda2 = f64::INFINITY;
    let model = DualModel::new(&cfg.model_config(), 0, &Device::Cpu).unwrap();
    let batch = Batch::new(&data, cfg.depth_range, &Device::Cpu).unwrap();
    let mut adam = Adam::new(&model.store().trainable()).unwrap();
    match train_step(&model, &mut adam, &batch, &cfg, 7, 10) {
        Err(Error::NonFiniteLoss { step, batch_ids }) => {
            assert_eq!(step, 7);
            assert_eq!(batch_ids, vec!["train_0000".to_string(), "train_0001".to_string()]);
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: dir.path().to_path_buf(),
        ..FitOptions::default()
    };
    assert!(matches!(fit(&[], &[], &small_cfg(1), &opts), Err(Error::EmptyDataset(_))));
}

#[test]
fn default_run_on_64_samples_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let train = samples(64, 16, 24, 5);
    let val = samples(4, 16, 24, 6);
    let cfg = TrainConfig::default();
    let opts = FitOptions {
        out_dir: dir.path().to_path_buf(),
        ..FitOptions::default()
    };
    let report = fit(&train, &val, &cfg, &opts).unwrap();
    assert_eq!(report.steps, 30 * 16);
    let log = read_log(&report.log_path).unwrap();
    assert_eq!(log.len(), 480);
    assert_eq!(log.iter().map(|l| l.step).collect::<Vec<_>>(), (1..=480).collect::<Vec<_>>());
    assert!((log[0].lr - 1e-4).abs() < 1e-12);
    assert!(log.iter().all(|l| l.total.is_finite()));

    let best = report.best_checkpoint.expect("best checkpoint");
    assert!(best.exists() && report.last_checkpoint.exists());
    let last = load_checkpoint(&report.last_checkpoint).unwrap();
    assert!(is_resumable(&report.last_checkpoint).unwrap());
    assert!(!is_resumable(&best).unwrap());
    assert_eq!(last.metadata["step"], "480");
    let val_lines = std::fs::read_to_string(dir.path().join(VAL_LOG_FILE)).unwrap();
    assert_eq!(val_lines.lines().count(), 30);
    assert!(report.final_val.is_some());
}

#[test]
fn fixed_seed_reproduces_the_log_and_resume_replays_it() {
    let train = samples(6, 32, 32, 7);
    let val = samples(2, 32, 32, 8);
    let cfg = small_cfg(3);
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str, resume: Option<std::path::PathBuf>, stop: Option<u64>| {
        let opts = FitOptions {
            out_dir: root.path().join(name),
            resume,
            stop_after: stop,
        };
        fit(&train, &val, &cfg, &opts).unwrap()
    };
    let a = run("a", None, None);
    let b = run("b", None, None);
    let log_a = read_log(&a.log_path).unwrap();
    assert_eq!(log_a, read_log(&b.log_path).unwrap());
    assert_eq!(log_a.len(), 6);

    // Interrupt mid-epoch (two steps per epoch), then continue.
    let part = run("c", None, Some(3));
    assert_eq!(part.steps, 3);
    let rest = run("c", Some(part.last_checkpoint.clone()), None);
    assert_eq!(rest.steps, 6);
    assert_eq!(read_log(&rest.log_path).unwrap(), log_a);

    let wa = load_checkpoint(&a.last_checkpoint).unwrap();
    let wc = load_checkpoint(&rest.last_checkpoint).unwrap();
    assert_eq!(wa.tensors.len(), wc.tensors.len());
    for (k, t) in &wa.tensors {
        assert_eq!(flat(t), flat(&wc.tensors[k]), "{k}");
    }
}

#[test]
fn without_distillation_the_transformer_trains_as_if_alone() {
    let train = samples(4, 32, 32, 9);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ablation: Ablation::new(false, false, true, true),
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: dir.path().to_path_buf(),
        ..FitOptions::default()
    };
    let report = fit(&train, &[], &cfg, &opts).unwrap();
    let joint = load_checkpoint(&report.last_checkpoint).unwrap();

    // Same initialization, same batches, transformer loss and parameters only.
    let model = DualModel::new(&cfg.model_config(), cfg.seed, &Device::Cpu).unwrap();
    let params: Vec<_> = model
        .store()
        .trainable()
        .into_iter()
        .filter(|(k, _)| ParamGroup::of_name(k) == Some(ParamGroup::Transformer))
        .collect();
    let mut adam = Adam::new(&params).unwrap();
    let total = cfg.total_steps(train.len());
    let aug = cfg.augment_config();
    let mut step = 0;
    for epoch in 0..cfg.epochs as u64 {
        for chunk in epoch_order(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let picked: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = sample_rng(cfg.seed, epoch, &train[i].id);
                    augment_pipeline(&train[i], &aug, &mut rng).unwrap().0
                })
                .collect();
            let batch = Batch::new(&picked, cfg.depth_range, &Device::Cpu).unwrap();
            let (out, _) = model.transformer().forward(&batch.images).unwrap();
            let w = cfg.weights;
            let loss = ssi_loss(&out.depth, &batch.gt, &batch.mask, w.kappa, w.eta).unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&params, &grads, lr_at(step, total, &cfg), cfg.grad_clip).unwrap();
            step += 1;
        }
    }
    let alone: BTreeMap<String, Tensor> = params.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    for (k, t) in &alone {
        assert_eq!(flat(t), flat(&joint.tensors[k]), "{k}");
    }
}

#[test]
fn ablation_rows_come_back_in_request_order() {
    let train = samples(4, 16, 16, 10);
    let val = samples(2, 16, 16, 11);
    let rows: Vec<Ablation> = ["7", "1", "cd"].iter().map(|s| Ablation::parse(s).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let results = run_ablation(&train, &val, &small_cfg(1), &rows, dir.path()).unwrap();
    let got: Vec<Ablation> = results.iter().map(|r| r.ablation).collect();
    assert_eq!(got, rows);
    let csv = ablation_csv(&results);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("id,cd,up,cu,cf,seed,final_loss,abs_rel"));
    assert!(lines[1].starts_with("7,1,1,1,1,"));
    assert!(lines[2].starts_with("1,0,0,0,0,"));
    assert!(lines[3].starts_with("2,1,0,0,0,"));
    let width = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));
}
