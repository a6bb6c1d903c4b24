use candle_core::{DType, Device, Tensor};
use crossdepth::losses::ssi_loss;
use crossdepth::models::{
    load_checkpoint, CouplingInit, CouplingUnit, DualModel, FeaturePyramid, InferenceModel, ModelConfig, ParamBuilder,
    ParamGroup, ParamStore,
};

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let n = b * 3 * h * w;
    let data: Vec<f32> = (0..n)
        .map(|i| (((i as u64 + 1) * (seed * 7919 + 104729)) % 1000) as f32 / 1000.0)
        .collect();
    Tensor::from_vec(data, (b, 3, h, w), &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn model(seed: u64) -> DualModel {
    DualModel::new(&ModelConfig::default(), seed, &Device::Cpu).unwrap()
}

#[test]
fn pyramid_and_output_shapes() {
    let m = model(0);
    let out = m.dual_forward(&images(2, 64, 64, 1), false).unwrap();
    let sizes = out.pyramid.sizes().unwrap();
    assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    let channels: Vec<usize> = out.pyramid.stages.iter().map(|s| s.dims()[1]).collect();
    assert_eq!(channels, ModelConfig::default().stage_channels_t().to_vec());
    for t in [&out.transformer.depth, &out.transformer.uncertainty, &out.cnn.depth, &out.cnn.uncertainty] {
        assert_eq!(t.dims(), &[2, 1, 64, 64]);
    }
}

#[test]
fn sizes_off_the_stride_grid_are_cropped_back() {
    let m = model(0);
    let out = m.dual_forward(&images(1, 50, 70, 2), false).unwrap();
    assert_eq!(out.transformer.depth.dims(), &[1, 1, 50, 70]);
    assert_eq!(out.cnn.uncertainty.dims(), &[1, 1, 50, 70]);
    assert!(m.dual_forward(&images(1, 6, 40, 2), false).is_err());
}

#[test]
fn outputs_stay_in_range_on_blank_input() {
    let m = model(3);
    let cfg = ModelConfig::default();
    let zeros = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let out = m.dual_forward(&zeros, true).unwrap();
    for branch in [&out.transformer, &out.cnn] {
        for d in flat(&branch.depth) {
            assert!(d >= cfg.depth_range.d_min as f32 && d <= cfg.depth_range.d_max as f32);
        }
        for u in flat(&branch.uncertainty) {
            assert!((0.0..=1.0).contains(&u));
        }
    }
}

#[test]
fn eval_forward_is_deterministic_and_train_forward_updates_statistics() {
    let m = model(4);
    let x = images(2, 32, 32, 5);
    let a = m.dual_forward(&x, false).unwrap();
    let b = m.dual_forward(&x, false).unwrap();
    assert_eq!(flat(&a.cnn.depth), flat(&b.cnn.depth));
    assert_eq!(flat(&a.transformer.depth), flat(&b.transformer.depth));

    let before = m.store().snapshot().unwrap();
    m.dual_forward(&x, true).unwrap();
    let after = m.store().snapshot().unwrap();
    let changed: Vec<&String> = before
        .keys()
        .filter(|k| flat(&before[*k]) != flat(&after[*k]))
        .collect();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|k| k.contains("running_")), "{changed:?}");
}

#[test]
fn same_seed_same_weights() {
    let a = model(9).store().snapshot().unwrap();
    let b = model(9).store().snapshot().unwrap();
    let c = model(10).store().snapshot().unwrap();
    assert!(a.keys().all(|k| flat(&a[k]) == flat(&b[k])));
    assert!(a.keys().any(|k| flat(&a[k]) != flat(&c[k])));
}

#[test]
fn parameter_names_carry_their_group() {
    let m = model(0);
    let mut groups = std::collections::BTreeSet::new();
    for name in m.store().names() {
        groups.insert(ParamGroup::of_name(&name).unwrap_or_else(|| panic!("{name}")));
    }
    assert_eq!(groups.len(), 3);
}

fn coupling(init: CouplingInit) -> CouplingUnit {
    let store = ParamStore::new(DType::F32, &Device::Cpu);
    let pb = ParamBuilder::new(&store, 11);
    CouplingUnit::new(&pb.pp("coupling.unit0"), 96, 64, init).unwrap()
}

fn random(dims: &[usize], seed: u64) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|i| ((i as f32 + seed as f32) * 0.37).sin()).collect();
    Tensor::from_vec(data, dims, &Device::Cpu).unwrap()
}

#[test]
fn zero_initialized_coupling_is_identity() {
    let unit = coupling(CouplingInit::Zero);
    let f_cnn = random(&[1, 64, 16, 16], 1);
    let f_t = random(&[1, 96, 8, 8], 2);
    let out = unit.forward(&f_cnn, &f_t, true).unwrap();
    assert_eq!(flat(&out), flat(&f_cnn));
}

#[test]
fn coupling_aligns_channels_and_resolution() {
    let unit = coupling(CouplingInit::Random);
    let f_cnn = random(&[2, 64, 16, 16], 1);
    let f_t = random(&[2, 96, 8, 8], 2);
    let out = unit.forward(&f_cnn, &f_t, true).unwrap();
    assert_eq!(out.dims(), &[2, 64, 16, 16]);
    assert_ne!(flat(&out), flat(&f_cnn));
    let shifted = unit.forward(&f_cnn, &(&f_t + 0.5).unwrap(), true).unwrap();
    assert_ne!(flat(&out), flat(&shifted));
}

#[test]
fn transferred_features_change_the_cnn_prediction() {
    let m = model(1);
    let x = images(1, 32, 32, 3);
    let (_, pyramid) = m.transformer().forward(&x).unwrap();
    let a = m.cnn().forward(&x, Some(&pyramid), false).unwrap();
    let bumped = FeaturePyramid::new(
        pyramid
            .stages
            .iter()
            .map(|s| (s + 1.0).unwrap())
            .collect(),
    )
    .unwrap();
    let b = m.cnn().forward(&x, Some(&bumped), false).unwrap();
    assert_ne!(flat(&a.depth), flat(&b.depth));
    assert!(m.cnn().forward(&x, None, false).is_err());
}

#[test]
fn cnn_loss_sends_no_gradient_into_the_transformer() {
    let m = model(2);
    let x = images(2, 32, 32, 4);
    let out = m.dual_forward(&x, true).unwrap();
    let gt = (out.cnn.depth.ones_like().unwrap() * 3.0).unwrap();
    let mask = gt.ones_like().unwrap();
    let loss = ssi_loss(&out.cnn.depth, &gt, &mask, 10.0, 0.85).unwrap();
    let grads = loss.backward().unwrap();
    let mut coupling_grads = 0;
    for (name, var) in m.store().trainable() {
        let g = grads.get(&var);
        match ParamGroup::of_name(&name).unwrap() {
            ParamGroup::Transformer => {
                if let Some(g) = g {
                    assert!(flat(g).iter().all(|v| *v == 0.0), "{name}");
                }
            }
            ParamGroup::Coupling => coupling_grads += usize::from(g.is_some()),
            ParamGroup::Cnn => {}
        }
    }
    assert!(coupling_grads > 0);
}

#[test]
fn transformer_prediction_ignores_cnn_weights() {
    let m = model(5);
    let x = images(1, 32, 32, 6);
    let before = m.dual_forward(&x, false).unwrap();
    let other = model(6).store().snapshot().unwrap();
    let foreign: std::collections::BTreeMap<_, _> = other
        .into_iter()
        .filter(|(k, _)| ParamGroup::of_name(k) != Some(ParamGroup::Transformer))
        .collect();
    m.store().assign(&foreign).unwrap();
    let after = m.dual_forward(&x, false).unwrap();
    assert_eq!(flat(&before.transformer.depth), flat(&after.transformer.depth));
    assert_eq!(flat(&before.transformer.uncertainty), flat(&after.transformer.uncertainty));
    assert_ne!(flat(&before.cnn.depth), flat(&after.cnn.depth));
}

#[test]
fn inference_matches_dual_forward_and_survives_stripping() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(7);
    // Move the running statistics away from their initial values first.
    m.dual_forward(&images(2, 32, 32, 8), true).unwrap();
    let full = dir.path().join("full.safetensors");
    m.save(&full, &[], &[("note", "test".into())]).unwrap();

    let x = images(1, 40, 56, 9);
    let dual = m.dual_forward(&x, false).unwrap();
    let inf = InferenceModel::from_checkpoint(&full, &Device::Cpu).unwrap();
    let pred = inf.forward(&x).unwrap();
    assert_eq!(flat(&pred.depth), flat(&dual.transformer.depth));
    assert_eq!(flat(&pred.uncertainty), flat(&dual.transformer.uncertainty));

    let ckpt = load_checkpoint(&full).unwrap();
    assert_eq!(ckpt.metadata["note"], "test");
    let stripped = dir.path().join("stripped.safetensors");
    ckpt.save_subset(&stripped, &["transformer"]).unwrap();
    let small = load_checkpoint(&stripped).unwrap();
    assert!(!small.has_group("cnn") && !small.has_group("coupling"));
    let inf2 = InferenceModel::from_loaded(&small, &Device::Cpu).unwrap();
    assert_eq!(flat(&inf2.forward(&x).unwrap().depth), flat(&pred.depth));

    assert!(inf.num_parameters() < m.store().num_trainable());
    assert!(DualModel::load(&stripped, &Device::Cpu).is_err());

    let cnn_only = dir.path().join("cnn.safetensors");
    ckpt.save_subset(&cnn_only, &["cnn", "coupling"]).unwrap();
    assert!(InferenceModel::from_checkpoint(&cnn_only, &Device::Cpu).is_err());
}

#[test]
fn checkpoint_round_trip_restores_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/m.safetensors");
    let m = model(8);
    let extra = vec![("adam.m.x".to_string(), random(&[3], 0))];
    m.save(&path, &extra, &[]).unwrap();
    let (loaded, ckpt) = DualModel::load(&path, &Device::Cpu).unwrap();
    let a = m.store().snapshot().unwrap();
    let b = loaded.store().snapshot().unwrap();
    assert_eq!(a.len(), b.len());
    assert!(a.keys().all(|k| flat(&a[k]) == flat(&b[k])));
    assert_eq!(flat(&ckpt.optimizer_values()["adam.m.x"]), flat(&extra[0].1));
    for e in &ckpt.manifest {
        assert_eq!(e.dtype, "f32");
        let expected = ParamGroup::of_name(&e.name).map_or("optimizer", |g| g.as_str());
        assert_eq!(e.group, expected);
    }
    let clash = vec![("cnn.foo".to_string(), random(&[1], 0))];
    assert!(m.save(&dir.path().join("x.safetensors"), &clash, &[]).is_err());
}

#[test]
fn coupling_can_be_disabled() {
    let cfg = ModelConfig {
        coupling_enabled: false,
        ..ModelConfig::default()
    };
    let m = DualModel::new(&cfg, 0, &Device::Cpu).unwrap();
    assert!(!m.cnn().coupling_enabled());
    assert!(m.store().names().iter().all(|n| !n.starts_with("coupling.")));
    let out = m.dual_forward(&images(1, 32, 32, 1), true).unwrap();
    assert_eq!(out.cnn.depth.dims(), &[1, 1, 32, 32]);
}
