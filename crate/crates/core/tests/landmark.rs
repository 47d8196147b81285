use landmark_core::datasets::synthetic_dataset;
use landmark_core::encoder::{BackboneConfig, EncoderConfig, EncoderState, FeatureMap};
use landmark_core::hypercolumn::HypercolumnExtractor;
use landmark_core::landmark::*;
use landmark_core::tensor::{Session, Tensor};
use proptest::prelude::*;

fn extractor() -> HypercolumnExtractor {
    let cfg = EncoderConfig { backbone: BackboneConfig { input_size: 64, ..Default::default() }, ..Default::default() };
    HypercolumnExtractor { encoder: EncoderState::new(&cfg).unwrap(), downscale: 4, batch: 16, fingerprint: "random".into() }
}

fn quick() -> RegressorConfig {
    RegressorConfig { max_steps: 40, eval_every: 10, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softargmax_shifts_with_the_heatmap(i in 3usize..7, j in 3usize..9, dx in 0usize..2, dy in 0usize..2) {
        let (h, w) = (10, 12);
        let bump = |ci: usize, cj: usize| {
            (0..h * w)
                .map(|k| {
                    let (y, x) = ((k / w) as f64, (k % w) as f64);
                    -((y - ci as f64).powi(2) + (x - cj as f64).powi(2)) / 2.0
                })
                .collect::<Vec<_>>()
        };
        let a = softargmax(&bump(i, j), h, w, 10.0);
        let b = softargmax(&bump(i + dy, j + dx), h, w, 10.0);
        prop_assert!((b.0 - a.0 - dx as f64 / w as f64).abs() < 1e-3);
        prop_assert!((b.1 - a.1 - dy as f64 / h as f64).abs() < 1e-3);
    }
}

#[test]
fn identity_head_reproduces_virtual_keypoints() {
    let cfg = RegressorConfig { virtual_keypoints: 3, ..Default::default() };
    let mut virt = RegressorState::<f64>::new(4, 3, &cfg).unwrap();
    let direct = RegressorState::<f64>::new(4, 3, &RegressorConfig { wiring: Wiring::Direct, ..cfg.clone() }).unwrap();
    for id in virt.store.ids().collect::<Vec<_>>() {
        let name = virt.store.entry(id).name.clone();
        let v = match name.as_str() {
            "head.weight" => Tensor::from_fn(&[6, 6], |k| if k / 6 == k % 6 { 1.0 } else { 0.0 }),
            "head.bias" => Tensor::zeros(&[6]),
            _ => direct.store.get(direct.store.find(&name).unwrap()).clone(),
        };
        *virt.store.get_mut(id) = v;
    }
    let x = Tensor::from_fn(&[4, 2, 5, 5], |k| ((k * 7919) % 13) as f64 / 13.0);
    let run = |r: &RegressorState<f64>| {
        let mut s = Session::new(false);
        s.freeze(&r.store);
        let v = s.input(x.clone());
        let out = r.forward(&mut s, v).unwrap();
        s.value(out).clone()
    };
    assert!(run(&virt).max_abs_diff(&run(&direct)) < 1e-12);
}

#[test]
fn predictions_are_clamped_inside_the_image() {
    let mut r = RegressorState::<f32>::new(2, 1, &RegressorConfig::default()).unwrap();
    let bias = r.store.find("head.bias").unwrap();
    *r.store.get_mut(bias) = Tensor::from_vec(&[2], vec![5.0, -3.0]).unwrap();
    let map = FeatureMap::new(Tensor::full(&[2, 4, 4], 0.5), 4, (16, 20)).unwrap();
    let p = r.predict(&[&map]).unwrap();
    let (x, y) = p[0].points[0];
    assert!((0.0..20.0).contains(&x) && (0.0..16.0).contains(&y), "{x} {y}");
}

#[test]
fn single_annotation_trains_and_leaves_extractor_untouched() {
    let data = synthetic_dataset(24, 64, 3, 1).unwrap();
    let ext = extractor();
    let before = ext.encoder.online.clone();
    let (_, s) = train_regressor(&ext, &data[..16], &data[16..], 1, &quick(), None).unwrap();
    assert!(s.val_iod.is_finite());
    assert_eq!(s.train_indices.len(), 1);
    assert!(ext.encoder.online.bitwise_eq(&before));
    assert!(train_regressor(&ext, &data[..16], &data[16..], 0, &quick(), None).is_err());
    assert!(train_regressor(&ext, &data[..16], &data[16..], 17, &quick(), None).is_err());
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let data = synthetic_dataset(20, 64, 4, 1).unwrap();
    let ext = extractor();
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path()).unwrap();
    let (a, sa) = train_regressor(&ext, &data[..12], &data[12..], 8, &quick(), Some(&cache)).unwrap();
    // second run reads every feature map from the cache
    let (b, sb) = train_regressor(&ext, &data[..12], &data[12..], 8, &quick(), Some(&cache)).unwrap();
    assert_eq!(sa, sb);
    assert!(a.store.bitwise_eq(&b.store));

    let path = dir.path().join("reg.ckpt");
    a.save_checkpoint(&path).unwrap();
    let c = RegressorState::<f32>::load_checkpoint(&path).unwrap();
    assert!(c.store.bitwise_eq(&a.store));
    assert_eq!(c.config, a.config);
}

#[test]
fn cache_returns_identical_maps() {
    let data = synthetic_dataset(3, 64, 5, 1).unwrap();
    let ext = extractor();
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path()).unwrap();
    let fresh = extract_features(&ext, &data, None).unwrap();
    let first = cache.get_or_compute(&ext, &data).unwrap();
    let cached = cache.get_or_compute(&ext, &data).unwrap();
    assert_eq!(fresh, first);
    assert_eq!(fresh, cached);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
}
