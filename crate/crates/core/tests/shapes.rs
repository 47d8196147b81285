use landmark_core::datasets::synthetic_dataset;
use landmark_core::encoder::{BackboneConfig, EncoderConfig, EncoderState};
use landmark_core::hypercolumn::FeatureExtractor;
use landmark_core::image::{Image, Normalization};
use landmark_core::stage2::{DenseConfig, DenseModelState};

#[test]
fn dense_map_at_96_px_is_24_by_24_by_64() {
    let cfg = EncoderConfig { backbone: BackboneConfig { input_size: 96, ..Default::default() }, ..Default::default() };
    let model = DenseModelState::new(&EncoderState::<f32>::new(&cfg).unwrap(), &DenseConfig::default()).unwrap();
    let img = Image::from_fn(96, 96, |x, y| [x as f32 / 96.0, y as f32 / 96.0, 0.5]);
    let maps = model.extract(&[&img]).unwrap();
    assert_eq!((maps[0].channels(), maps[0].height(), maps[0].width()), (64, 24, 24));
    assert_eq!(maps[0].downscale, 4);
}

#[test]
fn synthetic_normalization_defaults() {
    let data = synthetic_dataset(512, 64, 0, 2).unwrap();
    let measured = Normalization::measure(data.iter().map(|s| &s.image));
    let stored = Normalization::SYNTHETIC;
    for c in 0..3 {
        assert!((measured.mean[c] - stored.mean[c]).abs() < 5e-3, "{measured:?} vs {stored:?}");
        assert!((measured.std[c] - stored.std[c]).abs() < 5e-3, "{measured:?} vs {stored:?}");
    }
}
