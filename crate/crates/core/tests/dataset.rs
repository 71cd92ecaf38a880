use osa_doa::dataset::{
    decode_dataset, encode_dataset, generate_dataset, make_label, to_feature_tensor, DatasetSpec, LabelMode, Payload,
    SnrSpec, WMode,
};
use osa_doa::{ArrayConfig, Error, LabelGrid, C64};

fn spec(reps: usize, pairs: usize) -> DatasetSpec {
    DatasetSpec {
        snr: SnrSpec::Levels(vec![-10.0, 0.0, 10.0]),
        reps,
        pairs_per_level: pairs,
        ..DatasetSpec::default()
    }
}

#[test]
fn full_scale_grid_counts() {
    let ds = generate_dataset(&spec(2, 0), &ArrayConfig::full_scale()).unwrap();
    assert_eq!(ds.len(), 1086);
    assert_eq!(ds.grid().len(), 181);
    assert_eq!(ds.k(), 15);
}

#[test]
fn mixed_dataset_labels_and_separation() {
    let cfg = ArrayConfig::scaled_osa();
    let ds = generate_dataset(&spec(1, 40), &cfg).unwrap();
    assert_eq!(ds.len(), 3 * 121 + 3 * 40);
    assert_eq!(ds.manifest.two_source, 120);
    for s in &ds.samples {
        assert_eq!(s.label.ones(), s.meta.thetas.len());
        assert_eq!(s.label, make_label(&s.meta.thetas, &ds.grid(), LabelMode::Training).unwrap());
        if let [a, b] = s.meta.thetas[..] {
            assert!((a - b).abs() >= 2.0);
        }
    }
    assert_eq!(ds.filter_sources(2).len(), 120);
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let cfg = ArrayConfig::scaled_osa();
    let a = generate_dataset(&spec(1, 5), &cfg).unwrap();
    let b = generate_dataset(&spec(1, 5), &cfg).unwrap();
    assert_eq!(encode_dataset(&a, Payload::F64).unwrap(), encode_dataset(&b, Payload::F64).unwrap());
    let mut other = spec(1, 5);
    other.master_seed = 1;
    let c = generate_dataset(&other, &cfg).unwrap();
    assert_ne!(a.samples[0].noisy, c.samples[0].noisy);
}

#[test]
fn per_sample_combiners_differ() {
    let mut s = spec(1, 0);
    s.w_mode = WMode::PerSample;
    let ds = generate_dataset(&s, &ArrayConfig::scaled_osa()).unwrap();
    assert_ne!(ds.samples[0].meta.w_seed, ds.samples[1].meta.w_seed);
    assert!(ds.fixed_beamformer().is_err());
}

#[test]
fn f32_payload_round_trips_within_single_precision() {
    let ds = generate_dataset(&spec(1, 0), &ArrayConfig::scaled_osa()).unwrap();
    let back = decode_dataset(&encode_dataset(&ds, Payload::F32).unwrap()).unwrap();
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        for (x, y) in a.noisy.data.iter().zip(&b.noisy.data) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }
}

#[test]
fn scaling_the_covariance_leaves_features_unchanged() {
    let mut c = osa_doa::CMatrix::identity(3, 3);
    c[(0, 1)] = C64::new(0.3, -0.2);
    c[(1, 0)] = C64::new(0.3, 0.2);
    let f = to_feature_tensor(&c, None).unwrap();
    let g = to_feature_tensor(&(&c * C64::new(17.5, 0.0)), None).unwrap();
    for (a, b) in f.data.iter().zip(&g.data) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((g.norm_factor / f.norm_factor - 17.5).abs() < 1e-12);
}

#[test]
fn off_grid_labels() {
    let grid = LabelGrid::new(90.0, 1.0).unwrap();
    assert!(matches!(make_label(&[10.1], &grid, LabelMode::Training), Err(Error::Domain(_))));
    let l = make_label(&[10.1], &grid, LabelMode::Evaluation).unwrap();
    assert!(l.off_grid);
    assert_eq!(l.active(), [100]);
}
