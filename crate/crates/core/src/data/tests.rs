use super::*;
use crate::metrics;
use proptest::prelude::*;

// -- haze synthesis -----------------------------------------------------------

#[test]
fn full_transmission_leaves_the_scene_untouched() {
    let spec = DatasetSpec { size: 8, ..Default::default() };
    let clear: Tensor<f64> = gen_scene(&spec, 0).unwrap();
    let t = Tensor::ones([1, 8, 8]);
    let hazy = synth_haze(&clear, &t, 0.9).unwrap();
    assert_eq!(hazy.data(), clear.data());
}

#[test]
fn zero_transmission_is_pure_airlight() {
    let spec = DatasetSpec { size: 8, ..Default::default() };
    let clear: Tensor<f64> = gen_scene(&spec, 1).unwrap();
    let t = Tensor::zeros([1, 8, 8]);
    let hazy = synth_haze(&clear, &t, 0.85).unwrap();
    assert!(hazy.data().iter().all(|&v| v == 0.85));
}

#[test]
fn half_transmission_blends_exactly() {
    let clear = Tensor::<f64>::full([3, 4, 4], 0.5);
    let t = Tensor::full([1, 4, 4], 0.5);
    let hazy = synth_haze(&clear, &t, 1.0).unwrap();
    assert!(hazy.data().iter().all(|&v| (v - 0.75).abs() <= 1e-12));
}

#[test]
fn out_of_range_airlight_is_rejected() {
    let clear = Tensor::<f64>::full([3, 4, 4], 0.5);
    let t = Tensor::full([1, 4, 4], 0.5);
    assert!(synth_haze(&clear, &t, 1.2).is_err());
    assert!(synth_haze(&clear, &t, -0.1).is_err());
}

#[test]
fn synth_is_monotone_in_airlight_where_haze_exists() {
    let spec = DatasetSpec { size: 8, ..Default::default() };
    let clear: Tensor<f64> = gen_scene(&spec, 2).unwrap();
    let t = Tensor::full([1, 8, 8], 0.6);
    let low = synth_haze(&clear, &t, 0.7).unwrap();
    let high = synth_haze(&clear, &t, 0.9).unwrap();
    for (&l, &h) in low.data().iter().zip(high.data()) {
        assert!(h >= l, "raising airlight must never darken a hazy pixel");
    }
}

// -- generators -----------------------------------------------------------------

#[test]
fn generation_is_bit_identical_per_seed_and_index() {
    let spec = DatasetSpec::default();
    let a: HazePair<f32> = gen_pair(&spec, 17).unwrap();
    let b: HazePair<f32> = gen_pair(&spec, 17).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.clear), bits(&b.clear));
    assert_eq!(bits(&a.transmission), bits(&b.transmission));
    assert_eq!(bits(&a.hazy), bits(&b.hazy));
    assert_eq!(a.airlight.to_bits(), b.airlight.to_bits());

    let c: HazePair<f32> = gen_pair(&spec, 18).unwrap();
    assert_ne!(bits(&a.clear), bits(&c.clear), "different indices must differ");
}

#[test]
fn generated_values_stay_in_declared_ranges() {
    let spec = DatasetSpec::default();
    for index in 0..10 {
        let pair: HazePair<f64> = gen_pair(&spec, index).unwrap();
        assert!(pair.clear.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(pair.hazy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(pair
            .transmission
            .data()
            .iter()
            .all(|&v| (spec.t_min..=spec.t_max).contains(&v)));
        assert!((0.7..=1.0).contains(&pair.airlight));
    }
}

#[test]
fn scenes_are_never_flat() {
    let spec = DatasetSpec::default();
    for index in 0..10 {
        let scene: Tensor<f64> = gen_scene(&spec, index).unwrap();
        let n = spec.size;
        for c in 0..3 {
            let plane = &scene.data()[c * n * n..(c + 1) * n * n];
            let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max - min > 1e-3, "scene {index} channel {c} is constant");
        }
    }
}

#[test]
fn transmission_neighbor_steps_are_bounded_exhaustively() {
    for size in [8usize, 16, 32] {
        let spec = DatasetSpec { size, ..Default::default() };
        for index in 0..8 {
            let t: Tensor<f64> = gen_transmission(&spec, index).unwrap();
            let d = t.data();
            for y in 0..size {
                for x in 0..size {
                    if x + 1 < size {
                        let step = (d[y * size + x] - d[y * size + x + 1]).abs();
                        assert!(step <= 0.2, "horizontal step {step} at ({x},{y}) size {size}");
                    }
                    if y + 1 < size {
                        let step = (d[y * size + x] - d[(y + 1) * size + x]).abs();
                        assert!(step <= 0.2, "vertical step {step} at ({x},{y}) size {size}");
                    }
                }
            }
        }
    }
}

#[test]
fn hazy_pair_satisfies_the_scattering_identity() {
    let spec = DatasetSpec::default();
    let pair: HazePair<f64> = gen_pair(&spec, 3).unwrap();
    let n = spec.size;
    for c in 0..3 {
        for s in 0..n * n {
            let expected =
                pair.clear.data()[c * n * n + s] * pair.transmission.data()[s] + pair.airlight * (1.0 - pair.transmission.data()[s]);
            assert!((pair.hazy.data()[c * n * n + s] - expected).abs() <= 1e-6);
        }
    }
}

#[test]
fn default_dataset_degradation_sits_in_the_sanity_band() {
    let spec = DatasetSpec::default();
    let pairs: Vec<HazePair<f32>> = gen_dataset(&spec).unwrap();
    assert_eq!(pairs.len(), 100);
    let mut total = 0.0;
    for pair in &pairs {
        let db = metrics::psnr(&pair.hazy, &pair.clear).unwrap();
        assert!(db < metrics::PSNR_CAP_DB, "haze must actually change the image");
        total += db;
    }
    let mean = total / pairs.len() as f64;
    assert!(
        (8.0..25.0).contains(&mean),
        "mean degradation {mean} dB outside the sanity band"
    );
}

// -- ppm io ---------------------------------------------------------------------

#[test]
fn white_pixel_encodes_to_the_exact_bytes() {
    let img = Tensor::<f32>::ones([3, 1, 1]);
    let bytes = ppm_encode(&img).unwrap();
    assert_eq!(bytes, b"P6\n1 1\n255\n\xFF\xFF\xFF");
}

#[test]
fn unsupported_maxval_is_a_distinct_error() {
    let err = ppm_decode::<f32>(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap_err();
    assert!(matches!(err, Error::PpmUnsupportedMaxval(65535)));
}

#[test]
fn malformed_header_is_a_distinct_error() {
    assert!(matches!(ppm_decode::<f32>(b"P5\n1 1\n255\n\x00").unwrap_err(), Error::PpmHeader(_)));
    assert!(matches!(ppm_decode::<f32>(b"P6\nxx 1\n255\n").unwrap_err(), Error::PpmHeader(_)));
}

#[test]
fn truncated_payload_is_a_distinct_error() {
    let err = ppm_decode::<f32>(b"P6\n2 2\n255\n\xFF\xFF").unwrap_err();
    match err {
        Error::PpmTruncated { expected, got } => {
            assert_eq!(expected, 12);
            assert_eq!(got, 2);
        }
        other => panic!("wrong error kind: {other:?}"),
    }
}

#[test]
fn header_comments_are_tolerated() {
    let img = ppm_decode::<f32>(b"P6\n# made by hand\n1 1\n255\n\x80\x00\xFF").unwrap();
    assert_eq!(img.shape(), &[3, 1, 1]);
    assert!((img.data()[0] - 128.0 / 255.0).abs() < 1e-6);
}

#[test]
fn round_trip_through_disk_stays_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.ppm");
    let spec = DatasetSpec { size: 16, ..Default::default() };
    let img: Tensor<f32> = gen_scene(&spec, 4).unwrap();
    ppm_write(&img, &path).unwrap();
    let back: Tensor<f32> = ppm_read(&path).unwrap();
    assert_eq!(back.shape(), img.shape());
    for (&a, &b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encode_decode_round_trip_bounds_error(seed in 0u64..500) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_rng_uniform([3, 5, 7], 0.0, 1.0, &mut rng);
        let back: Tensor<f32> = ppm_decode(&ppm_encode(&img).unwrap()).unwrap();
        for (&a, &b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
        }
    }
}

// -- manifest ---------------------------------------------------------------------

#[test]
fn manifest_round_trips_and_rejects_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.txt");
    let entries = vec![
        ("hazy_000.ppm".to_string(), "clear_000.ppm".to_string()),
        ("hazy_001.ppm".to_string(), "clear_001.ppm".to_string()),
    ];
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);

    std::fs::write(&path, "only_one_field.ppm\n").unwrap();
    assert!(read_manifest(&path).is_err());
}

#[test]
fn load_pairs_resolves_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { size: 8, count: 2, ..Default::default() };
    let mut entries = Vec::new();
    for i in 0..spec.count {
        let pair: HazePair<f32> = gen_pair(&spec, i).unwrap();
        let hazy_name = format!("hazy_{i:03}.ppm");
        let clear_name = format!("clear_{i:03}.ppm");
        ppm_write(&pair.hazy, &dir.path().join(&hazy_name)).unwrap();
        ppm_write(&pair.clear, &dir.path().join(&clear_name)).unwrap();
        entries.push((hazy_name, clear_name));
    }
    let manifest = dir.path().join("index.txt");
    write_manifest(&manifest, &entries).unwrap();
    let pairs: Vec<ImagePair<f32>> = load_pairs(&manifest).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[0].hazy.shape(), &[3, 8, 8]);
}
