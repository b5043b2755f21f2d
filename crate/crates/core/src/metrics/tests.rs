use super::*;
use crate::gradcheck::probe_tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn unit_image(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_rng_uniform(shape.to_vec(), 0.0, 1.0, &mut rng)
}

// -- psnr ---------------------------------------------------------------------

#[test]
fn identical_images_hit_the_cap() {
    let x = unit_image(&[3, 8, 8], 1);
    assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
}

#[test]
fn uniform_difference_of_point_one_is_twenty_db() {
    let a = Tensor::<f64>::full([3, 16, 16], 0.2);
    let b = Tensor::<f64>::full([3, 16, 16], 0.3);
    let got = psnr(&a, &b).unwrap();
    assert!((got - 20.0).abs() <= 1e-9, "MSE 0.01 is exactly 20 dB, got {got}");
}

#[test]
fn psnr_matches_direct_formula_oracle() {
    let a = unit_image(&[3, 10, 10], 2);
    let b = unit_image(&[3, 10, 10], 3);
    let mut sq = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        sq += (x - y) * (x - y);
    }
    let expected = 10.0 * (1.0 / (sq / a.numel() as f64)).log10();
    assert!((psnr(&a, &b).unwrap() - expected).abs() <= 1e-6);
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let base = unit_image(&[3, 12, 12], 4);
    let noise = probe_tensor(&[3, 12, 12], 5);
    let mut last = f64::INFINITY;
    for amplitude in [0.01, 0.05, 0.1, 0.2] {
        let noisy = Tensor::new(
            base.shape().to_vec(),
            base.data()
                .iter()
                .zip(noise.data())
                .map(|(&v, &n)| v + amplitude * n)
                .collect::<Vec<f64>>(),
        )
        .unwrap();
        let db = psnr(&base, &noisy).unwrap();
        assert!(db < last, "psnr must strictly decrease: {db} !< {last}");
        last = db;
    }
}

// -- ssim ---------------------------------------------------------------------

#[test]
fn ssim_of_identical_images_is_one() {
    let x = unit_image(&[3, 16, 16], 6);
    let got = ssim(&x, &x).unwrap();
    assert!((got - 1.0).abs() <= 1e-9, "got {got}");
}

#[test]
fn ssim_is_symmetric_bit_for_bit() {
    let a = unit_image(&[3, 20, 14], 7);
    let b = unit_image(&[3, 20, 14], 8);
    assert_eq!(ssim(&a, &b).unwrap().to_bits(), ssim(&b, &a).unwrap().to_bits());
}

#[test]
fn ssim_of_constant_images_matches_closed_form() {
    // For constant 0.5 vs 0.6 all variances vanish, so only the luminance
    // term survives: (2*0.5*0.6 + C1) / (0.25 + 0.36 + C1).
    let a = Tensor::<f64>::full([1, 16, 16], 0.5);
    let b = Tensor::<f64>::full([1, 16, 16], 0.6);
    let c1 = 0.01f64.powi(2);
    let expected = (2.0 * 0.5 * 0.6 + c1) / (0.5f64.powi(2) + 0.6f64.powi(2) + c1);
    let got = ssim(&a, &b).unwrap();
    assert!((got - expected).abs() <= 1e-9, "got {got}, closed form {expected}");
}

#[test]
fn ssim_rejects_tiny_images() {
    let x = unit_image(&[3, 8, 8], 9);
    assert!(ssim(&x, &x).is_err(), "images below the window size are an error");
}

#[test]
fn ssim_is_within_declared_range() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let a = Tensor::<f64>::from_rng_uniform([1, 14, 14], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::from_rng_uniform([1, 14, 14], 0.0, 1.0, &mut rng);
        let v = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn psnr_is_symmetric_and_capped(seed in 0u64..200) {
        let a = unit_image(&[3, 8, 8], seed);
        let b = unit_image(&[3, 8, 8], seed + 7);
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(ab <= PSNR_CAP_DB);
    }
}

#[test]
fn mse_shape_mismatch_is_an_error() {
    let a = Tensor::<f64>::zeros([3, 4, 4]);
    let b = Tensor::<f64>::zeros([3, 4, 5]);
    assert!(mse(&a, &b).is_err());
    let _ = rand_chacha::ChaCha8Rng::seed_from_u64(0).gen_range(0..2);
}
