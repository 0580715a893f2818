use hydroseg::augment::{
    augment, hflip, photometric, random_hflip, random_photometric, random_scale_crop, scale_crop, AugmentConfig,
    PhotometricParams, Sample, ScaleCropParams,
};
use hydroseg::raster::{FloatRaster, LabelMask};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Always yields zero bits, so every `random::<f64>()` draw is 0.0.
struct ZeroRng;

impl RngCore for ZeroRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

fn asymmetric(w: usize, h: usize) -> Sample {
    let n = w * h;
    let data = (0..3 * n).map(|i| (i % 97) as f32 / 97.0).collect();
    let image = FloatRaster::new(w, h, 3, data).unwrap();
    let mask = LabelMask::from_fn(w, h, |x, y| x * 3 + y < 5).unwrap();
    Sample::new(image, mask).unwrap()
}

fn constant(size: usize, v: f32, water: bool) -> Sample {
    let image = FloatRaster::new(size, size, 3, vec![v; 3 * size * size]).unwrap();
    Sample::new(image, LabelMask::from_fn(size, size, |_, _| water).unwrap()).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, size: usize) -> Sample {
    let data = (0..3 * size * size).map(|_| rng.random::<f32>()).collect();
    let image = FloatRaster::new(size, size, 3, data).unwrap();
    Sample::new(image, LabelMask::from_fn(size, size, |_, _| rng.random_bool(0.3)).unwrap()).unwrap()
}

#[test]
fn flip_reverses_columns_of_image_and_mask() {
    let s = asymmetric(4, 4);
    let f = hflip(&s);
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(f.image.get(c, x, y), s.image.get(c, 3 - x, y));
            }
        }
    }
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(f.mask.get(x, y), s.mask.get(3 - x, y));
        }
    }
    assert_eq!(hflip(&f), s);
}

#[test]
fn flip_probability_extremes() {
    let s = asymmetric(5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let never = AugmentConfig { flip_prob: 0.0, ..Default::default() };
    let always = AugmentConfig { flip_prob: 1.0, ..Default::default() };
    for _ in 0..20 {
        assert_eq!(random_hflip(&s, &mut rng, &never), s);
        assert_eq!(random_hflip(&s, &mut rng, &always), hflip(&s));
    }
    let mut forced = ZeroRng;
    let half = AugmentConfig::default();
    assert_eq!(random_hflip(&random_hflip(&s, &mut forced, &half), &mut forced, &half), s);
}

#[test]
fn unit_scale_at_origin_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_sample(&mut rng, 32);
    let out = scale_crop(&s, ScaleCropParams { scale: 1.0, offset: (0, 0) }, 32).unwrap();
    assert_eq!(out, s);
}

#[test]
fn upscaling_a_constant_patch_stays_constant() {
    let s = constant(16, 0.3, true);
    let out = scale_crop(&s, ScaleCropParams { scale: 2.0, offset: (7, 11) }, 16).unwrap();
    assert!(out.image.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    assert_eq!(out.mask.water_count(), 256);
}

#[test]
fn half_scale_all_water_is_reflect_padded_to_all_water() {
    let s = constant(64, 0.7, true);
    let out = scale_crop(&s, ScaleCropParams { scale: 0.5, offset: (0, 0) }, 64).unwrap();
    assert_eq!((out.width(), out.height()), (64, 64));
    assert_eq!(out.mask.water_count(), 64 * 64);
}

#[test]
fn half_scale_padding_mirrors_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_sample(&mut rng, 16);
    let small = scale_crop(&s, ScaleCropParams { scale: 0.5, offset: (0, 0) }, 8).unwrap();
    let padded = scale_crop(&s, ScaleCropParams { scale: 0.5, offset: (0, 0) }, 16).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let fold = |i: usize| if i % 14 < 8 { i % 14 } else { 14 - i % 14 };
            assert_eq!(padded.mask.get(x, y), small.mask.get(fold(x), fold(y)));
            assert_eq!(padded.image.get(1, x, y), small.image.get(1, fold(x), fold(y)));
        }
    }
}

#[test]
fn out_of_frame_crop_is_rejected() {
    let s = constant(8, 0.1, false);
    assert!(scale_crop(&s, ScaleCropParams { scale: 1.0, offset: (1, 0) }, 8).is_err());
}

/// Ramps encode the source coordinate in channels 0 and 1; the mask is a
/// 4×4-block checkerboard. After any geometric transform, the decoded source
/// coordinate must select the same checkerboard cell the mask carries, away
/// from cell boundaries.
#[test]
fn geometric_ops_move_image_and_mask_together() {
    let n = 64usize;
    let mut data = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            data[y * n + x] = (x as f32 + 0.5) / n as f32;
            data[n * n + y * n + x] = (y as f32 + 0.5) / n as f32;
        }
    }
    let cell = |x: f64, y: f64| ((x / 4.0).floor() as i64 + (y / 4.0).floor() as i64) % 2 == 0;
    let mask = LabelMask::from_fn(n, n, |x, y| cell(x as f64, y as f64)).unwrap();
    let s = Sample::new(FloatRaster::new(n, n, 3, data).unwrap(), mask).unwrap();
    let cfg = AugmentConfig { out_size: n, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for _ in 0..30 {
        let t = random_scale_crop(&random_hflip(&s, &mut rng, &cfg), &mut rng, &cfg).unwrap();
        for y in 0..n {
            for x in 0..n {
                let sx = t.image.get(0, x, y) as f64 * n as f64 - 0.5;
                let sy = t.image.get(1, x, y) as f64 * n as f64 - 0.5;
                let (rx, ry) = (sx.round(), sy.round());
                let near_edge = |v: f64| {
                    let m = v.rem_euclid(4.0);
                    m < 0.5 || m > 2.5
                };
                if near_edge(rx) || near_edge(ry) || (sx - rx).abs() > 0.45 || (sy - ry).abs() > 0.45 {
                    continue;
                }
                assert_eq!(t.mask.get(x, y), cell(rx, ry), "pixel ({x},{y}) source ({sx},{sy})");
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000, "only {checked} pixels checked");
}

#[test]
fn photometric_examples() {
    let s = constant(4, 0.2, false);
    let id = photometric(
        &s,
        PhotometricParams { brightness: Some(0.0), contrast: Some(1.0), saturation: Some(1.0) },
    );
    assert_eq!(id.image, s.image);
    let c = photometric(&s, PhotometricParams { contrast: Some(1.5), ..Default::default() });
    let want = 0.5 + 1.5 * (0.2 - 0.5);
    assert!(c.image.data().iter().all(|&v| (v as f64 - want).abs() < 1e-6));
    assert!((want - 0.05).abs() < 1e-12);
}

#[test]
fn saturation_zero_collapses_to_luma() {
    let image = FloatRaster::new(1, 1, 3, vec![1.0, 0.5, 0.0]).unwrap();
    let s = Sample::new(image, LabelMask::zeros(1, 1).unwrap()).unwrap();
    let g = photometric(&s, PhotometricParams { saturation: Some(0.0), ..Default::default() });
    let luma = 0.299 + 0.587 * 0.5;
    for c in 0..3 {
        assert!((g.image.get(c, 0, 0) as f64 - luma).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmented_samples_stay_valid(seed in any::<u64>(), size in 8usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, size);
        let cfg = AugmentConfig { out_size: size, ..Default::default() };
        let t = augment(&s, &mut rng, &cfg).unwrap();
        prop_assert_eq!((t.width(), t.height()), (size, size));
        prop_assert!(t.mask.data().iter().all(|&v| v <= 1));
        prop_assert!(t.image.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn photometric_never_touches_the_mask(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, 10);
        let t = random_photometric(&s, &mut rng, &AugmentConfig::default());
        prop_assert_eq!(t.mask, s.mask);
    }
}
