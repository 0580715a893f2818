use hydroseg::raster::{
    decode_mask, encode_image, encode_mask, load_image, load_mask, normalize_image, save_image, save_mask,
    LabelMask, RasterImage,
};
use hydroseg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_masks_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..50 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let data = (0..w * h).map(|_| rng.random_range(0..2u8)).collect();
        let m = LabelMask::new(w, h, data).unwrap();
        let path = dir.path().join(format!("m{i}.png"));
        save_mask(&m, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back, m);
        let reencoded = encode_mask(&back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), reencoded);
        assert_eq!(decode_mask(&reencoded).unwrap(), m);
    }
}

#[test]
fn image_round_trips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = (0..17 * 9 * 3).map(|_| rng.random()).collect();
    let img = RasterImage::new(17, 9, data).unwrap();
    let path = dir.path().join("img.png");
    save_image(&img, &path).unwrap();
    assert_eq!(load_image(&path).unwrap(), img);
    assert_eq!(std::fs::read(&path).unwrap(), encode_image(&img).unwrap());
}

#[test]
fn rgb_file_loaded_as_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgb.png");
    save_image(&RasterImage::filled(2, 2, [0, 0, 0]).unwrap(), &path).unwrap();
    assert!(matches!(load_mask(&path), Err(Error::UnsupportedColorType(_))));
    assert!(matches!(load_mask(dir.path().join("nope.png")), Err(Error::NotFound(_))));
}

proptest! {
    #[test]
    fn normalization_is_affine(
        pairs in proptest::collection::vec((0u8..=255, 0u8..=255), 1..64),
    ) {
        let (mean, std) = (0.5f32, 0.5f32);
        // keep a+b even so the midpoint is an exact sample
        let pairs: Vec<(u8, u8)> = pairs.into_iter().map(|(a, b)| (a, b & 0xFE | (a & 1))).collect();
        let n = pairs.len();
        let a: Vec<u8> = pairs.iter().flat_map(|p| [p.0; 3]).collect();
        let b: Vec<u8> = pairs.iter().flat_map(|p| [p.1; 3]).collect();
        let m: Vec<u8> = pairs.iter().flat_map(|p| [((p.0 as u16 + p.1 as u16) / 2) as u8; 3]).collect();
        let f = |d: Vec<u8>| normalize_image(&RasterImage::new(n, 1, d).unwrap(), [mean; 3], [std; 3]).unwrap();
        let (fa, fb, fm) = (f(a), f(b), f(m));
        for i in 0..fa.data().len() {
            let r = fa.data()[i] as f64 + fb.data()[i] as f64 - 2.0 * fm.data()[i] as f64;
            prop_assert!(r.abs() <= 1e-6, "residual {}", r);
        }
    }
}
