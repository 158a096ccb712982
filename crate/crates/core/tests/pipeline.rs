mod common;

use proptest::prelude::*;
use sae_core::image_io::RgbImage;
use sae_core::model_file::load_model;
use sae_core::network::ScalableModel;
use sae_core::pipeline::{decode_progressive, sae_decode, sae_encode, sae_encode_traced, truncate, LayeredBitstream};
use sae_core::training::synthetic_images;
use sae_core::Error;

use common::{fixture_dir, GOLDEN_MODEL};

fn golden() -> ScalableModel {
    load_model(&fixture_dir().join(GOLDEN_MODEL)).unwrap()
}

#[test]
fn estimated_rate_tracks_the_coded_size() {
    let model = golden();
    for img in synthetic_images(6, 96, 80, 300) {
        let (stream, trace) = sae_encode_traced(&img, &model, model.num_layers()).unwrap();
        let pixels = stream.pixels() as f64;
        for (payload, est) in stream.payloads.iter().zip(&trace.estimated_bits) {
            let actual = payload.len() as f64 * 8.0 / pixels;
            let estimated = est / pixels;
            assert!(
                (estimated - actual).abs() <= 0.02 * actual + 512.0 / pixels,
                "estimated {estimated} bpp, coded {actual} bpp"
            );
        }
    }
}

#[test]
fn stream_from_another_model_is_rejected() {
    let model = golden();
    let img = synthetic_images(1, 40, 40, 9).remove(0);
    let mut stream = sae_encode(&img, &model, 2).unwrap();
    stream.model_hash ^= 1;
    assert!(matches!(sae_decode(&stream, &model, None), Err(Error::WrongModel { .. })));
}

#[test]
fn corrupt_stream_bytes_are_errors_not_panics() {
    let model = golden();
    let img = synthetic_images(1, 40, 40, 10).remove(0);
    let bytes = sae_encode(&img, &model, 2).unwrap().to_bytes();
    for cut in 0..bytes.len() {
        assert!(LayeredBitstream::from_bytes(&bytes[..cut]).is_err(), "prefix of {cut} bytes parsed");
    }
}

fn image_strategy() -> impl Strategy<Value = RgbImage> {
    (1usize..70, 1usize..70, any::<u64>()).prop_map(|(w, h, seed)| {
        RgbImage::from_fn(w, h, |x, y, c| {
            let v = (x as u64 * 31 + y as u64 * 17 + c as u64 * 7) ^ seed;
            (v.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 56) as u8
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn truncation_and_prefix_decoding_agree(img in image_strategy()) {
        let model = golden();
        let stream = sae_encode(&img, &model, model.num_layers()).unwrap();
        prop_assert_eq!(LayeredBitstream::from_bytes(&stream.to_bytes()).unwrap(), stream.clone());
        let progressive = decode_progressive(&stream, &model).unwrap();
        for k in 1..=stream.num_layers() {
            let cut = truncate(&stream, k).unwrap();
            prop_assert_eq!(cut.num_layers(), k);
            let a = sae_decode(&cut, &model, None).unwrap();
            prop_assert_eq!((a.width, a.height), (img.width, img.height));
            prop_assert_eq!(&a, &sae_decode(&stream, &model, Some(k)).unwrap());
            prop_assert_eq!(&a, &progressive[k - 1]);
        }
        let cumulative = stream.cumulative_bpp();
        prop_assert!(cumulative.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn encoding_is_deterministic(img in image_strategy()) {
        let model = golden();
        prop_assert_eq!(sae_encode(&img, &model, 2).unwrap(), sae_encode(&img, &model, 2).unwrap());
    }
}
