//! Detector plumbing against direct constructions, plus the bundled
//! pedestrian model on synthetic frames.

mod common;

use pecas_core::detector::{detect, image_pyramid, sliding_windows, DetectParams};
use pecas_core::fixtures::pedestrian_frame;
use pecas_core::image::{decode_image, encode_pgm};
use pecas_core::rng::Rng;
use pecas_core::weights_file::load_model;
use pecas_core::Tensor;
use proptest::prelude::*;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");

/// Levels whose sides stay at or above the minimum, counted by logarithms.
fn expected_levels(h: usize, w: usize, f: f64) -> usize {
    if h < 128 || w < 64 {
        return 0;
    }
    let fit = |side: usize, min: usize| ((side as f64 / min as f64).ln() / f.ln()).floor() as usize;
    1 + fit(h, 128).min(fit(w, 64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pyramid_level_count_and_sizes(h in 0usize..700, w in 0usize..400) {
        let img = Tensor::filled(&[1, h.max(1), w.max(1)], 0.5);
        let levels = image_pyramid(&img, 1.2, (128, 64)).unwrap();
        prop_assert_eq!(levels.len(), expected_levels(h.max(1), w.max(1), 1.2));
        for (k, level) in levels.iter().enumerate() {
            let s = 1.2f64.powi(k as i32);
            prop_assert_eq!(level.scale, s);
            let dims = [1, (h.max(1) as f64 / s).floor() as usize, (w.max(1) as f64 / s).floor() as usize];
            prop_assert_eq!(level.image.shape(), &dims[..]);
        }
    }

    #[test]
    fn windows_are_source_crops(h in 128usize..260, w in 64usize..200, stride in 1usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let level = common::random_tensor(&mut rng, &[1, h, w], 0.0, 1.0);
        let windows = sliding_windows(&level, (128, 64), stride).unwrap();
        prop_assert_eq!(windows.len(), ((h - 128) / stride + 1) * ((w - 64) / stride + 1));
        let mut previous = None;
        for (bbox, win) in windows.iter() {
            let (x, y) = (bbox.x as usize, bbox.y as usize);
            prop_assert_eq!((bbox.w, bbox.h), (64.0, 128.0));
            prop_assert!(x % stride == 0 && y % stride == 0 && x + 64 <= w && y + 128 <= h);
            // row-major: y first, then x
            if let Some((py, px)) = previous {
                prop_assert!((y, x) > (py, px));
            }
            previous = Some((y, x));
            for r in 0..128 {
                for c in 0..64 {
                    prop_assert_eq!(win.data()[r * 64 + c], level.data()[(y + r) * w + x + c]);
                }
            }
        }
    }

    #[test]
    fn pgm_round_trip_is_exact(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..h * w).map(|_| rng.below(256) as f64 / 255.0).collect();
        let img = Tensor::new(vec![1, h, w], data).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        prop_assert_eq!(decode_image(&bytes).unwrap(), img);
    }
}

#[test]
fn single_window_image_has_one_level_and_one_window() {
    let img = Tensor::filled(&[1, 128, 64], 0.3);
    let levels = image_pyramid(&img, 1.2, (128, 64)).unwrap();
    assert_eq!(levels.len(), 1);
    let windows = sliding_windows(&levels[0].image, (128, 64), 16).unwrap();
    assert_eq!(windows.len(), 1);
    assert_eq!((windows[0].0.x, windows[0].0.y), (0.0, 0.0));
    assert!(image_pyramid(&Tensor::filled(&[1, 127, 300], 0.3), 1.2, (128, 64)).unwrap().is_empty());
}

#[test]
fn bundled_model_ignores_blank_frames() {
    let ped = load_model(format!("{FIXTURES}/models/pedestrian.pecas")).unwrap();
    let blank = Tensor::zeros(&[1, 160, 320]);
    assert!(detect(&ped, &blank, &DetectParams::default()).unwrap().is_empty());
}

#[test]
fn bundled_model_boxes_stay_inside_the_frame() {
    let ped = load_model(format!("{FIXTURES}/models/pedestrian.pecas")).unwrap();
    let mut rng = Rng::new(5);
    for plants in [0, 1, 2] {
        let (img, _) = pedestrian_frame(&mut rng, 200, 300, plants, 8);
        for d in detect(&ped, &img, &DetectParams { stride: 8, ..DetectParams::default() }).unwrap() {
            let b = d.bbox;
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 300.0 + 1e-9 && b.y + b.h <= 200.0 + 1e-9, "{b:?}");
            assert!(d.score > 0.5 && d.score <= 1.0);
        }
    }
}
