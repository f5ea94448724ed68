use laminet_core::nets::{build_rnet, build_snet, DenseInit, NetConfig, TrunkInit};
use laminet_core::pipeline::preprocess::CROP_HEIGHT;
use laminet_core::pipeline::{flatten_and_crop, infer_scan, stitch, InferOptions, PatchLayout};
use laminet_core::tensor::Tensor;
use laminet_core::topology::ThicknessMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn formula_starts(w: usize, size: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![0];
    }
    let mut s: Vec<usize> = (0..count)
        .map(|k| ((k * (w - size)) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    s.dedup();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn layouts_tile_the_width(w in 128usize..1500, count in 1usize..40) {
        match PatchLayout::new(w, 128, count) {
            Ok(layout) => {
                prop_assert_eq!(&layout.starts, &formula_starts(w, 128, count));
                prop_assert_eq!(layout.starts[0], 0);
                prop_assert_eq!(*layout.starts.last().unwrap() + 128, w);
                prop_assert!(layout.coverage().iter().all(|&c| c >= 1));
            }
            // only a layout that really leaves a gap may be refused
            Err(_) => prop_assert!(count * 128 < w || count == 1),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn stitching_averages_and_keeps_signs(
        w in 8usize..64,
        b in 1usize..5,
        seed in any::<u64>(),
        agree in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.gen_range(1..=w);
        let count = rng.gen_range(1..=8usize);
        prop_assume!(count > 1 || size == w);
        let Ok(layout) = PatchLayout::new(w, size, count) else { return Ok(()) };
        let shared: Vec<f64> = (0..b * w).map(|_| rng.gen_range(0.0..10.0)).collect();
        let patches: Vec<(usize, ThicknessMap)> = layout
            .starts
            .iter()
            .map(|&s| {
                let data = (0..b * size)
                    .map(|i| if agree { shared[(i / size) * w + s + i % size] } else { rng.gen_range(0.0..10.0) })
                    .collect();
                (s, ThicknessMap::new(b, size, data).unwrap())
            })
            .collect();
        let out = stitch(&patches, w).unwrap();
        for k in 0..b {
            for j in 0..w {
                let covering: Vec<f64> = patches
                    .iter()
                    .filter(|(s, _)| (*s..s + size).contains(&j))
                    .map(|(s, m)| m.get(k, j - s))
                    .collect();
                let mean = covering.iter().sum::<f64>() / covering.len() as f64;
                prop_assert!((out.get(k, j) - mean).abs() < 1e-12);
                prop_assert!(out.get(k, j) >= 0.0);
                if agree {
                    prop_assert!((out.get(k, j) - shared[k * w + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn flattening_only_moves_pixels(h in 16usize..300, w in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..1.0f32));
        let baseline: Vec<f64> = (0..w).map(|_| rng.gen_range(0.0..h as f64 - 1.0)).collect();
        let target = rng.gen_range(0..CROP_HEIGHT);
        let (crop, record) = flatten_and_crop(&image, &baseline, target).unwrap();
        for j in 0..w {
            for r in 0..CROP_HEIGHT {
                let o = record.to_original_row(j, r as f64);
                let want = if o >= 0.0 && o < h as f64 { image.data()[o as usize * w + j] } else { 0.0 };
                prop_assert_eq!(crop.data()[r * w + j], want);
                prop_assert_eq!(record.to_crop_row(j, o), r as f64);
            }
        }
        // restoring the crop puts every retained pixel back where it came from
        let back = record.uncrop(&crop).unwrap();
        for j in 0..w {
            for row in 0..h {
                let r = record.to_crop_row(j, row as f64);
                if r >= 0.0 && r < CROP_HEIGHT as f64 {
                    prop_assert_eq!(back.data()[row * w + j], image.data()[row * w + j]);
                }
            }
        }
    }
}

/// Random weights, random inputs: every column of every prediction keeps
/// its boundaries in order, before and after undoing the flattening.
#[test]
fn end_to_end_order_under_random_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cfg = NetConfig {
        patch_width: 16,
        base_channels: 2,
        levels: 2,
        rnet_head_channels: 2,
        rnet_trunk_init: TrunkInit::He,
        dense_init: DenseInit::He,
        ..Default::default()
    };
    for draw in 0..20u64 {
        cfg.dense_bias_init = rng.gen_range(-2.0..4.0);
        let snet = build_snet::<f32>(&cfg, draw).unwrap();
        let rnet = build_rnet::<f32>(&cfg, draw + 10_000).unwrap();
        for trial in 0..10 {
            let (h, w) = (rng.gen_range(100..200), rng.gen_range(16..64));
            let scale = [1.0f32, 100.0, 1e-3][trial % 3];
            let image = Tensor::from_fn(&[1, h, w], |_| scale * rng.gen_range(0.0..1.0f32));
            let opts = InferOptions { patch_count: rng.gen_range(4..9), ..Default::default() };
            let (pred, _) = infer_scan(&image, &snet, &rnet, &opts).unwrap();
            assert!(pred.thickness.data().iter().all(|&t| t >= 0.0));
            assert_eq!(pred.crop_boundaries.first_violation(), None, "draw {draw} trial {trial}");
            assert_eq!(pred.boundaries.first_violation(), None, "draw {draw} trial {trial}");
        }
    }
}
