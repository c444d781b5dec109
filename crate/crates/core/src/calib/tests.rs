use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synthgen::render;

fn image(w: usize, h: usize, px: Vec<u8>) -> GrayImage {
    GrayImage::new(w, h, px).unwrap()
}

fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image(w, h, (0..w * h).map(|_| rng.random()).collect())
}

#[test]
fn block_average_examples() {
    let c = GrayImage::filled(8, 8, 77);
    assert!(block_averages(&c, 4).unwrap().iter().all(|&v| v == 77.0));

    let px = vec![0, 0, 2, 2, 0, 0, 2, 2, 4, 4, 6, 6, 4, 4, 6, 6];
    assert_eq!(
        block_averages(&image(4, 4, px), 2).unwrap(),
        vec![0.0, 2.0, 4.0, 6.0]
    );
}

#[test]
fn block_averages_match_brute_force() {
    let img = random_image(8, 8, 3);
    let got = block_averages(&img, 4).unwrap();
    for by in 0..4 {
        for bx in 0..4 {
            let mut s = 0.0;
            for y in 2 * by..2 * by + 2 {
                for x in 2 * bx..2 * bx + 2 {
                    s += img.get(x, y) as f64;
                }
            }
            assert!((got[by * 4 + bx] - s / 4.0).abs() < 1e-12);
        }
    }
}

#[test]
fn block_averages_reject_indivisible_dims() {
    assert!(block_averages(&GrayImage::filled(10, 8, 0), 4).is_err());
    assert!(block_averages(&GrayImage::filled(8, 8, 0), 0).is_err());
}

#[test]
fn mae_examples() {
    let a = image(4, 4, vec![0, 0, 2, 2, 0, 0, 2, 2, 4, 4, 6, 6, 4, 4, 6, 6]);
    let b = image(4, 4, vec![1, 1, 2, 2, 1, 1, 2, 2, 4, 4, 6, 6, 4, 4, 6, 6]);
    assert_eq!(mae_total(&a, &a, 2).unwrap(), 0.0);
    assert_eq!(mae_total(&a, &b, 2).unwrap(), 0.25);
    assert_eq!(mae_total(&b, &a, 2).unwrap(), 0.25);
    assert!(mae_total(&a, &GrayImage::filled(8, 8, 0), 2).is_err());
}

#[test]
fn config_validation() {
    assert!(CalibConfig::default().validate().is_ok());
    for bad in [
        CalibConfig {
            alpha: 0.0,
            ..Default::default()
        },
        CalibConfig {
            max_steps: 0,
            ..Default::default()
        },
        CalibConfig {
            block_grid: 0,
            ..Default::default()
        },
        CalibConfig {
            fd_step: 0.0,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn already_optimal_converges_at_step_zero() {
    let spec = SceneSpec::canonical();
    let target = render(&spec, 64).unwrap().image;
    let c = calibrate(&target, &spec, &CalibConfig::default()).unwrap();
    assert_eq!(c.status, CalibStatus::Converged);
    assert_eq!(c.trace.len(), 1);
    assert_eq!(c.trace[0].mae_total, 0.0);
    assert_eq!(c.spec, spec);
}

#[test]
fn recovers_brighter_light() {
    let spec0 = SceneSpec::canonical();
    let mut truth = spec0;
    truth.theta_light *= 1.2;
    let target = render(&truth, 64).unwrap().image;
    let c = calibrate(&target, &spec0, &CalibConfig::default()).unwrap();
    assert_eq!(c.status, CalibStatus::Converged, "{}", c.diagnostic());
    assert!(c.mae_total < 1.275);
    let rel = (c.spec.theta_light / truth.theta_light - 1.0).abs();
    assert!(rel < 0.05, "theta_light off by {rel}");
    assert!(c.trace.len() <= 100);
    assert!(c.trace.last().unwrap().mae_total <= c.trace[0].mae_total);
}

#[test]
fn trace_is_bounded_and_reproducible() {
    let spec0 = SceneSpec::canonical();
    let mut truth = spec0;
    truth.theta_light *= 0.7;
    let target = render(&truth, 64).unwrap().image;
    let config = CalibConfig {
        max_steps: 3,
        ..Default::default()
    };
    let a = calibrate(&target, &spec0, &config).unwrap();
    let b = calibrate(&target, &spec0, &config).unwrap();
    assert_eq!(a, b);
    assert!(a.trace.len() <= 3);
    assert!(a.mae_total <= a.trace[0].mae_total);
}

#[test]
fn trace_csv_layout() {
    let rows = [TraceRow {
        step: 0,
        theta_noise: 2.0,
        theta_light: 3.0e5,
        mae_total: 0.5,
    }];
    let mut out = Vec::new();
    write_trace(&mut out, &rows).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "step,theta_noise,theta_light,mae_total\n0,2,300000,0.5\n"
    );
}

proptest! {
    #[test]
    fn mae_invariant_to_within_block_permutation(seed in any::<u64>(), swaps in prop::collection::vec((0usize..4, 0usize..4, 0usize..4, 0usize..4), 1..20)) {
        let a = random_image(16, 16, seed);
        let b = random_image(16, 16, seed ^ 0x5555);
        let before = mae_total(&a, &b, 4).unwrap();
        let mut px = a.pixels().to_vec();
        // swap two pixels inside the same 4x4 block
        for (block, i, j, k) in swaps {
            let (bx, by) = (block * 4, (i % 4) * 4);
            let p = (by + j) * 16 + bx + k;
            let q = (by + k) * 16 + bx + j;
            px.swap(p, q);
        }
        let shuffled = image(16, 16, px);
        prop_assert_eq!(block_averages(&shuffled, 4).unwrap(), block_averages(&a, 4).unwrap());
        prop_assert_eq!(mae_total(&shuffled, &b, 4).unwrap(), before);
    }

    #[test]
    fn mae_is_non_negative_and_zero_iff_blocks_agree(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_image(8, 8, s1);
        let b = random_image(8, 8, s2);
        let m = mae_total(&a, &b, 2).unwrap();
        prop_assert!(m >= 0.0);
        let same = block_averages(&a, 2).unwrap() == block_averages(&b, 2).unwrap();
        prop_assert_eq!(m == 0.0, same);
    }
}
