mod common;

use common::{max_abs_diff, random};
use lfn_core::matcher::{build_cost_volume, correlate, MatchConfig};
use lfn_core::warp::{f_warp, warp_image};
use lfn_core::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Flow whose components stay at least 0.05 away from integers.
fn fractional_flow(h: usize, w: usize, range: f64, seed: u64) -> Tensor<f64> {
    let mut r = common::rng(seed);
    Tensor::from_fn(&[2, h, w], |_| {
        let whole = r.random_range(-range..range).floor();
        whole + r.random_range(0.05..0.95)
    })
}

/// Unit-norm descriptor at every position.
fn unit_features(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut f = random(&[c, h, w], seed);
    let plane = h * w;
    for p in 0..plane {
        let n: f64 = (0..c).map(|ch| f.data()[ch * plane + p].powi(2)).sum::<f64>().sqrt();
        for ch in 0..c {
            f.data_mut()[ch * plane + p] /= n;
        }
    }
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn warp_matches_bilinear_oracle(c in 1usize..4, h in 2usize..9, w in 2usize..9, seed in 0u64..1000) {
        let f = random(&[c, h, w], seed);
        let flow = fractional_flow(h, w, 3.0, seed + 1);
        prop_assert!(max_abs_diff(&f_warp(&f, &flow).unwrap(), &common::warp(&f, &flow)) < 1e-12);
    }

    #[test]
    fn dense_volume_matches_oracle(c in 1usize..5, h in 1usize..8, w in 1usize..8, r in 1usize..4, seed in 0u64..1000) {
        let f1 = random(&[c, h, w], seed);
        let f2 = random(&[c, h, w], seed + 1);
        let got = build_cost_volume(&f1, &f2, &MatchConfig::dense(r)).unwrap();
        prop_assert!(max_abs_diff(&got, &common::dense_volume(&f1, &f2, r, 1)) < 1e-12);
    }

    #[test]
    fn sampled_volume_is_exact_on_grid_and_bilinear_between(c in 1usize..4, h in 2usize..11, w in 2usize..11, seed in 0u64..1000) {
        let cfg = MatchConfig { radius: 6, displacement_stride: 2, sample_stride: 2 };
        let f1 = random(&[c, h, w], seed);
        let f2 = random(&[c, h, w], seed + 1);
        let got = build_cost_volume(&f1, &f2, &cfg).unwrap();
        let dense = common::dense_volume(&f1, &f2, 6, 2);
        prop_assert_eq!(got.shape(), &[49, h, w]);
        let (gh, gw) = (h.div_ceil(2), w.div_ceil(2));
        let grid = |d: usize, i: usize, j: usize| dense.data()[(d * h + 2 * i) * w + 2 * j];
        let taps = |n: usize, g: usize| {
            let lo = (n / 2).min(g - 1);
            (lo, (lo + 1).min(g - 1), (n % 2) as f64 / 2.0)
        };
        for d in 0..49 {
            for y in 0..h {
                for x in 0..w {
                    let v = got.data()[(d * h + y) * w + x];
                    if y % 2 == 0 && x % 2 == 0 {
                        prop_assert_eq!(v, grid(d, y / 2, x / 2));
                    } else {
                        let (y0, y1, ty) = taps(y, gh);
                        let (x0, x1, tx) = taps(x, gw);
                        let top = grid(d, y0, x0) * (1.0 - tx) + grid(d, y0, x1) * tx;
                        let bot = grid(d, y1, x0) * (1.0 - tx) + grid(d, y1, x1) * tx;
                        prop_assert!((v - (top * (1.0 - ty) + bot * ty)).abs() <= 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn zero_flow_is_the_identity_bit_for_bit() {
    let f: Tensor<f32> = random(&[5, 7, 6], 3).cast();
    let out = f_warp(&f, &Tensor::zeros(&[2, 7, 6])).unwrap();
    assert!(out.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn integer_shift_moves_pixels_exactly() {
    let img: Tensor<f32> = random(&[3, 8, 9], 4).cast();
    let (dx, dy) = (2usize, 1usize);
    let flow = Tensor::from_fn(&[2, 8, 9], |i| if i < 72 { dx as f32 } else { dy as f32 });
    let out = warp_image(&img, &flow).unwrap();
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..9 {
                let v = out.at3(c, y, x);
                if y + dy < 8 && x + dx < 9 {
                    assert_eq!(v.to_bits(), img.at3(c, y + dy, x + dx).to_bits());
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn warp_validates_its_inputs() {
    let f = Tensor::<f32>::zeros(&[2, 4, 4]);
    assert!(f_warp(&f, &Tensor::zeros(&[3, 4, 4])).is_err());
    assert!(f_warp(&f, &Tensor::zeros(&[2, 4, 5])).is_err());
    assert!(warp_image(&f, &Tensor::zeros(&[2, 4, 4])).is_err());
}

#[test]
fn swapping_images_negates_the_displacement() {
    let cfg = MatchConfig::dense(2);
    let f1 = random(&[3, 6, 7], 5);
    let f2 = random(&[3, 6, 7], 6);
    let a = build_cost_volume(&f1, &f2, &cfg).unwrap();
    let b = build_cost_volume(&f2, &f1, &cfg).unwrap();
    let n = cfg.channels();
    for d in 0..n {
        let (dx, dy) = cfg.displacement(d);
        let back = n - 1 - d;
        assert_eq!(cfg.displacement(back), (-dx, -dy));
        for y in 0..6isize {
            for x in 0..7isize {
                let (ty, tx) = (y + dy, x + dx);
                if !(0..6).contains(&ty) || !(0..7).contains(&tx) {
                    continue;
                }
                let lhs = a.data()[(d * 6 + y as usize) * 7 + x as usize];
                let rhs = b.data()[(back * 6 + ty as usize) * 7 + tx as usize];
                assert!((lhs - rhs).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn unit_descriptors_match_themselves_best() {
    let cfg = MatchConfig::dense(3);
    let f = unit_features(8, 9, 9, 7);
    let vol = build_cost_volume(&f, &f, &cfg).unwrap();
    let centre = cfg.channels() / 2;
    assert_eq!(cfg.displacement(centre), (0, 0));
    for p in 0..81 {
        let own = vol.data()[centre * 81 + p];
        assert!((own - 1.0 / 8.0).abs() < 1e-12);
        assert!((0..cfg.channels()).all(|d| vol.data()[d * 81 + p] <= own + 1e-15));
    }
}

#[test]
fn peak_sits_at_the_true_shift() {
    let cfg = MatchConfig::dense(3);
    let (h, w) = (12, 12);
    let f1 = unit_features(16, h, w, 8);
    let (sx, sy) = (2isize, -1isize);
    // f2(x + s) = f1(x)
    let f2 = Tensor::from_fn(&[16, h, w], |i| {
        let (c, y, x) = (i / (h * w), ((i / w) % h) as isize, (i % w) as isize);
        let (oy, ox) = ((y - sy).rem_euclid(h as isize), (x - sx).rem_euclid(w as isize));
        f1.data()[(c * h + oy as usize) * w + ox as usize]
    });
    let vol = build_cost_volume(&f1, &f2, &cfg).unwrap();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let p = y * w + x;
            let best = (0..cfg.channels())
                .max_by(|&a, &b| vol.data()[a * h * w + p].total_cmp(&vol.data()[b * h * w + p]))
                .unwrap();
            assert_eq!(cfg.displacement(best), (sx, sy));
        }
    }
}

#[test]
fn correlation_is_a_normalized_dot_product() {
    assert_eq!(correlate(&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 32.0 / 3.0);
    assert!(correlate(&[1.0f32, 2.0], &[1.0]).is_err());
}

#[test]
fn match_config_channels_and_validation() {
    assert_eq!(MatchConfig::dense(3).channels(), 49);
    let sparse = MatchConfig { radius: 6, displacement_stride: 2, sample_stride: 2 };
    assert_eq!(sparse.channels(), 49);
    assert_eq!(sparse.displacement(0), (-6, -6));
    assert_eq!(sparse.displacement(48), (6, 6));
    assert!(matches!(MatchConfig { radius: 5, displacement_stride: 2, sample_stride: 1 }.validate(), Err(Error::Config(_))));
    assert!(MatchConfig { radius: 3, displacement_stride: 1, sample_stride: 0 }.validate().is_err());
}
