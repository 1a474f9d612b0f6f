mod common;

use common::{max_diff, rng, uniform};
use mkpn::ops::{avg_pool2, concat_channels, conv2d, relu, slice_channels, upsample_bilinear2};
use mkpn::Tensor;
use proptest::prelude::*;

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[3];
    let mut out = vec![0.0; h * wd * cout];
    for y in 0..h as isize {
        for xx in 0..wd as isize {
            for co in 0..cout {
                let mut acc = b.at(&[co]);
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let (sy, sx) = (y + ky - 1, xx + kx - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += w.at(&[ky as usize, kx as usize, ci, co])
                                * x.at(&[sy as usize, sx as usize, ci]);
                        }
                    }
                }
                out[(y as usize * wd + xx as usize) * cout + co] = acc;
            }
        }
    }
    out
}

/// Interpolation weight of input index `i` for output index `o` along an
/// axis of length `n`: a tent around the clamped source coordinate.
fn tent(o: usize, i: usize, n: usize) -> f64 {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    (1.0 - (src - i as f64).abs()).max(0.0)
}

#[test]
fn conv_matches_brute_force() {
    let mut r = rng(1);
    for (h, w, cin, cout) in [(5, 5, 2, 3), (4, 7, 3, 1), (1, 1, 1, 2)] {
        let x = uniform(&[h, w, cin], -1.0, 1.0, &mut r);
        let k = uniform(&[3, 3, cin, cout], -1.0, 1.0, &mut r);
        let b = uniform(&[cout], -1.0, 1.0, &mut r);
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), [h, w, cout]);
        assert!(max_diff(y.data(), &conv_oracle(&x, &k, &b)) < 1e-12);
    }
}

#[test]
fn pool_is_exact_block_mean() {
    let mut r = rng(2);
    let x = uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
    let y = avg_pool2(&x).unwrap();
    assert_eq!(y.shape(), [4, 4, 3]);
    for i in 0..4 {
        for j in 0..4 {
            for c in 0..3 {
                let m = (x.at(&[2 * i, 2 * j, c])
                    + x.at(&[2 * i, 2 * j + 1, c])
                    + x.at(&[2 * i + 1, 2 * j, c])
                    + x.at(&[2 * i + 1, 2 * j + 1, c]))
                    / 4.0;
                assert!((y.at(&[i, j, c]) - m).abs() < 1e-15);
            }
        }
    }
    assert!(avg_pool2(&Tensor::<f64>::zeros(&[3, 4, 1])).is_err());
}

#[test]
fn upsample_matches_weight_formula() {
    let mut r = rng(3);
    for (h, w) in [(3, 3), (2, 5), (1, 4)] {
        let x = uniform(&[h, w, 2], -1.0, 1.0, &mut r);
        let y = upsample_bilinear2(&x).unwrap();
        assert_eq!(y.shape(), [2 * h, 2 * w, 2]);
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                for c in 0..2 {
                    let mut want = 0.0;
                    for iy in 0..h {
                        for ix in 0..w {
                            want += tent(oy, iy, h) * tent(ox, ix, w) * x.at(&[iy, ix, c]);
                        }
                    }
                    assert!((y.at(&[oy, ox, c]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn relu_cases() {
    let x = Tensor::new(&[1, 3, 1], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(relu(&x).data(), [0.0, 0.0, 2.0]);
}

#[test]
fn concat_and_slice_shapes() {
    let a = Tensor::<f64>::full(&[2, 2, 3], 1.0);
    let b = Tensor::<f64>::full(&[2, 2, 5], 2.0);
    let c = concat_channels(&a, &b).unwrap();
    assert_eq!(c.shape(), [2, 2, 8]);
    assert_eq!(slice_channels(&c, 0, 3).unwrap(), a);
    assert_eq!(slice_channels(&c, 3, 5).unwrap(), b);
    assert!(concat_channels(&a, &Tensor::zeros(&[2, 3, 1])).is_err());
}

fn combine(a: f64, x: &Tensor<f64>, b: f64, y: &Tensor<f64>) -> Tensor<f64> {
    x.zip_map(y, |u, v| a * u + b * v).unwrap()
}

fn linear_ok(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, y: &Tensor<f64>, a: f64, b: f64) -> bool {
    let lhs = f(&combine(a, x, b, y));
    let rhs = combine(a, &f(x), b, &f(y));
    max_diff(lhs.data(), rhs.data()) < 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn data_ops_are_linear(seed in any::<u64>(), hh in 1usize..4, ww in 1usize..4, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut r = rng(seed);
        let x = uniform(&[h, w, 2], -1.0, 1.0, &mut r);
        let y = uniform(&[h, w, 2], -1.0, 1.0, &mut r);
        let k = uniform(&[3, 3, 2, 3], -1.0, 1.0, &mut r);
        let zero = Tensor::zeros(&[3]);
        prop_assert!(linear_ok(|t| conv2d(t, &k, &zero).unwrap(), &x, &y, a, b));
        prop_assert!(linear_ok(|t| avg_pool2(t).unwrap(), &x, &y, a, b));
        prop_assert!(linear_ok(|t| upsample_bilinear2(t).unwrap(), &x, &y, a, b));
        prop_assert!(linear_ok(|t| concat_channels(t, t).unwrap(), &x, &y, a, b));
    }

    #[test]
    fn pool_then_upsample_restores_extent(hh in 1usize..9, ww in 1usize..9, c in 1usize..4) {
        let x = Tensor::<f64>::zeros(&[2 * hh, 2 * ww, c]);
        let y = upsample_bilinear2(&avg_pool2(&x).unwrap()).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn upsample_preserves_constants(h in 1usize..6, w in 1usize..6, v in -3.0f64..3.0) {
        let y = upsample_bilinear2(&Tensor::full(&[h, w, 1], v)).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }
}
