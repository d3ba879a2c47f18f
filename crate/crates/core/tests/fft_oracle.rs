//! Centered transforms against a direct O(N^2) DFT summation.

use std::f64::consts::PI;

use freqnet_core::tensor::{
    fft1_centered, fft2_centered, fft_centered, fft_centered_adjoint, ifft1_centered,
    ifft2_centered, ifft2_centered_with_residual, ifft_centered_real_adjoint,
};
use freqnet_core::{Error, Spectrum, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct 2-D DFT of one h x w plane, returned in centered layout.
fn dft2_plane(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for cu in 0..h {
        for cv in 0..w {
            let ku = cu as f64 - (h / 2) as f64;
            let kv = cv as f64 - (w / 2) as f64;
            let (mut sr, mut si) = (0.0, 0.0);
            for a in 0..h {
                for b in 0..w {
                    let ang = -2.0 * PI * (ku * a as f64 / h as f64 + kv * b as f64 / w as f64);
                    sr += x[a * w + b] * ang.cos();
                    si += x[a * w + b] * ang.sin();
                }
            }
            re[cu * w + cv] = sr;
            im[cu * w + cv] = si;
        }
    }
    (re, im)
}

/// Direct 1-D DFT along `dim`, centered layout.
fn dft1(x: &Tensor<f64>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let shape = x.shape();
    let n = shape[dim];
    let inner: usize = shape[dim + 1..].iter().product();
    let outer: usize = shape[..dim].iter().product();
    let mut re = vec![0.0; x.numel()];
    let mut im = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            for c in 0..n {
                let k = c as f64 - (n / 2) as f64;
                let (mut sr, mut si) = (0.0, 0.0);
                for m in 0..n {
                    let v = x.data()[o * n * inner + m * inner + i];
                    let ang = -2.0 * PI * k * m as f64 / n as f64;
                    sr += v * ang.cos();
                    si += v * ang.sin();
                }
                re[o * n * inner + c * inner + i] = sr;
                im[o * n * inner + c * inner + i] = si;
            }
        }
    }
    (re, im)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn fft2_matches_direct_dft_up_to_8x8() {
    for (seed, (h, w)) in [(4, 4), (8, 8), (5, 7), (3, 8), (1, 6), (6, 1), (7, 7)]
        .into_iter()
        .enumerate()
    {
        let x = random(&[2, h, w], seed as u64);
        let s = fft2_centered(&x).unwrap();
        assert!(s.is_centered());
        for plane in 0..2 {
            let (re, im) = dft2_plane(&x.data()[plane * h * w..(plane + 1) * h * w], h, w);
            let r = &s.re()[plane * h * w..(plane + 1) * h * w];
            let i = &s.im()[plane * h * w..(plane + 1) * h * w];
            assert!(max_diff(r, &re) < 1e-10, "{h}x{w} re");
            assert!(max_diff(i, &im) < 1e-10, "{h}x{w} im");
        }
    }
}

#[test]
fn fft1_matches_direct_dft() {
    let v = random(&[5], 11);
    let s = fft1_centered(&v, 0).unwrap();
    let (re, im) = dft1(&v, 0);
    assert!(max_diff(s.re(), &re) < 1e-10);
    assert!(max_diff(s.im(), &im) < 1e-10);

    let x = random(&[2, 6, 3, 2], 12);
    for dim in 0..4 {
        let s = fft1_centered(&x, dim).unwrap();
        let (re, im) = dft1(&x, dim);
        assert!(max_diff(s.re(), &re) < 1e-10, "dim {dim}");
        assert!(max_diff(s.im(), &im) < 1e-10, "dim {dim}");
    }
}

#[test]
fn constant_image_has_only_a_dc_bin() {
    let (h, w, c) = (6, 5, 0.75);
    let x = Tensor::<f64>::full(&[1, 1, h, w], c);
    let s = fft2_centered(&x).unwrap();
    for i in 0..h {
        for j in 0..w {
            let (re, im) = (s.re()[i * w + j], s.im()[i * w + j]);
            if (i, j) == (h / 2, w / 2) {
                assert!((re - c * (h * w) as f64).abs() < 1e-12);
            } else {
                assert!(re.abs() < 1e-12);
            }
            assert!(im.abs() < 1e-12);
        }
    }
}

#[test]
fn impulse_has_flat_unit_spectrum() {
    let mut x = Tensor::<f64>::zeros(&[4, 6]);
    x.data_mut()[0] = 1.0;
    let s = fft2_centered(&x).unwrap();
    for m in s.magnitude().data() {
        assert!((m - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fewer_than_two_dims_is_a_dimension_error() {
    let x = Tensor::<f64>::zeros(&[8]);
    assert!(matches!(fft2_centered(&x), Err(Error::Dimension(_))));
    assert!(matches!(fft1_centered(&x, 1), Err(Error::Dimension(_))));
}

#[test]
fn inverse_requires_centered_input() {
    let x = Tensor::<f64>::zeros(&[2, 2]);
    let raw = Spectrum::from_real(&x);
    assert!(matches!(ifft2_centered(&raw), Err(Error::Layout(_))));
    let over_rows = fft1_centered(&x, 0).unwrap();
    assert!(matches!(ifft2_centered(&over_rows), Err(Error::Layout(_))));
}

#[test]
fn round_trip_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let back = ifft2_centered(&fft2_centered(&x).unwrap()).unwrap();
    assert!(back.max_abs_diff(&x) <= 1e-6);

    let y = Tensor::<f32>::from_fn(&[1, 8, 4, 4], |_| rng.random_range(-1.0..1.0));
    let back = ifft1_centered(&fft1_centered(&y, 1).unwrap(), 1).unwrap();
    assert!(back.max_abs_diff(&y) <= 1e-6);
}

#[test]
fn zero_spectrum_inverts_to_zero() {
    let z = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let s = fft2_centered(&z).unwrap().zeros_like();
    assert_eq!(ifft2_centered(&s).unwrap(), z);
    let s1 = fft1_centered(&z, 1).unwrap().zeros_like();
    assert_eq!(ifft1_centered(&s1, 1).unwrap(), z);
}

#[test]
fn cosine_pair_inverts_to_sampled_cosine() {
    // Bins at frequency +-k along the width with value N/2 produce cos(2 pi k j / W).
    let (h, w, k) = (4usize, 8usize, 3usize);
    let n = (h * w) as f64;
    let mut re = vec![0.0; h * w];
    let cu = h / 2;
    re[cu * w + (w / 2 + k)] = n / 2.0;
    re[cu * w + (w / 2 - k)] = n / 2.0;
    let s = Spectrum::new(vec![h, w], re, vec![0.0; h * w], true, vec![0, 1]).unwrap();
    let (t, residual) = ifft2_centered_with_residual(&s).unwrap();
    assert!(residual < 1e-12);
    for i in 0..h {
        for j in 0..w {
            let want = (2.0 * PI * (k * j) as f64 / w as f64).cos();
            assert!((t.data()[i * w + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn channel_constant_map_has_only_center_channel_bin() {
    let x = Tensor::<f64>::from_fn(&[1, 4, 2, 2], |i| (i % 4) as f64 * 0.3);
    let s = fft1_centered(&x, 1).unwrap();
    for c in 0..4 {
        for p in 0..4 {
            let v = s.re()[c * 4 + p];
            if c == 2 {
                assert!((v - 4.0 * x.data()[p]).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-12);
            }
        }
    }
}

#[test]
fn extent_one_dimension_is_identity() {
    let x = random(&[3, 1, 2], 5);
    let s = fft1_centered(&x, 1).unwrap();
    assert_eq!(s.re(), x.data());
    assert!(s.im().iter().all(|v| *v == 0.0));
}

#[test]
fn single_dc_bin_inverts_to_constant_over_extent() {
    let n = 6;
    let mut re = vec![0.0; n];
    re[n / 2] = 2.4;
    let s = Spectrum::new(vec![n], re, vec![0.0; n], true, vec![0]).unwrap();
    let t = ifft1_centered(&s, 0).unwrap();
    for v in t.data() {
        assert!((v - 2.4 / n as f64).abs() < 1e-14);
    }
}

#[test]
fn fft_adjoint_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for dims in [vec![2usize, 3], vec![1]] {
        let x = random(&[2, 3, 5, 4], 21);
        let shape = x.shape().to_vec();
        let n = x.numel();
        let fx = fft_centered(&x, &dims).unwrap();
        let y = Spectrum::new(
            shape.clone(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            true,
            dims.clone(),
        )
        .unwrap();
        let lhs = fx.inner(&y);
        let rhs: f64 = x
            .data()
            .iter()
            .zip(fft_centered_adjoint(&y, &dims).unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0), "{dims:?}");

        // inverse-then-real against its adjoint
        let g = random(&shape, 22);
        let (inv, _) = freqnet_core::tensor::ifft_centered(&y, &dims).unwrap();
        let lhs: f64 = inv.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs = y.inner(&ifft_centered_real_adjoint(&g, &dims).unwrap());
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
    }
}

fn arb_plane() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 1usize..10, 1usize..10).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-10.0f64..10.0, c * h * w)
            .prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
    })
}

proptest! {
    #[test]
    fn round_trip_double(x in arb_plane()) {
        let back = ifft2_centered(&fft2_centered(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12);
        let back1 = ifft1_centered(&fft1_centered(&x, 0).unwrap(), 0).unwrap();
        prop_assert!(back1.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn parseval(x in arb_plane()) {
        let s = fft2_centered(&x).unwrap();
        let n = (x.shape()[1] * x.shape()[2]) as f64;
        let lhs = x.sum_sq();
        let rhs = s.sum_sq_magnitude() / n;
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.max(1e-12));
    }

    #[test]
    fn linearity(x in arb_plane(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let y = random(x.shape(), seed);
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let (sx, sy, sc) = (fft2_centered(&x).unwrap(), fft2_centered(&y).unwrap(), fft2_centered(&combo).unwrap());
        for i in 0..x.numel() {
            prop_assert!((sc.re()[i] - (a * sx.re()[i] + b * sy.re()[i])).abs() <= 1e-6 * (1.0 + sc.re()[i].abs()));
            prop_assert!((sc.im()[i] - (a * sx.im()[i] + b * sy.im()[i])).abs() <= 1e-6 * (1.0 + sc.im()[i].abs()));
        }
    }

    #[test]
    fn conjugate_symmetry(x in arb_plane()) {
        // X[k] = conj(X[-k]); centered index c holds frequency c - n/2.
        let s = fft2_centered(&x).unwrap();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mirror = |i: usize, n: usize| {
            let k = i as isize - (n / 2) as isize;
            (((-k).rem_euclid(n as isize)) as usize + n / 2) % n
        };
        for p in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let a = p * h * w + i * w + j;
                    let b = p * h * w + mirror(i, h) * w + mirror(j, w);
                    prop_assert!((s.re()[a] - s.re()[b]).abs() <= 1e-6);
                    prop_assert!((s.im()[a] + s.im()[b]).abs() <= 1e-6);
                }
            }
        }
    }
}
