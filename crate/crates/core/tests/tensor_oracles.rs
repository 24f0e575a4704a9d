//! Convolution, pooling and normalization checked against naive
//! re-implementations written independently of the library kernels.

use lshg_core::tensor::{
    batchnorm_apply, concat_channels, conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward,
    split_channels, upsample_nearest2x, upsample_nearest2x_backward, ConvSpec, NormMode, RunningStats, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let k = spec.kernel;
    let eff = spec.dilation * (k - 1) + 1;
    let oh = (s.height + 2 * spec.padding - eff) / spec.stride + 1;
    let ow = (s.width + 2 * spec.padding - eff) / spec.stride + 1;
    let in_g = spec.in_channels / spec.groups;
    let out_g = spec.out_channels / spec.groups;
    Tensor::from_fn([s.batch, spec.out_channels, oh, ow], |n, o, i, j| {
        let g = o / out_g;
        let mut acc = b.map_or(0.0, |b| b[o]);
        for ci in 0..in_g {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (i * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    let xx = (j * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                    if y < 0 || xx < 0 || y >= s.height as isize || xx >= s.width as isize {
                        continue;
                    }
                    acc += w.at(o, ci, ky, kx) * x.at(n, g * in_g + ci, y as usize, xx as usize);
                }
            }
        }
        acc
    })
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    conv2d_forward(x, spec, w, b).unwrap()
}

fn rand_t(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::random_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn forward_matches_naive_over_configurations() {
    let mut seed = 0;
    for (cin, cout, k, stride, pad, dil, groups) in [
        (3, 5, 3, 1, 1, 1, 1),
        (4, 6, 3, 2, 1, 1, 2),
        (4, 4, 3, 1, 2, 2, 4),
        (2, 3, 7, 2, 3, 1, 1),
        (6, 8, 1, 1, 0, 1, 1),
        (6, 6, 3, 1, 3, 3, 6),
        (3, 2, 5, 3, 0, 1, 1),
    ] {
        seed += 1;
        let spec = ConvSpec::new(cin, cout, k)
            .with_stride(stride)
            .with_padding(pad)
            .with_dilation(dil)
            .with_groups(groups)
            .with_bias(true);
        let x = rand_t([2, cin, 11, 9], seed);
        let w = rand_t(spec.weight_shape().dims(), seed + 100);
        let b = rand_t([cout, 1, 1, 1], seed + 200);
        let ours = conv(&x, &w, Some(&b), &spec);
        let naive = naive_conv(&x, &w, Some(b.data()), &spec);
        assert_eq!(ours.shape(), naive.shape());
        assert!(ours.max_abs_diff(&naive) < 1e-12, "{spec:?}");
    }
}

#[test]
fn dilation_equals_zero_interleaved_kernel() {
    for d in [2, 3] {
        let spec = ConvSpec::new(3, 4, 3).with_dilation(d).with_padding(d);
        let x = rand_t([1, 3, 12, 12], d as u64);
        let w = rand_t([4, 3, 3, 3], 10 + d as u64);
        let k = 2 * d + 1;
        let mut big = Tensor::zeros([4, 3, k, k]);
        for o in 0..4 {
            for c in 0..3 {
                for y in 0..3 {
                    for xx in 0..3 {
                        big.set(o, c, y * d, xx * d, w.at(o, c, y, xx));
                    }
                }
            }
        }
        let dense = ConvSpec::new(3, 4, k).with_padding(d);
        let a = conv(&x, &w, None, &spec);
        let b = conv(&x, &big, None, &dense);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn depthwise_equals_per_channel_convolution() {
    let spec = ConvSpec::depthwise(5, 3, 2);
    let x = rand_t([2, 5, 9, 9], 1);
    let w = rand_t([5, 1, 3, 3], 2);
    let y = conv(&x, &w, None, &spec);
    for c in 0..5 {
        let single = ConvSpec::depthwise(1, 3, 2);
        let xc = x.narrow_channels(c, 1).unwrap();
        let wc = Tensor::from_vec([1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
        let yc = conv(&xc, &wc, None, &single);
        assert!(y.narrow_channels(c, 1).unwrap().max_abs_diff(&yc) < 1e-15);
    }
}

/// ⟨conv(x), g⟩ = ⟨x, convᵀ(g)⟩ and ⟨conv(x), g⟩ is linear in w, so the
/// backward pass can be checked with two inner products.
#[test]
fn backward_is_the_adjoint() {
    let spec = ConvSpec::new(4, 6, 3).with_stride(2).with_padding(2).with_dilation(2).with_groups(2).with_bias(true);
    let x = rand_t([2, 4, 9, 8], 1);
    let w = rand_t(spec.weight_shape().dims(), 2);
    let b = rand_t([6, 1, 1, 1], 3);
    let y = conv(&x, &w, Some(&b), &spec);
    let g = rand_t(y.shape().dims(), 4);
    let grads = conv2d_backward(&x, &spec, &w, &g).unwrap();
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
    let y0 = conv(&x, &w, None, &spec.with_bias(false));
    assert!((dot(&y0, &g) - dot(&x, &grads.input)).abs() < 1e-10);
    assert!((dot(&y0, &g) - dot(&w, &grads.weights)).abs() < 1e-10);
    let db: f64 = grads.bias.unwrap().sum();
    assert!((db - g.sum()).abs() < 1e-10);
}

#[test]
fn maxpool_and_upsample_are_adjoint_pairs() {
    let x = rand_t([2, 3, 6, 8], 9);
    let (y, idx) = maxpool2x2_forward(&x).unwrap();
    let g = rand_t(y.shape().dims(), 10);
    let gx = maxpool2x2_backward(&g, &idx, x.shape()).unwrap();
    // gradient lands exactly on the winners
    let mut routed = 0.0;
    for (i, &v) in gx.data().iter().enumerate() {
        if v != 0.0 {
            routed += v * x.data()[i];
        }
    }
    let direct: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    assert!((routed - direct).abs() < 1e-12);

    let u = upsample_nearest2x(&x);
    let gu = rand_t(u.shape().dims(), 11);
    let back = upsample_nearest2x_backward(&gu).unwrap();
    let lhs: f64 = u.data().iter().zip(gu.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_size_formula(h in 1usize..20, w in 1usize..20, k in 1usize..6, s in 1usize..4, p in 0usize..4, d in 1usize..4) {
        let spec = ConvSpec::new(1, 1, k).with_stride(s).with_padding(p).with_dilation(d);
        let eff = d * (k - 1) + 1;
        match spec.output_hw(h, w) {
            Ok((oh, ow)) => {
                prop_assert!(h + 2 * p >= eff && w + 2 * p >= eff);
                prop_assert_eq!(oh, (h + 2 * p - eff) / s + 1);
                prop_assert_eq!(ow, (w + 2 * p - eff) / s + 1);
                let x = Tensor::<f64>::zeros([1, 1, h, w]);
                let y = conv(&x, &Tensor::zeros([1, 1, k, k]), None, &spec);
                prop_assert_eq!(y.shape().dims(), [1, 1, oh, ow]);
            }
            Err(_) => prop_assert!(h + 2 * p < eff || w + 2 * p < eff),
        }
    }

    #[test]
    fn train_batchnorm_standardizes(seed in any::<u64>(), c in 1usize..4, n in 2usize..4) {
        let x = Tensor::<f64>::random_uniform([n, c, 3, 5], -3.0, 7.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let stats = RunningStats::new(c);
        let (y, _) = batchnorm_apply(&x, &vec![1.0; c], &vec![0.0; c], &stats, NormMode::Train, 1e-5).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| y.plane(b, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn concat_split_round_trip(a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let x = rand_t([2, a, 3, 3], seed);
        let y = rand_t([2, b, 3, 3], seed.wrapping_add(1));
        let cat = concat_channels(&[&x, &y]).unwrap();
        let parts = split_channels(&cat, &[a, b]).unwrap();
        prop_assert_eq!(&parts[0], &x);
        prop_assert_eq!(&parts[1], &y);
    }
}
