use ida_core::autodiff::{AdamState, Graph, ParamStore, Var, Window};
use ida_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![c, h, w], data).unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct quadruple-sum definition of a zero-padded strided convolution.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = x.dims3().unwrap();
    let (cout, kk) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                * k.data()[((co * cin + ci) * kk + ky) * kk + kx];
                        }
                    }
                }
                out.data_mut()[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Independent scalar bilinear interpolation, align-corners false.
fn bilinear_at(plane: &[f64], h: usize, w: usize, oy: usize, ox: usize) -> f64 {
    let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| plane[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 1.0).collect();
    let x = g.input(t3(1, 3, 3, data.clone()));
    let k = g.input(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 3]);
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn all_ones_kernel_sums_patch() {
    let mut g = Graph::new();
    let x = g.input(t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let k = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);
}

#[test]
fn strided_padded_conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = random_tensor(&[2, 8, 8], &mut rng);
    let kt = random_tensor(&[4, 2, 5, 5], &mut rng);
    let expected = naive_conv(&xt, &kt, 2, 2);
    let mut g = Graph::new();
    let x = g.input(xt);
    let k = g.input(kt);
    let y = g.conv2d(x, k, 2, 2).unwrap();
    assert_eq!(g.value(y).shape(), expected.shape());
    for (a, b) in g.value(y).data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3, 4, 4]));
    let k = g.input(Tensor::zeros(&[2, 2, 3, 3]));
    let err = g.conv2d(x, k, 1, 1).unwrap_err();
    assert!(err.to_string().contains("3 channels"), "{err}");
}

#[test]
fn conv_rejects_kernel_larger_than_padded_input() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 2]));
    let k = g.input(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(x, k, 1, 1).is_err());
    assert!(g.conv2d(x, k, 1, 2).is_ok());
}

#[test]
fn upsample_constant_stays_constant() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[2, 3, 5], 0.37));
    let y = g.upsample2x(x).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 6, 10]);
    assert!(g.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
}

#[test]
fn upsample_single_sample_clamps() {
    let mut g = Graph::new();
    let x = g.input(t3(1, 1, 1, vec![4.5]));
    let y = g.upsample2x(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.5; 4]);
}

#[test]
fn upsample_matches_scalar_bilinear() {
    let plane = [0.0, 1.0, 2.0, 3.0];
    let mut g = Graph::new();
    let x = g.input(t3(1, 2, 2, plane.to_vec()));
    let y = g.upsample2x(x).unwrap();
    let out = g.value(y).data();
    for oy in 0..4 {
        for ox in 0..4 {
            let want = bilinear_at(&plane, 2, 2, oy, ox);
            assert!((out[oy * 4 + ox] - want).abs() < 1e-15);
        }
    }
    // first row: 0, 0.25, 0.75, 1
    assert_eq!(&out[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn pointwise_values() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![3], vec![0.0, -3.2, 1.0]).unwrap());
    let s = g.sigmoid(x);
    let r = g.relu(x);
    assert_eq!(g.value(s).data()[0], 0.5);
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g.value(s).data()[2] - oracle).abs() < 1e-15);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn sigmoid_stays_strictly_inside_unit_interval() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![4], vec![-800.0, -40.0, 40.0, 800.0]).unwrap());
    let s = g.sigmoid(x);
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn concat_shapes_and_gradient_routing() {
    let mut store = ParamStore::new();
    let a_id = store.add("a", Tensor::full(&[2, 4, 4], 1.0));
    let b_id = store.add("b", Tensor::full(&[3, 4, 4], 2.0));
    let mut g = Graph::new();
    let a = g.param(&store, a_id);
    let b = g.param(&store, b_id);
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[5, 4, 4]);
    let loss = g.sum(c);
    g.backward(loss, &mut store).unwrap();
    assert!(store.get(a_id).grad.data().iter().all(|&v| v == 1.0));
    assert!(store.get(b_id).grad.data().iter().all(|&v| v == 1.0));
}

#[test]
fn concat_with_empty_is_identity() {
    let mut g = Graph::new();
    let x = g.input(t3(2, 2, 2, (0..8).map(f64::from).collect()));
    let e = g.input(Tensor::zeros(&[0, 2, 2]));
    let c = g.concat_channels(x, e).unwrap();
    assert_eq!(g.value(c), g.value(x));
}

#[test]
fn concat_rejects_spatial_mismatch() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[1, 4, 4]));
    let b = g.input(Tensor::zeros(&[1, 4, 3]));
    assert!(g.concat_channels(a, b).is_err());
}

#[test]
fn linear_and_quadratic_gradients() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.5]).unwrap());
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let loss = g.sum(v);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[1.0; 4]);

    store.zero_grad();
    assert!(store.get(p).grad.data().iter().all(|&x| x == 0.0));
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    let loss = g.scale(s, 0.5);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), store.get(p).value.data());
}

#[test]
fn unreachable_parameters_keep_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::full(&[3], 1.0));
    let unused = store.add("unused", Tensor::full(&[3], 1.0));
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let _ = g.param(&store, unused);
    let loss = g.sum(u);
    g.backward(loss, &mut store).unwrap();
    assert!(store.get(unused).grad.data().iter().all(|&x| x == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::full(&[3], 1.0));
    let mut g = Graph::new();
    let v = g.param(&store, p);
    assert!(g.backward(v, &mut store).is_err());
}

/// Builds a small composite (conv, bias, relu, upsample, concat, sigmoid, bce)
/// and returns the loss variable.
fn composite(
    g: &mut Graph,
    store: &ParamStore,
    ids: &[ida_core::autodiff::ParamId],
    x: &Tensor,
    label: f64,
) -> Var {
    let xi = g.input(x.clone());
    let k1 = g.param(store, ids[0]);
    let b1 = g.param(store, ids[1]);
    let k2 = g.param(store, ids[2]);
    let k3 = g.param(store, ids[3]);
    let h = g.conv2d(xi, k1, 1, 1).unwrap();
    let h = g.add_bias(h, b1).unwrap();
    let h = g.relu(h);
    let d = g.conv2d(h, k2, 2, 2).unwrap();
    let d = g.relu(d);
    let u = g.upsample2x(d).unwrap();
    let c = g.concat_channels(u, h).unwrap();
    let o = g.conv2d(c, k3, 1, 1).unwrap();
    let o = g.sigmoid(o);
    let p = g.pick(o, 13).unwrap();
    g.bce(p, label, 1e-7).unwrap()
}

#[test]
fn composite_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for instance in 0..10 {
        let mut store = ParamStore::new();
        let ids = vec![
            store.add_uniform("k1", &[3, 2, 3, 3], 18, &mut rng),
            store.add_uniform("b1", &[3], 18, &mut rng),
            store.add_uniform("k2", &[4, 3, 5, 5], 75, &mut rng),
            store.add_uniform("k3", &[1, 7, 3, 3], 63, &mut rng),
        ];
        let x = random_tensor(&[2, 6, 6], &mut rng);
        let label = (instance % 2) as f64;
        let mut g = Graph::new();
        let loss = composite(&mut g, &store, &ids, &x, label);
        g.backward(loss, &mut store).unwrap();
        let signature = g.relu_signature();

        let h = 1e-5;
        for &id in &ids {
            let n = store.get(id).value.len();
            for i in 0..n {
                let analytic = store.get(id).grad.data()[i];
                let orig = store.get(id).value.data()[i];
                let eval = |v: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).value.data_mut()[i] = v;
                    let mut g = Graph::new();
                    let l = composite(&mut g, &s, &ids, &x, label);
                    (g.value(l).item(), g.relu_signature())
                };
                let (fp, sp) = eval(orig + h);
                let (fm, sm) = eval(orig - h);
                if sp != signature || sm != signature {
                    continue; // perturbation crosses a ReLU kink
                }
                let numeric = (fp - fm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn windowed_convolution_equals_full_map_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = random_tensor(&[3, 16, 16], &mut rng);
    let kt = random_tensor(&[2, 3, 5, 5], &mut rng);
    let mut g = Graph::inference();
    let x = g.input(xt.clone());
    let k = g.input(kt);
    let full = g.conv2d(x, k, 2, 2).unwrap();
    for &(r, c) in &[(0usize, 0usize), (3, 5), (7, 7), (6, 0)] {
        let out = Window {
            row: r,
            col: c,
            rows: 2.min(8 - r),
            cols: 1,
            height: 8,
            width: 8,
        };
        let need = ida_core::autodiff::kernels::conv_input_window(&out, 16, 16, 5, 2, 2);
        let crop = g.crop(x, Window::full(16, 16), need).unwrap();
        let y = g.conv2d_window(crop, k, 2, 2, need, out).unwrap();
        for ch in 0..2 {
            for dr in 0..out.rows {
                let a = g.value(y).data()[(ch * out.rows + dr) * out.cols];
                let b = g.value(full).data()[(ch * 8 + r + dr) * 8 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn windowed_upsample_equals_full_map_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = random_tensor(&[2, 5, 7], &mut rng);
    let mut g = Graph::inference();
    let x = g.input(xt);
    let full = g.upsample2x(x).unwrap();
    let out = Window {
        row: 3,
        col: 9,
        rows: 6,
        cols: 5,
        height: 10,
        width: 14,
    };
    let need = ida_core::autodiff::kernels::upsample_input_window(&out, 5, 7);
    let crop = g.crop(x, Window::full(5, 7), need).unwrap();
    let y = g.upsample2x_window(crop, need, out).unwrap();
    for ch in 0..2 {
        for r in 0..out.rows {
            for c in 0..out.cols {
                let a = g.value(y).data()[(ch * out.rows + r) * out.cols + c];
                let b = g.value(full).data()[(ch * 10 + out.row + r) * 14 + out.col + c];
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let p = store.add_uniform("p", &[5], 5, &mut rng);
        let mut adam = AdamState::new(&store, 3e-4);
        for _ in 0..20 {
            let mut g = Graph::new();
            let v = g.param(&store, p);
            let sq = g.mul(v, v).unwrap();
            let loss = g.sum(sq);
            g.backward(loss, &mut store).unwrap();
            adam.step(&mut store);
            store.zero_grad();
        }
        store.get(p).value.clone()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_follows_formula(
        cin in 1usize..4, cout in 1usize..4, h in 1usize..12, w in 1usize..12,
        k in 1usize..6, stride in 1usize..4, pad in 0usize..3,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut g = Graph::inference();
        let x = g.input(Tensor::full(&[cin, h, w], 0.5));
        let kern = g.input(Tensor::full(&[cout, cin, k, k], 0.1));
        let y = g.conv2d(x, kern, stride, pad).unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        prop_assert_eq!(g.value(y).shape(), &[cout, ho, wo][..]);
        prop_assert!(g.value(y).all_finite());
    }

    #[test]
    fn upsample_shape_doubles(c in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let mut g = Graph::inference();
        let x = g.input(Tensor::full(&[c, h, w], 1.0));
        let y = g.upsample2x(x).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[c, 2 * h, 2 * w][..]);
    }

    #[test]
    fn kernels_are_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = random_tensor(&[2, 6, 6], &mut rng);
        let kt = random_tensor(&[3, 2, 3, 3], &mut rng);
        let run = || {
            let mut g = Graph::inference();
            let x = g.input(xt.clone());
            let k = g.input(kt.clone());
            let y = g.conv2d(x, k, 1, 1).unwrap();
            let y = g.upsample2x(y).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
