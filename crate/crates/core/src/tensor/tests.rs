use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop convolution used as the reference.
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        let grp = co / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cin_g {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[co, ci, ky, kx])
                                * x.at(&[grp * cin_g + ci, iy as usize, ix as usize]);
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    let _ = cin;
    out
}

fn run_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: usize, p: usize, groups: usize) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, s, p, groups).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_identity_kernel_is_identity() {
    let x = Tensor::randn(&[3, 5, 6], 1.0, &mut rng(1));
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.set(&[c, c, 0, 0], 1.0);
    }
    assert_eq!(run_conv(&x, &w, None, 1, 0, 1), x);
}

#[test]
fn conv_ones_kernel_on_ramp_matches_loop() {
    let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = run_conv(&x, &w, None, 1, 0, 1);
    assert_eq!(y.shape(), &[1, 2, 2]);
    let oracle = conv_oracle(&x, &w, None, 1, 0, 1);
    assert!(y.max_abs_diff(&oracle) < 1e-12);
    // Top-left window of the ramp: 0+1+2+4+5+6+8+9+10.
    assert_eq!(y.data()[0], 45.0);
}

#[test]
fn conv_patchify_shape() {
    let x = Tensor::randn(&[3, 128, 160], 1.0, &mut rng(2));
    let w = Tensor::randn(&[48, 3, 4, 4], 0.1, &mut rng(3));
    let y = run_conv(&x, &w, None, 4, 0, 1);
    assert_eq!(y.shape(), &[48, 32, 40]);
}

#[test]
fn conv_general_matches_oracle() {
    let mut r = rng(4);
    for &(cin, cout, k, s, p, groups) in &[
        (4, 6, 3, 2, 1, 2),
        (3, 5, 4, 4, 0, 1),
        (2, 2, 3, 1, 1, 1),
        (6, 6, 7, 1, 3, 6),
        (5, 7, 1, 1, 0, 1),
    ] {
        let x = Tensor::randn(&[cin, 9, 11], 1.0, &mut r);
        let w = Tensor::randn(&[cout, cin / groups, k, k], 1.0, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let y = run_conv(&x, &w, Some(&b), s, p, groups);
        let o = conv_oracle(&x, &w, Some(&b), s, p, groups);
        assert_eq!(y.shape(), o.shape());
        assert!(y.max_abs_diff(&o) < 1e-10, "case {cin} {cout} {k} {s} {p} {groups}");
    }
}

#[test]
fn depthwise_equals_independent_single_channel_convs() {
    let mut r = rng(5);
    let c = 4;
    let x = Tensor::randn(&[c, 8, 7], 1.0, &mut r);
    let w = Tensor::randn(&[c, 1, 7, 7], 1.0, &mut r);
    let y = run_conv(&x, &w, None, 1, 3, c);
    for ch in 0..c {
        let xc = Tensor::new(&[1, 8, 7], x.data()[ch * 56..(ch + 1) * 56].to_vec()).unwrap();
        let wc = Tensor::new(&[1, 1, 7, 7], w.data()[ch * 49..(ch + 1) * 49].to_vec()).unwrap();
        let yc = run_conv(&xc, &wc, None, 1, 3, 1);
        let got = &y.data()[ch * 56..(ch + 1) * 56];
        for (a, b) in got.iter().zip(yc.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_bad_groups_and_oversized_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 0, 2), Err(crate::Error::Contract(_))));
    let big = g.constant(Tensor::zeros(&[1, 3, 7, 7]));
    assert!(matches!(g.conv2d(x, big, None, 1, 0, 1), Err(crate::Error::Contract(_))));
}

fn ln(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.layer_norm(xv, gv, bv, 1e-6).unwrap();
    g.value(y).clone()
}

#[test]
fn layer_norm_constant_and_zero_gamma() {
    let x = Tensor::full(&[4, 3, 3], 2.5);
    let y = ln(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]));
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = Tensor::randn(&[4, 3, 3], 1.0, &mut rng(6));
    let beta = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let y = ln(&x, &Tensor::zeros(&[4]), &beta);
    for c in 0..4 {
        for p in 0..9 {
            assert_eq!(y.data()[c * 9 + p], beta.data()[c]);
        }
    }
}

#[test]
fn layer_norm_matches_per_position_oracle() {
    let mut r = rng(7);
    let x = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
    let gamma = Tensor::randn(&[4], 1.0, &mut r);
    let beta = Tensor::randn(&[4], 1.0, &mut r);
    let y = ln(&x, &gamma, &beta);
    for p in 0..4 {
        let col: Vec<f64> = (0..4).map(|c| x.data()[c * 4 + p]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        for c in 0..4 {
            let want = (col[c] - mean) / (var + 1e-6).sqrt() * gamma.data()[c] + beta.data()[c];
            assert!((y.data()[c * 4 + p] - want).abs() < 1e-12);
        }
    }
}

fn unary(x: Tensor, f: impl Fn(&mut Graph, Var) -> crate::Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = f(&mut g, v).unwrap();
    g.value(y).clone()
}

#[test]
fn gelu_values() {
    let y = unary(Tensor::new(&[3], vec![0.0, 20.0, 1.0]).unwrap(), |g, v| g.gelu(v));
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 20.0).abs() < 1e-12);
    // Φ(1) to 16 digits.
    assert!((y.data()[2] - 0.841_344_746_068_542_9).abs() < 1e-14);
}

#[test]
fn softmax_values() {
    let y = unary(Tensor::full(&[2, 4], 3.0), |g, v| g.softmax(v, 1));
    assert!(y.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let y = unary(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), |g, v| g.softmax(v, 0));
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (k, want) in [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z].iter().enumerate() {
        assert!((y.data()[k] - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_over_leading_axis() {
    let x = Tensor::randn(&[3, 2, 2], 2.0, &mut rng(8));
    let y = unary(x, |g, v| g.softmax(v, 0));
    for p in 0..4 {
        let s: f64 = (0..3).map(|k| y.data()[k * 4 + p]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn avg_pool_cases() {
    let x = Tensor::randn(&[2, 5, 7], 1.0, &mut rng(9));
    let same = unary(x.clone(), |g, v| g.avg_pool2d(v, 5, 7));
    assert!(same.max_abs_diff(&x) < 1e-15);

    let global = unary(x.clone(), |g, v| g.avg_pool2d(v, 1, 1));
    for c in 0..2 {
        let mean = x.data()[c * 35..(c + 1) * 35].iter().sum::<f64>() / 35.0;
        assert!((global.data()[c] - mean).abs() < 1e-14);
    }

    let ramp = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    let q = unary(ramp, |g, v| g.avg_pool2d(v, 2, 2));
    // Quadrant means of 0..16 laid out row-major.
    assert_eq!(q.data(), &[2.5, 4.5, 10.5, 12.5]);

    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(&[1, 3, 3]));
    assert!(g.avg_pool2d(v, 0, 1).is_err());
    assert!(g.avg_pool2d(v, 4, 1).is_err());
}

#[test]
fn avg_pool_uneven_bins_tile_input() {
    // 5 rows into 2 bins: rows {0,1} and {2,3,4}.
    let x = Tensor::from_fn(&[1, 5, 1], |i| i as f64);
    let y = unary(x, |g, v| g.avg_pool2d(v, 2, 1));
    assert_eq!(y.data(), &[0.5, 3.0]);
}

fn identity_grid(h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set(&[0, y, x], x as f64);
            t.set(&[1, y, x], y as f64);
        }
    }
    t
}

fn sample(x: &Tensor, coords: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (xv, cv) = (g.constant(x.clone()), g.constant(coords.clone()));
    let y = g.grid_sample(xv, cv).unwrap();
    g.value(y).clone()
}

#[test]
fn grid_sample_cases() {
    let x = Tensor::randn(&[3, 6, 5], 1.0, &mut rng(10));
    assert_eq!(sample(&x, &identity_grid(6, 5)), x);

    let row = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
    let c = Tensor::new(&[2, 1, 1], vec![0.5, 0.0]).unwrap();
    assert!((sample(&row, &c).item() - 0.5).abs() < 1e-15);

    let k = Tensor::full(&[2, 4, 4], 0.7);
    let coords = Tensor::uniform(&[2, 3, 3], -5.0, 9.0, &mut rng(11));
    assert!(sample(&k, &coords).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn backward_simple_sums() {
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng(12));
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let s = g.sum(xv).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().data().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    let gx = g.grad(xv).unwrap();
    for (d, v) in gx.data().iter().zip(x.data()) {
        assert!((d - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], 1e300));
    assert!(matches!(g.mul(x, x), Err(crate::Error::Numeric(_))));
}

#[test]
fn conv_norm_gelu_chain_gradcheck() {
    let mut r = rng(13);
    let x = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[2, 2, 3, 3], 0.5, &mut r);
    let b = Tensor::randn(&[2], 0.5, &mut r);
    let gamma = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
    let beta = Tensor::randn(&[2], 0.5, &mut r);
    let weights = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
    let rep = gradcheck_many(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            let y = g.layer_norm(y, v[3], v[4], 1e-6)?;
            let y = g.gelu(y)?;
            let wt = g.constant(weights.clone());
            let y = g.mul(y, wt)?;
            g.sum(y)
        },
        &[x, w, b, gamma, beta],
        1e-5,
        1e-3,
        None,
    )
    .unwrap();
    assert!(rep.passed, "max rel err {}", rep.max_rel_error);
}

#[test]
fn gradcheck_controls() {
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng(14));
    let rep = gradcheck(|g, v| g.sum(v), &x, 1e-5, 1e-3).unwrap();
    assert!(rep.passed);
    assert!(rep.max_rel_error < 1e-9);

    let rep = gradcheck(
        |g, v| {
            let y = g.gelu(v)?;
            g.sum(y)
        },
        &x,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(rep.passed, "{}", rep.max_rel_error);

    // Claims d/dx sum(x²) = x instead of 2x.
    let wrong = gradcheck_fn(
        |t| Ok(t.data().iter().map(|v| v * v).sum()),
        |t| Ok(t.clone()),
        &x,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(!wrong.passed);
}

/// Weighted sum with fixed random weights so that every output entry matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn every_op_gradchecks() {
    let mut r = rng(15);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let check = |f: &dyn Fn(&mut Graph, &[Var]) -> crate::Result<Var>, ins: &[Tensor]| {
        let rep = gradcheck_many(f, ins, 1e-5, 1e-3, None).unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_error);
    };
    check(&|g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 1) }, &[a.clone(), b.clone()]);
    check(&|g, v| { let y = g.transpose(v[0])?; probe(g, y, 2) }, std::slice::from_ref(&a));
    check(&|g, v| { let y = g.softmax(v[0], 1)?; probe(g, y, 3) }, std::slice::from_ref(&a));
    check(&|g, v| { let y = g.softmax(v[0], 0)?; probe(g, y, 4) }, std::slice::from_ref(&a));
    check(&|g, v| { let y = g.narrow(v[0], 1, 2)?; probe(g, y, 5) }, std::slice::from_ref(&a));
    check(&|g, v| { let y = g.concat(&[v[0], v[0]])?; probe(g, y, 6) }, std::slice::from_ref(&a));
    check(&|g, v| { let y = g.scale(v[0], -1.7)?; probe(g, y, 7) }, std::slice::from_ref(&a));
    check(
        &|g, v| { let s = g.index(v[1], 3)?; let y = g.scale_by(v[0], s)?; probe(g, y, 8) },
        &[a.clone(), b.clone()],
    );
    check(&|g, v| { let y = g.sub(v[0], v[1])?; probe(g, y, 9) }, &[a.clone(), a.clone()]);
    check(&|g, v| { let y = g.abs(v[0])?; g.mean(y) }, std::slice::from_ref(&a));
    let img = Tensor::randn(&[2, 5, 7], 1.0, &mut r);
    check(&|g, v| { let y = g.avg_pool2d(v[0], 3, 2)?; probe(g, y, 10) }, std::slice::from_ref(&img));
    // Keep coordinates off integer lattice points where bilinear weights kink.
    let coords = Tensor::from_fn(&[2, 3, 4], |i| 0.37 + (i as f64 * 0.731) % 5.5);
    check(&|g, v| { let y = g.grid_sample(v[0], v[1])?; probe(g, y, 11) }, &[img.clone(), coords]);
    let w = Tensor::randn(&[4, 1, 3, 3], 1.0, &mut r);
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    check(
        &|g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2)?; probe(g, y, 12) },
        &[img.clone(), w, bias],
    );
    let dw = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut r);
    check(&|g, v| { let y = g.conv2d(v[0], v[1], None, 1, 1, 2)?; probe(g, y, 13) }, &[img.clone(), dw]);
    let pw = Tensor::randn(&[3, 2, 1, 1], 1.0, &mut r);
    check(&|g, v| { let y = g.conv2d(v[0], v[1], None, 1, 0, 1)?; probe(g, y, 14) }, &[img, pw]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let x = Tensor::new(&[3, 4], vals).unwrap();
        let y = unary(x.clone(), |g, v| g.softmax(v, 1));
        for r in 0..3 {
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(y.data()[r * 4..(r + 1) * 4].iter().all(|&p| p > 0.0 && p < 1.0 || p == 1.0));
        }
        let shifted = Tensor::from_fn(&[3, 4], |i| x.data()[i] + shift);
        let ys = unary(shifted, |g, v| g.softmax(v, 1));
        prop_assert!(ys.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn grid_sample_identity_is_exact(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let x = Tensor::randn(&[2, h, w], 1.0, &mut rng(seed));
        prop_assert_eq!(sample(&x, &identity_grid(h, w)), x);
    }

    #[test]
    fn random_conv_shapes_gradcheck(
        cin in 1usize..3, cout in 1usize..3, k in 1usize..4, stride in 1usize..3, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[cin, 5, 4], 1.0, &mut r);
        let w = Tensor::randn(&[cout, cin, k, k], 1.0, &mut r);
        let rep = gradcheck_many(
            |g, v| { let y = g.conv2d(v[0], v[1], None, stride, 1, 1)?; let y = g.gelu(y)?; probe(g, y, seed) },
            &[x, w], 1e-5, 1e-3, None,
        ).unwrap();
        prop_assert!(rep.passed, "{}", rep.max_rel_error);
    }
}
