use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stanet::gradcheck::{grad_check, grad_check_filtered};
use stanet::tensor::kernels::Activation;
use stanet::{ConvVars, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(dims, -1.0, 1.0, r)
}

/// Plain nested-loop convolution used as the reference.
fn conv_reference(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.nchw().unwrap();
    let [cout, cg, k, _] = w.dims()[..] else {
        panic!()
    };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let og = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b_ in 0..n {
        for co in 0..cout {
            let g = co / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co] as f64);
                    for ci in 0..cg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.at4(b_, g * cg + ci, iy as usize, ix as usize);
                                acc += (xv * w.at4(co, ci, ky, kx)) as f64;
                            }
                        }
                    }
                    out.data_mut()[((b_ * cout + co) * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
    }
    let _ = cin;
    out
}

fn conv(
    tape: &Tape,
    x: stanet::Var,
    w: stanet::Var,
    b: Option<stanet::Var>,
    s: usize,
    p: usize,
    g: usize,
) -> stanet::Var {
    tape.conv2d(
        x,
        &ConvVars {
            weight: w,
            bias: b,
            stride: s,
            padding: p,
            groups: g,
        },
    )
    .unwrap()
}

#[test]
fn conv_matches_reference_for_all_paths() {
    let mut r = rng(1);
    // (cin, cout, k, stride, pad, groups)
    let cases = [
        (3, 8, 3, 2, 1, 1),
        (4, 6, 1, 1, 0, 1),
        (5, 5, 5, 1, 2, 5),
        (6, 6, 5, 2, 2, 6),
        (4, 6, 3, 1, 1, 2),
        (4, 3, 1, 2, 0, 1),
    ];
    for (cin, cout, k, s, p, g) in cases {
        let x = randn(&[2, cin, 9, 7], &mut r);
        let w = randn(&[cout, cin / g, k, k], &mut r);
        let b = randn(&[cout], &mut r);
        let tape = Tape::new();
        let (xv, wv, bv) = (
            tape.leaf(x.clone()),
            tape.leaf(w.clone()),
            tape.leaf(b.clone()),
        );
        let y = conv(&tape, xv, wv, Some(bv), s, p, g);
        let expect = conv_reference(&x, &w, Some(&b), s, p, g);
        assert_eq!(tape.dims(y), expect.dims());
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-5);
    }
}

#[test]
fn depthwise_equals_independent_per_channel_conv() {
    let mut r = rng(2);
    let c = 4;
    let x = randn(&[1, c, 8, 8], &mut r);
    let w = randn(&[c, 1, 5, 5], &mut r);
    let tape = Tape::new();
    let y = conv(
        &tape,
        tape.leaf(x.clone()),
        tape.leaf(w.clone()),
        None,
        1,
        2,
        c,
    );
    let y = tape.value(y).clone();
    for ch in 0..c {
        let xs = Tensor::new(&[1, 1, 8, 8], x.data()[ch * 64..(ch + 1) * 64].to_vec()).unwrap();
        let ws = Tensor::new(&[1, 1, 5, 5], w.data()[ch * 25..(ch + 1) * 25].to_vec()).unwrap();
        let t2 = Tape::new();
        let ys = conv(&t2, t2.leaf(xs), t2.leaf(ws), None, 1, 2, 1);
        let single = t2.value(ys);
        for i in 0..64 {
            assert!((single.data()[i] - y.data()[ch * 64 + i]).abs() < 1e-6);
        }
    }
}

#[test]
fn conv_gradients_pass_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let inputs = vec![
            randn(&[1, 3, 8, 8], &mut r),
            randn(&[4, 3, 3, 3], &mut r),
            randn(&[4], &mut r),
        ];
        let rep = grad_check(
            |t, v| Ok(conv(t, v[0], v[1], Some(v[2]), 1, 1, 1)),
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "seed {seed}: {rep:?}");

        let inputs = vec![randn(&[1, 4, 7, 7], &mut r), randn(&[4, 1, 5, 5], &mut r)];
        let rep = grad_check(|t, v| Ok(conv(t, v[0], v[1], None, 2, 2, 4)), &inputs, 1e-3).unwrap();
        assert!(rep.max_rel_error < 1e-3, "depthwise seed {seed}: {rep:?}");
    }
}

#[test]
fn bilinear_sampling_identity_midpoint_and_gradient() {
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 * 1.5);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let coords = Tensor::new(&[1, 2, 1, 2], vec![1.0, 1.5, 2.0, 0.0]).unwrap();
    let y = tape.bilinear_sample(xv, tape.leaf(coords)).unwrap();
    let y = tape.value(y);
    assert_eq!(y.data()[0], x.at4(0, 0, 1, 2));
    assert_eq!(y.data()[1], 0.5 * (x.at4(0, 0, 1, 0) + x.at4(0, 0, 2, 0)));

    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let img = randn(&[1, 2, 5, 5], &mut r);
        // Fractional coordinates kept away from integer kinks, some outside.
        let coords = Tensor::from_fn(&[1, 2, 3, 3], |_| {
            let base: i32 = r.gen_range(-1..5);
            base as f32 + r.gen_range(0.1..0.9)
        });
        let rep = grad_check(|t, v| t.bilinear_sample(v[0], v[1]), &[img, coords], 1e-3).unwrap();
        assert!(rep.max_rel_error < 1e-3, "seed {seed}: {rep:?}");
    }
}

#[test]
fn activations_values_and_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![-3.0, 0.0, 3.0]).unwrap());
    let hs = tape.activation(Activation::Hardswish, x);
    assert_eq!(tape.value(hs).data(), &[0.0, 0.0, 3.0]);
    let sg = tape.sigmoid(x);
    assert_eq!(tape.value(sg).data()[1], 0.5);

    for kind in [
        Activation::Relu,
        Activation::Hardswish,
        Activation::Sigmoid,
        Activation::HardSigmoid,
    ] {
        for seed in 0..10 {
            let mut r = rng(300 + seed);
            let x = Tensor::uniform(&[40], -5.0, 5.0, &mut r);
            let rep = grad_check_filtered(
                |t, v| Ok(t.activation(kind, v[0])),
                &[x],
                1e-3,
                |_, _, v| kind.kinks().iter().any(|k| (v - k).abs() < 1e-2),
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-3, "{kind:?} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn relu_passes_gradient_only_for_positive_inputs() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap());
    let y = tape.relu(x);
    let g = tape.backward(tape.sum(y));
    assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn pooling_constant_and_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 2, 4, 4], 3.25));
    let y = tape.avg_pool(x, 2, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 3.25));
    for seed in 0..10 {
        let mut r = rng(400 + seed);
        let x = randn(&[2, 2, 6, 6], &mut r);
        let rep = grad_check(
            |t, v| t.avg_pool(v[0], 2, 2),
            std::slice::from_ref(&x),
            1e-3,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3);
        let rep = grad_check(|t, v| t.global_avg_pool(v[0]), &[x], 1e-3).unwrap();
        assert!(rep.max_rel_error < 1e-3);
    }
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 512, 7, 7]));
    assert_eq!(
        tape.dims(tape.global_avg_pool(x).unwrap()),
        vec![1, 512, 1, 1]
    );
}

#[test]
fn concat_and_cross_entropy_gradients() {
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let a = randn(&[2, 1, 3, 3], &mut r);
        let b = randn(&[2, 2, 3, 3], &mut r);
        let w = randn(&[1, 3, 1, 1], &mut r);
        // A weighted read-out makes each channel range see a distinct upstream gradient.
        let rep = grad_check(
            |t, v| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                Ok(conv(t, c, v[2], None, 1, 0, 1))
            },
            &[a, b, w],
            1e-3,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "concat seed {seed}: {rep:?}");

        let logits = Tensor::uniform(&[4, 22], -3.0, 3.0, &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..22)).collect();
        let rep = grad_check(
            |t, v| Ok(t.cross_entropy(v[0], &labels)?.0),
            &[logits],
            1e-3,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "ce seed {seed}: {rep:?}");
    }
}

#[test]
fn stride_chain_reaches_table_sizes() {
    let mut side = 224;
    let mut seen = vec![];
    for _ in 0..5 {
        side = (side + 2 - 3) / 2 + 1;
        seen.push(side);
    }
    assert_eq!(seen, vec![112, 56, 28, 14, 7]);
}
