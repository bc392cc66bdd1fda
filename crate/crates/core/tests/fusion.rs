mod common;

use common::{conv_oracle, deconv_oracle, rng};
use lffn_core::fusion::{
    build_pyramid, build_pyramid_backward, build_pyramid_forward, expand_compress, lateral_merge, pyramid_output_shapes,
    FusionConfig, FusionParams, MergeMode, PyramidInputs, PyramidOutputs,
};
use lffn_core::gradcheck::{grad_check, project, Probe, END_TO_END_TOLERANCE};
use lffn_core::kernels::{ConvParams, DeconvParams};
use lffn_core::params::ParamSet;
use lffn_core::{Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn inputs(channels: [usize; 4], c2_size: usize, seed: u64) -> PyramidInputs {
    let mut r = rng(seed);
    let mk = |c: usize, s: usize, r: &mut _| Tensor::random_normal([1, c, s, s], 1.0, r);
    PyramidInputs {
        c2: mk(channels[0], c2_size, &mut r),
        c3: mk(channels[1], c2_size / 2, &mut r),
        c4: mk(channels[2], c2_size / 4, &mut r),
        c5: mk(channels[3], c2_size / 8, &mut r),
    }
}

fn tiny_config(schedule: Vec<usize>, out: usize) -> FusionConfig {
    FusionConfig {
        output_channels: out,
        p5_channels: out,
        topdown_channel_schedule: schedule,
        ..Default::default()
    }
}

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn concat_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    let mut out = Tensor::zeros([sa.n, sa.c + sb.c, sa.h, sa.w]);
    for n in 0..sa.n {
        for c in 0..sa.c + sb.c {
            for y in 0..sa.h {
                for x in 0..sa.w {
                    *out.at_mut(n, c, y, x) = if c < sa.c { a.at(n, c, y, x) } else { b.at(n, c - sa.c, y, x) };
                }
            }
        }
    }
    out
}

/// The pyramid assembled from the loop-based oracles.
fn pyramid_oracle(x: &PyramidInputs, p: &FusionParams) -> Vec<Tensor> {
    let p5_pre = conv_oracle(&x.c5, &p.p5_lateral);
    let mut top = p5_pre.clone();
    let mut outs = Vec::new();
    for (m, bottom) in p.merges.iter().zip([&x.c4, &x.c3, &x.c2]) {
        let z = relu(&conv_oracle(&relu(&deconv_oracle(&top, &m.deconv)), &m.compress));
        let merged = concat_oracle(&conv_oracle(bottom, &m.lateral), &z);
        let smoothed = m.smooth.as_ref().map_or(merged.clone(), |s| conv_oracle(&merged, s));
        outs.push(relu(&smoothed));
        top = merged;
    }
    outs.reverse();
    let p5 = relu(&p5_pre);
    let s = p5.shape();
    let mut p6 = Tensor::zeros([s.n, s.c, s.h.div_ceil(2), s.w.div_ceil(2)]);
    for c in 0..s.c {
        for y in 0..p6.shape().h {
            for xx in 0..p6.shape().w {
                *p6.at_mut(0, c, y, xx) = p5.at(0, c, 2 * y, 2 * xx);
            }
        }
    }
    outs.push(p5);
    outs.push(p6);
    outs
}

#[test]
fn example_backbone_shapes_yield_256_channel_pyramid() {
    let config = FusionConfig {
        post_merge_smoothing: false,
        ..Default::default()
    };
    let mut r = rng(1);
    let x = PyramidInputs {
        c2: Tensor::random_normal([1, 256, 64, 64], 1.0, &mut r),
        c3: Tensor::random_normal([1, 512, 32, 32], 1.0, &mut r),
        c4: Tensor::random_normal([1, 1024, 16, 16], 1.0, &mut r),
        c5: Tensor::random_normal([1, 2048, 8, 8], 1.0, &mut r),
    };
    let params = FusionParams::init(&config, x.channels(), &mut r).unwrap();
    let out = build_pyramid(&x, &params, &config).unwrap();
    let dims: Vec<[usize; 4]> = out.levels().iter().map(|t| t.shape().dims()).collect();
    assert_eq!(
        dims,
        vec![[1, 256, 64, 64], [1, 256, 32, 32], [1, 256, 16, 16], [1, 256, 8, 8], [1, 256, 4, 4]]
    );
    let predicted: Vec<Shape> = pyramid_output_shapes(&x, &config).to_vec();
    assert_eq!(predicted, out.levels().iter().map(|t| t.shape()).collect::<Vec<_>>());
    assert!(out.levels().iter().all(|t| t.is_finite()));
}

#[test]
fn default_schedule_merges_32_upsampled_with_224_lateral_at_p2() {
    let config = FusionConfig::default();
    let params = FusionParams::init(&config, [8, 8, 8, 8], &mut rng(2)).unwrap();
    let p2 = &params.merges[2];
    assert_eq!(p2.compress.out_channels(), 32);
    assert_eq!(p2.lateral.out_channels(), 224);
    let widths: Vec<(usize, usize)> = params
        .merges
        .iter()
        .map(|m| (m.lateral.out_channels(), m.compress.out_channels()))
        .collect();
    assert_eq!(widths, vec![(128, 128), (192, 64), (224, 32)]);
}

#[test]
fn pyramid_matches_oracle_composition() {
    let config = tiny_config(vec![6, 4, 1], 8);
    let x = inputs([3, 4, 5, 6], 16, 3);
    let params = FusionParams::init(&config, x.channels(), &mut rng(4)).unwrap();
    let got = build_pyramid(&x, &params, &config).unwrap().into_levels();
    let want = pyramid_oracle(&x, &params);
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert_eq!(g.shape(), w.shape(), "P{}", i + 2);
        assert!(g.max_abs_diff(w) < 1e-10, "P{} differs by {}", i + 2, g.max_abs_diff(w));
    }
}

#[test]
fn expand_compress_matches_oracle_and_doubles() {
    let mut r = rng(5);
    let x = Tensor::random_normal([2, 4, 3, 5], 1.0, &mut r);
    let dec = DeconvParams::upsample2x(4, 4, &mut r);
    let comp = ConvParams::kaiming(2, 4, 1, 1, 0, &mut r);
    let z = expand_compress(&x, &dec, &comp).unwrap();
    assert_eq!(z.shape().dims(), [2, 2, 6, 10]);
    let want = relu(&conv_oracle(&relu(&deconv_oracle(&x, &dec)), &comp));
    assert!(z.max_abs_diff(&want) < 1e-12);
    assert!(z.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn lateral_merge_spatial_mismatch_is_dimension_error() {
    let mut r = rng(6);
    let lat = ConvParams::kaiming(3, 2, 1, 1, 0, &mut r);
    let e = lateral_merge(&Tensor::zeros([1, 2, 4, 4]), &Tensor::zeros([1, 1, 4, 5]), &lat).unwrap_err();
    assert!(matches!(e, lffn_core::Error::Dimension(_)), "{e}");
}

#[test]
fn pyramid_is_deterministic() {
    let config = tiny_config(vec![4, 2, 1], 6);
    let x = inputs([2, 3, 4, 5], 16, 7);
    let params = FusionParams::init(&config, x.channels(), &mut rng(8)).unwrap();
    let a = build_pyramid(&x, &params, &config).unwrap();
    let b = build_pyramid(&x, &params, &config).unwrap();
    for (p, q) in a.levels().iter().zip(b.levels()) {
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let again = FusionParams::init(&config, x.channels(), &mut rng(8)).unwrap();
    assert_eq!(again, params);
}

#[test]
fn additive_mode_keeps_output_shapes() {
    let x = inputs([3, 4, 5, 6], 16, 9);
    let concat = tiny_config(vec![6, 4, 2], 8);
    let add = FusionConfig {
        merge_mode: MergeMode::Add,
        ..concat.clone()
    };
    let pc = FusionParams::init(&concat, x.channels(), &mut rng(10)).unwrap();
    let pa = FusionParams::init(&add, x.channels(), &mut rng(10)).unwrap();
    let oc = build_pyramid(&x, &pc, &concat).unwrap();
    let oa = build_pyramid(&x, &pa, &add).unwrap();
    for (c, a) in oc.levels().iter().zip(oa.levels()) {
        assert_eq!(c.shape(), a.shape());
    }
    assert!(pa.merges.iter().all(|m| m.lateral.out_channels() == 8 && m.compress.out_channels() == 8));
}

#[test]
fn params_that_break_the_channel_sum_are_rejected() {
    let config = tiny_config(vec![6, 4, 2], 8);
    let x = inputs([3, 4, 5, 6], 16, 11);
    let mut params = FusionParams::init(&config, x.channels(), &mut rng(12)).unwrap();
    params.merges[1].compress = ConvParams::zeros(5, 8, 1, 1, 0);
    let e = build_pyramid(&x, &params, &config).unwrap_err().to_string();
    assert!(e.contains("P3"), "{e}");
}

fn pyramid_gradcheck(config: &FusionConfig, seed: u64) -> lffn_core::gradcheck::GradCheckReport {
    let x = inputs([2, 3, 3, 4], 8, seed);
    let mut r = rng(seed + 1);
    let mut params = FusionParams::init(config, x.channels(), &mut r).unwrap();
    // zero biases put ReLUs exactly on their kink wherever an upsampled pixel is all zero
    let generic: Vec<f64> = (0..params.num_params()).map(|_| r.random_range(-0.5..0.5)).collect();
    params.unflatten(&generic);
    let (out, cache) = build_pyramid_forward(&x, &params, config).unwrap();
    let proj: Vec<Tensor> = out.levels().iter().map(|t| Tensor::random_normal(t.shape(), 1.0, &mut r)).collect();
    let grads = PyramidOutputs {
        p2: proj[0].clone(),
        p3: proj[1].clone(),
        p4: proj[2].clone(),
        p5: proj[3].clone(),
        p6: proj[4].clone(),
    };
    let (dx, dp) = build_pyramid_backward(&cache, &params, config, &grads).unwrap();
    let probes = [
        Probe::new("params", params.flatten(), dp.flatten()),
        Probe::tensor("c2", &x.c2, &dx.c2),
        Probe::tensor("c3", &x.c3, &dx.c3),
        Probe::tensor("c4", &x.c4, &dx.c4),
        Probe::tensor("c5", &x.c5, &dx.c5),
    ];
    grad_check("pyramid", &probes, END_TO_END_TOLERANCE, |v| {
        let mut p = params.clone();
        p.unflatten(&v[0]);
        let xi = PyramidInputs {
            c2: Tensor::from_vec(x.c2.shape(), v[1].clone()).unwrap(),
            c3: Tensor::from_vec(x.c3.shape(), v[2].clone()).unwrap(),
            c4: Tensor::from_vec(x.c4.shape(), v[3].clone()).unwrap(),
            c5: Tensor::from_vec(x.c5.shape(), v[4].clone()).unwrap(),
        };
        let o = build_pyramid(&xi, &p, config).unwrap();
        o.levels().iter().zip(&proj).map(|(t, w)| project(t, w)).sum()
    })
}

#[test]
fn pyramid_gradients_pass_finite_differences() {
    let report = pyramid_gradcheck(&tiny_config(vec![4, 2, 1], 6), 13);
    assert!(report.pass, "{report}");
}

#[test]
fn pyramid_gradients_without_smoothing_or_relu_and_in_add_mode() {
    let base = tiny_config(vec![3, 2, 1], 5);
    let plain = FusionConfig {
        post_merge_smoothing: false,
        output_relu: false,
        ..base.clone()
    };
    let report = pyramid_gradcheck(&plain, 15);
    assert!(report.pass, "{report}");
    let add = FusionConfig {
        merge_mode: MergeMode::Add,
        ..base
    };
    let report = pyramid_gradcheck(&add, 17);
    assert!(report.pass, "{report}");
}

#[test]
fn random_schedules_satisfy_channel_sum_and_weakening() {
    let mut r = rng(19);
    for _ in 0..10 {
        let out = r.random_range(4..40usize);
        let mut s: Vec<usize> = (0..3).map(|_| r.random_range(1..out)).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s.dedup();
        if s.len() < 3 {
            continue;
        }
        let config = tiny_config(s.clone(), out);
        let x = inputs([2, 3, 4, 5], 8, r.random());
        let params = FusionParams::init(&config, x.channels(), &mut r).unwrap();
        let pyr = build_pyramid(&x, &params, &config).unwrap();
        assert!(pyr.levels().iter().all(|t| t.shape().c == out));
        let mut prev_lateral = 0;
        for (step, m) in params.merges.iter().enumerate() {
            let (lat, td) = (m.lateral.out_channels(), m.compress.out_channels());
            assert_eq!(lat + td, out);
            assert_eq!(td, s[step]);
            assert!(lat > prev_lateral);
            prev_lateral = lat;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merge_keeps_lateral_and_topdown_channels_verbatim(
        cb in 1usize..5, lat in 1usize..5, td in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let bottom = Tensor::random_normal([1, cb, h, w], 1.0, &mut r);
        let top = Tensor::random_normal([1, td, h, w], 1.0, &mut r);
        let lp = ConvParams::kaiming(lat, cb, 1, 1, 0, &mut r);
        let merged = lateral_merge(&bottom, &top, &lp).unwrap();
        prop_assert_eq!(merged.shape().c, lat + td);
        let lateral = conv_oracle(&bottom, &lp);
        prop_assert!(merged.slice_channels(0..lat).unwrap().max_abs_diff(&lateral) < 1e-12);
        let tail = merged.slice_channels(lat..lat + td).unwrap();
        prop_assert!(tail.data().iter().zip(top.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn expand_compress_of_zeros_is_zero_and_has_scheduled_width() {
    let mut r = rng(30);
    let dec = DeconvParams::upsample2x(256, 256, &mut r);
    let comp = ConvParams::kaiming(128, 256, 1, 1, 0, &mut r);
    let z = expand_compress(&Tensor::zeros([1, 256, 4, 4]), &dec, &comp).unwrap();
    assert_eq!(z.shape().dims(), [1, 128, 8, 8]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    let wrong = ConvParams::kaiming(8, 64, 1, 1, 0, &mut r);
    assert!(matches!(
        expand_compress(&Tensor::zeros([1, 256, 4, 4]), &dec, &wrong),
        Err(lffn_core::Error::Config(_))
    ));
}

#[test]
fn expand_compress_gradients_pass_finite_differences() {
    use lffn_core::fusion::{expand_compress_backward, expand_compress_forward};
    let mut r = rng(31);
    let x = Tensor::random_normal([1, 3, 3, 2], 1.0, &mut r);
    let mut dec = DeconvParams::upsample2x(3, 3, &mut r);
    let mut comp = ConvParams::kaiming(2, 3, 1, 1, 0, &mut r);
    dec.bias = vec![0.1, -0.2, 0.3];
    comp.bias = vec![0.15, -0.05];
    let (z, cache) = expand_compress_forward(&x, &dec, &comp).unwrap();
    let proj = Tensor::random_normal(z.shape(), 1.0, &mut r);
    let (dx, gd, gc) = expand_compress_backward(&cache, &dec, &comp, &proj).unwrap();
    let probes = [
        Probe::tensor("input", &x, &dx),
        Probe::new("deconv", dec.flatten(), gd.flatten()),
        Probe::new("compress", comp.flatten(), gc.flatten()),
    ];
    let report = grad_check("expand_compress", &probes, lffn_core::gradcheck::LAYER_TOLERANCE, |v| {
        let xi = Tensor::from_vec(x.shape(), v[0].clone()).unwrap();
        let (mut d, mut c) = (dec.clone(), comp.clone());
        d.unflatten(&v[1]);
        c.unflatten(&v[2]);
        project(&expand_compress(&xi, &d, &c).unwrap(), &proj)
    });
    assert!(report.pass, "{report}");
}

#[test]
fn merge_backward_splits_gradient_by_branch() {
    use lffn_core::fusion::merge_backward;
    let mut r = rng(32);
    let bottom = Tensor::random_normal([1, 5, 4, 4], 1.0, &mut r);
    let lat = ConvParams::kaiming(3, 5, 1, 1, 0, &mut r);
    let mut up = Tensor::random_normal([1, 5, 4, 4], 1.0, &mut r);
    for c in 3..5 {
        up.plane_mut(0, c).fill(0.0);
    }
    let (d_bottom, d_top, _) = merge_backward(&bottom, &lat, MergeMode::Concat, &up).unwrap();
    assert_eq!(d_top.shape().c, 2);
    assert!(d_top.data().iter().all(|&v| v == 0.0));
    assert!(d_bottom.data().iter().any(|&v| v != 0.0));
}
