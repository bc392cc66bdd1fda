//! The standard gradient-check suite: every differentiable layer on a small
//! random instance, plus end-to-end checks of the backbone, the pyramid and
//! the full detector in each ablation mode.

use lffn_core::aqm::{aqm_backward, aqm_forward, aqm_forward_traced, se_block, se_block_backward, se_block_forward, AqmParams, SeBlockParams};
use lffn_core::fusion::{
    build_pyramid, build_pyramid_backward, build_pyramid_forward, expand_compress, expand_compress_backward,
    expand_compress_forward, FusionConfig, FusionParams, PyramidInputs, PyramidOutputs,
};
use lffn_core::gradcheck::{
    grad_check, kinks, project, GradCheckReport, Probe, DEFAULT_STEP, END_TO_END_TOLERANCE, LAYER_TOLERANCE,
};
use lffn_core::kernels::*;
use lffn_core::linalg::Matrix;
use lffn_core::modelspec::{build_toy_backbone, toy_backbone_backward, toy_backbone_forward, ToyBackboneConfig};
use lffn_core::params::ParamSet;
use lffn_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationMode, RunConfig};
use crate::dataset::DatasetConfig;
use crate::model::{Detector, Phase};

/// A check result, flagged when it failed at an instance where finite
/// differences straddle a kink and therefore say nothing about the gradient.
pub struct Checked {
    report: GradCheckReport,
    kinked: bool,
}

fn check<F: FnMut(&[Vec<f64>]) -> f64>(op: &str, probes: &[Probe], tol: f64, mut loss: F) -> Checked {
    let report = grad_check(op, probes, tol, &mut loss);
    let kinked = !report.pass && !kinks(probes, DEFAULT_STEP, &mut loss).is_empty();
    Checked { report, kinked }
}

/// Draws kinked instances again, at most this many times per case.
const MAX_DRAWS: usize = 8;

fn redraw(rng: &mut ChaCha8Rng, mut case: impl FnMut(&mut ChaCha8Rng) -> Result<Checked>) -> Result<GradCheckReport> {
    let mut last = case(rng)?;
    for _ in 1..MAX_DRAWS {
        if !last.kinked {
            break;
        }
        last = case(rng)?;
    }
    Ok(last.report)
}

fn randomize<P: ParamSet>(p: &mut P, rng: &mut ChaCha8Rng, scale: f64) {
    // Non-zero biases keep ReLU inputs off their kink.
    let v: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-scale..scale)).collect();
    p.unflatten(&v);
}

fn rebuild(like: &Tensor, v: &[f64]) -> Tensor {
    Tensor::from_vec(like.shape(), v.to_vec()).expect("probe keeps its length")
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let x = Tensor::random_normal([2, 4, 5, 6], 1.0, rng);
    let mut p = ConvParams::new(Tensor::zeros([6, 2, 3, 3]), vec![0.0; 6], 2, 1, 2)?;
    randomize(&mut p, rng, 0.5);
    let proj = Tensor::random_normal(p.output_shape(x.shape())?, 1.0, rng);
    let (dx, g) = conv2d_backward(&x, &p, &proj)?.into_params(&p);
    let probes = [Probe::tensor("input", &x, &dx), Probe::new("params", p.flatten(), g.flatten())];
    Ok(check("conv2d", &probes, LAYER_TOLERANCE, |v| {
        let mut q = p.clone();
        q.unflatten(&v[1]);
        project(&conv2d(&rebuild(&x, &v[0]), &q).unwrap(), &proj)
    }))
}

fn deconv_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let x = Tensor::random_normal([2, 3, 3, 4], 1.0, rng);
    let mut p = DeconvParams::upsample2x(3, 2, rng);
    randomize(&mut p, rng, 0.5);
    let proj = Tensor::random_normal(p.output_shape(x.shape())?, 1.0, rng);
    let (dx, g) = deconv2d_backward(&x, &p, &proj)?.into_params(&p);
    let probes = [Probe::tensor("input", &x, &dx), Probe::new("params", p.flatten(), g.flatten())];
    Ok(check("deconv2d", &probes, LAYER_TOLERANCE, |v| {
        let mut q = p.clone();
        q.unflatten(&v[1]);
        project(&deconv2d(&rebuild(&x, &v[0]), &q).unwrap(), &proj)
    }))
}

fn fc_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut p = FcParams::zeros(4, 7);
    randomize(&mut p, rng, 0.5);
    let proj: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = fully_connected_backward(&x, &p.weights, &proj)?;
    let (dx, gp) = g.into_params();
    let probes = [Probe::new("input", x.clone(), dx), Probe::new("params", p.flatten(), gp.flatten())];
    Ok(check("fc", &probes, LAYER_TOLERANCE, |v| {
        let mut q = p.clone();
        q.unflatten(&v[1]);
        let y = fully_connected(&v[0], &q.weights, &q.bias).unwrap();
        y.iter().zip(&proj).map(|(a, b)| a * b).sum()
    }))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let x = Tensor::random_normal([1, 3, 4, 4], 1.0, rng);
    let proj = Tensor::random_normal(x.shape(), 1.0, rng);
    let dx = relu_backward(&x, &proj)?;
    Ok(check("relu", &[Probe::tensor("input", &x, &dx)], LAYER_TOLERANCE, |v| {
        project(&relu(&rebuild(&x, &v[0])), &proj)
    }))
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let x = Tensor::random_normal([1, 3, 4, 4], 2.0, rng);
    let proj = Tensor::random_normal(x.shape(), 1.0, rng);
    let dx = sigmoid_backward(&sigmoid(&x), &proj)?;
    Ok(check("sigmoid", &[Probe::tensor("input", &x, &dx)], LAYER_TOLERANCE, |v| {
        project(&sigmoid(&rebuild(&x, &v[0])), &proj)
    }))
}

fn softmax_ce_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let label = rng.random_range(0..5);
    let (_, dl) = softmax_cross_entropy(&logits, label)?;
    Ok(check("softmax_cross_entropy", &[Probe::new("logits", logits.clone(), dl)], LAYER_TOLERANCE, |v| {
        softmax_cross_entropy(&v[0], label).unwrap().0
    }))
}

fn smooth_l1_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    // Residuals on both sides of the switch at |x| = 1.
    let pred: Vec<f64> = (0..6).map(|_| rng.random_range(-2.5..2.5)).collect();
    let target: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (_, dp) = smooth_l1(&pred, &target)?;
    Ok(check("smooth_l1", &[Probe::new("pred", pred.clone(), dp)], LAYER_TOLERANCE, |v| {
        smooth_l1(&v[0], &target).unwrap().0
    }))
}

fn expand_compress_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let x = Tensor::random_normal([1, 4, 3, 3], 1.0, rng);
    let mut dec = DeconvParams::upsample2x(4, 4, rng);
    let mut comp = ConvParams::kaiming(2, 4, 1, 1, 0, rng);
    randomize(&mut dec, rng, 0.5);
    randomize(&mut comp, rng, 0.5);
    let (z, cache) = expand_compress_forward(&x, &dec, &comp)?;
    let proj = Tensor::random_normal(z.shape(), 1.0, rng);
    let (dx, gd, gc) = expand_compress_backward(&cache, &dec, &comp, &proj)?;
    let probes = [
        Probe::tensor("input", &x, &dx),
        Probe::new("deconv", dec.flatten(), gd.flatten()),
        Probe::new("compress", comp.flatten(), gc.flatten()),
    ];
    Ok(check("expand_compress", &probes, LAYER_TOLERANCE, |v| {
        let (mut d, mut c) = (dec.clone(), comp.clone());
        d.unflatten(&v[1]);
        c.unflatten(&v[2]);
        project(&expand_compress(&rebuild(&x, &v[0]), &d, &c).unwrap(), &proj)
    }))
}

fn pyramid_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let config = FusionConfig {
        output_channels: 6,
        topdown_channel_schedule: vec![4, 2, 1],
        p5_channels: 6,
        ..FusionConfig::default()
    };
    let chans = [2, 3, 3, 4];
    let x = PyramidInputs {
        c2: Tensor::random_normal([1, chans[0], 8, 8], 1.0, rng),
        c3: Tensor::random_normal([1, chans[1], 4, 4], 1.0, rng),
        c4: Tensor::random_normal([1, chans[2], 2, 2], 1.0, rng),
        c5: Tensor::random_normal([1, chans[3], 1, 1], 1.0, rng),
    };
    let mut params = FusionParams::init(&config, chans, rng)?;
    randomize(&mut params, rng, 0.5);
    let (out, cache) = build_pyramid_forward(&x, &params, &config)?;
    let proj: Vec<Tensor> = out.levels().iter().map(|t| Tensor::random_normal(t.shape(), 1.0, rng)).collect();
    let g = PyramidOutputs {
        p2: proj[0].clone(),
        p3: proj[1].clone(),
        p4: proj[2].clone(),
        p5: proj[3].clone(),
        p6: proj[4].clone(),
    };
    let (dx, dp) = build_pyramid_backward(&cache, &params, &config, &g)?;
    let mut probes = vec![Probe::new("params", params.flatten(), dp.flatten())];
    for (i, (t, d)) in x.levels().iter().zip(dx.levels()).enumerate() {
        probes.push(Probe::tensor(format!("c{}", i + 2), t, d));
    }
    Ok(check("fusion_pyramid", &probes, END_TO_END_TOLERANCE, |v| {
        let mut p = params.clone();
        p.unflatten(&v[0]);
        let xi = PyramidInputs {
            c2: rebuild(&x.c2, &v[1]),
            c3: rebuild(&x.c3, &v[2]),
            c4: rebuild(&x.c4, &v[3]),
            c5: rebuild(&x.c5, &v[4]),
        };
        let o = build_pyramid(&xi, &p, &config).unwrap();
        o.levels().iter().zip(&proj).map(|(t, w)| project(t, w)).sum()
    }))
}

fn aqm_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let y = Tensor::random_uniform([2, 5, 3, 3], 0.0, 2.0, rng);
    let params = AqmParams { w_fc: Matrix::random_normal(5, 5, 0.7, rng), mode: PoolMode::Eval };
    let (out, cache) = aqm_forward_traced(&y, &params, rng)?;
    let proj = Tensor::random_normal(out.shape(), 1.0, rng);
    let (dy, dw) = aqm_backward(&cache, &params, &proj)?;
    let probes = [Probe::tensor("input", &y, &dy), Probe::new("w_fc", params.w_fc.flatten(), dw.flatten())];
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    Ok(check("aqm_eval", &probes, LAYER_TOLERANCE, |v| {
        let mut p = params.clone();
        p.unflatten(&v[1]);
        project(&aqm_forward(&rebuild(&y, &v[0]), &p, &mut eval_rng).unwrap().0, &proj)
    }))
}

fn se_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let y = Tensor::random_normal([1, 16, 4, 4], 1.0, rng);
    let mut p = SeBlockParams::init(16, 4, rng)?;
    randomize(&mut p, rng, 0.5);
    let (out, cache) = se_block_forward(&y, &p)?;
    let proj = Tensor::random_normal(out.shape(), 1.0, rng);
    let (dy, dp) = se_block_backward(&cache, &p, &proj)?;
    let probes = [Probe::tensor("input", &y, &dy), Probe::new("params", p.flatten(), dp.flatten())];
    Ok(check("se_block", &probes, LAYER_TOLERANCE, |v| {
        let mut q = p.clone();
        q.unflatten(&v[1]);
        project(&se_block(&rebuild(&y, &v[0]), &q).unwrap(), &proj)
    }))
}

fn backbone_case(rng: &mut ChaCha8Rng) -> Result<Checked> {
    let cfg = ToyBackboneConfig { channels: vec![4, 4, 8, 8], se: true, se_reduction: 2, ..Default::default() };
    let mut net = build_toy_backbone(&cfg, rng)?;
    randomize(&mut net, rng, 0.5);
    let x = Tensor::random_normal([1, 3, 16, 16], 1.0, rng);
    let (c, cache) = toy_backbone_forward(&x, &net)?;
    let proj: Vec<Tensor> = c.levels().iter().map(|t| Tensor::random_normal(t.shape(), 1.0, rng)).collect();
    let g = PyramidInputs { c2: proj[0].clone(), c3: proj[1].clone(), c4: proj[2].clone(), c5: proj[3].clone() };
    let (dx, dp) = toy_backbone_backward(&cache, &net, &g)?;
    let probes = [Probe::tensor("input", &x, &dx), Probe::new("params", net.flatten(), dp.flatten())];
    Ok(check("toy_backbone", &probes, END_TO_END_TOLERANCE, |v| {
        let mut n = net.clone();
        n.unflatten(&v[1]);
        let (c, _) = toy_backbone_forward(&rebuild(&x, &v[0]), &n).unwrap();
        c.levels().iter().zip(&proj).map(|(t, w)| project(t, w)).sum()
    }))
}

/// A detector small enough to finite-difference.
pub fn tiny_config(mode: AblationMode) -> RunConfig {
    let mut cfg = RunConfig { mode, ..RunConfig::default() };
    cfg.dataset = DatasetConfig { image_size: 16, ..DatasetConfig::default() };
    cfg.dataset.classes.truncate(2);
    for c in &mut cfg.dataset.classes {
        c.min_size = 3;
        c.max_size = 8;
    }
    cfg.backbone = ToyBackboneConfig { channels: vec![3, 4, 4, 5], ..Default::default() };
    cfg.fusion.output_channels = 6;
    cfg.fusion.p5_channels = 6;
    cfg.fusion.topdown_channel_schedule = vec![4, 2, 1];
    cfg
}

/// End-to-end check of the whole detector on a 16×16 image. Every parameter
/// is perturbed when there are at most `max_coords`; otherwise an evenly
/// spaced subset of that size.
fn detector_case(mode: AblationMode, rng: &mut ChaCha8Rng, max_coords: usize) -> Result<Checked> {
    let cfg = tiny_config(mode);
    let mut det = Detector::init(&cfg, rng)?;
    randomize(&mut det, rng, 0.4);
    let x = Tensor::random_uniform([1, 3, 16, 16], 0.0, 1.0, rng);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (preds, cache) = det.forward_traced(&x, Phase::Eval, &mut unused)?;
    let proj: Vec<_> = preds
        .iter()
        .map(|p| (Tensor::random_normal(p.logits.shape(), 1.0, rng), Tensor::random_normal(p.deltas.shape(), 1.0, rng)))
        .collect();
    let grads: Vec<_> = proj
        .iter()
        .map(|(l, d)| lffn_core::detection::LevelPrediction { logits: l.clone(), deltas: d.clone() })
        .collect();
    let g = det.backward(&cache, &grads)?.flatten();
    let base = det.flatten();
    let step = base.len().div_ceil(max_coords).max(1);
    let coords: Vec<usize> = (0..base.len()).step_by(step).collect();
    let probe = Probe::new(
        "params",
        coords.iter().map(|&i| base[i]).collect(),
        coords.iter().map(|&i| g[i]).collect(),
    );
    Ok(check(&format!("detector[{mode}]"), &[probe], END_TO_END_TOLERANCE, |v| {
        let mut full = base.clone();
        for (&i, &val) in coords.iter().zip(&v[0]) {
            full[i] = val;
        }
        let mut d = det.clone();
        d.unflatten(&full);
        let preds = d.forward(&x, Phase::Eval, &mut unused).unwrap();
        preds.iter().zip(&proj).map(|(p, (l, dl))| project(&p.logits, l) + project(&p.deltas, dl)).sum()
    }))
}

/// Runs every check with instances drawn from `seed`. A failing instance is
/// replaced only when a kink lies inside the difference window.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer_cases: [fn(&mut ChaCha8Rng) -> Result<Checked>; 12] = [
        conv_case,
        deconv_case,
        fc_case,
        relu_case,
        sigmoid_case,
        softmax_ce_case,
        smooth_l1_case,
        expand_compress_case,
        pyramid_case,
        aqm_case,
        se_case,
        backbone_case,
    ];
    let mut out = Vec::new();
    for case in layer_cases {
        out.push(redraw(&mut rng, case)?);
    }
    for mode in AblationMode::ALL {
        out.push(redraw(&mut rng, |r| detector_case(mode, r, 400))?);
    }
    Ok(out)
}
