//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Numeric arguments select criteria (`cargo test --test acceptance -- 7 10`).

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qenet::codec::{encode_decode, CodecConfig};
use qenet::dataset::TrainingSample;
use qenet::exec::{self, Mode};
use qenet::flownet::FlowNet;
use qenet::metrics::{psnr, psnr_tensor, ssim_tensor};
use qenet::nn::gradcheck::{check_params, check_tensor, GradCheckReport};
use qenet::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, LayerSpec, NormMode, Parameterized, ResBlock};
use qenet::pipeline::{enhance_clip, enhance_clip_single, ModelConfig, Models};
use qenet::training::loss::{loss_e_tensors, loss_w_tensors};
use qenet::training::step::{i_frame_state, mf_frame};
use qenet::training::{epoch_path, mf_loss_and_grads, Checkpoint, SampleTensors, Stage, TrainConfig, Trainer};
use qenet::warp::{warp_gradient_check, warp_tensor};
use qenet::{Clip, Frame, Real, Tensor, Variant};

const WARP_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-3;
const FLOW_GRAD_TOL: f64 = 1e-2;
const LOSS_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-6;
const PSNR_HALF_DB: f64 = 6.0206;
const PSNR_HALF_TOL: f64 = 1e-3;
const OVERFIT_STEPS: usize = 200;
const OVERFIT_LOSS_DROP: f64 = 0.5;
const OVERFIT_GAIN_DB: f64 = 0.2;
const SF_MF_SLACK_DB: f64 = 0.1;
const CODEC_BAND_DB: (f64, f64) = (28.0, 40.0);
const EVAL_T: usize = 2;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fail(detail: impl std::fmt::Display) -> Outcome {
    outcome(false, detail.to_string())
}

// ---------------------------------------------------------------------------
// Synthetic content

fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let g: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |a: f32| a * a * (3.0 - 2.0 * a);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 / cell as f32, x as f32 / cell as f32);
            let (y0, x0) = (fy as usize, fx as usize);
            let (ay, ax) = (smooth(fy - y0 as f32), smooth(fx - x0 as f32));
            let v = |yy: usize, xx: usize| g[yy * gw + xx];
            let top = (1.0 - ax) * v(y0, x0) + ax * v(y0, x0 + 1);
            let bottom = (1.0 - ax) * v(y0 + 1, x0) + ax * v(y0 + 1, x0 + 1);
            out[y * w + x] = (1.0 - ay) * top + ay * bottom;
        }
    }
    out
}

/// Multi-octave texture with colour variation and a few flat discs.
fn scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let mut lum = vec![0.0f32; h * w];
    for (cell, amp) in [(32, 0.5), (16, 0.3), (8, 0.2), (4, 0.12), (2, 0.08)] {
        let n = value_noise(rng, h, w, cell);
        lum.iter_mut().zip(n).for_each(|(l, v)| *l += amp * v);
    }
    let chroma: Vec<Vec<f32>> = (0..3).map(|_| value_noise(rng, h, w, 24)).collect();
    let mut t = Tensor::from_fn(3, h, w, |c, y, x| 0.5 + 0.35 * lum[y * w + x] + 0.12 * chroma[c][y * w + x]);
    for _ in 0..6 {
        let (cy, cx) = (rng.random_range(0..h) as f32, rng.random_range(0..w) as f32);
        let r = rng.random_range(4.0..h as f32 / 5.0);
        let col: Vec<f32> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        for (c, &col) in col.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if (y as f32 - cy).hypot(x as f32 - cx) < r {
                        t.set(c, y, x, 0.7 * col + 0.3 * t.at(c, y, x));
                    }
                }
            }
        }
    }
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Four frames panning across one scene with integer motion.
fn synthetic_clip(seed: u64, h: usize, w: usize) -> Vec<Frame> {
    const MARGIN: i32 = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dy, dx) = (rng.random_range(-2i32..=2), rng.random_range(1i32..=3));
    let s = scene(&mut rng, h + 2 * MARGIN as usize, w + 2 * MARGIN as usize);
    (0..4)
        .map(|t| {
            let (oy, ox) = ((MARGIN + dy * t as i32) as usize, (MARGIN - dx * t as i32) as usize);
            Frame::new(s.crop(oy, ox, h, w).expect("inside margin"), t, Variant::Original)
        })
        .collect()
}

fn random_clip(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Frame> {
    (0..4).map(|t| Frame::new(Tensor::uniform(3, h, w, 0.0, 1.0, rng), t, Variant::Decoded)).collect()
}

/// Models whose zero-initialized heads are replaced so every path is live.
fn live_models<T: Real>(config: ModelConfig, rng: &mut ChaCha8Rng) -> Models<T> {
    let mut m = Models::new(config, rng).expect("valid config");
    let w = config.enhancer_width;
    for e in [&mut m.sf, &mut m.mf] {
        e.head = Conv2d::new(LayerSpec::conv(w, 3, 3, 1), rng).unwrap();
    }
    let c = m.flow.predict_final.in_channels;
    m.flow.predict_final = Conv2d::new(LayerSpec::conv(c, 8, 3, 1), rng).unwrap();
    m
}

// ---------------------------------------------------------------------------
// 1. Warping

fn oracle_warp(frame: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (frame.h, frame.w);
    Tensor::from_fn(frame.c, h, w, |c, y, x| {
        let sx = (x as f64 - flow.at(0, y, x)).clamp(0.0, (w - 1) as f64);
        let sy = (y as f64 - flow.at(1, y, x)).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
        let mut acc = 0.0;
        for (yy, wy) in [(y0, 1.0 - ay), (y1, ay)] {
            for (xx, wx) in [(x0, 1.0 - ax), (x1, ax)] {
                acc += wy * wx * frame.at(c, yy, xx);
            }
        }
        acc
    })
}

fn warping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let frame = Tensor::<f64>::uniform(3, h, w, 0.0, 1.0, &mut rng);
        let reach = rng.random_range(0.5..6.0);
        let flow = Tensor::<f64>::uniform(2, h, w, -reach, reach, &mut rng);
        let got = match warp_tensor(&frame, &flow) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        worst = worst.max(got.max_abs_diff(&oracle_warp(&frame, &flow)));
    }
    let f = Tensor::<f32>::uniform(3, 13, 9, 0.0, 1.0, &mut rng);
    let identity = warp_tensor(&f, &Tensor::zeros(2, 13, 9)).map(|o| o == f).unwrap_or(false);
    outcome(
        worst <= WARP_TOL && identity,
        format!("max |warp - oracle| = {worst:.2e} (tol {WARP_TOL:.0e}), zero-flow bit-exact: {identity}"),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradients

/// `Σ y·r` for a fixed random `r`, whose gradient w.r.t. `y` is `r`.
fn probe(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

fn layer_reports() -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut out = Vec::new();
    for stride in [1, 2] {
        let conv = Conv2d::<f64>::new(LayerSpec::conv(3, 4, 3, stride), &mut rng).unwrap();
        let x = Tensor::uniform(3, 8, 8, -1.0, 1.0, &mut rng);
        let r = Tensor::uniform(4, 8 / stride, 8 / stride, -1.0, 1.0, &mut rng);
        let mut g = conv.zeroed();
        let dx = conv.backward(&x, &r, &mut g).unwrap();
        let name = format!("conv/s{stride}");
        out.push(check_params(&name, &conv, &g, 8, 1e-6, GRAD_TOL, |c| probe(&c.forward(&x).unwrap(), &r)));
        out.push(check_tensor(&format!("{name}.input"), &x, &dx, 64, 1e-6, GRAD_TOL, |t| probe(&conv.forward(t).unwrap(), &r)));
    }

    let deconv = ConvTranspose2d::<f64>::new(LayerSpec::deconv(4, 3, 2), &mut rng).unwrap();
    let x = Tensor::uniform(4, 5, 6, -1.0, 1.0, &mut rng);
    let r = Tensor::uniform(3, 10, 12, -1.0, 1.0, &mut rng);
    let mut g = deconv.zeroed();
    let dx = deconv.backward(&x, &r, &mut g).unwrap();
    out.push(check_params("deconv", &deconv, &g, 8, 1e-6, GRAD_TOL, |d| probe(&d.forward(&x).unwrap(), &r)));
    out.push(check_tensor("deconv.input", &x, &dx, 64, 1e-6, GRAD_TOL, |t| probe(&deconv.forward(t).unwrap(), &r)));

    let block = ResBlock::<f64>::new(4, &mut rng).unwrap();
    let x = Tensor::uniform(4, 8, 8, -1.0, 1.0, &mut rng);
    let r = Tensor::uniform(4, 8, 8, -1.0, 1.0, &mut rng);
    let (_, cache) = block.forward_cached(&x).unwrap();
    let mut g = block.zeroed();
    let dx = block.backward(&cache, &r, &mut g).unwrap();
    out.push(check_params("resblock", &block, &g, 8, 1e-6, GRAD_TOL, |b| probe(&b.forward(&x).unwrap(), &r)));
    out.push(check_tensor("resblock.input", &x, &dx, 64, 1e-6, GRAD_TOL, |t| probe(&block.forward(t).unwrap(), &r)));

    for mode in [NormMode::Train, NormMode::Eval] {
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.data = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        bn.beta.data = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        bn.running_mean.data = (0..3).map(|_| rng.random_range(-0.2..0.2)).collect();
        bn.running_var.data = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        let x = Tensor::uniform(3, 6, 6, -1.0, 1.0, &mut rng);
        let r = Tensor::uniform(3, 6, 6, -1.0, 1.0, &mut rng);
        let (_, cache) = bn.normalize(&x, mode).unwrap();
        let mut g = bn.zeroed();
        let dx = bn.backward(&cache, &r, &mut g).unwrap();
        let name = format!("batchnorm/{mode:?}").to_lowercase();
        out.push(check_params(&name, &bn, &g, 3, 1e-6, GRAD_TOL, |b| probe(&b.normalize(&x, mode).unwrap().0, &r)));
        out.push(check_tensor(&format!("{name}.input"), &x, &dx, 108, 1e-6, GRAD_TOL, |t| probe(&bn.normalize(t, mode).unwrap().0, &r)));
    }

    for seed in 0..3 {
        let w = warp_gradient_check(seed);
        out.push(w.frame);
        out.push(w.flow);
    }
    out
}

/// The training objective on a 16×16 sample with each step's incoming state held fixed.
fn end_to_end_report() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    let mut models = live_models::<f64>(ModelConfig { resblocks: 1, ..ModelConfig::reduced(4, 2) }, &mut rng);
    // Train-mode batch norm over a 1×1 coarsest map sits on the ReLU kink; shift it off.
    models.flow.visit_mut("", &mut |name, p| {
        if name.ends_with("bn.beta") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
    });
    let original: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(3, 16, 16, 0.1, 0.9, &mut rng)).collect();
    let decoded = original
        .iter()
        .map(|o| {
            let mut d = o.clone();
            d.add_assign(&Tensor::uniform(3, 16, 16, -0.1, 0.1, &mut rng));
            d
        })
        .collect();
    let s = SampleTensors { original, decoded };
    let mut g = models.zeroed();
    mf_loss_and_grads(&models, &s, &mut g, [true; 3]).unwrap();
    let mut states = vec![i_frame_state(&models, &s.decoded[0]).unwrap()];
    for t in 1..3 {
        let mut scratch = models.zeroed();
        let o = mf_frame(&models, &states[t - 1], &s.decoded[t - 1], &s.decoded[t], &s.original[t], 0.0, 0.0, &mut scratch).unwrap();
        states.push(o.enhanced.map(|v| v.clamp(0.0, 1.0)));
    }
    check_params("pipeline-16x16", &models, &g, 2, 1e-6, GRAD_TOL, |m| {
        let mut scratch = m.zeroed();
        (1..4)
            .map(|t| {
                let o = mf_frame(m, &states[t - 1], &s.decoded[t - 1], &s.decoded[t], &s.original[t], 0.0, 0.0, &mut scratch).unwrap();
                o.l_e / 3.0 + o.l_w
            })
            .sum()
    })
}

fn flownet_report() -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(204);
    let mut net = FlowNet::<f64>::new(qenet::flownet::FlowNetConfig::reduced(2), &mut rng).unwrap();
    let c = net.predict_final.in_channels;
    net.predict_final = Conv2d::new(LayerSpec::conv(c, 8, 3, 1), &mut rng).unwrap();
    net.visit_mut("", &mut |name, p| {
        if name.ends_with("running_mean") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        } else if name.ends_with("running_var") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    });
    let a = Tensor::uniform(3, 64, 64, 0.0, 1.0, &mut rng);
    let b = Tensor::uniform(3, 64, 64, 0.0, 1.0, &mut rng);
    let (flow, tape) = net.forward_taped(&a, &b, NormMode::Eval).unwrap();
    let r = Tensor::uniform(2, flow.h, flow.w, -1.0, 1.0, &mut rng);
    let mut g = net.zeroed();
    let (da, _) = net.backward(&tape, &r, &mut g).unwrap();
    // Piecewise linear in eval mode: a first-layer bias moves every pixel, so a
    // coarse step straddles ReLU kinks.
    const FLOW_FD_STEP: f64 = 1e-7;
    let eval = |n: &FlowNet<f64>, x: &Tensor<f64>| probe(&n.forward_taped(x, &b, NormMode::Eval).unwrap().0, &r);
    vec![
        check_params("flownet/eval", &net, &g, 2, FLOW_FD_STEP, FLOW_GRAD_TOL, |n| eval(n, &a)),
        check_tensor("flownet/eval.input", &a, &da, 24, 1e-5, FLOW_GRAD_TOL, |t| eval(&net, t)),
    ]
}

fn gradients() -> Outcome {
    let mut reports = layer_reports();
    reports.push(end_to_end_report());
    reports.extend(flownet_report());
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| format!("{} {:.2e}", r.name, r.rel_error)).collect();
    let worst = reports.iter().filter(|r| !r.name.starts_with("flownet")).map(|r| r.rel_error).fold(0.0, f64::max);
    let flow = reports.iter().filter(|r| r.name.starts_with("flownet")).map(|r| r.rel_error).fold(0.0, f64::max);
    let detail =
        format!("{} checks, worst rel err {worst:.2e} (tol {GRAD_TOL:.0e}), flow net {flow:.2e} (tol {FLOW_GRAD_TOL:.0e})", reports.len());
    if failed.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; failed: {}", failed.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// 3–5. Pipeline invariants

fn shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let models = live_models::<f32>(ModelConfig { resblocks: 1, ..ModelConfig::reduced(8, 4) }, &mut rng);
    for _ in 0..20 {
        let (h, w) = (4 * rng.random_range(2..=24), 4 * rng.random_range(2..=24));
        let clip = random_clip(&mut rng, h, w);
        let out = match enhance_clip(&clip, &models) {
            Ok(o) => o,
            Err(e) => return fail(format!("{h}x{w}: {e}")),
        };
        if out.len() != clip.len() {
            return fail(format!("{h}x{w}: {} frames out of {}", out.len(), clip.len()));
        }
        for f in &out {
            if f.dims() != (h, w) || f.pixels.c != 3 {
                return fail(format!("{h}x{w}: frame {} is {:?}", f.index, f.pixels.shape()));
            }
            if !f.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)) {
                return fail(format!("{h}x{w}: frame {} leaves [0, 1]", f.index));
            }
        }
    }
    outcome(true, "20 sizes: frame count, dimensions and [0, 1] range preserved")
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let models = live_models::<f32>(ModelConfig { resblocks: 1, ..ModelConfig::reduced(8, 4) }, &mut rng);
    let clip = random_clip(&mut rng, 36, 44);
    let base = enhance_clip(&clip, &models).unwrap();
    for t in 0..clip.len() - 1 {
        let mut perturbed = clip.clone();
        perturbed[t + 1].pixels = Tensor::uniform(3, 36, 44, 0.0, 1.0, &mut rng);
        let out = enhance_clip(&perturbed, &models).unwrap();
        if out[..=t] != base[..=t] {
            return fail(format!("perturbing frame {} changed an earlier output", t + 1));
        }
        if out[t + 1] == base[t + 1] {
            return fail(format!("perturbing frame {} had no effect on it", t + 1));
        }
    }
    outcome(true, "outputs 0..=t bit-identical under every perturbation of frame t+1")
}

fn gradient_flow() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let models = live_models::<f32>(ModelConfig { resblocks: 1, ..ModelConfig::reduced(4, 2) }, &mut rng);
    let org: Vec<Frame> = (0..4).map(|t| Frame::new(Tensor::uniform(3, 16, 16, 0.1, 0.9, &mut rng), t, Variant::Original)).collect();
    let dec: Vec<Frame> = org
        .iter()
        .map(|f| {
            let mut d = f.clone().with_variant(Variant::Decoded);
            d.pixels.add_assign(&Tensor::uniform(3, 16, 16, -0.1, 0.1, &mut rng));
            d
        })
        .collect();
    let sample = TrainingSample::full(&Clip::new("mask", 37, org, dec).unwrap()).unwrap();
    let s = SampleTensors::<f32>::from_sample(&sample);

    let mut g = models.zeroed();
    mf_loss_and_grads(&models, &s, &mut g, [true; 3]).unwrap();
    let sf_norm = g.sf.trainable_norm();
    let mut trainer = Trainer::with_models(
        TrainConfig { stage: Stage::Mf, qp: 37, lr0: 1e-3, crop: 0, ..TrainConfig::default() },
        models.clone(),
        rng.clone(),
    );
    trainer.train_step(std::slice::from_ref(&sample)).unwrap();
    let sf_untouched = trainer.models.sf == models.sf;

    // Loss on frame 3 alone must equal the isolated last step with its state held constant.
    let mut masked = models.zeroed();
    mf_loss_and_grads(&models, &s, &mut masked, [false, false, true]).unwrap();
    let mut state = i_frame_state(&models, &s.decoded[0]).unwrap();
    for t in 1..3 {
        let mut scratch = models.zeroed();
        let o = mf_frame(&models, &state, &s.decoded[t - 1], &s.decoded[t], &s.original[t], 0.0, 0.0, &mut scratch).unwrap();
        state = o.enhanced.map(|v| v.clamp(0.0, 1.0));
    }
    let mut isolated = models.zeroed();
    mf_frame(&models, &state, &s.decoded[2], &s.decoded[3], &s.original[3], 1.0 / 3.0, 1.0, &mut isolated).unwrap();
    let mut diff = masked.clone();
    let mut theirs = isolated.named_params().into_iter().map(|(_, p)| p.data.clone());
    diff.visit_mut("", &mut |_, p| {
        let other = theirs.next().expect("same layout");
        p.data.iter_mut().zip(other).for_each(|(a, b)| *a -= b);
    });
    let through_state = diff.trainable_norm();
    let pass = sf_norm == 0.0 && sf_untouched && through_state == 0.0 && masked.mf.trainable_norm() > 0.0;
    outcome(
        pass,
        format!("SF grad norm {sf_norm}, SF weights unchanged by MF step: {sf_untouched}, gradient via detached state {through_state}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Losses

fn losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let frames = |rng: &mut ChaCha8Rng| (0..3).map(|_| Tensor::<f64>::uniform(3, 4, 4, 0.0, 0.8, rng)).collect::<Vec<_>>();
    let org = frames(&mut rng);
    let shifted: Vec<_> = org.iter().map(|t| t.map(|v| v + 0.1)).collect();
    let zero = Tensor::<f64>::zeros(1, 2, 2);
    let mut spike = zero.clone();
    spike.data[3] = 0.2;
    let mut spike_w = zero.clone();
    spike_w.data[3] = 0.4;
    let examples = [
        ("e(x, x)", loss_e_tensors(&org, &org).unwrap(), 0.0),
        ("w(x, x)", loss_w_tensors(&org, &org).unwrap(), 0.0),
        ("e(x+0.1, x)", loss_e_tensors(&shifted, &org).unwrap(), 0.01),
        ("w(x+0.1, x) over 3 frames", loss_w_tensors(&shifted, &org).unwrap(), 0.3),
        ("e(one 0.2 pixel of 4)", loss_e_tensors(std::slice::from_ref(&spike), std::slice::from_ref(&zero)).unwrap(), 0.01),
        ("w(one 0.4 pixel of 4)", loss_w_tensors(std::slice::from_ref(&spike_w), std::slice::from_ref(&zero)).unwrap(), 0.1),
    ];
    let worst = examples.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);

    let models = live_models::<f64>(ModelConfig { resblocks: 1, ..ModelConfig::reduced(4, 2) }, &mut rng);
    let original: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(3, 16, 16, 0.0, 1.0, &mut rng)).collect();
    let decoded: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(3, 16, 16, 0.0, 1.0, &mut rng)).collect();
    let mut g = models.zeroed();
    let out = mf_loss_and_grads(&models, &SampleTensors { original, decoded }, &mut g, [true; 3]).unwrap();
    let exact = out.loss.l == out.loss.l_e + out.loss.l_w;
    let e: f64 = out.per_frame.iter().map(|p| p.0 / 3.0).sum();
    let w: f64 = out.per_frame.iter().map(|p| p.1).sum();
    let parts = (out.loss.l_e - e).abs().max((out.loss.l_w - w).abs());
    outcome(
        exact && worst <= LOSS_TOL && parts <= LOSS_TOL,
        format!("L == L_e + L_w: {exact}, hand examples max err {worst:.1e}, per-frame recomposition {parts:.1e} (tol {LOSS_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// 8. Metrics

fn oracle_psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mut se = 0.0;
    for c in 0..a.c {
        for y in 0..a.h {
            for x in 0..a.w {
                se += (a.at(c, y, x) as f64 - b.at(c, y, x) as f64).powi(2);
            }
        }
    }
    10.0 * (1.0 / (se / a.len() as f64)).log10()
}

/// Windowed SSIM evaluated window by window with an explicit 2-D kernel.
fn oracle_ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut k = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for c in 0..a.c {
        let mut acc = 0.0;
        let mut n = 0;
        for y0 in 0..=a.h - N {
            for x0 in 0..=a.w - N {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in k.iter().enumerate() {
                    for (j, wk) in row.iter().enumerate() {
                        let wk = wk / total;
                        let (p, q) = (a.at(c, y0 + i, x0 + j) as f64, b.at(c, y0 + i, x0 + j) as f64);
                        ma += wk * p;
                        mb += wk * q;
                        saa += wk * p * p;
                        sbb += wk * q * q;
                        sab += wk * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        per_channel += acc / n as f64;
    }
    per_channel / a.c as f64
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let a = Tensor::<f32>::uniform(3, 32, 32, 0.0, 1.0, &mut rng);
        let mut b = a.clone();
        let noise = rng.random_range(0.01..0.4);
        b.add_assign(&Tensor::uniform(3, 32, 32, -noise, noise, &mut rng));
        let b = b.map(|v| v.clamp(0.0, 1.0));
        dp = dp.max((psnr_tensor(&a, &b).unwrap() - oracle_psnr(&a, &b)).abs());
        ds = ds.max((ssim_tensor(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs());
    }
    let zero = Frame::new(Tensor::zeros(3, 32, 32), 0, Variant::Original);
    let half = Frame::new(Tensor::full(3, 32, 32, 0.5), 0, Variant::Decoded);
    let p = psnr(&zero, &half).unwrap();
    let pass = dp <= METRIC_TOL && ds <= METRIC_TOL && (p - PSNR_HALF_DB).abs() <= PSNR_HALF_TOL;
    outcome(pass, format!("max |psnr - oracle| {dp:.1e}, max |ssim - oracle| {ds:.1e} (tol {METRIC_TOL:.0e}); psnr(0, 0.5) = {p:.4} dB"))
}

// ---------------------------------------------------------------------------
// 9. Codec

fn mean_psnr(a: &[Frame], b: &[Frame]) -> f64 {
    a.iter().zip(b).map(|(x, y)| psnr(x, y).unwrap()).sum::<f64>() / a.len() as f64
}

fn codec() -> Outcome {
    let mut p32 = Vec::new();
    let mut p37 = Vec::new();
    for seed in 0..10 {
        let clip = synthetic_clip(seed, 128, 128);
        let run = |qp| encode_decode(&clip, &CodecConfig::new(qp, false));
        let (d32, d37) = match (run(32), run(37)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(format!("encoder unavailable or failed: {e}")),
        };
        p32.push(mean_psnr(&d32, &clip));
        p37.push(mean_psnr(&d37, &clip));
    }
    let monotone = p32.iter().zip(&p37).filter(|(a, b)| b < a).count();
    let m32 = p32.iter().sum::<f64>() / 10.0;
    let m37 = p37.iter().sum::<f64>() / 10.0;
    let in_band = (CODEC_BAND_DB.0..=CODEC_BAND_DB.1).contains(&m32);
    outcome(
        monotone == 10 && m37 < m32 && in_band,
        format!("mean PSNR QP32 {m32:.2} dB, QP37 {m37:.2} dB, QP37 lower on {monotone}/10 clips, band {CODEC_BAND_DB:?}"),
    )
}

// ---------------------------------------------------------------------------
// 7 & 10. Overfitting one clip

/// Reduced-width setting for the single-clip runs.
const OVERFIT_WIDTH: usize = 16;
const OVERFIT_RESBLOCKS: usize = 2;
const OVERFIT_FLOW_BASE: usize = 8;
const SF_LR: f64 = 1e-3;
const MF_LR: f64 = 3e-4;

struct Overfit {
    decoded_db: f64,
    loss_before: f64,
    loss_after: f64,
    mf_db: f64,
    sf_db: f64,
    sf_same_lr_db: f64,
    /// MF output PSNR when the originals are fed in as the decoded frames.
    clean_input_db: f64,
}

fn mf_total_loss(models: &Models<f32>, s: &SampleTensors<f32>) -> f64 {
    let mut g = models.zeroed();
    mf_loss_and_grads(models, s, &mut g, [true; 3]).expect("sample shape").loss.l
}

fn overfit() -> qenet::Result<Overfit> {
    let original = synthetic_clip(42, 64, 64);
    let decoded = encode_decode(&original, &CodecConfig::new(37, false))?;
    let sample = TrainingSample::full(&Clip::new("overfit", 37, original.clone(), decoded.clone())?)?;
    let tensors = SampleTensors::from_sample(&sample);
    let base = TrainConfig {
        qp: 37,
        crop: 0,
        enhancer_width: OVERFIT_WIDTH,
        resblocks: OVERFIT_RESBLOCKS,
        flow_base: OVERFIT_FLOW_BASE,
        seed: 7,
        ..TrainConfig::default()
    };
    let steps = |t: &mut Trainer, n: usize| -> qenet::Result<()> {
        for _ in 0..n {
            t.train_step(std::slice::from_ref(&sample))?;
        }
        Ok(())
    };
    let db = |frames: Vec<Frame>| psnr(&frames[EVAL_T], &original[EVAL_T]);

    // Single-frame stage, then the multi-frame stage from its weights.
    let mut sf = Trainer::new(TrainConfig { stage: Stage::Sf, lr0: SF_LR, ..base.clone() })?;
    steps(&mut sf, OVERFIT_STEPS)?;
    let pretrained = sf.checkpoint();
    let mut mf =
        Trainer::from_checkpoint(TrainConfig { stage: Stage::Mf, lr0: MF_LR, mf_from_sf: true, ..base.clone() }, pretrained.clone())?;
    let loss_before = mf_total_loss(&mf.models, &tensors);
    steps(&mut mf, OVERFIT_STEPS)?;
    let loss_after = mf_total_loss(&mf.models, &tensors);
    let mf_db = db(enhance_clip(&decoded, &mf.models)?)?;
    let clean: Vec<Frame> = original.iter().map(|f| f.clone().with_variant(Variant::Decoded)).collect();
    let clean_input_db = db(enhance_clip(&clean, &mf.models)?)?;

    // Single-frame only, with the same number of steps; both learning-rate schedules.
    steps(&mut sf, OVERFIT_STEPS)?;
    let sf_db = db(enhance_clip_single(&decoded, &sf.models.sf)?)?;
    let mut sf_same = Trainer::from_checkpoint(TrainConfig { stage: Stage::Sf, lr0: MF_LR, ..base }, pretrained)?;
    steps(&mut sf_same, OVERFIT_STEPS)?;
    let sf_same_lr_db = db(enhance_clip_single(&decoded, &sf_same.models.sf)?)?;

    Ok(Overfit {
        decoded_db: psnr(&decoded[EVAL_T], &original[EVAL_T])?,
        loss_before,
        loss_after,
        mf_db,
        sf_db,
        sf_same_lr_db,
        clean_input_db,
    })
}

// ---------------------------------------------------------------------------
// 11. Resume

fn resume() -> Outcome {
    exec::with_mode(Mode::Sequential, || {
        let mut rng = ChaCha8Rng::seed_from_u64(1111);
        let clips: Vec<Clip> = (0..3)
            .map(|i| {
                let org = synthetic_clip(100 + i, 32, 32);
                let dec = org
                    .iter()
                    .map(|f| {
                        let mut d = f.clone().with_variant(Variant::Decoded);
                        d.pixels.add_assign(&Tensor::uniform(3, 32, 32, -0.05, 0.05, &mut rng));
                        d
                    })
                    .collect();
                Clip::new(format!("r{i}"), 37, org, dec).unwrap()
            })
            .collect();
        let config = TrainConfig {
            stage: Stage::Mf,
            qp: 37,
            lr0: 1e-3,
            crop: 16,
            epochs: 4,
            enhancer_width: 4,
            resblocks: 1,
            flow_base: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a_dir, b_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut full = Vec::new();
        let mut a = Trainer::new(config.clone()).unwrap();
        a.fit(&clips[..], a_dir.path(), &mut |r| full.push(r.loss)).unwrap();
        let mid = match Checkpoint::load(&epoch_path(a_dir.path(), Stage::Mf, 37, 2)) {
            Ok(ck) => ck,
            Err(e) => return fail(e),
        };
        let mut b = Trainer::from_checkpoint(config, mid).unwrap();
        let done = b.step as usize;
        let mut resumed = Vec::new();
        b.fit(&clips[..], b_dir.path(), &mut |r| resumed.push(r.loss)).unwrap();
        let same = resumed == full[done..];
        outcome(
            same && b.models == a.models,
            format!(
                "{} resumed steps after step {done}: losses bit-identical {same}, final weights identical {}",
                resumed.len(),
                b.models == a.models
            ),
        )
    })
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, started: Instant, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {n:>2} {name}: {} [{:.1}s]", o.detail, started.elapsed().as_secs_f64());
        if !o.pass {
            failures += 1;
        }
    };
    let simple: [(usize, &str, Check); 8] = [
        (1, "warping oracle", warping),
        (2, "gradient suite", gradients),
        (3, "shape invariance", shapes),
        (4, "causality", causality),
        (5, "gradient-flow rules", gradient_flow),
        (6, "loss identities", losses),
        (8, "metric oracles", metrics),
        (9, "codec sanity", codec),
    ];
    for (n, name, check) in simple {
        if wants(n) {
            let t = Instant::now();
            report(n, name, t, check());
        }
    }
    if wants(7) || wants(10) {
        let t = Instant::now();
        match overfit() {
            Ok(o) => {
                let drop = 1.0 - o.loss_after / o.loss_before;
                let gain = o.mf_db - o.decoded_db;
                if wants(7) {
                    report(
                        7,
                        "overfit smoke test",
                        t,
                        outcome(
                            drop >= OVERFIT_LOSS_DROP && gain >= OVERFIT_GAIN_DB,
                            format!(
                                "L {:.5} -> {:.5} (-{:.1}%), frame {EVAL_T} PSNR {:.2} dB vs decoded {:.2} dB (+{gain:.2}); clean input {:.2} dB (informational)",
                                o.loss_before,
                                o.loss_after,
                                100.0 * drop,
                                o.mf_db,
                                o.decoded_db,
                                o.clean_input_db
                            ),
                        ),
                    );
                }
                if wants(10) {
                    let sf_best = o.sf_db.max(o.sf_same_lr_db);
                    report(
                        10,
                        "SF/MF ordering",
                        t,
                        outcome(
                            o.mf_db >= sf_best - SF_MF_SLACK_DB,
                            format!(
                                "MF {:.2} dB vs best equal-budget SF {sf_best:.2} dB (SF lr {SF_LR:.0e}: {:.2}, lr {MF_LR:.0e}: {:.2}), slack {SF_MF_SLACK_DB}",
                                o.mf_db, o.sf_db, o.sf_same_lr_db
                            ),
                        ),
                    );
                }
            }
            Err(e) => {
                for (n, name) in [(7, "overfit smoke test"), (10, "SF/MF ordering")] {
                    if wants(n) {
                        report(n, name, t, fail(&e));
                    }
                }
            }
        }
    }
    if wants(11) {
        let t = Instant::now();
        report(11, "resume reproducibility", t, resume());
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
