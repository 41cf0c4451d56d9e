//! Shared test oracles: a double-precision reference network written with
//! plain loops, independent of the tape.

#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tenet_core::{LayerSpec, ModelSpec, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// A value plus the relu/max-pool decisions taken to compute it. Two
/// evaluations with equal patterns lie on the same linear piece.
pub struct Traced {
    pub value: f64,
    pub logits: Vec<f64>,
    pub pattern: Vec<u32>,
}

struct Act {
    c: usize,
    h: usize,
    w: usize,
    /// `n × c × h × w`
    data: Vec<f64>,
}

fn conv(x: &Act, n: usize, k: &[f64], b: &[f64], c_out: usize, ks: usize, stride: usize, pad: usize) -> Act {
    let ho = (x.h + 2 * pad - ks) / stride + 1;
    let wo = (x.w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for s in 0..n {
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for i in 0..x.c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let xv = x.data[((s * x.c + i) * x.h + iy as usize) * x.w + ix as usize];
                                acc += xv * k[((o * x.c + i) * ks + ky) * ks + kx];
                            }
                        }
                    }
                    out[((s * c_out + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Act {
        c: c_out,
        h: ho,
        w: wo,
        data: out,
    }
}

fn max_pool(x: &Act, n: usize, window: usize, stride: usize, pattern: &mut Vec<u32>) -> Act {
    let ho = (x.h - window) / stride + 1;
    let wo = (x.w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * x.c * ho * wo);
    for s in 0..n {
        for c in 0..x.c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (0u32, f64::NEG_INFINITY);
                    for dy in 0..window {
                        for dx in 0..window {
                            let v = x.data[((s * x.c + c) * x.h + oy * stride + dy) * x.w + ox * stride + dx];
                            if v > best.1 {
                                best = ((dy * window + dx) as u32, v);
                            }
                        }
                    }
                    pattern.push(best.0);
                    out.push(best.1);
                }
            }
        }
    }
    Act {
        c: x.c,
        h: ho,
        w: wo,
        data: out,
    }
}

fn relu(v: &mut [f64], pattern: &mut Vec<u32>) {
    for x in v {
        pattern.push(u32::from(*x > 0.0));
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Reference logits of `spec` run from layer `start` (0 = the input, the
/// split point = the head) on `input: n×C×H×W`, with flat `params` in
/// `Model::params` order.
pub fn reference_logits(spec: &ModelSpec, params: &[Vec<f64>], input: &[f64], n: usize, start: usize) -> Traced {
    let mut pattern = Vec::new();
    let [c, h, w] = spec.trace_shapes().unwrap()[start];
    let mut act = Act {
        c,
        h,
        w,
        data: input.to_vec(),
    };
    let mut p = 2 * spec.layers[..start]
        .iter()
        .filter(|l| matches!(l, LayerSpec::Conv { .. }))
        .count();
    for layer in &spec.layers[start..] {
        match *layer {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => {
                act = conv(&act, n, &params[p], &params[p + 1], channels, kernel, stride, padding);
                p += 2;
            }
            LayerSpec::Relu => relu(&mut act.data, &mut pattern),
            LayerSpec::MaxPool { window, stride } => act = max_pool(&act, n, window, stride, &mut pattern),
        }
    }
    let hw = (act.h * act.w) as f64;
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            (0..act.c)
                .map(|ch| {
                    let base = (s * act.c + ch) * act.h * act.w;
                    act.data[base..base + act.h * act.w].iter().sum::<f64>() / hw
                })
                .collect()
        })
        .collect();
    let widths: Vec<usize> = spec.head_hidden.iter().copied().chain([spec.num_classes]).collect();
    for (li, &out) in widths.iter().enumerate() {
        let (wt, b) = (&params[p], &params[p + 1]);
        p += 2;
        for row in h.iter_mut() {
            let inp = row.clone();
            *row = (0..out)
                .map(|o| b[o] + inp.iter().enumerate().map(|(i, v)| v * wt[o * inp.len() + i]).sum::<f64>())
                .collect();
            if li + 1 < widths.len() {
                relu(row, &mut pattern);
            }
        }
    }
    Traced {
        value: 0.0,
        logits: h.concat(),
        pattern,
    }
}

/// Mean cross-entropy of the whole reference network on `x: n×C×H×W`.
pub fn reference_loss(spec: &ModelSpec, params: &[Vec<f64>], x: &[f64], n: usize, labels: &[usize]) -> Traced {
    let mut t = reference_logits(spec, params, x, n, 0);
    let k = spec.num_classes;
    let mut loss = 0.0;
    for (row, &y) in t.logits.chunks(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    t.value = loss / n as f64;
    t
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// A small random architecture: one or two conv stages, optional pooling and
/// hidden dense layer.
pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let c = rng.gen_range(1..=3);
    let size = rng.gen_range(5..=8);
    let mut layers = Vec::new();
    let mut hw = size;
    let stages = rng.gen_range(1..=2);
    for s in 0..stages {
        let kernel = rng.gen_range(1..=3usize).min(hw);
        let padding = rng.gen_range(0..=kernel / 2);
        let stride = if s == 0 { rng.gen_range(1..=2) } else { 1 };
        layers.push(LayerSpec::Conv {
            channels: rng.gen_range(2..=4),
            kernel,
            stride,
            padding,
        });
        hw = (hw + 2 * padding - kernel) / stride + 1;
        layers.push(LayerSpec::Relu);
        if hw >= 4 && rng.gen_bool(0.5) {
            layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
            hw = (hw - 2) / 2 + 1;
        }
    }
    let split_point = rng.gen_range(1..=layers.len());
    ModelSpec {
        input: [c, size, size],
        layers,
        split_point,
        head_hidden: if rng.gen_bool(0.3) { vec![rng.gen_range(2..=4)] } else { Vec::new() },
        num_classes: rng.gen_range(2..=4),
        init_seed: rng.gen(),
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub compared: usize,
    /// Coordinates skipped because a perturbation crossed a relu or
    /// max-pool decision boundary.
    pub skipped: usize,
    /// Largest relative gap between the tape loss and the reference loss.
    pub max_loss_gap: f64,
}

/// Compares tape gradients (parameters and input) of `nets` random networks
/// against central differences of the reference network.
pub fn gradient_check(nets: usize, seed: u64, h: f64, floor: f64) -> GradCheck {
    use tenet_core::{Model, Tape};
    let mut out = GradCheck {
        max_rel_err: 0.0,
        compared: 0,
        skipped: 0,
        max_loss_gap: 0.0,
    };
    let mut r = rng(seed);
    for _ in 0..nets {
        let spec = random_spec(&mut r);
        let model = Model::from_spec(spec.clone()).unwrap();
        let n = 2;
        let [c, hh, ww] = spec.input;
        let x = random_tensor(&mut r, &[n, c, hh, ww], -1.0, 1.0);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..spec.num_classes)).collect();

        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true).unwrap();
        let xv = tape.param(x.clone()).unwrap();
        let logits = model.forward(&mut tape, &params, xv).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        let tape_loss = f64::from(tape.value(loss).item().unwrap());
        let grads = tape.backward(loss).unwrap();
        let mut analytic: Vec<Vec<f64>> = params.vars().iter().map(|&v| to_f64(grads.get(v).unwrap())).collect();
        analytic.push(to_f64(grads.get(xv).unwrap()));

        let mut theta: Vec<Vec<f64>> = model.params().iter().map(to_f64).collect();
        theta.push(to_f64(&x));
        let eval = |theta: &[Vec<f64>]| {
            let (p, x) = theta.split_at(theta.len() - 1);
            reference_loss(&spec, p, &x[0], n, &labels)
        };
        let base = eval(&theta);
        out.max_loss_gap = out.max_loss_gap.max(rel_err(base.value, tape_loss, 1e-6));
        for t in 0..theta.len() {
            for i in 0..theta[t].len() {
                let orig = theta[t][i];
                theta[t][i] = orig + h;
                let plus = eval(&theta);
                theta[t][i] = orig - h;
                let minus = eval(&theta);
                theta[t][i] = orig;
                if plus.pattern != base.pattern || minus.pattern != base.pattern {
                    out.skipped += 1;
                    continue;
                }
                let fd = (plus.value - minus.value) / (2.0 * h);
                out.max_rel_err = out.max_rel_err.max(rel_err(analytic[t][i], fd, floor));
                out.compared += 1;
            }
        }
    }
    out
}
