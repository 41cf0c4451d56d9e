//! Measurements behind the acceptance checks, shared with the narrower
//! integration tests.

use rand::Rng;
use tenet_core::data::synthetic_cifar_like;
use tenet_core::optim::{SgdConfig, SgdState};
use tenet_core::robustness::{attack, corrupt, pgd, AttackConfig, CorruptionKind, CorruptionSpec};
use tenet_core::tenet::{
    baseline_step, cfg_group, gmw_weights, inhibited_forward, rrf, tenet_step, TenetConfig,
};
use tenet_core::{LayerSpec, Model, ModelSpec, Tape, Tensor};

use super::{random_spec, random_tensor, reference_logits, rel_err, rng, to_f64};

/// Sum over maps of the distance to the nearest of `medoids`, in f64.
fn cost(maps: &[Vec<f64>], medoids: &[usize]) -> f64 {
    maps.iter()
        .map(|a| {
            medoids
                .iter()
                .map(|&m| a.iter().zip(&maps[m]).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Best total over every medoid subset of size `k`.
pub fn exhaustive_optimum(maps: &[Vec<f64>], k: usize) -> f64 {
    fn rec(maps: &[Vec<f64>], k: usize, start: usize, chosen: &mut Vec<usize>, best: &mut f64) {
        if chosen.len() == k {
            *best = best.min(cost(maps, chosen));
            return;
        }
        for i in start..maps.len() {
            chosen.push(i);
            rec(maps, k, i + 1, chosen, best);
            chosen.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(maps, k, 0, &mut Vec::new(), &mut best);
    best
}

pub struct CfgOracle {
    pub trials: usize,
    pub optimal: usize,
    /// Instances where the result is worse than some restart's total.
    pub worse_than_restart: usize,
}

/// Random instances with `N_c ≤ 8`, `N_G ≤ 3`: half clustered around a few
/// random centres, half unstructured.
pub fn cfg_oracle(trials: usize, restarts: usize, seed: u64) -> CfgOracle {
    let mut r = rng(seed);
    let mut out = CfgOracle {
        trials,
        optimal: 0,
        worse_than_restart: 0,
    };
    for t in 0..trials {
        let groups = r.gen_range(1..=3);
        let n_c = r.gen_range(groups.max(2)..=8);
        let (h, w) = (r.gen_range(1..=3), r.gen_range(2..=3));
        let centres: Vec<Vec<f32>> = (0..r.gen_range(1..=4))
            .map(|_| (0..h * w).map(|_| r.gen_range(0.0..2.0)).collect())
            .collect();
        let mut data = Vec::with_capacity(n_c * h * w);
        for _ in 0..n_c {
            if t % 2 == 0 {
                let c = &centres[r.gen_range(0..centres.len())];
                data.extend(c.iter().map(|v| v + r.gen_range(-0.3..0.3f32)));
            } else {
                data.extend((0..h * w).map(|_| r.gen_range(0.0..2.0f32)));
            }
        }
        let a = Tensor::new(vec![n_c, h, w], data).unwrap();
        let maps: Vec<Vec<f64>> = a.data().chunks(h * w).map(|m| m.iter().map(|&v| f64::from(v)).collect()).collect();
        let g = cfg_group(&a, groups, restarts, 50, r.gen()).unwrap();
        let opt = exhaustive_optimum(&maps, groups);
        if (g.total_distance - opt).abs() <= 1e-5 * opt.max(1.0) {
            out.optimal += 1;
        }
        if g.restart_totals.iter().any(|&rt| g.total_distance > rt) {
            out.worse_than_restart += 1;
        }
    }
    out
}

pub struct GmwCheck {
    pub max_rel_err: f64,
    pub compared: usize,
    pub skipped: usize,
    pub params_unchanged: bool,
}

/// Channel weights against central differences of the predicted-class
/// logit of the reference head when a whole channel is shifted by `±delta`.
pub fn gmw_check(models: usize, seed: u64, delta: f64, floor: f64) -> GmwCheck {
    let mut r = rng(seed);
    let mut out = GmwCheck {
        max_rel_err: 0.0,
        compared: 0,
        skipped: 0,
        params_unchanged: true,
    };
    for _ in 0..models {
        let spec = random_spec(&mut r);
        let model = Model::from_spec(spec.clone()).unwrap();
        let before = model.clone();
        let [c, h, w] = spec.input;
        let n = 2;
        let x = random_tensor(&mut r, &[n, c, h, w], 0.0, 1.0);
        let a = model.features(&x).unwrap();
        let probe = gmw_weights(&model, &a).unwrap();
        out.params_unchanged &= model == before
            && model.params().iter().zip(before.params()).all(|(p, q)| {
                p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits())
            });
        let params: Vec<Vec<f64>> = model.params().iter().map(to_f64).collect();
        let [nc, ha, wa] = spec.feature_shape().unwrap();
        let hw = ha * wa;
        for s in 0..n {
            let sample: Vec<f64> = to_f64(&a.slice_outer(s).unwrap());
            let class = probe.predicted[s];
            let k = spec.num_classes;
            let base = reference_logits(&spec, &params, &sample, 1, spec.split_point);
            for j in 0..nc {
                let shifted = |d: f64| {
                    let mut v = sample.clone();
                    v[j * hw..(j + 1) * hw].iter_mut().for_each(|x| *x += d);
                    reference_logits(&spec, &params, &v, 1, spec.split_point)
                };
                let (plus, minus) = (shifted(delta), shifted(-delta));
                if plus.pattern != base.pattern || minus.pattern != base.pattern {
                    out.skipped += 1;
                    continue;
                }
                debug_assert_eq!(plus.logits.len(), k);
                let fd = (plus.logits[class] - minus.logits[class]) / (2.0 * delta * hw as f64);
                out.max_rel_err = out.max_rel_err.max(rel_err(f64::from(probe.weights[s][j]), fd, floor));
                out.compared += 1;
            }
        }
    }
    out
}

pub struct RrfCheck {
    pub pairs: usize,
    pub range_violations: usize,
    pub monotone_violations: usize,
    pub gate_violations: usize,
    pub example_max_err: f64,
}

/// `pairs` random `(m, I)` draws. Map values sit on a 1/16 grid over
/// `[-8, 16]` so that distinct inputs are distinct at f32 resolution even
/// where the output approaches 1.
pub fn rrf_check(pairs: usize, seed: u64) -> RrfCheck {
    let mut r = rng(seed);
    let mut out = RrfCheck {
        pairs,
        range_violations: 0,
        monotone_violations: 0,
        gate_violations: 0,
        example_max_err: 0.0,
    };
    let len = 4;
    for _ in 0..pairs {
        let m: Vec<f32> = (0..len).map(|_| r.gen_range(-128i32..=256) as f32 / 16.0).collect();
        let i = match r.gen_range(0..4) {
            0 => 0.0,
            1 => -r.gen_range(0.0..1.0f32),
            _ => r.gen_range(1e-6..1.0f32),
        };
        let rm = rrf(&Tensor::new(vec![1, 1, len], m.clone()).unwrap(), &[i]).unwrap();
        let v = rm.data();
        out.range_violations += v.iter().filter(|x| !(0.0..=1.0).contains(*x)).count();
        if i > 0.0 {
            for p in 0..len {
                for q in 0..len {
                    if m[p] > m[q] && v[p] >= v[q] {
                        out.monotone_violations += 1;
                    }
                }
            }
        } else {
            out.gate_violations += v.iter().filter(|&&x| x != 0.0).count();
        }
    }
    let ex = rrf(&Tensor::new(vec![1, 1, 3], vec![-2.0, 0.0, 2.0]).unwrap(), &[1.0]).unwrap();
    for (got, want) in ex.data().iter().zip([0.8808, 0.5, 0.1192]) {
        out.example_max_err = out.example_max_err.max((f64::from(*got) - want).abs());
    }
    out
}

/// Small three-stage network on 32×32 inputs with 12 maps at the split.
pub fn small_spec() -> ModelSpec {
    let conv = |channels| LayerSpec::Conv {
        channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    ModelSpec {
        input: [3, 32, 32],
        layers: vec![
            conv(8),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            conv(12),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            conv(12),
            LayerSpec::Relu,
        ],
        split_point: 8,
        head_hidden: Vec::new(),
        num_classes: 10,
        init_seed: 3,
    }
}

fn bitwise_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

/// `steps` updates of the inhibition objective with `α = μ = 0` against
/// plain cross-entropy updates from the same start; true when every
/// parameter agrees bit for bit after every step.
pub fn degenerate_training_matches(steps: usize, batch: usize) -> bool {
    let data = synthetic_cifar_like(steps * batch, 5);
    let mut a = Model::from_spec(small_spec()).unwrap();
    let mut b = a.clone();
    let sgd = SgdConfig::default();
    let (mut sa, mut sb) = (SgdState::default(), SgdState::default());
    let config = TenetConfig {
        alpha: 0.0,
        mu: 0.0,
        ..TenetConfig::default()
    };
    for s in 0..steps {
        let idx: Vec<usize> = (s * batch..(s + 1) * batch).collect();
        let (x, y) = data.batch(&idx);
        tenet_step(&mut a, &x, &y, &config, &sgd, &mut sa, s as u64).unwrap();
        baseline_step(&mut b, &x, &y, &sgd, &mut sb).unwrap();
        if !bitwise_equal(a.params(), b.params()) || !bitwise_equal(&sa.velocity, &sb.velocity) {
            return false;
        }
    }
    true
}

/// `D(1 ⊗ A)` against `D(A)`, bit for bit, on the default architecture.
pub fn unit_mask_is_identity(seed: u64) -> bool {
    let model = Model::init(ModelSpec::default(), seed).unwrap();
    let x = synthetic_cifar_like(4, seed).batch(&[0, 1, 2, 3]).0;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false).unwrap();
    let xv = tape.constant(x).unwrap();
    let a = model.forward_features(&mut tape, &params, xv).unwrap();
    let [c, h, w] = model.spec().feature_shape().unwrap();
    let clean = model.forward_classifier(&mut tape, &params, a).unwrap();
    let groups = 6;
    let ids: Vec<Vec<usize>> = (0..4).map(|_| (0..c).map(|j| j % groups).collect()).collect();
    let ones = Tensor::ones(&[4, groups, h, w]);
    let inhibited = inhibited_forward(&model, &mut tape, &params, a, &ones, &ids).unwrap();
    bitwise_equal(&[tape.value(clean).clone()], &[tape.value(inhibited).clone()])
}

pub struct AttackCheck {
    pub outputs: usize,
    pub budget_violations: usize,
    pub range_violations: usize,
    pub pgd1_equals_fgsm: bool,
}

/// Budget and range of FGSM and PGD outputs on a trained-free model, for
/// both budgets and several PGD depths.
pub fn attack_check(images: usize, seed: u64) -> AttackCheck {
    let model = Model::init(small_spec(), seed).unwrap();
    let data = synthetic_cifar_like(images, seed);
    let idx: Vec<usize> = (0..images).collect();
    let (x, y) = data.batch(&idx);
    let mut out = AttackCheck {
        outputs: 0,
        budget_violations: 0,
        range_violations: 0,
        pgd1_equals_fgsm: true,
    };
    for eps in [4.0f32 / 255.0, 8.0 / 255.0] {
        let configs = [
            AttackConfig::fgsm(eps),
            AttackConfig::pgd(eps, 1),
            AttackConfig::pgd(eps, 3),
            AttackConfig::pgd(eps, 7),
            AttackConfig {
                random_start: false,
                ..AttackConfig::pgd(eps, 5)
            },
        ];
        for config in configs {
            let adv = attack(&model, &x, &y, &config, seed).unwrap();
            for (&a, &o) in adv.data().iter().zip(x.data()) {
                out.outputs += 1;
                if (f64::from(a) - f64::from(o)).abs() > f64::from(eps) {
                    out.budget_violations += 1;
                }
                if !(0.0..=1.0).contains(&a) {
                    out.range_violations += 1;
                }
            }
        }
        let fgsm = attack(&model, &x, &y, &AttackConfig::fgsm(eps), seed).unwrap();
        let one = AttackConfig {
            step_size: eps,
            random_start: false,
            ..AttackConfig::pgd(eps, 1)
        };
        let p = pgd(&model, &x, &y, &one, seed).unwrap();
        out.pgd1_equals_fgsm &= bitwise_equal(&[fgsm], &[p]);
    }
    out
}

/// Monte-Carlo mean squared error to the clean image, per kind and severity.
pub fn corruption_mse(images: usize, seeds: u64) -> Vec<(CorruptionKind, [f64; 5])> {
    let data = synthetic_cifar_like(images, 21);
    CorruptionKind::ALL
        .into_iter()
        .map(|kind| {
            let mut row = [0.0; 5];
            for (s, slot) in row.iter_mut().enumerate() {
                let spec = CorruptionSpec::new(kind, s as u8 + 1).unwrap();
                let mut total = 0.0;
                for i in 0..images {
                    let x = data.image_tensor(i);
                    for seed in 0..seeds {
                        let y = corrupt(&x, &spec, seed).unwrap();
                        total += x
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(a, b)| f64::from(a - b).powi(2))
                            .sum::<f64>()
                            / x.len() as f64;
                    }
                }
                *slot = total / (images as u64 * seeds) as f64;
            }
            (kind, row)
        })
        .collect()
}
