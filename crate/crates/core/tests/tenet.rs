mod common;

use common::criteria::*;
use common::*;
use proptest::prelude::*;
use rand::Rng;
use tenet_core::data::synthetic_cifar_like;
use tenet_core::optim::{sgd_update, SgdConfig, SgdState};
use tenet_core::tenet::*;
use tenet_core::{Error, Model, ModelSpec, Tape, Tensor};

fn maps(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Head-only model: global average pooling and one dense layer.
fn linear_head(channels: usize, hw: usize, weight: Vec<f32>, classes: usize) -> Model {
    let spec = ModelSpec {
        input: [channels, hw, hw],
        layers: Vec::new(),
        split_point: 0,
        head_hidden: Vec::new(),
        num_classes: classes,
        init_seed: 0,
    };
    Model::from_params(
        spec,
        vec![maps(&[classes, channels], &weight), Tensor::zeros(&[classes])],
    )
    .unwrap()
}

#[test]
fn cfg_distance_examples() {
    assert_eq!(cfg_distance(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
    assert_eq!(cfg_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    assert_eq!(cfg_distance(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).unwrap(), 7.5);
    assert!(matches!(cfg_distance(&[1.0; 4], &[1.0; 3]), Err(Error::Dimension { .. })));
}

#[test]
fn cfg_groups_identical_maps_together() {
    let a = maps(&[3, 2, 2], &[0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 10.0, 0.0, 0.0, 0.0, 0.0]);
    let g = cfg_group(&a, 2, 8, 20, 1).unwrap();
    assert_eq!(g.ids[0], g.ids[2]);
    assert_ne!(g.ids[0], g.ids[1]);
    assert_eq!(g.total_distance, 0.0);
    // Brute force over all 2-partitions agrees.
    let m: Vec<Vec<f64>> = a.data().chunks(4).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();
    assert_eq!(exhaustive_optimum(&m, 2), 0.0);
}

#[test]
fn cfg_one_group_per_channel() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[5, 3, 3], 0.0, 1.0);
    let g = cfg_group(&a, 5, 4, 20, 0).unwrap();
    let mut medoids = g.medoids.clone();
    medoids.sort_unstable();
    assert_eq!(medoids, vec![0, 1, 2, 3, 4]);
    assert_eq!(g.sizes, vec![1; 5]);
    assert_eq!(g.total_distance, 0.0);
}

#[test]
fn cfg_single_group_medoid_is_nearest_to_mean() {
    let mut r = rng(3);
    for trial in 0..20 {
        let a = random_tensor(&mut r, &[7, 2, 3], 0.0, 1.0);
        let g = cfg_group(&a, 1, 2, 20, trial).unwrap();
        let m: Vec<Vec<f64>> = a.data().chunks(6).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();
        let mean: Vec<f64> = (0..6).map(|p| m.iter().map(|x| x[p]).sum::<f64>() / 7.0).collect();
        let d = |x: &Vec<f64>| x.iter().zip(&mean).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        let best = (0..7).min_by(|&i, &j| d(&m[i]).total_cmp(&d(&m[j]))).unwrap();
        assert_eq!(g.medoids, vec![best]);
        assert_eq!(g.sizes, vec![7]);
    }
}

#[test]
fn cfg_rejects_too_many_groups() {
    let a = Tensor::zeros(&[2, 2, 2]);
    assert!(matches!(cfg_group(&a, 3, 1, 1, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn cfg_matches_exhaustive_search() {
    let r = cfg_oracle(200, 8, 17);
    assert!(r.optimal * 100 >= 95 * r.trials, "{} of {} optimal", r.optimal, r.trials);
    assert_eq!(r.worse_than_restart, 0);
}

#[test]
fn gmw_linear_head_is_analytic() {
    // One channel, one class, D = spatial mean: ∂L_d/∂a = 1/4 everywhere.
    let model = linear_head(1, 2, vec![1.0], 1);
    let p = gmw_weights(&model, &maps(&[1, 1, 2, 2], &[0.1, 0.5, 0.2, 0.9])).unwrap();
    assert_eq!(p.weights, vec![vec![0.25]]);

    // Channel 1 has zero head weight.
    let model = linear_head(2, 2, vec![0.7, 0.0, -0.3, 0.0], 2);
    let mut r = rng(4);
    let p = gmw_weights(&model, &random_tensor(&mut r, &[3, 2, 2, 2], 0.0, 1.0)).unwrap();
    for w in &p.weights {
        assert_eq!(w[1], 0.0);
    }
}

#[test]
fn gmw_matches_finite_differences() {
    let g = gmw_check(8, 11, 1e-4, 1e-6);
    assert!(g.compared > 20);
    assert!(g.max_rel_err < 1e-2, "max relative error {}", g.max_rel_err);
    assert!(g.params_unchanged);
}

#[test]
fn group_importance_and_maps_examples() {
    let g = FeatureGrouping::single_group(2);
    assert!((group_importance(&[0.2, 0.4], &g).unwrap()[0] - 0.3).abs() < 1e-7);
    let g = FeatureGrouping::singletons(3);
    assert_eq!(group_importance(&[0.5; 3], &g).unwrap(), vec![0.5; 3]);

    let m = group_maps(&Tensor::ones(&[1, 2, 2]), &[2.0], &FeatureGrouping::singletons(1)).unwrap();
    assert_eq!(m.data(), &[2.0; 4]);
    let mut r = rng(5);
    let a = random_tensor(&mut r, &[3, 2, 2], 0.0, 1.0);
    let m = group_maps(&a, &[0.0, 0.0, 1.0], &FeatureGrouping::singletons(3)).unwrap();
    assert!(m.data()[..8].iter().all(|&v| v == 0.0));
}

#[test]
fn rrf_examples_and_contract() {
    let zero = rrf(&Tensor::zeros(&[1, 2, 2]), &[0.3]).unwrap();
    assert_eq!(zero.data(), &[0.5; 4]);
    for closed in [-0.1, 0.0] {
        let rm = rrf(&Tensor::ones(&[1, 2, 2]), &[closed]).unwrap();
        assert_eq!(rm.data(), &[0.0; 4]);
    }
    let c = rrf_check(2_000, 6);
    assert_eq!(c.range_violations + c.monotone_violations + c.gate_violations, 0);
    assert!(c.example_max_err < 1e-4);
    // No overflow for extreme maps.
    let rm = rrf(&maps(&[1, 1, 2], &[-1e30, 1e30]), &[1.0]).unwrap();
    assert_eq!(rm.data(), &[1.0, 0.0]);
}

#[test]
fn binary_and_passthrough_masks() {
    let m = maps(&[2, 1, 4], &[0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]);
    let rm = reversed_maps(&m, &[1.0, -1.0], MaskMode::Binary, None).unwrap();
    assert_eq!(rm.data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let rm = reversed_maps(&m, &[1.0, 1.0], MaskMode::Binary, Some(10.0)).unwrap();
    assert_eq!(rm.data(), &[1.0; 8]);
    let rm = reversed_maps(&m, &[1.0, -1.0], MaskMode::PassthroughInactive, None).unwrap();
    assert_eq!(&rm.data()[4..], &[1.0; 4]);
    assert!(rm.data()[0] == 0.5 && rm.data()[3] < rm.data()[2]);
}

fn head_on(model: &Model, a: &Tensor, rm: Option<(&Tensor, &[Vec<usize>])>) -> Tensor {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false).unwrap();
    let av = tape.constant(a.clone()).unwrap();
    let out = match rm {
        Some((rm, ids)) => inhibited_forward(model, &mut tape, &params, av, rm, ids).unwrap(),
        None => model.forward_classifier(&mut tape, &params, av).unwrap(),
    };
    tape.value(out).clone()
}

#[test]
fn inhibited_forward_examples() {
    assert!(unit_mask_is_identity(1));
    let model = Model::from_spec(small_spec()).unwrap();
    let [c, h, w] = model.spec().feature_shape().unwrap();
    let mut r = rng(7);
    let a = random_tensor(&mut r, &[2, c, h, w], 0.0, 2.0);
    let ids: Vec<Vec<usize>> = (0..2).map(|_| (0..c).map(|_| r.gen_range(0..3)).collect()).collect();

    let zeros = head_on(&model, &a, Some((&Tensor::zeros(&[2, 3, h, w]), &ids)));
    assert_eq!(zeros, head_on(&model, &Tensor::zeros(&[2, c, h, w]), None));

    // Explicit per-channel multiply, then the plain head.
    let rm = random_tensor(&mut r, &[2, 3, h, w], 0.0, 1.0);
    let mut masked = a.clone();
    for n in 0..2 {
        for j in 0..c {
            for p in 0..h * w {
                let v = a.data()[(n * c + j) * h * w + p] * rm.data()[(n * 3 + ids[n][j]) * h * w + p];
                masked.data_mut()[(n * c + j) * h * w + p] = v;
            }
        }
    }
    assert_eq!(head_on(&model, &a, Some((&rm, &ids))), head_on(&model, &masked, None));
    // Group ids beyond the reversed maps are a dimension error.
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false).unwrap();
    let av = tape.constant(a.clone()).unwrap();
    let bad: Vec<Vec<usize>> = ids.iter().map(|row| row.iter().map(|&l| l + 1).collect()).collect();
    let err = inhibited_forward(&model, &mut tape, &params, av, &rm, &bad).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn orthogonal_loss_examples() {
    let a = maps(&[2, 1, 2], &[1.0, 0.0, 0.0, 5.0]);
    assert_eq!(orthogonal_loss(&a, &FeatureGrouping::singletons(2)).unwrap(), 0.0);
    let a = maps(&[2, 2, 2], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    assert_eq!(orthogonal_loss(&a, &FeatureGrouping::singletons(2)).unwrap(), 2.0);
}

#[test]
fn total_loss_examples() {
    assert!((combine_losses(2.0, 3.0, 1.0, 0.1, 0.1) - 2.4).abs() < 1e-6);
    let mut tape = Tape::new();
    let clean = tape.param(maps(&[2, 3], &[0.1, 0.5, -0.2, 1.0, 0.0, 0.3])).unwrap();
    let inh = tape.param(maps(&[2, 3], &[0.0, 0.2, 0.1, 0.4, 0.4, 0.1])).unwrap();
    let lo = tape.param(Tensor::scalar(0.75)).unwrap();
    let t = total_loss(&mut tape, &[1, 0], clean, inh, lo, 0.0, 0.0).unwrap();
    assert_eq!(tape.value(t.total).item().unwrap(), tape.value(t.clean).item().unwrap());

    // Hand-assembled cross-entropies.
    let ce = |rows: [[f64; 3]; 2]| {
        let l0 = rows[0].iter().map(|v| v.exp()).sum::<f64>().ln() - rows[0][1];
        let l1 = rows[1].iter().map(|v| v.exp()).sum::<f64>().ln() - rows[1][0];
        (l0 + l1) / 2.0
    };
    let c = ce([[0.1, 0.5, -0.2], [1.0, 0.0, 0.3]]);
    let i = ce([[0.0, 0.2, 0.1], [0.4, 0.4, 0.1]]);
    let mut tape = Tape::new();
    let clean = tape.param(maps(&[2, 3], &[0.1, 0.5, -0.2, 1.0, 0.0, 0.3])).unwrap();
    let inh = tape.param(maps(&[2, 3], &[0.0, 0.2, 0.1, 0.4, 0.4, 0.1])).unwrap();
    let lo = tape.param(Tensor::scalar(0.75)).unwrap();
    let t = total_loss(&mut tape, &[1, 0], clean, inh, lo, 0.2, 0.5).unwrap();
    let want = c + 0.2 * i + 0.5 * 0.75;
    assert!((f64::from(tape.value(t.total).item().unwrap()) - want).abs() < 1e-6);
    assert!(total_loss(&mut tape, &[1, 0], clean, inh, lo, -0.1, 0.0).is_err());
}

#[test]
fn zero_weights_reduce_to_baseline_bitwise() {
    assert!(degenerate_training_matches(12, 8));
}

/// With a fixed cut above every map value and every group important, the
/// binary mask is all ones and the step equals a hand-built two-pass step
/// with `RM = 1`.
#[test]
fn binary_mask_below_threshold_equals_unit_mask_step() {
    let spec = ModelSpec {
        head_hidden: Vec::new(),
        ..small_spec()
    };
    let mut model = Model::from_spec(spec).unwrap();
    // Positive head weights for every class keep every importance positive.
    let last = model.params().len() - 2;
    for v in model.params_mut()[last].data_mut() {
        *v = v.abs() + 0.01;
    }
    let data = synthetic_cifar_like(8, 9);
    let (x, y) = data.batch(&(0..8).collect::<Vec<_>>());
    let config = TenetConfig {
        mask_mode: MaskMode::Binary,
        binary_threshold: Some(1e30),
        ..TenetConfig::default()
    };
    let sgd = SgdConfig::default();
    let mut a = model.clone();
    let mut sa = SgdState::default();
    let report = tenet_step(&mut a, &x, &y, &config, &sgd, &mut sa, 77).unwrap();
    assert_eq!(report.active_groups, 6.0);

    let mut b = model.clone();
    let mut sb = SgdState::default();
    let mut tape = Tape::new();
    let params = b.bind(&mut tape, true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let av = b.forward_features(&mut tape, &params, xv).unwrap();
    let a_value = tape.value(av).clone();
    let (_, analyses) = analyze(&b, &a_value, &config, 77).unwrap();
    let ids: Vec<Vec<usize>> = analyses.iter().map(|s| s.grouping.ids.clone()).collect();
    let [_, h, w] = b.spec().feature_shape().unwrap();
    let clean = b.forward_classifier(&mut tape, &params, av).unwrap();
    let inh = inhibited_forward(&b, &mut tape, &params, av, &Tensor::ones(&[8, 6, h, w]), &ids).unwrap();
    let lo = tape.group_overlap(av, &ids, 6).unwrap();
    let t = total_loss(&mut tape, &y, clean, inh, lo, config.alpha, config.mu).unwrap();
    let mut g = tape.backward(t.total).unwrap();
    let grads: Vec<Tensor> = params.vars().iter().map(|&v| g.take(v).unwrap()).collect();
    sgd_update(b.params_mut(), &grads, &sgd, &mut sb).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_reduces_the_objective() {
    // Two classes: bright left half versus bright right half.
    let mut r = rng(10);
    let n = 64;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 2;
        for _ in 0..3 {
            for _y in 0..32 {
                for x in 0..32 {
                    let lit = (x < 16) == (class == 0);
                    images.push(if lit { 0.8 } else { 0.2 } + r.gen_range(-0.1..0.1f32));
                }
            }
        }
        labels.push(class);
    }
    let data = tenet_core::data::Dataset::new(images, labels, [3, 32, 32], 2).unwrap();
    let spec = ModelSpec {
        num_classes: 2,
        ..small_spec()
    };
    let mut model = Model::from_spec(spec).unwrap();
    let sgd = SgdConfig {
        lr: 0.01,
        ..SgdConfig::default()
    };
    let mut state = SgdState::default();
    let config = TenetConfig::default();
    let mut losses = Vec::new();
    for step in 0..50 {
        let idx: Vec<usize> = (0..8).map(|k| (step * 8 + k) % n).collect();
        let (x, y) = data.batch(&idx);
        let rep = tenet_step(&mut model, &x, &y, &config, &sgd, &mut state, step as u64).unwrap();
        losses.push(f64::from(rep.loss_total));
    }
    let xm = 24.5;
    let ym = losses.iter().sum::<f64>() / 50.0;
    let slope = losses.iter().enumerate().map(|(i, l)| (i as f64 - xm) * (l - ym)).sum::<f64>()
        / (0..50).map(|i| (i as f64 - xm).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "slope {slope}, losses {losses:?}");
}

#[test]
fn confidence_probe_examples() {
    // Channel 1 is ignored by the head: removing its group changes nothing.
    let model = linear_head(2, 2, vec![1.0, 0.0, -1.0, 0.0], 2);
    let a = maps(&[2, 2, 2], &[0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4]);
    let p = group_confidence_on_maps(&model, &a, &FeatureGrouping::singletons(2)).unwrap();
    assert_eq!(p.deltas[1], 0.0);
    assert!(p.deltas[0] > 0.0);
    // Zeroing every group leaves the bias-only prediction.
    let (_, conf) = confidence_with_groups_zeroed(&model, &a, &FeatureGrouping::singletons(2), &[0, 1], Some(p.predicted)).unwrap();
    assert_eq!(conf, 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Structural invariants and the fixed point of the assignment step.
    #[test]
    fn grouping_invariants(seed in any::<u64>(), n_c in 2usize..12, g in 1usize..5) {
        prop_assume!(g <= n_c);
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[n_c, 3, 3], 0.0, 1.0);
        let fg = cfg_group(&a, g, 3, 50, seed).unwrap();
        prop_assert_eq!(fg.sizes.iter().sum::<usize>(), n_c);
        for l in 0..g {
            prop_assert_eq!(fg.ids[fg.medoids[l]], l);
            prop_assert_eq!(fg.ids.iter().filter(|&&i| i == l).count(), fg.sizes[l]);
        }
        if fg.iterations_used < 50 {
            for j in 0..n_c {
                let own = cfg_distance(&a.data()[j * 9..j * 9 + 9], &a.data()[fg.medoids[fg.ids[j]] * 9..][..9]).unwrap();
                for &m in &fg.medoids {
                    let other = cfg_distance(&a.data()[j * 9..j * 9 + 9], &a.data()[m * 9..m * 9 + 9]).unwrap();
                    prop_assert!(own <= other);
                }
            }
        }
    }

    /// Doubling or halving the final layer scales every weight exactly and
    /// keeps the channel argmax and the sign pattern of the group scores.
    #[test]
    fn gmw_scales_with_the_head(seed in any::<u64>(), k in 0usize..4) {
        let c = [0.25f32, 0.5, 2.0, 4.0][k];
        let mut r = rng(seed);
        let spec = random_spec(&mut r);
        let model = Model::from_spec(spec.clone()).unwrap();
        let mut scaled = model.clone();
        let last = scaled.params().len() - 2;
        for v in scaled.params_mut()[last].data_mut() {
            *v *= c;
        }
        let [ch, h, w] = spec.input;
        let x = random_tensor(&mut r, &[1, ch, h, w], 0.0, 1.0);
        let a = model.features(&x).unwrap();
        let p = gmw_weights(&model, &a).unwrap();
        let q = gmw_weights(&scaled, &a).unwrap();
        for (u, v) in p.weights[0].iter().zip(&q.weights[0]) {
            prop_assert_eq!(u * c, *v);
        }
        let argmax = |w: &[f32]| (0..w.len()).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap();
        prop_assert_eq!(argmax(&p.weights[0]), argmax(&q.weights[0]));
        let n_c = p.weights[0].len();
        let g = cfg_group(&a.slice_outer(0).unwrap(), n_c.min(3), 2, 20, seed).unwrap();
        let si = group_importance(&p.weights[0], &g).unwrap();
        let sj = group_importance(&q.weights[0], &g).unwrap();
        for (u, v) in si.iter().zip(&sj) {
            prop_assert_eq!(u.partial_cmp(&0.0), v.partial_cmp(&0.0));
        }
    }

    #[test]
    fn importance_and_maps_match_loops(seed in any::<u64>(), n_c in 3usize..10) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[n_c, 2, 3], 0.0, 1.0);
        let w: Vec<f32> = (0..n_c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = cfg_group(&a, 3, 2, 20, seed).unwrap();
        let is = group_importance(&w, &g).unwrap();
        let m = group_maps(&a, &w, &g).unwrap();
        for l in 0..3 {
            let members: Vec<usize> = (0..n_c).filter(|&j| g.ids[j] == l).collect();
            let n_l = members.len() as f64;
            let i_l = members.iter().map(|&j| f64::from(w[j])).sum::<f64>() / n_l;
            prop_assert!((f64::from(is[l]) - i_l).abs() < 1e-6);
            for p in 0..6 {
                let m_l = members.iter().map(|&j| f64::from(w[j]) * f64::from(a.data()[j * 6 + p])).sum::<f64>() / n_l;
                prop_assert!((f64::from(m.data()[l * 6 + p]) - m_l).abs() < 1e-6);
            }
        }
    }

    /// Relu maps give a non-negative overlap equal to the direct loop.
    #[test]
    fn orthogonal_loss_matches_loop(seed in any::<u64>(), n_c in 2usize..9, g in 1usize..4) {
        prop_assume!(g <= n_c);
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[n_c, 3, 3], -1.0, 2.0).map(|v| v.max(0.0));
        let fg = cfg_group(&a, g, 2, 20, seed).unwrap();
        let lo = orthogonal_loss(&a, &fg).unwrap();
        prop_assert!(lo >= 0.0);
        let mut want = 0.0f64;
        for p in 0..9 {
            let mut prod = 1.0f64;
            for l in 0..g {
                prod *= (0..n_c).filter(|&j| fg.ids[j] == l).map(|j| f64::from(a.data()[j * 9 + p])).sum::<f64>();
            }
            want += prod;
        }
        want /= 9.0;
        prop_assert!((f64::from(lo) - want).abs() <= 1e-5 * want.max(1.0));
    }
}
