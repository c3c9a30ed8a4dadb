use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::AttentionSpec;
use crate::error::Error;
use crate::model_zoo::synth::two_class_brightness;
use crate::model_zoo::{Arch, ImageTensor, LogitVector, Normalization};

fn image(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn(&[c, h, w], f), Normalization::identity(c)).unwrap()
}

#[test]
fn mask_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vals: Vec<f64> = (0..3 * 8 * 8)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let x = image(3, 8, 8, |i| vals[i]);
    assert_eq!(mask_image(&x, &Tensor::full(&[4, 4], 1.0)).unwrap(), x);
    let z = mask_image(&x, &Tensor::zeros(&[2, 2])).unwrap();
    assert!(z.data().data().iter().all(|&v| v == 0.0));
}

#[test]
fn mask_hand_product() {
    // 8x8 single-channel image whose top-left 2x2 block is [[2,4],[6,8]].
    let x = image(1, 8, 8, |i| [2.0, 4.0, 6.0, 8.0][(i / 8 % 2) * 2 + i % 2]);
    let m = mask_image(&x, &Tensor::full(&[2, 2], 0.5)).unwrap();
    let d = m.data().data();
    assert_eq!([d[0], d[1], d[8], d[9]], [1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn mask_rejects_large_or_out_of_range_maps() {
    let x = image(1, 8, 8, |_| 1.0);
    assert!(matches!(
        mask_image(&x, &Tensor::zeros(&[16, 16])),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        mask_image(&x, &Tensor::full(&[2, 2], 1.5)),
        Err(Error::Input(_))
    ));
}

#[test]
fn ce_examples() {
    assert_abs_diff_eq!(
        ce_loss(4, &LogitVector(vec![0.3; 10])).unwrap(),
        10f64.ln(),
        epsilon = 1e-12
    );
    let mut z = vec![0.0; 10];
    z[2] = 30.0;
    assert!(ce_loss(2, &LogitVector(z)).unwrap() < 1e-9);
    assert_abs_diff_eq!(
        ce_loss(0, &LogitVector(vec![1.0, 2.0, 3.0])).unwrap(),
        2.407606,
        epsilon = 1e-6
    );
    assert!(ce_loss(3, &LogitVector(vec![1.0, 2.0, 3.0])).is_err());
}

#[test]
fn subset_edge_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(sample_class_subset(10, 7, 1, &mut rng).unwrap(), vec![7]);
    assert_eq!(
        sample_class_subset(10, 7, 10, &mut rng).unwrap(),
        (0..10).collect::<Vec<_>>()
    );
    assert!(matches!(
        sample_class_subset(10, 7, 11, &mut rng),
        Err(Error::Input(_))
    ));
    assert!(sample_class_subset(10, 10, 2, &mut rng).is_err());
}

#[test]
fn subset_frequencies_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        let s = sample_class_subset(10, 3, 4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.contains(&3));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for c in s {
            counts[c] += 1;
        }
    }
    assert_eq!(counts[3], draws);
    for (c, &n) in counts.iter().enumerate().filter(|(c, _)| *c != 3) {
        let f = n as f64 / draws as f64;
        assert!((f - 3.0 / 9.0).abs() < 0.02, "class {c}: {f}");
    }
}

#[test]
fn area_examples() {
    for a in AREA_EXPONENTS {
        assert_eq!(area_loss(&Tensor::full(&[3, 4, 4], 1.0), a).unwrap(), 1.0);
        assert_eq!(area_loss(&Tensor::zeros(&[3, 4, 4]), a).unwrap(), 0.0);
    }
    assert_abs_diff_eq!(
        area_loss(&Tensor::full(&[2, 3, 3], 0.25), 0.5).unwrap(),
        0.5,
        epsilon = 1e-15
    );
}

#[test]
fn variation_examples() {
    assert_eq!(variation_loss(&Tensor::full(&[2, 5, 5], 0.3)).unwrap(), 0.0);
    let m = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(variation_loss(&m).unwrap(), 0.5);
    assert!(matches!(
        variation_loss(&Tensor::zeros(&[1, 1, 4])),
        Err(Error::Input(_))
    ));
}

#[test]
fn total_examples() {
    let w = LossWeights::new(0.5, 0.3, 1.0, 1).unwrap();
    // ce = ln 2, area = 0.5, variation = 0.5 on one 2x2 map.
    let e = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let b = total_loss(0, &LogitVector(vec![0.0, 0.0]), &e, &w).unwrap();
    assert_abs_diff_eq!(
        b.total,
        0.5 * 2f64.ln() + 0.3 * 0.5 + 0.2 * 0.5,
        epsilon = 1e-12
    );

    // Inputs built so that the components are exactly (1.0, 0.2, 0.1).
    let logits = LogitVector(vec![0.0, (std::f64::consts::E - 1.0).ln()]);
    let u = 0.4f64.sqrt();
    let k = (1.6 - 2.0 * u) / 4.0;
    let e = Tensor::new(&[2, 2, 2], vec![u, 0.0, u, 0.0, k, k, k, k]).unwrap();
    let b = total_loss(0, &logits, &e, &LossWeights::new(0.5, 0.3, 1.0, 2).unwrap()).unwrap();
    assert_abs_diff_eq!(b.ce, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b.area, 0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(b.variation, 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(b.total, 0.58, epsilon = 1e-9);
    let e = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();

    let ce_only = LossWeights::with_all(1.0, 0.0, 0.0, 1.0, 1).unwrap();
    let b = total_loss(1, &LogitVector(vec![0.2, -0.4]), &e, &ce_only).unwrap();
    assert_eq!(b.total, b.ce);

    // An all-ones map leaves the image and hence its logits unchanged.
    let x = image(1, 8, 8, |i| (i as f64 * 0.37).sin());
    let ones = Tensor::full(&[2, 4, 4], 1.0);
    let masked = mask_image(&x, &ones.index_first(0)).unwrap();
    assert_eq!(masked, x);
}

#[test]
fn weights_invariants() {
    assert!(LossWeights::new(0.6, 0.4, 1.0, 1).is_err());
    assert!(LossWeights::new(-0.1, 0.4, 1.0, 1).is_err());
    assert!(LossWeights::new(0.2, 0.4, 3.0, 1).is_err());
    assert!(LossWeights::new(0.2, 0.4, 1.0, 0).is_err());
    let w = LossWeights::new(0.2, 0.4, 2.0, 11).unwrap();
    assert!(matches!(w.validate(10), Err(Error::Config(_))));
    assert_eq!(w.with_rand_for(64, 10).lambda_rand, 10);
    assert_eq!(w.with_rand_for(4, 10).lambda_rand, 4);
    assert!(LossWeights::with_all(0.5, 0.5, 0.1, 1.0, 1).is_err());
}

#[test]
fn schedule_examples() {
    let max = 1e-3;
    assert_abs_diff_eq!(
        lr_schedule(0, 100, max).unwrap(),
        max / 25.0,
        epsilon = 1e-18
    );
    assert_eq!(lr_schedule(30, 100, max).unwrap(), max);
    let (peak, last) = (30.0, 99.0);
    let step = 60.0;
    let p = (step - peak) / (last - peak);
    let expect = max / 1e4 + (max - max / 1e4) * (1.0 + (PI * p).cos()) / 2.0;
    assert_abs_diff_eq!(lr_schedule(60, 100, max).unwrap(), expect, epsilon = 1e-12);
    assert_abs_diff_eq!(
        lr_schedule(99, 100, max).unwrap(),
        max / 1e4,
        epsilon = 1e-15
    );
    assert!(matches!(lr_schedule(100, 100, max), Err(Error::Input(_))));
    assert!(lr_schedule(0, 1, max).unwrap() > 0.0);
}

proptest! {
    #[test]
    fn area_is_monotone(vals in prop::collection::vec(0.0f64..1.0, 18), bump in prop::collection::vec(0.0f64..1.0, 18), ai in 0usize..3) {
        let a = AREA_EXPONENTS[ai];
        let lo = Tensor::new(&[2, 3, 3], vals.clone()).unwrap();
        let hi = Tensor::new(&[2, 3, 3], vals.iter().zip(&bump).map(|(v, b)| (v + b).min(1.0)).collect()).unwrap();
        let (l, h) = (area_loss(&lo, a).unwrap(), area_loss(&hi, a).unwrap());
        prop_assert!(h >= l);
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn variation_ignores_offsets_and_transposition(vals in prop::collection::vec(0.0f64..1.0, 12), k in -0.5f64..0.5) {
        let m = Tensor::new(&[1, 3, 4], vals.clone()).unwrap();
        let t = Tensor::from_fn(&[1, 4, 3], |i| vals[(i % 3) * 4 + i / 3]);
        let base = variation_loss(&m).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((variation_loss(&t).unwrap() - base).abs() < 1e-12);
        prop_assert!((variation_loss(&m.map(|v| v + k)).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ce_decreases_with_target_logit(z in prop::collection::vec(-5.0f64..5.0, 4), c in 0usize..4, d in 0.01f64..3.0) {
        let before = ce_loss(c, &LogitVector(z.clone())).unwrap();
        let mut up = z;
        up[c] += d;
        let after = ce_loss(c, &LogitVector(up)).unwrap();
        prop_assert!(after < before);
        prop_assert!(after >= 0.0);
    }

    #[test]
    fn total_is_weighted_sum(u in 0.0f64..1.0, v in 0.0f64..1.0, ai in 0usize..3, vals in prop::collection::vec(0.0f64..1.0, 16)) {
        let (l1, l2) = if u + v >= 1.0 { (1.0 - u, 1.0 - v) } else { (u, v) };
        prop_assume!(l1 + l2 < 1.0);
        let w = LossWeights::new(l1, l2, AREA_EXPONENTS[ai], 2).unwrap();
        let e = Tensor::new(&[2, 2, 4], vals).unwrap();
        let b = total_loss(1, &LogitVector(vec![0.3, -1.0, 2.0]), &e, &w).unwrap();
        prop_assert!(b.ce >= 0.0 && b.area >= 0.0 && b.variation >= 0.0);
        prop_assert!((b.total - (l1 * b.ce + l2 * b.area + w.lambda3 * b.variation)).abs() < 1e-9);
    }

    #[test]
    fn schedule_stays_between_floor_and_peak(t in 2usize..500, frac in 0.0f64..1.0, max in 1e-5f64..1.0) {
        let step = ((t as f64 * frac) as usize).min(t - 1);
        let lr = lr_schedule(step, t, max).unwrap();
        prop_assert!(lr >= max / 1e4 * (1.0 - 1e-12) && lr <= max * (1.0 + 1e-12));
    }
}

fn tiny_models(seed: u64) -> (ClassifierHandle, ClassifierHandle) {
    let norm = Normalization::identity(1);
    let backbone = ClassifierHandle::init(
        Arch::Linear {
            in_channels: 1,
            height: 8,
            width: 8,
            classes: 2,
        },
        [1, 8, 8],
        norm.clone(),
        seed,
    )
    .unwrap()
    .freeze();
    let aux = ClassifierHandle::init(
        Arch::ResNet {
            in_channels: 1,
            widths: vec![2, 3],
            classes: 2,
        },
        [1, 8, 8],
        norm,
        seed + 1,
    )
    .unwrap()
    .freeze();
    (backbone, aux)
}

fn tiny_attention(aux: &ClassifierHandle, seed: u64) -> AttentionMechanism {
    let spec = AttentionSpec {
        layers: aux.feature_layers(),
        in_channels: vec![2, 3],
        branch_channels: vec![2, 3],
        classes: 2,
        map_size: (4, 4),
    };
    AttentionMechanism::new(spec, seed).unwrap()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (backbone, aux) = tiny_models(5);
    for (seed, area) in [(0u64, 0.5), (1, 1.0), (2, 2.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mech = tiny_attention(&aux, seed).jittered(0.3, seed);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let weights = LossWeights::new(0.4, 0.35, area, 2).unwrap();
        let err = loss_gradient_error(&backbone, &aux, &mech, &x, &vec![vec![0, 1]; 2], &weights)
            .unwrap();
        assert!(err <= 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn batch_loss_matches_per_image_total_loss() {
    let (backbone, aux) = tiny_models(9);
    let mech = tiny_attention(&aux, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
    let idx = aux.feature_indices(&["stage1", "stage2"]).unwrap();
    let feats = aux.features_batch(&x, &idx).unwrap();
    let cstar = backbone.predict(&x).unwrap();
    let subsets: Vec<Vec<usize>> = cstar.iter().map(|&c| vec![c]).collect();
    let weights = LossWeights::new(0.5, 0.3, 2.0, 1).unwrap();

    let g = Graph::new();
    let b = Bound::new(&g, mech.params(), false, false);
    let fv: Vec<_> = feats.iter().map(|f| g.constant(f.clone())).collect();
    let maps = mech.forward(&b, &fv).unwrap();
    let loss = batch_loss(&backbone, maps, &x, &cstar, &subsets, &weights).unwrap();
    let maps = maps.value();

    let mut expect = 0.0;
    for i in 0..3 {
        let e = maps.index_first(i);
        let ec = e.index_first(cstar[i]).reshape(&[4, 4]).unwrap();
        let xi = image(1, 8, 8, |j| x.data()[i * 64 + j]);
        let logits = backbone.classify(&mask_image(&xi, &ec).unwrap()).unwrap();
        let es = ec.reshape(&[1, 4, 4]).unwrap();
        expect += total_loss(cstar[i], &logits, &es, &weights).unwrap().total / 3.0;
    }
    assert_abs_diff_eq!(loss.total.value().item(), expect, epsilon = 1e-10);
}

fn brightness_data(n: usize, seed: u64) -> Dataset {
    Dataset::from_raw(
        &two_class_brightness(n, seed),
        [1, 8, 8],
        2,
        Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        },
    )
    .unwrap()
}

fn mean_activation(aux: &ClassifierHandle, mech: &AttentionMechanism, data: &Dataset) -> f64 {
    let idx = aux.feature_indices(&["stage1", "stage2"]).unwrap();
    mech.explain_features(&aux.features_batch(data.images(), &idx).unwrap())
        .unwrap()
        .mean()
}

#[test]
fn epoch_keeps_models_frozen_and_area_term_shrinks_maps() {
    let (backbone, aux) = tiny_models(11);
    let data = brightness_data(96, 12);
    let mech = tiny_attention(&aux, 13);
    let before = mean_activation(&aux, &mech, &data);
    let (bd, ad) = (backbone.recompute_digest(), aux.recompute_digest());
    let weights = LossWeights::with_all(0.0, 1.0, 0.0, 1.0, 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        max_lr: 1e-2,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train_epoch(&backbone, &aux, mech, &data, &weights, &cfg).unwrap();
    assert_eq!(out.trace.len(), 12);
    assert_eq!(
        (backbone.recompute_digest(), aux.recompute_digest()),
        (bd, ad)
    );
    let after = mean_activation(&aux, &out.attention, &data);
    assert!(after < before, "{after} !< {before}");
    assert!(out.trace.iter().all(|r| (r.total - r.area).abs() < 1e-12));
    let csv = trace_csv(&out.trace);
    assert!(csv.starts_with("step,ce,area,variation,total,lr\n"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn composite_loss_falls_over_an_epoch() {
    let (backbone, aux) = tiny_models(21);
    let data = brightness_data(400, 22);
    let weights = LossWeights::new(0.5, 0.3, 1.0, 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        max_lr: 1e-2,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train_epoch(
        &backbone,
        &aux,
        tiny_attention(&aux, 23),
        &data,
        &weights,
        &cfg,
    )
    .unwrap();
    let n = out.trace.len();
    let k = n / 10;
    let head: f64 = out.trace[..k].iter().map(|r| r.total).sum::<f64>() / k as f64;
    let tail: f64 = out.trace[n - k..].iter().map(|r| r.total).sum::<f64>() / k as f64;
    assert!(tail < head, "{tail} !< {head}");
}

#[test]
fn epoch_is_deterministic_and_respects_max_steps() {
    let (backbone, aux) = tiny_models(31);
    let data = brightness_data(40, 32);
    let weights = LossWeights::new(0.3, 0.3, 0.5, 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: Some(5),
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train_epoch(
        &backbone,
        &aux,
        tiny_attention(&aux, 1),
        &data,
        &weights,
        &cfg,
    )
    .unwrap();
    let b = train_epoch(
        &backbone,
        &aux,
        tiny_attention(&aux, 1),
        &data,
        &weights,
        &cfg,
    )
    .unwrap();
    assert_eq!(a.trace.len(), 5);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.attention.digest(), b.attention.digest());
}

#[test]
fn epoch_rejects_bad_inputs() {
    let (backbone, aux) = tiny_models(41);
    let data = brightness_data(8, 42);
    let w = LossWeights::new(0.3, 0.3, 1.0, 2).unwrap();
    let cfg = TrainConfig::default();
    let empty = data.take(0);
    assert!(matches!(
        train_epoch(&backbone, &aux, tiny_attention(&aux, 0), &empty, &w, &cfg),
        Err(Error::Input(_))
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..cfg.clone()
    };
    assert!(train_epoch(&backbone, &aux, tiny_attention(&aux, 0), &data, &w, &bad).is_err());
    let too_many = LossWeights::new(0.3, 0.3, 1.0, 3).unwrap();
    assert!(matches!(
        train_epoch(
            &backbone,
            &aux,
            tiny_attention(&aux, 0),
            &data,
            &too_many,
            &cfg
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn diverging_loss_reports_step() {
    let (backbone, aux) = tiny_models(51);
    let mut data = brightness_data(16, 52);
    // Poison one image so its masked logits overflow.
    let cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    };
    let w = LossWeights::new(0.5, 0.3, 1.0, 2).unwrap();
    let mut imgs = data.images().clone();
    imgs.data_mut()[0] = 1e308;
    imgs.data_mut()[1] = -1e308;
    data = Dataset::new(
        imgs,
        data.labels().to_vec(),
        2,
        data.normalization().clone(),
    )
    .unwrap();
    match train_epoch(&backbone, &aux, tiny_attention(&aux, 0), &data, &w, &cfg) {
        Err(Error::Training { step, .. }) => assert_eq!(step, 0),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn search_respects_constraints() {
    let space = SearchSpace::new(4);
    let r = hyperparameter_search(&space, 12, 7, |_, w| {
        Ok(-(w.lambda1 - 0.6).powi(2) - (w.lambda2 - 0.1).powi(2))
    })
    .unwrap();
    assert_eq!(r.trials.len(), 12);
    for t in &r.trials {
        let w = &t.weights;
        assert!((w.lambda1 + w.lambda2 + w.lambda3 - 1.0).abs() < 1e-9);
        assert!(w.lambda1 + w.lambda2 < 1.0);
        assert!(AREA_EXPONENTS.contains(&w.lambda_area));
        assert_eq!(w.lambda_rand, 4);
        assert_eq!(t.guided, t.index >= 5);
    }
    let best = r
        .trials
        .iter()
        .map(|t| t.score)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.trials[r.best_index].score, best);
    assert_eq!(r.best, r.trials[r.best_index].weights);
    assert_eq!(r.log_csv().lines().count(), 13);
}

#[test]
fn guided_search_beats_random_on_smooth_objective() {
    let objective = |_: usize, w: &LossWeights| -> Result<f64> {
        Ok(-(w.lambda1 - 0.7).powi(2)
            - (w.lambda2 - 0.2).powi(2)
            - if w.lambda_area == 1.0 { 0.0 } else { 0.1 })
    };
    let mut wins = 0;
    for seed in 0..6 {
        let guided = hyperparameter_search(&SearchSpace::new(2), 20, seed, objective).unwrap();
        let random = hyperparameter_search(
            &SearchSpace {
                guided: false,
                ..SearchSpace::new(2)
            },
            20,
            seed,
            objective,
        )
        .unwrap();
        if guided.trials[guided.best_index].score >= random.trials[random.best_index].score {
            wins += 1;
        }
    }
    assert!(wins >= 4, "guided search won {wins} of 6");
}

#[test]
fn search_edge_cases() {
    let space = SearchSpace::new(2);
    let one = hyperparameter_search(&space, 1, 0, |_, _| Ok(0.3)).unwrap();
    assert_eq!(one.best, one.trials[0].weights);
    assert!(matches!(
        hyperparameter_search(&space, 0, 0, |_, _| Ok(0.0)),
        Err(Error::Input(_))
    ));
    let bad = SearchSpace {
        area_exponents: vec![3.0],
        ..SearchSpace::new(2)
    };
    assert!(matches!(
        hyperparameter_search(&bad, 3, 0, |_, _| Ok(0.0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        hyperparameter_search(&space, 3, 0, |_, _| Ok(f64::NAN)),
        Err(Error::Degenerate(_))
    ));
    // Ties resolve to the earliest trial.
    let flat = hyperparameter_search(&space, 8, 0, |_, _| Ok(1.0)).unwrap();
    assert_eq!(flat.best_index, 0);
}
