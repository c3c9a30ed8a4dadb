use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::synthetic::{FixedExplainer, RegionClassifier};
use super::*;
use crate::model_zoo::{ImageTensor, Normalization};

fn map2(h: usize, w: usize, v: &[f64]) -> Tensor {
    Tensor::new(&[h, w], v.to_vec()).unwrap()
}

fn bits(m: &ThresholdMask) -> Vec<u8> {
    m.bits().iter().map(|&b| u8::from(b)).collect()
}

#[test]
fn topk_examples() {
    let e = map2(2, 2, &[0.1, 0.4, 0.3, 0.2]);
    assert_eq!(
        bits(&topk_mask(&e, 50.0, Polarity::Highest).unwrap()),
        [0, 1, 1, 0]
    );
    let low = topk_mask(&e, 25.0, Polarity::Lowest).unwrap();
    assert_eq!(bits(&low), [1, 0, 0, 0]);
    assert_eq!(low.polarity(), Polarity::Lowest);
    assert_eq!(low.percent(), 25.0);
    assert!(topk_mask(&e, 100.0, Polarity::Highest)
        .unwrap()
        .bits()
        .iter()
        .all(|&b| b));
    assert!(matches!(
        topk_mask(&e, 0.0, Polarity::Highest),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        topk_mask(&e, 100.5, Polarity::Lowest),
        Err(Error::Input(_))
    ));
    // Ties resolve by row-major order.
    let flat = Tensor::full(&[2, 3], 0.5);
    assert_eq!(
        bits(&topk_mask(&flat, 50.0, Polarity::Highest).unwrap()),
        [1, 1, 1, 0, 0, 0]
    );
    assert_eq!(
        bits(&topk_mask(&flat, 50.0, Polarity::Lowest).unwrap()),
        [1, 1, 1, 0, 0, 0]
    );
}

/// Rank oracle: a pixel is selected when fewer than `count` pixels precede it.
fn rank_oracle(d: &[f64], v: f64, polarity: Polarity) -> Vec<u8> {
    let count = (v / 100.0 * d.len() as f64).round() as usize;
    (0..d.len())
        .map(|i| {
            let ahead = (0..d.len())
                .filter(|&j| {
                    let better = match polarity {
                        Polarity::Highest => d[j] > d[i],
                        Polarity::Lowest => d[j] < d[i],
                    };
                    better || (d[j] == d[i] && j < i)
                })
                .count();
            u8::from(ahead < count)
        })
        .collect()
}

proptest! {
    #[test]
    fn topk_matches_rank_oracle_and_nests(
        vals in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]), 20),
        v in 1.0f64..100.0,
        dv in 0.0f64..50.0,
        high in any::<bool>(),
    ) {
        let pol = if high { Polarity::Highest } else { Polarity::Lowest };
        let e = map2(4, 5, &vals);
        let m = topk_mask(&e, v, pol).unwrap();
        prop_assert_eq!(bits(&m), rank_oracle(&vals, v, pol));
        prop_assert_eq!(m.count(), (v / 100.0 * 20.0).round() as usize);
        let bigger = topk_mask(&e, (v + dv).min(100.0), pol).unwrap();
        prop_assert!(m.bits().iter().zip(bigger.bits()).all(|(a, b)| !a || *b));
    }

    #[test]
    fn auc_ignores_collinear_points(
        accs in prop::collection::vec(0.0f64..1.0, 3..8),
        t in 0.05f64..0.95,
        k in 0usize..8,
    ) {
        let n = accs.len();
        let pts: Vec<CurvePoint> = accs.iter().enumerate()
            .map(|(i, &a)| CurvePoint { percent: 10.0 * (i + 1) as f64, accuracy: a })
            .collect();
        let k = k % (n - 1);
        let (a, b) = (pts[k], pts[k + 1]);
        let mid = CurvePoint {
            percent: a.percent + t * (b.percent - a.percent),
            accuracy: a.accuracy + t * (b.accuracy - a.accuracy),
        };
        let mut more = pts.clone();
        more.insert(k + 1, mid);
        prop_assert!((auc(&pts).unwrap() - auc(&more).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ad_ic_examples() {
    let same: Vec<_> = [0.3, 0.9]
        .iter()
        .map(|&c| ConfidencePair::new(c, c).unwrap())
        .collect();
    let r = ad_ic(&same, true).unwrap();
    assert_eq!((r.ad, r.ic), (0.0, 0.0));
    let pairs = [
        ConfidencePair::new(0.8, 0.6).unwrap(),
        ConfidencePair::new(0.5, 0.7).unwrap(),
    ];
    let r = ad_ic(&pairs, true).unwrap();
    assert_abs_diff_eq!(r.ad, 12.5, epsilon = 1e-12);
    assert_abs_diff_eq!(r.ic, 50.0, epsilon = 1e-12);
    let r = ad_ic(&pairs, false).unwrap();
    assert_abs_diff_eq!(r.ad, 10.0, epsilon = 1e-12);
    let up = [
        ConfidencePair::new(0.2, 0.3).unwrap(),
        ConfidencePair::new(0.6, 0.61).unwrap(),
    ];
    let r = ad_ic(&up, true).unwrap();
    assert_eq!((r.ad, r.ic), (0.0, 100.0));
}

#[test]
fn ad_ic_edge_cases() {
    assert!(matches!(ad_ic(&[], true), Err(Error::Input(_))));
    let r = ad_ic(
        &[
            ConfidencePair::new(0.0, 0.4).unwrap(),
            ConfidencePair::new(0.5, 0.25).unwrap(),
        ],
        true,
    )
    .unwrap();
    assert_eq!((r.counted, r.excluded), (1, 1));
    assert_abs_diff_eq!(r.ad, 50.0, epsilon = 1e-12);
    assert!(matches!(
        ad_ic(&[ConfidencePair::new(0.0, 0.4).unwrap()], true),
        Err(Error::Degenerate(_))
    ));
    assert!(ConfidencePair::new(1.2, 0.1).is_err());
}

#[test]
fn auc_examples() {
    let pts = |a: &[f64]| -> Vec<CurvePoint> {
        DELETION_THRESHOLDS
            .iter()
            .zip(a)
            .map(|(&percent, &accuracy)| CurvePoint { percent, accuracy })
            .collect()
    };
    assert_abs_diff_eq!(auc(&pts(&[1.0; 7])).unwrap(), 1.0, epsilon = 1e-15);
    assert_eq!(auc(&pts(&[0.0; 7])).unwrap(), 0.0);
    let line: Vec<CurvePoint> = (0..=10)
        .map(|i| CurvePoint {
            percent: 10.0 * i as f64,
            accuracy: 1.0 - 0.1 * i as f64,
        })
        .collect();
    assert_abs_diff_eq!(auc(&line).unwrap(), 0.5, epsilon = 1e-12);
    // Endpoint extension: a step from 1 to 0 between v = 40 and 60.
    let step = [
        CurvePoint {
            percent: 40.0,
            accuracy: 1.0,
        },
        CurvePoint {
            percent: 60.0,
            accuracy: 0.0,
        },
    ];
    assert_abs_diff_eq!(auc(&step).unwrap(), 0.4 + 0.1, epsilon = 1e-12);
    assert!(auc(&step[..1]).is_err());
    assert!(auc(&[step[1], step[0]]).is_err());
}

fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor {
    ImageTensor::new(
        Tensor::from_fn(&[1, h, w], |p| f(p / w, p % w)),
        Normalization::identity(1),
    )
    .unwrap()
}

fn removal(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> ThresholdMask {
    ThresholdMask::from_bits(
        h,
        w,
        (0..h * w).map(|p| f(p / w, p % w)).collect(),
        Polarity::Highest,
    )
    .unwrap()
}

#[test]
fn infill_trivial_cases() {
    let img = gray(8, 8, |i, j| (i * 8 + j) as f64 * 0.01);
    assert_eq!(
        road_infill(&img, &removal(8, 8, |_, _| false), 0.01).unwrap(),
        img
    );

    let c = 0.7;
    let img = gray(8, 8, |i, j| if (i, j) == (3, 4) { -5.0 } else { c });
    let out = road_infill(&img, &removal(8, 8, |i, j| (i, j) == (3, 4)), 0.01).unwrap();
    assert!((out.data().data()[3 * 8 + 4] - c).abs() <= 0.01 + 1e-12);

    let ramp = gray(8, 8, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 1.0);
    let out = road_infill(&ramp, &removal(8, 8, |i, j| (i, j) == (5, 2)), 0.0).unwrap();
    assert_abs_diff_eq!(
        out.data().data()[5 * 8 + 2],
        0.3 * 5.0 - 0.2 * 2.0 + 1.0,
        epsilon = 1e-6
    );

    assert!(matches!(
        road_infill(&img, &removal(8, 8, |_, _| true), 0.0),
        Err(Error::Degenerate(_))
    ));
    assert!(road_infill(&img, &removal(4, 4, |_, _| false), 0.0).is_err());
}

#[test]
fn infill_reconstructs_harmonic_images() {
    let harmonics: [fn(f64, f64) -> f64; 3] = [
        |i, j| (i * i - j * j) / 100.0,
        |i, j| i * j / 50.0 - 0.3,
        |i, j| 0.5 * i - 0.25 * j + 2.0,
    ];
    for f in harmonics {
        let img = gray(12, 12, |i, j| f(i as f64, j as f64));
        // Irregular interior removal touching many neighbours.
        let mask = removal(12, 12, |i, j| {
            (1..11).contains(&i) && (1..11).contains(&j) && (i * 7 + j * 3) % 5 != 0
        });
        let out = road_infill(&img, &mask, 0.0).unwrap();
        for p in 0..144 {
            let (a, b) = (out.data().data()[p], img.data().data()[p]);
            if mask.bits()[p] {
                assert!((a - b).abs() <= 1e-6, "pixel {p}: {a} vs {b}");
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

/// Dense solve of the same neighbour-mean system.
fn dense_infill(img: &[f64], h: usize, w: usize, removed: &[bool]) -> Vec<f64> {
    let unknowns: Vec<usize> = (0..h * w).filter(|&p| removed[p]).collect();
    let n = unknowns.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (k, &p) in unknowns.iter().enumerate() {
        let (i, j) = ((p / w) as isize, (p % w) as isize);
        for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (y, x) = (i + di, j + dj);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let q = y as usize * w + x as usize;
            a[(k, k)] += 1.0;
            match unknowns.iter().position(|&u| u == q) {
                Some(m) => a[(k, m)] -= 1.0,
                None => b[k] += img[q],
            }
        }
    }
    let x = a.lu().solve(&b).unwrap();
    let mut out = img.to_vec();
    for (k, &p) in unknowns.iter().enumerate() {
        out[p] = x[k];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn infill_matches_dense_solve(
        vals in prop::collection::vec(-2.0f64..2.0, 3 * 64),
        holes in prop::collection::vec(prop::bool::weighted(0.6), 64),
        noise in 0.0f64..0.05,
    ) {
        prop_assume!(holes.iter().any(|&b| !b));
        let img = ImageTensor::new(Tensor::new(&[3, 8, 8], vals.clone()).unwrap(), Normalization::identity(3)).unwrap();
        let mask = ThresholdMask::from_bits(8, 8, holes.clone(), Polarity::Lowest).unwrap();
        let exact = road_infill(&img, &mask, 0.0).unwrap();
        let noisy = road_infill(&img, &mask, noise).unwrap();
        for ch in 0..3 {
            let plane = &vals[ch * 64..(ch + 1) * 64];
            let expect = dense_infill(plane, 8, 8, &holes);
            for p in 0..64 {
                let got = exact.data().data()[ch * 64 + p];
                prop_assert!((got - expect[p]).abs() < 1e-8);
                let n = noisy.data().data()[ch * 64 + p];
                if holes[p] {
                    prop_assert!((n - got).abs() <= noise + 1e-12);
                } else {
                    prop_assert_eq!(n.to_bits(), plane[p].to_bits());
                }
            }
        }
        prop_assert_eq!(&road_infill(&img, &mask, noise).unwrap(), &noisy);
    }
}

#[test]
fn random_baseline_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = random_baseline(&mut rng, (1, 100, 100));
    assert!(m.data().data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((m.data().mean() - 0.5).abs() < 0.01);
    let other = random_baseline(&mut ChaCha8Rng::seed_from_u64(1), (1, 100, 100));
    assert_ne!(m, other);
}

#[test]
fn oracle_region_metrics() {
    let model = RegionClassifier::quarter();
    let data = model.dataset(200, 5).unwrap();
    let cfg = EvalConfig::default();
    let oracle = FixedExplainer::oracle(&model);
    assert_eq!(
        evaluate_ad_ic(&model, &oracle, &data, 50.0, &cfg)
            .unwrap()
            .ad,
        0.0
    );

    let morf = deletion_curve_at(
        &model,
        &oracle,
        &data,
        DeletionMode::MoRF,
        &[0.0, 30.0],
        &cfg,
    )
    .unwrap();
    assert_eq!(morf[0].accuracy, 1.0);
    assert!(
        (morf[1].accuracy - 0.5).abs() <= 0.05,
        "MoRF at 30%: {}",
        morf[1].accuracy
    );
    let lerf =
        deletion_curve_at(&model, &oracle, &data, DeletionMode::LeRF, &[50.0], &cfg).unwrap();
    assert!(lerf[0].accuracy >= 0.95);

    let both: Vec<f64> = [DeletionMode::MoRF, DeletionMode::LeRF]
        .iter()
        .map(|&m| deletion_curve_at(&model, &oracle, &data, m, &[100.0], &cfg).unwrap()[0].accuracy)
        .collect();
    assert_eq!(both[0], both[1]);
}

#[test]
fn anti_oracle_drop_equals_zeroing_the_region() {
    let model = RegionClassifier::quarter();
    let data = model.dataset(60, 6).unwrap();
    let r = evaluate_ad_ic(
        &model,
        &FixedExplainer::anti_oracle(&model),
        &data,
        15.0,
        &EvalConfig::default(),
    )
    .unwrap();

    // Brute force: with the region zeroed both logits vanish, so confidence is 1/2.
    let logits = model.logits(data.images()).unwrap();
    let mut drop = 0.0;
    for z in logits.data().chunks(2) {
        let p = softmax(z);
        let c = if z[1] > z[0] { 1 } else { 0 };
        drop += (p[c] - 0.5).max(0.0) / p[c];
    }
    assert_abs_diff_eq!(r.ad, 100.0 * drop / 60.0, epsilon = 1e-9);
    assert_eq!(r.ic, 0.0);
}

#[test]
fn random_ic_matches_direct_enumeration() {
    let model = RegionClassifier::quarter();
    let data = model.dataset(40, 7).unwrap();
    for seed in 0..4 {
        let explainer = RandomExplainer {
            classes: 2,
            size: (16, 16),
            seed,
        };
        let r = evaluate_ad_ic(&model, &explainer, &data, 50.0, &EvalConfig::default()).unwrap();
        let mut increases = 0;
        for i in 0..data.len() {
            let x = data.image(i);
            let orig = model
                .logits(&x.data().clone().reshaped(&[1, 1, 16, 16]))
                .unwrap();
            let c = if orig.data()[1] > orig.data()[0] {
                1
            } else {
                0
            };
            let maps = explainer.explain(&x).unwrap();
            let keep = topk_mask(
                &maps.data().index_first(c).reshaped(&[16, 16]),
                50.0,
                Polarity::Highest,
            )
            .unwrap();
            let masked = Tensor::from_fn(&[1, 1, 16, 16], |p| {
                if keep.bits()[p] {
                    x.data().data()[p]
                } else {
                    0.0
                }
            });
            let after = model.logits(&masked).unwrap();
            if softmax(after.data())[c] > softmax(orig.data())[c] {
                increases += 1;
            }
        }
        assert_abs_diff_eq!(r.ic, 100.0 * increases as f64 / 40.0, epsilon = 1e-12);
    }
}

#[test]
fn report_schema_and_determinism() {
    let model = RegionClassifier::quarter();
    let data = model.dataset(20, 8).unwrap();
    let explainer = RandomExplainer {
        classes: 2,
        size: (8, 8),
        seed: 3,
    };
    let cfg = EvalConfig {
        seed: 11,
        ..EvalConfig::default()
    };
    let a = evaluate(&model, &explainer, &data, &cfg).unwrap();
    assert_eq!(a.ad_ic.len(), 3);
    assert_eq!(a.morf.len() + a.lerf.len(), 14);
    assert!(a.ad_at(50.0).is_some() && a.ic_at(15.0).is_some());
    for s in &a.ad_ic {
        assert!((0.0..=100.0).contains(&s.ad) && (0.0..=100.0).contains(&s.ic));
    }
    assert!(a
        .morf
        .iter()
        .chain(&a.lerf)
        .all(|p| (0.0..=1.0).contains(&p.accuracy)));
    let b = evaluate(&model, &explainer, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(EvalReport::from_json(&a.to_json().unwrap()).unwrap(), a);
    let csv = a.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "explainer,images,ad100,ic100,ad50,ic50,ad15,ic15,morf_auc,lerf_auc,seed"
    );
    assert_eq!(lines[1].split(',').count(), 11);
    let (morf, lerf) = deletion_aucs(&model, &explainer, &data, &cfg).unwrap();
    assert_eq!((morf, lerf), (a.morf_auc, a.lerf_auc));
}

#[test]
fn evaluation_rejects_mismatched_explainers() {
    let model = RegionClassifier::quarter();
    let data = model.dataset(4, 9).unwrap();
    let too_big = RandomExplainer {
        classes: 2,
        size: (32, 32),
        seed: 0,
    };
    assert!(evaluate(&model, &too_big, &data, &EvalConfig::default()).is_err());
    let wrong_classes = RandomExplainer {
        classes: 3,
        size: (8, 8),
        seed: 0,
    };
    assert!(evaluate(&model, &wrong_classes, &data, &EvalConfig::default()).is_err());
    assert!(evaluate(&model, &too_big, &data.take(0), &EvalConfig::default()).is_err());
}
