//! Smoke tests running each example at a small size.

#![allow(dead_code)]

#[path = "../examples/command_line.rs"]
mod command_line;
#[path = "../examples/evaluate_metrics.rs"]
mod evaluate_metrics;
#[path = "../examples/explain_image.rs"]
mod explain_image;
#[path = "../examples/hpsearch.rs"]
mod hpsearch;
#[path = "../examples/road_infill.rs"]
mod road_infill;
#[path = "../examples/sanity_check.rs"]
mod sanity_check;
#[path = "../examples/train_attention.rs"]
mod train_attention;
#[path = "../examples/train_models.rs"]
mod train_models;

use ptame::io::explanation::HEADER_LEN;

#[test]
fn train_models_example() {
    let s = train_models::run(300, 1, 0).unwrap();
    assert!((0.0..=1.0).contains(&s.backbone_accuracy));
    assert!((0.0..=1.0).contains(&s.aux_accuracy));
    assert!(s.backbone.is_frozen() && s.aux.is_frozen());
}

#[test]
fn train_attention_example() {
    let s = train_attention::run(200, 0).unwrap();
    // 180 training images after the validation split, batches of 32.
    assert_eq!(s.trace.len(), 6);
    assert!(s.trace.iter().all(|r| r.total.is_finite()));
    assert!((s.contributions.iter().sum::<f64>() - 100.0).abs() < 1e-6);
}

#[test]
fn explain_image_example() {
    let dir = tempfile::tempdir().unwrap();
    let s = explain_image::run(dir.path(), 0).unwrap();
    assert!(s.identical);
    let maps = ptame::io::explanation::import_explanation(&s.explanation).unwrap();
    let (h, w) = maps.size();
    assert_eq!(
        std::fs::metadata(&s.explanation).unwrap().len() as usize,
        HEADER_LEN + 4 * 10 * h * w
    );
    let png = ptame::io::render::decode_png(&std::fs::read(&s.heatmap).unwrap()).unwrap();
    assert_eq!(png.shape, [3, 32, 32]);
    assert!(png.text.iter().any(|(k, v)| k == "seed" && v == "0"));
}

#[test]
fn evaluate_metrics_example() {
    let reports = evaluate_metrics::run(60, 0).unwrap();
    let (oracle, anti, random) = (&reports[0], &reports[1], &reports[2]);
    assert_eq!(oracle.ad_at(50.0), Some(0.0));
    assert!(anti.ad_at(50.0).unwrap() > random.ad_at(50.0).unwrap());
    // Removing the region first destroys the decision; keeping it preserves it.
    assert!(oracle.morf_auc < random.morf_auc && oracle.morf_auc < anti.morf_auc);
    assert!(oracle.lerf_auc >= random.lerf_auc && random.lerf_auc > anti.lerf_auc);
}

#[test]
fn road_infill_example() {
    let (clean, noisy) = road_infill::run(0.01).unwrap();
    assert!(clean < 1e-9, "{clean}");
    assert!(noisy <= 0.01 + 1e-9 && noisy > clean);
}

#[test]
fn sanity_check_example() {
    let curve = sanity_check::run(4, 0).unwrap();
    assert_eq!(curve.points[0], (ptame::sanity::INTACT.to_string(), 1.0));
    assert_eq!(curve.points.len(), 8);
    assert!(curve.points[1..].iter().all(|p| p.1 < 1.0));
}

#[test]
fn hpsearch_example() {
    for guided in [true, false] {
        let r = hpsearch::run(20, guided, 0).unwrap();
        assert_eq!(r.trials.len(), 20);
        assert!(r.trials[r.best_index].score > 0.85);
    }
}

#[test]
fn command_line_example() {
    let dir = tempfile::tempdir().unwrap();
    for (name, manifest) in command_line::run(dir.path()).unwrap() {
        assert!(!manifest.files.is_empty(), "{name}");
    }
}
