use segwithu_demo::{case_view, compare_scores, reset, train};

#[test]
fn case_view_is_consistent() {
    let v = case_view(3, 0, 1.6).unwrap();
    assert_eq!(v.labels.len(), v.width * v.height);
    assert_eq!(v.prediction.len(), v.labels.len());
    let errors = v.labels.iter().zip(&v.prediction).filter(|(a, b)| a != b).count();
    assert_eq!(errors, v.errors.iter().map(|&e| usize::from(e)).sum::<usize>());
    assert!((v.error_rate - errors as f64 / v.labels.len() as f64).abs() < 1e-12);
}

#[test]
fn zero_noise_case_has_no_errors() {
    let v = case_view(3, 1, 0.0).unwrap();
    assert_eq!(v.error_rate, 0.0);
}

#[test]
fn comparison_bounds_hold() {
    reset();
    let c = compare_scores(3, 0, 1.6).unwrap();
    assert!(!c.head_trained);
    assert_eq!(c.methods.len(), 2);
    for m in &c.methods {
        assert!(c.oracle_aurc <= m.aurc + 1e-15);
        assert!(m.curve.coverage.len() <= 101);
        assert_eq!(*m.curve.coverage.last().unwrap(), 1.0);
    }
}

#[test]
fn training_is_used_for_the_same_seed_only() {
    let t = train(5, 2).unwrap();
    assert_eq!(t.epochs, vec![0, 1, 2]);
    assert!(t.best_epoch <= 2);
    assert!(compare_scores(5, 0, 1.6).unwrap().head_trained);
    assert!(!compare_scores(6, 0, 1.6).unwrap().head_trained);
    reset();
    assert!(!compare_scores(5, 0, 1.6).unwrap().head_trained);
}

#[test]
fn serialized_output_is_json() {
    let v = case_view(1, 0, 1.6).unwrap();
    let text = serde_json::to_string(&v).unwrap();
    let back: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(back["width"], 32);
}
