use lwta_meta_demo::lab::{winner_frequencies, SineLab};

const SMALL: &str = "blocks = 4,2\ntask_batch = 3\niters = 6\ninit_log_var_shift = -6\n";

#[test]
fn winner_frequencies_track_softmax() {
    let r = winner_frequencies(&[1.0, 0.0, -1.0], 0.67, 20_000, 1).unwrap();
    for (h, p) in r.hard.iter().zip(&r.softmax) {
        assert!((h - p).abs() < 0.02, "{h} vs {p}");
    }
    assert!((r.hard.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((r.relaxed_mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(winner_frequencies(&[], 0.67, 10, 0).is_err());
}

#[test]
fn chunked_training_reaches_the_configured_total() {
    let mut lab = SineLab::new(SMALL).unwrap();
    assert_eq!(lab.train(4).unwrap().iter, 4);
    let r = lab.train(100).unwrap();
    assert_eq!((r.iter, r.total_iters), (6, 6));
    assert!(r.kl_w > 0.0 && r.loss.is_finite());
    assert_eq!(lab.train(5).unwrap().iter, 6);
}

#[test]
fn fit_reports_curves_on_the_grid() {
    let lab = SineLab::new(SMALL).unwrap();
    let r = lab.fit(2.0, 0.5, 5, 3).unwrap();
    assert_eq!(r.x.len(), 100);
    assert_eq!(r.mean.len(), 100);
    assert_eq!(r.std.len(), 100);
    assert_eq!(r.support_x.len(), 5);
    assert!(r.std.iter().all(|s| s.is_finite() && *s >= 0.0));
    assert!((r.truth[0] - 2.0 * (-5.0f64 + 0.5).sin()).abs() < 1e-9);
    let again = lab.fit(2.0, 0.5, 5, 3).unwrap();
    assert_eq!(r.mean, again.mean);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"prior_mean\""));
}

#[test]
fn strategy_comparison_has_one_entry_per_step() {
    let lab = SineLab::new(SMALL).unwrap();
    let r = lab.compare_strategies(2, 0).unwrap();
    assert_eq!(r.max_variance.len(), 6);
    assert_eq!(r.random.len(), 6);
    assert_eq!(r.max_variance[0], r.random[0], "same initial points");
}

#[test]
fn non_sinusoid_settings_are_rejected() {
    assert!(SineLab::new("task = synth-class").is_err());
    assert!(SineLab::new("no_such_key = 1").is_err());
}
