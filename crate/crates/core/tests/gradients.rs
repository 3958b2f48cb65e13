use heattrack::gradcheck::{run_suite, summarize};

#[test]
fn analytic_gradients_match_finite_differences() {
    let results = run_suite(&[0, 1, 2, 3, 4]).unwrap();
    let summary = summarize(&results);
    assert!(summary.iter().any(|(g, _, _)| *g == "module"));
    for (group, name, err) in summary {
        assert!(err.is_finite() && err < 1e-4, "{group}/{name}: {err:e}");
    }
}
