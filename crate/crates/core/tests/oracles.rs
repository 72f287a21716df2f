use pointrl_core::broadcast::{reward_rank, reward_time_at_top, FeedState, SortingRule};
use pointrl_core::gradcheck::run_grad_check;
use pointrl_core::memory::{Item, MemoryConfig, StudentState};
use pointrl_core::samplecheck::{check_scenario, standard_scenarios};

#[test]
fn sampler_matches_analytic_and_thinning() {
    for scenario in standard_scenarios() {
        let report = check_scenario(&scenario, 100_000, 42).unwrap();
        assert!(report.worst() < 0.01, "{report:?}");
    }
}

#[test]
fn backward_matches_finite_differences() {
    let report = run_grad_check(2024, 50, 3, 10, 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn recall_after_one_half_life() {
    let config = MemoryConfig {
        alpha: 0.5,
        beta: 0.2,
        items: vec![Item {
            id: "a".into(),
            n0: std::f64::consts::LN_2,
        }],
        horizon: 1.0,
        test_delay: 1.0,
    };
    let mut s = StudentState::new(&config);
    s.apply_review(0, 1.0, true).unwrap();
    // The rate halves on a recall, so two days later the recall is 1/2.
    assert!((s.recall_prob(0, 3.0).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn chronological_rank_by_hand() {
    // Agent posts at 0 and 2; competitors at 0.5 and 1.5, horizon 3.
    // Rank is 0 on [0, 0.5), 1 on [0.5, 1.5), 2 on [1.5, 2), 0 afterwards.
    let mut feed = FeedState::new(SortingRule::ReverseChrono, 0.0).unwrap();
    feed.add_competitor_post(0.5, 0, 0.0).unwrap();
    feed.add_competitor_post(1.5, 1, 0.0).unwrap();
    feed.add_agent_post(2.0).unwrap();
    assert!((reward_rank(&feed, 3.0) - 2.0).abs() < 1e-12);
    assert!((reward_time_at_top(&feed, 3.0) - 1.5).abs() < 1e-12);
}
