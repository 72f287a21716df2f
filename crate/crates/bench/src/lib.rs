//! Inputs shared by the benchmarks.

use pointrl_core::broadcast::{FeedState, SortingRule};
use pointrl_core::memory::{MemoryConfig, MemoryEnv};
use pointrl_core::{EpisodeHistory, Event, InitConfig, PolicyParams, PolicyShape};

/// A marked policy of the default size.
pub fn policy(action_marks: usize, feedback_marks: usize) -> PolicyParams {
    let shape = PolicyShape::new(8, 8)
        .with_action_marks(action_marks)
        .with_feedback_marks(feedback_marks);
    PolicyParams::init(
        shape,
        false,
        &InitConfig {
            seed: 1,
            scale: 0.3,
            base_rate: 1.0,
        },
    )
    .expect("valid shape")
}

/// Alternating actions and feedback, `n` events on `[0, n)`.
pub fn history(n: usize, action_marks: usize, feedback_marks: usize) -> EpisodeHistory {
    let events = (0..n).map(|i| {
        let t = i as f64 + 0.5;
        if i % 2 == 0 {
            Event::action(t, Some(i % action_marks))
        } else {
            Event::feedback(t, Some(i % feedback_marks))
        }
    });
    EpisodeHistory::from_events(n as f64, events).expect("sorted events")
}

pub fn memory_env() -> MemoryEnv {
    MemoryEnv::new(MemoryConfig::synthetic(10, (0.01, 1.0), 7)).expect("valid config")
}

/// A priority-queue feed with `n` competitor posts and an agent post every
/// ten of them.
pub fn busy_feed(n: usize) -> FeedState {
    let mut feed =
        FeedState::new(SortingRule::PriorityQueue { dwell: 5.0 }, 0.5).expect("valid rule");
    for i in 0..n {
        let t = i as f64 * 0.1;
        feed.add_competitor_post(t, i % 7, (i % 7) as f64 / 6.0)
            .expect("ordered");
        if i % 10 == 5 {
            feed.add_agent_post(t).expect("ordered");
        }
    }
    feed
}
