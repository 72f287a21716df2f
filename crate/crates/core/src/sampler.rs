//! Next-action sampling from an intensity that is only revealed piece by
//! piece.
//!
//! A single uniform draw `u` is inverted through the cumulative distribution
//! of the next arrival. When feedback arrives at `s` before the provisional
//! sample, the intensity after `s` changes; the draw is rebased to
//! `u' = 1 − (1 − u)/Q`, with `Q` the survival probability over the elapsed
//! piece, and inverted again from `s`. The result is an exact sample of the
//! full piecewise intensity using one draw per action.

use rand::Rng;

use crate::error::{precondition, Error, Result};
use crate::mtpp::{EpisodeHistory, Event, IntensitySegment};

/// Below this slope the homogeneous inverse is used.
pub const FLAT_SLOPE: f64 = 1e-9;

/// An intensity known from its reference time onward.
pub trait Hazard {
    fn t_ref(&self) -> f64;

    /// `Λ(t_ref, t)` for `t ≥ t_ref`.
    fn cumulative(&self, t: f64) -> f64;

    /// The time at which `Λ(t_ref, ·)` reaches `target ≥ 0`, or `None` when
    /// the total remaining mass is at most `target`.
    fn invert(&self, target: f64) -> Option<f64>;
}

impl Hazard for IntensitySegment {
    fn t_ref(&self) -> f64 {
        self.t_ref
    }

    fn cumulative(&self, t: f64) -> f64 {
        self.c * crate::mtpp::exp_integral(self.w, t - self.t_ref)
    }

    fn invert(&self, target: f64) -> Option<f64> {
        // With g = ln(1 − u) = −target: a = 1 − (w/c)·g.
        if self.w.abs() > FLAT_SLOPE {
            let x = self.w / self.c * target;
            if x <= -1.0 {
                return None;
            }
            Some(self.t_ref + x.ln_1p() / self.w)
        } else {
            Some(self.t_ref + target / self.c)
        }
    }
}

/// A piecewise-constant intensity with known breakpoints. Rates may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    t_ref: f64,
    /// `(start, rate)` pairs with increasing starts; the first starts at
    /// `t_ref` and the last extends forever.
    pieces: Vec<(f64, f64)>,
}

impl PiecewiseConstant {
    pub fn new(t_ref: f64, pieces: Vec<(f64, f64)>) -> Result<Self> {
        if pieces.first().map(|p| p.0) != Some(t_ref) {
            return Err(precondition("first piece must start at the reference time"));
        }
        if pieces.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(precondition("piece starts must increase"));
        }
        if pieces.iter().any(|p| !(p.1 >= 0.0 && p.1.is_finite())) {
            return Err(precondition("rates must be finite and non-negative"));
        }
        Ok(Self { t_ref, pieces })
    }

    pub fn constant(t_ref: f64, rate: f64) -> Result<Self> {
        Self::new(t_ref, vec![(t_ref, rate)])
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.pieces
            .iter()
            .rev()
            .find(|p| p.0 <= t)
            .map_or(0.0, |p| p.1)
    }
}

impl Hazard for PiecewiseConstant {
    fn t_ref(&self) -> f64 {
        self.t_ref
    }

    fn cumulative(&self, t: f64) -> f64 {
        let mut total = 0.0;
        for (i, &(start, rate)) in self.pieces.iter().enumerate() {
            if start >= t {
                break;
            }
            let end = self.pieces.get(i + 1).map_or(t, |p| p.0.min(t));
            total += rate * (end - start);
        }
        total
    }

    fn invert(&self, target: f64) -> Option<f64> {
        let mut left = target;
        for (i, &(start, rate)) in self.pieces.iter().enumerate() {
            match self.pieces.get(i + 1) {
                Some(&(end, _)) => {
                    let mass = rate * (end - start);
                    if mass >= left && rate > 0.0 {
                        return Some(start + left / rate);
                    }
                    left -= mass;
                }
                None => {
                    return (rate > 0.0).then(|| start + left / rate);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleOutcome {
    Time(f64),
    /// The remaining intensity mass is too small to produce another event.
    Extinct,
}

impl SampleOutcome {
    pub fn time(self) -> Option<f64> {
        match self {
            SampleOutcome::Time(t) => Some(t),
            SampleOutcome::Extinct => None,
        }
    }
}

/// One pending draw together with the piece of intensity it is measured
/// against.
///
/// The draw is stored as its survival complement `1 − u`, which keeps full
/// precision through repeated rebasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState<H> {
    survival: f64,
    seg: H,
}

impl<H: Hazard> SamplerState<H> {
    pub fn new(u: f64, seg: H) -> Result<Self> {
        if !(0.0..1.0).contains(&u) {
            return Err(precondition(format!(
                "uniform draw must lie in [0, 1), got {u}"
            )));
        }
        Ok(Self {
            survival: 1.0 - u,
            seg,
        })
    }

    pub fn u_effective(&self) -> f64 {
        1.0 - self.survival
    }

    pub fn segment(&self) -> &H {
        &self.seg
    }
}

/// Inverse CDF of the next arrival after `seg.t_ref`.
pub fn invert_cdf<H: Hazard>(state: &SamplerState<H>) -> SampleOutcome {
    // −ln(1 − u)
    let target = -state.survival.ln();
    match state.seg.invert(target) {
        Some(t) => SampleOutcome::Time(t),
        None => SampleOutcome::Extinct,
    }
}

/// Rebases a pending draw when the intensity changes at `s`.
pub fn rebase_on_feedback<H: Hazard>(
    state: SamplerState<H>,
    s: f64,
    new_seg: H,
) -> Result<SamplerState<H>> {
    let t_ref = state.seg.t_ref();
    if s < t_ref {
        return Err(precondition(format!(
            "rebase time {s} precedes the reference time {t_ref}"
        )));
    }
    if new_seg.t_ref() != s {
        return Err(precondition(format!(
            "new segment must start at the rebase time {s}, got {}",
            new_seg.t_ref()
        )));
    }
    // (1 − u)/Q with Q = exp(−Λ(t_ref, s)).
    let elapsed = state.seg.cumulative(s);
    let survival = state.survival * elapsed.exp();
    if survival > 1.0 + 1e-12 {
        return Err(Error::Consistency(format!(
            "rebase at {s} after the pending sample had already fired (1-u' = {survival})"
        )));
    }
    Ok(SamplerState {
        survival: survival.min(1.0),
        seg: new_seg,
    })
}

/// An agent whose intensity can be queried after every event.
pub trait ActionPolicy {
    type Hazard: Hazard;

    /// The intensity from `now` on, assuming no further events.
    fn hazard(&self, now: f64) -> Result<Self::Hazard>;

    /// Incorporates an event (own action or feedback) into the policy state.
    fn observe(&mut self, event: &Event) -> Result<()>;
}

/// Source of environment feedback, revealed in time order.
pub trait FeedbackSource {
    /// Removes and returns the next feedback event strictly before `limit`,
    /// if the environment produces one.
    fn next_feedback_before(&mut self, limit: f64) -> Result<Option<Event>>;
}

/// Samples the next action time after `t_now`, consuming feedback that
/// arrives first.
///
/// Feedback events are appended to `history` and shown to the policy before
/// the pending draw is rebased. Exactly one uniform is drawn per call.
/// Returns [`SampleOutcome::Extinct`] when no action happens before
/// `horizon`.
pub fn next_action<P, F, R>(
    policy: &mut P,
    feedback: &mut F,
    history: &mut EpisodeHistory,
    t_now: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<SampleOutcome>
where
    P: ActionPolicy,
    F: FeedbackSource,
    R: Rng + ?Sized,
{
    if t_now >= horizon {
        return Err(precondition(format!(
            "sampling start {t_now} is not before the horizon {horizon}"
        )));
    }
    let u: f64 = rng.random();
    let mut state = SamplerState::new(u, policy.hazard(t_now)?)?;
    loop {
        let outcome = invert_cdf(&state);
        let limit = outcome.time().map_or(horizon, |t| t.min(horizon));
        match feedback.next_feedback_before(limit)? {
            Some(event) => {
                let event = history.push(event)?;
                policy.observe(&event)?;
                let s = event.time;
                state = rebase_on_feedback(state, s, policy.hazard(s)?)?;
            }
            None => {
                return Ok(match outcome {
                    SampleOutcome::Time(t) if t < horizon => SampleOutcome::Time(t),
                    _ => SampleOutcome::Extinct,
                });
            }
        }
    }
}

/// Reference sampler by Ogata thinning for a fully known piecewise-exponential
/// intensity. Each piece is `(start, c, w)` with `λ(t) = c·e^{w(t−start)}`
/// until the next start; the last piece runs to `horizon`.
///
/// Returns the first arrival, or `None` if there is none before `horizon`.
/// Used as an independent oracle in tests and diagnostics.
pub fn thinning_first_arrival<R: Rng + ?Sized>(
    pieces: &[(f64, f64, f64)],
    horizon: f64,
    rng: &mut R,
) -> Option<f64> {
    let mut t = pieces.first()?.0;
    let rate_at = |t: f64| {
        let k = pieces.iter().rposition(|p| p.0 <= t).unwrap_or(0);
        let (s, c, w) = pieces[k];
        c * (w * (t - s)).exp()
    };
    // Upper bound of λ on [t, end of the current piece].
    let bound_from = |t: f64| {
        let k = pieces.iter().rposition(|p| p.0 <= t).unwrap_or(0);
        let end = pieces.get(k + 1).map_or(horizon, |p| p.0);
        (rate_at(t).max(rate_at(end.min(horizon))), end)
    };
    while t < horizon {
        let (bound, end) = bound_from(t);
        if bound <= 0.0 {
            t = end;
            continue;
        }
        let e: f64 = rng.random();
        let cand = t - (1.0 - e).ln() / bound;
        if cand >= end {
            t = end;
            continue;
        }
        let accept: f64 = rng.random();
        if accept * bound <= rate_at(cand) {
            return (cand < horizon).then_some(cand);
        }
        t = cand;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(c: f64, w: f64, t_ref: f64) -> IntensitySegment {
        IntensitySegment::new(c, w, t_ref).unwrap()
    }

    #[test]
    fn zero_quantile_is_reference_time() {
        for (c, w) in [(1.0, 0.0), (0.3, -2.0), (4.0, 1.5)] {
            let st = SamplerState::new(0.0, seg(c, w, 5.0)).unwrap();
            assert_eq!(invert_cdf(&st), SampleOutcome::Time(5.0));
        }
    }

    #[test]
    fn homogeneous_quantile() {
        let u = 1.0 - (-2.0f64).exp();
        let st = SamplerState::new(u, seg(2.0, 0.0, 0.0)).unwrap();
        let t = invert_cdf(&st).time().unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decaying_intensity_can_go_extinct() {
        // 1 + (1/0.5)·ln 0.5 < 0
        let st = SamplerState::new(0.5, seg(0.5, -1.0, 0.0)).unwrap();
        assert_eq!(invert_cdf(&st), SampleOutcome::Extinct);
        // Total mass c/|w| = 0.5 exceeds −ln(1−u) for small u.
        let st = SamplerState::new(0.2, seg(0.5, -1.0, 0.0)).unwrap();
        assert!(invert_cdf(&st).time().is_some());
    }

    #[test]
    fn inverse_is_consistent_with_cumulative() {
        for (c, w) in [(0.7, 0.8), (2.0, -0.3), (1.1, 0.0)] {
            let s = seg(c, w, 1.0);
            for u in [0.05, 0.3, 0.6, 0.9] {
                let target = -(1.0f64 - u).ln();
                if let Some(t) = s.invert(target) {
                    assert!((s.cumulative(t) - target).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rebase_with_unchanged_intensity_keeps_sample() {
        let old = seg(1.3, -0.4, 1.0);
        let st = SamplerState::new(0.61, old).unwrap();
        let before = invert_cdf(&st).time().unwrap();
        let s = 1.0 + 0.5 * (before - 1.0);
        let rebased = rebase_on_feedback(st, s, old.rebased(s)).unwrap();
        let after = invert_cdf(&rebased).time().unwrap();
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn rebase_at_reference_time_is_identity() {
        let st = SamplerState::new(0.37, seg(2.0, 0.5, 3.0)).unwrap();
        let rebased = rebase_on_feedback(st.clone(), 3.0, seg(5.0, 0.1, 3.0)).unwrap();
        assert_eq!(rebased.u_effective(), st.u_effective());
    }

    #[test]
    fn successive_rebases_compose() {
        let base = seg(0.8, 0.3, 0.0);
        let st = SamplerState::new(0.93, base).unwrap();
        let two = {
            let a = rebase_on_feedback(st.clone(), 0.4, base.rebased(0.4)).unwrap();
            rebase_on_feedback(a, 1.1, base.rebased(1.1)).unwrap()
        };
        let one = rebase_on_feedback(st, 1.1, base.rebased(1.1)).unwrap();
        assert!((two.u_effective() - one.u_effective()).abs() < 1e-10);
    }

    #[test]
    fn rebase_after_fired_sample_is_rejected() {
        let st = SamplerState::new(0.1, seg(1.0, 0.0, 0.0)).unwrap();
        let t = invert_cdf(&st).time().unwrap();
        let err = rebase_on_feedback(st, t + 0.5, seg(1.0, 0.0, t + 0.5)).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn extinct_sample_can_be_rescued() {
        // Decaying piece goes extinct for this draw; a later boost revives it.
        let st = SamplerState::new(0.9, seg(0.5, -1.0, 0.0)).unwrap();
        assert_eq!(invert_cdf(&st), SampleOutcome::Extinct);
        let rebased = rebase_on_feedback(st, 2.0, seg(5.0, 0.0, 2.0)).unwrap();
        let t = invert_cdf(&rebased).time().unwrap();
        assert!(t > 2.0);
        // Remaining target after [0,2]: −ln(0.1) − 0.5(1 − e^{−2}).
        let target = -(0.1f64).ln() - 0.5 * (1.0 - (-2.0f64).exp());
        assert!((t - (2.0 + target / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn piecewise_constant_inversion() {
        let h = PiecewiseConstant::new(0.0, vec![(0.0, 1.0), (1.0, 0.0), (2.0, 2.0)]).unwrap();
        assert_eq!(h.invert(0.5), Some(0.5));
        assert_eq!(h.invert(1.0), Some(1.0));
        assert_eq!(h.invert(2.0), Some(2.5));
        assert!((h.cumulative(3.0) - 3.0).abs() < 1e-15);
        let dead = PiecewiseConstant::new(0.0, vec![(0.0, 1.0), (1.0, 0.0)]).unwrap();
        assert_eq!(dead.invert(2.0), None);
        assert_eq!(
            PiecewiseConstant::constant(0.0, 0.0).unwrap().invert(0.1),
            None
        );
    }

    struct Scripted {
        /// `(start, c, w)`; the policy reveals a piece only once its start
        /// arrives as feedback.
        pieces: Vec<(f64, f64, f64)>,
        current: usize,
    }

    impl ActionPolicy for Scripted {
        type Hazard = IntensitySegment;

        fn hazard(&self, now: f64) -> Result<IntensitySegment> {
            let (s, c, w) = self.pieces[self.current];
            Ok(seg(c, w, s).rebased(now))
        }

        fn observe(&mut self, _event: &Event) -> Result<()> {
            self.current += 1;
            Ok(())
        }
    }

    struct Breaks(Vec<f64>);

    impl FeedbackSource for Breaks {
        fn next_feedback_before(&mut self, limit: f64) -> Result<Option<Event>> {
            match self.0.first() {
                Some(&t) if t < limit => Ok(Some(Event::feedback(self.0.remove(0), None))),
                _ => Ok(None),
            }
        }
    }

    #[test]
    fn constant_policy_is_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut total = 0.0;
        for _ in 0..n {
            let mut p = Scripted {
                pieces: vec![(0.0, 2.0, 0.0)],
                current: 0,
            };
            let mut h = EpisodeHistory::new(1e6).unwrap();
            total += next_action(&mut p, &mut Breaks(vec![]), &mut h, 0.0, 1e6, &mut rng)
                .unwrap()
                .time()
                .unwrap();
        }
        let mean = total / n as f64;
        assert!((mean - 0.5).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn unchanged_feedback_does_not_move_sample() {
        for seed in 0..50 {
            let pieces = vec![(0.0, 0.9, -0.2)];
            let mut a = Scripted {
                pieces: pieces.clone(),
                current: 0,
            };
            let mut h = EpisodeHistory::new(50.0).unwrap();
            let plain = next_action(
                &mut a,
                &mut Breaks(vec![]),
                &mut h,
                0.0,
                50.0,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();

            // Same intensity, revealed in four pieces.
            let ext: Vec<_> = [0.0, 0.3, 0.7, 1.5]
                .iter()
                .map(|&s| (0.0, 0.9, -0.2, s))
                .collect();
            let revealed: Vec<_> = ext
                .iter()
                .map(|&(_, c, w, s)| (s, seg(c, w, 0.0).at(s), w))
                .collect();
            let mut b = Scripted {
                pieces: revealed,
                current: 0,
            };
            let mut h = EpisodeHistory::new(50.0).unwrap();
            let split = next_action(
                &mut b,
                &mut Breaks(vec![0.3, 0.7, 1.5]),
                &mut h,
                0.0,
                50.0,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            match (plain, split) {
                (SampleOutcome::Time(x), SampleOutcome::Time(y)) => assert!((x - y).abs() < 1e-10),
                (x, y) => assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn samples_strictly_after_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let mut p = Scripted {
                pieces: vec![(0.0, 0.5, 0.3), (0.2, 3.0, -0.5)],
                current: 0,
            };
            let mut h = EpisodeHistory::new(10.0).unwrap();
            if let SampleOutcome::Time(t) =
                next_action(&mut p, &mut Breaks(vec![0.2]), &mut h, 0.0, 10.0, &mut rng).unwrap()
            {
                assert!(t > 0.0 && t < 10.0);
            }
        }
    }

    #[test]
    fn thinning_matches_exponential_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mean = (0..n)
            .map(|_| thinning_first_arrival(&[(0.0, 1.5, 0.0)], 1e9, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0 / 1.5).abs() < 4.0 * (1.0 / 1.5) / (n as f64).sqrt());
    }
}
