//! Event histories and piecewise-exponential intensity arithmetic.
//!
//! Every intensity handled by the library is, between two consecutive
//! events, of the form `λ(t) = c·exp(w·(t − t_ref))`. Compensators and the
//! episode log-likelihood are evaluated in closed form piece by piece.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};

/// Below this value of `|w·Δ|` the compensator uses its second-order expansion.
pub const SMALL_SLOPE: f64 = 1e-8;

/// Shift applied to an event whose time exactly equals its predecessor's.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Action,
    Feedback,
}

/// A single event: an agent action or a piece of environment feedback.
///
/// The mark is interpreted in the action-mark vocabulary for actions and in
/// the feedback-mark vocabulary for feedback, so one slot is enough.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub mark: Option<usize>,
}

impl Event {
    pub fn action(time: f64, mark: Option<usize>) -> Self {
        Self {
            time,
            kind: EventKind::Action,
            mark,
        }
    }

    pub fn feedback(time: f64, mark: Option<usize>) -> Self {
        Self {
            time,
            kind: EventKind::Feedback,
            mark,
        }
    }

    pub fn is_action(&self) -> bool {
        self.kind == EventKind::Action
    }
}

/// Time-ordered events of one episode over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHistory {
    events: Vec<Event>,
    horizon: f64,
}

impl EpisodeHistory {
    pub fn new(horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(precondition(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        Ok(Self {
            events: Vec::new(),
            horizon,
        })
    }

    /// Builds a history from events already sorted by time. Exact ties are
    /// perturbed as in [`EpisodeHistory::push`].
    pub fn from_events(horizon: f64, events: impl IntoIterator<Item = Event>) -> Result<Self> {
        let mut history = Self::new(horizon)?;
        for event in events {
            history.push(event)?;
        }
        Ok(history)
    }

    /// Appends an event, returning it as stored.
    ///
    /// An event that ties the previous one is moved forward by
    /// [`TIE_EPSILON`] so that times stay strictly increasing.
    pub fn push(&mut self, mut event: Event) -> Result<Event> {
        if !(event.time.is_finite() && event.time >= 0.0) {
            return Err(precondition(format!(
                "event time must be finite and >= 0, got {}",
                event.time
            )));
        }
        if let Some(last) = self.events.last() {
            if event.time < last.time {
                return Err(precondition(format!(
                    "event at t={} precedes the last event at t={}",
                    event.time, last.time
                )));
            }
            if event.time == last.time {
                log::warn!(
                    "simultaneous events at t={}; shifting the later one by {TIE_EPSILON}",
                    event.time
                );
                event.time = last.time + TIE_EPSILON;
            }
        }
        if event.time > self.horizon {
            return Err(precondition(format!(
                "event at t={} lies beyond the horizon {}",
                event.time, self.horizon
            )));
        }
        self.events.push(event);
        Ok(event)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = &Event> + '_ {
        self.events.iter().filter(|e| e.kind == EventKind::Action)
    }

    pub fn feedbacks(&self) -> impl Iterator<Item = &Event> + '_ {
        self.events.iter().filter(|e| e.kind == EventKind::Feedback)
    }

    pub fn action_count(&self) -> usize {
        self.actions().count()
    }
}

/// One piece `λ(t) = c·exp(w·(t − t_ref))` of a piecewise-exponential intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensitySegment {
    pub c: f64,
    pub w: f64,
    pub t_ref: f64,
}

impl IntensitySegment {
    pub fn new(c: f64, w: f64, t_ref: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(precondition(format!(
                "segment level must be positive and finite, got {c}"
            )));
        }
        if !w.is_finite() || !(t_ref.is_finite() && t_ref >= 0.0) {
            return Err(precondition(format!(
                "invalid segment slope {w} or reference time {t_ref}"
            )));
        }
        Ok(Self { c, w, t_ref })
    }

    pub fn homogeneous(rate: f64, t_ref: f64) -> Result<Self> {
        Self::new(rate, 0.0, t_ref)
    }

    pub fn at(&self, t: f64) -> f64 {
        self.c * (self.w * (t - self.t_ref)).exp()
    }

    /// The same intensity re-expressed with reference time `t_ref`.
    pub fn rebased(&self, t_ref: f64) -> Self {
        Self {
            c: self.at(t_ref),
            w: self.w,
            t_ref,
        }
    }

    pub fn compensator(&self, t0: f64, t1: f64) -> Result<f64> {
        segment_compensator(self, t0, t1)
    }
}

/// `(e^{wΔ} − 1)/w`, continuous through `w = 0`.
pub(crate) fn exp_integral(w: f64, delta: f64) -> f64 {
    let x = w * delta;
    if x.abs() < SMALL_SLOPE {
        delta * (1.0 + 0.5 * x)
    } else {
        x.exp_m1() / w
    }
}

/// `∫_{t0}^{t1} c·e^{w(τ − t_ref)} dτ`.
pub fn segment_compensator(seg: &IntensitySegment, t0: f64, t1: f64) -> Result<f64> {
    if t1 < t0 || t0 < seg.t_ref {
        return Err(precondition(format!(
            "compensator needs t_ref <= t0 <= t1, got t_ref={}, t0={t0}, t1={t1}",
            seg.t_ref
        )));
    }
    Ok(seg.at(t0) * exp_integral(seg.w, t1 - t0))
}

/// Probability vector over a finite mark vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkPmf {
    probs: Vec<f64>,
}

impl MarkPmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(precondition("mark pmf needs at least one entry"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(precondition("mark probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(precondition(format!(
                "mark probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, mark: usize) -> f64 {
        self.probs.get(mark).copied().unwrap_or(0.0)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Log-likelihood of the action events of `history` under a piecewise
/// intensity.
///
/// `segments` are ordered by `t_ref`; segment `k` covers
/// `(t_ref_k, t_ref_{k+1}]` (the first also covers its own start) and the
/// last runs to the horizon. An action sitting on a boundary is therefore
/// scored by the segment that ends there, i.e. by the left limit of λ.
/// When `mark_pmfs` is given it holds one pmf per action. A realized mark
/// with probability zero yields `-inf`.
pub fn episode_log_likelihood(
    history: &EpisodeHistory,
    segments: &[IntensitySegment],
    mark_pmfs: Option<&[MarkPmf]>,
) -> Result<f64> {
    let horizon = history.horizon();
    let first = segments.first().ok_or(Error::Coverage { time: 0.0 })?;
    if first.t_ref != 0.0 {
        return Err(Error::Coverage { time: 0.0 });
    }
    if segments.windows(2).any(|w| w[1].t_ref <= w[0].t_ref) {
        return Err(precondition(
            "segments must have strictly increasing reference times",
        ));
    }
    if segments.last().map_or(false, |s| s.t_ref > horizon) {
        return Err(precondition("a segment starts beyond the horizon"));
    }

    let end_of = |k: usize| segments.get(k + 1).map_or(horizon, |s| s.t_ref);
    let mut compensator = 0.0;
    for (k, seg) in segments.iter().enumerate() {
        compensator += segment_compensator(seg, seg.t_ref, end_of(k))?;
    }

    let actions: Vec<&Event> = history.actions().collect();
    if let Some(pmfs) = mark_pmfs {
        if pmfs.len() != actions.len() {
            return Err(precondition(format!(
                "{} mark pmfs supplied for {} actions",
                pmfs.len(),
                actions.len()
            )));
        }
    }

    let mut log_intensity = 0.0;
    let mut log_marks = 0.0;
    let mut k = 0;
    for (i, action) in actions.iter().enumerate() {
        let t = action.time;
        // Advance to the segment whose interval (t_ref, end] contains t.
        while k + 1 < segments.len() && t > end_of(k) {
            k += 1;
        }
        let seg = &segments[k];
        let covered = t <= end_of(k) && (t > seg.t_ref || (k == 0 && t >= seg.t_ref));
        if !covered {
            return Err(Error::Coverage { time: t });
        }
        log_intensity += seg.c.ln() + seg.w * (t - seg.t_ref);
        if let Some(pmfs) = mark_pmfs {
            let mark = action.mark.ok_or_else(|| {
                precondition(format!("action at t={t} has no mark but pmfs were given"))
            })?;
            log_marks += pmfs[i].prob(mark).ln();
        }
    }
    Ok(log_intensity + log_marks - compensator)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson with 2·10⁴ panels, used as an independent reference.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
        }
        s * h / 3.0
    }

    #[test]
    fn homogeneous_compensator() {
        let seg = IntensitySegment::new(2.0, 0.0, 0.0).unwrap();
        assert_eq!(segment_compensator(&seg, 0.0, 3.0).unwrap(), 6.0);
    }

    #[test]
    fn exponential_compensator_matches_quadrature() {
        let seg = IntensitySegment::new(1.0, 1.0, 0.0).unwrap();
        let quad = simpson(|t| seg.at(t), 0.0, 1.0);
        let got = segment_compensator(&seg, 0.0, 1.0).unwrap();
        assert!((quad - (std::f64::consts::E - 1.0)).abs() < 1e-10);
        assert!((got - quad).abs() < 1e-10, "{got} vs {quad}");
    }

    #[test]
    fn empty_interval_has_zero_mass() {
        let seg = IntensitySegment::new(3.5, -0.7, 1.0).unwrap();
        assert_eq!(segment_compensator(&seg, 2.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn compensator_rejects_bad_intervals() {
        let seg = IntensitySegment::new(1.0, 0.5, 1.0).unwrap();
        assert!(segment_compensator(&seg, 2.0, 1.5).is_err());
        assert!(segment_compensator(&seg, 0.5, 1.5).is_err());
    }

    #[test]
    fn small_slope_branch_is_continuous() {
        let seg_a = IntensitySegment::new(1.3, 1e-10, 0.0).unwrap();
        let seg_b = IntensitySegment::new(1.3, 1e-6, 0.0).unwrap();
        let a = segment_compensator(&seg_a, 0.5, 1.5).unwrap();
        let b = segment_compensator(&seg_b, 0.5, 1.5).unwrap();
        assert!((a - 1.3).abs() < 1e-9);
        assert!((b - 1.3).abs() < 1e-5);
        // Straddling the threshold.
        let w = SMALL_SLOPE * 0.999;
        let below = IntensitySegment::new(2.0, w, 0.0).unwrap();
        let above = IntensitySegment::new(2.0, w * 1.002, 0.0).unwrap();
        let series = |w: f64| 2.0 * (1.0 + w / 2.0 + w * w / 6.0);
        let lo = segment_compensator(&below, 0.0, 1.0).unwrap();
        let hi = segment_compensator(&above, 0.0, 1.0).unwrap();
        assert!((lo - series(below.w)).abs() < 1e-14);
        assert!((hi - series(above.w)).abs() < 1e-14);
    }

    #[test]
    fn likelihood_of_empty_history() {
        let h = EpisodeHistory::new(2.0).unwrap();
        let seg = IntensitySegment::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(episode_log_likelihood(&h, &[seg], None).unwrap(), -2.0);
    }

    #[test]
    fn likelihood_of_one_action() {
        let h = EpisodeHistory::from_events(2.0, [Event::action(1.0, None)]).unwrap();
        let seg = IntensitySegment::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(episode_log_likelihood(&h, &[seg], None).unwrap(), -2.0);
    }

    #[test]
    fn likelihood_with_mark() {
        let h = EpisodeHistory::from_events(2.0, [Event::action(1.0, Some(2))]).unwrap();
        let seg = IntensitySegment::new(1.0, 0.0, 0.0).unwrap();
        let pmf = MarkPmf::new(vec![0.5, 0.25, 0.25]).unwrap();
        let ll = episode_log_likelihood(&h, &[seg], Some(&[pmf])).unwrap();
        // Quadrature cross-check of the compensator term.
        let comp = simpson(|t| seg.at(t), 0.0, 2.0);
        let expected = -comp + 0.25f64.ln();
        assert!((ll - expected).abs() < 1e-10);
        assert!((ll - (-3.386294)).abs() < 1e-6);
    }

    #[test]
    fn likelihood_zero_mark_probability_is_neg_infinity() {
        let h = EpisodeHistory::from_events(2.0, [Event::action(1.0, Some(1))]).unwrap();
        let seg = IntensitySegment::new(1.0, 0.0, 0.0).unwrap();
        let pmf = MarkPmf::new(vec![1.0, 0.0]).unwrap();
        let ll = episode_log_likelihood(&h, &[seg], Some(&[pmf])).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn likelihood_uses_left_limit_at_boundaries() {
        // λ = 1 on [0,1], λ = 3 on (1,2]; the action at t=1 is scored with 1.
        let h = EpisodeHistory::from_events(2.0, [Event::action(1.0, None)]).unwrap();
        let segs = [
            IntensitySegment::new(1.0, 0.0, 0.0).unwrap(),
            IntensitySegment::new(3.0, 0.0, 1.0).unwrap(),
        ];
        let ll = episode_log_likelihood(&h, &segs, None).unwrap();
        assert!((ll - (-4.0)).abs() < 1e-15);
    }

    #[test]
    fn likelihood_coverage_error() {
        let h = EpisodeHistory::from_events(2.0, [Event::action(0.5, None)]).unwrap();
        let seg = IntensitySegment::new(1.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            episode_log_likelihood(&h, &[seg], None),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn ties_are_perturbed() {
        let mut h = EpisodeHistory::new(5.0).unwrap();
        h.push(Event::action(1.0, None)).unwrap();
        let stored = h.push(Event::feedback(1.0, Some(0))).unwrap();
        assert_eq!(stored.time, 1.0 + TIE_EPSILON);
        assert!(h.push(Event::feedback(0.5, None)).is_err());
        assert!(h.push(Event::feedback(6.0, None)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn compensator_is_additive(
                c in 0.01f64..10.0,
                w in -3.0f64..3.0,
                t0 in 0.0f64..2.0,
                len in 0.0f64..3.0,
                frac in 0.0f64..1.0,
            ) {
                let seg = IntensitySegment::new(c, w, 0.0).unwrap();
                let t1 = t0 + len;
                let m = t0 + frac * len;
                let whole = segment_compensator(&seg, t0, t1).unwrap();
                let parts = segment_compensator(&seg, t0, m).unwrap()
                    + segment_compensator(&seg, m, t1).unwrap();
                prop_assert!((whole - parts).abs() <= 1e-10 * whole.abs().max(1e-300));
            }

            #[test]
            fn compensator_is_monotone_in_upper_limit(
                c in 0.01f64..10.0,
                w in -3.0f64..3.0,
                a in 0.0f64..3.0,
                b in 0.0f64..3.0,
            ) {
                let seg = IntensitySegment::new(c, w, 0.0).unwrap();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let x = segment_compensator(&seg, 0.0, lo).unwrap();
                let y = segment_compensator(&seg, 0.0, hi).unwrap();
                prop_assert!(x >= 0.0);
                prop_assert!(y >= x);
            }

            #[test]
            fn histories_stay_strictly_ordered(times in proptest::collection::vec(0.0f64..10.0, 0..40)) {
                let mut sorted = times.clone();
                sorted.sort_by(f64::total_cmp);
                // Duplicate a few entries to force ties.
                let mut with_ties = Vec::new();
                for (i, t) in sorted.iter().enumerate() {
                    with_ties.push(*t);
                    if i % 5 == 0 { with_ties.push(*t); }
                }
                let h = EpisodeHistory::from_events(
                    20.0,
                    with_ties.iter().map(|&t| Event::feedback(t, None)),
                ).unwrap();
                prop_assert!(h.events().windows(2).all(|w| w[1].time > w[0].time));
            }
        }
    }
}
