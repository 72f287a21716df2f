//! Finite-difference verification of [`episode_backward`].
//!
//! The objectives are recomputed by a deliberately naive forward pass that
//! shares no code with the policy's cached forward/backward machinery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mtpp::{EpisodeHistory, Event, EventKind};
use crate::policy::{
    episode_backward, InitConfig, PolicyParams, PolicyShape, RegularizerSpec, Tensor,
};

/// Episode objectives recomputed from the parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceObjectives {
    pub log_likelihood: f64,
    pub intensity_sq: f64,
    pub entropy: f64,
}

fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| (0..cols).map(|c| m[r * cols + c] * x[c]).sum())
        .collect()
}

/// `∫₀^Δ e^{a s} ds`.
fn integral_exp(a: f64, delta: f64) -> f64 {
    if a == 0.0 {
        delta
    } else {
        (a * delta).exp_m1() / a
    }
}

/// Evaluates log-likelihood, `∫λ²` and `∫H` straight from the definitions.
pub fn reference_objectives(
    params: &PolicyParams,
    history: &EpisodeHistory,
) -> ReferenceObjectives {
    let shape = params.shape();
    let (di, dh) = (shape.input_dim, shape.hidden_dim);
    let t = |name: Tensor| params.tensor(name);
    let w = t(Tensor::TimeSlope)[0];

    let level = |h: &[f64]| {
        t(Tensor::IntensityBias)[0]
            + t(Tensor::IntensityWeight)
                .iter()
                .zip(h)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    };
    let pmf = |h: &[f64]| -> Vec<f64> {
        let ny = shape.action_marks.unwrap_or(0);
        let logits = matvec(t(Tensor::MarkHead), ny, h);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / z).collect()
    };

    let mut h = vec![0.0; dh];
    let mut prev = 0.0;
    let mut last_action = 0.0;
    let (mut ll, mut sq, mut ent) = (0.0, 0.0, 0.0);
    // (−∫λ, ∫λ², ∫H) over one inter-event interval.
    let interval = |h: &[f64], from: f64, to: f64, last_action: f64| {
        let log_c = level(h) + w * (from - last_action);
        let delta = to - from;
        let entropy = if shape.action_marks.is_some() {
            -pmf(h).iter().map(|p| p * p.ln()).sum::<f64>()
        } else {
            0.0
        };
        (
            -log_c.exp() * integral_exp(w, delta),
            (2.0 * log_c).exp() * integral_exp(2.0 * w, delta),
            entropy * delta,
        )
    };
    let mut add = |(a, b, c): (f64, f64, f64)| {
        ll += a;
        sq += b;
        ent += c;
    };

    for e in history.events() {
        add(interval(&h, prev, e.time, last_action));
        if e.kind == EventKind::Action {
            let mut score = level(&h) + w * (e.time - last_action);
            if let (Some(ny), Some(m)) = (shape.action_marks, e.mark) {
                score += pmf(&h)[m.min(ny - 1)].ln();
            }
            add((score, 0.0, 0.0));
        }
        let dt = e.time - prev;
        let tau: Vec<f64> = (0..di)
            .map(|r| t(Tensor::TimeWeight)[r] * dt + t(Tensor::TimeBias)[r])
            .collect();
        let mut y = vec![0.0; di];
        let mut z = vec![0.0; di];
        match e.kind {
            EventKind::Action => {
                if let (Some(ny), Some(m)) = (shape.action_marks, e.mark) {
                    let col = m.min(ny - 1);
                    for r in 0..di {
                        y[r] = t(Tensor::ActionMarkWeight)[r * ny + col]
                            + t(Tensor::ActionMarkBias)[r];
                    }
                }
            }
            EventKind::Feedback => {
                if let (Some(nz), Some(m)) = (shape.feedback_marks, e.mark) {
                    let col = m.min(nz - 1);
                    for r in 0..di {
                        z[r] = t(Tensor::FeedbackMarkWeight)[r * nz + col]
                            + t(Tensor::FeedbackMarkBias)[r];
                    }
                }
            }
        }
        let kind = if e.kind == EventKind::Action {
            t(Tensor::ActionKind)
        } else {
            t(Tensor::FeedbackKind)
        };
        let b: Vec<f64> = (0..di).map(|r| kind[r] + t(Tensor::KindBias)[r]).collect();
        let terms = [
            matvec(t(Tensor::Recurrent), dh, &h),
            matvec(t(Tensor::TimeInput), dh, &tau),
            matvec(t(Tensor::ActionMarkInput), dh, &y),
            matvec(t(Tensor::FeedbackMarkInput), dh, &z),
            matvec(t(Tensor::KindInput), dh, &b),
        ];
        h = (0..dh)
            .map(|r| (t(Tensor::HiddenBias)[r] + terms.iter().map(|v| v[r]).sum::<f64>()).tanh())
            .collect();
        if e.kind == EventKind::Action {
            last_action = e.time;
        }
        prev = e.time;
    }
    add(interval(&h, prev, history.horizon(), last_action));
    ReferenceObjectives {
        log_likelihood: ll,
        intensity_sq: sq,
        entropy: ent,
    }
}

/// One randomly drawn gradient-check problem.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub params: PolicyParams,
    pub history: EpisodeHistory,
}

/// Draws case `index`: `D_i = D_h = dim`, up to `max_events` events, and
/// cycling through marks on/off and `w_t` frozen/free.
pub fn random_case(seed: u64, index: u64, dim: usize, max_events: usize) -> Result<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let marked = index % 2 == 0;
    let frozen = (index / 2) % 2 == 1;
    let mut shape = PolicyShape::new(dim, dim);
    if marked {
        shape = shape.with_action_marks(3).with_feedback_marks(4);
    }
    let init = InitConfig {
        seed: rng.random(),
        scale: 0.6,
        base_rate: rng.random_range(0.3..2.0),
    };
    let mut params = PolicyParams::init(shape, frozen, &init)?;
    if !frozen {
        params.tensor_mut(Tensor::TimeSlope)[0] = rng.random_range(-0.6..0.6);
    }
    let horizon = 4.0;
    let n = rng.random_range(0..=max_events);
    let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..horizon)).collect();
    times.sort_by(f64::total_cmp);
    let events: Vec<Event> = times
        .into_iter()
        .map(|time| {
            let mark = |rng: &mut ChaCha8Rng, k: usize| marked.then(|| rng.random_range(0..k));
            if rng.random::<bool>() {
                Event::action(time, mark(&mut rng, 3))
            } else {
                Event::feedback(time, mark(&mut rng, 4))
            }
        })
        .collect();
    let history = EpisodeHistory::from_events(horizon, events)?;
    Ok(GradCheckCase { params, history })
}

/// Largest disagreement found in a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cases: usize,
    pub max_rel_error: f64,
    pub worst_case: usize,
    pub worst_tensor: String,
    pub worst_objective: String,
}

/// Denominator floor of the relative error, so that components whose true
/// value is zero are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradients of all three objectives with central
/// differences of step `step` on every free parameter.
pub fn check_case(case: &GradCheckCase, step: f64) -> Result<(f64, Tensor, &'static str)> {
    let spec = RegularizerSpec {
        intensity_sq: true,
        mark_entropy: case.params.shape().action_marks.is_some(),
    };
    let bundle = episode_backward(&case.params, &case.history, spec)?;
    let mut worst = (0.0, Tensor::IntensityBias, "log_likelihood");
    let frozen_index = case.params.freeze_w_t().then(|| case.params.w_t_index());
    for i in 0..case.params.len() {
        let analytic = [
            bundle.grad_log_likelihood[i],
            bundle.grad_intensity_sq[i],
            bundle.grad_entropy[i],
        ];
        if Some(i) == frozen_index {
            let err = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if err > worst.0 {
                worst = (err, Tensor::TimeSlope, "frozen w_t");
            }
            continue;
        }
        let eval = |delta: f64| -> Result<ReferenceObjectives> {
            let mut data = case.params.as_slice().to_vec();
            data[i] += delta;
            let p = PolicyParams::from_flat(
                case.params.shape().clone(),
                case.params.freeze_w_t(),
                data,
            )?;
            Ok(reference_objectives(&p, &case.history))
        };
        let (plus, minus) = (eval(step)?, eval(-step)?);
        let numeric = [
            (plus.log_likelihood - minus.log_likelihood) / (2.0 * step),
            (plus.intensity_sq - minus.intensity_sq) / (2.0 * step),
            (plus.entropy - minus.entropy) / (2.0 * step),
        ];
        let names = ["log_likelihood", "intensity_sq", "entropy"];
        for k in 0..3 {
            if k == 2 && !spec.mark_entropy {
                continue;
            }
            let err = relative_error(analytic[k], numeric[k]);
            if err > worst.0 {
                worst = (err, case.params.tensor_at(i), names[k]);
            }
        }
    }
    Ok(worst)
}

/// Runs `cases` random problems and reports the worst relative error.
pub fn run_grad_check(
    seed: u64,
    cases: usize,
    dim: usize,
    max_events: usize,
    step: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        cases,
        max_rel_error: 0.0,
        worst_case: 0,
        worst_tensor: String::new(),
        worst_objective: String::new(),
    };
    for index in 0..cases {
        let case = random_case(seed, index as u64, dim, max_events)?;
        let (err, tensor, objective) = check_case(&case, step)?;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_case = index;
            report.worst_tensor = tensor.to_string();
            report.worst_objective = objective.to_string();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_matches_backward_values() {
        for index in 0..8 {
            let case = random_case(3, index, 3, 10).unwrap();
            let spec = RegularizerSpec {
                intensity_sq: true,
                mark_entropy: case.params.shape().action_marks.is_some(),
            };
            let b = episode_backward(&case.params, &case.history, spec).unwrap();
            let r = reference_objectives(&case.params, &case.history);
            assert!(
                (b.log_likelihood - r.log_likelihood).abs()
                    < 1e-10 * r.log_likelihood.abs().max(1.0)
            );
            assert!(
                (b.intensity_sq_integral - r.intensity_sq).abs() < 1e-10 * r.intensity_sq.max(1.0)
            );
            assert!((b.entropy_integral - r.entropy).abs() < 1e-10 * r.entropy.max(1.0));
        }
    }

    #[test]
    fn cases_cover_all_variants() {
        let kinds: Vec<(bool, bool)> = (0..4)
            .map(|i| {
                let c = random_case(1, i, 3, 10).unwrap();
                (
                    c.params.shape().action_marks.is_some(),
                    c.params.freeze_w_t(),
                )
            })
            .collect();
        assert_eq!(
            kinds,
            vec![(true, false), (false, false), (true, true), (false, true)]
        );
    }

    #[test]
    fn small_check_passes() {
        let report = run_grad_check(11, 6, 3, 10, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
