//! Recurrent point-process policy.
//!
//! Each event (action or feedback) is embedded and folded into a hidden
//! state with a tanh recurrence. From the hidden state the policy reads off
//! an exponential intensity `λ(t) = exp(b_λ + V_λ·h + w_t·(t − t_last_action))`
//! and, when marks are enabled, a softmax over action marks.
//!
//! All trainable tensors live in one flat buffer so that the optimizer, the
//! checkpoint format and finite-difference checks can treat the parameter
//! set as a single vector. [`Tensor`] names the slices.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::mtpp::{exp_integral, EpisodeHistory, Event, EventKind, IntensitySegment, MarkPmf};

/// Dimensions of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    /// Width of every input embedding.
    pub input_dim: usize,
    /// Width of the hidden state.
    pub hidden_dim: usize,
    /// Size of the action-mark vocabulary; `None` for a markless policy.
    pub action_marks: Option<usize>,
    /// Size of the feedback-mark vocabulary. Marks beyond the vocabulary are
    /// folded into the last column, which callers reserve for "other".
    pub feedback_marks: Option<usize>,
}

impl PolicyShape {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            action_marks: None,
            feedback_marks: None,
        }
    }

    pub fn with_action_marks(mut self, n: usize) -> Self {
        self.action_marks = Some(n);
        self
    }

    pub fn with_feedback_marks(mut self, n: usize) -> Self {
        self.feedback_marks = Some(n);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "input and hidden dimensions must be at least 1".into(),
            ));
        }
        if self.action_marks == Some(0) || self.feedback_marks == Some(0) {
            return Err(Error::Config(
                "mark vocabularies must be non-empty when enabled".into(),
            ));
        }
        Ok(())
    }

    /// Number of elements in `tensor`.
    pub fn len_of(&self, tensor: Tensor) -> usize {
        let di = self.input_dim;
        let dh = self.hidden_dim;
        let ny = self.action_marks.unwrap_or(0);
        let nz = self.feedback_marks.unwrap_or(0);
        let has_y = usize::from(ny > 0);
        let has_z = usize::from(nz > 0);
        match tensor {
            Tensor::TimeWeight | Tensor::TimeBias => di,
            Tensor::ActionMarkWeight => di * ny,
            Tensor::ActionMarkBias => di * has_y,
            Tensor::FeedbackMarkWeight => di * nz,
            Tensor::FeedbackMarkBias => di * has_z,
            Tensor::ActionKind | Tensor::FeedbackKind | Tensor::KindBias => di,
            Tensor::Recurrent => dh * dh,
            Tensor::TimeInput
            | Tensor::ActionMarkInput
            | Tensor::FeedbackMarkInput
            | Tensor::KindInput => dh * di,
            Tensor::HiddenBias => dh,
            Tensor::IntensityWeight => dh,
            Tensor::IntensityBias | Tensor::TimeSlope => 1,
            Tensor::MarkHead => ny * dh,
        }
    }

    /// Offsets of every tensor inside the flat buffer, plus the total length.
    fn layout(&self) -> ([usize; Tensor::COUNT], usize) {
        let mut offsets = [0; Tensor::COUNT];
        let mut at = 0;
        for t in Tensor::ALL {
            offsets[t as usize] = at;
            at += self.len_of(t);
        }
        (offsets, at)
    }

    pub fn param_count(&self) -> usize {
        self.layout().1
    }

    fn feedback_column(&self, mark: usize) -> usize {
        let n = self.feedback_marks.unwrap_or(1);
        mark.min(n - 1)
    }
}

/// Named slices of the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    TimeWeight,
    TimeBias,
    ActionMarkWeight,
    ActionMarkBias,
    FeedbackMarkWeight,
    FeedbackMarkBias,
    ActionKind,
    FeedbackKind,
    KindBias,
    Recurrent,
    TimeInput,
    ActionMarkInput,
    FeedbackMarkInput,
    KindInput,
    HiddenBias,
    IntensityWeight,
    IntensityBias,
    TimeSlope,
    MarkHead,
}

impl Tensor {
    pub const COUNT: usize = 19;
    pub const ALL: [Tensor; Tensor::COUNT] = [
        Tensor::TimeWeight,
        Tensor::TimeBias,
        Tensor::ActionMarkWeight,
        Tensor::ActionMarkBias,
        Tensor::FeedbackMarkWeight,
        Tensor::FeedbackMarkBias,
        Tensor::ActionKind,
        Tensor::FeedbackKind,
        Tensor::KindBias,
        Tensor::Recurrent,
        Tensor::TimeInput,
        Tensor::ActionMarkInput,
        Tensor::FeedbackMarkInput,
        Tensor::KindInput,
        Tensor::HiddenBias,
        Tensor::IntensityWeight,
        Tensor::IntensityBias,
        Tensor::TimeSlope,
        Tensor::MarkHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::TimeWeight => "W_t",
            Tensor::TimeBias => "b_t",
            Tensor::ActionMarkWeight => "W_y",
            Tensor::ActionMarkBias => "b_y",
            Tensor::FeedbackMarkWeight => "W_z",
            Tensor::FeedbackMarkBias => "b_z",
            Tensor::ActionKind => "W_a",
            Tensor::FeedbackKind => "W_f",
            Tensor::KindBias => "b_b",
            Tensor::Recurrent => "W_h",
            Tensor::TimeInput => "W_1",
            Tensor::ActionMarkInput => "W_2",
            Tensor::FeedbackMarkInput => "W_3",
            Tensor::KindInput => "W_4",
            Tensor::HiddenBias => "b_h",
            Tensor::IntensityWeight => "V_lambda",
            Tensor::IntensityBias => "b_lambda",
            Tensor::TimeSlope => "w_t",
            Tensor::MarkHead => "V_y",
        }
    }

    pub fn from_name(name: &str) -> Option<Tensor> {
        Tensor::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initialization settings for [`PolicyParams::init`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub seed: u64,
    /// Weights are drawn uniformly from `[-scale, scale]`.
    pub scale: f64,
    /// `b_λ` starts at `ln(base_rate)`.
    pub base_rate: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.1,
            base_rate: 1.0,
        }
    }
}

/// All trainable parameters of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    freeze_w_t: bool,
    offsets: [usize; Tensor::COUNT],
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape, freeze_w_t: bool) -> Result<Self> {
        shape.validate()?;
        let (offsets, len) = shape.layout();
        Ok(Self {
            shape,
            freeze_w_t,
            offsets,
            data: vec![0.0; len],
        })
    }

    /// Uniform `[-scale, scale]` weights from a seeded generator, with the
    /// intensity bias anchored at `ln(base_rate)`.
    pub fn init(shape: PolicyShape, freeze_w_t: bool, cfg: &InitConfig) -> Result<Self> {
        if !(cfg.base_rate > 0.0 && cfg.base_rate.is_finite()) {
            return Err(Error::Config(format!(
                "base rate must be positive, got {}",
                cfg.base_rate
            )));
        }
        if !(cfg.scale >= 0.0 && cfg.scale.is_finite()) {
            return Err(Error::Config(format!(
                "init scale must be >= 0, got {}",
                cfg.scale
            )));
        }
        let mut params = Self::zeros(shape, freeze_w_t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for x in params.data.iter_mut() {
            let u: f64 = rng.random();
            *x = cfg.scale * (2.0 * u - 1.0);
        }
        params.tensor_mut(Tensor::IntensityBias)[0] = cfg.base_rate.ln();
        if freeze_w_t {
            params.tensor_mut(Tensor::TimeSlope)[0] = 0.0;
        }
        Ok(params)
    }

    /// Rebuilds parameters from a flat buffer laid out as [`Tensor::ALL`].
    pub fn from_flat(shape: PolicyShape, freeze_w_t: bool, data: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(shape, freeze_w_t)?;
        if data.len() != params.data.len() {
            return Err(precondition(format!(
                "expected {} parameters, got {}",
                params.data.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericalOverflow {
                tensor: params.tensor_at(i).to_string(),
            });
        }
        params.data = data;
        if freeze_w_t && params.w_t() != 0.0 {
            return Err(precondition("w_t must be exactly zero when frozen"));
        }
        Ok(params)
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn freeze_w_t(&self) -> bool {
        self.freeze_w_t
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let start = self.offsets[t as usize];
        start..start + self.shape.len_of(t)
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.range(t);
        &mut self.data[r]
    }

    /// Which tensor owns flat index `i`.
    pub fn tensor_at(&self, i: usize) -> Tensor {
        Tensor::ALL
            .into_iter()
            .rev()
            .find(|&t| self.offsets[t as usize] <= i && self.shape.len_of(t) > 0)
            .unwrap_or(Tensor::TimeWeight)
    }

    pub fn w_t(&self) -> f64 {
        self.tensor(Tensor::TimeSlope)[0]
    }

    pub fn b_lambda(&self) -> f64 {
        self.tensor(Tensor::IntensityBias)[0]
    }

    /// Flat index of `w_t`.
    pub fn w_t_index(&self) -> usize {
        self.offsets[Tensor::TimeSlope as usize]
    }

    /// Adds `step` to the parameters, keeping a frozen `w_t` at zero.
    pub fn add_scaled(&mut self, step: &[f64], scale: f64) -> Result<()> {
        if step.len() != self.data.len() {
            return Err(precondition("update length does not match parameter count"));
        }
        for (x, d) in self.data.iter_mut().zip(step) {
            *x += scale * d;
        }
        if self.freeze_w_t {
            let i = self.w_t_index();
            self.data[i] = 0.0;
        }
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NumericalOverflow {
                tensor: self.tensor_at(i).to_string(),
            }),
            None => Ok(()),
        }
    }

    pub fn initial_state(&self) -> HiddenState {
        HiddenState {
            h: vec![0.0; self.shape.hidden_dim],
            t_last_action: 0.0,
        }
    }
}

/// Recurrent embedding after the most recent event.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    /// Reference time of the `w_t` term: the latest action (0 before any).
    pub t_last_action: f64,
}

/// Input-layer embeddings of one event.
#[derive(Debug, Clone, Default)]
struct Embedding {
    tau: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    b: Vec<f64>,
}

fn embed(params: &PolicyParams, event: &Event, dt: f64) -> Embedding {
    let shape = &params.shape;
    let di = shape.input_dim;
    let wt = params.tensor(Tensor::TimeWeight);
    let bt = params.tensor(Tensor::TimeBias);
    let tau = (0..di).map(|r| wt[r] * dt + bt[r]).collect();

    let mut y = vec![0.0; di];
    let mut z = vec![0.0; di];
    match (event.kind, event.mark) {
        (EventKind::Action, Some(m)) if shape.action_marks.is_some() => {
            let ny = shape.action_marks.unwrap_or(0);
            let w = params.tensor(Tensor::ActionMarkWeight);
            let b = params.tensor(Tensor::ActionMarkBias);
            let m = m.min(ny - 1);
            for r in 0..di {
                y[r] = w[r * ny + m] + b[r];
            }
        }
        (EventKind::Feedback, Some(m)) if shape.feedback_marks.is_some() => {
            let nz = shape.feedback_marks.unwrap_or(0);
            let col = shape.feedback_column(m);
            let w = params.tensor(Tensor::FeedbackMarkWeight);
            let b = params.tensor(Tensor::FeedbackMarkBias);
            for r in 0..di {
                z[r] = w[r * nz + col] + b[r];
            }
        }
        // Absent marks embed to the zero vector.
        _ => {}
    }

    let kind = match event.kind {
        EventKind::Action => params.tensor(Tensor::ActionKind),
        EventKind::Feedback => params.tensor(Tensor::FeedbackKind),
    };
    let bb = params.tensor(Tensor::KindBias);
    let b = (0..di).map(|r| kind[r] + bb[r]).collect();
    Embedding { tau, y, z, b }
}

/// `out += M·x` for a row-major `rows × x.len()` matrix.
fn mat_vec_acc(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ·g` for a row-major `g.len() × out.len()` matrix.
fn mat_t_vec_acc(out: &mut [f64], m: &[f64], g: &[f64]) {
    let cols = out.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += gr * a;
        }
    }
}

/// `M += g ⊗ x`.
fn outer_acc(m: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        let row = &mut m[r * cols..(r + 1) * cols];
        for (a, xv) in row.iter_mut().zip(x) {
            *a += gr * xv;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn hidden_update(params: &PolicyParams, h: &[f64], emb: &Embedding) -> Vec<f64> {
    let mut pre = params.tensor(Tensor::HiddenBias).to_vec();
    mat_vec_acc(&mut pre, params.tensor(Tensor::Recurrent), h);
    mat_vec_acc(&mut pre, params.tensor(Tensor::TimeInput), &emb.tau);
    mat_vec_acc(&mut pre, params.tensor(Tensor::ActionMarkInput), &emb.y);
    mat_vec_acc(&mut pre, params.tensor(Tensor::FeedbackMarkInput), &emb.z);
    mat_vec_acc(&mut pre, params.tensor(Tensor::KindInput), &emb.b);
    pre.iter_mut().for_each(|x| *x = x.tanh());
    pre
}

/// Folds one event into the hidden state.
pub fn step_hidden(
    params: &PolicyParams,
    state: &HiddenState,
    event: &Event,
    prev_time: f64,
) -> Result<HiddenState> {
    if event.time < prev_time {
        return Err(precondition(format!(
            "event at t={} precedes the previous event at t={prev_time}",
            event.time
        )));
    }
    let emb = embed(params, event, event.time - prev_time);
    let h = hidden_update(params, &state.h, &emb);
    let t_last_action = if event.is_action() {
        event.time
    } else {
        state.t_last_action
    };
    Ok(HiddenState { h, t_last_action })
}

fn log_level(params: &PolicyParams, h: &[f64]) -> f64 {
    params.b_lambda() + dot(params.tensor(Tensor::IntensityWeight), h)
}

/// The current intensity piece, rebased so that its reference time is `at_time`.
pub fn intensity_segment(
    params: &PolicyParams,
    state: &HiddenState,
    at_time: f64,
) -> Result<IntensitySegment> {
    if at_time < state.t_last_action {
        return Err(precondition(format!(
            "query time {at_time} precedes the last action at {}",
            state.t_last_action
        )));
    }
    let w = params.w_t();
    let log_c = log_level(params, &state.h) + w * (at_time - state.t_last_action);
    let c = log_c.exp();
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::NumericalOverflow {
            tensor: Tensor::IntensityBias.to_string(),
        });
    }
    IntensitySegment::new(c, w, at_time)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

fn mark_logits(params: &PolicyParams, h: &[f64]) -> Vec<f64> {
    let ny = params.shape.action_marks.unwrap_or(0);
    let mut logits = vec![0.0; ny];
    mat_vec_acc(&mut logits, params.tensor(Tensor::MarkHead), h);
    logits
}

/// Softmax distribution over the next action's mark.
pub fn mark_pmf(params: &PolicyParams, state: &HiddenState) -> Result<MarkPmf> {
    if params.shape.action_marks.is_none() {
        return Err(Error::Config(
            "mark head queried on a markless policy".into(),
        ));
    }
    let p = softmax(&mark_logits(params, &state.h));
    // Renormalize away rounding so the pmf invariant holds exactly.
    MarkPmf::new(p).or_else(|_| {
        Err(Error::NumericalOverflow {
            tensor: Tensor::MarkHead.to_string(),
        })
    })
}

/// Which regularizer integrals [`episode_backward`] should differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegularizerSpec {
    /// `∫ λ(t)² dt`.
    pub intensity_sq: bool,
    /// `∫ H(m(t)) dt`; requires action marks.
    pub mark_entropy: bool,
}

impl RegularizerSpec {
    pub fn all() -> Self {
        Self {
            intensity_sq: true,
            mark_entropy: true,
        }
    }
}

/// Values and parameter gradients of one episode's log-likelihood and
/// regularizer integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub log_likelihood: f64,
    pub intensity_sq_integral: f64,
    pub entropy_integral: f64,
    pub grad_log_likelihood: Vec<f64>,
    pub grad_intensity_sq: Vec<f64>,
    pub grad_entropy: Vec<f64>,
}

/// Forward pass over an episode, keeping what the reverse pass needs.
struct ForwardCache {
    /// `states[k]` is the hidden vector after `k` events (`states[0] = 0`).
    states: Vec<Vec<f64>>,
    embeddings: Vec<Embedding>,
    /// Start of interval `k` (0 for `k = 0`, else the `k`-th event time).
    starts: Vec<f64>,
    /// Length of interval `k`.
    lengths: Vec<f64>,
    /// `t_k − t_last_action` at the start of interval `k`.
    ages: Vec<f64>,
    /// `ln c_k`.
    log_levels: Vec<f64>,
    /// Mark pmfs per interval (empty when markless).
    pmfs: Vec<Vec<f64>>,
}

fn forward(params: &PolicyParams, history: &EpisodeHistory) -> Result<ForwardCache> {
    let events = history.events();
    let n = events.len();
    let marked = params.shape.action_marks.is_some();
    let mut states = Vec::with_capacity(n + 1);
    let mut embeddings = Vec::with_capacity(n);
    let mut starts = Vec::with_capacity(n + 1);
    let mut ages = Vec::with_capacity(n + 1);

    let mut h = vec![0.0; params.shape.hidden_dim];
    let mut prev = 0.0;
    let mut last_action = 0.0;
    states.push(h.clone());
    starts.push(0.0);
    ages.push(0.0);
    for event in events {
        if event.time < prev {
            return Err(precondition("history is not time ordered"));
        }
        let emb = embed(params, event, event.time - prev);
        h = hidden_update(params, &h, &emb);
        embeddings.push(emb);
        states.push(h.clone());
        if event.is_action() {
            last_action = event.time;
        }
        prev = event.time;
        starts.push(event.time);
        ages.push(event.time - last_action);
    }
    let lengths: Vec<f64> = (0..=n)
        .map(|k| starts.get(k + 1).copied().unwrap_or(history.horizon()) - starts[k])
        .collect();
    if lengths.iter().any(|d| *d < 0.0) {
        return Err(precondition("an event lies beyond the horizon"));
    }
    let w = params.w_t();
    let log_levels = (0..=n)
        .map(|k| log_level(params, &states[k]) + w * ages[k])
        .collect();
    let pmfs = if marked {
        states
            .iter()
            .map(|s| softmax(&mark_logits(params, s)))
            .collect()
    } else {
        Vec::new()
    };
    Ok(ForwardCache {
        states,
        embeddings,
        starts,
        lengths,
        ages,
        log_levels,
        pmfs,
    })
}

/// `∂/∂w (e^{wΔ} − 1)/w`, accurate near `w = 0`.
fn exp_integral_dw(w: f64, delta: f64) -> f64 {
    let x = w * delta;
    if x.abs() < 0.5 {
        // Δ² Σ_{n≥0} xⁿ (n+1)/(n+2)!
        let mut term = 0.5; // (n+1)/(n+2)! at n = 0
        let mut sum = 0.0;
        let mut xn = 1.0;
        for n in 0..30u32 {
            sum += term * xn;
            xn *= x;
            let n = n as f64;
            term *= (n + 2.0) / ((n + 1.0) * (n + 3.0));
        }
        delta * delta * sum
    } else {
        let e = x.exp();
        (delta * w * e - (e - 1.0)) / (w * w)
    }
}

/// Per-interval adjoints seeding one reverse pass.
struct Seeds {
    /// `∂F/∂ln c_k`.
    level: Vec<f64>,
    /// `∂F/∂logits_k` (empty when markless).
    logits: Vec<Vec<f64>>,
    /// Direct `∂F/∂w_t` not routed through `ln c_k`.
    slope: f64,
}

fn backprop(
    params: &PolicyParams,
    history: &EpisodeHistory,
    cache: &ForwardCache,
    seeds: &Seeds,
) -> Vec<f64> {
    let shape = params.shape;
    let di = shape.input_dim;
    let dh = shape.hidden_dim;
    let ny = shape.action_marks.unwrap_or(0);
    let nz = shape.feedback_marks.unwrap_or(0);
    let mut grad = vec![0.0; params.data.len()];
    let r = |t: Tensor| params.range(t);

    let v_lambda = params.tensor(Tensor::IntensityWeight);
    let v_y = params.tensor(Tensor::MarkHead);
    let n = cache.states.len() - 1;

    grad[params.w_t_index()] += seeds.slope;
    let mut dh_next = vec![0.0; dh];
    for k in (0..=n).rev() {
        // Output heads read h_k.
        let gs = seeds.level[k];
        let h = &cache.states[k];
        let mut dh_k = std::mem::take(&mut dh_next);
        if dh_k.is_empty() {
            dh_k = vec![0.0; dh];
        }
        if gs != 0.0 {
            grad[r(Tensor::IntensityBias).start] += gs;
            grad[params.w_t_index()] += gs * cache.ages[k];
            for (g, hv) in grad[r(Tensor::IntensityWeight)].iter_mut().zip(h) {
                *g += gs * hv;
            }
            for (d, v) in dh_k.iter_mut().zip(v_lambda) {
                *d += gs * v;
            }
        }
        if ny > 0 {
            let gz = &seeds.logits[k];
            outer_acc(&mut grad[r(Tensor::MarkHead)], gz, h);
            mat_t_vec_acc(&mut dh_k, v_y, gz);
        }
        if k == 0 {
            break;
        }

        // Through h_k = tanh(pre_k).
        let dpre: Vec<f64> = dh_k
            .iter()
            .zip(h)
            .map(|(d, hv)| d * (1.0 - hv * hv))
            .collect();
        let h_prev = &cache.states[k - 1];
        let emb = &cache.embeddings[k - 1];
        let event = &history.events()[k - 1];
        outer_acc(&mut grad[r(Tensor::Recurrent)], &dpre, h_prev);
        outer_acc(&mut grad[r(Tensor::TimeInput)], &dpre, &emb.tau);
        outer_acc(&mut grad[r(Tensor::ActionMarkInput)], &dpre, &emb.y);
        outer_acc(&mut grad[r(Tensor::FeedbackMarkInput)], &dpre, &emb.z);
        outer_acc(&mut grad[r(Tensor::KindInput)], &dpre, &emb.b);
        for (g, d) in grad[r(Tensor::HiddenBias)].iter_mut().zip(&dpre) {
            *g += d;
        }

        let back = |tensor: Tensor| {
            let mut v = vec![0.0; di];
            mat_t_vec_acc(&mut v, params.tensor(tensor), &dpre);
            v
        };
        let d_tau = back(Tensor::TimeInput);
        let d_y = back(Tensor::ActionMarkInput);
        let d_z = back(Tensor::FeedbackMarkInput);
        let d_b = back(Tensor::KindInput);

        let dt = cache.starts[k] - cache.starts[k - 1];
        for i in 0..di {
            grad[r(Tensor::TimeWeight).start + i] += d_tau[i] * dt;
            grad[r(Tensor::TimeBias).start + i] += d_tau[i];
            grad[r(Tensor::KindBias).start + i] += d_b[i];
        }
        let kind = if event.is_action() {
            Tensor::ActionKind
        } else {
            Tensor::FeedbackKind
        };
        for i in 0..di {
            grad[r(kind).start + i] += d_b[i];
        }
        match (event.kind, event.mark) {
            (EventKind::Action, Some(m)) if ny > 0 => {
                let m = m.min(ny - 1);
                for i in 0..di {
                    grad[r(Tensor::ActionMarkWeight).start + i * ny + m] += d_y[i];
                    grad[r(Tensor::ActionMarkBias).start + i] += d_y[i];
                }
            }
            (EventKind::Feedback, Some(m)) if nz > 0 => {
                let col = shape.feedback_column(m);
                for i in 0..di {
                    grad[r(Tensor::FeedbackMarkWeight).start + i * nz + col] += d_z[i];
                    grad[r(Tensor::FeedbackMarkBias).start + i] += d_z[i];
                }
            }
            _ => {}
        }

        let mut dh_prev = vec![0.0; dh];
        mat_t_vec_acc(&mut dh_prev, params.tensor(Tensor::Recurrent), &dpre);
        dh_next = dh_prev;
    }
    if params.freeze_w_t {
        grad[params.w_t_index()] = 0.0;
    }
    grad
}

fn check_gradient(params: &PolicyParams, grad: &[f64]) -> Result<()> {
    match grad.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NumericalOverflow {
            tensor: params.tensor_at(i).to_string(),
        }),
        None => Ok(()),
    }
}

/// Exact gradients of the episode log-likelihood and the regularizer
/// integrals by one reverse pass through the recurrence.
///
/// Between consecutive events (of either kind) the intensity is a single
/// exponential piece, so compensators and `∫λ²` are closed forms; the mark
/// distribution is constant between events, so `∫H` is a sum of
/// `H·Δ` terms.
pub fn episode_backward(
    params: &PolicyParams,
    history: &EpisodeHistory,
    spec: RegularizerSpec,
) -> Result<GradientBundle> {
    let marked = params.shape.action_marks.is_some();
    if spec.mark_entropy && !marked {
        return Err(Error::Config(
            "entropy regularizer requested on a markless policy".into(),
        ));
    }
    let cache = forward(params, history)?;
    let n = cache.states.len() - 1;
    let events = history.events();
    let w = params.w_t();
    let ny = params.shape.action_marks.unwrap_or(0);
    let zero_logits = || {
        if marked {
            vec![vec![0.0; ny]; n + 1]
        } else {
            Vec::new()
        }
    };

    // Log-likelihood.
    let mut ll = 0.0;
    let mut ll_seeds = Seeds {
        level: vec![0.0; n + 1],
        logits: zero_logits(),
        slope: 0.0,
    };
    for k in 0..=n {
        let delta = cache.lengths[k];
        let c = cache.log_levels[k].exp();
        let mass = c * exp_integral(w, delta);
        ll -= mass;
        ll_seeds.level[k] -= mass;
        ll_seeds.slope -= c * exp_integral_dw(w, delta);
        if k < n && events[k].is_action() {
            ll += cache.log_levels[k] + w * delta;
            ll_seeds.level[k] += 1.0;
            ll_seeds.slope += delta;
            if marked {
                let m = events[k]
                    .mark
                    .ok_or_else(|| {
                        precondition(format!("action at t={} has no mark", events[k].time))
                    })?
                    .min(ny - 1);
                let p = &cache.pmfs[k];
                ll += p[m].ln();
                for (j, g) in ll_seeds.logits[k].iter_mut().enumerate() {
                    *g += f64::from(u8::from(j == m)) - p[j];
                }
            }
        }
    }
    if !ll.is_finite() {
        return Err(Error::NumericalOverflow {
            tensor: Tensor::IntensityBias.to_string(),
        });
    }
    let grad_ll = backprop(params, history, &cache, &ll_seeds);
    check_gradient(params, &grad_ll)?;

    let mut sq = 0.0;
    let grad_sq = if spec.intensity_sq {
        let mut seeds = Seeds {
            level: vec![0.0; n + 1],
            logits: zero_logits(),
            slope: 0.0,
        };
        for k in 0..=n {
            let delta = cache.lengths[k];
            let c2 = (2.0 * cache.log_levels[k]).exp();
            let q = c2 * exp_integral(2.0 * w, delta);
            sq += q;
            seeds.level[k] = 2.0 * q;
            seeds.slope += c2 * 2.0 * exp_integral_dw(2.0 * w, delta);
        }
        let g = backprop(params, history, &cache, &seeds);
        check_gradient(params, &g)?;
        g
    } else {
        vec![0.0; params.len()]
    };

    let mut ent = 0.0;
    let grad_ent = if spec.mark_entropy {
        let mut seeds = Seeds {
            level: vec![0.0; n + 1],
            logits: zero_logits(),
            slope: 0.0,
        };
        for k in 0..=n {
            let delta = cache.lengths[k];
            let p = &cache.pmfs[k];
            let hk: f64 = -p
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|x| x * x.ln())
                .sum::<f64>();
            ent += hk * delta;
            for (j, g) in seeds.logits[k].iter_mut().enumerate() {
                let lp = if p[j] > 0.0 { p[j].ln() } else { 0.0 };
                *g = -delta * p[j] * (lp + hk);
            }
        }
        let g = backprop(params, history, &cache, &seeds);
        check_gradient(params, &g)?;
        g
    } else {
        vec![0.0; params.len()]
    };

    Ok(GradientBundle {
        log_likelihood: ll,
        intensity_sq_integral: sq,
        entropy_integral: ent,
        grad_log_likelihood: grad_ll,
        grad_intensity_sq: grad_sq,
        grad_entropy: grad_ent,
    })
}

/// The piecewise intensity a policy assigns to an episode, one segment per
/// inter-event interval; usable with [`crate::mtpp::episode_log_likelihood`].
pub fn intensity_trajectory(
    params: &PolicyParams,
    history: &EpisodeHistory,
) -> Result<Vec<IntensitySegment>> {
    let cache = forward(params, history)?;
    cache
        .log_levels
        .iter()
        .zip(&cache.starts)
        .map(|(l, s)| IntensitySegment::new(l.exp(), params.w_t(), *s))
        .collect()
}

/// The mark pmfs a policy used for each action of an episode.
pub fn action_mark_pmfs(params: &PolicyParams, history: &EpisodeHistory) -> Result<Vec<MarkPmf>> {
    if params.shape.action_marks.is_none() {
        return Err(Error::Config(
            "mark head queried on a markless policy".into(),
        ));
    }
    let cache = forward(params, history)?;
    history
        .events()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_action())
        .map(|(k, _)| MarkPmf::new(cache.pmfs[k].clone()))
        .collect()
}

// Checkpoints ---------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "pointrl-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointTensor {
    name: String,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    shape: PolicyShape,
    freeze_w_t: bool,
    tensors: Vec<CheckpointTensor>,
}

impl PolicyParams {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            shape: self.shape,
            freeze_w_t: self.freeze_w_t,
            tensors: Tensor::ALL
                .into_iter()
                .map(|t| CheckpointTensor {
                    name: t.name().into(),
                    values: self.tensor(t).to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&ckpt)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut params = Self::zeros(ckpt.shape, ckpt.freeze_w_t)?;
        let mut seen = [false; Tensor::COUNT];
        for entry in ckpt.tensors {
            let t = Tensor::from_name(&entry.name)
                .ok_or_else(|| Error::Config(format!("unknown tensor {}", entry.name)))?;
            if entry.values.len() != ckpt.shape.len_of(t) {
                return Err(Error::Config(format!(
                    "tensor {} has the wrong size",
                    entry.name
                )));
            }
            params.tensor_mut(t).copy_from_slice(&entry.values);
            seen[t as usize] = true;
        }
        if let Some(t) = Tensor::ALL.into_iter().find(|t| !seen[*t as usize]) {
            return Err(Error::Config(format!("checkpoint is missing tensor {t}")));
        }
        Self::from_flat(ckpt.shape, ckpt.freeze_w_t, params.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(marks: bool) -> PolicyShape {
        let s = PolicyShape::new(3, 3).with_feedback_marks(4);
        if marks {
            s.with_action_marks(3)
        } else {
            s
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = InitConfig {
            seed: 7,
            scale: 0.1,
            base_rate: 1.0,
        };
        let a = PolicyParams::init(PolicyShape::new(3, 3), false, &cfg).unwrap();
        let b = PolicyParams::init(PolicyShape::new(3, 3), false, &cfg).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_scale_init() {
        let cfg = InitConfig {
            seed: 1,
            scale: 0.0,
            base_rate: 2.5,
        };
        let p = PolicyParams::init(shape(true), false, &cfg).unwrap();
        for t in Tensor::ALL {
            if t == Tensor::IntensityBias {
                assert_eq!(p.tensor(t), &[2.5f64.ln()]);
            } else {
                assert!(p.tensor(t).iter().all(|x| *x == 0.0), "{t}");
            }
        }
    }

    #[test]
    fn reference_shapes() {
        let cfg = InitConfig {
            seed: 1,
            scale: 0.1,
            base_rate: 1.0,
        };
        let p =
            PolicyParams::init(PolicyShape::new(8, 8).with_action_marks(5), false, &cfg).unwrap();
        assert_eq!(p.tensor(Tensor::Recurrent).len(), 64);
        assert_eq!(p.tensor(Tensor::TimeInput).len(), 64);
        assert_eq!(p.tensor(Tensor::TimeWeight).len(), 8);
        assert_eq!(p.tensor(Tensor::IntensityWeight).len(), 8);
        assert_eq!(p.tensor(Tensor::MarkHead).len(), 40);
        assert_eq!(p.tensor(Tensor::ActionMarkWeight).len(), 40);
        assert_eq!(p.tensor(Tensor::FeedbackMarkWeight).len(), 0);
    }

    #[test]
    fn zero_params_keep_zero_state() {
        let p = PolicyParams::zeros(shape(true), true).unwrap();
        let s = p.initial_state();
        let next = step_hidden(&p, &s, &Event::action(1.0, Some(1)), 0.0).unwrap();
        assert!(next.h.iter().all(|x| *x == 0.0));
        assert_eq!(next.t_last_action, 1.0);
        let seg = intensity_segment(&p, &next, 3.0).unwrap();
        assert_eq!((seg.c, seg.w, seg.t_ref), (1.0, 0.0, 3.0));
    }

    #[test]
    fn feedback_keeps_action_reference() {
        let cfg = InitConfig {
            seed: 3,
            scale: 0.3,
            base_rate: 1.0,
        };
        let p = PolicyParams::init(shape(true), false, &cfg).unwrap();
        let s = HiddenState {
            h: vec![0.1, -0.2, 0.3],
            t_last_action: 0.5,
        };
        let next = step_hidden(&p, &s, &Event::feedback(1.0, Some(2)), 0.7).unwrap();
        assert_eq!(next.t_last_action, 0.5);
        assert!(step_hidden(&p, &s, &Event::feedback(0.6, None), 0.7).is_err());
    }

    #[test]
    fn base_rate_sets_level() {
        let mut p = PolicyParams::zeros(PolicyShape::new(2, 2), false).unwrap();
        p.tensor_mut(Tensor::IntensityBias)[0] = 2f64.ln();
        let seg = intensity_segment(&p, &p.initial_state(), 0.0).unwrap();
        assert!((seg.c - 2.0).abs() < 1e-15);
    }

    /// Straight-line evaluation of the layer equations, written independently.
    fn reference_step(p: &PolicyParams, h: &[f64], e: &Event, dt: f64) -> Vec<f64> {
        let di = 3;
        let dh = 3;
        let get = |t: Tensor, i: usize| p.tensor(t)[i];
        let mut out = vec![0.0; dh];
        for r in 0..dh {
            let mut acc = get(Tensor::HiddenBias, r);
            for c in 0..dh {
                acc += get(Tensor::Recurrent, r * dh + c) * h[c];
            }
            for c in 0..di {
                let tau = get(Tensor::TimeWeight, c) * dt + get(Tensor::TimeBias, c);
                let (y, z) = match (e.kind, e.mark) {
                    (EventKind::Action, Some(m)) => (
                        get(Tensor::ActionMarkWeight, c * 3 + m) + get(Tensor::ActionMarkBias, c),
                        0.0,
                    ),
                    (EventKind::Feedback, Some(m)) => (
                        0.0,
                        get(Tensor::FeedbackMarkWeight, c * 4 + m)
                            + get(Tensor::FeedbackMarkBias, c),
                    ),
                    _ => (0.0, 0.0),
                };
                let b = if e.is_action() {
                    get(Tensor::ActionKind, c)
                } else {
                    get(Tensor::FeedbackKind, c)
                } + get(Tensor::KindBias, c);
                acc += get(Tensor::TimeInput, r * di + c) * tau
                    + get(Tensor::ActionMarkInput, r * di + c) * y
                    + get(Tensor::FeedbackMarkInput, r * di + c) * z
                    + get(Tensor::KindInput, r * di + c) * b;
            }
            out[r] = acc.tanh();
        }
        out
    }

    #[test]
    fn step_matches_reference() {
        let cfg = InitConfig {
            seed: 11,
            scale: 0.5,
            base_rate: 1.0,
        };
        let p = PolicyParams::init(shape(true), false, &cfg).unwrap();
        let s = HiddenState {
            h: vec![0.2, -0.4, 0.05],
            t_last_action: 0.0,
        };
        for e in [
            Event::action(1.3, Some(2)),
            Event::feedback(1.3, Some(3)),
            Event::feedback(1.3, None),
        ] {
            let got = step_hidden(&p, &s, &e, 0.4).unwrap();
            let want = reference_step(&p, &s.h, &e, 0.9);
            for (a, b) in got.h.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_matches_direct_formula() {
        let cfg = InitConfig {
            seed: 5,
            scale: 0.5,
            base_rate: 0.7,
        };
        let p = PolicyParams::init(shape(false), false, &cfg).unwrap();
        let s = HiddenState {
            h: vec![0.3, 0.1, -0.6],
            t_last_action: 1.0,
        };
        let seg = intensity_segment(&p, &s, 2.0).unwrap();
        let vl = p.tensor(Tensor::IntensityWeight);
        for probe in [2.0, 2.3, 3.1, 4.7, 9.0] {
            let direct =
                (p.b_lambda() + p.w_t() * (probe - 1.0) + vl[0] * 0.3 + vl[1] * 0.1 + vl[2] * -0.6)
                    .exp();
            assert!((seg.at(probe) - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn pmf_properties() {
        let p = PolicyParams::zeros(shape(true), false).unwrap();
        let s = HiddenState {
            h: vec![0.5, 0.5, 0.5],
            t_last_action: 0.0,
        };
        let pmf = mark_pmf(&p, &s).unwrap();
        assert!(pmf.probs().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        let cfg = InitConfig {
            seed: 9,
            scale: 3.0,
            base_rate: 1.0,
        };
        let p = PolicyParams::init(shape(true), false, &cfg).unwrap();
        let zero = p.initial_state();
        assert!(mark_pmf(&p, &zero)
            .unwrap()
            .probs()
            .iter()
            .all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        let s = HiddenState {
            h: vec![0.9, -0.7, 0.2],
            t_last_action: 0.0,
        };
        let pmf = mark_pmf(&p, &s).unwrap();
        let total: f64 = pmf.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // Log-domain reference.
        let vy = p.tensor(Tensor::MarkHead);
        let logits: Vec<f64> = (0..3)
            .map(|c| (0..3).map(|j| vy[c * 3 + j] * s.h[j]).sum())
            .collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        for (c, l) in logits.iter().enumerate() {
            assert!((pmf.probs()[c] - (l - lse).exp()).abs() < 1e-12);
        }

        let markless = PolicyParams::zeros(shape(false), false).unwrap();
        assert!(matches!(mark_pmf(&markless, &zero), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_slope_has_zero_gradient() {
        let cfg = InitConfig {
            seed: 2,
            scale: 0.4,
            base_rate: 1.0,
        };
        let p = PolicyParams::init(shape(true), true, &cfg).unwrap();
        let h = EpisodeHistory::from_events(
            3.0,
            [
                Event::action(0.5, Some(1)),
                Event::feedback(0.8, Some(0)),
                Event::action(2.0, Some(2)),
            ],
        )
        .unwrap();
        let g = episode_backward(&p, &h, RegularizerSpec::all()).unwrap();
        let i = p.w_t_index();
        assert_eq!(g.grad_log_likelihood[i], 0.0);
        assert_eq!(g.grad_intensity_sq[i], 0.0);
        assert_eq!(g.grad_entropy[i], 0.0);
    }

    #[test]
    fn frozen_slope_gives_flat_intensity_between_events() {
        let cfg = InitConfig {
            seed: 4,
            scale: 0.4,
            base_rate: 1.0,
        };
        let p = PolicyParams::init(shape(false), true, &cfg).unwrap();
        let h = EpisodeHistory::from_events(
            4.0,
            [Event::action(1.0, None), Event::feedback(2.5, Some(1))],
        )
        .unwrap();
        for seg in intensity_trajectory(&p, &h).unwrap() {
            assert_eq!(seg.at(seg.t_ref), seg.at(seg.t_ref + 0.37));
        }
    }

    #[test]
    fn backward_likelihood_matches_closed_form() {
        let cfg = InitConfig {
            seed: 8,
            scale: 0.4,
            base_rate: 1.3,
        };
        let p = PolicyParams::init(shape(true), false, &cfg).unwrap();
        let h = EpisodeHistory::from_events(
            3.0,
            [
                Event::action(0.5, Some(1)),
                Event::feedback(0.8, Some(0)),
                Event::action(2.0, Some(2)),
            ],
        )
        .unwrap();
        let segs = intensity_trajectory(&p, &h).unwrap();
        let pmfs = action_mark_pmfs(&p, &h).unwrap();
        let ll = crate::mtpp::episode_log_likelihood(&h, &segs, Some(&pmfs)).unwrap();
        let g = episode_backward(&p, &h, RegularizerSpec::default()).unwrap();
        assert!((ll - g.log_likelihood).abs() < 1e-12);
    }

    #[test]
    fn small_slope_derivative_series_matches_closed_form() {
        for &(w, d) in &[(0.3, 1.2), (-0.4, 1.0), (0.2, -0.5)] {
            let x: f64 = w * d;
            let e = x.exp();
            let closed = (d * w * e - (e - 1.0)) / (w * w);
            assert!((exp_integral_dw(w, d) - closed).abs() < 1e-12);
        }
        assert!((exp_integral_dw(0.0, 2.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = InitConfig {
            seed: 21,
            scale: 0.7,
            base_rate: 0.3,
        };
        let p = PolicyParams::init(shape(true), false, &cfg).unwrap();
        let text = p.to_checkpoint_json().unwrap();
        let q = PolicyParams::from_checkpoint_json(&text).unwrap();
        assert_eq!(p, q);
        let broken = text.replace("\"version\": 1", "\"version\": 9");
        assert!(PolicyParams::from_checkpoint_json(&broken).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn checkpoint_is_bit_exact(seed in any::<u64>(), scale in 0.0f64..5.0) {
                let cfg = InitConfig { seed, scale, base_rate: 1.7 };
                let p = PolicyParams::init(PolicyShape::new(2, 4).with_action_marks(3).with_feedback_marks(2), false, &cfg).unwrap();
                let q = PolicyParams::from_checkpoint_json(&p.to_checkpoint_json().unwrap()).unwrap();
                let bits = |x: &PolicyParams| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&p), bits(&q));
            }

            #[test]
            fn intensity_positive_and_pmf_valid(
                seed in any::<u64>(),
                scale in 0.0f64..3.0,
                h in proptest::collection::vec(-0.999f64..0.999, 3),
                age in 0.0f64..20.0,
            ) {
                let cfg = InitConfig { seed, scale, base_rate: 1.0 };
                let p = PolicyParams::init(PolicyShape::new(3, 3).with_action_marks(4), false, &cfg).unwrap();
                let s = HiddenState { h, t_last_action: 1.0 };
                let seg = intensity_segment(&p, &s, 1.0 + age).unwrap();
                prop_assert!(seg.c > 0.0);
                let pmf = mark_pmf(&p, &s).unwrap();
                prop_assert!((pmf.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(pmf.probs().iter().all(|x| *x >= 0.0));
            }
        }
    }
}
