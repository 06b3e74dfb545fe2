//! Training update rules and schedules, plus the Bregman-divergence
//! convergence audit.
//!
//! The central update is ProxConnect++:
//! `w*_{t+1} = w*_t − η_t · B(w*_t) ⊙ ∇ℓ(F(w*_t))`,
//! with the backward multiplier applied elementwise. ProxQuant and reverse
//! ProxConnect differ only in where the gradient is evaluated and applied:
//!
//! * PC++:  gradient at `F(w*)`, applied to `w*`
//! * PQ:    gradient at `P(w*)`, applied to `P(w*)`
//! * rPC:   gradient at `w*`, applied to `P(w*)`

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizers::{ProximalQuantizer, QuantizerPair};
use crate::tensor::Tensor;

/// Step-size sequence.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum EtaRule {
    Constant(f64),
    /// `η_t = η₀ · ½(1 + cos(πt/T))`.
    Cosine { eta0: f64 },
    StepDecay { eta0: f64, drop_every: usize, factor: f64 },
}

/// Smoothing-parameter sequence for the quantizer pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum MuRule {
    /// Leave the pair's own μ untouched.
    PairDefault,
    Constant(f64),
    /// Linear ramp hitting `mu0` at t=0 and `mu_end` at t=T exactly.
    Linear { mu0: f64, mu_end: f64 },
    /// `μ_t := 1 + Σ_{τ=1}^{t−1} η_τ`, tracked incrementally so that
    /// `μ_{t+1} − μ_t = η_t` holds to the last bit.
    Accumulate,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub eta: EtaRule,
    pub mu: MuRule,
    /// Linear ρ-ramp endpoints for the piecewise-linear quantizer.
    pub rho: Option<(f64, f64)>,
    pub total_steps: usize,
}

fn linear_ramp(v0: f64, v1: f64, t: usize, total: usize) -> f64 {
    if t == 0 {
        v0
    } else if t >= total {
        v1
    } else {
        v0 + (v1 - v0) * t as f64 / total as f64
    }
}

impl Schedule {
    pub fn constant(eta: f64, total_steps: usize) -> Self {
        Schedule { eta: EtaRule::Constant(eta), mu: MuRule::PairDefault, rho: None, total_steps }
    }

    /// Step size for the step taken at counter `t` (0-based).
    pub fn eta_at(&self, t: usize) -> f64 {
        match self.eta {
            EtaRule::Constant(c) => c,
            EtaRule::Cosine { eta0 } => {
                let frac = t as f64 / self.total_steps.max(1) as f64;
                eta0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            EtaRule::StepDecay { eta0, drop_every, factor } => {
                eta0 * factor.powi((t / drop_every.max(1)) as i32)
            }
        }
    }

    pub fn rho_at(&self, t: usize) -> Option<f64> {
        self.rho.map(|(r0, r1)| linear_ramp(r0, r1, t, self.total_steps))
    }
}

/// Per-layer weight state for one training run.
#[derive(Clone, Debug)]
pub struct TrainerState {
    /// Continuous weights.
    pub w_star: Vec<Tensor>,
    /// Quantized weights from the most recent step.
    pub w: Vec<Tensor>,
    /// Completed steps.
    pub t: usize,
    pub schedule: Schedule,
    /// Accumulate-rule state: `1 + Σ_{τ≤t} η_τ`.
    pub mu_acc: f64,
    /// Momentum coefficient; buffers live in w*-space.
    pub momentum: Option<f64>,
    velocity: Vec<Tensor>,
    /// Per-layer ℓ₂ clip on the applied step direction.
    pub grad_clip: Option<f64>,
}

impl TrainerState {
    pub fn new(w_star: Vec<Tensor>, schedule: Schedule) -> Self {
        let w = w_star.clone();
        let velocity = w_star.iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainerState {
            w_star,
            w,
            t: 0,
            schedule,
            mu_acc: 1.0,
            momentum: None,
            velocity,
            grad_clip: None,
        }
    }

    /// Smoothing parameter in effect for the upcoming step; `None` keeps the
    /// pair's own μ.
    pub fn current_mu(&self) -> Option<f64> {
        match self.schedule.mu {
            MuRule::PairDefault => None,
            MuRule::Constant(c) => Some(c),
            MuRule::Linear { mu0, mu_end } => {
                Some(linear_ramp(mu0, mu_end, self.t, self.schedule.total_steps))
            }
            MuRule::Accumulate => Some(self.mu_acc),
        }
    }

    pub(crate) fn advance(&mut self, eta: f64) {
        self.mu_acc += eta;
        self.t += 1;
    }

    pub(crate) fn check_finite(&self, grads: &[Tensor]) -> Result<()> {
        if grads.iter().all(|g| g.all_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence { step: self.t })
        }
    }

    /// Subtract `η · dir` from `w*`, through the momentum buffer when enabled.
    pub(crate) fn apply(&mut self, eta: f64, mut dirs: Vec<Tensor>) {
        if let Some(c) = self.grad_clip {
            for d in &mut dirs {
                let norm = d.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > c {
                    let s = c / norm;
                    for v in d.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
        match self.momentum {
            Some(m) => {
                for ((w, v), d) in self.w_star.iter_mut().zip(&mut self.velocity).zip(&dirs) {
                    for ((wv, vv), dv) in
                        w.data_mut().iter_mut().zip(v.data_mut()).zip(d.data())
                    {
                        *vv = m * *vv + dv;
                        *wv -= eta * *vv;
                    }
                }
            }
            None => {
                for (w, d) in self.w_star.iter_mut().zip(&dirs) {
                    for (wv, dv) in w.data_mut().iter_mut().zip(d.data()) {
                        *wv -= eta * dv;
                    }
                }
            }
        }
    }
}

/// One ProxConnect++ step: `w*_{t+1} = w*_t − η_t B(w*_t) ⊙ ∇ℓ(F(w*_t))`.
pub fn pcpp_step<G>(state: &mut TrainerState, pair: &QuantizerPair, mut grad_fn: G) -> Result<()>
where
    G: FnMut(&[Tensor]) -> Vec<Tensor>,
{
    let eta = state.schedule.eta_at(state.t);
    let mut p = pair.clone();
    if let Some(mu) = state.current_mu() {
        p.set_mu(mu);
    }
    state.w = state.w_star.iter().map(|w| w.map(|v| p.forward(v))).collect();
    let grads = grad_fn(&state.w);
    state.check_finite(&grads)?;
    let dirs: Vec<Tensor> = state
        .w_star
        .iter()
        .zip(&grads)
        .map(|(ws, g)| {
            let data = ws
                .data()
                .iter()
                .zip(g.data())
                .map(|(&wv, &gv)| p.backward(wv) * gv)
                .collect();
            Tensor::new(ws.shape().to_vec(), data).unwrap()
        })
        .collect();
    state.apply(eta, dirs);
    state.advance(eta);
    Ok(())
}

/// One ProxQuant step: `w*_{t+1} = P(w*_t) − η_t ∇ℓ(P(w*_t))`.
pub fn pq_step<G>(state: &mut TrainerState, prox: &ProximalQuantizer, mut grad_fn: G) -> Result<()>
where
    G: FnMut(&[Tensor]) -> Vec<Tensor>,
{
    let eta = state.schedule.eta_at(state.t);
    state.w = state.w_star.iter().map(|w| w.map(|v| prox.evaluate(v))).collect();
    let grads = grad_fn(&state.w);
    state.check_finite(&grads)?;
    state.w_star = state.w.clone();
    state.apply(eta, grads);
    state.advance(eta);
    Ok(())
}

/// One reverse-ProxConnect step: `w*_{t+1} = P(w*_t) − η_t ∇ℓ(w*_t)`.
pub fn rpc_step<G>(state: &mut TrainerState, prox: &ProximalQuantizer, mut grad_fn: G) -> Result<()>
where
    G: FnMut(&[Tensor]) -> Vec<Tensor>,
{
    let eta = state.schedule.eta_at(state.t);
    state.w = state.w_star.iter().map(|w| w.map(|v| prox.evaluate(v))).collect();
    let continuous = state.w_star.clone();
    let grads = grad_fn(&continuous);
    state.check_finite(&grads)?;
    state.w_star = state.w.clone();
    state.apply(eta, grads);
    state.advance(eta);
    Ok(())
}

/// Regularizer choices supported by the audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegKind {
    Zero,
    /// Indicator of Q = {−1, +1}ᵈ.
    IndicatorQ,
}

fn reg_value(r: RegKind, w: &[f64]) -> f64 {
    match r {
        RegKind::Zero => 0.0,
        RegKind::IndicatorQ => {
            if w.iter().all(|&v| v == 1.0 || v == -1.0) {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}

fn half_sq_norm(w: &[f64]) -> f64 {
    0.5 * w.iter().map(|v| v * v).sum::<f64>()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bregman divergence `Δ_τ(w) = r_τ(w) − r_τ(w_{τ+1}) − ⟨w − w_{τ+1}, w*_{τ+1}⟩`
/// with `r_τ(w) = μ_{τ+1}·r(w) + ½‖w‖²`.
pub fn bregman_delta(
    w: &[f64],
    w_next: &[f64],
    w_star_next: &[f64],
    mu_next: f64,
    r: RegKind,
) -> f64 {
    let r_w = reg_value(r, w);
    if r_w.is_infinite() {
        return f64::INFINITY;
    }
    let r_wn = reg_value(r, w_next);
    if r_wn.is_infinite() {
        return f64::INFINITY;
    }
    let diff: Vec<f64> = w.iter().zip(w_next).map(|(a, b)| a - b).collect();
    mu_next * (r_w - r_wn) + half_sq_norm(w) - half_sq_norm(w_next) - dot(&diff, w_star_next)
}

/// One recorded step of a deterministic run.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub eta: f64,
    pub mu: f64,
    pub w: Vec<f64>,
    pub w_star: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Trajectory dump: consecutive records `(t, η_t, μ_t, w_t, w*_t, ∇ℓ(Tw_t))`.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub dim: usize,
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrajectorySidecar {
    dim: usize,
    records: usize,
}

impl Trajectory {
    /// Write the little-endian binary record file plus a `.json` sidecar
    /// describing the shapes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.records.len() * (3 + 3 * self.dim) * 8);
        for r in &self.records {
            for v in [r.t, r.eta, r.mu]
                .iter()
                .chain(r.w.iter())
                .chain(r.w_star.iter())
                .chain(r.grad.iter())
            {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        let sidecar = TrajectorySidecar { dim: self.dim, records: self.records.len() };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: TrajectorySidecar =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)
                .map_err(|e| Error::Format(e.to_string()))?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let per_record = (3 + 3 * sidecar.dim) * 8;
        if bytes.len() != per_record * sidecar.records {
            return Err(Error::Format(format!(
                "trajectory length {} does not match sidecar ({} records × {} bytes)",
                bytes.len(),
                sidecar.records,
                per_record
            )));
        }
        let mut records = Vec::with_capacity(sidecar.records);
        let mut vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for _ in 0..sidecar.records {
            let t = vals.next().unwrap();
            let eta = vals.next().unwrap();
            let mu = vals.next().unwrap();
            let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| vals.next().unwrap()).collect() };
            let w = take(sidecar.dim);
            let w_star = take(sidecar.dim);
            let grad = take(sidecar.dim);
            records.push(TrajectoryRecord { t, eta, mu, w, w_star, grad });
        }
        Ok(Trajectory { dim: sidecar.dim, records })
    }
}

/// Per-step entries of the Eq.-level audit.
#[derive(Clone, Debug)]
pub struct BregmanRecord {
    pub t: usize,
    /// `Δ_τ(w_τ)`.
    pub delta_self: f64,
    /// `η_τ[⟨w_τ − w, ∇ℓ(Tw_τ)⟩ + r(w_τ) − r(w)]`.
    pub gap_summand: f64,
    /// Right-hand side of the duality-gap bound accumulated up to this step.
    pub running_bound: f64,
}

/// Audit outcome for one window.
#[derive(Clone, Debug)]
pub struct GapReport {
    pub records: Vec<BregmanRecord>,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`; the theorem guarantees this is nonnegative.
    pub slack: f64,
    /// Averaged-iterate bound slack when a loss evaluator is supplied.
    pub pcc3_slack: Option<f64>,
}

/// Evaluate both sides of the duality-gap bound over the window `[s, t]`
/// (0-based indices into `traj.records`; requires record `t+1`).
///
/// When `loss` is given (and `r == Zero`), also checks the averaged-iterate
/// bound: `f(w̄) − f(w) ≤ (Δ_{s−1}(w) + Σ η²/2·‖g‖²) / Σ η`.
pub fn gap_audit(
    traj: &Trajectory,
    s: usize,
    t: usize,
    w_ref: &[f64],
    r: RegKind,
    loss: Option<&dyn Fn(&[f64]) -> f64>,
) -> GapReport {
    if s > t {
        return GapReport { records: Vec::new(), lhs: 0.0, rhs: 0.0, slack: 0.0, pcc3_slack: None };
    }
    assert!(t + 1 < traj.records.len(), "window end {t} needs record {}", t + 1);

    let delta = |tau: usize, w: &[f64]| -> f64 {
        // Δ_τ uses the (τ+1)-records
        let next = &traj.records[tau + 1];
        bregman_delta(w, &next.w, &next.w_star, next.mu, r)
    };

    let r_ref = reg_value(r, w_ref);
    let mut lhs = 0.0;
    let mut sum_delta_self = 0.0;
    let mut records = Vec::with_capacity(t - s + 1);
    let delta_head = if s == 0 {
        // Δ_{s−1}(w) with s−1 = −1 refers to the initial point: w₀ = w*₀
        let first = &traj.records[s];
        bregman_delta(w_ref, &first.w_star, &first.w_star, first.mu, r)
    } else {
        delta(s - 1, w_ref)
    };
    for tau in s..=t {
        let rec = &traj.records[tau];
        let diff: Vec<f64> = rec.w.iter().zip(w_ref).map(|(a, b)| a - b).collect();
        let summand = rec.eta * (dot(&diff, &rec.grad) + reg_value(r, &rec.w) - r_ref);
        lhs += summand;
        let ds = delta(tau, &rec.w);
        sum_delta_self += ds;
        records.push(BregmanRecord {
            t: tau,
            delta_self: ds,
            gap_summand: summand,
            running_bound: delta_head + sum_delta_self,
        });
    }
    let rhs = delta_head - delta(t, w_ref) + sum_delta_self;

    let pcc3_slack = loss.map(|f| {
        let sum_eta: f64 = (s..=t).map(|tau| traj.records[tau].eta).sum();
        let mut avg = vec![0.0; traj.dim];
        let mut grad_term = 0.0;
        for tau in s..=t {
            let rec = &traj.records[tau];
            for (a, &wv) in avg.iter_mut().zip(&rec.w) {
                *a += rec.eta * wv;
            }
            grad_term += 0.5 * rec.eta * rec.eta * rec.grad.iter().map(|g| g * g).sum::<f64>();
        }
        for a in &mut avg {
            *a /= sum_eta;
        }
        let bound = (delta_head + grad_term) / sum_eta;
        bound - (f(&avg) - f(w_ref))
    });

    GapReport { records, lhs, rhs, slack: rhs - lhs, pcc3_slack }
}

/// Deterministic diagonal quadratic `ℓ(w) = ½ Σ a_i (w_i − b_i)²` used by the
/// audit plumbing; `a_i ∈ [0.5, 2]`, `b_i ∈ [−1, 1]`.
pub fn quadratic_problem(dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..dim).map(|_| rng.gen_range(0.5..2.0)).collect();
    let b = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (a, b)
}

/// Run full-gradient SGD on the seeded quadratic and record the trajectory.
pub fn run_quadratic_sgd(dim: usize, steps: usize, schedule: Schedule, seed: u64) -> Trajectory {
    let (a, b) = quadratic_problem(dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut mu_acc = 1.0;
    let mut records = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let eta = schedule.eta_at(t);
        let grad: Vec<f64> = w.iter().zip(&a).zip(&b).map(|((w, a), b)| a * (w - b)).collect();
        records.push(TrajectoryRecord {
            t: t as f64,
            eta,
            mu: mu_acc,
            w: w.clone(),
            w_star: w.clone(),
            grad: grad.clone(),
        });
        for (wv, g) in w.iter_mut().zip(&grad) {
            *wv -= eta * g;
        }
        mu_acc += eta;
    }
    Trajectory { dim, records }
}
