//! Numerical analysis of forward-backward quantizer pairs.
//!
//! A pair `(F, B)` factors through a proximal quantizer — i.e. admits
//! `F = T∘P`, `B = T'∘P` for some proximal `P` and smooth `T` — iff both `F`
//! and `B` are functions of the Stieltjes integral `P(w) = ∫ 1/B dF` and that
//! `P` is monotone. This module reconstructs `P` on a sample grid, detects
//! jumps of `F` by bisection, and classifies the pair.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quantizers::QuantizerPair;

/// Threshold below which `B` is considered zero (outside its support).
const B_SUPPORT_TOL: f64 = 1e-9;
/// Threshold below which an estimated slope of `F` is considered zero.
const SLOPE_TOL: f64 = 1e-7;
/// Width to which jump locations are refined by bisection.
const JUMP_REFINE_WIDTH: f64 = 1e-9;
/// Residual change over the refined bracket that confirms a genuine jump
/// (anything smaller is a steep but continuous segment).
const JUMP_CONFIRM_TOL: f64 = 1e-6;
/// Bucket width for grouping grid points by their `P`-value.
const P_BUCKET: f64 = 1e-6;

/// Default integration window: every pair in the zoo is affine or saturated
/// outside it.
pub const DEFAULT_LO: f64 = -3.0;
pub const DEFAULT_HI: f64 = 3.0;

/// A detected discontinuity of the forward map.
#[derive(Clone, Debug)]
pub struct Jump {
    pub location: f64,
    pub magnitude: f64,
    /// Whether `|B(location)| >` the support threshold.
    pub in_support: bool,
}

/// The reconstructed proximal candidate `P` together with the sampled pair.
#[derive(Clone, Debug)]
pub struct SampledCurve {
    pub grid: Vec<f64>,
    pub p: Vec<f64>,
    pub f: Vec<f64>,
    pub b: Vec<f64>,
    pub jumps: Vec<Jump>,
    /// Grid points in the 0/0 completion-freedom region (`F' ≈ 0` and
    /// `B ≈ 0`); `P` is flat there by choice, and the function-of-P test
    /// exempts them.
    pub free: Vec<bool>,
    /// Locations where `F` varies while `B` vanishes: mass that cannot be
    /// absorbed into any proximal `P`.
    pub poles: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureReason {
    NonMonotoneP,
    JumpOutsideBSupport,
    BNotFunctionOfP,
    FNotFunctionOfP,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FailureReason::NonMonotoneP => "non-monotone-P",
            FailureReason::JumpOutsideBSupport => "jump-outside-B-support",
            FailureReason::BNotFunctionOfP => "B-not-function-of-P",
            FailureReason::FNotFunctionOfP => "F-not-function-of-P",
        };
        f.write_str(s)
    }
}

/// Outcome of the factorization test.
#[derive(Clone, Debug)]
pub struct DecompositionVerdict {
    pub admits: bool,
    pub reason: Option<FailureReason>,
    pub curve: SampledCurve,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Bisect `F` over `[a, b]` down to [`JUMP_REFINE_WIDTH`]; returns
/// `(location, magnitude)` if the residual change confirms a discontinuity.
fn refine_jump(pair: &QuantizerPair, mut a: f64, mut b: f64) -> Option<(f64, f64)> {
    let mut fa = pair.forward(a);
    let mut fb = pair.forward(b);
    while b - a > JUMP_REFINE_WIDTH {
        let m = 0.5 * (a + b);
        let fm = pair.forward(m);
        if (fm - fa).abs() >= (fb - fm).abs() {
            b = m;
            fb = fm;
        } else {
            a = m;
            fa = fm;
        }
    }
    let magnitude = fb - fa;
    if magnitude.abs() > JUMP_CONFIRM_TOL {
        Some((0.5 * (a + b), magnitude))
    } else {
        None
    }
}

/// Reconstruct `P(w) = ∫_{lo}^{w} 1/B(ω) dF(ω)` on an `n`-point grid.
///
/// Continuous parts accumulate by the trapezoid rule on `F'(ω)/B(ω)` with
/// `F'` from a 5-point stencil (falling back to jump-corrected secants next
/// to a discontinuity); each confirmed jump of `F` at `ω₀` contributes
/// `magnitude / B(ω₀)` when `ω₀` lies in `B`'s support and is flagged
/// otherwise. Regions where both `F' ≈ 0` and `B ≈ 0` contribute nothing and
/// are marked free.
pub fn integrate_p(pair: &QuantizerPair, lo: f64, hi: f64, n: usize) -> SampledCurve {
    assert!(n >= 1001, "integrate_p needs at least 1001 grid points");
    assert!(hi > lo);
    let step = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    let f: Vec<f64> = grid.iter().map(|&w| pair.forward(w)).collect();
    let b: Vec<f64> = grid.iter().map(|&w| pair.backward(w)).collect();

    // interval differences and jump candidates
    let diffs: Vec<f64> = (0..n - 1).map(|i| f[i + 1] - f[i]).collect();
    let mut jumps = Vec::new();
    let mut jump_mass = vec![0.0; n - 1]; // discontinuous part of each diff
    for i in 0..n - 1 {
        let win_lo = i.saturating_sub(10);
        let win_hi = (i + 11).min(n - 1);
        let mut window: Vec<f64> = diffs[win_lo..win_hi].iter().map(|d| d.abs()).collect();
        let med = median(&mut window);
        if diffs[i].abs() > (10.0 * med).max(JUMP_CONFIRM_TOL) {
            if let Some((location, magnitude)) = refine_jump(pair, grid[i], grid[i + 1]) {
                let in_support = pair.backward(location).abs() > B_SUPPORT_TOL;
                jump_mass[i] = magnitude;
                jumps.push(Jump { location, magnitude, in_support });
            }
        }
    }

    // slope of the continuous part of F at each node
    let mut slopes = vec![0.0; n];
    for j in 0..n {
        let w = grid[j];
        let h = 1e-4 * (1.0 + w.abs());
        let near_jump = jumps
            .iter()
            .any(|jp| (jp.location - w).abs() <= 2.0 * h + JUMP_REFINE_WIDTH);
        if near_jump {
            // jump-corrected secant average of the adjacent intervals
            let left = if j > 0 { Some((diffs[j - 1] - jump_mass[j - 1]) / step) } else { None };
            let right = if j < n - 1 { Some((diffs[j] - jump_mass[j]) / step) } else { None };
            slopes[j] = match (left, right) {
                (Some(a), Some(c)) => 0.5 * (a + c),
                (Some(a), None) => a,
                (None, Some(c)) => c,
                (None, None) => 0.0,
            };
        } else {
            slopes[j] = (-pair.forward(w + 2.0 * h) + 8.0 * pair.forward(w + h)
                - 8.0 * pair.forward(w - h)
                + pair.forward(w - 2.0 * h))
                / (12.0 * h);
        }
    }

    // pointwise ratio F'/B with the 0/0 freedom and pole bookkeeping
    let mut free = vec![false; n];
    let mut poles = Vec::new();
    let mut ratio = vec![0.0; n];
    for j in 0..n {
        if b[j].abs() > B_SUPPORT_TOL {
            ratio[j] = slopes[j] / b[j];
        } else if slopes[j].abs() <= SLOPE_TOL {
            free[j] = true;
        } else {
            poles.push(grid[j]);
        }
    }

    // trapezoidal accumulation plus jump contributions
    let mut p = vec![0.0; n];
    let mut jump_iter = jumps.iter().peekable();
    for i in 0..n - 1 {
        let mut inc = 0.5 * step * (ratio[i] + ratio[i + 1]);
        while let Some(jp) = jump_iter.peek() {
            if jp.location <= grid[i + 1] {
                if jp.in_support {
                    inc += jp.magnitude / pair.backward(jp.location);
                }
                jump_iter.next();
            } else {
                break;
            }
        }
        p[i + 1] = p[i] + inc;
    }

    SampledCurve { grid, p, f, b, jumps, free, poles }
}

/// Classify the pair: admits iff `P` is monotone, no mass of `F` falls
/// outside `B`'s support, and on the support both `F` and `B` are functions
/// of `P` (equal `P`-values imply equal `F`- and `B`-values within `tol`),
/// with the 0/0 freedom region exempt.
pub fn check_factorization(
    pair: &QuantizerPair,
    curve: &SampledCurve,
    tol: f64,
) -> DecompositionVerdict {
    let fail = |reason| DecompositionVerdict {
        admits: false,
        reason: Some(reason),
        curve: curve.clone(),
    };

    for i in 0..curve.p.len() - 1 {
        if curve.p[i + 1] < curve.p[i] - tol {
            return fail(FailureReason::NonMonotoneP);
        }
    }
    let jump_escapes = curve
        .jumps
        .iter()
        .any(|j| !j.in_support || pair.backward(j.location).abs() <= B_SUPPORT_TOL);
    if jump_escapes || !curve.poles.is_empty() {
        return fail(FailureReason::JumpOutsideBSupport);
    }

    // group support points into P level sets
    struct Span {
        fmin: f64,
        fmax: f64,
        bmin: f64,
        bmax: f64,
    }
    let mut buckets: HashMap<i64, Span> = HashMap::new();
    for j in 0..curve.grid.len() {
        if curve.free[j] || curve.b[j].abs() <= B_SUPPORT_TOL {
            continue;
        }
        let key = (curve.p[j] / P_BUCKET).round() as i64;
        let span = buckets.entry(key).or_insert(Span {
            fmin: curve.f[j],
            fmax: curve.f[j],
            bmin: curve.b[j],
            bmax: curve.b[j],
        });
        span.fmin = span.fmin.min(curve.f[j]);
        span.fmax = span.fmax.max(curve.f[j]);
        span.bmin = span.bmin.min(curve.b[j]);
        span.bmax = span.bmax.max(curve.b[j]);
    }
    if buckets.values().any(|s| s.bmax - s.bmin > tol) {
        return fail(FailureReason::BNotFunctionOfP);
    }
    if buckets.values().any(|s| s.fmax - s.fmin > tol) {
        return fail(FailureReason::FNotFunctionOfP);
    }

    DecompositionVerdict { admits: true, reason: None, curve: curve.clone() }
}

/// Convenience: integrate on the default window and classify.
pub fn analyze_pair(pair: &QuantizerPair, n: usize, tol: f64) -> DecompositionVerdict {
    let curve = integrate_p(pair, DEFAULT_LO, DEFAULT_HI, n);
    check_factorization(pair, &curve, tol)
}

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Probe `F` for continuous differentiability: compare central differences at
/// two step sizes over a dense grid and reject at the first disagreement.
fn smoothness_probe(f: &Scalar, lo: f64, hi: f64, n: usize) -> Result<()> {
    let step = (hi - lo) / (n - 1) as f64;
    for i in 0..n {
        let w = lo + step * i as f64;
        let h = 0.5 * step;
        let d1 = (f(w + h) - f(w - h)) / (2.0 * h);
        let d2 = (f(w + 0.5 * h) - f(w - 0.5 * h)) / h;
        if (d1 - d2).abs() > 1e-2 * (1.0 + d2.abs()) {
            return Err(Error::Kink { at: w });
        }
    }
    Ok(())
}

/// Build `(F, F')` for a continuously differentiable `F`; the derivative is
/// taken from `analytic` when supplied, else a 5-point stencil.
pub fn derivative_rule_pair(
    name: &str,
    f: Scalar,
    analytic: Option<Scalar>,
) -> Result<QuantizerPair> {
    smoothness_probe(&f, DEFAULT_LO, DEFAULT_HI, 1001)?;
    let forward = {
        let f = f.clone();
        Arc::new(move |w: f64, _mu: f64| f(w)) as crate::quantizers::ScalarFn
    };
    let backward: crate::quantizers::ScalarFn = match analytic {
        Some(d) => Arc::new(move |w, _mu| d(w)),
        None => Arc::new(move |w: f64, _mu: f64| {
            let h = 1e-4 * (1.0 + w.abs());
            (-f(w + 2.0 * h) + 8.0 * f(w + h) - 8.0 * f(w - h) + f(w - 2.0 * h)) / (12.0 * h)
        }),
    };
    Ok(QuantizerPair::from_closures(name, 1.0, forward, backward))
}

/// Moreau envelope of the indicator of Q = {−1, +1}:
/// `(1/2μ)·min((w−1)², (w+1)²)`.
pub fn moreau_env(w: f64, mu: f64) -> f64 {
    debug_assert!(mu > 0.0);
    let d = (w - 1.0).powi(2).min((w + 1.0).powi(2));
    d / (2.0 * mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::{bnn_prox, sign_q, ss_backward, ss_forward, ProximalQuantizer};

    const N: usize = 1001;
    const TOL: f64 = 1e-3;

    fn max_identity_deviation(curve: &SampledCurve) -> f64 {
        // modal offset: P is identity up to an integration constant
        let mid = curve.grid.len() / 2;
        let c = curve.p[mid] - curve.grid[mid];
        curve
            .grid
            .iter()
            .zip(&curve.p)
            .map(|(&w, &p)| (p - w - c).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_pair_reconstructs_identity() {
        let curve = integrate_p(&QuantizerPair::full_precision(), DEFAULT_LO, DEFAULT_HI, N);
        assert!(max_identity_deviation(&curve) < 1e-9);
        assert!(curve.jumps.is_empty());
    }

    #[test]
    fn ss_pair_reconstructs_identity() {
        let curve = integrate_p(&QuantizerPair::bnn_plus_plus(5.0), DEFAULT_LO, DEFAULT_HI, N);
        let dev = max_identity_deviation(&curve);
        assert!(dev < 1e-3, "max |P − w − c| = {dev}");
        assert!(curve.jumps.is_empty(), "SS misdetected as discontinuous");
    }

    #[test]
    fn steep_ss_is_not_a_jump() {
        // μ=30 is steeper than the grid can resolve; bisection must still
        // recognize it as continuous
        let curve = integrate_p(&QuantizerPair::bnn_plus_plus(30.0), DEFAULT_LO, DEFAULT_HI, N);
        assert!(curve.jumps.is_empty());
    }

    #[test]
    fn bc_pair_is_a_step_of_height_two() {
        let curve = integrate_p(&QuantizerPair::binary_connect(), DEFAULT_LO, DEFAULT_HI, N);
        assert_eq!(curve.jumps.len(), 1);
        let j = &curve.jumps[0];
        assert!(j.location.abs() < 1e-6);
        assert!((j.magnitude - 2.0).abs() < 1e-9);
        assert!(j.in_support);
        for (w, p) in curve.grid.iter().zip(&curve.p) {
            let expect = if *w < j.location { 0.0 } else { 2.0 };
            assert!((p - expect).abs() < 1e-9, "P({w}) = {p}");
        }
    }

    #[test]
    fn bnn_jump_lands_on_dirac_mass_two() {
        // (sign, 1_{[−1,1]}): the jump at 0 contributes 2/B(0) = 2, and the
        // hard-tanh transformation's continuous part adds nothing
        let curve = integrate_p(&QuantizerPair::bnn(), DEFAULT_LO, DEFAULT_HI, N);
        assert_eq!(curve.jumps.len(), 1);
        assert!((curve.jumps[0].magnitude / 1.0 - 2.0).abs() < 1e-9);
        let span = curve.p.last().unwrap() - curve.p.first().unwrap();
        assert!((span - 2.0).abs() < 1e-9);
    }

    #[test]
    fn translation_of_f_leaves_p_unchanged() {
        let base = QuantizerPair::from_closures(
            "t",
            1.0,
            Arc::new(|w: f64, _| w.tanh()),
            Arc::new(|w: f64, _| 1.0 - w.tanh().powi(2)),
        );
        let shifted = QuantizerPair::from_closures(
            "t_shifted",
            1.0,
            Arc::new(|w: f64, _| w.tanh() + 5.0),
            Arc::new(|w: f64, _| 1.0 - w.tanh().powi(2)),
        );
        let c1 = integrate_p(&base, DEFAULT_LO, DEFAULT_HI, N);
        let c2 = integrate_p(&shifted, DEFAULT_LO, DEFAULT_HI, N);
        // the shifted forward loses a few bits to cancellation in the stencil
        for (a, b) in c1.p.iter().zip(&c2.p) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zoo_classification() {
        let cases: &[(&str, bool, Option<FailureReason>)] = &[
            ("fp", true, None),
            ("bc", true, None),
            ("pc", true, None),
            ("bnn", true, None),
            ("bnn+", false, Some(FailureReason::BNotFunctionOfP)),
            ("bnn++", true, None),
            ("bireal", false, Some(FailureReason::BNotFunctionOfP)),
            ("rbnn", false, Some(FailureReason::BNotFunctionOfP)),
            ("poly+", true, None),
            ("ede", false, Some(FailureReason::BNotFunctionOfP)),
            ("ede+", true, None),
            ("react", true, None),
        ];
        for &(name, admits, reason) in cases {
            let pair = QuantizerPair::by_name(name).unwrap();
            let verdict = analyze_pair(&pair, N, TOL);
            assert_eq!(verdict.admits, admits, "{name}: {:?}", verdict.reason);
            assert_eq!(verdict.reason, reason, "{name}");
        }
    }

    #[test]
    fn verdicts_stable_under_grid_refinement() {
        for name in ["fp", "bc", "bnn", "bnn+", "bnn++", "bireal", "rbnn", "poly+", "ede", "ede+", "react"] {
            let pair = QuantizerPair::by_name(name).unwrap();
            let coarse = analyze_pair(&pair, N, TOL);
            let fine = analyze_pair(&pair, 2 * N - 1, TOL);
            assert_eq!(coarse.admits, fine.admits, "{name} flipped under refinement");
        }
    }

    #[test]
    fn f_not_function_of_p_is_reachable() {
        // huge B makes P flat across a region where F still varies
        let pair = QuantizerPair::from_closures(
            "flat_p",
            1.0,
            Arc::new(|w: f64, _| w.clamp(-1.0, 1.0)),
            Arc::new(|w: f64, _| if w.abs() < 1.0 { 1e9 } else { 0.0 }),
        );
        let verdict = analyze_pair(&pair, N, TOL);
        assert!(!verdict.admits);
        assert_eq!(verdict.reason, Some(FailureReason::FNotFunctionOfP));
    }

    #[test]
    fn jump_outside_support_detected() {
        // sign forward with a backward that vanishes at the jump
        let pair = QuantizerPair::from_closures(
            "escaped",
            1.0,
            Arc::new(|w, _| sign_q(w)),
            Arc::new(|w: f64, _| if (0.5..1.5).contains(&w.abs()) { 1.0 } else { 0.0 }),
        );
        let verdict = analyze_pair(&pair, N, TOL);
        assert!(!verdict.admits);
        assert_eq!(verdict.reason, Some(FailureReason::JumpOutsideBSupport));
    }

    #[test]
    fn derivative_rule_matches_ss() {
        let pair =
            derivative_rule_pair("ss5", Arc::new(|w| ss_forward(w, 5.0)), None).unwrap();
        for i in 0..=600 {
            let w = -3.0 + 0.01 * i as f64;
            assert!((pair.forward(w) - ss_forward(w, 5.0)).abs() < 1e-12);
            assert!(
                (pair.backward(w) - ss_backward(w, 5.0)).abs() < 1e-8,
                "w={w}: {} vs {}",
                pair.backward(w),
                ss_backward(w, 5.0)
            );
        }
    }

    #[test]
    fn derivative_rule_recovers_ede_plus() {
        let pair = derivative_rule_pair("tanh10", Arc::new(|w: f64| (10.0 * w).tanh()), None)
            .unwrap();
        let ede_plus = QuantizerPair::appendix("ede_plus").unwrap();
        for i in 0..=600 {
            let w = -3.0 + 0.01 * i as f64;
            assert!((pair.forward(w) - ede_plus.forward(w)).abs() < 1e-12);
            assert!((pair.backward(w) - ede_plus.backward(w)).abs() < 1e-7, "w={w}");
        }
    }

    #[test]
    fn derivative_rule_rejects_sign() {
        let err = derivative_rule_pair("sign", Arc::new(sign_q), None).unwrap_err();
        match err {
            Error::Kink { at } => assert!(at.abs() < 0.01, "kink reported at {at}"),
            other => panic!("expected kink rejection, got {other}"),
        }
    }

    #[test]
    fn derivative_rule_pairs_admit() {
        let built: Vec<QuantizerPair> = vec![
            derivative_rule_pair("ss5", Arc::new(|w| ss_forward(w, 5.0)), None).unwrap(),
            derivative_rule_pair("tanh2", Arc::new(|w: f64| (2.0 * w).tanh()), None).unwrap(),
            derivative_rule_pair(
                "id",
                Arc::new(|w| w),
                Some(Arc::new(|_| 1.0)),
            )
            .unwrap(),
        ];
        for pair in &built {
            let verdict = analyze_pair(pair, N, TOL);
            assert!(verdict.admits, "{}: {:?}", pair.name, verdict.reason);
        }
    }

    #[test]
    fn prox_composition_round_trip_admits() {
        // (T∘P₀, T'∘P₀) for smooth T and every prox in the zoo
        let proxes = [
            ProximalQuantizer::Identity,
            ProximalQuantizer::Sign,
            ProximalQuantizer::Linear { rho: 0.2, vrho: 0.0 },
            ProximalQuantizer::Bnn { mu: 2.0 },
        ];
        for prox in proxes {
            let pair = QuantizerPair::from_closures(
                "tanh",
                1.0,
                Arc::new(|w: f64, _| w.tanh()),
                Arc::new(|w: f64, _| 1.0 - w.tanh().powi(2)),
            )
            .compose_with_prox(prox);
            let verdict = analyze_pair(&pair, N, TOL);
            assert!(verdict.admits, "{prox:?}: {:?}", verdict.reason);
        }
    }

    #[test]
    fn composed_bnn_prox_forward_value() {
        let pair = QuantizerPair::bnn_plus_plus(5.0)
            .compose_with_prox(ProximalQuantizer::Bnn { mu: 2.0 });
        assert_eq!(pair.forward(0.5), ss_forward(bnn_prox(0.5, 2.0), 5.0));
    }

    #[test]
    fn moreau_examples() {
        assert_eq!(moreau_env(1.0, 1.0), 0.0);
        assert!((moreau_env(0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((moreau_env(0.5, 2.0) - 0.0625).abs() < 1e-15);
    }
}
