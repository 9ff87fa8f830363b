//! Data-driven estimation of the Lipschitz constants of the unknown gap map
//! |f_hat_i - f_i|, separately with respect to the state and the input.
//!
//! The default estimator is the maximum sampled slope times an inflation
//! factor; an extreme-value endpoint extrapolation over batch maxima is
//! available behind a config switch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{HyperBox, SystemPair};
use crate::error::{Result, SimGapError};

pub const DEFAULT_ANCHORS: usize = 32;
pub const DEFAULT_PAIRS: usize = 100_000;
pub const DEFAULT_INFLATION: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// max sampled slope times the inflation factor
    InflatedMax,
    /// reverse-Weibull-style endpoint extrapolation over batch maxima
    ExtremeValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlopeVariable {
    State,
    Input,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipEstimate {
    pub value: f64,
    pub raw_max_slope: f64,
    /// value / raw_max_slope; >= 1 for both estimators
    pub inflation: f64,
    pub pairs_used: usize,
    pub coordinate: usize,
    pub variable: SlopeVariable,
}

fn gap_i(pair: &SystemPair, i: usize, x: &[f64], u: &[f64]) -> f64 {
    let a = pair.surrogate.step(x, u);
    let b = pair.nominal.step(x, u);
    (a[i - 1] - b[i - 1]).abs()
}

/// Max slope of w -> g(w, anchor) over random pairs drawn from `vary`,
/// one seeded stream per anchor, merged by max.
fn sampled_slopes(
    pair: &SystemPair,
    i: usize,
    vary: &HyperBox,
    anchor_box: &HyperBox,
    variable: SlopeVariable,
    n_anchors: usize,
    n_pairs: usize,
    seed: u64,
) -> Vec<f64> {
    (0..n_anchors)
        .into_par_iter()
        .map(|a| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(a as u64 + 1)));
            let anchor = anchor_box.sample(&mut rng);
            let mut max_slope = 0.0f64;
            let mut done = 0;
            while done < n_pairs {
                let p = vary.sample(&mut rng);
                let q = vary.sample(&mut rng);
                let dist: f64 = p
                    .iter()
                    .zip(&q)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                if dist < 1e-12 {
                    continue; // degenerate pair, resample
                }
                done += 1;
                let (gp, gq) = match variable {
                    SlopeVariable::State => (
                        gap_i(pair, i, &p, &anchor),
                        gap_i(pair, i, &q, &anchor),
                    ),
                    SlopeVariable::Input => (
                        gap_i(pair, i, &anchor, &p),
                        gap_i(pair, i, &anchor, &q),
                    ),
                };
                max_slope = max_slope.max((gp - gq).abs() / dist);
            }
            max_slope
        })
        .collect()
}

/// Endpoint extrapolation from the two largest anchor maxima; collapses to
/// the raw max when the top slopes agree.
fn extreme_value_endpoint(anchor_maxima: &[f64]) -> f64 {
    let mut sorted = anchor_maxima.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let m1 = sorted[0];
    let m2 = sorted.get(1).copied().unwrap_or(m1);
    m1 + (m1 - m2)
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    pair: &SystemPair,
    i: usize,
    variable: SlopeVariable,
    n_anchors: usize,
    n_pairs: usize,
    inflation: f64,
    seed: u64,
    kind: EstimatorKind,
) -> Result<LipEstimate> {
    if i < 1 || i > pair.n() {
        return Err(SimGapError::Domain(format!(
            "coordinate {i} out of range 1..={}",
            pair.n()
        )));
    }
    if n_pairs < 100 {
        return Err(SimGapError::Domain(
            "at least 100 sample pairs per anchor required".into(),
        ));
    }
    if inflation < 1.0 {
        return Err(SimGapError::Domain(format!(
            "inflation must be >= 1, got {inflation}"
        )));
    }
    let (vary, anchor_box) = match variable {
        SlopeVariable::State => (pair.nominal.state_box(), pair.nominal.input_box()),
        SlopeVariable::Input => (pair.nominal.input_box(), pair.nominal.state_box()),
    };
    let maxima = sampled_slopes(
        pair, i, vary, anchor_box, variable, n_anchors.max(1), n_pairs, seed,
    );
    let raw = maxima.iter().cloned().fold(0.0, f64::max);
    let value = match kind {
        EstimatorKind::InflatedMax => raw * inflation,
        EstimatorKind::ExtremeValue => extreme_value_endpoint(&maxima).max(raw),
    };
    let effective_inflation = if raw > 0.0 { value / raw } else { 1.0 };
    Ok(LipEstimate {
        value,
        raw_max_slope: raw,
        inflation: effective_inflation,
        pairs_used: n_anchors.max(1) * n_pairs,
        coordinate: i,
        variable,
    })
}

/// Lipschitz constant of x -> |f_hat_i(x,u) - f_i(x,u)| at random fixed inputs.
pub fn estimate_l2x(
    pair: &SystemPair,
    i: usize,
    n_anchors: usize,
    n_pairs: usize,
    inflation: f64,
    seed: u64,
    kind: EstimatorKind,
) -> Result<LipEstimate> {
    estimate(
        pair,
        i,
        SlopeVariable::State,
        n_anchors,
        n_pairs,
        inflation,
        seed,
        kind,
    )
}

/// Lipschitz constant of u -> |f_hat_i(x,u) - f_i(x,u)| at random fixed states.
pub fn estimate_l2u(
    pair: &SystemPair,
    i: usize,
    n_anchors: usize,
    n_pairs: usize,
    inflation: f64,
    seed: u64,
    kind: EstimatorKind,
) -> Result<LipEstimate> {
    estimate(
        pair,
        i,
        SlopeVariable::Input,
        n_anchors,
        n_pairs,
        inflation,
        seed,
        kind,
    )
}
