//! Continuum gap certificate: per-coordinate trained network plus the
//! inflation constant L = L1*sqrt(eps_x^2 + eps_u^2) + L2x*eps_x + L2u*eps_u
//! lifting sample-level constraint satisfaction to the whole box.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemPair;
use crate::error::{Result, SimGapError};
use crate::lipestimate::LipEstimate;
use crate::lipnet::NetArtifact;
use crate::trainer::TrainResult;

#[derive(Clone, Debug)]
pub struct GapCertificate {
    /// one trained artifact (net + multipliers + L1) per coordinate
    pub nets: Vec<NetArtifact>,
    pub l1: Vec<f64>,
    pub l2x: Vec<f64>,
    pub l2u: Vec<f64>,
    pub eps_x: f64,
    pub eps_u: f64,
    /// per-coordinate inflation constant
    pub l_const: Vec<f64>,
    pub eta: Vec<f64>,
}

/// The inflation constant of the continuum bound.
pub fn inflation_constant(l1: f64, l2x: f64, l2u: f64, eps_x: f64, eps_u: f64) -> f64 {
    l1 * (eps_x * eps_x + eps_u * eps_u).sqrt() + l2x * eps_x + l2u * eps_u
}

pub fn assemble(
    train_results: &[TrainResult],
    l2x_estimates: &[LipEstimate],
    l2u_estimates: &[LipEstimate],
    eps_x: f64,
    eps_u: f64,
) -> Result<GapCertificate> {
    let n = train_results.len();
    if l2x_estimates.len() != n || l2u_estimates.len() != n {
        return Err(SimGapError::Certificate(
            "one training result and one estimate pair per coordinate required".into(),
        ));
    }
    for r in train_results {
        if !r.verified {
            return Err(SimGapError::Certificate(format!(
                "coordinate {} is not verified; refusing to assemble a certificate",
                r.coordinate
            )));
        }
    }
    let mut nets = Vec::with_capacity(n);
    let mut l1 = Vec::with_capacity(n);
    let mut l2x = Vec::with_capacity(n);
    let mut l2u = Vec::with_capacity(n);
    let mut l_const = Vec::with_capacity(n);
    let mut eta = Vec::with_capacity(n);
    for (i, r) in train_results.iter().enumerate() {
        nets.push(r.artifact.clone());
        l1.push(r.artifact.l1);
        l2x.push(l2x_estimates[i].value);
        l2u.push(l2u_estimates[i].value);
        l_const.push(inflation_constant(
            r.artifact.l1,
            l2x_estimates[i].value,
            l2u_estimates[i].value,
            eps_x,
            eps_u,
        ));
        eta.push(r.eta);
    }
    Ok(GapCertificate {
        nets,
        l1,
        l2x,
        l2u,
        eps_x,
        eps_u,
        l_const,
        eta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub probes: usize,
    pub violations: usize,
    pub max_margin: f64,
    pub min_margin: f64,
}

impl GapCertificate {
    pub fn n(&self) -> usize {
        self.nets.len()
    }

    /// [gamma_i(x,u) + L_i] per coordinate; errors on out-of-box queries.
    pub fn gap_bound(&self, pair: &SystemPair, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if !pair.nominal.state_box().contains(x) || !pair.nominal.input_box().contains(u) {
            return Err(SimGapError::Domain(format!(
                "gap bound queried outside X x U at x={x:?}, u={u:?}"
            )));
        }
        self.gap_bound_unchecked(x, u)
    }

    pub fn gap_bound_unchecked(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.nets
            .iter()
            .zip(&self.l_const)
            .map(|(a, l)| Ok(a.net.forward(x, u)? + l))
            .collect()
    }

    /// Empirical soundness audit: fresh uniform probes, counting
    /// coordinate/point combinations where the bound falls below the true gap.
    pub fn validate(&self, pair: &SystemPair, n_probe: usize, seed: u64) -> Result<ValidationReport> {
        if n_probe == 0 {
            return Err(SimGapError::Domain("at least one probe required".into()));
        }
        let per_chunk = 4096usize;
        let chunks = n_probe.div_ceil(per_chunk);
        let partials: Vec<(usize, f64, f64)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (0xd134_2543_de82_ef95u64.wrapping_mul(c as u64 + 1)),
                );
                let count = per_chunk.min(n_probe - c * per_chunk);
                let mut violations = 0usize;
                let mut max_margin = f64::NEG_INFINITY;
                let mut min_margin = f64::INFINITY;
                for _ in 0..count {
                    let x = pair.nominal.state_box().sample(&mut rng);
                    let u = pair.nominal.input_box().sample(&mut rng);
                    let gap = pair.gap(&x, &u);
                    let bound = self
                        .gap_bound_unchecked(&x, &u)
                        .expect("probe inside the box");
                    for (b, g) in bound.iter().zip(&gap) {
                        let margin = b - g;
                        if margin < 0.0 {
                            violations += 1;
                        }
                        max_margin = max_margin.max(margin);
                        min_margin = min_margin.min(margin);
                    }
                }
                (violations, max_margin, min_margin)
            })
            .collect();
        let mut report = ValidationReport {
            probes: n_probe,
            violations: 0,
            max_margin: f64::NEG_INFINITY,
            min_margin: f64::INFINITY,
        };
        for (v, mx, mn) in partials {
            report.violations += v;
            report.max_margin = report.max_margin.max(mx);
            report.min_margin = report.min_margin.min(mn);
        }
        Ok(report)
    }

    /// Deterministic finer-grid audit over cell centers.
    pub fn validate_grid(&self, pair: &SystemPair, per_dim: usize) -> Result<ValidationReport> {
        let sb = pair.nominal.state_box();
        let ib = pair.nominal.input_box();
        let dims = sb.dim() + ib.dim();
        let total = per_dim.pow(dims as u32);
        let mut report = ValidationReport {
            probes: total,
            violations: 0,
            max_margin: f64::NEG_INFINITY,
            min_margin: f64::INFINITY,
        };
        for idx in 0..total {
            let mut rem = idx;
            let mut x = Vec::with_capacity(sb.dim());
            let mut u = Vec::with_capacity(ib.dim());
            for d in 0..dims {
                let k = rem % per_dim;
                rem /= per_dim;
                let (lo, w) = if d < sb.dim() {
                    (sb.lower()[d], sb.width(d))
                } else {
                    (ib.lower()[d - sb.dim()], ib.width(d - sb.dim()))
                };
                let v = lo + (k as f64 + 0.5) * w / per_dim as f64;
                if d < sb.dim() {
                    x.push(v);
                } else {
                    u.push(v);
                }
            }
            let gap = pair.gap(&x, &u);
            let bound = self.gap_bound_unchecked(&x, &u)?;
            for (b, g) in bound.iter().zip(&gap) {
                let margin = b - g;
                if margin < 0.0 {
                    report.violations += 1;
                }
                report.max_margin = report.max_margin.max(margin);
                report.min_margin = report.min_margin.min(margin);
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = StoredCertificate {
            format: "gap-certificate-v1".into(),
            nets: self.nets.iter().map(|a| a.to_string()).collect(),
            l1: self.l1.clone(),
            l2x: self.l2x.clone(),
            l2u: self.l2u.clone(),
            eps_x: self.eps_x,
            eps_u: self.eps_u,
            l_const: self.l_const.clone(),
            eta: self.eta.clone(),
        };
        let text = serde_json::to_string_pretty(&stored)
            .map_err(|e| SimGapError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let stored: StoredCertificate =
            serde_json::from_str(&text).map_err(|e| SimGapError::Parse(e.to_string()))?;
        if stored.format != "gap-certificate-v1" {
            return Err(SimGapError::Parse(format!(
                "unknown certificate format `{}`",
                stored.format
            )));
        }
        let nets = stored
            .nets
            .iter()
            .map(|t| NetArtifact::parse(t))
            .collect::<Result<_>>()?;
        Ok(GapCertificate {
            nets,
            l1: stored.l1,
            l2x: stored.l2x,
            l2u: stored.l2u,
            eps_x: stored.eps_x,
            eps_u: stored.eps_u,
            l_const: stored.l_const,
            eta: stored.eta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StoredCertificate {
    format: String,
    nets: Vec<String>,
    l1: Vec<f64>,
    l2x: Vec<f64>,
    l2u: Vec<f64>,
    eps_x: f64,
    eps_u: f64,
    l_const: Vec<f64>,
    eta: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::*;
    use crate::lipestimate::SlopeVariable;
    use crate::lipnet::{LambdaParams, LipMlp};

    fn fake_estimate(value: f64, i: usize, variable: SlopeVariable) -> LipEstimate {
        LipEstimate {
            value,
            raw_max_slope: value,
            inflation: 1.0,
            pairs_used: 1000,
            coordinate: i,
            variable,
        }
    }

    fn constant_artifact(input_dim: usize, level: f64, l1: f64) -> NetArtifact {
        NetArtifact {
            net: LipMlp::random(&[input_dim, 4, 1], 0, 0.0, level).unwrap(),
            lambda: LambdaParams::unit(&[4]),
            l1,
        }
    }

    fn result_for(artifact: NetArtifact, eta: f64, coordinate: usize, verified: bool) -> TrainResult {
        TrainResult {
            eta,
            artifact,
            verified,
            history: vec![],
            coordinate,
        }
    }

    #[test]
    fn inflation_constant_reference_arithmetic() {
        // L1=10, eps_x=0.01, eps_u=0.014, L2x=L2u=1.03
        let l = inflation_constant(10.0, 1.03, 1.03, 0.01, 0.014);
        assert!((l - 0.196767).abs() < 1e-5, "got {l}");
    }

    #[test]
    fn zero_constants_and_zero_radii_give_zero_inflation() {
        assert_eq!(inflation_constant(0.0, 0.0, 0.0, 0.3, 0.4), 0.0);
        assert_eq!(inflation_constant(5.0, 2.0, 3.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn assemble_refuses_unverified_coordinates() {
        let a = constant_artifact(3, 0.1, 1.0);
        let results = vec![
            result_for(a.clone(), 0.1, 1, true),
            result_for(a, 0.1, 2, false),
        ];
        let l2x = vec![
            fake_estimate(0.0, 1, SlopeVariable::State),
            fake_estimate(0.0, 2, SlopeVariable::State),
        ];
        let l2u = vec![
            fake_estimate(0.0, 1, SlopeVariable::Input),
            fake_estimate(0.0, 2, SlopeVariable::Input),
        ];
        let err = assemble(&results, &l2x, &l2u, 0.1, 0.1).unwrap_err();
        assert!(err.to_string().contains('2'));
    }

    fn identity_mecanum_cert(level: f64, l_const_zero: bool) -> (GapCertificate, SystemPair) {
        let pair = SystemPair::new(
            mecanum_nominal(0.3).unwrap(),
            mecanum_surrogate(0.3, 1.0, 1.0, 0.0).unwrap(),
            "identity",
        )
        .unwrap();
        let a = constant_artifact(4, level, 1.0);
        let results = vec![
            result_for(a.clone(), level, 1, true),
            result_for(a, level, 2, true),
        ];
        let v = if l_const_zero { 0.0 } else { 0.1 };
        let l2x = vec![
            fake_estimate(v, 1, SlopeVariable::State),
            fake_estimate(v, 2, SlopeVariable::State),
        ];
        let l2u = vec![
            fake_estimate(v, 1, SlopeVariable::Input),
            fake_estimate(v, 2, SlopeVariable::Input),
        ];
        let eps = if l_const_zero { 0.0001 } else { 0.1 };
        let cert = assemble(&results, &l2x, &l2u, eps, eps).unwrap();
        (cert, pair)
    }

    #[test]
    fn gap_bound_dominates_network_value_and_rejects_outside() {
        let (cert, pair) = identity_mecanum_cert(0.05, false);
        let b = cert.gap_bound(&pair, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        for (bi, (a, l)) in b.iter().zip(cert.nets.iter().zip(&cert.l_const)) {
            let net_val = a.net.forward(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
            assert!(*bi >= net_val);
            assert!((bi - (net_val + l)).abs() < 1e-15);
        }
        assert!(cert.gap_bound(&pair, &[5.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn identical_pair_validates_clean() {
        let (cert, pair) = identity_mecanum_cert(0.05, false);
        let r = cert.validate(&pair, 20_000, 3).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.min_margin >= 0.0);
    }

    #[test]
    fn corrupted_inflation_is_detected_on_nonzero_gap_pair() {
        // tight constant net below the true max gap, inflation zeroed
        let pair = SystemPair::new(
            mecanum_nominal(0.3).unwrap(),
            mecanum_surrogate(0.3, MECANUM_GAIN_X, MECANUM_GAIN_Y, MECANUM_SLIP).unwrap(),
            "default",
        )
        .unwrap();
        let a = constant_artifact(4, 0.01, 1.0);
        let results = vec![
            result_for(a.clone(), 0.01, 1, true),
            result_for(a, 0.01, 2, true),
        ];
        let l2x = vec![
            fake_estimate(0.0, 1, SlopeVariable::State),
            fake_estimate(0.0, 2, SlopeVariable::State),
        ];
        let l2u = vec![
            fake_estimate(0.0, 1, SlopeVariable::Input),
            fake_estimate(0.0, 2, SlopeVariable::Input),
        ];
        let cert = assemble(&results, &l2x, &l2u, 0.0001, 0.0001).unwrap();
        assert!(cert.l_const.iter().all(|l| *l < 1e-3));
        let r = cert.validate(&pair, 20_000, 5).unwrap();
        assert!(r.violations > 0);
    }

    #[test]
    fn monotone_in_inflation_inputs() {
        let (cert, pair) = identity_mecanum_cert(0.05, false);
        let mut bigger = cert.clone();
        for l in &mut bigger.l_const {
            *l += 0.5;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x = pair.nominal.state_box().sample(&mut rng);
            let u = pair.nominal.input_box().sample(&mut rng);
            let a = cert.gap_bound(&pair, &x, &u).unwrap();
            let b = bigger.gap_bound(&pair, &x, &u).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!(q >= p);
            }
        }
    }

    #[test]
    fn serialization_round_trip_is_bitwise_exact() {
        let (cert, pair) = identity_mecanum_cert(0.0731, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("certificate.bin");
        cert.save(&path).unwrap();
        let back = GapCertificate::load(&path).unwrap();
        assert_eq!(cert.l_const, back.l_const);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x = pair.nominal.state_box().sample(&mut rng);
            let u = pair.nominal.input_box().sample(&mut rng);
            let a = cert.gap_bound(&pair, &x, &u).unwrap();
            let b = back.gap_bound(&pair, &x, &u).unwrap();
            assert_eq!(a, b);
        }
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
