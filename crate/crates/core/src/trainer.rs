//! Per-coordinate scenario-program training: minimize hinge losses enforcing
//! gamma(x_r,u_s) <= eta and |f_hat_i - f_i| <= gamma on the samples, plus a
//! log-det barrier keeping the Lipschitz certificate matrix positive
//! definite, wrapped in a bisection search for the smallest verifiable eta.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::GapDataset;
use crate::error::{Result, SimGapError};
use crate::lipnet::{
    backprop, build_cert_matrix, cert_adjoint_to_grads, cert_check, LambdaParams, LipMlp,
    NetArtifact,
};

const CHUNK: usize = 2048;
const NONPSD_PENALTY: f64 = 1e6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// weight on the gamma <= eta hinge
    pub c1: f64,
    /// weight on the gap-target <= gamma hinge
    pub c2: f64,
    /// weight on the -log det barrier
    pub c_barrier: f64,
    /// strict-satisfaction margin added inside the hinges during training;
    /// verification itself uses exact floating-point comparisons
    pub delta: f64,
    pub learning_rate: f64,
    /// lr_t = learning_rate / (1 + lr_decay * epoch)
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub bisect_tol: f64,
    pub bisect_max_iter: usize,
    /// certified network Lipschitz bound per coordinate (1-based order)
    pub l1_targets: Vec<f64>,
    pub hidden_widths: Vec<usize>,
    pub init_weight_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            c_barrier: 1e-3,
            delta: 1e-4,
            learning_rate: 0.02,
            lr_decay: 0.0,
            max_epochs: 500,
            seed: 1,
            bisect_tol: 1e-3,
            bisect_max_iter: 20,
            l1_targets: vec![1.0],
            hidden_widths: vec![32],
            init_weight_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn l1_for(&self, coordinate: usize) -> f64 {
        let idx = coordinate.saturating_sub(1);
        *self
            .l1_targets
            .get(idx)
            .or_else(|| self.l1_targets.last())
            .unwrap_or(&1.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub hinge: f64,
    pub barrier: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub eta: f64,
    pub artifact: NetArtifact,
    pub verified: bool,
    pub history: Vec<EpochRecord>,
    pub coordinate: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub hinge: f64,
    pub barrier: f64,
}

#[derive(Clone, Debug)]
pub struct LossGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub theta: Vec<DVector<f64>>,
}

/// Concatenated sample inputs plus gap targets for one coordinate; the unit
/// a training job operates on.
#[derive(Clone, Debug)]
pub struct CoordinateData {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub coordinate: usize,
    pub input_dim: usize,
}

impl CoordinateData {
    pub fn from_dataset(ds: &GapDataset, coordinate: usize) -> Result<Self> {
        let targets = ds.gap_targets(coordinate)?;
        let inputs = ds
            .samples
            .iter()
            .map(|s| s.x_r.iter().chain(&s.u_s).copied().collect())
            .collect();
        Ok(Self {
            inputs,
            targets,
            coordinate,
            input_dim: ds.n() + ds.m(),
        })
    }

    pub fn max_target(&self) -> f64 {
        self.targets.iter().cloned().fold(0.0, f64::max)
    }
}

/// Hinge + barrier loss with exact (sub)gradients for all weights, biases,
/// and multiplier parameters.
pub fn loss(
    net: &LipMlp,
    lambda: &LambdaParams,
    data: &CoordinateData,
    eta: f64,
    delta: f64,
    cfg: &TrainConfig,
    l1: f64,
) -> Result<(LossValue, LossGrads)> {
    if data.inputs.is_empty() {
        return Err(SimGapError::Domain("loss needs a nonempty dataset".into()));
    }
    let (c1, c2) = (cfg.c1, cfg.c2);
    // hinge part, chunked with ordered reduction for determinism
    let chunks: Vec<(f64, crate::lipnet::ParamGrads)> = data
        .inputs
        .par_chunks(CHUNK)
        .zip(data.targets.par_chunks(CHUNK))
        .map(|(zs, ts)| {
            let mut hinge = 0.0;
            let mut upstream = vec![0.0; zs.len()];
            for (k, (z, t)) in zs.iter().zip(ts).enumerate() {
                let g = net.forward_concat(z).expect("dimension-checked inputs");
                let h1 = (g - eta + delta).max(0.0);
                let h2 = (t - g + delta).max(0.0);
                hinge += c1 * h1 + c2 * h2;
                let mut up = 0.0;
                if h1 > 0.0 {
                    up += c1;
                }
                if h2 > 0.0 {
                    up -= c2;
                }
                upstream[k] = up;
            }
            let grads = backprop(net, zs, &upstream).expect("chunk is nonempty");
            (hinge, grads)
        })
        .collect();
    let mut hinge = 0.0;
    let mut grads = crate::lipnet::ParamGrads::zeros(net);
    for (h, g) in &chunks {
        hinge += h;
        grads.add_assign(g);
    }

    // barrier part
    let cert = build_cert_matrix(net, lambda, l1)?;
    let check = cert_check(&cert);
    let lambdas = lambda.lambdas();
    let (barrier, bw, bl) = if check.psd {
        let inv = nalgebra::Cholesky::new(cert.matrix.clone())
            .expect("factorization just succeeded")
            .inverse();
        let adjoint = inv * (-cfg.c_barrier);
        let (gw, gl) = cert_adjoint_to_grads(net, lambda, &cert, &adjoint);
        (-cfg.c_barrier * check.logdet, gw, gl)
    } else {
        // finite penalty on the most negative eigenvalue, with a restoring
        // gradient through the corresponding eigenvector
        let eig = nalgebra::SymmetricEigen::new(cert.matrix.clone());
        let (kmin, mu) = eig
            .eigenvalues
            .iter()
            .cloned()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("matrix is nonempty");
        let v = eig.eigenvectors.column(kmin).clone_owned();
        let adjoint = &v * v.transpose() * (-NONPSD_PENALTY);
        let (gw, gl) = cert_adjoint_to_grads(net, lambda, &cert, &adjoint);
        (NONPSD_PENALTY * (-mu), gw, gl)
    };
    for (j, g) in bw.into_iter().enumerate() {
        grads.weights[j] += g;
    }
    // chain rule lambda = exp(theta)
    let theta_grads: Vec<DVector<f64>> = bl
        .into_iter()
        .zip(&lambdas)
        .map(|(g, lam)| g.component_mul(lam))
        .collect();
    Ok((
        LossValue {
            total: hinge + barrier,
            hinge,
            barrier,
        },
        LossGrads {
            weights: grads.weights,
            biases: grads.biases,
            theta: theta_grads,
        },
    ))
}

/// Both scenario-program constraints, exact floating-point comparisons, plus
/// the positive-semidefiniteness of the Lipschitz certificate.
pub fn verify_scp(
    net: &LipMlp,
    lambda: &LambdaParams,
    data: &CoordinateData,
    eta: f64,
    l1: f64,
) -> bool {
    let constraints_ok = data
        .inputs
        .par_iter()
        .zip(&data.targets)
        .all(|(z, t)| {
            let g = net.forward_concat(z).expect("dimension-checked inputs");
            g <= eta && *t - g <= 0.0
        });
    if !constraints_ok {
        return false;
    }
    match build_cert_matrix(net, lambda, l1) {
        Ok(cert) => cert_check(&cert).psd,
        Err(_) => false,
    }
}

struct Adam {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    m_t: Vec<DVector<f64>>,
    v_t: Vec<DVector<f64>>,
    step: usize,
}

impl Adam {
    fn new(net: &LipMlp, lambda: &LambdaParams) -> Self {
        Self {
            m_w: net
                .weights()
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            v_w: net
                .weights()
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            m_b: net.biases().iter().map(|b| DVector::zeros(b.len())).collect(),
            v_b: net.biases().iter().map(|b| DVector::zeros(b.len())).collect(),
            m_t: lambda.theta().iter().map(|t| DVector::zeros(t.len())).collect(),
            v_t: lambda.theta().iter().map(|t| DVector::zeros(t.len())).collect(),
            step: 0,
        }
    }

    fn update(&mut self, net: &mut LipMlp, lambda: &mut LambdaParams, g: &LossGrads, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - B1.powi(t);
        let corr2 = 1.0 - B2.powi(t);
        let scale = lr * corr2.sqrt() / corr1;
        let apply = |param: &mut f64, m: &mut f64, v: &mut f64, grad: f64| {
            *m = B1 * *m + (1.0 - B1) * grad;
            *v = B2 * *v + (1.0 - B2) * grad * grad;
            *param -= scale * *m / (v.sqrt() + EPS);
        };
        let weights = net.weights_mut();
        for j in 0..weights.len() {
            for (p, (m, (v, gr))) in weights[j].iter_mut().zip(
                self.m_w[j]
                    .iter_mut()
                    .zip(self.v_w[j].iter_mut().zip(g.weights[j].iter())),
            ) {
                apply(p, m, v, *gr);
            }
        }
        let biases = net.biases_mut();
        for j in 0..biases.len() {
            for (p, (m, (v, gr))) in biases[j].iter_mut().zip(
                self.m_b[j]
                    .iter_mut()
                    .zip(self.v_b[j].iter_mut().zip(g.biases[j].iter())),
            ) {
                apply(p, m, v, *gr);
            }
        }
        let thetas = lambda.theta_mut();
        for j in 0..thetas.len() {
            for (p, (m, (v, gr))) in thetas[j].iter_mut().zip(
                self.m_t[j]
                    .iter_mut()
                    .zip(self.v_t[j].iter_mut().zip(g.theta[j].iter())),
            ) {
                apply(p, m, v, *gr);
            }
        }
    }
}

/// First-order minimization at a fixed eta. Stops early once the hinge loss
/// is exactly zero and the certificate factorization passes; the verified
/// flag is always the outcome of the strict check.
pub fn train_fixed_eta(
    data: &CoordinateData,
    eta: f64,
    cfg: &TrainConfig,
    warm_start: Option<&NetArtifact>,
) -> Result<TrainResult> {
    let l1 = cfg.l1_for(data.coordinate);
    let delta = cfg.delta.min(eta / 4.0).max(0.0);
    let (mut net, mut lambda) = match warm_start {
        Some(a) => (a.net.clone(), a.lambda.clone()),
        None => {
            let mut widths = vec![data.input_dim];
            widths.extend_from_slice(&cfg.hidden_widths);
            widths.push(1);
            // start at a level inside the feasible window [max target, eta]
            let level = 0.5 * (data.max_target() + eta);
            let net = LipMlp::random(
                &widths,
                cfg.seed.wrapping_add(data.coordinate as u64),
                cfg.init_weight_scale,
                level,
            )?;
            let lambda = LambdaParams::unit(&cfg.hidden_widths);
            (net, lambda)
        }
    };
    let mut adam = Adam::new(&net, &lambda);
    let mut history = Vec::new();
    let mut verified = false;
    for epoch in 0..cfg.max_epochs {
        let (value, grads) = loss(&net, &lambda, data, eta, delta, cfg, l1)?;
        history.push(EpochRecord {
            epoch,
            hinge: value.hinge,
            barrier: value.barrier,
            total: value.total,
        });
        if value.hinge == 0.0 && verify_scp(&net, &lambda, data, eta, l1) {
            verified = true;
            break;
        }
        let lr = cfg.learning_rate / (1.0 + cfg.lr_decay * epoch as f64);
        adam.update(&mut net, &mut lambda, &grads, lr);
    }
    if !verified {
        verified = verify_scp(&net, &lambda, data, eta, l1);
    }
    Ok(TrainResult {
        eta,
        artifact: NetArtifact { net, lambda, l1 },
        verified,
        history,
        coordinate: data.coordinate,
    })
}

/// Bisection on eta: keeps hi verified and lo unverified, trains at the
/// midpoint warm-starting from the last verified weights, and returns the
/// smallest verified eta within tolerance.
pub fn bisect_eta(data: &CoordinateData, cfg: &TrainConfig) -> Result<TrainResult> {
    let max_target = data.max_target();
    let mut hi = if max_target > 0.0 {
        2.0 * max_target * 1.5
    } else {
        cfg.bisect_tol.max(1e-9)
    };
    let mut best = train_fixed_eta(data, hi, cfg, None)?;
    let mut doublings = 0;
    while !best.verified {
        if doublings >= 8 {
            let last = best.history.last();
            return Err(SimGapError::Training(format!(
                "coordinate {}: initial eta {hi} failed verification after 8 doublings; last losses: {last:?}",
                data.coordinate
            )));
        }
        hi *= 2.0;
        doublings += 1;
        best = train_fixed_eta(data, hi, cfg, None)?;
    }
    let mut lo = 0.0;
    let mut iter = 0;
    while hi - lo > cfg.bisect_tol && iter < cfg.bisect_max_iter {
        iter += 1;
        let mid = 0.5 * (lo + hi);
        let candidate = train_fixed_eta(data, mid, cfg, Some(&best.artifact))?;
        if candidate.verified {
            hi = mid;
            best = candidate;
        } else {
            lo = mid;
        }
    }
    Ok(best)
}

/// One training job per coordinate, run in parallel.
pub fn train_all_coordinates(ds: &GapDataset, cfg: &TrainConfig) -> Result<Vec<TrainResult>> {
    let data: Vec<CoordinateData> = (1..=ds.n())
        .map(|i| CoordinateData::from_dataset(ds, i))
        .collect::<Result<_>>()?;
    data.par_iter().map(|d| bisect_eta(d, cfg)).collect()
}
