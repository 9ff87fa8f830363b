//! Feed-forward gap network with a semidefinite Lipschitz certificate.
//!
//! The network maps a concatenated (x, u) vector to a single nonnegative
//! output (softplus output activation). Its Lipschitz constant is bounded by
//! `l1` whenever the structured block matrix assembled by
//! [`build_cert_matrix`] is positive semidefinite; hidden activations must be
//! slope-restricted to [0, 1] (tanh and softplus qualify).

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::HyperBox;
use crate::error::{Result, SimGapError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Tanh => t.tanh(),
            Activation::Softplus => softplus(t),
            Activation::Identity => t,
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let y = t.tanh();
                1.0 - y * y
            }
            Activation::Softplus => sigmoid(t),
            Activation::Identity => 1.0,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            other => Err(SimGapError::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

fn softplus(t: f64) -> f64 {
    // stable for large |t|
    if t > 30.0 {
        t
    } else if t < -30.0 {
        t.exp()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Feed-forward network gamma_i^(w)(x, u) with nonnegative scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct LipMlp {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    hidden: Activation,
    output: Activation,
}

impl LipMlp {
    /// `widths` = [n+m, h_1, ..., h_L, 1].
    pub fn new(
        widths: Vec<usize>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 {
            return Err(SimGapError::Construction(
                "network needs at least input and scalar output layers".into(),
            ));
        }
        if weights.len() != widths.len() - 1 || biases.len() != widths.len() - 1 {
            return Err(SimGapError::Construction(
                "one weight matrix and bias vector per layer required".into(),
            ));
        }
        for j in 0..weights.len() {
            if weights[j].nrows() != widths[j + 1]
                || weights[j].ncols() != widths[j]
                || biases[j].len() != widths[j + 1]
            {
                return Err(SimGapError::Construction(format!(
                    "layer {j}: weight/bias shape does not match widths"
                )));
            }
        }
        Ok(Self {
            widths,
            weights,
            biases,
            hidden,
            output,
        })
    }

    /// Small random weights, zero hidden biases, output bias chosen so the
    /// initial output level is `output_level`.
    pub fn random(widths: &[usize], seed: u64, weight_scale: f64, output_level: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for j in 0..widths.len() - 1 {
            let rows = widths[j + 1];
            let cols = widths[j];
            let w = if weight_scale > 0.0 {
                DMatrix::from_fn(rows, cols, |_, _| {
                    rng.random_range(-weight_scale..weight_scale)
                })
            } else {
                DMatrix::zeros(rows, cols)
            };
            weights.push(w);
            biases.push(DVector::zeros(rows));
        }
        // softplus^{-1}(y) = ln(e^y - 1)
        let level = output_level.max(1e-12);
        let inv = if level > 30.0 {
            level
        } else {
            (level.exp() - 1.0).max(1e-300).ln()
        };
        let last = biases.len() - 1;
        biases[last][0] = inv;
        Self::new(
            widths.to_vec(),
            weights,
            biases,
            Activation::Tanh,
            Activation::Softplus,
        )
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    fn activation_for_layer(&self, j: usize) -> Activation {
        if j + 1 == self.weights.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward_concat(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.input_dim() {
            return Err(SimGapError::Domain(format!(
                "input dimension {} does not match network input width {}",
                z.len(),
                self.input_dim()
            )));
        }
        let mut a = DVector::from_column_slice(z);
        for j in 0..self.weights.len() {
            let pre = &self.weights[j] * a + &self.biases[j];
            let act = self.activation_for_layer(j);
            a = pre.map(|t| act.apply(t));
        }
        Ok(a[0])
    }

    pub fn forward(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        let z: Vec<f64> = x.iter().chain(u).copied().collect();
        self.forward_concat(&z)
    }

    /// Forward pass keeping pre-activations for the backward pass.
    fn forward_trace(&self, z: &[f64]) -> (f64, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut post = vec![DVector::from_column_slice(z)];
        let mut pre = Vec::new();
        for j in 0..self.weights.len() {
            let p = &self.weights[j] * post.last().unwrap() + &self.biases[j];
            let act = self.activation_for_layer(j);
            post.push(p.map(|t| act.apply(t)));
            pre.push(p);
        }
        (post.last().unwrap()[0], pre, post)
    }
}

/// Per-parameter gradients matching a network's layer shapes.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ParamGrads {
    pub fn zeros(net: &LipMlp) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

/// Exact reverse-mode gradients of `sum_k upstream[k] * net(batch[k])`
/// with respect to every weight and bias.
pub fn backprop(net: &LipMlp, batch: &[Vec<f64>], upstream: &[f64]) -> Result<ParamGrads> {
    if batch.is_empty() {
        return Err(SimGapError::Domain("backprop needs a nonempty batch".into()));
    }
    if batch.len() != upstream.len() {
        return Err(SimGapError::Domain(
            "one upstream gradient per batch element required".into(),
        ));
    }
    let mut grads = ParamGrads::zeros(net);
    for (z, &g0) in batch.iter().zip(upstream) {
        if z.len() != net.input_dim() {
            return Err(SimGapError::Domain(
                "batch element dimension mismatch".into(),
            ));
        }
        if g0 == 0.0 {
            continue;
        }
        let (_, pre, post) = net.forward_trace(z);
        // delta over pre-activations, starting from the scalar output
        let last = net.weights.len() - 1;
        let act = net.activation_for_layer(last);
        let mut delta = DVector::from_element(1, g0 * act.derivative(pre[last][0]));
        for j in (0..=last).rev() {
            grads.weights[j] += &delta * post[j].transpose();
            grads.biases[j] += &delta;
            if j > 0 {
                let back = net.weights[j].transpose() * &delta;
                let act = net.activation_for_layer(j - 1);
                delta = DVector::from_fn(back.len(), |k, _| back[k] * act.derivative(pre[j - 1][k]));
            }
        }
    }
    Ok(grads)
}

/// Diagonal multipliers, one vector per hidden layer, kept strictly positive
/// by the exp(theta) parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaParams {
    theta: Vec<DVector<f64>>,
}

impl LambdaParams {
    pub fn unit(hidden_widths: &[usize]) -> Self {
        Self {
            theta: hidden_widths.iter().map(|&h| DVector::zeros(h)).collect(),
        }
    }

    pub fn from_theta(theta: Vec<DVector<f64>>) -> Self {
        Self { theta }
    }

    pub fn theta(&self) -> &[DVector<f64>] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.theta
    }

    pub fn lambdas(&self) -> Vec<DVector<f64>> {
        self.theta.iter().map(|t| t.map(f64::exp)).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.theta.len()
    }
}

/// Block matrix whose positive semidefiniteness certifies the bound.
#[derive(Clone, Debug)]
pub struct LipCertMatrix {
    pub matrix: DMatrix<f64>,
    /// offsets[k] = starting row/col of block k; blocks are
    /// [input, hidden_1, .., hidden_L, output].
    pub offsets: Vec<usize>,
    /// top-left multiplier; rho = l1^2 (squared-bound convention).
    pub rho: f64,
    pub l1: f64,
}

/// Assembles the certificate matrix: rho*I top-left, 2*Lambda_j diagonal
/// blocks, -w_jT Lambda_{j+1} couplings, identity bottom-right.
pub fn build_cert_matrix(net: &LipMlp, lambda: &LambdaParams, l1: f64) -> Result<LipCertMatrix> {
    let hidden = net.hidden_widths();
    if lambda.num_layers() != hidden.len()
        || lambda
            .theta
            .iter()
            .zip(hidden)
            .any(|(t, &h)| t.len() != h)
    {
        return Err(SimGapError::Domain(
            "multiplier widths do not match the network's hidden layers".into(),
        ));
    }
    if !(l1 > 0.0) {
        return Err(SimGapError::Domain(format!(
            "lipschitz bound must be positive, got {l1}"
        )));
    }
    let lambdas = lambda.lambdas();
    let mut block_sizes = vec![net.input_dim()];
    block_sizes.extend_from_slice(hidden);
    block_sizes.push(1);
    let mut offsets = Vec::with_capacity(block_sizes.len());
    let mut acc = 0;
    for &s in &block_sizes {
        offsets.push(acc);
        acc += s;
    }
    let dim = acc;
    let rho = l1 * l1;
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..net.input_dim() {
        m[(i, i)] = rho;
    }
    for (j, lam) in lambdas.iter().enumerate() {
        let o = offsets[j + 1];
        for b in 0..lam.len() {
            m[(o + b, o + b)] = 2.0 * lam[b];
        }
        // coupling block between layer j's inputs and its multipliers:
        // entry (row in block j, col in block j+1) = -w_j[b, a] * lambda[b]
        let w = &net.weights[j];
        let op = offsets[j];
        for b in 0..w.nrows() {
            for a in 0..w.ncols() {
                let v = -w[(b, a)] * lam[b];
                m[(op + a, o + b)] = v;
                m[(o + b, op + a)] = v;
            }
        }
    }
    // final layer: plain -w_L coupling and identity output block
    let last = net.weights.len() - 1;
    let w = &net.weights[last];
    let o_prev = offsets[offsets.len() - 2];
    let o_out = offsets[offsets.len() - 1];
    m[(o_out, o_out)] = 1.0;
    for a in 0..w.ncols() {
        let v = -w[(0, a)];
        m[(o_prev + a, o_out)] = v;
        m[(o_out, o_prev + a)] = v;
    }
    Ok(LipCertMatrix {
        matrix: m,
        offsets,
        rho,
        l1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertCheck {
    pub psd: bool,
    pub logdet: f64,
}

/// Symmetric factorization test: PSD (in the strict Cholesky sense) with
/// log-determinant on success, `psd=false, logdet=-inf` on failure.
pub fn cert_check(cert: &LipCertMatrix) -> CertCheck {
    match nalgebra::Cholesky::new(cert.matrix.clone()) {
        Some(chol) => {
            let logdet: f64 = (0..cert.matrix.nrows())
                .map(|k| chol.l_dirty()[(k, k)].ln())
                .sum::<f64>()
                * 2.0;
            CertCheck { psd: true, logdet }
        }
        None => CertCheck {
            psd: false,
            logdet: f64::NEG_INFINITY,
        },
    }
}

/// Pulls a matrix-space adjoint (dLoss/dM, symmetric) back to parameter
/// gradients through the sparse structure of the certificate matrix.
pub fn cert_adjoint_to_grads(
    net: &LipMlp,
    lambda: &LambdaParams,
    cert: &LipCertMatrix,
    adjoint: &DMatrix<f64>,
) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let lambdas = lambda.lambdas();
    let offsets = &cert.offsets;
    let num_hidden = lambdas.len();
    let mut grad_w: Vec<DMatrix<f64>> = net
        .weights
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut grad_lambda: Vec<DVector<f64>> =
        lambdas.iter().map(|l| DVector::zeros(l.len())).collect();
    for j in 0..num_hidden {
        let lam = &lambdas[j];
        let w = &net.weights[j];
        let op = offsets[j];
        let o = offsets[j + 1];
        for b in 0..w.nrows() {
            // diagonal 2*lambda entry
            grad_lambda[j][b] += 2.0 * adjoint[(o + b, o + b)];
            for a in 0..w.ncols() {
                let s = adjoint[(op + a, o + b)];
                grad_w[j][(b, a)] += -2.0 * lam[b] * s;
                grad_lambda[j][b] += -2.0 * w[(b, a)] * s;
            }
        }
    }
    let last = net.weights.len() - 1;
    let o_prev = offsets[offsets.len() - 2];
    let o_out = offsets[offsets.len() - 1];
    for a in 0..net.weights[last].ncols() {
        grad_w[last][(0, a)] += -2.0 * adjoint[(o_prev + a, o_out)];
    }
    (grad_w, grad_lambda)
}

/// Max sampled slope |net(p) - net(q)| / ||p - q|| over random pairs of
/// concatenated (x, u) points: a lower bound on the true constant.
pub fn empirical_lipschitz(
    net: &LipMlp,
    state_box: &HyperBox,
    input_box: &HyperBox,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(SimGapError::Domain("at least one trial required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    let draw = |rng: &mut ChaCha8Rng| {
        let mut z = state_box.sample(rng);
        z.extend(input_box.sample(rng));
        z
    };
    for _ in 0..trials {
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let dist: f64 = p
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist < 1e-12 {
            continue;
        }
        let slope = (net.forward_concat(&p)? - net.forward_concat(&q)?).abs() / dist;
        best = best.max(slope);
    }
    Ok(best)
}

/// Trained network bundled with its multipliers and target bound; the unit
/// persisted by the `train` stage.
#[derive(Clone, Debug, PartialEq)]
pub struct NetArtifact {
    pub net: LipMlp,
    pub lambda: LambdaParams,
    pub l1: f64,
}

impl fmt::Display for NetArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lipmlp v1")?;
        let widths: Vec<String> = self.net.widths.iter().map(|w| w.to_string()).collect();
        writeln!(f, "widths {}", widths.join(" "))?;
        writeln!(f, "hidden {}", self.net.hidden.id())?;
        writeln!(f, "output {}", self.net.output.id())?;
        writeln!(f, "l1 {:?}", self.l1)?;
        writeln!(f, "rho l1_squared")?;
        for (j, w) in self.net.weights.iter().enumerate() {
            let vals: Vec<String> = (0..w.nrows())
                .flat_map(|r| (0..w.ncols()).map(move |c| (r, c)))
                .map(|(r, c)| format!("{:?}", w[(r, c)]))
                .collect();
            writeln!(f, "w {} {}", j, vals.join(" "))?;
            let vals: Vec<String> = self.net.biases[j].iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "b {} {}", j, vals.join(" "))?;
        }
        for (j, t) in self.lambda.theta.iter().enumerate() {
            let vals: Vec<String> = t.iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "theta {} {}", j, vals.join(" "))?;
        }
        Ok(())
    }
}

impl NetArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "lipmlp v1" {
            return Err(SimGapError::Parse(format!(
                "unexpected net file header `{header}`"
            )));
        }
        let mut widths: Vec<usize> = Vec::new();
        let mut hidden = Activation::Tanh;
        let mut output = Activation::Softplus;
        let mut l1 = 0.0f64;
        let mut weights: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut biases: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut thetas: Vec<(usize, Vec<f64>)> = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = match parts.next() {
                Some(k) => k,
                None => continue,
            };
            let rest: Vec<&str> = parts.collect();
            let parse_floats = |toks: &[&str]| -> Result<Vec<f64>> {
                toks.iter()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|e| SimGapError::Parse(format!("{e}: `{t}`")))
                    })
                    .collect()
            };
            match key {
                "widths" => {
                    widths = rest
                        .iter()
                        .map(|t| {
                            t.parse::<usize>()
                                .map_err(|e| SimGapError::Parse(e.to_string()))
                        })
                        .collect::<Result<_>>()?
                }
                "hidden" => hidden = Activation::from_id(rest[0])?,
                "output" => output = Activation::from_id(rest[0])?,
                "l1" => l1 = rest[0]
                    .parse()
                    .map_err(|e| SimGapError::Parse(format!("{e}")))?,
                "rho" => {
                    if rest[0] != "l1_squared" {
                        return Err(SimGapError::Parse(format!(
                            "unknown rho convention `{}`",
                            rest[0]
                        )));
                    }
                }
                "w" | "b" | "theta" => {
                    let idx: usize = rest[0]
                        .parse()
                        .map_err(|e| SimGapError::Parse(format!("{e}")))?;
                    let vals = parse_floats(&rest[1..])?;
                    match key {
                        "w" => weights.push((idx, vals)),
                        "b" => biases.push((idx, vals)),
                        _ => thetas.push((idx, vals)),
                    }
                }
                other => {
                    return Err(SimGapError::Parse(format!(
                        "unknown net file key `{other}`"
                    )))
                }
            }
        }
        if widths.len() < 2 {
            return Err(SimGapError::Parse("missing widths line".into()));
        }
        weights.sort_by_key(|(j, _)| *j);
        biases.sort_by_key(|(j, _)| *j);
        thetas.sort_by_key(|(j, _)| *j);
        let ws: Vec<DMatrix<f64>> = weights
            .into_iter()
            .enumerate()
            .map(|(j, (_, vals))| DMatrix::from_row_slice(widths[j + 1], widths[j], &vals))
            .collect();
        let bs: Vec<DVector<f64>> = biases
            .into_iter()
            .map(|(_, vals)| DVector::from_vec(vals))
            .collect();
        let net = LipMlp::new(widths, ws, bs, hidden, output)?;
        let lambda = LambdaParams::from_theta(
            thetas
                .into_iter()
                .map(|(_, vals)| DVector::from_vec(vals))
                .collect(),
        );
        Ok(NetArtifact { net, lambda, l1 })
    }
}
