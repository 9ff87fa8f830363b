//! Discrete-time transition maps: nominal models and perturbed-physics
//! surrogates standing in for high-fidelity simulators.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SimGapError};

/// Axis-aligned box, used for the bounded state set X and input set U.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl HyperBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(SimGapError::Construction(format!(
                "box bounds must be nonempty and of equal dimension (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (d, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) {
                return Err(SimGapError::Construction(format!(
                    "box dimension {d}: lower {lo} must be < upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(p, (lo, hi))| *p >= *lo && *p <= *hi)
    }

    /// Uniform sample from the box.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect()
    }
}

type StepFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Discrete-time system x(k+1) = f(x(k), u(k)) with sampling time tau.
///
/// `step` is a pure function; systems are immutable after construction and
/// safe to call from many threads.
#[derive(Clone)]
pub struct DiscreteSystem {
    pub name: String,
    n: usize,
    m: usize,
    state_box: HyperBox,
    input_box: HyperBox,
    tau: f64,
    step: StepFn,
}

impl fmt::Debug for DiscreteSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("tau", &self.tau)
            .finish()
    }
}

impl DiscreteSystem {
    pub fn new(
        name: impl Into<String>,
        state_box: HyperBox,
        input_box: HyperBox,
        tau: f64,
        step: StepFn,
    ) -> Result<Self> {
        if tau <= 0.0 {
            return Err(SimGapError::Construction(format!(
                "sampling time must be positive, got {tau}"
            )));
        }
        Ok(Self {
            name: name.into(),
            n: state_box.dim(),
            m: input_box.dim(),
            state_box,
            input_box,
            tau,
            step,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn state_box(&self) -> &HyperBox {
        &self.state_box
    }

    pub fn input_box(&self) -> &HyperBox {
        &self.input_box
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// One transition. Successors may leave the state box; no clamping here,
    /// downstream consumers decide how to treat out-of-box successors.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(u.len(), self.m);
        (self.step)(x, u)
    }
}

/// Nominal model f paired with a surrogate simulator map f-hat over the same
/// state/input boxes and sampling time.
#[derive(Clone, Debug)]
pub struct SystemPair {
    pub nominal: DiscreteSystem,
    pub surrogate: DiscreteSystem,
    pub id: String,
}

impl SystemPair {
    pub fn new(nominal: DiscreteSystem, surrogate: DiscreteSystem, id: impl Into<String>) -> Result<Self> {
        if nominal.n != surrogate.n
            || nominal.m != surrogate.m
            || nominal.state_box != surrogate.state_box
            || nominal.input_box != surrogate.input_box
            || nominal.tau != surrogate.tau
        {
            return Err(SimGapError::Construction(
                "system pair members must share n, m, boxes, and tau".into(),
            ));
        }
        Ok(Self {
            nominal,
            surrogate,
            id: id.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.nominal.n
    }

    pub fn m(&self) -> usize {
        self.nominal.m
    }

    /// Per-coordinate gap |f_hat_i - f_i| at one point.
    pub fn gap(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let a = self.surrogate.step(x, u);
        let b = self.nominal.step(x, u);
        a.iter().zip(&b).map(|(p, q)| (p - q).abs()).collect()
    }
}

fn check_positive(value: f64, what: &str) -> Result<()> {
    if value > 0.0 {
        Ok(())
    } else {
        Err(SimGapError::Construction(format!(
            "{what} must be positive, got {value}"
        )))
    }
}

/// Pendulum nominal model:
/// x1' = x1 + tau x2, x2' = -(3 g tau / 2 l) sin x1 + x2 + 3 tau u / (m l^2).
pub fn pendulum_nominal(tau: f64, m_mass: f64, g: f64, l: f64) -> Result<DiscreteSystem> {
    check_positive(tau, "tau")?;
    check_positive(m_mass, "mass")?;
    check_positive(l, "rod length")?;
    let state_box = HyperBox::new(vec![-0.2, -0.25], vec![0.2, 0.25])?;
    let input_box = HyperBox::new(vec![-1.0], vec![1.0])?;
    let grav = 3.0 * g * tau / (2.0 * l);
    let gain = 3.0 * tau / (m_mass * l * l);
    DiscreteSystem::new(
        "pendulum",
        state_box,
        input_box,
        tau,
        Arc::new(move |x, u| {
            vec![
                x[0] + tau * x[1],
                -grav * x[0].sin() + x[1] + gain * u[0],
            ]
        }),
    )
}

pub const PENDULUM_TAU: f64 = 0.005;
pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_G: f64 = 9.81;
pub const PENDULUM_L: f64 = 1.0;

/// Pendulum surrogate: viscous damping on x2 plus a torque gain, standing in
/// for the physics-engine model of the simulator.
pub fn pendulum_surrogate(
    tau: f64,
    m_mass: f64,
    g: f64,
    l: f64,
    damping: f64,
    torque_gain: f64,
) -> Result<DiscreteSystem> {
    check_positive(tau, "tau")?;
    check_positive(m_mass, "mass")?;
    check_positive(l, "rod length")?;
    if damping < 0.0 {
        return Err(SimGapError::Construction(format!(
            "damping must be nonnegative, got {damping}"
        )));
    }
    if !(torque_gain > 0.0 && torque_gain <= 1.2) {
        return Err(SimGapError::Construction(format!(
            "torque gain must lie in (0, 1.2], got {torque_gain}"
        )));
    }
    let state_box = HyperBox::new(vec![-0.2, -0.25], vec![0.2, 0.25])?;
    let input_box = HyperBox::new(vec![-1.0], vec![1.0])?;
    let grav = 3.0 * g * tau / (2.0 * l);
    let gain = 3.0 * tau / (m_mass * l * l);
    let damp = 3.0 * damping * tau / (m_mass * l * l);
    DiscreteSystem::new(
        "pendulum_surrogate",
        state_box,
        input_box,
        tau,
        Arc::new(move |x, u| {
            vec![
                x[0] + tau * x[1],
                -grav * x[0].sin() + x[1] - damp * x[1] + gain * torque_gain * u[0],
            ]
        }),
    )
}

pub const PENDULUM_DAMPING: f64 = 0.05;
pub const PENDULUM_TORQUE_GAIN: f64 = 0.9;

/// Mecanum-bot kinematics: x' = x + tau u per axis.
pub fn mecanum_nominal(tau: f64) -> Result<DiscreteSystem> {
    check_positive(tau, "tau")?;
    let state_box = HyperBox::new(vec![0.0, 0.0], vec![3.0, 3.0])?;
    let input_box = HyperBox::new(vec![-1.0, -1.0], vec![1.0, 1.0])?;
    DiscreteSystem::new(
        "mecanum",
        state_box,
        input_box,
        tau,
        Arc::new(move |x, u| vec![x[0] + tau * u[0], x[1] + tau * u[1]]),
    )
}

pub const MECANUM_TAU: f64 = 0.3;

/// Mecanum surrogate: per-axis velocity gains plus cross-axis slip.
pub fn mecanum_surrogate(tau: f64, gain_x: f64, gain_y: f64, slip: f64) -> Result<DiscreteSystem> {
    check_positive(tau, "tau")?;
    for (g, what) in [(gain_x, "gain_x"), (gain_y, "gain_y")] {
        if !(g > 0.0 && g <= 1.2) {
            return Err(SimGapError::Construction(format!(
                "{what} must lie in (0, 1.2], got {g}"
            )));
        }
    }
    if slip < 0.0 {
        return Err(SimGapError::Construction(format!(
            "slip must be nonnegative, got {slip}"
        )));
    }
    let state_box = HyperBox::new(vec![0.0, 0.0], vec![3.0, 3.0])?;
    let input_box = HyperBox::new(vec![-1.0, -1.0], vec![1.0, 1.0])?;
    DiscreteSystem::new(
        "mecanum_surrogate",
        state_box,
        input_box,
        tau,
        Arc::new(move |x, u| {
            vec![
                x[0] + tau * gain_x * u[0] + tau * slip * u[1],
                x[1] + tau * gain_y * u[1] + tau * slip * u[0],
            ]
        }),
    )
}

pub const MECANUM_GAIN_X: f64 = 0.92;
pub const MECANUM_GAIN_Y: f64 = 0.95;
pub const MECANUM_SLIP: f64 = 0.03;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pendulum_equilibrium_at_origin() {
        let sys = pendulum_nominal(PENDULUM_TAU, 1.0, PENDULUM_G, 1.0).unwrap();
        assert_eq!(sys.step(&[0.0, 0.0], &[0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn pendulum_step_matches_direct_substitution() {
        let sys = pendulum_nominal(0.005, 1.0, 9.81, 1.0).unwrap();
        let next = sys.step(&[0.1, 0.0], &[0.0]);
        assert!((next[0] - 0.1).abs() < 1e-15);
        // x2' = -(3*9.81*0.005/2) * sin(0.1) = -0.0073575 * sin(0.1)
        let expected = -(3.0 * 9.81 * 0.005 / 2.0) * 0.1_f64.sin();
        assert!((next[1] - expected).abs() < 1e-15);
        assert!((next[1] + 0.0073452).abs() < 1e-5);

        let next = sys.step(&[0.0, 0.2], &[0.0]);
        assert!((next[0] - 0.001).abs() < 1e-15);
        assert!((next[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mecanum_step_arithmetic() {
        let sys = mecanum_nominal(0.3).unwrap();
        let next = sys.step(&[1.0, 2.0], &[0.5, -1.0]);
        assert!((next[0] - 1.15).abs() < 1e-15);
        assert!((next[1] - 1.70).abs() < 1e-15);
        assert_eq!(sys.step(&[0.0, 0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
        // successor may exit X; no clamping
        let next = sys.step(&[3.0, 3.0], &[1.0, 1.0]);
        assert!((next[0] - 3.3).abs() < 1e-15);
        assert!(!sys.state_box().contains(&next));
    }

    #[test]
    fn pendulum_surrogate_damping_term() {
        let sys =
            pendulum_surrogate(0.005, 1.0, 9.81, 1.0, 0.05, 1.0).unwrap();
        let next = sys.step(&[0.0, 0.2], &[0.0]);
        // x2' = 0.2 - 3*0.05*0.005*0.2 = 0.19985
        assert!((next[1] - 0.19985).abs() < 1e-15);
        assert_eq!(sys.step(&[0.0, 0.0], &[0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn mecanum_surrogate_arithmetic() {
        let sys = mecanum_surrogate(0.3, MECANUM_GAIN_X, MECANUM_GAIN_Y, MECANUM_SLIP).unwrap();
        let next = sys.step(&[1.0, 1.0], &[1.0, 0.0]);
        assert!((next[0] - 1.276).abs() < 1e-15);
        assert!((next[1] - 1.009).abs() < 1e-15);
        assert_eq!(sys.step(&[0.0, 0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_perturbation_surrogates_reduce_to_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pn = pendulum_nominal(0.005, 1.0, 9.81, 1.0).unwrap();
        let ps = pendulum_surrogate(0.005, 1.0, 9.81, 1.0, 0.0, 1.0).unwrap();
        let mn = mecanum_nominal(0.3).unwrap();
        let ms = mecanum_surrogate(0.3, 1.0, 1.0, 0.0).unwrap();
        for _ in 0..1000 {
            let x = pn.state_box().sample(&mut rng);
            let u = pn.input_box().sample(&mut rng);
            assert_eq!(pn.step(&x, &u), ps.step(&x, &u));
            let x = mn.state_box().sample(&mut rng);
            let u = mn.input_box().sample(&mut rng);
            assert_eq!(mn.step(&x, &u), ms.step(&x, &u));
        }
    }

    #[test]
    fn step_is_deterministic() {
        let sys = pendulum_nominal(0.005, 1.0, 9.81, 1.0).unwrap();
        let a = sys.step(&[0.123, -0.04], &[0.7]);
        let b = sys.step(&[0.123, -0.04], &[0.7]);
        assert_eq!(a, b);
    }

    #[test]
    fn pair_rejects_mismatched_members() {
        let p = pendulum_nominal(0.005, 1.0, 9.81, 1.0).unwrap();
        let m = mecanum_nominal(0.3).unwrap();
        assert!(SystemPair::new(p.clone(), m, "bad").is_err());
        let p2 = pendulum_nominal(0.01, 1.0, 9.81, 1.0).unwrap();
        assert!(SystemPair::new(p.clone(), p2, "bad_tau").is_err());
        let ok = pendulum_surrogate(0.005, 1.0, 9.81, 1.0, 0.05, 0.9).unwrap();
        assert!(SystemPair::new(p, ok, "ok").is_ok());
    }

    #[test]
    fn construction_errors_on_bad_parameters() {
        assert!(pendulum_nominal(0.0, 1.0, 9.81, 1.0).is_err());
        assert!(pendulum_nominal(0.005, -1.0, 9.81, 1.0).is_err());
        assert!(mecanum_nominal(-0.3).is_err());
        assert!(pendulum_surrogate(0.005, 1.0, 9.81, 1.0, -0.1, 0.9).is_err());
        assert!(pendulum_surrogate(0.005, 1.0, 9.81, 1.0, 0.0, 1.3).is_err());
        assert!(mecanum_surrogate(0.3, 0.0, 1.0, 0.0).is_err());
        assert!(HyperBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(HyperBox::new(vec![], vec![]).is_err());
    }
}
