//! Run configuration: plain-text sectioned key-value files plus bundled
//! scenario presets. Everything a pipeline run needs is reproducible from a
//! config and its seed; there are no entropy defaults.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use crate::dynamics::{
    mecanum_nominal, mecanum_surrogate, pendulum_nominal, pendulum_surrogate, HyperBox,
    SystemPair, MECANUM_GAIN_X, MECANUM_GAIN_Y, MECANUM_SLIP, MECANUM_TAU, PENDULUM_DAMPING,
    PENDULUM_G, PENDULUM_L, PENDULUM_MASS, PENDULUM_TORQUE_GAIN,
};
use crate::error::{Result, SimGapError};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Pendulum,
    Mecanum,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Pendulum => "pendulum",
            Scenario::Mecanum => "mecanum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(Scenario::Pendulum),
            "mecanum" => Ok(Scenario::Mecanum),
            other => Err(SimGapError::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecChoice {
    Invariance,
    ReachAvoid,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub name: String,
    pub scenario: Scenario,
    pub long_running: bool,
    pub tau: f64,
    /// pendulum surrogate parameters
    pub damping: f64,
    pub torque_gain: f64,
    /// mecanum surrogate parameters
    pub gain_x: f64,
    pub gain_y: f64,
    pub slip: f64,
    pub eps_x: f64,
    pub eps_u: f64,
    pub train: TrainConfig,
    pub lip_anchors: usize,
    pub lip_pairs: usize,
    pub lip_inflation: f64,
    pub lip_extreme_value: bool,
    pub validation_probes: usize,
    pub state_grid: Vec<usize>,
    pub input_grid: Vec<usize>,
    pub spec: SpecChoice,
    pub safe_box: Option<HyperBox>,
    pub target_box: Option<HyperBox>,
    pub obstacles: Vec<HyperBox>,
    pub rollout_steps: usize,
    pub rollout_start: Vec<f64>,
    pub adversarial_start: Vec<f64>,
    pub invariance_rollouts: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn pair(&self) -> Result<SystemPair> {
        match self.scenario {
            Scenario::Pendulum => SystemPair::new(
                pendulum_nominal(self.tau, PENDULUM_MASS, PENDULUM_G, PENDULUM_L)?,
                pendulum_surrogate(
                    self.tau,
                    PENDULUM_MASS,
                    PENDULUM_G,
                    PENDULUM_L,
                    self.damping,
                    self.torque_gain,
                )?,
                self.name.clone(),
            ),
            Scenario::Mecanum => SystemPair::new(
                mecanum_nominal(self.tau)?,
                mecanum_surrogate(self.tau, self.gain_x, self.gain_y, self.slip)?,
                self.name.clone(),
            ),
        }
    }

    /// Per-dimension bounds on |df_i/dx_k| of the nominal map over X.
    pub fn nominal_lipschitz(&self) -> Vec<Vec<f64>> {
        match self.scenario {
            Scenario::Pendulum => {
                let grav = 3.0 * PENDULUM_G * self.tau / (2.0 * PENDULUM_L);
                vec![vec![1.0, self.tau], vec![grav, 1.0]]
            }
            Scenario::Mecanum => vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pair = self.pair().map_err(|e| SimGapError::Config(e.to_string()))?;
        let sb = pair.nominal.state_box();
        let ib = pair.nominal.input_box();
        if !(self.eps_x > 0.0 && self.eps_u > 0.0) {
            return Err(SimGapError::Config("covering radii must be positive".into()));
        }
        if self.state_grid.len() != sb.dim() || self.input_grid.len() != ib.dim() {
            return Err(SimGapError::Config(
                "grid counts must match the state and input dimensions".into(),
            ));
        }
        if self.state_grid.iter().chain(&self.input_grid).any(|&c| c == 0) {
            return Err(SimGapError::Config("grid counts must be positive".into()));
        }
        let inside = |b: &HyperBox, outer: &HyperBox, what: &str| -> Result<()> {
            let ok = (0..outer.dim()).all(|d| {
                b.lower()[d] >= outer.lower()[d] && b.upper()[d] <= outer.upper()[d]
            });
            if ok {
                Ok(())
            } else {
                Err(SimGapError::Config(format!(
                    "{what} box must lie inside the scenario state box"
                )))
            }
        };
        match self.spec {
            SpecChoice::Invariance => {
                let safe = self.safe_box.as_ref().ok_or_else(|| {
                    SimGapError::Config("invariance specification needs safe_box".into())
                })?;
                inside(safe, sb, "safe")?;
            }
            SpecChoice::ReachAvoid => {
                let target = self.target_box.as_ref().ok_or_else(|| {
                    SimGapError::Config("reach-avoid specification needs target_box".into())
                })?;
                inside(target, sb, "target")?;
                for o in &self.obstacles {
                    inside(o, sb, "obstacle")?;
                }
            }
        }
        for (s, what) in [
            (&self.rollout_start, "rollout start"),
            (&self.adversarial_start, "adversarial start"),
        ] {
            if !s.is_empty() && !sb.contains(s) {
                return Err(SimGapError::Config(format!(
                    "{what} must lie inside the state box"
                )));
            }
        }
        if self.lip_inflation < 1.0 {
            return Err(SimGapError::Config(
                "Lipschitz inflation must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash for stale-artifact detection. Timestamps and
    /// output paths do not participate.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.to_text_without_out_dir().hash(&mut h);
        h.finish()
    }

    fn fmt_box(b: &HyperBox) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!("{} ; {}", join(b.lower()), join(b.upper()))
    }

    fn fmt_floats(v: &[f64]) -> String {
        v.iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn fmt_usizes(v: &[usize]) -> String {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn to_text_without_out_dir(&self) -> String {
        let mut s = String::new();
        s.push_str("[scenario]\n");
        s.push_str(&format!("name = {}\n", self.name));
        s.push_str(&format!("system = {}\n", self.scenario.as_str()));
        s.push_str(&format!("long_running = {}\n", self.long_running));
        s.push_str(&format!("tau = {:?}\n", self.tau));
        match self.scenario {
            Scenario::Pendulum => {
                s.push_str(&format!("damping = {:?}\n", self.damping));
                s.push_str(&format!("torque_gain = {:?}\n", self.torque_gain));
            }
            Scenario::Mecanum => {
                s.push_str(&format!("gain_x = {:?}\n", self.gain_x));
                s.push_str(&format!("gain_y = {:?}\n", self.gain_y));
                s.push_str(&format!("slip = {:?}\n", self.slip));
            }
        }
        s.push_str("\n[cover]\n");
        s.push_str(&format!("eps_x = {:?}\n", self.eps_x));
        s.push_str(&format!("eps_u = {:?}\n", self.eps_u));
        s.push_str("\n[train]\n");
        s.push_str(&format!("c1 = {:?}\n", self.train.c1));
        s.push_str(&format!("c2 = {:?}\n", self.train.c2));
        s.push_str(&format!("c_barrier = {:?}\n", self.train.c_barrier));
        s.push_str(&format!("delta = {:?}\n", self.train.delta));
        s.push_str(&format!("learning_rate = {:?}\n", self.train.learning_rate));
        s.push_str(&format!("lr_decay = {:?}\n", self.train.lr_decay));
        s.push_str(&format!("max_epochs = {}\n", self.train.max_epochs));
        s.push_str(&format!("bisect_tol = {:?}\n", self.train.bisect_tol));
        s.push_str(&format!("bisect_max_iter = {}\n", self.train.bisect_max_iter));
        s.push_str(&format!(
            "l1_targets = {}\n",
            Self::fmt_floats(&self.train.l1_targets)
        ));
        s.push_str(&format!(
            "hidden_widths = {}\n",
            Self::fmt_usizes(&self.train.hidden_widths)
        ));
        s.push_str(&format!(
            "init_weight_scale = {:?}\n",
            self.train.init_weight_scale
        ));
        s.push_str("\n[lipschitz]\n");
        s.push_str(&format!("anchors = {}\n", self.lip_anchors));
        s.push_str(&format!("pairs = {}\n", self.lip_pairs));
        s.push_str(&format!("inflation = {:?}\n", self.lip_inflation));
        s.push_str(&format!("extreme_value = {}\n", self.lip_extreme_value));
        s.push_str(&format!("validation_probes = {}\n", self.validation_probes));
        s.push_str("\n[grid]\n");
        s.push_str(&format!("state = {}\n", Self::fmt_usizes(&self.state_grid)));
        s.push_str(&format!("input = {}\n", Self::fmt_usizes(&self.input_grid)));
        s.push_str("\n[spec]\n");
        match self.spec {
            SpecChoice::Invariance => {
                s.push_str("kind = invariance\n");
                if let Some(b) = &self.safe_box {
                    s.push_str(&format!("safe_box = {}\n", Self::fmt_box(b)));
                }
            }
            SpecChoice::ReachAvoid => {
                s.push_str("kind = reach_avoid\n");
                if let Some(b) = &self.target_box {
                    s.push_str(&format!("target_box = {}\n", Self::fmt_box(b)));
                }
                for (i, o) in self.obstacles.iter().enumerate() {
                    s.push_str(&format!("obstacle{} = {}\n", i + 1, Self::fmt_box(o)));
                }
            }
        }
        s.push_str("\n[rollout]\n");
        s.push_str(&format!("steps = {}\n", self.rollout_steps));
        s.push_str(&format!(
            "start = {}\n",
            Self::fmt_floats(&self.rollout_start)
        ));
        s.push_str(&format!(
            "adversarial_start = {}\n",
            Self::fmt_floats(&self.adversarial_start)
        ));
        s.push_str(&format!(
            "invariance_rollouts = {}\n",
            self.invariance_rollouts
        ));
        s.push_str("\n[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = self.to_text_without_out_dir();
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SimGapError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            if current.is_empty() {
                return Err(SimGapError::Config(format!(
                    "line {}: key outside any [section]",
                    lineno + 1
                )));
            }
            sections
                .get_mut(&current)
                .unwrap()
                .insert(k.trim().to_string(), v.trim().to_string());
        }

        let get = |sec: &str, key: &str| -> Result<String> {
            sections
                .get(sec)
                .and_then(|m| m.get(key))
                .cloned()
                .ok_or_else(|| SimGapError::Config(format!("missing [{sec}] {key}")))
        };
        let opt = |sec: &str, key: &str| -> Option<String> {
            sections.get(sec).and_then(|m| m.get(key)).cloned()
        };
        let f64v = |sec: &str, key: &str| -> Result<f64> {
            get(sec, key)?
                .parse()
                .map_err(|_| SimGapError::Config(format!("[{sec}] {key} is not a number")))
        };
        let usizev = |sec: &str, key: &str| -> Result<usize> {
            get(sec, key)?
                .parse()
                .map_err(|_| SimGapError::Config(format!("[{sec}] {key} is not an integer")))
        };
        let boolv = |sec: &str, key: &str, default: bool| -> Result<bool> {
            match opt(sec, key) {
                None => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| SimGapError::Config(format!("[{sec}] {key} is not a boolean"))),
            }
        };
        let floats = |s: &str, what: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                return Ok(vec![]);
            }
            s.split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| SimGapError::Config(format!("{what}: bad number `{t}`")))
                })
                .collect()
        };
        let usizes = |s: &str, what: &str| -> Result<Vec<usize>> {
            s.split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| SimGapError::Config(format!("{what}: bad integer `{t}`")))
                })
                .collect()
        };
        let boxv = |s: &str, what: &str| -> Result<HyperBox> {
            let (lo, hi) = s.split_once(';').ok_or_else(|| {
                SimGapError::Config(format!("{what}: expected `lower ; upper`"))
            })?;
            HyperBox::new(floats(lo.trim(), what)?, floats(hi.trim(), what)?)
                .map_err(|e| SimGapError::Config(format!("{what}: {e}")))
        };

        let scenario = Scenario::parse(&get("scenario", "system")?)?;
        let spec = match get("spec", "kind")?.as_str() {
            "invariance" => SpecChoice::Invariance,
            "reach_avoid" => SpecChoice::ReachAvoid,
            other => {
                return Err(SimGapError::Config(format!(
                    "unknown specification kind `{other}`"
                )))
            }
        };
        let mut obstacles = Vec::new();
        let mut i = 1;
        while let Some(s) = opt("spec", &format!("obstacle{i}")) {
            obstacles.push(boxv(&s, &format!("obstacle{i}"))?);
            i += 1;
        }
        let seed_text = get("run", "seed")?;
        let seed: u64 = seed_text
            .parse()
            .map_err(|_| SimGapError::Config("[run] seed is not an integer".into()))?;

        let mut train = TrainConfig::default();
        train.c1 = f64v("train", "c1")?;
        train.c2 = f64v("train", "c2")?;
        train.c_barrier = f64v("train", "c_barrier")?;
        train.delta = f64v("train", "delta")?;
        train.learning_rate = f64v("train", "learning_rate")?;
        train.lr_decay = f64v("train", "lr_decay")?;
        train.max_epochs = usizev("train", "max_epochs")?;
        train.bisect_tol = f64v("train", "bisect_tol")?;
        train.bisect_max_iter = usizev("train", "bisect_max_iter")?;
        train.l1_targets = floats(&get("train", "l1_targets")?, "l1_targets")?;
        train.hidden_widths = usizes(&get("train", "hidden_widths")?, "hidden_widths")?;
        train.init_weight_scale = f64v("train", "init_weight_scale")?;
        train.seed = seed;

        let cfg = RunConfig {
            name: get("scenario", "name")?,
            scenario,
            long_running: boolv("scenario", "long_running", false)?,
            tau: f64v("scenario", "tau")?,
            damping: opt("scenario", "damping")
                .map(|s| s.parse().unwrap_or(PENDULUM_DAMPING))
                .unwrap_or(PENDULUM_DAMPING),
            torque_gain: opt("scenario", "torque_gain")
                .map(|s| s.parse().unwrap_or(PENDULUM_TORQUE_GAIN))
                .unwrap_or(PENDULUM_TORQUE_GAIN),
            gain_x: opt("scenario", "gain_x")
                .map(|s| s.parse().unwrap_or(MECANUM_GAIN_X))
                .unwrap_or(MECANUM_GAIN_X),
            gain_y: opt("scenario", "gain_y")
                .map(|s| s.parse().unwrap_or(MECANUM_GAIN_Y))
                .unwrap_or(MECANUM_GAIN_Y),
            slip: opt("scenario", "slip")
                .map(|s| s.parse().unwrap_or(MECANUM_SLIP))
                .unwrap_or(MECANUM_SLIP),
            eps_x: f64v("cover", "eps_x")?,
            eps_u: f64v("cover", "eps_u")?,
            train,
            lip_anchors: usizev("lipschitz", "anchors")?,
            lip_pairs: usizev("lipschitz", "pairs")?,
            lip_inflation: f64v("lipschitz", "inflation")?,
            lip_extreme_value: boolv("lipschitz", "extreme_value", false)?,
            validation_probes: usizev("lipschitz", "validation_probes")?,
            state_grid: usizes(&get("grid", "state")?, "state grid")?,
            input_grid: usizes(&get("grid", "input")?, "input grid")?,
            spec,
            safe_box: opt("spec", "safe_box")
                .map(|s| boxv(&s, "safe_box"))
                .transpose()?,
            target_box: opt("spec", "target_box")
                .map(|s| boxv(&s, "target_box"))
                .transpose()?,
            obstacles,
            rollout_steps: usizev("rollout", "steps")?,
            rollout_start: floats(&get("rollout", "start")?, "rollout start")?,
            adversarial_start: floats(
                &get("rollout", "adversarial_start")?,
                "adversarial start",
            )?,
            invariance_rollouts: usizev("rollout", "invariance_rollouts")?,
            seed,
            out_dir: PathBuf::from(
                opt("run", "out_dir").unwrap_or_else(|| format!("runs/{}", get("scenario", "name").unwrap_or_default())),
            ),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pendulum invariance scenario sized for a desk run. The sampling time is
/// coarser than the module default so one control step has enough authority
/// to dominate the certified disturbance at the chosen grid resolution.
pub fn pendulum_desk() -> RunConfig {
    let mut train = TrainConfig::default();
    train.l1_targets = vec![0.002, 0.008];
    train.hidden_widths = vec![16];
    train.max_epochs = 400;
    train.bisect_tol = 1e-4;
    train.seed = 11;
    RunConfig {
        name: "pendulum_desk".into(),
        scenario: Scenario::Pendulum,
        long_running: false,
        tau: 0.02,
        damping: PENDULUM_DAMPING,
        torque_gain: 0.8,
        gain_x: MECANUM_GAIN_X,
        gain_y: MECANUM_GAIN_Y,
        slip: MECANUM_SLIP,
        eps_x: 0.02,
        eps_u: 0.05,
        train,
        lip_anchors: 32,
        lip_pairs: 20_000,
        lip_inflation: 1.1,
        lip_extreme_value: false,
        validation_probes: 100_000,
        state_grid: vec![41, 51],
        input_grid: vec![21],
        spec: SpecChoice::Invariance,
        safe_box: Some(HyperBox::new(vec![0.0, -0.25], vec![0.2, 0.25]).unwrap()),
        target_box: None,
        obstacles: vec![],
        rollout_steps: 2000,
        rollout_start: vec![0.1, 0.0],
        adversarial_start: vec![0.0098, 0.0098],
        invariance_rollouts: 100,
        seed: 11,
        out_dir: PathBuf::from("runs/pendulum_desk"),
    }
}

/// Mecanum reach-avoid scenario sized for a desk run. The wall has a narrow
/// gap that only an abstraction ignoring the certified gap treats as passable;
/// the sound controller detours over the top opening.
pub fn mecanum_desk() -> RunConfig {
    let mut train = TrainConfig::default();
    train.l1_targets = vec![0.05, 0.05];
    train.hidden_widths = vec![16];
    train.max_epochs = 300;
    train.seed = 23;
    RunConfig {
        name: "mecanum_desk".into(),
        scenario: Scenario::Mecanum,
        long_running: false,
        tau: MECANUM_TAU,
        damping: PENDULUM_DAMPING,
        torque_gain: PENDULUM_TORQUE_GAIN,
        gain_x: MECANUM_GAIN_X,
        gain_y: MECANUM_GAIN_Y,
        slip: 0.2,
        eps_x: 0.05,
        eps_u: 0.3,
        train,
        lip_anchors: 32,
        lip_pairs: 20_000,
        lip_inflation: 1.1,
        lip_extreme_value: false,
        validation_probes: 100_000,
        state_grid: vec![60, 60],
        input_grid: vec![5, 5],
        spec: SpecChoice::ReachAvoid,
        target_box: Some(HyperBox::new(vec![2.5, 2.5], vec![3.0, 3.0]).unwrap()),
        safe_box: None,
        obstacles: vec![
            HyperBox::new(vec![1.3, 0.0], vec![1.8, 1.0]).unwrap(),
            HyperBox::new(vec![1.3, 1.15], vec![1.8, 2.3]).unwrap(),
        ],
        rollout_steps: 120,
        rollout_start: vec![0.3, 0.3],
        adversarial_start: vec![1.0, 1.05],
        invariance_rollouts: 0,
        seed: 23,
        out_dir: PathBuf::from("runs/mecanum_desk"),
    }
}

/// Mecanum variant with a deliberately coarse input cover. The sampled maximum
/// gap underestimates the continuum maximum, so a certificate whose inflation
/// constant is stripped fails validation while the full one stays sound.
pub fn mecanum_adversarial() -> RunConfig {
    let mut cfg = mecanum_desk();
    cfg.name = "mecanum_adversarial".into();
    cfg.eps_u = 0.5;
    cfg.train.seed = 29;
    cfg.seed = 29;
    cfg.out_dir = PathBuf::from("runs/mecanum_adversarial");
    cfg
}

/// Paper-scale pendulum preset; hours-level, kept for completeness.
pub fn pendulum_full() -> RunConfig {
    let mut cfg = pendulum_desk();
    cfg.name = "pendulum_full".into();
    cfg.long_running = true;
    cfg.eps_x = 0.004;
    cfg.eps_u = 0.01;
    cfg.state_grid = vec![101, 126];
    cfg.input_grid = vec![41];
    cfg.train.max_epochs = 2000;
    cfg.out_dir = PathBuf::from("runs/pendulum_full");
    cfg
}

/// Paper-scale mecanum preset; hours-level, kept for completeness.
pub fn mecanum_full() -> RunConfig {
    let mut cfg = mecanum_desk();
    cfg.name = "mecanum_full".into();
    cfg.long_running = true;
    cfg.eps_x = 0.01;
    cfg.eps_u = 0.014;
    cfg.state_grid = vec![150, 150];
    cfg.input_grid = vec![11, 11];
    cfg.train.max_epochs = 2000;
    cfg.out_dir = PathBuf::from("runs/mecanum_full");
    cfg
}

pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "pendulum_desk" => Some(pendulum_desk()),
        "mecanum_desk" => Some(mecanum_desk()),
        "mecanum_adversarial" => Some(mecanum_adversarial()),
        "pendulum_full" => Some(pendulum_full()),
        "mecanum_full" => Some(mecanum_full()),
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "pendulum_desk",
        "mecanum_desk",
        "mecanum_adversarial",
        "pendulum_full",
        "mecanum_full",
    ]
}
