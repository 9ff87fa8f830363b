//! Stage orchestration: cover, collect, train, estimate, certify, synthesize,
//! rollout, report. Every stage writes its artifacts under the run directory
//! tagged with the config content hash, and reuses them on rerun when the
//! hash still matches.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::certificate::{self, GapCertificate, ValidationReport};
use crate::config::{RunConfig, SpecChoice};
use crate::covering::{build_cover, CoverGrid};
use crate::dataset::{self, GapDataset};
use crate::dynamics::{DiscreteSystem, SystemPair};
use crate::error::{Result, SimGapError};
use crate::lipestimate::{estimate_l2u, estimate_l2x, EstimatorKind, LipEstimate};
use crate::lipnet::NetArtifact;
use crate::symctrl::{
    abstract_system, cells_touching_box, cells_with_center_in_box, rollout, synth_invariance,
    synth_reach_avoid, InputGrid, Rollout, RolloutSpec, SpecKind, StateGrid, SymbolicController,
    UncertainSystem, UniformGrid,
};
use crate::trainer::{train_all_coordinates, TrainResult};

pub const STAGES: &[&str] = &[
    "cover",
    "collect",
    "train",
    "estimate",
    "certify",
    "synthesize",
    "rollout",
    "report",
];

fn stage_err(stage: &str, e: SimGapError) -> SimGapError {
    match e {
        already @ SimGapError::Stage { .. } => already,
        other => SimGapError::Stage {
            stage: stage.into(),
            cause: other.to_string(),
        },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| SimGapError::Parse(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| SimGapError::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct TrainRecord {
    coordinate: usize,
    eta: f64,
    verified: bool,
    epochs_last_round: usize,
    wall_seconds: f64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct LipRecord {
    config_hash: String,
    l2x: Vec<LipEstimate>,
    l2u: Vec<LipEstimate>,
}

#[derive(Serialize, Deserialize)]
struct CertReport {
    config_hash: String,
    eta: Vec<f64>,
    l1: Vec<f64>,
    l2x: Vec<f64>,
    l2u: Vec<f64>,
    l_const: Vec<f64>,
    validation: ValidationReport,
}

#[derive(Serialize, Deserialize)]
struct StoredController {
    format: String,
    spec: String,
    gamma_scale: f64,
    state_grid: Vec<usize>,
    input_grid: Vec<usize>,
    policy: Vec<Option<usize>>,
    ranks: Vec<Option<usize>>,
    config_hash: String,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct RolloutSummary {
    pub label: String,
    pub verdict: String,
    pub in_spec: bool,
    pub steps: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct Report {
    pub scenario: String,
    pub config_hash: String,
    pub eta: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2x: Vec<f64>,
    pub l2u: Vec<f64>,
    pub l_const: Vec<f64>,
    pub validation_probes: usize,
    pub validation_violations: usize,
    pub winning_cells: usize,
    pub winning_cells_gamma_free: usize,
    pub rollouts: Vec<RolloutSummary>,
    /// wall-clock of report emission; lives in its own field so determinism
    /// checks can strip it
    pub timestamp: u64,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out)?;
        let hash = format!("{:016x}", cfg.content_hash());
        Ok(Pipeline { cfg, out, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn pair(&self) -> Result<SystemPair> {
        self.cfg.pair()
    }

    pub fn covers(&self) -> Result<(CoverGrid, CoverGrid)> {
        let pair = self.pair()?;
        Ok((
            build_cover(pair.nominal.state_box(), self.cfg.eps_x)?,
            build_cover(pair.nominal.input_box(), self.cfg.eps_u)?,
        ))
    }

    pub fn state_grid(&self) -> Result<StateGrid> {
        let pair = self.pair()?;
        UniformGrid::new(pair.nominal.state_box().clone(), self.cfg.state_grid.clone())
    }

    pub fn input_grid(&self) -> Result<InputGrid> {
        let pair = self.pair()?;
        UniformGrid::new(pair.nominal.input_box().clone(), self.cfg.input_grid.clone())
    }

    pub fn stage_cover(&self) -> Result<(CoverGrid, CoverGrid)> {
        let (sc, ic) = self.covers().map_err(|e| stage_err("cover", e))?;
        let write = |cover: &CoverGrid, path: &Path, prefix: &str| -> Result<()> {
            let labels: Vec<String> = (1..=cover.dim()).map(|d| format!("{prefix}{d}")).collect();
            let f = std::fs::File::create(path)?;
            cover.write_csv(std::io::BufWriter::new(f), &labels)
        };
        write(&sc, &self.path("state_cover.csv"), "x").map_err(|e| stage_err("cover", e))?;
        write(&ic, &self.path("input_cover.csv"), "u").map_err(|e| stage_err("cover", e))?;
        Ok((sc, ic))
    }

    pub fn stage_collect(&self) -> Result<GapDataset> {
        self.collect_inner().map_err(|e| stage_err("collect", e))
    }

    fn collect_inner(&self) -> Result<GapDataset> {
        let pair = self.pair()?;
        let (sc, ic) = self.covers()?;
        let csv = self.path("dataset.csv");
        let meta_path = self.path("dataset_meta.json");
        if csv.exists() && meta_path.exists() {
            let meta: dataset::DatasetMeta = read_json(&meta_path)?;
            if meta.config_hash == self.hash {
                return GapDataset::load_csv(&csv, sc, ic, pair.id.clone());
            }
        }
        let ds = dataset::generate(&pair, &sc, &ic)?;
        ds.save_csv(&csv)?;
        let meta = dataset::DatasetMeta {
            pair_id: pair.id.clone(),
            n: ds.n(),
            m: ds.m(),
            eps_x: self.cfg.eps_x,
            eps_u: self.cfg.eps_u,
            state_centers: sc.len(),
            input_centers: ic.len(),
            samples: ds.len(),
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
        };
        write_json(&meta_path, &meta)?;
        Ok(ds)
    }

    pub fn stage_train(&self) -> Result<Vec<TrainResult>> {
        self.train_inner().map_err(|e| stage_err("train", e))
    }

    fn train_inner(&self) -> Result<Vec<TrainResult>> {
        let ds = self.collect_inner()?;
        let n = ds.n();
        let mut cached = Vec::with_capacity(n);
        for i in 1..=n {
            let net_path = self.path(&format!("gap_i{i}.net"));
            let rec_path = self.path(&format!("train_i{i}.json"));
            if !(net_path.exists() && rec_path.exists()) {
                cached.clear();
                break;
            }
            let rec: TrainRecord = read_json(&rec_path)?;
            if rec.config_hash != self.hash || !rec.verified {
                cached.clear();
                break;
            }
            cached.push(TrainResult {
                eta: rec.eta,
                artifact: NetArtifact::load(&net_path)?,
                verified: rec.verified,
                history: vec![],
                coordinate: rec.coordinate,
            });
        }
        if cached.len() == n {
            return Ok(cached);
        }
        let start = Instant::now();
        let results = train_all_coordinates(&ds, &self.cfg.train)?;
        let wall = start.elapsed().as_secs_f64();
        for r in &results {
            let i = r.coordinate;
            r.artifact.save(&self.path(&format!("gap_i{i}.net")))?;
            let rec = TrainRecord {
                coordinate: i,
                eta: r.eta,
                verified: r.verified,
                epochs_last_round: r.history.len(),
                wall_seconds: wall,
                config_hash: self.hash.clone(),
            };
            write_json(&self.path(&format!("train_i{i}.json")), &rec)?;
        }
        Ok(results)
    }

    pub fn stage_estimate(&self) -> Result<(Vec<LipEstimate>, Vec<LipEstimate>)> {
        self.estimate_inner().map_err(|e| stage_err("estimate", e))
    }

    fn estimate_inner(&self) -> Result<(Vec<LipEstimate>, Vec<LipEstimate>)> {
        let path = self.path("lipschitz.json");
        if path.exists() {
            let rec: LipRecord = read_json(&path)?;
            if rec.config_hash == self.hash {
                return Ok((rec.l2x, rec.l2u));
            }
        }
        let pair = self.pair()?;
        let kind = if self.cfg.lip_extreme_value {
            EstimatorKind::ExtremeValue
        } else {
            EstimatorKind::InflatedMax
        };
        let n = pair.n();
        let mut l2x = Vec::with_capacity(n);
        let mut l2u = Vec::with_capacity(n);
        for i in 1..=n {
            l2x.push(estimate_l2x(
                &pair,
                i,
                self.cfg.lip_anchors,
                self.cfg.lip_pairs,
                self.cfg.lip_inflation,
                self.cfg.seed.wrapping_add(100 + i as u64),
                kind,
            )?);
            l2u.push(estimate_l2u(
                &pair,
                i,
                self.cfg.lip_anchors,
                self.cfg.lip_pairs,
                self.cfg.lip_inflation,
                self.cfg.seed.wrapping_add(200 + i as u64),
                kind,
            )?);
        }
        let rec = LipRecord {
            config_hash: self.hash.clone(),
            l2x: l2x.clone(),
            l2u: l2u.clone(),
        };
        write_json(&path, &rec)?;
        Ok((l2x, l2u))
    }

    pub fn stage_certify(&self) -> Result<(GapCertificate, ValidationReport)> {
        self.certify_inner().map_err(|e| stage_err("certify", e))
    }

    fn certify_inner(&self) -> Result<(GapCertificate, ValidationReport)> {
        let cert_path = self.path("certificate.bin");
        let report_path = self.path("certificate_report.json");
        if cert_path.exists() && report_path.exists() {
            let rec: CertReport = read_json(&report_path)?;
            if rec.config_hash == self.hash {
                return Ok((GapCertificate::load(&cert_path)?, rec.validation));
            }
        }
        let pair = self.pair()?;
        let train_results = self.train_inner()?;
        let (l2x, l2u) = self.estimate_inner()?;
        let cert = certificate::assemble(
            &train_results,
            &l2x,
            &l2u,
            self.cfg.eps_x,
            self.cfg.eps_u,
        )?;
        let validation = cert.validate(
            &pair,
            self.cfg.validation_probes,
            self.cfg.seed.wrapping_add(777),
        )?;
        cert.save(&cert_path)?;
        let rec = CertReport {
            config_hash: self.hash.clone(),
            eta: cert.eta.clone(),
            l1: cert.l1.clone(),
            l2x: cert.l2x.clone(),
            l2u: cert.l2u.clone(),
            l_const: cert.l_const.clone(),
            validation,
        };
        write_json(&report_path, &rec)?;
        Ok((cert, validation))
    }

    pub fn synth_with_scale(
        &self,
        cert: &GapCertificate,
        gamma_scale: f64,
    ) -> Result<SymbolicController> {
        let pair = self.pair()?;
        let sgrid = self.state_grid()?;
        let igrid = self.input_grid()?;
        let usys = UncertainSystem::new(pair.nominal.clone(), cert.clone())?
            .with_gamma_scale(gamma_scale);
        let abs = abstract_system(&usys, &sgrid, &igrid, &self.cfg.nominal_lipschitz())?;
        match self.cfg.spec {
            SpecChoice::Invariance => {
                let safe = cells_with_center_in_box(
                    &sgrid,
                    self.cfg.safe_box.as_ref().ok_or_else(|| {
                        SimGapError::Config("invariance needs safe_box".into())
                    })?,
                );
                // keep only cells fully inside the safe box
                let half = sgrid.half_widths();
                let safe_box = self.cfg.safe_box.as_ref().unwrap();
                let safe: Vec<bool> = safe
                    .iter()
                    .enumerate()
                    .map(|(c, &s)| {
                        s && {
                            let ctr = sgrid.center(c);
                            (0..sgrid.dim()).all(|d| {
                                ctr[d] - half[d] >= safe_box.lower()[d] - 1e-12
                                    && ctr[d] + half[d] <= safe_box.upper()[d] + 1e-12
                            })
                        }
                    })
                    .collect();
                synth_invariance(&abs, &safe)
            }
            SpecChoice::ReachAvoid => {
                let target = cells_with_center_in_box(
                    &sgrid,
                    self.cfg.target_box.as_ref().ok_or_else(|| {
                        SimGapError::Config("reach-avoid needs target_box".into())
                    })?,
                );
                let mut avoid = vec![false; sgrid.len()];
                for o in &self.cfg.obstacles {
                    for (c, touches) in cells_touching_box(&sgrid, o).into_iter().enumerate() {
                        if touches {
                            avoid[c] = true;
                        }
                    }
                }
                let target: Vec<bool> = target
                    .iter()
                    .zip(&avoid)
                    .map(|(&t, &a)| t && !a)
                    .collect();
                synth_reach_avoid(&abs, &target, &avoid)
            }
        }
    }

    fn save_controller(&self, ctrl: &SymbolicController, gamma_scale: f64, path: &Path) -> Result<()> {
        let stored = StoredController {
            format: "symbolic-controller-v1".into(),
            spec: match ctrl.spec {
                SpecKind::Invariance => "invariance".into(),
                SpecKind::ReachAvoid => "reach_avoid".into(),
            },
            gamma_scale,
            state_grid: self.cfg.state_grid.clone(),
            input_grid: self.cfg.input_grid.clone(),
            policy: ctrl.policy.clone(),
            ranks: ctrl.ranks.clone(),
            config_hash: self.hash.clone(),
        };
        write_json(path, &stored)
    }

    fn load_controller(&self, path: &Path) -> Result<Option<SymbolicController>> {
        if !path.exists() {
            return Ok(None);
        }
        let stored: StoredController = read_json(path)?;
        if stored.format != "symbolic-controller-v1" || stored.config_hash != self.hash {
            return Ok(None);
        }
        let spec = match stored.spec.as_str() {
            "invariance" => SpecKind::Invariance,
            "reach_avoid" => SpecKind::ReachAvoid,
            other => {
                return Err(SimGapError::Parse(format!(
                    "unknown controller spec `{other}`"
                )))
            }
        };
        Ok(Some(SymbolicController {
            spec,
            policy: stored.policy,
            ranks: stored.ranks,
        }))
    }

    /// Returns the gamma-aware and the gamma-free controller.
    pub fn stage_synthesize(&self) -> Result<(SymbolicController, SymbolicController)> {
        self.synthesize_inner()
            .map_err(|e| stage_err("synthesize", e))
    }

    fn synthesize_inner(&self) -> Result<(SymbolicController, SymbolicController)> {
        let aware_path = self.path("controller.bin");
        let free_path = self.path("controller_nogamma.bin");
        if let (Some(aware), Some(free)) = (
            self.load_controller(&aware_path)?,
            self.load_controller(&free_path)?,
        ) {
            return Ok((aware, free));
        }
        let (cert, _) = self.certify_inner()?;
        let aware = self.synth_with_scale(&cert, 1.0)?;
        let free = self.synth_with_scale(&cert, 0.0)?;
        self.save_controller(&aware, 1.0, &aware_path)?;
        self.save_controller(&free, 0.0, &free_path)?;
        self.write_winning_csv(&aware)?;
        Ok((aware, free))
    }

    fn write_winning_csv(&self, ctrl: &SymbolicController) -> Result<()> {
        use std::io::Write;
        let sgrid = self.state_grid()?;
        let igrid = self.input_grid()?;
        let f = std::fs::File::create(self.path("winning.csv"))?;
        let mut w = std::io::BufWriter::new(f);
        let mut header = vec!["cell".to_string()];
        for d in 1..=sgrid.dim() {
            header.push(format!("x{d}"));
        }
        header.push("input".into());
        for d in 1..=igrid.dim() {
            header.push(format!("u{d}"));
        }
        writeln!(w, "{}", header.join(","))?;
        for c in ctrl.winning_set() {
            let ctr = sgrid.center(c);
            let j = ctrl.input_for(c).unwrap();
            let u = igrid.center(j);
            let mut row = vec![c.to_string()];
            row.extend(ctr.iter().map(|v| format!("{v:.6}")));
            row.push(j.to_string());
            row.extend(u.iter().map(|v| format!("{v:.6}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn rollout_spec(&self) -> Result<RolloutSpec> {
        match self.cfg.spec {
            SpecChoice::Invariance => Ok(RolloutSpec::Invariance {
                safe: self
                    .cfg
                    .safe_box
                    .clone()
                    .ok_or_else(|| SimGapError::Config("invariance needs safe_box".into()))?,
            }),
            SpecChoice::ReachAvoid => Ok(RolloutSpec::ReachAvoid {
                target: self
                    .cfg
                    .target_box
                    .clone()
                    .ok_or_else(|| SimGapError::Config("reach-avoid needs target_box".into()))?,
                avoid: self.cfg.obstacles.clone(),
            }),
        }
    }

    pub fn run_rollout(
        &self,
        ctrl: &SymbolicController,
        executing: &DiscreteSystem,
        x0: &[f64],
    ) -> Result<Rollout> {
        let sgrid = self.state_grid()?;
        let igrid = self.input_grid()?;
        let spec = self.rollout_spec()?;
        Ok(rollout(
            ctrl,
            &sgrid,
            &igrid,
            executing,
            &spec,
            x0,
            self.cfg.rollout_steps,
        ))
    }

    fn write_trajectory(&self, label: &str, r: &Rollout) -> Result<()> {
        use std::io::Write;
        let pair = self.pair()?;
        let n = pair.n();
        let m = pair.m();
        let f = std::fs::File::create(self.path(&format!("traj_{label}.csv")))?;
        let mut w = std::io::BufWriter::new(f);
        let mut header = vec!["step".to_string()];
        for d in 1..=n {
            header.push(format!("x{d}"));
        }
        for d in 1..=m {
            header.push(format!("u{d}"));
        }
        header.push("in_spec".into());
        writeln!(w, "{}", header.join(","))?;
        for p in &r.trajectory {
            let mut row = vec![p.step.to_string()];
            row.extend(p.state.iter().map(|v| format!("{v:.9}")));
            match &p.input {
                Some(u) => row.extend(u.iter().map(|v| format!("{v:.9}"))),
                None => row.extend(std::iter::repeat("nan".to_string()).take(m)),
            }
            row.push(if p.in_spec { "1".into() } else { "0".into() });
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn stage_rollout(&self) -> Result<Vec<RolloutSummary>> {
        self.rollout_inner().map_err(|e| stage_err("rollout", e))
    }

    fn rollout_inner(&self) -> Result<Vec<RolloutSummary>> {
        let pair = self.pair()?;
        let (aware, free) = self.synthesize_inner()?;
        let mut summaries = Vec::new();
        let mut record = |label: &str, r: &Rollout| -> Result<()> {
            self.write_trajectory(label, r)?;
            summaries.push(RolloutSummary {
                label: label.into(),
                verdict: r.verdict.label(),
                in_spec: r.verdict.in_spec(),
                steps: r.trajectory.len().saturating_sub(1),
            });
            Ok(())
        };
        if !self.cfg.rollout_start.is_empty() {
            let r = self.run_rollout(&aware, &pair.nominal, &self.cfg.rollout_start)?;
            record("gamma_aware_nominal", &r)?;
            let r = self.run_rollout(&aware, &pair.surrogate, &self.cfg.rollout_start)?;
            record("gamma_aware_surrogate", &r)?;
        }
        if !self.cfg.adversarial_start.is_empty() {
            let r = self.run_rollout(&free, &pair.surrogate, &self.cfg.adversarial_start)?;
            record("gamma_free_surrogate", &r)?;
        }
        Ok(summaries)
    }

    pub fn stage_report(&self) -> Result<Report> {
        self.report_inner().map_err(|e| stage_err("report", e))
    }

    fn report_inner(&self) -> Result<Report> {
        let (cert, validation) = self.certify_inner()?;
        let (aware, free) = self.synthesize_inner()?;
        let rollouts = self.rollout_inner()?;
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let report = Report {
            scenario: self.cfg.name.clone(),
            config_hash: self.hash.clone(),
            eta: cert.eta.clone(),
            l1: cert.l1.clone(),
            l2x: cert.l2x.clone(),
            l2u: cert.l2u.clone(),
            l_const: cert.l_const.clone(),
            validation_probes: validation.probes,
            validation_violations: validation.violations,
            winning_cells: aware.winning_set().len(),
            winning_cells_gamma_free: free.winning_set().len(),
            rollouts,
            timestamp,
        };
        write_json(&self.path("report.json"), &report)?;
        self.write_report_csv(&report)?;
        Ok(report)
    }

    fn write_report_csv(&self, r: &Report) -> Result<()> {
        use std::io::Write;
        let f = std::fs::File::create(self.path("report.csv"))?;
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "key,value")?;
        writeln!(w, "scenario,{}", r.scenario)?;
        writeln!(w, "config_hash,{}", r.config_hash)?;
        for (i, e) in r.eta.iter().enumerate() {
            writeln!(w, "eta_{},{e:?}", i + 1)?;
        }
        for (i, l) in r.l_const.iter().enumerate() {
            writeln!(w, "l_const_{},{l:?}", i + 1)?;
        }
        writeln!(w, "validation_probes,{}", r.validation_probes)?;
        writeln!(w, "validation_violations,{}", r.validation_violations)?;
        writeln!(w, "winning_cells,{}", r.winning_cells)?;
        writeln!(w, "winning_cells_gamma_free,{}", r.winning_cells_gamma_free)?;
        for s in &r.rollouts {
            writeln!(w, "rollout_{},{}", s.label, s.verdict)?;
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: &str) -> Result<()> {
        match stage {
            "cover" => self.stage_cover().map(|_| ()),
            "collect" => self.stage_collect().map(|_| ()),
            "train" => self.stage_train().map(|_| ()),
            "estimate" => self.stage_estimate().map(|_| ()),
            "certify" => self.stage_certify().map(|_| ()),
            "synthesize" => self.stage_synthesize().map(|_| ()),
            "rollout" => self.stage_rollout().map(|_| ()),
            "report" => self.stage_report().map(|_| ()),
            other => Err(SimGapError::Config(format!("unknown stage `{other}`"))),
        }
    }

    pub fn run_all(&self) -> Result<Report> {
        self.stage_cover()?;
        self.stage_collect()?;
        self.stage_train()?;
        self.stage_estimate()?;
        self.stage_certify()?;
        self.stage_synthesize()?;
        self.stage_rollout()?;
        self.stage_report()
    }
}
