//! Paired-transition dataset: one (x_r, u_s, f_hat, f_nom) tuple per
//! combination of state and input cover centers.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covering::CoverGrid;
use crate::dynamics::SystemPair;
use crate::error::{Result, SimGapError};

#[derive(Clone, Debug, PartialEq)]
pub struct GapSample {
    pub x_r: Vec<f64>,
    pub u_s: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub f_nom: Vec<f64>,
}

/// N*M samples in row-major order: state-major, input-minor.
#[derive(Clone, Debug)]
pub struct GapDataset {
    pub samples: Vec<GapSample>,
    pub state_cover: CoverGrid,
    pub input_cover: CoverGrid,
    pub pair_id: String,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct DatasetMeta {
    pub pair_id: String,
    pub n: usize,
    pub m: usize,
    pub eps_x: f64,
    pub eps_u: f64,
    pub state_centers: usize,
    pub input_centers: usize,
    pub samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn generate(
    pair: &SystemPair,
    state_cover: &CoverGrid,
    input_cover: &CoverGrid,
) -> Result<GapDataset> {
    if state_cover.bounds() != pair.nominal.state_box() {
        return Err(SimGapError::Domain(
            "state cover box does not match the system pair".into(),
        ));
    }
    if input_cover.bounds() != pair.nominal.input_box() {
        return Err(SimGapError::Domain(
            "input cover box does not match the system pair".into(),
        ));
    }
    let m_count = input_cover.len();
    let inputs: Vec<Vec<f64>> = input_cover.centers().collect();
    // chunked over state centers; collect preserves state-major order
    let samples: Vec<GapSample> = (0..state_cover.len())
        .into_par_iter()
        .flat_map_iter(|r| {
            let x = state_cover.center(r);
            let inputs = &inputs;
            let pair = pair;
            (0..m_count).map(move |s| {
                let u = inputs[s].clone();
                let f_hat = pair.surrogate.step(&x, &u);
                let f_nom = pair.nominal.step(&x, &u);
                GapSample {
                    x_r: x.clone(),
                    u_s: u,
                    f_hat,
                    f_nom,
                }
            })
        })
        .collect();
    Ok(GapDataset {
        samples,
        state_cover: state_cover.clone(),
        input_cover: input_cover.clone(),
        pair_id: pair.id.clone(),
    })
}

impl GapDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n(&self) -> usize {
        self.state_cover.dim()
    }

    pub fn m(&self) -> usize {
        self.input_cover.dim()
    }

    /// |f_hat_i - f_nom_i| per sample, dataset order. Coordinates are 1-based.
    pub fn gap_targets(&self, i: usize) -> Result<Vec<f64>> {
        if i < 1 || i > self.n() {
            return Err(SimGapError::Domain(format!(
                "coordinate index {i} out of range 1..={}",
                self.n()
            )));
        }
        Ok(self
            .samples
            .iter()
            .map(|s| (s.f_hat[i - 1] - s.f_nom[i - 1]).abs())
            .collect())
    }

    pub fn max_gap_target(&self, i: usize) -> Result<f64> {
        Ok(self
            .gap_targets(i)?
            .into_iter()
            .fold(0.0f64, f64::max))
    }

    /// Fixed column schema x.., u.., f_hat.., f_nom.. with 17-significant-digit
    /// decimal rendering so round-trips are exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n();
        let m = self.m();
        let mut header = Vec::new();
        for d in 0..n {
            header.push(format!("x{}", d + 1));
        }
        for d in 0..m {
            header.push(format!("u{}", d + 1));
        }
        for d in 0..n {
            header.push(format!("f_hat{}", d + 1));
        }
        for d in 0..n {
            header.push(format!("f_nom{}", d + 1));
        }
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = s
                .x_r
                .iter()
                .chain(&s.u_s)
                .chain(&s.f_hat)
                .chain(&s.f_nom)
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Rebuilds a dataset from CSV; covers must be supplied (they are cheap to
    /// reconstruct from the run config and are not stored in the CSV).
    pub fn load_csv(
        path: &Path,
        state_cover: CoverGrid,
        input_cover: CoverGrid,
        pair_id: String,
    ) -> Result<GapDataset> {
        let f = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(f);
        let n = state_cover.dim();
        let m = input_cover.dim();
        let mut samples = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| SimGapError::Parse(format!("line {lineno}: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 2 * n + m + n {
                return Err(SimGapError::Parse(format!(
                    "line {lineno}: expected {} columns, got {}",
                    3 * n + m,
                    vals.len()
                )));
            }
            samples.push(GapSample {
                x_r: vals[0..n].to_vec(),
                u_s: vals[n..n + m].to_vec(),
                f_hat: vals[n + m..2 * n + m].to_vec(),
                f_nom: vals[2 * n + m..].to_vec(),
            });
        }
        Ok(GapDataset {
            samples,
            state_cover,
            input_cover,
            pair_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covering::build_cover;
    use crate::dynamics::*;

    fn mecanum_pair() -> SystemPair {
        SystemPair::new(
            mecanum_nominal(0.3).unwrap(),
            mecanum_surrogate(0.3, MECANUM_GAIN_X, MECANUM_GAIN_Y, MECANUM_SLIP).unwrap(),
            "mecanum_default",
        )
        .unwrap()
    }

    #[test]
    fn sample_count_is_product() {
        let pair = mecanum_pair();
        let sc = build_cover(pair.nominal.state_box(), 1.2).unwrap();
        let ic = build_cover(pair.nominal.input_box(), 0.6).unwrap();
        let ds = generate(&pair, &sc, &ic).unwrap();
        assert_eq!(ds.len(), sc.len() * ic.len());
    }

    #[test]
    fn zero_perturbation_pair_has_zero_targets() {
        let pair = SystemPair::new(
            mecanum_nominal(0.3).unwrap(),
            mecanum_surrogate(0.3, 1.0, 1.0, 0.0).unwrap(),
            "mecanum_identity",
        )
        .unwrap();
        let sc = build_cover(pair.nominal.state_box(), 0.8).unwrap();
        let ic = build_cover(pair.nominal.input_box(), 0.5).unwrap();
        let ds = generate(&pair, &sc, &ic).unwrap();
        for s in &ds.samples {
            assert_eq!(s.f_hat, s.f_nom);
        }
        assert!(ds.gap_targets(1).unwrap().iter().all(|g| *g == 0.0));
        assert!(ds.gap_targets(2).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn mecanum_sample_values() {
        // sample at x=(1,1), u=(1,0): f_nom=(1.3,1.0), f_hat=(1.276,1.009)
        let pair = mecanum_pair();
        let f_nom = pair.nominal.step(&[1.0, 1.0], &[1.0, 0.0]);
        let f_hat = pair.surrogate.step(&[1.0, 1.0], &[1.0, 0.0]);
        assert!((f_nom[0] - 1.3).abs() < 1e-15);
        assert!((f_hat[0] - 1.276).abs() < 1e-15);
        assert!((f_hat[1] - 1.009).abs() < 1e-15);
        // gap target arithmetic
        assert!(((f_hat[0] - f_nom[0]).abs() - 0.024).abs() < 1e-15);
    }

    #[test]
    fn gap_targets_index_checks() {
        let pair = mecanum_pair();
        let sc = build_cover(pair.nominal.state_box(), 1.2).unwrap();
        let ic = build_cover(pair.nominal.input_box(), 0.8).unwrap();
        let ds = generate(&pair, &sc, &ic).unwrap();
        assert!(ds.gap_targets(0).is_err());
        assert!(ds.gap_targets(3).is_err());
        assert_eq!(ds.gap_targets(1).unwrap().len(), ds.len());
    }

    #[test]
    fn generation_is_deterministic() {
        let pair = mecanum_pair();
        let sc = build_cover(pair.nominal.state_box(), 0.5).unwrap();
        let ic = build_cover(pair.nominal.input_box(), 0.4).unwrap();
        let a = generate(&pair, &sc, &ic).unwrap();
        let b = generate(&pair, &sc, &ic).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let pair = mecanum_pair();
        let sc = build_cover(pair.nominal.state_box(), 0.9).unwrap();
        let ic = build_cover(pair.nominal.input_box(), 0.7).unwrap();
        let ds = generate(&pair, &sc, &ic).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        ds.save_csv(&path).unwrap();
        let back = GapDataset::load_csv(&path, sc, ic, ds.pair_id.clone()).unwrap();
        assert_eq!(ds.samples, back.samples);
    }

    #[test]
    fn box_mismatch_is_rejected() {
        let pair = mecanum_pair();
        let wrong = build_cover(&HyperBox::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap(), 0.5)
            .unwrap();
        let ic = build_cover(pair.nominal.input_box(), 0.5).unwrap();
        assert!(generate(&pair, &wrong, &ic).is_err());
    }
}
