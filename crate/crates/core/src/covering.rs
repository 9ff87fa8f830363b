//! Finite epsilon-nets over boxes: every point of the box lies within
//! Euclidean distance epsilon of some grid center.

use std::io::Write;

use crate::dynamics::HyperBox;
use crate::error::{Result, SimGapError};

pub const DEFAULT_CENTER_CAP: u64 = 10_000_000;

/// Uniform axis-aligned grid of ball centers covering a box.
///
/// Per-dimension spacing is at most 2*eps/sqrt(d), so each cell's
/// half-diagonal is at most eps. Centers are indexed row-major
/// (last dimension fastest) and materialized on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverGrid {
    bounds: HyperBox,
    epsilon: f64,
    per_dim_counts: Vec<usize>,
    spacing: Vec<f64>,
}

impl CoverGrid {
    pub fn bounds(&self) -> &HyperBox {
        &self.bounds
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn per_dim_counts(&self) -> &[usize] {
        &self.per_dim_counts
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn len(&self) -> usize {
        self.per_dim_counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Center of the grid cell with the given row-major index.
    pub fn center(&self, index: usize) -> Vec<f64> {
        assert!(index < self.len(), "center index out of range");
        let mut rem = index;
        let d = self.dim();
        let mut out = vec![0.0; d];
        for k in (0..d).rev() {
            let c = self.per_dim_counts[k];
            let i = rem % c;
            rem /= c;
            out[k] = self.bounds.lower()[k] + (i as f64 + 0.5) * self.spacing[k];
        }
        out
    }

    pub fn centers(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.center(i))
    }

    fn index_of(&self, per_dim: &[usize]) -> usize {
        let mut idx = 0usize;
        for (k, i) in per_dim.iter().enumerate() {
            idx = idx * self.per_dim_counts[k] + i;
        }
        idx
    }

    /// Closest center to a point inside the box, in closed form from the
    /// uniform spacing. Equidistant points break toward the lexicographically
    /// smallest grid index.
    pub fn nearest_center(&self, point: &[f64]) -> Result<(usize, f64)> {
        if !self.bounds.contains(point) {
            return Err(SimGapError::Domain(format!(
                "point {point:?} lies outside the covered box"
            )));
        }
        let d = self.dim();
        let mut per_dim = vec![0usize; d];
        for k in 0..d {
            let t = (point[k] - self.bounds.lower()[k]) / self.spacing[k];
            let mut i = t.floor() as usize;
            // exact cell boundary: lower cell wins the tie
            if t == t.floor() && i > 0 {
                i -= 1;
            }
            per_dim[k] = i.min(self.per_dim_counts[k] - 1);
        }
        let idx = self.index_of(&per_dim);
        let c = self.center(idx);
        let dist = euclid(point, &c);
        Ok((idx, dist))
    }

    /// One center per row, header = dimension labels.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &[String]) -> Result<()> {
        writeln!(w, "{}", labels.join(","))?;
        for c in self.centers() {
            let row: Vec<String> = c.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

pub fn build_cover(bounds: &HyperBox, epsilon: f64) -> Result<CoverGrid> {
    build_cover_capped(bounds, epsilon, DEFAULT_CENTER_CAP)
}

pub fn build_cover_capped(bounds: &HyperBox, epsilon: f64, cap: u64) -> Result<CoverGrid> {
    if !(epsilon > 0.0) {
        return Err(SimGapError::Construction(format!(
            "cover radius must be positive, got {epsilon}"
        )));
    }
    let d = bounds.dim();
    let max_spacing = 2.0 * epsilon / (d as f64).sqrt();
    let mut per_dim_counts = Vec::with_capacity(d);
    let mut spacing = Vec::with_capacity(d);
    let mut total: u128 = 1;
    for k in 0..d {
        let w = bounds.width(k);
        let count = (w / max_spacing).ceil().max(1.0) as usize;
        per_dim_counts.push(count);
        spacing.push(w / count as f64);
        total = total.saturating_mul(count as u128);
    }
    if total > cap as u128 {
        return Err(SimGapError::CoverSize { count: total, cap });
    }
    Ok(CoverGrid {
        bounds: bounds.clone(),
        epsilon,
        per_dim_counts,
        spacing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box(d: usize) -> HyperBox {
        HyperBox::new(vec![0.0; d], vec![1.0; d]).unwrap()
    }

    #[test]
    fn one_dim_quarter_radius() {
        let g = build_cover(&unit_box(1), 0.25).unwrap();
        assert_eq!(g.per_dim_counts(), &[2]);
        assert_eq!(g.center(0), vec![0.25]);
        assert_eq!(g.center(1), vec![0.75]);
        assert_eq!(g.spacing(), &[0.5]);
    }

    #[test]
    fn two_dim_shrink_factor() {
        let g = build_cover(&unit_box(2), 0.25).unwrap();
        // spacing must be <= 2*0.25/sqrt(2) ~ 0.3536 -> 3 per axis
        assert_eq!(g.per_dim_counts(), &[3, 3]);
        assert_eq!(g.len(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let p = g.bounds().sample(&mut rng);
            let (_, dist) = g.nearest_center(&p).unwrap();
            assert!(dist <= 0.25);
        }
    }

    #[test]
    fn wide_radius_single_center() {
        let b = HyperBox::new(vec![-1.0], vec![1.0]).unwrap();
        let g = build_cover(&b, 1.0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.center(0), vec![0.0]);
    }

    #[test]
    fn nearest_center_arithmetic_and_ties() {
        let g = build_cover(&unit_box(1), 0.25).unwrap();
        let (idx, dist) = g.nearest_center(&[0.3]).unwrap();
        assert_eq!(idx, 0);
        assert!((dist - 0.05).abs() < 1e-15);
        let (_, dist) = g.nearest_center(&[0.75]).unwrap();
        assert_eq!(dist, 0.0);
        // 0.5 is equidistant to 0.25 and 0.75: lower index wins
        let (idx, dist) = g.nearest_center(&[0.5]).unwrap();
        assert_eq!(idx, 0);
        assert!((dist - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nearest_center_rejects_outside_point() {
        let g = build_cover(&unit_box(2), 0.25).unwrap();
        assert!(g.nearest_center(&[1.5, 0.5]).is_err());
    }

    #[test]
    fn nearest_center_matches_linear_scan() {
        let b = HyperBox::new(vec![-0.4, 0.0], vec![0.7, 2.0]).unwrap();
        let g = build_cover(&b, 0.09).unwrap();
        assert!(g.len() <= 10_000);
        let all: Vec<Vec<f64>> = g.centers().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let p = b.sample(&mut rng);
            let (idx, dist) = g.nearest_center(&p).unwrap();
            let (best_idx, best_dist) = all
                .iter()
                .enumerate()
                .map(|(i, c)| (i, euclid(&p, c)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert_eq!(idx, best_idx);
            assert!((dist - best_dist).abs() < 1e-12);
        }
    }

    #[test]
    fn center_count_matches_product() {
        let b = HyperBox::new(vec![0.0, -1.0, 2.0], vec![3.0, 1.0, 2.5]).unwrap();
        let g = build_cover(&b, 0.2).unwrap();
        let prod: usize = g.per_dim_counts().iter().product();
        assert_eq!(g.centers().count(), prod);
    }

    #[test]
    fn cap_is_enforced() {
        let b = unit_box(3);
        let err = build_cover_capped(&b, 1e-4, 1000).unwrap_err();
        match err {
            SimGapError::CoverSize { count, cap } => {
                assert!(count > 1000);
                assert_eq!(cap, 1000);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn all_centers_inside_box() {
        let b = HyperBox::new(vec![-2.0, 1.0], vec![-1.0, 4.0]).unwrap();
        let g = build_cover(&b, 0.3).unwrap();
        for c in g.centers() {
            assert!(b.contains(&c));
        }
    }
}
