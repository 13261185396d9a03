//! Segmentation metrics and continual-learning aggregates.
//!
//! Per-pair scores are plain IoU and boundary IoU over binary masks. The
//! continual protocol records a lower-triangular [`MetricMatrix`] of scores
//! `IoU_{k,t}` (task `k`'s test set, measured after training task `t`),
//! from which the last / average / forgetting aggregates derive.
//!
//! Task indices are 0-based throughout the crate; the harness converts to
//! 1-based labels only when writing reports.

use crate::error::{Error, Result};

/// A binary mask with row-major storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask bits must fill the grid");
        Mask { width, height, bits }
    }

    /// Binarize logits at probability 0.5, i.e. logit > 0.
    pub fn from_logits(width: usize, height: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), width * height);
        Mask { width, height, bits: logits.iter().map(|&v| v > 0.0).collect() }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// 0/1 floats, the form the losses consume.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn same_shape(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// L∞ erosion by `d`: a pixel survives when every pixel within
    /// Chebyshev distance `d` (image border counts as background) is set.
    fn erode(&self, d: usize) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        let di = d as isize;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if !self.bits[y as usize * self.width + x as usize] {
                    continue;
                }
                let mut keep = true;
                'scan: for dy in -di..=di {
                    for dx in -di..=di {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0
                            || ny < 0
                            || nx >= self.width as isize
                            || ny >= self.height as isize
                            || !self.bits[ny as usize * self.width + nx as usize]
                        {
                            keep = false;
                            break 'scan;
                        }
                    }
                }
                if keep {
                    out.bits[y as usize * self.width + x as usize] = true;
                }
            }
        }
        out
    }

    /// Boundary band of width `d`: the mask minus its `d`-erosion.
    pub fn boundary_band(&self, d: usize) -> Mask {
        let eroded = self.erode(d);
        let bits = self
            .bits
            .iter()
            .zip(eroded.bits.iter())
            .map(|(&m, &e)| m && !e)
            .collect();
        Mask { width: self.width, height: self.height, bits }
    }
}

/// Intersection over union; the empty/empty pair scores 1 by convention.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_shape(gt, "iou")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.bits.iter().zip(gt.bits.iter()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// IoU between the `d`-pixel boundary bands of the two masks.
pub fn boundary_iou(pred: &Mask, gt: &Mask, d: usize) -> Result<f64> {
    assert!(d >= 1, "boundary_iou: band width must be at least 1");
    pred.same_shape(gt, "boundary_iou")?;
    iou(&pred.boundary_band(d), &gt.boundary_band(d))
}

/// Default boundary band width at the 64×64 toy resolution.
pub const BOUNDARY_BAND: usize = 2;

/// Lower-triangular record of `(IoU, BIoU)` per `(k, t)`, `k ≤ t`, 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMatrix {
    n: usize,
    cells: Vec<Option<(f64, f64)>>,
}

impl MetricMatrix {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "metric matrix needs at least one task");
        MetricMatrix { n, cells: vec![None; n * (n + 1) / 2] }
    }

    pub fn task_count(&self) -> usize {
        self.n
    }

    fn idx(&self, k: usize, t: usize) -> usize {
        assert!(k <= t && t < self.n, "metric matrix index ({k},{t}) out of triangle");
        t * (t + 1) / 2 + k
    }

    pub fn set(&mut self, k: usize, t: usize, iou: f64, biou: f64) {
        let i = self.idx(k, t);
        self.cells[i] = Some((iou, biou));
    }

    pub fn get(&self, k: usize, t: usize) -> Option<(f64, f64)> {
        self.cells[self.idx(k, t)]
    }

    /// Every `(k, t)` with `k ≤ t < n` filled.
    pub fn complete(&self) -> Result<()> {
        for t in 0..self.n {
            for k in 0..=t {
                if self.cells[self.idx(k, t)].is_none() {
                    return Err(Error::IncompleteMatrix { missing_k: k, missing_t: t });
                }
            }
        }
        Ok(())
    }

    pub fn iou_at(&self, k: usize, t: usize) -> f64 {
        self.get(k, t).expect("cell must be filled").0
    }

    pub fn biou_at(&self, k: usize, t: usize) -> f64 {
        self.get(k, t).expect("cell must be filled").1
    }

    /// Mean over row `t` (the average over tasks seen so far).
    pub fn row_mean(&self, t: usize) -> (f64, f64) {
        let mut si = 0.0;
        let mut sb = 0.0;
        for k in 0..=t {
            let (i, b) = self.get(k, t).expect("cell must be filled");
            si += i;
            sb += b;
        }
        let m = (t + 1) as f64;
        (si / m, sb / m)
    }

    /// All filled cells in `(k, t, iou, biou)` order, row-major by `t`.
    pub fn cells(&self) -> Vec<(usize, usize, f64, f64)> {
        let mut out = Vec::new();
        for t in 0..self.n {
            for k in 0..=t {
                if let Some((i, b)) = self.get(k, t) {
                    out.push((k, t, i, b));
                }
            }
        }
        out
    }
}

/// Mean of the final row: performance on every task after the last one.
pub fn last_metrics(m: &MetricMatrix) -> Result<(f64, f64)> {
    m.complete()?;
    Ok(m.row_mean(m.n - 1))
}

/// Mean over `t` of the row means: the trajectory average.
pub fn avg_metrics(m: &MetricMatrix) -> Result<(f64, f64)> {
    m.complete()?;
    let mut si = 0.0;
    let mut sb = 0.0;
    for t in 0..m.n {
        let (i, b) = m.row_mean(t);
        si += i;
        sb += b;
    }
    Ok((si / m.n as f64, sb / m.n as f64))
}

/// Average forgetting: for each non-final task, the best score it ever had
/// before the final task minus its final score, averaged over tasks.
///
/// The max runs over `j ∈ {k, .., N-2}` — scores before task `k` do not
/// exist. Improvements show up as negative forgetting.
pub fn ff_metrics(m: &MetricMatrix) -> Result<(f64, f64)> {
    m.complete()?;
    if m.n < 2 {
        return Err(Error::ForgettingUndefined);
    }
    let last_t = m.n - 1;
    let mut fi = 0.0;
    let mut fb = 0.0;
    for k in 0..m.n - 1 {
        let mut best_i = f64::NEG_INFINITY;
        let mut best_b = f64::NEG_INFINITY;
        for j in k..last_t {
            best_i = best_i.max(m.iou_at(k, j));
            best_b = best_b.max(m.biou_at(k, j));
        }
        fi += best_i - m.iou_at(k, last_t);
        fb += best_b - m.biou_at(k, last_t);
    }
    let denom = (m.n - 1) as f64;
    Ok((fi / denom, fb / denom))
}

/// Summary of one run: final/average/forgetting aggregates plus optional
/// routing accuracy and the per-task final scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub last_iou: f64,
    pub avg_iou: f64,
    pub ff_iou: f64,
    pub last_biou: f64,
    pub avg_biou: f64,
    pub ff_biou: f64,
    pub query_accuracy: Option<f64>,
    pub per_task_final: Vec<(f64, f64)>,
}

impl MetricReport {
    pub fn from_matrix(m: &MetricMatrix, query_accuracy: Option<f64>) -> Result<Self> {
        let (last_iou, last_biou) = last_metrics(m)?;
        let (avg_iou, avg_biou) = avg_metrics(m)?;
        let (ff_iou, ff_biou) = if m.task_count() >= 2 {
            ff_metrics(m)?
        } else {
            (0.0, 0.0)
        };
        let last_t = m.task_count() - 1;
        let per_task_final = (0..m.task_count())
            .map(|k| m.get(k, last_t).expect("complete matrix"))
            .collect();
        Ok(MetricReport {
            last_iou,
            avg_iou,
            ff_iou,
            last_biou,
            avg_biou,
            ff_biou,
            query_accuracy,
            per_task_final,
        })
    }
}

/// Fraction of samples routed to their true task; `None` (no adapter chosen)
/// counts as incorrect for in-benchmark data.
pub fn query_accuracy(chosen: &[Option<usize>], gt: &[usize]) -> Result<f64> {
    if chosen.is_empty() || chosen.len() != gt.len() {
        return Err(Error::EmptyInput("query_accuracy"));
    }
    let hits = chosen
        .iter()
        .zip(gt.iter())
        .filter(|(c, g)| **c == Some(**g))
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Mean silhouette coefficient over unit-normalized vectors with Euclidean
/// distance. Groups are the task labels; higher means tighter, better
/// separated per-task clusters.
pub fn cluster_separation(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    let nonempty: Vec<&Vec<Vec<f64>>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(Error::SingleGroup);
    }
    let normalize = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            v.to_vec()
        } else {
            v.iter().map(|x| x / n).collect()
        }
    };
    let pts: Vec<Vec<Vec<f64>>> = nonempty
        .iter()
        .map(|g| g.iter().map(|v| normalize(v)).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for (gi, group) in pts.iter().enumerate() {
        for (pi, p) in group.iter().enumerate() {
            // a: mean distance to own group (excluding self)
            let a = if group.len() > 1 {
                group
                    .iter()
                    .enumerate()
                    .filter(|(qi, _)| *qi != pi)
                    .map(|(_, q)| dist(p, q))
                    .sum::<f64>()
                    / (group.len() - 1) as f64
            } else {
                // singleton cluster: silhouette 0 by convention
                total += 0.0;
                count += 1;
                continue;
            };
            // b: smallest mean distance to another group
            let b = pts
                .iter()
                .enumerate()
                .filter(|(qi, _)| *qi != gi)
                .map(|(_, other)| {
                    other.iter().map(|q| dist(p, q)).sum::<f64>() / other.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            let s = if denom == 0.0 { 0.0 } else { (b - a) / denom };
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = square_mask(8, 8, 1, 1, 4, 4);
        let b = square_mask(8, 8, 5, 5, 8, 8);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_counts_pixels() {
        // 2×2 masks: intersection 1 pixel, union 3.
        let mut a = Mask::new(2, 2);
        a.set(0, 0, true);
        a.set(1, 0, true);
        let mut b = Mask::new(2, 2);
        b.set(0, 0, true);
        b.set(0, 1, true);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_empty_empty_is_one() {
        let a = Mask::new(4, 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_shape_mismatch_is_error() {
        let a = Mask::new(4, 4);
        let b = Mask::new(4, 5);
        assert!(matches!(iou(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn iou_is_symmetric() {
        let a = square_mask(16, 16, 2, 2, 9, 9);
        let b = square_mask(16, 16, 5, 4, 13, 12);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        assert_eq!(boundary_iou(&a, &b, 2).unwrap(), boundary_iou(&b, &a, 2).unwrap());
    }

    #[test]
    fn boundary_iou_identical_masks() {
        let a = square_mask(16, 16, 3, 3, 10, 12);
        assert_eq!(boundary_iou(&a, &a, 2).unwrap(), 1.0);
    }

    #[test]
    fn boundary_iou_far_translation_is_zero() {
        let a = square_mask(32, 32, 2, 2, 10, 10);
        let b = square_mask(32, 32, 20, 20, 28, 28);
        assert_eq!(boundary_iou(&a, &b, 2).unwrap(), 0.0);
    }

    /// Brute-force band: pixel is in the band iff set and within L∞
    /// distance d of a background (or out-of-image) pixel.
    fn oracle_band(m: &Mask, d: usize) -> Mask {
        let mut out = Mask::new(m.width, m.height);
        let di = d as isize;
        for y in 0..m.height as isize {
            for x in 0..m.width as isize {
                if !m.get(x as usize, y as usize) {
                    continue;
                }
                let mut near_bg = false;
                for dy in -di..=di {
                    for dx in -di..=di {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0
                            || ny < 0
                            || nx >= m.width as isize
                            || ny >= m.height as isize
                            || !m.get(nx as usize, ny as usize)
                        {
                            near_bg = true;
                        }
                    }
                }
                if near_bg {
                    out.set(x as usize, y as usize, true);
                }
            }
        }
        out
    }

    #[test]
    fn boundary_iou_matches_pixel_oracle_on_shifted_square() {
        let a = square_mask(8, 8, 1, 1, 6, 6);
        let b = square_mask(8, 8, 2, 1, 7, 6);
        let d = 2;
        let oa = oracle_band(&a, d);
        let ob = oracle_band(&b, d);
        let expected = iou(&oa, &ob).unwrap();
        assert_eq!(boundary_iou(&a, &b, d).unwrap(), expected);
    }

    #[test]
    fn boundary_iou_matches_pixel_oracle_on_random_masks() {
        let mut r = rng::rng_for(5, "biou-oracle");
        for _ in 0..20 {
            let mut a = Mask::new(12, 12);
            let mut b = Mask::new(12, 12);
            for y in 0..12 {
                for x in 0..12 {
                    a.set(x, y, r.gen_bool(0.4));
                    b.set(x, y, r.gen_bool(0.4));
                }
            }
            for d in 1..=3 {
                let expected = iou(&oracle_band(&a, d), &oracle_band(&b, d)).unwrap();
                assert_eq!(boundary_iou(&a, &b, d).unwrap(), expected);
            }
        }
    }

    #[test]
    fn wide_band_reduces_to_plain_iou() {
        let a = square_mask(16, 16, 2, 3, 9, 8);
        let b = square_mask(16, 16, 4, 4, 12, 10);
        // d at least the image diagonal: bands cover the entire masks.
        let d = 23;
        assert_eq!(boundary_iou(&a, &b, d).unwrap(), iou(&a, &b).unwrap());
    }

    fn const_matrix(n: usize, c: f64) -> MetricMatrix {
        let mut m = MetricMatrix::new(n);
        for t in 0..n {
            for k in 0..=t {
                m.set(k, t, c, c);
            }
        }
        m
    }

    #[test]
    fn last_metrics_constant_and_hand_case() {
        let m = const_matrix(4, 0.7);
        assert_eq!(last_metrics(&m).unwrap(), (0.7, 0.7));

        let mut m2 = MetricMatrix::new(2);
        m2.set(0, 0, 0.8, 0.8);
        m2.set(0, 1, 0.6, 0.6);
        m2.set(1, 1, 0.9, 0.9);
        assert!((last_metrics(&m2).unwrap().0 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn last_metrics_single_task_is_the_entry() {
        let mut m = MetricMatrix::new(1);
        m.set(0, 0, 0.42, 0.17);
        assert_eq!(last_metrics(&m).unwrap(), (0.42, 0.17));
    }

    #[test]
    fn avg_metrics_hand_case() {
        let mut m = MetricMatrix::new(2);
        m.set(0, 0, 0.8, 0.8);
        m.set(0, 1, 0.6, 0.6);
        m.set(1, 1, 0.9, 0.9);
        let (avg, _) = avg_metrics(&m).unwrap();
        assert!((avg - 0.775).abs() < 1e-15);
    }

    #[test]
    fn ff_metrics_hand_cases() {
        let m = const_matrix(5, 0.5);
        let (ff, _) = ff_metrics(&m).unwrap();
        assert_eq!(ff, 0.0);

        let mut m2 = MetricMatrix::new(2);
        m2.set(0, 0, 0.8, 0.8);
        m2.set(0, 1, 0.6, 0.6);
        m2.set(1, 1, 0.9, 0.9);
        let (ff2, _) = ff_metrics(&m2).unwrap();
        assert!((ff2 - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ff_metrics_improving_runs_are_nonpositive() {
        let mut m = MetricMatrix::new(3);
        for t in 0..3 {
            for k in 0..=t {
                // Every task keeps improving after it is learned.
                m.set(k, t, 0.5 + 0.1 * t as f64, 0.5 + 0.1 * t as f64);
            }
        }
        let (ff, _) = ff_metrics(&m).unwrap();
        assert!(ff <= 0.0, "ff {ff}");
    }

    #[test]
    fn ff_metrics_single_task_is_error() {
        let m = const_matrix(1, 0.4);
        assert_eq!(ff_metrics(&m).unwrap_err(), Error::ForgettingUndefined);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let mut m = MetricMatrix::new(2);
        m.set(0, 0, 0.5, 0.5);
        m.set(1, 1, 0.5, 0.5);
        assert_eq!(
            last_metrics(&m).unwrap_err(),
            Error::IncompleteMatrix { missing_k: 0, missing_t: 1 }
        );
    }

    /// Straight re-implementation of the aggregate definitions, kept
    /// deliberately naive: full per-row loops, no shared helpers.
    mod oracle {
        pub fn last(n: usize, iou: &dyn Fn(usize, usize) -> f64) -> f64 {
            let t = n - 1;
            let mut s = 0.0;
            for k in 0..=t {
                s += iou(k, t);
            }
            s / n as f64
        }

        pub fn avg(n: usize, iou: &dyn Fn(usize, usize) -> f64) -> f64 {
            let mut outer = 0.0;
            for t in 0..n {
                let mut s = 0.0;
                for k in 0..=t {
                    s += iou(k, t);
                }
                outer += s / (t + 1) as f64;
            }
            outer / n as f64
        }

        pub fn ff(n: usize, iou: &dyn Fn(usize, usize) -> f64) -> f64 {
            let mut s = 0.0;
            for k in 0..n - 1 {
                let mut best = f64::NEG_INFINITY;
                for j in k..n - 1 {
                    best = best.max(iou(k, j));
                }
                s += best - iou(k, n - 1);
            }
            s / (n - 1) as f64
        }
    }

    #[test]
    fn aggregates_match_naive_oracle_on_random_matrices() {
        let mut r = rng::rng_for(99, "matrix-oracle");
        for round in 0..1000 {
            let n = 2 + (round % 7);
            let mut m = MetricMatrix::new(n);
            let mut iou_cells = vec![vec![0.0; n]; n];
            let mut biou_cells = vec![vec![0.0; n]; n];
            for t in 0..n {
                for k in 0..=t {
                    let a: f64 = r.gen();
                    let b: f64 = r.gen();
                    iou_cells[k][t] = a;
                    biou_cells[k][t] = b;
                    m.set(k, t, a, b);
                }
            }
            let gi = |k: usize, t: usize| iou_cells[k][t];
            let gb = |k: usize, t: usize| biou_cells[k][t];
            let (li, lb) = last_metrics(&m).unwrap();
            let (ai, ab) = avg_metrics(&m).unwrap();
            let (fi, fb) = ff_metrics(&m).unwrap();
            assert!((li - oracle::last(n, &gi)).abs() < 1e-12);
            assert!((lb - oracle::last(n, &gb)).abs() < 1e-12);
            assert!((ai - oracle::avg(n, &gi)).abs() < 1e-12);
            assert!((ab - oracle::avg(n, &gb)).abs() < 1e-12);
            assert!((fi - oracle::ff(n, &gi)).abs() < 1e-12);
            assert!((fb - oracle::ff(n, &gb)).abs() < 1e-12);
        }
    }

    #[test]
    fn query_accuracy_extremes_and_base_counts_wrong() {
        let gt = vec![0, 1, 2, 3];
        let all = vec![Some(0), Some(1), Some(2), Some(3)];
        let none: Vec<Option<usize>> = vec![Some(1), Some(2), Some(3), Some(0)];
        assert_eq!(query_accuracy(&all, &gt).unwrap(), 1.0);
        assert_eq!(query_accuracy(&none, &gt).unwrap(), 0.0);
        let with_base = vec![Some(0), None, Some(2), Some(3)];
        assert_eq!(query_accuracy(&with_base, &gt).unwrap(), 0.75);
        assert!(query_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn cluster_separation_far_tight_clusters_near_one() {
        let g1: Vec<Vec<f64>> = (0..10).map(|i| vec![10.0, 0.001 * i as f64]).collect();
        let g2: Vec<Vec<f64>> = (0..10).map(|i| vec![-10.0, 0.001 * i as f64]).collect();
        let s = cluster_separation(&[g1, g2]).unwrap();
        assert!(s > 0.95, "silhouette {s}");
    }

    #[test]
    fn cluster_separation_identical_points_not_positive() {
        let g1 = vec![vec![1.0, 1.0]; 5];
        let g2 = vec![vec![1.0, 1.0]; 5];
        let s = cluster_separation(&[g1, g2]).unwrap();
        assert!(s <= 0.0, "silhouette {s}");
    }

    #[test]
    fn cluster_separation_single_group_is_error() {
        let g1 = vec![vec![1.0, 0.0]];
        assert_eq!(cluster_separation(&[g1]).unwrap_err(), Error::SingleGroup);
    }
}
