//! Map-quality metrics: per-class IoU and Chamfer distances in metres.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bevgrid::{SemanticGrid, VOID};
use crate::synthworld::CLASSES;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("grid sizes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn check_shapes(a: &SemanticGrid, b: &SemanticGrid) -> Result<(), MetricsError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricsError::ShapeMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

/// `(|pred ∩ gt|, |pred ∪ gt|)` for one class, ignoring cells where either
/// grid is VOID.
pub fn overlap_counts(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    class_id: u8,
) -> Result<(usize, usize), MetricsError> {
    check_shapes(pred, gt)?;
    let (mut inter, mut union) = (0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p == VOID || g == VOID {
            continue;
        }
        let (a, b) = (p == class_id, g == class_id);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok((inter, union))
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection over union of one class. Both sets empty gives 1.0.
pub fn iou(pred: &SemanticGrid, gt: &SemanticGrid, class_id: u8) -> Result<f64, MetricsError> {
    let (i, u) = overlap_counts(pred, gt, class_id)?;
    Ok(ratio(i, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferDistances {
    /// Mean distance from each predicted point to the nearest true point.
    pub cd_p: f64,
    /// Mean distance from each true point to the nearest predicted point.
    pub cd_l: f64,
    /// Point-count-weighted mean of the two directions.
    pub cd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Chamfer {
    Distances(ChamferDistances),
    /// One of the point sets was empty; distances are undefined.
    EmptyPointSet,
}

impl Chamfer {
    pub fn distances(&self) -> Option<ChamferDistances> {
        match self {
            Chamfer::Distances(d) => Some(*d),
            Chamfer::EmptyPointSet => None,
        }
    }
}

/// Combines the two directed means, weighting each by its point count.
pub fn weighted_chamfer(cd_p: f64, n_pred: usize, cd_l: f64, n_gt: usize) -> f64 {
    (n_pred as f64 * cd_p + n_gt as f64 * cd_l) / (n_pred + n_gt) as f64
}

/// Chamfer distances between two sets of integer cell coordinates, scaled by
/// `resolution` metres per cell.
pub fn chamfer(pred: &[(i64, i64)], gt: &[(i64, i64)], resolution: f64) -> Chamfer {
    if pred.is_empty() || gt.is_empty() {
        return Chamfer::EmptyPointSet;
    }
    let all = pred.iter().chain(gt);
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let box_ = BBox {
        x0,
        y0,
        w: (x1 - x0 + 1) as usize,
        h: (y1 - y0 + 1) as usize,
    };
    let to_gt = box_.sq_distance_field(gt);
    let to_pred = box_.sq_distance_field(pred);
    let mean = |pts: &[(i64, i64)], field: &[f64]| -> f64 {
        pts.iter()
            .map(|&p| field[box_.index(p)].sqrt())
            .sum::<f64>()
            / pts.len() as f64
            * resolution
    };
    let cd_p = mean(pred, &to_gt);
    let cd_l = mean(gt, &to_pred);
    Chamfer::Distances(ChamferDistances {
        cd_p,
        cd_l,
        cd: weighted_chamfer(cd_p, pred.len(), cd_l, gt.len()),
    })
}

struct BBox {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
}

impl BBox {
    fn index(&self, (x, y): (i64, i64)) -> usize {
        (y - self.y0) as usize * self.w + (x - self.x0) as usize
    }

    /// Exact squared Euclidean distance to the nearest seed for every cell,
    /// by two separable lower-envelope passes.
    fn sq_distance_field(&self, seeds: &[(i64, i64)]) -> Vec<f64> {
        let mut f = vec![f64::INFINITY; self.w * self.h];
        for &p in seeds {
            f[self.index(p)] = 0.0;
        }
        let mut buf = vec![0.0; self.w.max(self.h)];
        let mut out = vec![0.0; self.w.max(self.h)];
        for y in 0..self.h {
            let row = &mut f[y * self.w..(y + 1) * self.w];
            buf[..self.w].copy_from_slice(row);
            lower_envelope(&buf[..self.w], &mut out[..self.w]);
            row.copy_from_slice(&out[..self.w]);
        }
        for x in 0..self.w {
            for y in 0..self.h {
                buf[y] = f[y * self.w + x];
            }
            lower_envelope(&buf[..self.h], &mut out[..self.h]);
            for y in 0..self.h {
                f[y * self.w + x] = out[y];
            }
        }
        f
    }
}

/// One-dimensional squared distance transform `d(q) = min_p (q - p)^2 + f(p)`.
fn lower_envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &sites {
        loop {
            match v.last() {
                Some(&p) if inter(q, p) <= z[v.len() - 1] => {
                    v.pop();
                    z.pop();
                }
                _ => break,
            }
        }
        let s = v.last().map_or(f64::NEG_INFINITY, |&p| inter(q, p));
        v.push(q);
        z.push(s);
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Cells of `class_id` in `grid`, skipping cells where `mask` is VOID.
pub fn class_points(grid: &SemanticGrid, mask: &SemanticGrid, class_id: u8) -> Vec<(i64, i64)> {
    let w = grid.width();
    grid.data()
        .iter()
        .zip(mask.data())
        .enumerate()
        .filter(|(_, (&g, &m))| g == class_id && m != VOID)
        .map(|(i, _)| ((i % w) as i64, (i / w) as i64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub iou: f64,
    pub cd_p: Option<f64>,
    pub cd_l: Option<f64>,
    pub cd: Option<f64>,
    /// Frames where one point set was empty and CD was skipped.
    pub empty_point_sets: usize,
}

/// Dataset-level evaluation: one entry per foreground class plus the
/// all-class mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub divider: ClassReport,
    pub ped_crossing: ClassReport,
    pub boundary: ClassReport,
    pub all: ClassReport,
}

impl EvalReport {
    pub fn classes(&self) -> [(&'static str, &ClassReport); 3] {
        [
            ("divider", &self.divider),
            ("ped_crossing", &self.ped_crossing),
            ("boundary", &self.boundary),
        ]
    }

    /// Mean IoU over the foreground classes.
    pub fn mean_iou(&self) -> f64 {
        self.all.iou
    }

    /// CSV with one row per class in ID order, then the mean.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "iou", "cd_p", "cd_l", "cd"])?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for (name, r) in self.classes().into_iter().chain([("all", &self.all)]) {
            out.write_record([
                name.to_string(),
                r.iou.to_string(),
                fmt(r.cd_p),
                fmt(r.cd_l),
                fmt(r.cd),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct ClassAcc {
    inter: usize,
    union: usize,
    cd_sum: [f64; 3],
    cd_frames: usize,
    empty: usize,
}

/// Accumulates IoU counts and per-frame Chamfer distances over a dataset.
#[derive(Debug, Clone)]
pub struct Evaluator {
    resolution: f64,
    acc: [ClassAcc; 3],
}

impl Evaluator {
    pub fn new(resolution: f64) -> Self {
        Self {
            resolution,
            acc: Default::default(),
        }
    }

    pub fn add(&mut self, pred: &SemanticGrid, gt: &SemanticGrid) -> Result<(), MetricsError> {
        check_shapes(pred, gt)?;
        for (acc, (class_id, _)) in self.acc.iter_mut().zip(CLASSES) {
            let (i, u) = overlap_counts(pred, gt, class_id)?;
            acc.inter += i;
            acc.union += u;
            let p = class_points(pred, gt, class_id);
            let g = class_points(gt, gt, class_id);
            match chamfer(&p, &g, self.resolution) {
                Chamfer::Distances(d) => {
                    acc.cd_sum[0] += d.cd_p;
                    acc.cd_sum[1] += d.cd_l;
                    acc.cd_sum[2] += d.cd;
                    acc.cd_frames += 1;
                }
                Chamfer::EmptyPointSet => acc.empty += 1,
            }
        }
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let per: Vec<ClassReport> = self
            .acc
            .iter()
            .map(|a| {
                let cd = |k: usize| (a.cd_frames > 0).then(|| a.cd_sum[k] / a.cd_frames as f64);
                ClassReport {
                    iou: ratio(a.inter, a.union),
                    cd_p: cd(0),
                    cd_l: cd(1),
                    cd: cd(2),
                    empty_point_sets: a.empty,
                }
            })
            .collect();
        let mean_opt = |f: fn(&ClassReport) -> Option<f64>| {
            let v: Vec<f64> = per.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let all = ClassReport {
            iou: per.iter().map(|r| r.iou).sum::<f64>() / per.len() as f64,
            cd_p: mean_opt(|r| r.cd_p),
            cd_l: mean_opt(|r| r.cd_l),
            cd: mean_opt(|r| r.cd),
            empty_point_sets: per.iter().map(|r| r.empty_point_sets).sum(),
        };
        EvalReport {
            divider: per[0],
            ped_crossing: per[1],
            boundary: per[2],
            all,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_with(cells: &[(usize, usize)], w: usize, h: usize) -> SemanticGrid {
        let mut g = SemanticGrid::filled(w, h, 0);
        for &(c, r) in cells {
            g.set(c, r, 1);
        }
        g
    }

    #[test]
    fn iou_basic_cases() {
        let a = grid_with(&[(0, 0), (1, 1)], 4, 4);
        assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
        let b = grid_with(&[(2, 2)], 4, 4);
        assert_eq!(iou(&a, &b, 1).unwrap(), 0.0);
        let e = grid_with(&[], 4, 4);
        assert_eq!(iou(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(iou(&a, &e, 1).unwrap(), 0.0);
    }

    #[test]
    fn iou_one_third() {
        // {(0,0),(0,1)} vs {(0,1),(0,2)} as (row, col); grid_with takes (col, row)
        let p = grid_with(&[(0, 0), (1, 0)], 4, 4);
        let g = grid_with(&[(1, 0), (2, 0)], 4, 4);
        assert!((iou(&p, &g, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_ignores_void() {
        let p = grid_with(&[(0, 0), (1, 0)], 2, 1);
        let mut g = grid_with(&[(0, 0)], 2, 1);
        g.set(1, 0, VOID);
        assert_eq!(iou(&p, &g, 1).unwrap(), 1.0);
    }

    #[test]
    fn iou_shape_mismatch() {
        let a = SemanticGrid::filled(2, 2, 0);
        let b = SemanticGrid::filled(3, 2, 0);
        assert!(matches!(iou(&a, &b, 1), Err(MetricsError::ShapeMismatch(..))));
    }

    #[test]
    fn chamfer_examples() {
        let d = chamfer(&[(0, 0), (5, 1)], &[(0, 0), (5, 1)], 0.15);
        assert_eq!(d.distances().unwrap(), ChamferDistances { cd_p: 0.0, cd_l: 0.0, cd: 0.0 });

        let d = chamfer(&[(0, 0)], &[(3, 4)], 0.15).distances().unwrap();
        for v in [d.cd_p, d.cd_l, d.cd] {
            assert!((v - 0.75).abs() < 1e-12);
        }

        let d = chamfer(&[(0, 0), (0, 2)], &[(0, 0)], 0.15).distances().unwrap();
        assert!((d.cd_p - 0.15).abs() < 1e-12);
        assert_eq!(d.cd_l, 0.0);
        assert!((d.cd - 0.10).abs() < 1e-12);

        assert_eq!(chamfer(&[], &[(0, 0)], 1.0), Chamfer::EmptyPointSet);
    }

    #[test]
    fn envelope_matches_brute_force() {
        let f = [f64::INFINITY, 4.0, f64::INFINITY, 0.0, 9.0, f64::INFINITY, 1.0];
        let mut d = [0.0; 7];
        lower_envelope(&f, &mut d);
        for q in 0..7 {
            let want = (0..7)
                .filter(|&p| f[p].is_finite())
                .map(|p| (q as f64 - p as f64).powi(2) + f[p])
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[q], want);
        }
    }

    #[test]
    fn evaluator_self_is_perfect() {
        let mut g = SemanticGrid::filled(8, 8, 0);
        g.set(1, 1, 1);
        g.set(2, 5, 3);
        g.set(3, 3, VOID);
        let mut ev = Evaluator::new(0.5);
        ev.add(&g, &g).unwrap();
        let r = ev.report();
        assert_eq!(r.divider.iou, 1.0);
        assert_eq!(r.divider.cd, Some(0.0));
        assert_eq!(r.ped_crossing.iou, 1.0);
        assert_eq!(r.ped_crossing.cd, None);
        assert_eq!(r.ped_crossing.empty_point_sets, 1);
        assert_eq!(r.all.iou, 1.0);
    }

    #[test]
    fn report_schema() {
        let r = Evaluator::new(1.0).report();
        let v = serde_json::to_value(r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["all", "boundary", "divider", "ped_crossing"]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: Vec<_> = text.lines().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(first, ["class", "divider", "ped_crossing", "boundary", "all"]);
    }
}
