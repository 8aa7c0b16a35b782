//! Overlap and boundary-distance metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, LabelMap};
use crate::error::{contract, Error, Result};

fn check(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract(format!("mask shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    (inter, a.count(), b.count())
}

/// `2|a ∩ b| / (|a| + |b|)`, 1 when both are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check(a, b)?;
    let (i, na, nb) = overlap(a, b);
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 })
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check(a, b)?;
    let (i, na, nb) = overlap(a, b);
    let union = na + nb - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour outside the foreground; pixels
/// beyond the image border count as background.
pub fn boundary(m: &BinaryMask) -> BinaryMask {
    let (h, w) = m.dims();
    let bg = |y: isize, x: isize| {
        y < 0 || x < 0 || y >= h as isize || x >= w as isize || !m.get(y as usize, x as usize)
    };
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let (yi, xi) = (y as isize, x as isize);
            m.get(y, x) && (bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1))
        })
        .collect();
    BinaryMask::new(h, w, data).expect("same dims")
}

/// One-dimensional lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from each pixel to the nearest set pixel.
/// Requires at least one set pixel.
pub fn squared_distance_transform(sites: &BinaryMask) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let (h, w) = sites.dims();
    let mut grid: Vec<f64> = sites.data().iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Pooled boundary-to-boundary nearest distances in both directions.
pub fn boundary_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Option<Vec<f64>>> {
    check(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_distance_transform(&ba), squared_distance_transform(&bb));
    let mut d = Vec::with_capacity(ba.count() + bb.count());
    d.extend(ba.data().iter().zip(&db).filter(|(s, _)| **s).map(|(_, v)| v.sqrt()));
    d.extend(bb.data().iter().zip(&da).filter(|(s, _)| **s).map(|(_, v)| v.sqrt()));
    Ok(Some(d))
}

/// 95th percentile of the symmetric boundary distances; `None` when either
/// mask is empty.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    Ok(boundary_distances(a, b)?.map(|mut d| percentile(&mut d, 0.95)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub iou: f64,
    /// `None` when prediction or reference is empty for this class.
    pub hd95: Option<f64>,
    pub pred_empty: bool,
    pub ref_empty: bool,
}

/// Per-class scores over foreground classes and their means. Undefined HD95
/// values are excluded from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut s, mut n, mut undef) = (0.0, 0usize, 0usize);
    for x in v {
        match x {
            Some(x) => {
                s += x;
                n += 1;
            }
            None => undef += 1,
        }
    }
    ((n > 0).then(|| s / n as f64), undef)
}

impl MetricReport {
    pub fn from_classes(classes: Vec<ClassMetrics>) -> Self {
        let n = classes.len().max(1) as f64;
        let mean_dice = classes.iter().map(|c| c.dice).sum::<f64>() / n;
        let mean_iou = classes.iter().map(|c| c.iou).sum::<f64>() / n;
        let (mean_hd95, hd95_undefined) = mean_defined(classes.iter().map(|c| c.hd95));
        Self {
            classes,
            mean_dice,
            mean_iou,
            mean_hd95,
            hd95_undefined,
        }
    }
}

/// Scores classes `1..num_classes` of `pred` against `reference`.
pub fn evaluate(pred: &LabelMap, reference: &LabelMap, num_classes: usize) -> Result<MetricReport> {
    if pred.dims() != reference.dims() {
        return Err(contract(format!(
            "prediction {:?} and reference {:?} differ in size",
            pred.dims(),
            reference.dims()
        )));
    }
    let classes = (1..num_classes as u8)
        .map(|c| {
            let (p, r) = (pred.binary(c), reference.binary(c));
            Ok(ClassMetrics {
                class: c,
                dice: dice(&p, &r)?,
                iou: iou(&p, &r)?,
                hd95: hd95(&p, &r)?,
                pred_empty: p.is_empty(),
                ref_empty: r.is_empty(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_classes(classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Means over cases of each case's mean scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_undefined_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(cases: Vec<CaseReport>) -> Self {
        let n = cases.len().max(1) as f64;
        let (mean_hd95, undef) = mean_defined(cases.iter().map(|c| c.report.mean_hd95));
        let aggregate = Aggregate {
            cases: cases.len(),
            mean_dice: cases.iter().map(|c| c.report.mean_dice).sum::<f64>() / n,
            mean_iou: cases.iter().map(|c| c.report.mean_iou).sum::<f64>() / n,
            mean_hd95,
            hd95_undefined_cases: undef,
        };
        Self { cases, aggregate }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per case plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let mut rows = vec![["id".to_string(), "dice".into(), "iou".into(), "hd95".into()]];
        for c in &self.cases {
            rows.push([
                c.id.clone(),
                c.report.mean_dice.to_string(),
                c.report.mean_iou.to_string(),
                fmt(c.report.mean_hd95),
            ]);
        }
        let a = &self.aggregate;
        rows.push(["mean".into(), a.mean_dice.to_string(), a.mean_iou.to_string(), fmt(a.mean_hd95)]);
        for r in rows {
            w.write_record(&r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
