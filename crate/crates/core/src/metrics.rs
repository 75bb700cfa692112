//! Dice, HD95 and hard clDice, plus per-class aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ClassMask;
use crate::tensor::pairwise_sum;
use crate::topology::{soft_skeleton, SkeletonConfig};

fn same_grid(a: &ClassMask, b: &ClassMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!(
            "masks {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `2|a∩b| / (|a| + |b|)`, and 1 when both are empty.
pub fn dsc(a: &ClassMask, b: &ClassMask) -> Result<f64> {
    same_grid(a, b)?;
    let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mask pixels with a 4-neighbour outside the mask (the grid edge counts as outside).
pub fn boundary(m: &ClassMask) -> ClassMask {
    let (h, w) = (m.height(), m.width());
    ClassMask::from_fn(h, w, |y, x| {
        m.get(y, x)
            && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1))
    })
}

/// 1-D lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * (qf - p));
            if s <= z[k] {
                // k == 0 always has z = −∞, so this never underflows
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in pixels) from every pixel to the
/// nearest set pixel; infinite when the mask is empty.
pub fn squared_edt(m: &ClassMask) -> Vec<f64> {
    let (h, w) = (m.height(), m.width());
    let n = h.max(w);
    let mut grid: Vec<f64> = m.bits().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        f[..w].copy_from_slice(row);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        row.copy_from_slice(&out[..w]);
    }
    grid
}

/// Linear interpolation between closest ranks; `q ∈ [0, 1]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn surface_distances(a: &ClassMask, b: &ClassMask, spacing: f64) -> Vec<f64> {
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_edt(&ba), squared_edt(&bb));
    let mut d = Vec::with_capacity(ba.count() + bb.count());
    d.extend(ba.bits().iter().zip(&db).filter(|(m, _)| **m).map(|(_, s)| s.sqrt() * spacing));
    d.extend(bb.bits().iter().zip(&da).filter(|(m, _)| **m).map(|(_, s)| s.sqrt() * spacing));
    d
}

/// Pooled symmetric boundary-distance percentile; `None` if either mask is empty.
pub fn hd_percentile(a: &ClassMask, b: &ClassMask, spacing: f64, q: f64) -> Result<Option<f64>> {
    same_grid(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let mut d = surface_distances(a, b, spacing);
    Ok(Some(percentile(&mut d, q)))
}

pub fn hd95(a: &ClassMask, b: &ClassMask, spacing: f64) -> Result<Option<f64>> {
    hd_percentile(a, b, spacing, 0.95)
}

/// Hard clDice similarity; 0 when either skeleton is empty.
pub fn cldice_metric(a: &ClassMask, b: &ClassMask, cfg: &SkeletonConfig) -> Result<f64> {
    same_grid(a, b)?;
    let (h, w) = (a.height(), a.width());
    let sa = soft_skeleton(a.to_plane().data(), h, w, cfg);
    let sb = soft_skeleton(b.to_plane().data(), h, w, cfg);
    let (na, nb) = (pairwise_sum(&sa), pairwise_sum(&sb));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let hit = |s: &[f64], m: &ClassMask| pairwise_sum(&s.iter().zip(m.bits()).map(|(v, &b)| if b { *v } else { 0.0 }).collect::<Vec<_>>());
    let x = hit(&sa, b) / (na + cfg.epsilon);
    let y = hit(&sb, a) / (nb + cfg.epsilon);
    Ok(2.0 * x * y / (x + y + cfg.epsilon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample: String,
    pub class: usize,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub cldice: f64,
}

/// Per-class rows for one prediction/target pair of label masks.
pub fn evaluate_masks(
    sample: &str,
    pred: &[ClassMask],
    target: &[ClassMask],
    spacing: f64,
    cfg: &SkeletonConfig,
) -> Result<Vec<MetricRow>> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} class masks", pred.len(), target.len())));
    }
    pred.iter()
        .zip(target)
        .enumerate()
        .map(|(class, (p, t))| {
            Ok(MetricRow {
                sample: sample.to_string(),
                class,
                dsc: dsc(p, t)?,
                hd95: hd95(p, t, spacing)?,
                cldice: cldice_metric(p, t, cfg)?,
            })
        })
        .collect()
}

/// Mean and population standard deviation; `None` when every entry was excluded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Stat {
        let mut kept = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) => kept.push(x),
                None => excluded += 1,
            }
        }
        if kept.is_empty() {
            return Stat {
                mean: None,
                std: None,
                count: 0,
                excluded,
            };
        }
        let n = kept.len() as f64;
        let mean = pairwise_sum(&kept) / n;
        let dev: Vec<f64> = kept.iter().map(|x| (x - mean) * (x - mean)).collect();
        Stat {
            mean: Some(mean),
            std: Some((pairwise_sum(&dev) / n).sqrt()),
            count: kept.len(),
            excluded,
        }
    }
}

/// `class = None` is the macro average over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: Option<usize>,
    pub dsc: Stat,
    pub hd95: Stat,
    pub cldice: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<ClassSummary>,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| pairwise_sum(v) / v.len() as f64)
}

/// Per-class statistics over samples, then the macro row built from
/// per-sample class means (HD95 over defined classes only).
pub fn aggregate(rows: &[MetricRow]) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::Domain("cannot aggregate zero metric rows".into()));
    }
    let classes = rows.iter().map(|r| r.class).max().unwrap_or(0) + 1;
    let mut summary = Vec::new();
    for c in 0..classes {
        let rs: Vec<&MetricRow> = rows.iter().filter(|r| r.class == c).collect();
        if rs.is_empty() {
            continue;
        }
        summary.push(ClassSummary {
            class: Some(c),
            dsc: Stat::of(rs.iter().map(|r| Some(r.dsc))),
            hd95: Stat::of(rs.iter().map(|r| r.hd95)),
            cldice: Stat::of(rs.iter().map(|r| Some(r.cldice))),
        });
    }
    let mut samples: Vec<&str> = Vec::new();
    for r in rows {
        if !samples.contains(&r.sample.as_str()) {
            samples.push(&r.sample);
        }
    }
    let mut macro_rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let rs: Vec<&MetricRow> = rows.iter().filter(|r| r.sample == *s).collect();
        let d: Vec<f64> = rs.iter().map(|r| r.dsc).collect();
        let h: Vec<f64> = rs.iter().filter_map(|r| r.hd95).collect();
        let c: Vec<f64> = rs.iter().map(|r| r.cldice).collect();
        macro_rows.push((mean_of(&d), mean_of(&h), mean_of(&c)));
    }
    summary.push(ClassSummary {
        class: None,
        dsc: Stat::of(macro_rows.iter().map(|r| r.0)),
        hd95: Stat::of(macro_rows.iter().map(|r| r.1)),
        cldice: Stat::of(macro_rows.iter().map(|r| r.2)),
    });
    Ok(MetricReport {
        rows: rows.to_vec(),
        summary,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn class_summary(&self, class: Option<usize>) -> Option<&ClassSummary> {
        self.summary.iter().find(|s| s.class == class)
    }

    /// `sample,class,dsc,hd95,cldice` rows followed by `mean`/`std` rows per
    /// class and for `macro`; a trailing column counts excluded HD95 entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,class,dsc,hd95,cldice,hd95_excluded\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{},{:.6},", r.sample, r.class, r.dsc, cell(r.hd95), r.cldice);
        }
        for s in &self.summary {
            let class = s.class.map_or_else(|| "macro".to_string(), |c| c.to_string());
            let _ = writeln!(
                out,
                "mean,{class},{},{},{},{}",
                cell(s.dsc.mean),
                cell(s.hd95.mean),
                cell(s.cldice.mean),
                s.hd95.excluded
            );
            let _ = writeln!(
                out,
                "std,{class},{},{},{},{}",
                cell(s.dsc.std),
                cell(s.hd95.std),
                cell(s.cldice.std),
                s.hd95.excluded
            );
        }
        out
    }
}
