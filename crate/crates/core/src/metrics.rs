//! Segmentation evaluation metrics: Dice, IoU, HD95.
//!
//! HD95 is the nearest-rank 95th percentile of the pooled directed
//! boundary distances in both directions. Boundaries are 4-neighborhood
//! erosions (off-grid counts as background); point-to-boundary distances
//! come from an exact squared Euclidean distance transform.

use crate::{Error, Result};

/// Per-pair metric values. `hd95` is `None` when either mask is empty;
/// aggregation excludes those samples and reports how many were defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
}

fn check_len(op: &str, a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "dimension error in {op}: lengths {} vs {}",
            a.len(),
            b.len()
        )))
    }
}

pub fn dice_score(pred: &[bool], target: &[bool]) -> Result<f64> {
    check_len("dice_score", pred, target)?;
    let inter = pred.iter().zip(target).filter(|(&p, &t)| p && t).count();
    let total = pred.iter().filter(|&&p| p).count() + target.iter().filter(|&&t| t).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

pub fn iou_score(pred: &[bool], target: &[bool]) -> Result<f64> {
    check_len("iou_score", pred, target)?;
    let inter = pred.iter().zip(target).filter(|(&p, &t)| p && t).count();
    let union = pred.iter().zip(target).filter(|(&p, &t)| p || t).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mask pixels with at least one 4-neighbor (or the grid edge) outside the
/// mask.
fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let exposed = r == 0
                || c == 0
                || r == h - 1
                || c == w - 1
                || !mask[(r - 1) * w + c]
                || !mask[(r + 1) * w + c]
                || !mask[r * w + c - 1]
                || !mask[r * w + c + 1];
            out[r * w + c] = exposed;
        }
    }
    out
}

/// One-dimensional squared distance transform by the lower envelope of
/// parabolas: out[i] = min_j f[j] + (i − j)².
fn dt1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                // The only parabola so far is at infinity; replace it.
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            f[p] + d * d
        };
    }
}

/// Exact squared Euclidean distance to the nearest seed pixel.
fn edt_squared(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut dist: Vec<f64> =
        seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = dist[r * w + c];
        }
        dt1d(&col_in, &mut col_out);
        for r in 0..h {
            dist[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0f64; w];
    for r in 0..h {
        dt1d(&dist[r * w..(r + 1) * w].to_vec(), &mut row_out);
        dist[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    dist
}

/// Nearest-rank percentile of an unsorted sample: the value at 1-based
/// position ⌈p/100 · n⌉ after sorting.
pub fn percentile_nearest_rank(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// 95th-percentile symmetric boundary distance in pixels; `None` when
/// either mask is empty.
pub fn hd95(pred: &[bool], target: &[bool], h: usize, w: usize) -> Result<Option<f64>> {
    check_len("hd95", pred, target)?;
    if pred.len() != h * w {
        return Err(Error::Contract(format!(
            "dimension error in hd95: length {} vs {h}x{w}",
            pred.len()
        )));
    }
    if !pred.iter().any(|&p| p) || !target.iter().any(|&t| t) {
        return Ok(None);
    }
    let bp = boundary(pred, h, w);
    let bt = boundary(target, h, w);
    let dist_to_bt = edt_squared(&bt, h, w);
    let dist_to_bp = edt_squared(&bp, h, w);
    let mut pooled = Vec::new();
    for i in 0..h * w {
        if bp[i] {
            pooled.push(dist_to_bt[i].sqrt());
        }
        if bt[i] {
            pooled.push(dist_to_bp[i].sqrt());
        }
    }
    Ok(Some(percentile_nearest_rank(&mut pooled, 95.0)))
}

pub fn evaluate_pair(pred: &[bool], target: &[bool], h: usize, w: usize) -> Result<EvalResult> {
    Ok(EvalResult {
        dice: dice_score(pred, target)?,
        iou: iou_score(pred, target)?,
        hd95: hd95(pred, target, h, w)?,
    })
}

/// Mean metrics over samples. Dice and IoU average over everything; HD95
/// averages only where defined, with the defined count reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_defined: usize,
    pub samples: usize,
}

pub fn aggregate(results: &[EvalResult]) -> Aggregate {
    let n = results.len();
    let mean = |f: &dyn Fn(&EvalResult) -> f64| {
        if n == 0 { 0.0 } else { results.iter().map(f).sum::<f64>() / n as f64 }
    };
    let defined: Vec<f64> = results.iter().filter_map(|r| r.hd95).collect();
    Aggregate {
        mean_dice: mean(&|r| r.dice),
        mean_iou: mean(&|r| r.iou),
        mean_hd95: if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        },
        hd95_defined: defined.len(),
        samples: n,
    }
}
