//! Exact 1-Wasserstein distance between persistence diagrams with diagonal
//! matching.
//!
//! Ground metric is L∞ on (birth, death); an unmatched finite point pays
//! |birth − death|/2, its L∞ distance to the diagonal. Each dimension is
//! solved as a square assignment problem on the standard augmented matrix
//! (each side padded with the other's diagonal projections) and the total
//! cost sums dims 0 and 1. Essential points never match the diagonal: they
//! pair within their own class by |birth_A − birth_B|.

use crate::topology::{PersistenceDiagram, PersistencePair};
use crate::{Error, Result};

/// One edge of an optimal matching. `None` on a side means the diagonal
/// for finite points; for a surplus essential point (unequal essential
/// counts) it marks a charge to the nearest opposite essential birth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEdge {
    pub a: Option<usize>,
    pub b: Option<usize>,
    pub cost: f64,
}

/// Optimal matching per homology dimension; indices point into the
/// corresponding `dim0`/`dim1` vectors of the input diagrams.
#[derive(Debug, Clone, Default)]
pub struct DiagramMatching {
    pub dim0: Vec<MatchEdge>,
    pub dim1: Vec<MatchEdge>,
    pub cost: f64,
}

fn linf(a: &PersistencePair, b: &PersistencePair) -> f64 {
    (a.birth - b.birth).abs().max((a.death - b.death).abs())
}

fn diag_cost(p: &PersistencePair) -> f64 {
    (p.birth - p.death).abs() / 2.0
}

/// Shortest-augmenting-path assignment on a dense square cost matrix.
/// Deterministic: rows are inserted in index order and column scans are in
/// index order, so equal-cost ties always resolve the same way.
fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if matched_row[j] != 0 {
            row_to_col[matched_row[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn split(pairs: &[PersistencePair]) -> (Vec<usize>, Vec<usize>) {
    let finite = pairs.iter().enumerate().filter(|(_, p)| !p.essential).map(|(i, _)| i).collect();
    let essential = pairs.iter().enumerate().filter(|(_, p)| p.essential).map(|(i, _)| i).collect();
    (finite, essential)
}

fn match_dim(a: &[PersistencePair], b: &[PersistencePair]) -> Result<(f64, Vec<MatchEdge>)> {
    let (fa, ea) = split(a);
    let (fb, eb) = split(b);
    let mut edges = Vec::new();
    let mut total = 0.0;

    let (na, nb) = (fa.len(), fb.len());
    let n = na + nb;
    if n > 0 {
        // Rows: A's finite points then B's diagonal slots; columns: B's
        // finite points then A's diagonal slots.
        let mut cost = vec![0.0f64; n * n];
        for (ri, &ia) in fa.iter().enumerate() {
            for (cj, &jb) in fb.iter().enumerate() {
                cost[ri * n + cj] = linf(&a[ia], &b[jb]);
            }
            for cj in nb..n {
                cost[ri * n + cj] = diag_cost(&a[ia]);
            }
        }
        for ri in na..n {
            for (cj, &jb) in fb.iter().enumerate() {
                cost[ri * n + cj] = diag_cost(&b[jb]);
            }
        }
        let row_to_col = solve_assignment(n, &cost);
        for (ri, &cj) in row_to_col.iter().enumerate() {
            let edge = match (ri < na, cj < nb) {
                (true, true) => MatchEdge { a: Some(fa[ri]), b: Some(fb[cj]), cost: cost[ri * n + cj] },
                (true, false) => MatchEdge { a: Some(fa[ri]), b: None, cost: cost[ri * n + cj] },
                (false, true) => MatchEdge { a: None, b: Some(fb[cj]), cost: cost[ri * n + cj] },
                (false, false) => continue,
            };
            total += edge.cost;
            edges.push(edge);
        }
    }

    // Essentials: forbidden from the diagonal. Equal counts pair 1:1 in
    // sorted birth order (optimal for a sum of absolute differences);
    // surplus points charge the nearest opposite essential birth.
    if (ea.is_empty() && !eb.is_empty()) || (eb.is_empty() && !ea.is_empty()) {
        return Err(Error::Contract(
            "essential points present in only one diagram have no match target".into(),
        ));
    }
    let by_birth = |pairs: &[PersistencePair], idx: &[usize]| {
        let mut v: Vec<usize> = idx.to_vec();
        v.sort_by(|&x, &y| {
            pairs[x].birth.partial_cmp(&pairs[y].birth).unwrap().then(x.cmp(&y))
        });
        v
    };
    let sa = by_birth(a, &ea);
    let sb = by_birth(b, &eb);
    let common = sa.len().min(sb.len());
    for k in 0..common {
        let cost = (a[sa[k]].birth - b[sb[k]].birth).abs();
        total += cost;
        edges.push(MatchEdge { a: Some(sa[k]), b: Some(sb[k]), cost });
    }
    for &ia in &sa[common..] {
        let cost = eb
            .iter()
            .map(|&jb| (a[ia].birth - b[jb].birth).abs())
            .fold(f64::INFINITY, f64::min);
        total += cost;
        edges.push(MatchEdge { a: Some(ia), b: None, cost });
    }
    for &jb in &sb[common..] {
        let cost = ea
            .iter()
            .map(|&ia| (a[ia].birth - b[jb].birth).abs())
            .fold(f64::INFINITY, f64::min);
        total += cost;
        edges.push(MatchEdge { a: None, b: Some(jb), cost });
    }
    Ok((total, edges))
}

/// Total W1 over dims 0 and 1 plus the realizing matching.
pub fn w1_distance(a: &PersistenceDiagram, b: &PersistenceDiagram) -> Result<(f64, DiagramMatching)> {
    let (c0, e0) = match_dim(&a.dim0, &b.dim0)?;
    let (c1, e1) = match_dim(&a.dim1, &b.dim1)?;
    let cost = c0 + c1;
    Ok((cost, DiagramMatching { dim0: e0, dim1: e1, cost }))
}

/// W1 restricted to one homology dimension.
pub fn w1_dim(a: &[PersistencePair], b: &[PersistencePair]) -> Result<(f64, Vec<MatchEdge>)> {
    match_dim(a, b)
}

const ORACLE_CAP: usize = 8;

/// Exhaustive-enumeration W1, usable as an independent oracle on small
/// diagrams (≤ 8 combined points per dimension).
pub fn brute_force_w1(a: &PersistenceDiagram, b: &PersistenceDiagram) -> Result<f64> {
    Ok(brute_dim(&a.dim0, &b.dim0)? + brute_dim(&a.dim1, &b.dim1)?)
}

fn brute_dim(a: &[PersistencePair], b: &[PersistencePair]) -> Result<f64> {
    if a.len() + b.len() > ORACLE_CAP {
        return Err(Error::Contract(format!(
            "oracle size cap: {} + {} points exceeds {ORACLE_CAP}",
            a.len(),
            b.len()
        )));
    }
    let (fa, ea) = split(a);
    let (fb, eb) = split(b);

    fn recurse(
        a: &[PersistencePair],
        b: &[PersistencePair],
        fa: &[usize],
        fb: &[usize],
        next: usize,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
    ) {
        if acc >= *best {
            return;
        }
        if next == fa.len() {
            let mut total = acc;
            for (k, &jb) in fb.iter().enumerate() {
                if !used[k] {
                    total += diag_cost(&b[jb]);
                }
            }
            if total < *best {
                *best = total;
            }
            return;
        }
        let pa = &a[fa[next]];
        recurse(a, b, fa, fb, next + 1, used, acc + diag_cost(pa), best);
        for k in 0..fb.len() {
            if !used[k] {
                used[k] = true;
                recurse(a, b, fa, fb, next + 1, used, acc + linf(pa, &b[fb[k]]), best);
                used[k] = false;
            }
        }
    }

    let mut best = f64::INFINITY;
    let mut used = vec![false; fb.len()];
    recurse(a, b, &fa, &fb, 0, &mut used, 0.0, &mut best);

    // Essentials: enumerate all injections of the smaller class into the
    // larger, leftovers charging the nearest opposite birth.
    if (ea.is_empty()) != (eb.is_empty()) {
        return Err(Error::Contract(
            "essential points present in only one diagram have no match target".into(),
        ));
    }
    fn ess_recurse(
        births_a: &[f64],
        births_b: &[f64],
        next: usize,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
    ) {
        if next == births_a.len() {
            let mut total = acc;
            for (k, &bb) in births_b.iter().enumerate() {
                if !used[k] {
                    total += births_a
                        .iter()
                        .map(|&ba| (ba - bb).abs())
                        .fold(f64::INFINITY, f64::min);
                }
            }
            *best = best.min(total);
            return;
        }
        // Surplus on the A side charges the nearest B birth.
        if births_a.len() > births_b.len() {
            let nearest = births_b
                .iter()
                .map(|&bb| (births_a[next] - bb).abs())
                .fold(f64::INFINITY, f64::min);
            ess_recurse(births_a, births_b, next + 1, used, acc + nearest, best);
        }
        for k in 0..births_b.len() {
            if !used[k] {
                used[k] = true;
                ess_recurse(
                    births_a,
                    births_b,
                    next + 1,
                    used,
                    acc + (births_a[next] - births_b[k]).abs(),
                    best,
                );
                used[k] = false;
            }
        }
    }
    if !ea.is_empty() {
        let births_a: Vec<f64> = ea.iter().map(|&i| a[i].birth).collect();
        let births_b: Vec<f64> = eb.iter().map(|&j| b[j].birth).collect();
        let mut ebest = f64::INFINITY;
        let mut used = vec![false; births_b.len()];
        ess_recurse(&births_a, &births_b, 0, &mut used, 0.0, &mut ebest);
        best += ebest;
    }
    Ok(best)
}
