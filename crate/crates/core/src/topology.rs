//! Cubical persistent homology of 2-D scalar fields under the superlevel
//! filtration F(τ) = {p : v_p ≥ τ}.
//!
//! Connectivity follows the digital-topology pairing: foreground components
//! (dim 0) use 4-connectivity, holes (dim 1) use 8-connectivity on the
//! complement. Dim-1 classes are computed by duality: an ascending pass over
//! {v < τ} with a virtual OUTSIDE node adjacent to every border pixel; a
//! bounded complement component born at local minimum value m and absorbed
//! at saddle value s is the hole (birth = s, death = m).
//!
//! Conventions, relied on by matching and loss code:
//! - pairs satisfy birth ≥ death; zero-persistence pairs are dropped;
//! - dim 0 has exactly one essential class: birth = global max, death
//!   recorded as the global min value (sentinel); dim 1 has none;
//! - `field[birth_cell] == birth` and `field[death_cell] == death` for
//!   every emitted pair, which is what lets losses route gradients to the
//!   critical pixels;
//! - ties are broken by entry order (value, then row, then col), making the
//!   diagram a pure function of the field.

use crate::tensor::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    /// Pixel whose inclusion creates the class.
    pub birth_cell: (usize, usize),
    /// Pixel whose inclusion destroys it (sentinel cell for essentials).
    pub death_cell: (usize, usize),
    pub essential: bool,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.birth - self.death
    }
}

#[derive(Debug, Clone, Default)]
pub struct PersistenceDiagram {
    pub dim0: Vec<PersistencePair>,
    pub dim1: Vec<PersistencePair>,
}

const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn validate<F: Real>(field: &[F], h: usize, w: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || field.len() != h * w {
        return Err(Error::Contract(format!(
            "field of {} values does not match {h}x{w}",
            field.len()
        )));
    }
    let mut out = Vec::with_capacity(field.len());
    for (i, v) in field.iter().enumerate() {
        let x = v.to_f64().unwrap_or(f64::NAN);
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Numeric(format!(
                "field value {x} at pixel ({}, {}) outside [0, 1]",
                i / w,
                i % w
            )));
        }
        out.push(x);
    }
    Ok(out)
}

/// Union-find with the elder rule: on a merge the root created earlier in
/// entry order survives, the younger component is reported killed.
struct Forest {
    parent: Vec<usize>,
    entry: Vec<usize>,
}

impl Forest {
    fn new(n: usize) -> Self {
        Forest { parent: vec![usize::MAX; n], entry: vec![usize::MAX; n] }
    }

    fn activate(&mut self, node: usize, entry: usize) {
        self.parent[node] = node;
        self.entry[node] = entry;
    }

    fn active(&self, node: usize) -> bool {
        self.parent[node] != usize::MAX
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns the root of the killed (younger) component, if the merge is
    /// nontrivial.
    fn union(&mut self, a: usize, b: usize) -> Option<usize> {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return None;
        }
        let (elder, younger) =
            if self.entry[ra] < self.entry[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[younger] = elder;
        Some(younger)
    }
}

/// Superlevel persistence diagram of a row-major `h`x`w` field.
pub fn persistence_diagram<F: Real>(
    field: &[F],
    h: usize,
    w: usize,
) -> Result<PersistenceDiagram> {
    let v = validate(field, h, w)?;
    let n = h * w;

    // Dim 0: descending pass, 4-connectivity. Roots never move off a
    // component's creator pixel (the elder rule keeps the eldest root), so
    // a killed root is itself the birth cell.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut forest = Forest::new(n);
    let mut dim0 = Vec::new();
    for (step, &p) in order.iter().enumerate() {
        forest.activate(p, step);
        let (r, c) = (p / w, p % w);
        for (dr, dc) in N4 {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let q = nr as usize * w + nc as usize;
            if !forest.active(q) {
                continue;
            }
            if let Some(killed) = forest.union(p, q) {
                if v[killed] > v[p] {
                    dim0.push(PersistencePair {
                        birth: v[killed],
                        death: v[p],
                        birth_cell: (killed / w, killed % w),
                        death_cell: (r, c),
                        essential: false,
                    });
                }
            }
        }
    }
    let peak = order[0];
    let min_pixel = *order.last().unwrap();
    dim0.push(PersistencePair {
        birth: v[peak],
        death: v[min_pixel],
        birth_cell: (peak / w, peak % w),
        death_cell: (min_pixel / w, min_pixel % w),
        essential: true,
    });

    // Dim 1 by duality: ascending pass over the complement, 8-connectivity,
    // node `n` is OUTSIDE and enters first.
    let mut order_up: Vec<usize> = (0..n).collect();
    order_up.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
    let mut forest = Forest::new(n + 1);
    forest.activate(n, 0);
    let mut dim1 = Vec::new();
    for (step, &p) in order_up.iter().enumerate() {
        forest.activate(p, step + 1);
        let (r, c) = (p / w, p % w);
        let absorb = |forest: &mut Forest, q: usize, dim1: &mut Vec<PersistencePair>| {
            if let Some(killed) = forest.union(p, q) {
                // killed != n: OUTSIDE is the eldest node.
                if v[p] > v[killed] {
                    dim1.push(PersistencePair {
                        birth: v[p],
                        death: v[killed],
                        birth_cell: (r, c),
                        death_cell: (killed / w, killed % w),
                        essential: false,
                    });
                }
            }
        };
        if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
            absorb(&mut forest, n, &mut dim1);
        }
        for (dr, dc) in N8 {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let q = nr as usize * w + nc as usize;
            if forest.active(q) {
                absorb(&mut forest, q, &mut dim1);
            }
        }
    }

    let key = |p: &PersistencePair| {
        (
            std::cmp::Reverse(p.essential),
            std::cmp::Reverse(p.birth.to_bits() as i64),
            p.death.to_bits() as i64,
            p.birth_cell,
            p.death_cell,
        )
    };
    dim0.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    dim1.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    Ok(PersistenceDiagram { dim0, dim1 })
}

/// Betti numbers of the thresholded field by direct flood fill; written
/// independently of the persistence pass so the two can cross-check.
/// b0 counts 4-connected components of {v ≥ τ}, b1 counts bounded
/// 8-connected components of {v < τ}.
pub fn betti_numbers<F: Real>(field: &[F], h: usize, w: usize, tau: f64) -> Result<(usize, usize)> {
    let v = validate(field, h, w)?;
    let n = h * w;
    let fg: Vec<bool> = v.iter().map(|&x| x >= tau).collect();

    let flood = |seeds: &[usize], allowed: &dyn Fn(usize) -> bool, diag: bool, seen: &mut Vec<bool>| {
        let mut stack: Vec<usize> = seeds.iter().copied().filter(|&s| allowed(s) && !seen[s]).collect();
        for &s in &stack {
            seen[s] = true;
        }
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let neigh: &[(isize, isize)] = if diag { &N8 } else { &N4 };
            for &(dr, dc) in neigh {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if allowed(q) && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    };

    let mut seen = vec![false; n];
    let mut b0 = 0;
    for p in 0..n {
        if fg[p] && !seen[p] {
            b0 += 1;
            flood(&[p], &|q| fg[q], false, &mut seen);
        }
    }

    let border: Vec<usize> = (0..n)
        .filter(|&p| {
            let (r, c) = (p / w, p % w);
            r == 0 || c == 0 || r == h - 1 || c == w - 1
        })
        .collect();
    let mut seen = vec![false; n];
    flood(&border, &|q| !fg[q], true, &mut seen);
    let mut b1 = 0;
    for p in 0..n {
        if !fg[p] && !seen[p] {
            b1 += 1;
            flood(&[p], &|q| !fg[q], true, &mut seen);
        }
    }
    Ok((b0, b1))
}

/// Betti numbers implied by a diagram at threshold τ: finite pairs count
/// when birth ≥ τ > death, essentials when birth ≥ τ.
pub fn diagram_betti(diag: &PersistenceDiagram, tau: f64) -> (usize, usize) {
    let count = |pairs: &[PersistencePair]| {
        pairs
            .iter()
            .filter(|p| {
                if p.essential {
                    p.birth >= tau
                } else {
                    p.birth >= tau && tau > p.death
                }
            })
            .count()
    };
    (count(&diag.dim0), count(&diag.dim1))
}

/// One diagram point tagged with the grid cells realizing its birth and
/// death values; essential points expose a birth cell only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalCells {
    pub dim: usize,
    pub birth: f64,
    pub death: f64,
    pub birth_cell: (usize, usize),
    pub death_cell: Option<(usize, usize)>,
}

/// Critical cells of every diagram point of `field`, dim 0 then dim 1, in
/// diagram order. value(birth_cell) = birth exactly, and for non-essential
/// points value(death_cell) = death exactly.
pub fn diagram_critical_cells<F: Real>(field: &[F], h: usize, w: usize) -> Result<Vec<CriticalCells>> {
    let diag = persistence_diagram(field, h, w)?;
    let tag = |dim: usize, pairs: &[PersistencePair]| {
        pairs
            .iter()
            .map(|p| CriticalCells {
                dim,
                birth: p.birth,
                death: p.death,
                birth_cell: p.birth_cell,
                death_cell: if p.essential { None } else { Some(p.death_cell) },
            })
            .collect::<Vec<_>>()
    };
    let mut out = tag(0, &diag.dim0);
    out.extend(tag(1, &diag.dim1));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pairs_sorted(v: &[PersistencePair]) -> Vec<(f64, f64, bool)> {
        let mut out: Vec<_> = v.iter().map(|p| (p.birth, p.death, p.essential)).collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    #[test]
    fn single_pixel_is_one_essential_component() {
        let d = persistence_diagram(&[0.7f64], 1, 1).unwrap();
        assert_eq!(d.dim0.len(), 1);
        assert!(d.dim0[0].essential);
        assert_eq!(d.dim0[0].birth, 0.7);
        assert_eq!(d.dim0[0].death, 0.7);
        assert!(d.dim1.is_empty());
    }

    #[test]
    fn constant_field_has_only_the_essential_class() {
        let d = persistence_diagram(&[0.5f64; 12], 3, 4).unwrap();
        assert_eq!(pairs_sorted(&d.dim0), vec![(0.5, 0.5, true)]);
        assert!(d.dim1.is_empty());
        // Tie rule on equal values: birth cell is the first cell in scan
        // order.
        assert_eq!(d.dim0[0].birth_cell, (0, 0));
    }

    #[test]
    fn two_peaks_on_a_line() {
        // Peaks 1.0 and 0.8 joined through a valley: the younger peak dies
        // where the components merge, the elder survives to the minimum.
        let field = [1.0f64, 0.0, 0.8, 0.0, 0.0];
        let d = persistence_diagram(&field, 5, 1).unwrap();
        assert_eq!(pairs_sorted(&d.dim0), vec![(0.8, 0.0, false), (1.0, 0.0, true)]);
        assert!(d.dim1.is_empty());
        let finite = d.dim0.iter().find(|p| !p.essential).unwrap();
        assert_eq!(finite.birth_cell, (2, 0));
        assert_eq!(finite.death_cell, (1, 0));
        let ess = d.dim0.iter().find(|p| p.essential).unwrap();
        assert_eq!(ess.birth_cell, (0, 0));
    }

    #[test]
    fn annulus_has_one_hole() {
        // Ring of 1.0 at Chebyshev radius 2 of a 7x7 grid; the enclosed 3x3
        // zero block is a hole born when the ring completes and filled at
        // the interior minimum.
        let mut field = vec![0.0f64; 49];
        for r in 0..7 {
            for c in 0..7 {
                let d = (r as isize - 3).abs().max((c as isize - 3).abs());
                if d == 2 {
                    field[r * 7 + c] = 1.0;
                }
            }
        }
        let d = persistence_diagram(&field, 7, 7).unwrap();
        assert_eq!(pairs_sorted(&d.dim1), vec![(1.0, 0.0, false)]);
        let hole = &d.dim1[0];
        assert_eq!(field[hole.birth_cell.0 * 7 + hole.birth_cell.1], 1.0);
        assert_eq!(field[hole.death_cell.0 * 7 + hole.death_cell.1], 0.0);
        let dc = hole.death_cell;
        assert!(dc.0 >= 2 && dc.0 <= 4 && dc.1 >= 2 && dc.1 <= 4, "death inside ring: {dc:?}");
        // dim0: the ring is the only foreground component.
        assert_eq!(pairs_sorted(&d.dim0), vec![(1.0, 0.0, true)]);
    }

    #[test]
    fn broken_ring_has_no_hole() {
        let mut field = vec![0.0f64; 49];
        for r in 0..7 {
            for c in 0..7 {
                let d = (r as isize - 3).abs().max((c as isize - 3).abs());
                if d == 2 {
                    field[r * 7 + c] = 1.0;
                }
            }
        }
        field[1 * 7 + 3] = 0.0;
        let d = persistence_diagram(&field, 7, 7).unwrap();
        assert!(d.dim1.is_empty());
    }

    #[test]
    fn nested_rings_give_two_holes() {
        // 11x11 with rings at radii 2 and 4: two holes, both persisting the
        // full value range; the inner disc and the gap ring are separate
        // complement components.
        let mut field = vec![0.0f64; 121];
        for r in 0..11 {
            for c in 0..11 {
                let d = (r as isize - 5).abs().max((c as isize - 5).abs());
                if d == 2 || d == 4 {
                    field[r * 11 + c] = 1.0;
                }
            }
        }
        let d = persistence_diagram(&field, 11, 11).unwrap();
        assert_eq!(pairs_sorted(&d.dim1), vec![(1.0, 0.0, false), (1.0, 0.0, false)]);
        let (b0, b1) = betti_numbers(&field, 11, 11, 0.5).unwrap();
        assert_eq!((b0, b1), (2, 2));
    }

    #[test]
    fn graded_hole_dies_at_interior_maximum_of_complement() {
        // Interior of the ring carries 0.4: the hole fills once τ drops to
        // 0.4, so the pair is (1.0, 0.4).
        let mut field = vec![0.0f64; 49];
        for r in 0..7 {
            for c in 0..7 {
                let d = (r as isize - 3).abs().max((c as isize - 3).abs());
                if d == 2 {
                    field[r * 7 + c] = 1.0;
                } else if d < 2 {
                    field[r * 7 + c] = 0.4;
                }
            }
        }
        let d = persistence_diagram(&field, 7, 7).unwrap();
        assert_eq!(pairs_sorted(&d.dim1), vec![(1.0, 0.4, false)]);
        assert_eq!((diagram_betti(&d, 0.7)), (1, 1));
        assert_eq!((diagram_betti(&d, 0.4)), (1, 0));
        assert_eq!((diagram_betti(&d, 0.2)), (1, 0));
    }

    #[test]
    fn diagonal_foreground_does_not_connect() {
        // Foreground uses 4-connectivity: two diagonal pixels are separate
        // components, and the complement stays connected (8-conn) between
        // them, so no hole appears.
        let field = [1.0f64, 0.0, 0.0, 0.9];
        let d = persistence_diagram(&field, 2, 2).unwrap();
        assert_eq!(pairs_sorted(&d.dim0), vec![(0.9, 0.0, false), (1.0, 0.0, true)]);
        assert!(d.dim1.is_empty());
        assert_eq!(betti_numbers(&field, 2, 2, 0.5).unwrap(), (2, 0));
    }

    #[test]
    fn field_values_at_critical_cells_equal_pair_coordinates() {
        let mut rng = crate::rng::rng_for(40, "topo_cells", 0, 0);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
            let field: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let d = persistence_diagram(&field, h, w).unwrap();
            for p in d.dim0.iter().chain(&d.dim1) {
                assert_eq!(field[p.birth_cell.0 * w + p.birth_cell.1], p.birth);
                assert_eq!(field[p.death_cell.0 * w + p.death_cell.1], p.death);
                assert!(p.birth >= p.death);
                if !p.essential {
                    assert!(p.birth > p.death, "zero-persistence pair leaked");
                }
            }
            assert_eq!(d.dim0.iter().filter(|p| p.essential).count(), 1);
            assert!(d.dim1.iter().all(|p| !p.essential));
        }
    }

    #[test]
    fn diagram_counts_match_flood_fill_on_random_fields() {
        // The core cross-check: diagram-implied Betti numbers must equal
        // direct flood-fill counts at thresholds on, between, and beyond
        // the field values. Quantized values force heavy tie traffic.
        let mut rng = crate::rng::rng_for(41, "topo_oracle", 0, 0);
        for case in 0..250 {
            let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let quantized = case % 2 == 0;
            let field: Vec<f64> = (0..h * w)
                .map(|_| {
                    if quantized {
                        rng.gen_range(0..4) as f64 / 3.0
                    } else {
                        rng.gen::<f64>()
                    }
                })
                .collect();
            let d = persistence_diagram(&field, h, w).unwrap();
            let mut taus: Vec<f64> = field.iter().copied().collect();
            taus.extend(field.iter().map(|v| v - 1e-9));
            taus.extend(field.iter().map(|v| v + 1e-9));
            taus.push(-1.0);
            taus.push(2.0);
            for &tau in &taus {
                let oracle = betti_numbers(&field, h, w, tau).unwrap();
                let implied = diagram_betti(&d, tau);
                assert_eq!(
                    implied, oracle,
                    "case {case} {h}x{w} tau={tau}\nfield={field:?}"
                );
            }
        }
    }

    #[test]
    fn increasing_value_rescale_maps_coordinates_and_keeps_cells() {
        let mut rng = crate::rng::rng_for(42, "topo_rescale", 0, 0);
        let (h, w) = (7, 6);
        let field: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let f = |v: f64| 0.5 * v + 0.25;
        let scaled: Vec<f64> = field.iter().map(|&v| f(v)).collect();
        let a = persistence_diagram(&field, h, w).unwrap();
        let b = persistence_diagram(&scaled, h, w).unwrap();
        assert_eq!(a.dim0.len(), b.dim0.len());
        assert_eq!(a.dim1.len(), b.dim1.len());
        for (pa, pb) in a.dim0.iter().zip(&b.dim0).chain(a.dim1.iter().zip(&b.dim1)) {
            assert!((pb.birth - f(pa.birth)).abs() < 1e-12);
            assert!((pb.death - f(pa.death)).abs() < 1e-12);
            assert_eq!(pa.birth_cell, pb.birth_cell);
            assert_eq!(pa.death_cell, pb.death_cell);
            assert_eq!(pa.essential, pb.essential);
        }
    }

    #[test]
    fn pair_value_multiset_is_invariant_under_grid_symmetries() {
        // Persistence depends only on the field, not the scan order; the
        // transpose and the 180° rotation exercise every tie-break path.
        let mut rng = crate::rng::rng_for(45, "topo_sym", 0, 0);
        for _ in 0..40 {
            let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
            let field: Vec<f64> =
                (0..h * w).map(|_| rng.gen_range(0..4) as f64 / 3.0).collect();
            let mut transposed = vec![0.0; h * w];
            let mut rotated = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    transposed[c * h + r] = field[r * w + c];
                    rotated[(h - 1 - r) * w + (w - 1 - c)] = field[r * w + c];
                }
            }
            let a = persistence_diagram(&field, h, w).unwrap();
            let b = persistence_diagram(&transposed, w, h).unwrap();
            let c = persistence_diagram(&rotated, h, w).unwrap();
            assert_eq!(pairs_sorted(&a.dim0), pairs_sorted(&b.dim0));
            assert_eq!(pairs_sorted(&a.dim1), pairs_sorted(&b.dim1));
            assert_eq!(pairs_sorted(&a.dim0), pairs_sorted(&c.dim0));
            assert_eq!(pairs_sorted(&a.dim1), pairs_sorted(&c.dim1));
        }
    }

    #[test]
    fn repeated_runs_are_identical() {
        let mut rng = crate::rng::rng_for(43, "topo_det", 0, 0);
        let field: Vec<f64> = (0..64).map(|_| rng.gen_range(0..3) as f64 / 2.0).collect();
        let a = persistence_diagram(&field, 8, 8).unwrap();
        let b = persistence_diagram(&field, 8, 8).unwrap();
        assert_eq!(a.dim0, b.dim0);
        assert_eq!(a.dim1, b.dim1);
    }

    /// True when the finite pairs of two diagrams admit a matching whose
    /// largest edge (L∞, diagonal allowed) is at most `c`: a perfect
    /// matching on the augmented bipartite graph, found by Kuhn's
    /// augmenting paths.
    fn bottleneck_feasible(a: &[PersistencePair], b: &[PersistencePair], c: f64) -> bool {
        let (na, nb) = (a.len(), b.len());
        let n = na + nb;
        let edge = |i: usize, j: usize| -> bool {
            let cost = match (i < na, j < nb) {
                (true, true) => {
                    (a[i].birth - b[j].birth).abs().max((a[i].death - b[j].death).abs())
                }
                (true, false) => (a[i].birth - a[i].death) / 2.0,
                (false, true) => (b[j].birth - b[j].death) / 2.0,
                (false, false) => 0.0,
            };
            cost <= c
        };
        let mut match_right = vec![usize::MAX; n];
        fn augment(
            i: usize,
            n: usize,
            edge: &dyn Fn(usize, usize) -> bool,
            seen: &mut [bool],
            match_right: &mut [usize],
        ) -> bool {
            for j in 0..n {
                if edge(i, j) && !seen[j] {
                    seen[j] = true;
                    if match_right[j] == usize::MAX
                        || augment(match_right[j], n, edge, seen, match_right)
                    {
                        match_right[j] = i;
                        return true;
                    }
                }
            }
            false
        }
        for i in 0..n {
            let mut seen = vec![false; n];
            if !augment(i, n, &edge, &mut seen, &mut match_right) {
                return false;
            }
        }
        true
    }

    #[test]
    fn perturbation_bounds_the_bottleneck_distance() {
        // Stability: ‖f−g‖∞ ≤ δ implies a diagram matching with every edge
        // at most δ, and essential births move by at most δ.
        let mut rng = crate::rng::rng_for(44, "topo_stab", 0, 0);
        for &delta in &[0.01f64, 0.05] {
            for _ in 0..30 {
                let (h, w) = (rng.gen_range(2..=10), rng.gen_range(2..=10));
                let field: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
                let noisy: Vec<f64> = field
                    .iter()
                    .map(|v| (v + rng.gen_range(-delta..=delta)).clamp(0.0, 1.0))
                    .collect();
                let a = persistence_diagram(&field, h, w).unwrap();
                let b = persistence_diagram(&noisy, h, w).unwrap();
                let tol = delta + 1e-12;
                for (pa, pb) in [(&a.dim0, &b.dim0), (&a.dim1, &b.dim1)] {
                    let fa: Vec<_> = pa.iter().filter(|p| !p.essential).copied().collect();
                    let fb: Vec<_> = pb.iter().filter(|p| !p.essential).copied().collect();
                    assert!(
                        bottleneck_feasible(&fa, &fb, tol),
                        "delta {delta}: no matching within {tol}"
                    );
                }
                let ess = |d: &PersistenceDiagram| {
                    d.dim0.iter().find(|p| p.essential).unwrap().birth
                };
                assert!((ess(&a) - ess(&b)).abs() <= tol);
            }
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(persistence_diagram(&[0.0f64; 4], 2, 3).is_err());
        assert!(persistence_diagram::<f64>(&[], 0, 0).is_err());
        let err = persistence_diagram(&[0.0f64, f64::NAN, 0.0, 0.0], 2, 2).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("(0, 1)"));
        let err = persistence_diagram(&[0.0f64, 0.5, 1.5, 0.0], 2, 2).unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"));
        assert!(persistence_diagram(&[-0.1f64], 1, 1).is_err());
    }

    #[test]
    fn f32_field_produces_the_same_diagram() {
        let field64 = [1.0f64, 0.25, 0.5, 0.75, 0.0, 1.0];
        let field32: Vec<f32> = field64.iter().map(|&v| v as f32).collect();
        let a = persistence_diagram(&field64, 2, 3).unwrap();
        let b = persistence_diagram(&field32, 2, 3).unwrap();
        assert_eq!(pairs_sorted(&a.dim0), pairs_sorted(&b.dim0));
        assert_eq!(pairs_sorted(&a.dim1), pairs_sorted(&b.dim1));
    }

    #[test]
    fn critical_cells_expose_birth_only_for_essentials() {
        let field = [1.0f64, 0.0, 0.8, 0.0, 0.0];
        let cells = diagram_critical_cells(&field, 5, 1).unwrap();
        assert_eq!(cells.len(), 2);
        let finite = cells.iter().find(|c| c.death_cell.is_some()).unwrap();
        assert_eq!((finite.dim, finite.birth, finite.death), (0, 0.8, 0.0));
        assert_eq!(finite.birth_cell, (2, 0));
        assert_eq!(finite.death_cell, Some((1, 0)));
        let ess = cells.iter().find(|c| c.death_cell.is_none()).unwrap();
        assert_eq!(ess.birth_cell, (0, 0));

        let constant = diagram_critical_cells(&[0.7f64; 6], 2, 3).unwrap();
        assert_eq!(constant.len(), 1);
        assert_eq!(constant[0].birth_cell, (0, 0));
        assert_eq!(constant[0].death_cell, None);
    }

    #[test]
    fn critical_cells_mirror_the_diagram_on_random_fields() {
        let mut rng = crate::rng::rng_for(11, "topo-test", 4, 0);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
            let field: Vec<f64> =
                (0..h * w).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let diag = persistence_diagram(&field, h, w).unwrap();
            let cells = diagram_critical_cells(&field, h, w).unwrap();
            let all: Vec<&PersistencePair> =
                diag.dim0.iter().chain(diag.dim1.iter()).collect();
            assert_eq!(cells.len(), all.len());
            for (c, p) in cells.iter().zip(all) {
                assert_eq!((c.birth, c.death, c.birth_cell), (p.birth, p.death, p.birth_cell));
                assert_eq!(c.death_cell.is_none(), p.essential);
                assert_eq!(field[c.birth_cell.0 * w + c.birth_cell.1], c.birth);
                if let Some(dc) = c.death_cell {
                    assert_eq!(field[dc.0 * w + dc.1], c.death);
                }
            }
        }
    }
}
