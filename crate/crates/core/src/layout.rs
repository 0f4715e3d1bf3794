//! Pixel layout inside each cluster footprint.
//!
//! First an initial, possibly stacked, layout puts each class's pixels on
//! footprint pixels where that class actually has points, most constrained
//! class first. A median-split kd-tree over the footprint's own pixels then
//! spreads stacked placements onto distinct pixels while keeping their
//! relative order along every split axis.

use crate::dataset::{CanvasSpec, ClassId, Point};
use crate::equalize::ClusterFootprint;
use crate::error::{Error, Result};
use crate::allocate::ClassSplit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Placement {
    pub px: u32,
    pub py: u32,
    pub class: ClassId,
}

/// Possibly overlapping placements for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLayout {
    pub cluster: usize,
    pub placements: Vec<Placement>,
}

impl InitialLayout {
    /// Number of placements stacked on a pixel.
    pub fn depth_at(&self, px: u32, py: u32) -> usize {
        self.placements
            .iter()
            .filter(|p| p.px == px && p.py == py)
            .count()
    }
}

/// Injective placements for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayout {
    pub cluster: usize,
    pub assigned: Vec<Placement>,
}

fn local_index(fp: &ClusterFootprint, px: u32, py: u32) -> Option<usize> {
    // pixels are row-major sorted
    fp.pixels
        .binary_search_by(|&(x, y)| (y, x).cmp(&(py, px)))
        .ok()
}

struct ClassState {
    class: ClassId,
    remaining: u32,
    /// Footprint pixels holding points of this class, densest first.
    occupied: Vec<(usize, u32)>,
    placeable: u64,
    centroid: (f64, f64),
}

/// Builds the initial layout of a cluster from its points.
///
/// Repeatedly picks the class with the smallest urgent index (unclaimed
/// placeable pixels over pixels still to place; lower id on ties), fills its
/// placeable pixels in descending order of its point count, and stacks any
/// surplus cyclically over those pixels from the densest down. A class
/// whose occupied pixels are all claimed stacks over its occupied pixels;
/// a class with no points inside the footprint stacks on the footprint
/// pixel nearest its centroid.
pub fn initial_layout(fp: &ClusterFootprint, split: &ClassSplit, points: &[Point]) -> InitialLayout {
    let class_slot = |c: ClassId| split.per_class.iter().position(|a| a.class == c);

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(points.len());
    let mut sums = vec![(0.0f64, 0.0f64, 0u64); split.per_class.len()];
    for p in points {
        let Some(slot) = class_slot(p.class) else { continue };
        let s = &mut sums[slot];
        s.0 += p.x;
        s.1 += p.y;
        s.2 += 1;
        let (px, py) = p.pixel();
        if let Some(li) = local_index(fp, px, py) {
            pairs.push((slot, li));
        }
    }
    pairs.sort_unstable();

    let mut classes: Vec<ClassState> = split
        .per_class
        .iter()
        .zip(&sums)
        .map(|(a, s)| ClassState {
            class: a.class,
            remaining: a.pixels,
            occupied: Vec::new(),
            placeable: 0,
            centroid: if s.2 > 0 {
                (s.0 / s.2 as f64, s.1 / s.2 as f64)
            } else {
                (0.0, 0.0)
            },
        })
        .collect();
    for &(slot, li) in &pairs {
        let occ = &mut classes[slot].occupied;
        match occ.last_mut() {
            Some((last, n)) if *last == li => *n += 1,
            _ => occ.push((li, 1)),
        }
    }

    // classes present on each pixel, for placeable bookkeeping
    let area = fp.area_px();
    let mut start = vec![0usize; area + 1];
    for cs in &classes {
        for &(li, _) in &cs.occupied {
            start[li + 1] += 1;
        }
    }
    for i in 0..area {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut residents = vec![0usize; start[area]];
    for (slot, cs) in classes.iter_mut().enumerate() {
        for &(li, _) in &cs.occupied {
            residents[fill[li]] = slot;
            fill[li] += 1;
        }
        cs.occupied.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        cs.placeable = cs.occupied.len() as u64;
    }

    let mut claimed = vec![false; area];
    let mut placements = Vec::with_capacity(split.budget() as usize);
    let mut done = vec![false; classes.len()];

    let claim = |li: usize, claimed: &mut Vec<bool>, classes: &mut Vec<ClassState>| {
        if !claimed[li] {
            claimed[li] = true;
            for &slot in &residents[start[li]..start[li + 1]] {
                classes[slot].placeable -= 1;
            }
        }
    };

    loop {
        // smallest placeable / remaining, compared by cross-multiplication
        let next = (0..classes.len())
            .filter(|&i| !done[i] && classes[i].remaining > 0)
            .min_by(|&a, &b| {
                let (ca, cb) = (&classes[a], &classes[b]);
                (ca.placeable * cb.remaining as u64)
                    .cmp(&(cb.placeable * ca.remaining as u64))
                    .then(ca.class.cmp(&cb.class))
            });
        let Some(slot) = next else { break };
        done[slot] = true;

        let class = classes[slot].class;
        let mut need = classes[slot].remaining;
        let mut filled: Vec<usize> = Vec::new();
        let occupied = std::mem::take(&mut classes[slot].occupied);
        for &(li, _) in &occupied {
            if need == 0 {
                break;
            }
            if !claimed[li] {
                claim(li, &mut claimed, &mut classes);
                filled.push(li);
                need -= 1;
            }
        }

        let stack_on: Vec<usize> = if need == 0 {
            Vec::new()
        } else if !filled.is_empty() {
            filled.clone()
        } else if !occupied.is_empty() {
            occupied.iter().map(|&(li, _)| li).collect()
        } else {
            let (cx, cy) = classes[slot].centroid;
            let nearest = fp
                .pixels
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let d = |&(x, y): &(u32, u32)| {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        dx * dx + dy * dy
                    };
                    d(a.1).total_cmp(&d(b.1)).then(a.0.cmp(&b.0))
                })
                .map(|(i, _)| i)
                .expect("footprint is non-empty");
            claim(nearest, &mut claimed, &mut classes);
            vec![nearest]
        };

        for li in filled.into_iter().chain(stack_on.iter().copied().cycle().take(need as usize)) {
            let (px, py) = fp.pixels[li];
            placements.push(Placement { px, py, class });
        }
        classes[slot].remaining = 0;
    }

    InitialLayout {
        cluster: fp.cluster,
        placements,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// One kd split, recorded for order-preservation checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRecord {
    pub axis: Axis,
    /// Largest `(axis, other)` key among lower placements, smallest among upper.
    pub placements: ((u32, u32), (u32, u32)),
    /// Same for the cells.
    pub cells: ((u32, u32), (u32, u32)),
}

#[inline]
fn key(axis: Axis, x: u32, y: u32) -> (u32, u32) {
    match axis {
        Axis::X => (x, y),
        Axis::Y => (y, x),
    }
}

/// Disperses an initial layout onto distinct footprint pixels.
pub fn kd_disperse(init: &InitialLayout, fp: &ClusterFootprint) -> Result<ClusterLayout> {
    kd_disperse_traced(init, fp, None)
}

/// [`kd_disperse`] that also records every split it makes.
pub fn kd_disperse_traced(
    init: &InitialLayout,
    fp: &ClusterFootprint,
    mut trace: Option<&mut Vec<SplitRecord>>,
) -> Result<ClusterLayout> {
    let mut places = init.placements.clone();
    let mut cells = fp.pixels.clone();
    if places.len() > cells.len() {
        return Err(Error::Invariant(format!(
            "cluster {}: {} placements for {} pixels",
            fp.cluster,
            places.len(),
            cells.len()
        )));
    }

    let mut assigned = Vec::with_capacity(places.len());
    let mut stack = vec![(0..places.len(), 0..cells.len())];
    while let Some((pr, cr)) = stack.pop() {
        let p = &mut places[pr.clone()];
        let c = &mut cells[cr.clone()];
        let m = p.len();
        if m == 0 {
            continue;
        }
        if m == 1 {
            let target = nearest_cell(c, p[0].px, p[0].py);
            assigned.push(Placement {
                px: target.0,
                py: target.1,
                class: p[0].class,
            });
            continue;
        }

        let (mut x0, mut x1, mut y0, mut y1) = (u32::MAX, 0, u32::MAX, 0);
        for &(x, y) in c.iter() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let axis = if x1 - x0 > y1 - y0 { Axis::X } else { Axis::Y };

        p.sort_unstable_by_key(|q| (key(axis, q.px, q.py), q.class));
        c.sort_unstable_by_key(|&(x, y)| key(axis, x, y));

        if already_disjoint(p, c, axis) {
            assigned.extend_from_slice(p);
            continue;
        }

        let coord = |q: &Placement| key(axis, q.px, q.py).0;
        let t = coord(&p[(m - 1) / 2]);
        let mut p_lo = p.partition_point(|q| coord(q) <= t);
        if p_lo == m {
            p_lo = p.partition_point(|q| coord(q) < t);
        }
        if p_lo == 0 {
            p_lo = m / 2;
        }
        let p_hi = m - p_lo;
        let (t_lo, t_hi) = (coord(&p[p_lo - 1]) as u64, coord(&p[p_lo]) as u64);
        let c_lo = c
            .partition_point(|&(x, y)| 2 * key(axis, x, y).0 as u64 <= t_lo + t_hi)
            .clamp(p_lo, c.len() - p_hi);

        if let Some(trace) = trace.as_deref_mut() {
            let pk = |q: &Placement| key(axis, q.px, q.py);
            let ck = |&(x, y): &(u32, u32)| key(axis, x, y);
            trace.push(SplitRecord {
                axis,
                placements: (pk(&p[p_lo - 1]), pk(&p[p_lo])),
                cells: (ck(&c[c_lo - 1]), ck(&c[c_lo])),
            });
        }

        stack.push((pr.start + p_lo..pr.end, cr.start + c_lo..cr.end));
        stack.push((pr.start..pr.start + p_lo, cr.start..cr.start + c_lo));
    }

    assigned.sort_unstable_by_key(|q| (q.py, q.px));
    Ok(ClusterLayout {
        cluster: fp.cluster,
        assigned,
    })
}

/// True when the placements already sit on distinct cells of this region.
/// Both slices must be sorted by the same axis key.
fn already_disjoint(p: &[Placement], c: &[(u32, u32)], axis: Axis) -> bool {
    let mut ci = 0;
    let mut prev = None;
    for q in p {
        let k = key(axis, q.px, q.py);
        if prev == Some(k) {
            return false;
        }
        prev = Some(k);
        while ci < c.len() && key(axis, c[ci].0, c[ci].1) < k {
            ci += 1;
        }
        if ci == c.len() || key(axis, c[ci].0, c[ci].1) != k {
            return false;
        }
    }
    true
}

fn nearest_cell(cells: &[(u32, u32)], px: u32, py: u32) -> (u32, u32) {
    *cells
        .iter()
        .min_by_key(|&&(x, y)| {
            let (dx, dy) = (x as i64 - px as i64, y as i64 - py as i64);
            (dx * dx + dy * dy, y, x)
        })
        .expect("region has at least one cell")
}

/// Injective class assignment over the whole canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelLayout {
    canvas: CanvasSpec,
    grid: Vec<u16>,
    assigned: usize,
}

const EMPTY: u16 = u16::MAX;

impl PixelLayout {
    pub fn empty(canvas: CanvasSpec) -> Self {
        PixelLayout {
            canvas,
            grid: vec![EMPTY; canvas.pixel_count()],
            assigned: 0,
        }
    }

    pub fn canvas(&self) -> CanvasSpec {
        self.canvas
    }

    /// Assigns a pixel; fails if it is outside the canvas or already taken.
    pub fn assign(&mut self, px: u32, py: u32, class: ClassId) -> Result<()> {
        if !self.canvas.contains(px, py) {
            return Err(Error::Invariant(format!("pixel ({px}, {py}) outside canvas {}", self.canvas)));
        }
        if class.0 == EMPTY {
            return Err(Error::Invariant(format!("class id {class} is reserved")));
        }
        let slot = &mut self.grid[self.canvas.index(px, py)];
        if *slot != EMPTY {
            return Err(Error::Invariant(format!("pixel ({px}, {py}) assigned twice")));
        }
        *slot = class.0;
        self.assigned += 1;
        Ok(())
    }

    pub fn get(&self, px: u32, py: u32) -> Option<ClassId> {
        if !self.canvas.contains(px, py) {
            return None;
        }
        match self.grid[self.canvas.index(px, py)] {
            EMPTY => None,
            c => Some(ClassId(c)),
        }
    }

    pub fn len(&self) -> usize {
        self.assigned
    }

    pub fn is_empty(&self) -> bool {
        self.assigned == 0
    }

    /// Assigned pixels in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = Placement> + '_ {
        let w = self.canvas.width();
        self.grid
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != EMPTY)
            .map(move |(i, &c)| Placement {
                px: i as u32 % w,
                py: i as u32 / w,
                class: ClassId(c),
            })
    }

    /// Assigned pixel count per class.
    pub fn class_histogram(&self, class_count: usize) -> Vec<u64> {
        let mut h = vec![0u64; class_count];
        for &c in &self.grid {
            if c != EMPTY {
                if let Some(slot) = h.get_mut(c as usize) {
                    *slot += 1;
                }
            }
        }
        h
    }

    /// Raw row-major grid; `u16::MAX` marks an empty pixel.
    pub fn raw(&self) -> &[u16] {
        &self.grid
    }
}

/// Merges per-cluster layouts into one canvas-wide assignment.
pub fn assemble(layouts: &[ClusterLayout], canvas: CanvasSpec) -> Result<PixelLayout> {
    let mut out = PixelLayout::empty(canvas);
    for l in layouts {
        for q in &l.assigned {
            out.assign(q.px, q.py, q.class)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocate::ClassAllocation;
    use std::collections::HashMap;

    fn footprint(pixels: &[(u32, u32)]) -> ClusterFootprint {
        let mut pixels = pixels.to_vec();
        pixels.sort_by_key(|&(x, y)| (y, x));
        ClusterFootprint {
            cluster: 0,
            pixels,
            point_count: 1,
            class_counts: vec![(ClassId(0), 1)],
            data_density: 1.0,
        }
    }

    fn split(alloc: &[(u16, u32)]) -> ClassSplit {
        ClassSplit {
            cluster: 0,
            per_class: alloc
                .iter()
                .map(|&(c, px)| ClassAllocation {
                    class: ClassId(c),
                    points: 1,
                    pixels: px,
                    outlier: false,
                })
                .collect(),
            h_used: 1.0,
            h_max: f64::INFINITY,
            infeasible: false,
        }
    }

    fn pt(x: f64, y: f64, c: u16) -> Point {
        Point::new(x, y, ClassId(c))
    }

    fn stack(px: u32, py: u32, n: usize, class: u16) -> Vec<Placement> {
        vec![Placement { px, py, class: ClassId(class) }; n]
    }

    fn strip(w: u32) -> ClusterFootprint {
        footprint(&(0..w).map(|x| (x, 0)).collect::<Vec<_>>())
    }

    #[test]
    fn identity_when_budget_matches_occupancy() {
        let fp = footprint(&[(0, 0), (1, 0), (2, 0), (0, 1)]);
        let pts = [pt(0.5, 0.5, 0), pt(1.2, 0.3, 0), pt(2.5, 0.5, 0)];
        let init = initial_layout(&fp, &split(&[(0, 3)]), &pts);
        let mut got: Vec<(u32, u32)> = init.placements.iter().map(|p| (p.px, p.py)).collect();
        got.sort();
        assert_eq!(got, vec![(0, 0), (1, 0), (2, 0)]);
        assert!(got.iter().all(|&(x, y)| init.depth_at(x, y) == 1));
    }

    #[test]
    fn surplus_stacks_cyclically_by_density() {
        let fp = strip(5);
        let mut pts = vec![pt(0.5, 0.5, 0); 4];
        pts.extend(vec![pt(1.5, 0.5, 0); 2]);
        pts.push(pt(2.5, 0.5, 0));
        let init = initial_layout(&fp, &split(&[(0, 5)]), &pts);
        assert_eq!(
            [init.depth_at(0, 0), init.depth_at(1, 0), init.depth_at(2, 0)],
            [2, 2, 1]
        );
    }

    #[test]
    fn disjoint_classes_use_own_pixels() {
        let fp = strip(4);
        let pts = [pt(0.5, 0.5, 0), pt(1.5, 0.5, 0), pt(2.5, 0.5, 1), pt(3.5, 0.5, 1)];
        let init = initial_layout(&fp, &split(&[(0, 2), (1, 2)]), &pts);
        let mut got: Vec<(u32, u16)> = init.placements.iter().map(|p| (p.px, p.class.0)).collect();
        got.sort();
        assert_eq!(got, vec![(0, 0), (1, 0), (2, 1), (3, 1)]);
    }

    #[test]
    fn constrained_class_goes_first() {
        // class 1 lives only on pixel 0; class 0 lives on 0..3
        let fp = strip(4);
        let mut pts: Vec<Point> = (0..4).map(|x| pt(x as f64 + 0.5, 0.5, 0)).collect();
        pts.push(pt(0.5, 0.5, 1));
        let init = initial_layout(&fp, &split(&[(0, 3), (1, 1)]), &pts);
        let on0: Vec<u16> = init.placements.iter().filter(|p| p.px == 0).map(|p| p.class.0).collect();
        assert_eq!(on0, vec![1]);
    }

    #[test]
    fn class_without_points_anchors_at_centroid() {
        let fp = strip(6);
        // the class-1 point lies outside the footprint
        let pts = [pt(0.5, 0.5, 0), pt(4.4, 3.0, 1)];
        let init = initial_layout(&fp, &split(&[(0, 1), (1, 2)]), &pts);
        assert_eq!(init.depth_at(4, 0), 2);
    }

    #[test]
    fn single_placement_single_cell() {
        let fp = footprint(&[(3, 3)]);
        let init = InitialLayout { cluster: 0, placements: stack(3, 3, 1, 0) };
        let out = kd_disperse(&init, &fp).unwrap();
        assert_eq!(out.assigned, stack(3, 3, 1, 0));
    }

    #[test]
    fn full_stack_fills_square() {
        let fp = footprint(&[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let init = InitialLayout { cluster: 0, placements: stack(0, 0, 4, 0) };
        let out = kd_disperse(&init, &fp).unwrap();
        let mut cells: Vec<(u32, u32)> = out.assigned.iter().map(|p| (p.px, p.py)).collect();
        cells.sort();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn strip_split_keeps_order() {
        let fp = strip(6);
        let mut placements = stack(0, 0, 2, 0);
        placements.push(Placement { px: 5, py: 0, class: ClassId(1) });
        let init = InitialLayout { cluster: 0, placements };
        let mut trace = Vec::new();
        let out = kd_disperse_traced(&init, &fp, Some(&mut trace)).unwrap();
        let cells: Vec<(u32, u16)> = out.assigned.iter().map(|p| (p.px, p.class.0)).collect();
        assert_eq!(cells, vec![(0, 0), (1, 0), (5, 1)]);
        assert_eq!(trace[0].axis, Axis::X);
        assert_eq!(trace[0].placements, ((0, 0), (5, 0)));
    }

    #[test]
    fn too_many_placements_is_an_error() {
        let fp = strip(2);
        let init = InitialLayout { cluster: 0, placements: stack(0, 0, 3, 0) };
        assert!(kd_disperse(&init, &fp).is_err());
    }

    /// Minimum total squared displacement over all injective assignments.
    fn brute_force_cost(places: &[Placement], cells: &[(u32, u32)]) -> i64 {
        fn go(i: usize, places: &[Placement], cells: &[(u32, u32)], used: &mut Vec<bool>) -> i64 {
            if i == places.len() {
                return 0;
            }
            let mut best = i64::MAX;
            for j in 0..cells.len() {
                if !used[j] {
                    used[j] = true;
                    let (dx, dy) = (cells[j].0 as i64 - places[i].px as i64, cells[j].1 as i64 - places[i].py as i64);
                    let rest = go(i + 1, places, cells, used);
                    best = best.min(dx * dx + dy * dy + rest);
                    used[j] = false;
                }
            }
            best
        }
        go(0, places, cells, &mut vec![false; cells.len()])
    }

    #[test]
    fn one_dimensional_dispersion_is_optimal() {
        // along a strip, order-preserving matching is displacement-optimal
        let fp = strip(8);
        for placements in [
            vec![0u32, 0, 5],
            vec![3, 3, 3, 3],
            vec![0, 7, 7, 7, 2],
            vec![1, 1, 2, 2, 6, 6, 6, 6],
        ] {
            let places: Vec<Placement> = placements
                .iter()
                .map(|&x| Placement { px: x, py: 0, class: ClassId(0) })
                .collect();
            let init = InitialLayout { cluster: 0, placements: places.clone() };
            let out = kd_disperse(&init, &fp).unwrap();
            let mut src: Vec<u32> = placements.clone();
            src.sort();
            let dst: Vec<u32> = out.assigned.iter().map(|p| p.px).collect();
            let cost: i64 = src.iter().zip(&dst).map(|(&a, &b)| (a as i64 - b as i64).pow(2)).sum();
            assert_eq!(cost, brute_force_cost(&places, &fp.pixels), "{placements:?} -> {dst:?}");
        }
    }

    #[test]
    fn assemble_detects_overlap() {
        let canvas = CanvasSpec::new(8, 8).unwrap();
        let a = ClusterLayout { cluster: 0, assigned: stack(1, 1, 1, 0) };
        let b = ClusterLayout { cluster: 1, assigned: stack(2, 1, 1, 1) };
        let g = assemble(&[a.clone(), b], canvas).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(2, 1), Some(ClassId(1)));
        assert!(assemble(&[], canvas).unwrap().is_empty());
        assert!(assemble(&[a.clone(), a], canvas).is_err());
    }

    #[test]
    fn dispersion_preserves_class_counts() {
        let pixels: Vec<(u32, u32)> = (0..7).flat_map(|x| (0..5).map(move |y| (x, y))).filter(|&(x, y)| (x + y) % 4 != 0).collect();
        let fp = footprint(&pixels);
        let mut placements = stack(2, 2, 9, 0);
        placements.extend(stack(3, 1, 6, 1));
        placements.extend(stack(6, 4, 5, 2));
        let init = InitialLayout { cluster: 0, placements };
        let out = kd_disperse(&init, &fp).unwrap();
        let mut per: HashMap<u16, usize> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        for q in &out.assigned {
            *per.entry(q.class.0).or_default() += 1;
            assert!(seen.insert((q.px, q.py)));
            assert!(fp.pixels.contains(&(q.px, q.py)));
        }
        assert_eq!(per[&0], 9);
        assert_eq!(per[&1], 6);
        assert_eq!(per[&2], 5);
    }
}
