//! Iso-density region partition.
//!
//! Points are bucketed into square cells of side `2^-L` pixels, non-empty
//! cells are merged into clusters when they lie in each other's 3x3
//! neighborhood, and any cluster whose per-cell count distribution is too
//! peaked (Pearson kurtosis above `theta_k`) is re-gridded at the next finer
//! level. Refinement stops once every cluster is gentle or the finest level
//! is reached.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, PointSet};
use crate::error::{Error, Result};

/// Finest refinement level: cells of 1/64 pixel.
pub const L_MAX: i32 = 6;

/// Clusters with fewer non-empty cells than this never split.
pub const MIN_KURTOSIS_SUPPORT: usize = 4;

/// Grid level relative to one-pixel cells; the cell side is `2^-L` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionLevel(pub i32);

impl PartitionLevel {
    #[inline]
    pub fn grid_size(self) -> f64 {
        (2.0f64).powi(-self.0)
    }

    /// Index of the cell containing canvas coordinate `v`.
    #[inline]
    pub fn cell_of(self, v: f64) -> i64 {
        // scaling by a power of two is exact
        (v * (2.0f64).powi(self.0)).floor() as i64
    }
}

/// A non-empty square cell. Its points are `cluster.point_ids[start..start + count]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub ix: i64,
    pub iy: i64,
    pub count: u32,
    pub start: u32,
}

impl GridCell {
    #[inline]
    fn range(&self) -> std::ops::Range<usize> {
        self.start as usize..(self.start + self.count) as usize
    }
}

/// Result of bucketing a set of points at one level.
///
/// Cells are sorted by `(ix, iy)`; `point_ids` lists points grouped by cell,
/// ascending within a cell.
#[derive(Debug, Clone)]
pub struct Grid {
    pub level: PartitionLevel,
    pub cells: Vec<GridCell>,
    pub point_ids: Vec<u32>,
}

impl Grid {
    pub fn cell_points(&self, cell: &GridCell) -> &[u32] {
        &self.point_ids[cell.range()]
    }
}

/// An iso-density region: 3x3-connected cells at one level plus their points.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub level: PartitionLevel,
    /// Sorted by `(ix, iy)`.
    pub cells: Vec<GridCell>,
    pub point_ids: Vec<u32>,
    pub kurtosis: f64,
}

impl Cluster {
    pub fn point_count(&self) -> usize {
        self.point_ids.len()
    }

    pub fn cell_points(&self, cell: &GridCell) -> &[u32] {
        &self.point_ids[cell.range()]
    }

    /// Per-class point counts of a cell, sorted by class id.
    pub fn cell_classes(&self, cell: &GridCell, ps: &PointSet) -> Vec<(ClassId, u32)> {
        tally(self.cell_points(cell).iter().map(|&i| ps.points()[i as usize].class))
    }

    /// Per-class point counts of the whole cluster, sorted by class id.
    pub fn class_counts(&self, ps: &PointSet) -> Vec<(ClassId, u32)> {
        tally(self.point_ids.iter().map(|&i| ps.points()[i as usize].class))
    }
}

fn tally(classes: impl Iterator<Item = ClassId>) -> Vec<(ClassId, u32)> {
    let mut v: Vec<ClassId> = classes.collect();
    v.sort_unstable();
    let mut out: Vec<(ClassId, u32)> = Vec::new();
    for c in v {
        match out.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => out.push((c, 1)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub theta_k: f64,
    pub l_init: i32,
    pub l_max: i32,
}

impl PartitionParams {
    pub fn new(theta_k: f64, l_init: i32) -> Self {
        PartitionParams {
            theta_k,
            l_init,
            l_max: L_MAX,
        }
    }
}

#[inline]
fn pack(ix: i64, iy: i64) -> u64 {
    let bias = |v: i64| (v + (1i64 << 31)) as u32 as u64;
    (bias(ix) << 32) | bias(iy)
}

/// Buckets the given points into the non-empty cells of `level`.
pub fn gridding(ps: &PointSet, ids: &[u32], level: PartitionLevel) -> Grid {
    let pts = ps.points();
    let mut keyed: Vec<(u64, u32)> = ids
        .iter()
        .map(|&i| {
            let p = &pts[i as usize];
            (pack(level.cell_of(p.x), level.cell_of(p.y)), i)
        })
        .collect();
    keyed.sort_unstable();

    let mut cells: Vec<GridCell> = Vec::new();
    let mut point_ids = Vec::with_capacity(keyed.len());
    let mut last_key = None;
    for (pos, &(key, id)) in keyed.iter().enumerate() {
        if last_key != Some(key) {
            let p = &pts[id as usize];
            cells.push(GridCell {
                ix: level.cell_of(p.x),
                iy: level.cell_of(p.y),
                count: 0,
                start: pos as u32,
            });
            last_key = Some(key);
        }
        cells.last_mut().unwrap().count += 1;
        point_ids.push(id);
    }
    Grid {
        level,
        cells,
        point_ids,
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (ra, rb) = if self.rank[ra as usize] < self.rank[rb as usize] {
            (rb, ra)
        } else {
            (ra, rb)
        };
        self.parent[rb as usize] = ra;
        if self.rank[ra as usize] == self.rank[rb as usize] {
            self.rank[ra as usize] += 1;
        }
    }
}

/// Merges cells within Chebyshev distance 1 into clusters.
///
/// Clusters come out ordered by their smallest `(ix, iy)` cell.
pub fn clustering(grid: &Grid) -> Vec<Cluster> {
    let cells = &grid.cells;
    let index: FxHashMap<(i64, i64), u32> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.ix, c.iy), i as u32))
        .collect();

    let mut dsu = DisjointSet::new(cells.len());
    // the other half of the neighborhood is covered when the neighbor visits us
    const BACKWARD: [(i64, i64); 4] = [(-1, -1), (-1, 0), (-1, 1), (0, -1)];
    for (i, c) in cells.iter().enumerate() {
        for (dx, dy) in BACKWARD {
            if let Some(&j) = index.get(&(c.ix + dx, c.iy + dy)) {
                dsu.union(i as u32, j);
            }
        }
    }

    let mut component_of_root: FxHashMap<u32, usize> = FxHashMap::default();
    let mut clusters: Vec<Cluster> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let root = dsu.find(i as u32);
        let k = *component_of_root.entry(root).or_insert_with(|| {
            clusters.push(Cluster {
                level: grid.level,
                cells: Vec::new(),
                point_ids: Vec::new(),
                kurtosis: 0.0,
            });
            clusters.len() - 1
        });
        let cl = &mut clusters[k];
        cl.cells.push(GridCell {
            start: cl.point_ids.len() as u32,
            ..*cell
        });
        cl.point_ids.extend_from_slice(grid.cell_points(cell));
    }
    for cl in &mut clusters {
        cl.kurtosis = kurtosis(cl);
    }
    clusters
}

/// Pearson kurtosis of the cluster's per-cell point counts.
pub fn kurtosis(cluster: &Cluster) -> f64 {
    let counts: Vec<u32> = cluster.cells.iter().map(|c| c.count).collect();
    pearson_kurtosis(&counts)
}

/// `mu4 / sigma^4` with population moments; 0 when the spread is zero or
/// there are fewer than [`MIN_KURTOSIS_SUPPORT`] samples.
pub fn pearson_kurtosis(counts: &[u32]) -> f64 {
    let n = counts.len();
    if n < MIN_KURTOSIS_SUPPORT {
        return 0.0;
    }
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &c in counts {
        let d = c as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n as f64;
    m4 /= n as f64;
    if m2 <= 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2)
}

/// Partitions the point set into iso-density clusters.
///
/// Every point ends up in exactly one cluster, and every cluster either has
/// kurtosis at most `theta_k` or sits at the finest level.
pub fn iso_density_partition(ps: &PointSet, params: PartitionParams) -> Result<Vec<Cluster>> {
    if !(params.theta_k > 0.0) {
        return Err(Error::Config(format!(
            "kurtosis threshold must be positive, got {}",
            params.theta_k
        )));
    }
    let l_max = params.l_max.max(params.l_init);

    let mut peaked: Vec<Vec<u32>> = vec![(0..ps.len() as u32).collect()];
    let mut gentle: Vec<Cluster> = Vec::new();
    let mut level = params.l_init;
    loop {
        let lvl = PartitionLevel(level);
        let refined: Vec<Cluster> = peaked
            .par_iter()
            .flat_map_iter(|ids| clustering(&gridding(ps, ids, lvl)))
            .collect();
        peaked.clear();
        for cl in refined {
            if cl.kurtosis > params.theta_k && level < l_max {
                peaked.push(cl.point_ids);
            } else {
                gentle.push(cl);
            }
        }
        if peaked.is_empty() {
            break;
        }
        level += 1;
    }

    gentle.sort_by_key(|c| (c.level, c.cells[0].ix, c.cells[0].iy));
    Ok(gentle)
}

/// Writes one `level,cell_count,point_count,kurtosis` row per cluster.
pub fn write_cluster_dump(clusters: &[Cluster], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "level,cell_count,point_count,kurtosis").map_err(io)?;
    for c in clusters {
        writeln!(
            w,
            "{},{},{},{}",
            c.level.0,
            c.cells.len(),
            c.point_count(),
            c.kurtosis
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
