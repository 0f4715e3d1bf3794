//! Regional density equalization.
//!
//! Each cluster's cells are projected onto canvas pixels. Pixels claimed by
//! several clusters go to the one with the smallest area-to-class-count
//! ratio. Cluster data densities (points per pixel) are then pushed through
//! the area-weighted empirical CDF, which becomes the visual density, i.e.
//! the fraction of the footprint to color.

use std::io::Write;
use std::path::Path;

use crate::dataset::{CanvasSpec, ClassId, PointSet};
use crate::error::{Error, Result};
use crate::partition::Cluster;

/// Pixels owned by one cluster after conflict resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFootprint {
    /// Index into the cluster list this footprint was built from.
    pub cluster: usize,
    /// Row-major sorted, disjoint from every other footprint.
    pub pixels: Vec<(u32, u32)>,
    pub point_count: u32,
    /// Per-class point counts of the cluster, sorted by class id.
    pub class_counts: Vec<(ClassId, u32)>,
    pub data_density: f64,
}

impl ClusterFootprint {
    #[inline]
    pub fn area_px(&self) -> usize {
        self.pixels.len()
    }

    /// Number of classes with at least one point in the cluster.
    #[inline]
    pub fn class_count(&self) -> usize {
        self.class_counts.len()
    }
}

/// A cluster that lost every pixel to conflict resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroppedCluster {
    pub cluster: usize,
    pub point_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Footprints {
    pub footprints: Vec<ClusterFootprint>,
    pub dropped: Vec<DroppedCluster>,
}

impl Footprints {
    pub fn dropped_points(&self) -> u64 {
        self.dropped.iter().map(|d| d.point_count as u64).sum()
    }
}

/// Canvas pixels covered by a cluster's cells, as row-major linear indices.
///
/// Sub-pixel cells map to their covering pixel; super-pixel cells expand to
/// every pixel they cover, clipped to the canvas. May contain duplicates.
fn for_each_cover_pixel(cluster: &Cluster, canvas: CanvasSpec, mut f: impl FnMut(usize)) {
    let (w, h) = (canvas.width() as i64, canvas.height() as i64);
    let level = cluster.level.0;
    for cell in &cluster.cells {
        if level >= 0 {
            let (px, py) = (cell.ix >> level, cell.iy >> level);
            if (0..w).contains(&px) && (0..h).contains(&py) {
                f((py * w + px) as usize);
            }
        } else {
            let side = 1i64 << (-level);
            let (x0, y0) = ((cell.ix * side).max(0), (cell.iy * side).max(0));
            let (x1, y1) = (((cell.ix + 1) * side).min(w), ((cell.iy + 1) * side).min(h));
            for py in y0..y1 {
                for px in x0..x1 {
                    f((py * w + px) as usize);
                }
            }
        }
    }
}

/// Resolves overlapping cluster covers into disjoint footprints.
///
/// A contested pixel goes to the cluster minimizing `area / class_count`
/// (pre-resolution area); ties go to the lower cluster index. Clusters left
/// with no pixels are reported in [`Footprints::dropped`].
pub fn rasterize_footprints(clusters: &[Cluster], ps: &PointSet, canvas: CanvasSpec) -> Footprints {
    const NONE: u32 = u32::MAX;
    let n_px = canvas.pixel_count();

    let mut stamp = vec![NONE; n_px];
    let covers: Vec<Vec<u32>> = clusters
        .iter()
        .enumerate()
        .map(|(k, cl)| {
            let mut cover = Vec::new();
            for_each_cover_pixel(cl, canvas, |p| {
                if stamp[p] != k as u32 {
                    stamp[p] = k as u32;
                    cover.push(p as u32);
                }
            });
            cover.sort_unstable();
            cover
        })
        .collect();
    drop(stamp);

    let class_counts: Vec<Vec<(ClassId, u32)>> =
        clusters.iter().map(|c| c.class_counts(ps)).collect();
    let area: Vec<u64> = covers.iter().map(|c| c.len() as u64).collect();
    let classes: Vec<u64> = class_counts.iter().map(|c| c.len() as u64).collect();

    let mut owner = vec![NONE; n_px];
    for (k, cover) in covers.iter().enumerate() {
        for &p in cover {
            let o = owner[p as usize];
            // area_k / n_k < area_o / n_o, cross-multiplied
            if o == NONE || area[k] * classes[o as usize] < area[o as usize] * classes[k] {
                owner[p as usize] = k as u32;
            }
        }
    }

    let width = canvas.width();
    let mut footprints = Vec::new();
    let mut dropped = Vec::new();
    for (k, (cover, counts)) in covers.into_iter().zip(class_counts).enumerate() {
        let point_count = clusters[k].point_count() as u32;
        let pixels: Vec<(u32, u32)> = cover
            .into_iter()
            .filter(|&p| owner[p as usize] == k as u32)
            .map(|p| (p % width, p / width))
            .collect();
        if pixels.is_empty() {
            dropped.push(DroppedCluster {
                cluster: k,
                point_count,
            });
            continue;
        }
        footprints.push(ClusterFootprint {
            cluster: k,
            data_density: point_count as f64 / pixels.len() as f64,
            pixels,
            point_count,
            class_counts: counts,
        });
    }
    Footprints {
        footprints,
        dropped,
    }
}

/// Area-weighted empirical CDF over footprint data densities.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMapping {
    /// Distinct densities, ascending, with the summed area at each.
    support: Vec<(f64, u64)>,
    cumulative: Vec<u64>,
    total: u64,
}

impl DensityMapping {
    pub fn support(&self) -> &[(f64, u64)] {
        &self.support
    }

    pub fn total_weight(&self) -> u64 {
        self.total
    }

    /// Fraction of total area at densities `<= d`.
    pub fn cdf(&self, d: f64) -> f64 {
        let n = self.support.partition_point(|&(s, _)| s <= d);
        if n == 0 {
            0.0
        } else {
            self.cumulative[n - 1] as f64 / self.total as f64
        }
    }
}

pub fn build_density_mapping(fps: &[ClusterFootprint]) -> Result<DensityMapping> {
    if fps.is_empty() {
        return Err(Error::Invariant(
            "density mapping needs at least one footprint".into(),
        ));
    }
    let mut pairs: Vec<(f64, u64)> = fps
        .iter()
        .map(|f| (f.data_density, f.area_px() as u64))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut support: Vec<(f64, u64)> = Vec::new();
    for (d, w) in pairs {
        match support.last_mut() {
            Some((last, acc)) if *last == d => *acc += w,
            _ => support.push((d, w)),
        }
    }
    let cumulative: Vec<u64> = support
        .iter()
        .scan(0u64, |acc, &(_, w)| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap();
    Ok(DensityMapping {
        support,
        cumulative,
        total,
    })
}

/// Pixels to color in one footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBudget {
    pub cluster: usize,
    pub visual_density: f64,
    pub budget: u32,
}

#[inline]
pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Budget for a footprint at the given visual density: rounded half-up,
/// at least one pixel for a non-empty cluster, never more than its area.
pub fn budget_for(visual_density: f64, area_px: usize, point_count: u32) -> u32 {
    let raw = round_half_up(visual_density * area_px as f64) as u64;
    let lo = point_count.min(1) as u64;
    raw.clamp(lo, area_px as u64) as u32
}

pub fn assign_budgets(fps: &[ClusterFootprint], mapping: &DensityMapping) -> Vec<PixelBudget> {
    fps.iter()
        .map(|f| {
            let vd = mapping.cdf(f.data_density);
            PixelBudget {
                cluster: f.cluster,
                visual_density: vd,
                budget: budget_for(vd, f.area_px(), f.point_count),
            }
        })
        .collect()
}

/// Writes `cluster_id,area_px,data_density,visual_density,budget` rows.
pub fn write_mapping_dump(
    fps: &[ClusterFootprint],
    budgets: &[PixelBudget],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "cluster_id,area_px,data_density,visual_density,budget").map_err(io)?;
    for (f, b) in fps.iter().zip(budgets) {
        writeln!(
            w,
            "{},{},{},{},{}",
            f.cluster,
            f.area_px(),
            f.data_density,
            b.visual_density,
            b.budget
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
