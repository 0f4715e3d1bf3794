//! Quality metrics over a rendered abstraction.
//!
//! The canvas is tiled into square windows (edge windows may be smaller).
//! LVC (legible visual contrast) only looks at which pixels are colored.
//! PDDr, PCDr and ECSr compare per-window colored pixels against the
//! ground-truth points; they are order and presence statistics:
//!
//! * PDDr: over 4-neighbor window pairs whose point counts differ, the
//!   share whose colored-pixel counts keep the same order (ties score 1/2).
//! * PCDr: per window, the same score over pairs of classes present in the
//!   window; averaged over windows that have a scorable pair.
//! * ECSr: over (window, class) pairs with at least one point, the share
//!   where the class has no colored pixel. Lower is better.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Point};
use crate::error::{Error, Result};
use crate::layout::PixelLayout;
use crate::render::{Palette, RasterImage};

/// Per-pixel class assignment, `None` for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRaster {
    width: u32,
    height: u32,
    cells: Vec<Option<ClassId>>,
}

impl ClassRaster {
    pub fn new(width: u32, height: u32, cells: Vec<Option<ClassId>>) -> Result<Self> {
        if cells.len() != width as usize * height as usize || width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "{} cells do not form a non-empty {width}x{height} raster",
                cells.len()
            )));
        }
        Ok(ClassRaster { width, height, cells })
    }

    pub fn from_layout(layout: &PixelLayout) -> Self {
        let c = layout.canvas();
        let cells = layout
            .raw()
            .iter()
            .map(|&v| (v != u16::MAX).then_some(ClassId(v)))
            .collect();
        ClassRaster {
            width: c.width(),
            height: c.height(),
            cells,
        }
    }

    /// Maps image colors back to classes; any color outside the palette is an error.
    pub fn from_image(img: &RasterImage, palette: &Palette) -> Result<Self> {
        let lookup: std::collections::HashMap<[u8; 3], ClassId> = palette
            .colors()
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, ClassId(i as u16)))
            .collect();
        let bg = palette.background();
        let cells = img
            .pixels()
            .chunks_exact(3)
            .enumerate()
            .map(|(i, p)| {
                let rgb = [p[0], p[1], p[2]];
                if rgb == bg {
                    Ok(None)
                } else {
                    lookup.get(&rgb).copied().map(Some).ok_or_else(|| {
                        Error::Config(format!(
                            "pixel ({}, {}) has color {rgb:?} which is not in the palette",
                            i as u32 % img.width(),
                            i as u32 / img.width()
                        ))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ClassRaster::new(img.width(), img.height(), cells)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Option<ClassId> {
        self.cells[y as usize * self.width as usize + x as usize]
    }
}

/// Canvas tiled into `window_size` squares with per-window statistics.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    pub window_size: u32,
    pub cols: u32,
    pub rows: u32,
    pub class_count: usize,
    area: Vec<u32>,
    covered: Vec<u32>,
    colored: Vec<u32>,
    truth: Vec<u32>,
}

impl WindowGrid {
    /// Coverage-only grid (no class or ground-truth statistics).
    pub fn coverage(raster: &ClassRaster, window_size: u32) -> Result<Self> {
        Self::build(raster, &[], 0, window_size)
    }

    pub fn build(raster: &ClassRaster, points: &[Point], class_count: usize, window_size: u32) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        let cols = raster.width.div_ceil(window_size);
        let rows = raster.height.div_ceil(window_size);
        let n = cols as usize * rows as usize;
        let mut g = WindowGrid {
            window_size,
            cols,
            rows,
            class_count,
            area: vec![0; n],
            covered: vec![0; n],
            colored: vec![0; n * class_count],
            truth: vec![0; n * class_count],
        };
        for y in 0..raster.height {
            for x in 0..raster.width {
                let w = g.window_of(x, y);
                g.area[w] += 1;
                if let Some(c) = raster.get(x, y) {
                    g.covered[w] += 1;
                    if c.index() < class_count {
                        g.colored[w * class_count + c.index()] += 1;
                    }
                }
            }
        }
        for p in points {
            let (x, y) = p.pixel();
            if x < raster.width && y < raster.height && p.class.index() < class_count && p.x >= 0.0 && p.y >= 0.0 {
                let w = g.window_of(x, y);
                g.truth[w * class_count + p.class.index()] += 1;
            }
        }
        Ok(g)
    }

    #[inline]
    fn window_of(&self, x: u32, y: u32) -> usize {
        (y / self.window_size) as usize * self.cols as usize + (x / self.window_size) as usize
    }

    pub fn len(&self) -> usize {
        self.area.len()
    }

    pub fn is_empty(&self) -> bool {
        self.area.is_empty()
    }

    pub fn area(&self, w: usize) -> u32 {
        self.area[w]
    }

    pub fn covered(&self, w: usize) -> u32 {
        self.covered[w]
    }

    pub fn colored(&self, w: usize) -> &[u32] {
        &self.colored[w * self.class_count..(w + 1) * self.class_count]
    }

    pub fn truth(&self, w: usize) -> &[u32] {
        &self.truth[w * self.class_count..(w + 1) * self.class_count]
    }

    pub fn truth_total(&self, w: usize) -> u64 {
        self.truth(w).iter().map(|&v| v as u64).sum()
    }

    /// Colored pixels over window pixels.
    pub fn visual_density(&self, w: usize) -> f64 {
        visual_density(self.covered[w], self.area[w])
    }

    /// Unordered 4-neighbor window pairs.
    pub fn neighbor_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (cols, rows) = (self.cols as usize, self.rows as usize);
        (0..rows).flat_map(move |r| {
            (0..cols).flat_map(move |c| {
                let i = r * cols + c;
                let right = (c + 1 < cols).then_some((i, i + 1));
                let down = (r + 1 < rows).then_some((i, i + cols));
                right.into_iter().chain(down)
            })
        })
    }
}

pub fn visual_density(covered: u32, area: u32) -> f64 {
    if area == 0 {
        0.0
    } else {
        covered as f64 / area as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvcParams {
    pub window_size: u32,
    pub theta_grey: f64,
}

impl Default for LvcParams {
    fn default() -> Self {
        LvcParams {
            window_size: 10,
            theta_grey: 0.3,
        }
    }
}

/// Contrast between two window densities; zero when both are at or below
/// the perceptibility threshold.
pub fn local_contrast(a: f64, b: f64, theta_grey: f64) -> f64 {
    if a.max(b) <= theta_grey {
        return 0.0;
    }
    let mean = (a + b) / 2.0;
    (a - mean).abs() / mean
}

/// Mean local contrast over 4-neighbor window pairs where at least one
/// window is above `theta_grey`; zero if there are no such pairs.
pub fn lvc(raster: &ClassRaster, params: &LvcParams) -> Result<f64> {
    let g = WindowGrid::coverage(raster, params.window_size)?;
    Ok(lvc_of(&g, params.theta_grey))
}

pub fn lvc_of(g: &WindowGrid, theta_grey: f64) -> f64 {
    let (mut sum, mut pairs) = (0.0, 0u64);
    for (i, j) in g.neighbor_pairs() {
        let (a, b) = (g.visual_density(i), g.visual_density(j));
        if a.max(b) > theta_grey {
            sum += local_contrast(a, b, theta_grey);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// 1 if `visual` orders the pair like `truth`, 1/2 on a visual tie, else 0.
/// `truth` values must differ.
#[inline]
fn order_score(truth: (u64, u64), visual: (u64, u64)) -> f64 {
    use std::cmp::Ordering::*;
    match visual.0.cmp(&visual.1) {
        Equal => 0.5,
        o if o == truth.0.cmp(&truth.1) => 1.0,
        _ => 0.0,
    }
}

pub fn pddr(g: &WindowGrid) -> f64 {
    let (mut sum, mut n) = (0.0, 0u64);
    for (i, j) in g.neighbor_pairs() {
        let (ti, tj) = (g.truth_total(i), g.truth_total(j));
        if ti != tj {
            sum += order_score((ti, tj), (g.covered(i) as u64, g.covered(j) as u64));
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

pub fn pcdr(g: &WindowGrid) -> f64 {
    let (mut total, mut windows) = (0.0, 0u64);
    for w in 0..g.len() {
        let (truth, colored) = (g.truth(w), g.colored(w));
        let present: Vec<usize> = (0..g.class_count).filter(|&c| truth[c] > 0).collect();
        let (mut sum, mut n) = (0.0, 0u64);
        for (k, &a) in present.iter().enumerate() {
            for &b in &present[k + 1..] {
                if truth[a] != truth[b] {
                    sum += order_score(
                        (truth[a] as u64, truth[b] as u64),
                        (colored[a] as u64, colored[b] as u64),
                    );
                    n += 1;
                }
            }
        }
        if n > 0 {
            total += sum / n as f64;
            windows += 1;
        }
    }
    if windows == 0 {
        1.0
    } else {
        total / windows as f64
    }
}

pub fn ecsr(g: &WindowGrid) -> f64 {
    let (mut erased, mut present) = (0u64, 0u64);
    for w in 0..g.len() {
        for (t, c) in g.truth(w).iter().zip(g.colored(w)) {
            if *t > 0 {
                present += 1;
                if *c == 0 {
                    erased += 1;
                }
            }
        }
    }
    if present == 0 {
        0.0
    } else {
        erased as f64 / present as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub lvc: LvcParams,
    /// Window for the point-based metrics.
    pub window_size: u32,
}

impl MetricParams {
    /// LVC at its fixed window; the point-based window scales as a tenth of
    /// the longer canvas side.
    pub fn for_canvas(width: u32, height: u32) -> Self {
        MetricParams {
            lvc: LvcParams::default(),
            window_size: (width.max(height) / 10).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lvc: f64,
    pub pddr: f64,
    pub pcdr: f64,
    pub ecsr: f64,
}

pub fn evaluate(
    raster: &ClassRaster,
    points: &[Point],
    class_count: usize,
    params: &MetricParams,
) -> Result<MetricReport> {
    let g = WindowGrid::build(raster, points, class_count, params.window_size)?;
    Ok(MetricReport {
        lvc: lvc(raster, &params.lvc)?,
        pddr: pddr(&g),
        pcdr: pcdr(&g),
        ecsr: ecsr(&g),
    })
}

/// Writes `metric,value` rows.
pub fn write_report(report: &MetricReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "metric,value")?;
    writeln!(w, "lvc,{}", report.lvc)?;
    writeln!(w, "pddr,{}", report.pddr)?;
    writeln!(w, "pcdr,{}", report.pcdr)?;
    writeln!(w, "ecsr,{}", report.ecsr)
}

/// Writes `wx,wy,area,covered,visual_density,points` rows, one per window.
pub fn write_window_dump(g: &WindowGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "wx,wy,area,covered,visual_density,points").map_err(io)?;
    for i in 0..g.len() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            i as u32 % g.cols,
            i as u32 / g.cols,
            g.area(i),
            g.covered(i),
            g.visual_density(i),
            g.truth_total(i)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Raster where each window `(wx, wy)` of size `ws` gets `fill(wx, wy)`
    /// colored pixels of class 0, filled row-major.
    fn raster_with(cols: u32, rows: u32, ws: u32, fill: impl Fn(u32, u32) -> u32) -> ClassRaster {
        let (w, h) = (cols * ws, rows * ws);
        let mut cells = vec![None; (w * h) as usize];
        for wy in 0..rows {
            for wx in 0..cols {
                for k in 0..fill(wx, wy) {
                    let (x, y) = (wx * ws + k % ws, wy * ws + k / ws);
                    cells[(y * w + x) as usize] = Some(ClassId(0));
                }
            }
        }
        ClassRaster::new(w, h, cells).unwrap()
    }

    #[test]
    fn window_density() {
        assert_eq!(visual_density(0, 100), 0.0);
        assert_eq!(visual_density(100, 100), 1.0);
        assert_eq!(visual_density(30, 100), 0.3);
    }

    #[test]
    fn uniform_image_has_zero_lvc() {
        let r = raster_with(4, 3, 10, |_, _| 70);
        assert_eq!(lvc(&r, &LvcParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn faint_image_has_zero_lvc() {
        let r = raster_with(4, 3, 10, |x, y| (x * 7 + y * 3) % 30);
        assert_eq!(lvc(&r, &LvcParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn two_window_contrast() {
        let r = raster_with(2, 1, 10, |x, _| if x == 0 { 20 } else { 60 });
        assert!((lvc(&r, &LvcParams::default()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn edge_windows_use_their_true_area() {
        let cells = vec![Some(ClassId(0)); 15 * 10];
        let r = ClassRaster::new(15, 10, cells).unwrap();
        let g = WindowGrid::coverage(&r, 10).unwrap();
        assert_eq!((g.cols, g.rows), (2, 1));
        assert_eq!(g.area(1), 50);
        assert_eq!(g.visual_density(1), 1.0);
    }

    #[test]
    fn constant_density_pddr_is_half() {
        let r = raster_with(3, 3, 4, |_, _| 5);
        let pts: Vec<Point> = (0..9)
            .flat_map(|w| (0..=w).map(move |_| Point::new((w % 3 * 4) as f64 + 1.0, (w / 3 * 4) as f64 + 1.0, ClassId(0))))
            .collect();
        let g = WindowGrid::build(&r, &pts, 1, 4).unwrap();
        assert_eq!(pddr(&g), 0.5);
    }

    #[test]
    fn all_background_erases_everything() {
        let r = raster_with(2, 2, 5, |_, _| 0);
        let pts = vec![Point::new(1.0, 1.0, ClassId(0)), Point::new(7.0, 7.0, ClassId(1))];
        let g = WindowGrid::build(&r, &pts, 2, 5).unwrap();
        assert_eq!(ecsr(&g), 1.0);
    }

    #[test]
    fn report_csv() {
        let mut out = Vec::new();
        write_report(&MetricReport { lvc: 0.5, pddr: 1.0, pcdr: 0.75, ecsr: 0.0 }, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "metric,value\nlvc,0.5\npddr,1\npcdr,0.75\necsr,0\n");
    }
}
