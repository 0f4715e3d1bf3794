//! Point ingestion, canvas normalization and class bookkeeping.
//!
//! Text inputs are CSV or TSV with a header naming `x`, `y` and `class`
//! columns (any order, case-insensitive). The binary format is
//! `b"PXSC1"`, a little-endian `u64` record count, then `count` records of
//! `f32 x, f32 y, u16 class`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 5] = b"PXSC1";
const BINARY_RECORD_LEN: usize = 10;

/// Dense class index, `0..K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u16);

impl ClassId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub class: ClassId,
}

impl Point {
    pub fn new(x: f64, y: f64, class: ClassId) -> Self {
        Point { x, y, class }
    }

    /// Canvas pixel containing the point. Coordinates are assumed normalized.
    #[inline]
    pub fn pixel(&self) -> (u32, u32) {
        (self.x.max(0.0) as u32, self.y.max(0.0) as u32)
    }
}

/// Axis-aligned bounding box of raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Bounds {
    fn of(points: &[Point]) -> Option<Bounds> {
        let first = points.first()?;
        let mut b = Bounds {
            min_x: first.x,
            max_x: first.x,
            min_y: first.y,
            max_y: first.y,
        };
        for p in &points[1..] {
            b.min_x = b.min_x.min(p.x);
            b.max_x = b.max_x.max(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_y = b.max_y.max(p.y);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// Canvas dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasSpec {
    width: u32,
    height: u32,
}

impl CanvasSpec {
    pub const MIN_SIDE: u32 = 8;

    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width < Self::MIN_SIDE || height < Self::MIN_SIDE {
            return Err(Error::Config(format!(
                "canvas {width}x{height} is smaller than the {0}x{0} minimum",
                Self::MIN_SIDE
            )));
        }
        Ok(CanvasSpec { width, height })
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px < self.width && py < self.height
    }

    /// Row-major linear index of a pixel.
    #[inline]
    pub fn index(&self, px: u32, py: u32) -> usize {
        py as usize * self.width as usize + px as usize
    }
}

impl FromStr for CanvasSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("canvas `{s}` is not of the form WxH")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("canvas `{s}` is not of the form WxH")))
        };
        CanvasSpec::new(parse(w)?, parse(h)?)
    }
}

impl fmt::Display for CanvasSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// An immutable multiclass point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
    class_names: Vec<String>,
    class_counts: Vec<u64>,
    source_bounds: Bounds,
}

impl PointSet {
    /// Builds a point set. Every point's class must index `class_names`.
    pub fn new(points: Vec<Point>, class_names: Vec<String>) -> Result<Self> {
        let source_bounds = Bounds::of(&points)
            .ok_or_else(|| Error::Config("point set must contain at least one point".into()))?;
        if class_names.len() > u16::MAX as usize {
            return Err(Error::Config(format!(
                "{} classes exceed the supported maximum of {}",
                class_names.len(),
                u16::MAX
            )));
        }
        let mut class_counts = vec![0u64; class_names.len()];
        for (i, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::Config(format!("point {i} has a non-finite coordinate")));
            }
            let slot = class_counts.get_mut(p.class.index()).ok_or_else(|| {
                Error::Config(format!(
                    "point {i} has class {} but only {} classes are named",
                    p.class,
                    class_names.len()
                ))
            })?;
            *slot += 1;
        }
        Ok(PointSet {
            points,
            class_names,
            class_counts,
            source_bounds,
        })
    }

    /// Builds a point set whose classes are named `"0".."K-1"`.
    pub fn with_anonymous_classes(points: Vec<Point>, class_count: usize) -> Result<Self> {
        let names = (0..class_count).map(|i| i.to_string()).collect();
        PointSet::new(points, names)
    }

    #[inline]
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a point set holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Bounding box of the coordinates this set was built from.
    pub fn source_bounds(&self) -> Bounds {
        self.source_bounds
    }

    /// Bounding box of the current coordinates.
    pub fn bounds(&self) -> Bounds {
        Bounds::of(&self.points).expect("point set is non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    Csv,
    Tsv,
    #[value(name = "binary-f32")]
    #[serde(rename = "binary-f32")]
    BinaryF32,
}

impl InputFormat {
    /// Guesses the format from a file extension; unknown extensions read as CSV.
    pub fn from_path(path: &Path) -> InputFormat {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("tsv") | Some("tab") => InputFormat::Tsv,
            Some("bin") | Some("pxsc") => InputFormat::BinaryF32,
            _ => InputFormat::Csv,
        }
    }
}

/// Maps class labels to dense ids in first-appearance order.
#[derive(Default)]
struct ClassTable {
    ids: HashMap<String, ClassId>,
    names: Vec<String>,
}

impl ClassTable {
    fn intern(&mut self, name: &str) -> Option<ClassId> {
        if let Some(&id) = self.ids.get(name) {
            return Some(id);
        }
        let id = ClassId(u16::try_from(self.names.len()).ok().filter(|&i| i < u16::MAX)?);
        self.ids.insert(name.to_owned(), id);
        self.names.push(name.to_owned());
        Some(id)
    }
}

pub fn load_points(path: impl AsRef<Path>, format: InputFormat) -> Result<PointSet> {
    let path = path.as_ref();
    match format {
        InputFormat::Csv => load_delimited(path, b','),
        InputFormat::Tsv => load_delimited(path, b'\t'),
        InputFormat::BinaryF32 => load_binary(path),
    }
}

fn load_delimited(path: &Path, delimiter: u8) -> Result<PointSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));

    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let headers = reader
        .byte_headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name.as_bytes()))
            .ok_or_else(|| parse_err(1, format!("missing `{name}` column in header")))
    };
    let (cx, cy, cc) = (column("x")?, column("y")?, column("class")?);

    let mut classes = ClassTable::default();
    let mut points = Vec::new();
    let mut record = csv::ByteRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(line, |p| p.line());
                return Err(parse_err(line, e.to_string()));
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .ok_or_else(|| parse_err(line, format!("missing `{name}` field")))
        };
        let coord = |i: usize, name: &str| -> Result<f64> {
            let raw = field(i, name)?;
            std::str::from_utf8(raw)
                .ok()
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    parse_err(
                        line,
                        format!("`{name}` value `{}` is not a finite number", String::from_utf8_lossy(raw)),
                    )
                })
        };
        let x = coord(cx, "x")?;
        let y = coord(cy, "y")?;
        let label = std::str::from_utf8(field(cc, "class")?)
            .map_err(|_| parse_err(line, "class label is not valid UTF-8".into()))?;
        let class = classes
            .intern(label)
            .ok_or_else(|| parse_err(line, "too many distinct classes".into()))?;
        points.push(Point::new(x, y, class));
    }

    if points.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    PointSet::new(points, classes.names)
}

fn load_binary(path: &Path) -> Result<PointSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    let header_len = BINARY_MAGIC.len() + 8;
    if bytes.len() < header_len || &bytes[..BINARY_MAGIC.len()] != BINARY_MAGIC {
        return Err(format_err("missing PXSC1 header".into()));
    }
    let count = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let body = &bytes[header_len..];
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(BINARY_RECORD_LEN))
        .ok_or_else(|| format_err(format!("record count {count} is too large")))?;
    if body.len() != expected {
        return Err(format_err(format!(
            "header declares {count} records ({expected} bytes) but {} bytes follow",
            body.len()
        )));
    }
    if count == 0 {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }

    let mut classes = ClassTable::default();
    let mut remap: HashMap<u16, ClassId> = HashMap::new();
    let mut points = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap()) as f64;
        let raw = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        if !x.is_finite() || !y.is_finite() {
            return Err(format_err(format!("record {i} has a non-finite coordinate")));
        }
        let class = match remap.get(&raw) {
            Some(&id) => id,
            None => {
                let id = classes
                    .intern(&raw.to_string())
                    .ok_or_else(|| format_err("too many distinct classes".into()))?;
                remap.insert(raw, id);
                id
            }
        };
        points.push(Point::new(x, y, class));
    }
    PointSet::new(points, classes.names)
}

/// Writes a point set in the binary record format. Class ids are stored as-is.
pub fn write_binary(ps: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(ps.len() as u64).to_le_bytes())?;
        for p in ps.points() {
            w.write_all(&(p.x as f32).to_le_bytes())?;
            w.write_all(&(p.y as f32).to_le_bytes())?;
            w.write_all(&p.class.0.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Writes a point set as CSV with an `x,y,class` header, using class names.
pub fn write_csv(ps: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(["x", "y", "class"]).map_err(to_io)?;
    for p in ps.points() {
        w.write_record([
            p.x.to_string().as_str(),
            p.y.to_string().as_str(),
            ps.class_names()[p.class.index()].as_str(),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fits the bounding box of `ps` into the canvas with a uniform scale.
///
/// The target area is `[margin*W, (1-margin)*W) x [margin*H, (1-margin)*H)`.
/// The shorter relative axis is centered; a zero-extent axis maps to the
/// canvas center. Coordinates that land on the far edge are clamped just
/// inside it so pixel indices stay in range.
pub fn normalize(ps: &PointSet, canvas: CanvasSpec, margin: f64) -> Result<PointSet> {
    if !(0.0..0.5).contains(&margin) {
        return Err(Error::Config(format!("margin {margin} outside [0, 0.5)")));
    }
    let b = ps.bounds();
    let (w, h) = (canvas.width() as f64, canvas.height() as f64);
    let (x0, y0) = (margin * w, margin * h);
    let (avail_w, avail_h) = ((1.0 - 2.0 * margin) * w, (1.0 - 2.0 * margin) * h);

    let scale_x = (b.width() > 0.0).then(|| avail_w / b.width());
    let scale_y = (b.height() > 0.0).then(|| avail_h / b.height());
    let scale = match (scale_x, scale_y) {
        (Some(sx), Some(sy)) => sx.min(sy),
        (Some(s), None) | (None, Some(s)) => s,
        (None, None) => 0.0,
    };

    let off_x = x0 + (avail_w - b.width() * scale) / 2.0;
    let off_y = y0 + (avail_h - b.height() * scale) / 2.0;
    let hi_x = (x0 + avail_w).next_down();
    let hi_y = (y0 + avail_h).next_down();

    let points = ps
        .points()
        .iter()
        .map(|p| {
            let x = (off_x + (p.x - b.min_x) * scale).clamp(x0, hi_x);
            let y = (off_y + (p.y - b.min_y) * scale).clamp(y0, hi_y);
            Point::new(x, y, p.class)
        })
        .collect();

    Ok(PointSet {
        points,
        class_names: ps.class_names.clone(),
        class_counts: ps.class_counts.clone(),
        source_bounds: ps.source_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &[u8], suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents).unwrap();
        f.flush().unwrap();
        f
    }

    fn square(points: &[(f64, f64)]) -> PointSet {
        let pts = points.iter().map(|&(x, y)| Point::new(x, y, ClassId(0))).collect();
        PointSet::with_anonymous_classes(pts, 1).unwrap()
    }

    #[test]
    fn minimal_csv() {
        let f = write_tmp(b"x,y,class\n0,0,a\n1,1,b", ".csv");
        let ps = load_points(f.path(), InputFormat::Csv).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.class_count(), 2);
        assert_eq!(ps.class_names(), ["a", "b"]);
    }

    #[test]
    fn integer_classes_are_counted() {
        let f = write_tmp(b"x,y,class\n0,0,0\n1,1,0\n2,2,1\n", ".csv");
        let ps = load_points(f.path(), InputFormat::Csv).unwrap();
        assert_eq!(ps.class_counts(), [2, 1]);
    }

    #[test]
    fn duplicates_are_kept() {
        let f = write_tmp(b"x,y,class\n3,4,a\n3,4,a\n0,1,a\n", ".csv");
        let ps = load_points(f.path(), InputFormat::Csv).unwrap();
        assert_eq!(ps.len(), 3);
    }

    #[test]
    fn header_columns_in_any_order_and_tsv() {
        let f = write_tmp(b"class\tY\tX\nq\t2\t1\n", ".tsv");
        let ps = load_points(f.path(), InputFormat::Tsv).unwrap();
        assert_eq!(ps.points()[0], Point::new(1.0, 2.0, ClassId(0)));
    }

    #[test]
    fn parse_error_names_line() {
        let f = write_tmp(b"x,y,class\n0,0,a\n1,oops,b\n", ".csv");
        match load_points(f.path(), InputFormat::Csv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_inputs() {
        let f = write_tmp(b"", ".csv");
        assert!(matches!(
            load_points(f.path(), InputFormat::Csv),
            Err(Error::EmptyDataset { .. })
        ));
        let f = write_tmp(b"x,y,class\n", ".csv");
        assert!(matches!(
            load_points(f.path(), InputFormat::Csv),
            Err(Error::EmptyDataset { .. })
        ));
        let mut bin = BINARY_MAGIC.to_vec();
        bin.extend_from_slice(&0u64.to_le_bytes());
        let f = write_tmp(&bin, ".bin");
        assert!(matches!(
            load_points(f.path(), InputFormat::BinaryF32),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn binary_roundtrip_and_truncation() {
        let pts = vec![
            Point::new(1.5, -2.0, ClassId(3)),
            Point::new(0.0, 4.25, ClassId(0)),
            Point::new(7.0, 7.0, ClassId(3)),
        ];
        let ps = PointSet::with_anonymous_classes(pts, 4).unwrap();
        let f = tempfile::Builder::new().suffix(".bin").tempfile().unwrap();
        write_binary(&ps, f.path()).unwrap();
        let back = load_points(f.path(), InputFormat::from_path(f.path())).unwrap();
        assert_eq!(back.len(), 3);
        // first-appearance remap: raw 3 -> 0, raw 0 -> 1
        assert_eq!(back.class_names(), ["3", "0"]);
        assert_eq!(back.class_counts(), [2, 1]);
        assert_eq!((back.points()[0].x, back.points()[0].y), (1.5, -2.0));

        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes.pop();
        let g = write_tmp(&bytes, ".bin");
        assert!(matches!(
            load_points(g.path(), InputFormat::BinaryF32),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn normalize_midpoint() {
        let ps = square(&[(0.0, 0.0), (10.0, 10.0), (5.0, 5.0)]);
        let n = normalize(&ps, CanvasSpec::new(100, 100).unwrap(), 0.0).unwrap();
        assert_eq!((n.points()[2].x, n.points()[2].y), (50.0, 50.0));
    }

    #[test]
    fn normalize_single_point_to_center() {
        let ps = square(&[(123.0, -7.0)]);
        let n = normalize(&ps, CanvasSpec::new(100, 60).unwrap(), 0.0).unwrap();
        assert_eq!((n.points()[0].x, n.points()[0].y), (50.0, 30.0));
    }

    #[test]
    fn normalize_preserves_aspect_and_clamps_edge() {
        let ps = square(&[(0.0, 0.0), (10.0, 5.0)]);
        let n = normalize(&ps, CanvasSpec::new(100, 100).unwrap(), 0.0).unwrap();
        let p = n.points()[1];
        assert!(p.x < 100.0 && p.x > 100.0 - 1e-9);
        assert_eq!(p.y, 75.0);
        assert_eq!(n.points()[0].y, 25.0);
        assert_eq!(p.pixel(), (99, 75));
    }

    #[test]
    fn normalize_respects_margin() {
        let ps = square(&[(0.0, 0.0), (1.0, 1.0)]);
        let n = normalize(&ps, CanvasSpec::new(100, 100).unwrap(), 0.1).unwrap();
        assert_eq!(n.points()[0].x, 10.0);
        assert!(n.points()[1].x < 90.0 && n.points()[1].x > 89.999);
    }

    #[test]
    fn canvas_parse_and_guard() {
        let c: CanvasSpec = "1200x800".parse().unwrap();
        assert_eq!((c.width(), c.height()), (1200, 800));
        assert!("7x100".parse::<CanvasSpec>().is_err());
        assert!("100".parse::<CanvasSpec>().is_err());
    }

    fn arb_pointset() -> impl Strategy<Value = PointSet> {
        (1usize..5)
            .prop_flat_map(|k| {
                (
                    Just(k),
                    prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4, 0..k as u16), 1..200),
                )
            })
            .prop_map(|(k, raw)| {
                let pts = raw
                    .into_iter()
                    .map(|(x, y, c)| Point::new(x, y, ClassId(c)))
                    .collect();
                PointSet::with_anonymous_classes(pts, k).unwrap()
            })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(ps in arb_pointset(), w in 8u32..500, h in 8u32..500) {
            let canvas = CanvasSpec::new(w, h).unwrap();
            let once = normalize(&ps, canvas, 0.0).unwrap();
            let twice = normalize(&once, canvas, 0.0).unwrap();
            for (a, b) in once.points().iter().zip(twice.points()) {
                prop_assert!((a.x - b.x).abs() <= 1e-9 && (a.y - b.y).abs() <= 1e-9);
            }
            for p in once.points() {
                prop_assert!(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64);
            }
        }

        #[test]
        fn class_counts_match_recount(ps in arb_pointset()) {
            let mut recount = vec![0u64; ps.class_count()];
            for p in ps.points() {
                recount[p.class.index()] += 1;
            }
            prop_assert_eq!(recount.as_slice(), ps.class_counts());
            prop_assert_eq!(ps.class_counts().iter().sum::<u64>(), ps.len() as u64);
        }
    }
}
