//! Rasterization of a pixel layout and PPM/PNG encoding.
//!
//! Pixel `(px, py)` of the layout becomes row `py`, column `px` of the image.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::layout::PixelLayout;

pub type Rgb = [u8; 3];

pub const DEFAULT_BACKGROUND: Rgb = [0xF5, 0xF5, 0xF5];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<Rgb>,
    background: Rgb,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r), to8(g), to8(b)]
}

impl Palette {
    /// Builds a palette; colors must be pairwise distinct and differ from the background.
    pub fn new(colors: Vec<Rgb>, background: Rgb) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        seen.insert(background);
        for (i, c) in colors.iter().enumerate() {
            if !seen.insert(*c) {
                return Err(Error::Config(format!(
                    "palette color {i} ({c:?}) repeats another color or the background"
                )));
            }
        }
        Ok(Palette { colors, background })
    }

    /// Golden-angle hue stepping at fixed saturation and value. Collisions
    /// after 8-bit quantization are resolved by darkening.
    pub fn generate(class_count: usize) -> Self {
        const GOLDEN_ANGLE: f64 = 137.507_764_050_037_85;
        let mut seen = std::collections::HashSet::new();
        seen.insert(DEFAULT_BACKGROUND);
        let mut colors = Vec::with_capacity(class_count);
        for i in 0..class_count {
            let hue = (i as f64 * GOLDEN_ANGLE) % 360.0;
            let band = (i / 24) % 3;
            let (s, mut v) = ([0.72, 0.55, 0.9][band], [0.88, 0.75, 0.62][band]);
            let mut c = hsv_to_rgb(hue, s, v);
            while !seen.insert(c) {
                v = if v > 0.02 { v - 0.01 } else { 1.0 };
                c = hsv_to_rgb(hue, s, v);
            }
            colors.push(c);
        }
        Palette {
            colors,
            background: DEFAULT_BACKGROUND,
        }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, class: ClassId) -> Option<Rgb> {
        self.colors.get(class.index()).copied()
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn background(&self) -> Rgb {
        self.background
    }

    /// Reads a `class,r,g,b` CSV. `class` matches a class name, or failing
    /// that a numeric class index. Every class must receive a color.
    pub fn load(path: impl AsRef<Path>, class_names: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let mut colors: Vec<Option<Rgb>> = vec![None; class_names.len()];
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            if rec.len() < 4 {
                return Err(bad("expected class,r,g,b".into()));
            }
            let label = &rec[0];
            let slot = class_names
                .iter()
                .position(|n| n == label)
                .or_else(|| label.parse::<usize>().ok().filter(|&i| i < class_names.len()))
                .ok_or_else(|| bad(format!("unknown class `{label}`")))?;
            let mut rgb = [0u8; 3];
            for (k, v) in rgb.iter_mut().enumerate() {
                *v = rec[k + 1]
                    .parse()
                    .map_err(|_| bad(format!("`{}` is not a 0-255 channel value", &rec[k + 1])))?;
            }
            colors[slot] = Some(rgb);
        }
        let colors = colors
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Config(format!("palette has no color for class `{}`", class_names[i]))))
            .collect::<Result<Vec<_>>>()?;
        Palette::new(colors, DEFAULT_BACKGROUND)
    }
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            pixels.extend_from_slice(&color);
        }
        RasterImage { width, height, pixels }
    }

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(Error::Config(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(RasterImage { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, c: Rgb) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Pixels whose color differs from `background`.
    pub fn count_non_background(&self, background: Rgb) -> usize {
        self.pixels.chunks_exact(3).filter(|p| *p != background).count()
    }
}

pub fn render(layout: &PixelLayout, palette: &Palette) -> Result<RasterImage> {
    let canvas = layout.canvas();
    let mut img = RasterImage::filled(canvas.width(), canvas.height(), palette.background());
    for q in layout.iter() {
        let c = palette.color(q.class).ok_or_else(|| {
            Error::Config(format!(
                "class {} has no palette color ({} colors)",
                q.class,
                palette.len()
            ))
        })?;
        img.set(q.px, q.py, c);
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

/// Binary PPM: `P6\n<w> <h>\n255\n` followed by the RGB payload.
pub fn encode_ppm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_err = |e: png::EncodingError| Error::Invariant(format!("png encoding: {e}"));
        let mut writer = enc.write_header().map_err(to_err)?;
        writer.write_image_data(&img.pixels).map_err(to_err)?;
    }
    Ok(out)
}

pub fn encode(img: &RasterImage, format: ImageFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ImageFormat::Ppm => encode_ppm(img),
        ImageFormat::Png => encode_png(img)?,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses a binary (P6) PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RasterImage> {
    let bad = |msg: &str| Error::Config(format!("invalid PPM: {msg}"));
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P6" {
        return Err(bad("not a P6 file"));
    }
    let mut num = || -> Result<u32> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = bytes.get(pos + 1..).ok_or_else(|| bad("missing payload"))?;
    RasterImage::from_raw(w, h, payload.to_vec())
}

pub fn decode_png(bytes: &[u8]) -> Result<RasterImage> {
    let bad = |e: png::DecodingError| Error::Config(format!("invalid PNG: {e}"));
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Config(format!("unsupported PNG color type {other:?}"))),
    };
    RasterImage::from_raw(info.width, info.height, rgb)
}

/// Reads a PPM or PNG file, sniffing the format from its signature.
pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}
