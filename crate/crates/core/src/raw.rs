//! Bayer frame ingestion and RGB output.
//!
//! Mosaics arrive as 16-bit binary graymaps (P5) with a TOML sidecar naming
//! the colour filter layout and the sensor black/white levels. Rendered
//! images are written as binary pixmaps (P6) or PNG.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Colour of the top-left 2×2 cell, row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [CfaPattern::Rggb, CfaPattern::Bggr, CfaPattern::Grbg, CfaPattern::Gbrg];

    pub fn as_str(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        }
    }

    /// Position of the red photosite inside the 2×2 cell as `(row, col)`.
    pub fn red_offset(self) -> (usize, usize) {
        match self {
            CfaPattern::Rggb => (0, 0),
            CfaPattern::Grbg => (0, 1),
            CfaPattern::Gbrg => (1, 0),
            CfaPattern::Bggr => (1, 1),
        }
    }

    /// Colour index (0 = R, 1 = G, 2 = B) of photosite `(y, x)`.
    pub fn color_at(self, y: usize, x: usize) -> usize {
        let (ry, rx) = self.red_offset();
        match ((y + ry) % 2, (x + rx) % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CfaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CfaPattern::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Metadata(format!("unknown cfa_pattern `{s}`")))
    }
}

/// Sensor description read from the sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawMetadata {
    pub cfa_pattern: CfaPattern,
    pub black_level: u16,
    pub white_level: u16,
}

#[derive(Deserialize)]
struct Sidecar {
    cfa_pattern: Option<String>,
    black_level: Option<i64>,
    white_level: Option<i64>,
}

fn level(value: Option<i64>, key: &str) -> Result<u16> {
    let v = value.ok_or_else(|| Error::Metadata(format!("missing key `{key}`")))?;
    u16::try_from(v).map_err(|_| Error::Metadata(format!("`{key}` = {v} is outside 0..=65535")))
}

impl RawMetadata {
    pub fn new(cfa_pattern: CfaPattern, black_level: u16, white_level: u16) -> Result<Self> {
        ensure!(
            black_level < white_level,
            Metadata,
            "black_level {black_level} must be below white_level {white_level}"
        );
        Ok(RawMetadata {
            cfa_pattern,
            black_level,
            white_level,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sidecar: Sidecar = toml::from_str(text).map_err(|e| Error::Metadata(format!("unreadable sidecar: {}", e.message())))?;
        let cfa = sidecar
            .cfa_pattern
            .ok_or_else(|| Error::Metadata("missing key `cfa_pattern`".into()))?;
        let black = level(sidecar.black_level, "black_level")?;
        let white = level(sidecar.white_level, "white_level")?;
        RawMetadata::new(cfa.parse()?, black, white)
    }

    pub fn to_toml(&self) -> String {
        format!(
            "cfa_pattern = \"{}\"\nblack_level = {}\nwhite_level = {}\n",
            self.cfa_pattern, self.black_level, self.white_level
        )
    }
}

/// A single-plane mosaic straight from the sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    width: usize,
    height: usize,
    samples: Vec<u16>,
    meta: RawMetadata,
}

impl RawFrame {
    pub fn new(width: usize, height: usize, samples: Vec<u16>, meta: RawMetadata) -> Result<Self> {
        ensure!(width > 0 && height > 0, InvalidShape, "empty frame {width}x{height}");
        ensure!(
            samples.len() == width * height,
            Format,
            "{} samples for a {width}x{height} frame",
            samples.len()
        );
        let meta = RawMetadata::new(meta.cfa_pattern, meta.black_level, meta.white_level)?;
        Ok(RawFrame {
            width,
            height,
            samples,
            meta,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn metadata(&self) -> RawMetadata {
        self.meta
    }

    pub fn cfa_pattern(&self) -> CfaPattern {
        self.meta.cfa_pattern
    }

    pub fn black_level(&self) -> u16 {
        self.meta.black_level
    }

    pub fn white_level(&self) -> u16 {
        self.meta.white_level
    }

    /// Scales samples to `[0, 1]` and presents the mosaic in RGGB phase.
    ///
    /// Other layouts are shifted by their red offset; the row or column that
    /// falls off the edge is replaced by mirroring, which keeps both the
    /// dimensions and the colour phase of the border photosites.
    pub fn normalize(&self) -> Tensor {
        let (dy, dx) = self.meta.cfa_pattern.red_offset();
        let black = f64::from(self.meta.black_level);
        let range = f64::from(self.meta.white_level) - black;
        let (h, w) = (self.height, self.width);
        let shape = Shape::new(1, h, w, 1).expect("frame dims are non-zero");
        Tensor::from_fn(shape, |_, y, x, _| {
            let s = self.samples[reflect(y + dy, h) * w + reflect(x + dx, w)];
            ((f64::from(s) - black) / range).clamp(0.0, 1.0) as f32
        })
    }

    /// Binary 16-bit graymap, samples big-endian.
    pub fn write_pgm(&self, mut sink: impl Write) -> Result<()> {
        write!(sink, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.samples.iter().flat_map(|s| s.to_be_bytes()).collect();
        sink.write_all(&bytes)?;
        Ok(())
    }
}

/// Mirror index for a one-step overrun past either end of `0..n`.
fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else if n >= 2 {
        2 * n - 2 - i
    } else {
        0
    }
}

/// Header fields of a netpbm binary image.
struct PnmHeader {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    ensure!(
        bytes.len() >= 2 && &bytes[..2] == magic,
        Format,
        "bad magic: expected `{}`",
        String::from_utf8_lossy(magic)
    );
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        ensure!(pos > start, Format, "malformed header at byte {start}");
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("header value too large at byte {start}")))?;
    }
    ensure!(
        bytes.get(pos).is_some_and(u8::is_ascii_whitespace),
        Format,
        "header not terminated by whitespace"
    );
    let [width, height, maxval] = fields;
    ensure!(width > 0 && height > 0, Format, "empty image {width}x{height}");
    ensure!((1..=65535).contains(&maxval), Format, "maxval {maxval} outside 1..=65535");
    Ok(PnmHeader {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Reads samples after the header. A short payload is a truncation, a
/// long one a format error.
fn pnm_samples(bytes: &[u8], header: &PnmHeader, per_pixel: usize) -> Result<Vec<u16>> {
    let wide = header.maxval > 255;
    let count = header.width * header.height * per_pixel;
    let expected = count * if wide { 2 } else { 1 };
    let payload = &bytes[header.data_start.min(bytes.len())..];
    ensure!(
        payload.len() >= expected,
        Truncation,
        "header declares {}x{} but payload holds {} of {expected} bytes",
        header.width,
        header.height,
        payload.len()
    );
    ensure!(
        payload.len() == expected,
        Format,
        "header declares {}x{} but payload holds {} bytes, expected {expected}",
        header.width,
        header.height,
        payload.len()
    );
    let samples: Vec<u16> = if wide {
        payload.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        payload.iter().map(|&b| u16::from(b)).collect()
    };
    if let Some(bad) = samples.iter().find(|&&s| usize::from(s) > header.maxval) {
        return Err(Error::Format(format!("sample {bad} exceeds maxval {}", header.maxval)));
    }
    Ok(samples)
}

/// Parses a P5 mosaic and its sidecar.
pub fn load_raw(mut mosaic: impl Read, mut metadata: impl Read) -> Result<RawFrame> {
    let mut text = String::new();
    metadata.read_to_string(&mut text)?;
    let meta = RawMetadata::parse(&text)?;
    let mut bytes = Vec::new();
    mosaic.read_to_end(&mut bytes)?;
    let header = parse_pnm_header(&bytes, b"P5")?;
    let samples = pnm_samples(&bytes, &header, 1)?;
    RawFrame::new(header.width, header.height, samples, meta)
}

pub fn load_raw_files(mosaic: impl AsRef<Path>, metadata: impl AsRef<Path>) -> Result<RawFrame> {
    load_raw(fs::File::open(mosaic)?, fs::File::open(metadata)?)
}

/// Maps a tanh output in `(-1, 1)` to an 8-bit code, rounding half away
/// from zero.
pub fn to_code(v: f32) -> u8 {
    let unit = ((f64::from(v) + 1.0) / 2.0).clamp(0.0, 1.0);
    (unit * 255.0).round() as u8
}

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RenderedImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(width > 0 && height > 0, InvalidShape, "empty image {width}x{height}");
        ensure!(
            data.len() == width * height * 3,
            InvalidShape,
            "{} bytes for a {width}x{height} RGB image",
            data.len()
        );
        Ok(RenderedImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let at = (y * self.width + x) * 3;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    /// Samples scaled to `[0, 1]`, shape `(1, height, width, 3)`.
    pub fn to_unit_tensor(&self) -> Tensor {
        let shape = Shape::new(1, self.height, self.width, 3).expect("non-empty image");
        Tensor::from_vec(shape, self.data.iter().map(|&b| f32::from(b) / 255.0).collect()).expect("length matches")
    }

    pub fn write(&self, sink: impl Write, format: ImageFormat) -> Result<()> {
        match format {
            ImageFormat::Ppm => self.write_ppm(sink),
            ImageFormat::Png => self.write_png(sink),
        }
    }

    pub fn write_ppm(&self, mut sink: impl Write) -> Result<()> {
        write!(sink, "P6\n{} {}\n255\n", self.width, self.height)?;
        sink.write_all(&self.data)?;
        Ok(())
    }

    pub fn write_png(&self, sink: impl Write) -> Result<()> {
        let to_io = |e: png::EncodingError| match e {
            png::EncodingError::IoError(e) => Error::Io(e),
            other => Error::Format(other.to_string()),
        };
        let mut encoder = png::Encoder::new(sink, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(to_io)?;
        writer.write_image_data(&self.data).map_err(to_io)?;
        writer.finish().map_err(to_io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path)?;
        let mut sink = std::io::BufWriter::new(file);
        self.write(&mut sink, ImageFormat::from_path(path))?;
        sink.flush()?;
        Ok(())
    }

    /// Reads a P6 or 8-bit RGB/RGBA PNG, chosen by the leading bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(b"\x89PNG") {
            return Self::from_png(bytes);
        }
        let header = parse_pnm_header(bytes, b"P6")?;
        ensure!(header.maxval == 255, Format, "only 8-bit pixmaps are supported, maxval {}", header.maxval);
        let samples = pnm_samples(bytes, &header, 3)?;
        RenderedImage::new(header.width, header.height, samples.into_iter().map(|s| s as u8).collect())
    }

    fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
        ensure!(
            info.bit_depth == png::BitDepth::Eight,
            Format,
            "unsupported PNG bit depth {:?}",
            info.bit_depth
        );
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
            png::ColorType::Rgba => buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            other => return Err(Error::Format(format!("unsupported PNG colour type {other:?}"))),
        };
        RenderedImage::new(w, h, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// PNG for a `.png` extension, otherwise the binary pixmap.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

/// Converts a `(1, H, W, 3)` network output to 8-bit RGB.
pub fn render_output(net_out: &Tensor) -> Result<RenderedImage> {
    let s = net_out.shape();
    ensure!(s.channels == 3, Shape, "expected 3 output channels, got {}", s.channels);
    ensure!(s.batch == 1, Shape, "expected a single image, got batch {}", s.batch);
    if let Some(i) = net_out.data().iter().position(|v| v.is_nan()) {
        return Err(Error::Validation(format!("NaN in network output at element {i}")));
    }
    RenderedImage::new(s.width, s.height, net_out.data().iter().map(|&v| to_code(v)).collect())
}

/// A smooth colour scene with sensor noise, mosaiced with `pattern` and
/// quantised between the given levels.
pub fn synthetic_frame(width: usize, height: usize, meta: RawMetadata, seed: u64) -> Result<RawFrame> {
    ensure!(width > 0 && height > 0, InvalidShape, "empty frame {width}x{height}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 3] = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let black = f64::from(meta.black_level);
    let range = f64::from(meta.white_level) - black;
    let mut samples = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
            let c = meta.cfa_pattern.color_at(y, x);
            let scene = 0.5 + 0.35 * ((6.0 * u + 4.0 * v) + phase[c]).sin() * (3.0 * v - 2.0 * u + phase[(c + 1) % 3]).cos();
            let noisy = (scene + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
            samples.push((black + noisy * range).round() as u16);
        }
    }
    RawFrame::new(width, height, samples, meta)
}
