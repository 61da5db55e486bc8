//! The fundamental raster type and its file formats.
//!
//! Every image-valued quantity in this crate — measurements, estimates,
//! edge maps, roughness fields — is an [`ImageGrid`]: a row-major,
//! top-left-origin grid of finite `f64` samples, indexed as `(row, col)`.
//!
//! Two on-disk formats are supported: PGM (P2/P5 read, P5 write) for
//! viewing, and a lossless little-endian `f64` raw format for interchange.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the raw f64 format.
pub const RAW_MAGIC: &[u8; 4] = b"MFAG";

/// Header length of the raw f64 format: magic, u32 width, u32 height,
/// four reserved zero bytes.
pub const RAW_HEADER_LEN: usize = 16;

/// Gray levels used when quantizing to PGM.
pub const PGM_MAXVAL: u16 = u16::MAX;

/// A 2D real-valued raster.
///
/// Samples are row-major with the origin at the top-left; `(row, col)`
/// indexing is used everywhere in this crate. A grid is immutable after
/// construction: all operations return new grids, so sharing one
/// read-only across threads is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    samples: Vec<f64>,
}

impl ImageGrid {
    /// Builds a grid, validating the shape and that every sample is finite.
    pub fn new(width: usize, height: usize, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if samples.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "expected {} samples for a {width}x{height} grid, got {}",
                width * height,
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite sample at index {i} (row {}, col {})",
                i / width,
                i % width
            )));
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    /// Constructor for internal arithmetic whose inputs are already
    /// validated grids. Skips the finiteness scan: overflow of extreme
    /// magnitudes is handled by the callers (the restoration loop treats
    /// it as divergence) rather than by panicking here.
    pub(crate) fn from_raw_unchecked(width: usize, height: usize, samples: Vec<f64>) -> Self {
        debug_assert_eq!(samples.len(), width * height);
        Self {
            width,
            height,
            samples,
        }
    }

    /// All samples equal to `value`.
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "dimensions must be positive");
        assert!(value.is_finite(), "constant value must be finite");
        Self {
            width,
            height,
            samples: vec![value; width * height],
        }
    }

    /// Builds a grid from a per-pixel function of `(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "dimensions must be positive");
        let mut samples = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let v = f(row, col);
                assert!(v.is_finite(), "non-finite sample at ({row}, {col})");
                samples.push(v);
            }
        }
        Self {
            width,
            height,
            samples,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.samples[row * self.width + col]
    }

    pub fn same_dims(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Elementwise map. The closure must return finite values.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid::from_fn(self.width, self.height, |r, c| f(self.at(r, c)))
    }

    /// Multiplies every sample by `k`.
    ///
    /// `k` must be finite and the products must stay in range; both are
    /// asserted because a grid never holds non-finite samples.
    pub fn scale_intensity(&self, k: f64) -> ImageGrid {
        assert!(k.is_finite(), "scale factor must be finite");
        self.map(|s| s * k)
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.samples
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }
}

/// On-disk formats understood by [`load`] and [`save`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Portable graymap: P2 and P5 read, P5 written with a min-max
    /// stretch to 16-bit gray and a `.stretch` sidecar.
    Pgm,
    /// Lossless raw format: 16-byte header, then row-major
    /// little-endian f64 samples.
    F64Raw,
}

/// Reads an image in the given format.
pub fn load(path: impl AsRef<Path>, format: ImageFormat) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Pgm => parse_pgm(path, &bytes),
        ImageFormat::F64Raw => parse_raw(path, &bytes),
    }
}

/// Reads an image, detecting the format from its magic bytes.
pub fn load_auto(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        parse_raw(path, &bytes)
    } else if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        parse_pgm(path, &bytes)
    } else {
        Err(Error::parse(path, 0, "unrecognized magic bytes"))
    }
}

/// Writes an image in the given format.
///
/// The raw format round-trips bit-exactly. PGM quantizes by a linear
/// min-max stretch to `[0, 65535]`; the stretch parameters go to a
/// `<path>.stretch` sidecar so the scaling stays recoverable.
pub fn save(img: &ImageGrid, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ImageFormat::Pgm => {
            let (bytes, lo, hi) = encode_pgm(img);
            let sidecar = format!("min {lo}\nmax {hi}\nmaxval {PGM_MAXVAL}\n");
            let sidecar_path = sidecar_path(path);
            fs::write(&sidecar_path, sidecar).map_err(|e| Error::io(&sidecar_path, e))?;
            bytes
        }
        ImageFormat::F64Raw => encode_raw(img),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Path of the stretch sidecar written next to a PGM export.
pub fn sidecar_path(pgm_path: &Path) -> std::path::PathBuf {
    let mut os = pgm_path.as_os_str().to_owned();
    os.push(".stretch");
    os.into()
}

fn encode_raw(img: &ImageGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + img.samples.len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for s in &img.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn parse_raw(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::parse(path, bytes.len(), "truncated raw header"));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(Error::parse(path, 0, "bad magic, expected \"MFAG\""));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, 4, "zero dimension in header"));
    }
    let expected = RAW_HEADER_LEN + width * height * 8;
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            bytes.len().min(expected),
            format!(
                "payload length mismatch: {width}x{height} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut samples = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let off = RAW_HEADER_LEN + i * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(path, off, format!("non-finite sample {v}")));
        }
        samples.push(v);
    }
    Ok(ImageGrid {
        width,
        height,
        samples,
    })
}

fn encode_pgm(img: &ImageGrid) -> (Vec<u8>, f64, f64) {
    let lo = img.min();
    let hi = img.max();
    let span = hi - lo;
    let mut out = Vec::with_capacity(32 + img.samples.len() * 2);
    write!(out, "P5\n{} {}\n{}\n", img.width, img.height, PGM_MAXVAL).unwrap();
    for &s in &img.samples {
        let q = if span > 0.0 {
            (((s - lo) / span) * f64::from(PGM_MAXVAL)).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    (out, lo, hi)
}

/// Token scanner over PGM bytes that tracks offsets for error reporting.
struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    /// Next whitespace-delimited token and the offset where it starts.
    fn token(&mut self) -> Option<(usize, &'a [u8])> {
        self.skip_separators();
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some((start, &self.bytes[start..self.pos]))
    }

    fn number(&mut self, path: &Path, what: &str) -> Result<(usize, u64)> {
        let (off, tok) = self
            .token()
            .ok_or_else(|| Error::parse(path, self.pos, format!("missing {what}")))?;
        let s = std::str::from_utf8(tok)
            .map_err(|_| Error::parse(path, off, format!("non-ascii {what}")))?;
        let v = s
            .parse::<u64>()
            .map_err(|_| Error::parse(path, off, format!("invalid {what} {s:?}")))?;
        Ok((off, v))
    }
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    let mut sc = Scanner::new(bytes);
    let (off, magic) = sc
        .token()
        .ok_or_else(|| Error::parse(path, 0, "empty file"))?;
    let binary = match magic {
        b"P2" => false,
        b"P5" => true,
        _ => return Err(Error::parse(path, off, "expected PGM magic P2 or P5")),
    };
    let (woff, width) = sc.number(path, "width")?;
    let (hoff, height) = sc.number(path, "height")?;
    let (moff, maxval) = sc.number(path, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, woff.min(hoff), "zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(path, moff, format!("maxval {maxval} out of range 1..=65535")));
    }
    let (width, height) = (width as usize, height as usize);
    let count = width * height;
    let mut samples = Vec::with_capacity(count);

    if binary {
        // Exactly one whitespace byte separates maxval from the raster.
        let data_start = sc.pos + 1;
        if sc.pos >= bytes.len() || !bytes[sc.pos].is_ascii_whitespace() {
            return Err(Error::parse(path, sc.pos, "missing raster separator"));
        }
        let wide = maxval > 255;
        let stride = if wide { 2 } else { 1 };
        let need = count * stride;
        let avail = bytes.len() - data_start;
        if avail != need {
            return Err(Error::parse(
                path,
                bytes.len().min(data_start + need),
                format!("raster length mismatch: need {need} bytes, have {avail}"),
            ));
        }
        for i in 0..count {
            let off = data_start + i * stride;
            let v = if wide {
                u64::from(u16::from_be_bytes([bytes[off], bytes[off + 1]]))
            } else {
                u64::from(bytes[off])
            };
            if v > maxval {
                return Err(Error::parse(path, off, format!("gray value {v} exceeds maxval {maxval}")));
            }
            samples.push(v as f64);
        }
    } else {
        for _ in 0..count {
            let (off, v) = sc.number(path, "gray value")?;
            if v > maxval {
                return Err(Error::parse(path, off, format!("gray value {v} exceeds maxval {maxval}")));
            }
            samples.push(v as f64);
        }
        if let Some((off, _)) = sc.token() {
            return Err(Error::parse(
                path,
                off,
                format!("trailing data after {count} samples"),
            ));
        }
    }

    ImageGrid::new(width, height, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pgm_p2_constant_round() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, "P2\n# a comment\n3 3\n255\n7 7 7 7 7 7 7 7 7\n").unwrap();
        let img = load(&p, ImageFormat::Pgm).unwrap();
        assert_eq!(img.width(), 3);
        assert_eq!(img.height(), 3);
        assert!(img.samples().iter().all(|&s| s == 7.0));
    }

    #[test]
    fn pgm_sample_count_mismatch_is_parse_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, "P2\n2 2\n255\n1 2 3\n").unwrap();
        match load(&p, ImageFormat::Pgm) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pgm_p5_wide_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.pgm");
        let img = ImageGrid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        save(&img, &p, ImageFormat::Pgm).unwrap();
        let back = load(&p, ImageFormat::Pgm).unwrap();
        // Min-max stretch maps 0..3 onto 0..65535.
        assert_eq!(back.at(0, 0), 0.0);
        assert_eq!(back.at(1, 1), 65535.0);
        let sidecar = fs::read_to_string(sidecar_path(&p)).unwrap();
        assert!(sidecar.contains("min 0"));
        assert!(sidecar.contains("max 3"));
    }

    #[test]
    fn pgm_clamps_large_values_to_max_gray() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("big.pgm");
        let img = ImageGrid::new(2, 1, vec![0.0, 1e9]).unwrap();
        save(&img, &p, ImageFormat::Pgm).unwrap();
        let back = load(&p, ImageFormat::Pgm).unwrap();
        assert_eq!(back.at(0, 1), f64::from(PGM_MAXVAL));

        let q = dir.path().join("big.raw");
        save(&img, &q, ImageFormat::F64Raw).unwrap();
        assert_eq!(load(&q, ImageFormat::F64Raw).unwrap().at(0, 1), 1e9);
    }

    #[test]
    fn constant_zero_pgm_is_all_zero() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        save(&ImageGrid::constant(4, 3, 0.0), &p, ImageFormat::Pgm).unwrap();
        let back = load(&p, ImageFormat::Pgm).unwrap();
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn raw_round_trip_bit_exact_and_idempotent() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.raw");
        let p2 = dir.path().join("b.raw");
        let img = ImageGrid::new(3, 2, vec![0.0, -1.5, 1e9, f64::MIN_POSITIVE, 42.0, -0.0]).unwrap();
        save(&img, &p1, ImageFormat::F64Raw).unwrap();
        let back = load(&p1, ImageFormat::F64Raw).unwrap();
        for (a, b) in img.samples().iter().zip(back.samples()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        save(&back, &p2, ImageFormat::F64Raw).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn raw_rejects_non_finite_with_offset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("nan.raw");
        let img = ImageGrid::new(2, 1, vec![1.0, 2.0]).unwrap();
        save(&img, &p, ImageFormat::F64Raw).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[RAW_HEADER_LEN + 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        match load(&p, ImageFormat::F64Raw) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, RAW_HEADER_LEN + 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn raw_rejects_truncation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.raw");
        let img = ImageGrid::constant(4, 4, 1.0);
        save(&img, &p, ImageFormat::F64Raw).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(&p, ImageFormat::F64Raw), Err(Error::Parse { .. })));
    }

    #[test]
    fn scale_intensity_identity_and_doubling() {
        let img = ImageGrid::constant(5, 4, 5.0);
        assert_eq!(img.scale_intensity(1.0), img);
        let doubled = img.scale_intensity(2.0);
        assert!(doubled.samples().iter().all(|&s| s == 10.0));
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(ImageGrid::new(0, 3, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(2, 1, vec![0.0, f64::NAN]).is_err());
    }
}
