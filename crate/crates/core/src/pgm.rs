//! Minimal PGM (P2/P5) reader and writer.
//!
//! Samples map to `[0, 1]` by dividing by `maxval`. Writing quantizes with
//! rounding, so a read followed by a write at the same `maxval` reproduces
//! the original payload byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmFormat {
    /// `P2`, ASCII samples.
    Plain,
    /// `P5`, binary samples (big-endian when `maxval > 255`).
    Raw,
}

/// Decoded image with its original integer samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl PgmImage {
    pub fn to_field(&self) -> Result<ScalarField> {
        let grid = Grid::new(self.width, self.height, 1.0)?;
        let scale = f64::from(self.maxval);
        ScalarField::new(grid, self.samples.iter().map(|&s| f64::from(s) / scale).collect())
    }

    /// Quantizes `field` (clamped to `[0, 1]`) to `maxval` levels.
    pub fn from_field(field: &ScalarField, maxval: u16) -> Result<Self> {
        if maxval == 0 {
            return Err(Error::InvalidParameter("PGM maxval must be positive".into()));
        }
        let scale = f64::from(maxval);
        let samples = field
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * scale).round() as u16)
            .collect();
        Ok(Self {
            width: field.grid.width,
            height: field.grid.height,
            maxval,
            samples,
        })
    }

    pub fn encode(&self, format: PgmFormat) -> Vec<u8> {
        let magic = match format {
            PgmFormat::Plain => "P2",
            PgmFormat::Raw => "P5",
        };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        match format {
            PgmFormat::Raw if self.maxval > 255 => {
                for s in &self.samples {
                    out.extend_from_slice(&s.to_be_bytes());
                }
            }
            PgmFormat::Raw => out.extend(self.samples.iter().map(|&s| s as u8)),
            PgmFormat::Plain => {
                for row in self.samples.chunks(self.width) {
                    let line: Vec<String> = row.iter().map(u16::to_string).collect();
                    out.extend_from_slice(line.join(" ").as_bytes());
                    out.push(b'\n');
                }
            }
        }
        out
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.data.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.data.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.data.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.data.len() {
                Error::Pgm(format!("truncated while reading {what}"))
            } else {
                Error::Pgm(format!("expected {what}"))
            });
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pgm(format!("{what} out of range")))
    }
}

pub fn decode(data: &[u8]) -> Result<PgmImage> {
    let format = match data.get(..2) {
        Some(b"P2") => PgmFormat::Plain,
        Some(b"P5") => PgmFormat::Raw,
        _ => return Err(Error::Pgm("missing P2/P5 magic".into())),
    };
    let mut cur = Cursor { data, pos: 2 };
    if !cur.data.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::Pgm("missing whitespace after magic".into()));
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Pgm(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Pgm(format!("maxval {maxval} outside 1..=65535")));
    }
    let maxval = maxval as u16;
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::Pgm("image dimensions overflow".into()))?;

    let samples = match format {
        PgmFormat::Plain => {
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let v = cur.number("sample")?;
                if v > u32::from(maxval) {
                    return Err(Error::Pgm(format!("sample {v} exceeds maxval {maxval}")));
                }
                samples.push(v as u16);
            }
            samples
        }
        PgmFormat::Raw => {
            if !cur.data.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
                return Err(Error::Pgm("truncated header".into()));
            }
            let start = cur.pos + 1;
            let bytes = if maxval > 255 { 2 } else { 1 };
            let payload = &data[start.min(data.len())..];
            if payload.len() < count * bytes {
                return Err(Error::Pgm(format!(
                    "truncated payload: {} of {} bytes",
                    payload.len(),
                    count * bytes
                )));
            }
            let samples: Vec<u16> = if bytes == 2 {
                payload[..2 * count]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]))
                    .collect()
            } else {
                payload[..count].iter().map(|&b| u16::from(b)).collect()
            };
            if let Some(v) = samples.iter().find(|&&v| v > maxval) {
                return Err(Error::Pgm(format!("sample {v} exceeds maxval {maxval}")));
            }
            samples
        }
    };
    Ok(PgmImage {
        width,
        height,
        maxval,
        samples,
    })
}

pub fn read_image(path: &Path) -> Result<PgmImage> {
    decode(&fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<ScalarField> {
    read_image(path)?.to_field()
}

/// Writes through a sibling temporary file so a failed write leaves no
/// partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_image(image: &PgmImage, path: &Path, format: PgmFormat) -> Result<()> {
    write_atomic(path, &image.encode(format))
}

/// Writes `field` as 8-bit binary PGM.
pub fn write_pgm(field: &ScalarField, path: &Path) -> Result<()> {
    write_image(&PgmImage::from_field(field, 255)?, path, PgmFormat::Raw)
}
