//! Row-major 2D grids with portable-graymap and comma-separated-table I/O.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::Float;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad raster file: {0}")]
    Format(String),
}

fn bad(msg: impl Into<String>) -> RasterError {
    RasterError::Format(msg.into())
}

/// Dense row-major grid. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(rows: usize, cols: usize, fill: T) -> Self {
        Self { rows, cols, data: vec![fill; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "raster data length mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T> std::ops::Index<(usize, usize)> for Raster<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Raster<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Float> Raster<T> {
    /// Snaps every value onto the 16-bit grid `round(v * 65535) / 65535`.
    /// Grid values survive a 16-bit graymap round trip bit-exactly in both
    /// `f32` and `f64`.
    pub fn quantize_u16(&mut self) {
        for v in &mut self.data {
            let q = (v.f64() * 65535.0).round().clamp(0.0, 65535.0);
            *v = T::c(q / 65535.0);
        }
    }

    /// Writes an 8-bit binary graymap; values are clamped to [0, 1].
    pub fn write_pgm8(&self, path: &Path) -> Result<(), RasterError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.cols, self.rows)?;
        let mut buf = Vec::with_capacity(self.data.len());
        for v in &self.data {
            buf.push((v.f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Writes a 16-bit binary graymap (big-endian samples); values are
    /// clamped to [0, 1].
    pub fn write_pgm16(&self, path: &Path) -> Result<(), RasterError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P5\n{} {}\n65535\n", self.cols, self.rows)?;
        let mut buf = Vec::with_capacity(self.data.len() * 2);
        for v in &self.data {
            let s = (v.f64().clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&s.to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a binary (P5) or ASCII (P2) graymap and rescales samples to
    /// [0, 1] by dividing by the declared maximum value.
    pub fn read_pgm(path: &Path) -> Result<Self, RasterError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;

        let magic = pgm_token(&bytes, &mut pos)?;
        if magic != "P5" && magic != "P2" {
            return Err(bad(format!("unsupported graymap magic {magic:?}")));
        }
        let cols: usize = pgm_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| bad("bad width"))?;
        let rows: usize = pgm_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| bad("bad height"))?;
        let maxval: u32 = pgm_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| bad("bad maxval"))?;
        if maxval == 0 || maxval > 65535 {
            return Err(bad(format!("maxval {maxval} out of range")));
        }
        if rows == 0 || cols == 0 {
            return Err(bad("empty image"));
        }
        let n = rows * cols;
        let scale = 1.0 / maxval as f64;
        let mut data = Vec::with_capacity(n);

        if magic == "P5" {
            // Exactly one whitespace byte separates the header from the
            // raster.
            pos += 1;
            let wide = maxval > 255;
            let need = n * if wide { 2 } else { 1 };
            if bytes.len() < pos + need {
                return Err(bad("truncated raster data"));
            }
            if wide {
                for i in 0..n {
                    let s = u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]);
                    data.push(T::c(s as f64 * scale));
                }
            } else {
                for i in 0..n {
                    data.push(T::c(bytes[pos + i] as f64 * scale));
                }
            }
        } else {
            for _ in 0..n {
                let s: u32 = pgm_token(&bytes, &mut pos)?
                    .parse()
                    .map_err(|_| bad("bad sample"))?;
                if s > maxval {
                    return Err(bad(format!("sample {s} exceeds maxval {maxval}")));
                }
                data.push(T::c(s as f64 * scale));
            }
        }
        Ok(Self { rows, cols, data })
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, RasterError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad("unexpected end of header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| bad("non-ascii header"))
}

impl Raster<f64> {
    /// Writes one comma-separated line per row. Values use shortest
    /// round-trip formatting, so `read_csv` recovers them exactly.
    pub fn write_csv(&self, path: &Path) -> Result<(), RasterError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, RasterError> {
        let rdr = BufReader::new(std::fs::File::open(path)?);
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0usize;
        for line in rdr.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut n = 0usize;
            for field in line.split(',') {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad number {field:?}")))?;
                data.push(v);
                n += 1;
            }
            match cols {
                None => cols = Some(n),
                Some(c) if c != n => {
                    return Err(bad(format!("ragged table: row {rows} has {n} fields, expected {c}")));
                }
                _ => {}
            }
            rows += 1;
        }
        let cols = cols.ok_or_else(|| bad("empty table"))?;
        Ok(Self { rows, cols, data })
    }
}
