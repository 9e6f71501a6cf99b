//! Particle sets and their on-disk format.
//!
//! A particle file is a single ASCII header line followed by `n * d`
//! little-endian `f64` values in row-major order:
//!
//! ```text
//! ncksvgd-particles v1 n=<n> d=<d> level=<level|none> sigma=<sigma|none>\n
//! <n*d*8 bytes>
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

const MAGIC: &str = "ncksvgd-particles v1";

/// An `n x d` collection of finite particles, the empirical distribution `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    data: Array2<f64>,
}

/// Metadata stored in the particle file header.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SnapshotInfo {
    pub level: Option<usize>,
    pub sigma: Option<f64>,
}

impl ParticleSet {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidParameter("particle set needs n >= 1".into()));
        }
        if data.ncols() == 0 {
            return Err(Error::InvalidParameter("particle set needs d >= 1".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("particle set entries".into()));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidParameter("particle set needs n >= 1".into()));
        }
        let d = rows[0].len();
        let mut flat = Vec::with_capacity(n * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(n, d, flat)
    }

    pub fn from_flat(n: usize, d: usize, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                got: flat.len(),
            });
        }
        let data = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Self::new(data)
    }

    /// Builds a set without re-validating finiteness; callers guarantee it.
    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        debug_assert!(data.nrows() >= 1 && data.is_standard_layout());
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data
            .as_slice()
            .expect("standard layout")
            .chunks_exact(self.dim())
    }

    pub fn as_array(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_flat(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        self.data
            .mean_axis(Axis(0))
            .expect("n >= 1")
            .to_vec()
    }

    /// Sample covariance (divides by `n - 1`, or by 1 when `n == 1`).
    pub fn covariance(&self) -> Array2<f64> {
        let n = self.len();
        let mean = self.data.mean_axis(Axis(0)).expect("n >= 1");
        let centered = &self.data - &mean.view().insert_axis(Axis(0));
        let denom = (n.max(2) - 1) as f64;
        centered.t().dot(&centered) / denom
    }

    /// Largest Euclidean norm over all particles.
    pub fn max_norm(&self) -> f64 {
        self.rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Returns the set reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: perm.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.as_flat().len());
        for &p in perm {
            if p >= self.len() {
                return Err(Error::InvalidParameter(format!("permutation index {p} out of range")));
            }
            flat.extend_from_slice(self.row(p));
        }
        Self::from_flat(self.len(), self.dim(), flat)
    }

    /// Rows `start..end` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidParameter(format!(
                "invalid row range {start}..{end} for {} particles",
                self.len()
            )));
        }
        let d = self.dim();
        Self::from_flat(end - start, d, self.as_flat()[start * d..end * d].to_vec())
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.data.column(j)
    }

    pub fn write_to<W: Write>(&self, mut w: W, info: SnapshotInfo) -> Result<()> {
        let level = info
            .level
            .map_or_else(|| "none".to_string(), |l| l.to_string());
        let sigma = info
            .sigma
            .map_or_else(|| "none".to_string(), |s| format!("{s:e}"));
        writeln!(
            w,
            "{MAGIC} n={} d={} level={level} sigma={sigma}",
            self.len(),
            self.dim()
        )?;
        let mut bytes = Vec::with_capacity(self.as_flat().len() * 8);
        for v in self.as_flat() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<(Self, SnapshotInfo)> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if r.read(&mut byte)? == 0 {
                return Err(Error::Format("unterminated particle header".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 512 {
                return Err(Error::Format("particle header too long".into()));
            }
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::Format("particle header is not UTF-8".into()))?;
        let rest = header
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Format(format!("bad magic in header {header:?}")))?;

        let mut n = None;
        let mut d = None;
        let mut info = SnapshotInfo::default();
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            let bad = || Error::Format(format!("bad value in header field {field:?}"));
            match key {
                "n" => n = Some(value.parse::<usize>().map_err(|_| bad())?),
                "d" => d = Some(value.parse::<usize>().map_err(|_| bad())?),
                "level" if value != "none" => {
                    info.level = Some(value.parse().map_err(|_| bad())?)
                }
                "sigma" if value != "none" => {
                    info.sigma = Some(value.parse().map_err(|_| bad())?)
                }
                "level" | "sigma" => {}
                _ => return Err(Error::Format(format!("unknown header field {key:?}"))),
            }
        }
        let (n, d) = match (n, d) {
            (Some(n), Some(d)) => (n, d),
            _ => return Err(Error::Format("header lacks n or d".into())),
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * d * 8 {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                n * d * 8,
                bytes.len()
            )));
        }
        let flat = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok((Self::from_flat(n, d, flat)?, info))
    }

    pub fn save(&self, path: &Path, info: SnapshotInfo) -> Result<()> {
        let file = File::create(path)?;
        self.write_to(BufWriter::new(file), info)
    }

    pub fn load(path: &Path) -> Result<(Self, SnapshotInfo)> {
        Self::read_from(File::open(path)?)
    }
}
