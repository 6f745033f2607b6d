//! Dense tensors, the `TNSR` binary container and `timestamp_ms,value` CSV series.
//!
//! TNSR layout (all integers little-endian):
//!
//! ```text
//! "TNSR" | u8 version (=1) | u8 dtype (=1, f64 LE) | u8 ndim | ndim x u32 dims | payload
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u8 = 1;
pub const DTYPE_F64_LE: u8 = 1;
const HEADER_FIXED: usize = 7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"TNSR\"")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported TNSR version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{path}: unsupported dtype code {code} (only 1 = f64 little-endian)")]
    UnsupportedDtype { path: PathBuf, code: u8 },
    #[error("{path}: truncated file, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("invalid tensor shape: {0}")]
    Shape(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{path}:{line}: {msg}")]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: timestamps not strictly increasing at row {row}")]
    NonMonotone { path: PathBuf, row: usize },
    #[error("{path}: no samples")]
    Empty { path: PathBuf },
    #[error("invalid series: {0}")]
    Series(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense row-major n-dimensional array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking shape and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, DataError> {
        if dims.is_empty() {
            return Err(DataError::Shape("tensor needs at least one dimension".into()));
        }
        if dims.len() > u8::MAX as usize {
            return Err(DataError::Shape(format!("too many dimensions: {}", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
            return Err(DataError::Shape(format!("dimension {d} out of range")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(DataError::Shape(format!(
                "dims {:?} need {} values, got {}",
                dims,
                numel,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n]).expect("zeros: invalid dims")
    }

    /// Internal constructor for values already known to be finite and well shaped.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Byte size of the TNSR encoding of this tensor.
    pub fn encoded_len(&self) -> usize {
        HEADER_FIXED + 4 * self.dims.len() + 8 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(TNSR_MAGIC);
        out.push(TNSR_VERSION);
        out.push(DTYPE_F64_LE);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a TNSR buffer; `path` is only used to label errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, DataError> {
        let truncated = |expected: usize| DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < 4 || &bytes[..4] != TNSR_MAGIC {
            return Err(DataError::BadMagic {
                path: path.to_path_buf(),
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < HEADER_FIXED {
            return Err(truncated(HEADER_FIXED));
        }
        if bytes[4] != TNSR_VERSION {
            return Err(DataError::UnsupportedVersion {
                path: path.to_path_buf(),
                version: bytes[4],
            });
        }
        if bytes[5] != DTYPE_F64_LE {
            return Err(DataError::UnsupportedDtype {
                path: path.to_path_buf(),
                code: bytes[5],
            });
        }
        let ndim = bytes[6] as usize;
        let header = HEADER_FIXED + 4 * ndim;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let dims: Vec<usize> = bytes[HEADER_FIXED..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DataError::Shape(format!("dims {dims:?} overflow")))?;
        let expected = numel
            .checked_mul(8)
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| DataError::Shape(format!("dims {dims:?} overflow")))?;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes {
                path: path.to_path_buf(),
                extra: bytes.len() - expected,
            });
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(dims, data)
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(io_err(path))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Tensor::from_bytes(&bytes, path)
}

/// Samples on an integer millisecond clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    timestamps_ms: Vec<i64>,
    values: Vec<f64>,
    nominal_rate_hz: f64,
}

impl TimeSeries {
    /// Builds a series and estimates its nominal rate from the first and last stamps.
    pub fn new(timestamps_ms: Vec<i64>, values: Vec<f64>) -> Result<Self, DataError> {
        if timestamps_ms.len() != values.len() {
            return Err(DataError::Series(format!(
                "{} timestamps but {} values",
                timestamps_ms.len(),
                values.len()
            )));
        }
        if timestamps_ms.len() < 2 {
            return Err(DataError::Series(
                "at least two samples are needed to estimate a rate".into(),
            ));
        }
        if let Some(i) = timestamps_ms.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DataError::Series(format!(
                "timestamps not strictly increasing at sample {}",
                i + 2
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { index });
        }
        let span_s = (timestamps_ms[timestamps_ms.len() - 1] - timestamps_ms[0]) as f64 / 1000.0;
        let nominal_rate_hz = (timestamps_ms.len() - 1) as f64 / span_s;
        Ok(Self {
            timestamps_ms,
            values,
            nominal_rate_hz,
        })
    }

    /// Uniformly sampled series starting at `start_ms`, stamps rounded to the nearest ms.
    pub fn uniform(start_ms: i64, rate_hz: f64, values: Vec<f64>) -> Result<Self, DataError> {
        let ts = (0..values.len())
            .map(|i| start_ms + (i as f64 * 1000.0 / rate_hz).round() as i64)
            .collect();
        Self::new(ts, values)
    }

    pub fn timestamps_ms(&self) -> &[i64] {
        &self.timestamps_ms
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nominal_rate_hz(&self) -> f64 {
        self.nominal_rate_hz
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first_ms(&self) -> i64 {
        self.timestamps_ms[0]
    }

    pub fn last_ms(&self) -> i64 {
        self.timestamps_ms[self.timestamps_ms.len() - 1]
    }
}

pub fn read_series_csv(path: impl AsRef<Path>) -> Result<TimeSeries, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let csv_err = |line: usize, msg: String| DataError::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Err(DataError::Empty { path: path.to_path_buf() }),
        Some((_, header)) if header.trim() == "timestamp_ms,value" => {}
        Some((_, header)) => {
            return Err(csv_err(1, format!("expected header `timestamp_ms,value`, got `{header}`")))
        }
    }
    let mut ts = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| csv_err(idx + 1, format!("expected two fields, got `{line}`")))?;
        let t: i64 = t
            .trim()
            .parse()
            .map_err(|e| csv_err(idx + 1, format!("bad timestamp `{t}`: {e}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|e| csv_err(idx + 1, format!("bad value `{v}`: {e}")))?;
        if !v.is_finite() {
            return Err(csv_err(idx + 1, format!("non-finite value `{v}`")));
        }
        if let Some(&prev) = ts.last() {
            if t <= prev {
                return Err(DataError::NonMonotone {
                    path: path.to_path_buf(),
                    row: ts.len() + 1,
                });
            }
        }
        ts.push(t);
        values.push(v);
    }
    if ts.is_empty() {
        return Err(DataError::Empty { path: path.to_path_buf() });
    }
    TimeSeries::new(ts, values).map_err(|e| csv_err(0, e.to_string()))
}

/// Formats a series as CSV; float formatting is Rust's shortest round-trip form.
pub fn series_to_csv(timestamps_ms: &[i64], values: &[f64]) -> String {
    let mut out = String::with_capacity(16 * values.len() + 20);
    out.push_str("timestamp_ms,value\n");
    for (t, v) in timestamps_ms.iter().zip(values) {
        let _ = writeln!(out, "{t},{v}");
    }
    out
}

pub fn write_series_csv(path: impl AsRef<Path>, s: &TimeSeries) -> Result<(), DataError> {
    write_csv_raw(path, s.timestamps_ms(), s.values())
}

pub(crate) fn write_csv_raw(
    path: impl AsRef<Path>,
    timestamps_ms: &[i64],
    values: &[f64],
) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(series_to_csv(timestamps_ms, values).as_bytes())
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn scalar_file_is_nineteen_bytes() {
        let dir = tmp();
        let p = dir.path().join("a.tnsr");
        write_tensor(&p, &Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 19);
    }

    #[test]
    fn header_declares_dims() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &3u32.to_le_bytes());
        assert_eq!(b.len(), 7 + 8 + 48);
    }

    #[test]
    fn round_trip_small() {
        let dir = tmp();
        let p = dir.path().join("b.tnsr");
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn bad_magic() {
        let mut b = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        b[..4].copy_from_slice(b"XXXX");
        let err = Tensor::from_bytes(&b, Path::new("x")).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { .. }), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().to_bytes();
        b.truncate(b.len() - 8);
        let err = Tensor::from_bytes(&b, Path::new("x")).unwrap_err();
        assert!(matches!(err, DataError::Truncated { expected: 47, actual: 39, .. }), "{err}");
    }

    #[test]
    fn wrong_dtype() {
        let mut b = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        b[5] = 2;
        let err = Tensor::from_bytes(&b, Path::new("x")).unwrap_err();
        assert!(matches!(err, DataError::UnsupportedDtype { code: 2, .. }));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        let n = b.len();
        b[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            Tensor::from_bytes(&b, Path::new("x")),
            Err(DataError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn csv_rate_twenty_hz() {
        let dir = tmp();
        let p = dir.path().join("s.csv");
        fs::write(&p, "timestamp_ms,value\n0,1.0\n50,2.0\n100,3.0\n").unwrap();
        let s = read_series_csv(&p).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.nominal_rate_hz(), 20.0);
    }

    #[test]
    fn csv_rate_fifty_hz() {
        let dir = tmp();
        let p = dir.path().join("s.csv");
        let ts: Vec<i64> = (0..51).map(|i| i * 20).collect();
        write_csv_raw(&p, &ts, &vec![0.5; 51]).unwrap();
        let s = read_series_csv(&p).unwrap();
        assert_eq!(s.len(), 51);
        assert!((s.nominal_rate_hz() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn csv_non_monotone_names_row() {
        let dir = tmp();
        let p = dir.path().join("s.csv");
        fs::write(&p, "timestamp_ms,value\n0,1.0\n0,2.0\n").unwrap();
        match read_series_csv(&p).unwrap_err() {
            DataError::NonMonotone { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_empty_file() {
        let dir = tmp();
        let p = dir.path().join("s.csv");
        fs::write(&p, "").unwrap();
        assert!(matches!(read_series_csv(&p), Err(DataError::Empty { .. })));
        fs::write(&p, "timestamp_ms,value\n").unwrap();
        assert!(matches!(read_series_csv(&p), Err(DataError::Empty { .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tmp();
        let p = dir.path().join("s.csv");
        let s = TimeSeries::new(vec![3, 40, 77], vec![0.1, -1.0 / 3.0, 1e-300]).unwrap();
        write_series_csv(&p, &s).unwrap();
        assert_eq!(read_series_csv(&p).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tnsr_round_trip(dims in prop::collection::vec(1usize..12, 1..=4), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e6..1e6)).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let bytes = t.to_bytes();
            prop_assert_eq!(bytes.len(), 7 + 4 * dims.len() + 8 * n);
            let back = Tensor::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, t);
        }
    }
}
