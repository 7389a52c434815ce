//! Multichannel signal states and their serialized forms.
//!
//! A state is an L x T matrix of finite reals: L channels (leads), T time
//! samples. Two interchange formats are supported:
//!
//! * CSV — one row per channel, comma-separated samples;
//! * binary — a single JSON header line `{"L":..,"T":..,"dtype":"f64","count":..}`
//!   followed by `count * L * T` little-endian f64 values in row-major order.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::io::{Read, Write};

/// An L x T matrix of finite reals; the state `x_k` of the diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalState {
    data: Array2<f64>,
}

impl SignalState {
    /// Validates shape (L, T >= 1) and finiteness of every entry.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidConfig(format!(
                "signal must have L >= 1 channels and T >= 1 samples, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "signal contains non-finite entries".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Internal constructor for states produced by arithmetic on valid inputs.
    pub(crate) fn from_array(data: Array2<f64>) -> Self {
        debug_assert!(data.nrows() >= 1 && data.ncols() >= 1);
        Self { data }
    }

    pub fn zeros(channels: usize, samples: usize) -> Self {
        assert!(channels >= 1 && samples >= 1);
        Self {
            data: Array2::zeros((channels, samples)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Row-major flattening, channel 0 first.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    /// Errors if `other` has a different shape.
    pub fn check_same_shape(&self, other: &SignalState) -> Result<()> {
        if self.channels() != other.channels() || self.samples() != other.samples() {
            return Err(Error::ShapeMismatch {
                expected_l: self.channels(),
                expected_t: self.samples(),
                got_l: other.channels(),
                got_t: other.samples(),
            });
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.data.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(',');
                }
                out.push_str(&format!("{v}"));
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Parse(format!("row {}: cannot parse {field:?} as f64", i + 1))
                })?;
                row.push(v);
            }
            if let Some(prev) = rows.first() {
                if row.len() != prev.len() {
                    return Err(Error::Parse(format!(
                        "row {} has {} fields, expected {}",
                        i + 1,
                        row.len(),
                        prev.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("empty signal CSV".into()));
        }
        let l = rows.len();
        let t = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let data = Array2::from_shape_vec((l, t), flat)
            .map_err(|e| Error::Parse(format!("bad signal shape: {e}")))?;
        SignalState::new(data)
    }

    /// Writes `states` (all the same shape) as one binary block.
    pub fn write_bin_many<W: Write>(states: &[SignalState], mut w: W) -> Result<()> {
        let first = states
            .first()
            .ok_or_else(|| Error::InvalidConfig("no states to write".into()))?;
        let (l, t) = (first.channels(), first.samples());
        for s in states {
            first.check_same_shape(s)?;
        }
        let header = serde_json::json!({"L": l, "T": t, "dtype": "f64", "count": states.len()});
        w.write_all(header.to_string().as_bytes())?;
        w.write_all(b"\n")?;
        for s in states {
            for v in s.data.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_bin<W: Write>(&self, w: W) -> Result<()> {
        Self::write_bin_many(std::slice::from_ref(self), w)
    }

    /// Reads a binary block; accepts a missing `count` field (defaults to 1).
    pub fn read_bin_many<R: Read>(mut r: R) -> Result<Vec<SignalState>> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bin_bytes(&buf)
    }

    pub fn from_bin_bytes(buf: &[u8]) -> Result<Vec<SignalState>> {
        let newline = buf
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("missing header line".into()))?;
        let header: BinHeader = serde_json::from_slice(&buf[..newline])
            .map_err(|e| Error::Parse(format!("bad binary header: {e}")))?;
        if header.dtype != "f64" {
            return Err(Error::Parse(format!(
                "unsupported dtype {:?}, only \"f64\"",
                header.dtype
            )));
        }
        let count = header.count.unwrap_or(1);
        if header.l == 0 || header.t == 0 || count == 0 {
            return Err(Error::Parse("L, T and count must all be positive".into()));
        }
        let per_state = header
            .l
            .checked_mul(header.t)
            .ok_or_else(|| Error::Parse("L*T overflows".into()))?;
        let total = per_state
            .checked_mul(count)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Parse("payload size overflows".into()))?;
        let payload = &buf[newline + 1..];
        if payload.len() != total {
            return Err(Error::Parse(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                total
            )));
        }
        let mut states = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(per_state * 8) {
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let data = Array2::from_shape_vec((header.l, header.t), values)
                .map_err(|e| Error::Parse(format!("bad payload shape: {e}")))?;
            states.push(SignalState::new(data)?);
        }
        Ok(states)
    }
}

#[derive(serde::Deserialize)]
struct BinHeader {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "T")]
    t: usize,
    dtype: String,
    count: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite() {
        let bad = array![[1.0, f64::NAN]];
        assert!(SignalState::new(bad).is_err());
        let bad = array![[f64::INFINITY, 0.0]];
        assert!(SignalState::new(bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = SignalState::new(array![[0.25, -1.5, 3.0], [0.0, 2e-4, 80.0]]).unwrap();
        let back = SignalState::from_csv(&s.to_csv()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn csv_rejects_ragged_and_junk() {
        assert!(SignalState::from_csv("1,2\n3\n").is_err());
        assert!(SignalState::from_csv("1,abc\n").is_err());
        assert!(SignalState::from_csv("").is_err());
        assert!(SignalState::from_csv("1,NaN\n").is_err());
    }

    #[test]
    fn bin_round_trip_many() {
        let a = SignalState::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = SignalState::new(array![[5.0, 6.0], [7.0, 8.0]]).unwrap();
        let mut buf = Vec::new();
        SignalState::write_bin_many(&[a.clone(), b.clone()], &mut buf).unwrap();
        let back = SignalState::from_bin_bytes(&buf).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn bin_rejects_truncated_payload() {
        let a = SignalState::new(array![[1.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        a.write_bin(&mut buf).unwrap();
        buf.pop();
        assert!(SignalState::from_bin_bytes(&buf).is_err());
    }
}
