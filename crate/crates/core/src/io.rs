//! Matrix file formats.
//!
//! The MPCE binary block is `b"MPCE"`, a little-endian `u32` version (1),
//! `u32` rows, `u32` cols, then `rows * cols` little-endian `f64` values in
//! row-major order. CSV files carry one matrix row per line with no header.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::DataMatrix;

pub const MAGIC: &[u8; 4] = b"MPCE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    #[default]
    Bin,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Bin => "mpce",
        }
    }

    /// Guess from a file extension; anything but `.csv` is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Bin,
        }
    }
}

pub fn encode_bin(m: &DataMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows()).map_err(|_| Error::Format("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| Error::Format("too many cols".into()))?;
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_bin(bytes: &[u8]) -> Result<DataMatrix> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing MPCE magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MPCE version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "MPCE block declares {rows}x{cols} but carries {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(DataMatrix::from_row_iterator(rows, cols, values))
}

pub fn write_csv<W: Write>(m: &DataMatrix, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                w.write_all(b",")?;
            }
            // Display for f64 is shortest round-trip.
            write!(w, "{}", m[(i, j)])?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<DataMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("line {}: bad value {tok:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DataMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn save_matrix(path: &Path, m: &DataMatrix, format: MatrixFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    match format {
        MatrixFormat::Bin => fs::write(path, encode_bin(m)?)?,
        MatrixFormat::Csv => write_csv(m, fs::File::create(path)?)?,
    }
    Ok(())
}

/// Load a matrix, picking the decoder from the file extension.
pub fn load_matrix(path: &Path) -> Result<DataMatrix> {
    if !path.exists() {
        return Err(Error::invalid(format!("file not found: {}", path.display())));
    }
    match MatrixFormat::from_path(path) {
        MatrixFormat::Bin => decode_bin(&fs::read(path)?),
        MatrixFormat::Csv => read_csv(fs::File::open(path)?),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::invalid(format!("file not found: {}", path.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Serde adapter storing a matrix as a base64-encoded MPCE block.
pub mod b64 {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DataMatrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        let bytes = encode_bin(m).map_err(serde::ser::Error::custom)?;
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DataMatrix, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text.as_bytes())
            .map_err(de::Error::custom)?;
        decode_bin(&bytes).map_err(de::Error::custom)
    }
}

/// Same as [`b64`] for optional matrices.
pub mod b64_opt {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::b64")] DataMatrix);

    pub fn serialize<S: Serializer>(
        m: &Option<DataMatrix>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match m {
            Some(m) => super::b64::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<DataMatrix>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = DataMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode_bin(&m).unwrap();
        assert_eq!(&bytes[..4], b"MPCE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        // row-major: second value is m[(0, 1)]
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 16 + 6 * 8);
    }

    #[test]
    fn rejects_bad_blocks() {
        assert!(decode_bin(b"NOPE").is_err());
        let m = DataMatrix::zeros(2, 2);
        let mut bytes = encode_bin(&m).unwrap();
        bytes.pop();
        assert!(decode_bin(&bytes).is_err());
        bytes = encode_bin(&m).unwrap();
        bytes[4] = 2;
        assert!(decode_bin(&bytes).is_err());
    }

    #[test]
    fn ragged_csv_is_an_error() {
        assert!(read_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(read_csv("1,x\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn bin_and_csv_are_lossless(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DataMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 1e3 - 5e2);
            prop_assert_eq!(&decode_bin(&encode_bin(&m).unwrap()).unwrap(), &m);
            let mut buf = Vec::new();
            write_csv(&m, &mut buf).unwrap();
            prop_assert_eq!(&read_csv(buf.as_slice()).unwrap(), &m);
        }
    }
}
