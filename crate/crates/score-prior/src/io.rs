//! File formats: SPARR1 arrays, PGM images, key=value configs, CSV tables,
//! measurement files, and run directories.
//!
//! The array format is deliberately dumb so every language can read it:
//! magic `SPARR1`, a `u8` rank, `u64` little-endian dims, then the
//! row-major `f64` little-endian payload. Checkpoints (`SPSF1` score,
//! `SPFL1` flow, `SPGP1` Gaussian prior) reuse the same primitives with
//! their own magics.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inverse::{self, LinearForwardModel, NoiseConvention};

pub const ARRAY_MAGIC: &[u8; 6] = b"SPARR1";

// ---------------------------------------------------------------------------
// Binary primitives shared by all checkpoint formats.

pub(crate) fn write_magic<W: Write>(w: &mut W, magic: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8], what: &str) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{what}: file too short for magic")))?;
    if buf != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?} (expected {:?})",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated integer field".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f64_slice<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated payload (wanted {len} f64 values)")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

// ---------------------------------------------------------------------------
// SPARR1 arrays.

/// Writes an n-dimensional array (row-major `data`, shape `dims`).
pub fn write_array_to<W: Write>(w: &mut W, dims: &[usize], data: &[f64]) -> Result<()> {
    let expect: usize = dims.iter().product();
    if expect != data.len() {
        return Err(Error::config(format!(
            "array write: shape {dims:?} wants {expect} values, got {}",
            data.len()
        )));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::config("array write: rank exceeds 255"));
    }
    write_magic(w, ARRAY_MAGIC)?;
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        write_u64(w, d as u64)?;
    }
    write_f64_slice(w, data)
}

pub fn read_array_from<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    expect_magic(r, ARRAY_MAGIC, "array")?;
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|_| Error::Format("array: missing rank byte".into()))?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        dims.push(read_u64(r)? as usize);
    }
    let len: usize = dims.iter().product();
    let data = read_f64_vec(r, len)?;
    // reject trailing garbage so truncation bugs surface early
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("array: trailing bytes after payload".into()));
    }
    Ok((dims, data))
}

pub fn write_array(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_array_to(&mut f, dims, data)?;
    f.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_array_from(&mut f)
}

/// Reads a rank-2 array as an `ndarray` matrix.
pub fn read_matrix(path: &Path) -> Result<ndarray::Array2<f64>> {
    let (dims, data) = read_array(path)?;
    if dims.len() != 2 {
        return Err(Error::Format(format!(
            "expected rank-2 array in {}, got rank {}",
            path.display(),
            dims.len()
        )));
    }
    ndarray::Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|e| Error::Format(format!("bad matrix shape: {e}")))
}

pub fn write_matrix(path: &Path, m: &ndarray::Array2<f64>) -> Result<()> {
    let data: Vec<f64> = m.iter().copied().collect();
    write_array(path, &[m.nrows(), m.ncols()], &data)
}

/// Reads a rank-1 array (or a rank-2 single-row/column array) as a vector.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let (dims, data) = read_array(path)?;
    match dims.len() {
        1 => Ok(data),
        2 if dims[0] == 1 || dims[1] == 1 => Ok(data),
        _ => Err(Error::Format(format!(
            "expected a vector in {}, got shape {dims:?}",
            path.display()
        ))),
    }
}

pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    write_array(path, &[v.len()], v)
}

// ---------------------------------------------------------------------------
// PGM (P5) export.

/// 8-bit binary PGM with a linear [0,1] -> [0,255] clamp.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::config(format!(
            "pgm write: {rows}x{cols} wants {} values, got {}",
            rows * cols,
            data.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Flat key=value configs.

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("config line {}: expected key=value, got '{raw}'", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    parse_kv(&text)
}

pub fn write_kv(path: &Path, pairs: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV tables.

/// Writes a CSV with a header row; floats use Rust's shortest round-trip
/// formatting so outputs are reproducible bit-for-bit.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Measurement files: key=value header, blank line, SPARR1 payload of y.

/// Everything needed to rebuild a forward model and interpret its data.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementHeader {
    /// "denoise" | "lowfreq" | "sparsefreq"
    pub kind: String,
    /// Image side for DFT operators; the full dimension for denoising.
    pub dim_or_side: usize,
    pub fraction: Option<f64>,
    pub freqs: Option<Vec<(i64, i64)>>,
    pub sigma: f64,
    pub per_component_noise: bool,
    pub seed: u64,
}

impl MeasurementHeader {
    /// Rebuilds the forward model this header describes (without data).
    pub fn build_model(&self) -> Result<LinearForwardModel> {
        let model = match self.kind.as_str() {
            "denoise" => inverse::denoise_model(self.dim_or_side, self.sigma)?,
            "lowfreq" => {
                let fraction = self.fraction.ok_or_else(|| {
                    Error::Format("measurement header: lowfreq needs fraction".into())
                })?;
                inverse::lowfreq_dft_model(self.dim_or_side, fraction, self.sigma)?
            }
            "sparsefreq" => {
                let freqs = self.freqs.as_ref().ok_or_else(|| {
                    Error::Format("measurement header: sparsefreq needs freqs".into())
                })?;
                inverse::sparsefreq_model(self.dim_or_side, freqs, self.sigma)?
            }
            other => {
                return Err(Error::Format(format!(
                    "measurement header: unknown operator kind '{other}'"
                )))
            }
        };
        Ok(if self.per_component_noise {
            model.with_convention(NoiseConvention::PerComponent)
        } else {
            model
        })
    }
}

fn freqs_to_string(freqs: &[(i64, i64)]) -> String {
    freqs
        .iter()
        .map(|(a, b)| format!("{a},{b}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn freqs_from_string(s: &str) -> Result<Vec<(i64, i64)>> {
    s.split(';')
        .map(|pair| {
            let (a, b) = pair
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad frequency pair '{pair}'")))?;
            Ok((
                a.trim().parse().map_err(|_| Error::Format(format!("bad frequency '{a}'")))?,
                b.trim().parse().map_err(|_| Error::Format(format!("bad frequency '{b}'")))?,
            ))
        })
        .collect()
}

pub fn write_measurement(path: &Path, header: &MeasurementHeader, y: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "op = {}", header.kind)?;
    writeln!(
        f,
        "{} = {}",
        if header.kind == "denoise" { "dim" } else { "side" },
        header.dim_or_side
    )?;
    if let Some(fr) = header.fraction {
        writeln!(f, "fraction = {fr}")?;
    }
    if let Some(freqs) = &header.freqs {
        writeln!(f, "freqs = {}", freqs_to_string(freqs))?;
    }
    writeln!(f, "sigma = {}", header.sigma)?;
    writeln!(f, "per_component_noise = {}", header.per_component_noise)?;
    writeln!(f, "seed = {}", header.seed)?;
    writeln!(f)?;
    write_array_to(&mut f, &[y.len()], y)?;
    f.flush()?;
    Ok(())
}

/// Reads a measurement file and rebuilds the model with its data attached.
pub fn read_measurement(path: &Path) -> Result<(LinearForwardModel, MeasurementHeader)> {
    let bytes = std::fs::read(path)?;
    // header ends at the first blank line
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("measurement file: missing blank line after header".into()))?;
    let header_text = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Format("measurement file: header is not UTF-8".into()))?;
    let kv = parse_kv(header_text)?;
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::Format(format!("measurement header: missing key '{k}'")))
    };
    let kind = get("op")?.clone();
    let dim_or_side: usize = if kind == "denoise" {
        get("dim")?.parse().map_err(|_| Error::Format("bad dim".into()))?
    } else {
        get("side")?.parse().map_err(|_| Error::Format("bad side".into()))?
    };
    let header = MeasurementHeader {
        kind,
        dim_or_side,
        fraction: kv
            .get("fraction")
            .map(|v| v.parse().map_err(|_| Error::Format("bad fraction".into())))
            .transpose()?,
        freqs: kv.get("freqs").map(|v| freqs_from_string(v)).transpose()?,
        sigma: get("sigma")?.parse().map_err(|_| Error::Format("bad sigma".into()))?,
        per_component_noise: kv.get("per_component_noise").map(|v| v == "true").unwrap_or(false),
        seed: get("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
    };
    let mut cursor = std::io::Cursor::new(&bytes[split + 2..]);
    let (dims, y) = read_array_from(&mut cursor)?;
    if dims.len() != 1 {
        return Err(Error::Format("measurement payload must be rank-1".into()));
    }
    let model = header.build_model()?.with_data(y)?;
    Ok((model, header))
}

// ---------------------------------------------------------------------------
// Run directories.

/// Creates `<root>/<command>-seed<seed>-<epoch secs>[-k]/` (suffixed if the
/// name collides) and returns its path.
pub fn create_run_dir(root: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{command}-seed{seed}-{stamp}");
    let mut dir = root.join(&base);
    let mut k = 0;
    while dir.exists() {
        k += 1;
        dir = root.join(format!("{base}-{k}"));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Records the fully resolved configuration of a run.
pub fn write_manifest(dir: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    write_kv(&dir.join("manifest.txt"), entries)
}
