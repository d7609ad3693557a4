//! Matrix files and dataset bundles.
//!
//! * CSV: one row per line, comma separated, no header.
//! * Raw binary: `rows: u64`, `cols: u64`, then `rows·cols` `f64` values in
//!   row-major order, all little-endian.
//! * Bundle: a directory with `meta.json` and per-agent CSV matrices.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnyProblem, GevpProblem, GroundTruth, LrmcAgent, LrmcProblem, PcaProblem, Problem};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    RawBinary,
}

impl MatrixFormat {
    /// `.bin` means raw binary, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => MatrixFormat::RawBinary,
            _ => MatrixFormat::Csv,
        }
    }
}

/// Sizes of `n` contiguous blocks covering `total` items; the first
/// `total mod n` blocks are one larger.
pub fn block_sizes(total: usize, n: usize) -> Vec<usize> {
    let (base, extra) = (total / n, total % n);
    (0..n).map(|i| base + usize::from(i < extra)).collect()
}

/// Splits rows into `n` contiguous blocks (see [`block_sizes`]).
pub fn split_rows(m: &Matrix, n: usize) -> Result<Vec<Matrix>> {
    if n == 0 || n > m.nrows() {
        return Err(Error::invalid(format!(
            "cannot split {} rows into {n} agents",
            m.nrows()
        )));
    }
    let mut at = 0;
    Ok(block_sizes(m.nrows(), n)
        .into_iter()
        .map(|k| {
            let block = m.rows(at, k).into_owned();
            at += k;
            block
        })
        .collect())
}

fn format_error(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => format_error(path, 0, format!("{other:?}")),
        })?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            match e.kind() {
                csv::ErrorKind::UnequalLengths {
                    expected_len, len, ..
                } => format_error(
                    path,
                    line,
                    format!("ragged row: {len} fields, expected {expected_len}"),
                ),
                _ => format_error(path, line, e.to_string()),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| format_error(path, line, format!("not a number: `{field}`")))?;
            values.push(v);
        }
        cols.get_or_insert(record.len());
        rows += 1;
    }
    let cols = cols.ok_or_else(|| format_error(path, 0, "empty matrix file"))?;
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

fn write_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 20);
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_binary(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(format_error(path, 0, "truncated header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(0) as usize, word(8) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|k| k.checked_mul(8))
        .and_then(|k| k.checked_add(16))
        .ok_or_else(|| format_error(path, 0, "header overflows"))?;
    if bytes.len() != expected {
        return Err(format_error(
            path,
            0,
            format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

fn write_binary(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for v in m.row(i).iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a dense matrix. A `scale` divides every entry (e.g. 255 for 8-bit
/// pixel data).
pub fn load_matrix(path: &Path, format: MatrixFormat, scale: Option<f64>) -> Result<Matrix> {
    let m = match format {
        MatrixFormat::Csv => read_csv(path)?,
        MatrixFormat::RawBinary => read_binary(path)?,
    };
    if !m.iter().all(|v| v.is_finite()) {
        return Err(format_error(path, 0, "non-finite entry"));
    }
    match scale {
        Some(s) if !(s != 0.0 && s.is_finite()) => {
            Err(Error::invalid(format!("scale must be finite and non-zero, got {s}")))
        }
        Some(s) => Ok(m / s),
        None => Ok(m),
    }
}

pub fn save_matrix(path: &Path, m: &Matrix, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => write_csv(path, m),
        MatrixFormat::RawBinary => write_binary(path, m),
    }
}

/// `meta.json` of a dataset bundle.
///
/// `m_i` is the per-agent sample count: rows for `pca`/`gevp`, columns of the
/// first agent for `lrmc`. `d` is the ambient row dimension of the iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub kind: String,
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub m_i: usize,
    pub seed: Option<u64>,
    pub xi: Option<f64>,
    pub nu: Option<f64>,
}

fn agent_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("agent_{i:03}.csv"))
}

fn mask_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:03}.csv"))
}

/// Writes a problem (and its ground truth when known) as a bundle directory.
pub fn write_bundle(
    dir: &Path,
    problem: &AnyProblem,
    truth: &GroundTruth,
    seed: Option<u64>,
    xi: Option<f64>,
    nu: Option<f64>,
) -> Result<BundleMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = problem.manifold();
    let m_i = match problem {
        AnyProblem::Pca(p) => p.agents()[0].nrows(),
        AnyProblem::Gevp(p) => p.agents()[0].nrows(),
        AnyProblem::Lrmc(p) => p.agents()[0].data().ncols(),
    };
    let meta = BundleMeta {
        kind: problem.kind().to_string(),
        n: problem.n_agents(),
        d: spec.d(),
        r: spec.r(),
        m_i,
        seed,
        xi,
        nu,
    };
    match problem {
        AnyProblem::Pca(p) => {
            for (i, a) in p.agents().iter().enumerate() {
                write_csv(&agent_file(dir, i), a)?;
            }
        }
        AnyProblem::Gevp(p) => {
            for (i, a) in p.agents().iter().enumerate() {
                write_csv(&agent_file(dir, i), a)?;
            }
            write_csv(&dir.join("b.csv"), p.b())?;
        }
        AnyProblem::Lrmc(p) => {
            for (i, ag) in p.agents().iter().enumerate() {
                write_csv(&agent_file(dir, i), ag.data())?;
                let mut text = String::new();
                for (row, col) in ag.mask() {
                    text.push_str(&format!("{row},{col}\n"));
                }
                let path = mask_file(dir, i);
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    if let Some(x) = &truth.x_star {
        write_csv(&dir.join("truth.csv"), x.as_matrix())?;
    }
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

fn read_mask(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: Option<&str>| s.and_then(|s| s.trim().parse::<usize>().ok());
        let mut parts = line.split(',');
        match (parse(parts.next()), parse(parts.next()), parts.next()) {
            (Some(r), Some(c), None) => out.push((r, c)),
            _ => return Err(format_error(path, k as u64 + 1, "expected `row,col`")),
        }
    }
    Ok(out)
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<(AnyProblem, GroundTruth, BundleMeta)> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| {
        format_error(&meta_path, e.line() as u64, e.to_string())
    })?;
    let agents = (0..meta.n)
        .map(|i| read_csv(&agent_file(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    let problem = match meta.kind.as_str() {
        "pca" => AnyProblem::Pca(PcaProblem::new(agents, meta.r)?),
        "gevp" => {
            let b = read_csv(&dir.join("b.csv"))?;
            AnyProblem::Gevp(GevpProblem::new(agents, b, meta.r)?)
        }
        "lrmc" => {
            let lrmc = agents
                .into_iter()
                .enumerate()
                .map(|(i, a)| LrmcAgent::new(a, &read_mask(&mask_file(dir, i))?))
                .collect::<Result<Vec<_>>>()?;
            AnyProblem::Lrmc(LrmcProblem::new(lrmc, meta.r)?)
        }
        other => {
            return Err(format_error(&meta_path, 0, format!("unknown problem kind `{other}`")))
        }
    };
    let truth_path = dir.join("truth.csv");
    let x_star = if truth_path.exists() {
        let raw = read_csv(&truth_path)?;
        Some(problem.manifold().point(raw.clone()).or_else(|_| problem.manifold().project(&raw))?)
    } else {
        None
    };
    Ok((
        problem,
        GroundTruth {
            x_star,
            f_star: None,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, rng_from_seed};
    use crate::problem::{gen_gevp_data, gen_lrmc_data, gen_pca_data};

    #[test]
    fn csv_small_and_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "1,2\n3,4\n").unwrap();
        let m = load_matrix(&path, MatrixFormat::Csv, None).unwrap();
        assert_eq!(m, Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        fs::write(&path, "255,0\n51,102\n").unwrap();
        let m = load_matrix(&path, MatrixFormat::Csv, Some(255.0)).unwrap();
        assert_eq!(m, Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.4]));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1,2\n3,x\n").unwrap();
        match load_matrix(&path, MatrixFormat::Csv, None) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "1,2\n3,4\n5\n").unwrap();
        match load_matrix(&path, MatrixFormat::Csv, None) {
            Err(Error::Format { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("ragged"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            load_matrix(&dir.path().join("missing.csv"), MatrixFormat::Csv, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from_seed(4);
        let m = gaussian_matrix(7, 3, &mut rng) * 1e-3;
        for (name, fmt) in [("a.csv", MatrixFormat::Csv), ("a.bin", MatrixFormat::RawBinary)] {
            let path = dir.path().join(name);
            assert_eq!(MatrixFormat::from_path(&path), fmt);
            save_matrix(&path, &m, fmt).unwrap();
            let back = load_matrix(&path, fmt, None).unwrap();
            assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn split_and_blocks() {
        assert_eq!(block_sizes(10, 3), vec![4, 3, 3]);
        let m = Matrix::from_fn(10, 2, |i, j| (i * 2 + j) as f64);
        let parts = split_rows(&m, 3).unwrap();
        assert_eq!(parts[1][(0, 0)], 8.0);
        assert!(split_rows(&m, 11).is_err());
    }

    #[test]
    fn bundles_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (pca, truth) = gen_pca_data(3, 10, 5, 2, 0.8, 1).unwrap();
        let (gevp, gtruth) = gen_gevp_data(2, 10, 4, 2, 0.8, 1, None).unwrap();
        let (lrmc, ltruth) = gen_lrmc_data(3, 8, 20, 2, 1).unwrap();
        let cases = [
            (AnyProblem::Pca(pca), truth),
            (AnyProblem::Gevp(gevp), gtruth),
            (AnyProblem::Lrmc(lrmc), ltruth),
        ];
        for (k, (problem, truth)) in cases.iter().enumerate() {
            let sub = dir.path().join(format!("b{k}"));
            let meta = write_bundle(&sub, problem, truth, Some(1), Some(0.8), None).unwrap();
            let (back, btruth, bmeta) = read_bundle(&sub).unwrap();
            assert_eq!(meta, bmeta);
            assert_eq!(back.kind(), problem.kind());
            let x = truth.x_star.as_ref().unwrap();
            assert_eq!(btruth.x_star.as_ref().unwrap().as_matrix(), x.as_matrix());
            let a = problem.objective(x.as_matrix()).unwrap();
            let b = back.objective(x.as_matrix()).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let json = fs::read_to_string(dir.path().join("b0/meta.json")).unwrap();
        for key in ["kind", "n", "d", "r", "m_i", "seed", "xi", "nu"] {
            assert!(json.contains(&format!("\"{key}\"")), "{key}");
        }
    }
}
