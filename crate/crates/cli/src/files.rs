//! Reading and writing the artifacts passed between subcommands.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use texnet::rotlab::Quat;
use texnet::rvegen::{decode_rve, encode_rve, rve_from_text, rve_to_text, VoxelRve};
use texnet::Error;

/// Version tag carried in the comment header of every CSV the CLI writes.
pub const CSV_VERSION: u32 = 1;

const RVE_MAGIC: &[u8] = b"TXRV";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

/// Binary or text RVE, told apart by the magic bytes.
pub fn read_rve(path: &Path) -> Result<VoxelRve> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let rve = if data.starts_with(RVE_MAGIC) {
        decode_rve(&data)?
    } else {
        let text = std::str::from_utf8(&data).map_err(|_| Error::Format {
            what: "rve",
            detail: "neither binary nor UTF-8 text".into(),
        })?;
        rve_from_text(text)?
    };
    Ok(rve)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum RveFormat {
    Binary,
    Text,
}

pub fn write_rve(path: &Path, rve: &VoxelRve, format: RveFormat) -> Result<()> {
    match format {
        RveFormat::Binary => write(path, encode_rve(rve)?),
        RveFormat::Text => write(path, rve_to_text(rve)?),
    }
}

/// Prepends the `# texnet csv v1 seed=...` header line.
pub fn with_header(seed: u64, body: &str) -> String {
    format!("# texnet csv v{CSV_VERSION} seed={seed}\n{body}")
}

/// Parsed CSV: column names and rows of numbers. A leading header comment,
/// if present, must carry a supported version.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str, what: &'static str) -> texnet::Result<Table> {
        let bad = |detail: String| Error::Format { what, detail };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        if let Some(first) = lines.peek().filter(|l| l.starts_with('#')) {
            let version = first
                .split_whitespace()
                .find_map(|t| t.strip_prefix('v').and_then(|v| v.parse::<u32>().ok()))
                .ok_or_else(|| bad(format!("header {first:?} carries no version")))?;
            if version != CSV_VERSION {
                return Err(Error::Version {
                    what,
                    found: version,
                    expected: CSV_VERSION,
                });
            }
            lines.next();
        }
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| bad("missing column header".into()))?
            .split(',')
            .map(|c| c.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|_| bad(format!("row {}: bad number {c:?}", n + 1))))
                .collect::<texnet::Result<Vec<f64>>>()?;
            if row.len() != columns.len() {
                return Err(bad(format!("row {} has {} fields, expected {}", n + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> texnet::Result<Vec<f64>> {
        let k = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Invalid(format!("no column {name:?} (have {})", self.columns.join(","))))?;
        Ok(self.rows.iter().map(|r| r[k]).collect())
    }
}

/// Weighted orientations from an RVE (volume weights) or from the last
/// time of a texture-snapshot CSV (leaf fractions).
pub fn read_texture(path: &Path) -> Result<(Vec<Quat>, Vec<f64>)> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        let rve = read_rve(path)?;
        return Ok((rve.orientations.clone(), rve.grain_fractions()));
    }
    let table = Table::parse(&read_text(path)?, "texture snapshots")?;
    let t = table.column("t")?;
    let Some(last) = t.iter().cloned().reduce(f64::max) else {
        bail!("{} holds no snapshots", path.display());
    };
    let cols: Vec<Vec<f64>> = ["fraction", "w", "x", "y", "z"]
        .iter()
        .map(|c| table.column(c))
        .collect::<texnet::Result<_>>()?;
    let mut quats = Vec::new();
    let mut weights = Vec::new();
    for (k, tk) in t.iter().enumerate() {
        if *tk == last {
            // Taken verbatim so metrics match the in-memory values bit for bit.
            let [w, x, y, z] = [cols[1][k], cols[2][k], cols[3][k], cols[4][k]];
            if !(((w * w + x * x + y * y + z * z).sqrt() - 1.0).abs() < 1e-9) {
                bail!("{}: row {} is not a unit quaternion", path.display(), k + 1);
            }
            quats.push(Quat { w, x, y, z });
            weights.push(cols[0][k]);
        }
    }
    Ok((quats, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_reads_header_and_columns() {
        let t = Table::parse(&with_header(4, "a,b\n1,2\n3,4e-3\n"), "test").unwrap();
        assert_eq!(t.column("b").unwrap(), vec![2.0, 4e-3]);
        assert!(t.column("c").is_err());
        assert!(Table::parse("# texnet csv v9 seed=0\na\n1\n", "test").is_err());
        assert!(Table::parse("a,b\n1\n", "test").is_err());
        assert!(Table::parse("a\nx\n", "test").is_err());
    }
}
