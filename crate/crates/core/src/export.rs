//! CSV tables, JSON sidecars and the binary ensemble layout.
//!
//! Floats are written with 17 significant digits so that a value read back
//! is bit-identical to the one written.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::control::ValueField;
use crate::error::{invalid, Error, Result};
use crate::generator::GeneratorEstimate;
use crate::sde::PathEnsemble;
use crate::statespace::ScalarField;

/// Shortest form is not used on purpose: fixed 17 significant digits keep
/// files stable across formatting implementations.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// A header plus rows of already formatted cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(values.iter().map(|v| fmt_f64(*v)).collect());
    }

    /// Rows with text cells (labels, flags).
    pub fn push_cells(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let columns = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { columns, rows })
    }

    /// Numeric view of one column.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing column {name:?}")))?;
        self.rows
            .iter()
            .map(|r| r[j].parse::<f64>().map_err(|e| Error::InvalidArgument(format!("column {name:?}: {e}"))))
            .collect()
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// A table and its parameter sidecar (`<stem>.json` next to `<stem>.csv`).
pub fn write_with_sidecar(dir: &Path, stem: &str, table: &Table, params: &impl Serialize) -> Result<()> {
    table.write_csv(&dir.join(format!("{stem}.csv")))?;
    write_json(&dir.join(format!("{stem}.json")), params)
}

/// `(x, value)` for a one-dimensional sampled field.
pub fn density_table(field: &ScalarField) -> Result<Table> {
    let (Some(grid), Some(values)) = (field.grid(), field.values()) else {
        return invalid("only sampled fields can be exported");
    };
    let mut columns: Vec<String> = (0..grid.dim()).map(|j| format!("x{j}")).collect();
    if grid.dim() == 1 {
        columns[0] = "x".into();
    }
    columns.push("value".into());
    let mut t = Table::new(columns);
    for (k, v) in values.iter().enumerate() {
        let mut row = grid.node(k);
        row.push(*v);
        t.push(&row);
    }
    Ok(t)
}

/// `(t, x, u)` for every recorded layer of a one-dimensional value field.
pub fn value_field_table(u: &ValueField) -> Result<Table> {
    if u.grid.dim() != 1 {
        return invalid("value fields are exported in one dimension");
    }
    let mut t = Table::new(["t", "x", "u"]);
    for (k, time) in u.times.iter().enumerate() {
        for (i, v) in u.layer(k).iter().enumerate() {
            t.push(&[*time, u.grid.coord(0, i), *v]);
        }
    }
    Ok(t)
}

/// `(t, quotient, error)` along the ladder.
pub fn generator_trace_table(est: &GeneratorEstimate) -> Table {
    let mut t = Table::new(["t", "quotient", "error"]);
    for p in &est.trace {
        t.push(&[p.t, p.quotient, p.error]);
    }
    t
}

/// Terminal marginals: one row per particle, NaN for aborted paths.
pub fn terminal_table(ens: &PathEnsemble) -> Table {
    let mut cols = vec!["particle".to_string()];
    cols.extend((0..ens.dim).map(|j| format!("x{j}")));
    cols.push("aborted".into());
    let mut t = Table::new(cols);
    for i in 0..ens.particles {
        let mut cells = vec![i.to_string()];
        cells.extend(ens.terminal(i).iter().map(|v| fmt_f64(*v)));
        cells.push(u8::from(ens.aborted[i]).to_string());
        t.push_cells(cells);
    }
    t
}

const MAGIC: &[u8; 8] = b"SLENSEM1";

/// Ensemble read back from the binary layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleFile {
    pub dim: usize,
    pub particles: usize,
    /// Number of recorded times.
    pub records: usize,
    /// Spacing of the recorded times.
    pub dt: f64,
    /// Column layout: `data[(k * dim + j) * particles + i]` is coordinate `j`
    /// of particle `i` at record `k`.
    pub data: Vec<f64>,
}

impl EnsembleFile {
    pub fn column(&self, k: usize, j: usize) -> &[f64] {
        let start = (k * self.dim + j) * self.particles;
        &self.data[start..start + self.particles]
    }
}

/// Binary layout: magic, then `d`, `N`, `K` as u64 and `dt` as f64, then
/// `K * d` columns of `N` f64 values; everything little-endian.
pub fn write_ensemble(path: &Path, ens: &PathEnsemble) -> Result<()> {
    let k_rec = ens.times.len();
    let spacing = if k_rec > 1 { ens.times[1] - ens.times[0] } else { ens.dt };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for v in [ens.dim as u64, ens.particles as u64, k_rec as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&spacing.to_le_bytes())?;
    for k in 0..k_rec {
        for j in 0..ens.dim {
            for i in 0..ens.particles {
                w.write_all(&ens.state(i, k)[j].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ensemble(path: &Path) -> Result<EnsembleFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return invalid("not an ensemble file");
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let dim = next_u64(&mut r)? as usize;
    let particles = next_u64(&mut r)? as usize;
    let records = next_u64(&mut r)? as usize;
    let dt = f64::from_bits(next_u64(&mut r)?);
    let n = dim
        .checked_mul(particles)
        .and_then(|v| v.checked_mul(records))
        .ok_or_else(|| Error::InvalidArgument("ensemble header overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * n {
        return invalid(format!("ensemble body has {} bytes, header promises {}", bytes.len(), 8 * n));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(EnsembleFile { dim, particles, records, dt, data })
}
