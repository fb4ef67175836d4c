//! Stage-one draws of `(phi block, psi)` reused as proposals by later stages.

use std::io::{Read, Write};

use crate::csvfmt::fmt_f64;
use crate::error::{MeldError, Result};

/// Draws stored row-wise as `phi coordinates..., psi coordinates...`, with the
/// log target each was drawn under and its chain/iteration of origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    phi_names: Vec<String>,
    psi_names: Vec<String>,
    data: Vec<f64>,
    log_density: Vec<f64>,
    provenance: Vec<(u32, u64)>,
}

impl SampleStore {
    pub fn new(phi_names: Vec<String>, psi_names: Vec<String>) -> Self {
        Self {
            phi_names,
            psi_names,
            data: Vec::new(),
            log_density: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn phi_dim(&self) -> usize {
        self.phi_names.len()
    }

    pub fn psi_dim(&self) -> usize {
        self.psi_names.len()
    }

    pub fn width(&self) -> usize {
        self.phi_dim() + self.psi_dim()
    }

    pub fn phi_names(&self) -> &[String] {
        &self.phi_names
    }

    pub fn psi_names(&self) -> &[String] {
        &self.psi_names
    }

    pub fn len(&self) -> usize {
        self.log_density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_density.is_empty()
    }

    /// Appends one draw; `row` holds the phi coordinates followed by psi.
    pub fn push(&mut self, row: &[f64], log_density: f64, chain: u32, iteration: u64) {
        assert_eq!(row.len(), self.width(), "row width");
        self.data.extend_from_slice(row);
        self.log_density.push(log_density);
        self.provenance.push((chain, iteration));
    }

    /// Appends every draw of `other`, which must have the same columns.
    pub fn extend(&mut self, other: &SampleStore) -> Result<()> {
        if other.phi_names != self.phi_names || other.psi_names != self.psi_names {
            return Err(MeldError::Structure("sample stores have different columns".into()));
        }
        self.data.extend_from_slice(&other.data);
        self.log_density.extend_from_slice(&other.log_density);
        self.provenance.extend_from_slice(&other.provenance);
        Ok(())
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let w = self.width();
        &self.data[n * w..(n + 1) * w]
    }

    pub fn phi(&self, n: usize) -> &[f64] {
        &self.row(n)[..self.phi_dim()]
    }

    pub fn psi(&self, n: usize) -> &[f64] {
        &self.row(n)[self.phi_dim()..]
    }

    pub fn log_density(&self, n: usize) -> f64 {
        self.log_density[n]
    }

    pub fn provenance(&self, n: usize) -> (u32, u64) {
        self.provenance[n]
    }

    /// Values of column `j` (phi columns first) across all draws.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|n| self.row(n)[j]).collect()
    }

    pub fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(MeldError::EmptyStore(what.to_string()));
        }
        Ok(())
    }

    /// Re-evaluates the cached log density of `count` evenly spaced draws and
    /// fails if any differs from the cache by more than `tol`.
    pub fn spot_check(&self, count: usize, tol: f64, log_target: impl Fn(&[f64], &[f64]) -> Result<f64>) -> Result<()> {
        if self.is_empty() || count == 0 {
            return Ok(());
        }
        let step = (self.len() / count).max(1);
        for n in (0..self.len()).step_by(step).take(count) {
            let v = log_target(self.phi(n), self.psi(n))?;
            let cached = self.log_density[n];
            let same = v == cached || (v - cached).abs() <= tol;
            if !same {
                return Err(MeldError::Numerical(format!(
                    "stored draw {n} has cached log density {cached} but re-evaluates to {v}"
                )));
            }
        }
        Ok(())
    }

    /// Writes `chain,iteration,<phi columns>,<psi columns>,log_density`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(self.phi_names.iter().cloned());
        header.extend(self.psi_names.iter().cloned());
        header.push("log_density".into());
        writeln!(w, "{}", header.join(","))?;
        for n in 0..self.len() {
            let (c, it) = self.provenance[n];
            let mut line = format!("{c},{it}");
            for &v in self.row(n) {
                line.push(',');
                line.push_str(&fmt_f64(v));
            }
            line.push(',');
            line.push_str(&fmt_f64(self.log_density[n]));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads the format of [`Self::write_csv`]. The first `phi_dim` value
    /// columns are the phi block, the rest up to `log_density` are psi. This
    /// is how draws produced by other software are brought in.
    pub fn read_csv<R: Read>(reader: R, phi_dim: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| MeldError::Io(e.to_string()))?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 3 + phi_dim || cols[0] != "chain" || cols[1] != "iteration" || cols[cols.len() - 1] != "log_density" {
            return Err(MeldError::Structure(
                "sample store CSV must have columns chain,iteration,<phi...>,<psi...>,log_density".into(),
            ));
        }
        let value_cols = &cols[2..cols.len() - 1];
        let mut store = SampleStore::new(
            value_cols[..phi_dim].iter().map(|s| s.to_string()).collect(),
            value_cols[phi_dim..].iter().map(|s| s.to_string()).collect(),
        );
        let mut row = vec![0.0; value_cols.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| MeldError::Io(e.to_string()))?;
            let bad = |what: &str| MeldError::Structure(format!("sample store CSV row {}: bad {what}", line + 1));
            let chain: u32 = rec[0].trim().parse().map_err(|_| bad("chain"))?;
            let it: u64 = rec[1].trim().parse().map_err(|_| bad("iteration"))?;
            for (j, r) in row.iter_mut().enumerate() {
                *r = rec[j + 2].trim().parse().map_err(|_| bad(value_cols[j]))?;
            }
            let ld: f64 = rec[cols.len() - 1].trim().parse().map_err(|_| bad("log_density"))?;
            store.push(&row, ld, chain, it);
        }
        Ok(store)
    }
}
