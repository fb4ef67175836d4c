//! Melded chain output: per-chain draws, acceptance counts and index traces.

use std::io::{Read, Write};

use crate::csvfmt::fmt_f64;
use crate::error::{MeldError, Result};

/// Acceptance counts for one update type, summed over chains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateStats {
    pub name: String,
    pub accepted: u64,
    pub proposed: u64,
}

impl UpdateStats {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            accepted: 0,
            proposed: 0,
        }
    }

    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn merge(&mut self, other: &UpdateStats) {
        self.accepted += other.accepted;
        self.proposed += other.proposed;
    }
}

/// Store indices held after every kept iteration of one chain: the index of
/// the accepted proposal, or the current index on rejection. With a unit
/// factorization there is one index per unit, stored unit-fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTrace {
    pub store: String,
    pub chain: usize,
    pub units: usize,
    pub indices: Vec<u32>,
}

impl IndexTrace {
    pub fn new(store: impl Into<String>, chain: usize, units: usize) -> Self {
        Self {
            store: store.into(),
            chain,
            units,
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.units.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices held after kept iteration `i`, one per unit.
    pub fn at(&self, i: usize) -> &[u32] {
        &self.indices[i * self.units..(i + 1) * self.units]
    }
}

/// Kept draws of one chain, row-major over the output columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub iterations: Vec<u64>,
    pub values: Vec<f64>,
}

impl ChainDraws {
    pub fn new() -> Self {
        Self {
            iterations: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl Default for ChainDraws {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeldedChainOutput {
    pub columns: Vec<String>,
    pub chains: Vec<ChainDraws>,
    pub updates: Vec<UpdateStats>,
    pub index_traces: Vec<IndexTrace>,
    pub seed: u64,
}

impl MeldedChainOutput {
    pub fn new(columns: Vec<String>, seed: u64) -> Self {
        Self {
            columns,
            chains: Vec::new(),
            updates: Vec::new(),
            index_traces: Vec::new(),
            seed,
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn num_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.iterations.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.iterations.len()).sum()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| MeldError::Configuration(format!("no output column `{name}`")))
    }

    pub fn row(&self, chain: usize, i: usize) -> &[f64] {
        let w = self.width();
        &self.chains[chain].values[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let w = self.width();
        self.chains.iter().flat_map(move |c| c.values.chunks(w))
    }

    /// Trace of column `j` for each chain.
    pub fn traces(&self, j: usize) -> Vec<Vec<f64>> {
        let w = self.width();
        self.chains
            .iter()
            .map(|c| c.values.chunks(w).map(|r| r[j]).collect())
            .collect()
    }

    /// Column `j` over all chains, chain by chain.
    pub fn pooled(&self, j: usize) -> Vec<f64> {
        self.traces(j).concat()
    }

    pub fn update(&self, name: &str) -> Option<&UpdateStats> {
        self.updates.iter().find(|u| u.name == name)
    }

    /// Adds per-chain stats into the chain-summed entries.
    pub(crate) fn merge_updates(&mut self, stats: &[UpdateStats]) {
        for s in stats {
            match self.updates.iter_mut().find(|u| u.name == s.name) {
                Some(u) => u.merge(s),
                None => self.updates.push(s.clone()),
            }
        }
    }

    /// Writes `chain,iteration,<columns>` rows, chain by chain.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "chain,iteration,{}", self.columns.join(","))?;
        let width = self.width();
        for (c, draws) in self.chains.iter().enumerate() {
            for (it, row) in draws.iterations.iter().zip(draws.values.chunks(width.max(1))) {
                let mut line = format!("{c},{it}");
                for &v in row {
                    line.push(',');
                    line.push_str(&fmt_f64(v));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    /// Reads the format of [`Self::write_csv`]. Chains must appear in order
    /// starting from 0; acceptance counts and index traces are not stored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| MeldError::Io(e.to_string()))?.clone();
        if headers.len() < 3 || &headers[0] != "chain" || &headers[1] != "iteration" {
            return Err(MeldError::Structure("melded samples CSV must start with chain,iteration".into()));
        }
        let mut out = MeldedChainOutput::new(headers.iter().skip(2).map(str::to_string).collect(), 0);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| MeldError::Io(e.to_string()))?;
            let bad = |what: &str| MeldError::Structure(format!("melded samples CSV row {}: bad {what}", line + 1));
            let chain: usize = rec[0].trim().parse().map_err(|_| bad("chain"))?;
            if chain == out.chains.len() {
                out.chains.push(ChainDraws::new());
            } else if chain + 1 != out.chains.len() {
                return Err(bad("chain order"));
            }
            let draws = &mut out.chains[chain];
            draws.iterations.push(rec[1].trim().parse().map_err(|_| bad("iteration"))?);
            for j in 2..headers.len() {
                draws.values.push(rec[j].trim().parse().map_err(|_| bad(&headers[j]))?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_traces() {
        let mut out = MeldedChainOutput::new(vec!["phi12".into(), "phi23".into()], 5);
        out.chains.push(ChainDraws {
            iterations: vec![0, 1],
            values: vec![1.0, 2.0, 3.0, 4.0],
        });
        out.chains.push(ChainDraws {
            iterations: vec![0, 1],
            values: vec![5.0, 6.0, 7.5, 8.0],
        });
        let mut buf = Vec::new();
        out.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "chain,iteration,phi12,phi23\n0,0,1,2\n0,1,3,4\n1,0,5,6\n1,1,7.5,8\n"
        );
        assert_eq!(out.traces(1), vec![vec![2.0, 4.0], vec![6.0, 8.0]]);
        assert_eq!(out.row(1, 1), &[7.5, 8.0]);
        assert_eq!(out.total_draws(), 4);
        assert!(out.column_index("psi2").is_err());
    }

    #[test]
    fn stats_merge_by_name() {
        let mut out = MeldedChainOutput::new(vec![], 0);
        let mut a = UpdateStats::new("store1");
        a.record(true);
        a.record(false);
        out.merge_updates(&[a.clone()]);
        out.merge_updates(&[a]);
        let s = out.update("store1").unwrap();
        assert_eq!((s.accepted, s.proposed), (2, 4));
        assert_eq!(s.rate(), 0.5);
    }
}
