use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HierarchicalTerm, RunConfig, SolverState};
use crate::game::GameSpec;
use crate::metrics::{self, Metric};
use crate::rng::{purpose, stream};
use crate::{Error, Result, Vector};

/// Version tag written into every sidecar.
pub const TRACE_SCHEMA: u32 = 1;

/// Recorded metrics of one run plus the final and time-averaged iterates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub schema: u32,
    pub ks: Vec<usize>,
    /// Ordered metric columns.
    pub columns: Vec<(String, Vec<f64>)>,
    pub x_final: Vec<f64>,
    pub x_average: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterates: Option<Vec<Vec<f64>>>,
    /// Largest aggregate-conservation drift over the run.
    pub max_drift: f64,
    /// Largest `||h_i(x_i)||` seen, the scale for `max_drift`.
    pub drift_scale: f64,
    pub config: RunConfig,
}

impl RunTrace {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_table(w, &self.ks, &self.columns)
    }

    /// Writes `<stem>.csv` and the `<stem>.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        self.write_csv(fs::File::create(&csv_path)?)?;
        let mut side = serde_json::to_value(self)?;
        if let Some(obj) = side.as_object_mut() {
            obj.remove("ks");
            obj.remove("columns");
        }
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        Ok(csv_path)
    }
}

/// CSV table with a leading `k` column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub ks: Vec<usize>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("k") {
            return Err(Error::Parse(format!(
                "trace header must start with `k`, found {:?}",
                header.first()
            )));
        }
        let mut ks = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len() - 1];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse(format!("row {} has {} fields, expected {}", line + 1, rec.len(), header.len())));
            }
            ks.push(rec[0].parse().map_err(|e| Error::Parse(format!("row {}: bad k: {e}", line + 1)))?);
            for (j, c) in cols.iter_mut().enumerate() {
                let f = &rec[j + 1];
                c.push(if f.is_empty() {
                    f64::NAN
                } else {
                    f.parse().map_err(|e| Error::Parse(format!("row {} column {}: {e}", line + 1, header[j + 1])))?
                });
            }
        }
        Ok(Table {
            ks,
            columns: header.into_iter().skip(1).zip(cols).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(fs::File::open(path)?)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_table(w, &self.ks, &self.columns)
    }

    /// Columnwise arithmetic mean of tables sharing `ks` and column names.
    pub fn mean(tables: &[Table]) -> Result<Table> {
        let first = tables.first().ok_or_else(|| Error::config("no tables to average"))?;
        for t in tables {
            if t.ks != first.ks {
                return Err(Error::Parse("tables record different iteration indices".into()));
            }
            let a: Vec<&String> = t.columns.iter().map(|c| &c.0).collect();
            let b: Vec<&String> = first.columns.iter().map(|c| &c.0).collect();
            if a != b {
                return Err(Error::Parse(format!("column mismatch: {a:?} vs {b:?}")));
            }
        }
        let n = tables.len() as f64;
        let columns = first
            .columns
            .iter()
            .enumerate()
            .map(|(j, (name, col))| {
                let mean = (0..col.len())
                    .map(|r| tables.iter().map(|t| t.columns[j].1[r]).sum::<f64>() / n)
                    .collect();
                (name.clone(), mean)
            })
            .collect();
        Ok(Table {
            ks: first.ks.clone(),
            columns,
        })
    }
}

impl From<&RunTrace> for Table {
    fn from(t: &RunTrace) -> Self {
        Table {
            ks: t.ks.clone(),
            columns: t.columns.clone(),
        }
    }
}

fn write_table<W: Write>(w: W, ks: &[usize], columns: &[(String, Vec<f64>)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["k".to_string()];
    header.extend(columns.iter().map(|c| c.0.clone()));
    wr.write_record(&header)?;
    for (r, k) in ks.iter().enumerate() {
        let mut row = vec![k.to_string()];
        // shortest round-trip formatting keeps reruns bitwise comparable
        row.extend(columns.iter().map(|c| format!("{:e}", c.1[r])));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub(crate) struct Recorder<'a> {
    metrics: Vec<Metric>,
    hier: Option<&'a [HierarchicalTerm]>,
    cfg: RunConfig,
    ks: Vec<usize>,
    cols: Vec<Vec<f64>>,
    base_residual: Option<f64>,
    base_gap: Option<f64>,
    base_m: Option<f64>,
    iterates: Option<Vec<Vec<f64>>>,
}

impl<'a> Recorder<'a> {
    pub fn new(cfg: &RunConfig, hier: Option<&'a [HierarchicalTerm]>) -> Self {
        Recorder {
            metrics: cfg.metrics.clone(),
            hier,
            cfg: cfg.clone(),
            ks: Vec::new(),
            cols: vec![Vec::new(); cfg.metrics.len()],
            base_residual: None,
            base_gap: None,
            base_m: None,
            iterates: cfg.keep_iterates.then(Vec::new),
        }
    }

    fn terms(&self) -> Result<&'a [HierarchicalTerm]> {
        self.hier
            .ok_or_else(|| Error::config("hierarchical metrics need hierarchical terms"))
    }

    pub fn record(&mut self, game: &GameSpec, state: &SolverState, x_avg: &Vector, drift: f64) -> Result<()> {
        let k = state.k;
        let x = state.joint_x();
        let mut rng = stream(self.cfg.seed, &[purpose::METRICS, k as u64]);
        let mut residual = None;
        let mut gap = None;
        let mut m_val = None;
        for (j, metric) in self.metrics.clone().iter().enumerate() {
            let value = match metric {
                Metric::Residual | Metric::RelResidual => {
                    let r = match residual {
                        Some(r) => r,
                        None => {
                            let r = metrics::residual_metric(game, &x)?;
                            residual = Some(r);
                            r
                        }
                    };
                    let base = *self.base_residual.get_or_insert(r);
                    if *metric == Metric::Residual {
                        r
                    } else {
                        r / base
                    }
                }
                Metric::ConsensusError => metrics::consensus_error(&state.v),
                Metric::Gap | Metric::RelGap => {
                    let g = match gap {
                        Some(g) => g,
                        None => {
                            let g = metrics::gap(game, x_avg, &self.cfg.gap, &mut rng)?.lower;
                            gap = Some(g);
                            g
                        }
                    };
                    let base = *self.base_gap.get_or_insert(g);
                    if *metric == Metric::Gap {
                        g
                    } else {
                        g / base
                    }
                }
                Metric::GapHierarchical => {
                    metrics::gap_hierarchical(game, self.terms()?, x_avg, &self.cfg.gap, &mut rng)?.lower
                }
                Metric::ResidualM | Metric::RelResidualM => {
                    let m = match m_val {
                        Some(m) => m,
                        None => {
                            let m = metrics::hierarchical_residual_m(game, self.terms()?, &x)?;
                            m_val = Some(m);
                            m
                        }
                    };
                    let base = *self.base_m.get_or_insert(m);
                    if *metric == Metric::ResidualM {
                        m
                    } else {
                        m / base
                    }
                }
                Metric::Norm => x.norm(),
                Metric::NormAverage => x_avg.norm(),
                Metric::Drift => drift,
            };
            self.cols[j].push(value);
        }
        self.ks.push(k);
        if let Some(it) = &mut self.iterates {
            it.push(x.as_slice().to_vec());
        }
        Ok(())
    }

    pub fn finish(self, x_final: Vector, x_avg: Vector, max_drift: f64, drift_scale: f64, cfg: &RunConfig) -> RunTrace {
        RunTrace {
            schema: TRACE_SCHEMA,
            ks: self.ks,
            columns: self
                .metrics
                .iter()
                .map(|m| m.name().to_string())
                .zip(self.cols)
                .collect(),
            x_final: x_final.as_slice().to_vec(),
            x_average: x_avg.as_slice().to_vec(),
            iterates: self.iterates,
            max_drift,
            drift_scale,
            config: cfg.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Table {
        Table {
            ks: vec![0, 10, 20],
            columns: vec![
                ("residual".into(), vec![1.0, 0.5, 0.125]),
                ("consensus_error".into(), vec![0.1 + 0.2, 1e-300, 3.0]),
            ],
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = table();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let back = Table::read(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(String::from_utf8(buf).unwrap().starts_with("k,residual,consensus_error"));
    }

    #[test]
    fn bad_header_is_a_parse_error() {
        let r = Table::read("iter,residual\n0,1\n".as_bytes());
        assert!(matches!(r, Err(Error::Parse(_))));
    }

    #[test]
    fn mean_is_columnwise() {
        let a = table();
        let mut b = table();
        b.columns[0].1 = vec![3.0, 1.5, 0.375];
        let m = Table::mean(&[a, b]).unwrap();
        assert_eq!(m.column("residual").unwrap(), &[2.0, 1.0, 0.25]);
    }

    #[test]
    fn mean_rejects_column_mismatch() {
        let a = table();
        let mut b = table();
        b.columns[1].0 = "gap".into();
        assert!(matches!(Table::mean(&[a, b]), Err(Error::Parse(_))));
    }
}
