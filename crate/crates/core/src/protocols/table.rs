//! Dense (config, seed, checkpoint) x metric table and its CSV form.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::metrics::{MetricId, MetricRow};

pub const CSV_HEADER: [&str; 8] = [
    "env_id",
    "config_id",
    "seed",
    "checkpoint",
    "metric_kind",
    "split",
    "direction",
    "value",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    env_id: String,
    configs: Vec<u32>,
    seeds: Vec<u32>,
    n_checkpoints: usize,
    metrics: Vec<MetricId>,
    // [config][seed][checkpoint][metric]
    values: Vec<f64>,
}

impl MetricTable {
    /// Build from rows; every (config, seed, checkpoint) in the cartesian
    /// grid must be present with every metric.
    pub fn from_rows(env_id: impl Into<String>, rows: &[MetricRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("empty metric table".into()));
        }
        let configs: BTreeSet<u32> = rows.iter().map(|r| r.config_id).collect();
        let seeds: BTreeSet<u32> = rows.iter().map(|r| r.seed).collect();
        let n_checkpoints = rows.iter().map(|r| r.checkpoint).max().unwrap() as usize + 1;
        let metrics: BTreeSet<MetricId> = rows.iter().flat_map(|r| r.values.keys().copied()).collect();
        let configs: Vec<u32> = configs.into_iter().collect();
        let seeds: Vec<u32> = seeds.into_iter().collect();
        let metrics: Vec<MetricId> = metrics.into_iter().collect();

        let mut table = MetricTable {
            env_id: env_id.into(),
            values: vec![f64::NAN; configs.len() * seeds.len() * n_checkpoints * metrics.len()],
            configs,
            seeds,
            n_checkpoints,
            metrics,
        };
        let mut seen = vec![false; table.configs.len() * table.seeds.len() * n_checkpoints];
        for r in rows {
            let ci = table.config_index(r.config_id).unwrap();
            let si = table.seed_index(r.seed).unwrap();
            let k = r.checkpoint as usize;
            let cell = (ci * table.seeds.len() + si) * n_checkpoints + k;
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::Invalid(format!(
                    "duplicate entry config={} seed={} checkpoint={}",
                    r.config_id, r.seed, r.checkpoint
                )));
            }
            for (mi, m) in table.metrics.iter().enumerate() {
                let v = *r.values.get(m).ok_or_else(|| {
                    Error::Invalid(format!(
                        "config={} seed={} checkpoint={} lacks metric {m}",
                        r.config_id, r.seed, r.checkpoint
                    ))
                })?;
                table.values[cell * table.metrics.len() + mi] = v;
            }
        }
        let mut missing = Vec::new();
        for (ci, &c) in table.configs.iter().enumerate() {
            for (si, &s) in table.seeds.iter().enumerate() {
                for k in 0..n_checkpoints {
                    if !seen[(ci * table.seeds.len() + si) * n_checkpoints + k] {
                        missing.push((c, s, k as u32));
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::IncompleteGrid(missing));
        }
        Ok(table)
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn configs(&self) -> &[u32] {
        &self.configs
    }

    pub fn seeds(&self) -> &[u32] {
        &self.seeds
    }

    pub fn n_checkpoints(&self) -> usize {
        self.n_checkpoints
    }

    pub fn final_checkpoint(&self) -> u32 {
        self.n_checkpoints as u32 - 1
    }

    pub fn metrics(&self) -> &[MetricId] {
        &self.metrics
    }

    pub fn has_metric(&self, m: MetricId) -> bool {
        self.metrics.contains(&m)
    }

    pub fn config_index(&self, config: u32) -> Option<usize> {
        self.configs.binary_search(&config).ok()
    }

    pub fn seed_index(&self, seed: u32) -> Option<usize> {
        self.seeds.binary_search(&seed).ok()
    }

    fn metric_index(&self, m: MetricId) -> Result<usize> {
        self.metrics
            .iter()
            .position(|x| *x == m)
            .ok_or(Error::MetricUnavailable(m))
    }

    /// Value lookup by ids.
    pub fn get(&self, metric: MetricId, config: u32, seed: u32, checkpoint: u32) -> Result<f64> {
        let mi = self.metric_index(metric)?;
        let ci = self
            .config_index(config)
            .ok_or_else(|| Error::Invalid(format!("unknown config {config}")))?;
        let si = self
            .seed_index(seed)
            .ok_or_else(|| Error::Invalid(format!("unknown seed {seed}")))?;
        if checkpoint as usize >= self.n_checkpoints {
            return Err(Error::Invalid(format!("unknown checkpoint {checkpoint}")));
        }
        Ok(self.values[self.offset(ci, si, checkpoint as usize) + mi])
    }

    fn offset(&self, ci: usize, si: usize, k: usize) -> usize {
        ((ci * self.seeds.len() + si) * self.n_checkpoints + k) * self.metrics.len()
    }

    /// Column accessor: closure `(config_idx, seed_idx, checkpoint) -> value`.
    pub fn column(&self, metric: MetricId) -> Result<Column<'_>> {
        Ok(Column {
            table: self,
            mi: self.metric_index(metric)?,
        })
    }

    /// All rows in canonical (config, seed, checkpoint) order.
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut out = Vec::with_capacity(self.configs.len() * self.seeds.len() * self.n_checkpoints);
        for (ci, &c) in self.configs.iter().enumerate() {
            for (si, &s) in self.seeds.iter().enumerate() {
                for k in 0..self.n_checkpoints {
                    let base = self.offset(ci, si, k);
                    let values = self
                        .metrics
                        .iter()
                        .enumerate()
                        .map(|(mi, &m)| (m, self.values[base + mi]))
                        .collect::<BTreeMap<_, _>>();
                    out.push(MetricRow {
                        config_id: c,
                        seed: s,
                        checkpoint: k as u32,
                        values,
                    });
                }
            }
        }
        out
    }

    /// Sub-table over a subset of training seeds.
    pub fn restrict_seeds(&self, seeds: &[u32]) -> Result<MetricTable> {
        let rows: Vec<MetricRow> = self.rows().into_iter().filter(|r| seeds.contains(&r.seed)).collect();
        MetricTable::from_rows(self.env_id.clone(), &rows)
    }

    /// Sub-table keeping only the given metrics.
    pub fn restrict_metrics(&self, metrics: &[MetricId]) -> Result<MetricTable> {
        for m in metrics {
            self.metric_index(*m)?;
        }
        let rows: Vec<MetricRow> = self
            .rows()
            .into_iter()
            .map(|mut r| {
                r.values.retain(|k, _| metrics.contains(k));
                r
            })
            .collect();
        MetricTable::from_rows(self.env_id.clone(), &rows)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io_err = |e: csv::Error| Error::Invalid(format!("csv write: {e}"));
        wr.write_record(CSV_HEADER).map_err(io_err)?;
        for r in self.rows() {
            for (m, v) in &r.values {
                wr.write_record([
                    self.env_id.as_str(),
                    &r.config_id.to_string(),
                    &r.seed.to_string(),
                    &r.checkpoint.to_string(),
                    m.kind.as_str(),
                    m.split_str(),
                    m.direction().as_str(),
                    &fmt_f64(*v),
                ])
                .map_err(io_err)?;
            }
        }
        wr.flush().map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        Ok(())
    }

    /// Parse the long-format CSV. `source` names the input in errors.
    pub fn read_csv<R: Read>(r: R, source: &std::path::Path) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let schema = |line: usize, message: String| Error::Schema {
            path: source.to_path_buf(),
            line,
            message,
        };
        let header = rd.headers().map_err(|e| schema(1, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(schema(1, format!("expected header {}", CSV_HEADER.join(","))));
        }
        let mut env_id: Option<String> = None;
        let mut rows: BTreeMap<(u32, u32, u32), BTreeMap<MetricId, f64>> = BTreeMap::new();
        for (i, rec) in rd.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| schema(line, e.to_string()))?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let int = |j: usize| -> Result<u32> {
                field(j)
                    .parse()
                    .map_err(|_| schema(line, format!("{}: not an integer: {:?}", CSV_HEADER[j], field(j))))
            };
            match &env_id {
                None => env_id = Some(field(0).to_string()),
                Some(e) if e != field(0) => {
                    return Err(schema(line, format!("mixed env ids {e:?} and {:?}", field(0))));
                }
                _ => {}
            }
            let key = (int(1)?, int(2)?, int(3)?);
            let metric = MetricId::parse(field(4), field(5)).map_err(|e| schema(line, e.to_string()))?;
            if field(6) != metric.direction().as_str() {
                return Err(schema(line, format!("direction {:?} does not match {metric}", field(6))));
            }
            let value: f64 = field(7)
                .parse()
                .map_err(|_| schema(line, format!("value: not a number: {:?}", field(7))))?;
            if !value.is_finite() {
                return Err(schema(line, format!("non-finite value {value}")));
            }
            if rows.entry(key).or_default().insert(metric, value).is_some() {
                return Err(schema(line, format!("duplicate {metric} for {key:?}")));
            }
        }
        let env_id = env_id.ok_or_else(|| schema(1, "no data rows".into()))?;
        let rows: Vec<MetricRow> = rows
            .into_iter()
            .map(|((c, s, k), values)| MetricRow {
                config_id: c,
                seed: s,
                checkpoint: k,
                values,
            })
            .collect();
        MetricTable::from_rows(env_id, &rows)
    }
}

#[derive(Clone, Copy)]
pub struct Column<'a> {
    table: &'a MetricTable,
    mi: usize,
}

impl Column<'_> {
    pub fn at(&self, ci: usize, si: usize, k: usize) -> f64 {
        self.table.values[self.table.offset(ci, si, k) + self.mi]
    }
}
