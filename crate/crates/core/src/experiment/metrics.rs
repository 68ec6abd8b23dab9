//! FCT and queue summaries plus the CSV formats they are read from.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::sim::{QueueSample, StateRecord, Topology};
use crate::transport::{FctRecord, FlowClass};
use crate::units::{KB, MB};

pub const FCT_HEADER: &str = "flow_id,src,dst,size,start_ns,fct_ns,norm_fct,class";
pub const QUEUE_HEADER: &str = "t_ns,switch,port,qlen_bytes";
pub const STATES_HEADER: &str = "t_ns,port,qlen,tx,txm,kmin,kmax,pmax,incast,ratio";

/// Flow-size buckets used in every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    /// (0, 100 KB]
    Small,
    /// (100 KB, 10 MB)
    Medium,
    /// [10 MB, inf)
    Large,
    All,
}

impl Bucket {
    pub const SIZED: [Bucket; 3] = [Bucket::Small, Bucket::Medium, Bucket::Large];

    pub fn of(size: u64) -> Bucket {
        if size <= 100 * KB {
            Bucket::Small
        } else if size < 10 * MB {
            Bucket::Medium
        } else {
            Bucket::Large
        }
    }

    pub fn contains(&self, size: u64) -> bool {
        *self == Bucket::All || Bucket::of(size) == *self
    }

    pub fn label(&self) -> &'static str {
        match self {
            Bucket::Small => "(0,100KB]",
            Bucket::Medium => "(100KB,10MB)",
            Bucket::Large => "[10MB,inf)",
            Bucket::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FctStats {
    pub bucket: Bucket,
    pub count: usize,
    /// Mean normalized FCT; `None` for an empty bucket.
    pub mean_norm: Option<f64>,
    pub p99_norm: Option<f64>,
    pub mean_fct_ns: Option<f64>,
}

/// Nearest-rank percentile (`p` in (0, 100]).
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn bucket_stats(records: &[FctRecord], bucket: Bucket) -> FctStats {
    let sel: Vec<&FctRecord> = records.iter().filter(|r| bucket.contains(r.size)).collect();
    let norm: Vec<f64> = sel.iter().map(|r| r.norm_fct).collect();
    let raw: Vec<f64> = sel.iter().map(|r| r.fct_ns as f64).collect();
    FctStats {
        bucket,
        count: sel.len(),
        mean_norm: mean(&norm),
        p99_norm: percentile_nearest_rank(&norm, 99.0),
        mean_fct_ns: mean(&raw),
    }
}

/// Per-bucket statistics followed by the overall row.
pub fn summarize_fct(records: &[FctRecord]) -> Vec<FctStats> {
    Bucket::SIZED
        .iter()
        .chain(std::iter::once(&Bucket::All))
        .map(|b| bucket_stats(records, *b))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub start_ns: u64,
    pub end_ns: u64,
    pub label: String,
    pub fct: Vec<FctStats>,
}

/// Splits records by flow start time at the given boundaries.
pub fn summarize_regimes(records: &[FctRecord], boundaries: &[(u64, String)], end_ns: u64) -> Vec<RegimeSummary> {
    let mut edges: Vec<(u64, String)> = vec![(0, "start".into())];
    edges.extend(boundaries.iter().filter(|(t, _)| *t > 0 && *t < end_ns).cloned());
    (0..edges.len())
        .map(|i| {
            let (lo, label) = edges[i].clone();
            let hi = edges.get(i + 1).map(|e| e.0).unwrap_or(end_ns);
            let sel: Vec<FctRecord> = records
                .iter()
                .filter(|r| r.start_ns >= lo && r.start_ns < hi)
                .cloned()
                .collect();
            RegimeSummary {
                start_ns: lo,
                end_ns: hi,
                label,
                fct: summarize_fct(&sel),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub samples: usize,
    pub mean_kb: f64,
    /// Population variance, KB^2.
    pub var_kb2: f64,
    pub max_kb: f64,
}

/// Statistics over all samples taken at or before `until_ns`.
pub fn summarize_queue(samples: &[QueueSample], until_ns: u64) -> Option<QueueSummary> {
    let v: Vec<f64> = samples
        .iter()
        .filter(|s| s.t_ns <= until_ns)
        .map(|s| s.qlen_bytes as f64 / KB as f64)
        .collect();
    let m = mean(&v)?;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    Some(QueueSummary {
        samples: v.len(),
        mean_kb: m,
        var_kb2: var,
        max_kb: v.iter().cloned().fold(0.0, f64::max),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FctRow {
    flow_id: u32,
    src: u16,
    dst: u16,
    size: u64,
    start_ns: u64,
    fct_ns: u64,
    norm_fct: f64,
    class: FlowClass,
}

pub fn write_fct_csv(path: &Path, records: &[FctRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(FctRow {
            flow_id: r.flow_id,
            src: r.src,
            dst: r.dst,
            size: r.size,
            start_ns: r.start_ns,
            fct_ns: r.fct_ns,
            norm_fct: r.norm_fct,
            class: r.class,
        })?;
    }
    if records.is_empty() {
        w.write_record(FCT_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fct_csv(path: &Path) -> Result<Vec<FctRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.iter().collect::<Vec<_>>().join(",");
    if headers != FCT_HEADER {
        return Err(PetError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("unexpected header `{headers}`"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<FctRow>().enumerate() {
        let r = row.map_err(|e| PetError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        out.push(FctRecord {
            flow_id: r.flow_id,
            src: r.src,
            dst: r.dst,
            size: r.size,
            start_ns: r.start_ns,
            fct_ns: r.fct_ns,
            norm_fct: r.norm_fct,
            class: r.class,
        });
    }
    Ok(out)
}

pub fn write_queue_csv(path: &Path, topo: &Topology, samples: &[QueueSample]) -> Result<()> {
    let ports = topo.ports();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{QUEUE_HEADER}")?;
    for s in samples {
        let (sw, local) = ports[s.port].switch_label(topo);
        writeln!(w, "{},{},{},{}", s.t_ns, sw, local, s.qlen_bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads queue samples back; the `port` field holds the switch-local index.
pub fn read_queue_csv(path: &Path) -> Result<Vec<QueueSample>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let parse = |idx: usize| -> Result<u64> {
            rec.get(idx).and_then(|v| v.parse().ok()).ok_or_else(|| PetError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("bad field {idx}"),
            })
        };
        out.push(QueueSample {
            t_ns: parse(0)?,
            port: parse(2)? as usize,
            qlen_bytes: parse(3)?,
        });
    }
    Ok(out)
}

pub fn write_states_csv(path: &Path, log: &[StateRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{STATES_HEADER}")?;
    for r in log {
        let s = &r.state;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t_ns,
            r.port,
            s.qlen,
            s.tx_rate,
            s.tx_rate_marked,
            s.ecn_current.k_min,
            s.ecn_current.k_max,
            s.ecn_current.p_max,
            s.d_incast,
            s.r_flow
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Relative change of `ours` against `baseline`; negative means lower.
pub fn relative_change(ours: f64, baseline: f64) -> f64 {
    (ours - baseline) / baseline
}
