//! Workload synthesis: flow-size CDFs, Poisson arrivals, incast bursts,
//! timed workload switching, and trace files.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::packet::HostId;
use crate::units::{SimTime, NS_PER_SEC};

const WEB_SEARCH_CDF: &str = include_str!("../data/web_search.cdf");
const DATA_MINING_CDF: &str = include_str!("../data/data_mining.cdf");

/// Piecewise-linear flow-size CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdf {
    points: Vec<(f64, f64)>,
}

impl Cdf {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(PetError::Config("cdf needs at least two points".into()));
        }
        if points[0].1 < 0.0 || points[0].0 < 1.0 {
            return Err(PetError::Config(
                "cdf must start at a positive size with probability >= 0".into(),
            ));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(PetError::Config(format!(
                    "cdf not strictly increasing between {:?} and {:?}",
                    w[0], w[1]
                )));
            }
        }
        let last = points.last().unwrap().1;
        if (last - 1.0).abs() > 1e-9 {
            return Err(PetError::Config(format!(
                "cdf must end at probability 1, got {last}"
            )));
        }
        Ok(Cdf { points })
    }

    /// Parses `size_bytes probability` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<f64> {
                tok.and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| PetError::Parse {
                        path: origin.to_path_buf(),
                        line: i + 1,
                        msg: format!("expected `size_bytes probability`, got `{line}`"),
                    })
            };
            let size = parse(it.next())?;
            let p = parse(it.next())?;
            if it.next().is_some() {
                return Err(PetError::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: "trailing fields".into(),
                });
            }
            points.push((size, p));
        }
        Cdf::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn web_search() -> Self {
        Self::parse(WEB_SEARCH_CDF, Path::new("web_search.cdf")).expect("bundled cdf")
    }

    pub fn data_mining() -> Self {
        Self::parse(DATA_MINING_CDF, Path::new("data_mining.cdf")).expect("bundled cdf")
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Mean flow size in bytes (uniform mass inside each segment).
    pub fn mean(&self) -> f64 {
        let mut mean = self.points[0].0 * self.points[0].1;
        for w in self.points.windows(2) {
            mean += (w[1].1 - w[0].1) * (w[0].0 + w[1].0) / 2.0;
        }
        mean
    }

    /// Probability that a flow is at most `size` bytes.
    pub fn prob(&self, size: f64) -> f64 {
        let first = self.points[0];
        if size < first.0 {
            return 0.0;
        }
        for w in self.points.windows(2) {
            if size <= w[1].0 {
                return w[0].1 + (w[1].1 - w[0].1) * (size - w[0].0) / (w[1].0 - w[0].0);
            }
        }
        1.0
    }

    /// Inverse CDF with linear interpolation in bytes.
    pub fn sample_flow_size(&self, u: f64) -> u64 {
        let first = self.points[0];
        if u <= first.1 {
            return first.0.round().max(1.0) as u64;
        }
        for w in self.points.windows(2) {
            let (s0, p0) = w[0];
            let (s1, p1) = w[1];
            if u <= p1 {
                let s = s0 + (s1 - s0) * (u - p0) / (p1 - p0);
                return s.round().max(1.0) as u64;
            }
        }
        self.points.last().unwrap().0.round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadName {
    WebSearch,
    DataMining,
    Custom,
}

impl fmt::Display for WorkloadName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkloadName::WebSearch => "web_search",
            WorkloadName::DataMining => "data_mining",
            WorkloadName::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncastSpec {
    pub fan_in: usize,
    pub period_ns: u64,
    pub response_bytes: u64,
}

impl Default for IncastSpec {
    fn default() -> Self {
        IncastSpec {
            fan_in: 8,
            period_ns: 10_000_000,
            response_bytes: 64 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub name: WorkloadName,
    pub cdf: Cdf,
    /// Offered load as a fraction of host downlink capacity.
    pub load: f64,
    pub incast: Option<IncastSpec>,
}

impl WorkloadSpec {
    pub fn new(name: WorkloadName, cdf: Cdf, load: f64, incast: Option<IncastSpec>) -> Result<Self> {
        let spec = WorkloadSpec {
            name,
            cdf,
            load,
            incast,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn web_search(load: f64) -> Result<Self> {
        Self::new(WorkloadName::WebSearch, Cdf::web_search(), load, None)
    }

    pub fn data_mining(load: f64) -> Result<Self> {
        Self::new(WorkloadName::DataMining, Cdf::data_mining(), load, None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.load > 0.0 && self.load < 1.0) {
            return Err(PetError::Config(format!(
                "load {} outside (0, 1)",
                self.load
            )));
        }
        if let Some(inc) = &self.incast {
            if inc.fan_in < 2 {
                return Err(PetError::Config("incast fan_in must be >= 2".into()));
            }
            if inc.period_ns == 0 || inc.response_bytes == 0 {
                return Err(PetError::Config(
                    "incast period and response size must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Exponential inter-arrival time, in nanoseconds, for one sender at the
/// given load: rate = load * link_rate / (8 * mean_size).
pub fn next_arrival<R: Rng + ?Sized>(rng: &mut R, load: f64, link_rate_bps: u64, mean_size: f64) -> u64 {
    let lambda = arrival_rate(load, link_rate_bps, mean_size);
    if lambda <= 0.0 || !lambda.is_finite() {
        return u64::MAX;
    }
    let secs = Exp::new(lambda).expect("positive rate").sample(rng);
    ((secs * NS_PER_SEC as f64).round() as u64).max(1)
}

/// Flows per second per sender.
pub fn arrival_rate(load: f64, link_rate_bps: u64, mean_size: f64) -> f64 {
    load * link_rate_bps as f64 / (8.0 * mean_size)
}

/// A flow to be started by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub start_ns: u64,
    pub src: HostId,
    pub dst: HostId,
    pub size_bytes: u64,
}

/// `fan_in` distinct senders, none equal to `receiver`, all sending
/// `response_size` bytes to it at time `at`.
pub fn make_incast_burst<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    receiver: HostId,
    response_size: u64,
    at: SimTime,
    host_count: usize,
) -> Result<Vec<FlowSpec>> {
    if fan_in < 2 {
        return Err(PetError::Config("incast fan_in must be >= 2".into()));
    }
    if fan_in > host_count.saturating_sub(1) {
        return Err(PetError::Config(format!(
            "incast fan_in {fan_in} exceeds the {} available senders",
            host_count.saturating_sub(1)
        )));
    }
    let picks = sample(rng, host_count - 1, fan_in);
    Ok(picks
        .iter()
        .map(|i| {
            // Skip over the receiver in the index space.
            let src = if i >= receiver as usize { i + 1 } else { i };
            FlowSpec {
                start_ns: at.as_ns(),
                src: src as HostId,
                dst: receiver,
                size_bytes: response_size,
            }
        })
        .collect())
}

/// Time-indexed sequence of workload regimes.
#[derive(Debug, Clone)]
pub struct WorkloadSchedule {
    regimes: Vec<(SimTime, WorkloadSpec)>,
}

impl WorkloadSchedule {
    pub fn new(initial: WorkloadSpec) -> Self {
        WorkloadSchedule {
            regimes: vec![(SimTime::ZERO, initial)],
        }
    }

    /// Arrivals at or after `at` draw from `to`. Switch times must be added
    /// in increasing order.
    pub fn switch_workload(&mut self, to: WorkloadSpec, at: SimTime) -> Result<()> {
        to.validate()?;
        let last = self.regimes.last().unwrap().0;
        if at <= last {
            return Err(PetError::Config(format!(
                "workload switch at {at} not after previous switch at {last}"
            )));
        }
        self.regimes.push((at, to));
        Ok(())
    }

    pub fn regime_index(&self, t: SimTime) -> usize {
        self.regimes.partition_point(|(at, _)| *at <= t) - 1
    }

    pub fn at(&self, t: SimTime) -> &WorkloadSpec {
        &self.regimes[self.regime_index(t)].1
    }

    pub fn regimes(&self) -> &[(SimTime, WorkloadSpec)] {
        &self.regimes
    }

    pub fn switch_times(&self) -> impl Iterator<Item = SimTime> + '_ {
        self.regimes.iter().skip(1).map(|(t, _)| *t)
    }
}

/// Draws the background flows of a whole run up front (used for traces).
pub fn generate_flows<R: Rng + ?Sized>(
    rng: &mut R,
    schedule: &WorkloadSchedule,
    host_count: usize,
    host_rate_bps: u64,
    duration: SimTime,
) -> Result<Vec<FlowSpec>> {
    if host_count < 2 {
        return Err(PetError::Config("need at least two hosts".into()));
    }
    let mut flows = Vec::new();
    for src in 0..host_count {
        let mut t = 0u64;
        loop {
            let spec = schedule.at(SimTime(t));
            let gap = next_arrival(rng, spec.load, host_rate_bps, spec.cdf.mean());
            t = t.saturating_add(gap);
            if t >= duration.as_ns() {
                break;
            }
            let spec = schedule.at(SimTime(t));
            let size = spec.cdf.sample_flow_size(rng.gen());
            let mut dst = rng.gen_range(0..host_count - 1);
            if dst >= src {
                dst += 1;
            }
            flows.push(FlowSpec {
                start_ns: t,
                src: src as HostId,
                dst: dst as HostId,
                size_bytes: size,
            });
        }
    }
    let mut t = 0u64;
    loop {
        let spec = schedule.at(SimTime(t));
        let Some(inc) = spec.incast else { break };
        t += inc.period_ns;
        if t >= duration.as_ns() {
            break;
        }
        let receiver = rng.gen_range(0..host_count) as HostId;
        flows.extend(make_incast_burst(
            rng,
            inc.fan_in,
            receiver,
            inc.response_bytes,
            SimTime(t),
            host_count,
        )?);
    }
    flows.sort_by_key(|f| (f.start_ns, f.src, f.dst));
    Ok(flows)
}

pub fn write_trace(path: &Path, flows: &[FlowSpec]) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    writeln!(out, "start_ns,src,dst,size_bytes")?;
    for f in flows {
        writeln!(out, "{},{},{},{}", f.start_ns, f.src, f.dst, f.size_bytes)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a `start_ns,src,dst,size_bytes` trace. Malformed lines are
/// reported with their 1-based line number.
pub fn read_trace(path: &Path) -> Result<Vec<FlowSpec>> {
    let reader = BufReader::new(File::open(path)?);
    let mut flows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 1 && trimmed.starts_with("start_ns")) {
            continue;
        }
        let err = |msg: String| PetError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let num = |idx: usize, name: &str| -> Result<u64> {
            fields[idx]
                .parse::<u64>()
                .map_err(|_| err(format!("bad {name} `{}`", fields[idx])))
        };
        let spec = FlowSpec {
            start_ns: num(0, "start_ns")?,
            src: num(1, "src")? as HostId,
            dst: num(2, "dst")? as HostId,
            size_bytes: num(3, "size_bytes")?,
        };
        if spec.size_bytes == 0 {
            return Err(err("size_bytes must be positive".into()));
        }
        if spec.src == spec.dst {
            return Err(err("src equals dst".into()));
        }
        flows.push(spec);
    }
    Ok(flows)
}
