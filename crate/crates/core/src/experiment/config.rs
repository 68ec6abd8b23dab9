//! Scenario files (TOML) and their validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::training::AgentSetup;
use crate::agent::RewardSpec;
use crate::error::{PetError, Result};
use crate::learner::ppo::Hyperparams;
use crate::ncm::{IDX_INCAST, IDX_RATIO};
use crate::queue::EcnConfig;
use crate::sim::{default_delta_t, SimConfig, Topology};
use crate::traffic::{Cdf, IncastSpec, WorkloadName, WorkloadSchedule, WorkloadSpec};
use crate::transport::DctcpParams;
use crate::units::{SimTime, KB, NS_PER_SEC, NS_PER_US};

fn field_err(field: &str, msg: impl std::fmt::Display) -> PetError {
    PetError::Config(format!("field `{field}`: {msg}"))
}

fn secs_to_ns(s: f64) -> u64 {
    (s * NS_PER_SEC as f64).round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// `web_search`, `data_mining` or `custom`.
    pub name: String,
    /// Required for `custom`; overrides the bundled table otherwise.
    #[serde(default)]
    pub cdf_file: Option<PathBuf>,
    #[serde(default)]
    pub incast: Option<IncastSpec>,
}

impl WorkloadConfig {
    pub fn web_search() -> Self {
        WorkloadConfig {
            name: "web_search".into(),
            cdf_file: None,
            incast: None,
        }
    }

    fn resolve(&self, field: &str, load: f64, base: &Path) -> Result<WorkloadSpec> {
        let name = match self.name.as_str() {
            "web_search" => WorkloadName::WebSearch,
            "data_mining" => WorkloadName::DataMining,
            "custom" => WorkloadName::Custom,
            other => {
                return Err(field_err(
                    &format!("{field}.name"),
                    format!("unknown workload `{other}` (expected web_search, data_mining or custom)"),
                ))
            }
        };
        let cdf = match (&self.cdf_file, name) {
            (Some(p), _) => Cdf::load(&base.join(p))?,
            (None, WorkloadName::WebSearch) => Cdf::web_search(),
            (None, WorkloadName::DataMining) => Cdf::data_mining(),
            (None, WorkloadName::Custom) => {
                return Err(field_err(&format!("{field}.cdf_file"), "required for a custom workload"))
            }
        };
        WorkloadSpec::new(name, cdf, load, self.incast).map_err(|e| field_err(field, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchConfig {
    pub at_s: f64,
    pub workload: WorkloadConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureConfig {
    /// Fraction of fabric links taken down (at least one).
    pub fraction: f64,
    pub down_at_s: f64,
    pub up_at_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedConfig {
    pub k_min_kb: u64,
    pub k_max_kb: u64,
    pub p_max: f64,
}

/// A scheme entry: a bare name or a `{ fixed = { ... } }` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeEntry {
    Name(String),
    Fixed { fixed: FixedConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Pet,
    Secn1,
    Secn2,
    Fixed(EcnConfig),
}

impl Scheme {
    pub fn label(&self) -> String {
        match self {
            Scheme::Pet => "pet".into(),
            Scheme::Secn1 => "secn1".into(),
            Scheme::Secn2 => "secn2".into(),
            Scheme::Fixed(c) => format!("fixed_{}_{}_{}", c.k_min / KB, c.k_max / KB, (c.p_max * 100.0).round()),
        }
    }

    /// Static configuration for baseline schemes.
    pub fn static_config(&self, p_max: f64) -> Option<EcnConfig> {
        match self {
            Scheme::Pet => None,
            Scheme::Secn1 => Some(EcnConfig::secn1(p_max)),
            Scheme::Secn2 => Some(EcnConfig::secn2(p_max)),
            Scheme::Fixed(c) => Some(*c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetEval {
    /// Keep learning during the measured run.
    Online,
    /// Greedy actions with parameters frozen.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PetConfig {
    /// Start from this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
    pub pretrain_episodes: usize,
    pub pretrain_traces: usize,
    pub pretrain_duration_s: f64,
    /// Online warm-up before the measured run, on separate traffic.
    pub online_s: f64,
    pub eval: PetEval,
    pub hp: Hyperparams,
    /// `default` or `low_lambda`.
    pub gae_preset: String,
    /// Defaults to the preset of the first workload.
    pub reward: Option<RewardSpec>,
    /// State components zeroed out: any of `incast`, `ratio`.
    pub masked: Vec<String>,
}

impl Default for PetConfig {
    fn default() -> Self {
        PetConfig {
            checkpoint: None,
            pretrain_episodes: 0,
            pretrain_traces: 4,
            pretrain_duration_s: 0.03,
            online_s: 0.0,
            eval: PetEval::Online,
            hp: Hyperparams::default(),
            gae_preset: "default".into(),
            reward: None,
            masked: Vec::new(),
        }
    }
}

/// Raw scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "WorkloadConfig::web_search")]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub switches: Vec<SwitchConfig>,
    #[serde(default = "default_loads")]
    pub loads: Vec<f64>,
    /// Single-scheme shorthand for `schemes`.
    #[serde(default)]
    pub scheme: Option<SchemeEntry>,
    #[serde(default)]
    pub schemes: Vec<SchemeEntry>,
    /// P_max used by the SECN baselines.
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default)]
    pub failures: Option<FailureConfig>,
    pub duration_s: f64,
    #[serde(default = "default_drain")]
    pub drain_s: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub pet: PetConfig,
    #[serde(default)]
    pub delta_t_us: Option<u64>,
    #[serde(default)]
    pub host_ecn: Option<EcnConfig>,
    #[serde(default)]
    pub record_states: bool,
    #[serde(default = "default_true")]
    pub record_queue: bool,
}

fn default_loads() -> Vec<f64> {
    vec![0.6]
}

fn default_p_max() -> f64 {
    0.2
}

fn default_drain() -> f64 {
    0.2
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_true() -> bool {
    true
}

/// A validated scenario with every reference resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub schemes: Vec<Scheme>,
    /// One schedule per load level.
    pub schedules: Vec<(f64, WorkloadSchedule)>,
    pub duration_ns: u64,
    pub drain_ns: u64,
    pub failures: Option<(f64, u64, u64)>,
    pub setup: AgentSetup,
    pub checkpoint: Option<PathBuf>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| PetError::Config(e.to_string()))?;
        Self::from_file(file, base)
    }

    pub fn from_file(file: ScenarioFile, base: &Path) -> Result<Self> {
        file.topology.validate().map_err(|e| field_err("topology", e))?;
        if !(file.duration_s > 0.0 && file.duration_s.is_finite()) {
            return Err(field_err("duration_s", "must be positive"));
        }
        if !(file.drain_s >= 0.0 && file.drain_s.is_finite()) {
            return Err(field_err("drain_s", "must be non-negative"));
        }
        if file.seeds.is_empty() {
            return Err(field_err("seeds", "at least one seed is required"));
        }
        if file.loads.is_empty() {
            return Err(field_err("loads", "at least one load is required"));
        }
        if !(file.p_max > 0.0 && file.p_max <= 1.0) {
            return Err(field_err("p_max", "must lie in (0, 1]"));
        }

        let mut entries: Vec<(String, SchemeEntry)> = Vec::new();
        if let Some(s) = &file.scheme {
            entries.push(("scheme".into(), s.clone()));
        }
        for (i, s) in file.schemes.iter().enumerate() {
            entries.push((format!("schemes[{i}]"), s.clone()));
        }
        if entries.is_empty() {
            return Err(field_err("schemes", "no scheme given"));
        }
        let mut schemes = Vec::new();
        for (field, e) in entries {
            let s = match e {
                SchemeEntry::Name(n) => match n.as_str() {
                    "pet" => Scheme::Pet,
                    "secn1" => Scheme::Secn1,
                    "secn2" => Scheme::Secn2,
                    "fixed" => return Err(field_err(&field, "`fixed` needs a table: { fixed = { k_min_kb, k_max_kb, p_max } }")),
                    other => {
                        return Err(field_err(
                            &field,
                            format!("unknown scheme `{other}` (expected pet, secn1, secn2 or fixed)"),
                        ))
                    }
                },
                SchemeEntry::Fixed { fixed } => Scheme::Fixed(
                    EcnConfig::from_kb(fixed.k_min_kb, fixed.k_max_kb, fixed.p_max).map_err(|e| field_err(&field, e))?,
                ),
            };
            if !schemes.contains(&s) {
                schemes.push(s);
            }
        }

        let mut schedules = Vec::new();
        for (i, &load) in file.loads.iter().enumerate() {
            if !(load > 0.0 && load < 1.0) {
                return Err(field_err(&format!("loads[{i}]"), format!("{load} is not in (0, 1)")));
            }
            let mut sched = WorkloadSchedule::new(file.workload.resolve("workload", load, base)?);
            for (j, sw) in file.switches.iter().enumerate() {
                let field = format!("switches[{j}]");
                if !(sw.at_s > 0.0) {
                    return Err(field_err(&format!("{field}.at_s"), "must be positive"));
                }
                let spec = sw.workload.resolve(&format!("{field}.workload"), load, base)?;
                sched
                    .switch_workload(spec, SimTime(secs_to_ns(sw.at_s)))
                    .map_err(|e| field_err(&field, e))?;
            }
            schedules.push((load, sched));
        }

        let failures = match file.failures {
            None => None,
            Some(f) => {
                if !(f.fraction > 0.0 && f.fraction <= 1.0) {
                    return Err(field_err("failures.fraction", "must lie in (0, 1]"));
                }
                if !(f.down_at_s >= 0.0 && f.up_at_s > f.down_at_s) {
                    return Err(field_err("failures", "need 0 <= down_at_s < up_at_s"));
                }
                Some((f.fraction, secs_to_ns(f.down_at_s), secs_to_ns(f.up_at_s)))
            }
        };

        let mut hp = file.pet.hp.clone();
        match file.pet.gae_preset.as_str() {
            "default" => {}
            "low_lambda" => hp.lambda = Hyperparams::low_lambda().lambda,
            other => {
                return Err(field_err(
                    "pet.gae_preset",
                    format!("unknown preset `{other}` (expected default or low_lambda)"),
                ))
            }
        }
        hp.validate().map_err(|e| field_err("pet.hp", e))?;
        let reward = match file.pet.reward {
            Some(r) => {
                r.validate().map_err(|e| field_err("pet.reward", e))?;
                r
            }
            None if file.workload.name == "data_mining" => RewardSpec::data_mining(),
            None => RewardSpec::web_search(),
        };
        let mut masked = Vec::new();
        for (i, m) in file.pet.masked.iter().enumerate() {
            masked.push(match m.as_str() {
                "incast" => IDX_INCAST,
                "ratio" => IDX_RATIO,
                other => {
                    return Err(field_err(
                        &format!("pet.masked[{i}]"),
                        format!("unknown component `{other}` (expected incast or ratio)"),
                    ))
                }
            });
        }
        if !(file.pet.pretrain_duration_s > 0.0) {
            return Err(field_err("pet.pretrain_duration_s", "must be positive"));
        }
        if !(file.pet.online_s >= 0.0) {
            return Err(field_err("pet.online_s", "must be non-negative"));
        }
        if file.pet.pretrain_traces == 0 {
            return Err(field_err("pet.pretrain_traces", "must be at least 1"));
        }
        let setup = AgentSetup {
            hp,
            reward,
            masked,
            initial: EcnConfig::secn2(file.p_max),
            ..AgentSetup::default()
        };
        let checkpoint = file.pet.checkpoint.as_ref().map(|p| base.join(p));
        let scenario = Scenario {
            schemes,
            schedules,
            duration_ns: secs_to_ns(file.duration_s),
            drain_ns: secs_to_ns(file.drain_s),
            failures,
            setup,
            checkpoint,
            file,
        };
        scenario.sim_config(0).map_err(|e| field_err("delta_t_us", e))?;
        Ok(scenario)
    }

    pub fn sim_config(&self, seed: u64) -> Result<SimConfig> {
        let mut cfg = SimConfig::new(self.file.topology, seed);
        cfg.k = self.setup.hp.k;
        cfg.delta_t_ns = match self.file.delta_t_us {
            Some(us) => us * NS_PER_US,
            None => {
                let d = default_delta_t(&self.file.topology, &DctcpParams::default());
                d.div_ceil(cfg.k as u64) * cfg.k as u64
            }
        };
        if let Some(h) = self.file.host_ecn {
            cfg.host_ecn = h;
        }
        cfg.record_states = self.file.record_states;
        cfg.record_queue = self.file.record_queue;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Times at which the regime changes (workload switches and failure
    /// transitions), sorted.
    pub fn regime_boundaries(&self) -> Vec<(u64, String)> {
        let mut b: Vec<(u64, String)> = self
            .file
            .switches
            .iter()
            .map(|s| (secs_to_ns(s.at_s), format!("switch to {}", s.workload.name)))
            .collect();
        if let Some((_, down, up)) = self.failures {
            b.push((down, "links down".into()));
            b.push((up, "links restored".into()));
        }
        b.sort_by_key(|(t, _)| *t);
        b
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.file).unwrap_or(serde_json::Value::Null)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
duration_s = 0.01
schemes = ["secn1", "pet", { fixed = { k_min_kb = 20, k_max_kb = 80, p_max = 0.5 } }]
"#;

    #[test]
    fn parses_minimal_scenario() {
        let s = Scenario::parse(BASE, Path::new(".")).unwrap();
        assert_eq!(s.schemes.len(), 3);
        assert_eq!(s.schemes[0], Scheme::Secn1);
        assert_eq!(s.schemes[2], Scheme::Fixed(EcnConfig::from_kb(20, 80, 0.5).unwrap()));
        assert_eq!(s.duration_ns, 10_000_000);
        assert_eq!(s.sim_config(3).unwrap().delta_t_ns, 344_000);
    }

    #[test]
    fn unknown_scheme_names_the_field() {
        let text = BASE.replace("\"pet\"", "\"bogus\"");
        let err = Scenario::parse(&text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("schemes[1]"), "{err}");
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn scheme_alias_and_bad_fields() {
        let s = Scenario::parse("name='a'\nduration_s=0.1\nscheme='secn2'\n", Path::new(".")).unwrap();
        assert_eq!(s.schemes, vec![Scheme::Secn2]);
        let err = Scenario::parse("name='a'\nduration_s=0.1\nscheme='secn2'\nloads=[1.5]\n", Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("loads[0]"), "{err}");
        let err = Scenario::parse("name='a'\nduration_s=0.1\nscheme='secn2'\nbogus=1\n", Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn switches_and_failures_define_regimes() {
        let text = r#"
name = "sw"
duration_s = 10.0
scheme = "secn2"
switches = [
  { at_s = 4.1, workload = { name = "data_mining" } },
  { at_s = 8.1, workload = { name = "web_search" } },
  { at_s = 9.1, workload = { name = "data_mining" } },
]
failures = { fraction = 0.1, down_at_s = 3.1, up_at_s = 6.1 }
"#;
        let s = Scenario::parse(text, Path::new(".")).unwrap();
        let b: Vec<u64> = s.regime_boundaries().iter().map(|(t, _)| *t).collect();
        assert_eq!(b, vec![3_100_000_000, 4_100_000_000, 6_100_000_000, 8_100_000_000, 9_100_000_000]);
        assert_eq!(s.schedules[0].1.regimes().len(), 4);
    }
}
