use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::EncodingScheme;
use crate::dgp::{dgp_from_name, DgpSpec};
use crate::error::{Error, Result};
use crate::meta::{LearnerKind, MetaSpec};
use crate::nuisance::NuisanceSpec;
use crate::panel::InterventionPair;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "TVMETA_OUTPUT_DIR";

/// One experiment: a DGP, sample sizes, horizons, learners and seeds.
///
/// Loaded from TOML; every field can be overridden with `key=value`
/// (dotted keys reach nested tables, e.g. `nuisance.clip_eps=0.05`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registry name, e.g. `d1` or `d3:gamma=4`.
    pub dgp: String,
    /// Defaults to 10000 for `d2` and 5000 otherwise.
    pub n_train: Option<usize>,
    pub n_test: usize,
    pub taus: Vec<usize>,
    /// Explicit intervention pairs; when empty, the benchmark pair of every
    /// horizon in `taus` is used.
    pub pairs: Vec<InterventionPair>,
    pub learners: Vec<LearnerKind>,
    pub encoding: EncodingScheme,
    pub include_time_index: bool,
    pub nuisance: NuisanceSpec,
    pub meta: MetaSpec,
    pub split: bool,
    pub seeds: Vec<u64>,
    /// Falls back to `$TVMETA_OUTPUT_DIR`, then `results`.
    pub output_dir: Option<PathBuf>,
    /// Evaluate at this anchor time only instead of pooling over all `t`.
    pub eval_t: Option<usize>,
    /// Monte-Carlo budget for ground truth when no closed form exists.
    pub oracle_mc: usize,
    /// Write measured fit times; off keeps result files byte-reproducible.
    pub record_timing: bool,
    /// Shrink Monte-Carlo budgets tenfold.
    pub fast: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dgp: "d1".into(),
            n_train: None,
            n_test: 1000,
            taus: vec![0, 1, 2],
            pairs: Vec::new(),
            learners: LearnerKind::ALL.to_vec(),
            encoding: EncodingScheme::Windowed(1),
            include_time_index: true,
            nuisance: NuisanceSpec {
                regressor: crate::learners::RegressorSpec::tuned(),
                ..NuisanceSpec::default()
            },
            meta: MetaSpec::default(),
            split: true,
            seeds: (0..5).collect(),
            output_dir: None,
            eval_t: None,
            oracle_mc: 2000,
            record_timing: false,
            fast: false,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for a DGP.
    pub fn for_dgp(dgp: &str) -> Self {
        Self {
            dgp: dgp.into(),
            ..Self::default()
        }
    }

    pub fn n_train(&self) -> usize {
        self.n_train
            .unwrap_or_else(|| match DgpSpec::parse(&self.dgp).map(|s| s.base) {
                Ok(b) if b == "d2" => 10_000,
                _ => 5000,
            })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("results"))
        })
    }

    pub fn oracle_budget(&self) -> usize {
        if self.fast {
            (self.oracle_mc / 10).max(10)
        } else {
            self.oracle_mc
        }
    }

    /// Pairs to run, in order.
    pub fn resolved_pairs(&self) -> Vec<InterventionPair> {
        if self.pairs.is_empty() {
            self.taus
                .iter()
                .map(|&t| InterventionPair::benchmark(t))
                .collect()
        } else {
            self.pairs.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.n_train() == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be >= 1");
        }
        if self.learners.is_empty() {
            return bad("learners must be non-empty");
        }
        if self.pairs.is_empty() && self.taus.is_empty() {
            return bad("taus must be non-empty");
        }
        if self.oracle_mc == 0 {
            return bad("oracle_mc must be >= 1");
        }
        let dgp = dgp_from_name(&self.dgp)?;
        for pair in self.resolved_pairs() {
            pair.check_arity(dgp.treatment_arity())?;
            if pair.tau() >= dgp.horizon() {
                return Err(Error::HorizonTooLong {
                    tau: pair.tau(),
                    min_len: dgp.horizon(),
                });
            }
            if let Some(t) = self.eval_t {
                if t == 0 || t + pair.tau() > dgp.horizon() {
                    return bad("eval_t leaves no room for the horizon");
                }
            }
        }
        for k in &self.learners {
            if !k.supports(self.meta.estimand) {
                return Err(Error::InvalidArgument(format!(
                    "the {k} learner targets the CATE only"
                )));
            }
        }
        if self.split {
            let need = self
                .resolved_pairs()
                .iter()
                .map(|p| p.tau() + 3)
                .max()
                .unwrap_or(3);
            if self.n_train() < need {
                return Err(Error::TooFewTrajectories {
                    n: self.n_train(),
                    needed: need,
                });
            }
        }
        Ok(())
    }

    /// Parse a TOML document and apply `key=value` overrides on top.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        for (key, value) in overrides {
            set_path(&mut table, key, parse_override(value))?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from an optional file plus overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }
}

/// Split `key=value` (a leading `--` is ignored).
pub fn parse_key_value(arg: &str) -> Result<(String, String)> {
    let arg = arg.trim_start_matches("--");
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("expected key=value, got {arg:?}")))?;
    Ok((k.trim().replace('-', "_"), v.trim().to_string()))
}

/// TOML value if `raw` parses as one, a list for bare comma-separated
/// items, and a string otherwise.
fn parse_override(raw: &str) -> toml::Value {
    let parse_one = |s: &str| -> toml::Value {
        toml::from_str::<toml::Table>(&format!("v = {s}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(s.to_string()))
    };
    if let Ok(mut t) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    if raw.contains(',') {
        return toml::Value::Array(raw.split(',').map(|s| parse_one(s.trim())).collect());
    }
    toml::Value::String(raw.to_string())
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Parse(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Parse(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_benchmark_protocol() {
        let d1 = ExperimentConfig::for_dgp("d1");
        assert_eq!(d1.n_train(), 5000);
        assert_eq!(ExperimentConfig::for_dgp("d2").n_train(), 10_000);
        assert_eq!(ExperimentConfig::for_dgp("d3:gamma=2").n_train(), 5000);
        assert_eq!(d1.n_test, 1000);
        assert_eq!(d1.seeds.len(), 5);
        assert_eq!(d1.learners.len(), 6);
        d1.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let text = "dgp = \"d2\"\nseeds = [1, 2]\n[nuisance]\nclip_eps = 0.02\n";
        let ov = vec![
            parse_key_value("--n_test=50").unwrap(),
            parse_key_value("--nuisance.clip_eps=0.05").unwrap(),
            parse_key_value("--learners=dr,ivw-dr").unwrap(),
        ];
        let cfg = ExperimentConfig::from_toml_str(text, &ov).unwrap();
        assert_eq!(cfg.dgp, "d2");
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.n_test, 50);
        assert_eq!(cfg.nuisance.clip_eps, 0.05);
        assert_eq!(cfg.learners, vec![LearnerKind::Dr, LearnerKind::IvwDr]);
        let cfg = ExperimentConfig::from_toml_str("taus = [1]", &[]).unwrap();
        assert_eq!(cfg.resolved_pairs(), vec![InterventionPair::benchmark(1)]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("seeds = []", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("dgp = \"d9\"", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("taus = [5]", &[]).is_err());
        let capo_ra = "learners = [\"ra\"]\n[meta]\nestimand = \"capo\"\n";
        assert!(ExperimentConfig::from_toml_str(capo_ra, &[]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::for_dgp("d3:gamma=4");
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }
}
