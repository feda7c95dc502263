use std::sync::Arc;

use super::{
    make_d1_with, make_d2_with, make_d3_with, make_linear, BinaryChainDgp, Dgp, NoiseConvention,
};
use crate::error::{Error, Result};

/// Parsed DGP name of the form `base[:key=value,...]`, e.g. `d1`,
/// `d3:gamma=4`, `d2:noise=variance,a0=1`, `linear:sigma=0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub base: String,
    pub params: Vec<(String, String)>,
}

impl DgpSpec {
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim();
        let (base, rest) = match name.split_once(':') {
            Some((b, r)) => (b, Some(r)),
            None => (name, None),
        };
        let mut params = Vec::new();
        if let Some(rest) = rest {
            for kv in rest.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::Parse(format!("DGP parameter {kv:?} is not key=value"))
                })?;
                params.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(Self {
            base: base.to_ascii_lowercase(),
            params,
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn real(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key).map_or(Ok(default), |v| {
            v.parse()
                .map_err(|_| Error::Parse(format!("bad value for {key}: {v}")))
        })
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, _) in &self.params {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Unknown {
                    what: "DGP parameter",
                    name: k.clone(),
                });
            }
        }
        Ok(())
    }

    fn convention(&self) -> Result<NoiseConvention> {
        match self.get("noise") {
            None | Some("std") | Some("stddev") => Ok(NoiseConvention::StdDev),
            Some("var") | Some("variance") => Ok(NoiseConvention::Variance),
            Some(other) => Err(Error::Parse(format!("unknown noise convention {other}"))),
        }
    }

    fn a0(&self) -> Result<usize> {
        self.get("a0").map_or(Ok(0), |v| {
            v.parse().map_err(|_| Error::Parse(format!("bad a0: {v}")))
        })
    }

    pub fn build(&self) -> Result<Arc<dyn Dgp>> {
        Ok(match self.base.as_str() {
            "d1" => {
                self.check_keys(&["noise", "a0"])?;
                Arc::new(make_d1_with(self.convention()?, self.a0()?))
            }
            "d2" => {
                self.check_keys(&["noise", "a0"])?;
                Arc::new(make_d2_with(self.convention()?, self.a0()?))
            }
            "d3" => {
                self.check_keys(&["gamma", "noise", "a0"])?;
                Arc::new(make_d3_with(
                    self.real("gamma", 1.0)?,
                    self.convention()?,
                    self.a0()?,
                )?)
            }
            "linear" => {
                self.check_keys(&["sigma"])?;
                Arc::new(make_linear(self.real("sigma", 0.5)?)?)
            }
            "binary-chain" => {
                self.check_keys(&["noise"])?;
                Arc::new(BinaryChainDgp {
                    outcome_noise: self.real("noise", 0.1)?,
                    ..Default::default()
                })
            }
            other => {
                return Err(Error::Unknown {
                    what: "DGP",
                    name: other.to_string(),
                })
            }
        })
    }
}

/// Look up a DGP by registry name.
pub fn dgp_from_name(name: &str) -> Result<Arc<dyn Dgp>> {
    DgpSpec::parse(name)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_resolve() {
        assert_eq!(dgp_from_name("d1").unwrap().name(), "d1");
        assert_eq!(dgp_from_name("d3:gamma=4").unwrap().name(), "d3:gamma=4");
        assert_eq!(dgp_from_name("D2").unwrap().name(), "d2");
        assert_eq!(
            dgp_from_name("d2:noise=variance,a0=1").unwrap().name(),
            "d2:noise=variance,a0=1"
        );
        assert_eq!(
            dgp_from_name("linear:sigma=0.5").unwrap().name(),
            "linear:sigma=0.5"
        );
        assert!(dgp_from_name("d4").is_err());
        assert!(dgp_from_name("d3:gamma=-2").is_err());
        assert!(dgp_from_name("d1:bogus=1").is_err());
    }

    #[test]
    fn names_round_trip_through_registry() {
        for name in [
            "d1",
            "d2:noise=variance",
            "d3:gamma=2.5,a0=1",
            "binary-chain",
        ] {
            let dgp = dgp_from_name(name).unwrap();
            assert_eq!(dgp_from_name(&dgp.name()).unwrap().name(), dgp.name());
        }
    }
}
