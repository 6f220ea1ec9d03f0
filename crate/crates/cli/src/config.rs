//! Simulation configuration files.
//!
//! A config lists scenarios explicitly, spans a grid, or both:
//!
//! ```json
//! {
//!   "replications": 10000,
//!   "seed": 20210701,
//!   "methods": ["noadjust", "bonferroni", "mmm.dfind"],
//!   "grid": { "total_n": [20, 50], "prop_target": [0.5, 0.8], "sd": [5],
//!             "family": "targeted-or-total" }
//! }
//! ```
//!
//! `replications` and `seed` override the per-scenario values.

use anyhow::bail;
use mmstack::simulator::{HypothesisFamily, Method, Scenario};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<Vec<Scenario>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub total_n: Vec<usize>,
    pub prop_target: Vec<f64>,
    pub sd: Vec<f64>,
    #[serde(default = "zero")]
    pub delta: Vec<f64>,
    pub family: HypothesisFamily,
    #[serde(default = "one")]
    pub endpoints: u8,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub overlap: bool,
}

fn zero() -> Vec<f64> {
    vec![0.0]
}

fn one() -> u8 {
    1
}

impl SimConfig {
    /// Explicit scenarios followed by the grid, in row-major order
    /// (N, prop, sd, delta), with the global overrides applied.
    pub fn scenarios(&self) -> anyhow::Result<Vec<Scenario>> {
        let mut out = self.scenarios.clone().unwrap_or_default();
        if let Some(g) = &self.grid {
            for &n in &g.total_n {
                for &prop in &g.prop_target {
                    for &sd in &g.sd {
                        for &delta in &g.delta {
                            out.push(Scenario {
                                delta,
                                endpoints: g.endpoints,
                                rho: g.rho,
                                overlap: g.overlap,
                                ..Scenario::new(n, sd, prop, g.family)
                            });
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            bail!("config defines no scenarios");
        }
        for s in &mut out {
            if let Some(r) = self.replications {
                s.replications = r;
            }
            if let Some(seed) = self.seed {
                s.seed = seed;
            }
        }
        Ok(out)
    }

    /// The configured methods, or every method applicable to all scenarios.
    pub fn resolve_methods(&self, scenarios: &[Scenario]) -> anyhow::Result<Vec<Method>> {
        let methods = match &self.methods {
            Some(m) => m.clone(),
            None => Method::ALL
                .into_iter()
                .filter(|m| scenarios.iter().all(|s| Method::applicable(s).contains(m)))
                .collect(),
        };
        if methods.is_empty() {
            bail!("no methods selected");
        }
        Ok(methods)
    }
}
