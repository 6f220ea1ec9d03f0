//! Published reference values bundled as CSV fixtures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{run, HypothesisFamily, Method, Scenario};

const A2: &str = include_str!("../data/a2.csv");
const A3: &str = include_str!("../data/a3.csv");
const A4: &str = include_str!("../data/a4.csv");
const A5_TT: &str = include_str!("../data/a5_tt.csv");
const A5_ANY: &str = include_str!("../data/a5_any.csv");
const A6_TT: &str = include_str!("../data/a6_tt.csv");
const A6_ANY: &str = include_str!("../data/a6_any.csv");

/// Published familywise error rate tables (sd = 5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TableId {
    /// One subgroup definition, family "targeted or total".
    A3,
    /// One subgroup definition, family "any".
    A4,
    /// Two overlapping subgroup definitions, "targeted or total".
    A5,
    /// Two overlapping subgroup definitions, "any".
    A5Any,
    /// Two endpoints with correlation 0.8, "targeted or total".
    A6,
    /// Two endpoints with correlation 0.8, "any".
    A6Any,
}

impl TableId {
    pub const ALL: [TableId; 6] = [
        TableId::A3,
        TableId::A4,
        TableId::A5,
        TableId::A5Any,
        TableId::A6,
        TableId::A6Any,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TableId::A3 => "a3",
            TableId::A4 => "a4",
            TableId::A5 => "a5",
            TableId::A5Any => "a5-any",
            TableId::A6 => "a6",
            TableId::A6Any => "a6-any",
        }
    }

    fn source(self) -> &'static str {
        match self {
            TableId::A3 => A3,
            TableId::A4 => A4,
            TableId::A5 => A5_TT,
            TableId::A5Any => A5_ANY,
            TableId::A6 => A6_TT,
            TableId::A6Any => A6_ANY,
        }
    }

    /// Scenario of one table cell, with sd 5 and no effect.
    pub fn scenario(self, total_n: usize, prop_target: f64) -> Scenario {
        let family = match self {
            TableId::A3 | TableId::A5 | TableId::A6 => HypothesisFamily::TargetedOrTotal,
            _ => HypothesisFamily::Any,
        };
        let s = Scenario::new(total_n, 5.0, prop_target, family);
        match self {
            TableId::A5 | TableId::A5Any => s.with_overlap(),
            TableId::A6 | TableId::A6Any => s.with_two_endpoints(0.8),
            _ => s,
        }
    }
}

impl std::str::FromStr for TableId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TableId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown table `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublishedRow {
    pub total_n: usize,
    pub prop_target: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublishedTable {
    pub id: TableId,
    pub methods: Vec<Method>,
    pub rows: Vec<PublishedRow>,
}

impl PublishedTable {
    pub fn value(&self, total_n: usize, prop_target: f64, method: Method) -> Option<f64> {
        let col = self.methods.iter().position(|m| *m == method)?;
        self.rows
            .iter()
            .find(|r| r.total_n == total_n && (r.prop_target - prop_target).abs() < 1e-9)
            .map(|r| r.values[col])
    }
}

pub fn table(id: TableId) -> PublishedTable {
    let mut rdr = csv::Reader::from_reader(id.source().as_bytes());
    let headers = rdr.headers().expect("fixture header").clone();
    let methods: Vec<Method> = headers
        .iter()
        .skip(2)
        .map(|h| h.parse().expect("fixture method column"))
        .collect();
    let rows = rdr
        .records()
        .map(|rec| {
            let rec = rec.expect("fixture row");
            let num = |i: usize| rec[i].parse::<f64>().expect("fixture number");
            PublishedRow {
                total_n: num(0) as usize,
                prop_target: num(1),
                values: (2..rec.len()).map(num).collect(),
            }
        })
        .collect();
    PublishedTable { id, methods, rows }
}

/// One row of the published case-study table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CaseStudyRow {
    pub group: String,
    pub endpoint: String,
    pub or: f64,
    pub noadjust_lower: f64,
    pub noadjust_p: f64,
    pub bonferroni_lower: f64,
    pub bonferroni_p: f64,
    pub mmm_lower: f64,
    pub mmm_p: f64,
}

pub fn case_study() -> Vec<CaseStudyRow> {
    csv::Reader::from_reader(A2.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("fixture rows")
}

/// Published power differences in percentage points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerClaim {
    pub label: &'static str,
    pub total_n: usize,
    pub sd: f64,
    /// Correlation of two endpoints; `None` for a single endpoint.
    pub rho: Option<f64>,
    pub better: Method,
    pub baseline: Method,
    pub gain_pp: f64,
    pub tolerance_pp: f64,
}

pub const POWER_CLAIMS: [PowerClaim; 4] = [
    PowerClaim {
        label: "mmm.dfind vs bonferroni, N=50, sd=10",
        total_n: 50,
        sd: 10.0,
        rho: None,
        better: Method::MmmDfInd,
        baseline: Method::Bonferroni,
        gain_pp: 5.47,
        tolerance_pp: 1.5,
    },
    PowerClaim {
        label: "cellmeans vs bonferroni, N=20, sd=2",
        total_n: 20,
        sd: 2.0,
        rho: None,
        better: Method::CellMeans,
        baseline: Method::Bonferroni,
        gain_pp: 13.8,
        tolerance_pp: 2.0,
    },
    PowerClaim {
        label: "two endpoints rho=0.8, mmm.dfind vs bonferroni, N=50, sd=5",
        total_n: 50,
        sd: 5.0,
        rho: Some(0.8),
        better: Method::MmmDfInd,
        baseline: Method::Bonferroni,
        gain_pp: 8.35,
        tolerance_pp: 2.0,
    },
    PowerClaim {
        label: "two endpoints rho=0.8, mmm.dfind vs bonferroni, N=50, sd=10",
        total_n: 50,
        sd: 10.0,
        rho: Some(0.8),
        better: Method::MmmDfInd,
        baseline: Method::Bonferroni,
        gain_pp: 8.50,
        tolerance_pp: 2.0,
    },
];

/// Agreement band for one simulated table cell: the published Monte Carlo
/// tolerance, widened to three binomial standard errors when `reps` is small.
pub fn cell_tolerance(base: f64, published: f64, reps: usize) -> f64 {
    let p = published.clamp(0.01, 0.99);
    base.max(3.0 * (p * (1.0 - p) / reps as f64).sqrt())
}

/// Replication count below which comparisons are flagged as low precision.
pub const FULL_PRECISION_REPS: usize = 10_000;

/// Agreement band of a table: tighter for the single-definition designs.
pub fn table_tolerance(id: TableId) -> f64 {
    match id {
        TableId::A3 | TableId::A4 => 0.012,
        _ => 0.015,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellComparison {
    pub total_n: usize,
    pub prop_target: f64,
    pub method: Method,
    pub published: f64,
    pub simulated: f64,
    pub tolerance: f64,
}

impl CellComparison {
    pub fn difference(&self) -> f64 {
        self.simulated - self.published
    }

    pub fn passes(&self) -> bool {
        self.difference().abs() <= self.tolerance
    }
}

/// Simulates the given `(N, prop)` cells of a table (all cells when `cells`
/// is empty) and lines them up against the published values.
pub fn compare_table(
    id: TableId,
    cells: &[(usize, f64)],
    reps: usize,
    seed: u64,
) -> Result<Vec<CellComparison>> {
    let published = table(id);
    let selected: Vec<&PublishedRow> = if cells.is_empty() {
        published.rows.iter().collect()
    } else {
        cells
            .iter()
            .map(|&(n, prop)| {
                published
                    .rows
                    .iter()
                    .find(|r| r.total_n == n && (r.prop_target - prop).abs() < 1e-9)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("table {} has no cell N={n}, prop={prop}", id.name()))
                    })
            })
            .collect::<Result<_>>()?
    };
    let mut out = Vec::new();
    for row in selected {
        let scenario = id
            .scenario(row.total_n, row.prop_target)
            .with_replications(reps)
            .with_seed(seed);
        let sim = run(&scenario, &published.methods)?;
        for ((&method, &pub_value), sim_value) in published.methods.iter().zip(&row.values).zip(sim.proportions()) {
            out.push(CellComparison {
                total_n: row.total_n,
                prop_target: row.prop_target,
                method,
                published: pub_value,
                simulated: sim_value,
                tolerance: cell_tolerance(table_tolerance(id), pub_value, reps),
            });
        }
    }
    Ok(out)
}

/// Effect sizes over which power gains are scanned.
pub const POWER_DELTAS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
/// Subgroup proportions scanned for power gains.
pub const POWER_PROPS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];
/// Baseline power above which larger effects are skipped: the gain there
/// is bounded by the remaining headroom.
const SATURATED: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainEstimate {
    pub label: &'static str,
    pub published_pp: f64,
    pub simulated_pp: f64,
    pub family: HypothesisFamily,
    pub prop_target: f64,
    pub delta: f64,
    pub tolerance_pp: f64,
}

impl GainEstimate {
    pub fn passes(&self) -> bool {
        (self.simulated_pp - self.published_pp).abs() <= self.tolerance_pp
    }
}

/// Largest power difference `better - baseline`, in percentage points, over
/// both hypothesis families, [`POWER_PROPS`] and [`POWER_DELTAS`]. All cells
/// share `seed`, so neighbouring effect sizes reuse the same noise.
pub fn power_gain(claim: &PowerClaim, reps: usize, seed: u64) -> Result<GainEstimate> {
    let methods = [claim.baseline, claim.better];
    let mut best: Option<GainEstimate> = None;
    for family in [HypothesisFamily::TargetedOrTotal, HypothesisFamily::Any] {
        for &prop in &POWER_PROPS {
            for &delta in &POWER_DELTAS {
                let mut s = Scenario::new(claim.total_n, claim.sd, prop, family)
                    .with_delta(delta)
                    .with_replications(reps)
                    .with_seed(seed);
                if let Some(rho) = claim.rho {
                    s = s.with_two_endpoints(rho);
                }
                let p = run(&s, &methods)?.proportions();
                let gain = 100.0 * (p[1] - p[0]);
                if best.as_ref().map_or(true, |b| gain > b.simulated_pp) {
                    best = Some(GainEstimate {
                        label: claim.label,
                        published_pp: claim.gain_pp,
                        simulated_pp: gain,
                        family,
                        prop_target: prop,
                        delta,
                        tolerance_pp: claim.tolerance_pp,
                    });
                }
                if p[0] >= SATURATED {
                    break;
                }
            }
        }
    }
    Ok(best.expect("the scan covers at least one cell"))
}
