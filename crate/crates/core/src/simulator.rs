//! Monte Carlo estimation of familywise error rate and power.
//!
//! Two-arm trials with a targeted subgroup and its complement. The effect
//! `delta` is added to every active-arm subject of the (first) targeted
//! subgroup. Every replicate draws from its own ChaCha stream derived from the
//! scenario seed and the replicate index, so results do not depend on thread
//! scheduling.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrasts::{contrast_estimates, fit_cell_means, ContrastMatrix};
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linmodels::{fit_ols, Alternative, Family, MarginalModel, ModelSpec};
use crate::mmm::{stack, DfMode};
use crate::mvdist::{marginal_sf, QuadratureSettings};

pub const ALPHA: f64 = 0.05;
pub const DEFAULT_SEED: u64 = 20_210_701;
const MAX_REGENERATIONS: u64 = 64;

/// Which hypotheses make up the tested family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HypothesisFamily {
    /// Total population and targeted subgroup(s).
    #[serde(rename = "targeted-or-total")]
    TargetedOrTotal,
    /// Total population, targeted subgroup(s) and complement(s).
    #[serde(rename = "any")]
    Any,
}

impl std::str::FromStr for HypothesisFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "targeted-or-total" | "tt" => Ok(HypothesisFamily::TargetedOrTotal),
            "any" => Ok(HypothesisFamily::Any),
            _ => Err(Error::InvalidArgument(format!("unknown hypothesis family `{s}`"))),
        }
    }
}

impl std::fmt::Display for HypothesisFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HypothesisFamily::TargetedOrTotal => "targeted-or-total",
            HypothesisFamily::Any => "any",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "noadjust")]
    NoAdjust,
    #[serde(rename = "bonferroni", alias = "ttest")]
    Bonferroni,
    #[serde(rename = "cellmeans")]
    CellMeans,
    #[serde(rename = "mmm")]
    Mmm,
    #[serde(rename = "mmm.dfmax")]
    MmmDfMax,
    #[serde(rename = "mmm.dfmin")]
    MmmDfMin,
    #[serde(rename = "mmm.dfind")]
    MmmDfInd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::NoAdjust,
        Method::Bonferroni,
        Method::CellMeans,
        Method::Mmm,
        Method::MmmDfMax,
        Method::MmmDfMin,
        Method::MmmDfInd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoAdjust => "noadjust",
            Method::Bonferroni => "bonferroni",
            Method::CellMeans => "cellmeans",
            Method::Mmm => "mmm",
            Method::MmmDfMax => "mmm.dfmax",
            Method::MmmDfMin => "mmm.dfmin",
            Method::MmmDfInd => "mmm.dfind",
        }
    }

    pub fn df_mode(self) -> Option<DfMode> {
        match self {
            Method::Mmm => Some(DfMode::Normal),
            Method::MmmDfMax => Some(DfMode::DfMax),
            Method::MmmDfMin => Some(DfMode::DfMin),
            Method::MmmDfInd => Some(DfMode::DfInd),
            _ => None,
        }
    }

    /// Methods applicable to a scenario, in canonical order.
    pub fn applicable(scenario: &Scenario) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|m| *m != Method::CellMeans || scenario.supports_cell_means())
            .collect()
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "ttest" {
            return Ok(Method::Bonferroni);
        }
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_endpoints() -> u8 {
    1
}
fn default_replications() -> usize {
    10_000
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub total_n: usize,
    pub sd: f64,
    pub prop_target: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_endpoints")]
    pub endpoints: u8,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub overlap: bool,
    pub family: HypothesisFamily,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Scenario {
    pub fn new(total_n: usize, sd: f64, prop_target: f64, family: HypothesisFamily) -> Self {
        Scenario {
            total_n,
            sd,
            prop_target,
            delta: 0.0,
            endpoints: 1,
            rho: 0.0,
            overlap: false,
            family,
            replications: default_replications(),
            seed: default_seed(),
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_replications(mut self, reps: usize) -> Self {
        self.replications = reps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_overlap(mut self) -> Self {
        self.overlap = true;
        self
    }

    pub fn with_two_endpoints(mut self, rho: f64) -> Self {
        self.endpoints = 2;
        self.rho = rho;
        self
    }

    pub fn per_arm(&self) -> usize {
        self.total_n / 2
    }

    /// Targeted subjects per arm.
    pub fn targeted_per_arm(&self) -> usize {
        (self.prop_target * self.per_arm() as f64).round() as usize
    }

    pub fn supports_cell_means(&self) -> bool {
        !self.overlap && self.endpoints == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.total_n % 2 != 0 || self.total_n < 8 {
            return bad(format!("total_n must be even and at least 8, got {}", self.total_n));
        }
        if !(self.sd > 0.0 && self.sd.is_finite()) {
            return bad(format!("sd must be positive, got {}", self.sd));
        }
        if !(self.prop_target > 0.0 && self.prop_target < 1.0) {
            return bad(format!("prop_target must be in (0, 1), got {}", self.prop_target));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad(format!("delta must be finite and non-negative, got {}", self.delta));
        }
        if !matches!(self.endpoints, 1 | 2) {
            return bad(format!("endpoints must be 1 or 2, got {}", self.endpoints));
        }
        if self.endpoints == 2 && !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho must be in (-1, 1), got {}", self.rho));
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        let k = self.targeted_per_arm();
        if k < 2 || self.per_arm() - k < 2 {
            return bad(format!(
                "subgroups need at least 2 subjects per arm; {k} of {} are targeted",
                self.per_arm()
            ));
        }
        Ok(())
    }

    fn endpoint_names(&self) -> Vec<String> {
        (1..=self.endpoints).map(|e| format!("y{e}")).collect()
    }

    /// Model specifications of the tested family, and whether each
    /// hypothesis is false (carries part of the effect) when `delta > 0`.
    pub fn hypotheses(&self) -> Vec<(ModelSpec, bool)> {
        let mut subsets: Vec<(&str, bool)> = vec![("all", true), ("target1", true)];
        if self.family == HypothesisFamily::Any {
            subsets.push(("compl1", false));
        }
        if self.overlap {
            // the second definition mixes effect-carrying subjects into both parts
            subsets.push(("target2", true));
            if self.family == HypothesisFamily::Any {
                subsets.push(("compl2", true));
            }
        }
        let mut out = Vec::new();
        for ep in self.endpoint_names() {
            for (subset, carries) in &subsets {
                out.push((
                    ModelSpec::new(&ep, subset, Family::GaussianIdentity).labelled(&format!("{subset}/{ep}")),
                    *carries,
                ));
            }
        }
        out
    }

    fn cell_means_rows(&self) -> Vec<usize> {
        match self.family {
            HypothesisFamily::TargetedOrTotal => vec![0, 2],
            HypothesisFamily::Any => vec![0, 1, 2],
        }
    }
}

fn replicate_rng(seed: u64, replicate: u64, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    // each regeneration skips far ahead within the replicate's stream
    rng.set_word_pos((attempt as u128) << 48);
    rng
}

fn generate_with(scenario: &Scenario, rng: &mut ChaCha8Rng) -> Dataset {
    let n_arm = scenario.per_arm();
    let k = scenario.targeted_per_arm();
    let n = 2 * n_arm;
    let mut arms = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for arm in [Arm::Reference, Arm::Active] {
        for i in 0..n_arm {
            arms.push(arm);
            target.push(i < k);
        }
    }
    let mut target2 = Vec::new();
    if scenario.overlap {
        for _ in 0..2 {
            let mut flags: Vec<bool> = (0..n_arm).map(|i| i < k).collect();
            flags.shuffle(rng);
            target2.extend(flags);
        }
    }
    let mut endpoints: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n); scenario.endpoints as usize];
    let rho_c = (1.0 - scenario.rho * scenario.rho).sqrt();
    for i in 0..n {
        let shift = if arms[i] == Arm::Active && target[i] { scenario.delta } else { 0.0 };
        let z1: f64 = StandardNormal.sample(rng);
        endpoints[0].push(Some(scenario.sd * z1 + shift));
        if scenario.endpoints == 2 {
            let z2: f64 = StandardNormal.sample(rng);
            let e2 = scenario.rho * z1 + rho_c * z2;
            endpoints[1].push(Some(scenario.sd * e2 + shift));
        }
    }
    let some = |v: &[bool], neg: bool| v.iter().map(|&b| Some(b != neg)).collect::<Vec<_>>();
    let mut ds = Dataset::new(["control".into(), "treatment".into()], arms)
        .and_then(|d| d.with_subgroup("target1", some(&target, false)))
        .and_then(|d| d.with_subgroup("compl1", some(&target, true)))
        .expect("simulated design is valid");
    if scenario.overlap {
        ds = ds
            .with_subgroup("target2", some(&target2, false))
            .and_then(|d| d.with_subgroup("compl2", some(&target2, true)))
            .expect("simulated design is valid");
    }
    for (name, y) in scenario.endpoint_names().iter().zip(endpoints) {
        ds = ds.with_response(name, y).expect("simulated design is valid");
    }
    ds
}

/// Dataset of one replicate, fully determined by the scenario seed and index.
pub fn generate(scenario: &Scenario, replicate: u64) -> Dataset {
    generate_with(scenario, &mut replicate_rng(scenario.seed, replicate, 0))
}

/// Whether `err` means the replicate has to be drawn again.
fn is_degenerate(err: &Error) -> bool {
    matches!(
        err,
        Error::DegenerateSubset { .. }
            | Error::ZeroVariance(_)
            | Error::EmptyCell { .. }
            | Error::DegenerateVariance(_)
    )
}

/// Decisions of every method on one dataset.
fn decide(
    scenario: &Scenario,
    ds: &Dataset,
    methods: &[Method],
    settings: &QuadratureSettings,
) -> Result<Vec<bool>> {
    let hyps = scenario.hypotheses();
    let models: Vec<MarginalModel> = hyps
        .iter()
        .map(|(spec, _)| fit_ols(ds, spec))
        .collect::<Result<_>>()?;
    // hypotheses that count: all of them under the null, the false ones otherwise
    let counted: Vec<usize> = if scenario.delta == 0.0 {
        (0..hyps.len()).collect()
    } else {
        (0..hyps.len()).filter(|&r| hyps[r].1).collect()
    };
    let k = hyps.len() as f64;
    let raw_p: Vec<f64> = models
        .iter()
        .map(|m| {
            let df = u32::try_from(m.residual_df).unwrap_or(u32::MAX);
            (2.0 * marginal_sf(m.statistic().abs(), Some(df))).min(1.0)
        })
        .collect();
    let mut fit = if methods.iter().any(|m| m.df_mode().is_some()) {
        Some(stack(models)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let rejected = match method {
            Method::NoAdjust => counted.iter().any(|&r| raw_p[r] < ALPHA),
            Method::Bonferroni => counted.iter().any(|&r| raw_p[r] < ALPHA / k),
            Method::CellMeans => {
                let cm = fit_cell_means(ds, "y1", "target1")?;
                let contrasts = ContrastMatrix::subgroup_default(&cm.cell_counts);
                let rows = scenario.cell_means_rows();
                // the complement row (1) is the only true hypothesis under an effect
                let among: Vec<usize> = (0..rows.len())
                    .filter(|&i| scenario.delta == 0.0 || rows[i] != 1)
                    .collect();
                let est = contrast_estimates(&cm, &contrasts, &rows)?;
                est.rejects_any(&among, Alternative::TwoSided, ALPHA, settings)?
            }
            _ => {
                let mode = method.df_mode().expect("mmm method");
                let fit = fit.as_mut().expect("stack fitted");
                fit.df_mode = mode;
                fit.rejects_any(&counted, Alternative::TwoSided, ALPHA, settings)?
            }
        };
        out.push(rejected);
    }
    Ok(out)
}

/// Rejection counts over all replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub rejections: Vec<usize>,
    pub replications: usize,
    /// Replicates drawn again because a model could not be fitted.
    pub regenerated: usize,
    pub wall_time_secs: f64,
}

impl SimResult {
    /// FWER when `delta = 0`, power otherwise.
    pub fn proportion(&self, method: Method) -> Option<f64> {
        self.methods
            .iter()
            .position(|m| *m == method)
            .map(|i| self.rejections[i] as f64 / self.replications as f64)
    }

    pub fn proportions(&self) -> Vec<f64> {
        self.rejections
            .iter()
            .map(|&r| r as f64 / self.replications as f64)
            .collect()
    }

    pub fn measure(&self) -> &'static str {
        if self.scenario.delta == 0.0 {
            "fwer"
        } else {
            "power"
        }
    }
}

/// Runs every replicate of `scenario` in parallel.
pub fn run(scenario: &Scenario, methods: &[Method]) -> Result<SimResult> {
    run_with(scenario, methods, &QuadratureSettings::default())
}

pub fn run_with(scenario: &Scenario, methods: &[Method], settings: &QuadratureSettings) -> Result<SimResult> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods selected".into()));
    }
    if methods.contains(&Method::CellMeans) && !scenario.supports_cell_means() {
        return Err(Error::IncompatibleMethod {
            method: "cellmeans".into(),
            reason: "the cell-means model handles a single endpoint and one subgroup definition".into(),
        });
    }
    let start = Instant::now();
    let outcomes: Vec<(Vec<bool>, u64)> = (0..scenario.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let mut attempt = 0;
            loop {
                let ds = generate_with(scenario, &mut replicate_rng(scenario.seed, rep, attempt));
                match decide(scenario, &ds, methods, settings) {
                    Ok(d) => return Ok((d, attempt)),
                    Err(e) if is_degenerate(&e) && attempt + 1 < MAX_REGENERATIONS => attempt += 1,
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut rejections = vec![0; methods.len()];
    let mut regenerated = 0;
    for (d, attempts) in &outcomes {
        for (c, &r) in rejections.iter_mut().zip(d) {
            *c += r as usize;
        }
        regenerated += *attempts as usize;
    }
    Ok(SimResult {
        scenario: scenario.clone(),
        methods: methods.to_vec(),
        rejections,
        replications: scenario.replications,
        regenerated,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Writes one row per result in the layout `N, prop_targ, <scenario
/// columns>, <one column per method>`. All results must share the method list.
pub fn write_results_csv<W: Write>(results: &[SimResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = results.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header: Vec<String> = [
        "N", "prop_targ", "sd", "delta", "endpoints", "rho", "overlap", "family", "measure", "reps", "seed",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(first.methods.iter().map(|m| m.as_str().to_string()));
    w.write_record(&header)?;
    for r in results {
        if r.methods != first.methods {
            return Err(Error::InvalidArgument("results have different method lists".into()));
        }
        let s = &r.scenario;
        let mut row = vec![
            s.total_n.to_string(),
            s.prop_target.to_string(),
            s.sd.to_string(),
            s.delta.to_string(),
            s.endpoints.to_string(),
            s.rho.to_string(),
            s.overlap.to_string(),
            s.family.to_string(),
            r.measure().to_string(),
            r.replications.to_string(),
            s.seed.to_string(),
        ];
        row.extend(r.proportions().iter().map(|p| format!("{p:.4}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Power of each method averaged over subgroup proportions, per effect size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub methods: Vec<Method>,
    pub deltas: Vec<f64>,
    /// `power[d][m]` for delta index `d` and method index `m`.
    pub power: Vec<Vec<f64>>,
}

impl PowerCurve {
    /// Largest difference `power(a) - power(b)` over the effect sizes, with
    /// the effect size where it occurs.
    pub fn max_gain(&self, a: Method, b: Method) -> Option<(f64, f64)> {
        let ia = self.methods.iter().position(|m| *m == a)?;
        let ib = self.methods.iter().position(|m| *m == b)?;
        self.deltas
            .iter()
            .zip(&self.power)
            .map(|(&d, p)| (p[ia] - p[ib], d))
            .max_by(|x, y| x.0.total_cmp(&y.0))
    }
}

/// Power curve over `deltas`, averaged over the subgroup proportions `props`.
/// Scenario fields other than `delta` and `prop_target` come from `template`;
/// every cell reuses the template seed.
pub fn power_curve(
    template: &Scenario,
    methods: &[Method],
    deltas: &[f64],
    props: &[f64],
) -> Result<PowerCurve> {
    let mut power = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut acc = vec![0.0; methods.len()];
        for &prop in props {
            let mut s = template.clone();
            s.delta = delta;
            s.prop_target = prop;
            let r = run(&s, methods)?;
            for (a, p) in acc.iter_mut().zip(r.proportions()) {
                *a += p / props.len() as f64;
            }
        }
        power.push(acc);
    }
    Ok(PowerCurve {
        methods: methods.to_vec(),
        deltas: deltas.to_vec(),
        power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_count_allocation() {
        let s = Scenario::new(20, 5.0, 0.5, HypothesisFamily::Any);
        let ds = generate(&s, 0);
        let t = ds.subgroup("target1").unwrap();
        for arm in [Arm::Reference, Arm::Active] {
            let count = ds
                .arms()
                .iter()
                .zip(t)
                .filter(|(a, f)| **a == arm && f.unwrap())
                .count();
            assert_eq!(count, 5);
        }
    }

    #[test]
    fn generation_is_deterministic_and_replicates_differ() {
        let s = Scenario::new(50, 5.0, 0.6, HypothesisFamily::Any).with_overlap();
        assert_eq!(generate(&s, 3), generate(&s, 3));
        assert_ne!(generate(&s, 3), generate(&s, 4));
    }

    #[test]
    fn overlap_definition_keeps_counts() {
        let s = Scenario::new(100, 5.0, 0.7, HypothesisFamily::Any).with_overlap();
        let ds = generate(&s, 1);
        let t2 = ds.subgroup("target2").unwrap();
        let n = t2.iter().filter(|f| f.unwrap()).count();
        assert_eq!(n, 2 * 35);
    }

    #[test]
    fn null_grand_mean_is_centred() {
        let s = Scenario::new(100, 5.0, 0.5, HypothesisFamily::Any);
        let mut sum = 0.0;
        let reps = 200;
        for r in 0..reps {
            sum += generate(&s, r).response("y1").unwrap().iter().map(|v| v.unwrap()).sum::<f64>();
        }
        let total = (100 * reps) as f64;
        assert!((sum / total).abs() < 4.0 * 5.0 / total.sqrt());
    }

    #[test]
    fn effect_lands_in_targeted_active_cell() {
        let s = Scenario::new(1000, 1.0, 0.5, HypothesisFamily::Any).with_delta(10.0);
        let ds = generate(&s, 0);
        let cm = fit_cell_means(&ds, "y1", "target1").unwrap();
        assert!((cm.cell_means[1] - 10.0).abs() < 0.5);
        for k in [0, 2, 3] {
            assert!(cm.cell_means[k].abs() < 0.5);
        }
    }

    #[test]
    fn family_sizes() {
        let tt = Scenario::new(20, 5.0, 0.5, HypothesisFamily::TargetedOrTotal);
        let any = Scenario::new(20, 5.0, 0.5, HypothesisFamily::Any);
        assert_eq!(tt.hypotheses().len(), 2);
        assert_eq!(any.hypotheses().len(), 3);
        assert_eq!(tt.clone().with_overlap().hypotheses().len(), 3);
        assert_eq!(any.clone().with_overlap().hypotheses().len(), 5);
        assert_eq!(tt.with_two_endpoints(0.8).hypotheses().len(), 4);
        assert_eq!(any.with_two_endpoints(0.8).hypotheses().len(), 6);
    }

    #[test]
    fn invalid_scenarios() {
        let ok = Scenario::new(20, 5.0, 0.5, HypothesisFamily::Any);
        assert!(ok.validate().is_ok());
        assert!(Scenario { total_n: 21, ..ok.clone() }.validate().is_err());
        assert!(Scenario { replications: 0, ..ok.clone() }.validate().is_err());
        assert!(Scenario { prop_target: 1.0, ..ok.clone() }.validate().is_err());
        assert!(matches!(
            run(&ok.clone().with_overlap(), &[Method::CellMeans]),
            Err(Error::IncompatibleMethod { .. })
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("ttest".parse::<Method>().unwrap(), Method::Bonferroni);
    }
}
