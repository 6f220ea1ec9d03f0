//! Marginal two-arm models: ordinary least squares for continuous endpoints
//! and binomial-logit for binary ones.
//!
//! Every fit returns the treatment coefficient together with its per-subject
//! influence terms `[(X'WX)^{-1} x_i u_i]_treatment`, where `u_i` is the
//! subject's estimating-function value. Subjects outside the subset or with a
//! missing response get an exact zero, so all models share one subject axis.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, ALL_SUBJECTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "gaussian-identity")]
    GaussianIdentity,
    #[serde(rename = "binomial-logit")]
    BinomialLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Alternative {
    #[default]
    #[serde(rename = "two-sided")]
    TwoSided,
    #[serde(rename = "greater")]
    Greater,
    #[serde(rename = "less")]
    Less,
}

impl std::str::FromStr for Alternative {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sided" | "two.sided" => Ok(Alternative::TwoSided),
            "greater" => Ok(Alternative::Greater),
            "less" => Ok(Alternative::Less),
            _ => Err(Error::InvalidArgument(format!("unknown alternative `{s}`"))),
        }
    }
}

impl std::fmt::Display for Alternative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Alternative::TwoSided => "two-sided",
            Alternative::Greater => "greater",
            Alternative::Less => "less",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub endpoint: String,
    #[serde(default = "all_subjects")]
    pub subset: String,
    pub family: Family,
    #[serde(default)]
    pub effect_direction: Alternative,
}

fn all_subjects() -> String {
    ALL_SUBJECTS.to_string()
}

impl ModelSpec {
    pub fn new(endpoint: &str, subset: &str, family: Family) -> Self {
        Self {
            label: None,
            endpoint: endpoint.to_string(),
            subset: subset.to_string(),
            family,
            effect_direction: Alternative::TwoSided,
        }
    }

    pub fn labelled(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn with_direction(mut self, direction: Alternative) -> Self {
        self.effect_direction = direction;
        self
    }

    pub fn display_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}/{}", self.subset, self.endpoint))
    }
}

/// One fitted marginal model.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalModel {
    pub spec: ModelSpec,
    /// Treatment effect: mean difference (gaussian) or log odds ratio (logit).
    pub coefficient: f64,
    /// Model-based standard error: pooled two-sample value for OLS, inverse
    /// Fisher information for the logit model.
    pub standard_error: f64,
    pub n_used: usize,
    pub residual_df: usize,
    /// Influence terms of the treatment coefficient, one per subject.
    pub score_contributions: Vec<f64>,
}

impl MarginalModel {
    pub fn statistic(&self) -> f64 {
        self.coefficient / self.standard_error
    }
}

/// Fits the model named by `spec.family`.
pub fn fit(data: &Dataset, spec: &ModelSpec) -> Result<MarginalModel> {
    match spec.family {
        Family::GaussianIdentity => fit_ols(data, spec),
        Family::BinomialLogit => fit_logit(data, spec),
    }
}

struct Used {
    idx: Vec<usize>,
    x: Vec<f64>,
    y: Vec<f64>,
    per_arm: [usize; 2],
}

fn used_subjects(data: &Dataset, spec: &ModelSpec) -> Result<Used> {
    let values = data
        .response(&spec.endpoint)
        .ok_or_else(|| Error::Schema(format!("unknown endpoint column `{}`", spec.endpoint)))?;
    let mask = data.subset_mask(&spec.subset)?;
    let mut used = Used {
        idx: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        per_arm: [0, 0],
    };
    for (i, (v, keep)) in values.iter().zip(mask).enumerate() {
        if let (Some(v), true) = (v, keep) {
            let arm = data.arms()[i];
            used.idx.push(i);
            used.x.push(if arm == Arm::Active { 1.0 } else { 0.0 });
            used.y.push(*v);
            used.per_arm[arm.index()] += 1;
        }
    }
    Ok(used)
}

fn check_arms(data: &Dataset, spec: &ModelSpec, used: &Used, min_per_arm: usize) -> Result<()> {
    for a in 0..2 {
        if used.per_arm[a] < min_per_arm {
            return Err(Error::DegenerateSubset {
                subset: spec.subset.clone(),
                arm: data.levels()[a].clone(),
                count: used.per_arm[a],
            });
        }
    }
    Ok(())
}

fn cross_products(x: &[f64], w: &[f64]) -> Matrix2<f64> {
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (xi, wi) in x.iter().zip(w) {
        s0 += wi;
        s1 += wi * xi;
        s2 += wi * xi * xi;
    }
    Matrix2::new(s0, s1, s1, s2)
}

fn invert(m: &Matrix2<f64>, label: &str) -> Result<Matrix2<f64>> {
    m.try_inverse()
        .ok_or_else(|| Error::DegenerateVariance(label.to_string()))
}

/// Least-squares fit of `y ~ 1 + treatment` within the subset.
pub fn fit_ols(data: &Dataset, spec: &ModelSpec) -> Result<MarginalModel> {
    if spec.family != Family::GaussianIdentity {
        return Err(Error::InvalidArgument(format!(
            "fit_ols called with family {:?}",
            spec.family
        )));
    }
    let used = used_subjects(data, spec)?;
    check_arms(data, spec, &used, 2)?;
    let n = used.y.len();
    let ones = vec![1.0; n];
    let xtx_inv = invert(&cross_products(&used.x, &ones), &spec.display_label())?;
    let xty = used
        .x
        .iter()
        .zip(&used.y)
        .fold(Vector2::zeros(), |acc: Vector2<f64>, (x, y)| {
            acc + Vector2::new(*y, x * y)
        });
    let beta = xtx_inv * xty;

    let mut scores = vec![0.0; data.n_subjects()];
    let mut rss = 0.0;
    let mut scale = 0.0;
    for k in 0..n {
        let e = used.y[k] - beta[0] - beta[1] * used.x[k];
        rss += e * e;
        scale += used.y[k] * used.y[k];
        scores[used.idx[k]] = (xtx_inv[(1, 0)] + xtx_inv[(1, 1)] * used.x[k]) * e;
    }
    if rss <= 1e-28 * scale.max(1e-300) {
        return Err(Error::ZeroVariance(spec.display_label()));
    }
    let df = n - 2;
    let sigma2 = rss / df as f64;
    Ok(MarginalModel {
        spec: spec.clone(),
        coefficient: beta[1],
        standard_error: (sigma2 * xtx_inv[(1, 1)]).sqrt(),
        n_used: n,
        residual_df: df,
        score_contributions: scores,
    })
}

const IRLS_MAX_ITER: usize = 25;
const IRLS_TOL: f64 = 1e-8;
const IRLS_STEP_TOL: f64 = 1e-10;

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn binomial_deviance(y: &[f64], x: &[f64], beta: &Vector2<f64>) -> f64 {
    let mut dev = 0.0;
    for (yi, xi) in y.iter().zip(x) {
        let p = logistic(beta[0] + beta[1] * xi);
        let p_obs = if *yi == 1.0 { p } else { 1.0 - p };
        dev -= 2.0 * p_obs.max(f64::MIN_POSITIVE).ln();
    }
    dev
}

/// Maximum-likelihood logistic regression of `y ~ 1 + treatment` by IRLS,
/// started at zero with step-halving whenever the deviance increases.
pub fn fit_logit(data: &Dataset, spec: &ModelSpec) -> Result<MarginalModel> {
    if spec.family != Family::BinomialLogit {
        return Err(Error::InvalidArgument(format!(
            "fit_logit called with family {:?}",
            spec.family
        )));
    }
    let label = spec.display_label();
    let used = used_subjects(data, spec)?;
    check_arms(data, spec, &used, 1)?;
    if let Some(v) = used.y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Schema(format!(
            "endpoint `{}` is binomial but holds value {v}",
            spec.endpoint
        )));
    }
    for arm in 0..2 {
        let (mut events, mut total) = (0usize, 0usize);
        for (xi, yi) in used.x.iter().zip(&used.y) {
            if *xi as usize == arm {
                total += 1;
                events += *yi as usize;
            }
        }
        if events == 0 || events == total {
            return Err(Error::Separation {
                label: label.clone(),
                arm: data.levels()[arm].clone(),
                outcome: if events == 0 { 0 } else { 1 },
            });
        }
    }

    let n = used.y.len();
    let mut beta = Vector2::zeros();
    let mut dev = binomial_deviance(&used.y, &used.x, &beta);
    let mut w = vec![0.0; n];
    let mut converged = false;
    for _ in 0..IRLS_MAX_ITER {
        let mut xwz = Vector2::zeros();
        for k in 0..n {
            let eta = beta[0] + beta[1] * used.x[k];
            let p = logistic(eta);
            w[k] = p * (1.0 - p);
            let z = eta + (used.y[k] - p) / w[k];
            xwz += Vector2::new(w[k] * z, w[k] * used.x[k] * z);
        }
        let info_inv = invert(&cross_products(&used.x, &w), &label)?;
        let proposal = info_inv * xwz;
        let mut step = proposal - beta;
        let mut new_beta = proposal;
        let mut new_dev = binomial_deviance(&used.y, &used.x, &new_beta);
        let mut halvings = 0;
        // rounding noise in the deviance must not trigger halving at the optimum
        while new_dev > dev + 1e-12 * (1.0 + dev) && halvings < 30 {
            step *= 0.5;
            new_beta = beta + step;
            new_dev = binomial_deviance(&used.y, &used.x, &new_beta);
            halvings += 1;
        }
        let change = (dev - new_dev).abs();
        beta = new_beta;
        dev = new_dev;
        // a flat deviance alone leaves the score visibly nonzero
        if change < IRLS_TOL && step.amax() < IRLS_STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            label,
            iterations: IRLS_MAX_ITER,
        });
    }

    let mut resid = vec![0.0; n];
    for k in 0..n {
        let p = logistic(beta[0] + beta[1] * used.x[k]);
        w[k] = p * (1.0 - p);
        resid[k] = used.y[k] - p;
    }
    let info_inv = invert(&cross_products(&used.x, &w), &label)?;
    let mut scores = vec![0.0; data.n_subjects()];
    for k in 0..n {
        scores[used.idx[k]] = (info_inv[(1, 0)] + info_inv[(1, 1)] * used.x[k]) * resid[k];
    }
    Ok(MarginalModel {
        spec: spec.clone(),
        coefficient: beta[1],
        standard_error: info_inv[(1, 1)].sqrt(),
        n_used: n,
        residual_df: n - 2,
        score_contributions: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_arm(ctrl: &[f64], trt: &[f64]) -> Dataset {
        let mut arms = vec![Arm::Reference; ctrl.len()];
        arms.extend(vec![Arm::Active; trt.len()]);
        let y = ctrl.iter().chain(trt).map(|v| Some(*v)).collect();
        Dataset::new(["ctrl".into(), "trt".into()], arms)
            .unwrap()
            .with_response("y", y)
            .unwrap()
    }

    fn binary_table(a: usize, b: usize, c: usize, d: usize) -> Dataset {
        // reference arm: a events, b non-events; active arm: c events, d non-events
        let mut y = Vec::new();
        let mut arms = Vec::new();
        for (ev, non, arm) in [(a, b, Arm::Reference), (c, d, Arm::Active)] {
            y.extend(std::iter::repeat_n(Some(1.0), ev));
            y.extend(std::iter::repeat_n(Some(0.0), non));
            arms.extend(std::iter::repeat_n(arm, ev + non));
        }
        Dataset::new(["ref".into(), "act".into()], arms)
            .unwrap()
            .with_response("e", y)
            .unwrap()
    }

    #[test]
    fn ols_mean_difference_by_hand() {
        let ds = two_arm(&[1.0, 1.0], &[3.0, 5.0]);
        let m = fit_ols(&ds, &ModelSpec::new("y", "all", Family::GaussianIdentity)).unwrap();
        assert!((m.coefficient - 3.0).abs() < 1e-12);
        assert_eq!(m.residual_df, 2);
        // pooled variance: (0 + 2) / 2 = 1, se = sqrt(1 * (1/2 + 1/2)) = 1
        assert!((m.standard_error - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_is_deterministic() {
        let ds = two_arm(&[1.0, 2.5, 0.3], &[3.0, 5.0, 4.4]);
        let spec = ModelSpec::new("y", "all", Family::GaussianIdentity);
        let a = fit_ols(&ds, &spec).unwrap();
        let b = fit_ols(&ds, &spec).unwrap();
        assert_eq!(a.coefficient.to_bits(), b.coefficient.to_bits());
        assert_eq!(a.score_contributions, b.score_contributions);
    }

    #[test]
    fn ols_matches_direct_mean_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ctrl: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let trt: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..5.0)).collect();
        let ds = two_arm(&ctrl, &trt);
        let m = fit_ols(&ds, &ModelSpec::new("y", "all", Family::GaussianIdentity)).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((m.coefficient - (mean(&trt) - mean(&ctrl))).abs() < 1e-10);
        // textbook pooled two-sample variance
        let ss = |v: &[f64]| {
            let mu = mean(v);
            v.iter().map(|x| (x - mu).powi(2)).sum::<f64>()
        };
        let sp2 = (ss(&ctrl) + ss(&trt)) / 18.0;
        let se = (sp2 * (0.1 + 0.1)).sqrt();
        assert!((m.standard_error - se).abs() < 1e-10);
        let total: f64 = m.score_contributions.iter().sum();
        assert!(total.abs() < 1e-6 * 20.0);
    }

    #[test]
    fn ols_error_paths() {
        let ds = two_arm(&[1.0, 1.0], &[2.0, 2.0]);
        let spec = ModelSpec::new("y", "all", Family::GaussianIdentity);
        assert!(matches!(fit_ols(&ds, &spec), Err(Error::ZeroVariance(_))));
        let ds = two_arm(&[1.0], &[2.0, 3.0]);
        assert!(matches!(
            fit_ols(&ds, &spec),
            Err(Error::DegenerateSubset { count: 1, .. })
        ));
        let spec = ModelSpec::new("nope", "all", Family::GaussianIdentity);
        assert!(fit_ols(&ds, &spec).unwrap_err().to_string().contains("`nope`"));
    }

    #[test]
    fn subset_excluded_subjects_get_zero_scores() {
        let ds = two_arm(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 9.0])
            .with_subgroup(
                "S",
                vec![
                    Some(true),
                    Some(true),
                    Some(false),
                    None,
                    Some(true),
                    Some(true),
                    Some(false),
                    Some(false),
                ],
            )
            .unwrap();
        let m = fit_ols(&ds, &ModelSpec::new("y", "S", Family::GaussianIdentity)).unwrap();
        assert_eq!(m.n_used, 4);
        assert!((m.coefficient - 1.5).abs() < 1e-12);
        for i in [2, 3, 6, 7] {
            assert_eq!(m.score_contributions[i], 0.0);
        }
    }

    #[test]
    fn logit_equal_rates_gives_zero_effect() {
        let ds = binary_table(10, 30, 20, 60);
        let m = fit_logit(&ds, &ModelSpec::new("e", "all", Family::BinomialLogit)).unwrap();
        assert!(m.coefficient.abs() < 1e-8);
    }

    #[test]
    fn logit_matches_closed_form_two_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let (a, b, c, d) = (
                rng.random_range(1..60usize),
                rng.random_range(1..200usize),
                rng.random_range(1..60usize),
                rng.random_range(1..200usize),
            );
            let ds = binary_table(a, b, c, d);
            let m = fit_logit(&ds, &ModelSpec::new("e", "all", Family::BinomialLogit)).unwrap();
            let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
            let or = (c * b) / (d * a);
            assert!((m.coefficient.exp() - or).abs() < 1e-6 * or.max(1.0), "{a} {b} {c} {d}");
            let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
            assert!((m.standard_error - se).abs() < 1e-4);
            let total: f64 = m.score_contributions.iter().sum();
            assert!(total.abs() < 1e-6 * (a + b + c + d));
        }
    }

    #[test]
    fn logit_averroes_global_ischaemic() {
        // Apixaban is the reference: 43 events of 2807; Aspirin 97 of 2789.
        let ds = binary_table(43, 2764, 97, 2692);
        let m = fit_logit(&ds, &ModelSpec::new("e", "all", Family::BinomialLogit)).unwrap();
        assert_eq!(format!("{:.2}", m.coefficient.exp()), "2.32");
    }

    #[test]
    fn logit_separation() {
        let ds = binary_table(0, 20, 5, 15);
        let err = fit_logit(&ds, &ModelSpec::new("e", "all", Family::BinomialLogit)).unwrap_err();
        assert!(matches!(err, Error::Separation { outcome: 0, .. }));
        let ds = binary_table(3, 20, 5, 0);
        let err = fit_logit(&ds, &ModelSpec::new("e", "all", Family::BinomialLogit)).unwrap_err();
        assert!(matches!(err, Error::Separation { outcome: 1, .. }));
    }

    #[test]
    fn logit_rejects_non_binary_values() {
        let ds = two_arm(&[0.0, 1.0], &[2.0, 1.0]);
        let spec = ModelSpec::new("y", "all", Family::BinomialLogit);
        assert!(matches!(fit_logit(&ds, &spec), Err(Error::Schema(_))));
    }
}
