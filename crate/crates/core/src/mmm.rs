//! Stacking of marginal models.
//!
//! The joint correlation of the test statistics is estimated from the
//! empirical covariance of the stacked per-subject influence terms,
//! `Sigma = (1/N) sum_i psi_i psi_i'`, normalised to unit diagonal. Adjusted
//! p-values and simultaneous intervals are single-step max-type procedures
//! under `N(0, C)` or a multivariate t with the chosen degrees of freedom.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodels::{Alternative, Family, MarginalModel};
use crate::mvdist::{
    equicoordinate_prob, equicoordinate_quantile, exceedance_below, marginal_cdf, marginal_quantile, marginal_sf,
    std_normal_cdf, std_normal_quantile, CorrelationMatrix, QuadratureSettings, Tail,
};
use crate::report::{HypothesisResult, Inference, InferenceReport};

/// Reference distribution for the stacked statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum DfMode {
    /// Multivariate normal.
    #[default]
    #[serde(rename = "normal")]
    Normal,
    /// Multivariate t with the smallest residual df of all models.
    #[serde(rename = "dfmin")]
    DfMin,
    /// Multivariate t with the largest residual df of all models.
    #[serde(rename = "dfmax")]
    DfMax,
    /// Each statistic mapped through its own t distribution onto the normal
    /// scale, joined by the normal copula with correlation `C`.
    #[serde(rename = "dfind")]
    DfInd,
}

impl DfMode {
    pub const ALL: [DfMode; 4] = [DfMode::Normal, DfMode::DfMin, DfMode::DfMax, DfMode::DfInd];

    pub fn as_str(self) -> &'static str {
        match self {
            DfMode::Normal => "normal",
            DfMode::DfMin => "dfmin",
            DfMode::DfMax => "dfmax",
            DfMode::DfInd => "dfind",
        }
    }
}

impl std::str::FromStr for DfMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "none" => Ok(DfMode::Normal),
            "dfmin" => Ok(DfMode::DfMin),
            "dfmax" => Ok(DfMode::DfMax),
            "dfind" => Ok(DfMode::DfInd),
            _ => Err(Error::InvalidArgument(format!("unknown df mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for DfMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmmFit {
    pub models: Vec<MarginalModel>,
    /// Row-major `R x R` empirical covariance of the influence terms.
    pub sigma_hat: Vec<f64>,
    pub c_hat: CorrelationMatrix,
    pub statistics: Vec<f64>,
    pub df_mode: DfMode,
    pub per_model_df: Vec<u32>,
}

/// Adjusted p-values with the largest quadrature error among them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedP {
    pub values: Vec<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimultaneousCi {
    /// Critical value on the joint reference scale.
    pub critical_value: f64,
    /// Per-model multiplier of the standard error.
    pub multipliers: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub error: f64,
}

/// Stacks fitted models that share one subject axis.
pub fn stack(models: Vec<MarginalModel>) -> Result<MmmFit> {
    let r = models.len();
    if r == 0 {
        return Err(Error::InvalidArgument("no models to stack".into()));
    }
    let n = models[0].score_contributions.len();
    for m in &models[1..] {
        if m.score_contributions.len() != n {
            return Err(Error::MismatchedSubjectAxis {
                expected: n,
                found: m.score_contributions.len(),
            });
        }
    }
    let mut sigma = vec![0.0; r * r];
    for i in 0..r {
        let si = &models[i].score_contributions;
        for j in 0..=i {
            let sj = &models[j].score_contributions;
            let v = si.iter().zip(sj).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            sigma[i * r + j] = v;
            sigma[j * r + i] = v;
        }
    }
    for (i, m) in models.iter().enumerate() {
        if !(sigma[i * r + i] > 0.0) {
            return Err(Error::DegenerateVariance(m.spec.display_label()));
        }
    }
    let c_hat = CorrelationMatrix::from_covariance(r, &sigma)?;
    let statistics: Vec<f64> = models.iter().map(MarginalModel::statistic).collect();
    if let Some(i) = statistics.iter().position(|s| !s.is_finite()) {
        return Err(Error::DegenerateVariance(models[i].spec.display_label()));
    }
    let per_model_df = models
        .iter()
        .map(|m| u32::try_from(m.residual_df).unwrap_or(u32::MAX).max(1))
        .collect();
    Ok(MmmFit {
        models,
        sigma_hat: sigma,
        c_hat,
        statistics,
        df_mode: DfMode::Normal,
        per_model_df,
    })
}

fn tail_of(alt: Alternative) -> Tail {
    match alt {
        Alternative::TwoSided => Tail::TwoSided,
        Alternative::Greater | Alternative::Less => Tail::OneSided,
    }
}

/// Statistic oriented so that large values are evidence for `alt`.
fn oriented(stat: f64, alt: Alternative) -> f64 {
    match alt {
        Alternative::TwoSided => stat.abs(),
        Alternative::Greater => stat,
        Alternative::Less => -stat,
    }
}

/// Marginal p-value of an oriented statistic.
fn marginal_p(oriented_stat: f64, alt: Alternative, df: Option<u32>) -> f64 {
    match alt {
        Alternative::TwoSided => (2.0 * marginal_sf(oriented_stat, df)).min(1.0),
        _ => marginal_sf(oriented_stat, df),
    }
}

impl MmmFit {
    pub fn with_df_mode(mut self, mode: DfMode) -> Self {
        self.df_mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.models.len()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.standard_error).collect()
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.coefficient).collect()
    }

    /// Degrees of freedom of the joint reference distribution; `None` is normal.
    pub fn joint_df(&self) -> Option<u32> {
        match self.df_mode {
            DfMode::Normal | DfMode::DfInd => None,
            DfMode::DfMin => self.per_model_df.iter().copied().min(),
            DfMode::DfMax => self.per_model_df.iter().copied().max(),
        }
    }

    /// Degrees of freedom of the marginal law of statistic `r`.
    pub fn marginal_df(&self, r: usize) -> Option<u32> {
        match self.df_mode {
            DfMode::DfInd => Some(self.per_model_df[r]),
            _ => self.joint_df(),
        }
    }

    /// Statistics on the scale of the joint reference distribution.
    pub fn reference_statistics(&self) -> Vec<f64> {
        match self.df_mode {
            DfMode::DfInd => self
                .statistics
                .iter()
                .zip(&self.per_model_df)
                .map(|(&t, &df)| t_to_normal_scale(t, df))
                .collect(),
            _ => self.statistics.clone(),
        }
    }

    pub fn unadjusted_p(&self, alt: Alternative) -> Vec<f64> {
        (0..self.dim())
            .map(|r| marginal_p(oriented(self.statistics[r], alt), alt, self.marginal_df(r)))
            .collect()
    }

    pub fn bonferroni_p(&self, alt: Alternative) -> Vec<f64> {
        let r = self.dim() as f64;
        self.unadjusted_p(alt)
            .into_iter()
            .map(|p| (p * r).min(1.0))
            .collect()
    }

    /// `1 - P(all oriented reference statistics <= threshold)`.
    fn exceedance(&self, threshold: f64, alt: Alternative, settings: &QuadratureSettings) -> Result<(f64, f64)> {
        if alt == Alternative::TwoSided && threshold <= 0.0 {
            return Ok((1.0, 0.0));
        }
        let p = equicoordinate_prob(&self.c_hat, threshold, tail_of(alt), self.joint_df(), settings)?;
        Ok(((1.0 - p.value).clamp(0.0, 1.0), p.error))
    }

    /// Single-step max-type adjusted p-values.
    pub fn adjusted_p(&self, alt: Alternative, settings: &QuadratureSettings) -> Result<AdjustedP> {
        let z = self.reference_statistics();
        let mut values = Vec::with_capacity(self.dim());
        let mut error: f64 = 0.0;
        for zr in z {
            let (p, e) = self.exceedance(oriented(zr, alt), alt, settings)?;
            values.push(p);
            error = error.max(e);
        }
        Ok(AdjustedP { values, error })
    }

    /// Adjusted p-value of the largest oriented statistic among `among`: the
    /// smallest adjusted p-value in that set. One quadrature call.
    pub fn min_adjusted_p(
        &self,
        among: &[usize],
        alt: Alternative,
        settings: &QuadratureSettings,
    ) -> Result<f64> {
        let z = self.reference_statistics();
        let m = among
            .iter()
            .map(|&r| oriented(z[r], alt))
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Ok(1.0);
        }
        Ok(self.exceedance(m, alt, settings)?.0)
    }

    /// Whether any hypothesis in `among` is rejected at level `alpha`. Same
    /// decision as comparing [`Self::min_adjusted_p`] with `alpha`, but the
    /// quadrature stops once the decision is settled.
    pub fn rejects_any(
        &self,
        among: &[usize],
        alt: Alternative,
        alpha: f64,
        settings: &QuadratureSettings,
    ) -> Result<bool> {
        let z = self.reference_statistics();
        let m = among
            .iter()
            .map(|&r| oriented(z[r], alt))
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Ok(false);
        }
        exceedance_below(&self.c_hat, m, tail_of(alt), self.joint_df(), alpha, settings)
    }

    /// Simultaneous `1 - alpha` confidence bounds for every coefficient.
    pub fn simultaneous_ci(
        &self,
        alpha: f64,
        alt: Alternative,
        settings: &QuadratureSettings,
    ) -> Result<SimultaneousCi> {
        let q = equicoordinate_quantile(&self.c_hat, alpha, tail_of(alt), self.joint_df(), settings)?;
        let multipliers: Vec<f64> = (0..self.dim())
            .map(|r| match self.df_mode {
                DfMode::DfInd => {
                    marginal_quantile(std_normal_cdf(q.value), Some(self.per_model_df[r]))
                }
                _ => q.value,
            })
            .collect();
        let (lower, upper) = self.bounds(&multipliers, alt);
        Ok(SimultaneousCi {
            critical_value: q.value,
            multipliers,
            lower,
            upper,
            error: q.error,
        })
    }

    fn bounds(&self, multipliers: &[f64], alt: Alternative) -> (Vec<f64>, Vec<f64>) {
        let mut lower = Vec::with_capacity(self.dim());
        let mut upper = Vec::with_capacity(self.dim());
        for (m, c) in self.models.iter().zip(multipliers) {
            let half = c * m.standard_error;
            let (lo, hi) = match alt {
                Alternative::TwoSided => (m.coefficient - half, m.coefficient + half),
                Alternative::Greater => (m.coefficient - half, f64::INFINITY),
                Alternative::Less => (f64::NEG_INFINITY, m.coefficient + half),
            };
            lower.push(lo);
            upper.push(hi);
        }
        (lower, upper)
    }

    /// Marginal bounds at level `level` per coordinate (unadjusted or Bonferroni).
    fn marginal_bounds(&self, level: f64, alt: Alternative) -> (Vec<f64>, Vec<f64>) {
        let p = match alt {
            Alternative::TwoSided => 1.0 - level / 2.0,
            _ => 1.0 - level,
        };
        let multipliers: Vec<f64> = (0..self.dim())
            .map(|r| marginal_quantile(p, self.marginal_df(r)))
            .collect();
        self.bounds(&multipliers, alt)
    }

    /// Full report: unadjusted, Bonferroni and simultaneous inference.
    pub fn report(
        &self,
        alpha: f64,
        alt: Alternative,
        settings: &QuadratureSettings,
    ) -> Result<InferenceReport> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
        }
        let r = self.dim();
        let raw = self.unadjusted_p(alt);
        let bonf = self.bonferroni_p(alt);
        let adj = self.adjusted_p(alt, settings)?;
        let ci = self.simultaneous_ci(alpha, alt, settings)?;
        let (raw_lo, raw_hi) = self.marginal_bounds(alpha, alt);
        let (bonf_lo, bonf_hi) = self.marginal_bounds(alpha / r as f64, alt);
        let hypotheses = (0..r)
            .map(|k| {
                let m = &self.models[k];
                HypothesisResult {
                    label: m.spec.display_label(),
                    group: m.spec.subset.clone(),
                    endpoint: m.spec.endpoint.clone(),
                    estimate: m.coefficient,
                    std_error: m.standard_error,
                    statistic: self.statistics[k],
                    df: Some(self.per_model_df[k]),
                    exponentiate: m.spec.family == Family::BinomialLogit,
                    unadjusted: Inference::new(raw[k], raw_lo[k], raw_hi[k], alpha),
                    bonferroni: Inference::new(bonf[k], bonf_lo[k], bonf_hi[k], alpha),
                    adjusted: Inference::new(adj.values[k], ci.lower[k], ci.upper[k], alpha),
                }
            })
            .collect();
        Ok(InferenceReport {
            method: "mmm".into(),
            alpha,
            alternative: alt,
            df_mode: Some(self.df_mode),
            reference_df: self.joint_df(),
            seed: settings.seed,
            quadrature_error: adj.error.max(ci.error),
            critical_value: ci.critical_value,
            correlation: Some(self.c_hat.clone()),
            hypotheses,
            notes: Vec::new(),
        })
    }
}

/// `Phi^{-1}(F_t(t; df))`, evaluated through the tail nearer to `t`.
pub fn t_to_normal_scale(t: f64, df: u32) -> f64 {
    if t > 0.0 {
        -std_normal_quantile(marginal_sf(t, Some(df)))
    } else {
        std_normal_quantile(marginal_cdf(t, Some(df)))
    }
}
