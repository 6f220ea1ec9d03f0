//! Cell-means model with multiple contrasts.
//!
//! Two-arm, two-subgroup layout with cells ordered by subgroup and, within
//! subgroup, by treatment: `(mu_11, mu_21, mu_12, mu_22)` where the first
//! index is the arm (1 = reference, 2 = active) and the second the subgroup
//! (1 = targeted, 2 = complement). Contrast correlations are known exactly
//! from the cell counts.

use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linmodels::Alternative;
use crate::mvdist::{
    equicoordinate_prob, equicoordinate_quantile, exceedance_below, marginal_quantile, marginal_sf, CorrelationMatrix,
    QuadratureSettings, Tail,
};
use crate::report::{HypothesisResult, Inference, InferenceReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeansModel {
    pub endpoint: String,
    pub subgroup: String,
    pub cell_means: [f64; 4],
    pub cell_counts: [usize; 4],
    pub pooled_sd: f64,
    pub residual_df: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastMatrix {
    pub rows: Vec<[f64; 4]>,
    pub labels: Vec<String>,
}

fn cell_index(arm: Arm, targeted: bool) -> usize {
    let subgroup = if targeted { 0 } else { 2 };
    subgroup + arm.index()
}

fn cell_name(k: usize) -> (&'static str, &'static str) {
    let arm = if k % 2 == 0 { "reference" } else { "active" };
    let sub = if k < 2 { "targeted" } else { "complement" };
    (arm, sub)
}

/// Cell means and pooled within-cell standard deviation. Subjects with a
/// missing response or subgroup flag are left out.
pub fn fit_cell_means(data: &Dataset, endpoint: &str, subgroup: &str) -> Result<CellMeansModel> {
    let y = data
        .response(endpoint)
        .ok_or_else(|| Error::Schema(format!("unknown endpoint column `{endpoint}`")))?;
    let flags = data
        .subgroup(subgroup)
        .ok_or_else(|| Error::Schema(format!("unknown subgroup column `{subgroup}`")))?;
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for ((arm, y), f) in data.arms().iter().zip(y).zip(flags) {
        if let (Some(y), Some(f)) = (y, f) {
            let k = cell_index(*arm, *f);
            sums[k] += y;
            counts[k] += 1;
        }
    }
    for k in 0..4 {
        if counts[k] < 2 {
            let (arm, sub) = cell_name(k);
            return Err(Error::EmptyCell {
                arm: arm.into(),
                subgroup: sub.into(),
                count: counts[k],
            });
        }
    }
    let means: [f64; 4] = std::array::from_fn(|k| sums[k] / counts[k] as f64);
    let mut rss = 0.0;
    let mut total_sq = 0.0;
    for ((arm, y), f) in data.arms().iter().zip(y).zip(flags) {
        if let (Some(y), Some(f)) = (y, f) {
            let e = y - means[cell_index(*arm, *f)];
            rss += e * e;
            total_sq += y * y;
        }
    }
    let n: usize = counts.iter().sum();
    let df = n - 4;
    if rss <= 1e-28 * total_sq.max(f64::MIN_POSITIVE) {
        return Err(Error::ZeroVariance(format!("{endpoint} by {subgroup}")));
    }
    Ok(CellMeansModel {
        endpoint: endpoint.into(),
        subgroup: subgroup.into(),
        cell_means: means,
        cell_counts: counts,
        pooled_sd: (rss / df as f64).sqrt(),
        residual_df: df as u32,
    })
}

impl ContrastMatrix {
    /// Targeted subgroup, complementary subgroup and the overall treatment
    /// effect with subgroups weighted by their share within each arm.
    pub fn subgroup_default(counts: &[usize; 4]) -> Self {
        let n = counts.map(|c| c as f64);
        let ref_total = n[0] + n[2];
        let act_total = n[1] + n[3];
        ContrastMatrix {
            rows: vec![
                [-1.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, -1.0, 1.0],
                [-n[0] / ref_total, n[1] / act_total, -n[2] / ref_total, n[3] / act_total],
            ],
            labels: vec!["targeted".into(), "complement".into(), "total".into()],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Correlation of the contrast estimates: `c_r' D c_s` normalised, with
    /// `D = diag(1 / n)`.
    pub fn correlation(&self, counts: &[usize; 4], family: &[usize]) -> Result<CorrelationMatrix> {
        let d = counts.map(|c| 1.0 / c as f64);
        let r = family.len();
        let mut cov = vec![0.0; r * r];
        for (a, &i) in family.iter().enumerate() {
            for (b, &j) in family.iter().enumerate() {
                cov[a * r + b] = (0..4).map(|k| self.rows[i][k] * self.rows[j][k] * d[k]).sum();
            }
        }
        CorrelationMatrix::from_covariance(r, &cov)
    }
}

/// Contrast estimates, standard errors and t statistics for the rows in `family`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastEstimates {
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub statistics: Vec<f64>,
    pub correlation: CorrelationMatrix,
    pub df: u32,
}

pub fn contrast_estimates(
    model: &CellMeansModel,
    contrasts: &ContrastMatrix,
    family: &[usize],
) -> Result<ContrastEstimates> {
    if family.is_empty() {
        return Err(Error::InvalidArgument("empty contrast family".into()));
    }
    if let Some(&bad) = family.iter().find(|&&i| i >= contrasts.len()) {
        return Err(Error::InvalidArgument(format!("contrast row {bad} out of range")));
    }
    let mut estimates = Vec::with_capacity(family.len());
    let mut ses = Vec::with_capacity(family.len());
    for &i in family {
        let c = &contrasts.rows[i];
        estimates.push((0..4).map(|k| c[k] * model.cell_means[k]).sum::<f64>());
        let v: f64 = (0..4).map(|k| c[k] * c[k] / model.cell_counts[k] as f64).sum();
        ses.push(model.pooled_sd * v.sqrt());
    }
    let statistics = estimates.iter().zip(&ses).map(|(e, s)| e / s).collect();
    Ok(ContrastEstimates {
        estimates,
        standard_errors: ses,
        statistics,
        correlation: contrasts.correlation(&model.cell_counts, family)?,
        df: model.residual_df,
    })
}

fn oriented(t: f64, alt: Alternative) -> f64 {
    match alt {
        Alternative::TwoSided => t.abs(),
        Alternative::Greater => t,
        Alternative::Less => -t,
    }
}

fn tail_of(alt: Alternative) -> Tail {
    if alt == Alternative::TwoSided {
        Tail::TwoSided
    } else {
        Tail::OneSided
    }
}

impl ContrastEstimates {
    /// Adjusted p-value of the largest oriented statistic among the
    /// positions `among`, referenced to the joint law of the whole family.
    pub fn min_adjusted_p(&self, among: &[usize], alt: Alternative, settings: &QuadratureSettings) -> Result<f64> {
        let m = among
            .iter()
            .map(|&i| oriented(self.statistics[i], alt))
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Ok(1.0);
        }
        self.exceedance(m, alt, settings).map(|(p, _)| p)
    }

    /// Whether any row in `among` is rejected at level `alpha`.
    pub fn rejects_any(
        &self,
        among: &[usize],
        alt: Alternative,
        alpha: f64,
        settings: &QuadratureSettings,
    ) -> Result<bool> {
        let m = among
            .iter()
            .map(|&i| oriented(self.statistics[i], alt))
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Ok(false);
        }
        exceedance_below(&self.correlation, m, tail_of(alt), Some(self.df), alpha, settings)
    }

    fn exceedance(&self, m: f64, alt: Alternative, settings: &QuadratureSettings) -> Result<(f64, f64)> {
        if alt == Alternative::TwoSided && m <= 0.0 {
            return Ok((1.0, 0.0));
        }
        let p = equicoordinate_prob(&self.correlation, m, tail_of(alt), Some(self.df), settings)?;
        Ok(((1.0 - p.value).clamp(0.0, 1.0), p.error))
    }
}

/// Multiple contrast test over the rows in `family`, referenced to the
/// multivariate t with the model's residual df.
pub fn cell_means_test(
    model: &CellMeansModel,
    contrasts: &ContrastMatrix,
    family: &[usize],
    alpha: f64,
    alt: Alternative,
    settings: &QuadratureSettings,
) -> Result<InferenceReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let est = contrast_estimates(model, contrasts, family)?;
    let r = family.len();
    let df = Some(est.df);
    let q = equicoordinate_quantile(&est.correlation, alpha, tail_of(alt), df, settings)?;
    let one_sided = alt != Alternative::TwoSided;
    let marg_q = |level: f64| marginal_quantile(1.0 - if one_sided { level } else { level / 2.0 }, df);
    let (c_raw, c_bonf) = (marg_q(alpha), marg_q(alpha / r as f64));
    let bounds = |e: f64, s: f64, c: f64| match alt {
        Alternative::TwoSided => (e - c * s, e + c * s),
        Alternative::Greater => (e - c * s, f64::INFINITY),
        Alternative::Less => (f64::NEG_INFINITY, e + c * s),
    };
    let mut error: f64 = q.error;
    let mut hypotheses = Vec::with_capacity(r);
    for (k, &row) in family.iter().enumerate() {
        let (e, s, t) = (est.estimates[k], est.standard_errors[k], est.statistics[k]);
        let o = oriented(t, alt);
        let raw_p = if one_sided { marginal_sf(o, df) } else { (2.0 * marginal_sf(o, df)).min(1.0) };
        let (adj_p, err) = est.exceedance(o, alt, settings)?;
        error = error.max(err);
        let (rl, ru) = bounds(e, s, c_raw);
        let (bl, bu) = bounds(e, s, c_bonf);
        let (al, au) = bounds(e, s, q.value);
        hypotheses.push(HypothesisResult {
            label: contrasts.labels[row].clone(),
            group: contrasts.labels[row].clone(),
            endpoint: model.endpoint.clone(),
            estimate: e,
            std_error: s,
            statistic: t,
            df,
            exponentiate: false,
            unadjusted: Inference::new(raw_p, rl, ru, alpha),
            bonferroni: Inference::new((raw_p * r as f64).min(1.0), bl, bu, alpha),
            adjusted: Inference::new(adj_p, al, au, alpha),
        });
    }
    Ok(InferenceReport {
        method: "cellmeans".into(),
        alpha,
        alternative: alt,
        df_mode: None,
        reference_df: df,
        seed: settings.seed,
        quadrature_error: error,
        critical_value: q.value,
        correlation: Some(est.correlation),
        hypotheses,
        notes: Vec::new(),
    })
}
