//! Inference reports: JSON, aligned text table and SVG forest plot.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linmodels::Alternative;
use crate::mmm::DfMode;
use crate::mvdist::CorrelationMatrix;

/// p-value, confidence bounds on the coefficient scale and decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub p_value: f64,
    #[serde(with = "extended_float")]
    pub lower: f64,
    #[serde(with = "extended_float")]
    pub upper: f64,
    pub rejected: bool,
}

impl Inference {
    pub fn new(p_value: f64, lower: f64, upper: f64, alpha: f64) -> Self {
        Inference {
            p_value,
            lower,
            upper,
            rejected: p_value < alpha,
        }
    }

    /// Whether the interval excludes zero on the coefficient scale.
    pub fn excludes_null(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub label: String,
    pub group: String,
    pub endpoint: String,
    /// Coefficient on the model scale (log odds ratio for logit models).
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub df: Option<u32>,
    /// Report estimates and bounds exponentiated (odds ratios).
    pub exponentiate: bool,
    pub unadjusted: Inference,
    pub bonferroni: Inference,
    pub adjusted: Inference,
}

impl HypothesisResult {
    fn display_scale(&self, x: f64) -> f64 {
        if self.exponentiate {
            x.exp()
        } else {
            x
        }
    }

    /// Estimate on the display scale.
    pub fn effect(&self) -> f64 {
        self.display_scale(self.estimate)
    }

    /// Bounds of an inference on the display scale.
    pub fn display_bounds(&self, inf: &Inference) -> (f64, f64) {
        (self.display_scale(inf.lower), self.display_scale(inf.upper))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    /// Name of the simultaneous procedure (`mmm` or `cellmeans`).
    pub method: String,
    pub alpha: f64,
    pub alternative: Alternative,
    pub df_mode: Option<DfMode>,
    /// Degrees of freedom of the joint reference; absent for a normal law.
    pub reference_df: Option<u32>,
    pub seed: u64,
    pub quadrature_error: f64,
    pub critical_value: f64,
    pub correlation: Option<CorrelationMatrix>,
    pub hypotheses: Vec<HypothesisResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn fmt_bound(x: f64) -> String {
    if x == f64::INFINITY {
        "Inf".into()
    } else if x == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        format!("{x:.2}")
    }
}

fn fmt_interval(lo: f64, hi: f64) -> String {
    let open_lo = if lo.is_infinite() { "(" } else { "[" };
    let open_hi = if hi.is_infinite() { ")" } else { "]" };
    format!("{open_lo}{}, {}{open_hi}", fmt_bound(lo), fmt_bound(hi))
}

impl InferenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn hypothesis(&self, group: &str, endpoint: &str) -> Option<&HypothesisResult> {
        self.hypotheses
            .iter()
            .find(|h| h.group == group && h.endpoint == endpoint)
    }

    fn effect_header(&self) -> &'static str {
        if self.hypotheses.iter().all(|h| h.exponentiate) {
            "OR"
        } else {
            "effect"
        }
    }

    /// Aligned plain-text table: group, endpoint, effect, then CI and p for
    /// each of noadjust, Bonferroni and the simultaneous method.
    pub fn to_text_table(&self) -> String {
        let level = format!("{:.0}% CI", 100.0 * (1.0 - self.alpha));
        let header: Vec<String> = vec![
            "group".into(),
            "endpoint".into(),
            self.effect_header().into(),
            format!("noadjust {level}"),
            "p".into(),
            format!("Bonferroni {level}"),
            "p".into(),
            format!("{} {level}", self.method),
            "p".into(),
        ];
        let mut rows = vec![header];
        let mut last_group: Option<&str> = None;
        for h in &self.hypotheses {
            let group = if last_group == Some(h.group.as_str()) {
                String::new()
            } else {
                h.group.clone()
            };
            last_group = Some(&h.group);
            let mut row = vec![group, h.endpoint.clone(), format!("{:.2}", h.effect())];
            for inf in [&h.unadjusted, &h.bonferroni, &h.adjusted] {
                let (lo, hi) = h.display_bounds(inf);
                row.push(fmt_interval(lo, hi));
                row.push(format!("{:.4}", inf.p_value));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "\nalternative: {}, alpha: {}, reference: {}, critical value: {:.4}, seed: {}, quadrature error: {:.1e}",
            self.alternative,
            self.alpha,
            match (self.df_mode, self.reference_df) {
                (Some(DfMode::DfInd), _) => "per-model t via normal copula".to_string(),
                (_, Some(df)) => format!("multivariate t ({df} df)"),
                _ => "multivariate normal".to_string(),
            },
            self.critical_value,
            self.seed,
            self.quadrature_error
        );
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }

    /// Forest plot of the simultaneous intervals, one row per hypothesis,
    /// grouped by population. Logit models are drawn on a log axis.
    pub fn forest_svg(&self) -> String {
        const ROW: f64 = 26.0;
        const LEFT: f64 = 190.0;
        const PLOT_W: f64 = 420.0;
        const TOP: f64 = 40.0;
        let log_axis = self.hypotheses.iter().all(|h| h.exponentiate);
        let null = 0.0;

        // data range on the model scale, clipping infinite bounds
        let mut lo = null;
        let mut hi = null;
        for h in &self.hypotheses {
            for x in [h.estimate, h.adjusted.lower, h.adjusted.upper] {
                if x.is_finite() {
                    lo = f64::min(lo, x);
                    hi = f64::max(hi, x);
                }
            }
        }
        let pad = 0.08 * (hi - lo).max(1e-9);
        let (lo, hi) = (lo - pad, hi + pad);
        let x_of = |v: f64| LEFT + PLOT_W * ((v.clamp(lo, hi) - lo) / (hi - lo));

        let height = TOP + ROW * self.hypotheses.len() as f64 + 50.0;
        let width = LEFT + PLOT_W + 40.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
        );
        let title = format!(
            "Simultaneous {:.0}% confidence intervals ({})",
            100.0 * (1.0 - self.alpha),
            self.method
        );
        let _ = writeln!(s, r#"<text x="{}" y="20" font-weight="bold">{}</text>"#, 10, xml_escape(&title));
        let y_end = TOP + ROW * self.hypotheses.len() as f64;
        let _ = writeln!(
            s,
            r##"<line class="null" x1="{x:.1}" y1="{TOP}" x2="{x:.1}" y2="{y_end}" stroke="#888" stroke-dasharray="4 3"/>"##,
            x = x_of(null)
        );
        let mut last_group: Option<&str> = None;
        for (k, h) in self.hypotheses.iter().enumerate() {
            let y = TOP + ROW * (k as f64 + 0.5);
            let group = if last_group == Some(h.group.as_str()) { "" } else { &h.group };
            last_group = Some(&h.group);
            let _ = writeln!(
                s,
                r#"<text x="10" y="{:.1}">{}</text><text x="90" y="{:.1}">{}</text>"#,
                y + 4.0,
                xml_escape(group),
                y + 4.0,
                xml_escape(&h.endpoint)
            );
            let (a, b) = (h.adjusted.lower, h.adjusted.upper);
            let _ = writeln!(
                s,
                r##"<line class="ci" x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#1f4e79" stroke-width="2"/>"##,
                x_of(a),
                x_of(b)
            );
            for bound in [a, b] {
                if bound.is_finite() {
                    let xb = x_of(bound);
                    let _ = writeln!(
                        s,
                        r##"<line class="cap" x1="{xb:.1}" y1="{:.1}" x2="{xb:.1}" y2="{:.1}" stroke="#1f4e79" stroke-width="2"/>"##,
                        y - 6.0,
                        y + 6.0
                    );
                } else {
                    let xb = x_of(bound);
                    let dir = if bound > 0.0 { 1.0 } else { -1.0 };
                    let _ = writeln!(
                        s,
                        r##"<path class="open" d="M{:.1},{:.1} L{xb:.1},{y:.1} L{:.1},{:.1}" fill="none" stroke="#1f4e79" stroke-width="2"/>"##,
                        xb - 6.0 * dir,
                        y - 5.0,
                        xb - 6.0 * dir,
                        y + 5.0
                    );
                }
            }
            let _ = writeln!(
                s,
                r##"<circle class="estimate" cx="{:.1}" cy="{y:.1}" r="4" fill="{}"/>"##,
                x_of(h.estimate),
                if h.adjusted.rejected { "#c0392b" } else { "#1f4e79" }
            );
        }
        // axis with ticks
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y_end}" x2="{}" y2="{y_end}" stroke="#000"/>"##,
            LEFT + PLOT_W
        );
        for t in 0..=4 {
            let v = lo + (hi - lo) * t as f64 / 4.0;
            let x = x_of(v);
            let label = if log_axis { format!("{:.2}", v.exp()) } else { format!("{v:.2}") };
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{y_end}" x2="{x:.1}" y2="{:.1}" stroke="#000"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"##,
                y_end + 5.0,
                y_end + 18.0
            );
        }
        let axis_label = if log_axis { "odds ratio (log scale)" } else { "effect" };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{axis_label}</text>"#,
            LEFT + PLOT_W / 2.0,
            y_end + 36.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// JSON has no infinities; unbounded interval ends serialize as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *x == f64::INFINITY {
            s.serialize_str("Inf")
        } else if *x == f64::NEG_INFINITY {
            s.serialize_str("-Inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "Inf" => Ok(f64::INFINITY),
                "-Inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("invalid bound `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> InferenceReport {
        let mk = |group: &str, endpoint: &str, est: f64, p: f64| HypothesisResult {
            label: format!("{group}/{endpoint}"),
            group: group.into(),
            endpoint: endpoint.into(),
            estimate: est,
            std_error: 0.2,
            statistic: est / 0.2,
            df: None,
            exponentiate: true,
            unadjusted: Inference::new(p, est - 0.33, f64::INFINITY, 0.05),
            bonferroni: Inference::new((2.0 * p).min(1.0), est - 0.45, f64::INFINITY, 0.05),
            adjusted: Inference::new(1.8 * p, est - 0.42, f64::INFINITY, 0.05),
        };
        InferenceReport {
            method: "mmm".into(),
            alpha: 0.05,
            alternative: Alternative::Greater,
            df_mode: Some(DfMode::Normal),
            reference_df: None,
            seed: 7,
            quadrature_error: 1e-5,
            critical_value: 2.1,
            correlation: None,
            hypotheses: vec![mk("Global", "A", 0.8, 0.0001), mk("Global", "B", 0.1, 0.3)],
            notes: vec![],
        }
    }

    #[test]
    fn json_round_trip_keeps_infinite_bounds() {
        let r = sample();
        let back = InferenceReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(r, back);
        assert!(r.to_json().unwrap().contains("\"Inf\""));
    }

    #[test]
    fn text_table_layout() {
        let t = sample().to_text_table();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("group"));
        assert!(lines[0].contains("OR"));
        assert!(lines[2].starts_with("Global"));
        // repeated group label is blanked
        assert!(lines[3].starts_with(' '));
        assert!(t.contains(&format!("[{:.2}, Inf)", (0.8f64 - 0.42).exp())));
    }

    #[test]
    fn svg_has_one_interval_per_hypothesis() {
        let svg = sample().forest_svg();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("class=\"ci\"").count(), 2);
        assert_eq!(svg.matches("class=\"estimate\"").count(), 2);
        assert_eq!(svg.matches("class=\"open\"").count(), 2);
    }

    #[test]
    fn decision_follows_alpha() {
        let inf = Inference::new(0.049, 0.1, 1.0, 0.05);
        assert!(inf.rejected && inf.excludes_null());
        assert!(!Inference::new(0.05, -0.1, 1.0, 0.05).rejected);
    }
}
