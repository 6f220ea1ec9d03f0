//! Subject-level reconstruction and analysis of a published two-arm count
//! table with binary endpoints in two or more subgroups.
//!
//! The bundled table is from a trial comparing Apixaban with Aspirin in
//! patients with and without a previous stroke or TIA (`S1` and `S2`).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, ALL_SUBJECTS};
use crate::error::{Error, Result};
use crate::linmodels::{fit_logit, Alternative, Family, ModelSpec};
use crate::mmm::stack;
use crate::mvdist::QuadratureSettings;
use crate::report::InferenceReport;

/// Label of the whole-population rows in reports.
pub const GLOBAL: &str = "Global";

const AVERROES_CSV: &str = include_str!("../data/averroes.csv");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub treatment: String,
    pub endpoint: String,
    pub subgroup: String,
    pub events: u64,
    pub non_events: u64,
}

impl CountRow {
    pub fn total(&self) -> u64 {
        self.events + self.non_events
    }
}

/// Event counts per treatment, endpoint and subgroup. Whole-population
/// counts are derived by summing subgroups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    rows: Vec<CountRow>,
    treatments: Vec<String>,
    endpoints: Vec<String>,
    subgroups: Vec<String>,
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

impl CountTable {
    pub fn new(rows: Vec<CountRow>) -> Result<Self> {
        let (mut treatments, mut endpoints, mut subgroups) = (Vec::new(), Vec::new(), Vec::new());
        for r in &rows {
            push_unique(&mut treatments, &r.treatment);
            push_unique(&mut endpoints, &r.endpoint);
            push_unique(&mut subgroups, &r.subgroup);
        }
        if treatments.len() != 2 {
            return Err(Error::Schema(format!(
                "count table needs exactly 2 treatments, found {}",
                treatments.len()
            )));
        }
        if subgroups.iter().any(|s| s == GLOBAL || s == ALL_SUBJECTS) {
            return Err(Error::Schema(
                "whole-population rows are derived; list subgroups only".into(),
            ));
        }
        let mut cells: BTreeMap<(&str, &str, &str), &CountRow> = BTreeMap::new();
        for r in &rows {
            if cells.insert((&r.treatment, &r.endpoint, &r.subgroup), r).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate row for {} / {} / {}",
                    r.treatment, r.endpoint, r.subgroup
                )));
            }
        }
        for t in &treatments {
            for s in &subgroups {
                let mut total = None;
                for e in &endpoints {
                    let row = cells.get(&(t.as_str(), e.as_str(), s.as_str())).ok_or_else(|| {
                        Error::InconsistentTotals(format!("missing row for {t} / {e} / {s}"))
                    })?;
                    match total {
                        None => total = Some((e, row.total())),
                        Some((e0, n0)) if n0 != row.total() => {
                            return Err(Error::InconsistentTotals(format!(
                                "{t} / {s}: {n0} subjects for {e0} but {} for {e}",
                                row.total()
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(CountTable {
            rows,
            treatments,
            endpoints,
            subgroups,
        })
    }

    /// The bundled table of the stroke-prevention trial.
    pub fn averroes() -> Self {
        Self::read_csv(AVERROES_CSV.as_bytes()).expect("bundled table is valid")
    }

    /// Reads `treatment,endpoint,subgroup,events,non_events`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["treatment", "endpoint", "subgroup", "events", "non_events"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Schema(format!(
                "count table header must be `{}`, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<CountRow>().enumerate() {
            rows.push(rec.map_err(|e| Error::Schema(format!("count table row {}: {e}", i + 2)))?);
        }
        Self::new(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn rows(&self) -> &[CountRow] {
        &self.rows
    }

    pub fn treatments(&self) -> &[String] {
        &self.treatments
    }

    pub fn endpoints(&self) -> &[String] {
        &self.endpoints
    }

    pub fn subgroups(&self) -> &[String] {
        &self.subgroups
    }

    pub fn cell(&self, treatment: &str, endpoint: &str, subgroup: &str) -> Option<&CountRow> {
        self.rows
            .iter()
            .find(|r| r.treatment == treatment && r.endpoint == endpoint && r.subgroup == subgroup)
    }

    fn subjects(&self, treatment: &str, subgroup: &str) -> u64 {
        self.cell(treatment, &self.endpoints[0], subgroup)
            .map(CountRow::total)
            .unwrap_or(0)
    }

    /// Reference level: the lexicographically first treatment.
    pub fn reference(&self) -> &str {
        self.treatments.iter().min().expect("two treatments")
    }
}

/// Where events sit within each treatment-by-subgroup block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventLayout {
    /// Every endpoint's events occupy the first positions of the block, so
    /// each column reproduces its table cell exactly.
    Nested,
    /// `endpoint` is rebuilt as the union of `components`, whose events are
    /// placed on disjoint subjects; the composite's own table row is ignored.
    Composite {
        endpoint: String,
        components: Vec<String>,
    },
}

impl EventLayout {
    /// Stroke as the union of ischemic and hemorrhagic events when the table
    /// has all three endpoints; otherwise nested.
    pub fn detect(table: &CountTable) -> Self {
        let has = |e: &str| table.endpoints().iter().any(|x| x == e);
        if has("Stroke") && has("Ischemic") && has("Hemorrhag") {
            EventLayout::Composite {
                endpoint: "Stroke".into(),
                components: vec!["Ischemic".into(), "Hemorrhag".into()],
            }
        } else {
            EventLayout::Nested
        }
    }
}

/// Subject-level dataset: one binary column per endpoint, one indicator per
/// subgroup, and per-subgroup masked copies `<endpoint>.<subgroup>` that are
/// missing outside the subgroup.
pub fn expand(table: &CountTable) -> Result<Dataset> {
    expand_with(table, &EventLayout::Nested)
}

pub fn expand_with(table: &CountTable, layout: &EventLayout) -> Result<Dataset> {
    let reference = table.reference().to_string();
    let active = table
        .treatments()
        .iter()
        .find(|t| **t != reference)
        .expect("two treatments")
        .clone();
    // positions of each endpoint's events within a block
    let placement = |t: &str, s: &str, e: &str| -> Result<Vec<(u64, u64)>> {
        let events = |ep: &str| table.cell(t, ep, s).map(|r| r.events).unwrap_or(0);
        match layout {
            EventLayout::Composite {
                endpoint,
                components,
            } => {
                let mut offset = 0;
                let mut spans = Vec::new();
                for c in components {
                    let k = events(c);
                    if c == e {
                        return Ok(vec![(offset, offset + k)]);
                    }
                    spans.push((offset, offset + k));
                    offset += k;
                }
                if e == endpoint {
                    if offset > table.subjects(t, s) {
                        return Err(Error::InconsistentTotals(format!(
                            "{t} / {s}: {offset} component events exceed the block size"
                        )));
                    }
                    Ok(spans)
                } else {
                    Ok(vec![(0, events(e))])
                }
            }
            EventLayout::Nested => Ok(vec![(0, events(e))]),
        }
    };
    if let EventLayout::Composite {
        endpoint,
        components,
    } = layout
    {
        for e in components.iter().chain(std::iter::once(endpoint)) {
            if !table.endpoints().contains(e) {
                return Err(Error::Schema(format!("unknown endpoint `{e}` in event layout")));
            }
        }
    }
    let mut arms = Vec::new();
    let mut groups: Vec<usize> = Vec::new();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); table.endpoints().len()];
    for (t, arm) in [(&reference, Arm::Reference), (&active, Arm::Active)] {
        for (g, s) in table.subgroups().iter().enumerate() {
            let n = table.subjects(t, s);
            for (col, e) in columns.iter_mut().zip(table.endpoints()) {
                let spans = placement(t, s, e)?;
                col.extend((0..n).map(|k| {
                    let hit = spans.iter().any(|&(a, b)| k >= a && k < b);
                    Some(if hit { 1.0 } else { 0.0 })
                }));
            }
            arms.extend(std::iter::repeat_n(arm, n as usize));
            groups.extend(std::iter::repeat_n(g, n as usize));
        }
    }
    let mut ds = Dataset::new([reference, active], arms)?;
    for (g, s) in table.subgroups().iter().enumerate() {
        ds = ds.with_subgroup(s, groups.iter().map(|&x| Some(x == g)).collect())?;
    }
    for (col, e) in columns.iter().zip(table.endpoints()) {
        ds = ds.with_response(e, col.clone())?;
    }
    for (col, e) in columns.iter().zip(table.endpoints()) {
        for (g, s) in table.subgroups().iter().enumerate() {
            let masked = col
                .iter()
                .zip(&groups)
                .map(|(v, &x)| if x == g { *v } else { None })
                .collect();
            ds = ds.with_response(&format!("{e}.{s}"), masked)?;
        }
    }
    Ok(ds)
}

/// Model specifications in report order: whole population first, then each
/// subgroup; endpoints in table order within each population.
pub fn model_specs(table: &CountTable) -> Vec<ModelSpec> {
    let mut specs = Vec::new();
    let populations = std::iter::once((GLOBAL, ALL_SUBJECTS))
        .chain(table.subgroups().iter().map(|s| (s.as_str(), s.as_str())));
    for (label, subset) in populations {
        for e in table.endpoints() {
            specs.push(
                ModelSpec::new(e, subset, Family::BinomialLogit)
                    .labelled(&format!("{label}/{e}"))
                    .with_direction(Alternative::Greater),
            );
        }
    }
    specs
}

/// One-sided (`greater`) simultaneous analysis of every endpoint in the whole
/// population and each subgroup, with a multivariate normal reference.
pub fn analyze(table: &CountTable, alpha: f64, settings: &QuadratureSettings) -> Result<InferenceReport> {
    analyze_with(table, &EventLayout::detect(table), alpha, settings)
}

pub fn analyze_with(
    table: &CountTable,
    layout: &EventLayout,
    alpha: f64,
    settings: &QuadratureSettings,
) -> Result<InferenceReport> {
    let ds = expand_with(table, layout)?;
    let models = model_specs(table)
        .iter()
        .map(|spec| fit_logit(&ds, spec))
        .collect::<Result<Vec<_>>>()?;
    let fit = stack(models)?;
    let mut report = fit.report(alpha, Alternative::Greater, settings)?;
    for h in &mut report.hypotheses {
        if h.group == ALL_SUBJECTS {
            h.group = GLOBAL.into();
        }
    }
    if let EventLayout::Composite {
        endpoint,
        components,
    } = layout
    {
        for t in table.treatments() {
            for s in table.subgroups() {
                let rebuilt: u64 = components
                    .iter()
                    .filter_map(|c| table.cell(t, c, s))
                    .map(|r| r.events)
                    .sum();
                if let Some(row) = table.cell(t, endpoint, s) {
                    if row.events != rebuilt {
                        report.notes.push(format!(
                            "{endpoint} rebuilt from {}: {t} / {s} has {rebuilt} events (table lists {})",
                            components.join(" + "),
                            row.events
                        ));
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(ds: &Dataset, col: &str, t: Arm, subgroup: Option<&str>) -> (usize, usize) {
        let y = ds.response(col).unwrap();
        let mask: Vec<bool> = match subgroup {
            Some(s) => ds.subgroup(s).unwrap().iter().map(|f| f.unwrap()).collect(),
            None => vec![true; y.len()],
        };
        let mut ev = 0;
        let mut n = 0;
        for ((a, v), m) in ds.arms().iter().zip(y).zip(mask) {
            if *a == t && m {
                if let Some(v) = v {
                    n += 1;
                    ev += (*v == 1.0) as usize;
                }
            }
        }
        (ev, n)
    }

    #[test]
    fn bundled_table_size() {
        let t = CountTable::averroes();
        let ds = expand(&t).unwrap();
        assert_eq!(ds.n_subjects(), 5596);
        assert_eq!(ds.levels()[0], "Apixaban");
        assert_eq!(count(&ds, "Ischemic", Arm::Reference, Some("S1")).1, 390);
        assert_eq!(count(&ds, "Ischemic", Arm::Reference, None).1, 2807);
        assert_eq!(count(&ds, "Ischemic", Arm::Active, None).1, 2789);
    }

    #[test]
    fn nested_expansion_round_trips_every_cell() {
        let t = CountTable::averroes();
        let ds = expand(&t).unwrap();
        for r in t.rows() {
            let arm = if r.treatment == "Apixaban" { Arm::Reference } else { Arm::Active };
            let (ev, n) = count(&ds, &r.endpoint, arm, Some(&r.subgroup));
            assert_eq!((ev as u64, n as u64), (r.events, r.total()));
            let (ev_m, n_m) = count(&ds, &format!("{}.{}", r.endpoint, r.subgroup), arm, None);
            assert_eq!((ev_m as u64, n_m as u64), (r.events, r.total()));
        }
    }

    #[test]
    fn composite_expansion_is_union_of_components() {
        let t = CountTable::averroes();
        let ds = expand_with(&t, &EventLayout::detect(&t)).unwrap();
        let (i, h, s) = (
            ds.response("Ischemic").unwrap(),
            ds.response("Hemorrhag").unwrap(),
            ds.response("Stroke").unwrap(),
        );
        for k in 0..ds.n_subjects() {
            let (i, h, s) = (i[k].unwrap(), h[k].unwrap(), s[k].unwrap());
            assert!(i * h == 0.0);
            assert_eq!(s, i + h);
        }
        assert_eq!(count(&ds, "Stroke", Arm::Active, Some("S1")).0, 31);
        assert_eq!(count(&ds, "Stroke", Arm::Active, None).0, 106);
    }

    #[test]
    fn zero_event_table() {
        let rows = vec![
            CountRow { treatment: "A".into(), endpoint: "E".into(), subgroup: "S1".into(), events: 0, non_events: 5 },
            CountRow { treatment: "B".into(), endpoint: "E".into(), subgroup: "S1".into(), events: 0, non_events: 4 },
        ];
        let ds = expand(&CountTable::new(rows).unwrap()).unwrap();
        assert!(ds.response("E").unwrap().iter().all(|v| *v == Some(0.0)));
        assert_eq!(ds.n_subjects(), 9);
    }

    #[test]
    fn inconsistent_totals_are_rejected() {
        let mut rows = CountTable::averroes().rows().to_vec();
        rows[0].non_events += 1;
        assert!(matches!(CountTable::new(rows), Err(Error::InconsistentTotals(_))));
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let t = CountTable::averroes();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(CountTable::read_csv(buf.as_slice()).unwrap(), t);
        let bad = "treatment,endpoint,group,events,non_events\n";
        assert!(matches!(CountTable::read_csv(bad.as_bytes()), Err(Error::Schema(_))));
    }
}
