//! Subject-level data: one row per subject, a two-level treatment factor,
//! subgroup membership flags and endpoint responses with missing values.

use std::io::{Read, Write};

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Subset name selecting every subject.
pub const ALL_SUBJECTS: &str = "all";

/// Treatment arm of a subject. The reference arm is the comparator; reported
/// effects are `active - reference`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    Reference,
    Active,
}

impl Arm {
    pub fn index(self) -> usize {
        match self {
            Arm::Reference => 0,
            Arm::Active => 1,
        }
    }
}

/// Immutable subject-level dataset. Subject ids are the row indices `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    levels: [String; 2],
    arms: Vec<Arm>,
    subgroups: IndexMap<String, Vec<Option<bool>>>,
    responses: IndexMap<String, Vec<Option<f64>>>,
}

impl Dataset {
    /// `levels` is `[reference, active]`.
    pub fn new(levels: [String; 2], arms: Vec<Arm>) -> Result<Self> {
        if levels[0] == levels[1] {
            return Err(Error::Schema(format!(
                "treatment levels must differ, got `{}` twice",
                levels[0]
            )));
        }
        for arm in [Arm::Reference, Arm::Active] {
            if !arms.contains(&arm) {
                return Err(Error::Schema(format!(
                    "no subject in treatment level `{}`",
                    levels[arm.index()]
                )));
            }
        }
        Ok(Self {
            levels,
            arms,
            subgroups: IndexMap::new(),
            responses: IndexMap::new(),
        })
    }

    pub fn with_subgroup(mut self, name: &str, flags: Vec<Option<bool>>) -> Result<Self> {
        self.check_new_column(name, flags.len())?;
        self.subgroups.insert(name.to_string(), flags);
        Ok(self)
    }

    pub fn with_response(mut self, name: &str, values: Vec<Option<f64>>) -> Result<Self> {
        self.check_new_column(name, values.len())?;
        if let Some(i) = values.iter().position(|v| matches!(v, Some(x) if !x.is_finite())) {
            return Err(Error::Schema(format!(
                "column `{name}`, subject {i}: non-finite value"
            )));
        }
        self.responses.insert(name.to_string(), values);
        Ok(self)
    }

    fn check_new_column(&self, name: &str, len: usize) -> Result<()> {
        if name == ALL_SUBJECTS || name == "id" || name == "treatment" {
            return Err(Error::Schema(format!("column name `{name}` is reserved")));
        }
        if self.subgroups.contains_key(name) || self.responses.contains_key(name) {
            return Err(Error::Schema(format!("duplicate column `{name}`")));
        }
        if len != self.arms.len() {
            return Err(Error::Schema(format!(
                "column `{name}` has {len} rows, expected {}",
                self.arms.len()
            )));
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.arms.len()
    }

    pub fn levels(&self) -> &[String; 2] {
        &self.levels
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn subgroup(&self, name: &str) -> Option<&[Option<bool>]> {
        self.subgroups.get(name).map(Vec::as_slice)
    }

    pub fn response(&self, name: &str) -> Option<&[Option<f64>]> {
        self.responses.get(name).map(Vec::as_slice)
    }

    pub fn subgroup_names(&self) -> impl Iterator<Item = &str> {
        self.subgroups.keys().map(String::as_str)
    }

    pub fn response_names(&self) -> impl Iterator<Item = &str> {
        self.responses.keys().map(String::as_str)
    }

    /// Membership mask of a subset: `all`, or subjects whose flag is `Some(true)`.
    pub fn subset_mask(&self, subset: &str) -> Result<Vec<bool>> {
        if subset == ALL_SUBJECTS {
            return Ok(vec![true; self.n_subjects()]);
        }
        let flags = self
            .subgroup(subset)
            .ok_or_else(|| Error::Schema(format!("unknown subgroup column `{subset}`")))?;
        Ok(flags.iter().map(|f| *f == Some(true)).collect())
    }

    /// Copy of `endpoint` with every subject outside `subset` set to missing.
    pub fn masked_response(&self, endpoint: &str, subset: &str) -> Result<Vec<Option<f64>>> {
        let values = self
            .response(endpoint)
            .ok_or_else(|| Error::Schema(format!("unknown endpoint column `{endpoint}`")))?;
        let mask = self.subset_mask(subset)?;
        Ok(values
            .iter()
            .zip(mask)
            .map(|(v, keep)| if keep { *v } else { None })
            .collect())
    }

    /// Reads `id, treatment, <columns...>`. Columns named in `subgroup_columns`
    /// are parsed as 0/1 flags, all others as numeric responses; empty cells
    /// are missing. `reference` names the comparator level; by default the
    /// lexicographically smallest level is the reference.
    pub fn read_csv<R: Read>(
        reader: R,
        subgroup_columns: &[String],
        reference: Option<&str>,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "id" || &headers[1] != "treatment" {
            return Err(Error::Schema(
                "header must start with `id,treatment`".to_string(),
            ));
        }
        for sg in subgroup_columns {
            if !headers.iter().any(|h| h == sg) {
                return Err(Error::Schema(format!("missing subgroup column `{sg}`")));
            }
        }
        let ncol = headers.len() - 2;
        let mut rows: Vec<(i64, String, Vec<Option<f64>>)> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            let id: i64 = rec[0]
                .parse()
                .map_err(|_| Error::Schema(format!("row {row}, column `id`: not an integer")))?;
            let trt = rec[1].to_string();
            if trt.is_empty() {
                return Err(Error::Schema(format!("row {row}, column `treatment`: empty")));
            }
            let mut vals = Vec::with_capacity(ncol);
            for c in 0..ncol {
                let cell = &rec[c + 2];
                if cell.is_empty() || cell == "NA" {
                    vals.push(None);
                } else {
                    let v: f64 = cell.parse().map_err(|_| {
                        Error::Schema(format!(
                            "row {row}, column `{}`: cannot parse `{cell}`",
                            &headers[c + 2]
                        ))
                    })?;
                    vals.push(Some(v));
                }
            }
            rows.push((id, trt, vals));
        }
        if rows.is_empty() {
            return Err(Error::Schema("no data rows".to_string()));
        }
        rows.sort_by_key(|r| r.0);
        let first = rows[0].0;
        for (k, r) in rows.iter().enumerate() {
            if r.0 != first + k as i64 {
                return Err(Error::Schema(format!(
                    "subject ids must be unique and contiguous; id {} breaks the run",
                    r.0
                )));
            }
        }

        let mut levels: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        levels.sort();
        levels.dedup();
        if levels.len() != 2 {
            return Err(Error::Schema(format!(
                "column `treatment` must have exactly 2 levels, found {}",
                levels.len()
            )));
        }
        let reference = match reference {
            Some(r) => {
                if !levels.iter().any(|l| l == r) {
                    return Err(Error::Schema(format!(
                        "reference level `{r}` not present in column `treatment`"
                    )));
                }
                r.to_string()
            }
            None => levels[0].clone(),
        };
        let active = levels.iter().find(|l| **l != reference).unwrap().clone();
        let arms = rows
            .iter()
            .map(|r| if r.1 == reference { Arm::Reference } else { Arm::Active })
            .collect();
        let mut ds = Dataset::new([reference, active], arms)?;
        for c in 0..ncol {
            let name = &headers[c + 2];
            let col: Vec<Option<f64>> = rows.iter().map(|r| r.2[c]).collect();
            if subgroup_columns.iter().any(|s| s == name) {
                let mut flags = Vec::with_capacity(col.len());
                for (k, v) in col.iter().enumerate() {
                    flags.push(match v {
                        None => None,
                        Some(x) if *x == 0.0 => Some(false),
                        Some(x) if *x == 1.0 => Some(true),
                        Some(x) => {
                            return Err(Error::Schema(format!(
                                "row {}, column `{name}`: subgroup flag must be 0/1, got {x}",
                                k + 2
                            )))
                        }
                    });
                }
                ds = ds.with_subgroup(name, flags)?;
            } else {
                ds = ds.with_response(name, col)?;
            }
        }
        Ok(ds)
    }

    /// Writes the dataset in the layout accepted by [`Dataset::read_csv`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "treatment".to_string()];
        header.extend(self.subgroups.keys().cloned());
        header.extend(self.responses.keys().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_subjects() {
            let mut rec = vec![i.to_string(), self.levels[self.arms[i].index()].clone()];
            for flags in self.subgroups.values() {
                rec.push(match flags[i] {
                    None => String::new(),
                    Some(true) => "1".to_string(),
                    Some(false) => "0".to_string(),
                });
            }
            for vals in self.responses.values() {
                rec.push(vals[i].map(|v| format!("{v:?}")).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Dataset with subjects reordered so that new subject `k` is old subject `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            levels: self.levels.clone(),
            arms: order.iter().map(|&i| self.arms[i]).collect(),
            subgroups: self
                .subgroups
                .iter()
                .map(|(k, v)| (k.clone(), order.iter().map(|&i| v[i]).collect()))
                .collect(),
            responses: self
                .responses
                .iter()
                .map(|(k, v)| (k.clone(), order.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }
}
