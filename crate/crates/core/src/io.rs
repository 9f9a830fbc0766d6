//! Long-format data tables, the model formula configuration and design
//! construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GcaError, Result};
use crate::fitting::{Design, IrwConfig, VarianceTemplate};
use crate::model::{ClusteredDesign, IndependentDesign, IndexKind, SubjectBlock, VarianceShape};
use crate::simulation::synthetic_pancreas;
use crate::spline::{eval_basis, SplineFamily, SplineSpec};

const CHICKWEIGHT_CSV: &str = include_str!("../data/chickweight.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    /// Reference level of a categorical covariate; defaults to the first level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// Which file columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    /// Without a subject column every row is its own unit.
    pub subject: Option<String>,
    pub time: String,
    pub response: String,
    pub covariates: Vec<CovariateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovValue {
    Num(f64),
    Cat(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub spec: CovariateSpec,
    pub values: Vec<CovValue>,
    /// Levels in sorted order with the reference first; empty for numeric columns.
    pub levels: Vec<String>,
}

impl CovariateColumn {
    pub fn reference(&self) -> Option<&str> {
        self.levels.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongFormatTable {
    pub subject: Vec<String>,
    pub time: Vec<f64>,
    pub response: Vec<f64>,
    pub covariates: Vec<CovariateColumn>,
    pub has_subject_column: bool,
    /// One line per exclusion applied to this table.
    pub exclusion_log: Vec<String>,
}

impl LongFormatTable {
    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    /// Subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.subject
            .iter()
            .filter(|s| seen.insert(s.as_str()))
            .cloned()
            .collect()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject.iter().collect::<HashSet<_>>().len()
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateColumn> {
        self.covariates.iter().find(|c| c.spec.name == name)
    }

    /// Covariate values of row `i`, keyed by name.
    pub fn row_covariates(&self, i: usize) -> BTreeMap<String, CovValue> {
        self.covariates
            .iter()
            .map(|c| (c.spec.name.clone(), c.values[i].clone()))
            .collect()
    }

    fn filtered(&self, keep: &[bool]) -> Self {
        let pick = |v: &Vec<String>| v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| x.clone()).collect();
        let pickf = |v: &Vec<f64>| v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect();
        Self {
            subject: pick(&self.subject),
            time: pickf(&self.time),
            response: pickf(&self.response),
            covariates: self
                .covariates
                .iter()
                .map(|c| CovariateColumn {
                    spec: c.spec.clone(),
                    values: c.values.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| x.clone()).collect(),
                    levels: c.levels.clone(),
                })
                .collect(),
            has_subject_column: self.has_subject_column,
            exclusion_log: self.exclusion_log.clone(),
        }
    }
}

/// Numeric-aware ordering so that "2" sorts before "10".
fn sort_levels(levels: &mut [String]) {
    let all_numeric = levels.iter().all(|l| l.parse::<f64>().is_ok());
    if all_numeric {
        levels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    } else {
        levels.sort();
    }
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| GcaError::Parse {
        row,
        column: column.to_string(),
        message: format!("'{raw}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(GcaError::Parse {
            row,
            column: column.to_string(),
            message: format!("'{raw}' is not finite"),
        });
    }
    Ok(v)
}

/// Reads a long-format table. `row` numbers in errors count data rows from 1.
pub fn load_csv_reader<R: std::io::Read>(reader: R, mapping: &ColumnMapping, allow_duplicates: bool) -> Result<LongFormatTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| GcaError::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GcaError::MissingColumn(name.to_string()))
    };
    let subject_col = mapping.subject.as_deref().map(find).transpose()?;
    let time_col = find(&mapping.time)?;
    let response_col = find(&mapping.response)?;
    let cov_cols = mapping
        .covariates
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut subject = Vec::new();
    let mut time = Vec::new();
    let mut response = Vec::new();
    let mut cov_values: Vec<Vec<CovValue>> = vec![Vec::new(); cov_cols.len()];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| GcaError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let field = |col: usize, name: &str| -> Result<&str> {
            rec.get(col).ok_or_else(|| GcaError::Parse {
                row,
                column: name.to_string(),
                message: "field missing".into(),
            })
        };
        subject.push(match subject_col {
            Some(c) => field(c, mapping.subject.as_deref().unwrap_or_default())?.to_string(),
            None => format!("row{row}"),
        });
        time.push(parse_number(field(time_col, &mapping.time)?, row, &mapping.time)?);
        response.push(parse_number(field(response_col, &mapping.response)?, row, &mapping.response)?);
        for (k, (&col, spec)) in cov_cols.iter().zip(&mapping.covariates).enumerate() {
            let raw = field(col, &spec.name)?;
            cov_values[k].push(match spec.kind {
                CovariateKind::Numeric => CovValue::Num(parse_number(raw, row, &spec.name)?),
                CovariateKind::Categorical => CovValue::Cat(raw.to_string()),
            });
        }
    }
    if response.is_empty() {
        return Err(GcaError::EmptyData("the file has no data rows".into()));
    }
    if !allow_duplicates {
        let mut seen = HashMap::new();
        for (i, (s, t)) in subject.iter().zip(&time).enumerate() {
            if let Some(first) = seen.insert((s.as_str(), t.to_bits()), i + 1) {
                return Err(GcaError::Parse {
                    row: i + 1,
                    column: mapping.time.clone(),
                    message: format!("duplicate (subject, time) = ({s}, {t}), first seen at row {first}"),
                });
            }
        }
    }

    let covariates = mapping
        .covariates
        .iter()
        .zip(cov_values)
        .map(|(spec, values)| {
            let levels = match spec.kind {
                CovariateKind::Numeric => Vec::new(),
                CovariateKind::Categorical => {
                    let mut lv: Vec<String> = values
                        .iter()
                        .filter_map(|v| match v {
                            CovValue::Cat(s) => Some(s.clone()),
                            CovValue::Num(_) => None,
                        })
                        .collect::<HashSet<_>>()
                        .into_iter()
                        .collect();
                    sort_levels(&mut lv);
                    if let Some(r) = &spec.reference {
                        let pos = lv.iter().position(|l| l == r).ok_or_else(|| {
                            GcaError::Config(format!("reference level '{r}' does not occur in column '{}'", spec.name))
                        })?;
                        let r = lv.remove(pos);
                        lv.insert(0, r);
                    }
                    lv
                }
            };
            Ok(CovariateColumn {
                spec: spec.clone(),
                values,
                levels,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let table = LongFormatTable {
        subject,
        time,
        response,
        covariates,
        has_subject_column: mapping.subject.is_some(),
        exclusion_log: Vec::new(),
    };
    log::info!("loaded {} rows, {} subjects", table.n_rows(), table.n_subjects());
    Ok(table)
}

pub fn load_csv(path: &Path, mapping: &ColumnMapping, allow_duplicates: bool) -> Result<LongFormatTable> {
    let file = std::fs::File::open(path).map_err(|e| GcaError::Io(format!("{}: {e}", path.display())))?;
    load_csv_reader(file, mapping, allow_duplicates)
}

pub fn chickweight_csv() -> &'static str {
    CHICKWEIGHT_CSV
}

pub fn chickweight_mapping() -> ColumnMapping {
    ColumnMapping {
        subject: Some("Chick".into()),
        time: "Time".into(),
        response: "weight".into(),
        covariates: vec![CovariateSpec {
            name: "Diet".into(),
            kind: CovariateKind::Categorical,
            reference: Some("1".into()),
        }],
    }
}

/// The chick body-weight data shipped with the crate (50 chicks, 4 diets).
pub fn chickweight() -> LongFormatTable {
    load_csv_reader(CHICKWEIGHT_CSV.as_bytes(), &chickweight_mapping(), false).expect("embedded data parse")
}

/// CSV text of the synthetic single-measurement growth data.
pub fn pancreas_synthetic_csv(n: usize, seed: u64) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject", "day", "length"]).expect("in-memory write");
    for r in synthetic_pancreas(n, seed) {
        w.write_record([r.subject, r.day.to_string(), r.length.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf8")
}

pub fn pancreas_mapping() -> ColumnMapping {
    ColumnMapping {
        subject: Some("subject".into()),
        time: "day".into(),
        response: "length".into(),
        covariates: Vec::new(),
    }
}

/// Drops the listed subjects.
pub fn apply_exclusions(table: &LongFormatTable, exclude: &[String]) -> Result<LongFormatTable> {
    if exclude.is_empty() {
        return Ok(table.clone());
    }
    let present: HashSet<&str> = table.subject.iter().map(String::as_str).collect();
    if let Some(unknown) = exclude.iter().find(|s| !present.contains(s.as_str())) {
        return Err(GcaError::UnknownSubject(unknown.clone()));
    }
    let drop: HashSet<&str> = exclude.iter().map(String::as_str).collect();
    let keep: Vec<bool> = table.subject.iter().map(|s| !drop.contains(s.as_str())).collect();
    let mut out = table.filtered(&keep);
    if out.n_rows() == 0 {
        return Err(GcaError::EmptyData("every subject was excluded".into()));
    }
    for s in exclude {
        let n = table.subject.iter().filter(|x| *x == s).count();
        out.exclusion_log.push(format!("excluded subject {s} ({n} rows)"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; relative paths are resolved against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// `chickweight` or `pancreas_synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedded: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default)]
    pub time: String,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub allow_duplicates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanSplineConfig {
    pub family: SplineFamily,
    pub degree: usize,
    pub df: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanConfig {
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub linear_time: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spline: Option<MeanSplineConfig>,
    /// Covariate main effects.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Covariates multiplied into every time term (linear time and spline columns).
    #[serde(default)]
    pub interactions: Vec<String>,
}

fn yes() -> bool {
    true
}

impl Default for MeanConfig {
    fn default() -> Self {
        Self {
            intercept: true,
            linear_time: false,
            spline: None,
            covariates: Vec::new(),
            interactions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    pub shape: VarianceShape,
    /// Optional; must agree with the shape when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<SplineFamily>,
    #[serde(default)]
    pub degree: usize,
    #[serde(default)]
    pub df: usize,
    pub index: IndexKind,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            shape: VarianceShape::Constant,
            family: None,
            degree: 0,
            df: 0,
            index: IndexKind::Time,
        }
    }
}

impl VarianceConfig {
    pub fn template(&self) -> VarianceTemplate {
        VarianceTemplate {
            shape: self.shape,
            degree: self.degree,
            df: self.df,
            index_kind: self.index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    #[default]
    None,
    Intercept,
    /// Random slope on time without a random intercept.
    Slope,
    InterceptSlope,
}

impl RandomEffects {
    pub fn q(self) -> usize {
        match self {
            RandomEffects::None => 0,
            RandomEffects::Intercept | RandomEffects::Slope => 1,
            RandomEffects::InterceptSlope => 2,
        }
    }

    pub fn z_row(self, t: f64) -> Vec<f64> {
        match self {
            RandomEffects::None => vec![],
            RandomEffects::Intercept => vec![1.0],
            RandomEffects::Slope => vec![t],
            RandomEffects::InterceptSlope => vec![1.0, t],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RandomConfig {
    #[serde(default)]
    pub effects: RandomEffects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSection {
    pub n_rep: usize,
    pub level: f64,
    pub grid_points: usize,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            n_rep: 200,
            level: 0.95,
            grid_points: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurvesSection {
    pub probs: Vec<f64>,
    pub n_draws: usize,
    pub grid_points: usize,
    /// Categorical covariate whose levels each get their own curves.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_by: Option<String>,
}

impl Default for CurvesSection {
    fn default() -> Self {
        Self {
            probs: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            n_draws: 10_000,
            grid_points: 51,
            group_by: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub shapes: Vec<VarianceShape>,
    pub degrees: Vec<usize>,
    pub dfs: Vec<usize>,
    pub indices: Vec<IndexKind>,
    pub include_constant: bool,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            shapes: vec![VarianceShape::IncreasingI],
            degrees: vec![2],
            dfs: vec![3, 5, 7],
            indices: vec![IndexKind::MarginalMean, IndexKind::ConditionalMean],
            include_constant: true,
        }
    }
}

impl SelectSection {
    pub fn templates(&self) -> Vec<VarianceTemplate> {
        let mut out = Vec::new();
        if self.include_constant {
            out.push(VarianceTemplate::constant(IndexKind::Time));
        }
        for &index_kind in &self.indices {
            for &shape in &self.shapes {
                if shape == VarianceShape::Constant {
                    continue;
                }
                for &degree in &self.degrees {
                    for &df in &self.dfs {
                        if df >= degree {
                            out.push(VarianceTemplate {
                                shape,
                                degree,
                                df,
                                index_kind,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Data source, mean model, variance model, random effects and run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFormulaConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub mean: MeanConfig,
    #[serde(default)]
    pub variance: VarianceConfig,
    #[serde(default)]
    pub random: RandomConfig,
    #[serde(default)]
    pub fit: IrwConfig,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub curves: CurvesSection,
    #[serde(default)]
    pub select: SelectSection,
}

impl ModelFormulaConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(s).map_err(|e| GcaError::Config(e.to_string()))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GcaError::Config(e.to_string()))
    }

    /// Fills the column mapping of embedded data sets and maps a degree-0 I-spline
    /// mean (the integral of a piecewise-constant M-spline) to degree 1.
    fn normalize(&mut self) {
        let embedded_mapping = match self.data.embedded.as_deref() {
            Some("chickweight") => Some(chickweight_mapping()),
            Some("pancreas_synthetic") => Some(pancreas_mapping()),
            _ => None,
        };
        if let Some(m) = embedded_mapping {
            if self.data.subject.is_none() {
                self.data.subject = m.subject;
            }
            if self.data.time.is_empty() {
                self.data.time = m.time;
            }
            if self.data.response.is_empty() {
                self.data.response = m.response;
            }
            if self.data.covariates.is_empty() {
                self.data.covariates = m.covariates;
            }
        }
        if let Some(sp) = &mut self.mean.spline {
            if sp.family == SplineFamily::I && sp.degree == 0 {
                log::warn!("mean I-spline degree 0 read as degree 1 (piecewise-linear I-spline)");
                sp.degree = 1;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.path, &d.embedded) {
            (Some(_), Some(_)) => return Err(GcaError::Config("give either data.path or data.embedded, not both".into())),
            (None, None) => return Err(GcaError::Config("data.path or data.embedded is required".into())),
            (None, Some(e)) if e != "chickweight" && e != "pancreas_synthetic" => {
                return Err(GcaError::Config(format!("unknown embedded data set '{e}'")))
            }
            _ => {}
        }
        if d.time.is_empty() || d.response.is_empty() {
            return Err(GcaError::Config("data.time and data.response are required".into()));
        }
        for name in self.mean.covariates.iter().chain(&self.mean.interactions) {
            if !d.covariates.iter().any(|c| &c.name == name) {
                return Err(GcaError::Config(format!("covariate '{name}' is not declared under data.covariates")));
            }
        }
        if let Some(sp) = &self.mean.spline {
            SplineSpec::even(sp.family, sp.degree, sp.df, 0.0, 1.0).map_err(|e| GcaError::Config(format!("mean spline: {e}")))?;
        }
        let v = &self.variance;
        if let (Some(f), Some(sf)) = (v.family, v.shape.family()) {
            if f != sf {
                return Err(GcaError::Config(format!(
                    "variance family {f:?} conflicts with shape {:?} (needs {sf:?})",
                    v.shape
                )));
            }
        }
        if v.family.is_some() && v.shape == VarianceShape::Constant {
            return Err(GcaError::Config("a constant variance takes no spline family".into()));
        }
        if let Some(f) = v.shape.family() {
            SplineSpec::even(f, v.degree, v.df, 0.0, 1.0).map_err(|e| GcaError::Config(format!("variance spline: {e}")))?;
        }
        if self.random.effects != RandomEffects::None && d.subject.is_none() {
            return Err(GcaError::Config("random effects need a subject column".into()));
        }
        if let Some(g) = &self.curves.group_by {
            if !d.covariates.iter().any(|c| &c.name == g && c.kind == CovariateKind::Categorical) {
                return Err(GcaError::Config(format!("curves.group_by '{g}' is not a categorical covariate")));
            }
        }
        if !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return Err(GcaError::Config("bootstrap.level must lie in (0, 1)".into()));
        }
        self.fit.validate().map_err(|e| GcaError::Config(e.to_string()))
    }

    pub fn mapping(&self) -> ColumnMapping {
        ColumnMapping {
            subject: self.data.subject.clone(),
            time: self.data.time.clone(),
            response: self.data.response.clone(),
            covariates: self.data.covariates.clone(),
        }
    }

    /// Loads the configured data and applies the exclusions.
    pub fn load_table(&self) -> Result<LongFormatTable> {
        let mapping = self.mapping();
        let table = match (&self.data.path, self.data.embedded.as_deref()) {
            (Some(p), _) => load_csv(p, &mapping, self.data.allow_duplicates)?,
            (None, Some("chickweight")) => load_csv_reader(CHICKWEIGHT_CSV.as_bytes(), &mapping, self.data.allow_duplicates)?,
            (None, Some("pancreas_synthetic")) => {
                let csv = pancreas_synthetic_csv(self.data.synthetic_n.unwrap_or(100), self.data.synthetic_seed.unwrap_or(7));
                load_csv_reader(csv.as_bytes(), &mapping, self.data.allow_duplicates)?
            }
            _ => return Err(GcaError::Config("no data source".into())),
        };
        apply_exclusions(&table, &self.data.exclude)
    }
}

// ---------------------------------------------------------------------------
// design construction

/// One covariate-derived column factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Numeric(String),
    Level { covariate: String, level: String },
}

impl Term {
    fn label(&self) -> String {
        match self {
            Term::Numeric(n) => n.clone(),
            Term::Level { covariate, level } => format!("{covariate}{level}"),
        }
    }

    fn value(&self, covs: &BTreeMap<String, CovValue>) -> Result<f64> {
        let (name, v) = match self {
            Term::Numeric(n) => (n, covs.get(n)),
            Term::Level { covariate, .. } => (covariate, covs.get(covariate)),
        };
        match (self, v) {
            (Term::Numeric(_), Some(CovValue::Num(x))) => Ok(*x),
            (Term::Level { level, .. }, Some(CovValue::Cat(s))) => Ok(if s == level { 1.0 } else { 0.0 }),
            _ => Err(GcaError::InvalidArgument(format!("no usable value for covariate '{name}'"))),
        }
    }
}

/// The mean model with its spline knots fixed, able to produce design rows for new points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanModel {
    pub intercept: bool,
    pub linear_time: bool,
    pub spline: Option<SplineSpec>,
    pub main_effects: Vec<Term>,
    pub interactions: Vec<Term>,
    pub random: RandomEffects,
    pub time_name: String,
    pub column_names: Vec<String>,
}

impl MeanModel {
    fn time_terms(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        if self.linear_time {
            out.push(t);
        }
        if let Some(spec) = &self.spline {
            out.extend(eval_basis(spec, &[t])?.row(0));
        }
        Ok(out)
    }

    fn time_term_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.linear_time {
            out.push(self.time_name.clone());
        }
        if let Some(spec) = &self.spline {
            let f = format!("{:?}", spec.family);
            out.extend((1..=spec.df()).map(|k| format!("{f}{k}({})", self.time_name)));
        }
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.intercept {
            out.push("(Intercept)".to_string());
        }
        let tt = self.time_term_names();
        out.extend(tt.iter().cloned());
        out.extend(self.main_effects.iter().map(Term::label));
        for term in &self.interactions {
            out.extend(tt.iter().map(|n| format!("{n}:{}", term.label())));
        }
        out
    }

    pub fn p(&self) -> usize {
        self.column_names.len()
    }

    pub fn x_row(&self, t: f64, covs: &BTreeMap<String, CovValue>) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.p());
        if self.intercept {
            row.push(1.0);
        }
        let tt = self.time_terms(t)?;
        row.extend(&tt);
        for term in &self.main_effects {
            row.push(term.value(covs)?);
        }
        for term in &self.interactions {
            let c = term.value(covs)?;
            row.extend(tt.iter().map(|v| v * c));
        }
        Ok(row)
    }

    pub fn z_row(&self, t: f64) -> Vec<f64> {
        self.random.z_row(t)
    }

    pub fn x_matrix(&self, t: &[f64], covs: &BTreeMap<String, CovValue>) -> Result<DMatrix<f64>> {
        let rows = t.iter().map(|&ti| self.x_row(ti, covs)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(t.len(), self.p(), |i, j| rows[i][j]))
    }

    pub fn z_matrix(&self, t: &[f64]) -> DMatrix<f64> {
        let q = self.random.q();
        DMatrix::from_fn(t.len(), q, |i, j| self.z_row(t[i])[j])
    }
}

fn covariate_terms(table: &LongFormatTable, name: &str) -> Result<Vec<Term>> {
    let col = table
        .covariate(name)
        .ok_or_else(|| GcaError::UnsupportedFormula(format!("covariate '{name}' not in the table")))?;
    Ok(match col.spec.kind {
        CovariateKind::Numeric => vec![Term::Numeric(name.to_string())],
        CovariateKind::Categorical => col
            .levels
            .iter()
            .skip(1)
            .map(|l| Term::Level {
                covariate: name.to_string(),
                level: l.clone(),
            })
            .collect(),
    })
}

/// Names the columns that lie in the span of the columns before them.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..x.ncols() {
        let mut v: Vec<f64> = x.column(j).iter().copied().collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            out.push(j);
        } else {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Assembles the design of `formula` on `table`. Tables without a subject
/// column, or with one row per subject and no random effects, give an
/// independent design.
pub fn build_design(table: &LongFormatTable, formula: &ModelFormulaConfig) -> Result<(Design, MeanModel)> {
    if table.n_rows() == 0 {
        return Err(GcaError::EmptyData("empty table".into()));
    }
    let (tlo, thi) = table
        .time
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let spline = match &formula.mean.spline {
        None => None,
        Some(sp) => {
            if !(thi > tlo) {
                return Err(GcaError::UnsupportedFormula("a time spline needs at least two distinct times".into()));
            }
            Some(SplineSpec::even(sp.family, sp.degree, sp.df, tlo, thi)?)
        }
    };
    let mut main_effects = Vec::new();
    for name in &formula.mean.covariates {
        main_effects.extend(covariate_terms(table, name)?);
    }
    let mut interactions = Vec::new();
    for name in &formula.mean.interactions {
        interactions.extend(covariate_terms(table, name)?);
    }
    if !interactions.is_empty() && !formula.mean.linear_time && spline.is_none() {
        return Err(GcaError::UnsupportedFormula("interactions need a time term".into()));
    }
    let mut mm = MeanModel {
        intercept: formula.mean.intercept,
        linear_time: formula.mean.linear_time,
        spline,
        main_effects,
        interactions,
        random: formula.random.effects,
        time_name: formula.data.time.clone(),
        column_names: Vec::new(),
    };
    mm.column_names = mm.names();
    if mm.p() == 0 {
        return Err(GcaError::UnsupportedFormula("the mean model has no columns".into()));
    }

    let n = table.n_rows();
    let rows = (0..n)
        .map(|i| mm.x_row(table.time[i], &table.row_covariates(i)))
        .collect::<Result<Vec<_>>>()?;
    let x = DMatrix::from_fn(n, mm.p(), |i, j| rows[i][j]);
    let dep = dependent_columns(&x);
    if !dep.is_empty() {
        let names: Vec<&str> = dep.iter().map(|&j| mm.column_names[j].as_str()).collect();
        return Err(GcaError::RankDeficient(format!(
            "columns {} are linear combinations of earlier columns",
            names.join(", ")
        )));
    }

    let single_rows = table.n_subjects() == n;
    let independent = !table.has_subject_column || (mm.random == RandomEffects::None && single_rows);
    let design = if independent {
        Design::Independent(IndependentDesign::with_names(
            table.response.clone(),
            x,
            table.time.clone(),
            mm.column_names.clone(),
        )?)
    } else {
        let mut by_subject: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, s) in table.subject.iter().enumerate() {
            by_subject.entry(s.as_str()).or_default().push(i);
        }
        let subjects = table
            .subjects()
            .into_iter()
            .map(|id| {
                let idx = &by_subject[id.as_str()];
                let y = idx.iter().map(|&i| table.response[i]).collect();
                let t: Vec<f64> = idx.iter().map(|&i| table.time[i]).collect();
                let xs = DMatrix::from_fn(idx.len(), mm.p(), |r, c| x[(idx[r], c)]);
                let z = mm.z_matrix(&t);
                SubjectBlock::new(id, y, xs, z, t)
            })
            .collect();
        Design::Clustered(ClusteredDesign::with_names(subjects, mm.column_names.clone())?)
    };
    Ok((design, mm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chicken_config() -> ModelFormulaConfig {
        ModelFormulaConfig::from_toml_str(
            r#"
            [data]
            embedded = "chickweight"
            exclude = ["24"]
            [mean]
            intercept = true
            spline = { family = "I", degree = 1, df = 3 }
            interactions = ["Diet"]
            [variance]
            shape = "constant"
            index = "time"
            [random]
            effects = "slope"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn two_row_file() {
        let m = ColumnMapping {
            subject: None,
            time: "t".into(),
            response: "y".into(),
            covariates: vec![],
        };
        let t = load_csv_reader("t,y\n1,2.5\n2,3.5\n".as_bytes(), &m, false).unwrap();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.n_subjects(), 2);
    }

    #[test]
    fn missing_response_column() {
        let m = ColumnMapping {
            subject: None,
            time: "t".into(),
            response: "y".into(),
            covariates: vec![],
        };
        let e = load_csv_reader("t,w\n1,2\n".as_bytes(), &m, false).unwrap_err();
        assert_eq!(e, GcaError::MissingColumn("y".into()));
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let m = ColumnMapping {
            subject: None,
            time: "t".into(),
            response: "y".into(),
            covariates: vec![],
        };
        match load_csv_reader("t,y\n1,2\n2,abc\n".as_bytes(), &m, false).unwrap_err() {
            GcaError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            load_csv_reader("t,y\n".as_bytes(), &m, false),
            Err(GcaError::EmptyData(_))
        ));
    }

    #[test]
    fn duplicates_rejected_unless_allowed() {
        let m = ColumnMapping {
            subject: Some("id".into()),
            time: "t".into(),
            response: "y".into(),
            covariates: vec![],
        };
        let csv = "id,t,y\na,1,2\na,1,3\n";
        assert!(load_csv_reader(csv.as_bytes(), &m, false).is_err());
        assert_eq!(load_csv_reader(csv.as_bytes(), &m, true).unwrap().n_rows(), 2);
    }

    #[test]
    fn chickweight_counts() {
        let t = chickweight();
        assert_eq!(t.n_rows(), 578);
        assert_eq!(t.n_subjects(), 50);
        assert_eq!(t.covariate("Diet").unwrap().levels, vec!["1", "2", "3", "4"]);
    }

    #[test]
    fn exclusions() {
        let t = chickweight();
        assert_eq!(apply_exclusions(&t, &[]).unwrap(), t);
        let t49 = apply_exclusions(&t, &["24".to_string()]).unwrap();
        assert_eq!(t49.n_subjects(), 49);
        assert_eq!(t49.exclusion_log.len(), 1);
        assert_eq!(
            apply_exclusions(&t, &["999".to_string()]).unwrap_err(),
            GcaError::UnknownSubject("999".into())
        );
        let all = t.subjects();
        assert!(matches!(apply_exclusions(&t, &all), Err(GcaError::EmptyData(_))));
    }

    #[test]
    fn chicken_design_shape() {
        let cfg = chicken_config();
        let table = cfg.load_table().unwrap();
        let (design, mm) = build_design(&table, &cfg).unwrap();
        assert_eq!(mm.p(), 1 + 4 * 3);
        assert!(!mm.column_names.iter().any(|n| n.contains("Diet1")));
        match design {
            Design::Clustered(d) => {
                assert_eq!(d.n_subjects(), 49);
                assert_eq!(d.q(), 1);
                let s = &d.subjects[0];
                assert_eq!(s.z[(3, 0)], s.t[3]);
            }
            _ => panic!("expected a clustered design"),
        }
    }

    #[test]
    fn intercept_only_is_ones() {
        let m = ColumnMapping {
            subject: None,
            time: "t".into(),
            response: "y".into(),
            covariates: vec![],
        };
        let table = load_csv_reader("t,y\n1,2\n2,3\n3,1\n".as_bytes(), &m, false).unwrap();
        let cfg = ModelFormulaConfig::from_toml_str(
            "[data]\npath = \"x.csv\"\ntime = \"t\"\nresponse = \"y\"\n",
        )
        .unwrap();
        let (design, mm) = build_design(&table, &cfg).unwrap();
        assert_eq!(mm.column_names, vec!["(Intercept)"]);
        match design {
            Design::Independent(d) => assert!(d.x.iter().all(|&v| v == 1.0)),
            _ => panic!("expected an independent design"),
        }
    }

    #[test]
    fn pancreas_design_has_six_columns() {
        let cfg = ModelFormulaConfig::from_toml_str(
            r#"
            [data]
            embedded = "pancreas_synthetic"
            [mean]
            linear_time = true
            spline = { family = "C", degree = 2, df = 4 }
            [variance]
            shape = "increasing_i"
            degree = 2
            df = 4
            index = "time"
            "#,
        )
        .unwrap();
        let table = cfg.load_table().unwrap();
        let (design, mm) = build_design(&table, &cfg).unwrap();
        assert_eq!(mm.p(), 6);
        assert!(matches!(design, Design::Independent(_)));
    }

    #[test]
    fn conflicting_variance_family_rejected() {
        let e = ModelFormulaConfig::from_toml_str(
            r#"
            [data]
            embedded = "chickweight"
            [variance]
            shape = "increasing_i"
            family = "C"
            degree = 2
            df = 4
            index = "time"
            "#,
        )
        .unwrap_err();
        assert!(matches!(e, GcaError::Config(_)));
    }

    #[test]
    fn degree_zero_mean_spline_maps_to_one() {
        let cfg = ModelFormulaConfig::from_toml_str(
            "[data]\nembedded = \"chickweight\"\n[mean]\nspline = { family = \"I\", degree = 0, df = 3 }\n",
        )
        .unwrap();
        assert_eq!(cfg.mean.spline.unwrap().degree, 1);
    }

    #[test]
    fn config_round_trip() {
        let cfg = chicken_config();
        let s = cfg.to_toml_string().unwrap();
        let back = ModelFormulaConfig::from_toml_str(&s).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rank_deficiency_is_named() {
        let m = ColumnMapping {
            subject: None,
            time: "t".into(),
            response: "y".into(),
            covariates: vec![CovariateSpec {
                name: "u".into(),
                kind: CovariateKind::Numeric,
                reference: None,
            }],
        };
        let table = load_csv_reader("t,y,u\n1,2,1\n2,3,2\n3,1,3\n4,2,4\n".as_bytes(), &m, false).unwrap();
        let cfg = ModelFormulaConfig::from_toml_str(
            "[data]\npath = \"x.csv\"\ntime = \"t\"\nresponse = \"y\"\ncovariates = [{ name = \"u\", kind = \"numeric\" }]\n[mean]\nlinear_time = true\ncovariates = [\"u\"]\n",
        )
        .unwrap();
        match build_design(&table, &cfg).unwrap_err() {
            GcaError::RankDeficient(msg) => assert!(msg.contains('u'), "{msg}"),
            e => panic!("unexpected {e}"),
        }
    }
}
