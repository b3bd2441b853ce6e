//! Pre-collection planning.
//!
//! A [`DatasetPlan`] records which metadata dimensions will be collected and
//! the distribution the team expects for each of them. Plans are immutable
//! values: every mutation returns a new plan with `version + 1`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionKind {
    Categorical,
    Ordinal,
}

/// User-entered dimension before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionDraft {
    pub name: String,
    pub kind: DimensionKind,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DimensionDraft {
    pub fn categorical(name: &str, categories: &[&str], weights: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            kind: DimensionKind::Categorical,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            positions: None,
            weights: weights.to_vec(),
        }
    }

    pub fn ordinal(name: &str, categories: &[&str], weights: &[f64]) -> Self {
        Self {
            kind: DimensionKind::Ordinal,
            ..Self::categorical(name, categories, weights)
        }
    }

    pub fn with_positions(mut self, positions: &[f64]) -> Self {
        self.positions = Some(positions.to_vec());
        self
    }
}

/// A validated dimension with its normalized expected distribution.
///
/// `raw_weights` keeps what the user typed; `expected` is what every
/// comparison uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub kind: DimensionKind,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<f64>>,
    pub raw_weights: Vec<f64>,
    pub expected: Vec<f64>,
}

impl DimensionSpec {
    pub fn from_draft(draft: DimensionDraft) -> Result<Self> {
        if draft.name.trim().is_empty() {
            return Err(Error::Invalid("dimension name is empty".into()));
        }
        if draft.categories.is_empty() {
            return Err(Error::EmptyCategories(draft.name));
        }
        let mut seen = HashSet::new();
        for c in &draft.categories {
            if !seen.insert(c.as_str()) {
                return Err(Error::DuplicateCategory {
                    dimension: draft.name.clone(),
                    category: c.clone(),
                });
            }
        }
        if draft.weights.len() != draft.categories.len() {
            return Err(Error::Invalid(format!(
                "dimension `{}` has {} categories but {} weights",
                draft.name,
                draft.categories.len(),
                draft.weights.len()
            )));
        }
        if let Some(pos) = &draft.positions {
            check_positions(&draft.name, pos, draft.categories.len())?;
        }
        let expected = normalize_expected(&draft.weights)?;
        Ok(Self {
            name: draft.name,
            kind: draft.kind,
            categories: draft.categories,
            positions: draft.positions,
            raw_weights: draft.weights,
            expected,
        })
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    /// Positions used for transport distances: declared positions, or
    /// `0..n` when none were given.
    pub fn effective_positions(&self) -> Vec<f64> {
        match &self.positions {
            Some(p) => p.clone(),
            None => (0..self.categories.len()).map(|i| i as f64).collect(),
        }
    }
}

fn check_positions(name: &str, positions: &[f64], n: usize) -> Result<()> {
    if positions.len() != n {
        return Err(Error::Invalid(format!(
            "dimension `{name}` has {n} categories but {} positions",
            positions.len()
        )));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("positions of `{name}`")));
    }
    if positions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(format!(
            "positions of `{name}` are not strictly increasing"
        )));
    }
    Ok(())
}

/// Scale non-negative weights so they sum to one.
pub fn normalize_expected(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Empty("weight vector".into()));
    }
    for (index, &value) in raw.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::InvalidWeight { index, value });
        }
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

/// One answered questionnaire prompt, stored verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAnswer {
    pub prompt_id: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingGroups {
    pub dimension: String,
    pub absent: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflexiveRecord {
    pub answers: Vec<PromptAnswer>,
    pub team_declared: BTreeMap<String, BTreeSet<String>>,
    pub missing_notice: Vec<MissingGroups>,
    pub timestamp: DateTime<Utc>,
}

impl ReflexiveRecord {
    /// Human-readable notice listing the groups absent from the team.
    pub fn notice_text(&self) -> String {
        if self.missing_notice.is_empty() {
            return "Every group in the reference taxonomy is represented on the team.".into();
        }
        let mut out = String::from(
            "These groups, and their intersections, are not represented on the team. \
             Consider how their experiences and needs may differ from the ones that are:\n",
        );
        for m in &self.missing_notice {
            out.push_str(&format!("  {}: {}\n", m.dimension, m.absent.join(", ")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyDimension {
    pub name: String,
    pub categories: Vec<String>,
}

/// Reference demographic taxonomy against which team self-reports are
/// compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub dimensions: Vec<TaxonomyDimension>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        let dim = |name: &str, cats: &[&str]| TaxonomyDimension {
            name: name.into(),
            categories: cats.iter().map(|c| c.to_string()).collect(),
        };
        Self {
            dimensions: vec![
                dim("sex", &["female", "male", "intersex"]),
                dim("gender", &["woman", "man", "non-binary", "other"]),
                dim("age_band", &["18-25", "26-40", "41-60", "61+"]),
                dim("handedness", &["left", "right", "ambidextrous"]),
                dim(
                    "race_ethnicity",
                    &[
                        "american-indian-or-alaska-native",
                        "asian",
                        "black-or-african-american",
                        "hispanic-or-latino",
                        "middle-eastern-or-north-african",
                        "native-hawaiian-or-pacific-islander",
                        "white",
                        "multiracial",
                    ],
                ),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
}

/// Reflexive questionnaire. Loaded from a file so teams can extend it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub prompts: Vec<Prompt>,
}

impl Default for Questionnaire {
    fn default() -> Self {
        let p = |id: &str, text: &str| Prompt {
            id: id.into(),
            text: text.into(),
        };
        Self {
            prompts: vec![
                p("purpose", "What will the model built from this data be used for, and by whom?"),
                p("population", "Who do you intend the collected data to represent?"),
                p("team", "Describe the demographic makeup of the team designing this dataset."),
                p("exclusions", "Which people or conditions are you knowingly leaving out, and why?"),
                p("missing", "What's missing, in the context of your project?"),
            ],
        }
    }
}

impl Questionnaire {
    pub fn prompt(&self, id: &str) -> Option<&Prompt> {
        self.prompts.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub name: String,
    pub version: u64,
    pub dimensions: Vec<DimensionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflexive: Option<ReflexiveRecord>,
    pub created: DateTime<Utc>,
    pub modified: DateTime<Utc>,
}

pub fn create_plan(name: &str, drafts: Vec<DimensionDraft>) -> Result<DatasetPlan> {
    create_plan_at(name, drafts, Utc::now())
}

pub fn create_plan_at(
    name: &str,
    drafts: Vec<DimensionDraft>,
    now: DateTime<Utc>,
) -> Result<DatasetPlan> {
    if drafts.is_empty() {
        return Err(Error::Empty("plan needs at least one dimension".into()));
    }
    let mut names = HashSet::new();
    let mut dimensions = Vec::with_capacity(drafts.len());
    for draft in drafts {
        if !names.insert(draft.name.clone()) {
            return Err(Error::DuplicateDimension(draft.name));
        }
        dimensions.push(DimensionSpec::from_draft(draft)?);
    }
    Ok(DatasetPlan {
        name: name.to_string(),
        version: 1,
        dimensions,
        reflexive: None,
        created: now,
        modified: now,
    })
}

impl DatasetPlan {
    pub fn dimension(&self, name: &str) -> Option<&DimensionSpec> {
        self.dimensions.iter().find(|d| d.name == name)
    }

    pub fn dimension_names(&self) -> Vec<String> {
        self.dimensions.iter().map(|d| d.name.clone()).collect()
    }

    fn bumped(&self) -> DatasetPlan {
        let mut next = self.clone();
        next.version = self.version + 1;
        next.modified = Utc::now().max(self.modified);
        next
    }

    /// Replace the dimension with the draft's name, or append it if new.
    pub fn upsert_dimension(&self, draft: DimensionDraft) -> Result<DatasetPlan> {
        let spec = DimensionSpec::from_draft(draft)?;
        let mut next = self.bumped();
        match next.dimensions.iter_mut().find(|d| d.name == spec.name) {
            Some(slot) => *slot = spec,
            None => next.dimensions.push(spec),
        }
        Ok(next)
    }

    pub fn remove_dimension(&self, name: &str) -> Result<DatasetPlan> {
        if self.dimension(name).is_none() {
            return Err(Error::UnknownDimension(name.into()));
        }
        if self.dimensions.len() == 1 {
            return Err(Error::Invalid("cannot remove the last dimension".into()));
        }
        let mut next = self.bumped();
        next.dimensions.retain(|d| d.name != name);
        Ok(next)
    }

    /// Store questionnaire answers and the team's self-reported groups, and
    /// compute which reference groups are absent from the team.
    pub fn record_reflexive(
        &self,
        answers: Vec<PromptAnswer>,
        team_declared: BTreeMap<String, BTreeSet<String>>,
        reference: &Taxonomy,
    ) -> Result<DatasetPlan> {
        if reference.dimensions.is_empty() {
            return Err(Error::Empty("reference taxonomy".into()));
        }
        let mut ids = HashSet::new();
        for a in &answers {
            if !ids.insert(a.prompt_id.as_str()) {
                return Err(Error::DuplicateName(a.prompt_id.clone()));
            }
        }
        let missing_notice = missing_groups(&team_declared, reference)?;
        let mut next = self.bumped();
        next.reflexive = Some(ReflexiveRecord {
            answers,
            team_declared,
            missing_notice,
            timestamp: next.modified,
        });
        Ok(next)
    }

    /// Serialize to the on-disk plan document.
    pub fn to_document(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parse a plan document. No validation is performed here so that
    /// hand-edited files can be reported on by [`validate_plan`].
    pub fn from_document(text: &str) -> Result<DatasetPlan> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Reference categories absent from the team's declaration, per taxonomy
/// dimension, in taxonomy order.
pub fn missing_groups(
    team_declared: &BTreeMap<String, BTreeSet<String>>,
    reference: &Taxonomy,
) -> Result<Vec<MissingGroups>> {
    for dim in team_declared.keys() {
        if !reference.dimensions.iter().any(|d| &d.name == dim) {
            return Err(Error::UnknownDimension(dim.clone()));
        }
    }
    let empty = BTreeSet::new();
    Ok(reference
        .dimensions
        .iter()
        .filter_map(|dim| {
            let declared = team_declared.get(&dim.name).unwrap_or(&empty);
            let absent: Vec<String> = dim
                .categories
                .iter()
                .filter(|c| !declared.contains(*c))
                .cloned()
                .collect();
            (!absent.is_empty()).then(|| MissingGroups {
                dimension: dim.name.clone(),
                absent,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey(pub Vec<(String, String)>);

impl CellKey {
    pub fn label(&self) -> String {
        self.0
            .iter()
            .map(|(d, c)| format!("{d}={c}"))
            .collect::<Vec<_>>()
            .join("&")
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionCell {
    pub key: CellKey,
    pub expected_proportion: f64,
    pub observed_count: usize,
}

/// Resolve `dim_names` to plan dimensions, in plan order.
pub(crate) fn resolve_dimensions<'a>(
    plan: &'a DatasetPlan,
    dim_names: &[String],
) -> Result<Vec<&'a DimensionSpec>> {
    if dim_names.is_empty() {
        return Err(Error::Empty("dimension subset".into()));
    }
    let mut seen = HashSet::new();
    for n in dim_names {
        if !seen.insert(n.as_str()) {
            return Err(Error::DuplicateName(n.clone()));
        }
        if plan.dimension(n).is_none() {
            return Err(Error::UnknownDimension(n.clone()));
        }
    }
    Ok(plan
        .dimensions
        .iter()
        .filter(|d| seen.contains(d.name.as_str()))
        .collect())
}

/// Cartesian product of the named dimensions' categories, with expected
/// proportions taken as the product of the marginals.
pub fn enumerate_intersections(
    plan: &DatasetPlan,
    dim_names: &[String],
) -> Result<Vec<IntersectionCell>> {
    let dims = resolve_dimensions(plan, dim_names)?;
    let mut cells = vec![IntersectionCell {
        key: CellKey(Vec::new()),
        expected_proportion: 1.0,
        observed_count: 0,
    }];
    for dim in dims {
        let mut next = Vec::with_capacity(cells.len() * dim.categories.len());
        for cell in &cells {
            for (label, p) in dim.categories.iter().zip(&dim.expected) {
                let mut key = cell.key.0.clone();
                key.push((dim.name.clone(), label.clone()));
                next.push(IntersectionCell {
                    key: CellKey(key),
                    expected_proportion: cell.expected_proportion * p,
                    observed_count: 0,
                });
            }
        }
        cells = next;
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub dimension: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Check every plan invariant and report each violation. Never fails.
pub fn validate_plan(plan: &DatasetPlan) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |dim: Option<&str>, reason: String| {
        findings.push(Finding {
            dimension: dim.map(str::to_string),
            reason,
        })
    };
    if plan.dimensions.is_empty() {
        push(None, "plan has no dimensions".into());
    }
    if plan.version == 0 {
        push(None, "version must start at 1".into());
    }
    let mut names = HashSet::new();
    for dim in &plan.dimensions {
        let name = dim.name.as_str();
        if !names.insert(name) {
            push(Some(name), "duplicate dimension name".into());
        }
        if dim.categories.is_empty() {
            push(Some(name), "no categories".into());
        }
        let mut labels = HashSet::new();
        for c in &dim.categories {
            if !labels.insert(c.as_str()) {
                push(Some(name), format!("duplicate category label `{c}`"));
            }
        }
        if dim.expected.len() != dim.categories.len() {
            push(
                Some(name),
                format!(
                    "expected has {} entries for {} categories",
                    dim.expected.len(),
                    dim.categories.len()
                ),
            );
        }
        if dim.raw_weights.len() != dim.categories.len() {
            push(
                Some(name),
                format!(
                    "raw_weights has {} entries for {} categories",
                    dim.raw_weights.len(),
                    dim.categories.len()
                ),
            );
        }
        if dim.expected.iter().any(|p| !p.is_finite() || *p < 0.0) {
            push(Some(name), "expected has a negative or non-finite entry".into());
        } else {
            let sum: f64 = dim.expected.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                push(
                    Some(name),
                    format!("expected distribution is not normalized (sums to {sum})"),
                );
            }
        }
        if let Some(pos) = &dim.positions {
            if let Err(e) = check_positions(name, pos, dim.categories.len()) {
                push(Some(name), e.to_string());
            }
        }
    }
    ValidationReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sex_hand() -> DatasetPlan {
        create_plan(
            "imu",
            vec![
                DimensionDraft::categorical("sex", &["F", "M"], &[50.0, 50.0]),
                DimensionDraft::categorical("hand", &["L", "R"], &[1.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn create_plan_normalizes() {
        let plan = create_plan(
            "imu",
            vec![DimensionDraft::categorical("sex", &["F", "M"], &[50.0, 50.0])],
        )
        .unwrap();
        assert_eq!(plan.version, 1);
        assert_eq!(plan.dimensions[0].expected, vec![0.5, 0.5]);

        let plan = create_plan(
            "imu",
            vec![DimensionDraft::ordinal("age", &["18-25", "26-40", "41+"], &[30.0, 30.0, 60.0])],
        )
        .unwrap();
        assert_eq!(plan.dimensions[0].expected, vec![0.25, 0.25, 0.5]);
        assert_eq!(plan.dimensions[0].raw_weights, vec![30.0, 30.0, 60.0]);
    }

    #[test]
    fn create_plan_errors() {
        let err = create_plan(
            "imu",
            vec![DimensionDraft::categorical("hand", &["L", "R"], &[0.0, 0.0])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::AllZeroWeights));

        let err = create_plan(
            "imu",
            vec![
                DimensionDraft::categorical("hand", &["L", "R"], &[1.0, 1.0]),
                DimensionDraft::categorical("hand", &["L", "R"], &[1.0, 1.0]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateDimension(_)));

        let err =
            create_plan("imu", vec![DimensionDraft::categorical("hand", &[], &[])]).unwrap_err();
        assert!(matches!(err, Error::EmptyCategories(_)));

        assert!(create_plan("imu", vec![]).is_err());

        let err = create_plan(
            "imu",
            vec![DimensionDraft::ordinal("age", &["a", "b"], &[1.0, 1.0]).with_positions(&[2.0, 1.0])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_expected(&[30.0, 30.0, 60.0]).unwrap(), vec![0.25, 0.25, 0.5]);
        assert_eq!(normalize_expected(&[1.0]).unwrap(), vec![1.0]);
        assert_eq!(normalize_expected(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            normalize_expected(&[1.0, -1.0]),
            Err(Error::InvalidWeight { index: 1, .. })
        ));
        assert!(matches!(normalize_expected(&[0.0, 0.0]), Err(Error::AllZeroWeights)));
        assert!(normalize_expected(&[]).is_err());
    }

    #[test]
    fn reflexive_missing_notice() {
        let plan = sex_hand();
        let reference = Taxonomy {
            dimensions: vec![TaxonomyDimension {
                name: "gender".into(),
                categories: vec!["A".into(), "B".into(), "C".into()],
            }],
        };
        let declared: BTreeMap<_, _> =
            [("gender".to_string(), BTreeSet::from(["A".to_string()]))].into();
        let next = plan
            .record_reflexive(vec![], declared.clone(), &reference)
            .unwrap();
        assert_eq!(next.version, 2);
        let record = next.reflexive.as_ref().unwrap();
        assert_eq!(
            record.missing_notice,
            vec![MissingGroups {
                dimension: "gender".into(),
                absent: vec!["B".into(), "C".into()],
            }]
        );
        // recomputing from the stored inputs reproduces the notice
        assert_eq!(
            missing_groups(&record.team_declared, &reference).unwrap(),
            record.missing_notice
        );

        let all: BTreeMap<_, _> = [(
            "gender".to_string(),
            BTreeSet::from(["A".to_string(), "B".to_string(), "C".to_string()]),
        )]
        .into();
        let next = plan.record_reflexive(vec![], all, &reference).unwrap();
        assert!(next.reflexive.unwrap().missing_notice.is_empty());

        let unknown: BTreeMap<_, _> =
            [("unknown_dim".to_string(), BTreeSet::from(["X".to_string()]))].into();
        assert!(matches!(
            plan.record_reflexive(vec![], unknown, &reference),
            Err(Error::UnknownDimension(_))
        ));
    }

    #[test]
    fn reflexive_rejects_duplicate_answers() {
        let answer = PromptAnswer {
            prompt_id: "missing".into(),
            prompt: "?".into(),
            response: "older adults".into(),
        };
        let err = sex_hand()
            .record_reflexive(vec![answer.clone(), answer], BTreeMap::new(), &Taxonomy::default())
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateName(_)));
    }

    #[test]
    fn intersections() {
        let plan = sex_hand();
        let cells =
            enumerate_intersections(&plan, &["hand".into(), "sex".into()]).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.expected_proportion == 0.25));
        // plan order: sex before hand, sex varies slowest
        assert_eq!(cells[0].key.label(), "sex=F&hand=L");
        assert_eq!(cells[1].key.label(), "sex=F&hand=R");
        assert_eq!(cells[2].key.label(), "sex=M&hand=L");

        let plan = create_plan(
            "p",
            vec![DimensionDraft::ordinal("age", &["a", "b", "c"], &[30.0, 30.0, 60.0])],
        )
        .unwrap();
        let cells = enumerate_intersections(&plan, &["age".into()]).unwrap();
        let props: Vec<f64> = cells.iter().map(|c| c.expected_proportion).collect();
        assert_eq!(props, vec![0.25, 0.25, 0.5]);

        assert!(matches!(
            enumerate_intersections(&plan, &["nope".into()]),
            Err(Error::UnknownDimension(_))
        ));
        assert!(matches!(
            enumerate_intersections(&plan, &["age".into(), "age".into()]),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn validation_findings() {
        let plan = sex_hand();
        assert!(validate_plan(&plan).is_valid());

        let mut dup = plan.clone();
        dup.dimensions[0].categories[1] = "F".into();
        let report = validate_plan(&dup);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].dimension.as_deref(), Some("sex"));

        let mut edited = plan.clone();
        edited.dimensions[1].expected = vec![0.45, 0.45];
        let report = validate_plan(&edited);
        assert_eq!(report.findings.len(), 1);
        assert!(report.findings[0].reason.contains("normalized"));
    }

    #[test]
    fn document_round_trip_is_byte_stable() {
        let plan = sex_hand();
        let doc = plan.to_document().unwrap();
        let back = DatasetPlan::from_document(&doc).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_document().unwrap(), doc);
    }

    #[test]
    fn mutations_bump_version() {
        let plan = sex_hand();
        let v2 = plan
            .upsert_dimension(DimensionDraft::categorical("hand", &["L", "R"], &[1.0, 3.0]))
            .unwrap();
        assert_eq!(v2.version, 2);
        assert_eq!(v2.dimension("hand").unwrap().expected, vec![0.25, 0.75]);
        let v3 = v2.remove_dimension("hand").unwrap();
        assert_eq!(v3.version, 3);
        assert!(v3.modified >= v2.modified);
        assert_eq!(plan.version, 1);
    }

    proptest! {
        #[test]
        fn normalize_preserves_ratios(raw in prop::collection::vec(0.0f64..1e6, 1..12)) {
            prop_assume!(raw.iter().any(|w| *w > 0.0));
            let p = normalize_expected(&raw).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            let total: f64 = raw.iter().sum();
            for (w, q) in raw.iter().zip(&p) {
                if *w > 0.0 {
                    let rel = (q * total - w).abs() / w;
                    prop_assert!(rel <= 1e-12);
                }
            }
        }

        #[test]
        fn intersection_count_is_product(sizes in prop::collection::vec(1usize..5, 1..4)) {
            let drafts: Vec<DimensionDraft> = sizes.iter().enumerate().map(|(i, &n)| {
                let cats: Vec<String> = (0..n).map(|c| format!("c{c}")).collect();
                DimensionDraft {
                    name: format!("d{i}"),
                    kind: DimensionKind::Categorical,
                    categories: cats,
                    positions: None,
                    weights: (0..n).map(|c| c as f64 + 1.0).collect(),
                }
            }).collect();
            let plan = create_plan("p", drafts).unwrap();
            let cells = enumerate_intersections(&plan, &plan.dimension_names()).unwrap();
            prop_assert_eq!(cells.len(), sizes.iter().product::<usize>());
            let keys: HashSet<_> = cells.iter().map(|c| c.key.clone()).collect();
            prop_assert_eq!(keys.len(), cells.len());
            let total: f64 = cells.iter().map(|c| c.expected_proportion).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }
}
