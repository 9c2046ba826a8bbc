//! SAE-feature group attribution: aggregate per-datapoint scores into
//! per-concept scores, plan concept-level filtering, and produce coverage
//! curves.

use crate::attribution::ScoreRecord;
use crate::data::{Label, LabeledExample};
use crate::error::{CoreError, Result};
use crate::sae::{active_features, FeatureActivation};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Signed influence aggregated over the datapoints a feature fires on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAttribution {
    pub feature_id: usize,
    /// Sum of member scores (= benign_sum + misaligned_sum).
    pub aggregate: f64,
    pub benign_sum: f64,
    pub misaligned_sum: f64,
    pub member_ids: Vec<u64>,
}

impl GroupAttribution {
    pub fn member_count(&self) -> usize {
        self.member_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDirection {
    Most,
    Least,
}

/// Concept-level removal plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPlan {
    pub target_fraction: f64,
    pub direction: FilterDirection,
    /// Features in removal order.
    pub removed_features: Vec<usize>,
    /// Union of member datapoints, ascending.
    pub removed_ids: Vec<u64>,
    pub achieved_fraction: f64,
    /// True when every concept was taken and coverage still fell short.
    pub shortfall: bool,
}

/// Aggregate signed scores per active feature, with a per-label breakdown.
/// Membership: feature f counts datapoint z iff f fires above the threshold
/// on z. Every scored example needs an activation record.
pub fn group_scores(
    records: &[ScoreRecord],
    activations: &[FeatureActivation],
    examples: &[LabeledExample],
    threshold: f64,
) -> Result<Vec<GroupAttribution>> {
    let act_by_id: BTreeMap<u64, &FeatureActivation> =
        activations.iter().map(|a| (a.example_id, a)).collect();
    let label_by_id: BTreeMap<u64, Label> = examples.iter().map(|e| (e.id, e.label)).collect();
    let mut groups: BTreeMap<usize, GroupAttribution> = BTreeMap::new();
    for record in records {
        let fa = act_by_id
            .get(&record.example_id)
            .ok_or(CoreError::MissingActivation {
                id: record.example_id,
            })?;
        let label = label_by_id
            .get(&record.example_id)
            .copied()
            .unwrap_or(Label::Benign);
        for feature in active_features(fa, threshold) {
            let entry = groups.entry(feature).or_insert_with(|| GroupAttribution {
                feature_id: feature,
                aggregate: 0.0,
                benign_sum: 0.0,
                misaligned_sum: 0.0,
                member_ids: Vec::new(),
            });
            entry.aggregate += record.score;
            match label {
                Label::Benign => entry.benign_sum += record.score,
                Label::Misaligned => entry.misaligned_sum += record.score,
            }
            entry.member_ids.push(record.example_id);
        }
    }
    let mut out: Vec<GroupAttribution> = groups.into_values().collect();
    for g in out.iter_mut() {
        g.member_ids.sort_unstable();
        g.member_ids.dedup();
    }
    Ok(out)
}

/// Order for "most influential first" (ties by feature id).
fn ordered_features(groups: &[GroupAttribution], direction: FilterDirection) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let (ga, gb) = (&groups[a], &groups[b]);
        let cmp = match direction {
            FilterDirection::Most => gb.aggregate.partial_cmp(&ga.aggregate).unwrap(),
            FilterDirection::Least => ga.aggregate.partial_cmp(&gb.aggregate).unwrap(),
        };
        cmp.then(ga.feature_id.cmp(&gb.feature_id))
    });
    order
}

/// Greedily take concepts in score order, unioning members until at least
/// `fraction` of the dataset is covered.
pub fn concept_filter_plan(
    groups: &[GroupAttribution],
    dataset_size: usize,
    fraction: f64,
    direction: FilterDirection,
) -> Result<FilterPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "filter fraction must be in (0, 1], got {fraction}"
        )));
    }
    if dataset_size == 0 {
        return Err(CoreError::EmptyDataset {
            context: "concept_filter_plan".into(),
        });
    }
    let mut removed: BTreeSet<u64> = BTreeSet::new();
    let mut removed_features = Vec::new();
    let mut shortfall = true;
    for idx in ordered_features(groups, direction) {
        let g = &groups[idx];
        removed_features.push(g.feature_id);
        removed.extend(g.member_ids.iter().copied());
        if removed.len() as f64 / dataset_size as f64 >= fraction {
            shortfall = false;
            break;
        }
    }
    let achieved_fraction = removed.len() as f64 / dataset_size as f64;
    Ok(FilterPlan {
        target_fraction: fraction,
        direction,
        removed_features,
        removed_ids: removed.into_iter().collect(),
        achieved_fraction,
        shortfall,
    })
}

/// Cumulative coverage of the top-k most influential concepts:
/// (k/|concepts|, |union of member sets|/dataset_size) for k = 1..=|concepts|.
pub fn coverage_curve(groups: &[GroupAttribution], dataset_size: usize) -> Vec<(f64, f64)> {
    let order = ordered_features(groups, FilterDirection::Most);
    let total = order.len();
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    let mut curve = Vec::with_capacity(total);
    for (k, idx) in order.into_iter().enumerate() {
        seen.extend(groups[idx].member_ids.iter().copied());
        curve.push((
            (k + 1) as f64 / total as f64,
            seen.len() as f64 / dataset_size as f64,
        ));
    }
    curve
}

pub fn write_group_report(path: &Path, groups: &[GroupAttribution]) -> Result<()> {
    let report: Vec<serde_json::Value> = groups
        .iter()
        .map(|g| {
            serde_json::json!({
                "id": g.feature_id,
                "aggregate": g.aggregate,
                "benign_sum": g.benign_sum,
                "misaligned_sum": g.misaligned_sum,
                "member_count": g.member_count(),
            })
        })
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &report)?;
    Ok(())
}

pub fn write_filter_plan(path: &Path, plan: &FilterPlan) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, plan)?;
    Ok(())
}
