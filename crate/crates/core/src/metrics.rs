//! Benchmark metrics: Top-1 accuracy at an IoU threshold, mean IoU, and
//! class / scene-complexity / response-strength breakdowns.

use crate::boxes::{iou, BoxXYWH};
use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::text::AttributeKind;
use std::collections::BTreeMap;

/// One evaluated sample.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub predicted: BoxXYWH,
    pub truth: BoxXYWH,
    pub class_label: ClassLabel,
    pub objects_in_scene: usize,
    pub strength_bin: Option<usize>,
}

/// Count, Top-1 fraction, and mean IoU of one stratum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub top1: f64,
    pub miou: f64,
}

/// Mean gate weights and leading attributes of one stratum.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActivationSummary {
    pub count: usize,
    pub mean_lambda: [f64; 4],
    pub top1_attribute: String,
    pub top2_attribute: String,
}

/// Gate weights of one grounded sample with its strata keys.
#[derive(Debug, Clone)]
pub struct ActivationEntry {
    pub lambda: [f64; 4],
    pub class_label: ClassLabel,
    pub strength_bin: Option<usize>,
}

/// Mean expert activations per response-strength bin and per class.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActivationProfile {
    pub per_strength_bin: BTreeMap<usize, ActivationSummary>,
    pub per_class: BTreeMap<String, ActivationSummary>,
}

/// Full evaluation report; serializes to a single JSON document.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub theta: f64,
    pub overall: Aggregate,
    /// Unweighted mean of per-class Top-1 over the classes present.
    pub class_mean_top1: f64,
    /// Unweighted mean of per-class mean IoU over the classes present.
    pub class_mean_miou: f64,
    pub per_class: BTreeMap<String, Aggregate>,
    pub per_complexity: BTreeMap<usize, Aggregate>,
    pub per_strength_bin: BTreeMap<usize, Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activations: Option<ActivationProfile>,
}

pub const REPORT_VERSION: u32 = 1;

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&theta) || theta <= 0.0 {
        return Err(Error::InvalidArgument(format!("theta {theta} outside (0, 1)")));
    }
    Ok(())
}

/// Fraction of records whose IoU strictly exceeds `theta`.
pub fn top1_acc(records: &[EvalRecord], theta: f64) -> Result<f64> {
    check_theta(theta)?;
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no records to score".into()));
    }
    let hits = records.iter().filter(|r| iou(&r.predicted, &r.truth) > theta).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Arithmetic mean of per-record IoU.
pub fn miou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no records to score".into()));
    }
    let sum: f64 = records.iter().map(|r| iou(&r.predicted, &r.truth)).sum();
    Ok(sum / records.len() as f64)
}

fn aggregate(records: &[&EvalRecord], theta: f64) -> Aggregate {
    let count = records.len();
    let mut hits = 0usize;
    let mut iou_sum = 0.0;
    for r in records {
        let v = iou(&r.predicted, &r.truth);
        if v > theta {
            hits += 1;
        }
        iou_sum += v;
    }
    Aggregate { count, top1: hits as f64 / count as f64, miou: iou_sum / count as f64 }
}

/// Aggregate records into overall, per-class, per-complexity, and
/// per-strength-bin statistics.
pub fn report(records: &[EvalRecord], theta: f64) -> Result<MetricsReport> {
    check_theta(theta)?;
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no records to aggregate".into()));
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let overall = aggregate(&all, theta);

    let mut per_class = BTreeMap::new();
    for class in ClassLabel::ALL {
        let group: Vec<&EvalRecord> =
            records.iter().filter(|r| r.class_label == class).collect();
        if !group.is_empty() {
            per_class.insert(class.name().to_string(), aggregate(&group, theta));
        }
    }
    let class_mean_top1 =
        per_class.values().map(|a| a.top1).sum::<f64>() / per_class.len() as f64;
    let class_mean_miou =
        per_class.values().map(|a| a.miou).sum::<f64>() / per_class.len() as f64;

    let mut per_complexity = BTreeMap::new();
    let mut buckets: Vec<usize> = records.iter().map(|r| r.objects_in_scene).collect();
    buckets.sort_unstable();
    buckets.dedup();
    for bucket in buckets {
        let group: Vec<&EvalRecord> =
            records.iter().filter(|r| r.objects_in_scene == bucket).collect();
        per_complexity.insert(bucket, aggregate(&group, theta));
    }

    let mut per_strength_bin = BTreeMap::new();
    for bin in 1..=crate::event::STRENGTH_BINS {
        let group: Vec<&EvalRecord> =
            records.iter().filter(|r| r.strength_bin == Some(bin)).collect();
        if !group.is_empty() {
            per_strength_bin.insert(bin, aggregate(&group, theta));
        }
    }

    Ok(MetricsReport {
        version: REPORT_VERSION,
        theta,
        overall,
        class_mean_top1,
        class_mean_miou,
        per_class,
        per_complexity,
        per_strength_bin,
        activations: None,
    })
}

fn summarize(entries: &[&ActivationEntry]) -> ActivationSummary {
    let count = entries.len();
    let mut mean = [0.0; 4];
    for e in entries {
        for (m, l) in mean.iter_mut().zip(&e.lambda) {
            *m += l;
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    // leading attributes; ties resolve in fixed attribute order
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| mean[b].partial_cmp(&mean[a]).unwrap().then(a.cmp(&b)));
    ActivationSummary {
        count,
        mean_lambda: mean,
        top1_attribute: AttributeKind::ALL[order[0]].name().to_string(),
        top2_attribute: AttributeKind::ALL[order[1]].name().to_string(),
    }
}

/// Mean gate-weight vectors per strength bin and per class, with the top-1
/// and top-2 attribute identities of each stratum.
pub fn expert_activation_profile(entries: &[ActivationEntry]) -> Result<ActivationProfile> {
    if entries.is_empty() {
        return Err(Error::UndefinedMetric("no activations to profile".into()));
    }
    let mut profile = ActivationProfile::default();
    for bin in 1..=crate::event::STRENGTH_BINS {
        let group: Vec<&ActivationEntry> =
            entries.iter().filter(|e| e.strength_bin == Some(bin)).collect();
        if !group.is_empty() {
            profile.per_strength_bin.insert(bin, summarize(&group));
        }
    }
    for class in ClassLabel::ALL {
        let group: Vec<&ActivationEntry> =
            entries.iter().filter(|e| e.class_label == class).collect();
        if !group.is_empty() {
            profile.per_class.insert(class.name().to_string(), summarize(&group));
        }
    }
    Ok(profile)
}
