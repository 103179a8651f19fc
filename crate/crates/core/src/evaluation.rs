//! Prediction with an "unknown" bucket and the two target metrics.
//!
//! A sample whose argmax falls in any negative class is predicted
//! "unknown". The average accuracy is the unweighted mean of per-class
//! accuracies over the shared classes present in the target set plus the
//! unknown row; the unknown accuracy is the recall of true
//! target-private samples.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::deployment::SsmWeight;
use crate::error::{Error, Result};
use crate::label_space::{ClassId, LabelSpace, SampleRole};
use crate::model::DeploymentModel;
use crate::nn::argmax;
use crate::procurement::stack_images;

/// A class id or the distinguished unknown bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Class(ClassId),
    Unknown,
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Prediction::Class(c) => write!(f, "{c}"),
            Prediction::Unknown => write!(f, "unknown"),
        }
    }
}

/// One scored sample. The true label exists only for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted: Prediction,
    pub true_label: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssm: Option<SsmWeight>,
}

/// Argmax over all K logits; negative indices collapse to unknown, ties
/// break toward the lowest index.
pub fn predict_with_unknown(logits: &ArrayView1<f64>, num_positive: usize) -> Prediction {
    let k = argmax(logits);
    if k < num_positive {
        Prediction::Class(k)
    } else {
        Prediction::Unknown
    }
}

/// Accuracy row for one evaluable class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: Prediction,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// The evaluation protocol's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Unweighted mean of per-class accuracies over the rows.
    pub t_avg: f64,
    /// Recall of the unknown row; absent in a closed-set evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_unk: Option<f64>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, label: Prediction) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Scores prediction records against a label space. True target-private
/// labels are remapped to unknown before scoring; classes without target
/// samples are excluded from the average.
pub fn evaluate(records: &[PredictionRecord], labels: &LabelSpace) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no prediction records".into()));
    }
    let mut per_truth: BTreeMap<Prediction, (usize, usize)> = BTreeMap::new();
    for record in records {
        if !labels.contains_target(record.true_label) {
            return Err(Error::Data(format!(
                "sample {}: true label {} is not in the declared target label set",
                record.sample_id, record.true_label
            )));
        }
        let truth = if labels.is_target_private(record.true_label) {
            Prediction::Unknown
        } else {
            Prediction::Class(record.true_label)
        };
        let entry = per_truth.entry(truth).or_insert((0, 0));
        entry.0 += 1;
        if record.predicted == truth {
            entry.1 += 1;
        }
    }
    let mut rows: Vec<MetricRow> = per_truth
        .into_iter()
        .map(|(label, (count, correct))| MetricRow {
            label,
            count,
            correct,
            accuracy: correct as f64 / count as f64,
        })
        .collect();
    // Class rows ascend, unknown last.
    rows.sort_by_key(|r| match r.label {
        Prediction::Class(c) => (0, c),
        Prediction::Unknown => (1, 0),
    });
    let t_avg = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    let t_unk = rows
        .iter()
        .find(|r| r.label == Prediction::Unknown)
        .map(|r| r.accuracy);
    Ok(MetricReport { t_avg, t_unk, rows })
}

/// Binned SSM counts per population over `[1, e]`, with means for the
/// ordering diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmHistogram {
    pub bin_edges: Vec<f64>,
    pub populations: Vec<(SampleRole, Vec<usize>)>,
    pub means: Vec<(SampleRole, f64)>,
}

pub fn ssm_histogram(values: &[(SampleRole, Vec<f64>)], num_bins: usize) -> SsmHistogram {
    assert!(num_bins >= 1);
    let lo = 1.0;
    let hi = std::f64::consts::E;
    let width = (hi - lo) / num_bins as f64;
    let bin_edges: Vec<f64> = (0..=num_bins).map(|i| lo + width * i as f64).collect();
    let mut populations = Vec::with_capacity(values.len());
    let mut means = Vec::with_capacity(values.len());
    for (role, vals) in values {
        let mut counts = vec![0usize; num_bins];
        for &v in vals {
            let idx = (((v - lo) / width).floor() as isize).clamp(0, num_bins as isize - 1);
            counts[idx as usize] += 1;
        }
        populations.push((*role, counts));
        let mean = if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        means.push((*role, mean));
    }
    SsmHistogram {
        bin_edges,
        populations,
        means,
    }
}

/// Nearest-center classification in u-space. Centers must cover distinct
/// classes; distance ties break toward the earlier center.
pub fn nearest_center_accuracy(
    centers: &Array2<f64>,
    center_labels: &[ClassId],
    probes: &Array2<f64>,
    probe_labels: &[ClassId],
) -> Result<f64> {
    if centers.nrows() != center_labels.len() {
        return Err(Error::InvalidInput("center/label count mismatch".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &c in center_labels {
        if !seen.insert(c) {
            return Err(Error::InvalidConfig(format!(
                "duplicate class {c} among one-shot samples"
            )));
        }
    }
    if probes.nrows() == 0 {
        return Err(Error::InvalidInput("no probe samples".into()));
    }
    let mut correct = 0usize;
    for (probe, &truth) in probes.rows().into_iter().zip(probe_labels) {
        let mut best = (f64::INFINITY, 0usize);
        for (i, center) in centers.rows().into_iter().enumerate() {
            let d2: f64 = probe
                .iter()
                .zip(center.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        if center_labels[best.1] == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / probe_labels.len() as f64)
}

/// One-shot recognition through the adapted extractor: each labeled
/// one-shot sample becomes a cluster center at `Ft(M(x))`, probes are
/// assigned to the nearest center.
pub fn one_shot_recognition(
    model: &DeploymentModel,
    one_shot: &[(Array3<f64>, ClassId)],
    probes: &[(Array3<f64>, ClassId)],
) -> Result<f64> {
    if one_shot.is_empty() {
        return Err(Error::InvalidInput("no one-shot samples".into()));
    }
    let shot_images: Vec<Array3<f64>> = one_shot.iter().map(|(img, _)| img.clone()).collect();
    let shot_labels: Vec<ClassId> = one_shot.iter().map(|(_, l)| *l).collect();
    let probe_images: Vec<Array3<f64>> = probes.iter().map(|(img, _)| img.clone()).collect();
    let probe_labels: Vec<ClassId> = probes.iter().map(|(_, l)| *l).collect();
    let centers = model.target_features(
        &model
            .frozen
            .backbone
            .forward_images(&stack_images(&shot_images)),
    );
    let embedded = model.target_features(
        &model
            .frozen
            .backbone
            .forward_images(&stack_images(&probe_images)),
    );
    nearest_center_accuracy(&centers, &shot_labels, &embedded, &probe_labels)
}

/// Category-gap grid: class universes split into shared/private parts
/// along both axes, one experiment per feasible cell.
#[derive(Debug, Clone)]
pub struct GridSpec {
    /// All class ids available to the grid, in assignment order.
    pub universe: Vec<ClassId>,
    /// Values of the source-private count (grid rows).
    pub source_private_counts: Vec<usize>,
    /// Values of the target-private count (grid columns).
    pub target_private_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub source_private: usize,
    pub target_private: usize,
    pub label_space: LabelSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellOutcome {
    Skipped { reason: String },
    Done { t_avg: f64, t_unk: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub source_private_counts: Vec<usize>,
    pub target_private_counts: Vec<usize>,
    /// `cells[row][col]` follows the two count axes.
    pub cells: Vec<Vec<CellOutcome>>,
}

/// Builds the label space of one grid cell: the first classes of the
/// universe are shared, then the source-private block, then the
/// target-private block. Returns `None` with a reason when infeasible.
pub fn grid_cell(
    universe: &[ClassId],
    source_private: usize,
    target_private: usize,
) -> std::result::Result<GridCell, String> {
    let total = universe.len();
    if source_private + target_private > total {
        return Err(format!(
            "universe of {total} classes cannot hold {source_private} + {target_private} private classes"
        ));
    }
    let shared = total - source_private - target_private;
    let source: Vec<ClassId> = universe[..shared]
        .iter()
        .chain(&universe[shared..shared + source_private])
        .copied()
        .collect();
    let target: Vec<ClassId> = universe[..shared]
        .iter()
        .chain(&universe[shared + source_private..shared + source_private + target_private])
        .copied()
        .collect();
    if source.len() < 2 {
        return Err("need at least 2 source classes for the negative table".into());
    }
    if target.is_empty() {
        return Err("empty target label set".into());
    }
    let label_space = LabelSpace::new(source, target).map_err(|e| e.to_string())?;
    Ok(GridCell {
        source_private,
        target_private,
        label_space,
    })
}

/// Runs `runner` on every feasible cell. Runner failures abort the grid;
/// infeasible cells are recorded and skipped.
pub fn category_gap_grid(
    spec: &GridSpec,
    runner: &mut dyn FnMut(&GridCell) -> Result<MetricReport>,
) -> Result<GridResult> {
    let mut cells = Vec::with_capacity(spec.source_private_counts.len());
    for &ns in &spec.source_private_counts {
        let mut row = Vec::with_capacity(spec.target_private_counts.len());
        for &nt in &spec.target_private_counts {
            match grid_cell(&spec.universe, ns, nt) {
                Err(reason) => row.push(CellOutcome::Skipped { reason }),
                Ok(cell) => {
                    let report = runner(&cell)?;
                    row.push(CellOutcome::Done {
                        t_avg: report.t_avg,
                        t_unk: report.t_unk,
                    });
                }
            }
        }
        cells.push(row);
    }
    Ok(GridResult {
        source_private_counts: spec.source_private_counts.clone(),
        target_private_counts: spec.target_private_counts.clone(),
        cells,
    })
}
