//! Top-1 accuracy, parameter and FLOP accounting, run reports, and markdown
//! result tables.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Role;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{LayerKind, Model, ModelSpec};
use crate::tensor::Tensor;
use crate::training::{InitKind, StrategyKind, TrainConfig};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows whose argmax matches the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape("top1_micro", logits.shape(), &[labels.len()]));
    }
    Ok(logits
        .rows()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count())
}

/// Fraction of samples whose highest logit is the true label.
pub fn top1_micro(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let correct = count_correct(logits, labels)?;
    Ok(correct as f64 / labels.len() as f64)
}

const EVAL_CHUNK: usize = 1024;

/// Top-1 micro accuracy of `model` on one split.
pub fn accuracy(model: &Model, dataset: &Dataset, split: Split) -> Result<f64> {
    let total = dataset.split_len(split);
    if total == 0 {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    let mut correct = 0;
    for (x, y) in dataset.batches(split, EVAL_CHUNK, None, 0)? {
        correct += count_correct(&model.forward(&x)?, &y)?;
    }
    Ok(correct as f64 / total as f64)
}

/// Encoder features for every sample, as a dataset sharing labels and splits.
pub fn embeddings(model: &Model, dataset: &Dataset) -> Result<Dataset> {
    let dim = model.spec().feature_dim();
    let mut data = Vec::with_capacity(dataset.len() * dim);
    let order: Vec<usize> = (0..dataset.len()).collect();
    for idx in order.chunks(EVAL_CHUNK) {
        data.extend_from_slice(model.embed(&dataset.features().select_rows(idx))?.data());
    }
    let features = Tensor::new(vec![dataset.len(), dim], data)?;
    Dataset::new(features, dataset.labels().to_vec(), dataset.num_classes(), dataset.splits().clone())
}

/// Closed-form trainable parameter count.
pub fn count_params(spec: &ModelSpec) -> u64 {
    let layer = |kind: &LayerKind| -> u64 {
        match *kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => (in_features * out_features + out_features) as u64,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (kernel * kernel * in_channels * out_channels + out_channels) as u64,
            _ => 0,
        }
    };
    let head = (spec.head.in_features * spec.head.out_features + spec.head.out_features) as u64;
    spec.layers.iter().map(|l| layer(&l.kind)).sum::<u64>() + head
}

/// Forward-pass FLOPs for an input of shape `[batch, ...]`.
///
/// Dense: `2 in out + out` per sample. Conv: `2 k^2 cin cout Ho Wo` plus one
/// bias add per output element. Mean pooling: `k^2` per output element.
/// Activations: one per element. Flatten is free.
pub fn count_flops(spec: &ModelSpec, input_shape: &[usize]) -> Result<u64> {
    if input_shape.len() != spec.input_shape.len() + 1 || input_shape[1..] != spec.input_shape[..] {
        let mut expected = vec![0];
        expected.extend_from_slice(&spec.input_shape);
        return Err(Error::shape("count_flops", input_shape, &expected));
    }
    let batch = input_shape[0] as u64;
    let shapes = spec.layer_shapes()?;
    let mut per_sample = 0u64;
    let mut prev: &[usize] = &spec.input_shape;
    for (layer, out) in spec.layers.iter().zip(&shapes) {
        let out_numel: usize = out.iter().product();
        per_sample += match layer.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => (2 * in_features * out_features + out_features) as u64,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let spatial = out[1] * out[2];
                (2 * kernel * kernel * in_channels * out_channels * spatial + out_channels * spatial) as u64
            }
            LayerKind::PoolMean { kernel, .. } => (out_numel * kernel * kernel) as u64,
            LayerKind::Flatten => 0,
            LayerKind::Activation { .. } => prev.iter().product::<usize>() as u64,
        };
        prev = out;
    }
    let h = spec.head;
    per_sample += (2 * h.in_features * h.out_features + h.out_features) as u64;
    Ok(per_sample * batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation accuracy, or train accuracy when the dataset has no val split.
    pub selection_accuracy: f64,
    pub lr: f64,
}

impl EpochLog {
    /// One machine-parsable log line.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} val_acc={:.6} lr={:.6e}",
            self.epoch, self.train_loss, self.selection_accuracy, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherProvenance {
    /// Model preset of the teacher.
    pub name: String,
    pub path: String,
    /// CRC-32 of the teacher checkpoint file.
    pub digest: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub role: Role,
    pub config: TrainConfig,
    pub augmentation: String,
    pub dataset_digest: u32,
    pub selection_split: Split,
    pub epochs: Vec<EpochLog>,
    pub selected_epoch: usize,
    pub test_accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub teacher: Option<TeacherProvenance>,
    /// Kept out of persisted reports so that reruns are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run report: {e}")))
    }

    /// Copy without the wall-clock time.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_seconds: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub section: String,
    pub model: String,
    pub init: String,
    pub strategy: String,
    pub teacher: String,
    pub top1: f64,
}

fn row_of(report: &RunReport) -> (bool, TableRow, (String, u8, u8, String, u64)) {
    let c = &report.config;
    let teacher_row = report.role == Role::Teacher;
    let (init, init_rank) = match (teacher_row, c.init) {
        (true, _) | (false, InitKind::Pretrained) => ("pretrained", 1),
        (false, InitKind::Scratch) => ("scratch", 0),
    };
    let (strategy, strategy_rank) = match (report.role, c.strategy) {
        (Role::Teacher, _) => ("linear-probe", 0),
        (Role::Pretrain, _) => ("pretrain", 0),
        (_, StrategyKind::Finetune) => ("finetune", 1),
        (_, StrategyKind::Distill) => ("distill", 2),
    };
    let teacher = report
        .teacher
        .as_ref()
        .map_or_else(|| "-".to_string(), |t| t.name.clone());
    let section = if teacher_row { "Teachers".to_string() } else { c.preset.clone() };
    let key = (c.preset.clone(), init_rank, strategy_rank, teacher.clone(), c.seed);
    let row = TableRow {
        section,
        model: c.preset.clone(),
        init: init.into(),
        strategy: strategy.into(),
        teacher,
        top1: report.test_accuracy,
    };
    (teacher_row, row, key)
}

/// Markdown tables: teachers first, then one section per student preset.
/// Rows are ordered by (preset, init, strategy, teacher, seed).
pub fn emit_table(reports: &[RunReport]) -> String {
    let mut rows: Vec<_> = reports.iter().map(row_of).collect();
    rows.sort_by(|a, b| match (a.0, b.0) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        _ => a.2.cmp(&b.2),
    });
    let mut out = String::new();
    let mut current: Option<String> = None;
    for (_, row, _) in &rows {
        if current.as_deref() != Some(row.section.as_str()) {
            if current.is_some() {
                out.push('\n');
            }
            writeln!(out, "### {}\n", row.section).unwrap();
            out.push_str("| Model | Init | Strategy | Teacher | Top-1 (%) |\n");
            out.push_str("|---|---|---|---|---|\n");
            current = Some(row.section.clone());
        }
        writeln!(
            out,
            "| {} | {} | {} | {} | {:.1} |",
            row.model,
            row.init,
            row.strategy,
            row.teacher,
            100.0 * row.top1
        )
        .unwrap();
    }
    out
}

/// Parses tables produced by [`emit_table`]; `top1` comes back as a fraction.
pub fn parse_table(text: &str) -> Vec<TableRow> {
    let mut section = String::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(s) = line.strip_prefix("### ") {
            section = s.trim().to_string();
            continue;
        }
        let cells: Vec<&str> = line
            .trim()
            .trim_matches('|')
            .split('|')
            .map(str::trim)
            .collect();
        if cells.len() != 5 || cells[0] == "Model" || cells[0].starts_with("---") {
            continue;
        }
        let Ok(pct) = cells[4].parse::<f64>() else {
            continue;
        };
        rows.push(TableRow {
            section: section.clone(),
            model: cells[0].into(),
            init: cells[1].into(),
            strategy: cells[2].into(),
            teacher: cells[3].into(),
            top1: pct / 100.0,
        });
    }
    rows
}

/// Mean and sample standard deviation of the test accuracy per
/// (preset, init, strategy, teacher) group, one markdown row each.
pub fn emit_summary(reports: &[RunReport]) -> String {
    type Group = (TableRow, (String, u8, u8, String), Vec<f64>);
    let mut groups: Vec<Group> = Vec::new();
    for r in reports {
        let (_, row, key) = row_of(r);
        let key = (key.0, key.1, key.2, key.3);
        match groups.iter_mut().find(|g| g.1 == key && g.0.section == row.section) {
            Some(g) => g.2.push(r.test_accuracy),
            None => {
                let acc = row.top1;
                groups.push((row, key, vec![acc]));
            }
        }
    }
    groups.sort_by(|a, b| {
        let ta = a.0.section == "Teachers";
        let tb = b.0.section == "Teachers";
        tb.cmp(&ta).then_with(|| a.1.cmp(&b.1))
    });
    let mut out = String::from("| Model | Init | Strategy | Teacher | Runs | Mean Top-1 (%) | Std |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (row, _, accs) in &groups {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.1} | {:.1} |",
            row.model,
            row.init,
            row.strategy,
            row.teacher,
            accs.len(),
            100.0 * mean,
            100.0 * std
        )
        .unwrap();
    }
    out
}
