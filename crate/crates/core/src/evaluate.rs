//! Metrics and reporting: accuracy, accuracy-vs-coverage curves, confusion
//! matrices, repeat-evaluation consistency, the per-source ensemble baseline
//! and the report writer (CSV tables plus SVG plots).

use crate::calibrate::{make_profile, ScoredPrediction};
use crate::error::{Error, Result};
use crate::model::{MaskState, MultiModalNet};
use crate::netprims::{softmax, softmax_cross_entropy, Grads, Linear, Optimizer, OptimizerKind, ParamStore, Tensor2};
use crate::scalar::Scalar;
use crate::train::PredRow;
use crate::types::{CalibrationMode, CalibrationProfile, Prediction, SourceId, StoneRecord, Task};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// correct / total over prediction rows.
pub fn accuracy(rows: &[PredRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    Ok(rows.iter().filter(|r| r.correct()).count() as f64 / rows.len() as f64)
}

pub fn task_from_classes(classes: usize) -> Result<Task> {
    match classes {
        4 => Ok(Task::Od),
        2 => Ok(Task::Td),
        n => Err(Error::InvalidInput(format!("no task has {n} classes"))),
    }
}

/// Rows → scored predictions (probabilities re-validated on the way).
pub fn scored_from_rows(rows: &[PredRow]) -> Result<Vec<ScoredPrediction>> {
    let Some(first) = rows.first() else { return Ok(Vec::new()) };
    let task = task_from_classes(first.probs.len())?;
    rows.iter()
        .map(|r| {
            let pred = Prediction::new(r.probs.clone(), task)?;
            Ok(ScoredPrediction::from_truth(pred, r.true_label))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub coverage: f64,
    pub accuracy: f64,
}

/// Accuracy over the accepted subset, swept over thresholds at each distinct
/// confidence (ascending), so coverage strictly decreases along the sweep and
/// the first point covers everything.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCurve {
    pub points: Vec<CurvePoint>,
}

pub fn coverage_curve(scored: &[ScoredPrediction]) -> Result<CoverageCurve> {
    if scored.is_empty() {
        return Err(Error::InvalidInput("coverage curve of an empty set".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a].confidence().partial_cmp(&scored[b].confidence()).expect("finite")
    });
    let n = scored.len();
    let mut suffix_correct = vec![0usize; n + 1];
    for k in (0..n).rev() {
        suffix_correct[k] = suffix_correct[k + 1] + usize::from(scored[order[k]].correct);
    }
    let mut points = Vec::new();
    for k in 0..n {
        if k > 0 && scored[order[k]].confidence() == scored[order[k - 1]].confidence() {
            continue;
        }
        let retained = n - k;
        points.push(CurvePoint {
            coverage: retained as f64 / n as f64,
            accuracy: suffix_correct[k] as f64 / retained as f64,
        });
    }
    Ok(CoverageCurve { points })
}

impl CoverageCurve {
    /// Accuracy at each requested coverage fraction: the sweep point with the
    /// smallest coverage still ≥ the request (every curve includes coverage
    /// 1, so any fraction ≤ 1 resolves).
    pub fn resample(&self, grid: &[f64]) -> Result<CoverageCurve> {
        let mut points = Vec::with_capacity(grid.len());
        for &g in grid {
            let best = self
                .points
                .iter()
                .filter(|p| p.coverage >= g)
                .min_by(|a, b| a.coverage.partial_cmp(&b.coverage).expect("finite"))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("no curve point covers fraction {g}"))
                })?;
            points.push(CurvePoint { coverage: g, accuracy: best.accuracy });
        }
        Ok(CoverageCurve { points })
    }

    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::from("coverage,accuracy\n");
        for p in &self.points {
            let _ = writeln!(text, "{},{}", p.coverage, p.accuracy);
        }
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let coverage = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse { line: i + 1, msg: "bad coverage".into() })?;
            let accuracy = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse { line: i + 1, msg: "bad accuracy".into() })?;
            points.push(CurvePoint { coverage, accuracy });
        }
        Ok(CoverageCurve { points })
    }
}

/// Confusion counts over (true, predicted) pairs; rows are the true class.
pub fn confusion_matrix(pairs: &[(usize, usize)], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut matrix = vec![vec![0usize; classes]; classes];
    for &(truth, pred) in pairs {
        if truth >= classes || pred >= classes {
            return Err(Error::InvalidInput(format!(
                "label pair ({truth}, {pred}) out of range for {classes} classes"
            )));
        }
        matrix[truth][pred] += 1;
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Consecutive evaluations of each stone (default).
    Consecutive,
    /// Every pair of evaluations of each stone.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOutcome {
    /// Both accepted, same label.
    Consistent,
    /// Both accepted, different labels.
    Inconsistent,
    /// At least one side abstained.
    AbstentionInvolved,
}

impl PairOutcome {
    pub fn name(self) -> &'static str {
        match self {
            PairOutcome::Consistent => "consistent",
            PairOutcome::Inconsistent => "inconsistent",
            PairOutcome::AbstentionInvolved => "abstention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatPair {
    pub stone_id: String,
    pub t0: i64,
    pub t1: i64,
    pub label0: usize,
    pub label1: usize,
    pub accepted0: bool,
    pub accepted1: bool,
    pub outcome: PairOutcome,
}

/// Repeat-evaluation analysis at one threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsistencyReport {
    pub pairs: Vec<RepeatPair>,
    pub consistent: usize,
    pub inconsistent: usize,
    pub abstention_involved: usize,
}

impl ConsistencyReport {
    pub fn total_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// The identities of inconsistent pairs, for set-inclusion checks across
    /// thresholds.
    pub fn inconsistent_keys(&self) -> Vec<(String, i64, i64)> {
        self.pairs
            .iter()
            .filter(|p| p.outcome == PairOutcome::Inconsistent)
            .map(|p| (p.stone_id.clone(), p.t0, p.t1))
            .collect()
    }
}

/// Classifies repeat pairs from prediction rows: a prediction is accepted
/// when its confidence is ≥ threshold.
pub fn consistency_from_rows(rows: &[PredRow], threshold: f64, pairing: Pairing) -> ConsistencyReport {
    let mut by_stone: BTreeMap<&str, Vec<&PredRow>> = BTreeMap::new();
    for row in rows {
        by_stone.entry(row.stone_id.as_str()).or_default().push(row);
    }
    let mut report = ConsistencyReport::default();
    for (stone, mut evals) in by_stone {
        if evals.len() < 2 {
            continue;
        }
        evals.sort_by_key(|r| r.evaluation_time);
        let mut pairs: Vec<(&PredRow, &PredRow)> = Vec::new();
        match pairing {
            Pairing::Consecutive => {
                for w in evals.windows(2) {
                    pairs.push((w[0], w[1]));
                }
            }
            Pairing::AllPairs => {
                for i in 0..evals.len() {
                    for j in i + 1..evals.len() {
                        pairs.push((evals[i], evals[j]));
                    }
                }
            }
        }
        for (a, b) in pairs {
            let accepted0 = a.confidence() >= threshold;
            let accepted1 = b.confidence() >= threshold;
            let (label0, label1) = (a.predicted_label(), b.predicted_label());
            let outcome = if !(accepted0 && accepted1) {
                PairOutcome::AbstentionInvolved
            } else if label0 == label1 {
                PairOutcome::Consistent
            } else {
                PairOutcome::Inconsistent
            };
            match outcome {
                PairOutcome::Consistent => report.consistent += 1,
                PairOutcome::Inconsistent => report.inconsistent += 1,
                PairOutcome::AbstentionInvolved => report.abstention_involved += 1,
            }
            report.pairs.push(RepeatPair {
                stone_id: stone.to_string(),
                t0: a.evaluation_time,
                t1: b.evaluation_time,
                label0,
                label1,
                accepted0,
                accepted1,
                outcome,
            });
        }
    }
    report
}

/// Predicts every record with the model and classifies its repeat pairs
/// under the profile's threshold. Stones without repeats contribute nothing;
/// no repeats at all is an empty report, not an error.
pub fn consistency_report<F: Scalar>(
    records: &[StoneRecord],
    model: &MultiModalNet<F>,
    profile: &CalibrationProfile,
    pairing: Pairing,
) -> Result<ConsistencyReport> {
    let task = model.config().task;
    let mut rows = Vec::new();
    for record in records {
        match model.forward(record, &MaskState::none()) {
            Ok(pred) => rows.push(PredRow {
                stone_id: record.stone_id.clone(),
                evaluation_time: record.evaluation_time,
                true_label: record.label(task).unwrap_or(0),
                probs: pred.probs().to_vec(),
            }),
            Err(Error::NoUsableData(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(consistency_from_rows(&rows, profile.threshold, pairing))
}

/// Linear + softmax meta-model over the concatenated probability vectors of
/// frozen per-source classifiers.
pub struct EnsembleBaseline<F: Scalar> {
    pub sources: Vec<SourceId>,
    store: ParamStore<F>,
    meta: Linear,
    classes: usize,
}

impl<F: Scalar> EnsembleBaseline<F> {
    pub fn new(sources: Vec<SourceId>, classes: usize, seed: u64) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidInput("ensemble needs at least one source".into()));
        }
        let mut store = ParamStore::new();
        let meta = Linear::init(&mut store, "meta", sources.len() * classes, classes, seed)?;
        Ok(EnsembleBaseline { sources, store, meta, classes })
    }

    /// Explicit meta weights (row-major in_dim × classes) for analytic tests.
    pub fn with_weights(
        sources: Vec<SourceId>,
        classes: usize,
        weights: &[f64],
        bias: &[f64],
    ) -> Result<Self> {
        let mut e = Self::new(sources, classes, 0)?;
        if weights.len() != e.meta.in_dim * classes || bias.len() != classes {
            return Err(Error::Shape("meta weight shape mismatch".into()));
        }
        let w: Vec<F> = weights.iter().map(|&v| F::of(v)).collect();
        e.store.value_mut(e.meta.w).copy_from_slice(&w);
        let b: Vec<F> = bias.iter().map(|&v| F::of(v)).collect();
        e.store.value_mut(e.meta.b).copy_from_slice(&b);
        Ok(e)
    }

    fn check_input(&self, per_source_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if per_source_probs.len() != self.sources.len() {
            return Err(Error::InvalidInput(format!(
                "ensemble expects {} source predictions, got {}",
                self.sources.len(),
                per_source_probs.len()
            )));
        }
        let mut flat = Vec::with_capacity(self.sources.len() * self.classes);
        for probs in per_source_probs {
            if probs.len() != self.classes {
                return Err(Error::InvalidInput(format!(
                    "source prediction has {} classes, expected {}",
                    probs.len(),
                    self.classes
                )));
            }
            flat.extend_from_slice(probs);
        }
        Ok(flat)
    }

    /// Trains the meta layer by full-batch gradient descent on held-in
    /// predictions.
    pub fn train(&mut self, inputs: &[Vec<f64>], labels: &[usize], epochs: usize, lr: f64) -> Result<()> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::InvalidInput("ensemble training needs aligned inputs".into()));
        }
        let rows: Vec<Vec<F>> = inputs
            .iter()
            .map(|i| i.iter().map(|&v| F::of(v)).collect())
            .collect();
        let x = Tensor2::from_rows(&rows)?;
        let mut opt = Optimizer::new(OptimizerKind::adam(), lr);
        for _ in 0..epochs {
            let logits = self.meta.forward(&self.store, &x)?;
            let mut dlogits = Tensor2::zeros(x.rows(), self.classes);
            for r in 0..x.rows() {
                let (_, grad) = softmax_cross_entropy(logits.row(r), labels[r])?;
                let scale = F::of(1.0 / x.rows() as f64);
                for (d, g) in dlogits.row_mut(r).iter_mut().zip(grad) {
                    *d = g * scale;
                }
            }
            let mut grads = Grads::zeros_like(&self.store);
            self.meta.backward(&self.store, &x, &dlogits, &mut grads);
            self.store.add_grads(&grads);
            opt.step(&mut self.store)?;
        }
        Ok(())
    }

    pub fn predict(&self, per_source_probs: &[Vec<f64>]) -> Result<Prediction> {
        let flat = self.check_input(per_source_probs)?;
        let x = Tensor2::from_vec(1, flat.len(), flat.into_iter().map(F::of).collect())?;
        let logits = self.meta.forward(&self.store, &x)?;
        let logits64: Vec<f64> = logits.row(0).iter().map(|&v| v.as_f64()).collect();
        Prediction::new(softmax(&logits64), task_from_classes(self.classes)?)
    }
}

/// Per-source model predictions for one record, in ensemble source order.
pub fn ensemble_inputs<F: Scalar>(
    models: &[&MultiModalNet<F>],
    record: &StoneRecord,
) -> Result<Vec<Vec<f64>>> {
    models
        .iter()
        .map(|m| m.forward(record, &MaskState::none()).map(|p| p.probs().to_vec()))
        .collect()
}

/// Builds the combined classifier from frozen per-source models: scores the
/// meta-training records with each model and fits the linear meta layer.
pub fn ensemble_baseline<F: Scalar>(
    models: &[&MultiModalNet<F>],
    meta_train: &[&StoneRecord],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<EnsembleBaseline<F>> {
    if models.is_empty() {
        return Err(Error::InvalidInput("ensemble needs at least one model".into()));
    }
    let task = models[0].config().task;
    if models.iter().any(|m| m.config().task != task) {
        return Err(Error::InvalidInput("ensemble models must share one task".into()));
    }
    let sources: Vec<SourceId> = models
        .iter()
        .map(|m| {
            let allowed = &m.config().allowed_sources;
            if allowed.len() != 1 {
                return Err(Error::InvalidInput(
                    "ensemble members must be single-source models".into(),
                ));
            }
            Ok(allowed[0])
        })
        .collect::<Result<_>>()?;

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in meta_train {
        let Some(label) = record.label(task) else { continue };
        let probs = ensemble_inputs(models, record)?;
        inputs.push(probs.concat());
        labels.push(label);
    }
    let mut ensemble = EnsembleBaseline::new(sources, task.class_count(), seed)?;
    ensemble.train(&inputs, &labels, epochs, lr)?;
    Ok(ensemble)
}

fn fmt_pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Reads a run directory's prediction artifacts and writes the report:
/// operating-mode summary, coverage curves (pooled and fold-averaged),
/// per-mode confusion matrices, consistency tables when repeats exist, and
/// SVG plots. Outputs are deterministic functions of the inputs.
pub fn emit_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let test_path = run_dir.join("test_predictions.csv");
    let train_path = run_dir.join("train_predictions.csv");
    if !test_path.exists() {
        return Err(Error::MissingArtifact(test_path.display().to_string()));
    }
    if !train_path.exists() {
        return Err(Error::MissingArtifact(train_path.display().to_string()));
    }
    let test_rows = crate::train::read_predictions_csv(&test_path)?;
    let train_rows = crate::train::read_predictions_csv(&train_path)?;
    if test_rows.is_empty() || train_rows.is_empty() {
        return Err(Error::MissingArtifact("empty prediction artifacts".into()));
    }
    let task = task_from_classes(test_rows[0].probs.len())?;
    let classes = task.class_count();
    let scored_train = scored_from_rows(&train_rows)?;
    let scored_test = scored_from_rows(&test_rows)?;

    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let mut written = Vec::new();

    // Operating-mode summary (calibration target, coverage, test accuracy).
    let mut summary = String::from(
        "mode,calibration_accuracy,threshold,stones_above_threshold_pct,test_accuracy_pct\n",
    );
    let mut profiles = Vec::new();
    for mode in CalibrationMode::ALL {
        let profile = make_profile(mode, &scored_train)?;
        let accepted: Vec<&PredRow> =
            test_rows.iter().filter(|r| r.confidence() >= profile.threshold).collect();
        let coverage = accepted.len() as f64 / test_rows.len() as f64;
        let acc = if accepted.is_empty() {
            String::from("na")
        } else {
            fmt_pct(accepted.iter().filter(|r| r.correct()).count() as f64 / accepted.len() as f64)
        };
        let eps = profile.epsilon.map_or_else(|| "none".to_string(), |e| fmt_pct(e));
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            mode.name(),
            eps,
            profile.threshold,
            fmt_pct(coverage),
            acc
        );
        let profile_path = run_dir.join(format!("calibration_{}.json", mode.name()));
        crate::calibrate::save_profile(&profile, &profile_path)?;
        written.push(profile_path);
        profiles.push(profile);
    }
    let summary_path = report_dir.join("summary.csv");
    std::fs::write(&summary_path, summary)?;
    written.push(summary_path);

    // Coverage curves: pooled, and the mean of per-fold curves on a common
    // coverage grid.
    let pooled_curve = coverage_curve(&scored_test)?;
    let pooled_path = report_dir.join("coverage_pooled.csv");
    pooled_curve.to_csv(&pooled_path)?;
    written.push(pooled_path);

    let mut fold_curves = Vec::new();
    for fold in 0.. {
        let path = run_dir.join(format!("fold_{fold}")).join("test_preds.csv");
        if !path.exists() {
            break;
        }
        let rows = crate::train::read_predictions_csv(&path)?;
        if rows.is_empty() {
            continue;
        }
        fold_curves.push(coverage_curve(&scored_from_rows(&rows)?)?);
    }
    let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let mut curve_series: Vec<(String, CoverageCurve)> =
        vec![("pooled".to_string(), pooled_curve)];
    if fold_curves.len() >= 2 {
        let resampled: Vec<CoverageCurve> =
            fold_curves.iter().map(|c| c.resample(&grid)).collect::<Result<_>>()?;
        let mean = crate::train::aggregate_curves(&resampled)?;
        let mean_path = report_dir.join("coverage_mean.csv");
        mean.to_csv(&mean_path)?;
        written.push(mean_path);
        curve_series.push(("fold-mean".to_string(), mean));
    }
    let coverage_svg = report_dir.join("coverage.svg");
    svg_curves(&coverage_svg, "Accuracy vs stones above threshold", &curve_series)?;
    written.push(coverage_svg);

    // Confusion matrices per mode (accepted predictions only; abstentions are
    // counted separately in the summary's coverage column).
    for profile in &profiles {
        let pairs: Vec<(usize, usize)> = test_rows
            .iter()
            .filter(|r| r.confidence() >= profile.threshold)
            .map(|r| (r.true_label, r.predicted_label()))
            .collect();
        let matrix = confusion_matrix(&pairs, classes)?;
        let mut text = String::from("true\\predicted");
        for c in 0..classes {
            let _ = write!(text, ",{}", task.class_name(c)?);
        }
        text.push('\n');
        for (t, row) in matrix.iter().enumerate() {
            let _ = write!(text, "{}", task.class_name(t)?);
            for &count in row {
                let _ = write!(text, ",{count}");
            }
            text.push('\n');
        }
        let path = report_dir.join(format!("confusion_{}.csv", profile.mode.name()));
        std::fs::write(&path, text)?;
        written.push(path);
        let svg = report_dir.join(format!("confusion_{}.svg", profile.mode.name()));
        svg_heatmap(&svg, &format!("Confusion ({})", profile.mode.name()), &matrix, task)?;
        written.push(svg);
    }

    // Consistency tables when the test pool contains repeat evaluations.
    let has_repeats = {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &test_rows {
            *counts.entry(r.stone_id.as_str()).or_default() += 1;
        }
        counts.values().any(|&c| c > 1)
    };
    if has_repeats {
        for profile in &profiles {
            let report =
                consistency_from_rows(&test_rows, profile.threshold, Pairing::Consecutive);
            let mut text =
                String::from("stone_id,t0,t1,label0,label1,accepted0,accepted1,outcome\n");
            for p in &report.pairs {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{},{},{}",
                    p.stone_id, p.t0, p.t1, p.label0, p.label1, p.accepted0, p.accepted1,
                    p.outcome.name()
                );
            }
            let path = report_dir.join(format!("consistency_{}.csv", profile.mode.name()));
            std::fs::write(&path, text)?;
            written.push(path);
            let svg = report_dir.join(format!("consistency_{}.svg", profile.mode.name()));
            svg_consistency(&svg, &format!("Repeat evaluations ({})", profile.mode.name()), &report)?;
            written.push(svg);
        }
    }

    Ok(written)
}

fn svg_header(width: usize, height: usize, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
        width / 2
    )
}

const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

fn svg_curves(path: &Path, title: &str, series: &[(String, CoverageCurve)]) -> Result<()> {
    let (w, h, ml, mb) = (520usize, 360usize, 60usize, 50usize);
    let plot_w = (w - ml - 20) as f64;
    let plot_h = (h - mb - 40) as f64;
    let x_of = |coverage: f64| ml as f64 + coverage * plot_w;
    let y_of = |accuracy: f64| 40.0 + (1.0 - accuracy) * plot_h;
    let mut svg = svg_header(w, h, title);
    let _ = write!(
        svg,
        "<rect x=\"{ml}\" y=\"40\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#333\"/>\n"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{:.0}%</text>\n",
            x_of(f),
            h - mb + 15,
            100.0 * f
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.0}%</text>\n",
            ml - 5,
            y_of(f) + 3.0,
            100.0 * f
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">stones above threshold</text>\n",
        ml + plot_w as usize / 2,
        h - 10
    );
    for (i, (name, curve)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.coverage), y_of(p.accuracy)))
            .collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            ml + 10,
            55 + 15 * i
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn svg_heatmap(path: &Path, title: &str, matrix: &[Vec<usize>], task: Task) -> Result<()> {
    let classes = matrix.len();
    let cell = 60usize;
    let (ml, mt) = (110usize, 60usize);
    let w = ml + classes * cell + 20;
    let h = mt + classes * cell + 40;
    let max = matrix.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut svg = svg_header(w, h, title);
    for (t, row) in matrix.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            ml - 8,
            mt + t * cell + cell / 2 + 4,
            task.class_name(t)?
        );
        for (p, &count) in row.iter().enumerate() {
            let intensity = (count as f64 / max * 200.0).round() as usize;
            let _ = write!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({},{},255)\" stroke=\"#999\"/>\n",
                ml + p * cell,
                mt + t * cell,
                255 - intensity,
                255 - intensity
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{count}</text>\n",
                ml + p * cell + cell / 2,
                mt + t * cell + cell / 2 + 4
            );
        }
    }
    for p in 0..classes {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            ml + p * cell + cell / 2,
            mt - 10,
            task.class_name(p)?
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn svg_consistency(path: &Path, title: &str, report: &ConsistencyReport) -> Result<()> {
    let rows = report.pairs.len().max(1);
    let (w, row_h, mt) = (520usize, 16usize, 50usize);
    let h = mt + rows * row_h + 30;
    let mut svg = svg_header(w, h, title);
    let _ = write!(
        svg,
        "<text x=\"10\" y=\"35\" font-family=\"sans-serif\" font-size=\"11\">{} consistent / {} inconsistent / {} abstention-involved</text>\n",
        report.consistent, report.inconsistent, report.abstention_involved
    );
    for (i, p) in report.pairs.iter().enumerate() {
        let y = mt + i * row_h + row_h / 2;
        let color = match p.outcome {
            PairOutcome::Consistent => "#222222",
            PairOutcome::Inconsistent => "#d62728",
            PairOutcome::AbstentionInvolved => "#999999",
        };
        let _ = write!(
            svg,
            "<line x1=\"150\" y1=\"{y}\" x2=\"420\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
        );
        if p.accepted0 {
            let _ = write!(svg, "<circle cx=\"150\" cy=\"{y}\" r=\"4\" fill=\"{color}\"/>\n");
        }
        if p.accepted1 {
            let _ = write!(svg, "<circle cx=\"420\" cy=\"{y}\" r=\"4\" fill=\"{color}\"/>\n");
        }
        let _ = write!(
            svg,
            "<text x=\"140\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            y + 3,
            p.stone_id
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, time: i64, truth: usize, probs: Vec<f64>) -> PredRow {
        PredRow { stone_id: id.into(), evaluation_time: time, true_label: truth, probs }
    }

    #[test]
    fn accuracy_basics() {
        let rows = vec![
            row("a", 0, 0, vec![0.9, 0.1]),
            row("b", 0, 1, vec![0.2, 0.8]),
            row("c", 0, 0, vec![0.3, 0.7]),
            row("d", 0, 1, vec![0.1, 0.9]),
        ];
        assert_eq!(accuracy(&rows[..2]).unwrap(), 1.0);
        assert_eq!(accuracy(&rows).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn coverage_curve_worked_example() {
        // Confidences [0.6, 0.7, 0.8, 0.9, 0.95] with the least confident
        // wrong: sweeping the unique confidences gives
        // {(1.0, 0.8), (0.8, 1.0), (0.6, 1.0), (0.4, 1.0), (0.2, 1.0)}.
        let rows = vec![
            row("a", 0, 1, vec![0.6, 0.4]),
            row("b", 0, 0, vec![0.7, 0.3]),
            row("c", 0, 0, vec![0.8, 0.2]),
            row("d", 0, 0, vec![0.9, 0.1]),
            row("e", 0, 0, vec![0.95, 0.05]),
        ];
        let curve = coverage_curve(&scored_from_rows(&rows).unwrap()).unwrap();
        let expect = [(1.0, 0.8), (0.8, 1.0), (0.6, 1.0), (0.4, 1.0), (0.2, 1.0)];
        assert_eq!(curve.points.len(), expect.len());
        for (p, (cov, acc)) in curve.points.iter().zip(expect) {
            assert!((p.coverage - cov).abs() < 1e-12);
            assert!((p.accuracy - acc).abs() < 1e-12);
        }
        // Full-coverage point equals the raw accuracy, and coverage strictly
        // decreases along the sweep.
        assert_eq!(curve.points[0].accuracy, accuracy(&rows).unwrap());
        for w in curve.points.windows(2) {
            assert!(w[1].coverage < w[0].coverage);
        }
    }

    #[test]
    fn confusion_matrix_hand_enumerated() {
        // Ten scripted pairs, counted by hand.
        let pairs = vec![
            (0, 0), (0, 0), (0, 1), (1, 1), (1, 1), (1, 1), (2, 0), (2, 2), (3, 3), (3, 2),
        ];
        let m = confusion_matrix(&pairs, 4).unwrap();
        assert_eq!(m[0], vec![2, 1, 0, 0]);
        assert_eq!(m[1], vec![0, 3, 0, 0]);
        assert_eq!(m[2], vec![1, 0, 1, 0]);
        assert_eq!(m[3], vec![0, 0, 1, 1]);
        let total: usize = m.iter().flatten().sum();
        assert_eq!(total, pairs.len());

        let perfect = confusion_matrix(&[(0, 0), (1, 1), (2, 2)], 3).unwrap();
        for (t, row) in perfect.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                assert_eq!(c, usize::from(t == p));
            }
        }
    }

    #[test]
    fn consistency_outcomes() {
        let rows = vec![
            row("s1", 0, 0, vec![0.9, 0.1]),
            row("s1", 10, 0, vec![0.85, 0.15]),
            row("s2", 0, 0, vec![0.9, 0.1]),
            row("s2", 10, 0, vec![0.4, 0.6]),
            row("s3", 0, 0, vec![0.55, 0.45]),
            row("s3", 10, 0, vec![0.9, 0.1]),
            row("s4", 0, 0, vec![0.7, 0.3]),
        ];
        let r = consistency_from_rows(&rows, 0.6, Pairing::Consecutive);
        assert_eq!(r.total_pairs(), 3);
        assert_eq!(r.consistent, 1); // s1
        assert_eq!(r.inconsistent, 1); // s2: both accepted, labels differ
        assert_eq!(r.abstention_involved, 1); // s3: first abstains
        assert_eq!(r.consistent + r.inconsistent + r.abstention_involved, r.total_pairs());
    }

    #[test]
    fn consistency_all_pairs_mode() {
        let rows = vec![
            row("s1", 0, 0, vec![0.9, 0.1]),
            row("s1", 10, 0, vec![0.8, 0.2]),
            row("s1", 20, 0, vec![0.7, 0.3]),
        ];
        assert_eq!(consistency_from_rows(&rows, 0.0, Pairing::Consecutive).total_pairs(), 2);
        assert_eq!(consistency_from_rows(&rows, 0.0, Pairing::AllPairs).total_pairs(), 3);
    }

    #[test]
    fn raising_threshold_shrinks_inconsistent_set() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let c0 = 0.5 + 0.025 * i as f64;
            rows.push(row(&format!("s{i}"), 0, 0, vec![c0, 1.0 - c0]));
            let c1 = 1.0 - (0.5 + 0.02 * i as f64);
            rows.push(row(&format!("s{i}"), 9, 0, vec![c1, 1.0 - c1]));
        }
        let low = consistency_from_rows(&rows, 0.0, Pairing::Consecutive);
        let high = consistency_from_rows(&rows, 0.62, Pairing::Consecutive);
        let low_keys = low.inconsistent_keys();
        for key in high.inconsistent_keys() {
            assert!(low_keys.contains(&key));
        }
        assert!(high.inconsistent <= low.inconsistent);
    }

    #[test]
    fn single_source_identity_ensemble_preserves_argmax() {
        let mut weights = vec![0.0; 16];
        for i in 0..4 {
            weights[i * 4 + i] = 2.0; // scaled identity
        }
        let e: EnsembleBaseline<f64> =
            EnsembleBaseline::with_weights(vec![SourceId::Uv], 4, &weights, &[0.0; 4]).unwrap();
        let probs = vec![0.1, 0.2, 0.6, 0.1];
        let pred = e.predict(&[probs.clone()]).unwrap();
        assert_eq!(pred.label(), 2);
        let sum: f64 = pred.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ensemble_source_mismatch_is_invalid() {
        let e: EnsembleBaseline<f64> =
            EnsembleBaseline::new(vec![SourceId::Uv, SourceId::Xrf], 4, 1).unwrap();
        assert!(matches!(
            e.predict(&[vec![0.25; 4]]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            e.predict(&[vec![0.25; 4], vec![0.5, 0.5]]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = CoverageCurve {
            points: vec![
                CurvePoint { coverage: 1.0, accuracy: 0.8125 },
                CurvePoint { coverage: 0.5, accuracy: 0.9371 },
            ],
        };
        curve.to_csv(&path).unwrap();
        assert_eq!(CoverageCurve::from_csv(&path).unwrap(), curve);
    }

    #[test]
    fn resample_selects_tightest_covering_point() {
        let curve = CoverageCurve {
            points: vec![
                CurvePoint { coverage: 1.0, accuracy: 0.8 },
                CurvePoint { coverage: 0.6, accuracy: 0.9 },
                CurvePoint { coverage: 0.2, accuracy: 1.0 },
            ],
        };
        let r = curve.resample(&[1.0, 0.7, 0.6, 0.3, 0.1]).unwrap();
        let accs: Vec<f64> = r.points.iter().map(|p| p.accuracy).collect();
        assert_eq!(accs, vec![0.8, 0.9, 0.9, 1.0, 1.0]);
    }
}
