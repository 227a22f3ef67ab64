//! Training: stone-level splits with no leakage, random source masking,
//! the epoch loop with plateau learning-rate decay and periodic snapshot
//! selection, k-fold cross-validation and fold aggregation, plus the on-disk
//! run layout (per-fold checkpoints, traces and prediction CSVs).

use crate::error::{Error, Result};
use crate::evaluate::CoverageCurve;
use crate::model::{MaskState, ModelConfig, MultiModalNet};
use crate::netprims::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng_for};
use crate::types::{SourceId, StoneRecord, Task};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Training hyperparameters. Defaults are the reference recipe: 250 epochs,
/// batch 16, learning rate 1e-4 with a ÷10 plateau decay after more than 10
/// stale epochs, snapshots every 5 epochs, source-mask probability 0.7, an
/// 80/20 train/validation split and 5 folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub decay_factor: f64,
    pub checkpoint_stride: usize,
    pub mask_prob: f64,
    pub val_fraction: f64,
    pub folds: usize,
    pub seed: u64,
    /// Mask one source per sample instead of per batch.
    pub per_sample_mask: bool,
    /// Stratify the train/val split by class label.
    pub stratified: bool,
    #[serde(with = "optimizer_serde")]
    pub optimizer: OptimizerKind,
    /// Run batches single-threaded for canonical gradient grouping.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch: 16,
            lr: 1e-4,
            plateau_patience: 10,
            decay_factor: 10.0,
            checkpoint_stride: 5,
            mask_prob: 0.7,
            val_fraction: 0.2,
            folds: 5,
            seed: 0,
            per_sample_mask: false,
            stratified: false,
            optimizer: OptimizerKind::adam(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidConfig(format!(
                "mask probability {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if self.epochs == 0 || self.batch < 2 || self.folds < 2 {
            return Err(Error::InvalidConfig(
                "epochs ≥ 1, batch ≥ 2 and folds ≥ 2 required".into(),
            ));
        }
        if self.decay_factor <= 1.0 {
            return Err(Error::InvalidConfig("decay factor must exceed 1".into()));
        }
        Ok(())
    }
}

mod optimizer_serde {
    use super::OptimizerKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(kind: &OptimizerKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match kind {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<OptimizerKind, D::Error> {
        let name = String::deserialize(d)?;
        match name.as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::adam()),
            other => Err(serde::de::Error::custom(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Learning-rate plateau schedule: divide by `factor` once the monitored
/// accuracy has failed to improve (strictly) for more than `patience`
/// consecutive epochs, then restart the stale counter.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    patience: usize,
    factor: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauSchedule { lr, patience, factor, best: f64::NEG_INFINITY, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation accuracy; returns the learning rate to
    /// use from the next epoch on.
    pub fn observe(&mut self, val_accuracy: f64) -> f64 {
        if val_accuracy > self.best {
            self.best = val_accuracy;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.lr /= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Best snapshot: maximal accuracy, ties resolved toward the earliest epoch.
pub fn select_best_snapshot(points: &[(usize, f64)]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &(epoch, acc) in points {
        match best {
            Some((_, b)) if acc <= b => {}
            _ => best = Some((epoch, acc)),
        }
    }
    best
}

fn unique_stone_ids(records: &[&StoneRecord]) -> Vec<String> {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.stone_id.as_str()).collect();
    ids.into_iter().map(str::to_string).collect()
}

fn records_for_ids<'a>(records: &[&'a StoneRecord], ids: &BTreeSet<&str>) -> Vec<&'a StoneRecord> {
    records.iter().copied().filter(|r| ids.contains(r.stone_id.as_str())).collect()
}

/// Seeded 80/20 split at stone granularity: every evaluation of a stone lands
/// on the same side, so repeat measurements cannot leak across the split.
pub fn split_train_val<'a>(
    records: &[&'a StoneRecord],
    val_fraction: f64,
    seed: u64,
    stratify: Option<Task>,
) -> Result<(Vec<&'a StoneRecord>, Vec<&'a StoneRecord>)> {
    if records.len() < 5 {
        return Err(Error::InvalidInput(format!(
            "need at least 5 records to split, got {}",
            records.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("val fraction {val_fraction} outside (0, 1)")));
    }
    let ids = unique_stone_ids(records);
    if ids.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 distinct stones".into()));
    }

    let mut rng = rng_for(seed, "train-val-split", 0);
    let mut val_ids: BTreeSet<&str> = BTreeSet::new();
    match stratify {
        None => {
            let mut shuffled: Vec<&String> = ids.iter().collect();
            shuffled.shuffle(&mut rng);
            let n_val = ((ids.len() as f64 * val_fraction).round() as usize)
                .clamp(1, ids.len() - 1);
            val_ids.extend(shuffled.iter().take(n_val).map(|s| s.as_str()));
        }
        Some(task) => {
            // Group stones by label (first record's label; unlabeled stones
            // form their own group) and split each group proportionally.
            let mut label_of: BTreeMap<&str, Option<usize>> = BTreeMap::new();
            for r in records {
                label_of.entry(r.stone_id.as_str()).or_insert_with(|| r.label(task));
            }
            let mut groups: BTreeMap<Option<usize>, Vec<&str>> = BTreeMap::new();
            for (id, label) in label_of {
                groups.entry(label).or_default().push(id);
            }
            for group in groups.values() {
                let mut shuffled = group.clone();
                shuffled.shuffle(&mut rng);
                let n_val = ((group.len() as f64 * val_fraction).round() as usize)
                    .min(group.len().saturating_sub(1));
                val_ids.extend(shuffled.into_iter().take(n_val.max(usize::from(group.len() > 4))));
            }
            if val_ids.is_empty() {
                let mut shuffled: Vec<&String> = ids.iter().collect();
                shuffled.shuffle(&mut rng);
                val_ids.insert(shuffled[0]);
            }
        }
    }
    let train_ids: BTreeSet<&str> =
        ids.iter().map(String::as_str).filter(|id| !val_ids.contains(id)).collect();
    Ok((records_for_ids(records, &train_ids), records_for_ids(records, &val_ids)))
}

/// Per-batch masking rule: with probability `p` exactly one source, chosen
/// uniformly among the allowed ones, is masked; otherwise nothing is.
pub fn mask_batch(rng: &mut impl Rng, allowed: &[SourceId], p: f64) -> MaskState {
    let u: f64 = rng.gen();
    if u < p && !allowed.is_empty() {
        let pick = rng.gen_range(0..allowed.len());
        MaskState::single(allowed[pick])
    } else {
        MaskState::none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochPoint {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub trace: Vec<EpochPoint>,
    /// Set when a numerical error aborted training; the model holds the last
    /// good snapshot.
    pub aborted: Option<String>,
}

/// Fraction of records whose eval-mode prediction matches the task label.
pub fn evaluate_accuracy<F: Scalar>(
    model: &MultiModalNet<F>,
    records: &[&StoneRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let task = model.config().task;
    let mut correct = 0usize;
    let mut total = 0usize;
    for record in records {
        let Some(label) = record.label(task) else { continue };
        let pred = model.forward(record, &MaskState::none())?;
        total += 1;
        correct += usize::from(pred.label() == label);
    }
    if total == 0 {
        return Err(Error::InvalidInput("no labelled records in evaluation set".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Trains a model on the given split: computes source means and the reference
/// batch from the training split, runs the epoch loop with per-batch source
/// masking, evaluates validation accuracy every epoch for the plateau
/// schedule, snapshots every `checkpoint_stride` epochs and finishes on the
/// best snapshot (earliest epoch wins ties).
pub fn train_model<F: Scalar>(
    model: &mut MultiModalNet<F>,
    train: &[&StoneRecord],
    val: &[&StoneRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_ids: BTreeSet<&str> = train.iter().map(|r| r.stone_id.as_str()).collect();
    if val.iter().any(|r| train_ids.contains(r.stone_id.as_str())) {
        return Err(Error::InvalidInput("train and validation splits share a stone".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("train and validation splits must be non-empty".into()));
    }

    let allowed = model.config().allowed_sources.clone();
    model.set_means(crate::model::compute_source_means_for(train, &allowed)?);
    let refs = model.choose_references(train, derive_seed(cfg.seed, "reference-batch", 0))?;
    model.set_references(refs)?;

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.plateau_patience, cfg.decay_factor);
    let chunks = if cfg.deterministic { 1 } else { rayon::current_num_threads() };

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best_snapshot = None;
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut aborted = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "epoch-shuffle", epoch as u64));
        let mut mask_rng = rng_for(cfg.seed, "mask", epoch as u64);

        for batch_idx in order.chunks(cfg.batch) {
            if batch_idx.len() < 2 {
                continue; // batch norm needs at least two samples
            }
            let batch: Vec<&StoneRecord> = batch_idx.iter().map(|&i| train[i]).collect();
            let masks: Vec<MaskState> = if cfg.per_sample_mask {
                batch.iter().map(|_| mask_batch(&mut mask_rng, &allowed, cfg.mask_prob)).collect()
            } else {
                vec![mask_batch(&mut mask_rng, &allowed, cfg.mask_prob); batch.len()]
            };
            match model.train_batch(&batch, &masks, &mut optimizer, chunks) {
                Ok(_) => {}
                Err(Error::Numerical(msg)) => {
                    aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let val_acc = evaluate_accuracy(model, val)?;
        let lr = schedule.observe(val_acc);
        optimizer.set_lr(lr);
        trace.push(EpochPoint { epoch, val_accuracy: val_acc, lr });

        let last_epoch = epoch == cfg.epochs;
        if epoch % cfg.checkpoint_stride == 0 || (last_epoch && best_snapshot.is_none()) {
            if val_acc > best_acc {
                best_acc = val_acc;
                best_epoch = epoch;
                best_snapshot = Some(model.snapshot());
            }
        }
    }

    if let Some(snap) = &best_snapshot {
        model.restore(snap);
    }
    Ok(TrainOutcome {
        best_epoch,
        best_val_accuracy: best_acc,
        trace,
        aborted,
    })
}

/// Stone-level partition into k test folds with sizes differing by at most 1.
pub fn kfold_split(records: &[StoneRecord], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidInput("need at least 2 folds".into()));
    }
    let refs: Vec<&StoneRecord> = records.iter().collect();
    let ids = unique_stone_ids(&refs);
    if ids.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} stones cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut shuffled: Vec<&String> = ids.iter().collect();
    shuffled.shuffle(&mut rng_for(seed, "kfold", 0));

    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut cursor = 0usize;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let fold_ids: BTreeSet<&str> =
            shuffled[cursor..cursor + size].iter().map(|s| s.as_str()).collect();
        cursor += size;
        let idx: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| fold_ids.contains(r.stone_id.as_str()))
            .map(|(i, _)| i)
            .collect();
        folds.push(idx);
    }
    Ok(folds)
}

/// One pooled prediction row: identity, truth and the class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredRow {
    pub stone_id: String,
    pub evaluation_time: i64,
    pub true_label: usize,
    pub probs: Vec<f64>,
}

impl PredRow {
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn predicted_label(&self) -> usize {
        crate::types::argmax_label(&self.probs).expect("non-empty probs")
    }

    pub fn correct(&self) -> bool {
        self.predicted_label() == self.true_label
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub test_predictions: Vec<PredRow>,
    pub train_predictions: Vec<PredRow>,
    pub trace: Vec<EpochPoint>,
    pub best_epoch: usize,
}

/// Concatenates fold test predictions; folds must not share stones.
pub fn aggregate_predictions(folds: &[FoldResult]) -> Result<Vec<PredRow>> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for fold in folds {
        let fold_ids: BTreeSet<&str> =
            fold.test_predictions.iter().map(|p| p.stone_id.as_str()).collect();
        if fold_ids.iter().any(|id| seen.contains(id)) {
            return Err(Error::InvalidInput("folds overlap on at least one stone".into()));
        }
        seen.extend(fold_ids);
    }
    Ok(folds.iter().flat_map(|f| f.test_predictions.iter().cloned()).collect())
}

/// Pointwise mean of per-fold curves already evaluated on one common
/// coverage grid.
pub fn aggregate_curves(curves: &[CoverageCurve]) -> Result<CoverageCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidInput("no curves to aggregate".into()))?;
    for c in curves {
        if c.points.len() != first.points.len()
            || c.points
                .iter()
                .zip(&first.points)
                .any(|(a, b)| a.coverage != b.coverage)
        {
            return Err(Error::InvalidInput("curves are on mismatched coverage grids".into()));
        }
    }
    let points = first
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| crate::evaluate::CurvePoint {
            coverage: p.coverage,
            accuracy: curves.iter().map(|c| c.points[i].accuracy).sum::<f64>()
                / curves.len() as f64,
        })
        .collect();
    Ok(CoverageCurve { points })
}

pub fn write_predictions_csv(path: impl AsRef<Path>, rows: &[PredRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let classes = rows.first().map_or(0, |r| r.probs.len());
    let mut header = vec!["stone_id".to_string(), "evaluation_time".into(), "true_label".into()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.stone_id.clone(), row.evaluation_time.to_string(), row.true_label.to_string()];
        rec.extend(row.probs.iter().map(|p| format!("{p}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredRow>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let classes = headers.len().saturating_sub(3);
    if classes == 0 {
        return Err(Error::InvalidInput("prediction CSV lacks probability columns".into()));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        let parse = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| Error::InvalidInput("short CSV row".into()))?
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad float in CSV: {e}")))
        };
        let probs: Vec<f64> = (0..classes).map(|c| parse(3 + c)).collect::<Result<_>>()?;
        rows.push(PredRow {
            stone_id: record.get(0).unwrap_or_default().to_string(),
            evaluation_time: record
                .get(1)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad evaluation time: {e}")))?,
            true_label: record
                .get(2)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad label: {e}")))?,
            probs,
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Eval-mode predictions for a record list; records with no usable allowed
/// source are skipped (their count is returned).
pub fn predict_rows<F: Scalar>(
    model: &MultiModalNet<F>,
    records: &[&StoneRecord],
) -> Result<(Vec<PredRow>, usize)> {
    let task = model.config().task;
    let mut rows = Vec::with_capacity(records.len());
    let mut skipped = 0usize;
    for record in records {
        let Some(label) = record.label(task) else {
            skipped += 1;
            continue;
        };
        match model.forward(record, &MaskState::none()) {
            Ok(pred) => rows.push(PredRow {
                stone_id: record.stone_id.clone(),
                evaluation_time: record.evaluation_time,
                true_label: label,
                probs: pred.probs().to_vec(),
            }),
            Err(Error::NoUsableData(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((rows, skipped))
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub task: Task,
    pub folds: Vec<FoldResult>,
    pub pooled_test: Vec<PredRow>,
    pub pooled_train: Vec<PredRow>,
    pub skipped_unusable: usize,
}

/// Full k-fold cross-validation: for each fold the remaining records are
/// split 80/20 into train/val, a fresh model is trained, the fold's training
/// records (train ∪ val) are scored for calibration and the held-out fold is
/// scored for evaluation. Artifacts land under `run_dir`:
///
/// ```text
/// run_dir/
///   fold_0/{checkpoint.bin, trace.csv, train_preds.csv, test_preds.csv}
///   ...
///   train_predictions.csv   (pooled calibration scores)
///   test_predictions.csv    (pooled held-out scores)
/// ```
pub fn run_kfold<F: Scalar>(
    records: &[StoneRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<RunSummary> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let fold_indices = kfold_split(records, train_cfg.folds, derive_seed(train_cfg.seed, "folds", 0))?;

    let mut folds = Vec::with_capacity(fold_indices.len());
    let mut pooled_train = Vec::new();
    let mut skipped_total = 0usize;
    for (fold, test_idx) in fold_indices.iter().enumerate() {
        let test_set: BTreeSet<usize> = test_idx.iter().copied().collect();
        let test: Vec<&StoneRecord> = test_idx.iter().map(|&i| &records[i]).collect();
        let rest: Vec<&StoneRecord> = records
            .iter()
            .enumerate()
            .filter(|(i, _)| !test_set.contains(i))
            .map(|(_, r)| r)
            .collect();

        let stratify = train_cfg.stratified.then_some(model_cfg.task);
        let (train, val) = split_train_val(
            &rest,
            train_cfg.val_fraction,
            derive_seed(train_cfg.seed, "val-split", fold as u64),
            stratify,
        )?;

        let mut fold_model_cfg = model_cfg.clone();
        fold_model_cfg.seed = derive_seed(model_cfg.seed, "fold-model", fold as u64);
        let mut fold_train_cfg = train_cfg.clone();
        fold_train_cfg.seed = derive_seed(train_cfg.seed, "fold-train", fold as u64);

        let mut model = MultiModalNet::<F>::new(fold_model_cfg)?;
        let outcome = train_model(&mut model, &train, &val, &fold_train_cfg)?;
        eprintln!(
            "fold {fold}: best epoch {} (val accuracy {:.4}){}",
            outcome.best_epoch,
            outcome.best_val_accuracy,
            outcome.aborted.as_deref().map(|m| format!(" [aborted: {m}]")).unwrap_or_default()
        );

        let fold_dir = run_dir.join(format!("fold_{fold}"));
        std::fs::create_dir_all(&fold_dir)?;
        model.save(fold_dir.join("checkpoint.bin"))?;
        write_trace_csv(fold_dir.join("trace.csv"), &outcome.trace)?;

        // Calibration pool: the fold's full training data (train ∪ val).
        let mut calibration: Vec<&StoneRecord> = train.clone();
        calibration.extend(val.iter().copied());
        let (train_rows, s1) = predict_rows(&model, &calibration)?;
        let (test_rows, s2) = predict_rows(&model, &test)?;
        skipped_total += s1 + s2;
        write_predictions_csv(fold_dir.join("train_preds.csv"), &train_rows)?;
        write_predictions_csv(fold_dir.join("test_preds.csv"), &test_rows)?;

        pooled_train.extend(train_rows.iter().cloned());
        folds.push(FoldResult {
            fold,
            test_predictions: test_rows,
            train_predictions: train_rows,
            trace: outcome.trace,
            best_epoch: outcome.best_epoch,
        });
    }

    let pooled_test = aggregate_predictions(&folds)?;
    write_predictions_csv(run_dir.join("test_predictions.csv"), &pooled_test)?;
    write_predictions_csv(run_dir.join("train_predictions.csv"), &pooled_train)?;

    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        task: model_cfg.task,
        folds,
        pooled_test,
        pooled_train,
        skipped_unusable: skipped_total,
    })
}

fn write_trace_csv(path: impl AsRef<Path>, trace: &[EpochPoint]) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    writeln!(f, "epoch,val_accuracy,lr")?;
    for p in trace {
        writeln!(f, "{},{},{}", p.epoch, p.val_accuracy, p.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{easy_spec, gen_corpus};

    fn corpus(n: usize) -> Vec<StoneRecord> {
        gen_corpus(&easy_spec(41), n).unwrap()
    }

    #[test]
    fn split_counts_are_80_20() {
        let records = corpus(100);
        let refs: Vec<&StoneRecord> = records.iter().collect();
        let (train, val) = split_train_val(&refs, 0.2, 1, None).unwrap();
        let train_ids = unique_stone_ids(&train);
        let val_ids = unique_stone_ids(&val);
        assert_eq!(train_ids.len(), 80);
        assert_eq!(val_ids.len(), 20);
    }

    #[test]
    fn repeat_evaluations_stay_on_one_side() {
        let mut records = corpus(40);
        // Manufacture a repeat evaluation for ten stones.
        for i in 0..10 {
            let mut second = records[i].clone();
            second.evaluation_time = 365;
            records.push(second);
        }
        let refs: Vec<&StoneRecord> = records.iter().collect();
        let (train, val) = split_train_val(&refs, 0.2, 3, None).unwrap();
        let train_ids: BTreeSet<&str> = train.iter().map(|r| r.stone_id.as_str()).collect();
        let val_ids: BTreeSet<&str> = val.iter().map(|r| r.stone_id.as_str()).collect();
        assert!(train_ids.is_disjoint(&val_ids));
        assert_eq!(train.len() + val.len(), records.len());
    }

    #[test]
    fn split_is_deterministic() {
        let records = corpus(30);
        let refs: Vec<&StoneRecord> = records.iter().collect();
        let a = split_train_val(&refs, 0.2, 9, None).unwrap();
        let b = split_train_val(&refs, 0.2, 9, None).unwrap();
        assert_eq!(a.0.len(), b.0.len());
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.stone_id == y.stone_id));
    }

    #[test]
    fn too_few_records_is_invalid() {
        let records = corpus(4);
        let refs: Vec<&StoneRecord> = records.iter().collect();
        assert!(matches!(
            split_train_val(&refs, 0.2, 1, None),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mask_probability_extremes() {
        let allowed = SourceId::ALL.to_vec();
        let mut rng = rng_for(1, "mask-test", 0);
        for _ in 0..100 {
            assert_eq!(mask_batch(&mut rng, &allowed, 0.0), MaskState::none());
        }
        for _ in 0..100 {
            let m = mask_batch(&mut rng, &allowed, 1.0);
            assert_eq!(m.masked_sources().len(), 1);
        }
    }

    #[test]
    fn mask_frequency_matches_probability() {
        // Binomial: 10000 draws at p = 0.7 land in [0.69, 0.71] with the
        // fixed seed (99% CI half-width ≈ 0.012).
        let allowed = SourceId::ALL.to_vec();
        let mut rng = rng_for(5, "mask-freq", 0);
        let n = 10_000;
        let masked = (0..n)
            .filter(|_| !mask_batch(&mut rng, &allowed, 0.7).masked_sources().is_empty())
            .count();
        let freq = masked as f64 / n as f64;
        assert!((0.69..=0.71).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn best_snapshot_rule() {
        // Trace [0.5, 0.9, 0.8, 0.9] at epochs 5, 10, 15, 20: the maximum is
        // first reached at epoch 10.
        let points = vec![(5, 0.5), (10, 0.9), (15, 0.8), (20, 0.9)];
        assert_eq!(select_best_snapshot(&points), Some((10, 0.9)));
    }

    #[test]
    fn plateau_decays_after_patience_runs_out() {
        // Improvement through epoch 10, then stale epochs 11–21: the rate
        // drops to 1e-5 for epoch 22.
        let mut s = PlateauSchedule::new(1e-4, 10, 10.0);
        for epoch in 1..=10 {
            assert_eq!(s.observe(0.01 * epoch as f64), 1e-4);
        }
        for _epoch in 11..=20 {
            assert_eq!(s.observe(0.05), 1e-4);
        }
        let lr = s.observe(0.05); // epoch 21, eleventh stale epoch
        assert!((lr - 1e-5).abs() < 1e-18, "lr {lr}");
    }

    #[test]
    fn learning_rate_never_increases() {
        let mut s = PlateauSchedule::new(1e-3, 2, 10.0);
        let mut prev = s.lr();
        let mut rng = rng_for(2, "plateau", 0);
        for _ in 0..200 {
            let lr = s.observe(rng.gen::<f64>());
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn kfold_sizes_and_disjointness() {
        let records = corpus(103);
        let folds = kfold_split(&records, 5, 7).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![20, 20, 21, 21, 21]);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(kfold_split(&records, 5, 7).unwrap(), folds);
    }

    #[test]
    fn too_few_stones_for_folds() {
        let records = corpus(4);
        assert!(matches!(
            kfold_split(&records, 5, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    fn fake_fold(fold: usize, ids: &[&str], correct: &[bool]) -> FoldResult {
        let rows = ids
            .iter()
            .zip(correct)
            .map(|(id, &c)| PredRow {
                stone_id: id.to_string(),
                evaluation_time: 0,
                true_label: 0,
                probs: if c { vec![0.9, 0.1] } else { vec![0.2, 0.8] },
            })
            .collect();
        FoldResult {
            fold,
            test_predictions: rows,
            train_predictions: Vec::new(),
            trace: Vec::new(),
            best_epoch: 0,
        }
    }

    #[test]
    fn aggregation_concatenates_and_checks_overlap() {
        let f0 = fake_fold(0, &["a", "b"], &[true, false]);
        let f1 = fake_fold(1, &["c", "d", "e"], &[true, true, true]);
        let pooled = aggregate_predictions(&[f0.clone(), f1.clone()]).unwrap();
        assert_eq!(pooled.len(), 5);

        // Pooled accuracy equals the record-weighted mean of fold accuracies.
        let acc = pooled.iter().filter(|r| r.correct()).count() as f64 / pooled.len() as f64;
        let weighted = (1.0 + 3.0) / 5.0;
        assert!((acc - weighted).abs() < 1e-12);

        let overlapping = fake_fold(2, &["a"], &[true]);
        assert!(matches!(
            aggregate_predictions(&[f0, overlapping]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn curve_aggregation_is_pointwise_mean() {
        use crate::evaluate::{CoverageCurve, CurvePoint};
        let grid = [1.0, 0.5, 0.25];
        let mk = |accs: [f64; 3]| CoverageCurve {
            points: grid
                .iter()
                .zip(accs)
                .map(|(&coverage, accuracy)| CurvePoint { coverage, accuracy })
                .collect(),
        };
        let same = aggregate_curves(&[mk([0.7, 0.8, 0.9]), mk([0.7, 0.8, 0.9])]).unwrap();
        assert_eq!(same.points[2].accuracy, 0.9);
        let mean = aggregate_curves(&[mk([0.0, 0.0, 0.0]), mk([1.0, 1.0, 1.0])]).unwrap();
        assert!(mean.points.iter().all(|p| p.accuracy == 0.5));

        let mismatched = CoverageCurve {
            points: vec![CurvePoint { coverage: 1.0, accuracy: 0.5 }],
        };
        assert!(matches!(
            aggregate_curves(&[mk([0.1, 0.2, 0.3]), mismatched]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn random_step_curves_match_bruteforce_average() {
        use crate::evaluate::{CoverageCurve, CurvePoint};
        let mut rng = rng_for(3, "curve-avg", 0);
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        let curves: Vec<CoverageCurve> = (0..5)
            .map(|_| CoverageCurve {
                points: grid
                    .iter()
                    .map(|&coverage| CurvePoint { coverage, accuracy: rng.gen::<f64>() })
                    .collect(),
            })
            .collect();
        let mean = aggregate_curves(&curves).unwrap();
        for (i, p) in mean.points.iter().enumerate() {
            let brute: f64 =
                curves.iter().map(|c| c.points[i].accuracy).sum::<f64>() / curves.len() as f64;
            assert!((p.accuracy - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let rows = vec![
            PredRow {
                stone_id: "S1".into(),
                evaluation_time: 0,
                true_label: 2,
                probs: vec![0.125, 0.1, 0.7, 0.075],
            },
            PredRow {
                stone_id: "S2".into(),
                evaluation_time: 365,
                true_label: 0,
                probs: vec![0.4, 0.3, 0.2, 0.1],
            },
        ];
        write_predictions_csv(&path, &rows).unwrap();
        let loaded = read_predictions_csv(&path).unwrap();
        assert_eq!(loaded, rows);
    }
}
