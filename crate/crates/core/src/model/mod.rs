//! The fusion network: spectral encoders for UV and FTIR, an elemental
//! encoder with reference-batch intersample attention, source masking via
//! training-set means, and a batch-norm + linear readout head.
//!
//! Masking a source is *defined* as substituting that source's training-set
//! mean values before encoding, so a masked source and a physically
//! mean-replaced source produce bitwise-identical predictions.

pub mod elemental;
pub mod spectral;

pub use elemental::{ElementalEncoder, ElementalRow};
pub use spectral::SpectralEncoder;

use crate::error::{Error, Result};
use crate::netprims::{
    load_checkpoint, save_checkpoint, softmax, softmax_cross_entropy, BatchNorm, Grads, Linear,
    Optimizer, ParamStore, Tensor2,
};
use crate::scalar::Scalar;
use crate::seeding::rng_for;
use crate::types::{
    IcpmsComposition, Prediction, SourceId, StoneRecord, Task, UvSpectrum, XrfComposition,
    FTIR_POINTS, ICPMS_ENTRIES, UV_POINTS, XRF_ENTRIES,
};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture and task configuration. `for_task` carries the reference
/// hyperparameters (hidden dim 128, six stride-2 residual blocks of kernel
/// 17 behind a kernel-59 stem, elemental embedding 32); everything is
/// overridable, and smaller configurations keep the same architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub hidden_dim: usize,
    pub residual_blocks: usize,
    pub block_kernel: usize,
    pub block_stride: usize,
    pub stem_kernel: usize,
    pub elemental_embed_len: usize,
    pub token_dim: usize,
    pub intra_heads: usize,
    pub inter_heads: usize,
    pub attention_stages: usize,
    /// Number of fixed reference stones pre-appended to the elemental
    /// encoder's batch.
    pub reference_batch: usize,
    /// Append a per-feature presence flag so substituted means are
    /// distinguishable from true zeros.
    pub presence_flags: bool,
    pub allowed_sources: Vec<SourceId>,
    pub uv_len: usize,
    pub ftir_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn for_task(task: Task) -> Self {
        ModelConfig {
            task,
            hidden_dim: 128,
            residual_blocks: 6,
            block_kernel: 17,
            block_stride: 2,
            stem_kernel: 59,
            elemental_embed_len: 32,
            token_dim: 32,
            intra_heads: 4,
            inter_heads: 4,
            attention_stages: 1,
            reference_batch: 32,
            presence_flags: true,
            allowed_sources: task.default_sources(),
            uv_len: UV_POINTS,
            ftir_len: FTIR_POINTS,
            seed: 0,
        }
    }

    /// Gradient-check scale: every component present, shapes small enough
    /// for finite differences.
    pub fn tiny(task: Task) -> Self {
        ModelConfig {
            hidden_dim: 8,
            residual_blocks: 2,
            block_kernel: 5,
            stem_kernel: 9,
            elemental_embed_len: 8,
            token_dim: 4,
            intra_heads: 2,
            inter_heads: 2,
            reference_batch: 3,
            uv_len: 40,
            ftir_len: 64,
            ..Self::for_task(task)
        }
    }

    pub fn class_count(&self) -> usize {
        self.task.class_count()
    }

    pub fn allows(&self, source: SourceId) -> bool {
        self.allowed_sources.contains(&source)
    }

    fn elemental_features(&self) -> usize {
        let mut n = 0;
        if self.allows(SourceId::Xrf) {
            n += XRF_ENTRIES;
        }
        if self.allows(SourceId::Icpms) {
            n += ICPMS_ENTRIES;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.allowed_sources.is_empty() {
            return Err(Error::InvalidConfig("at least one source must be allowed".into()));
        }
        let mut seen = Vec::new();
        for &s in &self.allowed_sources {
            if seen.contains(&s) {
                return Err(Error::InvalidConfig(format!("duplicate allowed source {s}")));
            }
            seen.push(s);
        }
        if self.task == Task::Td && self.allowed_sources.iter().any(|s| s.is_elemental()) {
            return Err(Error::InvalidConfig(
                "treatment detection must not consume elemental sources (XRF/ICP-MS)".into(),
            ));
        }
        if self.hidden_dim == 0 || self.residual_blocks == 0 {
            return Err(Error::InvalidConfig("hidden dim and block count must be ≥ 1".into()));
        }
        if self.token_dim % self.intra_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "token dim {} not divisible by intra heads {}",
                self.token_dim, self.intra_heads
            )));
        }
        let flat = self.elemental_features() * self.token_dim;
        if flat > 0 && flat % self.inter_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "flattened elemental dim {flat} not divisible by inter heads {}",
                self.inter_heads
            )));
        }
        if self.reference_batch == 0 && self.elemental_features() > 0 {
            return Err(Error::InvalidConfig("reference batch must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-position arithmetic means over the training split, used as the mask
/// substitution values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceMeans {
    pub uv: Option<Vec<f64>>,
    pub ftir: Option<Vec<f64>>,
    pub xrf: Option<Vec<f64>>,
    pub icpms: Option<Vec<f64>>,
}

impl SourceMeans {
    fn has(&self, source: SourceId) -> bool {
        match source {
            SourceId::Uv => self.uv.is_some(),
            SourceId::Ftir => self.ftir.is_some(),
            SourceId::Xrf => self.xrf.is_some(),
            SourceId::Icpms => self.icpms.is_some(),
        }
    }
}

/// Means for the requested sources; a requested source absent from every
/// record is an error naming it.
pub fn compute_source_means_for(
    records: &[&StoneRecord],
    sources: &[SourceId],
) -> Result<SourceMeans> {
    let mut means = SourceMeans::default();
    for &source in sources {
        match source {
            SourceId::Uv => {
                means.uv = Some(mean_over(records, source, 2 * UV_POINTS, |r| {
                    r.uv.as_ref().map(|s| s.values())
                })?)
            }
            SourceId::Ftir => {
                means.ftir = Some(mean_over(records, source, FTIR_POINTS, |r| {
                    r.ftir.as_ref().map(|s| s.values())
                })?)
            }
            SourceId::Xrf => {
                means.xrf = Some(mean_over(records, source, XRF_ENTRIES, |r| {
                    r.xrf.as_ref().map(|c| c.values().as_slice())
                })?)
            }
            SourceId::Icpms => {
                means.icpms = Some(mean_over(records, source, ICPMS_ENTRIES, |r| {
                    r.icpms.as_ref().map(|c| c.values().as_slice())
                })?)
            }
        }
    }
    Ok(means)
}

/// Means over all four sources (each must appear somewhere).
pub fn compute_source_means(records: &[&StoneRecord]) -> Result<SourceMeans> {
    compute_source_means_for(records, &SourceId::ALL)
}

fn mean_over<'a>(
    records: &[&'a StoneRecord],
    source: SourceId,
    len: usize,
    extract: impl Fn(&'a StoneRecord) -> Option<&'a [f64]>,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; len];
    let mut count = 0usize;
    for &r in records {
        if let Some(values) = extract(r) {
            for (a, &v) in acc.iter_mut().zip(values) {
                *a += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::MissingSourceStatistics(source));
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}

/// Which sources are masked (substituted with training means).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskState {
    masked: [bool; 4],
}

impl MaskState {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(source: SourceId) -> Self {
        let mut m = Self::default();
        m.masked[source.index()] = true;
        m
    }

    pub fn set(&mut self, source: SourceId, masked: bool) {
        self.masked[source.index()] = masked;
    }

    pub fn is_masked(&self, source: SourceId) -> bool {
        self.masked[source.index()]
    }

    pub fn masked_sources(&self) -> Vec<SourceId> {
        SourceId::ALL.iter().copied().filter(|&s| self.is_masked(s)).collect()
    }
}

/// Assembled network inputs for one record (after masking / mean
/// substitution). Lengths follow the model config, which lets tests run the
/// identical code path on short spectra.
#[derive(Debug, Clone)]
pub struct ModelInputs<F> {
    pub uv: Option<Tensor2<F>>,
    pub ftir: Option<Tensor2<F>>,
    pub elemental: Option<ElementalRow>,
}

struct EncoderCaches<F> {
    uv: Option<spectral::SpectralCache<F>>,
    ftir: Option<spectral::SpectralCache<F>>,
    elemental: Option<elemental::ElementalCache<F>>,
}

/// Snapshot of everything the optimizer touches plus batch-norm statistics.
#[derive(Debug, Clone)]
pub struct ModelSnapshot<F> {
    values: Vec<Vec<F>>,
    bn_mean: Vec<F>,
    bn_var: Vec<F>,
    step: u64,
}

pub struct MultiModalNet<F: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<F>,
    uv_enc: Option<SpectralEncoder>,
    ftir_enc: Option<SpectralEncoder>,
    elem_enc: Option<ElementalEncoder>,
    head_bn: BatchNorm<F>,
    head_fc: Linear,
    means: Option<SourceMeans>,
    references: Vec<ElementalRow>,
    pub feat_dim: usize,
}

impl<F: Scalar> MultiModalNet<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let seed = cfg.seed;

        let uv_enc = if cfg.allows(SourceId::Uv) {
            Some(SpectralEncoder::init(
                &mut store,
                "uv",
                2,
                cfg.uv_len,
                cfg.hidden_dim,
                cfg.residual_blocks,
                cfg.stem_kernel,
                cfg.block_kernel,
                cfg.block_stride,
                seed,
            )?)
        } else {
            None
        };
        let ftir_enc = if cfg.allows(SourceId::Ftir) {
            Some(SpectralEncoder::init(
                &mut store,
                "ftir",
                1,
                cfg.ftir_len,
                cfg.hidden_dim,
                cfg.residual_blocks,
                cfg.stem_kernel,
                cfg.block_kernel,
                cfg.block_stride,
                seed,
            )?)
        } else {
            None
        };
        let n_features = cfg.elemental_features();
        let elem_enc = if n_features > 0 {
            Some(ElementalEncoder::init(
                &mut store,
                "elem",
                n_features,
                cfg.token_dim,
                cfg.elemental_embed_len,
                cfg.intra_heads,
                cfg.inter_heads,
                cfg.attention_stages,
                cfg.presence_flags,
                seed,
            )?)
        } else {
            None
        };

        let feat_dim = uv_enc.as_ref().map_or(0, |e| e.embed_len)
            + ftir_enc.as_ref().map_or(0, |e| e.embed_len)
            + elem_enc.as_ref().map_or(0, |e| e.embed_len);
        let head_bn = BatchNorm::init(&mut store, "head.bn", feat_dim)?;
        let head_fc = Linear::init(&mut store, "head.fc", feat_dim, cfg.class_count(), seed)?;

        Ok(MultiModalNet {
            cfg,
            store,
            uv_enc,
            ftir_enc,
            elem_enc,
            head_bn,
            head_fc,
            means: None,
            references: Vec::new(),
            feat_dim,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn uv_embed_len(&self) -> Option<usize> {
        self.uv_enc.as_ref().map(|e| e.embed_len)
    }

    pub fn ftir_embed_len(&self) -> Option<usize> {
        self.ftir_enc.as_ref().map(|e| e.embed_len)
    }

    pub fn means(&self) -> Option<&SourceMeans> {
        self.means.as_ref()
    }

    pub fn set_means(&mut self, means: SourceMeans) {
        self.means = Some(means);
    }

    pub fn references(&self) -> &[ElementalRow] {
        &self.references
    }

    pub fn set_references(&mut self, references: Vec<ElementalRow>) -> Result<()> {
        if let Some(enc) = &self.elem_enc {
            if references.is_empty() {
                return Err(Error::InvalidConfig(
                    "elemental encoder needs a non-empty reference set".into(),
                ));
            }
            for r in &references {
                if r.values.len() != enc.n_features {
                    return Err(Error::Shape(format!(
                        "reference row has {} entries, encoder expects {}",
                        r.values.len(),
                        enc.n_features
                    )));
                }
            }
        }
        self.references = references;
        Ok(())
    }

    /// Fixed, seeded random subset of the training records to serve as the
    /// elemental reference batch; stored in the checkpoint so inference is
    /// reproducible. Records lacking an elemental source get means there.
    pub fn choose_references(&self, records: &[&StoneRecord], seed: u64) -> Result<Vec<ElementalRow>> {
        let Some(_) = &self.elem_enc else { return Ok(Vec::new()) };
        let candidates: Vec<&&StoneRecord> = records
            .iter()
            .filter(|r| {
                (self.cfg.allows(SourceId::Xrf) && r.xrf.is_some())
                    || (self.cfg.allows(SourceId::Icpms) && r.icpms.is_some())
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::NoUsableData(
                "no training record carries an elemental source for the reference batch".into(),
            ));
        }
        let mut rng = rng_for(seed, "reference-batch", 0);
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(self.cfg.reference_batch.min(candidates.len()));
        idx.sort_unstable();
        idx.iter()
            .map(|&i| self.elemental_row(candidates[i], &MaskState::none()))
            .collect()
    }

    fn require_means(&self, source: SourceId) -> Result<&SourceMeans> {
        match &self.means {
            Some(m) if m.has(source) => Ok(m),
            _ => Err(Error::MissingSourceStatistics(source)),
        }
    }

    /// Raw-value elemental row (values + presence flags). Masked or missing
    /// parts take the training means with flag 0.
    fn elemental_row(&self, record: &StoneRecord, mask: &MaskState) -> Result<ElementalRow> {
        let mut values = Vec::new();
        let mut flags = Vec::new();
        if self.cfg.allows(SourceId::Xrf) {
            let usable = record.xrf.is_some() && !mask.is_masked(SourceId::Xrf);
            if usable {
                values.extend_from_slice(record.xrf.as_ref().expect("present").values());
                flags.extend(std::iter::repeat(1.0).take(XRF_ENTRIES));
            } else {
                let means = self.require_means(SourceId::Xrf)?;
                values.extend_from_slice(means.xrf.as_ref().expect("checked"));
                flags.extend(std::iter::repeat(0.0).take(XRF_ENTRIES));
            }
        }
        if self.cfg.allows(SourceId::Icpms) {
            let usable = record.icpms.is_some() && !mask.is_masked(SourceId::Icpms);
            if usable {
                values.extend_from_slice(record.icpms.as_ref().expect("present").values());
                flags.extend(std::iter::repeat(1.0).take(ICPMS_ENTRIES));
            } else {
                let means = self.require_means(SourceId::Icpms)?;
                values.extend_from_slice(means.icpms.as_ref().expect("checked"));
                flags.extend(std::iter::repeat(0.0).take(ICPMS_ENTRIES));
            }
        }
        Ok(ElementalRow { values, flags })
    }

    fn spectral_input(
        &self,
        record: &StoneRecord,
        mask: &MaskState,
        source: SourceId,
    ) -> Result<Tensor2<F>> {
        let (rows, len) = match source {
            SourceId::Uv => (2usize, self.cfg.uv_len),
            SourceId::Ftir => (1usize, self.cfg.ftir_len),
            _ => unreachable!("spectral sources only"),
        };
        let present: Option<&[f64]> = match source {
            SourceId::Uv => record.uv.as_ref().map(|s| s.values()),
            SourceId::Ftir => record.ftir.as_ref().map(|s| s.values()),
            _ => unreachable!(),
        };
        let values: Vec<f64> = match present {
            Some(v) if !mask.is_masked(source) => {
                if v.len() != rows * len {
                    return Err(Error::Shape(format!(
                        "{source} measurement length {} does not match model input {}",
                        v.len(),
                        rows * len
                    )));
                }
                v.to_vec()
            }
            _ => {
                let means = self.require_means(source)?;
                let m = match source {
                    SourceId::Uv => means.uv.as_ref().expect("checked"),
                    SourceId::Ftir => means.ftir.as_ref().expect("checked"),
                    _ => unreachable!(),
                };
                m.clone()
            }
        };
        Tensor2::from_vec(rows, len, values.into_iter().map(F::of).collect())
    }

    /// Builds network inputs for a record under a mask. With `require_usable`
    /// at least one allowed source must be present and unmasked (the
    /// inference rule); training tolerates fully masked samples.
    pub fn assemble_inputs(
        &self,
        record: &StoneRecord,
        mask: &MaskState,
        require_usable: bool,
    ) -> Result<ModelInputs<F>> {
        let usable = self.cfg.allowed_sources.iter().any(|&s| {
            record.has_source(s) && !mask.is_masked(s)
        });
        if require_usable && !usable {
            return Err(Error::NoUsableData(format!(
                "stone {}: no allowed source is present and unmasked",
                record.stone_id
            )));
        }
        let uv = if self.uv_enc.is_some() {
            Some(self.spectral_input(record, mask, SourceId::Uv)?)
        } else {
            None
        };
        let ftir = if self.ftir_enc.is_some() {
            Some(self.spectral_input(record, mask, SourceId::Ftir)?)
        } else {
            None
        };
        let elemental = if self.elem_enc.is_some() {
            Some(self.elemental_row(record, mask)?)
        } else {
            None
        };
        Ok(ModelInputs { uv, ftir, elemental })
    }

    fn encode_all(&self, inputs: &ModelInputs<F>) -> Result<(Vec<F>, EncoderCaches<F>)> {
        let mut features = Vec::with_capacity(self.feat_dim);
        let mut caches = EncoderCaches { uv: None, ftir: None, elemental: None };
        if let Some(enc) = &self.uv_enc {
            let x = inputs.uv.as_ref().ok_or_else(|| Error::Shape("missing UV input".into()))?;
            let (emb, cache) = enc.forward(&self.store, x)?;
            features.extend(emb);
            caches.uv = Some(cache);
        }
        if let Some(enc) = &self.ftir_enc {
            let x =
                inputs.ftir.as_ref().ok_or_else(|| Error::Shape("missing FTIR input".into()))?;
            let (emb, cache) = enc.forward(&self.store, x)?;
            features.extend(emb);
            caches.ftir = Some(cache);
        }
        if let Some(enc) = &self.elem_enc {
            let row = inputs
                .elemental
                .as_ref()
                .ok_or_else(|| Error::Shape("missing elemental input".into()))?;
            let (emb, cache) = enc.forward(&self.store, row, &self.references)?;
            features.extend(emb);
            caches.elemental = Some(cache);
        }
        Ok((features, caches))
    }

    fn backward_encoders(
        &self,
        caches: &EncoderCaches<F>,
        d_features: &[F],
        grads: &mut Grads<F>,
    ) {
        let mut offset = 0usize;
        if let (Some(enc), Some(cache)) = (&self.uv_enc, &caches.uv) {
            enc.backward(&self.store, cache, &d_features[offset..offset + enc.embed_len], grads);
            offset += enc.embed_len;
        }
        if let (Some(enc), Some(cache)) = (&self.ftir_enc, &caches.ftir) {
            enc.backward(&self.store, cache, &d_features[offset..offset + enc.embed_len], grads);
            offset += enc.embed_len;
        }
        if let (Some(enc), Some(cache)) = (&self.elem_enc, &caches.elemental) {
            enc.backward(&self.store, cache, &d_features[offset..offset + enc.embed_len], grads);
        }
    }

    /// Embedding of a full-size UV spectrum under the current parameters.
    pub fn encode_uv(&self, spectrum: &UvSpectrum) -> Result<Vec<F>> {
        let enc = self
            .uv_enc
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("UV is not an allowed source".into()))?;
        if self.cfg.uv_len != UV_POINTS {
            return Err(Error::InvalidConfig(
                "model was built with a non-standard UV length".into(),
            ));
        }
        let x = Tensor2::from_vec(2, UV_POINTS, spectrum.values().iter().map(|&v| F::of(v)).collect())?;
        Ok(enc.forward(&self.store, &x)?.0)
    }

    pub fn encode_ftir(&self, spectrum: &crate::types::FtirSpectrum) -> Result<Vec<F>> {
        let enc = self
            .ftir_enc
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("FTIR is not an allowed source".into()))?;
        if self.cfg.ftir_len != FTIR_POINTS {
            return Err(Error::InvalidConfig(
                "model was built with a non-standard FTIR length".into(),
            ));
        }
        let x = Tensor2::from_vec(1, FTIR_POINTS, spectrum.values().iter().map(|&v| F::of(v)).collect())?;
        Ok(enc.forward(&self.store, &x)?.0)
    }

    /// Embedding of an elemental row built from the given measurements
    /// (missing parts mean-substituted) against the stored reference batch.
    pub fn encode_elemental(
        &self,
        xrf: Option<&XrfComposition>,
        icpms: Option<&IcpmsComposition>,
    ) -> Result<Vec<F>> {
        let enc = self
            .elem_enc
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no elemental source is allowed".into()))?;
        let mut record = StoneRecord::new("query", 0);
        record.xrf = xrf.cloned();
        record.icpms = icpms.cloned();
        let row = self.elemental_row(&record, &MaskState::none())?;
        Ok(enc.forward(&self.store, &row, &self.references)?.0)
    }

    /// Eval-mode prediction for one record: missing sources are auto-masked
    /// with means, the head uses running batch-norm statistics, and the
    /// softmax runs in f64.
    pub fn forward(&self, record: &StoneRecord, mask: &MaskState) -> Result<Prediction> {
        let inputs = self.assemble_inputs(record, mask, true)?;
        self.forward_inputs(&inputs)
    }

    pub fn forward_inputs(&self, inputs: &ModelInputs<F>) -> Result<Prediction> {
        let (features, _) = self.encode_all(inputs)?;
        let x = Tensor2::from_vec(1, self.feat_dim, features)?;
        let normed = self.head_bn.forward_eval(&self.store, &x)?;
        let logits = self.head_fc.forward(&self.store, &normed)?;
        let logits64: Vec<f64> = logits.row(0).iter().map(|&v| v.as_f64()).collect();
        Prediction::new(softmax(&logits64), self.cfg.task)
    }

    /// Training-mode loss and gradients for a batch: encoders run per sample
    /// (parallel over `chunks` fixed slices, merged in order, so results are
    /// reproducible), the batch-norm head couples the batch.
    pub fn train_loss(
        &mut self,
        inputs: &[ModelInputs<F>],
        labels: &[usize],
        chunks: usize,
    ) -> Result<(f64, Grads<F>)> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::InvalidBatch("batch inputs and labels must align".into()));
        }
        let batch = inputs.len();
        let chunk_len = batch.div_ceil(chunks.max(1));

        let encoded: Vec<Result<(Vec<F>, EncoderCaches<F>)>> = if chunk_len >= batch {
            inputs.iter().map(|i| self.encode_all(i)).collect()
        } else {
            inputs
                .par_chunks(chunk_len)
                .flat_map_iter(|chunk| chunk.iter().map(|i| self.encode_all(i)))
                .collect()
        };
        let mut features = Tensor2::zeros(batch, self.feat_dim);
        let mut caches = Vec::with_capacity(batch);
        for (r, enc) in encoded.into_iter().enumerate() {
            let (f, c) = enc?;
            features.row_mut(r).copy_from_slice(&f);
            caches.push(c);
        }

        let (normed, bn_cache) = self.head_bn.forward_train(&self.store, &features)?;
        let logits = self.head_fc.forward(&self.store, &normed)?;

        let mut total_loss = 0.0f64;
        let mut dlogits = Tensor2::zeros(batch, self.cfg.class_count());
        let scale = F::of(1.0 / batch as f64);
        for r in 0..batch {
            let (loss, grad) = softmax_cross_entropy(logits.row(r), labels[r])?;
            total_loss += loss.as_f64() / batch as f64;
            for (d, g) in dlogits.row_mut(r).iter_mut().zip(grad) {
                *d = g * scale;
            }
        }

        let mut grads = Grads::zeros_like(&self.store);
        let d_normed = self.head_fc.backward(&self.store, &normed, &dlogits, &mut grads);
        let d_features = self.head_bn.backward_train(&self.store, &bn_cache, &d_normed, &mut grads);

        let pairs: Vec<(usize, &EncoderCaches<F>)> = caches.iter().enumerate().collect();
        if chunk_len >= batch {
            for (r, cache) in &pairs {
                self.backward_encoders(cache, d_features.row(*r), &mut grads);
            }
        } else {
            let partials: Vec<Grads<F>> = pairs
                .par_chunks(chunk_len)
                .map(|chunk| {
                    let mut g = Grads::zeros_like(&self.store);
                    for (r, cache) in chunk {
                        self.backward_encoders(cache, d_features.row(*r), &mut g);
                    }
                    g
                })
                .collect();
            for partial in &partials {
                grads.add(partial);
            }
        }
        Ok((total_loss, grads))
    }

    /// One optimization step over a batch of records with the given per-batch
    /// mask. Returns the batch loss.
    pub fn train_batch(
        &mut self,
        records: &[&StoneRecord],
        masks: &[MaskState],
        optimizer: &mut Optimizer<F>,
        chunks: usize,
    ) -> Result<f64> {
        let task = self.cfg.task;
        let mut inputs = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for (record, mask) in records.iter().zip(masks) {
            inputs.push(self.assemble_inputs(record, mask, false)?);
            labels.push(record.label(task).ok_or_else(|| {
                Error::InvalidInput(format!("stone {} lacks a {} label", record.stone_id, task.name()))
            })?);
        }
        let (loss, grads) = self.train_loss(&inputs, &labels, chunks)?;
        self.store.add_grads(&grads);
        optimizer.step(&mut self.store)?;
        Ok(loss)
    }

    pub fn snapshot(&self) -> ModelSnapshot<F> {
        ModelSnapshot {
            values: self.store.snapshot_values(),
            bn_mean: self.head_bn.running_mean.clone(),
            bn_var: self.head_bn.running_var.clone(),
            step: self.store.step(),
        }
    }

    pub fn restore(&mut self, snapshot: &ModelSnapshot<F>) {
        self.store.restore_values(&snapshot.values);
        self.head_bn.running_mean = snapshot.bn_mean.clone();
        self.head_bn.running_var = snapshot.bn_var.clone();
        self.store.set_step(snapshot.step);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| Error::InvalidInput(format!("config serialization failed: {e}")))?;
        let means = serde_json::to_vec(&self.means)
            .map_err(|e| Error::InvalidInput(format!("means serialization failed: {e}")))?;
        let refs = serde_json::to_vec(&self.references)
            .map_err(|e| Error::InvalidInput(format!("reference serialization failed: {e}")))?;
        let bn = serde_json::to_vec(&(
            self.head_bn.running_mean.iter().map(|v| v.as_f64()).collect::<Vec<f64>>(),
            self.head_bn.running_var.iter().map(|v| v.as_f64()).collect::<Vec<f64>>(),
        ))
        .map_err(|e| Error::InvalidInput(format!("bn serialization failed: {e}")))?;
        let extras = vec![
            ("model_config".to_string(), cfg),
            ("source_means".to_string(), means),
            ("references".to_string(), refs),
            ("bn_running".to_string(), bn),
        ];
        save_checkpoint(path, &self.store, &extras)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (loaded, extras) = load_checkpoint::<F>(path)?;
        let get = |name: &str| -> Result<&[u8]> {
            extras
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b.as_slice())
                .ok_or_else(|| Error::MissingArtifact(format!("checkpoint extra {name:?}")))
        };
        let cfg: ModelConfig = serde_json::from_slice(get("model_config")?)
            .map_err(|e| Error::InvalidInput(format!("bad model config in checkpoint: {e}")))?;
        let means: Option<SourceMeans> = serde_json::from_slice(get("source_means")?)
            .map_err(|e| Error::InvalidInput(format!("bad means in checkpoint: {e}")))?;
        let references: Vec<ElementalRow> = serde_json::from_slice(get("references")?)
            .map_err(|e| Error::InvalidInput(format!("bad references in checkpoint: {e}")))?;
        let (bn_mean, bn_var): (Vec<f64>, Vec<f64>) = serde_json::from_slice(get("bn_running")?)
            .map_err(|e| Error::InvalidInput(format!("bad bn stats in checkpoint: {e}")))?;

        let mut net = MultiModalNet::new(cfg)?;
        for id in loaded.ids() {
            let name = loaded.name(id).to_string();
            let target = net.store.id(&name).ok_or_else(|| {
                Error::InvalidInput(format!("checkpoint parameter {name:?} not in model"))
            })?;
            if net.store.shape(target) != loaded.shape(id) {
                return Err(Error::Shape(format!("checkpoint parameter {name:?} shape mismatch")));
            }
            net.store.value_mut(target).copy_from_slice(loaded.value(id));
        }
        net.store.set_step(loaded.step());
        net.head_bn.running_mean = bn_mean.into_iter().map(F::of).collect();
        net.head_bn.running_var = bn_var.into_iter().map(F::of).collect();
        net.means = means;
        net.references = references;
        Ok(net)
    }
}
