//! Synthetic multi-modal corpora with planted class structure and an exact
//! Bayes-posterior oracle.
//!
//! Generative model per stone:
//!
//! * an origin *component* is drawn: the stone's labelled origin with
//!   probability 1 − confusion_rate, otherwise a fixed partner class
//!   (Kashmir↔Burma, SriLanka↔Madagascar). The same applies to the treatment
//!   label with `treatment_confusion`. Components are per stone, so repeat
//!   evaluations re-noise the same component;
//! * UV = per-component Gaussian absorbance bumps + baseline + iid Gaussian
//!   noise (two polarization rows, shared clean signal);
//! * FTIR = shared bumps + baseline + an additive treatment band + noise;
//! * XRF / ICP-MS entries are log-normal with per-component parameters.
//!
//! Everything is conjugate enough for the exact posterior: sources are
//! independent given the component, so the class likelihood is a two-term
//! mixture and the posterior is computable in log space. The oracle accuracy
//! of a spec is then a measurable ceiling for any trained model; the
//! confusion rates dial it (references: `easy` ≈ 100%, `realistic` ≈ 97%).

use crate::error::{Error, Result};
use crate::ingest::{validate_ftir, validate_xrf};
use crate::seeding::rng_for;
use crate::types::{
    FtirSpectrum, IcpmsComposition, OriginLabel, SourceId, StoneRecord, Task, TreatmentLabel,
    UvSpectrum, FTIR_MIN_WAVENUMBER, FTIR_POINTS, ICPMS_ENTRIES, UV_MIN_NM, UV_POINTS,
    UV_STEP_NM, XRF_ENTRIES,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Partner class used when a stone's measurements are drawn from the wrong
/// component: Kashmir↔Burma, SriLanka↔Madagascar.
const PARTNER: [usize; 4] = [1, 0, 3, 2];

const MAX_GENERATION_ATTEMPTS: u64 = 16;

/// Index offset separating repeat-evaluation noise streams from base ones.
const REPEAT_STREAM_SALT: u64 = 0x5eed_0000_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussPeak {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl GaussPeak {
    pub fn eval(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.width;
        self.amplitude * (-0.5 * z * z).exp()
    }
}

/// Log-normal concentration model: ln(value) ~ Normal(mu, sigma).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormal {
    /// Parameterizes by the distribution mean E[v] = exp(mu + sigma²/2).
    pub fn from_mean(mean: f64, sigma: f64) -> Self {
        LogNormal { mu: mean.ln() - 0.5 * sigma * sigma, sigma }
    }

    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.mu + self.sigma * z).exp()
    }

    /// Log density up to terms independent of (mu, sigma); enough for class
    /// comparison.
    fn log_density_kernel(&self, value: f64) -> f64 {
        let z = (value.ln() - self.mu) / self.sigma;
        -self.sigma.ln() - 0.5 * z * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginParams {
    pub origin: OriginLabel,
    pub uv_peaks: Vec<GaussPeak>,
    pub xrf: Vec<LogNormal>,
    pub icpms: Vec<LogNormal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    pub seed: u64,
    /// Prior over the four origin classes; sums to 1.
    pub class_priors: Vec<f64>,
    /// P(Treated).
    pub treatment_prior: f64,
    /// Probability a stone's elemental/UV measurements come from the partner
    /// class's component instead of its own.
    #[serde(default)]
    pub confusion_rate: f64,
    /// Probability a stone's FTIR comes from the opposite treatment state.
    #[serde(default)]
    pub treatment_confusion: f64,
    pub uv_baseline: f64,
    pub uv_noise: f64,
    pub ftir_baseline: f64,
    pub ftir_noise: f64,
    /// Bumps shared by every class.
    pub ftir_peaks: Vec<GaussPeak>,
    /// Additive band present when the generating treatment state is Treated.
    pub treatment_band: GaussPeak,
    /// Fraction of stones receiving a re-noised second evaluation.
    #[serde(default)]
    pub repeat_fraction: f64,
    /// Per-source probability of dropping a measurement (at least one source
    /// always survives).
    #[serde(default)]
    pub missing_fraction: f64,
    /// Exactly four entries, in origin-ordinal order.
    pub origins: Vec<OriginParams>,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_priors.len() != 4 {
            return Err(Error::InvalidConfig("need 4 class priors".into()));
        }
        let sum: f64 = self.class_priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_priors.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig(format!("class priors must sum to 1, got {sum}")));
        }
        for p in [self.treatment_prior, self.confusion_rate, self.treatment_confusion, self.repeat_fraction, self.missing_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.origins.len() != 4 {
            return Err(Error::InvalidConfig("need parameters for all 4 origins".into()));
        }
        for (i, o) in self.origins.iter().enumerate() {
            if o.origin.ordinal() != i {
                return Err(Error::InvalidConfig(
                    "origin parameter blocks must appear in ordinal order".into(),
                ));
            }
            if o.xrf.len() != XRF_ENTRIES || o.icpms.len() != ICPMS_ENTRIES {
                return Err(Error::InvalidConfig(format!(
                    "{} needs {XRF_ENTRIES} XRF and {ICPMS_ENTRIES} ICP-MS entries",
                    o.origin.name()
                )));
            }
            if o.uv_peaks.iter().any(|p| p.amplitude < 0.0 || p.width <= 0.0) {
                return Err(Error::InvalidConfig("peak amplitudes ≥ 0, widths > 0".into()));
            }
            if o.xrf.iter().chain(&o.icpms).any(|l| l.sigma <= 0.0) {
                return Err(Error::InvalidConfig("log-normal sigmas must be > 0".into()));
            }
        }
        if self.treatment_band.amplitude < 0.0 || self.treatment_band.width <= 0.0 {
            return Err(Error::InvalidConfig("treatment band needs amplitude ≥ 0, width > 0".into()));
        }
        if self.uv_noise <= 0.0 || self.ftir_noise <= 0.0 {
            return Err(Error::InvalidConfig("noise sigmas must be > 0".into()));
        }
        Ok(())
    }

    /// Monte-Carlo estimate of the probability that a freshly generated stone
    /// passes every ingest validity gate on the first draw.
    pub fn empirical_gate_pass_rate(&self, samples: usize) -> f64 {
        let mut pass = 0usize;
        for i in 0..samples {
            let origin = OriginLabel::ALL[i % 4];
            let treated = if i % 2 == 0 { TreatmentLabel::Treated } else { TreatmentLabel::NotTreated };
            let stream = gate_check_base().wrapping_add(i as u64);
            if self.raw_stone_passes_gates(origin, treated, stream) {
                pass += 1;
            }
        }
        pass as f64 / samples as f64
    }

    fn raw_stone_passes_gates(&self, origin: OriginLabel, treated: TreatmentLabel, stream: u64) -> bool {
        let o_comp = origin.ordinal();
        let t_comp = treated;
        let uv = gen_uv_raw(self, o_comp, stream, 0);
        if uv.iter().any(|&v| v < 0.0) {
            return false;
        }
        let ftir = gen_ftir_raw(self, t_comp, stream, 0);
        if !ftir.iter().all(|&v| (-5.0..=10.0).contains(&v)) {
            return false;
        }
        let xrf = gen_xrf_raw(self, o_comp, stream, 0);
        match crate::types::XrfComposition::new(xrf) {
            Ok(x) => validate_xrf(&x),
            Err(_) => false,
        }
    }
}

fn gate_check_base() -> u64 {
    0x6a7e_c4ec_0000_0000
}

/// Categorical draw from unnormalized non-negative weights.
fn sample_categorical(rng: &mut ChaCha8Rng, priors: &[f64]) -> usize {
    let total: f64 = priors.iter().sum();
    let mut u: f64 = rng.gen::<f64>() * total;
    for (i, &p) in priors.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    priors.len() - 1
}

fn uv_clean(spec: &GeneratorSpec, component: usize) -> Vec<f64> {
    (0..UV_POINTS)
        .map(|j| {
            let nm = UV_MIN_NM + UV_STEP_NM * j as f64;
            spec.uv_baseline
                + spec.origins[component].uv_peaks.iter().map(|p| p.eval(nm)).sum::<f64>()
        })
        .collect()
}

fn ftir_clean(spec: &GeneratorSpec, treated: TreatmentLabel) -> Vec<f64> {
    (0..FTIR_POINTS)
        .map(|j| {
            let w = FTIR_MIN_WAVENUMBER + j as f64;
            let mut v =
                spec.ftir_baseline + spec.ftir_peaks.iter().map(|p| p.eval(w)).sum::<f64>();
            if treated == TreatmentLabel::Treated {
                v += spec.treatment_band.eval(w);
            }
            v
        })
        .collect()
}

fn gen_uv_raw(spec: &GeneratorSpec, component: usize, stream: u64, attempt: u64) -> Vec<f64> {
    let mut rng = rng_for(spec.seed, "uv", stream.wrapping_mul(32).wrapping_add(attempt));
    let clean = uv_clean(spec, component);
    let mut values = Vec::with_capacity(2 * UV_POINTS);
    for _row in 0..2 {
        for &c in &clean {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(c + spec.uv_noise * z);
        }
    }
    values
}

fn gen_ftir_raw(spec: &GeneratorSpec, treated: TreatmentLabel, stream: u64, attempt: u64) -> Vec<f64> {
    let mut rng = rng_for(spec.seed, "ftir", stream.wrapping_mul(32).wrapping_add(attempt));
    ftir_clean(spec, treated)
        .into_iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            c + spec.ftir_noise * z
        })
        .collect()
}

fn gen_xrf_raw(spec: &GeneratorSpec, component: usize, stream: u64, attempt: u64) -> [f64; XRF_ENTRIES] {
    let mut rng = rng_for(spec.seed, "xrf", stream.wrapping_mul(32).wrapping_add(attempt));
    let mut values = [0.0; XRF_ENTRIES];
    for (v, ln) in values.iter_mut().zip(&spec.origins[component].xrf) {
        *v = ln.sample(&mut rng);
    }
    values
}

fn gen_icpms_raw(spec: &GeneratorSpec, component: usize, stream: u64, attempt: u64) -> [f64; ICPMS_ENTRIES] {
    let mut rng = rng_for(spec.seed, "icpms", stream.wrapping_mul(32).wrapping_add(attempt));
    let mut values = [0.0; ICPMS_ENTRIES];
    for (v, ln) in values.iter_mut().zip(&spec.origins[component].icpms) {
        *v = ln.sample(&mut rng);
    }
    values
}

/// The generating components for a stone, derived deterministically from the
/// component stream so repeat evaluations share them.
fn draw_components(
    spec: &GeneratorSpec,
    origin: OriginLabel,
    treated: TreatmentLabel,
    component_stream: u64,
) -> (usize, TreatmentLabel) {
    let mut rng = rng_for(spec.seed, "component", component_stream);
    let u_origin: f64 = rng.gen();
    let u_treat: f64 = rng.gen();
    let o_comp = if u_origin < spec.confusion_rate {
        PARTNER[origin.ordinal()]
    } else {
        origin.ordinal()
    };
    let t_comp = if u_treat < spec.treatment_confusion {
        match treated {
            TreatmentLabel::Treated => TreatmentLabel::NotTreated,
            TreatmentLabel::NotTreated => TreatmentLabel::Treated,
        }
    } else {
        treated
    };
    (o_comp, t_comp)
}

fn gen_stone_eval(
    spec: &GeneratorSpec,
    origin: OriginLabel,
    treated: TreatmentLabel,
    component_stream: u64,
    noise_stream: u64,
) -> Result<StoneRecord> {
    let (o_comp, t_comp) = draw_components(spec, origin, treated, component_stream);

    let uv = (0..MAX_GENERATION_ATTEMPTS)
        .find_map(|a| {
            let v = gen_uv_raw(spec, o_comp, noise_stream, a);
            UvSpectrum::new(v).ok()
        })
        .ok_or_else(|| Error::GenerationFailed("UV failed the negativity gate 16 times".into()))?;

    let ftir = (0..MAX_GENERATION_ATTEMPTS)
        .find_map(|a| {
            let v = gen_ftir_raw(spec, t_comp, noise_stream, a);
            FtirSpectrum::full(v).ok().filter(validate_ftir)
        })
        .ok_or_else(|| Error::GenerationFailed("FTIR failed the range gate 16 times".into()))?;

    let xrf = (0..MAX_GENERATION_ATTEMPTS)
        .find_map(|a| {
            crate::types::XrfComposition::new(gen_xrf_raw(spec, o_comp, noise_stream, a))
                .ok()
                .filter(validate_xrf)
        })
        .ok_or_else(|| Error::GenerationFailed("XRF failed the outlier gates 16 times".into()))?;

    let icpms = IcpmsComposition::new(gen_icpms_raw(spec, o_comp, noise_stream, 0))?;

    let mut record = StoneRecord::new(format!("S{component_stream:06}"), 0);
    record.uv = Some(uv);
    record.ftir = Some(ftir);
    record.xrf = Some(xrf);
    record.icpms = Some(icpms);
    record.origin = Some(origin);
    record.treatment = Some(treated);
    Ok(record)
}

/// Generates one fully populated stone. Deterministic given
/// (spec, origin, treated, stone_seed); a measurement failing its validity
/// gate regenerates with an incremented sub-seed, up to 16 attempts.
pub fn gen_stone(
    spec: &GeneratorSpec,
    origin: OriginLabel,
    treated: TreatmentLabel,
    stone_seed: u64,
) -> Result<StoneRecord> {
    gen_stone_eval(spec, origin, treated, stone_seed, stone_seed)
}

fn apply_missingness(record: &mut StoneRecord, rng: &mut ChaCha8Rng, fraction: f64) {
    // Four draws always, to keep the stream alignment independent of record
    // content.
    let drops: Vec<bool> = (0..4).map(|_| rng.gen::<f64>() < fraction).collect();
    if fraction <= 0.0 {
        return;
    }
    let present = record.present_sources();
    let all_dropped = present.iter().all(|s| drops[s.index()]);
    let keep = if all_dropped {
        Some(present[rng.gen_range(0..present.len())])
    } else {
        None
    };
    for source in SourceId::ALL {
        if drops[source.index()] && Some(source) != keep {
            record.drop_source(source);
        }
    }
}

/// Generates a corpus of `n` stones: labels from the priors, a
/// `repeat_fraction` of stones re-measured at a later evaluation time with
/// fresh noise, and a `missing_fraction` of source entries dropped. Sorted by
/// (stone_id, evaluation_time).
pub fn gen_corpus(spec: &GeneratorSpec, n: usize) -> Result<Vec<StoneRecord>> {
    if n == 0 {
        return Err(Error::InvalidInput("corpus size must be ≥ 1".into()));
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut label_rng = rng_for(spec.seed, "labels", i);
        let origin = OriginLabel::ALL[sample_categorical(&mut label_rng, &spec.class_priors)];
        let treated = if label_rng.gen::<f64>() < spec.treatment_prior {
            TreatmentLabel::Treated
        } else {
            TreatmentLabel::NotTreated
        };

        let mut record = gen_stone_eval(spec, origin, treated, i, i)?;
        record.stone_id = format!("S{i:05}");
        let mut miss_rng = rng_for(spec.seed, "missing", i);
        apply_missingness(&mut record, &mut miss_rng, spec.missing_fraction);
        records.push(record);

        let mut repeat_rng = rng_for(spec.seed, "repeat", i);
        if repeat_rng.gen::<f64>() < spec.repeat_fraction {
            let mut second =
                gen_stone_eval(spec, origin, treated, i, REPEAT_STREAM_SALT.wrapping_add(i))?;
            second.stone_id = format!("S{i:05}");
            second.evaluation_time = 365;
            let mut miss_rng = rng_for(spec.seed, "missing-repeat", i);
            apply_missingness(&mut second, &mut miss_rng, spec.missing_fraction);
            records.push(second);
        }
    }
    records.sort_by(|a, b| {
        (a.stone_id.as_str(), a.evaluation_time).cmp(&(b.stone_id.as_str(), b.evaluation_time))
    });
    Ok(records)
}

fn logsumexp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Gaussian log-likelihood kernel −½ Σ z²; constants shared by every
/// component are dropped.
fn gaussian_kernel(values: &[f64], clean: &[f64], sigma: f64) -> f64 {
    let mut acc = 0.0;
    for (&v, &c) in values.iter().zip(clean) {
        let z = (v - c) / sigma;
        acc += z * z;
    }
    -0.5 * acc
}

fn uv_ll(spec: &GeneratorSpec, uv: &UvSpectrum, component: usize) -> f64 {
    let clean = uv_clean(spec, component);
    gaussian_kernel(uv.row(0), &clean, spec.uv_noise)
        + gaussian_kernel(uv.row(1), &clean, spec.uv_noise)
}

fn ftir_ll(spec: &GeneratorSpec, ftir: &FtirSpectrum, treated: TreatmentLabel) -> f64 {
    let clean = ftir_clean(spec, treated);
    let mut acc = 0.0;
    for (i, v) in ftir.measured() {
        let z = (v - clean[i]) / spec.ftir_noise;
        acc += z * z;
    }
    -0.5 * acc
}

fn elemental_ll(values: &[f64], params: &[LogNormal]) -> f64 {
    values.iter().zip(params).map(|(&v, ln)| ln.log_density_kernel(v)).sum()
}

/// Per-origin-component log-likelihood of the record's origin-informative
/// sources (UV, XRF, ICP-MS). FTIR depends only on the treatment state, so it
/// cancels in the origin posterior.
fn origin_component_ll(record: &StoneRecord, spec: &GeneratorSpec, component: usize) -> f64 {
    let mut ll = 0.0;
    if let Some(uv) = &record.uv {
        ll += uv_ll(spec, uv, component);
    }
    if let Some(xrf) = &record.xrf {
        ll += elemental_ll(xrf.values(), &spec.origins[component].xrf);
    }
    if let Some(icpms) = &record.icpms {
        ll += elemental_ll(icpms.values(), &spec.origins[component].icpms);
    }
    ll
}

/// Exact class posterior under the generative model, from the product of
/// per-source likelihoods of the present sources, computed in log space.
pub fn bayes_posterior_for(
    record: &StoneRecord,
    spec: &GeneratorSpec,
    task: Task,
) -> Result<Vec<f64>> {
    if record.present_sources().is_empty() {
        return Err(Error::InvalidInput("record has no measurements".into()));
    }
    let log_posterior = match task {
        Task::Od => {
            let component_ll: Vec<f64> =
                (0..4).map(|k| origin_component_ll(record, spec, k)).collect();
            let alpha = spec.confusion_rate;
            (0..4)
                .map(|c| {
                    let own = (1.0 - alpha).ln() + component_ll[c];
                    let swapped = if alpha > 0.0 {
                        alpha.ln() + component_ll[PARTNER[c]]
                    } else {
                        f64::NEG_INFINITY
                    };
                    spec.class_priors[c].ln() + logsumexp(&[own, swapped])
                })
                .collect::<Vec<f64>>()
        }
        Task::Td => {
            let component_ll: Vec<f64> = TreatmentLabel::ALL
                .iter()
                .map(|&t| record.ftir.as_ref().map_or(0.0, |f| ftir_ll(spec, f, t)))
                .collect();
            let beta = spec.treatment_confusion;
            let priors = [spec.treatment_prior, 1.0 - spec.treatment_prior];
            (0..2)
                .map(|t| {
                    let own = (1.0 - beta).ln() + component_ll[t];
                    let flipped = if beta > 0.0 {
                        beta.ln() + component_ll[1 - t]
                    } else {
                        f64::NEG_INFINITY
                    };
                    priors[t].ln() + logsumexp(&[own, flipped])
                })
                .collect::<Vec<f64>>()
        }
    };
    let norm = logsumexp(&log_posterior);
    Ok(log_posterior.into_iter().map(|lp| (lp - norm).exp()).collect())
}

/// Origin posterior (the 4-class task).
pub fn bayes_posterior(record: &StoneRecord, spec: &GeneratorSpec) -> Result<Vec<f64>> {
    bayes_posterior_for(record, spec, Task::Od)
}

/// Accuracy of the exact-posterior classifier over the labelled records: the
/// ceiling any trained model is measured against.
pub fn oracle_accuracy(records: &[StoneRecord], spec: &GeneratorSpec, task: Task) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for record in records {
        let Some(label) = record.label(task) else { continue };
        let posterior = bayes_posterior_for(record, spec, task)?;
        let predicted = crate::types::argmax_label(&posterior)?;
        total += 1;
        correct += usize::from(predicted == label);
    }
    if total == 0 {
        return Err(Error::InvalidInput("no labelled records".into()));
    }
    Ok(correct as f64 / total as f64)
}

pub fn save_spec(spec: &GeneratorSpec, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string_pretty(spec)
        .map_err(|e| Error::InvalidInput(format!("spec serialization failed: {e}")))?;
    std::fs::write(path.as_ref(), text)?;
    Ok(())
}

/// Parses and fully validates a generator spec, including the empirical check
/// that generated stones pass the ingest gates with probability ≥ 0.99.
pub fn load_spec(path: impl AsRef<Path>) -> Result<GeneratorSpec> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let spec: GeneratorSpec = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("spec parse failed: {e}")))?;
    spec.validate()?;
    let rate = spec.empirical_gate_pass_rate(300);
    if rate < 0.99 {
        return Err(Error::InvalidConfig(format!(
            "generated stones pass the validity gates with empirical probability {rate:.3} < 0.99"
        )));
    }
    Ok(spec)
}

/// Resolves a builtin name (`easy`, `realistic`) or a spec file path.
pub fn resolve_spec(name_or_path: &str, seed: Option<u64>) -> Result<GeneratorSpec> {
    let mut spec = match name_or_path {
        "easy" => easy_spec(7),
        "realistic" => realistic_spec(7),
        path => load_spec(path)?,
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn uniform(mean: f64, sigma: f64, n: usize) -> Vec<LogNormal> {
    vec![LogNormal::from_mean(mean, sigma); n]
}

/// Shared component geometry: four well-separated origin components. The
/// `easy`/`realistic` references differ in noise, confusion and missingness.
fn base_origins(sigma_info: f64) -> Vec<OriginParams> {
    // XRF manifest: Al2O3, TiO2, V2O5, Cr2O3, Fe2O3, Ga2O3, PbO, WO3, PtO2,
    // then 17 uninformative oxides.
    let xrf_for = |tio2: f64, v2o5: f64, cr2o3: f64, fe2o3: f64, ga2o3: f64| -> Vec<LogNormal> {
        let mut v = Vec::with_capacity(XRF_ENTRIES);
        v.push(LogNormal::from_mean(975_000.0, 0.01));
        v.push(LogNormal::from_mean(tio2, sigma_info));
        v.push(LogNormal::from_mean(v2o5, sigma_info));
        v.push(LogNormal::from_mean(cr2o3, sigma_info));
        v.push(LogNormal::from_mean(fe2o3, sigma_info));
        v.push(LogNormal::from_mean(ga2o3, sigma_info));
        let tail = [12.0, 9.0, 6.0, 130.0, 220.0, 900.0, 40.0, 80.0, 260.0, 35.0, 18.0, 11.0, 24.0, 14.0, 45.0, 8.0, 16.0, 21.0, 6.0, 9.0];
        v.extend(tail.iter().map(|&m| LogNormal::from_mean(m, 0.3)));
        v
    };
    // ICP-MS manifest: 9Be, 25Mg, 27Al, 45Sc, 49Ti, 51V, 53Cr, 57Fe, 62Ni,
    // 71Ga, 90Zr, 118Sn, 140Ce, 146Nd, 176Hf, 181Ta.
    let icpms_for = |mg: f64, ti: f64, v51: f64, cr: f64, fe: f64, ga: f64| -> Vec<LogNormal> {
        vec![
            LogNormal::from_mean(0.4, 0.3),
            LogNormal::from_mean(mg, sigma_info),
            LogNormal::from_mean(520_000.0, 0.01),
            LogNormal::from_mean(1.8, 0.3),
            LogNormal::from_mean(ti, sigma_info),
            LogNormal::from_mean(v51, sigma_info),
            LogNormal::from_mean(cr, sigma_info),
            LogNormal::from_mean(fe, sigma_info),
            LogNormal::from_mean(2.5, 0.3),
            LogNormal::from_mean(ga, sigma_info),
            LogNormal::from_mean(1.1, 0.3),
            LogNormal::from_mean(0.9, 0.3),
            LogNormal::from_mean(0.5, 0.3),
            LogNormal::from_mean(0.4, 0.3),
            LogNormal::from_mean(0.3, 0.3),
            LogNormal::from_mean(0.6, 0.3),
        ]
    };
    vec![
        OriginParams {
            origin: OriginLabel::Kashmir,
            uv_peaks: vec![
                GaussPeak { center: 410.0, width: 14.0, amplitude: 0.9 },
                GaussPeak { center: 560.0, width: 25.0, amplitude: 0.65 },
                GaussPeak { center: 693.0, width: 10.0, amplitude: 0.35 },
            ],
            xrf: xrf_for(350.0, 18.0, 140.0, 3_800.0, 55.0),
            icpms: icpms_for(22.0, 150.0, 14.0, 120.0, 3_200.0, 60.0),
        },
        OriginParams {
            origin: OriginLabel::Burma,
            uv_peaks: vec![
                GaussPeak { center: 388.0, width: 12.0, amplitude: 0.85 },
                GaussPeak { center: 560.0, width: 25.0, amplitude: 0.4 },
                GaussPeak { center: 745.0, width: 16.0, amplitude: 0.45 },
            ],
            xrf: xrf_for(900.0, 42.0, 420.0, 8_500.0, 115.0),
            icpms: icpms_for(48.0, 380.0, 33.0, 350.0, 7_200.0, 120.0),
        },
        OriginParams {
            origin: OriginLabel::SriLanka,
            uv_peaks: vec![
                GaussPeak { center: 450.0, width: 16.0, amplitude: 0.7 },
                GaussPeak { center: 520.0, width: 20.0, amplitude: 0.55 },
                GaussPeak { center: 810.0, width: 20.0, amplitude: 0.3 },
            ],
            xrf: xrf_for(1_700.0, 9.0, 70.0, 2_300.0, 28.0),
            icpms: icpms_for(14.0, 700.0, 7.0, 60.0, 1_900.0, 30.0),
        },
        OriginParams {
            origin: OriginLabel::Madagascar,
            uv_peaks: vec![
                GaussPeak { center: 430.0, width: 13.0, amplitude: 0.75 },
                GaussPeak { center: 610.0, width: 22.0, amplitude: 0.6 },
                GaussPeak { center: 770.0, width: 14.0, amplitude: 0.25 },
            ],
            xrf: xrf_for(2_600.0, 65.0, 800.0, 15_000.0, 190.0),
            icpms: icpms_for(95.0, 1_200.0, 50.0, 640.0, 12_500.0, 200.0),
        },
    ]
}

fn shared_ftir_peaks() -> Vec<GaussPeak> {
    vec![
        GaussPeak { center: 480.0, width: 35.0, amplitude: 1.1 },
        GaussPeak { center: 2920.0, width: 45.0, amplitude: 0.5 },
        GaussPeak { center: 5200.0, width: 120.0, amplitude: 0.25 },
    ]
}

/// Reference spec with essentially no class overlap: oracle accuracy ≈ 100%.
pub fn easy_spec(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        name: "easy".into(),
        seed,
        class_priors: vec![0.25; 4],
        treatment_prior: 0.5,
        confusion_rate: 0.0,
        treatment_confusion: 0.0,
        uv_baseline: 0.45,
        uv_noise: 0.03,
        ftir_baseline: 0.9,
        ftir_noise: 0.04,
        ftir_peaks: shared_ftir_peaks(),
        treatment_band: GaussPeak { center: 3309.0, width: 12.0, amplitude: 0.7 },
        repeat_fraction: 0.0,
        missing_fraction: 0.0,
        origins: base_origins(0.25),
    }
}

/// Reference spec with overlapping classes: ~3% of stones carry the partner
/// class's signature, so the Bayes ceiling sits near 97%. One stone in ten is
/// re-evaluated and one source entry in ten is missing.
pub fn realistic_spec(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        name: "realistic".into(),
        seed,
        class_priors: vec![0.25; 4],
        treatment_prior: 0.45,
        confusion_rate: 0.03,
        treatment_confusion: 0.025,
        uv_baseline: 0.45,
        uv_noise: 0.05,
        ftir_baseline: 0.9,
        ftir_noise: 0.05,
        ftir_peaks: shared_ftir_peaks(),
        treatment_band: GaussPeak { center: 3309.0, width: 12.0, amplitude: 0.7 },
        repeat_fraction: 0.1,
        missing_fraction: 0.1,
        origins: base_origins(0.25),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = easy_spec(3);
        let a = gen_stone(&spec, OriginLabel::Burma, TreatmentLabel::Treated, 12).unwrap();
        let b = gen_stone(&spec, OriginLabel::Burma, TreatmentLabel::Treated, 12).unwrap();
        assert_eq!(a, b);
        let c = gen_stone(&spec, OriginLabel::Burma, TreatmentLabel::Treated, 13).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lognormal_sample_mean_matches_configuration() {
        // Monte Carlo against the configured log-normal mean: class A has
        // mean 71Ga = 100 ppm, class B has 20 ppm.
        let mut spec = easy_spec(5);
        const GA: usize = 9;
        spec.origins[0].icpms[GA] = LogNormal::from_mean(100.0, 0.2);
        spec.origins[1].icpms[GA] = LogNormal::from_mean(20.0, 0.2);
        let mut sum = 0.0;
        let n = 10_000u64;
        for i in 0..n {
            let rec =
                gen_stone(&spec, OriginLabel::Kashmir, TreatmentLabel::NotTreated, i).unwrap();
            sum += rec.icpms.as_ref().unwrap().values()[GA];
        }
        let mean = sum / n as f64;
        assert!((mean - 100.0).abs() < 5.0, "sample mean {mean}");
    }

    #[test]
    fn treatment_band_shifts_ftir_center() {
        let spec = easy_spec(11);
        let treated =
            gen_stone(&spec, OriginLabel::Kashmir, TreatmentLabel::Treated, 4).unwrap();
        let clean_untreated = ftir_clean(&spec, TreatmentLabel::NotTreated);
        let center_idx = (spec.treatment_band.center - FTIR_MIN_WAVENUMBER) as usize;
        let delta = treated.ftir.as_ref().unwrap().values()[center_idx] - clean_untreated[center_idx];
        assert!(
            (delta - spec.treatment_band.amplitude).abs() <= 3.0 * spec.ftir_noise,
            "band delta {delta}"
        );
    }

    #[test]
    fn corpus_class_counts_within_binomial_bounds() {
        // Exact-binomial oracle: for X ~ Binomial(1000, 0.25),
        // P(200 ≤ X ≤ 300) ≥ 0.99, so the per-class counts of a 1000-stone
        // uniform-prior corpus land in [200, 300] (fixed seed).
        let mut in_range_prob = 0.0;
        let (n, p) = (1000u64, 0.25f64);
        let mut pmf = (1.0 - p).powi(n as i32); // P(X = 0)
        for k in 0..=n {
            if (200..=300).contains(&k) {
                in_range_prob += pmf;
            }
            // Recurrence: P(X=k+1) = P(X=k) * (n-k)/(k+1) * p/(1-p)
            pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
        }
        assert!(in_range_prob >= 0.99, "binomial bound {in_range_prob}");

        let spec = easy_spec(21);
        let corpus = gen_corpus(&spec, 1000).unwrap();
        let mut counts = [0usize; 4];
        for r in &corpus {
            counts[r.origin.unwrap().ordinal()] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!((200..=300).contains(&c), "class {i} count {c}");
        }
    }

    #[test]
    fn zero_repeat_fraction_keeps_ids_unique() {
        let spec = easy_spec(2);
        let corpus = gen_corpus(&spec, 200).unwrap();
        let mut ids: Vec<&str> = corpus.iter().map(|r| r.stone_id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 200);
    }

    #[test]
    fn zero_missingness_keeps_all_sources() {
        let spec = easy_spec(2);
        let corpus = gen_corpus(&spec, 50).unwrap();
        assert!(corpus.iter().all(|r| r.present_sources().len() == 4));
    }

    #[test]
    fn repeats_share_ids_and_labels() {
        let mut spec = realistic_spec(4);
        spec.missing_fraction = 0.0;
        let corpus = gen_corpus(&spec, 300).unwrap();
        let repeats: Vec<&StoneRecord> =
            corpus.iter().filter(|r| r.evaluation_time > 0).collect();
        assert!(!repeats.is_empty());
        for second in repeats {
            let first = corpus
                .iter()
                .find(|r| r.stone_id == second.stone_id && r.evaluation_time == 0)
                .expect("base evaluation exists");
            assert_eq!(first.origin, second.origin);
            assert_eq!(first.treatment, second.treatment);
            assert_ne!(first.uv, second.uv); // re-noised
        }
    }

    #[test]
    fn posterior_with_identical_classes_is_the_prior() {
        let mut spec = easy_spec(9);
        let shared = spec.origins[0].clone();
        for (i, o) in spec.origins.iter_mut().enumerate() {
            o.uv_peaks = shared.uv_peaks.clone();
            o.xrf = shared.xrf.clone();
            o.icpms = shared.icpms.clone();
            o.origin = OriginLabel::ALL[i];
        }
        spec.class_priors = vec![0.25; 4];
        let rec = gen_stone(&spec, OriginLabel::SriLanka, TreatmentLabel::Treated, 1).unwrap();
        let post = bayes_posterior(&rec, &spec).unwrap();
        for &p in &post {
            assert!((p - 0.25).abs() < 1e-9, "{post:?}");
        }
    }

    #[test]
    fn posterior_concentrates_on_separated_classes() {
        // Components are dozens of sigmas apart in the easy spec; the
        // posterior puts ≥ 0.999 on the true class for ≥ 99% of stones.
        let spec = easy_spec(13);
        let corpus = gen_corpus(&spec, 400).unwrap();
        let mut confident = 0usize;
        for rec in &corpus {
            let post = bayes_posterior(&rec.clone(), &spec).unwrap();
            if post[rec.origin.unwrap().ordinal()] >= 0.999 {
                confident += 1;
            }
        }
        assert!(confident as f64 >= 0.99 * corpus.len() as f64, "{confident}/400");
    }

    #[test]
    fn posterior_is_normalized() {
        let spec = realistic_spec(17);
        for i in 0..20 {
            let rec = gen_stone(&spec, OriginLabel::Madagascar, TreatmentLabel::Treated, i).unwrap();
            let post = bayes_posterior(&rec, &spec).unwrap();
            let sum: f64 = post.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
        }
    }

    #[test]
    fn posterior_invariant_to_dropping_uninformative_source() {
        // ICP-MS parameters identical across classes: removing the source
        // cannot move the posterior.
        let mut spec = easy_spec(23);
        let shared = spec.origins[0].icpms.clone();
        for o in &mut spec.origins {
            o.icpms = shared.clone();
        }
        let mut rec = gen_stone(&spec, OriginLabel::Burma, TreatmentLabel::Treated, 2).unwrap();
        let with = bayes_posterior(&rec, &spec).unwrap();
        rec.icpms = None;
        let without = bayes_posterior(&rec, &spec).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_pass_rate_is_high_for_reference_specs() {
        assert!(easy_spec(7).empirical_gate_pass_rate(300) >= 0.99);
        assert!(realistic_spec(7).empirical_gate_pass_rate(300) >= 0.99);
    }

    #[test]
    fn reference_spec_oracle_levels() {
        let easy = easy_spec(31);
        let corpus = gen_corpus(&easy, 400).unwrap();
        let acc = oracle_accuracy(&corpus, &easy, Task::Od).unwrap();
        assert!(acc >= 0.995, "easy oracle {acc}");

        let realistic = realistic_spec(31);
        let corpus = gen_corpus(&realistic, 800).unwrap();
        let od = oracle_accuracy(&corpus, &realistic, Task::Od).unwrap();
        assert!((0.94..=0.99).contains(&od), "realistic OD oracle {od}");
        let td = oracle_accuracy(&corpus, &realistic, Task::Td).unwrap();
        assert!((0.94..=0.995).contains(&td), "realistic TD oracle {td}");
    }

    #[test]
    fn spec_toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.toml");
        let spec = realistic_spec(42);
        save_spec(&spec, &path).unwrap();
        let loaded = load_spec(&path).unwrap();
        assert_eq!(loaded, spec);
    }
}
