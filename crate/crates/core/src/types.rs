//! Domain data types shared by every other module: label spaces, source
//! identifiers, measurement containers, predictions and calibration profiles.
//!
//! All types are immutable after construction and safe to share across
//! threads.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of polarization rows in a UV spectrum.
pub const UV_ROWS: usize = 2;
/// Points per UV polarization row (280–880 nm at 0.5 nm steps).
pub const UV_POINTS: usize = 1201;
pub const UV_MIN_NM: f64 = 280.0;
pub const UV_STEP_NM: f64 = 0.5;

/// Points on the FTIR grid (200–7000 cm⁻¹ at 1 cm⁻¹ steps).
pub const FTIR_POINTS: usize = 6801;
pub const FTIR_MIN_WAVENUMBER: f64 = 200.0;
pub const FTIR_MAX_WAVENUMBER: f64 = 7000.0;

pub const XRF_ENTRIES: usize = 26;
pub const ICPMS_ENTRIES: usize = 16;

/// Fixed layout of the 26 XRF concentration entries (ppm). The laboratory
/// layout is not public beyond the elements relevant to blue sapphire, so the
/// remaining oxides are a documented stand-in manifest. Order is part of the
/// persistence and model contract.
pub const XRF_MANIFEST: [&str; XRF_ENTRIES] = [
    "Al2O3", "TiO2", "V2O5", "Cr2O3", "Fe2O3", "Ga2O3", "PbO", "WO3", "PtO2", "Na2O", "MgO",
    "SiO2", "P2O5", "K2O", "CaO", "MnO", "NiO", "CuO", "ZnO", "SrO", "ZrO2", "Nb2O5", "SnO2",
    "BaO", "La2O3", "CeO2",
];

pub const XRF_AL2O3: usize = 0;
pub const XRF_TIO2: usize = 1;
pub const XRF_CR2O3: usize = 3;
pub const XRF_FE2O3: usize = 4;

/// Fixed order of the 16 retained ICP-MS isotope entries (ppm).
pub const ICPMS_MANIFEST: [&str; ICPMS_ENTRIES] = [
    "9Be", "25Mg", "27Al", "45Sc", "49Ti", "51V", "53Cr", "57Fe", "62Ni", "71Ga", "90Zr",
    "118Sn", "140Ce", "146Nd", "176Hf", "181Ta",
];

/// Geographic origin class. Ordinals are fixed: Kashmir=0, Burma=1,
/// SriLanka=2, Madagascar=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OriginLabel {
    Kashmir = 0,
    Burma = 1,
    SriLanka = 2,
    Madagascar = 3,
}

impl OriginLabel {
    pub const ALL: [OriginLabel; 4] = [
        OriginLabel::Kashmir,
        OriginLabel::Burma,
        OriginLabel::SriLanka,
        OriginLabel::Madagascar,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ord: usize) -> Result<Self> {
        Self::ALL
            .get(ord)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("origin ordinal {ord} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            OriginLabel::Kashmir => "Kashmir",
            OriginLabel::Burma => "Burma",
            OriginLabel::SriLanka => "SriLanka",
            OriginLabel::Madagascar => "Madagascar",
        }
    }
}

impl std::str::FromStr for OriginLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown origin label {s:?}")))
    }
}

/// Heat-treatment class. Ordinals are fixed: Treated=0, NotTreated=1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TreatmentLabel {
    Treated = 0,
    NotTreated = 1,
}

impl TreatmentLabel {
    pub const ALL: [TreatmentLabel; 2] = [TreatmentLabel::Treated, TreatmentLabel::NotTreated];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ord: usize) -> Result<Self> {
        Self::ALL
            .get(ord)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("treatment ordinal {ord} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TreatmentLabel::Treated => "Treated",
            TreatmentLabel::NotTreated => "NotTreated",
        }
    }
}

impl std::str::FromStr for TreatmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown treatment label {s:?}")))
    }
}

/// The four measurement sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceId {
    Uv,
    Ftir,
    Xrf,
    Icpms,
}

impl SourceId {
    pub const ALL: [SourceId; 4] = [SourceId::Uv, SourceId::Ftir, SourceId::Xrf, SourceId::Icpms];

    pub fn index(self) -> usize {
        match self {
            SourceId::Uv => 0,
            SourceId::Ftir => 1,
            SourceId::Xrf => 2,
            SourceId::Icpms => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceId::Uv => "uv",
            SourceId::Ftir => "ftir",
            SourceId::Xrf => "xrf",
            SourceId::Icpms => "icpms",
        }
    }

    /// Elemental sources are forbidden as inputs to the treatment-detection
    /// task.
    pub fn is_elemental(self) -> bool {
        matches!(self, SourceId::Xrf | SourceId::Icpms)
    }
}

impl std::fmt::Display for SourceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SourceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|src| src.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown source {s:?}")))
    }
}

/// Classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Origin determination, 4 classes.
    Od,
    /// Heat-treatment detection, 2 classes.
    Td,
}

impl Task {
    pub fn class_count(self) -> usize {
        match self {
            Task::Od => 4,
            Task::Td => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Od => "od",
            Task::Td => "td",
        }
    }

    pub fn class_name(self, ordinal: usize) -> Result<&'static str> {
        match self {
            Task::Od => OriginLabel::from_ordinal(ordinal).map(OriginLabel::name),
            Task::Td => TreatmentLabel::from_ordinal(ordinal).map(TreatmentLabel::name),
        }
    }

    /// Sources a model for this task may consume. TD excludes the elemental
    /// sources since they carry no information about heat treatment.
    pub fn default_sources(self) -> Vec<SourceId> {
        match self {
            Task::Od => SourceId::ALL.to_vec(),
            Task::Td => vec![SourceId::Uv, SourceId::Ftir],
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "od" => Ok(Task::Od),
            "td" => Ok(Task::Td),
            _ => Err(Error::InvalidInput(format!("unknown task {s:?}"))),
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

/// Polarized UV-Vis-NIR absorbance spectrum: 2 rows of 1201 points each,
/// stored row-major. All entries are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct UvSpectrum {
    values: Vec<f64>,
}

impl UvSpectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != UV_ROWS * UV_POINTS {
            return Err(Error::InvalidInput(format!(
                "UV spectrum must have {}x{} entries, got {}",
                UV_ROWS,
                UV_POINTS,
                values.len()
            )));
        }
        check_finite(&values, "UV spectrum")?;
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("UV absorbance must be non-negative".into()));
        }
        Ok(UvSpectrum { values })
    }

    pub fn from_rows(row0: Vec<f64>, row1: Vec<f64>) -> Result<Self> {
        let mut values = row0;
        values.extend(row1);
        Self::new(values)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * UV_POINTS..(i + 1) * UV_POINTS]
    }

    /// Row-major flat view (2*1201 entries).
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// FTIR spectrum on the fixed 6801-point integer wavenumber grid. The
/// coverage mask distinguishes measured positions from zero padding; padded
/// positions are exactly 0. The [-5, 10] range of measured values is
/// maintained by the ingest validity gate, not by this constructor, so the
/// gate itself stays testable.
#[derive(Debug, Clone, PartialEq)]
pub struct FtirSpectrum {
    values: Vec<f64>,
    coverage: Vec<bool>,
}

impl FtirSpectrum {
    pub fn new(values: Vec<f64>, coverage: Vec<bool>) -> Result<Self> {
        if values.len() != FTIR_POINTS || coverage.len() != FTIR_POINTS {
            return Err(Error::InvalidInput(format!(
                "FTIR spectrum must have {FTIR_POINTS} values and coverage flags, got {} / {}",
                values.len(),
                coverage.len()
            )));
        }
        check_finite(&values, "FTIR spectrum")?;
        for (i, (&v, &c)) in values.iter().zip(&coverage).enumerate() {
            if !c && v != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "unmeasured FTIR position {i} must be exactly 0, got {v}"
                )));
            }
        }
        Ok(FtirSpectrum { values, coverage })
    }

    /// Fully covered spectrum (every position measured).
    pub fn full(values: Vec<f64>) -> Result<Self> {
        let coverage = vec![true; values.len()];
        Self::new(values, coverage)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coverage(&self) -> &[bool] {
        &self.coverage
    }

    pub fn measured(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.coverage)
            .enumerate()
            .filter_map(|(i, (&v, &c))| c.then_some((i, v)))
    }
}

/// XRF composition: the 26 concentration entries of [`XRF_MANIFEST`], ppm.
#[derive(Debug, Clone, PartialEq)]
pub struct XrfComposition {
    values: [f64; XRF_ENTRIES],
}

impl XrfComposition {
    pub fn new(values: [f64; XRF_ENTRIES]) -> Result<Self> {
        check_finite(&values, "XRF composition")?;
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("XRF concentrations must be non-negative".into()));
        }
        Ok(XrfComposition { values })
    }

    pub fn values(&self) -> &[f64; XRF_ENTRIES] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        XRF_MANIFEST.iter().position(|&n| n == name).map(|i| self.values[i])
    }
}

/// ICP-MS composition: the 16 isotope entries of [`ICPMS_MANIFEST`], ppm.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpmsComposition {
    values: [f64; ICPMS_ENTRIES],
}

impl IcpmsComposition {
    pub fn new(values: [f64; ICPMS_ENTRIES]) -> Result<Self> {
        check_finite(&values, "ICP-MS composition")?;
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput(
                "ICP-MS concentrations must be non-negative".into(),
            ));
        }
        Ok(IcpmsComposition { values })
    }

    pub fn values(&self) -> &[f64; ICPMS_ENTRIES] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        ICPMS_MANIFEST.iter().position(|&n| n == name).map(|i| self.values[i])
    }
}

/// One gemstone evaluation: any subset of the four sources plus optional
/// labels. Repeat evaluations of the same stone share `stone_id` and differ
/// in `evaluation_time` (epoch days).
#[derive(Debug, Clone, PartialEq)]
pub struct StoneRecord {
    pub stone_id: String,
    pub evaluation_time: i64,
    pub uv: Option<UvSpectrum>,
    pub ftir: Option<FtirSpectrum>,
    pub xrf: Option<XrfComposition>,
    pub icpms: Option<IcpmsComposition>,
    pub origin: Option<OriginLabel>,
    pub treatment: Option<TreatmentLabel>,
}

impl StoneRecord {
    pub fn new(stone_id: impl Into<String>, evaluation_time: i64) -> Self {
        StoneRecord {
            stone_id: stone_id.into(),
            evaluation_time,
            uv: None,
            ftir: None,
            xrf: None,
            icpms: None,
            origin: None,
            treatment: None,
        }
    }

    pub fn has_source(&self, source: SourceId) -> bool {
        match source {
            SourceId::Uv => self.uv.is_some(),
            SourceId::Ftir => self.ftir.is_some(),
            SourceId::Xrf => self.xrf.is_some(),
            SourceId::Icpms => self.icpms.is_some(),
        }
    }

    pub fn present_sources(&self) -> Vec<SourceId> {
        SourceId::ALL.iter().copied().filter(|&s| self.has_source(s)).collect()
    }

    pub fn drop_source(&mut self, source: SourceId) {
        match source {
            SourceId::Uv => self.uv = None,
            SourceId::Ftir => self.ftir = None,
            SourceId::Xrf => self.xrf = None,
            SourceId::Icpms => self.icpms = None,
        }
    }

    pub fn label(&self, task: Task) -> Option<usize> {
        match task {
            Task::Od => self.origin.map(OriginLabel::ordinal),
            Task::Td => self.treatment.map(TreatmentLabel::ordinal),
        }
    }

    /// Checks record invariants: non-empty id, at least one measurement.
    pub fn validate(&self) -> Result<()> {
        if self.stone_id.is_empty() {
            return Err(Error::InvalidInput("stone_id must be non-empty".into()));
        }
        if self.present_sources().is_empty() {
            return Err(Error::InvalidInput(format!(
                "stone {} has no measurements",
                self.stone_id
            )));
        }
        Ok(())
    }
}

/// Smallest index attaining the maximum of `probs`. Ties break toward the
/// lowest ordinal so results are deterministic and reproducible.
pub fn argmax_label(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("argmax of empty vector".into()));
    }
    check_finite(probs, "probability vector")?;
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Model output for one stone: class probabilities, the argmax label and its
/// probability (the confidence).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    probs: Vec<f64>,
    confidence: f64,
    label: usize,
    task: Task,
}

impl Prediction {
    pub fn new(probs: Vec<f64>, task: Task) -> Result<Self> {
        if probs.len() != task.class_count() {
            return Err(Error::InvalidInput(format!(
                "{} prediction needs {} probabilities, got {}",
                task.name(),
                task.class_count(),
                probs.len()
            )));
        }
        check_finite(&probs, "probability vector")?;
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, outside 1 ± {PROB_SUM_TOLERANCE}"
            )));
        }
        let label = argmax_label(&probs)?;
        let confidence = probs[label];
        Ok(Prediction { probs, confidence, label, task })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Maximum entry of the probability vector.
    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn task(&self) -> Task {
        self.task
    }
}

/// Calibration operating mode. `Mode1` targets 98% training accuracy on the
/// retained subset, `Mode2` targets 99%; `None` accepts everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    None,
    Mode1,
    Mode2,
}

impl CalibrationMode {
    pub const ALL: [CalibrationMode; 3] =
        [CalibrationMode::None, CalibrationMode::Mode1, CalibrationMode::Mode2];

    pub fn epsilon(self) -> Option<f64> {
        match self {
            CalibrationMode::None => None,
            CalibrationMode::Mode1 => Some(0.98),
            CalibrationMode::Mode2 => Some(0.99),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CalibrationMode::None => "none",
            CalibrationMode::Mode1 => "mode1",
            CalibrationMode::Mode2 => "mode2",
        }
    }
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CalibrationMode::None),
            "mode1" | "mode-1" | "mode_1" => Ok(CalibrationMode::Mode1),
            "mode2" | "mode-2" | "mode_2" => Ok(CalibrationMode::Mode2),
            _ => Err(Error::InvalidInput(format!("unknown calibration mode {s:?}"))),
        }
    }
}

/// Selected operating point: mode, target accuracy and the confidence
/// threshold to apply at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub mode: CalibrationMode,
    pub epsilon: Option<f64>,
    pub threshold: f64,
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidInput(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        match self.mode {
            CalibrationMode::None => {
                if self.threshold != 0.0 || self.epsilon.is_some() {
                    return Err(Error::InvalidInput(
                        "mode none requires threshold 0 and no epsilon".into(),
                    ));
                }
            }
            mode => {
                if self.epsilon != mode.epsilon() {
                    return Err(Error::InvalidInput(format!(
                        "{} requires epsilon {:?}",
                        mode.name(),
                        mode.epsilon()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_unique_maximum() {
        assert_eq!(argmax_label(&[0.1, 0.7, 0.15, 0.05]).unwrap(), 1);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax_label(&[0.5, 0.5]).unwrap(), 0);
    }

    #[test]
    fn argmax_full_tie() {
        assert_eq!(argmax_label(&[0.25, 0.25, 0.25, 0.25]).unwrap(), 0);
    }

    #[test]
    fn argmax_empty_is_invalid() {
        assert!(matches!(argmax_label(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn prediction_invariants() {
        let p = Prediction::new(vec![0.1, 0.2, 0.6, 0.1], Task::Od).unwrap();
        assert_eq!(p.label(), 2);
        assert_eq!(p.confidence(), 0.6);
        assert_eq!(p.confidence(), p.probs()[p.label()]);
    }

    #[test]
    fn prediction_rejects_bad_sum() {
        assert!(Prediction::new(vec![0.5, 0.6], Task::Td).is_err());
        assert!(Prediction::new(vec![0.5, 0.5, 0.0], Task::Td).is_err());
    }

    #[test]
    fn label_ordinals_are_stable() {
        assert_eq!(OriginLabel::Kashmir.ordinal(), 0);
        assert_eq!(OriginLabel::Burma.ordinal(), 1);
        assert_eq!(OriginLabel::SriLanka.ordinal(), 2);
        assert_eq!(OriginLabel::Madagascar.ordinal(), 3);
        assert_eq!(TreatmentLabel::Treated.ordinal(), 0);
        assert_eq!(TreatmentLabel::NotTreated.ordinal(), 1);
    }

    #[test]
    fn uv_shape_and_sign_enforced() {
        assert!(UvSpectrum::new(vec![0.0; 2 * UV_POINTS]).is_ok());
        assert!(UvSpectrum::new(vec![0.0; UV_POINTS]).is_err());
        let mut bad = vec![0.0; 2 * UV_POINTS];
        bad[10] = -0.5;
        assert!(UvSpectrum::new(bad).is_err());
    }

    #[test]
    fn ftir_padding_must_be_zero() {
        let mut values = vec![0.0; FTIR_POINTS];
        let mut coverage = vec![false; FTIR_POINTS];
        coverage[100] = true;
        values[100] = 1.5;
        assert!(FtirSpectrum::new(values.clone(), coverage.clone()).is_ok());
        values[200] = 0.1; // not covered
        assert!(FtirSpectrum::new(values, coverage).is_err());
    }

    #[test]
    fn record_requires_a_measurement() {
        let rec = StoneRecord::new("a", 0);
        assert!(rec.validate().is_err());
    }

    #[test]
    fn profile_mode_invariants() {
        let ok = CalibrationProfile { mode: CalibrationMode::None, epsilon: None, threshold: 0.0 };
        assert!(ok.validate().is_ok());
        let bad =
            CalibrationProfile { mode: CalibrationMode::None, epsilon: None, threshold: 0.2 };
        assert!(bad.validate().is_err());
        let m1 = CalibrationProfile {
            mode: CalibrationMode::Mode1,
            epsilon: Some(0.98),
            threshold: 0.7,
        };
        assert!(m1.validate().is_ok());
    }
}
