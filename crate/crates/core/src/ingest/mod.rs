//! Instrument-data preprocessing, validity gates and corpus persistence.
//!
//! The rules implemented here are the data contract of the pipeline:
//!
//! * FTIR is resampled onto the 200–7000 cm⁻¹ integer grid with a not-a-knot
//!   cubic spline; positions outside the measured range are zero-padded and
//!   flagged in the coverage mask. Spectra with a measured value below −5 or
//!   above 10 are rejected.
//! * UV measurements arrive as one or two 1201-point polarization rows; a
//!   single row is duplicated, any negative value rejects the measurement.
//! * XRF rows are rejected when Fe₂O₃ > 40 000 ppm, Al₂O₃ < 850 000 ppm,
//!   Cr₂O₃ > 10 000 ppm or TiO₂ > 6 000 ppm. All comparisons are strict, so
//!   boundary values are kept.
//! * ICP-MS rows keep the fixed 16-isotope subset.
//!
//! Corpora persist as UTF-8 JSON lines, one self-describing record per line;
//! loading restores records sorted by (stone_id, evaluation_time).

pub mod spline;

use crate::error::{Error, Result};
use crate::types::{
    FtirSpectrum, IcpmsComposition, OriginLabel, StoneRecord, TreatmentLabel, UvSpectrum,
    XrfComposition, FTIR_MAX_WAVENUMBER, FTIR_MIN_WAVENUMBER, FTIR_POINTS, ICPMS_MANIFEST,
    UV_POINTS, UV_ROWS, XRF_AL2O3, XRF_CR2O3, XRF_FE2O3, XRF_MANIFEST, XRF_TIO2,
};
use serde::{Deserialize, Serialize};
use spline::CubicSpline;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// An instrument spectrum as recorded: (abscissa, value) pairs on an
/// arbitrary grid with strictly increasing abscissa.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpectrum {
    pub points: Vec<(f64, f64)>,
}

impl RawSpectrum {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        RawSpectrum { points }
    }
}

/// Resamples a raw FTIR spectrum onto the 6801-point integer wavenumber grid.
/// Inside the measured range values come from a not-a-knot cubic spline;
/// outside it they are exactly 0 with coverage false.
pub fn resample_ftir(raw: &RawSpectrum) -> Result<FtirSpectrum> {
    if raw.points.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "FTIR resampling needs at least 4 points, got {}",
            raw.points.len()
        )));
    }
    for &(x, _) in &raw.points {
        if !(FTIR_MIN_WAVENUMBER..=FTIR_MAX_WAVENUMBER).contains(&x) {
            return Err(Error::InvalidInput(format!(
                "FTIR abscissa {x} outside [{FTIR_MIN_WAVENUMBER}, {FTIR_MAX_WAVENUMBER}]"
            )));
        }
    }
    let spline = CubicSpline::fit(&raw.points)?;
    let (lo, hi) = (spline.min_x(), spline.max_x());

    let mut values = vec![0.0; FTIR_POINTS];
    let mut coverage = vec![false; FTIR_POINTS];
    for (i, (v, c)) in values.iter_mut().zip(coverage.iter_mut()).enumerate() {
        let w = FTIR_MIN_WAVENUMBER + i as f64;
        if (lo..=hi).contains(&w) {
            *v = spline.eval(w);
            *c = true;
        }
    }
    FtirSpectrum::new(values, coverage)
}

/// Outlier gate for FTIR: reject iff any measured value is strictly below −5
/// or strictly above 10. Zero-padded positions are not measurements and are
/// ignored.
pub fn validate_ftir(s: &FtirSpectrum) -> bool {
    s.measured().all(|(_, v)| (-5.0..=10.0).contains(&v))
}

/// Normalizes UV input rows into the canonical 2×1201 layout. A single row is
/// duplicated; a negative absorbance anywhere rejects the measurement.
pub fn normalize_uv(rows: &[Vec<f64>]) -> Result<UvSpectrum> {
    if rows.is_empty() || rows.len() > UV_ROWS {
        return Err(Error::InvalidInput(format!(
            "UV needs 1 or 2 polarization rows, got {}",
            rows.len()
        )));
    }
    for row in rows {
        if row.len() != UV_POINTS {
            return Err(Error::InvalidInput(format!(
                "UV row must have {UV_POINTS} points, got {}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("UV row contains a non-finite value".into()));
        }
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::RejectedMeasurement(
                "UV spectrum contains a negative absorbance".into(),
            ));
        }
    }
    let row0 = rows[0].clone();
    let row1 = rows.get(1).cloned().unwrap_or_else(|| rows[0].clone());
    UvSpectrum::from_rows(row0, row1)
}

/// Outlier gate for XRF. Reject iff Fe₂O₃ > 40 000, Al₂O₃ < 850 000,
/// Cr₂O₃ > 10 000 or TiO₂ > 6 000 ppm (strict comparisons).
pub fn validate_xrf(c: &XrfComposition) -> bool {
    let v = c.values();
    !(v[XRF_FE2O3] > 40_000.0
        || v[XRF_AL2O3] < 850_000.0
        || v[XRF_CR2O3] > 10_000.0
        || v[XRF_TIO2] > 6_000.0)
}

/// Extracts the 16 retained isotopes from a full ICP-MS readout, in the fixed
/// manifest order. Extra entries are ignored; a missing isotope is an error
/// naming it.
pub fn select_icpms(full: &BTreeMap<String, f64>) -> Result<IcpmsComposition> {
    let mut values = [0.0; ICPMS_MANIFEST.len()];
    for (slot, name) in values.iter_mut().zip(ICPMS_MANIFEST) {
        *slot = *full
            .get(name)
            .ok_or_else(|| Error::MissingElement(name.to_string()))?;
    }
    IcpmsComposition::new(values)
}

/// Contiguous true-runs of a boolean mask as half-open [start, end) ranges.
pub fn coverage_to_runs(mask: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push([s, i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push([s, mask.len()]);
    }
    runs
}

pub fn runs_to_coverage(runs: &[[usize; 2]], len: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; len];
    let mut prev_end = 0usize;
    for &[start, end] in runs {
        if start < prev_end || start >= end || end > len {
            return Err(Error::InvalidInput(format!(
                "bad coverage run [{start}, {end}) for mask of length {len}"
            )));
        }
        mask[start..end].iter_mut().for_each(|m| *m = true);
        prev_end = end;
    }
    Ok(mask)
}

#[derive(Debug, Serialize, Deserialize)]
struct FtirRepr {
    values: Vec<f64>,
    coverage: Vec<[usize; 2]>,
}

/// One corpus line. Spectra are inline numeric arrays; elemental rows are
/// name→value maps keyed by the fixed manifests.
#[derive(Debug, Serialize, Deserialize)]
struct RecordRepr {
    stone_id: String,
    evaluation_time: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uv: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ftir: Option<FtirRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xrf: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    icpms: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    treatment: Option<String>,
}

fn xrf_to_map(c: &XrfComposition) -> BTreeMap<String, f64> {
    XRF_MANIFEST.iter().zip(c.values()).map(|(n, &v)| (n.to_string(), v)).collect()
}

fn icpms_to_map(c: &IcpmsComposition) -> BTreeMap<String, f64> {
    ICPMS_MANIFEST.iter().zip(c.values()).map(|(n, &v)| (n.to_string(), v)).collect()
}

fn xrf_from_map(map: &BTreeMap<String, f64>) -> Result<XrfComposition> {
    let mut values = [0.0; XRF_MANIFEST.len()];
    for (slot, name) in values.iter_mut().zip(XRF_MANIFEST) {
        *slot = *map
            .get(name)
            .ok_or_else(|| Error::MissingElement(name.to_string()))?;
    }
    XrfComposition::new(values)
}

fn record_to_repr(record: &StoneRecord) -> RecordRepr {
    RecordRepr {
        stone_id: record.stone_id.clone(),
        evaluation_time: record.evaluation_time,
        uv: record
            .uv
            .as_ref()
            .map(|s| vec![s.row(0).to_vec(), s.row(1).to_vec()]),
        ftir: record.ftir.as_ref().map(|s| FtirRepr {
            values: s.values().to_vec(),
            coverage: coverage_to_runs(s.coverage()),
        }),
        xrf: record.xrf.as_ref().map(xrf_to_map),
        icpms: record.icpms.as_ref().map(icpms_to_map),
        origin: record.origin.map(|o| o.name().to_string()),
        treatment: record.treatment.map(|t| t.name().to_string()),
    }
}

fn repr_to_record(repr: RecordRepr) -> Result<StoneRecord> {
    let mut record = StoneRecord::new(repr.stone_id, repr.evaluation_time);
    if let Some(rows) = repr.uv {
        if rows.len() != UV_ROWS {
            return Err(Error::InvalidInput(format!(
                "canonical UV must have exactly {UV_ROWS} rows, got {}",
                rows.len()
            )));
        }
        let mut it = rows.into_iter();
        record.uv = Some(UvSpectrum::from_rows(
            it.next().expect("2 rows"),
            it.next().expect("2 rows"),
        )?);
    }
    if let Some(f) = repr.ftir {
        let coverage = runs_to_coverage(&f.coverage, FTIR_POINTS)?;
        record.ftir = Some(FtirSpectrum::new(f.values, coverage)?);
    }
    if let Some(map) = repr.xrf {
        record.xrf = Some(xrf_from_map(&map)?);
    }
    if let Some(map) = repr.icpms {
        record.icpms = Some(select_icpms(&map)?);
    }
    if let Some(o) = repr.origin {
        record.origin = Some(o.parse::<OriginLabel>()?);
    }
    if let Some(t) = repr.treatment {
        record.treatment = Some(t.parse::<TreatmentLabel>()?);
    }
    record.validate()?;
    Ok(record)
}

fn sort_key(r: &StoneRecord) -> (String, i64) {
    (r.stone_id.clone(), r.evaluation_time)
}

fn check_duplicates(records: &[StoneRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[0].stone_id == w[1].stone_id && w[0].evaluation_time == w[1].evaluation_time {
            return Err(Error::DuplicateRecord {
                stone_id: w[0].stone_id.clone(),
                evaluation_time: w[0].evaluation_time,
            });
        }
    }
    Ok(())
}

/// Loads a JSONL corpus. Records come back sorted by
/// (stone_id, evaluation_time); malformed lines report their line number and
/// duplicate (stone_id, evaluation_time) pairs are an error.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<StoneRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let repr: RecordRepr = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let record = repr_to_record(repr).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    records.sort_by_key(sort_key);
    check_duplicates(&records)?;
    Ok(records)
}

/// Writes a corpus as JSON lines, one record per line, in the given order.
pub fn save_corpus(records: &[StoneRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for record in records {
        record.validate()?;
        let line = serde_json::to_string(&record_to_repr(record))
            .map_err(|e| Error::InvalidInput(format!("serialization failed: {e}")))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Lenient input line for `prep`: UV may have one row, FTIR may be raw
/// (abscissa, value) pairs, ICP-MS may be a superset of the manifest.
#[derive(Debug, Deserialize)]
struct RawRecordRepr {
    stone_id: String,
    evaluation_time: i64,
    #[serde(default)]
    uv: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    ftir: Option<FtirRepr>,
    #[serde(default)]
    ftir_raw: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    xrf: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    icpms: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    origin: Option<String>,
    #[serde(default)]
    treatment: Option<String>,
}

/// Counters from a `prep` pass. Rejected measurements are dropped from their
/// record; the record survives as long as another source remains.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct PrepStats {
    pub records_in: usize,
    pub records_out: usize,
    pub uv_rejected: usize,
    pub ftir_rejected: usize,
    pub xrf_rejected: usize,
    pub records_dropped: usize,
}

fn prep_record(repr: RawRecordRepr, stats: &mut PrepStats) -> Result<Option<StoneRecord>> {
    let mut record = StoneRecord::new(repr.stone_id, repr.evaluation_time);

    if let Some(rows) = repr.uv {
        match normalize_uv(&rows) {
            Ok(uv) => record.uv = Some(uv),
            Err(Error::RejectedMeasurement(_)) => stats.uv_rejected += 1,
            Err(e) => return Err(e),
        }
    }

    let ftir = match (repr.ftir, repr.ftir_raw) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidInput(
                "record carries both gridded and raw FTIR".into(),
            ))
        }
        (Some(f), None) => {
            let coverage = runs_to_coverage(&f.coverage, FTIR_POINTS)?;
            Some(FtirSpectrum::new(f.values, coverage)?)
        }
        (None, Some(points)) => {
            let raw = RawSpectrum::new(points.iter().map(|p| (p[0], p[1])).collect());
            Some(resample_ftir(&raw)?)
        }
        (None, None) => None,
    };
    if let Some(f) = ftir {
        if validate_ftir(&f) {
            record.ftir = Some(f);
        } else {
            stats.ftir_rejected += 1;
        }
    }

    if let Some(map) = repr.xrf {
        let xrf = xrf_from_map(&map)?;
        if validate_xrf(&xrf) {
            record.xrf = Some(xrf);
        } else {
            stats.xrf_rejected += 1;
        }
    }

    if let Some(map) = repr.icpms {
        record.icpms = Some(select_icpms(&map)?);
    }

    if let Some(o) = repr.origin {
        record.origin = Some(o.parse::<OriginLabel>()?);
    }
    if let Some(t) = repr.treatment {
        record.treatment = Some(t.parse::<TreatmentLabel>()?);
    }

    if record.present_sources().is_empty() {
        stats.records_dropped += 1;
        return Ok(None);
    }
    Ok(Some(record))
}

/// Reads a lenient raw corpus, applies resampling plus every validity gate,
/// and writes the canonical corpus. Per-source gate failures drop the source
/// only; a record with no surviving source is dropped.
pub fn prep_corpus(input: impl AsRef<Path>, output: impl AsRef<Path>) -> Result<PrepStats> {
    let file = std::fs::File::open(input.as_ref())?;
    let reader = BufReader::new(file);
    let mut stats = PrepStats::default();
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.records_in += 1;
        let repr: RawRecordRepr = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let prepped = prep_record(repr, &mut stats).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if let Some(record) = prepped {
            records.push(record);
        }
    }
    records.sort_by_key(sort_key);
    check_duplicates(&records)?;
    stats.records_out = records.len();
    save_corpus(&records, output)?;
    Ok(stats)
}
