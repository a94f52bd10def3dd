//! Command implementations behind the `annoreg` binary. Each command is a
//! plain function over paths so tests can drive it without a subprocess.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use annoreg::config::RunConfig;

mod cohort;
mod evaluate;
mod pipeline;

pub use cohort::{synth_cohort, synth_cohort_from, synth_predictions, CohortSummary};
pub use evaluate::{compare, evaluate, EvaluateSummary, ThresholdMode};
pub use pipeline::{pipeline, read_case_manifest, CaseInputs, PipelineSummary};

/// Exit code 2: unreadable or invalid input.
pub const EXIT_INPUT: u8 = 2;
/// Exit code 3: some pipeline cases failed.
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Input(String),
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Partial(_) => EXIT_PARTIAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Partial(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<annoreg::Error> for CliError {
    fn from(e: annoreg::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn at(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

pub(crate) fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| at(path, e))
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| at(path, e))
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| at(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub file: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn new(role: impl Into<String>, path: &Path, bytes: &[u8]) -> Self {
        let file = path.file_name().map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        Self { role: role.into(), file, sha256: sha256_hex(bytes) }
    }
}

/// Provenance written next to every output. Holds nothing that varies
/// between reruns on identical inputs (no timestamps, output paths or
/// worker counts).
#[derive(Debug, Clone, Serialize)]
pub struct Sidecar {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: Option<RunConfig>,
    pub parameters: BTreeMap<String, Value>,
    pub inputs: Vec<InputDigest>,
}

impl Sidecar {
    pub fn new(command: &'static str) -> Self {
        Self {
            tool: "annoreg",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: None,
            config: None,
            parameters: BTreeMap::new(),
            inputs: Vec::new(),
        }
    }

    pub fn with_config(mut self, config: &RunConfig) -> Self {
        self.seed = Some(config.seed);
        self.config = Some(config.clone());
        self
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.parameters.insert(key.to_string(), serde_json::to_value(value).expect("parameter serializes"));
        self
    }

    pub fn input(mut self, role: &str, path: &Path, bytes: &[u8]) -> Self {
        self.inputs.push(InputDigest::new(role, path, bytes));
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sidecar serializes");
        s.push('\n');
        s
    }

    pub fn write_in(&self, dir: &Path) -> CliResult<()> {
        write(&dir.join("run.json"), self.to_json())
    }

    /// Writes `<out>.run.json` for single-file outputs.
    pub fn write_beside(&self, out: &Path) -> CliResult<()> {
        let mut s = out.as_os_str().to_owned();
        s.push(".run.json");
        write(&PathBuf::from(s), self.to_json())
    }
}

/// Loads a config file (if any) over the defaults, then applies
/// `key=value` overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = path {
        let text = String::from_utf8(read(p)?).map_err(|e| at(p, e))?;
        c.apply_text(&text).map_err(|e| at(p, e))?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("override {o:?} is not key=value")))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn warp(annotations: &Path, field: &Path, target_slide_id: &str, out: &Path) -> CliResult<()> {
    let a_bytes = read(annotations)?;
    let f_bytes = read(field)?;
    let set = annoreg::geojson::parse_annotations(&a_bytes, None).map_err(|e| at(annotations, e))?;
    let fld = annoreg::deform::load_field_any(&f_bytes).map_err(|e| at(field, e))?;
    let warped = annoreg::deform::warp_annotation_set(&fld, &set, target_slide_id)?;
    write(out, annoreg::geojson::to_geojson(&warped))?;
    Sidecar::new("warp")
        .param("target_slide_id", target_slide_id)
        .input("annotations", annotations, &a_bytes)
        .input("field", field, &f_bytes)
        .write_beside(out)
}

pub fn split(cases: &Path, params: &annoreg::split::SplitParams, seed: u64, out: &Path) -> CliResult<()> {
    let bytes = read(cases)?;
    let records = annoreg::split::read_cases_csv(bytes.as_slice()).map_err(|e| at(cases, e))?;
    let assignment = annoreg::split::stratified_split(&records, params, seed)?;
    write(out, assignment.to_csv_string())?;
    let mut side = Sidecar::new("split")
        .param("test_count", params.test_count)
        .param("n_folds", params.n_folds)
        .param("tune_fraction", params.tune_fraction)
        .param("median_ki67", assignment.median)
        .input("cases", cases, &bytes);
    side.seed = Some(seed);
    side.write_beside(out)
}

pub fn overlay(mask_a: &Path, mask_b: &Path, out: &Path) -> CliResult<()> {
    let a = annoreg::raster::load_mask(mask_a).map_err(|e| at(mask_a, e))?;
    let b = annoreg::raster::load_mask(mask_b).map_err(|e| at(mask_b, e))?;
    let counts = annoreg::morph::overlap_counts(&a, &b)?;
    let img = annoreg::morph::overlay_rgb(&a, &b)?;
    write(out, img.encode_png()?)?;
    Sidecar::new("overlay")
        .param("dice", counts.dice())
        .param("jaccard", counts.jaccard())
        .input("mask_a", mask_a, &read(mask_a)?)
        .input("mask_b", mask_b, &read(mask_b)?)
        .write_beside(out)
}
