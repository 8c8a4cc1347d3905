//! End-to-end synthetic experiment: configuration, in-memory stages, the
//! report, and the file-level commands behind the CLI.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calib::{default_min_rows, fit_normal, OperatorPair, Ridge};
use crate::dict::{ksvd_fit, nn_fit, pca_fit, KsvdParams, NnParams, OperatorDictionary};
use crate::error::{Error, Result};
use crate::field::{upsample, FieldStack, GridSpec, TrackObservations};
use crate::io;
use crate::oi::{oi_reconstruct, OiParams};
use crate::ossim::{generate_truth, simulate_tracks, TrackParams, TruthParams};
use crate::pipeline::{
    apply_global, evaluate_rmse, harvest_from_design, histogram, super_resolve, HarvestConfig,
    LocalDiagnostics, LocalSystems, ObsDesign, SrConfig,
};

/// Cell text for a failed series in the CSV outputs.
pub const FAILED: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Global,
    Pca,
    Ksvd,
    Nn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Global => "global",
            Method::Pca => "pca",
            Method::Ksvd => "ksvd",
            Method::Nn => "nn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    /// Dictionary sizes; ignored for the global operator.
    #[serde(default)]
    pub k: Vec<usize>,
    /// OMP sparsity budget (ksvd).
    #[serde(default = "default_t0")]
    pub t0: usize,
    /// Outer iterations; `None` keeps the learner's default.
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_t0() -> usize {
    3
}

impl MethodSpec {
    pub fn new(method: Method, k: &[usize]) -> Self {
        Self {
            method,
            k: k.to_vec(),
            t0: 3,
            iters: None,
            seed: 0,
        }
    }
}

/// One (method, K) cell of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub k: Option<usize>,
    pub spec_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OiConfig {
    pub l_s: f64,
    pub l_t: f64,
    /// Observation noise variance as a fraction of `sigma2`.
    pub noise_ratio: f64,
    /// Signal variance; `None` uses the observation variance.
    pub sigma2: Option<f64>,
    pub max_obs: usize,
}

impl Default for OiConfig {
    fn default() -> Self {
        Self {
            l_s: 1.0,
            l_t: 10.0,
            noise_ratio: 0.01,
            sigma2: None,
            max_obs: 100,
        }
    }
}

impl OiConfig {
    pub fn params(&self, obs: &TrackObservations) -> OiParams {
        let sigma2 = self.sigma2.unwrap_or_else(|| obs.variance());
        OiParams {
            sigma2,
            l_s: self.l_s,
            l_t: self.l_t,
            noise2: self.noise_ratio * sigma2,
            max_obs: self.max_obs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    /// Operator half-width in cells.
    pub w_p: usize,
    /// Ridge of the global fit.
    pub ridge: Ridge,
    /// Rows required by the global fit; `None` means three per unknown.
    pub min_rows: Option<usize>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            w_p: 1,
            ridge: Ridge::default(),
            min_rows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub truth_y: PathBuf,
    pub truth_x: PathBuf,
    pub obs: PathBuf,
    /// Low-resolution baseline on its own grid.
    pub baseline: PathBuf,
    pub dictionaries: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self::under("out")
    }
}

impl Paths {
    /// Every artifact inside `dir`.
    pub fn under(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            truth_y: d.join("truth_y.fld"),
            truth_x: d.join("truth_x.fld"),
            obs: d.join("obs.csv"),
            baseline: d.join("baseline_lr.fld"),
            dictionaries: d.join("dict"),
            outputs: d.to_path_buf(),
        }
    }

    pub fn global_operator(&self) -> PathBuf {
        self.dictionaries.join("global.json")
    }
    pub fn dictionary(&self, label: &str) -> PathBuf {
        self.dictionaries.join(format!("{label}.json"))
    }
    pub fn train_summary(&self) -> PathBuf {
        self.dictionaries.join("train.json")
    }
    pub fn reconstruction(&self, label: &str) -> PathBuf {
        self.outputs.join(format!("recon_{label}.fld"))
    }
    pub fn recon_summary(&self) -> PathBuf {
        self.outputs.join("recon.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.outputs.join("metrics.csv")
    }
    pub fn histogram(&self) -> PathBuf {
        self.outputs.join("histogram.csv")
    }
    pub fn table(&self) -> PathBuf {
        self.outputs.join("table.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.outputs.join("report.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub truth: TruthParams,
    pub tracks: TrackParams,
    pub oi: OiConfig,
    /// Step of the low-resolution baseline grid, degrees.
    pub lr_step: f64,
    pub calib: CalibConfig,
    pub harvest: HarvestConfig,
    pub sr: SrConfig,
    pub methods: Vec<MethodSpec>,
    pub hist_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            truth: TruthParams::default(),
            tracks: TrackParams::default(),
            oi: OiConfig::default(),
            lr_step: 0.125,
            calib: CalibConfig::default(),
            harvest: HarvestConfig::default(),
            sr: SrConfig::default(),
            methods: vec![
                MethodSpec::new(Method::Global, &[]),
                MethodSpec::new(Method::Pca, &[2, 5, 10]),
                MethodSpec::new(Method::Ksvd, &[2, 5, 10]),
                MethodSpec::new(Method::Nn, &[2, 5, 10]),
            ],
            hist_bins: 30,
        }
    }
}

impl ExperimentConfig {
    /// Defaults, overlaid with `file` (a partial JSON document), then with
    /// dotted `key=value` overrides. Values that parse as JSON are used as
    /// such, anything else as a string.
    pub fn resolve(file: Option<Value>, sets: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(f) = file {
            merge(&mut v, f);
        }
        for (key, raw) in sets {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut v, key, parsed)?;
        }
        let cfg: Self = serde_json::from_value(v)
            .map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>, sets: &[(String, String)]) -> Result<Self> {
        Self::resolve(Some(io::read_json(path)?), sets)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        self.tracks.validate()?;
        self.sr.validate()?;
        self.harvest.train_spec.validate()?;
        if !(self.lr_step > 0.0) {
            return Err(Error::InvalidParameter("lr_step must be > 0".into()));
        }
        if self.hist_bins == 0 {
            return Err(Error::InvalidParameter("hist_bins must be >= 1".into()));
        }
        for m in &self.methods {
            if m.method != Method::Global && (m.k.is_empty() || m.k.contains(&0)) {
                return Err(Error::InvalidParameter(format!(
                    "{}: every K must be >= 1",
                    m.method.name()
                )));
            }
        }
        let labels = self.variants();
        for (i, v) in labels.iter().enumerate() {
            if labels[..i].iter().any(|u| u.label == v.label) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate method entry {}",
                    v.label
                )));
            }
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.truth.seed = seed;
        self.tracks.seed = seed;
        self.harvest.seed = seed;
        for m in &mut self.methods {
            m.seed = seed;
        }
    }

    /// Requested (method, K) cells in config order. A method with a single
    /// K is labelled by its name alone, otherwise `<name>_k<K>`.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for (i, m) in self.methods.iter().enumerate() {
            if m.method == Method::Global {
                out.push(Variant {
                    label: "global".into(),
                    method: m.method,
                    k: None,
                    spec_index: i,
                });
                continue;
            }
            for &k in &m.k {
                let label = if m.k.len() == 1 {
                    m.method.name().to_string()
                } else {
                    format!("{}_k{k}", m.method.name())
                };
                out.push(Variant {
                    label,
                    method: m.method,
                    k: Some(k),
                    spec_index: i,
                });
            }
        }
        out
    }

    pub fn lr_grid(&self) -> Result<GridSpec> {
        let g = self.truth.grid;
        GridSpec::new(
            g.lat_min(),
            g.lat_max(),
            g.lon_min(),
            g.lon_max(),
            self.lr_step,
        )
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    Error::InvalidParameter(format!("--set {key}: {part:?} is not an index"))
                })?;
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::InvalidParameter(format!("--set {key}: index {idx} out of range"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "--set {key}: {part:?} is not inside an object"
                )))
            }
        };
    }
    Err(Error::InvalidParameter("empty --set key".into()))
}

/// Inputs shared by training and reconstruction.
pub struct Prepared {
    /// Standardized covariate.
    pub x: FieldStack,
    pub y_lr_up: FieldStack,
    pub design: ObsDesign,
}

pub fn stage_truth(cfg: &ExperimentConfig) -> Result<(FieldStack, FieldStack, TrackObservations)> {
    let (y, x) = generate_truth(&cfg.truth)?;
    let obs = simulate_tracks(&y, &cfg.tracks)?;
    Ok((y, x, obs))
}

/// Low-resolution baseline on the `lr_step` grid.
pub fn stage_oi(cfg: &ExperimentConfig, obs: &TrackObservations) -> Result<FieldStack> {
    oi_reconstruct(obs, &cfg.lr_grid()?, &cfg.truth.days(), &cfg.oi.params(obs))
}

pub fn prepare(
    cfg: &ExperimentConfig,
    x: &FieldStack,
    baseline_lr: &FieldStack,
    obs: &TrackObservations,
) -> Result<Prepared> {
    let y_lr_up = upsample(baseline_lr, x.grid())?;
    let (x, _, _) = x.standardized();
    let design = ObsDesign::build(obs, &x, &y_lr_up, cfg.calib.w_p)?;
    Ok(Prepared { x, y_lr_up, design })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub design_rows: usize,
    pub dropped_obs: usize,
    pub harvest_attempted: usize,
    pub harvest_succeeded: usize,
    pub global_error: Option<String>,
    pub harvest_error: Option<String>,
    /// Failure message per variant label.
    pub failures: BTreeMap<String, String>,
}

pub struct Trained {
    pub global: std::result::Result<OperatorPair, String>,
    pub dictionaries: Vec<(Variant, std::result::Result<OperatorDictionary, String>)>,
    pub summary: TrainSummary,
}

impl Trained {
    /// Operator used where a local fit falls back to the global model.
    pub fn fallback_operator(&self, w_p: usize) -> OperatorPair {
        self.global
            .clone()
            .unwrap_or_else(|_| OperatorPair::zeros(w_p))
    }
}

pub fn fit_global_operator(cfg: &ExperimentConfig, design: &ObsDesign) -> Result<OperatorPair> {
    let ne = design.all_normal_equations();
    let min_rows = cfg
        .calib
        .min_rows
        .unwrap_or_else(|| default_min_rows(cfg.calib.w_p));
    fit_normal(&ne, cfg.calib.w_p, cfg.calib.ridge.resolve(&ne), min_rows)
}

pub fn train_dictionary(
    spec: &MethodSpec,
    k: usize,
    samples: &nalgebra::DMatrix<f64>,
) -> Result<OperatorDictionary> {
    match spec.method {
        Method::Pca => Ok(pca_fit(samples, k)?.dict),
        Method::Ksvd => {
            let d = KsvdParams::default();
            let p = KsvdParams {
                t0: spec.t0.min(k),
                iters: spec.iters.unwrap_or(d.iters),
                seed: spec.seed,
            };
            Ok(ksvd_fit(samples, k, &p)?.0)
        }
        Method::Nn => {
            let p = NnParams {
                iters: spec.iters.unwrap_or(NnParams::default().iters),
                seed: spec.seed,
            };
            Ok(nn_fit(samples, k, &p)?.0)
        }
        Method::Global => Err(Error::InvalidParameter(
            "the global operator has no dictionary".into(),
        )),
    }
}

pub fn stage_train(cfg: &ExperimentConfig, prep: &Prepared) -> Trained {
    let mut summary = TrainSummary {
        design_rows: prep.design.n_rows(),
        dropped_obs: prep.design.dropped(),
        ..Default::default()
    };
    let global = fit_global_operator(cfg, &prep.design).map_err(|e| e.to_string());
    summary.global_error = global.as_ref().err().cloned();
    let dict_variants: Vec<Variant> = cfg
        .variants()
        .into_iter()
        .filter(|v| v.k.is_some())
        .collect();
    let mut dictionaries = Vec::new();
    if !dict_variants.is_empty() {
        let need = dict_variants.iter().filter_map(|v| v.k).max().unwrap_or(1);
        let harvest = harvest_from_design(
            &prep.design,
            prep.x.grid(),
            prep.x.times(),
            &cfg.harvest,
            need,
        );
        summary.harvest_attempted = cfg.harvest.n_target;
        match &harvest {
            Ok(h) => summary.harvest_succeeded = h.len(),
            Err(Error::HarvestTooSmall { got, .. }) => summary.harvest_succeeded = *got,
            Err(_) => {}
        }
        summary.harvest_error = harvest.as_ref().err().map(|e| e.to_string());
        for v in dict_variants {
            let result = match &harvest {
                Ok(h) => train_dictionary(&cfg.methods[v.spec_index], v.k.unwrap(), &h.samples)
                    .map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            if let Err(e) = &result {
                summary.failures.insert(v.label.clone(), e.clone());
            }
            dictionaries.push((v, result));
        }
    }
    if let Some(e) = &summary.global_error {
        summary.failures.insert("global".into(), e.clone());
    }
    Trained {
        global,
        dictionaries,
        summary,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub variant: Variant,
    pub result: std::result::Result<(FieldStack, LocalDiagnostics), String>,
}

pub fn stage_reconstruct(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    trained: &Trained,
) -> Result<Vec<Reconstruction>> {
    let fallback = trained.fallback_operator(cfg.calib.w_p);
    let mut systems = None;
    let mut out = Vec::new();
    for v in cfg.variants() {
        let result = if v.method == Method::Global {
            trained.global.clone().and_then(|op| {
                apply_global(&op, &prep.x, &prep.y_lr_up)
                    .map(|f| (f, LocalDiagnostics::default()))
                    .map_err(|e| e.to_string())
            })
        } else {
            let dict = trained
                .dictionaries
                .iter()
                .find(|(u, _)| u.label == v.label)
                .map(|(_, d)| d.clone())
                .unwrap_or_else(|| Err("dictionary not trained".into()));
            match dict {
                Ok(d) => {
                    if systems.is_none() {
                        systems = Some(LocalSystems::build(
                            &prep.design,
                            prep.x.grid(),
                            prep.x.times(),
                            &cfg.sr,
                        )?);
                    }
                    super_resolve(
                        &d,
                        systems.as_ref().unwrap(),
                        &prep.x,
                        &prep.y_lr_up,
                        &cfg.sr,
                        &fallback,
                    )
                    .map_err(|e| e.to_string())
                }
                Err(e) => Err(e),
            }
        };
        out.push(Reconstruction { variant: v, result });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub method: String,
    pub k: Option<usize>,
    pub per_day: Option<Vec<f64>>,
    pub mean: Option<f64>,
    pub error: Option<String>,
    pub fallbacks: Option<usize>,
    pub local_fits: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTable {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    /// Counts per series label, baseline first.
    pub counts: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub days: Vec<i64>,
    pub baseline: Series,
    pub series: Vec<Series>,
    pub histogram: HistogramTable,
    pub train: Option<TrainSummary>,
}

impl ExperimentReport {
    pub fn series(&self, label: &str) -> Option<&Series> {
        if label == "lr" {
            return Some(&self.baseline);
        }
        self.series.iter().find(|s| s.label == label)
    }

    /// Mean relative RMSE of `method` at `k` (`None` for the global model).
    pub fn mean_of(&self, method: Method, k: Option<usize>) -> Option<f64> {
        self.series
            .iter()
            .find(|s| s.method == method.name() && s.k == k)
            .and_then(|s| s.mean)
    }
}

fn ok_series(label: &str, method: &str, k: Option<usize>, per_day: Vec<f64>) -> Series {
    let mean = per_day.iter().sum::<f64>() / per_day.len().max(1) as f64;
    Series {
        label: label.into(),
        method: method.into(),
        k,
        per_day: Some(per_day),
        mean: Some(mean),
        error: None,
        fallbacks: None,
        local_fits: None,
    }
}

/// Scores the baseline and every reconstruction against the truth.
pub fn stage_eval(
    cfg: &ExperimentConfig,
    truth: &FieldStack,
    baseline_up: &FieldStack,
    recons: &[Reconstruction],
    train: Option<TrainSummary>,
) -> Result<ExperimentReport> {
    let base = evaluate_rmse(baseline_up, truth)?;
    let baseline = ok_series("lr", "lr", None, base.per_day);
    let mut series = Vec::new();
    for r in recons {
        let v = &r.variant;
        let s = match &r.result {
            Ok((field, diag)) => match evaluate_rmse(field, truth) {
                Ok(rep) => {
                    let mut s = ok_series(&v.label, v.method.name(), v.k, rep.per_day);
                    if v.method != Method::Global {
                        s.fallbacks = Some(diag.fallbacks);
                        s.local_fits = Some(diag.fits);
                    }
                    s
                }
                Err(e) => failed_series(v, e.to_string()),
            },
            Err(e) => failed_series(v, e.clone()),
        };
        series.push(s);
    }
    let all: Vec<f64> = std::iter::once(&baseline)
        .chain(&series)
        .flat_map(|s| s.per_day.iter().flatten().copied())
        .filter(|v| v.is_finite())
        .collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (0.0, 0.0) };
    let counts = std::iter::once(&baseline)
        .chain(&series)
        .map(|s| {
            let h = histogram(s.per_day.as_deref().unwrap_or(&[]), cfg.hist_bins, lo, hi);
            (s.label.clone(), h.counts)
        })
        .collect();
    Ok(ExperimentReport {
        days: truth.times().to_vec(),
        baseline,
        series,
        histogram: HistogramTable {
            lo,
            hi,
            bins: cfg.hist_bins,
            counts,
        },
        train,
    })
}

fn failed_series(v: &Variant, error: String) -> Series {
    Series {
        label: v.label.clone(),
        method: v.method.name().into(),
        k: v.k,
        per_day: None,
        mean: None,
        error: Some(error),
        fallbacks: None,
        local_fits: None,
    }
}

/// Everything produced by an in-memory run.
pub struct ExperimentOutput {
    pub truth: FieldStack,
    pub covariate: FieldStack,
    pub obs: TrackObservations,
    pub baseline_lr: FieldStack,
    pub baseline_up: FieldStack,
    pub global: std::result::Result<OperatorPair, String>,
    pub dictionaries: Vec<(Variant, std::result::Result<OperatorDictionary, String>)>,
    pub reconstructions: Vec<Reconstruction>,
    pub report: ExperimentReport,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (truth, covariate, obs) = stage_truth(cfg)?;
    let baseline_lr = stage_oi(cfg, &obs)?;
    let prep = prepare(cfg, &covariate, &baseline_lr, &obs)?;
    let trained = stage_train(cfg, &prep);
    let reconstructions = stage_reconstruct(cfg, &prep, &trained)?;
    let report = stage_eval(
        cfg,
        &truth,
        &prep.y_lr_up,
        &reconstructions,
        Some(trained.summary.clone()),
    )?;
    Ok(ExperimentOutput {
        truth,
        covariate,
        obs,
        baseline_up: prep.y_lr_up,
        baseline_lr,
        global: trained.global,
        dictionaries: trained.dictionaries,
        reconstructions,
        report,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| FAILED.to_string(), |x| x.to_string())
}

/// `day,rmse_lr,rmse_<label>…`, one row per day.
pub fn write_metrics_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let cols: Vec<&Series> = std::iter::once(&report.baseline)
        .chain(&report.series)
        .collect();
    let mut header = vec!["day".to_string()];
    header.extend(cols.iter().map(|s| format!("rmse_{}", s.label)));
    w.write_record(&header)?;
    for (i, day) in report.days.iter().enumerate() {
        let mut row = vec![day.to_string()];
        row.extend(cols.iter().map(|s| cell(s.per_day.as_ref().map(|p| p[i]))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `bin_lo,bin_hi,<label>…` with per-day relative-RMSE counts.
pub fn write_histogram_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let h = &report.histogram;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
    header.extend(h.counts.iter().map(|(l, _)| l.clone()));
    w.write_record(&header)?;
    for b in 0..h.bins {
        let lo = h.lo + (h.hi - h.lo) * b as f64 / h.bins as f64;
        let hi = h.lo + (h.hi - h.lo) * (b + 1) as f64 / h.bins as f64;
        let mut row = vec![lo.to_string(), hi.to_string()];
        row.extend(h.counts.iter().map(|(_, c)| c[b].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `method,k,mean_rel_rmse,gain_vs_lr` with the baseline first.
pub fn write_table_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "k", "mean_rel_rmse", "gain_vs_lr"])?;
    let base = report.baseline.mean;
    for s in std::iter::once(&report.baseline).chain(&report.series) {
        let gain = match (s.mean, base) {
            (Some(m), Some(b)) if b > 0.0 => Some(1.0 - m / b),
            _ => None,
        };
        w.write_record([
            s.method.clone(),
            s.k.map(|k| k.to_string()).unwrap_or_default(),
            cell(s.mean),
            cell(gain),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        std::fs::create_dir(dir)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub n_obs: usize,
    pub n_days: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Writes the truth, covariate and observation files. The target
/// directories must already exist.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenSummary> {
    let (y, x, obs) = stage_truth(cfg)?;
    io::write_fld(&y, &cfg.paths.truth_y)?;
    io::write_fld(&x, &cfg.paths.truth_x)?;
    io::write_obs(&obs, &cfg.paths.obs)?;
    Ok(GenSummary {
        n_obs: obs.len(),
        n_days: y.n_times(),
        grid_rows: y.grid().n_rows(),
        grid_cols: y.grid().n_cols(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OiSummary {
    pub n_obs: usize,
    /// Mean relative RMSE of the upsampled baseline, when the truth file exists.
    pub baseline_rmse: Option<f64>,
}

pub fn cmd_oi(cfg: &ExperimentConfig) -> Result<OiSummary> {
    let obs = io::read_obs(&cfg.paths.obs)?;
    let lr = stage_oi(cfg, &obs)?;
    io::write_fld(&lr, &cfg.paths.baseline)?;
    let baseline_rmse = if cfg.paths.truth_y.exists() {
        let truth = io::read_fld(&cfg.paths.truth_y)?;
        Some(evaluate_rmse(&upsample(&lr, truth.grid())?, &truth)?.mean)
    } else {
        None
    };
    Ok(OiSummary {
        n_obs: obs.len(),
        baseline_rmse,
    })
}

fn load_prepared(cfg: &ExperimentConfig) -> Result<Prepared> {
    let x = io::read_fld(&cfg.paths.truth_x)?;
    let obs = io::read_obs(&cfg.paths.obs)?;
    let lr = io::read_fld(&cfg.paths.baseline)?;
    prepare(cfg, &x, &lr, &obs)
}

/// Fits the global operator and every requested dictionary. `dump_design`
/// writes the full design matrix as CSV.
pub fn cmd_train(cfg: &ExperimentConfig, dump_design: Option<&Path>) -> Result<TrainSummary> {
    let prep = load_prepared(cfg)?;
    if let Some(path) = dump_design {
        let x = &prep.x;
        let obs = io::read_obs(&cfg.paths.obs)?;
        crate::calib::build_design(&obs, x, &prep.y_lr_up, cfg.calib.w_p)?
            .write_csv(create(path)?)?;
    }
    let trained = stage_train(cfg, &prep);
    ensure_dir(&cfg.paths.dictionaries)?;
    if let Ok(op) = &trained.global {
        io::write_json(op, cfg.paths.global_operator())?;
    }
    for (v, d) in &trained.dictionaries {
        if let Ok(d) = d {
            io::write_json(d, cfg.paths.dictionary(&v.label))?;
        }
    }
    io::write_json(&trained.summary, cfg.paths.train_summary())?;
    Ok(trained.summary)
}

fn load_trained(cfg: &ExperimentConfig) -> Result<Trained> {
    let global_path = cfg.paths.global_operator();
    let global = if global_path.exists() {
        Ok(io::read_json::<OperatorPair>(&global_path)?)
    } else {
        Err("global operator not trained".to_string())
    };
    let mut dictionaries = Vec::new();
    for v in cfg.variants().into_iter().filter(|v| v.k.is_some()) {
        let path = cfg.paths.dictionary(&v.label);
        let d = if path.exists() {
            let d: OperatorDictionary = io::read_json(&path)?;
            if Some(d.k()) != v.k {
                return Err(Error::DimensionMismatch {
                    expected: v.k.unwrap(),
                    got: d.k(),
                });
            }
            Ok(d)
        } else {
            Err(format!("dictionary {} not trained", v.label))
        };
        dictionaries.push((v, d));
    }
    let summary = if cfg.paths.train_summary().exists() {
        io::read_json(cfg.paths.train_summary())?
    } else {
        TrainSummary::default()
    };
    Ok(Trained {
        global,
        dictionaries,
        summary,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconSummary {
    pub diagnostics: BTreeMap<String, LocalDiagnostics>,
    pub failures: BTreeMap<String, String>,
}

pub fn cmd_reconstruct(cfg: &ExperimentConfig) -> Result<ReconSummary> {
    let prep = load_prepared(cfg)?;
    let trained = load_trained(cfg)?;
    let recons = stage_reconstruct(cfg, &prep, &trained)?;
    let mut summary = ReconSummary::default();
    for r in &recons {
        match &r.result {
            Ok((field, diag)) => {
                io::write_fld(field, cfg.paths.reconstruction(&r.variant.label))?;
                summary.diagnostics.insert(r.variant.label.clone(), *diag);
            }
            Err(e) => {
                summary.failures.insert(r.variant.label.clone(), e.clone());
            }
        }
    }
    io::write_json(&summary, cfg.paths.recon_summary())?;
    Ok(summary)
}

/// Scores the stored reconstructions and writes the metrics, histogram and
/// table CSVs plus `report.json`. With `render_day`, PGM panels of that day
/// are written for the truth, the baseline and every reconstruction.
pub fn cmd_eval(cfg: &ExperimentConfig, render_day: Option<i64>) -> Result<ExperimentReport> {
    let truth = io::read_fld(&cfg.paths.truth_y)?;
    let baseline_up = upsample(&io::read_fld(&cfg.paths.baseline)?, truth.grid())?;
    let summary: ReconSummary = if cfg.paths.recon_summary().exists() {
        io::read_json(cfg.paths.recon_summary())?
    } else {
        ReconSummary::default()
    };
    let mut recons = Vec::new();
    for v in cfg.variants() {
        let path = cfg.paths.reconstruction(&v.label);
        let result = if path.exists() {
            let diag = summary
                .diagnostics
                .get(&v.label)
                .copied()
                .unwrap_or_default();
            Ok((io::read_fld(&path)?, diag))
        } else {
            Err(summary
                .failures
                .get(&v.label)
                .cloned()
                .unwrap_or_else(|| "missing reconstruction".into()))
        };
        recons.push(Reconstruction { variant: v, result });
    }
    let train = if cfg.paths.train_summary().exists() {
        Some(io::read_json(cfg.paths.train_summary())?)
    } else {
        None
    };
    let report = stage_eval(cfg, &truth, &baseline_up, &recons, train)?;
    write_report_files(cfg, &report)?;
    if let Some(day) = render_day {
        let ti = truth.time_index(day).ok_or_else(|| {
            Error::InvalidParameter(format!("render day {day} not in the truth stack"))
        })?;
        io::write_pgm(
            &truth,
            ti,
            cfg.paths.outputs.join(format!("render_truth_d{day}.pgm")),
        )?;
        io::write_pgm(
            &baseline_up,
            ti,
            cfg.paths.outputs.join(format!("render_lr_d{day}.pgm")),
        )?;
        for r in &recons {
            if let Ok((f, _)) = &r.result {
                io::write_pgm(
                    f,
                    ti,
                    cfg.paths
                        .outputs
                        .join(format!("render_{}_d{day}.pgm", r.variant.label)),
                )?;
            }
        }
    }
    Ok(report)
}

pub fn write_report_files(cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    write_metrics_csv(report, create(&cfg.paths.metrics())?)?;
    write_histogram_csv(report, create(&cfg.paths.histogram())?)?;
    write_table_csv(report, create(&cfg.paths.table())?)?;
    io::write_json(report, cfg.paths.report())
}

/// `gen`, `oi`, `train`, `reconstruct` and `eval` in sequence.
pub fn cmd_report(cfg: &ExperimentConfig, render_day: Option<i64>) -> Result<ExperimentReport> {
    cmd_gen(cfg)?;
    cmd_oi(cfg)?;
    cmd_train(cfg, None)?;
    cmd_reconstruct(cfg)?;
    cmd_eval(cfg, render_day)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_labels() {
        let cfg = ExperimentConfig::resolve(
            Some(serde_json::json!({"truth": {"n_days": 7}, "methods": [{"method": "nn", "k": [4]}]})),
            &[("tracks.n_tracks_per_day".into(), "2".into()), ("paths.outputs".into(), "somewhere".into())],
        )
        .unwrap();
        assert_eq!(cfg.truth.n_days, 7);
        assert_eq!(cfg.tracks.n_tracks_per_day, 2);
        assert_eq!(cfg.paths.outputs, PathBuf::from("somewhere"));
        assert_eq!(cfg.truth.n_eddies, 25);
        let labels: Vec<String> = cfg.variants().into_iter().map(|v| v.label).collect();
        assert_eq!(labels, vec!["nn"]);
        let labels: Vec<String> = ExperimentConfig::default()
            .variants()
            .into_iter()
            .map(|v| v.label)
            .collect();
        assert_eq!(labels[0], "global");
        assert_eq!(labels[1], "pca_k2");
        assert_eq!(labels.len(), 10);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(ExperimentConfig::resolve(Some(serde_json::json!({"nope": 1})), &[]).is_err());
        assert!(ExperimentConfig::resolve(
            None,
            &[("methods".into(), r#"[{"method":"pca","k":[0]}]"#.into())]
        )
        .is_err());
        assert!(ExperimentConfig::resolve(None, &[("lr_step".into(), "-1".into())]).is_err());
        assert!(ExperimentConfig::resolve(None, &[("lr_step.x".into(), "1".into())]).is_err());
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut cfg = ExperimentConfig::default();
        cfg.override_seeds(99);
        assert_eq!(
            (cfg.truth.seed, cfg.tracks.seed, cfg.harvest.seed),
            (99, 99, 99)
        );
        assert!(cfg.methods.iter().all(|m| m.seed == 99));
    }
}
