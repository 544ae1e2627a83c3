//! Experiment configuration and the gen-dataset / train / sweep / report
//! pipeline behind the `nmbe` command.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::airlink::{InterferenceModel, RateReport, DEFAULT_SESSION_S, DEFAULT_SLOT_S, RATE_COLUMNS};
use crate::datasmith::{
    generate_dataset, manifest_hash, read_dataset, regenerate_pilots, write_dataset, Dataset, DatasetConfig, SampleRecord,
    SystemConfig, MANIFEST_FILE,
};
use crate::error::{config_err, Error, Result};
use crate::nmbenet::{
    dual_architectures, evaluate_selection, init_baseline, init_dual, save_history, train_dual, train_joint, Architecture,
    DualModel, HistoryRow, LinkConfig, Model, ModelKind, Predictor, TrainingConfig, Widths,
};
use crate::polarbook::Codebook;

pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const DATASET_DIR: &str = "dataset";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_PROVENANCE_FILE: &str = "sweep.json";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "uplinkPowerDbm")]
    UplinkPower,
    #[serde(rename = "downlinkPowerDbm")]
    DownlinkPower,
    #[serde(rename = "sub6AntennaCount")]
    Sub6Antennas,
    #[serde(rename = "bsOffsetMeters")]
    BsOffset,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [Self::UplinkPower, Self::DownlinkPower, Self::Sub6Antennas, Self::BsOffset];

    pub fn name(self) -> &'static str {
        match self {
            Self::UplinkPower => "uplinkPowerDbm",
            Self::DownlinkPower => "downlinkPowerDbm",
            Self::Sub6Antennas => "sub6AntennaCount",
            Self::BsOffset => "bsOffsetMeters",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// `system` with this axis set to `value`.
    pub fn apply(self, system: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let mut s = *system;
        match self {
            Self::UplinkPower => s.uplink_power_dbm = value,
            Self::DownlinkPower => s.downlink_power_dbm = value,
            Self::Sub6Antennas => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(config_err(format!("sweep.values: sub-6 antenna count {value} is not a positive integer")));
                }
                s.sub6.antennas = value as usize;
            }
            Self::BsOffset => s.scene.sub6_offset_m = value,
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Dual angle/distance network.
    Proposed,
    /// Exhaustive mmWave beam search (upper bound on rate, full pilot overhead).
    Exhaustive,
    Fcnn,
    Cnn,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Self::Proposed, Self::Exhaustive, Self::Fcnn, Self::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::Exhaustive => "exhaustive",
            Self::Fcnn => "fcnn",
            Self::Cnn => "cnn",
        }
    }

    pub fn is_learned(self) -> bool {
        self != Self::Exhaustive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOptions {
    pub interference: InterferenceModel,
    pub slot_s: f64,
    pub session_s: f64,
}

impl Default for LinkOptions {
    fn default() -> Self {
        Self { interference: InterferenceModel::Standard, slot_s: DEFAULT_SLOT_S, session_s: DEFAULT_SESSION_S }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub system: SystemConfig,
    pub samples: usize,
    pub validation_fraction: f64,
    pub widths: Widths,
    pub training: TrainingConfig,
    pub link: LinkOptions,
    pub sweep: SweepConfig,
    pub schemes: Vec<Scheme>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (system, samples, widths, training) = match preset {
            Preset::Toy => (
                SystemConfig::toy(),
                64,
                Widths { conv: [4, 8], kernel_width: 3, graph: 16, graph_layers: 2, head: 16, fcnn: [32, 16], cnn_hidden: 16 },
                TrainingConfig { epochs: 5, batch_scenes: 8, ..TrainingConfig::desk(0) },
            ),
            Preset::Desk => (SystemConfig::desk(), 20_000, Widths::desk(), TrainingConfig::desk(0)),
            Preset::Paper => (SystemConfig::paper(), 20_000, Widths::paper(), TrainingConfig::paper(0)),
        };
        let name = serde_json::to_value(preset).expect("preset serializes");
        Self {
            preset,
            system,
            samples,
            validation_fraction: 0.05,
            widths,
            training,
            link: LinkOptions::default(),
            sweep: SweepConfig { axis: SweepAxis::UplinkPower, values: vec![-20.0, -15.0, -10.0, -5.0, 0.0] },
            schemes: Scheme::ALL.to_vec(),
            output_dir: Path::new("runs").join(name.as_str().expect("preset name is a string")),
            seed: 0,
        }
    }

    /// Overlays a user document on the preset it names (`"preset"`, default
    /// desk). Nested objects merge key by key; unknown keys are rejected.
    pub fn from_value(user: Value) -> Result<Self> {
        if !user.is_object() {
            return Err(config_err("configuration must be a JSON object"));
        }
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| config_err(format!("preset: {e}")))?,
        };
        let mut value = serde_json::to_value(Self::preset(preset))?;
        merge(&mut value, user);
        let cfg: Self = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config().validate()?;
        self.training.validate().map_err(|e| prefix("training", e))?;
        let [k, two, m] = self.system.image_shape();
        for kind in [ModelKind::Nmbe, ModelKind::Fcnn, ModelKind::Cnn] {
            Architecture::new(kind, [k, two, m], 1, self.widths).map_err(|e| prefix("widths", e))?;
        }
        let l = &self.link;
        if !(l.slot_s > 0.0 && l.session_s > 0.0) {
            return Err(config_err("link.slot_s and link.session_s must be positive"));
        }
        if self.sweep.values.is_empty() {
            return Err(config_err("sweep.values must not be empty"));
        }
        for &v in &self.sweep.values {
            if !v.is_finite() {
                return Err(config_err(format!("sweep.values: {v} is not finite")));
            }
            self.sweep.axis.apply(&self.system, v).map_err(|e| prefix(&format!("sweep.values ({v})"), e))?;
        }
        if self.schemes.is_empty() {
            return Err(config_err("schemes must not be empty"));
        }
        let mut seen = self.schemes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.schemes.len() {
            return Err(config_err("schemes must not repeat"));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig { system: self.system, samples: self.samples, validation_fraction: self.validation_fraction, seed: self.seed }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig { seed: self.seed, ..self.training }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn learned(&self) -> impl Iterator<Item = Scheme> + '_ {
        self.schemes.iter().copied().filter(|s| s.is_learned())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn prefix(field: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{field}: {msg}")),
        other => other,
    }
}

/// Writes the effective configuration to `<out>/config.json`.
pub fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO_FILE), cfg.to_json())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub samples: usize,
    pub train: usize,
    pub validation: usize,
    /// Shannon entropy of the flat label histogram over all users, in bits.
    pub label_entropy_bits: f64,
    pub manifest_hash: String,
}

pub fn label_entropy_bits(records: &[SampleRecord], angles: usize) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in records.iter().flat_map(|r| &r.labels) {
        *counts.entry(l.flat(angles)).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

pub fn gen_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetSummary> {
    echo_config(cfg, out)?;
    let ds = generate_dataset(&cfg.dataset_config())?;
    let dir = out.join(DATASET_DIR);
    let manifest = write_dataset(&ds, &dir)?;
    Ok(DatasetSummary {
        samples: manifest.samples,
        train: manifest.train,
        validation: manifest.validation,
        label_entropy_bits: label_entropy_bits(&ds.records, cfg.system.mmwave.antennas),
        manifest_hash: manifest_hash(&dir)?,
    })
}

/// Reads `<out>/dataset` and checks that it was generated from `cfg`.
pub fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let dir = out.join(DATASET_DIR);
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::MissingArtifact(format!("no dataset at {} (run gen-dataset first)", dir.display())));
    }
    let ds = read_dataset(&dir)?;
    if ds.config != cfg.dataset_config() {
        return Err(config_err(format!(
            "dataset at {} was generated from a different system, sample count or seed; rerun gen-dataset",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Networks of the learned schemes; `None` for schemes not configured.
#[derive(Default)]
pub struct TrainedModels {
    pub dual: Option<DualModel>,
    pub fcnn: Option<Model>,
    pub cnn: Option<Model>,
}

pub struct TrainingRun {
    pub models: TrainedModels,
    pub histories: Vec<(Scheme, Vec<HistoryRow>)>,
}

/// Expected architectures for `system` and `widths`.
pub struct Architectures {
    pub angle: Architecture,
    pub distance: Architecture,
    pub fcnn: Architecture,
    pub cnn: Architecture,
}

pub fn architectures(system: &SystemConfig, widths: Widths) -> Result<Architectures> {
    let input = system.image_shape();
    let (m, s) = (system.mmwave.antennas, system.codebook.rings);
    let (angle, distance) = dual_architectures(input, m, s, widths)?;
    Ok(Architectures {
        angle,
        distance,
        fcnn: Architecture::new(ModelKind::Fcnn, input, m * s, widths)?,
        cnn: Architecture::new(ModelKind::Cnn, input, m * s, widths)?,
    })
}

/// Trains every learned scheme of `cfg`, starting from `init` where given.
pub fn train_models(cfg: &ExperimentConfig, dataset: &Dataset, init: TrainedModels) -> Result<TrainingRun> {
    let system = &dataset.config.system;
    let input = system.image_shape();
    let (m, s) = (system.mmwave.antennas, system.codebook.rings);
    let tc = cfg.training_config();
    let mut models = TrainedModels::default();
    let mut histories = Vec::new();
    let TrainedModels { dual, fcnn, cnn } = init;
    let (mut dual, mut fcnn, mut cnn) = (dual, fcnn, cnn);
    for scheme in cfg.learned() {
        match scheme {
            Scheme::Proposed => {
                let mut model = match dual.take() {
                    Some(d) => d,
                    None => init_dual(input, m, s, cfg.widths, cfg.seed)?,
                };
                histories.push((scheme, train_dual(&mut model, dataset.train(), dataset.validation(), &tc)?));
                models.dual = Some(model);
            }
            Scheme::Fcnn | Scheme::Cnn => {
                let (kind, start) = if scheme == Scheme::Fcnn { (ModelKind::Fcnn, fcnn.take()) } else { (ModelKind::Cnn, cnn.take()) };
                let mut model = match start {
                    Some(model) => model,
                    None => init_baseline(kind, input, m, s, cfg.widths, cfg.seed)?,
                };
                histories.push((scheme, train_joint(&mut model, dataset.train(), dataset.validation(), m, &tc)?));
                if scheme == Scheme::Fcnn {
                    models.fcnn = Some(model);
                } else {
                    models.cnn = Some(model);
                }
            }
            Scheme::Exhaustive => {}
        }
    }
    Ok(TrainingRun { models, histories })
}

fn checkpoint_stems(out: &Path, scheme: Scheme) -> Vec<PathBuf> {
    let dir = out.join(CHECKPOINT_DIR);
    match scheme {
        Scheme::Proposed => vec![dir.join("proposed-angle"), dir.join("proposed-distance")],
        other => vec![dir.join(other.name())],
    }
}

pub fn history_path(out: &Path, scheme: Scheme) -> PathBuf {
    out.join(format!("history-{}.csv", scheme.name()))
}

fn load_checked(stem: &Path, arch: &Architecture) -> Result<Model> {
    if !stem.with_extension("json").is_file() {
        return Err(Error::MissingArtifact(format!("no checkpoint at {} (run train first)", stem.display())));
    }
    Model::load_expecting(stem, arch)
}

/// Loads the checkpoints of every learned scheme of `cfg` from `<out>/checkpoints`.
pub fn load_models(cfg: &ExperimentConfig, out: &Path) -> Result<TrainedModels> {
    let arch = architectures(&cfg.system, cfg.widths)?;
    let mut models = TrainedModels::default();
    for scheme in cfg.learned() {
        let stems = checkpoint_stems(out, scheme);
        match scheme {
            Scheme::Proposed => {
                models.dual =
                    Some(DualModel { angle: load_checked(&stems[0], &arch.angle)?, distance: load_checked(&stems[1], &arch.distance)? })
            }
            Scheme::Fcnn => models.fcnn = Some(load_checked(&stems[0], &arch.fcnn)?),
            Scheme::Cnn => models.cnn = Some(load_checked(&stems[0], &arch.cnn)?),
            Scheme::Exhaustive => {}
        }
    }
    Ok(models)
}

/// Saves checkpoints and history CSVs of a training run under `out`.
pub fn save_run(run: &TrainingRun, out: &Path) -> Result<()> {
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    let m = &run.models;
    if let Some(d) = &m.dual {
        let stems = checkpoint_stems(out, Scheme::Proposed);
        d.angle.save(&stems[0], None)?;
        d.distance.save(&stems[1], None)?;
    }
    for (scheme, model) in [(Scheme::Fcnn, &m.fcnn), (Scheme::Cnn, &m.cnn)] {
        if let Some(model) = model {
            model.save(&checkpoint_stems(out, scheme)[0], None)?;
        }
    }
    for (scheme, rows) in &run.histories {
        save_history(rows, &history_path(out, *scheme))?;
    }
    Ok(())
}

/// `train` command: trains on `<out>/dataset` and writes checkpoints and
/// histories. With `resume`, training continues from the saved checkpoints,
/// which must match the configured architecture.
pub fn train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<TrainingRun> {
    let ds = load_dataset(cfg, out)?;
    echo_config(cfg, out)?;
    let init = if resume { load_models(cfg, out)? } else { TrainedModels::default() };
    let run = train_models(cfg, &ds, init)?;
    save_run(&run, out)?;
    Ok(run)
}

/// Rate reports of every scheme on `records`, in `schemes` order.
pub fn evaluate_schemes(
    schemes: &[Scheme],
    models: &TrainedModels,
    records: &[SampleRecord],
    codebook: &Codebook,
    link: &LinkConfig,
    uplink_power_dbm: f64,
) -> Result<Vec<RateReport>> {
    let missing = |s: Scheme| Error::MissingArtifact(format!("no trained model for scheme {}", s.name()));
    schemes
        .iter()
        .map(|&scheme| {
            let (predictor, slots) = match scheme {
                Scheme::Exhaustive => (Predictor::Oracle, codebook.len()),
                Scheme::Proposed => {
                    let d = models.dual.as_ref().ok_or_else(|| missing(scheme))?;
                    (Predictor::Dual { angle: &d.angle, distance: &d.distance }, 0)
                }
                Scheme::Fcnn => (Predictor::Joint(models.fcnn.as_ref().ok_or_else(|| missing(scheme))?), 0),
                Scheme::Cnn => (Predictor::Joint(models.cnn.as_ref().ok_or_else(|| missing(scheme))?), 0),
            };
            let picks = predictor.predict(records, codebook.angle_count())?;
            let eval = evaluate_selection(records, &picks, codebook, link, slots)?;
            Ok(eval.report(scheme.name(), uplink_power_dbm, link.downlink_power_dbm))
        })
        .collect()
}

pub fn link_config(system: &SystemConfig, options: &LinkOptions) -> LinkConfig {
    LinkConfig {
        downlink_power_dbm: system.downlink_power_dbm,
        downlink_noise_dbm: system.downlink_noise_dbm,
        interference: options.interference,
        slot_s: options.slot_s,
        session_s: options.session_s,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub report: RateReport,
}

/// Seed of the pilot noise redrawn at sweep point `point`.
pub fn sweep_noise_seed(seed: u64, point: usize) -> u64 {
    seed.wrapping_add(1 + point as u64)
}

/// Evaluates every scheme at every sweep value.
///
/// Without retraining, uplink-power and sub-6 offset points redraw the pilots
/// of the validation split and reuse `models`; downlink-power points reuse
/// the records as they are. Retraining (always for the sub-6 antenna count,
/// which changes the input shape) regenerates the dataset at the point and
/// trains fresh networks on it.
pub fn run_sweep(cfg: &ExperimentConfig, dataset: Option<&Dataset>, models: &TrainedModels, retrain: bool) -> Result<Vec<SweepRow>> {
    let axis = cfg.sweep.axis;
    let retrain = axis == SweepAxis::Sub6Antennas || (retrain && axis != SweepAxis::DownlinkPower);
    let codebook = cfg.system.build_codebook()?;
    let mut rows = Vec::new();
    for (i, &value) in cfg.sweep.values.iter().enumerate() {
        let system = axis.apply(&cfg.system, value)?;
        let link = link_config(&system, &cfg.link);
        let reports = if retrain {
            let point = ExperimentConfig { system, ..cfg.clone() };
            let ds = generate_dataset(&point.dataset_config())?;
            let run = train_models(&point, &ds, TrainedModels::default())?;
            evaluate_schemes(&cfg.schemes, &run.models, ds.validation(), &codebook, &link, system.uplink_power_dbm)?
        } else {
            let ds = dataset.ok_or_else(|| Error::MissingArtifact("sweep needs the dataset".into()))?;
            let records: Cow<'_, [SampleRecord]> = match axis {
                SweepAxis::DownlinkPower => Cow::Borrowed(ds.validation()),
                _ => Cow::Owned(regenerate_pilots(&system, ds.config.seed, ds.validation(), sweep_noise_seed(cfg.seed, i))?),
            };
            evaluate_schemes(&cfg.schemes, models, &records, &codebook, &link, system.uplink_power_dbm)?
        };
        rows.extend(reports.into_iter().map(|report| SweepRow { axis_value: value, report }));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepProvenance {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub retrain_per_point: bool,
}

/// `sweep` command: writes `<out>/sweep.csv` and `<out>/sweep.json`.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, retrain: bool) -> Result<Vec<SweepRow>> {
    let needs_artifacts = !(cfg.sweep.axis == SweepAxis::Sub6Antennas || (retrain && cfg.sweep.axis != SweepAxis::DownlinkPower));
    let (dataset, models) = if needs_artifacts {
        (Some(load_dataset(cfg, out)?), load_models(cfg, out)?)
    } else {
        (None, TrainedModels::default())
    };
    echo_config(cfg, out)?;
    let rows = run_sweep(cfg, dataset.as_ref(), &models, retrain)?;
    let mut csv = Vec::new();
    write_sweep_csv(cfg.sweep.axis, &rows, &mut csv)?;
    fs::write(out.join(SWEEP_FILE), csv)?;
    let provenance = SweepProvenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        axis: cfg.sweep.axis,
        values: cfg.sweep.values.clone(),
        schemes: cfg.schemes.clone(),
        retrain_per_point: retrain,
    };
    fs::write(out.join(SWEEP_PROVENANCE_FILE), serde_json::to_string_pretty(&provenance)? + "\n")?;
    Ok(rows)
}

/// Sweep CSV: the axis column (named after the axis) followed by the rate
/// report columns.
pub fn write_sweep_csv<W: io::Write>(axis: SweepAxis, rows: &[SweepRow], out: W) -> Result<()> {
    let data = |e: csv::Error| Error::Data(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut header = vec![axis.name()];
    header.extend(RATE_COLUMNS);
    w.write_record(&header).map_err(data)?;
    for row in rows {
        let r = &row.report;
        let nums = [r.uplink_power_dbm, r.downlink_power_dbm, r.sum_rate, r.effective_rate, r.accuracy, r.accuracy_angle, r.accuracy_distance];
        let mut rec = vec![row.axis_value.to_string(), r.scheme.clone()];
        rec.extend(nums.iter().map(f64::to_string));
        w.write_record(&rec).map_err(data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: io::Read>(input: R) -> Result<(SweepAxis, Vec<SweepRow>)> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(|e| Error::Data(e.to_string()))?.iter().map(str::to_owned).collect();
    let axis = header.first().and_then(|h| SweepAxis::from_name(h));
    let axis = match axis {
        Some(a) if header[1..] == RATE_COLUMNS => a,
        _ => {
            return Err(Error::Data(format!(
                "sweep CSV columns {header:?} are not an axis column followed by {RATE_COLUMNS:?}"
            )))
        }
    };
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Data(format!("row {}: column {} value {:?} is not a number", line + 1, header[i], &rec[i])))
        };
        rows.push(SweepRow {
            axis_value: num(0)?,
            report: RateReport {
                scheme: rec[1].to_string(),
                uplink_power_dbm: num(2)?,
                downlink_power_dbm: num(3)?,
                sum_rate: num(4)?,
                effective_rate: num(5)?,
                accuracy: num(6)?,
                accuracy_angle: num(7)?,
                accuracy_distance: num(8)?,
            },
        });
    }
    Ok((axis, rows))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

const METRICS: [(&str, &str); 5] = [
    ("accuracy", "A_cc"),
    ("accuracy-angle", "A_cc_angle"),
    ("accuracy-distance", "A_cc_dist"),
    ("sum-rate", "R_sum"),
    ("effective-rate", "R_eff"),
];

fn metric(r: &RateReport, column: &str) -> f64 {
    match column {
        "A_cc" => r.accuracy,
        "A_cc_angle" => r.accuracy_angle,
        "A_cc_dist" => r.accuracy_distance,
        "R_sum" => r.sum_rate,
        _ => r.effective_rate,
    }
}

/// Sweep runs merged over seeds: `cells[scheme][point]` holds one report per run.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedSweep {
    pub axis: SweepAxis,
    pub runs: usize,
    pub values: Vec<f64>,
    pub schemes: Vec<String>,
    pub cells: Vec<Vec<Vec<RateReport>>>,
}

impl MergedSweep {
    pub fn merge(runs: &[(SweepAxis, Vec<SweepRow>)]) -> Result<Self> {
        let (axis, first) = runs.first().ok_or_else(|| Error::Usage("report needs at least one sweep CSV".into()))?;
        if first.is_empty() {
            return Err(Error::Data("sweep CSV has no rows".into()));
        }
        let mut values: Vec<f64> = Vec::new();
        let mut schemes: Vec<String> = Vec::new();
        for row in first {
            if !values.contains(&row.axis_value) {
                values.push(row.axis_value);
            }
            if !schemes.contains(&row.report.scheme) {
                schemes.push(row.report.scheme.clone());
            }
        }
        let mut cells = vec![vec![Vec::with_capacity(runs.len()); values.len()]; schemes.len()];
        for (n, (a, rows)) in runs.iter().enumerate() {
            if a != axis {
                return Err(Error::Data(format!("sweep {n} is over {} but the first is over {}", a.name(), axis.name())));
            }
            if rows.len() != values.len() * schemes.len() {
                return Err(Error::Data(format!(
                    "sweep {n} has {} rows, expected {} points x {} schemes",
                    rows.len(),
                    values.len(),
                    schemes.len()
                )));
            }
            for row in rows {
                let p = values.iter().position(|v| *v == row.axis_value);
                let s = schemes.iter().position(|s| *s == row.report.scheme);
                match (s, p) {
                    (Some(s), Some(p)) if cells[s][p].len() == n => cells[s][p].push(row.report.clone()),
                    _ => {
                        return Err(Error::Data(format!(
                            "sweep {n}: row ({}, {}) is duplicated or outside the first sweep's grid",
                            row.report.scheme, row.axis_value
                        )))
                    }
                }
            }
        }
        Ok(Self { axis: *axis, runs: runs.len(), values, schemes, cells })
    }

    pub fn stats(&self, scheme: usize, point: usize, column: &str) -> (f64, f64) {
        let v: Vec<f64> = self.cells[scheme][point].iter().map(|r| metric(r, column)).collect();
        mean_std(&v)
    }

    fn scheme(&self, name: &str) -> Option<usize> {
        self.schemes.iter().position(|s| s == name)
    }

    /// Plot data for one metric: the axis column then mean and std per scheme.
    pub fn figure_csv(&self, column: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let data = |e: csv::Error| Error::Data(e.to_string());
        let mut header = vec![self.axis.name().to_string()];
        for s in &self.schemes {
            header.push(format!("{s}_mean"));
            header.push(format!("{s}_std"));
        }
        w.write_record(&header).map_err(data)?;
        for (p, x) in self.values.iter().enumerate() {
            let mut rec = vec![x.to_string()];
            for s in 0..self.schemes.len() {
                let (m, sd) = self.stats(s, p, column);
                rec.push(m.to_string());
                rec.push(sd.to_string());
            }
            w.write_record(&rec).map_err(data)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
    }

    /// Qualitative checks that the sweep data can decide.
    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        let col = |s: usize, c: &str| -> Vec<f64> { (0..self.values.len()).map(|p| self.stats(s, p, c).0).collect() };
        let Some(prop) = self.scheme("proposed") else {
            return out;
        };
        let acc = col(prop, "A_cc");
        for base in ["fcnn", "cnn"] {
            if let Some(b) = self.scheme(base) {
                let margins: Vec<f64> = acc.iter().zip(col(b, "A_cc")).map(|(a, b)| a - b).collect();
                let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
                out.push(Check {
                    name: format!("proposed A_cc >= {base} A_cc at every point"),
                    passed: worst >= 0.0,
                    detail: format!("smallest mean margin {worst:+.4}"),
                });
            }
        }
        if self.axis == SweepAxis::UplinkPower && self.values.len() > 1 {
            let rho = spearman(&self.values, &acc);
            out.push(Check {
                name: "proposed A_cc rises with uplink power".into(),
                passed: rho > 0.0,
                detail: format!("Spearman rho {rho:.3}"),
            });
        }
        if let Some(ex) = self.scheme("exhaustive") {
            let (pe, ee) = (col(prop, "R_eff"), col(ex, "R_eff"));
            let (ps, es) = (col(prop, "R_sum"), col(ex, "R_sum"));
            let eff = pe.iter().zip(&ee).all(|(p, e)| p > e);
            let sum = ps.iter().zip(&es).all(|(p, e)| e >= p);
            out.push(Check {
                name: "proposed R_eff > exhaustive R_eff and exhaustive R_sum >= proposed R_sum at every point".into(),
                passed: eff && sum,
                detail: format!("R_eff ordering {}, R_sum ordering {}", if eff { "holds" } else { "fails" }, if sum { "holds" } else { "fails" }),
            });
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut md = format!("# Sweep report\n\nAxis: `{}`, runs merged: {}.\n", self.axis.name(), self.runs);
        for (_, column) in METRICS {
            md += &format!("\n## {column}\n\n| {} |", self.axis.name());
            for s in &self.schemes {
                md += &format!(" {s} |");
            }
            md += "\n|---|";
            md += &"---|".repeat(self.schemes.len());
            md += "\n";
            for (p, x) in self.values.iter().enumerate() {
                md += &format!("| {x} |");
                for s in 0..self.schemes.len() {
                    let (m, sd) = self.stats(s, p, column);
                    md += &format!(" {m:.4} ± {sd:.4} |");
                }
                md += "\n";
            }
        }
        md += "\n## Checks\n\n";
        let checks = self.checks();
        if checks.is_empty() {
            md += "No checks apply to this sweep.\n";
        }
        for c in checks {
            md += &format!("- [{}] {} ({})\n", if c.passed { "x" } else { " " }, c.name, c.detail);
        }
        md += "\nGradient, far-field, oracle, ZF, labeling, overfit, equivariance and determinism checks run in the acceptance test suite.\n";
        md
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// `report` command: merges sweep CSVs and writes `report.md` plus one
/// `fig-<metric>.csv` per metric under `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<MergedSweep> {
    let mut runs = Vec::with_capacity(inputs.len());
    for path in inputs {
        let file = fs::File::open(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => Error::MissingArtifact(format!("no sweep CSV at {}", path.display())),
            _ => Error::Io(e),
        })?;
        runs.push(read_sweep_csv(file).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })?);
    }
    let merged = MergedSweep::merge(&runs)?;
    fs::create_dir_all(out)?;
    for (name, column) in METRICS {
        fs::write(out.join(format!("fig-{name}.csv")), merged.figure_csv(column)?)?;
    }
    fs::write(out.join(REPORT_FILE), merged.markdown())?;
    Ok(merged)
}
