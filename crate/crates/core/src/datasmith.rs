//! Synthetic shared-scatterer scenes, sub-6 GHz pilot synthesis, network
//! input images, exhaustive-search labels and the on-disk dataset format.
//!
//! Both base stations sit on the x-axis with their arrays along it; the
//! mmWave array is centred at the origin and the sub-6 array at
//! `(sub6_offset_m, 0)`. Users and scatterers live in the half plane `y > 0`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::airlink::{dbm_to_w, exhaustive_search, UserChannels};
use crate::error::{config_err, Error, Result};
use crate::polarbook::{build_codebook, Codebook, CodebookConfig, CodewordIndex};
use crate::wavefield::{
    mmwave_downlink_channels, sub6_uplink_channel, ArrayConfig, Band, ChannelModel, Path as Ray, PathSet,
    SPEED_OF_LIGHT,
};

pub const DATASET_VERSION: u32 = 1;
const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const MAX_DROP_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub users: usize,
    /// Range from the mmWave array centre, `[near, far]` in metres.
    pub range_m: [f64; 2],
    /// Sine-angle interval seen from the mmWave array.
    pub sine_range: [f64; 2],
    pub cluster_radius_m: f64,
    pub scatterers: usize,
    pub los_probability: f64,
    pub reflection_loss_db: f64,
    /// x-coordinate of the sub-6 GHz array centre.
    #[serde(default)]
    pub sub6_offset_m: f64,
}

impl SceneConfig {
    pub fn desk() -> Self {
        Self {
            users: 4,
            range_m: [1.2, 8.0],
            sine_range: [-0.75, 0.75],
            cluster_radius_m: 0.5,
            scatterers: 3,
            los_probability: 0.9,
            reflection_loss_db: 10.0,
            sub6_offset_m: 0.0,
        }
    }

    pub fn paper() -> Self {
        Self { range_m: [20.0, 150.0], cluster_radius_m: 10.0, ..Self::desk() }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let r = x.hypot(y);
        if y <= 0.0 || r < self.range_m[0] || r > self.range_m[1] {
            return false;
        }
        let s = x / r;
        s >= self.sine_range[0] && s <= self.sine_range[1]
    }
}

/// Everything fixed about the simulated system apart from the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub mmwave: ArrayConfig,
    pub sub6: ArrayConfig,
    pub codebook: CodebookConfig,
    #[serde(default)]
    pub channel_model: ChannelModel,
    pub scene: SceneConfig,
    pub uplink_power_dbm: f64,
    pub uplink_noise_dbm: f64,
    pub downlink_power_dbm: f64,
    pub downlink_noise_dbm: f64,
}

impl SystemConfig {
    /// 64-element mmWave array with 4 rings, 16-element sub-6 array, 8 pilot
    /// subcarriers, 16 downlink subcarriers, 4 users, -56 dBm noise floors.
    pub fn desk() -> Self {
        Self {
            mmwave: ArrayConfig::half_wavelength(64, 30e9, 10e6, 16).expect("valid preset"),
            sub6: ArrayConfig::half_wavelength(16, 5.5e9, 10e6, 8).expect("valid preset"),
            codebook: CodebookConfig::new(4),
            channel_model: ChannelModel::default(),
            scene: SceneConfig::desk(),
            uplink_power_dbm: -10.0,
            uplink_noise_dbm: -56.0,
            downlink_power_dbm: 2.0,
            downlink_noise_dbm: -56.0,
        }
    }

    /// Full-size system: 256 x 5 codebook, 32 sub-6 antennas, 32 pilot and
    /// 128 downlink subcarriers.
    pub fn paper() -> Self {
        Self {
            mmwave: ArrayConfig::half_wavelength(256, 30e9, 10e6, 128).expect("valid preset"),
            sub6: ArrayConfig::half_wavelength(32, 5.5e9, 10e6, 32).expect("valid preset"),
            codebook: CodebookConfig::new(5),
            scene: SceneConfig::paper(),
            uplink_noise_dbm: -81.0,
            downlink_noise_dbm: -81.0,
            ..Self::desk()
        }
    }

    /// Tiny system for fast tests: 8 x 2 codebook, 4 sub-6 antennas, 2 pilot
    /// and 2 downlink subcarriers, 2 users.
    pub fn toy() -> Self {
        let mmwave = ArrayConfig::half_wavelength(8, 30e9, 10e6, 2).expect("valid preset");
        Self {
            mmwave,
            sub6: ArrayConfig::half_wavelength(4, 5.5e9, 10e6, 2).expect("valid preset"),
            codebook: CodebookConfig::new(2),
            scene: SceneConfig { users: 2, range_m: [0.03, 0.24], cluster_radius_m: 0.05, ..SceneConfig::desk() },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mmwave.validate().map_err(|e| prefix("mmwave", e))?;
        self.sub6.validate().map_err(|e| prefix("sub6", e))?;
        self.codebook.validate(&self.mmwave).map_err(|e| prefix("codebook", e))?;
        let s = &self.scene;
        if s.users == 0 {
            return Err(config_err("scene.users must be at least 1"));
        }
        let rayleigh = self.mmwave.rayleigh_distance();
        let r_min = self.codebook.min_range(&self.mmwave);
        let [near, far] = s.range_m;
        if !(near > 0.0 && near < far) {
            return Err(config_err(format!("scene.range_m [{near}, {far}] must be increasing and positive")));
        }
        if far > rayleigh {
            return Err(config_err(format!(
                "scene.range_m upper bound {far} m exceeds the mmWave Rayleigh distance {rayleigh:.3} m"
            )));
        }
        if near < r_min {
            return Err(config_err(format!(
                "scene.range_m lower bound {near} m is inside the innermost codebook ring {r_min:.3} m"
            )));
        }
        let [lo, hi] = s.sine_range;
        if !(-1.0 < lo && lo < hi && hi < 1.0) {
            return Err(config_err(format!("scene.sine_range [{lo}, {hi}] must be increasing within (-1, 1)")));
        }
        if !(s.cluster_radius_m >= 0.0) {
            return Err(config_err("scene.cluster_radius_m must be non-negative"));
        }
        if !(0.0..=1.0).contains(&s.los_probability) {
            return Err(config_err("scene.los_probability must lie in [0, 1]"));
        }
        if !s.reflection_loss_db.is_finite() || !s.sub6_offset_m.is_finite() {
            return Err(config_err("scene.reflection_loss_db and scene.sub6_offset_m must be finite"));
        }
        for (name, v) in [
            ("uplink_power_dbm", self.uplink_power_dbm),
            ("uplink_noise_dbm", self.uplink_noise_dbm),
            ("downlink_power_dbm", self.downlink_power_dbm),
            ("downlink_noise_dbm", self.downlink_noise_dbm),
        ] {
            if !v.is_finite() {
                return Err(config_err(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn build_codebook(&self) -> Result<Codebook> {
        build_codebook(&self.mmwave, &self.codebook, &self.channel_model)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.sub6.subcarriers, 2, self.sub6.antennas]
    }
}

fn prefix(field: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{field}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub users: Vec<[f64; 2]>,
    pub scatterers: Vec<[f64; 2]>,
    pub mmwave_paths: Vec<PathSet>,
    pub sub6_paths: Vec<PathSet>,
}

/// Scene RNG for sample `index`: an independent ChaCha stream per sample.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Pilot-noise RNG for sample `index`, independent of the scene stream.
pub fn noise_rng(seed: u64, index: u64) -> ChaCha8Rng {
    scene_rng(seed ^ NOISE_SALT, index)
}

fn to_xy(r: f64, sine: f64) -> [f64; 2] {
    [r * sine, r * (1.0 - sine * sine).sqrt()]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn drop_in_sector(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let r = rng.gen_range(cfg.range_m[0]..=cfg.range_m[1]);
    let s = rng.gen_range(cfg.sine_range[0]..=cfg.sine_range[1]);
    to_xy(r, s)
}

/// One path as seen by an array centred at `origin`, arriving from `last`
/// after travelling `length` metres in total.
fn ray(origin: [f64; 2], last: [f64; 2], length: f64, amplitude: f64, phase: f64) -> Ray {
    let r = dist(origin, last);
    Ray {
        gain: Complex64::from_polar(amplitude, phase),
        delay_s: length / SPEED_OF_LIGHT,
        sine_angle: ((last[0] - origin[0]) / r).clamp(-1.0, 1.0),
        distance_m: r,
    }
}

/// Builds both bands' path sets for users and scatterers at known positions.
/// `los[u]` selects the direct path; users with neither get it regardless.
pub fn scene_paths(
    system: &SystemConfig,
    users: &[[f64; 2]],
    scatterers: &[[f64; 2]],
    los: &[bool],
    band_phase: [f64; 2],
    reflection_phase: &[[f64; 2]],
) -> Result<Scene> {
    let loss = 10f64.powf(-system.scene.reflection_loss_db / 20.0);
    let bands = [
        (Band::Mmwave, [0.0, 0.0], system.mmwave.wavelength()),
        (Band::Sub6, [system.scene.sub6_offset_m, 0.0], system.sub6.wavelength()),
    ];
    let mut sets: [Vec<PathSet>; 2] = [Vec::new(), Vec::new()];
    for (u, &p) in users.iter().enumerate() {
        let direct = los[u] || scatterers.is_empty();
        for (b, &(band, origin, lambda)) in bands.iter().enumerate() {
            let mut paths = Vec::with_capacity(scatterers.len() + 1);
            if direct {
                let length = dist(origin, p);
                paths.push(ray(origin, p, length, lambda / (4.0 * PI * length), band_phase[b]));
            }
            for (q, &s) in scatterers.iter().enumerate() {
                let length = dist(p, s) + dist(s, origin);
                let phase = band_phase[b] + reflection_phase[q][b];
                paths.push(ray(origin, s, length, loss * lambda / (4.0 * PI * length), phase));
            }
            sets[b].push(PathSet::new(band, paths)?);
        }
    }
    let [mmwave_paths, sub6_paths] = sets;
    Ok(Scene { users: users.to_vec(), scatterers: scatterers.to_vec(), mmwave_paths, sub6_paths })
}

/// Drops a user cluster and shared scatterers and traces both bands.
pub fn generate_scene(system: &SystemConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let cfg = &system.scene;
    let centre = drop_in_sector(cfg, rng);
    let mut users = Vec::with_capacity(cfg.users);
    for _ in 0..cfg.users {
        let mut pos = centre;
        if cfg.cluster_radius_m > 0.0 {
            for _ in 0..MAX_DROP_ATTEMPTS {
                let rho = cfg.cluster_radius_m * rng.gen::<f64>().sqrt();
                let phi = rng.gen_range(0.0..2.0 * PI);
                let cand = [centre[0] + rho * phi.cos(), centre[1] + rho * phi.sin()];
                if cfg.contains(cand[0], cand[1]) {
                    pos = cand;
                    break;
                }
            }
        }
        users.push(pos);
    }
    let scatterers: Vec<[f64; 2]> = (0..cfg.scatterers).map(|_| drop_in_sector(cfg, rng)).collect();
    let los: Vec<bool> = (0..cfg.users).map(|_| rng.gen::<f64>() < cfg.los_probability).collect();
    let band_phase = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let reflection: Vec<[f64; 2]> =
        (0..cfg.scatterers).map(|_| [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)]).collect();
    scene_paths(system, &users, &scatterers, &los, band_phase, &reflection)
}

/// Noiseless sub-6 uplink channels indexed `[user][subcarrier][antenna]`.
pub fn sub6_channels(scene: &Scene, system: &SystemConfig) -> Result<Vec<Vec<Vec<Complex64>>>> {
    scene
        .sub6_paths
        .iter()
        .map(|ps| (0..system.sub6.subcarriers).map(|k| sub6_uplink_channel(ps, k, &system.sub6, &system.channel_model)).collect())
        .collect()
}

/// Received pilots `h z + n` with `z = sqrt(P)` and circular Gaussian noise of
/// variance `noise_w` per entry, indexed `[user][subcarrier][antenna]`.
pub fn receive_sub6_pilots(
    channels: &[Vec<Vec<Complex64>>],
    uplink_power_w: f64,
    noise_w: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<Complex64>>> {
    let z = uplink_power_w.sqrt();
    let sd = (noise_w / 2.0).sqrt();
    channels
        .iter()
        .map(|user| {
            user.iter()
                .map(|h| {
                    h.iter()
                        .map(|v| {
                            let re: f64 = rng.sample(StandardNormal);
                            let im: f64 = rng.sample(StandardNormal);
                            v * z + Complex64::new(sd * re, sd * im)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Real `K x 2 x M` network input: per subcarrier a real row and an imaginary
/// row, divided by the RMS of all entries and stored in single precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotImage {
    pub subcarriers: usize,
    pub antennas: usize,
    pub data: Vec<f32>,
    /// Scale removed from the raw pilots (0 for an all-zero input).
    pub rms: f64,
}

impl PilotImage {
    /// Pilots recovered as `image * rms`, indexed `[subcarrier][antenna]`.
    pub fn to_pilots(&self) -> Vec<Vec<Complex64>> {
        let scale = if self.rms > 0.0 { self.rms } else { 1.0 };
        (0..self.subcarriers)
            .map(|k| {
                let base = k * 2 * self.antennas;
                (0..self.antennas)
                    .map(|m| {
                        let re = f64::from(self.data[base + m]) * scale;
                        let im = f64::from(self.data[base + self.antennas + m]) * scale;
                        Complex64::new(re, im)
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn stack_pilots(pilots: &[Vec<Complex64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pilots.len() * 2 * pilots.first().map_or(0, Vec::len));
    for row in pilots {
        out.extend(row.iter().map(|v| v.re));
        out.extend(row.iter().map(|v| v.im));
    }
    out
}

pub fn preprocess(pilots: &[Vec<Complex64>]) -> Result<PilotImage> {
    let subcarriers = pilots.len();
    let antennas = pilots.first().map_or(0, Vec::len);
    if subcarriers == 0 || antennas == 0 || pilots.iter().any(|r| r.len() != antennas) {
        return Err(config_err("pilots must form a non-empty subcarrier x antenna grid"));
    }
    let raw = stack_pilots(pilots);
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    Ok(PilotImage { subcarriers, antennas, data: raw.iter().map(|v| (v * scale) as f32).collect(), rms })
}

/// Rounds every channel entry to single precision.
pub fn quantize_channels(channels: &[Vec<Vec<Complex64>>]) -> Vec<Vec<Vec<Complex32>>> {
    channels
        .iter()
        .map(|u| u.iter().map(|h| h.iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect()).collect())
        .collect()
}

pub fn widen_channels(channels: &[Vec<Vec<Complex32>>]) -> Vec<Vec<Vec<Complex64>>> {
    channels
        .iter()
        .map(|u| u.iter().map(|h| h.iter().map(|v| Complex64::new(v.re.into(), v.im.into())).collect()).collect())
        .collect()
}

/// Exhaustive-search label of every user.
pub fn label(channels: &[Vec<Vec<Complex64>>], codebook: &Codebook) -> Result<Vec<CodewordIndex>> {
    channels.iter().map(|h| exhaustive_search(h, codebook).map(|(idx, _)| idx)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub index: u64,
    pub images: Vec<PilotImage>,
    pub labels: Vec<CodewordIndex>,
    /// Single-precision downlink channels `[user][subcarrier][antenna]`.
    pub channels: Vec<Vec<Vec<Complex32>>>,
}

impl SampleRecord {
    pub fn users(&self) -> usize {
        self.labels.len()
    }

    pub fn user_channels(&self) -> Result<UserChannels> {
        UserChannels::new(widen_channels(&self.channels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub system: SystemConfig,
    pub samples: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    pub seed: u64,
}

fn default_validation_fraction() -> f64 {
    0.05
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        Self { system: SystemConfig::desk(), samples: 20_000, validation_fraction: 0.05, seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.samples < 2 {
            return Err(config_err("samples must be at least 2 (one training and one validation scene)"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(config_err("validation_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `(training, validation)` scene counts; validation takes the last scenes.
    pub fn split(&self) -> (usize, usize) {
        let val = ((self.samples as f64 * self.validation_fraction).round() as usize).clamp(1, self.samples - 1);
        (self.samples - val, val)
    }
}

/// Generates the scene, pilots, image, channels and labels of one sample.
pub fn generate_sample(cfg: &DatasetConfig, codebook: &Codebook, index: u64) -> Result<SampleRecord> {
    let system = &cfg.system;
    let scene = generate_scene(system, &mut scene_rng(cfg.seed, index))?;
    sample_from_scene(system, codebook, &scene, &mut noise_rng(cfg.seed, index), index)
}

pub fn sample_from_scene(
    system: &SystemConfig,
    codebook: &Codebook,
    scene: &Scene,
    noise: &mut ChaCha8Rng,
    index: u64,
) -> Result<SampleRecord> {
    let pilots = receive_sub6_pilots(
        &sub6_channels(scene, system)?,
        dbm_to_w(system.uplink_power_dbm),
        dbm_to_w(system.uplink_noise_dbm),
        noise,
    );
    let images = pilots.iter().map(|p| preprocess(p)).collect::<Result<Vec<_>>>()?;
    let downlink = scene
        .mmwave_paths
        .iter()
        .map(|ps| mmwave_downlink_channels(ps, &system.mmwave, &system.channel_model))
        .collect::<Result<Vec<_>>>()?;
    let channels = quantize_channels(&downlink);
    let labels = label(&widen_channels(&channels), codebook)?;
    Ok(SampleRecord { index, images, labels, channels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn train(&self) -> &[SampleRecord] {
        &self.records[..self.config.split().0]
    }

    pub fn validation(&self) -> &[SampleRecord] {
        &self.records[self.config.split().0..]
    }
}

/// Generates every sample in parallel; records come back in index order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let codebook = cfg.system.build_codebook()?;
    let records = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| generate_sample(cfg, &codebook, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: cfg.clone(), records })
}

/// Redraws the pilot noise (and optionally the uplink power) of existing
/// records; labels and channels are untouched.
pub fn redraw_pilots(dataset: &Dataset, records: &[SampleRecord], uplink_power_dbm: f64, noise_seed: u64) -> Result<Vec<SampleRecord>> {
    let system = SystemConfig { uplink_power_dbm, ..dataset.config.system };
    regenerate_pilots(&system, dataset.config.seed, records, noise_seed)
}

/// Rebuilds the pilot images of existing records under `system`, which may
/// differ from the generating system in uplink power or sub-6 placement.
/// Scenes are redrawn from `scene_seed`; labels and channels are untouched.
pub fn regenerate_pilots(system: &SystemConfig, scene_seed: u64, records: &[SampleRecord], noise_seed: u64) -> Result<Vec<SampleRecord>> {
    system.validate()?;
    records
        .par_iter()
        .map(|rec| {
            let scene = generate_scene(system, &mut scene_rng(scene_seed, rec.index))?;
            let pilots = receive_sub6_pilots(
                &sub6_channels(&scene, system)?,
                dbm_to_w(system.uplink_power_dbm),
                dbm_to_w(system.uplink_noise_dbm),
                &mut noise_rng(noise_seed, rec.index),
            );
            let images = pilots.iter().map(|p| preprocess(p)).collect::<Result<Vec<_>>>()?;
            Ok(SampleRecord { images, ..rec.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: usize,
    pub train: usize,
    pub validation: usize,
    pub users: usize,
    /// `[subcarriers, 2, antennas]` of every pilot image.
    pub image_shape: [usize; 3],
    /// `[subcarriers, antennas]` of every stored downlink channel.
    pub channel_shape: [usize; 2],
    pub codebook: [usize; 2],
    pub config: DatasetConfig,
    pub sample_indices: Vec<u64>,
    /// Per sample, per user RMS removed by preprocessing.
    pub image_rms: Vec<Vec<f64>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PILOTS_FILE: &str = "pilots.f32";
pub const CHANNELS_FILE: &str = "channels.c64";
pub const LABELS_FILE: &str = "labels.json";

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let cfg = &dataset.config;
    let sys = &cfg.system;
    let (train, validation) = cfg.split();
    if dataset.records.len() != cfg.samples {
        return Err(Error::Data(format!("dataset holds {} records, config says {}", dataset.records.len(), cfg.samples)));
    }
    let image_shape = sys.image_shape();
    let channel_shape = [sys.mmwave.subcarriers, sys.mmwave.antennas];
    let users = sys.scene.users;
    let mut pilots = Vec::new();
    let mut channels = Vec::new();
    for rec in &dataset.records {
        if rec.users() != users || rec.images.len() != users || rec.channels.len() != users {
            return Err(Error::Data(format!("record {} does not hold {users} users", rec.index)));
        }
        for img in &rec.images {
            if [img.subcarriers, 2, img.antennas] != image_shape || img.data.len() != image_shape.iter().product::<usize>() {
                return Err(Error::Data(format!("record {} image shape differs from {image_shape:?}", rec.index)));
            }
            pilots.extend(img.data.iter().flat_map(|v| v.to_le_bytes()));
        }
        for h in rec.channels.iter().flatten() {
            if h.len() != channel_shape[1] {
                return Err(Error::Data(format!("record {} channel length differs from {}", rec.index, channel_shape[1])));
            }
            for v in h {
                channels.extend(v.re.to_le_bytes());
                channels.extend(v.im.to_le_bytes());
            }
        }
    }
    let labels: Vec<&Vec<CodewordIndex>> = dataset.records.iter().map(|r| &r.labels).collect();
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        samples: cfg.samples,
        train,
        validation,
        users,
        image_shape,
        channel_shape,
        codebook: [sys.mmwave.antennas, sys.codebook.rings],
        config: cfg.clone(),
        sample_indices: dataset.records.iter().map(|r| r.index).collect(),
        image_rms: dataset.records.iter().map(|r| r.images.iter().map(|i| i.rms).collect()).collect(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PILOTS_FILE), pilots)?;
    fs::write(dir.join(CHANNELS_FILE), channels)?;
    fs::write(dir.join(LABELS_FILE), serde_json::to_string(&labels)?)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// SHA-256 of the manifest file, as lowercase hex.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn expect_len(file: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Data(format!("{file}: expected {want} bytes from the manifest shapes, found {got}")));
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Data(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "{MANIFEST_FILE}: format_version {} is not supported (expected {DATASET_VERSION})",
            manifest.format_version
        )));
    }
    let n = manifest.samples;
    let users = manifest.users;
    if manifest.config.samples != n {
        return Err(Error::Data(format!("{MANIFEST_FILE}: samples {n} disagrees with config.samples {}", manifest.config.samples)));
    }
    if manifest.sample_indices.len() != n || manifest.image_rms.len() != n {
        return Err(Error::Data(format!("{MANIFEST_FILE}: sample_indices/image_rms do not list {n} samples")));
    }
    if manifest.image_shape[1] != 2 || manifest.image_shape != manifest.config.system.image_shape() {
        return Err(Error::Data(format!("{MANIFEST_FILE}: image_shape {:?} disagrees with the config", manifest.image_shape)));
    }
    let image_len: usize = manifest.image_shape.iter().product();
    let channel_len: usize = manifest.channel_shape.iter().product();
    let pilots = fs::read(dir.join(PILOTS_FILE))?;
    expect_len(PILOTS_FILE, pilots.len(), n * users * image_len * 4)?;
    let channels = fs::read(dir.join(CHANNELS_FILE))?;
    expect_len(CHANNELS_FILE, channels.len(), n * users * channel_len * 8)?;
    let labels: Vec<Vec<CodewordIndex>> = serde_json::from_str(&fs::read_to_string(dir.join(LABELS_FILE))?)
        .map_err(|e| Error::Data(format!("{LABELS_FILE}: {e}")))?;
    if labels.len() != n {
        return Err(Error::Data(format!("{LABELS_FILE}: holds {} samples, manifest says {n}", labels.len())));
    }
    let [angles, rings] = manifest.codebook;
    let mut floats = pilots.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut cplx = channels.chunks_exact(8).map(|c| {
        Complex32::new(f32::from_le_bytes(c[..4].try_into().expect("4 bytes")), f32::from_le_bytes(c[4..].try_into().expect("4 bytes")))
    });
    let [k_sub6, _, m_sub6] = manifest.image_shape;
    let [k_dl, m_dl] = manifest.channel_shape;
    let mut records = Vec::with_capacity(n);
    for (s, sample_labels) in labels.into_iter().enumerate() {
        if sample_labels.len() != users || manifest.image_rms[s].len() != users {
            return Err(Error::Data(format!("{LABELS_FILE}: sample {s} does not hold {users} users")));
        }
        if sample_labels.iter().any(|l| l.angle >= angles || l.ring >= rings) {
            return Err(Error::Data(format!("{LABELS_FILE}: sample {s} has a label outside the {angles} x {rings} codebook")));
        }
        let images = (0..users)
            .map(|u| PilotImage {
                subcarriers: k_sub6,
                antennas: m_sub6,
                data: floats.by_ref().take(image_len).collect(),
                rms: manifest.image_rms[s][u],
            })
            .collect();
        let chans = (0..users).map(|_| (0..k_dl).map(|_| cplx.by_ref().take(m_dl).collect()).collect()).collect();
        records.push(SampleRecord { index: manifest.sample_indices[s], images, labels: sample_labels, channels: chans });
    }
    Ok(Dataset { config: manifest.config, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavefield::beam_pattern;

    fn small_system() -> SystemConfig {
        let mut sys = SystemConfig::desk();
        sys.mmwave = ArrayConfig::half_wavelength(16, 30e9, 10e6, 4).unwrap();
        sys.sub6 = ArrayConfig::half_wavelength(4, 5.5e9, 10e6, 2).unwrap();
        sys.codebook = CodebookConfig::new(2);
        sys.scene.range_m = [0.3, 1.2];
        sys.scene.cluster_radius_m = 0.3;
        sys.scene.users = 3;
        sys
    }

    #[test]
    fn presets_validate() {
        SystemConfig::desk().validate().unwrap();
        SystemConfig::paper().validate().unwrap();
        small_system().validate().unwrap();
        let (train, val) = DatasetConfig::desk(0).split();
        assert_eq!((train, val), (19_000, 1_000));
    }

    #[test]
    fn far_users_are_rejected() {
        let mut sys = SystemConfig::desk();
        sys.scene.range_m[1] = 25.0;
        let err = sys.validate().unwrap_err().to_string();
        assert!(err.contains("Rayleigh"), "{err}");
        let mut sys = SystemConfig::desk();
        sys.scene.range_m[0] = 0.5;
        assert!(sys.validate().is_err());
    }

    #[test]
    fn scenes_are_deterministic() {
        let sys = SystemConfig::desk();
        let a = generate_scene(&sys, &mut scene_rng(42, 7)).unwrap();
        let b = generate_scene(&sys, &mut scene_rng(42, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&sys, &mut scene_rng(42, 8)).unwrap();
        assert_ne!(a, c);
        for u in &a.users {
            assert!(sys.scene.contains(u[0], u[1]));
        }
    }

    #[test]
    fn co_located_users_share_angles() {
        let mut sys = SystemConfig::desk();
        sys.scene.cluster_radius_m = 0.0;
        sys.scene.los_probability = 1.0;
        let scene = generate_scene(&sys, &mut scene_rng(3, 0)).unwrap();
        for ps in [&scene.mmwave_paths, &scene.sub6_paths] {
            for other in &ps[1..] {
                assert_eq!(other, &ps[0]);
            }
        }
    }

    #[test]
    fn scatterer_path_geometry() {
        let sys = SystemConfig::desk();
        let user = [1.0, 3.0];
        let scat = [-2.0, 4.0];
        let scene = scene_paths(&sys, &[user], &[scat], &[true], [0.0, 0.0], &[[0.0, 0.0]]).unwrap();
        let mm = scene.mmwave_paths[0].paths();
        let angle = (-2.0f64).atan2(4.0);
        assert!((mm[1].sine_angle - angle.sin()).abs() < 1e-12);
        assert!((mm[1].distance_m - 20f64.sqrt()).abs() < 1e-12);
        let total = (3f64.powi(2) + 1.0).sqrt() + 20f64.sqrt();
        assert!((mm[1].delay_s * SPEED_OF_LIGHT - total).abs() < 1e-9);
        let direct = 10f64.sqrt();
        assert!((mm[0].sine_angle - 1.0 / direct).abs() < 1e-12);
        assert!((mm[0].gain.norm() - sys.mmwave.wavelength() / (4.0 * PI * direct)).abs() < 1e-15);
        let reflected = 10f64.powf(-0.5) * sys.mmwave.wavelength() / (4.0 * PI * total);
        assert!((mm[1].gain.norm() - reflected).abs() < 1e-15);

        let mut shifted = sys;
        shifted.scene.sub6_offset_m = 1.0;
        let scene = scene_paths(&shifted, &[user], &[scat], &[true], [0.0, 0.0], &[[0.0, 0.0]]).unwrap();
        assert!(scene.sub6_paths[0].paths()[0].sine_angle.abs() < 1e-12);
    }

    #[test]
    fn blocked_user_without_scatterers_keeps_direct_path() {
        let mut sys = SystemConfig::desk();
        sys.scene.scatterers = 0;
        let scene = scene_paths(&sys, &[[0.0, 3.0]], &[], &[false], [0.0, 0.0], &[]).unwrap();
        assert_eq!(scene.mmwave_paths[0].paths().len(), 1);
    }

    #[test]
    fn noiseless_unit_pilot_equals_channel() {
        let sys = small_system();
        let scene = generate_scene(&sys, &mut scene_rng(1, 0)).unwrap();
        let h = sub6_channels(&scene, &sys).unwrap();
        let y = receive_sub6_pilots(&h, 1.0, 0.0, &mut noise_rng(1, 0));
        assert_eq!(y, h);
    }

    #[test]
    fn noise_energy_matches_variance() {
        let m = 16;
        let sigma2 = 2.5e-3;
        let zero = vec![vec![vec![Complex64::new(0.0, 0.0); m]]];
        let mut rng = noise_rng(9, 0);
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let y = receive_sub6_pilots(&zero, 1.0, sigma2, &mut rng);
            total += y[0][0].iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        let mean = total / draws as f64;
        assert!((mean / (m as f64 * sigma2) - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn preprocess_examples() {
        let img = preprocess(&[vec![Complex64::new(1.0, 2.0)]]).unwrap();
        let rms = (2.5f64).sqrt();
        assert_eq!(img.rms, rms);
        assert_eq!(img.data, vec![(1.0 / rms) as f32, (2.0 / rms) as f32]);

        let real = vec![vec![Complex64::new(1.0, 0.0), Complex64::new(-3.0, 0.0)]; 3];
        let img = preprocess(&real).unwrap();
        for k in 0..3 {
            assert!(img.data[k * 4 + 2..k * 4 + 4].iter().all(|&v| v == 0.0));
        }

        let pilots = vec![
            vec![Complex64::new(1e-5, -2e-6), Complex64::new(3e-6, 4e-6)],
            vec![Complex64::new(-7e-6, 1e-6), Complex64::new(0.0, 5e-6)],
        ];
        let back = preprocess(&pilots).unwrap().to_pilots();
        for (row, want) in back.iter().zip(&pilots) {
            for (a, b) in row.iter().zip(want) {
                assert!((a - b).norm() < 1e-6 * 1e-5);
            }
        }
    }

    #[test]
    fn on_grid_users_get_grid_labels() {
        let sys = small_system();
        let cb = sys.build_codebook().unwrap();
        for (angle, ring) in [(0, 0), (5, 1), (15, 1), (8, 0)] {
            let path = Ray { gain: Complex64::new(1e-3, 0.0), delay_s: 1e-9, sine_angle: cb.angles()[angle], distance_m: cb.distances()[ring] };
            let ps = PathSet::new(Band::Mmwave, vec![path]).unwrap();
            let h = mmwave_downlink_channels(&ps, &sys.mmwave, &sys.channel_model).unwrap();
            assert_eq!(label(&[h], &cb).unwrap(), vec![cb.index(angle, ring).unwrap()]);
        }
    }

    #[test]
    fn labels_ignore_noise_and_relabel_exactly() {
        let sys = small_system();
        let cb = sys.build_codebook().unwrap();
        let cfg = DatasetConfig { system: sys, samples: 4, validation_fraction: 0.25, seed: 5 };
        let rec = generate_sample(&cfg, &cb, 2).unwrap();
        let scene = generate_scene(&sys, &mut scene_rng(5, 2)).unwrap();
        let other = sample_from_scene(&sys, &cb, &scene, &mut noise_rng(77, 2), 2).unwrap();
        assert_eq!(rec.labels, other.labels);
        assert_ne!(rec.images, other.images);
        assert_eq!(label(&widen_channels(&rec.channels), &cb).unwrap(), rec.labels);
    }

    #[test]
    fn sub6_pattern_tracks_mmwave_angle() {
        let mut sys = SystemConfig::desk();
        sys.scene.los_probability = 1.0;
        let cb = sys.build_codebook().unwrap();
        let ratio = sys.mmwave.antennas.div_ceil(sys.sub6.antennas);
        let mut agree = 0;
        let total = 50;
        for i in 0..total {
            let scene = generate_scene(&sys, &mut scene_rng(8, i)).unwrap();
            let h6 = sub6_channels(&scene, &sys).unwrap();
            let dl: Vec<_> = scene.mmwave_paths.iter().map(|ps| mmwave_downlink_channels(ps, &sys.mmwave, &sys.channel_model).unwrap()).collect();
            let labels = label(&dl, &cb).unwrap();
            for (u, lab) in labels.iter().enumerate() {
                let conj: Vec<Complex64> = h6[u][0].iter().map(|v| v.conj()).collect();
                let pattern = beam_pattern(&conj).unwrap();
                let peak = pattern.iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
                // map the sub-6 beam's sine angle onto the mmWave angle grid
                let sine = (2.0 * peak as f64 - sys.sub6.antennas as f64 + 1.0) / sys.sub6.antennas as f64;
                let mapped = ((sine + 1.0) * sys.mmwave.antennas as f64 / 2.0 - 0.5).round() as i64;
                if (mapped - lab.angle as i64).unsigned_abs() as usize <= ratio {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 >= 0.9 * (total as f64 * 4.0), "{agree}");
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let cfg = DatasetConfig { system: small_system(), samples: 6, validation_fraction: 0.34, seed: 11 };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!((ds.train().len(), ds.validation().len()), (4, 2));
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let h1 = manifest_hash(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&generate_dataset(&cfg).unwrap(), dir2.path()).unwrap();
        assert_eq!(manifest_hash(dir2.path()).unwrap(), h1);

        let pilots = dir.path().join(PILOTS_FILE);
        let bytes = fs::read(&pilots).unwrap();
        fs::write(&pilots, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(PILOTS_FILE), "{err}");
        fs::write(&pilots, &bytes).unwrap();

        let manifest_path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["samples"] = serde_json::json!(7);
        fs::write(&manifest_path, value.to_string()).unwrap();
        assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("samples"));
        value["samples"] = serde_json::json!(6);
        value["format_version"] = serde_json::json!(99);
        fs::write(&manifest_path, value.to_string()).unwrap();
        assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("format_version"));
    }
}
