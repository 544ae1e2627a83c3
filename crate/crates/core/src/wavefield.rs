//! Frequency-domain channels for a uniform linear array.
//!
//! The mmWave array is modelled with spherical wavefronts (each element sees
//! its own distance to the source) while the sub-6 GHz array uses planar
//! wavefronts. Both arrays lie on the x-axis; a source at sine-angle `theta`
//! and range `r` from the array centre sits at `(r*theta, r*sqrt(1-theta^2))`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub antennas: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub subcarriers: usize,
    /// Element spacing; always half the carrier wavelength.
    pub spacing_m: f64,
}

impl ArrayConfig {
    pub fn half_wavelength(antennas: usize, carrier_hz: f64, bandwidth_hz: f64, subcarriers: usize) -> Result<Self> {
        let cfg = Self { antennas, carrier_hz, bandwidth_hz, subcarriers, spacing_m: SPEED_OF_LIGHT / carrier_hz / 2.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return Err(config_err("antenna count must be at least 1"));
        }
        if self.subcarriers == 0 {
            return Err(config_err("subcarrier count must be at least 1"));
        }
        if !(self.carrier_hz > 0.0) || !(self.bandwidth_hz > 0.0) || self.bandwidth_hz >= self.carrier_hz {
            return Err(config_err(format!(
                "need 0 < bandwidth ({} Hz) < carrier ({} Hz)",
                self.bandwidth_hz, self.carrier_hz
            )));
        }
        let half = self.wavelength() / 2.0;
        if ((self.spacing_m - half) / half).abs() > 1e-9 {
            return Err(config_err(format!(
                "element spacing {} m is not half the carrier wavelength ({half} m)",
                self.spacing_m
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn aperture(&self) -> f64 {
        self.antennas as f64 * self.spacing_m
    }

    /// `2 D^2 / lambda` with `D` the array aperture.
    pub fn rayleigh_distance(&self) -> f64 {
        2.0 * self.aperture().powi(2) / self.wavelength()
    }
}

/// How the distance from element `m` to the source is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementDistance {
    /// `sqrt(r^2 + s^2 d^2 - 2 r theta s d)`.
    #[default]
    LawOfCosines,
    /// `sqrt(r^2 - s^2 d^2 - 2 r theta s d)`, which fails for broadside sources.
    Literal,
}

/// Frequency factor applied to the per-element phase `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyScaling {
    /// `1 + (f - f_c)/f_c`: the offset is the baseband frequency, so the
    /// factor is 1 at the carrier.
    #[default]
    BasebandOffset,
    /// `1 + f/f_c` with the passband frequency `f`.
    Literal,
}

/// Frequency used in each path's delay phase `exp(-j 2 pi f tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayPhase {
    #[default]
    Subcarrier,
    /// Frequency-flat: always the carrier.
    Carrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    pub element_distance: ElementDistance,
    pub frequency_scaling: FrequencyScaling,
    pub delay_phase: DelayPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Sub6,
    Mmwave,
}

/// One propagation path. For sub-6 paths the distance is carried but unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub gain: Complex64,
    pub delay_s: f64,
    /// Sine of the arrival angle at the array centre.
    pub sine_angle: f64,
    /// Range from the array centre to the user or the last scatterer.
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    band: Band,
    paths: Vec<Path>,
}

impl PathSet {
    pub fn new(band: Band, paths: Vec<Path>) -> Result<Self> {
        if paths.is_empty() {
            return Err(config_err("a path set needs at least one path"));
        }
        for p in &paths {
            if !(p.sine_angle.abs() <= 1.0) {
                return Err(config_err(format!("path sine-angle {} outside [-1, 1]", p.sine_angle)));
            }
            if !(p.distance_m > 0.0) {
                return Err(config_err(format!("path distance {} m must be positive", p.distance_m)));
            }
        }
        Ok(Self { band, paths })
    }

    pub fn band(&self) -> Band {
        self.band
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        let paths = self.paths.iter().map(|p| Path { gain: p.gain * c, ..*p }).collect();
        Self { band: self.band, paths }
    }
}

/// Centred element indices `(2m - M + 1) / 2`, `m = 0..M`.
pub fn antenna_offsets(antennas: usize) -> Vec<f64> {
    (0..antennas).map(|m| (2.0 * m as f64 - antennas as f64 + 1.0) / 2.0).collect()
}

/// Phase term `(r - r_m) / lambda` of the element at offset `sigma`.
pub fn near_field_phase(
    r: f64,
    sine_angle: f64,
    sigma: f64,
    spacing: f64,
    wavelength: f64,
    law: ElementDistance,
) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Geometry(format!("source range {r} m must be positive")));
    }
    let sd = sigma * spacing;
    // r^2 - r_m^2, kept separate so that r - r_m stays accurate at long range
    let excess = match law {
        ElementDistance::LawOfCosines => 2.0 * r * sine_angle * sd - sd * sd,
        ElementDistance::Literal => 2.0 * r * sine_angle * sd + sd * sd,
    };
    let arg = r * r - excess;
    if !(arg > 0.0) {
        return Err(Error::Geometry(format!(
            "element at offset {sigma} has no valid distance to a source at r = {r} m, sine-angle {sine_angle}"
        )));
    }
    Ok(excess / (r + arg.sqrt()) / wavelength)
}

fn frequency_factor(f: f64, cfg: &ArrayConfig, scaling: FrequencyScaling) -> f64 {
    match scaling {
        FrequencyScaling::BasebandOffset => 1.0 + (f - cfg.carrier_hz) / cfg.carrier_hz,
        FrequencyScaling::Literal => 1.0 + f / cfg.carrier_hz,
    }
}

fn check_in_band(f: f64, cfg: &ArrayConfig) -> Result<()> {
    let half = cfg.bandwidth_hz / 2.0;
    let slack = 1e-9 * cfg.carrier_hz;
    if f < cfg.carrier_hz - half - slack || f > cfg.carrier_hz + half + slack {
        return Err(config_err(format!(
            "frequency {f} Hz lies outside the band {} +/- {half} Hz",
            cfg.carrier_hz
        )));
    }
    Ok(())
}

/// Near-field steering vector: element `m` is `exp(-j 2 pi g(f) phi_m)`.
pub fn near_steering_vector(
    sine_angle: f64,
    r: f64,
    f: f64,
    cfg: &ArrayConfig,
    model: &ChannelModel,
) -> Result<Vec<Complex64>> {
    check_in_band(f, cfg)?;
    let factor = frequency_factor(f, cfg, model.frequency_scaling);
    let lambda = cfg.wavelength();
    antenna_offsets(cfg.antennas)
        .into_iter()
        .map(|sigma| {
            let phi = near_field_phase(r, sine_angle, sigma, cfg.spacing_m, lambda, model.element_distance)?;
            Ok(Complex64::from_polar(1.0, -2.0 * PI * factor * phi))
        })
        .collect()
}

/// Planar-wave steering vector `exp(-j m (2 pi d / lambda) theta)`, `m = 0..M`.
pub fn far_steering_vector(sine_angle: f64, cfg: &ArrayConfig) -> Vec<Complex64> {
    let k = 2.0 * PI * cfg.spacing_m / cfg.wavelength() * sine_angle;
    (0..cfg.antennas).map(|m| Complex64::from_polar(1.0, -(m as f64) * k)).collect()
}

/// Centred uniform grid `f_c - W/2 + (k + 1/2) W/K`, `k = 0..K`.
pub fn subcarrier_frequencies(cfg: &ArrayConfig) -> Vec<f64> {
    let k_total = cfg.subcarriers as f64;
    (0..cfg.subcarriers)
        .map(|k| cfg.carrier_hz - cfg.bandwidth_hz / 2.0 + (k as f64 + 0.5) * cfg.bandwidth_hz / k_total)
        .collect()
}

fn delay_rotation(path: &Path, f: f64, cfg: &ArrayConfig, model: &ChannelModel) -> Complex64 {
    let f_delay = match model.delay_phase {
        DelayPhase::Subcarrier => f,
        DelayPhase::Carrier => cfg.carrier_hz,
    };
    Complex64::from_polar(1.0, -2.0 * PI * f_delay * path.delay_s)
}

fn expect_band(paths: &PathSet, band: Band) -> Result<()> {
    if paths.band() != band {
        return Err(config_err(format!("expected a {band:?} path set, got {:?}", paths.band())));
    }
    Ok(())
}

/// Uplink mmWave channel at frequency `f`: `sum_l beta_l exp(-j 2 pi f tau_l) b(theta_l, r_l, f)`.
pub fn mmwave_uplink_channel(paths: &PathSet, f: f64, cfg: &ArrayConfig, model: &ChannelModel) -> Result<Vec<Complex64>> {
    expect_band(paths, Band::Mmwave)?;
    let mut h = vec![Complex64::new(0.0, 0.0); cfg.antennas];
    for p in paths.paths() {
        let coeff = p.gain * delay_rotation(p, f, cfg, model);
        let b = near_steering_vector(p.sine_angle, p.distance_m, f, cfg, model)?;
        for (hm, bm) in h.iter_mut().zip(&b) {
            *hm += coeff * bm;
        }
    }
    Ok(h)
}

/// Downlink row channel on subcarrier `k` (0-based): the plain transpose of
/// the uplink channel at `f_k`, so the entries are identical.
pub fn mmwave_downlink_channel(paths: &PathSet, k: usize, cfg: &ArrayConfig, model: &ChannelModel) -> Result<Vec<Complex64>> {
    if k >= cfg.subcarriers {
        return Err(Error::Index(format!("subcarrier {k} out of range for K = {}", cfg.subcarriers)));
    }
    let f = subcarrier_frequencies(cfg)[k];
    mmwave_uplink_channel(paths, f, cfg, model)
}

/// Downlink channels on every subcarrier, indexed `[k][m]`.
pub fn mmwave_downlink_channels(paths: &PathSet, cfg: &ArrayConfig, model: &ChannelModel) -> Result<Vec<Vec<Complex64>>> {
    subcarrier_frequencies(cfg).into_iter().map(|f| mmwave_uplink_channel(paths, f, cfg, model)).collect()
}

/// Sub-6 GHz uplink channel on subcarrier `k` (0-based) with frequency-flat
/// planar steering vectors.
pub fn sub6_uplink_channel(paths: &PathSet, k: usize, cfg: &ArrayConfig, model: &ChannelModel) -> Result<Vec<Complex64>> {
    expect_band(paths, Band::Sub6)?;
    if k >= cfg.subcarriers {
        return Err(Error::Index(format!("subcarrier {k} out of range for K = {}", cfg.subcarriers)));
    }
    let f = subcarrier_frequencies(cfg)[k];
    let mut h = vec![Complex64::new(0.0, 0.0); cfg.antennas];
    for p in paths.paths() {
        let coeff = p.gain * delay_rotation(p, f, cfg, model);
        for (hm, am) in h.iter_mut().zip(far_steering_vector(p.sine_angle, cfg)) {
            *hm += coeff * am;
        }
    }
    Ok(h)
}

/// Normalized beamforming gain `|D h| / max |D h|`, where row `m` of the
/// unitary `D` is `a(theta_m)/sqrt(M)` with `theta_m = (2m - M + 1)/M`.
pub fn beam_pattern(h: &[Complex64]) -> Result<Vec<f64>> {
    let m_total = h.len();
    if m_total == 0 || h.iter().all(|v| v.norm_sqr() == 0.0) {
        return Err(Error::DegenerateInput("beam pattern of an all-zero channel".into()));
    }
    let norm = 1.0 / (m_total as f64).sqrt();
    let mags: Vec<f64> = (0..m_total)
        .map(|m| {
            let theta = (2.0 * m as f64 - m_total as f64 + 1.0) / m_total as f64;
            let acc: Complex64 = h
                .iter()
                .enumerate()
                .map(|(n, hn)| Complex64::from_polar(norm, -PI * n as f64 * theta) * hn)
                .sum();
            acc.norm()
        })
        .collect();
    let peak = mags.iter().copied().fold(0.0, f64::max);
    Ok(mags.into_iter().map(|g| g / peak).collect())
}

/// Largest per-element phase gap between `a` and `b` after removing their
/// best common phase (the argument of `sum a_m conj(b_m)`).
pub fn max_phase_deviation(a: &[Complex64], b: &[Complex64]) -> f64 {
    let common: Complex64 = a.iter().zip(b).map(|(x, y)| x * y.conj()).sum();
    let rot = Complex64::from_polar(1.0, -common.arg());
    a.iter().zip(b).map(|(x, y)| (x * y.conj() * rot).arg().abs()).fold(0.0, f64::max)
}
