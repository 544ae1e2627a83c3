//! Polar-domain near-field codebook: `M` sine-angles times `S` distance rings.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::wavefield::{near_steering_vector, ArrayConfig, ChannelModel};

/// Fraction of the Rayleigh distance used for the innermost ring by default.
pub const DEFAULT_MIN_RANGE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    pub rings: usize,
    /// Innermost ring radius in metres; `None` means 5% of the Rayleigh distance.
    #[serde(default)]
    pub min_range_m: Option<f64>,
}

impl CodebookConfig {
    pub fn new(rings: usize) -> Self {
        Self { rings, min_range_m: None }
    }

    pub fn min_range(&self, array: &ArrayConfig) -> f64 {
        self.min_range_m.unwrap_or(DEFAULT_MIN_RANGE_FRACTION * array.rayleigh_distance())
    }

    pub fn validate(&self, array: &ArrayConfig) -> Result<()> {
        if self.rings == 0 {
            return Err(config_err("codebook needs at least one distance ring"));
        }
        let r_min = self.min_range(array);
        let rayleigh = array.rayleigh_distance();
        if !(r_min > 0.0 && r_min < rayleigh) {
            return Err(config_err(format!(
                "codebook minimum range {r_min} m must lie in (0, {rayleigh}) (the Rayleigh distance)"
            )));
        }
        Ok(())
    }
}

/// `(2m - M + 1)/M` for `m = 0..M`.
pub fn sample_angles(angles: usize) -> Vec<f64> {
    (0..angles).map(|m| (2.0 * m as f64 - angles as f64 + 1.0) / angles as f64).collect()
}

/// Rings uniform in inverse distance: `r_s = r_min * S / (s + 1)`, farthest first.
pub fn sample_distances(rings: usize, min_range: f64) -> Vec<f64> {
    (0..rings).map(|s| min_range * rings as f64 / (s as f64 + 1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodewordIndex {
    pub angle: usize,
    pub ring: usize,
}

impl CodewordIndex {
    pub fn new(angle: usize, ring: usize, angles: usize, rings: usize) -> Result<Self> {
        if angle >= angles || ring >= rings {
            return Err(Error::Index(format!(
                "codeword (angle {angle}, ring {ring}) outside a {angles} x {rings} codebook"
            )));
        }
        Ok(Self { angle, ring })
    }

    pub fn flat(&self, angles: usize) -> usize {
        self.ring * angles + self.angle
    }

    pub fn from_flat(flat: usize, angles: usize, rings: usize) -> Result<Self> {
        if angles == 0 || flat >= angles * rings {
            return Err(Error::Index(format!("flat codeword index {flat} outside a {angles} x {rings} codebook")));
        }
        Ok(Self { angle: flat % angles, ring: flat / angles })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    array: ArrayConfig,
    config: CodebookConfig,
    angles: Vec<f64>,
    distances: Vec<f64>,
    /// Row `flat` holds the codeword for `CodewordIndex::from_flat(flat)`.
    codewords: Vec<Vec<Complex64>>,
}

/// Codewords are conjugated near-field steering vectors at the carrier, scaled
/// to unit norm, so `h . w` is a matched filter for a channel `h` on the grid.
pub fn build_codebook(array: &ArrayConfig, config: &CodebookConfig, model: &ChannelModel) -> Result<Codebook> {
    array.validate()?;
    config.validate(array)?;
    let m_total = array.antennas;
    let angles = sample_angles(m_total);
    let distances = sample_distances(config.rings, config.min_range(array));
    let norm = 1.0 / (m_total as f64).sqrt();
    let mut codewords = Vec::with_capacity(m_total * config.rings);
    for &r in &distances {
        for &psi in &angles {
            let b = near_steering_vector(psi, r, array.carrier_hz, array, model)?;
            codewords.push(b.into_iter().map(|v| v.conj() * norm).collect());
        }
    }
    Ok(Codebook { array: *array, config: *config, angles, distances, codewords })
}

impl Codebook {
    pub fn array(&self) -> &ArrayConfig {
        &self.array
    }

    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn angle_count(&self) -> usize {
        self.angles.len()
    }

    pub fn ring_count(&self) -> usize {
        self.distances.len()
    }

    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    pub fn codewords(&self) -> &[Vec<Complex64>] {
        &self.codewords
    }

    pub fn codeword(&self, index: CodewordIndex) -> Result<&[Complex64]> {
        let idx = CodewordIndex::new(index.angle, index.ring, self.angle_count(), self.ring_count())?;
        Ok(&self.codewords[idx.flat(self.angle_count())])
    }

    pub fn index(&self, angle: usize, ring: usize) -> Result<CodewordIndex> {
        CodewordIndex::new(angle, ring, self.angle_count(), self.ring_count())
    }

    pub fn from_flat(&self, flat: usize) -> Result<CodewordIndex> {
        CodewordIndex::from_flat(flat, self.angle_count(), self.ring_count())
    }

    /// Writes `<stem>.json` (configs and grids) and `<stem>.c128` (codewords as
    /// interleaved little-endian f64 re/im, rows in flat-index order).
    pub fn export(&self, stem: &Path) -> Result<()> {
        let manifest = CodebookManifest {
            array: self.array,
            config: self.config,
            angles: self.angles.clone(),
            distances_m: self.distances.clone(),
            codewords: self.len(),
            codeword_length: self.array.antennas,
        };
        let mut bytes = Vec::with_capacity(self.len() * self.array.antennas * 16);
        for v in self.codewords.iter().flatten() {
            bytes.extend_from_slice(&v.re.to_le_bytes());
            bytes.extend_from_slice(&v.im.to_le_bytes());
        }
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(stem.with_extension("c128"), bytes)?;
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookManifest {
    pub array: ArrayConfig,
    pub config: CodebookConfig,
    pub angles: Vec<f64>,
    pub distances_m: Vec<f64>,
    pub codewords: usize,
    pub codeword_length: usize,
}

/// Reads back the raw codeword file written by [`Codebook::export`].
pub fn read_exported_codewords(stem: &Path) -> Result<(CodebookManifest, Vec<Vec<Complex64>>)> {
    let manifest: CodebookManifest = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = fs::read(stem.with_extension("c128"))?;
    let expected = manifest.codewords * manifest.codeword_length * 16;
    if bytes.len() != expected {
        return Err(Error::Data(format!("codeword file holds {} bytes, manifest describes {expected}", bytes.len())));
    }
    let values: Vec<Complex64> = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            Complex64::new(re, im)
        })
        .collect();
    let rows = values.chunks(manifest.codeword_length.max(1)).map(<[Complex64]>::to_vec).collect();
    Ok((manifest, rows))
}
