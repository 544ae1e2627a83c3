//! Beam training by exhaustive search, hybrid analog/ZF precoding, and the
//! rate and accuracy metrics used to compare beam-selection schemes.

use std::io;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::polarbook::{Codebook, CodewordIndex};

/// Pilot slot length in seconds.
pub const DEFAULT_SLOT_S: f64 = 1e-4;
/// Session length in seconds.
pub const DEFAULT_SESSION_S: f64 = 0.2;
/// Condition number above which the equivalent channel counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;
const TIKHONOV: f64 = 1e-9;

/// `sum_k |h[k] . w|`.
pub fn beam_gain(channel: &[Vec<Complex64>], codeword: &[Complex64]) -> f64 {
    channel.iter().map(|hk| dot(hk, codeword).norm()).sum()
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Codeword maximizing [`beam_gain`]; ties go to the smallest flat index.
pub fn exhaustive_search(channel: &[Vec<Complex64>], codebook: &Codebook) -> Result<(CodewordIndex, f64)> {
    if codebook.is_empty() {
        return Err(config_err("exhaustive search over an empty codebook"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (flat, w) in codebook.codewords().iter().enumerate() {
        let g = beam_gain(channel, w);
        if g > best.1 {
            best = (flat, g);
        }
    }
    Ok((codebook.from_flat(best.0)?, best.1))
}

/// Per-user downlink channels indexed `[user][subcarrier][antenna]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserChannels {
    data: Vec<Vec<Vec<Complex64>>>,
}

impl UserChannels {
    pub fn new(data: Vec<Vec<Vec<Complex64>>>) -> Result<Self> {
        let users = data.len();
        if users == 0 {
            return Err(config_err("no users"));
        }
        let k = data[0].len();
        if k == 0 {
            return Err(config_err("no subcarriers"));
        }
        let m = data[0][0].len();
        for (u, per_user) in data.iter().enumerate() {
            if per_user.len() != k || per_user.iter().any(|h| h.len() != m) {
                return Err(config_err(format!("user {u} channels do not match {k} subcarriers x {m} antennas")));
            }
        }
        Ok(Self { data })
    }

    pub fn users(&self) -> usize {
        self.data.len()
    }

    pub fn subcarriers(&self) -> usize {
        self.data[0].len()
    }

    pub fn antennas(&self) -> usize {
        self.data[0][0].len()
    }

    pub fn user(&self, u: usize) -> &[Vec<Complex64>] {
        &self.data[u]
    }

    pub fn get(&self, u: usize, k: usize) -> &[Complex64] {
        &self.data[u][k]
    }
}

/// Analog precoder: one codeword column per user (duplicates allowed).
pub fn assemble_analog(selection: &[CodewordIndex], codebook: &Codebook) -> Result<Vec<Vec<Complex64>>> {
    selection.iter().map(|&idx| codebook.codeword(idx).map(<[Complex64]>::to_vec)).collect()
}

/// `H_eq[u][i] = h_u[k] . analog_i`.
pub fn equivalent_channel(channels: &UserChannels, k: usize, analog: &[Vec<Complex64>]) -> DMatrix<Complex64> {
    DMatrix::from_fn(channels.users(), analog.len(), |u, i| dot(channels.get(u, k), &analog[i]))
}

fn condition_number(h: &DMatrix<Complex64>) -> f64 {
    let sv = h.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Zero-forcing digital precoder for one subcarrier. Each column `f_u` is
/// scaled so that `||analog . f_u|| = 1`. Returns the matrix and whether the
/// regularized fallback was needed.
pub fn zf_digital(h_eq: &DMatrix<Complex64>, analog: &[Vec<Complex64>]) -> Result<(DMatrix<Complex64>, bool)> {
    let users = h_eq.nrows();
    if h_eq.ncols() != users || analog.len() != users {
        return Err(config_err(format!(
            "equivalent channel is {}x{} with {} analog columns; need a square {users}x{users} system",
            h_eq.nrows(),
            h_eq.ncols(),
            analog.len()
        )));
    }
    let direct = if condition_number(h_eq) <= SINGULAR_CONDITION { h_eq.clone().try_inverse() } else { None };
    let (mut f, regularized) = match direct {
        Some(inv) => (inv, false),
        None => {
            let hh = h_eq * h_eq.adjoint();
            let load = TIKHONOV * hh.trace().re.max(f64::MIN_POSITIVE) / users as f64;
            let reg = hh + DMatrix::from_diagonal_element(users, users, Complex64::new(load, 0.0));
            let inv = reg
                .try_inverse()
                .ok_or_else(|| Error::DegenerateInput("regularized equivalent channel is not invertible".into()))?;
            (h_eq.adjoint() * inv, true)
        }
    };
    for u in 0..users {
        let col: Vec<Complex64> = f.column(u).iter().copied().collect();
        let norm = analog_norm(analog, &col);
        if norm > 0.0 && norm.is_finite() {
            f.column_mut(u).iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok((f, regularized))
}

fn analog_norm(analog: &[Vec<Complex64>], coeffs: &[Complex64]) -> f64 {
    let m = analog.first().map_or(0, Vec::len);
    (0..m)
        .map(|a| analog.iter().zip(coeffs).map(|(col, c)| col[a] * c).sum::<Complex64>().norm_sqr())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridPrecoder {
    pub analog: Vec<Vec<Complex64>>,
    /// One `U x U` matrix per subcarrier; column `u` serves user `u`.
    pub digital: Vec<DMatrix<Complex64>>,
    /// True if any subcarrier needed the regularized inverse.
    pub regularized: bool,
}

impl HybridPrecoder {
    pub fn build(channels: &UserChannels, selection: &[CodewordIndex], codebook: &Codebook) -> Result<Self> {
        if selection.len() != channels.users() {
            return Err(config_err(format!("{} selections for {} users", selection.len(), channels.users())));
        }
        if codebook.array().antennas != channels.antennas() {
            return Err(config_err(format!(
                "codebook has {} antennas, channels have {}",
                codebook.array().antennas,
                channels.antennas()
            )));
        }
        let analog = assemble_analog(selection, codebook)?;
        let mut digital = Vec::with_capacity(channels.subcarriers());
        let mut regularized = false;
        for k in 0..channels.subcarriers() {
            let (f, flag) = zf_digital(&equivalent_channel(channels, k, &analog), &analog)?;
            regularized |= flag;
            digital.push(f);
        }
        Ok(Self { analog, digital, regularized })
    }

    /// `h . analog . f_i` for the given row channel and served user `i`.
    pub fn response(&self, h: &[Complex64], k: usize, i: usize) -> Complex64 {
        self.analog.iter().enumerate().map(|(c, col)| dot(h, col) * self.digital[k][(c, i)]).sum()
    }
}

/// Which channel multiplies the other users' precoders in the interference term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterferenceModel {
    /// `h_u F_RF f_i`: what user `u` actually receives from stream `i`.
    #[default]
    Standard,
    /// `h_i F_RF f_i`, as printed.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    /// Downlink power per subcarrier in watts, shared equally among users.
    pub downlink_power_w: f64,
    pub noise_w: f64,
    pub interference: InterferenceModel,
}

/// Spectral efficiency of user `u` on subcarrier `k` in bit/s/Hz.
pub fn user_rate(channels: &UserChannels, precoder: &HybridPrecoder, budget: &LinkBudget, u: usize, k: usize) -> f64 {
    let users = channels.users();
    let share = budget.downlink_power_w / users as f64;
    let signal = share * precoder.response(channels.get(u, k), k, u).norm_sqr();
    let interference: f64 = (0..users)
        .filter(|&i| i != u)
        .map(|i| {
            let h = match budget.interference {
                InterferenceModel::Standard => channels.get(u, k),
                InterferenceModel::Literal => channels.get(i, k),
            };
            share * precoder.response(h, k, i).norm_sqr()
        })
        .sum();
    (1.0 + signal / (interference + budget.noise_w)).log2()
}

/// Rates indexed `[user][subcarrier]`.
pub fn all_rates(channels: &UserChannels, precoder: &HybridPrecoder, budget: &LinkBudget) -> Vec<Vec<f64>> {
    (0..channels.users())
        .map(|u| (0..channels.subcarriers()).map(|k| user_rate(channels, precoder, budget, u, k)).collect())
        .collect()
}

/// Sum over users of the per-subcarrier average rate.
pub fn sum_rate_avg(rates: &[Vec<f64>]) -> f64 {
    let k = rates.first().map_or(0, Vec::len);
    if k == 0 {
        return 0.0;
    }
    rates.iter().flatten().sum::<f64>() / k as f64
}

/// `(1 - T_p / T_t) R_sum` with `T_p = slots * slot_s`.
pub fn effective_rate(sum_rate: f64, pilot_slots: usize, slot_s: f64, session_s: f64) -> Result<f64> {
    let pilot_s = pilot_slots as f64 * slot_s;
    if pilot_s > session_s {
        return Err(Error::OverheadExceedsSession { pilot_s, session_s });
    }
    Ok((1.0 - pilot_s / session_s) * sum_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub angle: f64,
    pub distance: f64,
}

/// Fractions of users whose predicted codeword, angle and ring are correct.
pub fn estimation_accuracy(predicted: &[CodewordIndex], truth: &[CodewordIndex]) -> Result<Accuracy> {
    if predicted.len() != truth.len() {
        return Err(config_err(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Ok(Accuracy::default());
    }
    let n = truth.len() as f64;
    let count = |f: fn(&CodewordIndex, &CodewordIndex) -> bool| predicted.iter().zip(truth).filter(|(p, t)| f(p, t)).count() as f64 / n;
    Ok(Accuracy {
        overall: count(|p, t| p == t),
        angle: count(|p, t| p.angle == t.angle),
        distance: count(|p, t| p.ring == t.ring),
    })
}

/// One evaluation row: a scheme at a given power pair, averaged over scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub scheme: String,
    #[serde(rename = "uplink-power-dBm")]
    pub uplink_power_dbm: f64,
    #[serde(rename = "downlink-power-dBm")]
    pub downlink_power_dbm: f64,
    #[serde(rename = "R_sum")]
    pub sum_rate: f64,
    #[serde(rename = "R_eff")]
    pub effective_rate: f64,
    #[serde(rename = "A_cc")]
    pub accuracy: f64,
    #[serde(rename = "A_cc_angle")]
    pub accuracy_angle: f64,
    #[serde(rename = "A_cc_dist")]
    pub accuracy_distance: f64,
}

pub const RATE_COLUMNS: [&str; 8] =
    ["scheme", "uplink-power-dBm", "downlink-power-dBm", "R_sum", "R_eff", "A_cc", "A_cc_angle", "A_cc_dist"];

pub fn write_rate_csv<W: io::Write>(rows: &[RateReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rate_csv<R: io::Read>(input: R) -> Result<Vec<RateReport>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(|e| Error::Data(e.to_string()))?.iter().map(str::to_owned).collect();
    if header != RATE_COLUMNS {
        return Err(Error::Data(format!("rate CSV columns {header:?} do not match {RATE_COLUMNS:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Data(e.to_string()))).collect()
}

/// dBm to watts.
pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarbook::{build_codebook, CodebookConfig};
    use crate::wavefield::{near_steering_vector, ArrayConfig, ChannelModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    fn codebook(m: usize, s: usize) -> Codebook {
        let arr = ArrayConfig::half_wavelength(m, 30e9, 10e6, 4).unwrap();
        build_codebook(&arr, &CodebookConfig::new(s), &ChannelModel::default()).unwrap()
    }

    #[test]
    fn beam_gain_examples() {
        let w = vec![c(0.5, 0.0); 4];
        assert_eq!(beam_gain(&[vec![c(0.0, 0.0); 4]], &w), 0.0);
        // h = 2 sqrt(M) conj(w) gives |h . w| = 2 sqrt(M) ||w||^2
        let h: Vec<Complex64> = w.iter().map(|v| v.conj() * 2.0 * 2.0).collect();
        assert!((beam_gain(&[h], &w) - 4.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chan = vec![random_vec(&mut rng, 5), random_vec(&mut rng, 5)];
        let w = random_vec(&mut rng, 5);
        let mut want = 0.0;
        for hk in &chan {
            let (mut re, mut im) = (0.0, 0.0);
            for (h, x) in hk.iter().zip(&w) {
                re += h.re * x.re - h.im * x.im;
                im += h.re * x.im + h.im * x.re;
            }
            want += (re * re + im * im).sqrt();
        }
        assert!((beam_gain(&chan, &w) - want).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_search_finds_grid_points() {
        let cb = codebook(32, 3);
        let arr = *cb.array();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let want = cb.index(rng.gen_range(0..32), rng.gen_range(0..3)).unwrap();
            let b = near_steering_vector(cb.angles()[want.angle], cb.distances()[want.ring], arr.carrier_hz, &arr, &ChannelModel::default()).unwrap();
            let (got, _) = exhaustive_search(&[b], &cb).unwrap();
            assert_eq!(got, want);
        }
        let single = codebook(4, 1);
        let (idx, _) = exhaustive_search(&[vec![c(0.0, 0.0); 4]], &single).unwrap();
        assert_eq!(idx.flat(4), 0);
    }

    #[test]
    fn zf_identity_and_single_user() {
        let analog = vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]];
        let (f, reg) = zf_digital(&DMatrix::identity(2, 2), &analog).unwrap();
        assert!(!reg);
        assert_eq!(f, DMatrix::identity(2, 2));

        let analog = vec![vec![c(0.5, 0.0); 4]];
        let (f, _) = zf_digital(&DMatrix::from_element(1, 1, c(0.0, 2.0)), &analog).unwrap();
        // inverse is -j/2, rescaled to unit analog norm keeps only the phase
        assert!((f[(0, 0)] - c(0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn zf_nulls_interference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let analog: Vec<Vec<Complex64>> = (0..3).map(|_| random_vec(&mut rng, 6)).collect();
        let h: Vec<Vec<Complex64>> = (0..3).map(|_| random_vec(&mut rng, 6)).collect();
        let chans = UserChannels::new(h.iter().map(|v| vec![v.clone()]).collect()).unwrap();
        let (f, reg) = zf_digital(&equivalent_channel(&chans, 0, &analog), &analog).unwrap();
        assert!(!reg);
        let pre = HybridPrecoder { analog: analog.clone(), digital: vec![f.clone()], regularized: false };
        for u in 0..3 {
            let col: Vec<Complex64> = f.column(u).iter().copied().collect();
            assert!((analog_norm(&analog, &col) - 1.0).abs() < 1e-9);
            for i in 0..3 {
                if i != u {
                    assert!(pre.response(&h[u], 0, i).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zf_singular_falls_back() {
        let analog = vec![vec![c(0.5, 0.0); 4], vec![c(0.5, 0.0); 4]];
        let h = DMatrix::from_element(2, 2, c(1.0, 1.0));
        let (f, reg) = zf_digital(&h, &analog).unwrap();
        assert!(reg);
        assert!(f.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    }

    #[test]
    fn rate_examples() {
        let analog = vec![vec![c(0.5, 0.0); 4]];
        let h = vec![c(0.5, 0.0); 4];
        let chans = UserChannels::new(vec![vec![h.clone()]]).unwrap();
        let (f, _) = zf_digital(&equivalent_channel(&chans, 0, &analog), &analog).unwrap();
        let pre = HybridPrecoder { analog, digital: vec![f], regularized: false };
        let gain = pre.response(&h, 0, 0).norm_sqr();
        let budget = LinkBudget { downlink_power_w: 2.0, noise_w: 2.0 * gain, interference: InterferenceModel::Standard };
        assert!((user_rate(&chans, &pre, &budget, 0, 0) - 1.0).abs() < 1e-12);
        let off = LinkBudget { downlink_power_w: 0.0, ..budget };
        assert_eq!(user_rate(&chans, &pre, &off, 0, 0), 0.0);
    }

    #[test]
    fn two_user_rate_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let analog: Vec<Vec<Complex64>> = (0..2).map(|_| random_vec(&mut rng, 4)).collect();
        let h: Vec<Vec<Complex64>> = (0..2).map(|_| random_vec(&mut rng, 4)).collect();
        let digital = DMatrix::from_fn(2, 2, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let chans = UserChannels::new(h.iter().map(|v| vec![v.clone()]).collect()).unwrap();
        let pre = HybridPrecoder { analog: analog.clone(), digital: vec![digital.clone()], regularized: false };
        let (p, n) = (3.0, 0.7);
        for model in [InterferenceModel::Standard, InterferenceModel::Literal] {
            let budget = LinkBudget { downlink_power_w: p, noise_w: n, interference: model };
            for u in 0..2 {
                let i = 1 - u;
                let eff = |hv: &[Complex64], col: usize| -> Complex64 {
                    let mut acc = c(0.0, 0.0);
                    for a in 0..4 {
                        let mut w = c(0.0, 0.0);
                        for r in 0..2 {
                            w += analog[r][a] * digital[(r, col)];
                        }
                        acc += hv[a] * w;
                    }
                    acc
                };
                let sig = p / 2.0 * eff(&h[u], u).norm_sqr();
                let int_h = if model == InterferenceModel::Standard { &h[u] } else { &h[i] };
                let int = p / 2.0 * eff(int_h, i).norm_sqr();
                let want = (1.0 + sig / (int + n)).log2();
                assert!((user_rate(&chans, &pre, &budget, u, 0) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rate_aggregates() {
        assert_eq!(sum_rate_avg(&[vec![0.0, 0.0], vec![0.0, 0.0]]), 0.0);
        assert_eq!(sum_rate_avg(&[vec![2.5]]), 2.5);
        assert!((sum_rate_avg(&[vec![1.0, 3.0], vec![2.0, 4.0]]) - 5.0).abs() < 1e-15);
        assert_eq!(effective_rate(7.0, 0, DEFAULT_SLOT_S, DEFAULT_SESSION_S).unwrap(), 7.0);
        assert!((effective_rate(8.0, 1000, DEFAULT_SLOT_S, DEFAULT_SESSION_S).unwrap() - 4.0).abs() < 1e-12);
        assert!((effective_rate(1.0, 1280, DEFAULT_SLOT_S, DEFAULT_SESSION_S).unwrap() - 0.36).abs() < 1e-12);
        assert!(matches!(effective_rate(1.0, 2001, DEFAULT_SLOT_S, DEFAULT_SESSION_S), Err(Error::OverheadExceedsSession { .. })));
    }

    #[test]
    fn accuracy_examples() {
        let idx = |a, r| CodewordIndex { angle: a, ring: r };
        let truth = [idx(0, 0), idx(1, 1), idx(2, 0), idx(3, 1)];
        assert_eq!(estimation_accuracy(&truth, &truth).unwrap().overall, 1.0);
        let wrong = [idx(1, 1), idx(0, 0), idx(3, 1), idx(2, 0)];
        assert_eq!(estimation_accuracy(&wrong, &truth).unwrap().overall, 0.0);
        let most = [idx(0, 0), idx(1, 1), idx(2, 0), idx(3, 0)];
        let acc = estimation_accuracy(&most, &truth).unwrap();
        assert_eq!((acc.overall, acc.angle, acc.distance), (0.75, 1.0, 0.75));
        assert!(estimation_accuracy(&most[..2], &truth).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let row = RateReport {
            scheme: "proposed".into(),
            uplink_power_dbm: -10.0,
            downlink_power_dbm: 2.0,
            sum_rate: 12.5,
            effective_rate: 12.5,
            accuracy: 0.4,
            accuracy_angle: 0.5,
            accuracy_distance: 0.8,
        };
        let mut buf = Vec::new();
        write_rate_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), RATE_COLUMNS.join(","));
        assert_eq!(read_rate_csv(buf.as_slice()).unwrap(), vec![row]);
        assert!(read_rate_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_w(30.0) - 1.0).abs() < 1e-15);
        assert!((dbm_to_w(0.0) - 1e-3).abs() < 1e-18);
    }
}
