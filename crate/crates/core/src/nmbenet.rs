//! The dual beam-estimation network (an angle net and a distance net of the
//! same structure), the FCNN and CNN baselines, and their training and
//! evaluation loops.
//!
//! Every network reads a user's pilot image `[K, 2, M]`. The dual network
//! runs a convolutional trunk per user, then graph layers in which each user
//! sees the mean of the other users' features in its scene, then a small
//! classification head. The baselines classify every user independently over
//! the full joint codebook.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::airlink::{
    all_rates, dbm_to_w, effective_rate, estimation_accuracy, sum_rate_avg, Accuracy, HybridPrecoder, InterferenceModel,
    LinkBudget, RateReport, DEFAULT_SESSION_S, DEFAULT_SLOT_S,
};
use crate::datasmith::SampleRecord;
use crate::error::{config_err, Error, Result};
use crate::gradcore::{
    load_checkpoint, save_checkpoint, softmax, Adam, AdamConfig, BnMode, BnStats, ParamId, ParamStore, Padding, Tape,
    Tensor, Var, BN_MOMENTUM,
};
use crate::polarbook::{Codebook, CodewordIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Convolutional trunk, graph layers and head.
    Nmbe,
    /// Flatten and fully connected layers.
    Fcnn,
    /// Convolutional trunk and fully connected layers.
    Cnn,
}

/// Layer widths shared by all model kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    pub conv: [usize; 2],
    pub kernel_width: usize,
    pub graph: usize,
    pub graph_layers: usize,
    pub head: usize,
    pub fcnn: [usize; 2],
    pub cnn_hidden: usize,
}

impl Widths {
    pub fn paper() -> Self {
        Self { conv: [64, 256], kernel_width: 3, graph: 512, graph_layers: 2, head: 128, fcnn: [1024, 512], cnn_hidden: 512 }
    }

    pub fn desk() -> Self {
        Self { conv: [16, 32], kernel_width: 3, graph: 128, graph_layers: 2, head: 64, fcnn: [256, 128], cnn_hidden: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    /// Pilot image shape `[subcarriers, 2, antennas]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub widths: Widths,
}

impl Architecture {
    pub fn new(kind: ModelKind, input: [usize; 3], classes: usize, widths: Widths) -> Result<Self> {
        let arch = Self { kind, input, classes, widths };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.widths;
        if self.input.iter().any(|&d| d == 0) || self.classes == 0 {
            return Err(config_err(format!("architecture input {:?} and classes {} must be positive", self.input, self.classes)));
        }
        let zero = match self.kind {
            ModelKind::Nmbe => w.conv.contains(&0) || w.kernel_width == 0 || w.graph == 0 || w.head == 0,
            ModelKind::Fcnn => w.fcnn.contains(&0),
            ModelKind::Cnn => w.conv.contains(&0) || w.kernel_width == 0 || w.cnn_hidden == 0,
        };
        if zero {
            return Err(config_err(format!("architecture widths {w:?} must be positive")));
        }
        Ok(())
    }

    /// Length of the per-user feature vector entering the dense layers.
    pub fn flatten_len(&self) -> usize {
        let [k, two, m] = self.input;
        match self.kind {
            ModelKind::Fcnn => k * two * m,
            _ => self.widths.conv[1] * two * m,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

/// Batch statistics of one BatchNorm layer from a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormUpdate {
    norm: Norm,
    batch: BnStats,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    convs: Vec<(Affine, Norm)>,
    hidden: Vec<(Affine, Norm)>,
    graph_layers: usize,
    output: Affine,
}

/// Trainable weights plus BatchNorm running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    store: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }

    fn affine(&mut self, name: &str, weight_shape: &[usize], fan_in: usize, gain: f64) -> Affine {
        let w = self.uniform(weight_shape, gain * (6.0 / fan_in as f64).sqrt());
        let weight = self.store.insert(format!("{name}.weight"), w, true);
        let bias = self.store.insert(format!("{name}.bias"), Tensor::zeros(&[weight_shape[0]]), true);
        Affine { weight, bias }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            gamma: self.store.insert(format!("{name}.bn.gamma"), Tensor::filled(&[channels], 1.0), true),
            beta: self.store.insert(format!("{name}.bn.beta"), Tensor::zeros(&[channels]), true),
            mean: self.store.insert(format!("{name}.bn.running_mean"), Tensor::zeros(&[channels]), false),
            var: self.store.insert(format!("{name}.bn.running_var"), Tensor::filled(&[channels], 1.0), false),
        }
    }
}

/// Scale applied to the output layer's initial weights so that the initial
/// class distribution is close to uniform.
const OUTPUT_INIT_GAIN: f64 = 0.1;

impl Model {
    /// Fresh parameters: weights uniform in `+-sqrt(6 / fan_in)`, zero biases,
    /// identity BatchNorm.
    pub fn new(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let w = arch.widths;
        let [k, _, _] = arch.input;
        let mut b = Builder { store: ParamStore::new(), rng };
        let mut convs = Vec::new();
        if arch.kind != ModelKind::Fcnn {
            let mut ci = k;
            for (i, &co) in w.conv.iter().enumerate() {
                let name = format!("conv{i}");
                let aff = b.affine(&name, &[co, ci, 1, w.kernel_width], ci * w.kernel_width, 1.0);
                convs.push((aff, b.norm(&name, co)));
                ci = co;
            }
        }
        let widths: Vec<usize> = match arch.kind {
            ModelKind::Nmbe => {
                let mut v = vec![w.graph; w.graph_layers];
                v.push(w.head);
                v
            }
            ModelKind::Fcnn => w.fcnn.to_vec(),
            ModelKind::Cnn => vec![w.cnn_hidden],
        };
        let graph_layers = if arch.kind == ModelKind::Nmbe { w.graph_layers } else { 0 };
        let mut hidden = Vec::new();
        let mut fi = arch.flatten_len();
        for (i, &fo) in widths.iter().enumerate() {
            let name = if i < graph_layers { format!("graph{i}") } else { format!("dense{}", i - graph_layers) };
            let fan_in = if i < graph_layers { 2 * fi } else { fi };
            let aff = b.affine(&name, &[fo, fan_in], fan_in, 1.0);
            hidden.push((aff, b.norm(&name, fo)));
            fi = fo;
        }
        let output = b.affine("output", &[arch.classes, fi], fi, OUTPUT_INIT_GAIN);
        Ok(Self { arch, store: b.store, layout: Layout { convs, hidden, graph_layers, output } })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn norm_stats(&self, n: &Norm) -> BnStats {
        BnStats { mean: self.store.get(n.mean).data().to_vec(), var: self.store.get(n.var).data().to_vec() }
    }

    fn bn(&self, tape: &mut Tape, vars: &[Var], x: Var, n: &Norm, train: bool, seen: &mut Vec<NormUpdate>) -> Result<Var> {
        let (gamma, beta) = (vars[n.gamma.index()], vars[n.beta.index()]);
        if train {
            let (y, stats) = tape.batchnorm(x, gamma, beta, BnMode::Train)?;
            seen.push(NormUpdate { norm: *n, batch: stats.expect("train mode reports statistics") });
            Ok(y)
        } else {
            let stats = self.norm_stats(n);
            Ok(tape.batchnorm(x, gamma, beta, BnMode::Infer(&stats))?.0)
        }
    }

    /// Per-user feature vectors after the convolutional trunk, `[rows, flatten_len]`.
    pub fn extract(&self, tape: &mut Tape, vars: &[Var], input: Var, train: bool, seen: &mut Vec<NormUpdate>) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return Err(config_err(format!(
                "network input must be [users, {}, {}, {}], got {shape:?}",
                self.arch.input[0], self.arch.input[1], self.arch.input[2]
            )));
        }
        let rows = shape[0];
        let mut x = input;
        for (aff, n) in &self.layout.convs {
            x = tape.conv2d(x, vars[aff.weight.index()], vars[aff.bias.index()], Padding::Same)?;
            x = tape.relu(x);
            x = self.bn(tape, vars, x, n, train, seen)?;
        }
        tape.reshape(x, &[rows, self.arch.flatten_len()])
    }

    /// Logits `[rows, classes]` for `rows = scenes * group` users, where each
    /// consecutive block of `group` rows is one scene.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var, group: usize, train: bool) -> Result<(Var, Vec<NormUpdate>)> {
        let mut seen = Vec::new();
        let mut x = self.extract(tape, vars, input, train, &mut seen)?;
        for (i, (aff, n)) in self.layout.hidden.iter().enumerate() {
            if i < self.layout.graph_layers {
                let others = tape.neighbor_mean(x, group)?;
                x = tape.concat_features(x, others)?;
            }
            x = tape.dense(x, vars[aff.weight.index()], vars[aff.bias.index()])?;
            x = tape.relu(x);
            x = self.bn(tape, vars, x, n, train, &mut seen)?;
        }
        let out = self.layout.output;
        let logits = tape.dense(x, vars[out.weight.index()], vars[out.bias.index()])?;
        Ok((logits, seen))
    }

    fn fold_running_stats(&mut self, seen: &[NormUpdate]) {
        for NormUpdate { norm: n, batch } in seen {
            let mut stats = self.norm_stats(n);
            stats.update(batch, BN_MOMENTUM);
            self.store.get_mut(n.mean).data_mut().copy_from_slice(&stats.mean);
            self.store.get_mut(n.var).data_mut().copy_from_slice(&stats.var);
        }
    }

    /// Inference-mode class probabilities for users of equally sized scenes,
    /// indexed `[scene * group + user][class]`.
    pub fn predict(&self, images: &Tensor, group: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let input = tape.leaf(images.clone());
        let (logits, _) = self.forward(&mut tape, &vars, input, group, false)?;
        let z = tape.value(logits);
        Ok(z.data().chunks(self.arch.classes).map(softmax).collect())
    }

    /// Saves `<stem>.json` / `<stem>.f64` with the architecture and its hash.
    pub fn save(&self, stem: &Path, optimizer: Option<&Adam>) -> Result<()> {
        let meta = serde_json::json!({ "architecture": self.arch, "architecture_hash": self.arch.hash() });
        save_checkpoint(stem, &self.store, optimizer.map(Adam::scalars), meta)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (store, manifest) = load_checkpoint(stem)?;
        let arch: Architecture = serde_json::from_value(manifest.metadata["architecture"].clone())
            .map_err(|e| Error::Data(format!("checkpoint {}: architecture: {e}", stem.display())))?;
        let recorded = manifest.metadata["architecture_hash"].as_str().unwrap_or_default();
        if recorded != arch.hash() {
            return Err(Error::Data(format!("checkpoint {}: architecture hash does not match its architecture", stem.display())));
        }
        let mut model = Self::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(&str, &[usize])> = model.store.iter().map(|(_, p)| (p.name.as_str(), p.value.shape())).collect();
        let found: Vec<(&str, &[usize])> = store.iter().map(|(_, p)| (p.name.as_str(), p.value.shape())).collect();
        if expected != found {
            return Err(Error::Data(format!("checkpoint {}: tensors do not match the recorded architecture", stem.display())));
        }
        model.store = store;
        Ok(model)
    }

    /// Loads a checkpoint and refuses it unless it was built for `arch`.
    pub fn load_expecting(stem: &Path, arch: &Architecture) -> Result<Self> {
        let model = Self::load(stem)?;
        if model.arch.hash() != arch.hash() {
            return Err(Error::Data(format!(
                "checkpoint {} has architecture hash {}, expected {}",
                stem.display(),
                model.arch.hash(),
                arch.hash()
            )));
        }
        Ok(model)
    }
}

/// `p[s * M + m] = p_angle[m] * p_distance[s]`, the joint distribution in
/// flat codeword order.
pub fn fuse(angle: &[f64], distance: &[f64]) -> Vec<f64> {
    distance.iter().flat_map(|&d| angle.iter().map(move |&a| a * d)).collect()
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Most probable codeword of a fused distribution over `angles * rings` entries.
pub fn select(fused: &[f64], angles: usize) -> CodewordIndex {
    let flat = argmax(fused);
    CodewordIndex { angle: flat % angles, ring: flat / angles }
}

/// Stacks the pilot images of `records` into `[scenes * users, K, 2, M]`.
pub fn image_batch(records: &[&SampleRecord]) -> Result<Tensor> {
    let first = records.first().ok_or_else(|| Error::Training("empty batch".into()))?;
    let users = first.users();
    let img = &first.images[0];
    let per_image = img.subcarriers * 2 * img.antennas;
    let mut data = Vec::with_capacity(records.len() * users * per_image);
    for rec in records {
        if rec.users() != users {
            return Err(config_err(format!("scene {} has {} users, batch expects {users}", rec.index, rec.users())));
        }
        for im in &rec.images {
            data.extend(im.data.iter().map(|&v| f64::from(v)));
        }
    }
    Tensor::new(vec![records.len() * users, img.subcarriers, 2, img.antennas], data)
}

/// What a network is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Angle,
    Distance,
    /// Flat codeword index over `angles` angle bins.
    Joint { angles: usize },
}

impl Target {
    fn class(&self, idx: &CodewordIndex) -> usize {
        match *self {
            Target::Angle => idx.angle,
            Target::Distance => idx.ring,
            Target::Joint { angles } => idx.flat(angles),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Scenes per mini-batch.
    pub batch_scenes: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before the learning rate is cut.
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub lr_decay: f64,
    /// Set by the caller, not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl TrainingConfig {
    pub fn paper(seed: u64) -> Self {
        Self { epochs: 50, batch_scenes: 800, learning_rate: 0.006, plateau_patience: 2, plateau_min_delta: 1e-4, lr_decay: 0.5, seed }
    }

    pub fn desk(seed: u64) -> Self {
        Self { batch_scenes: 64, ..Self::paper(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_scenes == 0 {
            return Err(config_err("training epochs and batch_scenes must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(config_err("learning_rate must be positive and lr_decay in (0, 1]"));
        }
        Ok(())
    }
}

/// One row of the training history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    #[serde(rename = "trainLoss_a")]
    pub train_loss_a: f64,
    /// Absent for single-network baselines.
    #[serde(rename = "trainLoss_d")]
    pub train_loss_d: Option<f64>,
    #[serde(rename = "valAcc_a")]
    pub val_acc_a: f64,
    #[serde(rename = "valAcc_d")]
    pub val_acc_d: f64,
    #[serde(rename = "valAcc_overall")]
    pub val_acc_overall: f64,
    pub lr: f64,
}

pub fn write_history<W: io::Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn history_csv(rows: &[HistoryRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_history(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

/// Predictions of a trained scheme for every user of `records`, scene-major.
pub enum Predictor<'a> {
    /// The exhaustive-search labels themselves.
    Oracle,
    Dual { angle: &'a Model, distance: &'a Model },
    Joint(&'a Model),
}

const EVAL_BATCH: usize = 256;

impl Predictor<'_> {
    pub fn predict(&self, records: &[SampleRecord], angles: usize) -> Result<Vec<Vec<CodewordIndex>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_BATCH) {
            let users = chunk[0].users();
            match self {
                Predictor::Oracle => out.extend(chunk.iter().map(|r| r.labels.clone())),
                Predictor::Dual { angle, distance } => {
                    let refs: Vec<&SampleRecord> = chunk.iter().collect();
                    let batch = image_batch(&refs)?;
                    let pa = angle.predict(&batch, users)?;
                    let pd = distance.predict(&batch, users)?;
                    let picks: Vec<CodewordIndex> = pa.iter().zip(&pd).map(|(a, d)| select(&fuse(a, d), angles)).collect();
                    out.extend(picks.chunks(users).map(<[CodewordIndex]>::to_vec));
                }
                Predictor::Joint(model) => {
                    let refs: Vec<&SampleRecord> = chunk.iter().collect();
                    let probs = model.predict(&image_batch(&refs)?, users)?;
                    let picks: Vec<CodewordIndex> = probs.iter().map(|p| select(p, angles)).collect();
                    out.extend(picks.chunks(users).map(<[CodewordIndex]>::to_vec));
                }
            }
        }
        Ok(out)
    }
}

fn flatten_labels(records: &[SampleRecord]) -> Vec<CodewordIndex> {
    records.iter().flat_map(|r| r.labels.iter().copied()).collect()
}

struct Head<'a> {
    model: &'a mut Model,
    adam: Adam,
    target: Target,
}

fn train_heads(train: &[SampleRecord], validation: &[SampleRecord], heads: &mut [Head<'_>], cfg: &TrainingConfig, angles: usize) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Training("training and validation splits must both be non-empty".into()));
    }
    let users = train[0].users();
    let truth = flatten_labels(validation);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut losses = vec![0.0; heads.len()];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_scenes) {
            let refs: Vec<&SampleRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let images = image_batch(&refs)?;
            let scale = 1.0 / refs.len() as f64;
            for (h, head) in heads.iter_mut().enumerate() {
                let labels: Vec<usize> = refs.iter().flat_map(|r| r.labels.iter().map(|l| head.target.class(l))).collect();
                let mut tape = Tape::new();
                let vars = head.model.store.bind(&mut tape);
                let input = tape.leaf(images.clone());
                let (logits, seen) = head.model.forward(&mut tape, &vars, input, users, true)?;
                let (loss, _) = tape.softmax_cross_entropy(logits, &labels, scale)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Training(format!("non-finite loss {value} at epoch {epoch}, batch {batches}")));
                }
                losses[h] += value;
                let grads = tape.backward(loss)?;
                let grads: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();
                head.adam.set_learning_rate(lr);
                head.adam.step(&mut head.model.store, &grads)?;
                head.model.fold_running_stats(&seen);
            }
            batches += 1;
        }
        let predicted = match heads {
            [a, d] => Predictor::Dual { angle: a.model, distance: d.model }.predict(validation, angles)?,
            [j] => Predictor::Joint(j.model).predict(validation, angles)?,
            _ => return Err(Error::Training("expected one or two networks".into())),
        };
        let acc = estimation_accuracy(&predicted.concat(), &truth)?;
        history.push(HistoryRow {
            epoch,
            train_loss_a: losses[0] / batches as f64,
            train_loss_d: losses.get(1).map(|l| l / batches as f64),
            val_acc_a: acc.angle,
            val_acc_d: acc.distance,
            val_acc_overall: acc.overall,
            lr,
        });
        if acc.overall >= best + cfg.plateau_min_delta {
            best = acc.overall;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr *= cfg.lr_decay;
                stale = 0;
            }
        }
    }
    Ok(history)
}

/// RNG stream used to initialize each network kind, so that all four
/// networks of one seed start from independent weights.
fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct DualModel {
    pub angle: Model,
    pub distance: Model,
}

/// Architectures of the angle and distance networks for a dataset shape.
pub fn dual_architectures(input: [usize; 3], angles: usize, rings: usize, widths: Widths) -> Result<(Architecture, Architecture)> {
    Ok((Architecture::new(ModelKind::Nmbe, input, angles, widths)?, Architecture::new(ModelKind::Nmbe, input, rings, widths)?))
}

pub fn init_dual(input: [usize; 3], angles: usize, rings: usize, widths: Widths, seed: u64) -> Result<DualModel> {
    let (a, d) = dual_architectures(input, angles, rings, widths)?;
    Ok(DualModel { angle: Model::new(a, &mut init_rng(seed, 1))?, distance: Model::new(d, &mut init_rng(seed, 2))? })
}

pub fn init_baseline(kind: ModelKind, input: [usize; 3], angles: usize, rings: usize, widths: Widths, seed: u64) -> Result<Model> {
    let stream = if kind == ModelKind::Fcnn { 3 } else { 4 };
    Model::new(Architecture::new(kind, input, angles * rings, widths)?, &mut init_rng(seed, stream))
}

/// Trains the angle and distance networks in lockstep on the same shuffled
/// batches with a shared learning-rate schedule.
pub fn train_dual(model: &mut DualModel, train: &[SampleRecord], validation: &[SampleRecord], cfg: &TrainingConfig) -> Result<Vec<HistoryRow>> {
    let angles = model.angle.arch.classes;
    let adam = |m: &Model| Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), &m.store);
    let (aa, ad) = (adam(&model.angle), adam(&model.distance));
    let mut heads = [
        Head { model: &mut model.angle, adam: aa, target: Target::Angle },
        Head { model: &mut model.distance, adam: ad, target: Target::Distance },
    ];
    train_heads(train, validation, &mut heads, cfg, angles)
}

pub fn train_joint(model: &mut Model, train: &[SampleRecord], validation: &[SampleRecord], angles: usize, cfg: &TrainingConfig) -> Result<Vec<HistoryRow>> {
    let adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), &model.store);
    let mut heads = [Head { model, adam, target: Target::Joint { angles } }];
    train_heads(train, validation, &mut heads, cfg, angles)
}

/// Link settings used when turning predictions into rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub downlink_power_dbm: f64,
    pub downlink_noise_dbm: f64,
    #[serde(default)]
    pub interference: InterferenceModel,
    #[serde(default = "default_slot")]
    pub slot_s: f64,
    #[serde(default = "default_session")]
    pub session_s: f64,
}

fn default_slot() -> f64 {
    DEFAULT_SLOT_S
}

fn default_session() -> f64 {
    DEFAULT_SESSION_S
}

/// Scheme evaluation before it is labelled with a name and power pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: Accuracy,
    pub sum_rate: f64,
    pub effective_rate: f64,
    pub pilot_slots: usize,
    /// Scenes whose ZF precoder needed regularization.
    pub regularized: usize,
}

impl Evaluation {
    pub fn report(&self, scheme: &str, uplink_power_dbm: f64, downlink_power_dbm: f64) -> RateReport {
        RateReport {
            scheme: scheme.to_string(),
            uplink_power_dbm,
            downlink_power_dbm,
            sum_rate: self.sum_rate,
            effective_rate: self.effective_rate,
            accuracy: self.accuracy.overall,
            accuracy_angle: self.accuracy.angle,
            accuracy_distance: self.accuracy.distance,
        }
    }
}

/// Accuracy, average sum rate over scenes and effective rate of a set of
/// per-user codeword choices. `pilot_slots` is the mmWave beam-training
/// overhead charged to the scheme.
pub fn evaluate_selection(
    records: &[SampleRecord],
    predicted: &[Vec<CodewordIndex>],
    codebook: &Codebook,
    link: &LinkConfig,
    pilot_slots: usize,
) -> Result<Evaluation> {
    if records.is_empty() || records.len() != predicted.len() {
        return Err(config_err(format!("{} predictions for {} scenes", predicted.len(), records.len())));
    }
    let accuracy = estimation_accuracy(&predicted.concat(), &flatten_labels(records))?;
    let budget = LinkBudget {
        downlink_power_w: dbm_to_w(link.downlink_power_dbm),
        noise_w: dbm_to_w(link.downlink_noise_dbm),
        interference: link.interference,
    };
    let per_scene: Vec<(f64, bool)> = records
        .iter()
        .zip(predicted)
        .map(|(rec, pick)| {
            let chans = rec.user_channels()?;
            let pre = HybridPrecoder::build(&chans, pick, codebook)?;
            Ok((sum_rate_avg(&all_rates(&chans, &pre, &budget)), pre.regularized))
        })
        .collect::<Result<_>>()?;
    let sum_rate = per_scene.iter().map(|p| p.0).sum::<f64>() / records.len() as f64;
    let regularized = per_scene.iter().filter(|p| p.1).count();
    let effective_rate = effective_rate(sum_rate, pilot_slots, link.slot_s, link.session_s)?;
    Ok(Evaluation { accuracy, sum_rate, effective_rate, pilot_slots, regularized })
}

/// Writes the history CSV to `path`.
pub fn save_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    fs::write(path, history_csv(rows)?)?;
    Ok(())
}
