//! One-hidden-layer ReLU softmax classifier trained with plain minibatch SGD.
//!
//! The hidden activations are the "penultimate layer" whose normalized form
//! feeds the distance matrix; the softmax output is the model output used for
//! privacy evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, derive_seed, l2_normalize, Matrix, Normalized, SeededRng};

const EPOCH_SHUFFLE_TAG: u64 = 0x45504f43;
const MODEL_MAGIC: &[u8; 8] = b"UGMODEL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl Arch {
    pub fn new(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || n_classes < 2 {
            return Err(Error::Config(format!(
                "architecture {input_dim}x{hidden_dim}x{n_classes} needs input>=1, hidden>=1, classes>=2"
            )));
        }
        Ok(Self { input_dim, hidden_dim, n_classes })
    }

    pub fn n_params(&self) -> usize {
        self.hidden_dim * self.input_dim + self.hidden_dim + self.n_classes * self.hidden_dim + self.n_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.1, batch_size: 32, seed: 0, shuffle: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    arch: Arch,
    /// hidden x input, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// classes x hidden, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros(arch: &Arch) -> Self {
        Self {
            w1: vec![0.0; arch.hidden_dim * arch.input_dim],
            b1: vec![0.0; arch.hidden_dim],
            w2: vec![0.0; arch.n_classes * arch.hidden_dim],
            b2: vec![0.0; arch.n_classes],
        }
    }

    fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).copied()
    }
}

impl ToyModel {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            w1: vec![0.0; arch.hidden_dim * arch.input_dim],
            b1: vec![0.0; arch.hidden_dim],
            w2: vec![0.0; arch.n_classes * arch.hidden_dim],
            b2: vec![0.0; arch.n_classes],
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and
    /// biases of each layer.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut m = Self::zeros(arch);
        let a1 = 1.0 / (arch.input_dim as f64).sqrt();
        let a2 = 1.0 / (arch.hidden_dim as f64).sqrt();
        for w in m.w1.iter_mut().chain(m.b1.iter_mut()) {
            *w = rng.uniform(-a1, a1);
        }
        for w in m.w2.iter_mut().chain(m.b2.iter_mut()) {
            *w = rng.uniform(-a2, a2);
        }
        m
    }

    /// Builds a model from explicit weight blocks (row-major).
    pub fn from_parts(arch: Arch, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        let expect = [
            (w1.len(), arch.hidden_dim * arch.input_dim),
            (b1.len(), arch.hidden_dim),
            (w2.len(), arch.n_classes * arch.hidden_dim),
            (b2.len(), arch.n_classes),
        ];
        for (actual, expected) in expect {
            if actual != expected {
                return Err(Error::Dimension { expected, actual });
            }
        }
        let m = Self { arch, w1, b1, w2, b2 };
        if let Some(i) = m.params().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("model parameter {i}")));
        }
        Ok(m)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        &mut self.b2
    }

    /// All parameters in checkpoint order: W1, b1, W2, b2.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).copied()
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for block in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            if idx < block.len() {
                return &mut block[idx];
            }
            idx -= block.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::Dimension { expected: self.arch.input_dim, actual: x.len() });
        }
        Ok(())
    }

    fn forward_unchecked(&self, x: &[f64]) -> Forward {
        let Arch { input_dim, hidden_dim, n_classes } = self.arch;
        let mut pre = self.b1.clone();
        for (h, p) in pre.iter_mut().enumerate() {
            *p += numkit::dot(&self.w1[h * input_dim..(h + 1) * input_dim], x);
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let mut logits = self.b2.clone();
        for (k, l) in logits.iter_mut().enumerate() {
            *l += numkit::dot(&self.w2[k * hidden_dim..(k + 1) * hidden_dim], &hidden);
        }
        debug_assert_eq!(logits.len(), n_classes);
        Forward { pre, hidden, logits }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Class probabilities (softmax of the logits).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(numkit::softmax(&self.forward(x)?.logits))
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(numkit::argmax(&self.forward(x)?.logits))
    }

    /// L2-normalized hidden activations.
    pub fn features(&self, x: &[f64]) -> Result<Normalized> {
        Ok(l2_normalize(&self.forward(x)?.hidden))
    }

    /// Cross-entropy of one sample and its parameter gradients.
    pub fn loss_and_grads(&self, x: &[f64], label: usize) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        self.check_label(label)?;
        let mut g = Gradients::zeros(&self.arch);
        let loss = self.accumulate(x, label, 1.0, &mut g);
        Ok((loss, g))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.arch.n_classes {
            return Err(Error::LabelOutOfRange { label, n_classes: self.arch.n_classes });
        }
        Ok(())
    }

    /// Adds `scale * dL/dparams` into `g` and returns the loss.
    fn accumulate(&self, x: &[f64], label: usize, scale: f64, g: &mut Gradients) -> f64 {
        let Arch { input_dim, hidden_dim, .. } = self.arch;
        let f = self.forward_unchecked(x);
        let logp = numkit::log_softmax(&f.logits);
        let mut dlogits: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        dlogits[label] -= 1.0;

        let mut dhidden = vec![0.0; hidden_dim];
        for (k, &dk) in dlogits.iter().enumerate() {
            g.b2[k] += scale * dk;
            let row = &self.w2[k * hidden_dim..(k + 1) * hidden_dim];
            let grow = &mut g.w2[k * hidden_dim..(k + 1) * hidden_dim];
            for h in 0..hidden_dim {
                grow[h] += scale * dk * f.hidden[h];
                dhidden[h] += dk * row[h];
            }
        }
        for h in 0..hidden_dim {
            if f.pre[h] <= 0.0 {
                continue;
            }
            let dpre = scale * dhidden[h];
            g.b1[h] += dpre;
            let grow = &mut g.w1[h * input_dim..(h + 1) * input_dim];
            for (gw, xi) in grow.iter_mut().zip(x) {
                *gw += dpre * xi;
            }
        }
        -logp[label]
    }

    /// Gradient of the cross-entropy loss with respect to the input.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(label)?;
        let Arch { input_dim, hidden_dim, .. } = self.arch;
        let f = self.forward_unchecked(x);
        let mut dlogits = numkit::softmax(&f.logits);
        dlogits[label] -= 1.0;
        let mut grad = vec![0.0; input_dim];
        for h in 0..hidden_dim {
            if f.pre[h] <= 0.0 {
                continue;
            }
            let dpre: f64 = dlogits
                .iter()
                .enumerate()
                .map(|(k, dk)| dk * self.w2[k * hidden_dim + h])
                .sum();
            for (gi, w) in grad.iter_mut().zip(&self.w1[h * input_dim..(h + 1) * input_dim]) {
                *gi += dpre * w;
            }
        }
        Ok(grad)
    }

    fn apply(&mut self, g: &Gradients, lr: f64) {
        for (p, d) in self.w1.iter_mut().zip(&g.w1) {
            *p -= lr * d;
        }
        for (p, d) in self.b1.iter_mut().zip(&g.b1) {
            *p -= lr * d;
        }
        for (p, d) in self.w2.iter_mut().zip(&g.w2) {
            *p -= lr * d;
        }
        for (p, d) in self.b2.iter_mut().zip(&g.b2) {
            *p -= lr * d;
        }
    }

    /// Mean cross-entropy over the given rows.
    pub fn mean_loss(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        if inputs.rows() == 0 {
            return Err(Error::Empty("loss over empty dataset"));
        }
        let mut total = 0.0;
        for (x, &y) in inputs.iter_rows().zip(labels) {
            self.check_input(x)?;
            self.check_label(y)?;
            let f = self.forward_unchecked(x);
            total -= numkit::log_softmax(&f.logits)[y];
        }
        Ok(total / inputs.rows() as f64)
    }

    pub fn accuracy(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        accuracy(self, inputs, labels)
    }

    /// Checkpoint encoding: magic, arch as three u32 LE, then W1, b1, W2, b2
    /// as row-major f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 12 + 8 * self.arch.n_params());
        out.extend_from_slice(MODEL_MAGIC);
        for dim in [self.arch.input_dim, self.arch.hidden_dim, self.arch.n_classes] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Format("missing UGMODEL1 header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let arch = Arch::new(dim(0), dim(1), dim(2))?;
        let body = &bytes[20..];
        if body.len() != 8 * arch.n_params() {
            return Err(Error::Format(format!(
                "checkpoint body is {} bytes, expected {}",
                body.len(),
                8 * arch.n_params()
            )));
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| vals.by_ref().take(n).collect::<Vec<_>>();
        let w1 = take(arch.hidden_dim * arch.input_dim);
        let b1 = take(arch.hidden_dim);
        let w2 = take(arch.n_classes * arch.hidden_dim);
        let b2 = take(arch.n_classes);
        Self::from_parts(arch, w1, b1, w2, b2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Anything that maps an input to class probabilities.
pub trait Classifier {
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Argmax class, ties to the lowest index.
    fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(numkit::argmax(&self.predict_proba(x)?))
    }
}

impl Classifier for ToyModel {
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict(x)
    }

    fn predict_label(&self, x: &[f64]) -> Result<usize> {
        self.predict_class(x)
    }
}

/// Fraction of rows classified correctly; 0 for an empty set.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if inputs.rows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, &y) in inputs.iter_rows().zip(labels) {
        if model.predict_label(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / inputs.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointLabel {
    Init,
    Epoch(usize),
    Slice { shard: usize, slice: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label: CheckpointLabel,
    model: ToyModel,
}

impl Checkpoint {
    pub fn new(label: CheckpointLabel, model: &ToyModel) -> Self {
        Self { label, model: model.clone() }
    }

    pub fn restore(&self) -> ToyModel {
        self.model.clone()
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }
}

/// What one call to [`fit`] did.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Number of SGD updates applied.
    pub steps: usize,
    /// Snapshot after every epoch, labelled `Epoch(1..=epochs)`.
    pub checkpoints: Vec<Checkpoint>,
    /// Row indices in the order they were visited across all epochs.
    pub visited: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ToyModel,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub report: FitReport,
}

impl Trained {
    /// End-of-epoch snapshot, 1-based.
    pub fn epoch(&self, epoch: usize) -> Option<&Checkpoint> {
        self.report.checkpoints.get(epoch.checked_sub(1)?)
    }
}

fn check_dataset(inputs: &Matrix, labels: &[usize], arch: &Arch) -> Result<()> {
    if inputs.rows() != labels.len() {
        return Err(Error::Dimension { expected: inputs.rows(), actual: labels.len() });
    }
    if inputs.cols() != arch.input_dim {
        return Err(Error::Dimension { expected: arch.input_dim, actual: inputs.cols() });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= arch.n_classes) {
        return Err(Error::LabelOutOfRange { label, n_classes: arch.n_classes });
    }
    if let Some(pos) = inputs.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input row {}", pos / arch.input_dim.max(1))));
    }
    Ok(())
}

/// Fresh model from `init_seed`, then [`fit`].
pub fn train(inputs: &Matrix, labels: &[usize], arch: Arch, cfg: &TrainConfig, init_seed: u64) -> Result<Trained> {
    cfg.validate()?;
    if inputs.rows() == 0 {
        return Err(Error::Empty("training set"));
    }
    check_dataset(inputs, labels, &arch)?;
    let mut model = ToyModel::init(arch, init_seed);
    let initial_loss = model.mean_loss(inputs, labels)?;
    let report = fit(&mut model, inputs, labels, cfg)?;
    let final_loss = model.mean_loss(inputs, labels)?;
    Ok(Trained { model, initial_loss, final_loss, report })
}

/// Continues training `model` in place with minibatch SGD.
///
/// Epoch `e` visits rows in a Fisher-Yates order seeded by
/// `derive_seed(cfg.seed, [EPOCH, e])` when `cfg.shuffle` is set, otherwise in
/// row order. Each step applies the batch-mean gradient. An empty dataset is
/// a no-op.
pub fn fit(model: &mut ToyModel, inputs: &Matrix, labels: &[usize], cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    let arch = model.arch();
    check_dataset(inputs, labels, &arch)?;
    let n = inputs.rows();
    let mut report = FitReport { steps: 0, checkpoints: Vec::with_capacity(cfg.epochs), visited: Vec::new() };
    let mut order: Vec<usize> = (0..n).collect();
    let mut g = Gradients::zeros(&arch);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        if cfg.shuffle {
            SeededRng::new(derive_seed(cfg.seed, &[EPOCH_SHUFFLE_TAG, epoch as u64])).shuffle(&mut order);
        }
        for batch in order.chunks(cfg.batch_size) {
            g.w1.iter_mut().chain(g.b1.iter_mut()).chain(g.w2.iter_mut()).chain(g.b2.iter_mut()).for_each(|v| *v = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                model.accumulate(inputs.row(i), labels[i], scale, &mut g);
            }
            model.apply(&g, cfg.lr);
            report.steps += 1;
        }
        report.visited.extend_from_slice(&order);
        report.checkpoints.push(Checkpoint::new(CheckpointLabel::Epoch(epoch + 1), model));
    }
    Ok(report)
}

/// Largest relative error between backprop and central finite differences
/// over every parameter.
///
/// Relative error is `|a - n| / max(|a| + |n|, 1e-7)`.
pub fn grad_check(model: &ToyModel, x: &[f64], label: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("grad_check eps must be in (0, 1e-2], got {eps}")));
    }
    let (_, analytic) = model.loss_and_grads(x, label)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.flat().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + eps;
        let up = probe.loss_and_grads(x, label)?.0;
        *probe.param_mut(i) = orig - eps;
        let down = probe.loss_and_grads(x, label)?.0;
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(worst)
}
