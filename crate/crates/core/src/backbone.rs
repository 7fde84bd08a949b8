//! Seeded, deterministic MLP feature extractor with swappable heads.
//!
//! One backbone is trained per seed with the point head; the positive-scale
//! and quantile-pair heads used by the width-adaptive baselines are fit on the
//! frozen feature map afterwards, so every method shares exactly the same
//! phi(x). Inputs are z-scored and the target mean-centered with statistics
//! from the training split; predictions are mapped back to original units on
//! the way out.

use crate::data::Standardizer;
use crate::linalg::{dot, DenseMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Checkpoint schema version; bumped on any breaking layout change.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("loss {loss:?} is incompatible with head {head}")]
    IncompatibleHeadLoss { loss: Loss, head: String },
    #[error("training data is empty")]
    EmptyData,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    CheckpointParse(#[from] serde_json::Error),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Output head attached to the last hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSpec {
    Point,
    Scale,
    QuantilePair { lo: f64, hi: f64 },
}

impl HeadSpec {
    fn output_dim(&self) -> usize {
        match self {
            HeadSpec::QuantilePair { .. } => 2,
            _ => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            HeadSpec::Point => "point",
            HeadSpec::Scale => "scale",
            HeadSpec::QuantilePair { .. } => "quantile_pair",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub head: HeadSpec,
}

impl MlpSpec {
    pub fn point(input_dim: usize, hidden_widths: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_widths,
            activation: Activation::Relu,
            head: HeadSpec::Point,
        }
    }

    /// Width of phi(x): the last hidden layer.
    pub fn feature_dim(&self) -> usize {
        *self
            .hidden_widths
            .last()
            .expect("validated spec has hidden layers")
    }

    fn validate(&self) -> Result<(), BackboneError> {
        if self.input_dim == 0 {
            return Err(BackboneError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(BackboneError::InvalidSpec(
                "hidden_widths must be nonempty; the feature map is the last hidden layer".into(),
            ));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(BackboneError::InvalidSpec("hidden widths must be positive".into()));
        }
        if let HeadSpec::QuantilePair { lo, hi } = self.head {
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return Err(BackboneError::InvalidSpec(format!(
                    "quantile levels must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Training loss; must match the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    PinballPair,
    ScaleAbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), BackboneError> {
        if self.batch_size == 0 {
            return Err(BackboneError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(BackboneError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One dense layer, weights stored out_dim x in_dim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    w: DenseMatrix,
    b: Vec<f64>,
}

impl Layer {
    fn out_dim(&self) -> usize {
        self.b.len()
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pinball (quantile) loss at the given level:
/// level * (y - q) when y >= q, (level - 1) * (y - q) otherwise.
pub fn pinball_loss(level: f64, y: f64, q: f64) -> f64 {
    debug_assert!(0.0 < level && level < 1.0);
    let diff = y - q;
    if diff >= 0.0 {
        level * diff
    } else {
        (level - 1.0) * diff
    }
}

/// Head outputs in original target units (scale stays a positive scalar).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadOutput {
    Point(f64),
    Scale(f64),
    QuantilePair(f64, f64),
}

/// A trained network: spec, layer stack (hidden layers + head layer),
/// standardization statistics, seed, and the monitored per-epoch mean loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedBackbone {
    pub spec: MlpSpec,
    layers: Vec<Layer>,
    pub train_stats: Standardizer,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: TrainedBackbone,
}

impl TrainedBackbone {
    /// phi(x) for one raw input row: standardize, run the hidden stack, stop
    /// before the head.
    pub fn features(&self, x_raw: &[f64]) -> Result<Vec<f64>, BackboneError> {
        if x_raw.len() != self.spec.input_dim {
            return Err(BackboneError::DimensionMismatch(format!(
                "input has {} values, spec wants {}",
                x_raw.len(),
                self.spec.input_dim
            )));
        }
        let std_row = self.train_stats.transform_row(x_raw);
        Ok(forward_features(&self.layers, &std_row))
    }

    /// phi for every row of a raw input matrix.
    pub fn features_matrix(&self, x_raw: &DenseMatrix) -> Result<DenseMatrix, BackboneError> {
        let d = self.spec.feature_dim();
        let mut out = Vec::with_capacity(x_raw.rows() * d);
        for r in 0..x_raw.rows() {
            out.extend(self.features(x_raw.row(r))?);
        }
        DenseMatrix::from_vec(x_raw.rows(), d, out)
            .map_err(|e| BackboneError::DimensionMismatch(e.to_string()))
    }

    /// Applies the head on top of phi(x). Point and quantile outputs are
    /// de-centered back to original target units; the scale output is passed
    /// through softplus so it is always positive.
    pub fn head_forward(&self, x_raw: &[f64]) -> Result<HeadOutput, BackboneError> {
        let phi = self.features(x_raw)?;
        let head = self.layers.last().expect("nonempty layer stack");
        let c = self.train_stats.y_mean;
        let out = match &self.spec.head {
            HeadSpec::Point => HeadOutput::Point(dot(head.w.row(0), &phi) + head.b[0] + c),
            HeadSpec::Scale => HeadOutput::Scale(softplus(dot(head.w.row(0), &phi) + head.b[0])),
            HeadSpec::QuantilePair { .. } => HeadOutput::QuantilePair(
                dot(head.w.row(0), &phi) + head.b[0] + c,
                dot(head.w.row(1), &phi) + head.b[1] + c,
            ),
        };
        Ok(out)
    }

    /// Convenience for the common point case.
    pub fn predict_point(&self, x_raw: &[f64]) -> Result<f64, BackboneError> {
        match self.head_forward(x_raw)? {
            HeadOutput::Point(v) => Ok(v),
            _ => Err(BackboneError::IncompatibleHeadLoss {
                loss: Loss::Mse,
                head: self.spec.head.name().to_string(),
            }),
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), BackboneError> {
        let blob = serde_json::to_string(&Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?;
        std::fs::write(path, blob)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self, BackboneError> {
        let blob = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&blob)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(BackboneError::CheckpointVersion {
                found: ckpt.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt.model)
    }
}

/// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero bias.
/// Draw order is fixed (layer by layer, row-major), so a seed pins every bit.
fn init_layers(dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for win in dims.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let limit = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        layers.push(Layer {
            w: DenseMatrix::from_vec(fan_out, fan_in, data).expect("finite init"),
            b: vec![0.0; fan_out],
        });
    }
    layers
}

/// Forward through hidden layers only (ReLU after each); the head layer is
/// excluded.
fn forward_features(layers: &[Layer], std_input: &[f64]) -> Vec<f64> {
    let mut a = std_input.to_vec();
    for layer in &layers[..layers.len() - 1] {
        a = layer_forward_relu(layer, &a);
    }
    a
}

fn layer_forward_relu(layer: &Layer, input: &[f64]) -> Vec<f64> {
    (0..layer.out_dim())
        .map(|i| (dot(layer.w.row(i), input) + layer.b[i]).max(0.0))
        .collect()
}

fn layer_forward_linear(layer: &Layer, input: &[f64]) -> Vec<f64> {
    (0..layer.out_dim())
        .map(|i| dot(layer.w.row(i), input) + layer.b[i])
        .collect()
}

/// Per-sample loss and output-layer gradient (d loss / d raw output), with
/// the 1/batch factor applied by the caller.
fn loss_and_output_grad(loss: Loss, head: &HeadSpec, out: &[f64], target: f64) -> (f64, Vec<f64>) {
    match (loss, head) {
        (Loss::Mse, HeadSpec::Point) => {
            let diff = out[0] - target;
            (diff * diff, vec![2.0 * diff])
        }
        (Loss::ScaleAbs, HeadSpec::Scale) => {
            let h = softplus(out[0]);
            let diff = h - target;
            (diff * diff, vec![2.0 * diff * sigmoid(out[0])])
        }
        (Loss::PinballPair, HeadSpec::QuantilePair { lo, hi }) => {
            let mut grad = vec![0.0; 2];
            let mut total = 0.0;
            for (j, &level) in [*lo, *hi].iter().enumerate() {
                total += pinball_loss(level, target, out[j]);
                grad[j] = if target >= out[j] { -level } else { 1.0 - level };
            }
            (total, grad)
        }
        _ => unreachable!("loss/head compatibility checked before training"),
    }
}

struct LayerGrad {
    w: DenseMatrix,
    b: Vec<f64>,
}

/// Mean loss over the batch plus gradients for every layer, by per-sample
/// backpropagation through the ReLU stack.
fn batch_gradients(
    layers: &[Layer],
    head: &HeadSpec,
    loss: Loss,
    x_std: &DenseMatrix,
    targets: &[f64],
    batch: &[usize],
) -> (f64, Vec<LayerGrad>) {
    let mut grads: Vec<LayerGrad> = layers
        .iter()
        .map(|l| LayerGrad {
            w: DenseMatrix::zeros(l.w.rows(), l.w.cols()),
            b: vec![0.0; l.b.len()],
        })
        .collect();
    let inv_b = 1.0 / batch.len() as f64;
    let n_layers = layers.len();
    let mut total_loss = 0.0;

    for &row in batch {
        // Forward pass, remembering pre- and post-activation values.
        let input = x_std.row(row);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut a: Vec<f64> = input.to_vec();
        for (li, layer) in layers.iter().enumerate() {
            a = if li + 1 == n_layers {
                layer_forward_linear(layer, &a)
            } else {
                layer_forward_relu(layer, &a)
            };
            post.push(a.clone());
        }
        let out = &post[n_layers - 1];
        let (sample_loss, out_grad) = loss_and_output_grad(loss, head, out, targets[row]);
        total_loss += sample_loss * inv_b;

        // Backward pass.
        let mut delta: Vec<f64> = out_grad.iter().map(|g| g * inv_b).collect();
        for li in (0..n_layers).rev() {
            let layer_input: &[f64] = if li == 0 { input } else { &post[li - 1] };
            // ReLU mask for hidden layers: post-activation zero means the unit
            // was clamped and passes no gradient.
            if li + 1 != n_layers {
                for (d, &p) in delta.iter_mut().zip(post[li].iter()) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let g = &mut grads[li];
            for (i, &di) in delta.iter().enumerate() {
                g.b[i] += di;
                if di != 0.0 {
                    let grow = g.w.row_mut(i);
                    for (gw, &inp) in grow.iter_mut().zip(layer_input.iter()) {
                        *gw += di * inp;
                    }
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer_input.len()];
                for (i, &di) in delta.iter().enumerate() {
                    if di != 0.0 {
                        for (p, &wv) in prev.iter_mut().zip(layers[li].w.row(i)) {
                            *p += di * wv;
                        }
                    }
                }
                delta = prev;
            }
        }
    }
    (total_loss, grads)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    fn new(layers: &[Layer]) -> Self {
        let sizes: Vec<usize> = layers
            .iter()
            .map(|l| l.w.rows() * l.w.cols() + l.b.len())
            .collect();
        Self {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }
}

fn adam_step(
    layers: &mut [Layer],
    grads: &[LayerGrad],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (li, layer) in layers.iter_mut().enumerate() {
        let g = &grads[li];
        let m = &mut state.m[li];
        let v = &mut state.v[li];
        let wcount = layer.w.rows() * layer.w.cols();
        for idx in 0..wcount {
            let grad = g.w.data()[idx];
            m[idx] = beta1 * m[idx] + (1.0 - beta1) * grad;
            v[idx] = beta2 * v[idx] + (1.0 - beta2) * grad * grad;
            let update = lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + eps);
            let r = idx / layer.w.cols();
            let c = idx % layer.w.cols();
            let cur = layer.w.get(r, c);
            layer.w.set(r, c, cur - update);
        }
        for (bi, bias) in layer.b.iter_mut().enumerate() {
            let idx = wcount + bi;
            let grad = g.b[bi];
            m[idx] = beta1 * m[idx] + (1.0 - beta1) * grad;
            v[idx] = beta2 * v[idx] + (1.0 - beta2) * grad * grad;
            *bias -= lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + eps);
        }
    }
}

/// Shared minibatch-Adam loop over an arbitrary layer stack. `x_std` must
/// already be standardized; `targets` already in network units.
fn train_net(
    mut layers: Vec<Layer>,
    head: &HeadSpec,
    loss: Loss,
    x_std: &DenseMatrix,
    targets: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<Layer>, Vec<f64>) {
    let n = x_std.rows();
    let Optimizer::Adam { beta1, beta2, eps } = cfg.optimizer;
    let mut state = AdamState::new(&layers);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.min(n)) {
            let (batch_loss, grads) = batch_gradients(&layers, head, loss, x_std, targets, batch);
            epoch_loss += batch_loss * batch.len() as f64;
            adam_step(
                &mut layers,
                &grads,
                &mut state,
                cfg.learning_rate,
                beta1,
                beta2,
                eps,
            );
        }
        epoch_loss /= n as f64;
        epoch_losses.push(epoch_loss);
        log::debug!("epoch {epoch}: mean loss {epoch_loss:.6}");
    }
    if let (Some(first), Some(last)) = (epoch_losses.first(), epoch_losses.last()) {
        if last > first {
            log::warn!("training loss rose over the run: {first:.6} -> {last:.6}");
        }
    }
    (layers, epoch_losses)
}

fn check_loss_head(loss: Loss, head: &HeadSpec) -> Result<(), BackboneError> {
    let ok = matches!(
        (loss, head),
        (Loss::Mse, HeadSpec::Point)
            | (Loss::ScaleAbs, HeadSpec::Scale)
            | (Loss::PinballPair, HeadSpec::QuantilePair { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(BackboneError::IncompatibleHeadLoss {
            loss,
            head: head.name().to_string(),
        })
    }
}

/// Trains a full network end to end. Inputs are raw; standardization and
/// target handling use `stats` (fit on the training split by the caller):
/// point and quantile targets are centered, scale targets (nonnegative
/// residual magnitudes) are used as given.
pub fn train(
    spec: &MlpSpec,
    x_raw: &DenseMatrix,
    y_raw: &[f64],
    stats: &Standardizer,
    loss: Loss,
    cfg: &TrainConfig,
) -> Result<TrainedBackbone, BackboneError> {
    spec.validate()?;
    cfg.validate()?;
    check_loss_head(loss, &spec.head)?;
    if x_raw.rows() == 0 {
        return Err(BackboneError::EmptyData);
    }
    if x_raw.cols() != spec.input_dim {
        return Err(BackboneError::DimensionMismatch(format!(
            "data has {} columns, spec wants {}",
            x_raw.cols(),
            spec.input_dim
        )));
    }
    if x_raw.rows() != y_raw.len() {
        return Err(BackboneError::DimensionMismatch(format!(
            "{} rows vs {} targets",
            x_raw.rows(),
            y_raw.len()
        )));
    }

    let x_std = stats.transform_x(x_raw);
    let targets: Vec<f64> = match loss {
        Loss::ScaleAbs => y_raw.to_vec(),
        _ => stats.center_y(y_raw),
    };

    let mut dims = Vec::with_capacity(spec.hidden_widths.len() + 2);
    dims.push(spec.input_dim);
    dims.extend_from_slice(&spec.hidden_widths);
    dims.push(spec.head.output_dim());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = init_layers(&dims, &mut rng);
    let (layers, epoch_losses) =
        train_net(layers, &spec.head, loss, &x_std, &targets, cfg, &mut rng);

    Ok(TrainedBackbone {
        spec: spec.clone(),
        layers,
        train_stats: stats.clone(),
        seed: cfg.seed,
        epoch_losses,
    })
}

/// Positive scale function fit on frozen features: h(phi) = softplus(w.phi + b).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ScaleHead {
    pub fn forward(&self, phi: &[f64]) -> f64 {
        softplus(dot(&self.w, phi) + self.b)
    }
}

/// Quantile pair fit on frozen features, in centered target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantilePairHead {
    pub w_lo: Vec<f64>,
    pub b_lo: f64,
    pub w_hi: Vec<f64>,
    pub b_hi: f64,
    pub levels: (f64, f64),
}

impl QuantilePairHead {
    /// (q_lo, q_hi) in centered units; the caller de-centers.
    pub fn forward(&self, phi: &[f64]) -> (f64, f64) {
        (
            dot(&self.w_lo, phi) + self.b_lo,
            dot(&self.w_hi, phi) + self.b_hi,
        )
    }
}

/// Fits the positive scale head on a frozen feature matrix against
/// nonnegative residual-magnitude targets (MSE on the softplus output).
pub fn fit_scale_head(
    phi: &DenseMatrix,
    abs_residuals: &[f64],
    cfg: &TrainConfig,
) -> Result<ScaleHead, BackboneError> {
    cfg.validate()?;
    if phi.rows() == 0 {
        return Err(BackboneError::EmptyData);
    }
    if phi.rows() != abs_residuals.len() {
        return Err(BackboneError::DimensionMismatch(format!(
            "{} feature rows vs {} targets",
            phi.rows(),
            abs_residuals.len()
        )));
    }
    let dims = [phi.cols(), 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = init_layers(&dims, &mut rng);
    let (layers, _) = train_net(
        layers,
        &HeadSpec::Scale,
        Loss::ScaleAbs,
        phi,
        abs_residuals,
        cfg,
        &mut rng,
    );
    Ok(ScaleHead {
        w: layers[0].w.row(0).to_vec(),
        b: layers[0].b[0],
    })
}

/// Fits the quantile pair on a frozen feature matrix against centered
/// targets, one pinball loss per level.
pub fn fit_quantile_pair_head(
    phi: &DenseMatrix,
    y_centered: &[f64],
    lo: f64,
    hi: f64,
    cfg: &TrainConfig,
) -> Result<QuantilePairHead, BackboneError> {
    cfg.validate()?;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(BackboneError::InvalidSpec(format!(
            "quantile levels must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
        )));
    }
    if phi.rows() == 0 {
        return Err(BackboneError::EmptyData);
    }
    if phi.rows() != y_centered.len() {
        return Err(BackboneError::DimensionMismatch(format!(
            "{} feature rows vs {} targets",
            phi.rows(),
            y_centered.len()
        )));
    }
    let head = HeadSpec::QuantilePair { lo, hi };
    let dims = [phi.cols(), 2];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = init_layers(&dims, &mut rng);
    let (layers, _) = train_net(
        layers,
        &head,
        Loss::PinballPair,
        phi,
        y_centered,
        cfg,
        &mut rng,
    );
    Ok(QuantilePairHead {
        w_lo: layers[0].w.row(0).to_vec(),
        b_lo: layers[0].b[0],
        w_hi: layers[0].w.row(1).to_vec(),
        b_hi: layers[0].b[1],
        levels: (lo, hi),
    })
}

/// End-to-end audit of the analytic batch-loss gradients against central
/// finite differences on a small randomly initialized network (3 inputs, one
/// hidden layer of width 5, and the head matching `loss`). Returns the
/// maximum relative deviation over every weight and bias in every layer.
///
/// The seed fixes the data and the initialization; targets are kept away
/// from the head outputs so piecewise-linear losses have no kink inside the
/// finite-difference window.
pub fn gradient_fd_max_rel_err(loss: Loss, seed: u64) -> f64 {
    let head = match loss {
        Loss::Mse => HeadSpec::Point,
        Loss::ScaleAbs => HeadSpec::Scale,
        Loss::PinballPair => HeadSpec::QuantilePair { lo: 0.05, hi: 0.95 },
    };
    let n = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseMatrix::from_vec(
        n,
        3,
        (0..n * 3).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .expect("finite data");
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(2.0..4.0)).collect();
    let dims = [3usize, 5, head.output_dim()];
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37);
    let layers = init_layers(&dims, &mut init_rng);
    let batch: Vec<usize> = (0..n).collect();
    let (_, grads) = batch_gradients(&layers, &head, loss, &x, &targets, &batch);

    let loss_of = |layers: &[Layer]| batch_gradients(layers, &head, loss, &x, &targets, &batch).0;
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for li in 0..layers.len() {
        for r in 0..layers[li].w.rows() {
            for c in 0..layers[li].w.cols() {
                let mut plus = layers.clone();
                let v = plus[li].w.get(r, c);
                plus[li].w.set(r, c, v + h);
                let mut minus = layers.clone();
                minus[li].w.set(r, c, v - h);
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let analytic = grads[li].w.get(r, c);
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                max_rel = max_rel.max(((fd - analytic) / denom).abs());
            }
        }
        for bi in 0..layers[li].b.len() {
            let mut plus = layers.clone();
            plus[li].b[bi] += h;
            let mut minus = layers.clone();
            minus[li].b[bi] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = grads[li].b[bi];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            max_rel = max_rel.max(((fd - analytic) / denom).abs());
        }
    }
    max_rel
}
