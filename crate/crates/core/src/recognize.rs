//! Small from-scratch recognizers: a shared-MLP point network with max pooling
//! and a two-layer strided conv net on depth crops. Both expose exact
//! input gradients for the attacks and parameter gradients for SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Per-point MLP, channel max pool, dense head. Input: `n x 3` flattened points.
    PointMlp,
    /// Two 3x3 stride-2 convolutions and two dense layers. Input: a row-major depth crop.
    DepthConv,
}

/// One parameterized layer, with offsets into the flat weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    /// 3x3 kernel, stride 2, zero padding 1; `inputs`/`outputs` are channel counts.
    Conv,
}

impl LayerShape {
    fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.inputs * self.outputs,
            LayerKind::Conv => self.inputs * self.outputs * 9,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.inputs,
            LayerKind::Conv => self.inputs * 9,
        }
    }
}

/// Architecture description plus flat float64 weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub classes: usize,
    /// Hidden widths: `[mlp1, mlp2, head]` or `[conv1, conv2, dense]`.
    pub widths: [usize; 3],
    /// Depth crop `[width, height]`; unused by the point network.
    pub input_size: [usize; 2],
    pub seed: u64,
    pub class_names: Vec<String>,
    #[serde(skip)]
    pub weights: Vec<f64>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn conv_out(n: usize) -> usize {
    n.div_ceil(2)
}

impl ModelParams {
    /// Freshly initialized network (He-normal weights, zero biases).
    pub fn init(architecture: Architecture, classes: usize, widths: [usize; 3], input_size: [usize; 2], seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig("a classifier needs at least 2 classes".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if architecture == Architecture::DepthConv && (input_size[0] == 0 || input_size[1] == 0) {
            return Err(Error::InvalidConfig("depth input size must be positive".into()));
        }
        let mut model = Self {
            architecture,
            classes,
            widths,
            input_size: if architecture == Architecture::DepthConv { input_size } else { [0, 0] },
            seed,
            class_names: (0..classes).map(|c| format!("id{c:02}")).collect(),
            weights: Vec::new(),
        };
        let layers = model.layers();
        let total = layers.last().map(|l| l.bias_offset + l.outputs).unwrap_or(0);
        let mut weights = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let normal = Normal::new(0.0, (2.0 / l.fan_in() as f64).sqrt()).expect("finite std");
            for w in &mut weights[l.weight_offset..l.weight_offset + l.weight_count()] {
                *w = normal.sample(&mut rng);
            }
        }
        model.weights = weights;
        Ok(model)
    }

    pub fn point_mlp(classes: usize, seed: u64) -> Result<Self> {
        Self::init(Architecture::PointMlp, classes, [32, 64, 32], [0, 0], seed)
    }

    pub fn depth_conv(classes: usize, input_size: [usize; 2], seed: u64) -> Result<Self> {
        Self::init(Architecture::DepthConv, classes, [8, 16, 32], input_size, seed)
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let [a, b, c] = self.widths;
        let specs: Vec<(LayerKind, usize, usize)> = match self.architecture {
            Architecture::PointMlp => vec![
                (LayerKind::Dense, 3, a),
                (LayerKind::Dense, a, b),
                (LayerKind::Dense, b, c),
                (LayerKind::Dense, c, self.classes),
            ],
            Architecture::DepthConv => {
                let [w, h] = self.input_size;
                let flat = b * conv_out(conv_out(w)) * conv_out(conv_out(h));
                vec![
                    (LayerKind::Conv, 1, a),
                    (LayerKind::Conv, a, b),
                    (LayerKind::Dense, flat, c),
                    (LayerKind::Dense, c, self.classes),
                ]
            }
        };
        let mut offset = 0;
        specs
            .into_iter()
            .map(|(kind, inputs, outputs)| {
                let mut l = LayerShape { kind, inputs, outputs, weight_offset: offset, bias_offset: 0 };
                l.bias_offset = offset + l.weight_count();
                offset = l.bias_offset + outputs;
                l
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().last().map(|l| l.bias_offset + l.outputs).unwrap_or(0)
    }

    /// Checks weight count and finiteness, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} weights, found {}",
                self.parameter_count(),
                self.weights.len()
            )));
        }
        if self.class_names.len() != self.classes {
            return Err(Error::ShapeMismatch("class name count differs from class count".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Format { what: "model", detail: "non-finite weight".into() });
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        match self.architecture {
            Architecture::PointMlp if input.is_empty() || input.len() % 3 != 0 => Err(Error::ShapeMismatch(
                format!("point input length {} is not a positive multiple of 3", input.len()),
            )),
            Architecture::DepthConv if input.len() != self.input_size[0] * self.input_size[1] => {
                Err(Error::ShapeMismatch(format!(
                    "depth input has {} pixels, model expects {}x{}",
                    input.len(),
                    self.input_size[0],
                    self.input_size[1]
                )))
            }
            _ => Ok(()),
        }
    }

    /// Logits for a flat input (points `x0 y0 z0 x1 ...` or depth pixels).
    pub fn classify(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.logits)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Forward> {
        self.check_input(input)?;
        let layers = self.layers();
        let p = &self.weights;
        Ok(match self.architecture {
            Architecture::PointMlp => {
                let [a, b, c] = self.widths;
                let n = input.len() / 3;
                let mut pre1 = vec![0.0; n * a];
                let mut act1 = vec![0.0; n * a];
                let mut pooled = vec![f64::NEG_INFINITY; b];
                let mut pooled_pre = vec![0.0; b];
                let mut argmax = vec![0usize; b];
                let mut pre2 = vec![0.0; b];
                for i in 0..n {
                    let x = &input[3 * i..3 * i + 3];
                    dense(p, &layers[0], x, &mut pre1[i * a..(i + 1) * a]);
                    for k in 0..a {
                        act1[i * a + k] = silu(pre1[i * a + k]);
                    }
                    dense(p, &layers[1], &act1[i * a..(i + 1) * a], &mut pre2);
                    for j in 0..b {
                        let v = silu(pre2[j]);
                        if v > pooled[j] {
                            pooled[j] = v;
                            pooled_pre[j] = pre2[j];
                            argmax[j] = i;
                        }
                    }
                }
                let mut pre3 = vec![0.0; c];
                dense(p, &layers[2], &pooled, &mut pre3);
                let act3: Vec<f64> = pre3.iter().map(|&v| silu(v)).collect();
                let mut logits = vec![0.0; self.classes];
                dense(p, &layers[3], &act3, &mut logits);
                Forward {
                    logits,
                    cache: Cache::Points {
                        input: input.to_vec(),
                        pre1,
                        act1,
                        pooled,
                        pooled_pre,
                        argmax,
                        pre3,
                        act3,
                    },
                }
            }
            Architecture::DepthConv => {
                let [w, h] = self.input_size;
                let (w1, h1) = (conv_out(w), conv_out(h));
                let pre1 = conv(p, &layers[0], input, w, h);
                let act1: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
                let pre2 = conv(p, &layers[1], &act1, w1, h1);
                let act2: Vec<f64> = pre2.iter().map(|&v| silu(v)).collect();
                let mut pre3 = vec![0.0; self.widths[2]];
                dense(p, &layers[2], &act2, &mut pre3);
                let act3: Vec<f64> = pre3.iter().map(|&v| silu(v)).collect();
                let mut logits = vec![0.0; self.classes];
                dense(p, &layers[3], &act3, &mut logits);
                Forward {
                    logits,
                    cache: Cache::Depth { input: input.to_vec(), pre1, act1, pre2, act2, pre3, act3 },
                }
            }
        })
    }
}

/// Logits plus the activations needed for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Vec<f64>,
    cache: Cache,
}

#[derive(Clone, Debug)]
enum Cache {
    Points {
        input: Vec<f64>,
        pre1: Vec<f64>,
        act1: Vec<f64>,
        pooled: Vec<f64>,
        pooled_pre: Vec<f64>,
        argmax: Vec<usize>,
        pre3: Vec<f64>,
        act3: Vec<f64>,
    },
    Depth {
        input: Vec<f64>,
        pre1: Vec<f64>,
        act1: Vec<f64>,
        pre2: Vec<f64>,
        act2: Vec<f64>,
        pre3: Vec<f64>,
        act3: Vec<f64>,
    },
}

impl Forward {
    /// Gradient of `sum(d_logits . logits)` with respect to the input, and
    /// optionally accumulated into `param_grad` (same layout as the weights).
    pub fn backward(&self, model: &ModelParams, d_logits: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let layers = model.layers();
        let p = &model.weights;
        match &self.cache {
            Cache::Points { input, pre1, act1, pooled, pooled_pre, argmax, pre3, act3 } => {
                let [a, b, c] = model.widths;
                let mut d_act3 = vec![0.0; c];
                dense_back(p, &layers[3], act3, d_logits, Some(&mut d_act3), param_grad.as_deref_mut());
                let d_pre3: Vec<f64> = d_act3.iter().zip(pre3).map(|(g, &x)| g * silu_grad(x)).collect();
                let mut d_pooled = vec![0.0; b];
                dense_back(p, &layers[2], pooled, &d_pre3, Some(&mut d_pooled), param_grad.as_deref_mut());
                let mut d_input = vec![0.0; input.len()];
                let mut points: Vec<usize> = argmax.clone();
                points.sort_unstable();
                points.dedup();
                let mut d_pre2 = vec![0.0; b];
                let mut d_act1 = vec![0.0; a];
                let mut d_pre1 = vec![0.0; a];
                for &i in &points {
                    for j in 0..b {
                        d_pre2[j] = if argmax[j] == i { d_pooled[j] * silu_grad(pooled_pre[j]) } else { 0.0 };
                    }
                    d_act1.fill(0.0);
                    dense_back(p, &layers[1], &act1[i * a..(i + 1) * a], &d_pre2, Some(&mut d_act1), param_grad.as_deref_mut());
                    for k in 0..a {
                        d_pre1[k] = d_act1[k] * silu_grad(pre1[i * a + k]);
                    }
                    dense_back(
                        p,
                        &layers[0],
                        &input[3 * i..3 * i + 3],
                        &d_pre1,
                        Some(&mut d_input[3 * i..3 * i + 3]),
                        param_grad.as_deref_mut(),
                    );
                }
                d_input
            }
            Cache::Depth { input, pre1, act1, pre2, act2, pre3, act3 } => {
                let [w, h] = model.input_size;
                let (w1, h1) = (conv_out(w), conv_out(h));
                let mut d_act3 = vec![0.0; pre3.len()];
                dense_back(p, &layers[3], act3, d_logits, Some(&mut d_act3), param_grad.as_deref_mut());
                let d_pre3: Vec<f64> = d_act3.iter().zip(pre3).map(|(g, &x)| g * silu_grad(x)).collect();
                let mut d_act2 = vec![0.0; act2.len()];
                dense_back(p, &layers[2], act2, &d_pre3, Some(&mut d_act2), param_grad.as_deref_mut());
                let d_pre2: Vec<f64> = d_act2.iter().zip(pre2).map(|(g, &x)| g * silu_grad(x)).collect();
                let mut d_act1 = vec![0.0; act1.len()];
                conv_back(p, &layers[1], act1, w1, h1, &d_pre2, &mut d_act1, param_grad.as_deref_mut());
                let d_pre1: Vec<f64> = d_act1.iter().zip(pre1).map(|(g, &x)| g * silu_grad(x)).collect();
                let mut d_input = vec![0.0; input.len()];
                conv_back(p, &layers[0], input, w, h, &d_pre1, &mut d_input, param_grad);
                d_input
            }
        }
    }
}

fn dense(p: &[f64], l: &LayerShape, x: &[f64], y: &mut [f64]) {
    let (n_in, n_out) = (l.inputs, l.outputs);
    for o in 0..n_out {
        let row = &p[l.weight_offset + o * n_in..l.weight_offset + (o + 1) * n_in];
        y[o] = p[l.bias_offset + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

fn dense_back(p: &[f64], l: &LayerShape, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>, grad: Option<&mut [f64]>) {
    let n_in = l.inputs;
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &p[l.weight_offset + o * n_in..l.weight_offset + (o + 1) * n_in];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
    }
    if let Some(grad) = grad {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.bias_offset + o] += g;
            let row = &mut grad[l.weight_offset + o * n_in..l.weight_offset + (o + 1) * n_in];
            for (r, v) in row.iter_mut().zip(x) {
                *r += g * v;
            }
        }
    }
}

/// 3x3 stride-2 convolution with zero padding 1; channel-major layout.
fn conv(p: &[f64], l: &LayerShape, x: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (wo, ho) = (conv_out(w), conv_out(h));
    let mut y = vec![0.0; l.outputs * wo * ho];
    for o in 0..l.outputs {
        let bias = p[l.bias_offset + o];
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias;
                for c in 0..l.inputs {
                    let k = &p[l.weight_offset + (o * l.inputs + c) * 9..][..9];
                    let plane = &x[c * w * h..(c + 1) * w * h];
                    for ky in 0..3 {
                        let yy = (2 * i + ky) as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = (2 * j + kx) as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] * plane[yy as usize * w + xx as usize];
                        }
                    }
                }
                y[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_back(
    p: &[f64],
    l: &LayerShape,
    x: &[f64],
    w: usize,
    h: usize,
    dy: &[f64],
    dx: &mut [f64],
    mut grad: Option<&mut [f64]>,
) {
    let (wo, ho) = (conv_out(w), conv_out(h));
    for o in 0..l.outputs {
        for i in 0..ho {
            for j in 0..wo {
                let g = dy[(o * ho + i) * wo + j];
                if g == 0.0 {
                    continue;
                }
                if let Some(gr) = grad.as_deref_mut() {
                    gr[l.bias_offset + o] += g;
                }
                for c in 0..l.inputs {
                    let base = l.weight_offset + (o * l.inputs + c) * 9;
                    for ky in 0..3 {
                        let yy = (2 * i + ky) as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = (2 * j + kx) as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = c * w * h + yy as usize * w + xx as usize;
                            dx[idx] += g * p[base + ky * 3 + kx];
                            if let Some(gr) = grad.as_deref_mut() {
                                gr[base + ky * 3 + kx] += g * x[idx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// Any label but the true one.
    Dodge,
    /// A chosen target label.
    Impersonate,
}

/// Index of the largest entry other than `skip`; ties go to the lower index.
fn best_other(z: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in z.iter().enumerate() {
        if i != skip && (best == usize::MAX || v > z[best]) {
            best = i;
        }
    }
    best
}

/// Margin loss and its gradient. `label` is the true class for dodging and
/// the target for impersonation.
/// Unsaturated attack gap: negative once the attack goal holds.
pub fn logit_gap(logits: &[f64], label: usize, mode: AttackMode) -> f64 {
    let other = best_other(logits, label);
    match mode {
        AttackMode::Impersonate => logits[other] - logits[label],
        AttackMode::Dodge => logits[label] - logits[other],
    }
}

/// The attack goal proper: the target strictly on top (impersonation) or the
/// true label no longer on top (dodging).
pub fn goal_met(gap: f64) -> bool {
    gap < 0.0
}

pub fn logits_loss(logits: &[f64], label: usize, mode: AttackMode, margin: f64) -> (f64, Vec<f64>) {
    let other = best_other(logits, label);
    let raw = logit_gap(logits, label, mode);
    let mut grad = vec![0.0; logits.len()];
    if raw <= -margin {
        return (-margin, grad);
    }
    let s = if mode == AttackMode::Impersonate { 1.0 } else { -1.0 };
    grad[other] = s;
    grad[label] = -s;
    (raw, grad)
}

/// True when the loss is saturated at `-margin`.
pub fn is_success(logits: &[f64], label: usize, mode: AttackMode, margin: f64) -> bool {
    logit_gap(logits, label, mode) <= -margin
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One labeled flat input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by 0.1 at these fractions of the run.
    pub decay_at: Vec<f64>,
    pub weight_decay: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            learning_rate: 0.2,
            decay_at: vec![0.6, 0.85],
            weight_decay: 1e-4,
            momentum: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub final_loss: f64,
}

/// Softmax cross-entropy and its logit gradient.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[label].max(1e-300).ln();
    p[label] -= 1.0;
    (loss, p)
}

pub fn accuracy(model: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in samples {
        if argmax(&model.classify(&s.input)?) == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Minibatch SGD on softmax cross-entropy with a step learning-rate schedule.
pub fn train(mut model: ModelParams, train_set: &[Sample], validation: &[Sample], config: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let mut counts = vec![0usize; model.classes];
    for s in train_set {
        if s.label >= model.classes {
            return Err(Error::InvalidConfig(format!("label {} out of range", s.label)));
        }
        counts[s.label] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 || counts.iter().any(|&c| c > 0 && c < 8) {
        return Err(Error::InvalidConfig("training needs at least 2 classes with 8 samples each".into()));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grad = vec![0.0; model.weights.len()];
    let mut velocity = vec![0.0; model.weights.len()];
    let mut final_loss = 0.0;
    for epoch in 0..config.epochs {
        let progress = epoch as f64 / config.epochs as f64;
        let lr = config.learning_rate * 0.1f64.powi(config.decay_at.iter().filter(|&&f| progress >= f).count() as i32);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                let s = &train_set[i];
                let f = model.forward(&s.input)?;
                let (loss, d) = cross_entropy(&f.logits, s.label);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged(epoch));
                }
                epoch_loss += loss;
                f.backward(&model, &d, Some(&mut grad));
            }
            let scale = 1.0 / batch.len() as f64;
            for ((w, g), v) in model.weights.iter_mut().zip(&grad).zip(&mut velocity) {
                *v = config.momentum * *v + scale * g + config.weight_decay * *w;
                *w -= lr * *v;
            }
        }
        final_loss = epoch_loss / train_set.len() as f64;
        if !final_loss.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainingDiverged(epoch));
        }
    }
    let report = TrainReport {
        train_accuracy: accuracy(&model, train_set)?,
        validation_accuracy: accuracy(&model, validation)?,
        final_loss,
    };
    Ok((model, report))
}
