//! Minimal dense-network engine.
//!
//! Everything here exists to support one architecture: a shared backbone of
//! fully-connected layers with two heads hanging off it. The primary head
//! reads the final backbone activation; the watermark head reads the
//! concatenation of selected ("tapped") backbone activations, which lets it
//! monitor several depths at once. Forward, manual backprop, SGD updates,
//! and global magnitude pruning are implemented directly on `f64` values —
//! no batching, no autodiff, deterministic evaluation order throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Pointwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation `z`. ReLU takes the
    /// right-derivative 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(CoreError::Parse {
                location: "activation".into(),
                message: format!("unknown activation {other:?}"),
            }),
        }
    }
}

/// Shape declaration for one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// One dense layer: `out = act(W x + b)`, weights stored row-major
/// (`w[row][col]` with `row < out_dim`, `col < in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.b.len()
    }

    pub fn in_dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }
}

/// An ordered stack of dense layers with chaining dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkParams {
    pub layers: Vec<DenseLayer>,
}

impl NetworkParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let params = Self { layers };
        params.validate()?;
        Ok(params)
    }

    /// Glorot-uniform initialization: weights from `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, biases zero. Draw order is fixed
    /// (layer, row, col) so a seeded generator reproduces the network.
    pub fn init<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(CoreError::Structural(
                    "layer dimensions must be >= 1".into(),
                ));
            }
            let a = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let w = (0..spec.out_dim)
                .map(|_| (0..spec.in_dim).map(|_| rng.gen::<f64>() * 2.0 * a - a).collect())
                .collect();
            layers.push(DenseLayer {
                w,
                b: vec![0.0; spec.out_dim],
                activation: spec.activation,
            });
        }
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.w.len() != layer.b.len() {
                return Err(CoreError::Structural(format!(
                    "layer {i}: {} weight rows vs {} biases",
                    layer.w.len(),
                    layer.b.len()
                )));
            }
            if layer.w.is_empty() || layer.in_dim() == 0 {
                return Err(CoreError::Structural(format!("layer {i} has a zero dimension")));
            }
            for row in &layer.w {
                if row.len() != layer.in_dim() {
                    return Err(CoreError::Structural(format!("layer {i}: ragged weight rows")));
                }
            }
            if i > 0 && layer.in_dim() != self.layers[i - 1].out_dim() {
                return Err(CoreError::Structural(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    layer.in_dim(),
                    i - 1,
                    self.layers[i - 1].out_dim()
                )));
            }
            let finite = layer.w.iter().flatten().chain(layer.b.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(CoreError::Numerical {
                    layer: i,
                    message: "non-finite parameter".into(),
                });
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total number of weights (biases not counted).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() * l.in_dim()).sum()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec::new(l.in_dim(), l.out_dim(), l.activation))
            .collect()
    }
}

/// Which head a forward/backward pass drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Primary,
    Watermark,
}

/// Frozen copy of the publishable parameters (backbone + primary head),
/// kept as the anchor `w0` for the displacement regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub backbone: NetworkParams,
    pub c_p: NetworkParams,
}

/// Backbone with two heads. The published artifact is backbone + `c_p`;
/// `c_wm` and the tap indices stay with the owner.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    pub backbone: NetworkParams,
    pub c_p: NetworkParams,
    pub c_wm: NetworkParams,
    /// Backbone layer indices whose post-activations feed `c_wm`,
    /// ascending; the head consumes their concatenation.
    pub taps: Vec<usize>,
    /// Anchor parameters captured after primary training; not serialized.
    pub w0: Option<Box<ParamSnapshot>>,
}

impl MultiTaskModel {
    pub fn new(
        backbone: NetworkParams,
        c_p: NetworkParams,
        c_wm: NetworkParams,
        taps: Vec<usize>,
    ) -> Result<Self> {
        let model = Self {
            backbone,
            c_p,
            c_wm,
            taps,
            w0: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.c_p.validate()?;
        self.c_wm.validate()?;
        if self.backbone.is_empty() {
            return Err(CoreError::Structural("backbone must have at least one layer".into()));
        }
        if !self.c_p.is_empty() && self.c_p.in_dim() != self.backbone.out_dim() {
            return Err(CoreError::Structural(format!(
                "primary head expects {} inputs but backbone emits {}",
                self.c_p.in_dim(),
                self.backbone.out_dim()
            )));
        }
        let mut prev: Option<usize> = None;
        for &t in &self.taps {
            if t >= self.backbone.layers.len() {
                return Err(CoreError::Structural(format!("tap {t} beyond backbone depth")));
            }
            if prev.is_some_and(|p| p >= t) {
                return Err(CoreError::Structural("taps must be strictly ascending".into()));
            }
            prev = Some(t);
        }
        if !self.c_wm.is_empty() {
            let want = self.tap_width();
            if self.c_wm.in_dim() != want {
                return Err(CoreError::Structural(format!(
                    "watermark head expects {} inputs but taps provide {want}",
                    self.c_wm.in_dim()
                )));
            }
            if self.c_wm.out_dim() != 2 {
                return Err(CoreError::Structural(format!(
                    "watermark head must emit 2 logits, emits {}",
                    self.c_wm.out_dim()
                )));
            }
        }
        Ok(())
    }

    /// Total width of the tapped backbone activations.
    pub fn tap_width(&self) -> usize {
        self.taps.iter().map(|&t| self.backbone.layers[t].out_dim()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.in_dim()
    }

    pub fn primary_classes(&self) -> usize {
        self.c_p.out_dim()
    }

    /// Capture the current backbone + primary head as the anchor `w0`.
    pub fn snapshot_w0(&mut self) {
        self.w0 = Some(Box::new(ParamSnapshot {
            backbone: self.backbone.clone(),
            c_p: self.c_p.clone(),
        }));
    }
}

/// Post-activation record of one pass; `logits` duplicates the last entry
/// of `head` for convenience.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub backbone: Vec<Vec<f64>>,
    pub head: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Forward pass retaining pre-activations, for backprop.
struct FullTrace {
    backbone_pre: Vec<Vec<f64>>,
    backbone_post: Vec<Vec<f64>>,
    head_pre: Vec<Vec<f64>>,
    head_post: Vec<Vec<f64>>,
    head_input: Vec<f64>,
}

fn affine(layer: &DenseLayer, x: &[f64]) -> Vec<f64> {
    layer
        .w
        .iter()
        .zip(&layer.b)
        .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
        .collect()
}

fn check_finite(values: &[f64], layer: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Numerical {
            layer,
            message: "non-finite activation".into(),
        })
    }
}

fn run_stack(params: &NetworkParams, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut pres = Vec::with_capacity(params.layers.len());
    let mut posts = Vec::with_capacity(params.layers.len());
    let mut current = x.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let pre = affine(layer, &current);
        check_finite(&pre, i)?;
        let post: Vec<f64> = pre.iter().map(|&z| layer.activation.apply(z)).collect();
        current = post.clone();
        pres.push(pre);
        posts.push(post);
    }
    Ok((pres, posts))
}

fn full_forward(model: &MultiTaskModel, x: &[f64], head: Head) -> Result<FullTrace> {
    if x.len() != model.input_dim() {
        return Err(CoreError::Structural(format!(
            "input has {} coordinates, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    let (backbone_pre, backbone_post) = run_stack(&model.backbone, x)?;
    let (head_params, head_input) = match head {
        Head::Primary => (
            &model.c_p,
            backbone_post.last().cloned().unwrap_or_default(),
        ),
        Head::Watermark => {
            let mut concat = Vec::with_capacity(model.tap_width());
            for &t in &model.taps {
                concat.extend_from_slice(&backbone_post[t]);
            }
            (&model.c_wm, concat)
        }
    };
    if head_params.is_empty() {
        return Err(CoreError::Structural(format!(
            "{} head has no layers",
            match head {
                Head::Primary => "primary",
                Head::Watermark => "watermark",
            }
        )));
    }
    if head_params.in_dim() != head_input.len() {
        return Err(CoreError::Structural(format!(
            "head expects {} inputs, got {}",
            head_params.in_dim(),
            head_input.len()
        )));
    }
    let (head_pre, head_post) = run_stack(head_params, &head_input)?;
    Ok(FullTrace {
        backbone_pre,
        backbone_post,
        head_pre,
        head_post,
        head_input,
    })
}

/// Run the model on one input. Logits are raw — softmax only ever happens
/// inside the loss.
pub fn forward(model: &MultiTaskModel, x: &[f64], head: Head) -> Result<ForwardTrace> {
    let full = full_forward(model, x, head)?;
    let logits = full.head_post.last().cloned().unwrap_or_default();
    Ok(ForwardTrace {
        backbone: full.backbone_post,
        head: full.head_post,
        logits,
    })
}

/// Class prediction: argmax over logits, first index on ties.
pub fn predict(model: &MultiTaskModel, x: &[f64], head: Head) -> Result<usize> {
    let trace = forward(model, x, head)?;
    Ok(argmax(&trace.logits))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `(input, label)` pairs the chosen head classifies correctly.
pub fn accuracy(
    model: &MultiTaskModel,
    head: Head,
    inputs: &[Vec<f64>],
    labels: impl IntoIterator<Item = usize>,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, y) in inputs.iter().zip(labels) {
        if predict(model, x, head)? == y {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / total as f64)
}

/// Numerically stable softmax cross-entropy: `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    log_sum - (logits[target] - max)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of one layer, matching its weight/bias shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            w: vec![vec![0.0; layer.in_dim()]; layer.out_dim()],
            b: vec![0.0; layer.out_dim()],
        }
    }
}

/// Gradients for the whole model; sections not on the active head's path
/// stay identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub backbone: Vec<LayerGrad>,
    pub c_p: Vec<LayerGrad>,
    pub c_wm: Vec<LayerGrad>,
}

impl ModelGrad {
    pub fn zeros_like(model: &MultiTaskModel) -> Self {
        Self {
            backbone: model.backbone.layers.iter().map(LayerGrad::zeros_like).collect(),
            c_p: model.c_p.layers.iter().map(LayerGrad::zeros_like).collect(),
            c_wm: model.c_wm.layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        fn add(section: &mut [LayerGrad], other: &[LayerGrad]) {
            for (a, b) in section.iter_mut().zip(other) {
                for (ra, rb) in a.w.iter_mut().zip(&b.w) {
                    for (va, vb) in ra.iter_mut().zip(rb) {
                        *va += vb;
                    }
                }
                for (va, vb) in a.b.iter_mut().zip(&b.b) {
                    *va += vb;
                }
            }
        }
        add(&mut self.backbone, &other.backbone);
        add(&mut self.c_p, &other.c_p);
        add(&mut self.c_wm, &other.c_wm);
    }

    pub fn scale(&mut self, factor: f64) {
        fn scale(section: &mut [LayerGrad], factor: f64) {
            for layer in section {
                for row in &mut layer.w {
                    for v in row {
                        *v *= factor;
                    }
                }
                for v in &mut layer.b {
                    *v *= factor;
                }
            }
        }
        scale(&mut self.backbone, factor);
        scale(&mut self.c_p, factor);
        scale(&mut self.c_wm, factor);
    }
}

/// Backprop one stack given the gradient w.r.t. its final post-activation.
/// Returns the per-layer gradients and the gradient w.r.t. the stack input.
fn backprop_stack(
    params: &NetworkParams,
    input: &[f64],
    pres: &[Vec<f64>],
    posts: &[Vec<f64>],
    d_output: Vec<f64>,
) -> (Vec<LayerGrad>, Vec<f64>) {
    let mut grads: Vec<LayerGrad> = params.layers.iter().map(LayerGrad::zeros_like).collect();
    let mut carry = d_output;
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let layer_input: &[f64] = if i == 0 { input } else { &posts[i - 1] };
        let dz: Vec<f64> = carry
            .iter()
            .zip(&pres[i])
            .map(|(da, &z)| da * layer.activation.derivative(z))
            .collect();
        for (grad_row, &dzj) in grads[i].w.iter_mut().zip(&dz) {
            for (g, &xi) in grad_row.iter_mut().zip(layer_input) {
                *g += dzj * xi;
            }
        }
        grads[i].b.copy_from_slice(&dz);
        let mut d_input = vec![0.0; layer.in_dim()];
        for (r, row) in layer.w.iter().enumerate() {
            let dzj = dz[r];
            for (d, &w) in d_input.iter_mut().zip(row) {
                *d += dzj * w;
            }
        }
        carry = d_input;
    }
    (grads, carry)
}

/// Cross-entropy loss and its exact gradient for one example. Gradients
/// flow through the chosen head into the backbone; the other head's section
/// of the result stays zero.
pub fn backward(
    model: &MultiTaskModel,
    x: &[f64],
    target: usize,
    head: Head,
) -> Result<(f64, ModelGrad)> {
    let head_params = match head {
        Head::Primary => &model.c_p,
        Head::Watermark => &model.c_wm,
    };
    let classes = head_params.out_dim();
    if target >= classes {
        return Err(CoreError::Domain(format!(
            "target {target} out of range for {classes} classes"
        )));
    }
    let trace = full_forward(model, x, head)?;
    let logits = trace.head_post.last().cloned().unwrap_or_default();
    let loss = cross_entropy(&logits, target);
    if !loss.is_finite() {
        return Err(CoreError::Numerical {
            layer: model.backbone.layers.len() + head_params.layers.len(),
            message: "non-finite loss".into(),
        });
    }
    let mut d_logits = softmax(&logits);
    d_logits[target] -= 1.0;

    let (head_grads, d_head_input) = backprop_stack(
        head_params,
        &trace.head_input,
        &trace.head_pre,
        &trace.head_post,
        d_logits,
    );

    // Seed the backbone with the head-input gradient: the primary head pulls
    // on the final activation, the watermark head pulls on each tapped
    // activation through its slice of the concatenation.
    let depth = model.backbone.layers.len();
    let mut seeds: Vec<Vec<f64>> = model
        .backbone
        .layers
        .iter()
        .map(|l| vec![0.0; l.out_dim()])
        .collect();
    match head {
        Head::Primary => {
            seeds[depth - 1].copy_from_slice(&d_head_input);
        }
        Head::Watermark => {
            let mut offset = 0;
            for &t in &model.taps {
                let width = model.backbone.layers[t].out_dim();
                for (s, v) in seeds[t].iter_mut().zip(&d_head_input[offset..offset + width]) {
                    *s += v;
                }
                offset += width;
            }
        }
    }

    let mut backbone_grads: Vec<LayerGrad> =
        model.backbone.layers.iter().map(LayerGrad::zeros_like).collect();
    let mut carry: Vec<f64> = Vec::new();
    for i in (0..depth).rev() {
        let layer = &model.backbone.layers[i];
        let mut da = std::mem::take(&mut seeds[i]);
        if !carry.is_empty() {
            for (d, c) in da.iter_mut().zip(&carry) {
                *d += c;
            }
        }
        let layer_input: &[f64] = if i == 0 { x } else { &trace.backbone_post[i - 1] };
        let dz: Vec<f64> = da
            .iter()
            .zip(&trace.backbone_pre[i])
            .map(|(d, &z)| d * layer.activation.derivative(z))
            .collect();
        for (grad_row, &dzj) in backbone_grads[i].w.iter_mut().zip(&dz) {
            for (g, &xi) in grad_row.iter_mut().zip(layer_input) {
                *g += dzj * xi;
            }
        }
        backbone_grads[i].b.copy_from_slice(&dz);
        let mut d_input = vec![0.0; layer.in_dim()];
        for (r, row) in layer.w.iter().enumerate() {
            for (d, &w) in d_input.iter_mut().zip(row) {
                *d += dz[r] * w;
            }
        }
        carry = d_input;
    }

    let mut grad = ModelGrad::zeros_like(model);
    grad.backbone = backbone_grads;
    match head {
        Head::Primary => grad.c_p = head_grads,
        Head::Watermark => grad.c_wm = head_grads,
    }
    Ok((loss, grad))
}

/// Which parameter sections an update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sections {
    pub backbone: bool,
    pub c_p: bool,
    pub c_wm: bool,
}

impl Sections {
    pub const ALL: Sections = Sections {
        backbone: true,
        c_p: true,
        c_wm: true,
    };
    pub const PUBLISHED: Sections = Sections {
        backbone: true,
        c_p: true,
        c_wm: false,
    };
    pub const BACKBONE_AND_WM: Sections = Sections {
        backbone: true,
        c_p: false,
        c_wm: true,
    };
    pub const PRIMARY_HEAD: Sections = Sections {
        backbone: false,
        c_p: true,
        c_wm: false,
    };
    pub const WM_HEAD: Sections = Sections {
        backbone: false,
        c_p: false,
        c_wm: true,
    };
}

/// One SGD step on a layer stack: `w <- w - lr * (grad + weight_decay * w)`,
/// elementwise over weights and biases.
pub fn sgd_step(params: &mut NetworkParams, grads: &[LayerGrad], lr: f64, weight_decay: f64) {
    for (layer, grad) in params.layers.iter_mut().zip(grads) {
        for (row, grad_row) in layer.w.iter_mut().zip(&grad.w) {
            for (w, g) in row.iter_mut().zip(grad_row) {
                *w -= lr * (g + weight_decay * *w);
            }
        }
        for (b, g) in layer.b.iter_mut().zip(&grad.b) {
            *b -= lr * (g + weight_decay * *b);
        }
    }
}

/// Apply one SGD step to the selected sections of the model.
pub fn sgd_step_model(
    model: &mut MultiTaskModel,
    grad: &ModelGrad,
    lr: f64,
    weight_decay: f64,
    sections: Sections,
) {
    if sections.backbone {
        sgd_step(&mut model.backbone, &grad.backbone, lr, weight_decay);
    }
    if sections.c_p {
        sgd_step(&mut model.c_p, &grad.c_p, lr, weight_decay);
    }
    if sections.c_wm {
        sgd_step(&mut model.c_wm, &grad.c_wm, lr, weight_decay);
    }
}

/// Boolean mask over backbone weights; `true` marks a pruned coordinate.
/// Biases are never pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub layers: Vec<Vec<Vec<bool>>>,
}

impl PruneMask {
    pub fn pruned_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .map(|row| row.iter().filter(|&&m| m).count())
            .sum()
    }
}

/// Zero the `floor(rho * W)` smallest-magnitude backbone weights globally,
/// where `W` counts all backbone weights. Ties break by (layer, row, col)
/// so the result is deterministic.
pub fn apply_prune_mask(model: &MultiTaskModel, rho: f64) -> Result<(MultiTaskModel, PruneMask)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CoreError::Domain(format!("rho must lie in [0, 1], got {rho}")));
    }
    let total: usize = model.backbone.layers.iter().map(|l| l.out_dim() * l.in_dim()).sum();
    let to_prune = (rho * total as f64).floor() as usize;
    let mut entries: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(total);
    for (li, layer) in model.backbone.layers.iter().enumerate() {
        for (ri, row) in layer.w.iter().enumerate() {
            for (ci, &w) in row.iter().enumerate() {
                entries.push((w.abs(), li, ri, ci));
            }
        }
    }
    entries.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("weights are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut pruned = model.clone();
    let mut mask = PruneMask {
        layers: model
            .backbone
            .layers
            .iter()
            .map(|l| vec![vec![false; l.in_dim()]; l.out_dim()])
            .collect(),
    };
    for &(_, li, ri, ci) in entries.iter().take(to_prune) {
        pruned.backbone.layers[li].w[ri][ci] = 0.0;
        mask.layers[li][ri][ci] = true;
    }
    Ok((pruned, mask))
}

/// Re-zero masked coordinates; used to hold a pruning pattern fixed while
/// fine-tuning continues.
pub fn enforce_prune_mask(model: &mut MultiTaskModel, mask: &PruneMask) {
    for (layer, mask_layer) in model.backbone.layers.iter_mut().zip(&mask.layers) {
        for (row, mask_row) in layer.w.iter_mut().zip(mask_layer) {
            for (w, &dead) in row.iter_mut().zip(mask_row) {
                if dead {
                    *w = 0.0;
                }
            }
        }
    }
}

/// Squared L2 distance between the published sections of two parameter sets.
pub fn published_sq_distance(a: &MultiTaskModel, b: &ParamSnapshot) -> Result<f64> {
    fn section(a: &NetworkParams, b: &NetworkParams) -> Result<f64> {
        if a.layers.len() != b.layers.len() {
            return Err(CoreError::Structural("snapshot depth mismatch".into()));
        }
        let mut acc = 0.0;
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            if la.out_dim() != lb.out_dim() || la.in_dim() != lb.in_dim() {
                return Err(CoreError::Structural("snapshot shape mismatch".into()));
            }
            for (ra, rb) in la.w.iter().zip(&lb.w) {
                for (va, vb) in ra.iter().zip(rb) {
                    let d = va - vb;
                    acc += d * d;
                }
            }
            for (va, vb) in la.b.iter().zip(&lb.b) {
                let d = va - vb;
                acc += d * d;
            }
        }
        Ok(acc)
    }
    Ok(section(&a.backbone, &b.backbone)? + section(&a.c_p, &b.c_p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> MultiTaskModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let backbone = NetworkParams::init(
            &[
                LayerSpec::new(3, 4, Activation::Relu),
                LayerSpec::new(4, 5, Activation::Tanh),
            ],
            &mut rng,
        )
        .unwrap();
        let c_p = NetworkParams::init(&[LayerSpec::new(5, 2, Activation::Identity)], &mut rng).unwrap();
        let c_wm = NetworkParams::init(&[LayerSpec::new(9, 2, Activation::Identity)], &mut rng).unwrap();
        MultiTaskModel::new(backbone, c_p, c_wm, vec![0, 1]).unwrap()
    }

    #[test]
    fn zero_model_emits_zero_logits() {
        let zeros = |in_dim: usize, out_dim: usize| DenseLayer {
            w: vec![vec![0.0; in_dim]; out_dim],
            b: vec![0.0; out_dim],
            activation: Activation::Identity,
        };
        let model = MultiTaskModel::new(
            NetworkParams::new(vec![zeros(3, 4)]).unwrap(),
            NetworkParams::new(vec![zeros(4, 2)]).unwrap(),
            NetworkParams::new(vec![zeros(4, 2)]).unwrap(),
            vec![0],
        )
        .unwrap();
        let t = forward(&model, &[1.0, -2.0, 3.0], Head::Primary).unwrap();
        assert_eq!(t.logits, vec![0.0, 0.0]);
        let t = forward(&model, &[1.0, -2.0, 3.0], Head::Watermark).unwrap();
        assert_eq!(t.logits, vec![0.0, 0.0]);
    }

    #[test]
    fn single_relu_unit() {
        // One 1x1 layer: weight 2, bias 1, relu, x = 3 -> 7.
        let layer = DenseLayer {
            w: vec![vec![2.0]],
            b: vec![1.0],
            activation: Activation::Relu,
        };
        let params = NetworkParams::new(vec![layer]).unwrap();
        let (_, posts) = run_stack(&params, &[3.0]).unwrap();
        assert_eq!(posts[0], vec![7.0]);
    }

    #[test]
    fn wm_backward_leaves_primary_head_untouched() {
        let model = toy_model();
        let (_, grad) = backward(&model, &[0.3, -0.2, 0.9], 1, Head::Watermark).unwrap();
        for layer in &grad.c_p {
            assert!(layer.w.iter().flatten().all(|&g| g == 0.0));
            assert!(layer.b.iter().all(|&g| g == 0.0));
        }
        // And the backbone does receive gradient through the taps.
        let backbone_norm: f64 = grad
            .backbone
            .iter()
            .flat_map(|l| l.w.iter().flatten())
            .map(|g| g * g)
            .sum();
        assert!(backbone_norm > 0.0);
    }

    #[test]
    fn primary_backward_leaves_wm_head_untouched() {
        let model = toy_model();
        let (_, grad) = backward(&model, &[0.3, -0.2, 0.9], 0, Head::Primary).unwrap();
        for layer in &grad.c_wm {
            assert!(layer.w.iter().flatten().all(|&g| g == 0.0));
            assert!(layer.b.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut params = NetworkParams::new(vec![DenseLayer {
            w: vec![vec![1.0]],
            b: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let grads = vec![LayerGrad {
            w: vec![vec![0.0]],
            b: vec![0.0],
        }];
        // lr = 0 leaves everything alone.
        sgd_step(&mut params, &grads, 0.0, 0.5);
        assert_eq!(params.layers[0].w[0][0], 1.0);
        // w = 1, grad = 0, wd = 0.1, lr = 1 -> 0.9.
        sgd_step(&mut params, &grads, 1.0, 0.1);
        assert!((params.layers[0].w[0][0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // Minimize (w - 3)^2 by explicit gradient steps through sgd_step.
        let mut params = NetworkParams::new(vec![DenseLayer {
            w: vec![vec![0.0]],
            b: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        for _ in 0..200 {
            let w = params.layers[0].w[0][0];
            let grads = vec![LayerGrad {
                w: vec![vec![2.0 * (w - 3.0)]],
                b: vec![0.0],
            }];
            sgd_step(&mut params, &grads, 0.1, 0.0);
        }
        assert!((params.layers[0].w[0][0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn prune_fraction_exact() {
        let model = toy_model();
        let total: usize = model.backbone.layers.iter().map(|l| l.out_dim() * l.in_dim()).sum();
        assert_eq!(total, 3 * 4 + 4 * 5);
        let (pruned, mask) = apply_prune_mask(&model, 0.3).unwrap();
        assert_eq!(mask.pruned_count(), (0.3 * total as f64).floor() as usize);
        let zeros = pruned
            .backbone
            .layers
            .iter()
            .flat_map(|l| l.w.iter().flatten())
            .filter(|&&w| w == 0.0)
            .count();
        assert!(zeros >= mask.pruned_count());
        // rho = 0 is the identity, rho = 1 clears the backbone.
        let (same, _) = apply_prune_mask(&model, 0.0).unwrap();
        assert_eq!(same.backbone, model.backbone);
        let (cleared, _) = apply_prune_mask(&model, 1.0).unwrap();
        assert!(cleared
            .backbone
            .layers
            .iter()
            .flat_map(|l| l.w.iter().flatten())
            .all(|&w| w == 0.0));
        // Biases survive full pruning.
        assert_eq!(cleared.backbone.layers[0].b, model.backbone.layers[0].b);
    }

    #[test]
    fn taps_must_ascend() {
        let model = toy_model();
        let bad = MultiTaskModel::new(
            model.backbone.clone(),
            model.c_p.clone(),
            NetworkParams::default(),
            vec![1, 0],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let model = toy_model();
        let err = forward(&model, &[1.0, 2.0], Head::Primary).unwrap_err();
        assert!(matches!(err, CoreError::Structural(_)));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [1.0, -0.5, 2.0];
        let direct: f64 = {
            let exps: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
            let sum: f64 = exps.iter().sum();
            -(exps[1] / sum).ln()
        };
        assert!((cross_entropy(&logits, 1) - direct).abs() < 1e-12);
    }
}
