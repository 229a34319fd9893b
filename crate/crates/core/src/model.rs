// SPDX-License-Identifier: Apache-2.0

//! A per-anchor detection head with hand-written backpropagation, and the
//! SGD training step that wires assignment and losses together.
//!
//! The head maps each anchor's feature row to `num_classes` class logits and
//! 4 box deltas through one shared linear map, optionally preceded by a single
//! `tanh` hidden layer.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchors::AnchorSet;
use crate::assignment::{
    apply_weights, assign_clean_with, assign_hard_with, hard_reweight, AssignParams,
};
use crate::error::{check_len, invalid, Error, Result};
use crate::geometry::{encode, iou_matrix, BoxDelta};
use crate::losses::{loss_report, AnchorTarget, FocalParams, LossReport, Role};
use crate::math::{self, sigmoid};
use crate::synth::Scene;

const INIT_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadShape {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Width of the optional tanh layer; 0 means a purely linear head.
    pub hidden: usize,
}

impl HeadShape {
    pub fn outputs(&self) -> usize {
        self.num_classes + 4
    }

    fn input_of_output_layer(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.feature_dim
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        let hidden = if self.hidden > 0 {
            self.feature_dim * self.hidden + self.hidden
        } else {
            0
        };
        hidden + self.input_of_output_layer() * self.outputs() + self.outputs()
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Blocks {
    hidden_w: usize,
    hidden_b: usize,
    out_w: usize,
    out_b: usize,
}

impl Blocks {
    fn of(shape: &HeadShape) -> Self {
        let (hw, hb) = if shape.hidden > 0 {
            (shape.feature_dim * shape.hidden, shape.hidden)
        } else {
            (0, 0)
        };
        Blocks {
            hidden_w: 0,
            hidden_b: hw,
            out_w: hw + hb,
            out_b: hw + hb + shape.input_of_output_layer() * shape.outputs(),
        }
    }
}

/// Head parameters as one flat vector.
///
/// Layout: `[hidden W (feature_dim x hidden), hidden b, out W (in x outputs),
/// out b]`, row-major, the hidden blocks present only when `hidden > 0`. In
/// the output blocks the first `num_classes` columns are class logits and the
/// last 4 are `dx, dy, dw, dh`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub shape: HeadShape,
    pub values: Vec<f64>,
}

impl HeadParams {
    /// Prior-probability initialization: class biases `-ln((1 - prior) / prior)`,
    /// class weights `N(0, init_std^2)`, regression weights and biases zero.
    /// Hidden weights, when present, are `N(0, 1 / feature_dim)`.
    pub fn init(shape: HeadShape, prior: f64, init_std: f64, seed: u64) -> Result<Self> {
        if shape.feature_dim == 0 || shape.num_classes == 0 {
            return Err(invalid(
                "head shape",
                "feature_dim and num_classes must be positive",
            ));
        }
        if !(prior > 0.0 && prior < 1.0) {
            return Err(invalid("prior_prob", "must lie in (0, 1)"));
        }
        if !(init_std.is_finite() && init_std >= 0.0) {
            return Err(invalid("init_std", "must be finite and >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let blocks = Blocks::of(&shape);
        let mut values = alloc::vec![0.0; shape.num_params()];
        if shape.hidden > 0 {
            let normal = Normal::new(0.0, 1.0 / math::sqrt(shape.feature_dim as f64))
                .map_err(|_| invalid("init_std", "bad hidden init scale"))?;
            for v in &mut values[blocks.hidden_w..blocks.hidden_b] {
                *v = normal.sample(&mut rng);
            }
        }
        let normal =
            Normal::new(0.0, init_std).map_err(|_| invalid("init_std", "bad init scale"))?;
        let outs = shape.outputs();
        for r in 0..shape.input_of_output_layer() {
            for c in 0..shape.num_classes {
                values[blocks.out_w + r * outs + c] = normal.sample(&mut rng);
            }
        }
        let bias = -math::ln((1.0 - prior) / prior);
        for c in 0..shape.num_classes {
            values[blocks.out_b + c] = bias;
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: HeadShape) -> Self {
        Self {
            shape,
            values: alloc::vec![0.0; shape.num_params()],
        }
    }

    fn blocks(&self) -> Blocks {
        Blocks::of(&self.shape)
    }

    /// Mutable view of the output-layer bias (`num_classes + 4` entries).
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let b = self.blocks();
        &mut self.values[b.out_b..]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Forward pass results for a batch of anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub num_classes: usize,
    /// Row-major `anchors x num_classes`.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    /// Hidden activations (empty for a linear head).
    hidden: Vec<f64>,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn prob(&self, anchor: usize, class: usize) -> f64 {
        self.probs[anchor * self.num_classes + class]
    }
}

/// Apply the head to a row-major `n x feature_dim` feature matrix.
pub fn forward(params: &HeadParams, features: &[f64]) -> Result<HeadOutput> {
    let shape = params.shape;
    let d = shape.feature_dim;
    if !features.len().is_multiple_of(d) {
        return Err(Error::LengthMismatch {
            what: "feature matrix (multiple of feature_dim)",
            expected: d * (features.len() / d + 1),
            actual: features.len(),
        });
    }
    let n = features.len() / d;
    let b = params.blocks();
    let w = &params.values;
    let outs = shape.outputs();
    let k = shape.num_classes;
    let inner = shape.input_of_output_layer();

    let mut hidden = Vec::new();
    if shape.hidden > 0 {
        hidden.reserve(n * shape.hidden);
        for x in features.chunks_exact(d) {
            for j in 0..shape.hidden {
                let mut acc = w[b.hidden_b + j];
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w[b.hidden_w + i * shape.hidden + j];
                }
                hidden.push(math::tanh(acc));
            }
        }
    }
    let input: &[f64] = if shape.hidden > 0 { &hidden } else { features };

    let mut logits = Vec::with_capacity(n * k);
    let mut deltas = Vec::with_capacity(n);
    let mut row = alloc::vec![0.0; outs];
    for x in input.chunks_exact(inner) {
        row.copy_from_slice(&w[b.out_b..b.out_b + outs]);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[b.out_w + i * outs..b.out_w + (i + 1) * outs];
            for (r, &wv) in row.iter_mut().zip(wrow) {
                *r += xi * wv;
            }
        }
        logits.extend_from_slice(&row[..k]);
        deltas.push(BoxDelta::new(row[k], row[k + 1], row[k + 2], row[k + 3]));
    }
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(HeadOutput {
        num_classes: k,
        logits,
        probs,
        deltas,
        hidden,
    })
}

/// Gradient of a loss w.r.t. every head parameter, given its gradient w.r.t.
/// the logits and deltas of `forward(params, features)`.
pub fn backward(
    params: &HeadParams,
    features: &[f64],
    out: &HeadOutput,
    grad_logits: &[f64],
    grad_deltas: &[BoxDelta],
) -> Result<Vec<f64>> {
    let shape = params.shape;
    let n = out.len();
    let k = shape.num_classes;
    let outs = shape.outputs();
    let d = shape.feature_dim;
    check_len("features", n * d, features.len())?;
    check_len("logit gradient", n * k, grad_logits.len())?;
    check_len("delta gradient", n, grad_deltas.len())?;
    let b = params.blocks();
    let inner = shape.input_of_output_layer();
    let input: &[f64] = if shape.hidden > 0 {
        &out.hidden
    } else {
        features
    };
    let mut grad = alloc::vec![0.0; params.values.len()];
    let mut gy = alloc::vec![0.0; outs];
    let mut gh = alloc::vec![0.0; shape.hidden];
    for a in 0..n {
        gy[..k].copy_from_slice(&grad_logits[a * k..(a + 1) * k]);
        gy[k..].copy_from_slice(&grad_deltas[a].to_array());
        if gy.iter().all(|&g| g == 0.0) {
            continue;
        }
        let x = &input[a * inner..(a + 1) * inner];
        for (o, &g) in gy.iter().enumerate() {
            grad[b.out_b + o] += g;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut grad[b.out_w + i * outs..b.out_w + (i + 1) * outs];
            for (r, &g) in row.iter_mut().zip(&gy) {
                *r += xi * g;
            }
        }
        if shape.hidden > 0 {
            for (j, slot) in gh.iter_mut().enumerate() {
                let wrow = &params.values[b.out_w + j * outs..b.out_w + (j + 1) * outs];
                let back: f64 = wrow.iter().zip(&gy).map(|(w, g)| w * g).sum();
                let h = x[j];
                *slot = back * (1.0 - h * h);
            }
            let feat = &features[a * d..(a + 1) * d];
            for (i, &fi) in feat.iter().enumerate() {
                let row =
                    &mut grad[b.hidden_w + i * shape.hidden..b.hidden_w + (i + 1) * shape.hidden];
                for (r, &g) in row.iter_mut().zip(&gh) {
                    *r += fi * g;
                }
            }
            for (j, &g) in gh.iter().enumerate() {
                grad[b.hidden_b + j] += g;
            }
        }
    }
    Ok(grad)
}

/// Which halves of the cleanliness method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct Method {
    /// Cleanliness soft labels on top-N positives. Off: IoU-threshold hard
    /// labels with the ignore band dropped from the losses.
    pub soft_labels: bool,
    /// Cleanliness-based sample re-weighting. Off: every weight is 1.
    pub reweighting: bool,
}

/// Both halves on, so a partial `[method]` table only switches off what it names.
impl Default for Method {
    fn default() -> Self {
        Method::FULL
    }
}

impl Method {
    pub const BASELINE: Method = Method {
        soft_labels: false,
        reweighting: false,
    };
    pub const SOFT_LABELS: Method = Method {
        soft_labels: true,
        reweighting: false,
    };
    pub const REWEIGHTING: Method = Method {
        soft_labels: false,
        reweighting: true,
    };
    pub const FULL: Method = Method {
        soft_labels: true,
        reweighting: true,
    };

    pub fn name(&self) -> &'static str {
        match (self.soft_labels, self.reweighting) {
            (false, false) => "baseline",
            (true, false) => "sl",
            (false, true) => "sr",
            (true, true) => "sl+sr",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        [
            Self::BASELINE,
            Self::SOFT_LABELS,
            Self::REWEIGHTING,
            Self::FULL,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }
}

/// Everything a training step needs besides the head and the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub method: Method,
    pub assign: AssignParams,
    pub focal: FocalParams,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::FULL,
            assign: AssignParams::default(),
            focal: FocalParams::default(),
            beta: 1.0 / 9.0,
        }
    }
}

/// Supervision for one scene, fixed for the current iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    pub targets: Vec<AnchorTarget>,
    /// `encode(anchor, matched gt)` for positives, zero elsewhere.
    pub target_deltas: Vec<BoxDelta>,
}

/// Build per-anchor supervision from the current head outputs.
pub fn build_targets(
    anchors: &AnchorSet,
    scene: &Scene,
    out: &HeadOutput,
    cfg: &LossConfig,
) -> Result<SceneTargets> {
    check_len("head outputs", anchors.len(), out.len())?;
    let gts = scene.gt_boxes();
    let classes = scene.gt_classes();
    let ious = iou_matrix(&anchors.boxes, &gts);
    let conf = |a: usize, g: usize| out.prob(a, classes[g]);
    let targets = if cfg.method.soft_labels {
        let clean = assign_clean_with(&anchors.boxes, &ious, &gts, &out.deltas, &cfg.assign, conf)?;
        clean.targets(&classes, true, cfg.method.reweighting)
    } else {
        let hard = assign_hard_with(&ious, &cfg.assign);
        let mut t = hard.targets(&classes);
        if cfg.method.reweighting {
            let w = hard_reweight(&anchors.boxes, &gts, &hard, &out.deltas, &cfg.assign, conf)?;
            apply_weights(&mut t, &w);
        }
        t
    };
    let mut target_deltas = alloc::vec![BoxDelta::ZERO; anchors.len()];
    for (a, t) in targets.iter().enumerate() {
        if let (Role::Positive, Some(g)) = (t.role, t.gt) {
            target_deltas[a] = encode(&anchors.boxes[a], &gts[g])?;
        }
    }
    Ok(SceneTargets {
        targets,
        target_deltas,
    })
}

/// Losses and parameter gradient of one scene for fixed targets.
pub fn scene_objective(
    params: &HeadParams,
    scene: &Scene,
    out: &HeadOutput,
    targets: &SceneTargets,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let report = loss_report(
        &out.probs,
        out.num_classes,
        &out.deltas,
        &targets.target_deltas,
        &targets.targets,
        &cfg.focal,
        cfg.beta,
    )?;
    let grad = backward(
        params,
        &scene.features,
        out,
        &report.grad_logits,
        &report.grad_deltas,
    )?;
    Ok((report, grad))
}

/// Forward, assign, losses and gradient for one scene.
pub fn scene_loss(
    params: &HeadParams,
    anchors: &AnchorSet,
    scene: &Scene,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let out = forward(params, &scene.features)?;
    let targets = build_targets(anchors, scene, &out, cfg)?;
    scene_objective(params, scene, &out, &targets, cfg)
}

/// Step learning-rate schedule: `base * factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<u64>,
    pub factor: f64,
    /// Linear warm-up length in iterations.
    pub warmup: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.05,
            milestones: Vec::new(),
            factor: 0.1,
            warmup: 0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base >= 0.0) {
            return Err(invalid("lr.base", "must be finite and >= 0"));
        }
        if !(self.factor.is_finite() && self.factor > 0.0) {
            return Err(invalid("lr.factor", "must be positive"));
        }
        Ok(())
    }

    pub fn rate_at(&self, iteration: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        let mut lr = self.base * math::powf(self.factor, passed as f64);
        if iteration < self.warmup {
            lr *= (iteration + 1) as f64 / self.warmup as f64;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: HeadParams,
    pub velocity: Vec<f64>,
    pub iteration: u64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Mean losses of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub num_positives: usize,
    pub lr: f64,
}

impl TrainState {
    pub fn new(params: HeadParams, schedule: LrSchedule) -> Self {
        let n = params.values.len();
        Self {
            params,
            velocity: alloc::vec![0.0; n],
            iteration: 0,
            schedule,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    /// Apply one SGD-with-momentum update from an averaged gradient:
    /// `v = mu v + (g + wd theta)`, `theta -= lr v`.
    pub fn apply_gradient(&mut self, grad: &[f64]) -> Result<f64> {
        check_len("gradient", self.params.values.len(), grad.len())?;
        let lr = self.schedule.rate_at(self.iteration);
        for ((theta, v), &g) in self
            .params
            .values
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grad)
        {
            *v = self.momentum * *v + g + self.weight_decay * *theta;
            *theta -= lr * *v;
        }
        self.iteration += 1;
        Ok(lr)
    }

    /// One iteration over a batch of scenes: per-scene forward, assignment
    /// and losses, gradients averaged over the batch, then one update.
    /// Soft labels and weights are recomputed from the outputs at the
    /// current parameters and not differentiated.
    pub fn train_step(
        &mut self,
        anchors: &AnchorSet,
        batch: &[&Scene],
        cfg: &LossConfig,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(invalid("batch", "must contain at least one scene"));
        }
        let mut grad = alloc::vec![0.0; self.params.values.len()];
        let mut cls = 0.0;
        let mut reg = 0.0;
        let mut npos = 0;
        for scene in batch {
            let (report, g) = scene_loss(&self.params, anchors, scene, cfg)?;
            if !report.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            cls += report.cls_loss;
            reg += report.reg_loss;
            npos += report.num_positives;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        let lr = self.apply_gradient(&grad)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite("head parameters"));
        }
        Ok(StepReport {
            cls_loss: cls * scale,
            reg_loss: reg * scale,
            num_positives: npos,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn shape(hidden: usize) -> HeadShape {
        HeadShape {
            feature_dim: 3,
            num_classes: 2,
            hidden,
        }
    }

    #[test]
    fn zero_weights_give_sigmoid_of_bias() {
        let mut p = HeadParams::zeros(shape(0));
        p.output_bias_mut()[..2].copy_from_slice(&[0.3, -1.2]);
        let out = forward(&p, &[0.5, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        for a in 0..2 {
            assert_eq!(out.prob(a, 0), sigmoid(0.3));
            assert_eq!(out.prob(a, 1), sigmoid(-1.2));
        }
    }

    #[test]
    fn prior_init_gives_one_percent_and_zero_deltas() {
        for hidden in [0, 5] {
            let p = HeadParams::init(shape(hidden), 0.01, 0.01, 3).unwrap();
            let out = forward(&p, &[0.0; 6]).unwrap();
            assert!(out.probs.iter().all(|&q| (q - 0.01).abs() < 1e-6));
            assert!(out.deltas.iter().all(|d| *d == BoxDelta::ZERO));
            let out = forward(&p, &[0.4, -0.3, 0.9]).unwrap();
            assert!(out.deltas.iter().all(|d| *d == BoxDelta::ZERO));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = HeadParams::zeros(shape(0));
        assert!(matches!(
            forward(&p, &[1.0; 4]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for hidden in [0, 4] {
            let mut p = HeadParams::init(shape(hidden), 0.1, 0.5, 9).unwrap();
            for (i, v) in p.values.iter_mut().enumerate() {
                *v += 0.05 * ((i * 37 % 11) as f64 - 5.0);
            }
            let x = vec![0.3, -0.7, 1.1, 0.9, 0.2, -0.4];
            let gl = vec![0.4, -0.9, 1.3, 0.2];
            let gd = vec![
                BoxDelta::new(0.5, -0.1, 0.3, 0.8),
                BoxDelta::new(-0.6, 0.7, 0.0, 0.1),
            ];
            // linear functional of the outputs: sum gl*logits + gd*deltas
            let objective = |p: &HeadParams| {
                let o = forward(p, &x).unwrap();
                let a: f64 = o.logits.iter().zip(&gl).map(|(z, g)| z * g).sum();
                let b: f64 = o
                    .deltas
                    .iter()
                    .zip(&gd)
                    .map(|(d, g)| {
                        d.to_array()
                            .iter()
                            .zip(g.to_array())
                            .map(|(u, v)| u * v)
                            .sum::<f64>()
                    })
                    .sum();
                a + b
            };
            let out = forward(&p, &x).unwrap();
            let analytic = backward(&p, &x, &out, &gl, &gd).unwrap();
            let h = 1e-6;
            for i in 0..p.values.len() {
                let mut up = p.clone();
                up.values[i] += h;
                let mut dn = p.clone();
                dn.values[i] -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
                assert!(err < 1e-6, "param {i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn lr_schedule_steps_and_warms_up() {
        let s = LrSchedule {
            base: 0.1,
            milestones: vec![10, 20],
            factor: 0.1,
            warmup: 4,
        };
        assert!((s.rate_at(0) - 0.025).abs() < 1e-15);
        assert_eq!(s.rate_at(5), 0.1);
        assert!((s.rate_at(10) - 0.01).abs() < 1e-15);
        assert!((s.rate_at(25) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::BASELINE,
            Method::SOFT_LABELS,
            Method::REWEIGHTING,
            Method::FULL,
        ] {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
        assert_eq!(Method::from_name("nope"), None);
    }
}
