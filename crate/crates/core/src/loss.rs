//! Training losses: mean absolute error plus contrastive regularization in
//! a frozen random feature space.
//!
//! The contrastive term pulls the restored image toward the clear target and
//! pushes it away from the hazy input, stage by stage of a small frozen conv
//! pyramid. The cited formulation uses a pretrained classification network
//! as the feature space; bundling pretrained weights is out of scope here,
//! so the pyramid is drawn once from a seeded generator and never trained.
//! Gradients still flow through it to the anchor image.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight of the contrastive term; 0.2 unless overridden.
    pub lambda_cr: f64,
    /// Guard added to the ratio denominator so anchor == negative cannot
    /// divide by zero.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_cr: 0.2, epsilon: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cr < 0.0 {
            return Err(Error::invalid(format!("lambda_cr must be >= 0, got {}", self.lambda_cr)));
        }
        Ok(())
    }
}

/// Extractor weights are drawn from this seed unless a caller picks its own;
/// keeping it fixed makes the loss landscape identical across training seeds.
pub const DEFAULT_CR_SEED: u64 = 0x00c0_ffee;

/// Frozen three-stage conv pyramid (3 -> 8 -> 16 -> 32 channels, 3x3 stride
/// 2, ReLU after each stage) with stage weights (0.25, 0.5, 1.0).
#[derive(Debug, Clone)]
pub struct CrExtractor<S> {
    stages: Vec<(Tensor<S>, Tensor<S>)>,
    stage_weights: [f64; 3],
}

impl<S: Scalar> CrExtractor<S> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [(8usize, 3usize), (16, 8), (32, 16)];
        let stages = dims
            .iter()
            .map(|&(co, ci)| {
                let bound = (6.0 / (ci * 9) as f64).sqrt();
                let w = Tensor::from_rng_uniform([co, ci, 3, 3], -bound, bound, &mut rng);
                let b = Tensor::from_rng_uniform([co], -0.1, 0.1, &mut rng);
                (w, b)
            })
            .collect();
        CrExtractor { stages, stage_weights: [0.25, 0.5, 1.0] }
    }

    pub fn stage_weights(&self) -> &[f64; 3] {
        &self.stage_weights
    }

    pub fn stages(&self) -> &[(Tensor<S>, Tensor<S>)] {
        &self.stages
    }

    /// Register the frozen weights on a tape and return the three stage
    /// feature maps for `x`. The weights are non-differentiable leaves;
    /// gradients pass through to `x` only.
    pub fn features(&self, tape: &mut Tape<S>, x: TensorId) -> Result<Vec<TensorId>> {
        let mut features = Vec::with_capacity(self.stages.len());
        let mut current = x;
        for (w, b) in &self.stages {
            let w_id = tape.leaf(w.clone(), false);
            let b_id = tape.leaf(b.clone(), false);
            let conv = ops::conv2d(tape, current, w_id, b_id, 2, 1)?;
            current = ops::relu(tape, conv)?;
            features.push(current);
        }
        Ok(features)
    }
}

fn check_same_shape<S: Scalar>(op: &'static str, tape: &Tape<S>, a: TensorId, b: TensorId) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(op, format!("shapes differ: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss<S: Scalar>(tape: &mut Tape<S>, pred: TensorId, target: TensorId) -> Result<TensorId> {
    check_same_shape("l1_loss", tape, pred, target)?;
    let diff = ops::sub(tape, pred, target)?;
    let magnitude = ops::abs(tape, diff)?;
    ops::mean_all(tape, magnitude)
}

/// Contrastive regularization:
/// `sum_i w_i * L1(phi_i(anchor), phi_i(positive)) / (L1(phi_i(anchor), phi_i(negative)) + eps)`.
pub fn cr_loss<S: Scalar>(
    tape: &mut Tape<S>,
    anchor: TensorId,
    positive: TensorId,
    negative: TensorId,
    extractor: &CrExtractor<S>,
    cfg: &LossConfig,
) -> Result<TensorId> {
    check_same_shape("cr_loss", tape, anchor, positive)?;
    check_same_shape("cr_loss", tape, anchor, negative)?;
    let anchor_feats = extractor.features(tape, anchor)?;
    let positive_feats = extractor.features(tape, positive)?;
    let negative_feats = extractor.features(tape, negative)?;

    let mut total: Option<TensorId> = None;
    for (i, &w) in extractor.stage_weights().iter().enumerate() {
        let pull = l1_loss(tape, anchor_feats[i], positive_feats[i])?;
        let push = l1_loss(tape, anchor_feats[i], negative_feats[i])?;
        let guarded = ops::add_scalar(tape, push, cfg.epsilon)?;
        let ratio = ops::div(tape, pull, guarded)?;
        let weighted = ops::scale(tape, ratio, w)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => ops::add(tape, acc, weighted)?,
        });
    }
    Ok(total.expect("extractor has at least one stage"))
}

/// `L1(pred, gt) + lambda * CR(pred, gt, hazy)`. With `lambda_cr == 0` this
/// is exactly the L1 loss; the contrastive term is not evaluated at all.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    gt: TensorId,
    hazy: TensorId,
    extractor: &CrExtractor<S>,
    cfg: &LossConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let reconstruction = l1_loss(tape, pred, gt)?;
    if cfg.lambda_cr == 0.0 {
        return Ok(reconstruction);
    }
    let contrastive = cr_loss(tape, pred, gt, hazy, extractor, cfg)?;
    let weighted = ops::scale(tape, contrastive, cfg.lambda_cr)?;
    ops::add(tape, reconstruction, weighted)
}
