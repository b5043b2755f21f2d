//! Deterministic training: Adam with cosine annealing, seeded batch
//! sampling, global-norm gradient clipping, and binary checkpoints that
//! round-trip bit-exactly.

use crate::data::{derive_seed, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{self, CrExtractor, LossConfig};
use crate::metrics;
use crate::network::{self, NetworkConfig, NetworkParams};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const STREAM_BATCH: u64 = 0x6a7c;

/// Optimizer and schedule hyperparameters. Defaults are desk scale; the
/// full-scale recipe (batch 64, 80k iterations) stays reachable through the
/// same fields.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub iterations: usize,
    pub lambda_cr: f64,
    /// Stored for recipe fidelity; appears in no update equation.
    pub gamma: f64,
    /// Global L2 gradient clip; the contrastive ratio can spike early.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1.5e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 8,
            iterations: 500,
            lambda_cr: 0.2,
            gamma: 0.25,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::invalid(format!("need 0 < lr_min <= lr0, got {} and {}", self.lr_min, self.lr0)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::invalid("batch and iterations must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda_cr: self.lambda_cr, ..LossConfig::default() }
    }
}

/// Cosine annealing from `lr0` at t=0 to `lr_min` at t=iterations.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    let t = t.min(cfg.iterations);
    let progress = t as f64 / cfg.iterations as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam first/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(params: &NetworkParams<S>) -> Self {
        let zero_map = |p: &NetworkParams<S>| {
            p.iter().map(|(name, t)| (name.clone(), Tensor::zeros(t.shape().to_vec()))).collect()
        };
        AdamState { m: zero_map(params), v: zero_map(params), step: 0 }
    }

    pub fn cast<T: Scalar>(&self) -> AdamState<T> {
        AdamState {
            m: self.m.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            v: self.v.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            step: self.step,
        }
    }
}

/// Scale all gradients by `clip / norm` when the global L2 norm exceeds
/// `clip`. Returns the pre-clip norm.
pub fn clip_gradients<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, clip: f64) -> f64 {
    let mut sq_sum = 0.0f64;
    for tensor in grads.values() {
        for &g in tensor.data() {
            let g = g.to_f64();
            sq_sum += g * g;
        }
    }
    let norm = sq_sum.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = S::from_f64(clip / norm);
        for tensor in grads.values_mut() {
            for g in tensor.data_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update, applied in sorted parameter-name order.
pub fn adam_step<S: Scalar>(
    params: &mut NetworkParams<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);
    let beta1 = S::from_f64(cfg.beta1);
    let beta2 = S::from_f64(cfg.beta2);
    let one_minus_beta1 = S::from_f64(1.0 - cfg.beta1);
    let one_minus_beta2 = S::from_f64(1.0 - cfg.beta2);
    let inv_bias1 = S::from_f64(1.0 / bias1);
    let inv_bias2 = S::from_f64(1.0 / bias2);
    let lr_s = S::from_f64(lr);
    let eps = S::from_f64(cfg.adam_eps);

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = grads
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for parameter '{name}'")))?;
        let m = state.m.get_mut(&name).expect("moment buffers track params");
        let v = state.v.get_mut(&name).expect("moment buffers track params");
        let p = params.get_mut(&name).expect("iterating existing names");
        for i in 0..p.numel() {
            let g = grad.data()[i];
            let mi = beta1 * m.data()[i] + one_minus_beta1 * g;
            let vi = beta2 * v.data()[i] + one_minus_beta2 * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi * inv_bias1;
            let v_hat = vi * inv_bias2;
            p.data_mut()[i] = p.data()[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Batch indices for one iteration: a seeded shuffle of the dataset,
/// truncated to the batch size. Stateless in the iteration number, which is
/// what makes checkpoint resume bit-exact.
pub fn batch_indices(seed: u64, iteration: usize, dataset_len: usize, batch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BATCH, iteration as u64));
    order.shuffle(&mut rng);
    order.truncate(batch.min(dataset_len));
    order
}

fn stack_batch<S: Scalar>(pairs: &[ImagePair<S>], indices: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, h, w) = match pairs[indices[0]].hazy.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("train", "images must be [3,H,W]".to_string())),
    };
    let n = indices.len();
    let mut hazy = Tensor::zeros([n, c, h, w]);
    let mut clear = Tensor::zeros([n, c, h, w]);
    for (slot, &idx) in indices.iter().enumerate() {
        let pair = &pairs[idx];
        if pair.hazy.shape() != [c, h, w] || pair.clear.shape() != [c, h, w] {
            return Err(Error::shape("train", format!("pair {idx} has mismatched shape")));
        }
        hazy.data_mut()[slot * c * h * w..(slot + 1) * c * h * w].copy_from_slice(pair.hazy.data());
        clear.data_mut()[slot * c * h * w..(slot + 1) * c * h * w].copy_from_slice(pair.clear.data());
    }
    Ok((hazy, clear))
}

/// Everything a finished (or checkpoint-resumed) run hands back.
#[derive(Debug)]
pub struct TrainReport {
    /// Loss per iteration, covering the iterations this call executed.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub params: NetworkParams<f32>,
    pub moments: AdamState<f32>,
}

impl TrainReport {
    /// Line-oriented plain-text report: iteration, lr, loss.
    pub fn report_lines(&self, start_iter: usize) -> String {
        let mut text = String::from("# iteration lr loss\n");
        for (i, (loss, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            text.push_str(&format!("{} {:.6e} {:.6e}\n", start_iter + i, lr, loss));
        }
        text
    }
}

/// Train from a fresh initialization.
pub fn train_loop(cfg: &TrainConfig, net_cfg: &NetworkConfig, pairs: &[ImagePair<f32>]) -> Result<TrainReport> {
    let params = network::init_params(net_cfg, cfg.seed)?;
    let moments = AdamState::zeros_like(&params);
    train_loop_resume(cfg, net_cfg, pairs, params, moments, 0)
}

/// Continue training from existing parameters and moments at `start_iter`.
/// Because batch sampling is stateless per iteration, `save at k, load,
/// continue` reproduces the uninterrupted run exactly.
pub fn train_loop_resume(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    pairs: &[ImagePair<f32>],
    params: NetworkParams<f32>,
    moments: AdamState<f32>,
    start_iter: usize,
) -> Result<TrainReport> {
    train_span(cfg, net_cfg, pairs, params, moments, start_iter, cfg.iterations)
}

/// Run iterations `[start_iter, end_iter)` of the schedule defined by `cfg`
/// (the cosine horizon stays `cfg.iterations` regardless of where the span
/// ends, so a run can stop for a checkpoint and continue later).
pub fn train_span(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    pairs: &[ImagePair<f32>],
    mut params: NetworkParams<f32>,
    mut moments: AdamState<f32>,
    start_iter: usize,
    end_iter: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    net_cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    for (i, pair) in pairs.iter().enumerate() {
        let (_, h, w) = match pair.hazy.shape()[..] {
            [c, h, w] if c == 3 => (c, h, w),
            _ => return Err(Error::shape("train", format!("pair {i}: images must be [3,H,W]"))),
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("train", format!("pair {i} is {h}x{w}; pad to multiples of 4")));
        }
    }

    let extractor: CrExtractor<f32> = CrExtractor::new(loss::DEFAULT_CR_SEED);
    let loss_cfg = cfg.loss_config();
    let end_iter = end_iter.min(cfg.iterations);
    let mut losses = Vec::with_capacity(end_iter.saturating_sub(start_iter));
    let mut lrs = Vec::with_capacity(losses.capacity());

    for iter in start_iter..end_iter {
        let indices = batch_indices(cfg.seed, iter, pairs.len(), cfg.batch);
        let (hazy, clear) = stack_batch(pairs, &indices)?;

        let mut tape = Tape::new();
        let net = network::register_params(&mut tape, &params, net_cfg, true)?;
        let hazy_id = tape.leaf(hazy, false);
        let clear_id = tape.leaf(clear, false);
        let pred = network::net_forward(&mut tape, hazy_id, &net)?;
        let loss_id = loss::total_loss(&mut tape, pred, clear_id, hazy_id, &extractor, &loss_cfg)?;
        let loss_value = tape.value(loss_id).item()?.to_f64();
        tape.backward(loss_id)?;

        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, &id) in &net.ids {
            let grad = tape
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()));
            grads.insert(name.clone(), grad);
        }
        clip_gradients(&mut grads, cfg.clip_norm);

        let lr = cosine_lr(iter, cfg);
        adam_step(&mut params, &grads, &mut moments, lr, cfg)?;

        losses.push(loss_value);
        lrs.push(lr);
    }

    Ok(TrainReport { losses, lrs, params, moments })
}

/// Per-image PSNR/SSIM of the network restoration against the clear target.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

pub fn evaluate(params: &NetworkParams<f32>, net_cfg: &NetworkConfig, pairs: &[ImagePair<f32>]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (index, pair) in pairs.iter().enumerate() {
        let shape = pair.hazy.shape().to_vec();
        let batched = Tensor::new(
            vec![1, shape[0], shape[1], shape[2]],
            pair.hazy.data().to_vec(),
        )?;
        let restored = network::run_inference(params, net_cfg, &batched)?;
        let restored = Tensor::new(shape, restored.into_data())?;
        let psnr_db = metrics::psnr(&restored, &pair.clear)?;
        let ssim = metrics::ssim(&restored, &pair.clear)?;
        psnr_sum += psnr_db;
        ssim_sum += ssim;
        rows.push(EvalRow { index, psnr_db, ssim });
    }
    Ok(EvalReport {
        mean_psnr_db: psnr_sum / rows.len() as f64,
        mean_ssim: ssim_sum / rows.len() as f64,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: [u8; 4] = *b"PCSA";
const CKPT_VERSION: u32 = 1;
const MOMENT_M_PREFIX: &str = "adam.m.";
const MOMENT_V_PREFIX: &str = "adam.v.";
const MOMENT_STEP_NAME: &str = "adam.t";

#[derive(Debug)]
pub struct Checkpoint {
    pub digest: u64,
    pub params: NetworkParams<f32>,
    pub moments: Option<AdamState<f32>>,
}

impl Checkpoint {
    /// Fail with a digest mismatch unless this file was written for `cfg`.
    pub fn verify(&self, cfg: &NetworkConfig) -> Result<()> {
        let expected = cfg.digest();
        if self.digest != expected {
            return Err(Error::CkptDigestMismatch { found: self.digest, expected });
        }
        Ok(())
    }
}

fn write_tensor_entry(out: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::invalid(format!("tensor name too long: {name}")));
    }
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    let rank = tensor.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::invalid("tensor rank exceeds format limit"));
    }
    out.push(rank as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Byte layout: `magic(4) | version u32 | config-digest u64 | count u32 |`
/// then per tensor `name_len u16 | name | rank u8 | dims u32 x rank |
/// f32 payload`, all integers little-endian. Optimizer moments ride in the
/// same table under reserved `adam.*` names.
pub fn checkpoint_save(
    path: &Path,
    digest: u64,
    params: &NetworkParams<f32>,
    moments: Option<&AdamState<f32>>,
) -> Result<()> {
    let mut entries: Vec<(String, &Tensor<f32>)> = params.iter().map(|(n, t)| (n.clone(), t)).collect();
    let step_tensor;
    if let Some(state) = moments {
        for (name, t) in &state.m {
            entries.push((format!("{MOMENT_M_PREFIX}{name}"), t));
        }
        for (name, t) in &state.v {
            entries.push((format!("{MOMENT_V_PREFIX}{name}"), t));
        }
        step_tensor = Tensor::scalar(state.step as f32);
        entries.push((MOMENT_STEP_NAME.to_string(), &step_tensor));
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in &entries {
        write_tensor_entry(&mut out, name, tensor)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CkptTruncated(format!(
                "needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_decode(&bytes)
}

pub fn checkpoint_decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::CkptBadMagic { found: magic.try_into().unwrap() });
    }
    let version = cur.u32_le("version")?;
    if version != CKPT_VERSION {
        return Err(Error::CkptVersion { found: version, expected: CKPT_VERSION });
    }
    let digest = cur.u64_le("config digest")?;
    let count = cur.u32_le("tensor count")?;

    let mut params = NetworkParams::new();
    let mut m: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut v: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut step: Option<u64> = None;

    for _ in 0..count {
        let name_len = cur.u16_le("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::invalid("non-utf8 tensor name in checkpoint"))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32_le("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(4 * numel, &format!("payload of '{name}'"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;

        if name == MOMENT_STEP_NAME {
            step = Some(tensor.data()[0] as u64);
        } else if let Some(stripped) = name.strip_prefix(MOMENT_M_PREFIX) {
            m.insert(stripped.to_string(), tensor);
        } else if let Some(stripped) = name.strip_prefix(MOMENT_V_PREFIX) {
            v.insert(stripped.to_string(), tensor);
        } else {
            params.insert(name, tensor);
        }
    }

    let moments = match (m.is_empty() && v.is_empty(), step) {
        (true, None) => None,
        (false, Some(step)) => Some(AdamState { m, v, step }),
        _ => {
            return Err(Error::invalid(
                "checkpoint has a partial optimizer state (moments without step or vice versa)",
            ))
        }
    };
    Ok(Checkpoint { digest, params, moments })
}
