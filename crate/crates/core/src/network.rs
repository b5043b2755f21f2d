//! The full dehazing network: a three-scale encoder-decoder built from six
//! attention blocks, stride-2 downsampling, nearest+conv upsampling,
//! elementwise feature skips, and a global image-level residual.
//!
//! Parameters live in a flat name -> tensor map with deterministic (sorted)
//! iteration order. The name/shape/init schema is written once, as a
//! visitor walk, and shared by initialization, tape registration, and the
//! gradient checker.

use crate::attention::{self, Init, ParamVisitor, PcsabParams, PcsamConfig, StripGroupConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GroupResult};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const IN_CHANNELS: usize = 3;
pub const SCALES: usize = 3;

/// Architecture hyperparameters. `base_channels` widths default to
/// desk-scale (16/32/64 across the three scales); strip lengths start at
/// (7, 11) for the two channel groups and halve (rounded to odd) at each
/// coarser scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Full-resolution strip length for channel group 1 (3x3 depthwise).
    pub group1_k: usize,
    /// Full-resolution strip length for channel group 2 (5x5 depthwise).
    pub group2_k: usize,
    pub fusion_reduction: usize,
    /// When false, every block's PCSAM core is replaced by a plain
    /// depthwise 3x3 convolution: the ablation "Base" network.
    pub attention: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            group1_k: 7,
            group2_k: 11,
            fusion_reduction: 4,
            attention: true,
        }
    }
}

/// Nearest odd value to `k / 2^scale`, never below 1.
fn scaled_strip(k: usize, scale: usize) -> usize {
    let v = k as f64 / (1 << scale) as f64;
    let odd = ((v - 1.0) / 2.0).round() as i64 * 2 + 1;
    odd.max(1) as usize
}

impl NetworkConfig {
    /// Tiny configuration for network-scope gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig { base_channels: 4, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::invalid(format!(
                "base_channels must be even and >= 2, got {}",
                self.base_channels
            )));
        }
        for s in 0..SCALES {
            self.pcsam_config(s)?.validate()?;
        }
        Ok(())
    }

    pub fn scale_channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn pcsam_config(&self, scale: usize) -> Result<PcsamConfig> {
        PcsamConfig::new(
            self.scale_channels(scale),
            StripGroupConfig { k1: scaled_strip(self.group1_k, scale), k2: scaled_strip(self.group1_k, scale), dw_kernel: 3 },
            StripGroupConfig { k1: scaled_strip(self.group2_k, scale), k2: scaled_strip(self.group2_k, scale), dw_kernel: 5 },
            self.fusion_reduction,
        )
    }

    /// FNV-1a hash of the canonical config string; stored in checkpoints so
    /// a file cannot be loaded against a mismatched architecture.
    pub fn digest(&self) -> u64 {
        let canon = format!(
            "pcsa-net.v1|in={IN_CHANNELS}|base={}|g1={}|g2={}|r={}|attention={}",
            self.base_channels, self.group1_k, self.group2_k, self.fusion_reduction, self.attention
        );
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in canon.as_bytes() {
            hash ^= *byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Flat ordered parameter store. Iteration is always in sorted name order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> NetworkParams<S> {
    pub fn new() -> Self {
        NetworkParams { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor<S>) {
        self.map.insert(name, tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> NetworkParams<T> {
        NetworkParams { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl<S: Scalar> Default for NetworkParams<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Architecture schema
// ---------------------------------------------------------------------------

/// One stage block: the full attention block, or the depthwise stand-in the
/// ablation baseline uses.
pub enum StageBlock<P> {
    Pcsab { cfg: PcsamConfig, params: PcsabParams<P> },
    Base(BaseBlockParams<P>),
}

/// Residual block with the PCSAM core swapped for a depthwise 3x3 conv.
pub struct BaseBlockParams<P> {
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub dw_weight: P,
    pub dw_bias: P,
    pub alpha1: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
    pub ffn_w1: P,
    pub ffn_b1: P,
    pub ffn_w2: P,
    pub ffn_b2: P,
    pub alpha2: P,
}

impl<P> BaseBlockParams<P> {
    fn build(v: &mut impl ParamVisitor<P>, prefix: &str, c: usize) -> Result<Self> {
        Ok(BaseBlockParams {
            norm1_gamma: v.param(&format!("{prefix}.norm1.gamma"), &[c], Init::One)?,
            norm1_beta: v.param(&format!("{prefix}.norm1.beta"), &[c], Init::Zero)?,
            dw_weight: v.param(&format!("{prefix}.dw.weight"), &[c, 1, 3, 3], Init::KaimingUniform { fan_in: 9 })?,
            dw_bias: v.param(&format!("{prefix}.dw.bias"), &[c], Init::Zero)?,
            alpha1: v.param(&format!("{prefix}.alpha1"), &[c], Init::One)?,
            norm2_gamma: v.param(&format!("{prefix}.norm2.gamma"), &[c], Init::One)?,
            norm2_beta: v.param(&format!("{prefix}.norm2.beta"), &[c], Init::Zero)?,
            ffn_w1: v.param(&format!("{prefix}.ffn.conv1.weight"), &[2 * c, c, 1, 1], Init::KaimingUniform { fan_in: c })?,
            ffn_b1: v.param(&format!("{prefix}.ffn.conv1.bias"), &[2 * c], Init::Zero)?,
            ffn_w2: v.param(&format!("{prefix}.ffn.conv2.weight"), &[c, 2 * c, 1, 1], Init::KaimingUniform { fan_in: 2 * c })?,
            ffn_b2: v.param(&format!("{prefix}.ffn.conv2.bias"), &[c], Init::Zero)?,
            alpha2: v.param(&format!("{prefix}.alpha2"), &[c], Init::One)?,
        })
    }
}

/// Every parameter of the network, in schema order.
pub struct NetworkArch<P> {
    pub in_weight: P,
    pub in_bias: P,
    pub enc: Vec<StageBlock<P>>,
    pub down: Vec<(P, P)>,
    pub dec: Vec<StageBlock<P>>,
    pub up: Vec<(P, P)>,
    pub out_weight: P,
    pub out_bias: P,
}

fn build_block<P>(v: &mut impl ParamVisitor<P>, prefix: &str, cfg: &NetworkConfig, scale: usize) -> Result<StageBlock<P>> {
    if cfg.attention {
        let pcsam_cfg = cfg.pcsam_config(scale)?;
        let params = PcsabParams::build(v, &format!("{prefix}.pcsab"), &pcsam_cfg)?;
        Ok(StageBlock::Pcsab { cfg: pcsam_cfg, params })
    } else {
        Ok(StageBlock::Base(BaseBlockParams::build(v, &format!("{prefix}.base"), cfg.scale_channels(scale))?))
    }
}

/// Walk the entire parameter schema through a visitor. This is the single
/// source of truth for names, shapes, and init rules.
pub fn build_arch<P>(v: &mut impl ParamVisitor<P>, cfg: &NetworkConfig) -> Result<NetworkArch<P>> {
    cfg.validate()?;
    let c0 = cfg.base_channels;
    let in_weight = v.param("inconv.weight", &[c0, IN_CHANNELS, 3, 3], Init::KaimingUniform { fan_in: IN_CHANNELS * 9 })?;
    let in_bias = v.param("inconv.bias", &[c0], Init::Zero)?;

    let mut enc = Vec::with_capacity(SCALES);
    let mut down = Vec::with_capacity(SCALES - 1);
    for s in 0..SCALES {
        enc.push(build_block(v, &format!("enc.{s}"), cfg, s)?);
        if s + 1 < SCALES {
            let (ci, co) = (cfg.scale_channels(s), cfg.scale_channels(s + 1));
            down.push((
                v.param(&format!("down.{s}.weight"), &[co, ci, 3, 3], Init::KaimingUniform { fan_in: ci * 9 })?,
                v.param(&format!("down.{s}.bias"), &[co], Init::Zero)?,
            ));
        }
    }

    let mut dec = Vec::with_capacity(SCALES);
    let mut up = Vec::with_capacity(SCALES - 1);
    for s in (0..SCALES).rev() {
        dec.push(build_block(v, &format!("dec.{s}"), cfg, s)?);
        if s > 0 {
            let (ci, co) = (cfg.scale_channels(s), cfg.scale_channels(s - 1));
            up.push((
                v.param(&format!("up.{}.weight", s - 1), &[co, ci, 3, 3], Init::KaimingUniform { fan_in: ci * 9 })?,
                v.param(&format!("up.{}.bias", s - 1), &[co], Init::Zero)?,
            ));
        }
    }

    // Zero-initialized so a fresh network is exactly the identity through
    // the image-level skip.
    let out_weight = v.param("outconv.weight", &[IN_CHANNELS, c0, 3, 3], Init::Zero)?;
    let out_bias = v.param("outconv.bias", &[IN_CHANNELS], Init::Zero)?;

    Ok(NetworkArch { in_weight, in_bias, enc, down, dec, up, out_weight, out_bias })
}

// ---------------------------------------------------------------------------
// Visitors
// ---------------------------------------------------------------------------

struct InitVisitor<'a, S: Scalar> {
    rng: &'a mut ChaCha8Rng,
    out: &'a mut NetworkParams<S>,
}

impl<S: Scalar> ParamVisitor<Tensor<S>> for InitVisitor<'_, S> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<S>> {
        let tensor = match init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_rng_uniform(shape.to_vec(), -bound, bound, self.rng)
            }
            Init::Zero => Tensor::zeros(shape.to_vec()),
            Init::One => Tensor::ones(shape.to_vec()),
        };
        self.out.insert(name.to_string(), tensor.clone());
        Ok(tensor)
    }
}

struct RegisterVisitor<'a, S: Scalar> {
    tape: &'a mut Tape<S>,
    params: &'a NetworkParams<S>,
    requires_grad: bool,
    ids: &'a mut BTreeMap<String, TensorId>,
}

impl<S: Scalar> ParamVisitor<TensorId> for RegisterVisitor<'_, S> {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<TensorId> {
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))?;
        if tensor.shape() != shape {
            return Err(Error::shape(
                "register_params",
                format!("parameter '{name}' has shape {:?}, expected {shape:?}", tensor.shape()),
            ));
        }
        let id = self.tape.leaf(tensor.clone(), self.requires_grad);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Collects `(name, tensor)` pairs in schema walk order; the gradient
/// checker uses this ordering to rebuild the net from a flat slice of ids.
struct CollectVisitor<'a, S: Scalar> {
    params: &'a NetworkParams<S>,
    out: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamVisitor<Tensor<S>> for CollectVisitor<'_, S> {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor<S>> {
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))?;
        let _ = shape;
        self.out.push((name.to_string(), tensor.clone()));
        Ok(tensor.clone())
    }
}

/// Hands out pre-registered tape ids in schema walk order.
struct SequenceVisitor<'a> {
    ids: &'a [TensorId],
    pos: usize,
}

impl ParamVisitor<TensorId> for SequenceVisitor<'_> {
    fn param(&mut self, name: &str, _shape: &[usize], _init: Init) -> Result<TensorId> {
        let id = *self
            .ids
            .get(self.pos)
            .ok_or_else(|| Error::invalid(format!("ran out of ids at parameter '{name}'")))?;
        self.pos += 1;
        Ok(id)
    }
}

/// Fresh parameters for `cfg`, fully determined by `seed`: conv weights are
/// fan-in-scaled uniform, biases zero, residual scales one, and the final
/// output conv all-zero so `net(I) = I` at initialization.
pub fn init_params<S: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = NetworkParams::new();
    build_arch(&mut InitVisitor { rng: &mut rng, out: &mut out }, cfg)?;
    Ok(out)
}

/// A network whose parameters are registered on a tape.
pub struct TapedNetwork {
    pub arch: NetworkArch<TensorId>,
    /// Name -> leaf id, for reading per-parameter gradients after backward.
    pub ids: BTreeMap<String, TensorId>,
}

/// Put every parameter on the tape as a leaf (differentiable when
/// `requires_grad`), validating names and shapes against the schema.
pub fn register_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &NetworkParams<S>,
    cfg: &NetworkConfig,
    requires_grad: bool,
) -> Result<TapedNetwork> {
    let mut ids = BTreeMap::new();
    let arch = build_arch(&mut RegisterVisitor { tape, params, requires_grad, ids: &mut ids }, cfg)?;
    Ok(TapedNetwork { arch, ids })
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Stride-2 3x3 conv doubling the channel count: `[N,C,H,W] -> [N,2C,H/2,W/2]`.
pub fn downsample<S: Scalar>(tape: &mut Tape<S>, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
    let (_, _, h, w) = tape.value(x).dims4("downsample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("downsample", format!("spatial extents {h}x{w} must be even")));
    }
    ops::conv2d(tape, x, weight, bias, 2, 1)
}

/// Nearest x2 upsample followed by a 3x3 conv halving the channel count:
/// `[N,C,H,W] -> [N,C/2,2H,2W]`.
pub fn upsample<S: Scalar>(tape: &mut Tape<S>, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
    let (_, c, _, _) = tape.value(x).dims4("upsample")?;
    if c % 2 != 0 {
        return Err(Error::shape("upsample", format!("channel count {c} must be even")));
    }
    let up = ops::upsample_nearest2(tape, x)?;
    ops::conv2d(tape, up, weight, bias, 1, 1)
}

fn block_forward<S: Scalar>(tape: &mut Tape<S>, x: TensorId, block: &StageBlock<TensorId>) -> Result<TensorId> {
    match block {
        StageBlock::Pcsab { cfg, params } => attention::pcsab_forward(tape, x, cfg, params),
        StageBlock::Base(p) => {
            let (_, c, _, _) = tape.value(x).dims4("base_block")?;
            let normed = ops::channel_norm(tape, x, p.norm1_gamma, p.norm1_beta)?;
            let mixed = ops::depthwise_conv2d(tape, normed, p.dw_weight, p.dw_bias, 1)?;
            let a1 = ops::reshape(tape, p.alpha1, [1, c, 1, 1])?;
            let scaled = ops::mul(tape, a1, mixed)?;
            let u = ops::add(tape, x, scaled)?;

            let normed2 = ops::channel_norm(tape, u, p.norm2_gamma, p.norm2_beta)?;
            let expanded = ops::conv2d(tape, normed2, p.ffn_w1, p.ffn_b1, 1, 0)?;
            let activated = ops::relu(tape, expanded)?;
            let projected = ops::conv2d(tape, activated, p.ffn_w2, p.ffn_b2, 1, 0)?;
            let a2 = ops::reshape(tape, p.alpha2, [1, c, 1, 1])?;
            let scaled2 = ops::mul(tape, a2, projected)?;
            ops::add(tape, u, scaled2)
        }
    }
}

/// Full forward pass. Input must be `[N,3,H,W]` with H and W divisible by 4;
/// output has the same shape, and equals the input plus a learned residual.
pub fn net_forward<S: Scalar>(tape: &mut Tape<S>, x: TensorId, net: &TapedNetwork) -> Result<TensorId> {
    let (_, c, h, w) = tape.value(x).dims4("net_forward")?;
    if c != IN_CHANNELS {
        return Err(Error::shape("net_forward", format!("input has {c} channels, expected {IN_CHANNELS}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(
            "net_forward",
            format!("input is {h}x{w}; pad H and W to multiples of 4 before calling"),
        ));
    }
    let arch = &net.arch;

    let f0 = ops::conv2d(tape, x, arch.in_weight, arch.in_bias, 1, 1)?;
    let e0 = block_forward(tape, f0, &arch.enc[0])?;
    let d0 = downsample(tape, e0, arch.down[0].0, arch.down[0].1)?;
    let e1 = block_forward(tape, d0, &arch.enc[1])?;
    let d1 = downsample(tape, e1, arch.down[1].0, arch.down[1].1)?;
    let e2 = block_forward(tape, d1, &arch.enc[2])?;

    // dec[0] is the scale-2 block, dec[2] the scale-0 block.
    let g2 = block_forward(tape, e2, &arch.dec[0])?;
    let u1 = upsample(tape, g2, arch.up[0].0, arch.up[0].1)?;
    let s1 = ops::add(tape, u1, e1)?;
    let g1 = block_forward(tape, s1, &arch.dec[1])?;
    let u0 = upsample(tape, g1, arch.up[1].0, arch.up[1].1)?;
    let s0 = ops::add(tape, u0, e0)?;
    let g0 = block_forward(tape, s0, &arch.dec[2])?;

    let residual = ops::conv2d(tape, g0, arch.out_weight, arch.out_bias, 1, 1)?;
    ops::add(tape, residual, x)
}

/// Convenience inference entry point: runs the network on a plain tensor
/// without gradient tracking.
pub fn run_inference<S: Scalar>(params: &NetworkParams<S>, cfg: &NetworkConfig, input: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let net = register_params(&mut tape, params, cfg, false)?;
    let x = tape.leaf(input.clone(), false);
    let y = net_forward(&mut tape, x, &net)?;
    Ok(tape.value(y).clone())
}

// ---------------------------------------------------------------------------
// Network-scope gradient check
// ---------------------------------------------------------------------------

/// Finite-difference check of every parameter group of the tiny network on a
/// `1x3x16x16` input, plus the input itself. The zero-initialized output
/// conv is re-randomized first; otherwise it blocks gradient flow to every
/// upstream parameter and the check would pass vacuously.
///
/// `prefix_filter` restricts the finite-difference sweep to groups whose
/// name starts with the given prefix (the analytic backward pass always
/// covers everything).
pub fn network_gradcheck(
    cfg: &NetworkConfig,
    seed: u64,
    eps: f64,
    tol: f64,
    prefix_filter: Option<&str>,
) -> Result<Vec<GroupResult>> {
    let mut params: NetworkParams<f64> = init_params(cfg, seed)?;
    {
        let out_w = params.get_mut("outconv.weight").expect("schema has outconv.weight");
        let randomized = gradcheck::probe_tensor(out_w.shape(), seed ^ 0x0117).map(|v| v * 0.2);
        *out_w = randomized;
    }
    let x = gradcheck::probe_tensor(&[1, IN_CHANNELS, 16, 16], seed ^ 0x1237).map(|v| v.abs());

    // walk order defines the id layout the rebuild closure relies on
    let mut collector = CollectVisitor { params: &params, out: Vec::new() };
    build_arch(&mut collector, cfg)?;
    let ordered = collector.out;

    let build_loss = |tape: &mut Tape<f64>, param_ids: &[TensorId], x_id: TensorId| -> Result<TensorId> {
        let mut seq = SequenceVisitor { ids: param_ids, pos: 0 };
        let arch = build_arch(&mut seq, cfg)?;
        let ids = BTreeMap::new();
        let net = TapedNetwork { arch, ids };
        let y = net_forward(tape, x_id, &net)?;
        gradcheck::weighted_sum_loss(tape, y, seed ^ 0x4455)
    };

    // One backward pass gives every analytic gradient at once.
    let mut tape = Tape::new();
    let param_ids: Vec<TensorId> = ordered.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let x_id = tape.leaf(x.clone(), true);
    let loss = build_loss(&mut tape, &param_ids, x_id)?;
    tape.backward(loss)?;

    let mut results = Vec::new();
    for (idx, (name, tensor)) in ordered.iter().enumerate() {
        if let Some(prefix) = prefix_filter {
            if !name.starts_with(prefix) {
                continue;
            }
        }
        let analytic = tape
            .grad(param_ids[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
        let numeric = gradcheck::finite_diff_grad(
            |perturbed| {
                let mut t = Tape::new();
                let ids: Vec<TensorId> = ordered
                    .iter()
                    .enumerate()
                    .map(|(i, (_, v))| t.leaf(if i == idx { perturbed.clone() } else { v.clone() }, false))
                    .collect();
                let xi = t.leaf(x.clone(), false);
                let loss = build_loss(&mut t, &ids, xi)?;
                t.value(loss).item()
            },
            tensor,
            eps,
        )?;
        let mut max_rel: f64 = 0.0;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            max_rel = max_rel.max(gradcheck::relative_error(a, n));
        }
        results.push(GroupResult { name: name.clone(), max_rel_err: max_rel, passed: max_rel <= tol });
    }

    // input gradient as its own group
    {
        let analytic = tape.grad(x_id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let numeric = gradcheck::finite_diff_grad(
            |perturbed| {
                let mut t = Tape::new();
                let ids: Vec<TensorId> = ordered.iter().map(|(_, v)| t.leaf(v.clone(), false)).collect();
                let xi = t.leaf(perturbed.clone(), false);
                let loss = build_loss(&mut t, &ids, xi)?;
                t.value(loss).item()
            },
            &x,
            eps,
        )?;
        let mut max_rel: f64 = 0.0;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            max_rel = max_rel.max(gradcheck::relative_error(a, n));
        }
        results.push(GroupResult { name: "input".to_string(), max_rel_err: max_rel, passed: max_rel <= tol });
    }

    Ok(results)
}
