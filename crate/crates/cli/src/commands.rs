//! Subcommand implementations. Every handler resolves its settings as
//! explicit flag > config file > default, echoes the resolved values, then
//! runs.

use crate::config::{echo_line, FileOverrides};
use anyhow::{bail, Context, Result};
use clap::Args;
use pcsa_core::attention;
use pcsa_core::data::{self, DatasetSpec};
use pcsa_core::network::{self, NetworkConfig};
use pcsa_core::tensor::Tensor;
use pcsa_core::train::{self, TrainConfig};
use pcsa_core::{gradcheck, Tape};
use std::path::PathBuf;
use std::time::Instant;

/// flag > file > default
macro_rules! resolve {
    ($args:expr, $file:expr, $field:ident, $key:literal, $default:expr) => {
        match $args.$field.clone() {
            Some(v) => v,
            None => $file.get($key)?.unwrap_or($default),
        }
    };
}

fn required_path(flag: Option<PathBuf>, file: &FileOverrides, key: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => {
            let _ = file.get::<String>(key)?; // mark as known either way
            Ok(p)
        }
        None => match file.get::<String>(key)? {
            Some(s) => Ok(PathBuf::from(s)),
            None => bail!("missing required option --{key}"),
        },
    }
}

// ---------------------------------------------------------------------------
// shared network flags
// ---------------------------------------------------------------------------

#[derive(Args, Clone)]
pub struct NetArgs {
    /// Channel width at full resolution (doubles per scale).
    #[arg(long)]
    base_channels: Option<usize>,
    /// Full-resolution strip length of channel group 1.
    #[arg(long)]
    group1_k: Option<usize>,
    /// Full-resolution strip length of channel group 2.
    #[arg(long)]
    group2_k: Option<usize>,
    /// Replace every attention core with a depthwise 3x3 conv (the
    /// ablation baseline).
    #[arg(long)]
    no_attention: bool,
}

fn resolve_net(args: &NetArgs, file: &FileOverrides) -> Result<NetworkConfig> {
    let defaults = NetworkConfig::default();
    let cfg = NetworkConfig {
        base_channels: resolve!(args, file, base_channels, "base-channels", defaults.base_channels),
        group1_k: resolve!(args, file, group1_k, "group1-k", defaults.group1_k),
        group2_k: resolve!(args, file, group2_k, "group2-k", defaults.group2_k),
        fusion_reduction: defaults.fusion_reduction,
        attention: if args.no_attention { false } else { file.get::<bool>("attention")?.unwrap_or(true) },
    };
    cfg.validate()?;
    echo_line("base-channels", cfg.base_channels);
    echo_line("group1-k", cfg.group1_k);
    echo_line("group2-k", cfg.group2_k);
    echo_line("attention", cfg.attention);
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    /// Number of image pairs.
    #[arg(long)]
    count: Option<usize>,
    /// Square image size in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the PPM pairs and the manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Transmission range lower bound.
    #[arg(long)]
    t_min: Option<f64>,
    /// Transmission range upper bound.
    #[arg(long)]
    t_max: Option<f64>,
}

pub fn run_synth(args: SynthArgs, file: &FileOverrides) -> Result<()> {
    let out_dir = required_path(args.out_dir.clone(), file, "out-dir")?;
    let spec = DatasetSpec {
        count: resolve!(args, file, count, "count", 100),
        size: resolve!(args, file, size, "size", 32),
        seed: resolve!(args, file, seed, "seed", 0),
        t_min: resolve!(args, file, t_min, "t-min", 0.2),
        t_max: resolve!(args, file, t_max, "t-max", 0.9),
    };
    file.finish()?;
    echo_line("count", spec.count);
    echo_line("size", spec.size);
    echo_line("seed", spec.seed);
    echo_line("t-min", spec.t_min);
    echo_line("t-max", spec.t_max);
    echo_line("out-dir", out_dir.display());
    spec.validate()?;

    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut entries = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let pair: data::HazePair<f32> = data::gen_pair(&spec, index)?;
        let hazy_name = format!("hazy_{index:04}.ppm");
        let clear_name = format!("clear_{index:04}.ppm");
        data::ppm_write(&pair.hazy, &out_dir.join(&hazy_name))?;
        data::ppm_write(&pair.clear, &out_dir.join(&clear_name))?;
        entries.push((hazy_name, clear_name));
    }
    data::write_manifest(&out_dir.join("manifest.txt"), &entries)?;
    println!("wrote {} pairs to {}", spec.count, out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest ("hazy.ppm clear.ppm" per line).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    /// Contrastive-regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Recipe parameter carried in the config; not used by any update rule.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the checkpoint.
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    /// Where to write the plain-text training report.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Optional held-out manifest evaluated after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

pub fn run_train(args: TrainArgs, file: &FileOverrides) -> Result<()> {
    let data_path = required_path(args.data.clone(), file, "data")?;
    let ckpt_out = required_path(args.ckpt_out.clone(), file, "ckpt-out")?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        iterations: resolve!(args, file, iters, "iters", defaults.iterations),
        batch: resolve!(args, file, batch, "batch", defaults.batch),
        lr0: resolve!(args, file, lr, "lr", defaults.lr0),
        lr_min: resolve!(args, file, lr_min, "lr-min", defaults.lr_min),
        lambda_cr: resolve!(args, file, lambda, "lambda", defaults.lambda_cr),
        gamma: resolve!(args, file, gamma, "gamma", defaults.gamma),
        seed: resolve!(args, file, seed, "seed", defaults.seed),
        ..defaults
    };
    let net_cfg = resolve_net(&args.net, file)?;
    file.finish()?;
    echo_line("data", data_path.display());
    echo_line("iters", cfg.iterations);
    echo_line("batch", cfg.batch);
    echo_line("lr", cfg.lr0);
    echo_line("lr-min", cfg.lr_min);
    echo_line("lambda", cfg.lambda_cr);
    echo_line("gamma", cfg.gamma);
    echo_line("seed", cfg.seed);
    echo_line("ckpt-out", ckpt_out.display());
    cfg.validate()?;

    let pairs = data::load_pairs::<f32>(&data_path)
        .with_context(|| format!("cannot load dataset {}", data_path.display()))?;
    println!("training on {} pairs", pairs.len());
    let report = train::train_loop(&cfg, &net_cfg, &pairs)?;
    train::checkpoint_save(&ckpt_out, net_cfg.digest(), &report.params, Some(&report.moments))?;
    println!("final loss {:.6e}", report.losses.last().copied().unwrap_or(f64::NAN));
    println!("checkpoint written to {}", ckpt_out.display());

    let mut report_text = report.report_lines(0);
    if let Some(eval_path) = &args.eval_data {
        let eval_pairs = data::load_pairs::<f32>(eval_path)?;
        let eval = train::evaluate(&report.params, &net_cfg, &eval_pairs)?;
        println!("eval mean psnr {:.3} dB, mean ssim {:.4}", eval.mean_psnr_db, eval.mean_ssim);
        report_text.push_str(&format!("# eval mean_psnr_db {:.6} mean_ssim {:.6}\n", eval.mean_psnr_db, eval.mean_ssim));
    }
    if let Some(path) = &args.report_out {
        std::fs::write(path, report_text)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dehaze
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct DehazeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Hazy input image (binary PPM).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Restored output image.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

pub fn run_dehaze(args: DehazeArgs, file: &FileOverrides) -> Result<()> {
    let ckpt_path = required_path(args.ckpt.clone(), file, "ckpt")?;
    let in_path = required_path(args.input.clone(), file, "in")?;
    let out_path = required_path(args.out.clone(), file, "out")?;
    let net_cfg = resolve_net(&args.net, file)?;
    file.finish()?;
    echo_line("ckpt", ckpt_path.display());
    echo_line("in", in_path.display());
    echo_line("out", out_path.display());

    let checkpoint = train::checkpoint_load(&ckpt_path)?;
    checkpoint.verify(&net_cfg)?;
    let image: Tensor<f32> = data::ppm_read(&in_path)?;
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => bail!("ppm decoder produced a non-image tensor of shape {other:?}"),
    };
    let batched = Tensor::new(vec![1, c, h, w], image.into_data())?;
    let restored = network::run_inference(&checkpoint.params, &net_cfg, &batched)?;
    let restored = Tensor::new(vec![3, h, w], restored.into_data())?;
    data::ppm_write(&restored, &out_path)?;
    println!("dehazed image written to {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

pub fn run_eval(args: EvalArgs, file: &FileOverrides) -> Result<()> {
    let ckpt_path = required_path(args.ckpt.clone(), file, "ckpt")?;
    let data_path = required_path(args.data.clone(), file, "data")?;
    let net_cfg = resolve_net(&args.net, file)?;
    file.finish()?;
    echo_line("ckpt", ckpt_path.display());
    echo_line("data", data_path.display());

    let checkpoint = train::checkpoint_load(&ckpt_path)?;
    checkpoint.verify(&net_cfg)?;
    let pairs = data::load_pairs::<f32>(&data_path)?;
    let report = train::evaluate(&checkpoint.params, &net_cfg, &pairs)?;
    println!("index psnr_db ssim");
    for row in &report.rows {
        println!("{} {:.4} {:.6}", row.index, row.psnr_db, row.ssim);
    }
    println!("mean {:.4} {:.6}", report.mean_psnr_db, report.mean_ssim);
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GradcheckArgs {
    /// What to verify: op (every primitive), block (one PCSAB), net (the
    /// tiny full network).
    #[arg(long)]
    scope: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Float width; only 64 is accepted, finite differences are unreliable
    /// at 32-bit.
    #[arg(long)]
    bits: Option<u32>,
}

pub fn run_gradcheck(args: GradcheckArgs, file: &FileOverrides) -> Result<()> {
    let scope = resolve!(args, file, scope, "scope", "op".to_string());
    let seed = resolve!(args, file, seed, "seed", 0);
    let bits = resolve!(args, file, bits, "bits", 64u32);
    file.finish()?;
    echo_line("scope", &scope);
    echo_line("seed", seed);
    echo_line("bits", bits);
    if bits != 64 {
        bail!("gradient checks run in 64-bit mode only; {bits}-bit finite differences are too noisy");
    }

    let tol = gradcheck::DEFAULT_TOLERANCE;
    let results = match scope.as_str() {
        "op" => {
            let mut results = gradcheck::ops_suite(seed, 1e-5, tol)?;
            results.extend(attention::attention_suite(seed, 1e-5, tol)?);
            results
        }
        "block" => attention::pcsab_gradcheck(seed, 1e-6, tol)?,
        "net" => network::network_gradcheck(&NetworkConfig::tiny(), seed, 1e-6, tol, None)?,
        other => bail!("unknown scope '{other}' (expected op, block, or net)"),
    };

    let mut failures = 0usize;
    for result in &results {
        println!("{}", result.format_line());
        if !result.passed {
            failures += 1;
        }
    }
    println!("{} groups checked, {} failed, tolerance {tol:.0e}", results.len(), failures);
    if failures > 0 {
        bail!("{failures} gradient group(s) exceeded the tolerance");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct BenchArgs {
    /// Kernel to time: vsa, hsa, pcsa, or net.
    #[arg(long)]
    op: Option<String>,
    /// Comma-separated strip lengths (vsa/hsa/pcsa).
    #[arg(long)]
    k_list: Option<String>,
    /// Comma-separated square sizes.
    #[arg(long)]
    size_list: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    /// Timed repetitions after one discarded warmup; at least 3.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_list(raw: &str, what: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| anyhow::anyhow!("bad {what} entry '{s}': {e}")))
        .collect()
}

struct Timing {
    mean_ns: f64,
    stddev_ns: f64,
}

fn time_reps(reps: usize, mut f: impl FnMut()) -> Timing {
    f(); // warmup, discarded
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f();
        samples.push(start.elapsed().as_nanos() as f64);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (samples.len() - 1).max(1) as f64;
    Timing { mean_ns: mean, stddev_ns: var.sqrt() }
}

fn bench_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_rng_uniform(shape.to_vec(), 0.0, 1.0, &mut rng)
}

pub fn run_bench(args: BenchArgs, file: &FileOverrides) -> Result<()> {
    let op = resolve!(args, file, op, "op", "vsa".to_string());
    let k_raw = resolve!(args, file, k_list, "k-list", "8,64".to_string());
    let default_sizes = if op == "net" { "64,128" } else { "256" };
    let size_raw = resolve!(args, file, size_list, "size-list", default_sizes.to_string());
    let channels = resolve!(args, file, channels, "channels", 32usize);
    let reps = resolve!(args, file, reps, "reps", 5usize);
    let seed = resolve!(args, file, seed, "seed", 0u64);
    file.finish()?;
    echo_line("op", &op);
    echo_line("k-list", &k_raw);
    echo_line("size-list", &size_raw);
    echo_line("channels", channels);
    echo_line("reps", reps);
    echo_line("seed", seed);
    if reps < 3 {
        bail!("reps must be at least 3 (plus one discarded warmup)");
    }
    let k_list = parse_list(&k_raw, "k-list")?;
    let sizes = parse_list(&size_raw, "size-list")?;

    println!("op,K,H,W,C,mean_ns,stddev_ns");
    match op.as_str() {
        "vsa" | "hsa" => {
            for &size in &sizes {
                let x = bench_tensor(&[1, channels, size, size], seed);
                for &k in &k_list {
                    let a = bench_tensor(&[1, k], seed ^ k as u64);
                    let timing = time_reps(reps, || {
                        let out = if op == "vsa" {
                            attention::vsa_aggregate(&x, &a)
                        } else {
                            attention::hsa_aggregate(&x, &a)
                        };
                        std::hint::black_box(out.expect("bench shapes are valid"));
                    });
                    println!("{op},{k},{size},{size},{channels},{:.0},{:.0}", timing.mean_ns, timing.stddev_ns);
                }
            }
        }
        "pcsa" => {
            for &size in &sizes {
                let x = bench_tensor(&[1, channels, size, size], seed);
                for &k in &k_list {
                    let group = attention::StripGroupConfig { k1: k, k2: k, dw_kernel: 3 };
                    let params = random_pcsa_params(channels, &group, seed)?;
                    let timing = time_reps(reps, || {
                        let mut tape = Tape::<f32>::new();
                        let xi = tape.leaf(x.clone(), false);
                        let taped = leaf_pcsa(&mut tape, &params);
                        let out = attention::pcsa_forward(&mut tape, xi, &taped).expect("bench shapes are valid");
                        std::hint::black_box(tape.value(out).numel());
                    });
                    println!("pcsa,{k},{size},{size},{channels},{:.0},{:.0}", timing.mean_ns, timing.stddev_ns);
                }
            }
        }
        "net" => {
            let cfg = NetworkConfig::default();
            let params = network::init_params::<f32>(&cfg, seed)?;
            for &size in &sizes {
                if size % 4 != 0 {
                    bail!("net bench sizes must be divisible by 4, got {size}");
                }
                let x = bench_tensor(&[1, 3, size, size], seed ^ size as u64);
                let timing = time_reps(reps, || {
                    let out = network::run_inference(&params, &cfg, &x).expect("bench shapes are valid");
                    std::hint::black_box(out.numel());
                });
                println!("net,0,{size},{size},{},{:.0},{:.0}", cfg.base_channels, timing.mean_ns, timing.stddev_ns);
            }
        }
        other => bail!("unknown op '{other}' (expected vsa, hsa, pcsa, or net)"),
    }
    Ok(())
}

/// Owned random PCSA parameters for benchmarking.
fn random_pcsa_params(
    c: usize,
    group: &attention::StripGroupConfig,
    seed: u64,
) -> Result<attention::PcsaParams<Tensor<f32>>> {
    use rand::SeedableRng;
    struct Rng(rand_chacha::ChaCha8Rng);
    impl attention::ParamVisitor<Tensor<f32>> for Rng {
        fn param(&mut self, _n: &str, shape: &[usize], init: attention::Init) -> pcsa_core::Result<Tensor<f32>> {
            Ok(match init {
                attention::Init::KaimingUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_rng_uniform(shape.to_vec(), -bound, bound, &mut self.0)
                }
                attention::Init::Zero => Tensor::zeros(shape.to_vec()),
                attention::Init::One => Tensor::ones(shape.to_vec()),
            })
        }
    }
    let mut visitor = Rng(rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    Ok(attention::PcsaParams::build(&mut visitor, "bench", c, group, 4)?)
}

fn leaf_pcsa(
    tape: &mut Tape<f32>,
    p: &attention::PcsaParams<Tensor<f32>>,
) -> attention::PcsaParams<pcsa_core::TensorId> {
    attention::PcsaParams {
        dw_weight: tape.leaf(p.dw_weight.clone(), false),
        dw_bias: tape.leaf(p.dw_bias.clone(), false),
        vsa: attention::StripWeightParams {
            proj_weight: tape.leaf(p.vsa.proj_weight.clone(), false),
            proj_bias: tape.leaf(p.vsa.proj_bias.clone(), false),
            direction: p.vsa.direction,
        },
        hsa: attention::StripWeightParams {
            proj_weight: tape.leaf(p.hsa.proj_weight.clone(), false),
            proj_bias: tape.leaf(p.hsa.proj_bias.clone(), false),
            direction: p.hsa.direction,
        },
        fusion: attention::FusionParams {
            reduce_weight: tape.leaf(p.fusion.reduce_weight.clone(), false),
            reduce_bias: tape.leaf(p.fusion.reduce_bias.clone(), false),
            expand_weight: tape.leaf(p.fusion.expand_weight.clone(), false),
            expand_bias: tape.leaf(p.fusion.expand_bias.clone(), false),
        },
    }
}
