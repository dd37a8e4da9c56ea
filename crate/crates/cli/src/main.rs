//! `invmark` command-line interface.
//!
//! Every subcommand prints one JSON document on stdout. Diagnostics go to
//! stderr. Exit status is 0 on success, 2 on usage errors, 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use rand::RngCore;
use serde_json::{json, Value};

use invmark::attacks::AttackSpec;
use invmark::codec::{key_sites, MAX_K};
use invmark::matcher::DEFAULT_P_THRESHOLD;
use invmark::synth::{scaled_arch, synthetic_checkpoint, toy_arch, ToyPreset};
use invmark::transformer::{distortion, equivalence_check, random_sequences};
use invmark::{
    extract, insert, match_registry, read_checkpoint, write_checkpoint, Checkpoint, Dtype, Family, Message,
    Model, ModelArch, Registry, RegistryEntry, Scalar, SplitMix64, WatermarkKey,
};

#[derive(Parser)]
#[command(name = "invmark", version, about = "Watermark transformer checkpoints with functional invariants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a watermark key file
    Keygen(KeygenArgs),
    /// Embed an identifier into a checkpoint
    Insert(InsertArgs),
    /// Recover the identifier from a suspect checkpoint
    Extract(ExtractArgs),
    /// Match an extracted identifier against a registry
    Match(MatchArgs),
    /// Perturb a checkpoint (pruning, quantization, noise)
    Attack(AttackArgs),
    /// Compare two checkpoints through the reference forward pass
    Verify(VerifyArgs),
    /// Time insertion and extraction on synthetic checkpoints
    Bench(BenchArgs),
    /// Write a randomly initialised checkpoint and its architecture file
    Synth(SynthArgs),
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long, short)]
    out: PathBuf,
    /// Bits per chunk
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..=MAX_K as i64))]
    k: u32,
    /// Comma-separated invariant families, in insertion order
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<Family>>,
    /// Master seed (decimal or 0x-hex); drawn from OS entropy when absent
    #[arg(long)]
    seed: Option<String>,
    /// Scale QK rotation pairs as well
    #[arg(long)]
    lambda: bool,
    /// Rows/columns kept by fast extraction
    #[arg(long, default_value_t = 100)]
    subset_r: usize,
}

#[derive(Args)]
struct InsertArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// Identifier as a hex digit string
    #[arg(long, conflicts_with = "random_id", required_unless_present = "random_id")]
    identifier: Option<String>,
    /// Draw a fresh identifier from OS entropy
    #[arg(long)]
    random_id: bool,
    #[arg(long, short)]
    output: PathBuf,
    /// JSON-lines registry to append the identifier to
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Registry name of this copy (defaults to the output file stem)
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    observed: PathBuf,
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// Compare only the first subset_r rows/columns where possible
    #[arg(long)]
    fast: bool,
}

#[derive(Args)]
struct MatchArgs {
    /// Extracted identifier as a hex digit string
    #[arg(conflicts_with = "from_extract", required_unless_present = "from_extract")]
    identifier: Option<String>,
    /// Output of `invmark extract`
    #[arg(long)]
    from_extract: Option<PathBuf>,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long, default_value_t = DEFAULT_P_THRESHOLD)]
    p_threshold: f64,
    /// Chunk width of a bare identifier; defaults to the registry's
    #[arg(long)]
    k: Option<u32>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Global magnitude pruning of weight matrices
    #[arg(long)]
    prune_sparsity: Option<f64>,
    /// Uniform per-tensor quantization
    #[arg(long)]
    quantize_bits: Option<u32>,
    /// Gaussian noise with this standard deviation
    #[arg(long, conflicts_with = "noise_relative")]
    noise_sigma: Option<f64>,
    /// Gaussian noise with this fraction of each tensor's std
    #[arg(long)]
    noise_relative: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    /// Relative logit tolerance
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Random sequences for the logit comparison
    #[arg(long, default_value_t = 8)]
    seqs: usize,
    /// Random sequences for the greedy-token distortion (0 skips it)
    #[arg(long, default_value_t = 0)]
    distortion_seqs: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Model widths
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    sizes: Vec<usize>,
    /// Layer counts
    #[arg(long, value_delimiter = ',', default_value = "1")]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    k: u32,
    #[arg(long)]
    fast: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    arch_out: PathBuf,
    /// llama or classic
    #[arg(long, default_value = "llama")]
    preset: ToyPreset,
    /// Model width (llama preset only; heads of 64)
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, default_value = "f32", value_parser = parse_dtype)]
    dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Marks errors that should exit with the usage status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s.to_ascii_lowercase().as_str() {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
    }
}

fn load_arch(path: &Path) -> Result<ModelArch> {
    ModelArch::from_json_file(path).with_context(|| format!("loading architecture {}", path.display()))
}

fn load_key(path: &Path) -> Result<WatermarkKey> {
    WatermarkKey::from_json_file(path).with_context(|| format!("loading key {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn random_message(k: u32, m: usize) -> Result<Message> {
    let mask = (1u64 << k) - 1;
    let chunks = (0..m).map(|_| (OsRng.next_u64() & mask) as u32).collect();
    Ok(Message::new(k, chunks)?)
}

fn keygen(args: KeygenArgs) -> Result<Value> {
    let seed = match &args.seed {
        Some(s) => invmark::codec::parse_seed(s).map_err(|e| usage(e.to_string()))?,
        None => OsRng.next_u64(),
    };
    let mut key = WatermarkKey::new(seed).with_k(args.k);
    if let Some(families) = args.families {
        key = key.with_families(families);
    }
    key.lambda_enabled = args.lambda;
    key.subset_r = args.subset_r;
    key.check().map_err(|e| usage(e.to_string()))?;
    let text = key.to_json_pretty();
    std::fs::write(&args.out, format!("{text}\n")).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(json!({ "path": args.out, "key": serde_json::from_str::<Value>(&text)? }))
}

fn insert_cmd(args: InsertArgs) -> Result<Value> {
    let arch = load_arch(&args.arch)?;
    let key = load_key(&args.key)?;
    let ckpt = load_checkpoint(&args.input)?;
    let m = key_sites(&arch, &key)?.len();
    let msg = match &args.identifier {
        Some(hex) => {
            let msg = Message::parse(hex, key.k).map_err(|e| usage(e.to_string()))?;
            if msg.len() != m {
                return Err(usage(format!(
                    "identifier has {} chunks, the key defines {m} sites ({} hex digits expected)",
                    msg.len(),
                    m * Message::digits_per_chunk(key.k)
                )));
            }
            msg
        }
        None => random_message(key.k, m)?,
    };
    let marked = insert(&ckpt, &arch, &key, &msg)?;
    write_checkpoint(&marked, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    let model_id = args.model_id.clone().unwrap_or_else(|| {
        args.output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    if let Some(registry) = &args.registry {
        let entry = RegistryEntry { model_id: model_id.clone(), identifier: msg.clone() };
        Registry::append_jsonl(registry, &entry)?;
    }
    Ok(json!({
        "identifier": msg.to_string(),
        "k": key.k,
        "sites": m,
        "model_id": model_id,
        "output": args.output,
    }))
}

fn extract_cmd(args: ExtractArgs) -> Result<Value> {
    let arch = load_arch(&args.arch)?;
    let key = load_key(&args.key)?;
    let observed = load_checkpoint(&args.observed)?;
    let original = load_checkpoint(&args.original)?;
    let start = Instant::now();
    let result = extract(&observed, &original, &arch, &key, args.fast)?;
    eprintln!("extracted {} sites in {:.2?}", result.sites.len(), start.elapsed());
    Ok(json!({
        "identifier_hex": result.chunks.to_string(),
        "k": key.k,
        "fast": args.fast,
        "sites": result.sites.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        "margins": result.margins,
    }))
}

fn match_cmd(args: MatchArgs) -> Result<Value> {
    let registry = Registry::load_jsonl(&args.registry)
        .with_context(|| format!("loading registry {}", args.registry.display()))?;
    let registry_k = registry.entries.first().map(|e| e.identifier.k);
    let (hex, k) = match (&args.identifier, &args.from_extract) {
        (Some(hex), _) => (hex.clone(), args.k.or(registry_k).unwrap_or(8)),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let hex = doc["identifier_hex"]
                .as_str()
                .ok_or_else(|| usage(format!("{} has no identifier_hex field", path.display())))?;
            let k = doc["k"].as_u64().map(|k| k as u32).or(args.k).or(registry_k).unwrap_or(8);
            (hex.to_string(), k)
        }
        (None, None) => return Err(usage("give an identifier or --from-extract")),
    };
    let extracted = Message::parse(&hex, k).map_err(|e| usage(e.to_string()))?;
    let report = match_registry(&extracted, &registry, args.p_threshold)?;
    Ok(serde_json::to_value(report)?)
}

fn attack_cmd(args: AttackArgs) -> Result<Value> {
    let mut specs = Vec::new();
    if let Some(sparsity) = args.prune_sparsity {
        specs.push(AttackSpec::Prune { sparsity });
    }
    if let Some(bits) = args.quantize_bits {
        specs.push(AttackSpec::Quantize { bits });
    }
    if let Some(sigma) = args.noise_sigma {
        specs.push(AttackSpec::Noise { sigma, seed: args.seed });
    }
    if let Some(factor) = args.noise_relative {
        specs.push(AttackSpec::RelativeNoise { factor, seed: args.seed });
    }
    if specs.is_empty() {
        return Err(usage("no attack selected"));
    }
    let mut ckpt = load_checkpoint(&args.input)?;
    for spec in &specs {
        ckpt = spec.apply(&ckpt).map_err(|e| usage(e.to_string()))?;
    }
    write_checkpoint(&ckpt, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    Ok(json!({ "output": args.output, "applied": specs }))
}

fn verify_with<T: Scalar>(a: &Checkpoint, b: &Checkpoint, arch: &ModelArch, args: &VerifyArgs) -> Result<Value> {
    let ma = Model::<T>::from_checkpoint(a, arch)?;
    let mb = Model::<T>::from_checkpoint(b, arch)?;
    let seqs = random_sequences(args.seqs, args.seq_len, arch.vocab, args.seed);
    let eq = equivalence_check(&ma, &mb, &seqs, args.tol)?;
    let dist = if args.distortion_seqs > 0 {
        let seqs = random_sequences(args.distortion_seqs, args.seq_len, arch.vocab, args.seed.wrapping_add(1));
        Some(distortion(&ma, &mb, &seqs)?)
    } else {
        None
    };
    Ok(json!({
        "precision": T::DTYPE.as_str(),
        "max_logit_diff": eq.max_abs_diff,
        "max_abs_logit": eq.max_abs_logit,
        "tol": eq.tol,
        "equivalent": eq.passed,
        "distortion": dist,
    }))
}

fn verify_cmd(args: VerifyArgs) -> Result<Value> {
    if args.seqs == 0 || args.seq_len == 0 {
        return Err(usage("--seqs and --seq-len must be positive"));
    }
    let arch = load_arch(&args.arch)?;
    let a = load_checkpoint(&args.a)?;
    let b = load_checkpoint(&args.b)?;
    // Compute in the narrower of the two storage types.
    let wide = a.iter().chain(b.iter()).all(|(_, t)| t.dtype() == Dtype::F64);
    if wide {
        verify_with::<f64>(&a, &b, &arch, &args)
    } else {
        verify_with::<f32>(&a, &b, &arch, &args)
    }
}

fn bench_cmd(args: BenchArgs) -> Result<Value> {
    if !(1..=MAX_K).contains(&args.k) {
        return Err(usage(format!("k must lie in 1..={MAX_K}")));
    }
    let mut rows = Vec::new();
    for &layers in &args.layers {
        for &d in &args.sizes {
            if d == 0 || layers == 0 || (d > 64 && d % 64 != 0) {
                return Err(usage(format!("unsupported size d={d}, L={layers} (d must be ≤ 64 or a multiple of 64)")));
            }
            let arch = scaled_arch(layers, d);
            let ckpt = synthetic_checkpoint(&arch, Dtype::F32, args.seed);
            for family in Family::defaults() {
                let key = WatermarkKey::new(args.seed).with_k(args.k).with_families(vec![family]);
                let m = key_sites(&arch, &key)?.len();
                let msg = Message::random(args.k, m, &mut SplitMix64::new(args.seed));
                let t = Instant::now();
                let marked = insert(&ckpt, &arch, &key, &msg)?;
                let insert_s = t.elapsed().as_secs_f64();
                let t = Instant::now();
                let got = extract(&marked, &ckpt, &arch, &key, args.fast)?;
                let extract_s = t.elapsed().as_secs_f64();
                eprintln!("d={d} L={layers} {family}: insert {insert_s:.3}s extract {extract_s:.3}s");
                rows.push(json!({
                    "d": d,
                    "layers": layers,
                    "family": family,
                    "sites": m,
                    "insert_s": insert_s,
                    "extract_s": extract_s,
                    "recovered": got.chunks == msg,
                }));
            }
        }
    }
    Ok(json!({ "k": args.k, "fast": args.fast, "rows": rows }))
}

fn synth_cmd(args: SynthArgs) -> Result<Value> {
    let arch = match (args.preset, args.d) {
        (ToyPreset::LlamaLike, Some(d)) => {
            if d == 0 || (d > 64 && d % 64 != 0) {
                return Err(usage(format!("d={d} must be ≤ 64 or a multiple of 64")));
            }
            scaled_arch(args.layers.unwrap_or(1), d)
        }
        (_, Some(_)) => return Err(usage("--d is only supported for the llama preset")),
        (preset, None) => {
            let mut arch = toy_arch(preset);
            arch.layers = args.layers.unwrap_or(arch.layers);
            arch
        }
    };
    arch.check().map_err(|e| usage(e.to_string()))?;
    let ckpt = synthetic_checkpoint(&arch, args.dtype, args.seed);
    write_checkpoint(&ckpt, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    std::fs::write(&args.arch_out, format!("{}\n", arch.to_json_pretty()))
        .with_context(|| format!("writing {}", args.arch_out.display()))?;
    Ok(json!({
        "output": args.output,
        "arch": args.arch_out,
        "tensors": ckpt.len(),
        "dtype": args.dtype.as_str(),
    }))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Keygen(a) => keygen(a),
        Command::Insert(a) => insert_cmd(a),
        Command::Extract(a) => extract_cmd(a),
        Command::Match(a) => match_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(doc) => {
            println!("{}", serde_json::to_string_pretty(&doc).expect("json output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
