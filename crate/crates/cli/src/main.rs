mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use detinfer::attest::{dispute_game, make_attestation, verify_by_reexecution, Winner};
use detinfer::floatref::{
    divergence_trace, first_divergence, fsum_lanes, layers_csv, measure_layer_divergence, steps_csv, FloatDecoder,
    GreedyDecoder, IntDecoder,
};
use detinfer::trustlab::{decay_bound, reduction_tree_count, reject_prob, simulate_protocol, trust_entropy};
use detinfer::trustlab::PlatformDistribution;
use detinfer::{
    gen_toy_model, weight_hash, Attestation, Engine, ExecConfig, FloatModel, GenerationResult, LaneConfig,
    ModelConfig, ModelFile, RopeTables, VerifyOutcome, Q16,
};
use serde::Serialize;
use serde_json::json;

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "detinfer", version, about = "Deterministic integer inference experiments")]
struct Cli {
    /// Append the run manifest to this file instead of printing it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy model file.
    Gen(GenArgs),
    /// Run greedy or sampled generation.
    Infer(InferArgs),
    /// Run greedy generation and write an attestation.
    Attest(AttestArgs),
    /// Re-execute and check an attestation.
    Verify(VerifyArgs),
    /// Play a single-challenger dispute against an attestation.
    Dispute(VerifyArgs),
    /// Compare two decoders token by token.
    Diverge(DivergeArgs),
    /// Sum (1, 2^-24, 2^-24, 2^-24) under one and two lanes.
    Theorem9,
    /// Trust entropy and rejection probability of a platform distribution.
    Entropy(EntropyArgs),
    /// Residual divergence bound.
    Decay(DecayArgs),
    /// Number of binary reduction trees for a d-term sum.
    Catalan(CatalanArgs),
    /// Quick end-to-end consistency checks.
    Selftest,
}

#[derive(Args, Serialize)]
struct ConfigArgs {
    #[arg(long, default_value_t = 16)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dmodel: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ffn: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 512)]
    ctx: usize,
    #[arg(long, default_value_t = 10000.0)]
    theta: f64,
}

impl ConfigArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            d_model: self.dmodel,
            n_heads: self.heads,
            d_ffn: self.ffn,
            vocab: self.vocab,
            max_ctx: self.ctx,
            rope_theta: self.theta,
        }
    }
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    /// Also export the model's RoPE tables to this file.
    #[arg(long)]
    rope_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Serialize)]
struct PromptArgs {
    /// Comma-separated token IDs.
    #[arg(long, conflicts_with = "bytes", required_unless_present = "bytes")]
    prompt: Option<String>,
    /// Use the bytes of this string as token IDs 0-255.
    #[arg(long)]
    bytes: Option<String>,
}

impl PromptArgs {
    fn ids(&self) -> Result<Vec<u32>, CliError> {
        match (&self.prompt, &self.bytes) {
            (Some(p), _) => parse_ids(p),
            (None, Some(b)) => Ok(b.bytes().map(u32::from).collect()),
            (None, None) => Err(CliError::Usage("one of --prompt or --bytes is required".into())),
        }
    }
}

#[derive(Args, Serialize)]
struct ExecArgs {
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Accumulate dense products in chunks of this many columns.
    #[arg(long)]
    chunk: Option<usize>,
    /// RoPE tables exported by `gen --rope-out`.
    #[arg(long)]
    rope_tables: Option<PathBuf>,
}

impl ExecArgs {
    fn exec(&self) -> ExecConfig {
        let e = ExecConfig::threads(self.threads);
        match self.chunk {
            Some(c) => e.with_chunk(c),
            None => e,
        }
    }

    fn engine<'m>(&self, model: &'m ModelFile) -> Result<Engine<'m>, CliError> {
        Ok(match &self.rope_tables {
            Some(p) => Engine::with_tables(model, RopeTables::from_bytes(&read(p)?)?, self.exec())?,
            None => Engine::new(model, self.exec())?,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(into = "String")]
enum Mode {
    Greedy,
    Sample(f64),
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        match m {
            Mode::Greedy => "greedy".into(),
            Mode::Sample(t) => format!("sample:{t}"),
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "greedy" {
            return Ok(Mode::Greedy);
        }
        let t = s
            .strip_prefix("sample:")
            .ok_or_else(|| format!("mode must be greedy or sample:T, got {s:?}"))?;
        let t: f64 = t.parse().map_err(|_| format!("bad temperature {t:?}"))?;
        if !(t.is_finite() && t > 0.0) {
            return Err(format!("temperature must be positive, got {t}"));
        }
        Ok(Mode::Sample(t))
    }
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// greedy or sample:T
    #[arg(long, default_value = "greedy")]
    mode: Mode,
    /// Run this many times and report the distinct output hashes.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args, Serialize)]
struct AttestArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Output attestation file (112-byte binary record).
    #[arg(long)]
    attestation: PathBuf,
    #[arg(long, default_value_t = 0)]
    bond: u64,
    #[arg(long, default_value_t = 0)]
    challenge_period: u64,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    /// Number of tokens the attester generated.
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long)]
    attestation: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Backend {
    Float,
    Int,
}

#[derive(Args, Serialize)]
struct DivergeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 256)]
    horizon: usize,
    #[arg(long, default_value_t = 2)]
    lanes_a: usize,
    #[arg(long, default_value_t = 8)]
    lanes_b: usize,
    /// For `int`, the lane counts become thread counts and chunk sizes.
    #[arg(long, value_enum, default_value_t = Backend::Float)]
    backend: Backend,
    /// Write the per-step report (step,l2,token_a,token_b) here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write per-layer divergence at the last prompt token (layer,l2) here.
    #[arg(long)]
    layers_csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EntropyArgs {
    /// Comma-separated class probabilities.
    #[arg(long)]
    dist: String,
    /// Also simulate the protocol with this many trials.
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct DecayArgs {
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    layers: u32,
}

#[derive(Args, Serialize)]
struct CatalanArgs {
    /// Number of terms being summed.
    #[arg(long)]
    d: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(PathBuf, std::io::Error),
    Engine(detinfer::Error),
}

impl From<detinfer::Error> for CliError {
    fn from(e: detinfer::Error) -> Self {
        CliError::Engine(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(path.to_owned(), e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(path.to_owned(), e))
}

fn parse_ids(s: &str) -> Result<Vec<u32>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| CliError::Usage(format!("bad token id {t:?}")))
        })
        .collect()
}

fn parse_probs(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad probability {t:?}")))
        })
        .collect()
}

fn load_model(path: &Path) -> Result<(Vec<u8>, ModelFile), CliError> {
    let bytes = read(path)?;
    let model = ModelFile::from_bytes(&bytes)?;
    Ok((bytes, model))
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn lane(n: usize) -> Result<LaneConfig, CliError> {
    Ok(LaneConfig::new(n)?)
}

/// Exit status for a command that completed; errors map to 2 separately.
type Status = u8;

fn gen(args: &GenArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let model = gen_toy_model(args.seed, &args.config.config())?;
    let bytes = model.to_bytes();
    write(&args.model, &bytes)?;
    let hash = weight_hash(&bytes);
    println!("weight_hash {hash}");
    println!("params {}", model.n_params());
    if let Some(p) = &args.rope_out {
        let c = &model.config;
        let tables = RopeTables::build(c.rope_theta, c.d_head(), c.max_ctx)?;
        write(p, &tables.to_bytes())?;
        println!("rope_tables {}", p.display());
    }
    m.seeds.push(args.seed);
    m.model_hash = Some(hash.to_hex());
    m.result = json!({ "bytes": bytes.len(), "params": model.n_params() });
    Ok(0)
}

fn run_mode(engine: &Engine<'_>, prompt: &[u32], max_new: usize, mode: Mode) -> Result<GenerationResult, CliError> {
    Ok(match mode {
        Mode::Greedy => engine.generate_greedy(prompt, max_new)?,
        Mode::Sample(t) => engine.generate_sampled(prompt, max_new, Q16::from_f64(t))?,
    })
}

fn infer(args: &InferArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let (bytes, model) = load_model(&args.model)?;
    let prompt = args.prompt.ids()?;
    let engine = args.exec.engine(&model)?;
    let mut hashes: Vec<String> = Vec::new();
    let mut first = None;
    for _ in 0..args.repeat.max(1) {
        let r = run_mode(&engine, &prompt, args.max_new, args.mode)?;
        let h = r.output_hash.to_hex();
        if !hashes.contains(&h) {
            hashes.push(h);
        }
        first.get_or_insert(r);
    }
    let r = first.expect("at least one run");
    println!("tokens {}", join_ids(&r.token_ids));
    println!("output_hash {}", r.output_hash);
    if args.repeat > 1 {
        println!("unique_hashes {} of {} runs", hashes.len(), args.repeat);
    }
    let sampling_seed = match args.mode {
        Mode::Greedy => None,
        Mode::Sample(_) => Some(detinfer::engine::sampling_seed(&bytes, &prompt).to_hex()),
    };
    m.model_hash = Some(weight_hash(&bytes).to_hex());
    m.result = json!({
        "tokens": r.token_ids,
        "runs": args.repeat.max(1),
        "unique_hashes": hashes.len(),
        "sampling_seed": sampling_seed,
    });
    m.output_hashes = hashes;
    Ok(0)
}

fn attest(args: &AttestArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let (bytes, model) = load_model(&args.model)?;
    let prompt = args.prompt.ids()?;
    let result = args.exec.engine(&model)?.generate_greedy(&prompt, args.max_new)?;
    let att = make_attestation(&bytes, &prompt, &result, args.bond, args.challenge_period);
    write(&args.attestation, &att.to_bytes())?;
    print!("{}", att.to_text());
    println!("tokens {}", join_ids(&result.token_ids));
    m.model_hash = Some(att.model_id.to_hex());
    m.output_hashes = vec![att.output_hash.to_hex()];
    m.result = json!({ "input_hash": att.input_hash.to_hex(), "tokens": result.token_ids });
    Ok(0)
}

fn read_attestation(path: &Path) -> Result<Attestation, CliError> {
    Ok(Attestation::from_bytes(&read(path)?)?)
}

fn verify(args: &VerifyArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let bytes = read(&args.model)?;
    let prompt = args.prompt.ids()?;
    let att = read_attestation(&args.attestation)?;
    let outcome = verify_by_reexecution(&att, &bytes, &prompt, args.max_new)?;
    println!("{outcome}");
    m.model_hash = Some(weight_hash(&bytes).to_hex());
    m.output_hashes = vec![att.output_hash.to_hex()];
    m.result = outcome_json(&outcome);
    Ok(if outcome.is_confirmed() { 0 } else { 1 })
}

fn outcome_json(outcome: &VerifyOutcome) -> serde_json::Value {
    match outcome {
        VerifyOutcome::Confirmed => json!({ "verdict": "Confirmed" }),
        VerifyOutcome::Refuted { stage, expected, found } => json!({
            "verdict": outcome.to_string(),
            "stage": stage.to_string(),
            "expected": expected.to_hex(),
            "found": found.to_hex(),
        }),
    }
}

fn dispute(args: &VerifyArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let bytes = read(&args.model)?;
    let prompt = args.prompt.ids()?;
    let att = read_attestation(&args.attestation)?;
    let d = dispute_game(&att, &bytes, &prompt, args.max_new)?;
    let winner = match d.winner {
        Winner::AttesterWins => "attester",
        Winner::ChallengerWins => "challenger",
    };
    println!("{}", d.outcome);
    println!("winner {winner}");
    m.model_hash = Some(weight_hash(&bytes).to_hex());
    m.output_hashes = vec![att.output_hash.to_hex()];
    m.result = outcome_json(&d.outcome);
    m.result["winner"] = json!(winner);
    Ok(if d.outcome.is_confirmed() { 0 } else { 1 })
}

fn diverge(args: &DivergeArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let (bytes, model) = load_model(&args.model)?;
    let prompt = args.prompt.ids()?;
    let fm;
    let (ea, eb);
    let (mut a, mut b): (Box<dyn GreedyDecoder + '_>, Box<dyn GreedyDecoder + '_>) = match args.backend {
        Backend::Float => {
            fm = FloatModel::from_model(&model)?;
            (
                Box::new(FloatDecoder::new(&fm, lane(args.lanes_a)?)),
                Box::new(FloatDecoder::new(&fm, lane(args.lanes_b)?)),
            )
        }
        Backend::Int => {
            let exec = |n: usize| ExecConfig::threads(n.max(1)).with_chunk(n.max(1));
            ea = Engine::new(&model, exec(args.lanes_a))?;
            eb = Engine::new(&model, exec(args.lanes_b))?;
            (Box::new(IntDecoder::new(&ea)), Box::new(IntDecoder::new(&eb)))
        }
    };
    let first = first_divergence(a.as_mut(), b.as_mut(), &prompt, args.horizon)?;
    match first {
        Some(i) => println!("first_divergence {i}"),
        None => println!("no divergence up to horizon {}", args.horizon),
    }
    if let Some(p) = &args.csv {
        let rows = divergence_trace(a.as_mut(), b.as_mut(), &prompt, args.horizon)?;
        write(p, steps_csv(&rows).as_bytes())?;
    }
    if let Some(p) = &args.layers_csv {
        let per_layer = match args.backend {
            Backend::Float => {
                let fm = FloatModel::from_model(&model)?;
                measure_layer_divergence(&fm, &prompt, lane(args.lanes_a)?, lane(args.lanes_b)?)?
            }
            Backend::Int => vec![0.0; model.config.n_layers],
        };
        write(p, layers_csv(&per_layer).as_bytes())?;
    }
    m.model_hash = Some(weight_hash(&bytes).to_hex());
    m.result = json!({ "first_divergence": first });
    Ok(0)
}

fn theorem9(m: &mut Manifest) -> Result<Status, CliError> {
    let tiny = (-24f32).exp2();
    let v = [1.0f32, tiny, tiny, tiny];
    let mut out = Vec::new();
    for lanes in [1, 2] {
        let s = fsum_lanes(&v, lane(lanes)?);
        println!("lanes={lanes} {s:.10} ({:#010x})", s.to_bits());
        out.push(json!({ "lanes": lanes, "sum": s, "bits": format!("{:#010x}", s.to_bits()) }));
    }
    m.result = json!(out);
    Ok(0)
}

fn entropy(args: &EntropyArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let dist = PlatformDistribution::from_probs(&parse_probs(&args.dist)?)?;
    let h = trust_entropy(&dist);
    let reject = reject_prob(h)?;
    println!("H_T={h:.3} reject={reject:.3}");
    m.result = json!({ "trust_entropy": h, "reject_prob": reject });
    if let Some(trials) = args.trials {
        let observed = simulate_protocol(&dist, trials, args.seed)?;
        println!("simulated_reject={observed:.5} trials={trials}");
        m.seeds.push(args.seed);
        m.result["simulated_reject"] = json!(observed);
    }
    Ok(0)
}

fn decay(args: &DecayArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let b = decay_bound(args.eps, args.lambda, args.layers)?;
    println!("bound={b:.6}");
    m.result = json!({ "bound": b });
    Ok(0)
}

fn catalan(args: &CatalanArgs, m: &mut Manifest) -> Result<Status, CliError> {
    let c = reduction_tree_count(args.d)?;
    println!("trees={c}");
    m.result = json!({ "trees": c.to_string() });
    Ok(0)
}

fn selftest(m: &mut Manifest) -> Result<Status, CliError> {
    let mut checks = Vec::new();
    let mut record = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        checks.push(json!({ "check": name, "ok": ok }));
        ok
    };

    let tiny = (-24f32).exp2();
    let v = [1.0f32, tiny, tiny, tiny];
    let mut ok = record(
        "reduction order",
        fsum_lanes(&v, lane(1)?) == 1.0 && fsum_lanes(&v, lane(2)?) == 1.0 + (-23f32).exp2(),
    );

    let cfg = ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ffn: 64,
        vocab: 64,
        max_ctx: 64,
        rope_theta: 10000.0,
    };
    let model = gen_toy_model(7, &cfg)?;
    let bytes = model.to_bytes();
    ok &= record("canonical serialization", ModelFile::from_bytes(&bytes)?.to_bytes() == bytes);

    let prompt = [1, 2, 3];
    let hashes: Vec<_> = [ExecConfig::default(), ExecConfig::threads(4), ExecConfig::default().with_chunk(5)]
        .into_iter()
        .map(|e| Ok(Engine::new(&model, e)?.generate_greedy(&prompt, 16)?.output_hash))
        .collect::<Result<_, CliError>>()?;
    ok &= record("thread and chunk invariance", hashes.iter().all(|h| *h == hashes[0]));

    let result = Engine::new(&model, ExecConfig::default())?.generate_greedy(&prompt, 16)?;
    let att = make_attestation(&bytes, &prompt, &result, 0, 0);
    let honest = verify_by_reexecution(&att, &bytes, &prompt, 16)?;
    let mut forged = att;
    forged.output_hash.0[0] ^= 1;
    let caught = verify_by_reexecution(&forged, &bytes, &prompt, 16)?;
    ok &= record("attestation round trip", honest.is_confirmed() && !caught.is_confirmed());

    m.model_hash = Some(weight_hash(&bytes).to_hex());
    m.result = json!(checks);
    Ok(if ok { 0 } else { 1 })
}

fn run(cli: &Cli) -> Result<Status, CliError> {
    let start = Instant::now();
    let (mut m, status) = match &cli.command {
        Command::Gen(a) => with_manifest("gen", a, |m| gen(a, m))?,
        Command::Infer(a) => with_manifest("infer", a, |m| infer(a, m))?,
        Command::Attest(a) => with_manifest("attest", a, |m| attest(a, m))?,
        Command::Verify(a) => with_manifest("verify", a, |m| verify(a, m))?,
        Command::Dispute(a) => with_manifest("dispute", a, |m| dispute(a, m))?,
        Command::Diverge(a) => with_manifest("diverge", a, |m| diverge(a, m))?,
        Command::Theorem9 => with_manifest("theorem9", &(), theorem9)?,
        Command::Entropy(a) => with_manifest("entropy", a, |m| entropy(a, m))?,
        Command::Decay(a) => with_manifest("decay", a, |m| decay(a, m))?,
        Command::Catalan(a) => with_manifest("catalan", a, |m| catalan(a, m))?,
        Command::Selftest => with_manifest("selftest", &(), selftest)?,
    };
    m.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let out = cli.out.as_deref();
    m.emit(out).map_err(|e| CliError::Io(out.unwrap_or(Path::new("-")).to_owned(), e))?;
    Ok(status)
}

fn with_manifest(
    command: &'static str,
    args: &impl Serialize,
    f: impl FnOnce(&mut Manifest) -> Result<Status, CliError>,
) -> Result<(Manifest, Status), CliError> {
    let mut m = Manifest::new(command, args);
    let status = f(&mut m)?;
    Ok((m, status))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
