//! Command-line front end.
//!
//! Every subcommand prints a human-readable report headed by a
//! reproducibility header; `--report PATH` also writes it to PATH and a
//! JSON rendering to `PATH.json`. Exit codes: 0 ok, 1 operational
//! failure, 2 usage error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::agents::{align_pipeline, AgentDocChecker, AlignOptions, AuditLog, ChatClient, LlmClientConfig};
use crate::corpus::{self, CoTRecord, CodeSample, Record, WhitespaceTokenizer};
use crate::evalharness::{self, ChildMode, CotCandidate, EvalOptions, MapCotProvider, Mode, ProcessRunner};
use crate::filters::{self, DocChecker, LexicalDocChecker, PythonParser, DEFAULT_R3_THRESHOLD};
use crate::textmetrics::{self, BleuOptions, ConsistencyCounts};
use crate::tinylm::{
    self, decode, io as model_io, lora_attach, render_instruction, Adapted, ByteTokenizer, Model, ModelConfig,
    Strategy, TrainConfig, TrainExample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DocCheckerKind {
    Lexical,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Greedy,
    Sample,
    Beam,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub r3_threshold: f64,
    pub doc_checker: DocCheckerKind,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            r3_threshold: DEFAULT_R3_THRESHOLD,
            doc_checker: DocCheckerKind::Lexical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: Mode,
    pub timeout_secs: f64,
    /// Command line of the execution runner, split on whitespace.
    pub runner: Option<String>,
    /// Fresh child per request instead of warm reuse.
    pub once: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Retry,
            timeout_secs: evalharness::DEFAULT_TIMEOUT.as_secs_f64(),
            runner: None,
            once: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub strategy: StrategyKind,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub beam_width: usize,
    pub top_k: usize,
    pub penalty_alpha: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Greedy,
            max_new_tokens: 256,
            temperature: 1.0,
            beam_width: 4,
            top_k: 4,
            penalty_alpha: 0.6,
        }
    }
}

impl DecodeSettings {
    pub fn strategy(&self, seed: u64) -> Strategy {
        match self.strategy {
            StrategyKind::Greedy => Strategy::Greedy,
            StrategyKind::Sample => Strategy::Sample {
                temperature: self.temperature,
                seed,
            },
            StrategyKind::Beam => Strategy::Beam { width: self.beam_width },
            StrategyKind::Contrastive => Strategy::Contrastive {
                top_k: self.top_k,
                penalty_alpha: self.penalty_alpha,
            },
        }
    }
}

/// Every knob of every subcommand. Loaded from `--config` (TOML), then
/// overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub filters: FilterSettings,
    pub agents: LlmClientConfig,
    pub eval: EvalSettings,
    pub decode: DecodeSettings,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// First 16 hex digits of sha256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "cotkit", version, about = "CoT dataset construction, scoring and a tiny LoRA model")]
struct Cli {
    /// TOML file mirroring the flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Omit the timestamp so identical runs give byte-identical reports.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Cap on total parallelism (agent calls and eval workers).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Also write the report to this file and JSON to FILE.json.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Overrides the training seed (also used for splitting and sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Token statistics of a CoT corpus.
    Stats(StatsArgs),
    /// Seeded train/validation split of a JSONL corpus.
    Split(SplitArgs),
    /// Rule-based cleaning (syntax, doc/code consistency, similarity).
    Clean(CleanArgs),
    /// Three-agent CoT generation over a chat-completion endpoint.
    Align(AlignArgs),
    /// BLEU, METEOR and ROUGE-L of candidate CoTs against references.
    Metrics(MetricsArgs),
    /// Pass@1 and CoT-Pass@1 through an external execution runner.
    Eval(EvalArgs),
    /// Trains LoRA adapters on a CoT corpus with the byte-level model.
    TinylmTrain(TrainArgs),
    /// Decodes a continuation from a trained model file.
    TinylmGenerate(GenerateArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    n_valid: usize,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    valid_out: PathBuf,
}

#[derive(Debug, Args)]
struct CleanArgs {
    #[arg(long)]
    input: PathBuf,
    /// Evaluation sets nothing may resemble; repeatable.
    #[arg(long)]
    protected: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// JSONL line per sample and rule.
    #[arg(long)]
    audit: PathBuf,
    #[arg(long)]
    r3_threshold: Option<f64>,
    #[arg(long, value_enum)]
    doc_checker: Option<DocCheckerKind>,
    /// JSONL log of agent calls when --doc-checker agent.
    #[arg(long)]
    agent_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Dropped samples with the rejecting agent and reason.
    #[arg(long)]
    drops: Option<PathBuf>,
    #[arg(long)]
    agent_log: Option<PathBuf>,
    /// Skip the consistency checker.
    #[arg(long)]
    no_consistency_check: bool,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// Read JSONL and take this key; otherwise one text per line.
    #[arg(long)]
    field: Option<String>,
    /// Print CSV instead of the table.
    #[arg(long)]
    csv: bool,
    /// Ask the consistency checker about each (candidate, code) pair; the
    /// code comes from the `code` key of the candidates JSONL.
    #[arg(long, requires = "field")]
    consistency: bool,
    #[arg(long)]
    agent_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    problems: PathBuf,
    /// JSONL {id, completion}.
    #[arg(long)]
    candidates: PathBuf,
    /// JSONL {id, cot, completion}.
    #[arg(long)]
    cot_candidates: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Seconds per problem.
    #[arg(long)]
    timeout: Option<f64>,
    /// Runner command line, e.g. "python3 runner.py".
    #[arg(long)]
    runner: Option<String>,
    /// One child process per request.
    #[arg(long)]
    once: bool,
    /// Per-problem CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Retry,
    Replace,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// CoT corpus (JSONL); the model learns prompt -> cot.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Base model file; a fresh seeded model otherwise.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Feed the prompt as-is instead of wrapping it in the instruction.
    #[arg(long)]
    raw: bool,
    #[arg(long, value_enum)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    penalty_alpha: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Operational(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Operational(e)
    }
}

impl From<corpus::CorpusError> for Failure {
    fn from(e: corpus::CorpusError) -> Self {
        Failure::Operational(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Collapses a message onto one line.
fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Finished report of one subcommand.
struct Report {
    text: String,
    json: serde_json::Value,
}

struct Ctx {
    cfg: RunConfig,
    jobs: Option<usize>,
}

impl Ctx {
    fn cap(&self, n: usize) -> usize {
        self.jobs.map_or(n, |j| n.min(j)).max(1)
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit code. Output goes to stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`dispatch`] with explicit sinks.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(err, "{e}");
                    2
                }
                _ => {
                    let rendered = e.to_string();
                    // clap puts details such as missing argument names on
                    // the lines between the message and its Usage block
                    let head = rendered.split("\nUsage:").next().unwrap_or("usage error");
                    let head = head.split("\nFor more information").next().unwrap_or(head);
                    let msg = head.trim().strip_prefix("error: ").unwrap_or(head.trim());
                    let _ = writeln!(err, "cotkit: usage: {}", one_line(msg));
                    2
                }
            };
        }
    };
    match execute(cli) {
        Ok((report, path, deterministic_header)) => {
            let _ = out.write_all(report.text.as_bytes());
            if let Some(p) = path {
                if let Err(e) = write_report(&p, &report, &deterministic_header) {
                    let _ = writeln!(err, "cotkit: error: {}", one_line(&format!("{e:#}")));
                    return 1;
                }
            }
            0
        }
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "cotkit: usage: {}", one_line(&m));
            2
        }
        Err(Failure::Operational(e)) => {
            let _ = writeln!(err, "cotkit: error: {}", one_line(&format!("{e:#}")));
            1
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Header {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    seed: u64,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<u64>,
}

impl Header {
    fn render(&self) -> String {
        let mut s = format!(
            "# {} {} {} seed={} config={}\n",
            self.tool, self.version, self.subcommand, self.seed, self.config_hash
        );
        if let Some(t) = self.generated_at {
            let _ = writeln!(s, "# generated_at={t}");
        }
        s
    }
}

fn write_report(path: &Path, report: &Report, header: &Header) -> anyhow::Result<()> {
    fs::write(path, &report.text).with_context(|| format!("writing {}", path.display()))?;
    let mut json_path = path.as_os_str().to_owned();
    json_path.push(".json");
    let doc = json!({ "header": header, "report": report.json });
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("report serializes");
    bytes.push(b'\n');
    fs::write(&json_path, bytes).with_context(|| format!("writing {}", Path::new(&json_path).display()))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Stats(_) => "stats",
        Command::Split(_) => "split",
        Command::Clean(_) => "clean",
        Command::Align(_) => "align",
        Command::Metrics(_) => "metrics",
        Command::Eval(_) => "eval",
        Command::TinylmTrain(_) => "tinylm-train",
        Command::TinylmGenerate(_) => "tinylm-generate",
    }
}

/// Applies subcommand flags onto the file config so the header hash
/// covers the effective settings.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::Clean(a) => {
            if let Some(t) = a.r3_threshold {
                cfg.filters.r3_threshold = t;
            }
            if let Some(k) = a.doc_checker {
                cfg.filters.doc_checker = k;
            }
        }
        Command::Align(a) => {
            if let Some(e) = &a.endpoint {
                cfg.agents.endpoint = e.clone();
            }
            if let Some(m) = &a.model {
                cfg.agents.model = m.clone();
            }
        }
        Command::Eval(a) => {
            if let Some(m) = a.mode {
                cfg.eval.mode = match m {
                    ModeArg::Retry => Mode::Retry,
                    ModeArg::Replace => Mode::Replace,
                };
            }
            if let Some(t) = a.timeout {
                cfg.eval.timeout_secs = t;
            }
            if let Some(r) = &a.runner {
                cfg.eval.runner = Some(r.clone());
            }
            cfg.eval.once |= a.once;
        }
        Command::TinylmTrain(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = a.rank {
                cfg.train.lora_rank = v;
            }
            if let Some(v) = a.alpha {
                cfg.train.lora_alpha = v;
            }
        }
        Command::TinylmGenerate(a) => {
            let d = &mut cfg.decode;
            if let Some(v) = a.strategy {
                d.strategy = v;
            }
            if let Some(v) = a.max_new_tokens {
                d.max_new_tokens = v;
            }
            if let Some(v) = a.temperature {
                d.temperature = v;
            }
            if let Some(v) = a.beam_width {
                d.beam_width = v;
            }
            if let Some(v) = a.top_k {
                d.top_k = v;
            }
            if let Some(v) = a.penalty_alpha {
                d.penalty_alpha = v;
            }
        }
        Command::Stats(_) | Command::Split(_) | Command::Metrics(_) => {}
    }
}

fn execute(cli: Cli) -> Result<(Report, Option<PathBuf>, Header), Failure> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if cli.jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    apply_overrides(&mut cfg, &cli.command);
    let header = Header {
        tool: "cotkit",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: subcommand_name(&cli.command),
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        generated_at: (!cli.deterministic)
            .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())),
    };
    let ctx = Ctx { cfg, jobs: cli.jobs };
    let body = match &cli.command {
        Command::Stats(a) => cmd_stats(a)?,
        Command::Split(a) => cmd_split(&ctx, a)?,
        Command::Clean(a) => cmd_clean(&ctx, a)?,
        Command::Align(a) => cmd_align(&ctx, a)?,
        Command::Metrics(a) => cmd_metrics(&ctx, a)?,
        Command::Eval(a) => cmd_eval(&ctx, a)?,
        Command::TinylmTrain(a) => cmd_train(&ctx, a)?,
        Command::TinylmGenerate(a) => cmd_generate(&ctx, a)?,
    };
    let report = Report {
        text: format!("{}{}", header.render(), body.text),
        json: body.json,
    };
    Ok((report, cli.report, header))
}

fn load<T: Record>(path: &Path) -> anyhow::Result<Vec<T>> {
    corpus::load_jsonl(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_stats(a: &StatsArgs) -> Result<Report, Failure> {
    let records: Vec<CoTRecord> = load(&a.input)?;
    let stats = corpus::token_stats(&records, &WhitespaceTokenizer);
    Ok(Report {
        text: stats.to_table(),
        json: serde_json::to_value(stats).expect("stats serialize"),
    })
}

/// Any JSONL object with an `id`; keeps the whole line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnyRecord {
    id: String,
    #[serde(flatten)]
    rest: serde_json::Map<String, serde_json::Value>,
}

impl Record for AnyRecord {
    const REQUIRED: &'static [&'static str] = &["id"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        Ok(())
    }
}

fn cmd_split(ctx: &Ctx, a: &SplitArgs) -> Result<Report, Failure> {
    let records: Vec<AnyRecord> = load(&a.input)?;
    let (train, valid) = corpus::split(&records, a.n_valid, ctx.cfg.train.seed).map_err(|e| usage(e.to_string()))?;
    corpus::write_jsonl(&a.train_out, &train)?;
    corpus::write_jsonl(&a.valid_out, &valid)?;
    Ok(Report {
        text: format!("train {}\nvalid {}\n", train.len(), valid.len()),
        json: json!({ "train": train.len(), "valid": valid.len() }),
    })
}

fn agent_client(cfg: &LlmClientConfig, log: Option<&Path>, cap: usize) -> anyhow::Result<ChatClient> {
    let audit = match log {
        Some(p) => AuditLog::with_file(p).with_context(|| format!("opening {}", p.display()))?,
        None => AuditLog::in_memory(),
    };
    let mut cfg = cfg.clone();
    cfg.max_in_flight = cfg.max_in_flight.min(cap).max(1);
    Ok(ChatClient::http(cfg, Arc::new(audit))?)
}

fn cmd_clean(ctx: &Ctx, a: &CleanArgs) -> Result<Report, Failure> {
    let fc = &ctx.cfg.filters;
    if !(fc.r3_threshold > 0.0 && fc.r3_threshold <= 1.0) {
        return Err(usage(format!("--r3-threshold {} is outside (0, 1]", fc.r3_threshold)));
    }
    let samples: Vec<CodeSample> = load(&a.input)?;
    let mut protected = Vec::new();
    for p in &a.protected {
        protected.extend(load::<CodeSample>(p)?);
    }
    let checker: Box<dyn DocChecker> = match fc.doc_checker {
        DocCheckerKind::Lexical => Box::new(LexicalDocChecker::default()),
        DocCheckerKind::Agent => {
            let client = agent_client(&ctx.cfg.agents, a.agent_log.as_deref(), ctx.cap(usize::MAX))?;
            Box::new(AgentDocChecker::new(Arc::new(client)))
        }
    };
    let report = filters::clean(&samples, &protected, &PythonParser, checker.as_ref(), fc.r3_threshold)
        .map_err(|e| anyhow!(e))?;
    corpus::write_jsonl(&a.output, &report.kept)?;
    corpus::write_jsonl(&a.audit, &report.audit)?;
    let [r1, r2, r3] = report.stage_sizes;
    let mut text = format!("input      {}\nafter R1   {r1}\nafter R2   {r2}\nafter R3   {r3}\n", samples.len());
    for w in &report.warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    Ok(Report {
        text,
        json: json!({
            "input": samples.len(),
            "stage_sizes": report.stage_sizes,
            "warnings": report.warnings,
        }),
    })
}

fn cmd_align(ctx: &Ctx, a: &AlignArgs) -> Result<Report, Failure> {
    let samples: Vec<CodeSample> = load(&a.input)?;
    let client = agent_client(&ctx.cfg.agents, a.agent_log.as_deref(), ctx.cap(usize::MAX))?;
    let opts = AlignOptions {
        consistency_check: !a.no_consistency_check,
        max_in_flight: client.config().max_in_flight,
    };
    let report = align_pipeline(&samples, &client, &opts);
    corpus::write_jsonl(&a.output, &report.records)?;
    if let Some(p) = &a.drops {
        corpus::write_jsonl(p, &report.dropped)?;
    }
    let mut by_agent: HashMap<String, usize> = HashMap::new();
    for d in &report.dropped {
        *by_agent.entry(format!("{:?}", d.agent)).or_default() += 1;
    }
    let mut agents: Vec<_> = by_agent.into_iter().collect();
    agents.sort();
    let mut text = format!("input {}\nkept {}\n", samples.len(), report.records.len());
    for (agent, n) in &agents {
        let _ = writeln!(text, "dropped by {agent} {n}");
    }
    Ok(Report {
        text,
        json: json!({
            "input": samples.len(),
            "kept": report.records.len(),
            "dropped": agents.into_iter().map(|(k, n)| (k, json!(n))).collect::<serde_json::Map<_, _>>(),
        }),
    })
}

/// One text per line, or one JSONL field per line.
fn read_texts(path: &Path, field: Option<&str>) -> anyhow::Result<Vec<serde_json::Value>> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        match field {
            None => out.push(serde_json::Value::String(line.to_string())),
            Some(_) if line.trim().is_empty() => {}
            Some(_) => {
                let v: serde_json::Value = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}: malformed JSON", path.display(), i + 1))?;
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn field_str(v: &serde_json::Value, field: Option<&str>, path: &Path, i: usize) -> anyhow::Result<String> {
    let s = match field {
        None => v.as_str(),
        Some(f) => v.get(f).and_then(|x| x.as_str()),
    };
    s.map(String::from).ok_or_else(|| {
        anyhow!(
            "{}: record {}: missing string field `{}`",
            path.display(),
            i + 1,
            field.unwrap_or("")
        )
    })
}

fn cmd_metrics(ctx: &Ctx, a: &MetricsArgs) -> Result<Report, Failure> {
    let field = a.field.as_deref();
    let cand_rows = read_texts(&a.candidates, field)?;
    let ref_rows = read_texts(&a.references, field)?;
    let cands = cand_rows
        .iter()
        .enumerate()
        .map(|(i, v)| field_str(v, field, &a.candidates, i))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs = ref_rows
        .iter()
        .enumerate()
        .map(|(i, v)| field_str(v, field, &a.references, i))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let consistency: Option<ConsistencyCounts> = if a.consistency {
        let pairs = cand_rows
            .iter()
            .zip(&cands)
            .enumerate()
            .map(|(i, (v, cot))| Ok((cot.clone(), field_str(v, Some("code"), &a.candidates, i)?)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let client = agent_client(&ctx.cfg.agents, a.agent_log.as_deref(), ctx.cap(usize::MAX))?;
        let n = client.config().max_in_flight;
        Some(textmetrics::consistency_rate(&pairs, &client, n))
    } else {
        None
    };
    let report = textmetrics::evaluate_corpus(&cands, &refs, &BleuOptions::default(), consistency)
        .map_err(|e| usage(e.to_string()))?;
    Ok(Report {
        text: if a.csv { report.to_csv() } else { report.to_table() },
        json: serde_json::to_value(&report).expect("metrics serialize"),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Completion {
    id: String,
    completion: String,
}

impl Record for Completion {
    const REQUIRED: &'static [&'static str] = &["id", "completion"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CotCompletion {
    id: String,
    cot: String,
    completion: String,
}

impl Record for CotCompletion {
    const REQUIRED: &'static [&'static str] = &["id", "cot", "completion"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<Report, Failure> {
    let ec = &ctx.cfg.eval;
    if !(ec.timeout_secs > 0.0 && ec.timeout_secs.is_finite()) {
        return Err(usage("--timeout must be positive"));
    }
    let cmdline = ec.runner.as_deref().ok_or_else(|| usage("no runner: pass --runner or set eval.runner"))?;
    let mode = if ec.once { ChildMode::Once } else { ChildMode::Warm };
    let runner = ProcessRunner::from_command_line(cmdline, mode).map_err(|e| usage(e.to_string()))?;

    let problems = evalharness::load_problems(&a.problems).with_context(|| format!("loading {}", a.problems.display()))?;
    let by_id: HashMap<String, String> = load::<Completion>(&a.candidates)?
        .into_iter()
        .map(|c| (c.id, c.completion))
        .collect();
    let base = problems
        .iter()
        .map(|p| by_id.get(&p.id).cloned().ok_or_else(|| anyhow!("no candidate for problem {}", p.id)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut provider = MapCotProvider::default();
    if let Some(p) = &a.cot_candidates {
        for c in load::<CotCompletion>(p)? {
            provider.by_id.insert(
                c.id,
                CotCandidate {
                    cot: c.cot,
                    code: c.completion,
                },
            );
        }
    }
    let opts = EvalOptions {
        mode: ec.mode,
        timeout: Duration::from_secs_f64(ec.timeout_secs),
        workers: ctx.cap(EvalOptions::default().workers),
    };
    let report = evalharness::evaluate(&problems, &base, &provider, &runner, &opts).map_err(|e| anyhow!(e))?;
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Report {
        text: report.to_table(),
        json: serde_json::to_value(&report).expect("eval report serializes"),
    })
}

fn train_examples(records: &[CoTRecord]) -> Vec<TrainExample> {
    let tok = ByteTokenizer;
    records
        .iter()
        .map(|r| {
            let mut target = tok.encode(&format!(" {}", r.cot));
            target.push(ByteTokenizer::EOS);
            TrainExample {
                input: tok.encode(&render_instruction(&r.prompt)),
                target,
            }
        })
        .collect()
}

fn byte_model_config(cfg: &ModelConfig) -> Result<ModelConfig, Failure> {
    let mut mc = cfg.clone();
    if mc.vocab != ByteTokenizer::VOCAB {
        return Err(usage(format!(
            "model.vocab must be {} for the byte tokenizer, got {}",
            ByteTokenizer::VOCAB,
            mc.vocab
        )));
    }
    mc.eos_id.get_or_insert(ByteTokenizer::EOS);
    Ok(mc)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<Report, Failure> {
    let tc = &ctx.cfg.train;
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let train = train_examples(&load::<CoTRecord>(&a.data)?);
    let valid = match &a.valid {
        Some(p) => train_examples(&load::<CoTRecord>(p)?),
        None => Vec::new(),
    };
    let model = match &a.base {
        Some(p) => model_io::load(p).map_err(|e| anyhow!(e))?.0,
        None => Model::init(byte_model_config(&ctx.cfg.model)?, tc.seed).map_err(|e| usage(e.to_string()))?,
    };
    let mut adapters = lora_attach(&model, tc.lora_rank, tc.lora_alpha, tc.seed).map_err(|e| usage(e.to_string()))?;
    let report = tinylm::train_lora(&model, &mut adapters, &train, &valid, tc).map_err(|e| anyhow!(e))?;
    model_io::save(&a.out, &model, Some(&adapters)).map_err(|e| anyhow!(e))?;

    let mut text = String::from("epoch  train_loss  valid_loss\n");
    for h in &report.history {
        let v = h.valid.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(text, "{:>5}  {:>10.6}  {:>10}", h.epoch, h.train, v);
    }
    let _ = writeln!(
        text,
        "best epoch {} of {}, {} steps{}",
        report.best_epoch,
        report.history.len(),
        report.steps,
        if report.stopped_early { ", stopped early" } else { "" }
    );
    let _ = writeln!(text, "base checksum {}", model.checksum());
    Ok(Report {
        text,
        json: json!({ "train": report, "base_checksum": model.checksum(), "adapters": adapters.len() }),
    })
}

fn cmd_generate(ctx: &Ctx, a: &GenerateArgs) -> Result<Report, Failure> {
    let (model, adapters) = model_io::load(&a.model).map_err(|e| anyhow!(e))?;
    let tok = ByteTokenizer;
    let prompt_text = if a.raw { a.prompt.clone() } else { render_instruction(&a.prompt) };
    let prompt = tok.encode(&prompt_text);
    let strategy = ctx.cfg.decode.strategy(ctx.cfg.train.seed);
    let m = Adapted {
        model: &model,
        adapters: adapters.as_ref(),
    };
    let ids = decode(&m, &prompt, ctx.cfg.decode.max_new_tokens, strategy).map_err(|e| match e {
        tinylm::TinyLmError::InvalidParameter(m) => usage(m),
        other => Failure::Operational(anyhow!(other)),
    })?;
    let text = tok.decode(&ids);
    Ok(Report {
        text: format!("{text}\n"),
        json: json!({ "strategy": strategy, "tokens": ids, "text": text }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.lora_rank, 8);
        assert_eq!(c.train.lora_alpha, 16.0);
        assert_eq!(c.train.max_input_len, 256);
        assert_eq!(c.train.max_output_len, 256);
        assert_eq!(c.train.epochs, 20);
        assert_eq!(c.train.early_stop_patience, 5);
        assert_eq!(c.train.batch_size, 1);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.filters.r3_threshold, 0.9);
        assert_eq!(c.agents.model, "gpt-3.5-turbo");
        assert_eq!(c.eval.mode, Mode::Retry);
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let partial = RunConfig::from_toml("[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.learning_rate, 1e-4);
        assert!(RunConfig::from_toml("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.filters.r3_threshold = 0.8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn one_line_collapses_whitespace() {
        assert_eq!(one_line("a\n  b\tc "), "a b c");
    }
}
