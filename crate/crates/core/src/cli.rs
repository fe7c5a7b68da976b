//! The `medadapt` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid input
//! or configuration. Failures print one line to stderr of the form
//! `error[<category>]: <message>`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotate::{self, AnnotateError, AnnotationMode, CorpusRun};
use crate::backend::{map_bounded, Backend, BackendError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, CorpusError, Dataset, SubsetTag};
use crate::cpoly::{self, CpolyConfig, CpolyError, CpolyShape, ForwardMode};
use crate::eval::{self, EvalError, MissingPolicy, Prediction, Stage};
use crate::glm::{self, GlmError, Sentinels, TokenId};
use crate::jsonl::{self, JsonlError};
use crate::ppl::{self, PplError, DEFAULT_STEM};
use crate::prompting::{write_transcripts, PromptError, StrategyErrorKind, StrategyKind, Template, Transcript};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "medadapt", version, about = "Medical QA adaptation toolkit", arg_required_else_help = true)]
pub struct Cli {
    /// Run configuration (TOML). Command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Validate inputs and report what would happen; write nothing and make
    /// no backend calls.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a PubMedQA-format file and write normalized JSONL.
    Ingest(IngestArgs),
    /// Print record counts, label proportions and average lengths.
    Stats(StatsArgs),
    /// Stratified split by gold label.
    Split(SplitArgs),
    /// Build blank-filling pretraining examples from token sequences.
    PrepGlm(PrepGlmArgs),
    /// Run a prompting strategy (default VoC) over a dataset.
    VocRun(VocRunArgs),
    /// Pick options by minimum perplexity.
    PplRank(PplRankArgs),
    /// Pseudo-label unlabeled records from their long answers.
    Annotate(AnnotateArgs),
    /// Union of a labeled set and a pseudo-labeled set.
    Merge(MergeArgs),
    /// Score predictions against gold labels.
    Score(ScoreArgs),
    /// Render a stage or leaderboard report.
    Report(ReportArgs),
    /// Verify adapter-mixture gradients against finite differences.
    CpolyCheck(CpolyCheckArgs),
    /// Print the training recipe for a stage as TOML.
    EmitRecipe(EmitRecipeArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Input dataset (`.jsonl` or PubMedQA JSON). Defaults to paths.data_in.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Subset tag for PubMedQA JSON input.
    #[arg(long, default_value = "PQA-L")]
    pub subset: String,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Comma-separated fractions summing to 1.
    #[arg(long, value_delimiter = ',', required = true)]
    pub fractions: Vec<f64>,
    /// Comma-separated part names (default part0, part1, ...).
    #[arg(long, value_delimiter = ',')]
    pub names: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to paths.data_out.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepGlmArgs {
    /// One sequence per line of whitespace-separated token ids.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Ordinary vocabulary size; the three sentinels are placed after it.
    #[arg(long)]
    pub vocab_size: u32,
    #[arg(long, default_value_t = 0.15)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 3.0)]
    pub mean_span: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Mock script to use instead of the configured backend.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VocRunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// direct, cot, cove or voc.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    /// Only these record ids (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    /// Output directory. Defaults to paths.data_out.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PplRankArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Stem template file with {{contexts}} and {{question}} slots.
    #[arg(long)]
    pub stem_template: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    LongAnswerOnly,
    LongAnswerPlusVoc,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, value_enum, default_value = "long-answer-plus-voc")]
    pub mode: ModeArg,
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long)]
    pub pseudo: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSONL of {"id", "label"}; label may be option text or key.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, default_value = "PQA-L")]
    pub subset: String,
    /// Count records without a prediction as wrong instead of failing.
    #[arg(long)]
    pub count_missing_wrong: bool,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportKind {
    Stages,
    Leaderboard,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    /// Stage results TOML (`[[stage]] name, accuracy`); defaults to the
    /// bundled reported endpoints.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Our accuracy as a fraction, for the leaderboard.
    #[arg(long)]
    pub accuracy: Option<f64>,
    #[arg(long, default_value = "this run")]
    pub name: String,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ForwardArg {
    Direct,
    Eval,
    Train,
}

#[derive(Debug, Args)]
pub struct CpolyCheckArgs {
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    #[arg(long, default_value_t = 4)]
    pub shared: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, value_enum, default_value = "direct")]
    pub mode: ForwardArg,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Seed for the random configuration (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save the checked configuration (manifest + parameters) here.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmitRecipeArgs {
    /// knowledge_injection, instruction_tuning or task_adaptation.
    #[arg(long)]
    pub stage: String,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Error category, mapped to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Validation,
    Runtime,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => EXIT_USAGE,
            Category::Validation => EXIT_VALIDATION,
            Category::Runtime => EXIT_RUNTIME,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Validation => "validation",
            Category::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {one_line}", self.category.as_str())
    }
}

fn validation(message: impl fmt::Display) -> CliError {
    CliError {
        category: Category::Validation,
        message: message.to_string(),
    }
}

fn runtime(message: impl fmt::Display) -> CliError {
    CliError {
        category: Category::Runtime,
        message: message.to_string(),
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        validation(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        validation(e)
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        validation(e)
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Precondition(_) => validation(e),
            _ => runtime(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        validation(e)
    }
}

impl From<GlmError> for CliError {
    fn from(e: GlmError) -> Self {
        validation(e)
    }
}

impl From<CpolyError> for CliError {
    fn from(e: CpolyError) -> Self {
        match e {
            CpolyError::Io { .. } => runtime(e),
            _ => validation(e),
        }
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Precondition(_) | AnnotateError::IdCollision(_) | AnnotateError::Corpus(_) => validation(e),
            _ => runtime(e),
        }
    }
}

impl From<PplError> for CliError {
    fn from(e: PplError) -> Self {
        match e {
            PplError::Scoring { ref source, .. } if !matches!(source, BackendError::Precondition(_)) => runtime(e),
            _ => validation(e),
        }
    }
}

fn write_err(path: &Path, e: impl fmt::Display) -> CliError {
    runtime(format!("cannot write {}: {e}", path.display()))
}

/// Where a command's output goes.
pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

/// Runs the CLI with process stdout/stderr and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    run_with(
        argv,
        &mut Io {
            out: &mut out,
            err: &mut err,
        },
        None,
    )
}

/// As [`run`], writing to `io`. A `backend` given here replaces whatever
/// the configuration names.
pub fn run_with<I, S>(argv: I, io: &mut Io<'_>, backend: Option<Arc<dyn Backend>>) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(io.out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(io.err, "{}", e.render());
                    let first = if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        "no subcommand given".to_string()
                    } else {
                        let line = e.to_string().lines().next().unwrap_or("invalid usage").to_string();
                        line.trim_start_matches("error: ").to_string()
                    };
                    let _ = writeln!(
                        io.err,
                        "{}",
                        CliError {
                            category: Category::Usage,
                            message: first
                        }
                    );
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(&cli, io, backend) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(io.err, "{e}");
            e.category.exit_code()
        }
    }
}

struct Ctx<'a, 'b> {
    cfg: RunConfig,
    dry_run: bool,
    io: &'a mut Io<'b>,
    backend: Option<Arc<dyn Backend>>,
}

impl Ctx<'_, '_> {
    fn say(&mut self, line: impl fmt::Display) {
        let _ = writeln!(self.io.out, "{line}");
    }

    fn input(&self, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        flag.clone()
            .or_else(|| self.cfg.paths.data_in.clone())
            .ok_or_else(|| validation("no input: pass --input or set paths.data_in"))
    }

    fn out_dir(&self, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        flag.clone()
            .or_else(|| self.cfg.paths.data_out.clone())
            .ok_or_else(|| validation("no output directory: pass --out or set paths.data_out"))
    }

    fn load(&self, args: &InputArgs) -> Result<Dataset, CliError> {
        let path = self.input(&args.input)?;
        let subset: SubsetTag = args.subset.parse()?;
        Ok(corpus::load_any(&path, subset)?)
    }

    fn backend(&self, args: &BackendArgs) -> Result<Arc<dyn Backend>, CliError> {
        if let Some(b) = &self.backend {
            return Ok(b.clone());
        }
        Ok(self.cfg.backend(args.mock.as_deref())?)
    }

    fn mkdir(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))
    }

    fn write_text(&self, path: &Path, body: &str) -> Result<(), CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.mkdir(parent)?;
        }
        jsonl::write_text_atomic(path, body).map_err(|e| write_err(path, e))
    }

    fn write_jsonl<T: serde::Serialize>(&self, path: &Path, items: &[T]) -> Result<(), CliError> {
        let body = jsonl::to_string(items).map_err(|e| write_err(path, e))?;
        self.write_text(path, &body)
    }
}

fn execute(cli: &Cli, io: &mut Io<'_>, backend: Option<Arc<dyn Backend>>) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut ctx = Ctx {
        cfg,
        dry_run: cli.dry_run,
        io,
        backend,
    };
    match &cli.command {
        Command::Ingest(a) => ingest(&mut ctx, a),
        Command::Stats(a) => stats(&mut ctx, a),
        Command::Split(a) => split(&mut ctx, a),
        Command::PrepGlm(a) => prep_glm(&mut ctx, a),
        Command::VocRun(a) => voc_run(&mut ctx, a),
        Command::PplRank(a) => ppl_rank(&mut ctx, a),
        Command::Annotate(a) => annotate_cmd(&mut ctx, a),
        Command::Merge(a) => merge(&mut ctx, a),
        Command::Score(a) => score(&mut ctx, a),
        Command::Report(a) => report(&mut ctx, a),
        Command::CpolyCheck(a) => cpoly_check(&mut ctx, a),
        Command::EmitRecipe(a) => emit_recipe(&mut ctx, a),
    }
}

fn ingest(ctx: &mut Ctx, a: &IngestArgs) -> Result<(), CliError> {
    let ds = ctx.load(&a.input)?;
    let output = match &a.output {
        Some(p) => p.clone(),
        None => ctx.out_dir(&None)?.join("dataset.jsonl"),
    };
    if ctx.dry_run {
        ctx.say(format!("dry run: {} records would be written to {}", ds.len(), output.display()));
        return Ok(());
    }
    ctx.write_text(&output, &ds.to_jsonl()?)?;
    ctx.say(format!("wrote {} records to {}", ds.len(), output.display()));
    Ok(())
}

fn stats(ctx: &mut Ctx, a: &StatsArgs) -> Result<(), CliError> {
    let report = corpus::dataset_stats(&ctx.load(&a.input)?)?;
    if a.json {
        let body = serde_json::to_string_pretty(&report).map_err(runtime)?;
        ctx.say(body);
    } else {
        ctx.say(&report);
    }
    Ok(())
}

fn split(ctx: &mut Ctx, a: &SplitArgs) -> Result<(), CliError> {
    let seed = ctx.cfg.require_seed(a.seed)?;
    let ds = ctx.load(&a.input)?;
    let names: Vec<String> = if a.names.is_empty() {
        (0..a.fractions.len()).map(|i| format!("part{i}")).collect()
    } else {
        a.names.clone()
    };
    if names.len() != a.fractions.len() {
        return Err(validation(format!(
            "{} names for {} fractions",
            names.len(),
            a.fractions.len()
        )));
    }
    let parts = corpus::split(&ds, &a.fractions, seed)?;
    let out = ctx.out_dir(&a.out)?;
    for (name, part) in names.iter().zip(&parts) {
        let path = out.join(format!("{name}.jsonl"));
        if ctx.dry_run {
            ctx.say(format!("dry run: {name}: {} records -> {}", part.len(), path.display()));
        } else {
            ctx.write_text(&path, &part.to_jsonl()?)?;
            ctx.say(format!("{name}: {} records -> {}", part.len(), path.display()));
        }
    }
    Ok(())
}

fn read_sequences(path: &Path) -> Result<Vec<Vec<TokenId>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<TokenId>().map_err(|_| {
                        validation(format!("{}:{}: `{t}` is not a token id", path.display(), no + 1))
                    })
                })
                .collect()
        })
        .collect()
}

fn prep_glm(ctx: &mut Ctx, a: &PrepGlmArgs) -> Result<(), CliError> {
    let seed = ctx.cfg.require_seed(a.seed)?;
    let input = ctx.input(&a.input)?;
    let sequences = read_sequences(&input)?;
    let sentinels = Sentinels::after(a.vocab_size);
    let mut examples = Vec::with_capacity(sequences.len());
    let mut masked = 0usize;
    let mut total = 0usize;
    for (i, seq) in sequences.iter().enumerate() {
        let spans = glm::sample_spans(seq.len(), a.mask_ratio, a.mean_span, seed.wrapping_add(i as u64))
            .map_err(|e| validation(format!("sequence {}: {e}", i + 1)))?;
        masked += spans.masked_tokens();
        total += seq.len();
        examples.push(glm::corrupt(seq, &spans, &sentinels).map_err(|e| validation(format!("sequence {}: {e}", i + 1)))?);
    }
    let output = match &a.output {
        Some(p) => p.clone(),
        None => ctx.out_dir(&None)?.join("glm.jsonl"),
    };
    let ratio = if total == 0 { 0.0 } else { masked as f64 / total as f64 };
    if ctx.dry_run {
        ctx.say(format!(
            "dry run: {} examples (mask ratio {ratio:.4}) would be written to {}",
            examples.len(),
            output.display()
        ));
        return Ok(());
    }
    let body = glm::to_jsonl(&sentinels, &examples).map_err(runtime)?;
    ctx.write_text(&output, &body)?;
    ctx.say(format!("wrote {} examples (mask ratio {ratio:.4}) to {}", examples.len(), output.display()));
    Ok(())
}

fn strategy_kind(flag: &Option<String>) -> Result<Option<StrategyKind>, CliError> {
    flag.as_deref().map(str::parse).transpose().map_err(validation)
}

fn predictions_from(decisions: &[(String, Option<String>)]) -> Vec<Prediction> {
    decisions
        .iter()
        .filter_map(|(id, c)| {
            c.as_ref().map(|c| Prediction {
                id: id.clone(),
                label: c.clone(),
            })
        })
        .collect()
}

fn voc_run(ctx: &mut Ctx, a: &VocRunArgs) -> Result<(), CliError> {
    let ds = ctx.load(&a.input)?;
    let strategy = ctx
        .cfg
        .strategy(strategy_kind(&a.strategy)?, a.templates_dir.as_deref())?
        .with_concurrency(ctx.cfg.concurrency(a.backend.concurrency));
    let records: Vec<_> = if a.ids.is_empty() {
        ds.records().iter().collect()
    } else {
        a.ids
            .iter()
            .map(|id| ds.get(id).ok_or_else(|| validation(format!("no record with id {id}"))))
            .collect::<Result<_, _>>()?
    };
    let out = ctx.out_dir(&a.out)?;
    let backend = ctx.backend(&a.backend)?;
    if ctx.dry_run {
        ctx.say(format!(
            "dry run: {} records with strategy {} would be written to {}",
            records.len(),
            strategy.kind.as_str(),
            out.display()
        ));
        return Ok(());
    }
    let results = map_bounded(&records, ctx.cfg.concurrency(a.backend.concurrency), |_, r| {
        crate::prompting::run_strategy(&strategy, r, backend.as_ref())
    });
    let mut transcripts: Vec<Transcript> = Vec::with_capacity(results.len());
    let mut decisions = Vec::with_capacity(results.len());
    let mut unparsed = 0usize;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok((d, t)) => {
                decisions.push((r.id.clone(), Some(d.choice)));
                transcripts.push(t);
            }
            Err(e) => match e.kind {
                StrategyErrorKind::Parse(_) => {
                    unparsed += 1;
                    decisions.push((r.id.clone(), None));
                    transcripts.push(*e.transcript);
                }
                StrategyErrorKind::Backend(b) => {
                    return Err(runtime(format!("record {}: {b}", r.id)));
                }
                StrategyErrorKind::Prompt(p) => return Err(validation(format!("record {}: {p}", r.id))),
            },
        }
    }
    let transcripts_path = ctx
        .cfg
        .paths
        .transcripts_dir
        .clone()
        .unwrap_or_else(|| out.clone())
        .join("transcripts.jsonl");
    if let Some(parent) = transcripts_path.parent() {
        ctx.mkdir(parent)?;
    }
    write_transcripts(&transcripts_path, &transcripts).map_err(|e| write_err(&transcripts_path, e))?;
    let preds_path = out.join("predictions.jsonl");
    ctx.write_jsonl(&preds_path, &predictions_from(&decisions))?;
    ctx.say(format!(
        "{} records, {} decided, {} unparsed; predictions -> {}, transcripts -> {}",
        records.len(),
        records.len() - unparsed,
        unparsed,
        preds_path.display(),
        transcripts_path.display()
    ));
    Ok(())
}

fn ppl_rank(ctx: &mut Ctx, a: &PplRankArgs) -> Result<(), CliError> {
    let ds = ctx.load(&a.input)?;
    let stem_text = match &a.stem_template {
        Some(p) => std::fs::read_to_string(p).map_err(|e| validation(format!("cannot read {}: {e}", p.display())))?,
        None => DEFAULT_STEM.to_string(),
    };
    let stem = Template::parse("stem", stem_text.trim_end_matches('\n')).map_err(validation)?;
    stem.check_slots(&["question", "contexts"]).map_err(validation)?;
    let out = ctx.out_dir(&a.out)?;
    let backend = ctx.backend(&a.backend)?;
    if ctx.dry_run {
        ctx.say(format!("dry run: {} records would be ranked into {}", ds.len(), out.display()));
        return Ok(());
    }
    let concurrency = ctx.cfg.concurrency(a.backend.concurrency);
    let results = map_bounded(ds.records(), concurrency, |_, r| {
        ppl::rank_options(backend.as_ref(), r, &stem)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let preds: Vec<Prediction> = results
        .iter()
        .map(|r| Prediction {
            id: r.record_id.clone(),
            label: r.chosen.clone(),
        })
        .collect();
    ctx.write_jsonl(&out.join("ppl.jsonl"), &results)?;
    ctx.write_jsonl(&out.join("predictions.jsonl"), &preds)?;
    ctx.say(format!("ranked {} records into {}", results.len(), out.display()));
    Ok(())
}

fn annotate_cmd(ctx: &mut Ctx, a: &AnnotateArgs) -> Result<(), CliError> {
    let ds = ctx.load(&a.input)?;
    let mode = match a.mode {
        ModeArg::LongAnswerOnly => AnnotationMode::LongAnswerOnly,
        ModeArg::LongAnswerPlusVoc => AnnotationMode::LongAnswerPlusVoc,
    };
    let strategy = ctx.cfg.strategy(Some(StrategyKind::Voc), a.templates_dir.as_deref())?;
    let out = ctx.out_dir(&a.out)?;
    let backend = ctx.backend(&a.backend)?;
    if ctx.dry_run {
        for r in ds.records() {
            if r.long_answer.is_none() || r.gold.is_some() {
                return Err(validation(format!(
                    "record {} must have a long answer and no gold label",
                    r.id
                )));
            }
        }
        ctx.say(format!(
            "dry run: {} records would be annotated ({mode}) into {}",
            ds.len(),
            out.display()
        ));
        return Ok(());
    }
    ctx.mkdir(&out)?;
    let mut run = CorpusRun::new(mode, &strategy, &out).concurrency(ctx.cfg.concurrency(a.backend.concurrency));
    run.batch_size = a.batch_size.max(1);
    let summary = annotate::annotate_corpus(&ds, backend.as_ref(), &run)?;
    let dist: Vec<String> = summary
        .label_distribution
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    ctx.say(format!(
        "annotated {} of {} ({} unannotated; {}); outputs in {}",
        summary.annotated,
        summary.total,
        summary.unannotated,
        dist.join(" "),
        out.display()
    ));
    Ok(())
}

fn merge(ctx: &mut Ctx, a: &MergeArgs) -> Result<(), CliError> {
    let labeled = Dataset::read_jsonl(&a.labeled)?;
    let pseudo = Dataset::read_jsonl(&a.pseudo)?;
    let merged = annotate::merge_pseudo(&labeled, &pseudo)?;
    if ctx.dry_run {
        ctx.say(format!("dry run: {} records would be written to {}", merged.len(), a.output.display()));
        return Ok(());
    }
    ctx.write_text(&a.output, &merged.to_jsonl()?)?;
    ctx.say(format!(
        "merged {} labeled + {} pseudo -> {}",
        labeled.len(),
        pseudo.len(),
        a.output.display()
    ));
    Ok(())
}

fn score(ctx: &mut Ctx, a: &ScoreArgs) -> Result<(), CliError> {
    let preds = eval::read_predictions(&a.predictions).map_err(|e| match e {
        EvalError::Jsonl(JsonlError::Io { .. }) => validation(e),
        other => other.into(),
    })?;
    let gold = corpus::load_any(&a.gold, a.subset.parse()?)?;
    let policy = if a.count_missing_wrong {
        MissingPolicy::CountWrong
    } else {
        MissingPolicy::Error
    };
    let report = eval::score(&preds, &gold, policy)?;
    let _ = write!(ctx.io.out, "{report}");
    if let Some(path) = &a.summary {
        if ctx.dry_run {
            ctx.say(format!("dry run: summary would be written to {}", path.display()));
        } else {
            let body = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
            ctx.write_text(path, &body)?;
        }
    }
    Ok(())
}

fn report(ctx: &mut Ctx, a: &ReportArgs) -> Result<(), CliError> {
    let text = match a.kind {
        ReportKind::Stages => {
            let stages = match &a.input {
                Some(p) => eval::parse_stage_results(
                    &std::fs::read_to_string(p).map_err(|e| validation(format!("cannot read {}: {e}", p.display())))?,
                )?,
                None => eval::reference_stages(),
            };
            eval::render_stage_report(&stages)?
        }
        ReportKind::Leaderboard => {
            let acc = a
                .accuracy
                .ok_or_else(|| validation("--accuracy is required for the leaderboard"))?;
            eval::render_leaderboard(&eval::reference_leaderboard(), (&a.name, acc))?
        }
    };
    match &a.output {
        Some(p) if !ctx.dry_run => ctx.write_text(p, &text)?,
        Some(p) => ctx.say(format!("dry run: report would be written to {}", p.display())),
        None => {
            let _ = write!(ctx.io.out, "{text}");
        }
    }
    Ok(())
}

fn cpoly_check(ctx: &mut Ctx, a: &CpolyCheckArgs) -> Result<(), CliError> {
    let seed = a.seed.or(ctx.cfg.seed).unwrap_or(0);
    let shape = CpolyShape {
        tasks: a.tasks,
        shared: a.shared,
        rank: a.rank,
        d_in: a.dim,
        d_out: a.dim,
        tau: a.tau,
        scale: 1.0,
    };
    if shape.tasks == 0 || shape.rank == 0 || shape.d_in == 0 {
        return Err(validation("tasks, rank and dim must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = CpolyConfig::random(&mut rng, &shape)?;
    let mode = match a.mode {
        ForwardArg::Direct => ForwardMode::Direct,
        ForwardArg::Eval => ForwardMode::Eval,
        ForwardArg::Train => ForwardMode::Train { seed },
    };
    let mut worst = 0.0f64;
    for t in 0..config.tasks() {
        let x = DVector::from_fn(shape.d_in, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(shape.d_out, |_, _| rng.random_range(-1.0..1.0));
        let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
        for (class, err) in cpoly::check_all_gradients(&config, t, &x, &c, mode, a.eps)? {
            let key = match class {
                cpoly::ParamClass::SharedDown(_) => "shared.down".to_string(),
                cpoly::ParamClass::SharedUp(_) => "shared.up".to_string(),
                other => other.to_string(),
            };
            let e = per_class.entry(key).or_insert(0.0);
            *e = e.max(err);
            worst = worst.max(err);
        }
        let parts: Vec<String> = per_class.iter().map(|(k, v)| format!("{k}={v:.2e}")).collect();
        ctx.say(format!("task {t}: {}", parts.join(" ")));
    }
    ctx.say(format!("max gradient error: {worst:.3e}"));
    if let Some(dir) = &a.save {
        if ctx.dry_run {
            ctx.say(format!("dry run: configuration would be saved to {}", dir.display()));
        } else {
            ctx.mkdir(dir)?;
            cpoly::save_config(&config, dir, "cpoly")?;
        }
    }
    if worst > a.tolerance {
        return Err(runtime(format!(
            "max gradient error {worst:.3e} exceeds tolerance {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn emit_recipe(ctx: &mut Ctx, a: &EmitRecipeArgs) -> Result<(), CliError> {
    let stage: Stage = a.stage.parse()?;
    let body = eval::emit_recipe(stage).to_toml();
    match &a.output {
        Some(p) if !ctx.dry_run => ctx.write_text(p, &body)?,
        Some(p) => ctx.say(format!("dry run: recipe would be written to {}", p.display())),
        None => {
            let _ = write!(ctx.io.out, "{body}");
        }
    }
    Ok(())
}
