//! The `bialign` command-line front end.
//!
//! Every subcommand reads and writes plain files, so runs can be chained
//! across processes:
//!
//! ```text
//! bialign align src.vec tgt.vec --out q.txt
//! bialign refine src.vec tgt.vec q.txt --out q_refined.txt
//! bialign evaluate src.vec tgt.vec q_refined.txt dict.txt
//! bialign induce src.vec tgt.vec q_refined.txt --out lexicon.txt
//! bialign solve-ot cost.txt --lambda 1e6 --epsilon 0.01
//! ```
//!
//! Embeddings are normalized (unit length, centered, unit length) on load.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::align::{self, AlignConfig};
use crate::embeddings::{load_fasttext_vec, normalize, EmbeddingMatrix};
use crate::mapping::OrthogonalMap;
use crate::ot::{format_plan, parse_cost_matrix, sinkhorn_generalized, MarginalWeights, Metric, SinkhornParams};
use crate::retrieval::{evaluate_map, induce_lexicon, load_muse_dictionary, Criterion};
use crate::{Error, Result};

/// Number of trailing losses kept in the run report.
pub const LOSS_TAIL: usize = 20;

#[derive(Debug, Parser)]
#[command(
    name = "bialign",
    version,
    about = "Unsupervised bilingual embedding alignment",
    args_override_self = true
)]
pub struct Cli {
    /// Worker threads for the parallel kernels (1 gives bitwise reproducible runs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn an orthogonal map from source to target embeddings.
    Align(AlignArgs),
    /// Improve a map with mutual-CSLS dictionary induction and Procrustes.
    Refine(RefineArgs),
    /// Score a map against a gold dictionary (precision@1, JSON line).
    Evaluate(EvaluateArgs),
    /// Write the induced lexicon for the most frequent source words.
    Induce(InduceArgs),
    /// Solve one transport problem read from a text cost matrix.
    SolveOt(SolveOtArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    pub src: PathBuf,
    pub tgt: PathBuf,
    /// Rows read from each embedding file.
    #[arg(long, default_value_t = 200_000)]
    pub max_words: usize,
}

/// Training flags. Unset flags fall back to `--from-report` or the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Sets both relaxation weights.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Initial batch size (doubles every epoch).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Iterations of the first epoch (quartered every epoch).
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub init_words: Option<usize>,
    /// Batches are drawn from this many most frequent words.
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub rcsls_k: Option<usize>,
    /// Only map source onto target.
    #[arg(long)]
    pub unidirectional: bool,
    /// Start from the configuration echoed in a previous run report.
    #[arg(long)]
    pub from_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Sqeuclidean,
    Rcsls,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Sqeuclidean => Metric::SquaredEuclidean,
            MetricArg::Rcsls => Metric::Rcsls,
        }
    }
}

impl TrainFlags {
    pub fn resolve(&self) -> Result<AlignConfig> {
        let mut cfg = match &self.from_report {
            Some(path) => RunReport::load(path)?.config,
            None => AlignConfig::default(),
        };
        if let Some(l) = self.lambda {
            cfg.lambda1 = l;
            cfg.lambda2 = l;
        }
        macro_rules! take {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v.into(); })*
            };
        }
        take!(epsilon => epsilon, lambda1 => lambda1, lambda2 => lambda2, tol => tol,
              max_iter => max_iter, batch => batch_size_init, iters => iters_per_epoch_init,
              epochs => epochs, init_words => init_words, pool => train_pool, lr => lr,
              seed => seed, metric => cost_metric, rcsls_k => rcsls_k);
        if self.unidirectional {
            cfg.bidirectional = false;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "q.txt")]
    pub out: PathBuf,
    /// Run report path (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    pub q: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    #[arg(long, default_value_t = 10_000)]
    pub dict_size: usize,
    #[arg(long, default_value_t = 10)]
    pub csls_k: usize,
    #[arg(long, default_value = "q_refined.txt")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Csls,
    Nn,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    pub q: PathBuf,
    pub dict: PathBuf,
    #[arg(long, value_enum, default_value_t = CriterionArg::Csls)]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = 10)]
    pub csls_k: usize,
}

#[derive(Debug, Args)]
pub struct InduceArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    pub q: PathBuf,
    /// How many of the most frequent source words to translate (default: all loaded).
    #[arg(long)]
    pub source_count: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub csls_k: usize,
    /// Lexicon path; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveOtArgs {
    pub cost: PathBuf,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

/// Output paths written by `align`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub map: PathBuf,
    pub report: PathBuf,
}

/// JSON summary of an `align` run. `config` is the fully resolved
/// configuration and can be fed back with `--from-report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: AlignConfig,
    pub wall_time_seconds: f64,
    pub iterations: usize,
    pub forward_steps: usize,
    pub backward_steps: usize,
    pub loss_tail: Vec<f64>,
    pub outputs: Outputs,
}

impl RunReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("run report: {e}")).in_file(path))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("run report serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

fn load_embeddings(path: &Path, max_words: usize) -> Result<EmbeddingMatrix> {
    normalize(&load_fasttext_vec(path, max_words)?).map_err(|e| e.in_file(path))
}

fn load_pair(inputs: &Inputs) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    Ok((
        load_embeddings(&inputs.src, inputs.max_words)?,
        load_embeddings(&inputs.tgt, inputs.max_words)?,
    ))
}

fn load_map_for(path: &Path, x: &EmbeddingMatrix) -> Result<OrthogonalMap> {
    let q = OrthogonalMap::load(path)?;
    if q.dim() != x.d() {
        return Err(Error::Shape(format!("map has dimension {}, embeddings have {}", q.dim(), x.d())).in_file(path));
    }
    Ok(q)
}

fn stdout_line(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_align(args: &AlignArgs) -> Result<RunReport> {
    let cfg = args.train.resolve()?;
    let (x, y) = load_pair(&args.inputs)?;
    let started = Instant::now();
    let state = align::align(&x, &y, &cfg)?;
    let wall = started.elapsed().as_secs_f64();

    state.map().save(&args.out)?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".report.json");
        p.into()
    });
    let tail_start = state.loss_trace.len().saturating_sub(LOSS_TAIL);
    let report = RunReport {
        config: cfg,
        wall_time_seconds: wall,
        iterations: state.iteration,
        forward_steps: state.forward_steps,
        backward_steps: state.backward_steps,
        loss_tail: state.loss_trace[tail_start..].to_vec(),
        outputs: Outputs {
            map: args.out.clone(),
            report: report_path.clone(),
        },
    };
    report.save(&report_path)?;
    Ok(report)
}

pub fn cmd_refine(args: &RefineArgs) -> Result<OrthogonalMap> {
    let (x, y) = load_pair(&args.inputs)?;
    let q = load_map_for(&args.q, &x)?;
    let refined = align::refine(&x, &y, &q, args.rounds, args.dict_size, args.csls_k)?;
    refined.save(&args.out)?;
    Ok(refined)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<crate::EvalReport> {
    let (x, y) = load_pair(&args.inputs)?;
    let q = load_map_for(&args.q, &x)?;
    let gold = load_muse_dictionary(&args.dict)?;
    let criterion = match args.criterion {
        CriterionArg::Csls => Criterion::Csls { k: args.csls_k },
        CriterionArg::Nn => Criterion::Nn,
    };
    let report = evaluate_map(&x, &y, &q, &gold, criterion)?;
    stdout_line(&report.to_json())?;
    Ok(report)
}

pub fn cmd_induce(args: &InduceArgs) -> Result<crate::BilingualDictionary> {
    let (x, y) = load_pair(&args.inputs)?;
    let q = load_map_for(&args.q, &x)?;
    let count = args.source_count.unwrap_or(x.n());
    let lexicon = induce_lexicon(&x, &y, &q, count, args.csls_k)?;
    match &args.out {
        Some(path) => lexicon.save(path)?,
        None => {
            let text = lexicon.to_text();
            std::io::stdout()
                .lock()
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))?
        }
    }
    Ok(lexicon)
}

/// The summary line printed after the plan.
pub fn solve_ot_summary(cost: f64, converged: bool, iters: usize, mass: f64) -> String {
    format!("cost={cost} converged={converged} iters={iters} mass={mass}")
}

pub fn cmd_solve_ot(args: &SolveOtArgs) -> Result<String> {
    let path = &args.cost;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let d = parse_cost_matrix(&text).map_err(|e| e.in_file(path))?;
    let mut params = SinkhornParams::default();
    if let Some(l) = args.lambda {
        params.lambda1 = l;
        params.lambda2 = l;
    }
    if let Some(v) = args.epsilon {
        params.epsilon = v;
    }
    if let Some(v) = args.lambda1 {
        params.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        params.lambda2 = v;
    }
    if let Some(v) = args.tol {
        params.tol = v;
    }
    if let Some(v) = args.max_iter {
        params.max_iter = v;
    }
    let w = MarginalWeights::uniform(d.nrows(), d.ncols())?;
    let plan = sinkhorn_generalized(&d, &w, &params)?;
    let out = format!(
        "{}\n{}",
        format_plan(&plan).trim_end(),
        solve_ot_summary(plan.cost(&d), plan.converged, plan.iterations_used, plan.total_mass())
    );
    stdout_line(&out)?;
    Ok(out)
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Align(a) => {
            let report = cmd_align(a)?;
            log::info!(
                "wrote {} and {} in {:.1}s",
                report.outputs.map.display(),
                report.outputs.report.display(),
                report.wall_time_seconds
            );
        }
        Command::Refine(a) => {
            cmd_refine(a)?;
        }
        Command::Evaluate(a) => {
            cmd_evaluate(a)?;
        }
        Command::Induce(a) => {
            cmd_induce(a)?;
        }
        Command::SolveOt(a) => {
            cmd_solve_ot(a)?;
        }
    }
    Ok(())
}

/// Runs a parsed command line inside a thread pool of the requested size.
pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::Invalid("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}
