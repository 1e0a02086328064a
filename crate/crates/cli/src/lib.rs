//! The `semhash` command-line pipeline: `synth`, `denoise`, `simgen`,
//! `train`, `encode` and `eval`.
//!
//! [`run`] parses arguments, executes one verb and returns the process exit
//! code: 0 on success, 1 for usage and configuration errors, 2 for data and
//! format errors, 3 for numerical failures.

pub mod config;
pub mod error;
pub mod synth;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use semhash::conceptsim::{
    concept_distributions, denoise_many, similarity_block, source_from_scores, DenoisedTemperature,
    SimilarityMode, SimilaritySource, Temperature,
};
use semhash::datastore::{
    read_codes, read_distribution_matrix, read_feature_matrix, read_labels, read_score_matrix,
    write_codes, write_distribution_matrix, DistributionMatrix, ScoreMatrix,
};
use semhash::eval::{evaluate, format_sig9, write_report_csv, PrAveraging};
use semhash::hamming::binarize;
use semhash::hashnet::{forward, read_model, train, write_model, EpochStats};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::synth::SynthSpec;

pub const MODEL_FILE: &str = "model.uhsw";
pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";
pub const DENOISE_REPORT_FILE: &str = "denoise_report.txt";
pub const SIMILARITY_PREVIEW_FILE: &str = "similarity_preview.csv";

const DEFAULT_P_AT_N: [usize; 9] = [1, 10, 50, 100, 200, 500, 1000, 2000, 5000];

#[derive(Debug, Parser)]
#[command(
    name = "semhash",
    version,
    about = "Concept-based semantic hashing pipeline"
)]
pub struct Cli {
    /// Run configuration (key = value); required by `train`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for `synth`; overrides the config seed for `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Softmax concept distributions, drop rare and dominant concepts.
    Denoise(DenoiseArgs),
    /// Write concept distributions and a similarity preview.
    Simgen(SimgenArgs),
    /// Train a hashing head from the run configuration.
    Train(TrainArgs),
    /// Encode features into packed binary codes.
    Encode(EncodeArgs),
    /// MAP, precision at N and PR-over-radius for query and database codes.
    Eval(EvalArgs),
    /// Generate separable synthetic clusters.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SecondPass {
    Rescale,
    Keep,
}

impl From<SecondPass> for DenoisedTemperature {
    fn from(s: SecondPass) -> Self {
        match s {
            SecondPass::Rescale => DenoisedTemperature::Rescale,
            SecondPass::Keep => DenoisedTemperature::Keep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Concept,
    ConceptNoDenoise,
    FeatureCosine,
}

impl From<Mode> for SimilarityMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Concept => SimilarityMode::Concept,
            Mode::ConceptNoDenoise => SimilarityMode::ConceptNoDenoise,
            Mode::FeatureCosine => SimilarityMode::FeatureCosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Score files, one per prompt template (comma-separated or repeated).
    #[arg(long, required = true, value_delimiter = ',')]
    pub scores: Vec<PathBuf>,
    /// Temperature as a multiple of the concept count.
    #[arg(long, default_value_t = 3.0)]
    pub tau_mult: f64,
    /// Temperature of the second pass over the kept concepts.
    #[arg(long, value_enum, default_value_t = SecondPass::Rescale)]
    pub tau_after_denoise: SecondPass,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimgenArgs {
    #[arg(long, value_enum, default_value_t = Mode::Concept)]
    pub mode: Mode,
    /// Score files for the concept modes (comma-separated or repeated).
    #[arg(long, value_delimiter = ',')]
    pub scores: Vec<PathBuf>,
    /// Feature file for `feature-cosine`.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    pub tau_mult: f64,
    #[arg(long, value_enum, default_value_t = SecondPass::Rescale)]
    pub tau_after_denoise: SecondPass,
    /// Side of the leading similarity block written to the preview.
    #[arg(long, default_value_t = 10)]
    pub preview: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub query_codes: PathBuf,
    #[arg(long)]
    pub db_codes: PathBuf,
    #[arg(long)]
    pub query_labels: PathBuf,
    #[arg(long)]
    pub db_labels: PathBuf,
    /// Ranking depth for MAP.
    #[arg(long, default_value_t = 5000)]
    pub topn: usize,
    /// Depths for the precision curve (default: standard depths up to the
    /// database size).
    #[arg(long, value_delimiter = ',')]
    pub p_at_n: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Averaging::Micro)]
    pub pr_averaging: Averaging,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 50)]
    pub per_cluster: usize,
    #[arg(long, default_value_t = 20)]
    pub concepts: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Points per cluster written to the `query_` split (0 = no split).
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the verb and returns
/// the exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Denoise(a) => cmd_denoise(a),
        Command::Simgen(a) => cmd_simgen(a),
        Command::Train(a) => cmd_train(cli.config.as_deref(), cli.seed, a),
        Command::Encode(a) => cmd_encode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(cli.seed.unwrap_or(0), a),
    })
}

fn check_tau_mult(r: f64) -> CliResult<()> {
    if !(r.is_finite() && r > 0.0) {
        return Err(CliError::Usage(format!(
            "--tau-mult must be positive, got {r}"
        )));
    }
    Ok(())
}

fn read_scores(paths: &[PathBuf]) -> CliResult<Vec<ScoreMatrix>> {
    paths
        .iter()
        .map(|p| read_score_matrix(p).map_err(CliError::from))
        .collect()
}

/// `distributions.uhsd` for one template, `distributions_<t>.uhsd` for several.
pub fn distribution_file_names(count: usize) -> Vec<String> {
    if count == 1 {
        vec!["distributions.uhsd".to_string()]
    } else {
        (0..count)
            .map(|t| format!("distributions_{t}.uhsd"))
            .collect()
    }
}

fn write_distributions(dir: &Path, dists: &[DistributionMatrix]) -> CliResult<()> {
    for (name, d) in distribution_file_names(dists.len()).iter().zip(dists) {
        write_distribution_matrix(dir.join(name), d)?;
    }
    Ok(())
}

pub fn cmd_denoise(a: &DenoiseArgs) -> CliResult<()> {
    check_tau_mult(a.tau_mult)?;
    let scores = read_scores(&a.scores)?;
    let tau = Temperature::PerConcept(a.tau_mult).resolve(scores[0].m());
    let (report, dists) = denoise_many(&scores, tau, a.tau_after_denoise.into())?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(
        a.out.join(DENOISE_REPORT_FILE),
        report.render_text(scores[0].concept_names()),
    )?;
    write_distributions(&a.out, &dists)?;
    log::info!("kept {} of {} concepts", report.kept.len(), report.m());
    Ok(())
}

fn write_preview(dir: &Path, src: &SimilaritySource, side: usize) -> CliResult<()> {
    let idx: Vec<usize> = (0..side.min(src.n())).collect();
    let block = similarity_block(src, &idx, &idx)?;
    let mut out = String::from("i,j,q\n");
    for &i in &idx {
        for &j in &idx {
            let _ = writeln!(out, "{i},{j},{}", format_sig9(block.get(i, j)));
        }
    }
    std::fs::write(dir.join(SIMILARITY_PREVIEW_FILE), out)?;
    Ok(())
}

pub fn cmd_simgen(a: &SimgenArgs) -> CliResult<()> {
    check_tau_mult(a.tau_mult)?;
    let mode = SimilarityMode::from(a.mode);
    std::fs::create_dir_all(&a.out)?;
    let src = match mode {
        SimilarityMode::FeatureCosine => {
            let path = a
                .features
                .as_ref()
                .ok_or_else(|| CliError::Usage("feature-cosine needs --features".into()))?;
            SimilaritySource::feature_cosine(&read_feature_matrix(path)?)?
        }
        SimilarityMode::Concept | SimilarityMode::ConceptNoDenoise => {
            if a.scores.is_empty() {
                return Err(CliError::Usage(format!(
                    "{} mode needs --scores",
                    mode.as_str()
                )));
            }
            let scores = read_scores(&a.scores)?;
            let tau = Temperature::PerConcept(a.tau_mult).resolve(scores[0].m());
            let dists = if mode == SimilarityMode::Concept {
                let (report, dists) = denoise_many(&scores, tau, a.tau_after_denoise.into())?;
                std::fs::write(
                    a.out.join(DENOISE_REPORT_FILE),
                    report.render_text(scores[0].concept_names()),
                )?;
                dists
            } else {
                scores
                    .iter()
                    .map(|s| concept_distributions(s, tau))
                    .collect::<semhash::Result<Vec<_>>>()?
            };
            write_distributions(&a.out, &dists)?;
            SimilaritySource::concept(mode, &dists)?
        }
    };
    write_preview(&a.out, &src, a.preview)
}

/// `epoch,total,l2,contrastive,quant`, one row per epoch.
pub fn render_loss_history(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,total,l2,contrastive,quant\n");
    for s in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.epoch,
            format_sig9(s.total),
            format_sig9(s.l2),
            format_sig9(s.contrastive),
            format_sig9(s.quant)
        );
    }
    out
}

pub fn cmd_train(config: Option<&Path>, seed: Option<u64>, a: &TrainArgs) -> CliResult<()> {
    let path = config.ok_or_else(|| CliError::Usage("train needs --config".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output_dir in the config and no --out".into()))?;
    let features_path = cfg
        .features_path
        .as_ref()
        .ok_or_else(|| CliError::Config("features_path is required for training".into()))?;
    let features = read_feature_matrix(features_path)?;
    std::fs::create_dir_all(&out)?;

    let src = match cfg.sim_mode {
        SimilarityMode::FeatureCosine => SimilaritySource::feature_cosine(&features)?,
        mode => match (
            cfg.scores_paths.is_empty(),
            cfg.distributions_paths.is_empty(),
        ) {
            (false, true) => {
                let scores = read_scores(&cfg.scores_paths)?;
                let (src, report) =
                    source_from_scores(&scores, mode, cfg.temperature, cfg.tau_after_denoise)?;
                if let Some(report) = report {
                    std::fs::write(
                        out.join(DENOISE_REPORT_FILE),
                        report.render_text(scores[0].concept_names()),
                    )?;
                }
                src
            }
            (true, false) => {
                let dists = cfg
                    .distributions_paths
                    .iter()
                    .map(read_distribution_matrix)
                    .collect::<semhash::Result<Vec<_>>>()?;
                SimilaritySource::concept(mode, &dists)?
            }
            (false, false) => {
                return Err(CliError::Config(
                    "give either scores_path or distributions_path, not both".into(),
                ))
            }
            (true, true) => {
                return Err(CliError::Config(format!(
                    "sim_mode {} needs scores_path or distributions_path",
                    mode.as_str()
                )))
            }
        },
    };

    log::info!(
        "training k={} on {} images ({} epochs, batch {})",
        cfg.train.k,
        features.n(),
        cfg.train.epochs,
        cfg.train.batch
    );
    let outcome = train(&features, &src, &cfg.train)?;
    write_model(out.join(MODEL_FILE), &outcome.params)?;
    std::fs::write(
        out.join(LOSS_HISTORY_FILE),
        render_loss_history(&outcome.history),
    )?;
    Ok(())
}

pub fn cmd_encode(a: &EncodeArgs) -> CliResult<()> {
    let params = read_model(&a.model)?;
    let features = read_feature_matrix(&a.features)?;
    let z = forward(&params, features.features())?;
    write_codes(&a.out, &binarize(&z)?)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let queries = read_codes(&a.query_codes)?;
    let db = read_codes(&a.db_codes)?;
    let q_labels = read_labels(&a.query_labels)?;
    let db_labels = read_labels(&a.db_labels)?;
    if a.topn == 0 || a.topn > db.n() {
        return Err(CliError::Usage(format!(
            "--topn {} must be between 1 and the database size {}",
            a.topn,
            db.n()
        )));
    }
    let points: Vec<usize> = if a.p_at_n.is_empty() {
        let mut p: Vec<usize> = DEFAULT_P_AT_N
            .iter()
            .copied()
            .filter(|&n| n <= db.n())
            .collect();
        if p.last() != Some(&db.n()) && db.n() < DEFAULT_P_AT_N[DEFAULT_P_AT_N.len() - 1] {
            p.push(db.n());
        }
        p
    } else {
        if let Some(&bad) = a.p_at_n.iter().find(|&&n| n == 0 || n > db.n()) {
            return Err(CliError::Usage(format!(
                "--p-at-n value {bad} must be between 1 and the database size {}",
                db.n()
            )));
        }
        a.p_at_n.clone()
    };
    let averaging = match a.pr_averaging {
        Averaging::Micro => PrAveraging::Micro,
        Averaging::Macro => PrAveraging::Macro,
    };
    let report = evaluate(
        &queries, &q_labels, &db, &db_labels, a.topn, &points, averaging,
    )?;
    if report.queries_without_relevant > 0 {
        log::warn!(
            "{} queries have no relevant database item",
            report.queries_without_relevant
        );
    }
    std::fs::create_dir_all(&a.out)?;
    write_report_csv(&a.out, &report)?;
    log::info!("MAP@{} = {}", a.topn, format_sig9(report.map));
    Ok(())
}

pub fn cmd_synth(seed: u64, a: &SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        clusters: a.clusters,
        per_cluster: a.per_cluster,
        concepts: a.concepts,
        dim: a.dim,
        noise: a.noise,
        seed,
        holdout: a.holdout,
    };
    spec.write(&a.out)?;
    Ok(())
}
