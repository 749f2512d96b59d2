//! Command-line runner: attribute, evaluate and the planted synthetic bench.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use camab_core::corpus::load_jsonl_with;
use camab_core::eval::{
    attribute_budgeted, derive_seed, measure_results, min_budget, orphans, planted_instances,
    recovery_rows, run_grid, CompareSpec, ComparisonReport, MethodSettings, PlantedSpec,
    Regeneration, TokenF1,
};
use camab_core::io::write_atomic;
use camab_core::oracle::{
    session, LikelihoodOracle, RemoteConfig, RemoteGenerator, RemoteOracle, ReplayOracle,
    SyntheticOracle,
};
use camab_core::{AttributionResult, Error, Granularity, Instance, Method, RewardContext};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some instances or cells were skipped.
    Partial,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Partial => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "camab",
    version,
    about = "Segment-level context attribution with a query budget"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every context segment of every instance with each method.
    Attribute(AttributeArgs),
    /// Compute top-k ablation metrics for existing attributions.
    Evaluate(EvaluateArgs),
    /// Run all methods on planted synthetic instances across budgets.
    BenchSynthetic(BenchArgs),
}

/// Where token likelihoods come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleSpec {
    Synthetic,
    Replay(PathBuf),
    Remote,
}

impl FromStr for OracleSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "remote" => Ok(Self::Remote),
            _ => match s.strip_prefix("replay:") {
                Some(p) if !p.is_empty() => Ok(Self::Replay(PathBuf::from(p))),
                _ => Err(format!(
                    "expected synthetic, remote or replay:PATH, got `{s}`"
                )),
            },
        }
    }
}

impl fmt::Display for OracleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::Remote => f.write_str("remote"),
            Self::Replay(p) => write!(f, "replay:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Sentence,
    Paragraph,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Sentence => Granularity::Sentence,
            GranularityArg::Paragraph => Granularity::Paragraph,
        }
    }
}

/// Options shared by commands that read a corpus and query an oracle.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// JSONL corpus, one instance per line.
    #[arg(long)]
    pub input: PathBuf,
    /// synthetic | replay:PATH | remote
    #[arg(long, default_value = "synthetic")]
    pub oracle: OracleSpec,
    /// Model name sent to the remote endpoint.
    #[arg(long)]
    pub model: Option<String>,
    /// Record every live oracle answer into this replay store.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Query budget per (instance, method), excluding the two anchors.
    #[arg(long, default_value_t = 60)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// How raw `context` fields are split into segments.
    #[arg(long, value_enum, default_value_t = GranularityArg::Sentence)]
    pub granularity: GranularityArg,
}

#[derive(Debug, Clone, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// Comma-separated: cts, shap, contextcite, loo.
    #[arg(long = "method", value_delimiter = ',', default_value = "cts")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 0.2)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_variance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// JSONL file written by `attribute --format json`.
    #[arg(long)]
    pub attributions: PathBuf,
    #[arg(long = "k", value_delimiter = ',', default_value = "1,3,5")]
    pub ks: Vec<usize>,
    /// Tag for the dataset column; defaults to the input file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Also regenerate responses under ablation (remote oracle only).
    #[arg(long)]
    pub consistency: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 12)]
    pub n_segments: usize,
    #[arg(long, default_value_t = 3)]
    pub n_planted: usize,
    #[arg(long, default_value_t = 2.0)]
    pub planted_weight: f64,
    #[arg(long, default_value_t = 3)]
    pub n_tokens: usize,
    /// Number of planted instances.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Seeded repetitions per instance.
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, value_delimiter = ',', default_value = "20,40,60")]
    pub budgets: Vec<usize>,
    #[arg(
        long = "method",
        value_delimiter = ',',
        default_value = "cts,shap,contextcite,loo"
    )]
    pub methods: Vec<Method>,
    /// Defaults to the number of planted segments.
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_variance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Attribute(a) => cmd_attribute(&a),
        Command::Evaluate(e) => cmd_evaluate(&e),
        Command::BenchSynthetic(b) => cmd_bench_synthetic(&b),
    }
}

type DynOracle = Box<dyn LikelihoodOracle>;

/// The base oracle for a run, optionally recording into a replay store.
enum Backend {
    Plain(DynOracle),
    Recording(ReplayOracle<DynOracle>, PathBuf),
}

impl Backend {
    fn open(run: &RunConfig) -> Result<Self> {
        let live: DynOracle = match &run.oracle {
            OracleSpec::Synthetic => Box::new(SyntheticOracle),
            OracleSpec::Remote => Box::new(RemoteOracle::new(remote_config(run)?)),
            OracleSpec::Replay(path) => {
                if run.record.is_some() {
                    bail!("--record cannot be combined with a replay oracle");
                }
                let store = ReplayOracle::<DynOracle>::load(path, None)
                    .with_context(|| format!("cannot load replay store {}", path.display()))?;
                return Ok(Self::Plain(Box::new(store)));
            }
        };
        Ok(match &run.record {
            None => Self::Plain(live),
            Some(path) if path.exists() => Self::Recording(
                ReplayOracle::load(path, Some(live))
                    .with_context(|| format!("cannot load replay store {}", path.display()))?,
                path.clone(),
            ),
            Some(path) => Self::Recording(ReplayOracle::new(live), path.clone()),
        })
    }

    fn oracle(&self) -> &dyn LikelihoodOracle {
        match self {
            Self::Plain(o) => o.as_ref(),
            Self::Recording(r, _) => r,
        }
    }

    fn finish(&self) -> Result<()> {
        if let Self::Recording(store, path) = self {
            store
                .save(path)
                .with_context(|| format!("cannot write replay store {}", path.display()))?;
            eprintln!("recorded {} entries to {}", store.len(), path.display());
        }
        Ok(())
    }
}

fn remote_config(run: &RunConfig) -> Result<RemoteConfig> {
    let model = run
        .model
        .clone()
        .ok_or_else(|| anyhow!("--model is required with --oracle remote"))?;
    Ok(RemoteConfig::from_env(model)?)
}

fn load_instances(run: &RunConfig) -> Result<Vec<Instance>> {
    let mut instances = load_jsonl_with(&run.input, run.granularity.into())
        .with_context(|| format!("cannot read corpus {}", run.input.display()))?;
    instances.sort_by(|a, b| a.id().cmp(b.id()));
    Ok(instances)
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, contents.as_bytes())
        .with_context(|| format!("cannot write {}", path.display()))
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".skipped.jsonl");
    output.with_file_name(name)
}

#[derive(Debug)]
struct Skip {
    instance_id: String,
    method: Option<Method>,
    reason: String,
}

impl Skip {
    fn to_json_line(&self) -> String {
        serde_json::json!({
            "instance_id": self.instance_id,
            "method": self.method,
            "reason": self.reason,
        })
        .to_string()
    }
}

/// Attribution outcome for one instance: results in method order, plus skips.
type InstanceRun = (Vec<AttributionResult>, Vec<Skip>);

fn attribute_instance(
    instance: &Instance,
    args: &AttributeArgs,
    base: &dyn LikelihoodOracle,
    settings: &MethodSettings,
) -> Result<InstanceRun> {
    let id = instance.id().to_string();
    match RewardContext::prepare(instance, &session(base, None)) {
        Ok(_) => {}
        Err(e @ Error::UninformativeContext { .. }) => {
            let skip = Skip {
                instance_id: id,
                method: None,
                reason: e.to_string(),
            };
            return Ok((Vec::new(), vec![skip]));
        }
        Err(e) => return Err(anyhow::Error::new(e).context(format!("instance `{id}`"))),
    }
    let mut results = Vec::new();
    let mut skips = Vec::new();
    for &method in &args.methods {
        let min = min_budget(method, instance.n_segments());
        if args.run.budget < min {
            skips.push(Skip {
                instance_id: id.clone(),
                method: Some(method),
                reason: format!("infeasible: {method} needs a budget of at least {min}"),
            });
            continue;
        }
        let seed = derive_seed(args.run.seed, &id, method, 0);
        match attribute_budgeted(method, instance, base, args.run.budget, seed, settings) {
            Ok((result, _)) => results.push(result),
            Err(e @ Error::DegenerateSample(_)) => skips.push(Skip {
                instance_id: id.clone(),
                method: Some(method),
                reason: e.to_string(),
            }),
            Err(e) => return Err(anyhow::Error::new(e).context(format!("{method} on `{id}`"))),
        }
    }
    Ok((results, skips))
}

fn results_csv(results: &[AttributionResult]) -> String {
    let mut out = String::from("instance_id,method,seed,oracle_calls,segment,score,rank\n");
    for r in results {
        let mut rank_of = vec![0; r.ranking.len()];
        for (pos, &j) in r.ranking.iter().enumerate() {
            rank_of[j] = pos + 1;
        }
        for (j, score) in r.scores.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.instance_id, r.method, r.seed, r.oracle_calls, j, score, rank_of[j]
            ));
        }
    }
    out
}

pub fn cmd_attribute(args: &AttributeArgs) -> Result<Status> {
    if args.methods.is_empty() {
        bail!("no methods given");
    }
    let instances = load_instances(&args.run)?;
    let backend = Backend::open(&args.run)?;
    let settings = MethodSettings {
        top_p: args.top_p,
        noise_variance: args.noise_variance,
        ..MethodSettings::default()
    };
    let methods: Vec<String> = args.methods.iter().map(Method::to_string).collect();
    eprintln!(
        "attributing {} instances with {} (budget {}, oracle {})",
        instances.len(),
        methods.join(","),
        args.run.budget,
        args.run.oracle
    );
    let runs = instances
        .par_iter()
        .map(|inst| attribute_instance(inst, args, backend.oracle(), &settings))
        .collect::<Result<Vec<InstanceRun>>>();
    // keep what was recorded even if a later instance failed
    backend.finish()?;
    let runs = runs?;

    let (results, skips): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let results: Vec<AttributionResult> = results.into_iter().flatten().collect();
    let skips: Vec<Skip> = skips.into_iter().flatten().collect();

    let body = match args.run.format {
        Format::Json => results
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<serde_json::Result<String>>()?,
        Format::Csv => results_csv(&results),
    };
    write_output(&args.run.output, &body)?;
    let sidecar = sidecar_path(&args.run.output);
    if skips.is_empty() {
        if sidecar.exists() {
            fs::remove_file(&sidecar)
                .with_context(|| format!("cannot remove {}", sidecar.display()))?;
        }
        eprintln!(
            "wrote {} results to {}",
            results.len(),
            args.run.output.display()
        );
        return Ok(Status::Success);
    }
    for s in &skips {
        let what = s.method.map(|m| format!(" ({m})")).unwrap_or_default();
        eprintln!("skipped `{}`{}: {}", s.instance_id, what, s.reason);
    }
    let lines: String = skips.iter().map(|s| s.to_json_line() + "\n").collect();
    write_output(&sidecar, &lines)?;
    eprintln!(
        "wrote {} results to {}; {} skipped, listed in {}",
        results.len(),
        args.run.output.display(),
        skips.len(),
        sidecar.display()
    );
    Ok(Status::Partial)
}

fn load_attributions(path: &Path) -> Result<Vec<AttributionResult>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read attributions {}", path.display()))?;
    let mut results = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: AttributionResult = serde_json::from_str(line).with_context(|| {
            format!(
                "{}: line {}: not an attribution result",
                path.display(),
                i + 1
            )
        })?;
        r.validate()?;
        results.push(r);
    }
    Ok(results)
}

fn render_report(report: &ComparisonReport, format: Format) -> String {
    match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Status> {
    let instances = load_instances(&args.run)?;
    let results = load_attributions(&args.attributions)?;
    let (missing, _) = orphans(&instances, &results);
    if !missing.is_empty() {
        bail!(
            "attributions reference unknown instances: {}",
            missing.join(", ")
        );
    }
    let dataset = args.dataset.clone().unwrap_or_else(|| {
        args.run
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let backend = Backend::open(&args.run)?;
    let generator = if args.consistency {
        if args.run.oracle != OracleSpec::Remote {
            return Err(Error::Capability(
                "--consistency needs --oracle remote to regenerate responses; top-k drop is available offline".into(),
            )
            .into());
        }
        Some(RemoteGenerator::new(remote_config(&args.run)?))
    } else {
        None
    };
    let regen = generator.as_ref().map(|g| Regeneration {
        generator: g,
        scorer: &TokenF1,
    });
    let outcomes = if instances.is_empty() {
        Vec::new()
    } else {
        measure_results(
            &instances,
            &results,
            args.run.budget,
            &args.ks,
            backend.oracle(),
            regen,
        )?
    };
    backend.finish()?;
    let report = ComparisonReport::from_outcomes(&dataset, &outcomes, &args.ks);
    write_output(&args.run.output, &render_report(&report, args.run.format))?;

    let skipped: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.skipped.is_some())
        .map(|o| o.instance_id.as_str())
        .collect();
    for id in &skipped {
        eprintln!("skipped `{id}`: uninformative context");
    }
    eprintln!(
        "wrote {} report rows to {}",
        report.rows.len(),
        args.run.output.display()
    );
    if skipped.is_empty() && !report.rows.is_empty() {
        Ok(Status::Success)
    } else {
        Ok(Status::Partial)
    }
}

pub fn cmd_bench_synthetic(args: &BenchArgs) -> Result<Status> {
    let spec = PlantedSpec {
        n_segments: args.n_segments,
        n_planted: args.n_planted,
        planted_weight: args.planted_weight,
        n_tokens: args.n_tokens,
        ..PlantedSpec::default()
    };
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let planted = planted_instances(&spec, args.runs, args.seed)?;
    let instances: Vec<Instance> = planted.iter().map(|p| p.instance.clone()).collect();
    let ks = if args.ks.is_empty() {
        vec![args.n_planted.max(1)]
    } else {
        args.ks.clone()
    };
    let compare = CompareSpec {
        dataset: "synthetic".into(),
        methods: args.methods.clone(),
        budgets: args.budgets.clone(),
        ks: ks.clone(),
        seed: args.seed,
        replicates: args.replicates,
        settings: MethodSettings {
            top_p: args.top_p,
            noise_variance: args.noise_variance,
            ..MethodSettings::default()
        },
    };
    eprintln!(
        "bench: {} planted instances (N = {}, {} planted at {}), budgets {:?}",
        args.runs, args.n_segments, args.n_planted, args.planted_weight, args.budgets
    );
    let outcomes = run_grid(&instances, &compare, &SyntheticOracle, None)?;
    let mut report = ComparisonReport::from_outcomes(&compare.dataset, &outcomes, &ks);
    report.rows.extend(recovery_rows(
        &compare.dataset,
        &outcomes,
        &planted,
        &compare.methods,
        &compare.budgets,
    ));
    write_output(&args.output, &render_report(&report, args.format))?;
    for r in report.rows.iter().filter(|r| r.metric == "recovery") {
        let rate = r.mean.map_or("n/a".into(), |m| format!("{m:.3}"));
        eprintln!(
            "  {:<12} s={:<3} recovery {}",
            r.method.to_string(),
            r.budget,
            rate
        );
    }
    let partial = report.rows.iter().any(|r| r.skips > 0);
    Ok(if partial {
        Status::Partial
    } else {
        Status::Success
    })
}
