use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use tabgen::backends::{Backend, RemoteBackend};
use tabgen::config::{parse_ratios, BackendKind, ConfigError, RunConfig};
use tabgen::evalharness::{check_fewshot_filter, emit_report, fewshot_sweep, ModelKind, Report, SweepDataset};
use tabgen::ingest::{detect_target_kind, Manifest, TargetKind};
use tabgen::metadata::{ChatClient, HttpChatClient, MetadataCache, ReformatPolicy};
use tabgen::pipeline::{build_corpus, corpus_file_name, load_registry, resolve_registry, PipelineSettings};
use tabgen::promptgen::{AugmentationMode, Variant};
use tabgen::Error;

/// Tabular prediction as text generation: dataset ingest, metadata
/// reformatting, corpus building and evaluation.
///
/// The chat-service credential is read from TABGEN_CHAT_API_KEY.
#[derive(Parser, Debug)]
#[command(name = "tabgen", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags below override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dataset manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Sets the cutoff, split and training seeds at once.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    cutoff_seed: Option<u64>,
    #[arg(long, global = true)]
    split_seed: Option<u64>,
    #[arg(long, global = true)]
    training_seed: Option<u64>,
    /// Worker threads (0 = one per logical core).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Row cutoff per dataset.
    #[arg(long, global = true)]
    max_rows: Option<usize>,
    /// Never call the chat service; use cached or fallback metadata.
    #[arg(long, global = true)]
    offline: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load every dataset in the manifest and print a summary.
    Ingest,
    /// Reformat dataset metadata (cached).
    Reformat,
    /// Build the instruction-tuning corpus.
    BuildCorpus {
        /// heavy or light.
        #[arg(long)]
        variant: Option<Variant>,
        /// augmented or onehot.
        #[arg(long)]
        mode: Option<AugmentationMode>,
        #[arg(long)]
        train_ratio: Option<f64>,
        /// Corpus file (default: <output_dir>/corpus-<variant>-<mode>.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the backend and baselines on a train/test split.
    Evaluate(EvalArgs),
    /// Sweep train ratios on the few-shot registry.
    Fewshot(EvalArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// oracle, proxy or remote.
    #[arg(long)]
    backend: Option<String>,
    /// Base URL of the remote model server.
    #[arg(long)]
    url: Option<String>,
    /// Comma-separated train ratios, e.g. 0.1,0.5,0.9.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Comma-separated baselines: tree-ensemble, mlp (empty for none).
    #[arg(long)]
    baselines: Option<String>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &c.manifest {
        cfg.manifest = v.clone();
    }
    if let Some(v) = &c.cache_dir {
        cfg.cache_dir = v.clone();
    }
    if let Some(v) = &c.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(s) = c.seed {
        cfg.seeds.cutoff = s;
        cfg.seeds.split = s;
        cfg.seeds.training = s;
    }
    cfg.seeds.cutoff = c.cutoff_seed.unwrap_or(cfg.seeds.cutoff);
    cfg.seeds.split = c.split_seed.unwrap_or(cfg.seeds.split);
    cfg.seeds.training = c.training_seed.unwrap_or(cfg.seeds.training);
    cfg.parallelism = c.parallelism.unwrap_or(cfg.parallelism);
    cfg.max_rows = c.max_rows.unwrap_or(cfg.max_rows);
    if c.offline {
        cfg.chat.enabled = false;
    }
    Ok(cfg)
}

fn apply_eval_args(cfg: &mut RunConfig, a: &EvalArgs) -> Result<bool, Failure> {
    if let Some(b) = &a.backend {
        cfg.backend.kind = match b.as_str() {
            "oracle" => BackendKind::Oracle,
            "proxy" => BackendKind::Proxy,
            "remote" => BackendKind::Remote,
            other => return Err(Failure::Config(format!("unknown backend `{other}`"))),
        };
    }
    if let Some(u) = &a.url {
        cfg.backend.url = Some(u.clone());
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(r) = a.train_ratio {
        cfg.train_ratio = r;
    }
    if let Some(list) = &a.baselines {
        cfg.baselines = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<ModelKind>().map_err(Failure::Config))
            .collect::<Result<_, _>>()?;
    }
    let explicit = match &a.ratios {
        Some(r) => {
            cfg.ratios = parse_ratios(r)?;
            true
        }
        None => false,
    };
    Ok(explicit)
}

fn settings(cfg: &RunConfig) -> PipelineSettings {
    PipelineSettings {
        max_rows: cfg.max_rows,
        seeds: cfg.seeds,
        variant: cfg.variant,
        mode: cfg.mode,
        max_new_tokens: cfg.backend.max_new_tokens,
        ..PipelineSettings::default()
    }
}

fn init_threads(cfg: &RunConfig) {
    if cfg.parallelism > 0 {
        // Fails only if the global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build_global();
    }
}

fn resolved_registry(cfg: &RunConfig) -> Result<(Manifest, Vec<SweepDataset>), Failure> {
    let manifest = Manifest::load(&cfg.manifest).map_err(|e| Failure::Config(e.to_string()))?;
    let datasets = load_registry(&manifest, cfg.max_rows, cfg.seeds.cutoff)?;
    let client: Option<HttpChatClient> = if cfg.chat.enabled {
        Some(HttpChatClient::new(cfg.chat.client_config()).map_err(runtime)?)
    } else {
        None
    };
    let cache = MetadataCache::new(&cfg.cache_dir);
    let policy = ReformatPolicy {
        max_retries: cfg.chat.max_retries,
        allow_fallback: cfg.chat.fallback,
    };
    let registry = resolve_registry(
        datasets,
        client.as_ref().map(|c| c as &dyn ChatClient),
        &cache,
        policy,
    )?;
    Ok((manifest, registry))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Ingest => {
            cfg.validate()?;
            init_threads(&cfg);
            cmd_ingest(&cfg)
        }
        Command::Reformat => {
            cfg.validate()?;
            init_threads(&cfg);
            let (_, registry) = resolved_registry(&cfg)?;
            for sd in &registry {
                println!(
                    "{}\ttarget={}\t{}",
                    sd.dataset.id,
                    sd.dataset.target_column.as_deref().unwrap_or("-"),
                    sd.metadata.description.lines().next().unwrap_or("")
                );
            }
            Ok(())
        }
        Command::BuildCorpus {
            variant,
            mode,
            train_ratio,
            out,
        } => {
            cfg.variant = variant.unwrap_or(cfg.variant);
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.train_ratio = train_ratio.unwrap_or(cfg.train_ratio);
            cfg.validate()?;
            init_threads(&cfg);
            let (_, registry) = resolved_registry(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join(corpus_file_name(cfg.variant, cfg.mode)));
            let manifest = build_corpus(&registry, cfg.train_ratio, &settings(&cfg), &out)?;
            println!(
                "{}: {} records from {} datasets, sha256 {}",
                out.display(),
                manifest.record_count,
                manifest.per_dataset.len(),
                manifest.content_hash
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let explicit = apply_eval_args(&mut cfg, &args)?;
            cfg.validate()?;
            init_threads(&cfg);
            let remote = connect_remote(&cfg)?;
            let (_, registry) = resolved_registry(&cfg)?;
            let ratios = if explicit { cfg.ratios.clone() } else { vec![cfg.train_ratio] };
            let report = fewshot_sweep(&registry, &ratios, &cfg.models(), remote, &settings(&cfg), cfg.parallelism)
                .map_err(runtime)?;
            write_report(&report, &cfg.output_dir.join("evaluate"))
        }
        Command::Fewshot(args) => {
            apply_eval_args(&mut cfg, &args)?;
            cfg.validate()?;
            init_threads(&cfg);
            let remote = connect_remote(&cfg)?;
            let (manifest, registry) = resolved_registry(&cfg)?;
            let limit = manifest.fewshot_max_rows;
            let (eligible, skipped): (Vec<_>, Vec<_>) = registry
                .into_iter()
                .partition(|d| limit.is_none_or(|l| d.dataset.num_rows() <= l));
            for d in &skipped {
                log::warn!("skipping `{}`: {} rows exceed the few-shot limit", d.dataset.id, d.dataset.num_rows());
            }
            check_fewshot_filter(&eligible, limit).map_err(runtime)?;
            let report = fewshot_sweep(&eligible, &cfg.ratios, &cfg.models(), remote, &settings(&cfg), cfg.parallelism)
                .map_err(runtime)?;
            write_report(&report, &cfg.output_dir.join("fewshot"))
        }
    }
}

fn connect_remote(cfg: &RunConfig) -> Result<Option<Arc<dyn Backend>>, Failure> {
    if cfg.backend.kind != BackendKind::Remote {
        return Ok(None);
    }
    let rc = cfg
        .remote_config()
        .ok_or_else(|| Failure::Config("the remote backend needs a URL".into()))?;
    let backend = RemoteBackend::connect(rc).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(Some(Arc::new(backend)))
}

fn write_report(report: &Report, dir: &std::path::Path) -> Result<(), Failure> {
    let (json, csv) = emit_report(report, dir).map_err(runtime)?;
    for row in &report.rows {
        println!(
            "ratio {:<4} {:<14} mean acc {:.3}  median {:.3}  mean rank {:.2}",
            row.ratio, row.model_id, row.accuracy.mean, row.accuracy.median, row.rank.mean
        );
    }
    println!("wrote {} and {}", json.display(), csv.display());
    if !report.errors.is_empty() {
        eprintln!("{} evaluation cells failed; see the report's errors", report.errors.len());
    }
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig) -> Result<(), Failure> {
    let manifest = Manifest::load(&cfg.manifest).map_err(|e| Failure::Config(e.to_string()))?;
    let mut failures = 0;
    println!("dataset\trows\tcols\ttarget\tkind");
    for (entry, result) in manifest.datasets.iter().zip(manifest.load_all()) {
        match result {
            Ok(d) => {
                let d = tabgen::ingest::apply_cutoff(d, cfg.max_rows, cfg.seeds.cutoff);
                let kind = match d.target_column {
                    None => "-".to_owned(),
                    Some(_) => match detect_target_kind(&d) {
                        Ok(TargetKind::Discrete { labels }) => format!("discrete({})", labels.len()),
                        Ok(TargetKind::Continuous { .. }) => "continuous".to_owned(),
                        Err(e) => format!("invalid: {e}"),
                    },
                };
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    d.id,
                    d.num_rows(),
                    d.num_columns(),
                    d.target_column.as_deref().unwrap_or("-"),
                    kind
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", entry.id);
            }
        }
    }
    if failures > 0 {
        return Err(Failure::Runtime(format!("{failures} datasets failed to load")));
    }
    Ok(())
}
