//! `featureflow` command line. Usage errors (unknown flags, bad values) exit
//! with status 2; failures while running a command exit with status 1.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use super::http::{self, AppState};
use super::runs::{RunKind, RunRegistry};
use super::{
    deactivate, flow_artifact, run_config, steer, to_json_bytes, DeactivateRequest, FlowRequest,
    SteerRequest, DEFAULT_PORT,
};
use crate::flowgraph::{ExportFormat, GraphThresholds};
use crate::intervention::{to_jsonl, Strategy};
use crate::matching::{match_top_k, permutation_match, DEFAULT_BLOCK};
use crate::stats::{
    group_distribution, group_separation_report, intersection_matrix, load_corpus, score_samples,
    GroupMatcher, SampleProtocol, DEFAULT_P_THRESHOLD,
};
use crate::steering::{steering_sweep, BuiltinScorer, JudgeClient, JudgeConfig, ScoreMode, Scorer, SteeringPlan, SweepSpec, ThemeSpec};
use crate::tensors::{load_bundle, ModelBundle, SitePosition};
use crate::toymodel::{synth_planted_bundle, tokenize, train_sae, PlantedConfig, SamplerConfig, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "featureflow", version, about = "Cross-layer SAE feature matching, flow graphs, deactivation and steering")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct BundleArg {
    /// Bundle directory (manifest.json + tensor files).
    #[arg(long, env = "FEATUREFLOW_BUNDLE")]
    pub bundle: PathBuf,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunsArg {
    /// Also record the run (config snapshot and artifacts) in this registry.
    #[arg(long, env = "FEATUREFLOW_RUNS_DIR")]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MatchMethod {
    Topk,
    Permutation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MatcherArg {
    Cosine,
    Pearson,
}

impl From<MatcherArg> for GroupMatcher {
    fn from(m: MatcherArg) -> Self {
        match m {
            MatcherArg::Cosine => GroupMatcher::Cosine,
            MatcherArg::Pearson => GroupMatcher::Pearson,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Dot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Permutation,
    Top1,
    Top5,
    Random,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Permutation => Strategy::Permutation,
            StrategyArg::Top1 => Strategy::Top1,
            StrategyArg::Top5 => Strategy::Top5,
            StrategyArg::Random => Strategy::Random,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// Score with the builtin heuristic even when JUDGE_URL is set.
    #[arg(long)]
    pub builtin_scorer: bool,
    /// Corpus used to compute folding scales (needed by plans with `fold`).
    #[arg(long)]
    pub fold_corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match the features of one dictionary against another.
    Match {
        #[command(flatten)]
        bundle: BundleArg,
        /// Source position, e.g. `2:res`.
        #[arg(long, value_parser = parse_position)]
        from: SitePosition,
        /// Target position, e.g. `1:res`.
        #[arg(long, value_parser = parse_position)]
        to: SitePosition,
        #[arg(long, value_enum, default_value = "topk")]
        method: MatchMethod,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_BLOCK)]
        block: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Build the flow graph of one residual feature.
    Flow {
        #[command(flatten)]
        bundle: BundleArg,
        /// Seed feature as `layer:site:index`.
        #[arg(long)]
        seed_feature: String,
        #[arg(long, default_value_t = GraphThresholds::default().t_res)]
        t_res: f64,
        #[arg(long, default_value_t = GraphThresholds::default().t_module)]
        t_module: f64,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        runs: RunsArg,
    },
    /// Origin-group distribution per layer over a corpus.
    Groups {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "cosine")]
        matcher: MatcherArg,
        #[arg(long, default_value_t = SampleProtocol::default().texts)]
        texts: usize,
        #[arg(long, default_value_t = SampleProtocol::default().tokens_per_text)]
        tokens: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Deactivate every eligible residual target in a text.
    Deactivate {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        text: String,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        token: Option<usize>,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 0.0)]
        r: f32,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        runs: RunsArg,
    },
    /// Generate under a steering plan, next to the unsteered baseline.
    Steer {
        #[command(flatten)]
        bundle: BundleArg,
        /// Steering plan (JSON).
        #[arg(long)]
        plan: PathBuf,
        /// Override: rescale the plan's features by r.
        #[arg(long)]
        r: Option<f64>,
        /// Override: additive strength s.
        #[arg(long)]
        s: Option<f64>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = SamplerConfig::default().max_len)]
        max_len: usize,
        #[arg(long)]
        greedy: bool,
        /// `digits` or a theme JSON file; scoring is skipped when omitted.
        #[arg(long)]
        theme: Option<String>,
        #[arg(long)]
        deactivation: bool,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        runs: RunsArg,
    },
    /// Layer × coefficient × strategy steering sweep.
    Sweep {
        #[command(flatten)]
        bundle: BundleArg,
        /// Sweep spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Also write one JSON line per cell here.
        #[arg(long)]
        jsonl: Option<PathBuf>,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        runs: RunsArg,
    },
    /// Group distribution, separation tests and intersection matrix.
    Stats {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "cosine")]
        matcher: MatcherArg,
        #[arg(long, default_value_t = SampleProtocol::default().texts)]
        texts: usize,
        #[arg(long, default_value_t = SampleProtocol::default().tokens_per_text)]
        tokens: usize,
        #[arg(long, default_value_t = DEFAULT_P_THRESHOLD)]
        p_threshold: f64,
        /// Directory receiving groups.jsonl, separation.json, intersection.json.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        runs: RunsArg,
    },
    /// Write a planted toy bundle plus its ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = PlantedConfig::default().layers)]
        layers: usize,
        #[arg(long, default_value_t = PlantedConfig::default().d)]
        d: usize,
        #[arg(long, default_value_t = PlantedConfig::default().base_concepts)]
        concepts: usize,
        #[arg(long, default_value_t = PlantedConfig::default().distractors)]
        distractors: usize,
        #[arg(long, default_value_t = PlantedConfig::default().decoys_per_feature)]
        decoys: usize,
        #[arg(long, default_value_t = PlantedConfig::default().noise_sigma)]
        noise: f64,
        #[arg(long)]
        no_theme: bool,
    },
    /// Train a TopK SAE on hidden states at one position; writes a copy of the
    /// bundle with that dictionary replaced.
    TrainSae {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_position)]
        position: SitePosition,
        #[arg(long)]
        features: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = TrainConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, env = "FEATUREFLOW_RUNS_DIR", default_value = "runs")]
        runs_dir: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
}

/// `layer:site` or `layer/site`.
pub fn parse_position(s: &str) -> Result<SitePosition, String> {
    let (layer, site) = s
        .split_once([':', '/'])
        .ok_or_else(|| format!("`{s}` should look like 2:res"))?;
    let layer = layer.parse().map_err(|_| format!("bad layer in `{s}`"))?;
    let site = site.parse().map_err(|e: crate::Error| e.to_string())?;
    Ok(SitePosition::new(layer, site))
}

/// Parse `args` (program name first) and run. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load(b: &BundleArg) -> anyhow::Result<ModelBundle> {
    load_bundle(&b.bundle).with_context(|| format!("loading bundle {}", b.bundle.display()))
}

fn emit(out: &OutArg, bytes: &[u8]) -> anyhow::Result<()> {
    match &out.out {
        Some(path) => write_file(path, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn record_run(
    runs: &RunsArg,
    kind: RunKind,
    config: serde_json::Value,
    artifacts: &[(&str, &[u8])],
) -> anyhow::Result<()> {
    if let Some(dir) = &runs.runs_dir {
        let reg = RunRegistry::open(dir)?;
        let rec = reg.create(kind, None, &config)?;
        reg.complete(&rec.id, artifacts)?;
        eprintln!("run {}", rec.id);
    }
    Ok(())
}

/// The judge when JUDGE_URL is set (and not overridden), the builtin scorer
/// otherwise. Leaked: it lives as long as the process.
pub fn make_scorer(force_builtin: bool) -> anyhow::Result<&'static dyn Scorer> {
    match JudgeConfig::from_env().filter(|_| !force_builtin) {
        Some(cfg) => {
            tracing::info!(url = %cfg.url, model = %cfg.model, "scoring with the judge");
            Ok(Box::leak(Box::new(JudgeClient::new(cfg)?)))
        }
        None => Ok(&BuiltinScorer),
    }
}

fn fold_corpus(bundle: &ModelBundle, path: Option<&Path>) -> anyhow::Result<Option<Vec<Vec<u32>>>> {
    let Some(path) = path else { return Ok(None) };
    let max = bundle.model()?.config().max_positions;
    Ok(Some(
        load_corpus(path)?
            .iter()
            .map(|t| {
                let mut toks = tokenize(t);
                toks.truncate(max);
                toks
            })
            .collect(),
    ))
}

fn load_theme(spec: &str) -> anyhow::Result<ThemeSpec> {
    if spec == "digits" {
        Ok(ThemeSpec::digits())
    } else {
        read_json(Path::new(spec))
    }
}

fn protocol(texts: usize, tokens: usize, seed: u64) -> SampleProtocol {
    SampleProtocol {
        texts,
        tokens_per_text: tokens,
        exclude_bos: true,
        seed,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Match { bundle, from, to, method, k, block, out } => {
            let b = load(&bundle)?;
            let (src, tgt) = (b.dictionary(from)?, b.dictionary(to)?);
            let bytes = match method {
                MatchMethod::Topk => {
                    let mut v = match_top_k(src, tgt, k, block)?.to_json()?.into_bytes();
                    v.push(b'\n');
                    v
                }
                MatchMethod::Permutation => to_json_bytes(&permutation_match(src, tgt)?)?,
            };
            emit(&out, &bytes)
        }
        Command::Flow { bundle, seed_feature, t_res, t_module, format, out, runs } => {
            let b = load(&bundle)?;
            let req = FlowRequest {
                seed_feature,
                t_res,
                t_module,
                format: match format {
                    FormatArg::Json => ExportFormat::Json,
                    FormatArg::Dot => ExportFormat::Dot,
                },
                run_id: None,
            };
            let bytes = flow_artifact(&b, &req)?;
            emit(&out, &bytes)?;
            let name = if matches!(format, FormatArg::Json) { "graph.json" } else { "graph.dot" };
            record_run(&runs, RunKind::Flow, run_config(&req)?, &[(name, &bytes)])
        }
        Command::Groups { bundle, corpus, matcher, texts, tokens, out } => {
            let b = load(&bundle)?;
            let docs = load_corpus(&corpus)?;
            let dist = group_distribution(&docs, &b, &protocol(texts, tokens, seed), matcher.into())?;
            eprintln!("from nowhere: {:.2}%", dist.from_nowhere_percent);
            emit(&out, dist.to_jsonl()?.as_bytes())
        }
        Command::Deactivate { bundle, text, layer, token, strategy, r, out, runs } => {
            let b = load(&bundle)?;
            let req = DeactivateRequest {
                text,
                layer,
                token,
                strategy: strategy.into(),
                r,
                seed,
                run_id: None,
            };
            let bytes = to_json_bytes(&deactivate(&b, &req)?)?;
            emit(&out, &bytes)?;
            record_run(&runs, RunKind::Deactivate, run_config(&req)?, &[("report.json", &bytes)])
        }
        Command::Steer { bundle, plan, r, s, prompt, max_len, greedy, theme, deactivation, scorer, out, runs } => {
            let b = load(&bundle)?;
            let mut plan: SteeringPlan = read_json(&plan)?;
            if let Some(r) = r {
                plan.r = Some(r);
            }
            if let Some(s) = s {
                plan.s = s;
            }
            let req = SteerRequest {
                plan,
                prompt,
                sampler: SamplerConfig { max_len, greedy, seed, ..SamplerConfig::default() },
                theme: theme.as_deref().map(load_theme).transpose()?,
                mode: if deactivation { ScoreMode::Deactivation } else { ScoreMode::Activation },
                run_id: None,
            };
            let corpus = fold_corpus(&b, scorer.fold_corpus.as_deref())?;
            let resp = steer(&b, &req, make_scorer(scorer.builtin_scorer)?, corpus.as_deref())?;
            let bytes = to_json_bytes(&resp)?;
            emit(&out, &bytes)?;
            record_run(&runs, RunKind::Steer, run_config(&req)?, &[("steer.json", &bytes)])?;
            if resp.degraded {
                eprintln!("warning: scoring degraded: {}", resp.error.as_deref().unwrap_or(""));
            }
            Ok(())
        }
        Command::Sweep { bundle, spec, jsonl, scorer, out, runs } => {
            let b = load(&bundle)?;
            let mut spec: SweepSpec = read_json(&spec)?;
            spec.sampler.seed = seed;
            let corpus = fold_corpus(&b, scorer.fold_corpus.as_deref())?;
            let report = steering_sweep(&b, &spec, make_scorer(scorer.builtin_scorer)?, corpus.as_deref())?;
            let bytes = to_json_bytes(&report)?;
            let lines = report.to_jsonl()?;
            emit(&out, &bytes)?;
            if let Some(path) = jsonl {
                write_file(&path, lines.as_bytes())?;
            }
            record_run(
                &runs,
                RunKind::Sweep,
                serde_json::to_value(&spec)?,
                &[("sweep.json", &bytes), ("sweep.jsonl", lines.as_bytes())],
            )
        }
        Command::Stats { bundle, corpus, matcher, texts, tokens, p_threshold, out_dir, runs } => {
            let b = load(&bundle)?;
            let docs = load_corpus(&corpus)?;
            let proto = protocol(texts, tokens, seed);
            let dist = group_distribution(&docs, &b, &proto, matcher.into())?;
            let corpus_name = corpus.display().to_string();
            let samples = score_samples(&b, &dist.assignments, &corpus_name)?;
            let separation = group_separation_report(&samples, p_threshold)?;
            let pairs: Vec<_> = dist.assignments.iter().map(|a| (a.feature, a.group)).collect();
            let intersection = intersection_matrix(&pairs);
            let groups = dist.to_jsonl()?;
            let sep = to_json_bytes(&separation)?;
            let inter = to_json_bytes(&intersection)?;
            let assignments = to_jsonl(&dist.assignments)?;
            fs::create_dir_all(&out_dir)?;
            let files: [(&str, &[u8]); 4] = [
                ("groups.jsonl", groups.as_bytes()),
                ("assignments.jsonl", assignments.as_bytes()),
                ("separation.json", &sep),
                ("intersection.json", &inter),
            ];
            for (name, bytes) in files {
                write_file(&out_dir.join(name), bytes)?;
            }
            eprintln!("from nowhere: {:.2}%", dist.from_nowhere_percent);
            let config = serde_json::json!({
                "corpus": corpus_name,
                "matcher": GroupMatcher::from(matcher),
                "protocol": proto,
                "p_threshold": p_threshold,
            });
            record_run(&runs, RunKind::Stats, config, &files)
        }
        Command::Synth { out, layers, d, concepts, distractors, decoys, noise, no_theme } => {
            let cfg = PlantedConfig {
                layers,
                d,
                base_concepts: concepts,
                distractors,
                decoys_per_feature: decoys,
                noise_sigma: noise,
                theme: !no_theme,
                seed,
                ..PlantedConfig::default()
            };
            let (bundle, truth) = synth_planted_bundle(&cfg)?;
            bundle.save(&out)?;
            write_file(&out.join("truth.json"), &to_json_bytes(&truth)?)?;
            eprintln!("wrote {} ({} dictionaries)", out.display(), bundle.dictionaries.len());
            Ok(())
        }
        Command::TrainSae { bundle, corpus, position, features, k, steps, lr, batch, out } => {
            let mut b = load(&bundle)?;
            let model = b.model()?;
            let max = model.config().max_positions;
            let mut rows: Vec<f32> = Vec::new();
            let mut n = 0;
            for doc in load_corpus(&corpus)? {
                let mut toks = tokenize(&doc);
                toks.truncate(max);
                let rec = model.forward(&toks, &[])?;
                let h = rec.hidden(position);
                // position 0 is BOS
                for row in h.rows().into_iter().skip(1) {
                    rows.extend(row.iter());
                    n += 1;
                }
            }
            if n == 0 {
                bail!("corpus produced no training tokens");
            }
            let acts = ndarray::Array2::from_shape_vec((n, b.model_dim), rows)?;
            let cfg = TrainConfig {
                n_features: features,
                k,
                learning_rate: lr,
                batch_size: batch,
                steps,
                seed,
                init_from_data: true,
                ..TrainConfig::default()
            };
            let trained = train_sae(acts.view(), &cfg, position)?;
            let final_loss = trained.loss_history.last().copied();
            b.dictionaries.insert(position, trained.dictionary);
            b.provenance = format!("{}; {position} retrained (TopK k={k}, D={features}, {steps} steps)", b.provenance);
            b.save(&out)?;
            let log = serde_json::json!({ "samples": n, "final_loss": final_loss, "loss_history": trained.loss_history });
            write_file(&out.join("train_log.json"), &to_json_bytes(&log)?)?;
            eprintln!("trained on {n} tokens, final loss {final_loss:?}");
            Ok(())
        }
        Command::Serve { bundle, port, host, runs_dir, scorer } => {
            let b = load(&bundle)?;
            let corpus = fold_corpus(&b, scorer.fold_corpus.as_deref())?;
            // built before the runtime: a blocking HTTP client may not be
            // created on an async worker
            let scorer_ref = make_scorer(scorer.builtin_scorer)?;
            let state = AppState {
                bundle: Arc::new(b),
                runs: Arc::new(RunRegistry::open(&runs_dir)?),
                scorer: scorer_ref,
                fold_corpus: corpus.map(Arc::new),
            };
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(http::serve(state, SocketAddr::new(host, port)))?;
            Ok(())
        }
    }
}
