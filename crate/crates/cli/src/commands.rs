use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use parrot_core::config::{AppConfig, ConfigError};
use parrot_core::gateway::mock::{MockScript, MockServer};
use parrot_core::gateway::{extension_for, EndpointConfig, Gateway, ImageRef};
use parrot_core::gcr::{GcrEngine, GcrTrace};
use parrot_core::nft::{pretrained_policy, train, Checkpoint, TwoGaussianTask};
use parrot_core::pipeline::{
    build_sft, parse_inputs, parse_jsonl, plan_filter, plan_project, plan_rationalize, to_jsonl, write_files,
    write_sft, CallPlan, Pipeline, PipelineError, Projection, RationalizedSample, SftPaths,
};
use parrot_core::prompts::PromptForge;
use parrot_core::rationale::{parse_consistency_answer, Winner};
use parrot_core::reward::{pairwise_accuracy, score_records, select_training_prompts, BenchmarkItem, ScoreRecord};
use parrot_core::variational::run_elbo_check;

use crate::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    /// Bad config, flags or input files.
    Validation(String),
    /// Anything that went wrong after inputs were accepted.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn invalid(m: impl fmt::Display) -> CliError {
    CliError::Validation(m.to_string())
}

fn runtime(m: impl fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn print_plan(stage: &str, plan: CallPlan) {
    println!("{}", serde_json::json!({ "stage": stage, "calls": plan.calls, "skipped": plan.skipped }));
}

fn gateway(ep: &EndpointConfig) -> Result<Gateway> {
    Gateway::new(ep.clone()).map_err(invalid)
}

pub async fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        dry_run: cli.dry_run,
    };
    match cli.command {
        Command::Rationalize(a) => {
            if let Some(t) = a.teacher {
                cfg.pipeline.teacher = t;
            }
            if let Some(n) = a.samples_per_pair {
                cfg.pipeline.samples_per_pair = n;
            }
            cfg.validate()?;
            rationalize(&cfg, &ctx, &a.input, &a.out, a.failures_out.as_deref()).await
        }
        Command::Filter(a) => {
            if let Some(t) = a.teacher {
                cfg.pipeline.teacher = t;
            }
            filter(&cfg, &ctx, &a.input, &a.out, a.stats_out.as_deref()).await
        }
        Command::Project(a) => {
            if let Some(t) = a.teacher {
                cfg.pipeline.teacher = t;
            }
            project(&cfg, &ctx, &a.input, &a.out, a.failures_out.as_deref()).await
        }
        Command::EmitSft(a) => {
            let dir = a.out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
            emit_sft(&cfg, &ctx, &a.samples, &a.projections, &dir)
        }
        Command::Score(a) => score(&cfg, &a),
        Command::BenchPairwise(a) => bench(&a),
        Command::NftTrain(a) => {
            if let Some(n) = a.iterations {
                cfg.nft.iterations = n;
            }
            if let Some(s) = ctx.seed {
                cfg.nft.seed = s;
            }
            cfg.validate()?;
            nft_train(&cfg, &ctx, &a)
        }
        Command::ElboCheck(a) => elbo_check(&ctx, a.models, a.tolerance),
        Command::Gcr(a) => {
            if let Some(n) = a.max_iterations {
                cfg.gcr.max_iterations = n;
            }
            if let Some(t) = a.threshold {
                cfg.gcr.threshold = t;
            }
            cfg.validate()?;
            gcr(&cfg, &ctx, &a).await
        }
        Command::MockServe(a) => mock_serve(&a.script, &a.addr).await,
    }
}

struct Ctx {
    seed: Option<u64>,
    dry_run: bool,
}

fn pipeline(cfg: &AppConfig) -> Result<Pipeline> {
    let teacher = gateway(cfg.teacher()?)?;
    Ok(Pipeline::new(teacher, PromptForge::new(cfg.labels.clone()), cfg.pipeline.clone())?)
}

async fn rationalize(cfg: &AppConfig, ctx: &Ctx, input: &Path, out: &Path, failures_out: Option<&Path>) -> Result<()> {
    let inputs = parse_inputs(&read(input)?)?;
    cfg.teacher()?;
    if ctx.dry_run {
        print_plan("rationalize", plan_rationalize(&inputs, &cfg.pipeline));
        return Ok(());
    }
    let result = pipeline(cfg)?.rationalize(&inputs).await;
    let mut files = vec![(out, to_jsonl(&result.items))];
    if let Some(f) = failures_out {
        files.push((f, to_jsonl(&result.failures)));
    }
    write_files(&files)?;
    tracing::info!(inputs = inputs.len(), samples = result.items.len(), failures = result.failures.len(), "rationalize done");
    Ok(())
}

async fn filter(cfg: &AppConfig, ctx: &Ctx, input: &Path, out: &Path, stats_out: Option<&Path>) -> Result<()> {
    let samples: Vec<RationalizedSample> = parse_jsonl(&read(input)?)?;
    cfg.teacher()?;
    if ctx.dry_run {
        print_plan("filter", plan_filter(&samples));
        return Ok(());
    }
    let (result, stats) = pipeline(cfg)?.filter(samples).await;
    let stats_json = serde_json::to_string(&stats).expect("stats serialize") + "\n";
    let mut files = vec![(out, to_jsonl(&result.items))];
    if let Some(s) = stats_out {
        files.push((s, stats_json));
    }
    write_files(&files)?;
    tracing::info!(
        generated = stats.generated,
        passed = stats.passed,
        failed = stats.failed,
        malformed = stats.malformed,
        retention = stats.retention,
        "filter done"
    );
    Ok(())
}

async fn project(cfg: &AppConfig, ctx: &Ctx, input: &Path, out: &Path, failures_out: Option<&Path>) -> Result<()> {
    let samples: Vec<RationalizedSample> = parse_jsonl(&read(input)?)?;
    cfg.teacher()?;
    if ctx.dry_run {
        print_plan("project", plan_project(&samples));
        return Ok(());
    }
    let result = pipeline(cfg)?.project(&samples).await;
    let mut files = vec![(out, to_jsonl(&result.items))];
    if let Some(f) = failures_out {
        files.push((f, to_jsonl(&result.failures)));
    }
    write_files(&files)?;
    tracing::info!(projections = result.items.len(), failures = result.failures.len(), "project done");
    Ok(())
}

fn emit_sft(cfg: &AppConfig, ctx: &Ctx, samples: &Path, projections: &Path, dir: &Path) -> Result<()> {
    let samples: Vec<RationalizedSample> = parse_jsonl(&read(samples)?)?;
    let projections: Vec<Projection> = parse_jsonl(&read(projections)?)?;
    let ds = build_sft(&PromptForge::new(cfg.labels.clone()), &samples, &projections)?;
    if ctx.dry_run {
        print_plan("emit-sft", CallPlan::default());
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    write_sft(&SftPaths::in_dir(dir), &ds)?;
    tracing::info!(
        pairwise = ds.pairwise.len(),
        pointwise = ds.pointwise.len(),
        failures = ds.failures.len(),
        dir = %dir.display(),
        "emit-sft done"
    );
    Ok(())
}

fn score(cfg: &AppConfig, a: &crate::ScoreArgs) -> Result<()> {
    let records: Vec<ScoreRecord> = parse_jsonl(&read(&a.input)?)?;
    let batch = score_records(records, &cfg.reward.options());
    for (prompt, err) in &batch.skipped {
        tracing::warn!(prompt = %prompt, error = %err, "group not normalized");
    }
    let mut files: Vec<(&Path, String)> = vec![(&a.out, to_jsonl(&batch.records))];
    if let Some(g) = &a.groups_out {
        files.push((g, to_jsonl(&batch.groups)));
    }
    if let Some(s) = &a.selected_out {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &batch.records {
            if let Some(v) = r.r_raw {
                let e = sums.entry(r.prompt_id.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let means: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let selected = select_training_prompts(means.iter(), cfg.reward.selection_threshold);
        files.push((s, selected.into_iter().map(|p| p + "\n").collect()));
    }
    write_files(&files)?;
    let kept = batch.groups.iter().filter(|g| g.decision.is_keep()).count();
    tracing::info!(records = batch.records.len(), groups = batch.groups.len(), kept, "score done");
    Ok(())
}

#[derive(Deserialize)]
struct GoldLine {
    id: String,
    label: Winner,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictLine {
    id: String,
    #[serde(default)]
    verdict: Option<Winner>,
    #[serde(default)]
    answer: Option<String>,
}

fn bench(a: &crate::BenchArgs) -> Result<()> {
    let gold: Vec<GoldLine> = parse_jsonl(&read(&a.gold)?)?;
    let verdicts: Vec<VerdictLine> = parse_jsonl(&read(&a.verdicts)?)?;
    let mut by_id = BTreeMap::new();
    for v in verdicts {
        let w = match (v.verdict, &v.answer) {
            (Some(w), None) => w,
            (None, Some(text)) => match parse_consistency_answer(text) {
                Ok(ans) => ans.winner(),
                Err(e) => {
                    tracing::warn!(id = %v.id, error = %e, "unparseable answer counted as tie");
                    Winner::Tie
                }
            },
            _ => return Err(invalid(format!("verdict {:?}: give exactly one of verdict or answer", v.id))),
        };
        if by_id.insert(v.id.clone(), w).is_some() {
            return Err(invalid(format!("duplicate verdict for {:?}", v.id)));
        }
    }
    let mut items = Vec::with_capacity(gold.len());
    for g in gold {
        let verdict = by_id
            .remove(&g.id)
            .ok_or_else(|| invalid(format!("no verdict for {:?}", g.id)))?;
        items.push(BenchmarkItem {
            id: g.id,
            gold: g.label,
            verdict,
        });
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(invalid(format!("verdict for unknown id {extra:?}")));
    }
    let accuracy = pairwise_accuracy(&items).map_err(invalid)?;
    let correct = items.iter().filter(|i| i.verdict == i.gold).count();
    let summary = serde_json::json!({ "items": items.len(), "correct": correct, "accuracy": accuracy }).to_string();
    if let Some(out) = &a.out {
        write(out, format!("{summary}\n"))?;
    }
    println!("{summary}");
    Ok(())
}

fn nft_train(cfg: &AppConfig, ctx: &Ctx, a: &crate::NftArgs) -> Result<()> {
    let task = TwoGaussianTask::default();
    let init = match &a.init_checkpoint {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| invalid(format!("cannot read {}: {e}", p.display())))?;
            let ck = Checkpoint::decode(&bytes).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            if ck.layout.hidden != cfg.nft.hidden {
                return Err(invalid(format!(
                    "checkpoint hidden width {} differs from nft.hidden {}",
                    ck.layout.hidden, cfg.nft.hidden
                )));
            }
            Some(ck.into_policy())
        }
        None => None,
    };
    if ctx.dry_run {
        println!(
            "{}",
            serde_json::json!({ "stage": "nft-train", "iterations": cfg.nft.iterations, "seed": cfg.nft.seed })
        );
        return Ok(());
    }
    let policy = init.unwrap_or_else(|| pretrained_policy(&task, &cfg.nft));
    let out = train(&cfg.nft, &task, policy).map_err(runtime)?;
    write(&a.metrics_out, to_jsonl(&out.metrics))?;
    if let Some(p) = &a.checkpoint_out {
        write(p, Checkpoint::from_policy(&out.policy).encode())?;
    }
    if let (Some(first), Some(last)) = (out.metrics.first(), out.metrics.last()) {
        tracing::info!(
            iterations = out.metrics.len(),
            first_reward = first.mean_reward,
            last_reward = last.mean_reward,
            "nft-train done"
        );
    }
    Ok(())
}

fn elbo_check(ctx: &Ctx, models: usize, tolerance: f64) -> Result<()> {
    if models == 0 {
        return Err(invalid("--models must be >= 1"));
    }
    let report = run_elbo_check(models, ctx.seed.unwrap_or(0));
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    if report.passes(tolerance) {
        Ok(())
    } else {
        Err(runtime(format!("residuals exceed tolerance {tolerance}")))
    }
}

async fn gcr(cfg: &AppConfig, ctx: &Ctx, a: &crate::GcrArgs) -> Result<()> {
    let source = a
        .source
        .as_deref()
        .map(ImageRef::parse)
        .transpose()
        .map_err(|e| invalid(format!("--source: {e}")))?;
    let (judge_cfg, generator_cfg) = (cfg.judge()?, cfg.generator()?);
    if ctx.dry_run {
        let rounds = cfg.gcr.max_iterations + 1;
        println!(
            "{}",
            serde_json::json!({ "stage": "gcr", "max_generator_calls": rounds, "max_judge_calls": rounds })
        );
        return Ok(());
    }
    let (judge, generator) = (gateway(judge_cfg)?, gateway(generator_cfg)?);
    let forge = PromptForge::new(cfg.labels.clone());
    let engine = GcrEngine {
        judge: &judge,
        generator: &generator,
        forge: &forge,
        config: &cfg.gcr,
    };
    match engine.run(&a.request, source.as_ref(), ctx.seed.unwrap_or(0)).await {
        Ok(trace) => {
            write_trace(&trace, &a.trace_out)?;
            tracing::info!(
                rounds = trace.steps.len(),
                latency_ms = trace.latency.as_millis() as u64,
                "gcr done"
            );
            Ok(())
        }
        Err(e) => {
            if let Some(partial) = e.partial_trace() {
                write_trace(partial, &a.trace_out)?;
            }
            Err(match e {
                parrot_core::gcr::GcrError::InvalidRequest(_) | parrot_core::gcr::GcrError::Prompt(_) => invalid(e),
                other => runtime(other),
            })
        }
    }
}

/// Step lines, then `{"final_image": <path>}`. Inline images are saved next
/// to the trace as `<stem>.final.<ext>`.
fn write_trace(trace: &GcrTrace, path: &Path) -> Result<()> {
    let final_image = match &trace.final_image {
        Some(ImageRef::Inline { media_type, data }) => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
            let img = path.with_file_name(format!("{stem}.final.{}", extension_for(media_type)));
            write(&img, data)?;
            Some(img.display().to_string())
        }
        Some(ImageRef::Path(p)) => Some(p.display().to_string()),
        Some(ImageRef::Url(u)) => Some(u.clone()),
        None => None,
    };
    let mut text = to_jsonl(&trace.steps);
    text.push_str(&serde_json::json!({ "final_image": final_image }).to_string());
    text.push('\n');
    write(path, text)
}

async fn mock_serve(script: &Path, addr: &str) -> Result<()> {
    let script: MockScript =
        serde_json::from_str(&read(script)?).map_err(|e| invalid(format!("{}: {e}", script.display())))?;
    let server = MockServer::bind(addr, script)
        .await
        .map_err(|e| runtime(format!("cannot bind {addr}: {e}")))?;
    println!("{}", serde_json::json!({ "base_url": server.base_url() }));
    tokio::signal::ctrl_c().await.map_err(runtime)?;
    tracing::info!(requests = server.request_count(), "mock-serve stopped");
    Ok(())
}
