use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value;

use weaver::config::EngineConfig;
use weaver::datapipe::{
    draft_tool_names, export_rl, export_sft, pipeline_stats, run_pipeline, SftRecord, SftSample, SourceItem,
    StageBackends, RL_POOL_VERSION, SFT_VERSION,
};
use weaver::harness::{ablation_csv, cumulative_subsets, run_ablation, run_benchmark, EvalReport, ToolSubset};
use weaver::history::VideoMeta;
use weaver::policy::{
    PolicyProvider, RecordingProvider, RemotePolicy, ReplayPolicy, ScriptedProvider, SharedPolicy,
};
use weaver::protocol::render_tool_result;
use weaver::reward::export_rl_batch;
use weaver::rollout::{
    batch_records, read_jsonl, run_batch, run_group_batch, write_jsonl, Trajectory, TRAJECTORY_VERSION,
};
use weaver::synthworld::{generate, generate_task_set, SyntheticVideo, Task, WorldSpec};
use weaver::toolkit::oracle::OracleBackend;
use weaver::toolkit::remote::RemoteToolBackend;
use weaver::toolkit::{ToolBackend, Toolkit};

use crate::{CliError, RunArgs};

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Everything a run needs, resolved from the flags.
struct Setup {
    tasks: Vec<Task>,
    catalog: BTreeMap<String, VideoMeta>,
    provider: Arc<dyn PolicyProvider>,
    toolkit: Toolkit,
    config: EngineConfig,
}

fn load_worlds(path: &Path) -> Result<Vec<SyntheticVideo>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let worlds = match value {
        Value::Array(items) => items
            .into_iter()
            .map(serde_json::from_value)
            .collect::<Result<Vec<SyntheticVideo>, _>>(),
        single => serde_json::from_value(single).map(|w| vec![w]),
    };
    worlds.map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn provider_from(spec: &str) -> Result<Arc<dyn PolicyProvider>, CliError> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| usage(format!("--policy {spec:?}: expected scripted:<name>, remote:<url> or replay:<file>")))?;
    Ok(match kind {
        "scripted" => Arc::new(arg.parse::<ScriptedProvider>().map_err(usage)?),
        "remote" => Arc::new(SharedPolicy(Arc::new(RemotePolicy::with_defaults(arg)))),
        "replay" => Arc::new(SharedPolicy(Arc::new(ReplayPolicy::load(Path::new(arg)).map_err(failed)?))),
        other => return Err(usage(format!("unknown policy kind {other:?}"))),
    })
}

fn setup(args: &RunArgs) -> Result<Setup, CliError> {
    let mut config = match &args.config {
        Some(path) => EngineConfig::load(path).map_err(usage)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config = config.with("seed", seed).map_err(usage)?;
    }
    if args.parallelism == 0 {
        return Err(usage("--parallelism must be at least 1"));
    }
    let subset = ToolSubset::parse(&args.tools).map_err(usage)?;
    let mut provider = provider_from(&args.policy)?;
    if let Some(log) = &args.record {
        provider = Arc::new(RecordingProvider::new(provider, log).map_err(failed)?);
    }
    let tasks: Vec<Task> = read_jsonl(&args.tasks).map_err(failed)?;
    let worlds = load_worlds(&args.world)?;
    let catalog: BTreeMap<String, VideoMeta> = worlds
        .iter()
        .map(|w| (w.video_id().to_string(), w.meta.clone()))
        .collect();
    let backend: Arc<dyn ToolBackend> = match &args.tool_server {
        Some(url) => Arc::new(RemoteToolBackend::new(
            url.clone(),
            RemoteToolBackend::DEFAULT_TIMEOUT,
            RemoteToolBackend::DEFAULT_RETRIES,
        )),
        None => Arc::new(OracleBackend::new(worlds)),
    };
    let toolkit = Toolkit::new(backend, config.tools.clone()).with_enabled(subset.tools);
    Ok(Setup {
        tasks,
        catalog,
        provider,
        toolkit,
        config,
    })
}

fn out_dir(args_out: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    let dir = args_out.ok_or_else(|| usage(format!("{command} needs --out <dir>")))?;
    fs::create_dir_all(dir).map_err(|e| failed(format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn task_errors(trajectories: &[Trajectory]) -> Result<(), CliError> {
    let n = trajectories.iter().filter(|t| t.error.is_some()).count();
    if n > 0 {
        return Err(failed(format!("{n} of {} tasks failed", trajectories.len())));
    }
    Ok(())
}

pub fn rollout(args: &RunArgs) -> Result<(), CliError> {
    let s = setup(args)?;
    let results = run_batch(&s.tasks, &s.catalog, s.provider.as_ref(), &s.toolkit, &s.config.rollout, args.parallelism)
        .map_err(failed)?;
    let trajectories = batch_records(&s.tasks, results, &s.config.rollout);
    match &args.out {
        Some(path) => {
            write_jsonl(&trajectories, path).map_err(failed)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for t in &trajectories {
                let line = serde_json::to_string(t).map_err(failed)?;
                writeln!(stdout, "{line}").map_err(failed)?;
            }
        }
    }
    eprintln!("{} trajectories", trajectories.len());
    task_errors(&trajectories)
}

pub fn group(args: &RunArgs) -> Result<(), CliError> {
    let s = setup(args)?;
    let path = args.out.as_ref().ok_or_else(|| usage("group needs --out <file>"))?;
    let results = run_group_batch(&s.tasks, &s.catalog, s.provider.as_ref(), &s.toolkit, &s.config.rollout, args.parallelism)
        .map_err(failed)?;
    let mut groups = Vec::new();
    let mut errors = 0;
    for r in results {
        match r {
            Ok(g) => {
                let summary = serde_json::json!({
                    "task_id": g.task_id,
                    "rewards": g.rewards,
                    "advantages": g.advantages,
                });
                println!("{summary}");
                groups.push(g);
            }
            Err(f) => {
                eprintln!("task {} failed: {}", f.task_id, f.error);
                errors += 1;
            }
        }
    }
    let n = export_rl_batch(&groups, &s.config.snapshot(), path).map_err(failed)?;
    eprintln!("{n} RL records");
    if errors > 0 {
        return Err(failed(format!("{errors} groups failed")));
    }
    Ok(())
}

pub fn eval(args: &RunArgs) -> Result<(), CliError> {
    let s = setup(args)?;
    let dir = match &args.out {
        Some(d) => Some(out_dir(Some(d), "eval")?),
        None => None,
    };
    let traj_path = dir.as_ref().map(|d| d.join("trajectories.jsonl"));
    let (report, trajectories) = run_benchmark(
        &s.tasks,
        &s.catalog,
        s.provider.as_ref(),
        &s.toolkit,
        &s.config.rollout,
        args.parallelism,
        traj_path.as_deref(),
    )
    .map_err(failed)?;
    if let Some(d) = &dir {
        write_file(&d.join("report.json"), &pretty(&report))?;
        write_file(&d.join("report.csv"), &report.to_csv())?;
    }
    print!("{}", pretty(&report));
    task_errors(&trajectories)
}

pub fn ablate(args: &RunArgs, subsets: &[String]) -> Result<(), CliError> {
    let s = setup(args)?;
    let subsets = if subsets.is_empty() {
        cumulative_subsets()
    } else {
        subsets
            .iter()
            .map(|t| ToolSubset::parse(t))
            .collect::<Result<Vec<_>, _>>()
            .map_err(usage)?
    };
    let rows = run_ablation(
        &s.tasks,
        &s.catalog,
        s.provider.as_ref(),
        &s.toolkit,
        &s.config.rollout,
        args.parallelism,
        &subsets,
    )
    .map_err(failed)?;
    let csv = ablation_csv(&rows);
    if let Some(d) = &args.out {
        let d = out_dir(Some(d), "ablate")?;
        write_file(&d.join("ablation.csv"), &csv)?;
        write_file(&d.join("ablation.json"), &pretty(&rows))?;
    }
    print!("{csv}");
    Ok(())
}

fn read_sources(path: &Path) -> Result<Vec<SourceItem>, CliError> {
    let values: Vec<Value> = read_jsonl(path).map_err(failed)?;
    values
        .into_iter()
        .map(|v| {
            if v.get("item_id").is_some() {
                serde_json::from_value::<SourceItem>(v)
            } else {
                serde_json::from_value::<Task>(v).map(|t| SourceItem::from_task(&t))
            }
            .map_err(|e| failed(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn build_dataset(args: &RunArgs) -> Result<(), CliError> {
    let s = setup(args)?;
    let dir = out_dir(args.out.as_deref(), "build-dataset")?;
    let items = read_sources(&args.tasks)?;
    // A scripted name picks the refiner; filtering guesses and rewriting
    // replays the oracle's calls.
    let backends = match args.policy.strip_prefix("scripted:") {
        Some(_) => StageBackends {
            filter: Arc::new(ScriptedProvider::NoTools),
            rewriter: Arc::new(ScriptedProvider::OracleRewrite),
            answerer: Arc::clone(&s.provider),
        },
        None => StageBackends {
            filter: Arc::clone(&s.provider),
            rewriter: Arc::clone(&s.provider),
            answerer: Arc::clone(&s.provider),
        },
    };
    let out = run_pipeline(&items, &s.catalog, &backends, &s.toolkit, &s.config.rollout, s.config.filter_frames);
    let n_sft = export_sft(&out.sft, &dir.join("sft.jsonl"), s.config.sft_frames).map_err(failed)?;
    let n_rl = export_rl(&out.rl_pool, &dir.join("rl_pool.jsonl")).map_err(failed)?;
    let stats = serde_json::json!({
        "n_items": items.len(),
        "discarded": out.discarded.len(),
        "sft": n_sft,
        "rl_pool": n_rl,
        "kept_without_verdict": out.diagnostics.len(),
        "drafts": pipeline_stats(out.drafts.iter().map(draft_tool_names)),
        "sft_tools": pipeline_stats(out.sft.iter().map(SftSample::tool_names)),
    });
    write_file(&dir.join("stats.json"), &pretty(&stats))?;
    print!("{}", pretty(&stats));
    Ok(())
}

pub fn gen_world(seed: u64, n_tasks: Option<usize>, out: Option<&Path>) -> Result<(), CliError> {
    match n_tasks {
        None => {
            let world = generate(seed, &WorldSpec::canonical()).map_err(failed)?;
            let json = world.to_json();
            match out {
                Some(path) => write_file(path, &json)?,
                None => print!("{json}"),
            }
        }
        Some(n) => {
            let dir = out_dir(out, "gen-world --n-tasks")?;
            let set = generate_task_set(n, seed).map_err(failed)?;
            write_file(&dir.join("worlds.json"), &pretty(&set.worlds))?;
            write_jsonl(&set.tasks, &dir.join("tasks.jsonl")).map_err(failed)?;
            println!("{} worlds, {} tasks", set.worlds.len(), set.tasks.len());
        }
    }
    Ok(())
}

pub fn inspect(file: &Path) -> Result<(), CliError> {
    let trajectories: Vec<Trajectory> = read_jsonl(file).map_err(failed)?;
    let mut stdout = std::io::stdout().lock();
    for t in &trajectories {
        let reward = t.reward.map_or("-".to_string(), |r| r.total.to_string());
        let _ = writeln!(
            stdout,
            "== {} [{}] seed={} stop={} answer={} reward={}",
            t.task_id,
            t.template.map_or("none", |k| k.as_str()),
            t.seed,
            t.stop_reason.as_str(),
            t.final_answer.as_deref().unwrap_or("-"),
            reward
        );
        let _ = writeln!(stdout, "{}", t.question.render());
        for (i, step) in t.steps.iter().enumerate() {
            let _ = writeln!(stdout, "-- step {} (context {} tokens, {} evicted)", i + 1, step.context_tokens, step.evicted_segments);
            let _ = writeln!(stdout, "{}", step.response_text.trim());
            if let Some(result) = &step.tool_result {
                let _ = writeln!(stdout, "{}", render_tool_result(result).trim());
            }
            for flag in &step.protocol_flags {
                let _ = writeln!(stdout, "! {flag}");
            }
        }
        if let Some(e) = &t.error {
            let _ = writeln!(stdout, "! error: {e}");
        }
    }
    Ok(())
}

fn parse_all<T: serde::de::DeserializeOwned>(values: Vec<Value>) -> Result<Vec<T>, CliError> {
    values
        .into_iter()
        .map(serde_json::from_value)
        .collect::<Result<Vec<_>, _>>()
        .map_err(failed)
}

pub fn stats(file: &Path) -> Result<(), CliError> {
    let values: Vec<Value> = read_jsonl(file).map_err(failed)?;
    let version = values
        .first()
        .and_then(|v| v.get("version"))
        .and_then(Value::as_str)
        .unwrap_or(TRAJECTORY_VERSION);
    match version {
        TRAJECTORY_VERSION => {
            let trajectories: Vec<Trajectory> = parse_all(values)?;
            let report = EvalReport::from_trajectories(&trajectories);
            print!("{}", pretty(&report));
            eprint!("{}", report.to_csv());
        }
        SFT_VERSION => {
            let records: Vec<SftRecord> = parse_all(values)?;
            print!("{}", pretty(&pipeline_stats(records.iter().map(SftRecord::tool_names))));
        }
        RL_POOL_VERSION => println!("{{\"n_records\": {}}}", values.len()),
        other => return Err(failed(format!("unrecognized record version {other:?}"))),
    }
    Ok(())
}
