//! Acceptance suite: one pass/fail line per criterion, exit status 1 if any
//! criterion fails. Run with `cargo test -p weaver-cli --test acceptance`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use weaver::datapipe::{export_rl, export_sft, run_pipeline, SourceItem, StageBackends, FLAG_INVALID_CALL, FLAG_NO_CALLS};
use weaver::harness::{run_benchmark, EvalReport, TemplateStats};
use weaver::history::{option_index, option_letter, QuestionType, Span};
use weaver::policy::{oracle_rewrite_for, PolicyBackend, PolicyError, PolicyProvider, ScriptedPolicy, ScriptedProvider};
use weaver::protocol::{
    parse_response, render_answer, render_tool_call, ToolCall, DIAG_EXTRA_ANSWERS, DIAG_EXTRA_TOOL_CALLS,
    DIAG_SUPERSEDED, DIAG_UNCLOSED_ANSWER, DIAG_UNCLOSED_TOOL_CALL, DIAG_UNPARSEABLE,
};
use weaver::reward::{group_advantages, Weights};
use weaver::rollout::{batch_records, run_batch, write_jsonl, RolloutConfig, StopReason, Trajectory};
use weaver::synthworld::{generate_task_set, SyntheticVideo, Task, TaskSet};
use weaver::toolkit::oracle::OracleBackend;
use weaver::toolkit::{ToolConfig, ToolName, Toolkit};
use weaver::{ExactReward, Reward};

const MAX_TURNS: usize = 10;
const PROMPT_BUDGET: usize = 8192;
const TOOL_FRAME_CAP: usize = 32;

/// Largest assembled context seen by any episode in this run.
static MAX_CONTEXT: AtomicUsize = AtomicUsize::new(0);
static STEPS_SEEN: AtomicUsize = AtomicUsize::new(0);

fn observe(trajs: &[Trajectory]) {
    for t in trajs {
        for s in &t.steps {
            MAX_CONTEXT.fetch_max(s.context_tokens, Ordering::Relaxed);
            STEPS_SEEN.fetch_add(1, Ordering::Relaxed);
        }
    }
}

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct World {
    set: TaskSet,
    backend: Arc<OracleBackend>,
    toolkit: Toolkit,
}

fn world(n_tasks: usize, seed: u64) -> World {
    let set = generate_task_set(n_tasks, seed).expect("task set");
    let backend = Arc::new(OracleBackend::new(set.worlds.clone()));
    let toolkit = Toolkit::new(backend.clone(), ToolConfig::default());
    World { set, backend, toolkit }
}

fn run(w: &World, toolkit: &Toolkit, provider: &dyn PolicyProvider, parallelism: usize) -> Vec<Trajectory> {
    let config = RolloutConfig::default();
    let results = run_batch(&w.set.tasks, w.backend.as_ref(), provider, toolkit, &config, parallelism).expect("batch");
    let trajs = batch_records(&w.set.tasks, results, &config);
    observe(&trajs);
    trajs
}

/// Oracle, no-tools, fallback, and never-answer policies by task position.
fn mixed_provider(tasks: &[Task]) -> impl PolicyProvider {
    let index: HashMap<String, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
    move |task: &Task| -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        let kind = [
            ScriptedProvider::Oracle,
            ScriptedProvider::NoTools,
            ScriptedProvider::Fallback,
            ScriptedProvider::NeverAnswer,
        ][index[&task.task_id] % 4];
        kind.policy_for(task)
    }
}

// ---------------------------------------------------------------------------
// 1. Reward table

fn c1_reward_table() -> Outcome {
    let allowed: BTreeSet<i64> = [0, 2, 7, 9, 10].into();
    let weights = Weights::default();
    let mut reachable = BTreeSet::new();
    for bits in 0..8u8 {
        let (correct, formatted, tool) = (bits & 1 == 1, bits & 2 == 2, bits & 4 == 4);
        let float = Reward::from_components(correct, formatted, tool, weights);
        let exact = ExactReward::from_components(correct, formatted, tool, weights);
        if correct && !formatted {
            ensure(float.is_none() && exact.is_none(), || format!("state {bits:03b} should be unreachable"))?;
            continue;
        }
        let (float, exact) = (float.unwrap(), exact.unwrap());
        // Weighted sum in integer tenths: 7 * corr + 2 * format + 1 * (tool and corr).
        let tenths = 7 * correct as i64 + 2 * formatted as i64 + (tool && correct) as i64;
        ensure(exact.total == Rational64::new(tenths, 10), || format!("{bits:03b}: exact {} != {tenths}/10", exact.total))?;
        ensure(float.total == tenths as f64 / 10.0, || format!("{bits:03b}: {} != {}", float.total, tenths as f64 / 10.0))?;
        ensure(allowed.contains(&tenths), || format!("{bits:03b}: total {tenths}/10 outside the table"))?;
        reachable.insert(tenths);
    }

    // Totals produced by real episodes land in the same table.
    let w = world(24, 5);
    let mut seen = BTreeSet::new();
    for provider in [ScriptedProvider::Oracle, ScriptedProvider::NoTools, ScriptedProvider::NeverAnswer] {
        for t in run(&w, &w.toolkit, &provider, 2) {
            let r = t.reward.ok_or("episode without reward")?;
            let tenths = (r.total * 10.0).round() as i64;
            ensure(r.total == tenths as f64 / 10.0 && allowed.contains(&tenths), || format!("{}: total {}", t.task_id, r.total))?;
            seen.insert(tenths);
        }
    }
    let show = |s: &BTreeSet<i64>| s.iter().map(|t| format!("{:.1}", *t as f64 / 10.0)).collect::<Vec<_>>().join(",");
    Ok(format!("reachable {{{}}}; episode totals {{{}}}", show(&reachable), show(&seen)))
}

// ---------------------------------------------------------------------------
// 2. Protocol round trip

fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    const PIECES: &[&str] = &[
        "a", "Z", "7", " ", "_", "\"", "\\", "\n", "\t", "{", "}", "[", "]", ":", ",", "<", ">", "/", "é", "→", "🎬",
        "<tool_call>", "</tool_call>", "<answer>", "</answer>",
    ];
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

fn random_value(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    let kinds = if depth >= 3 { 5 } else { 7 };
    match rng.gen_range(0..kinds) {
        0 => Value::Null,
        1 => Value::Bool(rng.gen()),
        2 => json!(rng.gen_range(-1_000_000i64..1_000_000)),
        3 => {
            let x: f64 = rng.gen_range(-1e6..1e6);
            json!(x)
        }
        4 => Value::String(random_string(rng, 12)),
        5 => Value::Array((0..rng.gen_range(0..4)).map(|_| random_value(rng, depth + 1)).collect()),
        _ => Value::Object(random_map(rng, depth + 1)),
    }
}

fn random_map(rng: &mut ChaCha8Rng, depth: u32) -> Map<String, Value> {
    (0..rng.gen_range(0..5))
        .map(|_| (random_string(rng, 8), random_value(rng, depth)))
        .collect()
}

fn random_call(rng: &mut ChaCha8Rng) -> ToolCall {
    let name = if rng.gen_bool(0.5) {
        ToolName::ALL[rng.gen_range(0..6)].as_str().to_string()
    } else {
        random_string(rng, 10)
    };
    ToolCall::new(name, random_map(rng, 0))
}

/// Malformed responses with the parse they must produce.
struct Adversarial {
    text: String,
    format_ok: bool,
    answer: Option<String>,
    call: Option<ToolCall>,
    superseded: bool,
    /// Expected diagnostics as prefixes, in order.
    diagnostics: Vec<&'static str>,
}

fn adversarial(rng: &mut ChaCha8Rng, family: usize) -> Adversarial {
    let call = random_call(rng);
    let rendered = render_tool_call(&call);
    let payload = rendered.trim_start_matches("<tool_call>").trim_end_matches("</tool_call>").to_string();
    let prose = {
        const WORDS: &[&str] = &["the", "dog", "enters", "then", "I", "check", "frame", "42", "{", "}", "<", ">", "/"];
        (0..rng.gen_range(1..8)).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    let letter = option_letter(rng.gen_range(0..4)).to_string();
    let base = |text: String| Adversarial {
        text,
        format_ok: false,
        answer: None,
        call: None,
        superseded: false,
        diagnostics: vec![],
    };
    match family {
        // Tags that are never closed.
        0 => Adversarial {
            diagnostics: vec![DIAG_UNCLOSED_TOOL_CALL],
            ..base(format!("{prose}<tool_call>{payload}"))
        },
        1 => Adversarial {
            diagnostics: vec![DIAG_UNCLOSED_ANSWER],
            ..base(format!("{prose}<answer>{letter}"))
        },
        // Payloads that are not a tool call object.
        2 => {
            let cut = payload.len() - rng.gen_range(1..payload.len().min(6));
            let mut cut = cut;
            while !payload.is_char_boundary(cut) {
                cut -= 1;
            }
            Adversarial {
                diagnostics: vec![DIAG_UNPARSEABLE],
                ..base(format!("{prose}<tool_call>{}</tool_call>", &payload[..cut]))
            }
        }
        3 => Adversarial {
            diagnostics: vec![DIAG_UNPARSEABLE],
            ..base(format!(
                "{prose}<tool_call>{}</tool_call>",
                json!({"name": call.name, "arguments": call.arguments, "extra": 1}).to_string().replace('<', "\\u003c")
            ))
        },
        4 => {
            let bad = [json!({"name": 3, "arguments": {}}), json!({"arguments": {}}), json!({"name": "trim", "arguments": [1]}), json!([1, 2])];
            Adversarial {
                diagnostics: vec![DIAG_UNPARSEABLE],
                ..base(format!("<tool_call>{}</tool_call>{prose}", bad[rng.gen_range(0..bad.len())]))
            }
        }
        // Surplus blocks.
        5 => Adversarial {
            format_ok: true,
            answer: Some(letter.clone()),
            diagnostics: vec![DIAG_EXTRA_ANSWERS],
            ..base(format!("{prose}{}{}", render_answer(&letter), render_answer("Z")))
        },
        6 => Adversarial {
            call: Some(call.clone()),
            diagnostics: vec![DIAG_EXTRA_TOOL_CALLS],
            ..base(format!("{prose}{rendered}\n{}", render_tool_call(&random_call(rng))))
        },
        // A call and an answer in one response: the answer wins.
        7 => Adversarial {
            format_ok: true,
            answer: Some(letter.clone()),
            call: Some(call.clone()),
            superseded: true,
            diagnostics: vec![DIAG_SUPERSEDED],
            ..base(format!("{prose}{rendered}{}", render_answer(&letter)))
        },
        // Mismatched or misspelled tags are plain text.
        8 => base(format!("{prose}</tool_call></answer><tool_cal>{payload}<answer >{letter}</answer")),
        // Empty answer block is still a well-formed answer.
        _ => Adversarial {
            format_ok: true,
            answer: Some(String::new()),
            diagnostics: vec![DIAG_UNCLOSED_TOOL_CALL],
            ..base(format!("{prose}<answer></answer><tool_call>"))
        },
    }
}

fn c2_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let call = random_call(&mut rng);
        let prose = random_string(&mut rng, 6).replace('<', " ");
        let text = format!("{prose}{}", render_tool_call(&call));
        let parsed = parse_response(&text);
        ensure(parsed.tool_call.as_ref() == Some(&call), || format!("call {i} did not round-trip: {text}"))?;
        ensure(parsed.diagnostics.is_empty() && !parsed.format_ok, || format!("call {i}: {:?}", parsed.diagnostics))?;
    }
    for i in 0..100 {
        let case = adversarial(&mut rng, i % 10);
        let parsed = catch_unwind(|| parse_response(&case.text)).map_err(|_| format!("case {i} panicked"))?;
        let diag_ok = parsed.diagnostics.len() == case.diagnostics.len()
            && parsed.diagnostics.iter().zip(&case.diagnostics).all(|(d, e)| d.starts_with(e));
        ensure(
            parsed.format_ok == case.format_ok
                && parsed.answer_span == case.answer
                && parsed.tool_call == case.call
                && parsed.tool_call_superseded == case.superseded
                && diag_ok,
            || format!("adversarial case {i} (family {}): {:?} gave {parsed:?}", i % 10, case.text),
        )?;
    }
    Ok("1000 calls round-trip; 100 adversarial strings parse as expected".into())
}

// ---------------------------------------------------------------------------
// 3. Oracle end to end

fn c3_oracle() -> Outcome {
    let w = world(200, 11);
    let trajs = run(&w, &w.toolkit, &ScriptedProvider::Oracle, 4);
    let report = EvalReport::from_trajectories(&trajs);
    ensure(report.per_template.len() >= 4, || format!("{} templates", report.per_template.len()))?;
    ensure(report.accuracy == 1.0, || format!("accuracy {}", report.accuracy))?;
    ensure(report.mean_tool_calls >= 1.0, || format!("mean tool calls {}", report.mean_tool_calls))?;
    let missing: Vec<&str> = ToolName::ALL
        .iter()
        .map(|t| t.as_str())
        .filter(|t| !report.per_tool_count.contains_key(*t))
        .collect();
    ensure(missing.is_empty(), || format!("tools never called: {missing:?}"))?;
    Ok(format!(
        "accuracy {:.2}, mean_tool_calls {:.2}, {} templates, 6/6 tools",
        report.accuracy,
        report.mean_tool_calls,
        report.per_template.len()
    ))
}

// ---------------------------------------------------------------------------
// 4. Ablation direction

fn accuracy_where(trajs: &[Trajectory], pred: impl Fn(&Trajectory) -> bool) -> (f64, usize) {
    let picked: Vec<&Trajectory> = trajs.iter().filter(|t| pred(t)).collect();
    let correct = picked.iter().filter(|t| t.is_correct()).count();
    (correct as f64 / picked.len().max(1) as f64, picked.len())
}

fn c4_ablation() -> Outcome {
    let w = world(200, 23);
    let four_options = |t: &Trajectory| t.question.options.len() == 4;
    ensure(w.set.tasks.iter().all(|t| t.question.options.len() == 4), || "tasks must have 4 options".into())?;
    let temporal = |t: &Trajectory| t.template.is_some_and(|k| k.is_temporal()) && four_options(t);
    let spatial = |t: &Trajectory| t.template.is_some_and(|k| !k.is_temporal());

    let full = run(&w, &w.toolkit, &ScriptedProvider::Oracle, 4);
    let (full_acc, _) = accuracy_where(&full, |_| true);
    let no_temporal = w.toolkit.with_enabled([ToolName::SpatialTracking, ToolName::SpatialGrounding]);
    let ablated = run(&w, &no_temporal, &ScriptedProvider::Oracle, 4);
    let (temporal_acc, n_temporal) = accuracy_where(&ablated, temporal);
    let no_sg = w
        .toolkit
        .with_enabled(ToolName::ALL.into_iter().filter(|t| *t != ToolName::SpatialGrounding));
    let fallback = run(&w, &no_sg, &ScriptedProvider::Fallback, 4);
    let (fallback_acc, n_spatial) = accuracy_where(&fallback, spatial);
    let rigid = run(&w, &no_sg, &ScriptedProvider::Oracle, 4);
    let (rigid_acc, _) = accuracy_where(&rigid, spatial);

    ensure(full_acc == 1.0, || format!("full toolkit accuracy {full_acc}"))?;
    ensure(temporal_acc <= 0.35, || format!("temporal accuracy without temporal tools {temporal_acc:.3}"))?;
    ensure(fallback_acc == 1.0, || format!("fallback spatial accuracy without SG {fallback_acc}"))?;
    Ok(format!(
        "full {full_acc:.2}; temporal tasks without temporal tools {temporal_acc:.3} (n={n_temporal}); \
         spatial without SG: fallback {fallback_acc:.2}, oracle {rigid_acc:.2} (n={n_spatial})"
    ))
}

// ---------------------------------------------------------------------------
// 5. Group advantages

fn c5_advantages() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-6;
    let (mut worst_mean, mut worst_std, mut degenerate) = (0.0f64, 0.0f64, 0usize);
    for i in 0..10_000 {
        // Every hundredth vector is constant; half the rest use the discrete
        // reward levels, so ties are common.
        let rewards: Vec<f64> = if i % 100 == 0 {
            vec![[0.0, 0.2, 0.9, 1.0][(i / 100) % 4]; 8]
        } else if i % 2 == 0 {
            (0..8).map(|_| [0.0, 0.2, 0.9, 1.0][rng.gen_range(0..4)]).collect()
        } else {
            (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect()
        };
        let adv = group_advantages(&rewards, eps).map_err(|e| e.to_string())?;
        ensure(adv.len() == 8, || "wrong length".into())?;
        if rewards.iter().all(|&r| r == rewards[0]) {
            degenerate += 1;
            ensure(adv.iter().all(|&a| a == 0.0), || format!("all-equal group {rewards:?} gave {adv:?}"))?;
            continue;
        }
        let mean = adv.iter().sum::<f64>() / 8.0;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        ensure(mean.abs() <= 1e-9, || format!("group {i}: mean {mean:e}"))?;
        ensure((std - 1.0).abs() <= 1e-4, || format!("group {i}: std {std}"))?;
    }
    for level in [0.0, 0.2, 0.9, 1.0] {
        let adv = group_advantages(&[level; 8], eps).map_err(|e| e.to_string())?;
        ensure(adv.iter().all(|&a| a == 0.0), || format!("constant {level} gave {adv:?}"))?;
    }
    Ok(format!(
        "max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, {degenerate} all-equal groups gave zeros"
    ))
}

// ---------------------------------------------------------------------------
// 6. Rollout limits

/// Frames at `start + k` for each whole second `k` inside `[start, end)`.
fn expected_grid(span: Span) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0.0;
    while span.start_s + k < span.end_s - 1e-9 {
        out.push(span.start_s + k);
        k += 1.0;
    }
    out
}

/// Uniform subsample to `cap` frames: element `floor((2j + 1) n / 2cap)`.
fn expected_cap(times: Vec<f64>, cap: usize) -> Vec<f64> {
    let n = times.len();
    if n <= cap {
        return times;
    }
    (0..cap).map(|j| times[(2 * j + 1) * n / (2 * cap)]).collect()
}

/// Event spans of `label` in `world`, overlapping ones joined.
fn event_spans(world: &SyntheticVideo, label: &str) -> Vec<Span> {
    let mut spans: Vec<Span> = world
        .events
        .iter()
        .filter(|e| e.label == label)
        .map(|e| Span::new(e.start_s, e.end_s))
        .collect();
    spans.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut out: Vec<Span> = Vec::new();
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start_s <= last.end_s => last.end_s = last.end_s.max(s.end_s),
            _ => out.push(s),
        }
    }
    out
}

fn check_clips(w: &World, trajs: &[Trajectory]) -> Result<usize, String> {
    let mut n = 0;
    for t in trajs {
        let world = w.backend.world(&t.video_id).ok_or("unknown world")?;
        for step in &t.steps {
            let (Some(call), Some(result)) = (&step.tool_call, &step.tool_result) else {
                continue;
            };
            let Some(clip) = &result.clip else { continue };
            let spans = if result.tool_name == ToolName::TemporalCount.as_str() {
                let query = call.arguments["query"].as_str().ok_or("count query")?;
                event_spans(world, query)
            } else {
                vec![clip.span]
            };
            let expected = expected_cap(spans.iter().flat_map(|s| expected_grid(*s)).collect(), TOOL_FRAME_CAP);
            ensure(clip.frame_times == expected, || {
                format!("{} {}: frames {:?} expected {:?}", t.task_id, result.tool_name, clip.frame_times, expected)
            })?;
            ensure(clip.frame_times.len() <= TOOL_FRAME_CAP, || "cap exceeded".into())?;
            if result.tool_name == ToolName::TemporalGrounding.as_str() {
                let query = call.arguments["query"].as_str().ok_or("grounding query")?;
                ensure(event_spans(world, query).iter().any(|s| s.start_s == clip.span.start_s), || {
                    format!("{}: grounded span {:?} is not an event of {query:?}", t.task_id, clip.span)
                })?;
            }
            n += 1;
        }
    }
    Ok(n)
}

fn c6_limits() -> Outcome {
    let w = world(40, 6);
    let never = run(&w, &w.toolkit, &ScriptedProvider::NeverAnswer, 4);
    for t in &never {
        ensure(t.steps.len() == MAX_TURNS && t.stop_reason == StopReason::MaxTurns, || {
            format!("{}: {} steps, {:?}", t.task_id, t.steps.len(), t.stop_reason)
        })?;
        ensure(t.reward.is_some_and(|r| r.total == 0.0), || format!("{}: nonzero reward", t.task_id))?;
    }
    let mut clips = 0;
    for provider in [ScriptedProvider::Oracle, ScriptedProvider::Fallback] {
        clips += check_clips(&w, &run(&w, &w.toolkit, &provider, 4))?;
    }
    let restricted = w.toolkit.with_enabled([ToolName::Trim, ToolName::TemporalCount, ToolName::SpatialTracking]);
    clips += check_clips(&w, &run(&w, &restricted, &ScriptedProvider::Fallback, 4))?;
    let long = world(8, 66);
    let wide = json!({"start_s": 0.0, "end_s": 150.0});
    let wide_trim = format!("Look at everything.\n<tool_call>{}</tool_call>", json!({"name": "trim", "arguments": wide}));
    let wide_policy = move |_: &Task| -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        Ok(Arc::new(ScriptedPolicy::looping(wide_trim.clone())))
    };
    clips += check_clips(&long, &run(&long, &long.toolkit, &wide_policy, 2))?;

    let max_context = MAX_CONTEXT.load(Ordering::Relaxed);
    let steps = STEPS_SEEN.load(Ordering::Relaxed);
    ensure(max_context <= PROMPT_BUDGET, || format!("context of {max_context} tokens exceeds {PROMPT_BUDGET}"))?;
    ensure(max_context > 0, || "no contexts recorded".into())?;
    Ok(format!(
        "never-answer stops at {MAX_TURNS}; max context {max_context} tokens over {steps} steps; {clips} clips on grid"
    ))
}

// ---------------------------------------------------------------------------
// 7. Datapipe conservation

fn wrong_letter(gold: &str, n_options: usize) -> String {
    let g = gold.chars().next().and_then(option_index).unwrap_or(0);
    option_letter((g + 1) % n_options).to_string()
}

fn c7_datapipe() -> Outcome {
    let w = world(50, 7);
    let items: Vec<SourceItem> = w.set.tasks.iter().map(SourceItem::from_task).collect();
    ensure(items.iter().all(|i| i.question.qtype == QuestionType::MultipleChoice), || "fixture must be multiple choice".into())?;
    let index: Arc<HashMap<String, usize>> =
        Arc::new(items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect());

    let idx = index.clone();
    // Answers odd items correctly from the question alone.
    let filter = move |task: &Task| -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        let q = &task.question;
        let letter = if idx[&task.task_id] % 2 == 1 { q.gold.clone() } else { wrong_letter(&q.gold, q.options.len()) };
        Ok(Arc::new(ScriptedPolicy::new(vec![render_answer(&letter)], q.options.clone())?))
    };
    let idx = index.clone();
    // Oracle rewrites, except an unknown tool at i%10==4 and no call at i%10==8.
    let rewriter = move |task: &Task| -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        let policy = match idx[&task.task_id] % 10 {
            4 => ScriptedPolicy::looping("I will zoom in.\n<tool_call>{\"name\": \"zoom\", \"arguments\": {}}</tool_call>"),
            8 => ScriptedPolicy::looping("I reason about the question without any tool."),
            _ => oracle_rewrite_for(task)?,
        };
        Ok(Arc::new(policy))
    };
    let idx = index.clone();
    // Finishes correctly at i%4==0, wrongly otherwise.
    let answerer = move |task: &Task| -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        if idx[&task.task_id].is_multiple_of(4) {
            ScriptedProvider::Oracle.policy_for(task)
        } else {
            let q = &task.question;
            Ok(Arc::new(ScriptedPolicy::new(vec![render_answer(&wrong_letter(&q.gold, q.options.len()))], q.options.clone())?))
        }
    };
    let backends = StageBackends {
        filter: Arc::new(filter),
        rewriter: Arc::new(rewriter),
        answerer: Arc::new(answerer),
    };
    let config = RolloutConfig::default();
    let out = run_pipeline(&items, w.backend.as_ref(), &backends, &w.toolkit, &config, 128);

    let ids = |pred: &dyn Fn(usize) -> bool| -> Vec<String> {
        (0..items.len()).filter(|&i| pred(i)).map(|i| items[i].item_id.clone()).collect()
    };
    let flagged = |i: usize| i % 10 == 4 || i % 10 == 8;
    let want_discarded = ids(&|i| i % 2 == 1);
    let want_kept = ids(&|i| i % 2 == 0);
    let want_sft = ids(&|i| i % 2 == 0 && !flagged(i) && i % 4 == 0);
    let want_pool = ids(&|i| i % 2 == 0 && (flagged(i) || i % 4 != 0));

    let got_discarded: Vec<String> = out.discarded.iter().map(|i| i.item_id.clone()).collect();
    let got_kept: Vec<String> = out.drafts.iter().map(|d| d.item.item_id.clone()).collect();
    let got_sft: Vec<String> = out.sft.iter().map(|s| s.item.item_id.clone()).collect();
    let got_pool: Vec<String> = out.rl_pool.iter().map(|r| r.item_id.clone()).collect();
    ensure(got_discarded == want_discarded, || format!("discarded {got_discarded:?}"))?;
    ensure(got_kept == want_kept, || format!("kept {got_kept:?}"))?;
    ensure(got_sft == want_sft, || format!("sft {got_sft:?} want {want_sft:?}"))?;
    ensure(got_pool == want_pool, || format!("rl_pool {got_pool:?} want {want_pool:?}"))?;
    ensure(out.diagnostics.is_empty(), || format!("diagnostics {:?}", out.diagnostics))?;
    for d in &out.drafts {
        let i = index[&d.item.item_id];
        let want: Vec<&str> = match i % 10 {
            4 => vec![FLAG_INVALID_CALL],
            8 => vec![FLAG_NO_CALLS],
            _ => vec![],
        };
        ensure(d.flags == want, || format!("item {i} flags {:?}", d.flags))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sft_path = dir.path().join("sft.jsonl");
    let pool_path = dir.path().join("rl_pool.jsonl");
    export_sft(&out.sft, &sft_path, 64).map_err(|e| e.to_string())?;
    export_rl(&out.rl_pool, &pool_path).map_err(|e| e.to_string())?;

    let mut violations = 0;
    let mut segments = 0;
    for line in read_lines(&sft_path)? {
        let mask = line["mask"].as_array().ok_or("mask")?;
        let segs = line["segments"].as_array().ok_or("segments")?;
        violations += mask.len().abs_diff(segs.len());
        for (m, s) in mask.iter().zip(segs) {
            segments += 1;
            let supervised = m.as_u64() == Some(1);
            let model = s["kind"] == "model";
            if supervised != model || (s["kind"] != "model" && s["kind"] != "tool") {
                violations += 1;
            }
        }
    }
    ensure(violations == 0, || format!("{violations} mask violations"))?;
    let allowed: BTreeSet<&str> = ["version", "item_id", "video_id", "question"].into();
    for line in read_lines(&pool_path)? {
        let obj = line.as_object().ok_or("rl_pool line")?;
        let extra: Vec<&String> = obj.keys().filter(|k| !allowed.contains(k.as_str())).collect();
        ensure(extra.is_empty(), || format!("rl_pool carries {extra:?}"))?;
        let q = obj["question"].as_object().ok_or("question")?;
        ensure(["steps", "segments", "mask", "tool_result"].iter().all(|k| !q.contains_key(*k)), || "question carries trajectory data".into())?;
    }
    Ok(format!(
        "discarded {}, kept {}, sft {}, rl_pool {}; 0 mask violations over {segments} segments",
        got_discarded.len(),
        got_kept.len(),
        got_sft.len(),
        got_pool.len()
    ))
}

fn read_lines(path: &Path) -> Result<Vec<Value>, String> {
    std::fs::read_to_string(path)
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

// ---------------------------------------------------------------------------
// 8. Determinism

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/w1.json")
}

fn c8_determinism() -> Outcome {
    let w = world(100, 8);
    let provider = mixed_provider(&w.set.tasks);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for parallelism in [1, 8] {
        let path = dir.path().join(format!("p{parallelism}.jsonl"));
        write_jsonl(&run(&w, &w.toolkit, &provider, parallelism), &path).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], || "trajectory JSONL differs between parallelism 1 and 8".into())?;

    let gen = || -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_weaver"))
            .args(["gen-world", "--seed", "7"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        Ok(out.stdout)
    };
    let (a, b) = (gen()?, gen()?);
    let fixture = std::fs::read(fixture_path()).map_err(|e| e.to_string())?;
    ensure(a == b, || "gen-world output differs between runs".into())?;
    ensure(a == fixture, || "gen-world output differs from the W1 fixture".into())?;
    Ok(format!("{} bytes of trajectories identical; W1 identical to fixture ({} bytes)", files[0].len(), a.len()))
}

// ---------------------------------------------------------------------------
// 9. Report recount

/// Rebuilds a report from the raw JSON lines of a trajectory file.
fn fold(lines: &[Value]) -> Result<EvalReport, String> {
    let mut r = EvalReport::default();
    for t in lines {
        let correct = t["reward"]["r_corr"].as_u64() == Some(1);
        r.n_tasks += 1;
        r.n_correct += correct as usize;
        for step in t["steps"].as_array().ok_or("steps")? {
            if let Some(name) = step["tool_result"]["tool_name"].as_str() {
                r.n_tool_calls += 1;
                *r.per_tool_count.entry(name.to_string()).or_default() += 1;
            }
        }
        let stop = t["stop_reason"].as_str().ok_or("stop_reason")?;
        *r.stop_reasons.entry(stop.to_string()).or_default() += 1;
        let template = t["template"].as_str().unwrap_or("none").to_string();
        let ts: &mut TemplateStats = r.per_template.entry(template).or_default();
        ts.n_tasks += 1;
        ts.n_correct += correct as usize;
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    r.accuracy = div(r.n_correct, r.n_tasks);
    r.mean_tool_calls = div(r.n_tool_calls, r.n_tasks);
    r.per_tool_fraction = r.per_tool_count.iter().map(|(k, &v)| (k.clone(), div(v, r.n_tool_calls))).collect();
    for ts in r.per_template.values_mut() {
        ts.accuracy = div(ts.n_correct, ts.n_tasks);
    }
    Ok(r)
}

fn c9_recount() -> Outcome {
    let w = world(120, 9);
    let provider = mixed_provider(&w.set.tasks);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("trajectories.jsonl");
    let (report, trajs) = run_benchmark(
        &w.set.tasks,
        w.backend.as_ref(),
        &provider,
        &w.toolkit,
        &RolloutConfig::default(),
        4,
        Some(&path),
    )
    .map_err(|e| e.to_string())?;
    observe(&trajs);
    let folded = fold(&read_lines(&path)?)?;
    ensure(folded == report, || format!("report {report:?}\nfold {folded:?}"))?;

    // The same through the binary: report.json against trajectories.jsonl.
    let data = dir.path().join("set");
    let bin = env!("CARGO_BIN_EXE_weaver");
    let status = Command::new(bin)
        .args(["gen-world", "--seed", "19", "--n-tasks", "40", "--out"])
        .arg(&data)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || "gen-world failed".into())?;
    let eval_dir = dir.path().join("eval");
    let out = Command::new(bin)
        .args(["eval", "--policy", "scripted:no-tools", "--parallelism", "3", "--tasks"])
        .arg(data.join("tasks.jsonl"))
        .arg("--world")
        .arg(data.join("worlds.json"))
        .arg("--out")
        .arg(&eval_dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let cli_report: EvalReport = serde_json::from_str(
        &std::fs::read_to_string(eval_dir.join("report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let cli_fold = fold(&read_lines(&eval_dir.join("trajectories.jsonl"))?)?;
    ensure(cli_fold == cli_report, || format!("cli report {cli_report:?}\nfold {cli_fold:?}"))?;
    Ok(format!(
        "in-process report over {} trajectories and CLI report over {} match their folds exactly",
        report.n_tasks, cli_report.n_tasks
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "reward table exactness", c1_reward_table),
        (2, "protocol round trip", c2_protocol),
        (3, "oracle end to end", c3_oracle),
        (4, "ablation direction", c4_ablation),
        (5, "group advantages", c5_advantages),
        (7, "datapipe conservation", c7_datapipe),
        (8, "determinism", c8_determinism),
        (9, "report recount", c9_recount),
        // Last, so its context bound covers every episode above.
        (6, "rollout limits", c6_limits),
    ];
    let mut results: BTreeMap<usize, (&str, Outcome)> = BTreeMap::new();
    for (n, name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        results.insert(n, (name, outcome));
    }
    let mut failed = 0;
    for (n, (name, outcome)) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
