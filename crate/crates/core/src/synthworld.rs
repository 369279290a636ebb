//! Deterministic synthetic video worlds.
//!
//! A world has no pixels. It is an event timeline plus per-second object
//! boxes, enough ground truth for every tool to be computed exactly and
//! for every generated question to have a single checkable answer.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{option_letter, BBox, Question, Span, VideoMeta};
use crate::protocol::{format_span, normalize_text};
use crate::seed::mix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible world spec: {0}")]
    Infeasible(String),
    #[error("template not satisfiable in {video_id}: {reason}")]
    Unsatisfiable { video_id: String, reason: String },
    #[error("world serialization: {0}")]
    Serde(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpan {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl EventSpan {
    pub fn new(label: &str, start_s: f64, end_s: f64) -> Self {
        Self {
            label: label.to_string(),
            start_s,
            end_s,
        }
    }

    pub fn span(&self) -> Span {
        Span::new(self.start_s, self.end_s)
    }

    pub fn matches(&self, query: &str) -> bool {
        normalize_text(&self.label) == normalize_text(query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One object instance, boxed once per second while it is on screen.
/// Keyframe `t` covers `[t, t + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub object_label: String,
    pub instance_id: u32,
    pub boxes: Vec<Keyframe>,
}

impl ObjectTrack {
    pub fn box_at(&self, t: f64) -> Option<&BBox> {
        let idx = self.boxes.partition_point(|k| k.t <= t + 1e-9);
        let kf = self.boxes.get(idx.checked_sub(1)?)?;
        (t < kf.t + 1.0 - 1e-9).then_some(&kf.bbox)
    }

    pub fn matches(&self, label: &str) -> bool {
        normalize_text(&self.object_label) == normalize_text(label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub meta: VideoMeta,
    pub events: Vec<EventSpan>,
    pub tracks: Vec<ObjectTrack>,
    pub seed: u64,
}

impl SyntheticVideo {
    pub fn video_id(&self) -> &str {
        &self.meta.video_id
    }

    /// Pretty JSON document, newline-terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("world serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        serde_json::from_str(text).map_err(|e| WorldError::Serde(e.to_string()))
    }

    pub fn events_matching<'a>(&'a self, query: &'a str) -> impl Iterator<Item = &'a EventSpan> {
        self.events.iter().filter(move |e| e.matches(query))
    }

    /// Distinct object labels with a box at time `t`.
    pub fn labels_at(&self, t: f64) -> BTreeSet<String> {
        self.tracks
            .iter()
            .filter(|tr| tr.box_at(t).is_some())
            .map(|tr| tr.object_label.clone())
            .collect()
    }

    pub fn object_labels(&self) -> BTreeSet<String> {
        self.tracks.iter().map(|t| t.object_label.clone()).collect()
    }
}

/// Ambient objects that wander through a world independent of events.
pub const AMBIENT_OBJECTS: [&str; 6] = ["chair", "ball", "cup", "lamp", "bicycle", "plant"];

pub const DEFAULT_EVENT_VOCAB: [&str; 7] = [
    "man opens door",
    "dog enters",
    "phone rings",
    "woman sits down",
    "bird lands",
    "baby cries",
    "cat jumps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub duration_s: f64,
    pub n_events: usize,
    pub n_objects: usize,
    pub label_vocab: Vec<String>,
    /// When nonempty, used verbatim as the event table.
    #[serde(default)]
    pub pinned_events: Vec<EventSpan>,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
}

impl WorldSpec {
    pub fn random(duration_s: f64, n_events: usize, n_objects: usize) -> Self {
        Self {
            duration_s,
            n_events,
            n_objects,
            label_vocab: DEFAULT_EVENT_VOCAB.iter().map(|s| s.to_string()).collect(),
            pinned_events: Vec::new(),
            fps: 30.0,
            width: 640,
            height: 360,
        }
    }

    /// The canonical fixture spec: a 120 s world with a pinned four-event table.
    pub fn canonical() -> Self {
        let pinned_events = vec![
            EventSpan::new("man opens door", 10.0, 14.0),
            EventSpan::new("dog enters", 30.0, 33.0),
            EventSpan::new("dog enters", 70.0, 74.0),
            EventSpan::new("phone rings", 90.0, 95.0),
        ];
        Self {
            duration_s: 120.0,
            n_events: pinned_events.len(),
            n_objects: 2,
            label_vocab: vec![
                "man opens door".into(),
                "dog enters".into(),
                "phone rings".into(),
            ],
            pinned_events,
            fps: 30.0,
            width: 640,
            height: 360,
        }
    }

    fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidSpec(m.to_string()));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if self.n_events == 0 {
            return bad("n_events must be positive");
        }
        if self.label_vocab.is_empty() || self.label_vocab.iter().any(|l| l.trim().is_empty()) {
            return bad("label_vocab must be nonempty");
        }
        if !(self.fps > 0.0) || self.width == 0 || self.height == 0 {
            return bad("fps and frame size must be positive");
        }
        if !self.pinned_events.is_empty() {
            if self.pinned_events.len() != self.n_events {
                return bad("n_events disagrees with pinned_events");
            }
            for e in &self.pinned_events {
                if !(0.0 <= e.start_s && e.start_s < e.end_s && e.end_s <= self.duration_s) {
                    return Err(WorldError::Infeasible(format!(
                        "event {:?} outside [0, {}]",
                        e.label, self.duration_s
                    )));
                }
            }
        }
        Ok(())
    }
}

const MIN_EVENT_S: u32 = 2;
const MAX_EVENT_S: u32 = 5;

/// Generates a world as a pure function of `(seed, spec)`.
pub fn generate(seed: u64, spec: &WorldSpec) -> Result<SyntheticVideo, WorldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = VideoMeta {
        video_id: format!("world-{seed}"),
        duration_s: spec.duration_s,
        fps: spec.fps,
        width: spec.width,
        height: spec.height,
    };

    let events = if spec.pinned_events.is_empty() {
        place_events(&mut rng, spec)?
    } else {
        spec.pinned_events.clone()
    };

    let mut tracks: Vec<ObjectTrack> = Vec::new();
    let next_id = |label: &str, tracks: &[ObjectTrack]| {
        tracks.iter().filter(|t| t.object_label == label).count() as u32 + 1
    };
    for event in &events {
        let label = actor_of(&event.label);
        let id = next_id(&label, &tracks);
        let boxes = animate_boxes(&mut rng, spec, event.span());
        tracks.push(ObjectTrack {
            object_label: label,
            instance_id: id,
            boxes,
        });
    }
    let dur = spec.duration_s.floor() as u32;
    for i in 0..spec.n_objects {
        let label = AMBIENT_OBJECTS[i % AMBIENT_OBJECTS.len()].to_string();
        let len = rng.gen_range(5..=30).min(dur.max(1));
        let start = rng.gen_range(0..=dur.saturating_sub(len));
        let span = Span::new(start as f64, (start + len) as f64);
        let id = next_id(&label, &tracks);
        let boxes = animate_boxes(&mut rng, spec, span);
        tracks.push(ObjectTrack {
            object_label: label,
            instance_id: id,
            boxes,
        });
    }

    Ok(SyntheticVideo {
        meta,
        events,
        tracks,
        seed,
    })
}

/// Disjoint integer-aligned events separated by at least one second.
fn place_events(rng: &mut ChaCha8Rng, spec: &WorldSpec) -> Result<Vec<EventSpan>, WorldError> {
    let n = spec.n_events as u32;
    let lens: Vec<u32> = (0..n)
        .map(|_| rng.gen_range(MIN_EVENT_S..=MAX_EVENT_S))
        .collect();
    let used: u32 = lens.iter().sum::<u32>() + n.saturating_sub(1);
    let room = spec.duration_s.floor() as u32;
    if used > room {
        return Err(WorldError::Infeasible(format!(
            "{n} events need {used} s, video has {room} s"
        )));
    }
    let slack = room - used;
    let mut cuts: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut events = Vec::with_capacity(n as usize);
    let mut cursor = 0u32;
    let mut prev_cut = 0u32;
    for (i, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut;
        prev_cut = cut;
        let label = spec.label_vocab[rng.gen_range(0..spec.label_vocab.len())].clone();
        events.push(EventSpan::new(
            &label,
            cursor as f64,
            (cursor + len) as f64,
        ));
        cursor += len + if i + 1 < n as usize { 1 } else { 0 };
    }
    Ok(events)
}

fn animate_boxes(rng: &mut ChaCha8Rng, spec: &WorldSpec, span: Span) -> Vec<Keyframe> {
    let (fw, fh) = (spec.width as i64, spec.height as i64);
    let w0 = rng.gen_range(60..=200i64).min(fw);
    let h0 = rng.gen_range(50..=160i64).min(fh);
    let x0 = rng.gen_range(0..=fw - w0);
    let y0 = rng.gen_range(0..=fh - h0);
    let vx = rng.gen_range(-15..=15i64);
    let vy = rng.gen_range(-15..=15i64);
    let grow = rng.gen_range(-8..=8i64);
    let n = (span.len() - 1e-9).ceil().max(1.0) as i64;
    (0..n)
        .map(|k| {
            let w = (w0 + grow * k).clamp(20, fw);
            let h = (h0 + grow * k).clamp(20, fh);
            let x = (x0 + vx * k).clamp(0, fw - w);
            let y = (y0 + vy * k).clamp(0, fh - h);
            Keyframe {
                t: span.start_s + k as f64,
                bbox: [x as f64, y as f64, (x + w) as f64, (y + h) as f64],
            }
        })
        .collect()
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// The acting object of an event label: its first non-article word.
pub fn actor_of(label: &str) -> String {
    normalize_text(label)
        .split(' ')
        .find(|w| !ARTICLES.contains(w))
        .unwrap_or_default()
        .to_string()
}

fn verb_base(verb: &str) -> String {
    if let Some(stem) = verb.strip_suffix("ies") {
        format!("{stem}y")
    } else if ["sses", "shes", "ches", "xes"].iter().any(|s| verb.ends_with(s)) {
        verb[..verb.len() - 2].to_string()
    } else if verb.len() > 2 && verb.ends_with('s') && !verb.ends_with("ss") {
        verb[..verb.len() - 1].to_string()
    } else {
        verb.to_string()
    }
}

/// "dog enters" becomes "the dog enter" for use after "does".
fn does_clause(label: &str) -> String {
    let norm = normalize_text(label);
    let words: Vec<&str> = norm.split(' ').filter(|w| !ARTICLES.contains(w)).collect();
    match words.as_slice() {
        [] => norm.clone(),
        [actor] => format!("the {actor} appear"),
        [actor, verb, rest @ ..] => {
            let mut out = format!("the {actor} {}", verb_base(verb));
            for w in rest {
                out.push(' ');
                out.push_str(w);
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    CountEvent,
    OrderEvents,
    ObjectAtTime,
    SpanOfEvent,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::CountEvent,
        TemplateKind::SpanOfEvent,
        TemplateKind::OrderEvents,
        TemplateKind::ObjectAtTime,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateKind::CountEvent => "count_event",
            TemplateKind::OrderEvents => "order_events",
            TemplateKind::ObjectAtTime => "object_at_time",
            TemplateKind::SpanOfEvent => "span_of_event",
        }
    }

    /// Templates answered through the temporal tool family.
    pub fn is_temporal(&self) -> bool {
        !matches!(self, TemplateKind::ObjectAtTime)
    }
}

impl std::fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A question template with its parameters bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskTemplate {
    CountEvent { label: String },
    OrderEvents { labels: Vec<String> },
    ObjectAtTime { time_s: f64 },
    SpanOfEvent { label: String },
}

impl TaskTemplate {
    pub fn kind(&self) -> TemplateKind {
        match self {
            TaskTemplate::CountEvent { .. } => TemplateKind::CountEvent,
            TaskTemplate::OrderEvents { .. } => TemplateKind::OrderEvents,
            TaskTemplate::ObjectAtTime { .. } => TemplateKind::ObjectAtTime,
            TaskTemplate::SpanOfEvent { .. } => TemplateKind::SpanOfEvent,
        }
    }
}

/// A question bound to a video, plus the template that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TaskTemplate>,
    pub question: Question,
}

/// Label used between events in an ordering option.
pub const ORDER_SEPARATOR: &str = " -> ";

/// Picks template parameters with `rng_seed` and builds the task.
pub fn make_task(
    video: &SyntheticVideo,
    kind: TemplateKind,
    rng_seed: u64,
) -> Result<Task, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(rng_seed, 0));
    let unsat = |reason: &str| WorldError::Unsatisfiable {
        video_id: video.video_id().to_string(),
        reason: reason.to_string(),
    };
    let distinct: Vec<String> = first_occurrences(video)
        .into_iter()
        .map(|e| e.label.clone())
        .collect();
    let template = match kind {
        TemplateKind::CountEvent => TaskTemplate::CountEvent {
            label: distinct
                .choose(&mut rng)
                .ok_or_else(|| unsat("no events"))?
                .clone(),
        },
        TemplateKind::SpanOfEvent => {
            let unique: Vec<&String> = distinct
                .iter()
                .filter(|l| video.events_matching(l).count() == 1)
                .collect();
            TaskTemplate::SpanOfEvent {
                label: (*unique
                    .choose(&mut rng)
                    .ok_or_else(|| unsat("no event occurs exactly once"))?)
                .clone(),
            }
        }
        TemplateKind::OrderEvents => {
            if distinct.len() < 3 {
                return Err(unsat("fewer than three distinct events"));
            }
            let mut labels: Vec<String> = distinct.choose_multiple(&mut rng, 3).cloned().collect();
            labels.sort();
            TaskTemplate::OrderEvents { labels }
        }
        TemplateKind::ObjectAtTime => {
            let dur = video.meta.duration_s.floor() as u32;
            let times: Vec<u32> = (0..dur)
                .filter(|&t| !video.labels_at(t as f64).is_empty())
                .collect();
            let t = *times
                .choose(&mut rng)
                .ok_or_else(|| unsat("no object is ever visible"))?;
            TaskTemplate::ObjectAtTime { time_s: t as f64 }
        }
    };
    make_task_with(video, template, rng_seed)
}

/// Builds a multiple-choice task for an explicit template.
pub fn make_task_with(
    video: &SyntheticVideo,
    template: TaskTemplate,
    rng_seed: u64,
) -> Result<Task, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(rng_seed, 1));
    let unsat = |reason: String| WorldError::Unsatisfiable {
        video_id: video.video_id().to_string(),
        reason,
    };
    let (text, options, gold_index) = match &template {
        TaskTemplate::CountEvent { label } => {
            let count = video.events_matching(label).count();
            if count == 0 {
                return Err(unsat(format!("no event {label:?}")));
            }
            let first = count.saturating_sub(1).max(1);
            let options: Vec<String> = (first..first + 4).map(|c| c.to_string()).collect();
            (
                format!("How many times does {}?", does_clause(label)),
                options,
                count - first,
            )
        }
        TaskTemplate::SpanOfEvent { label } => {
            let matches: Vec<&EventSpan> = video.events_matching(label).collect();
            if matches.len() != 1 {
                return Err(unsat(format!(
                    "{label:?} occurs {} times, need exactly one",
                    matches.len()
                )));
            }
            let gold = format_span(&matches[0].span());
            let mut pool: BTreeSet<String> = video
                .events
                .iter()
                .map(|e| format_span(&e.span()))
                .collect();
            let len = matches[0].span().len();
            for shift in [5.0, 10.0, 15.0, 20.0, -5.0, -10.0, -15.0, -20.0] {
                let s = matches[0].start_s + shift;
                if s >= 0.0 && s + len <= video.meta.duration_s {
                    pool.insert(format_span(&Span::new(s, s + len)));
                }
            }
            pool.remove(&gold);
            let distractors: Vec<String> = pool.into_iter().collect();
            if distractors.len() < 3 {
                return Err(unsat("not enough distractor spans".into()));
            }
            let mut options: Vec<String> =
                distractors.choose_multiple(&mut rng, 3).cloned().collect();
            options.push(gold.clone());
            options.shuffle(&mut rng);
            let gold_index = options.iter().position(|o| *o == gold).unwrap();
            (
                format!("During which time span (in seconds) does {}?", does_clause(label)),
                options,
                gold_index,
            )
        }
        TaskTemplate::OrderEvents { labels } => {
            if labels.len() != 3 {
                return Err(unsat("order_events needs exactly three labels".into()));
            }
            let mut firsts = Vec::new();
            for label in labels {
                let first = video
                    .events_matching(label)
                    .map(|e| e.start_s)
                    .fold(f64::INFINITY, f64::min);
                if !first.is_finite() {
                    return Err(unsat(format!("no event {label:?}")));
                }
                firsts.push((first, label.clone()));
            }
            firsts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if firsts.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(unsat("events start simultaneously".into()));
            }
            let gold_order: Vec<String> = firsts.into_iter().map(|(_, l)| l).collect();
            let gold = gold_order.join(ORDER_SEPARATOR);
            let others: Vec<String> = permutations3(&gold_order)
                .into_iter()
                .map(|p| p.join(ORDER_SEPARATOR))
                .filter(|p| *p != gold)
                .collect();
            let mut options: Vec<String> = others.choose_multiple(&mut rng, 3).cloned().collect();
            options.push(gold.clone());
            options.shuffle(&mut rng);
            let gold_index = options.iter().position(|o| *o == gold).unwrap();
            let listed: Vec<String> = labels.iter().map(|l| format!("\"{l}\"")).collect();
            (
                format!(
                    "In which order do these events first happen: {}?",
                    listed.join(", ")
                ),
                options,
                gold_index,
            )
        }
        TaskTemplate::ObjectAtTime { time_s } => {
            let present = video.labels_at(*time_s);
            let present: Vec<String> = present.into_iter().collect();
            let target = present
                .choose(&mut rng)
                .ok_or_else(|| unsat(format!("nothing visible at {time_s} s")))?
                .clone();
            let mut pool: BTreeSet<String> = video.object_labels();
            pool.extend(AMBIENT_OBJECTS.iter().map(|s| s.to_string()));
            pool.extend(DEFAULT_EVENT_VOCAB.iter().map(|l| actor_of(l)));
            for p in &present {
                pool.remove(p);
            }
            let absent: Vec<String> = pool.into_iter().collect();
            if absent.len() < 3 {
                return Err(unsat("not enough absent objects".into()));
            }
            let mut options: Vec<String> = absent.choose_multiple(&mut rng, 3).cloned().collect();
            options.push(target.clone());
            options.shuffle(&mut rng);
            let gold_index = options.iter().position(|o| *o == target).unwrap();
            (
                format!("Which of these objects is visible at {time_s:.1} s?"),
                options,
                gold_index,
            )
        }
    };
    let question = Question::multiple_choice(text, options, option_letter(gold_index));
    Ok(Task {
        task_id: format!("{}/{}/{rng_seed}", video.video_id(), template.kind()),
        video_id: video.video_id().to_string(),
        template: Some(template),
        question,
    })
}

/// First occurrence of each distinct label, in time order.
fn first_occurrences(video: &SyntheticVideo) -> Vec<&EventSpan> {
    let mut seen = BTreeSet::new();
    let mut events: Vec<&EventSpan> = video.events.iter().collect();
    events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    events
        .into_iter()
        .filter(|e| seen.insert(normalize_text(&e.label)))
        .collect()
}

fn permutations3(items: &[String]) -> Vec<[String; 3]> {
    const ORDERS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    ORDERS
        .iter()
        .map(|o| o.map(|i| items[i].clone()))
        .collect()
}

/// Worlds plus tasks generated together.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub worlds: Vec<SyntheticVideo>,
    pub tasks: Vec<Task>,
}

/// `n_tasks` tasks cycling through all templates over a family of worlds
/// seeded from `seed`. The canonical fixture world is always included.
pub fn generate_task_set(n_tasks: usize, seed: u64) -> Result<TaskSet, WorldError> {
    let n_worlds = n_tasks.div_ceil(8).max(1);
    let mut worlds = vec![generate(7, &WorldSpec::canonical())?];
    let durations = [90.0, 120.0, 150.0, 180.0];
    for w in 1..n_worlds {
        let world_seed = mix(seed, w as u64);
        let spec = WorldSpec::random(durations[(world_seed % 4) as usize], 6, 3);
        worlds.push(generate(world_seed, &spec)?);
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let kind = TemplateKind::ALL[i % TemplateKind::ALL.len()];
        let rng_seed = mix(seed, 1_000_000 + i as u64);
        let start = (i / TemplateKind::ALL.len()) % worlds.len();
        let mut last_err = None;
        let mut made = None;
        for offset in 0..worlds.len() {
            match make_task(&worlds[(start + offset) % worlds.len()], kind, rng_seed) {
                Ok(task) => {
                    made = Some(task);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        match made {
            Some(task) => tasks.push(task),
            None => return Err(last_err.expect("at least one world")),
        }
    }
    Ok(TaskSet { worlds, tasks })
}
