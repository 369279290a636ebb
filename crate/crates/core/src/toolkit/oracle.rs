//! Exact tool implementations over synthetic ground truth.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{clip_over, merge_spans, note, one_fps_grid, Invocation, ToolBackend, ToolConfig};
use super::{ToolName, ToolResult, ToolStatus};
use crate::history::{bbox_area, FrameBoxes, LabeledBox, Span, VideoCatalog, VideoMeta};
use crate::protocol::format_span;
use crate::synthworld::SyntheticVideo;

fn not_found(tool: ToolName, fields: &[(&str, &str)]) -> ToolResult {
    ToolResult::failure(tool.as_str(), ToolStatus::NotFound, note(fields))
}

pub fn temporal_grounding(
    video: &SyntheticVideo,
    query: &str,
    span: Span,
    config: &ToolConfig,
) -> ToolResult {
    let tool = ToolName::TemporalGrounding;
    let hit = video
        .events_matching(query)
        .filter_map(|e| e.span().intersect(&span))
        .min_by(|a, b| a.start_s.total_cmp(&b.start_s));
    match hit {
        Some(found) => {
            let clip = clip_over(video.video_id(), &[found], vec![], config.max_tool_frames)
                .expect("one span");
            ToolResult::ok(
                tool,
                clip,
                note(&[("query", query), ("span", &format_span(&found))]),
            )
        }
        None => not_found(tool, &[("query", query), ("error", "no matching event")]),
    }
}

/// Grid frame nearest to `t`; ties go to the earlier frame.
fn nearest_frame(grid: &[f64], t: f64) -> Option<f64> {
    grid.iter()
        .copied()
        .min_by(|a, b| (a - t).abs().total_cmp(&(b - t).abs()))
}

fn boxes_at(video: &SyntheticVideo, labels: &[String], t: f64, with_ids: bool) -> Vec<LabeledBox> {
    let mut out = Vec::new();
    for label in labels {
        for track in video.tracks.iter().filter(|tr| tr.matches(label)) {
            if let Some(b) = track.box_at(t) {
                out.push(LabeledBox {
                    label: track.object_label.clone(),
                    instance_id: with_ids.then_some(track.instance_id),
                    bbox: *b,
                });
            }
        }
    }
    out
}

pub fn frame_selection(
    video: &SyntheticVideo,
    query: &str,
    span: Span,
    config: &ToolConfig,
) -> ToolResult {
    let tool = ToolName::FrameSelection;
    let grid = one_fps_grid(&span);
    let mut scores = vec![0.0f64; grid.len()];
    let events: Vec<_> = video.events_matching(query).collect();
    let is_event_query = !events.is_empty();
    if is_event_query {
        for e in events {
            let mid = 0.5 * (e.start_s + e.end_s);
            if mid < span.start_s || mid >= span.end_s {
                continue;
            }
            if let Some(t) = nearest_frame(&grid, mid) {
                let i = grid.iter().position(|&g| g == t).expect("frame on grid");
                scores[i] = 1.0;
            }
        }
    } else {
        let label = [query.to_string()];
        for (i, &t) in grid.iter().enumerate() {
            scores[i] = boxes_at(video, &label, t, false)
                .iter()
                .map(|b| bbox_area(&b.bbox))
                .fold(0.0, f64::max);
        }
    }
    // First maximum wins ties.
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let Some((i, _)) = best else {
        return not_found(tool, &[("query", query), ("error", "no matching frame")]);
    };
    let t = grid[i];
    let frame_span = Span::new(t, (t + 1.0).min(span.end_s));
    let boxes = if is_event_query {
        vec![]
    } else {
        vec![FrameBoxes {
            t,
            boxes: boxes_at(video, &[query.to_string()], t, false),
        }]
    };
    let clip = clip_over(video.video_id(), &[frame_span], boxes, config.max_tool_frames)
        .expect("one span");
    ToolResult::ok(
        tool,
        clip,
        note(&[("query", query), ("frame", &format!("{t:.2}"))]),
    )
}

pub fn temporal_count(
    video: &SyntheticVideo,
    query: &str,
    span: Span,
    config: &ToolConfig,
) -> ToolResult {
    let tool = ToolName::TemporalCount;
    let hits: Vec<Span> = video
        .events_matching(query)
        .filter_map(|e| e.span().intersect(&span))
        .collect();
    let merged = merge_spans(hits, config.merge_gap_s);
    if merged.is_empty() {
        return not_found(tool, &[("query", query), ("error", "no matching event")]);
    }
    let listed: Vec<String> = merged.iter().map(format_span).collect();
    let clip = clip_over(video.video_id(), &merged, vec![], config.max_tool_frames)
        .expect("nonempty spans");
    ToolResult::ok(
        tool,
        clip,
        note(&[
            ("query", query),
            ("count", &merged.len().to_string()),
            ("spans", &listed.join(",")),
        ]),
    )
}

pub fn trim(video: &SyntheticVideo, span: Span, config: &ToolConfig) -> ToolResult {
    let clamped = span.clamp_to(&video.meta.full_span());
    if clamped.is_empty() {
        return ToolResult::invalid_args(ToolName::Trim.as_str(), "empty span after clamping");
    }
    let clip = clip_over(video.video_id(), &[clamped], vec![], config.max_tool_frames)
        .expect("one span");
    ToolResult::ok(ToolName::Trim, clip, note(&[("span", &format_span(&clamped))]))
}

fn spatial(
    tool: ToolName,
    video: &SyntheticVideo,
    objects: &[String],
    span: Span,
    config: &ToolConfig,
    with_ids: bool,
) -> ToolResult {
    let grid = one_fps_grid(&span);
    let (found, missing): (Vec<&String>, Vec<&String>) = objects.iter().partition(|label| {
        video
            .tracks
            .iter()
            .filter(|tr| tr.matches(label))
            .any(|tr| grid.iter().any(|&t| tr.box_at(t).is_some()))
    });
    let join = |v: &[&String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",");
    if found.is_empty() {
        return not_found(
            tool,
            &[("missing", &join(&missing)), ("error", "no listed object in span")],
        );
    }
    let labels: Vec<String> = found.iter().map(|s| s.to_string()).collect();
    let boxes: Vec<FrameBoxes> = grid
        .iter()
        .map(|&t| FrameBoxes {
            t,
            boxes: boxes_at(video, &labels, t, with_ids),
        })
        .collect();
    let clip = clip_over(video.video_id(), &[span], boxes, config.max_tool_frames)
        .expect("one span");
    let mut fields = vec![("found", join(&found))];
    if !missing.is_empty() {
        fields.push(("missing", join(&missing)));
    }
    if with_ids {
        let mut ids: Vec<String> = video
            .tracks
            .iter()
            .filter(|tr| found.iter().any(|l| tr.matches(l)))
            .filter(|tr| grid.iter().any(|&t| tr.box_at(t).is_some()))
            .map(|tr| format!("{}#{}", tr.object_label, tr.instance_id))
            .collect();
        ids.dedup();
        fields.push(("instances", ids.join(",")));
    }
    let borrowed: Vec<(&str, &str)> = fields.iter().map(|(k, v)| (*k, v.as_str())).collect();
    ToolResult::ok(tool, clip, note(&borrowed))
}

pub fn spatial_tracking(
    video: &SyntheticVideo,
    objects: &[String],
    span: Span,
    config: &ToolConfig,
) -> ToolResult {
    spatial(ToolName::SpatialTracking, video, objects, span, config, true)
}

pub fn spatial_grounding(
    video: &SyntheticVideo,
    objects: &[String],
    span: Span,
    config: &ToolConfig,
) -> ToolResult {
    spatial(ToolName::SpatialGrounding, video, objects, span, config, false)
}

pub fn run(video: &SyntheticVideo, invocation: &Invocation, config: &ToolConfig) -> ToolResult {
    match invocation {
        Invocation::TemporalGrounding { query, span } => {
            temporal_grounding(video, query, *span, config)
        }
        Invocation::FrameSelection { query, span } => frame_selection(video, query, *span, config),
        Invocation::TemporalCount { query, span } => temporal_count(video, query, *span, config),
        Invocation::Trim { span } => trim(video, *span, config),
        Invocation::SpatialTracking { objects, span } => {
            spatial_tracking(video, objects, *span, config)
        }
        Invocation::SpatialGrounding { objects, span } => {
            spatial_grounding(video, objects, *span, config)
        }
    }
}

/// Oracle tools over a corpus of synthetic worlds, keyed by video id.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    worlds: BTreeMap<String, Arc<SyntheticVideo>>,
}

impl OracleBackend {
    pub fn new(worlds: impl IntoIterator<Item = SyntheticVideo>) -> Self {
        Self {
            worlds: worlds
                .into_iter()
                .map(|w| (w.video_id().to_string(), Arc::new(w)))
                .collect(),
        }
    }

    pub fn world(&self, video_id: &str) -> Option<&SyntheticVideo> {
        self.worlds.get(video_id).map(Arc::as_ref)
    }

    pub fn worlds(&self) -> impl Iterator<Item = &SyntheticVideo> {
        self.worlds.values().map(Arc::as_ref)
    }
}

impl VideoCatalog for OracleBackend {
    fn video_meta(&self, video_id: &str) -> Option<VideoMeta> {
        self.world(video_id).map(|w| w.meta.clone())
    }
}

impl ToolBackend for OracleBackend {
    fn execute(&self, video: &VideoMeta, invocation: &Invocation, config: &ToolConfig) -> ToolResult {
        match self.world(&video.video_id) {
            Some(world) => run(world, invocation, config),
            None => ToolResult::failure(
                invocation.tool().as_str(),
                ToolStatus::NotFound,
                note(&[("error", "unknown video")]),
            ),
        }
    }
}
