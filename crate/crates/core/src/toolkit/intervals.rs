use crate::history::Span;

/// Frame times `start + k` for every `k` with `start + k < end`.
pub fn one_fps_grid(span: &Span) -> Vec<f64> {
    let n = (span.len() - 1e-9).ceil().max(0.0) as usize;
    (0..n).map(|k| span.start_s + k as f64).collect()
}

/// Keeps at most `max` frames, picking indices `floor((j + 0.5) * n / max)`.
pub fn cap_uniform(times: Vec<f64>, max: usize) -> Vec<f64> {
    let n = times.len();
    if n <= max || max == 0 {
        return times;
    }
    (0..max)
        .map(|j| times[((j as f64 + 0.5) * n as f64 / max as f64).floor() as usize])
        .collect()
}

/// Sorts spans and merges any pair whose gap is at most `max_gap` seconds.
pub fn merge_spans(mut spans: Vec<Span>, max_gap: f64) -> Vec<Span> {
    spans.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start_s - last.end_s <= max_gap => {
                last.end_s = last.end_s.max(s.end_s);
            }
            _ => out.push(s),
        }
    }
    out
}
