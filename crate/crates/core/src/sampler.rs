//! Self-reflective token sampling and the linear-frame baseline.
//!
//! A sampling step scores every live visual token by how strongly the final
//! input token attends to it (head-averaged attention of the last query row)
//! and keeps the top `max(1, floor(f · N))` of them. The first step runs on
//! all segments jointly, so segments that lose every visual token drop out;
//! the survivors are then merged into one sequence which the rest of the
//! stack processes, pruning again at each later scheduled layer.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cosine, Matrix, Scalar};
use crate::model::{forward_layer, Weights};
use crate::segmenter::{
    assemble_sequence, build_batch, sample_frames_linear, Prompts, Provenance, SegmentBatch,
    Sequence, TokenLayout, VideoTokens,
};
use crate::tensor_io::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Regular,
    Smooth,
    Custom,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Regular => "Regular",
            ScheduleMode::Smooth => "Smooth",
            ScheduleMode::Custom => "Custom",
        })
    }
}

/// How visual tokens are scored against the final input token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Head-averaged attention weight of the last query position.
    #[default]
    Attention,
    /// Cosine between each token's hidden state and the last token's.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingStep {
    pub layer: usize,
    /// Fraction of live visual tokens kept, in `(0, 1]`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    pub mode: ScheduleMode,
    pub steps: Vec<SamplingStep>,
}

impl SamplingSchedule {
    pub fn custom(steps: Vec<SamplingStep>) -> Self {
        Self {
            mode: ScheduleMode::Custom,
            steps,
        }
    }

    /// Checks step order and fractions against a stack of `layers` layers.
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("sampling schedule has no steps".into()));
        }
        let mut prev: Option<usize> = None;
        for s in &self.steps {
            check_fraction(s.fraction)?;
            if s.layer >= layers {
                return Err(Error::Config(format!(
                    "sampling layer {} is outside a {layers}-layer stack",
                    s.layer
                )));
            }
            if let Some(p) = prev {
                if s.layer <= p {
                    return Err(Error::Config(format!(
                        "sampling layer {} is not after layer {p}, which has already run",
                        s.layer
                    )));
                }
            }
            prev = Some(s.layer);
        }
        Ok(())
    }

    /// Visual tokens left after every step, starting from `initial`.
    pub fn predicted_visual_count(&self, initial: usize) -> usize {
        self.steps
            .iter()
            .fold(initial, |n, s| retained_count(s.fraction, n))
    }

    pub fn is_identity(&self) -> bool {
        self.steps.iter().all(|s| s.fraction == 1.0)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Config(format!(
            "retention fraction {f} is outside (0, 1]"
        )));
    }
    Ok(())
}

/// `max(1, floor(fraction · live))`, capped at `live`.
///
/// The product gets a `1e-9` allowance so fractions such as `1/3` that are
/// not exactly representable still keep `live / 3` tokens when that divides.
pub fn retained_count(fraction: f64, live: usize) -> usize {
    let k = (fraction * live as f64 + 1e-9).floor() as usize;
    k.clamp(1, live.max(1))
}

/// Regular: one step at layer `r` keeping `1/N_s`. Smooth: `m` consecutive
/// layers from `r`, each keeping `(1/N_s)^(1/m)`. When `r + m` runs past the
/// stack, the step count shrinks to fit and the per-step fraction is
/// recomputed so the product stays `1/N_s`.
pub fn make_schedule(
    mode: ScheduleMode,
    r: usize,
    n_segments: usize,
    smooth_steps: usize,
    layers: usize,
) -> Result<SamplingSchedule> {
    if r >= layers {
        return Err(Error::Config(format!(
            "sampling layer {r} is outside a {layers}-layer stack"
        )));
    }
    if n_segments == 0 {
        return Err(Error::Config("segment count must be at least 1".into()));
    }
    let total = 1.0 / n_segments as f64;
    let steps = match mode {
        ScheduleMode::Regular => vec![SamplingStep {
            layer: r,
            fraction: total,
        }],
        ScheduleMode::Smooth => {
            if smooth_steps == 0 {
                return Err(Error::Config("smooth schedule needs at least one step".into()));
            }
            let m = smooth_steps.min(layers - r);
            if m < smooth_steps {
                log::warn!(
                    "smooth schedule from layer {r} with {smooth_steps} steps exceeds {layers} layers; using {m} steps"
                );
            }
            let f = if n_segments == 1 { 1.0 } else { total.powf(1.0 / m as f64) };
            (r..r + m)
                .map(|layer| SamplingStep { layer, fraction: f })
                .collect()
        }
        ScheduleMode::Custom => {
            return Err(Error::Config(
                "custom schedules are built with SamplingSchedule::custom".into(),
            ))
        }
    };
    Ok(SamplingSchedule { mode, steps })
}

/// Attention weight of the final position on each visual token.
pub fn score_visual_tokens(last_row_weights: &[f64], layout: &TokenLayout) -> Result<Vec<f64>> {
    if last_row_weights.len() != layout.len() {
        return Err(Error::Internal(format!(
            "attention row has {} entries for a sequence of {}",
            last_row_weights.len(),
            layout.len()
        )));
    }
    let (start, end) = layout.visual_span();
    Ok(last_row_weights[start..end].to_vec())
}

/// Cosine of each visual hidden state with the final hidden state. Zero-norm
/// rows score 0.
pub fn cosine_scores<T: Scalar>(hidden: &Matrix<T>, layout: &TokenLayout) -> Result<Vec<f64>> {
    if hidden.rows() != layout.len() {
        return Err(Error::Internal(format!(
            "hidden state has {} rows for a sequence of {}",
            hidden.rows(),
            layout.len()
        )));
    }
    let wide = |i: usize| -> Vec<f64> { hidden.row(i).iter().map(|v| v.widen()).collect() };
    let last = wide(hidden.rows() - 1);
    let (start, end) = layout.visual_span();
    Ok((start..end)
        .map(|i| cosine(&wide(i), &last).unwrap_or(0.0))
        .collect())
}

/// Indices of the `k` largest scores, ties going to the lower index,
/// returned in ascending order.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Usage(format!(
            "cannot select {k} of {} scores",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Usage(format!("score {i} is NaN")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("scores are not NaN")
                .then(a.cmp(&b))
        });
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// What one sampling step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub fraction: f64,
    pub visual_before: usize,
    pub visual_after: usize,
    pub segments_before: usize,
    pub segments_after: usize,
    pub retained: Vec<Provenance>,
}

fn live_segments<'a>(provenance: impl Iterator<Item = &'a Provenance>) -> usize {
    provenance.map(|p| p.segment).collect::<BTreeSet<_>>().len()
}

/// One sampling step over every sequence of `batch` jointly.
///
/// `scores[i]` covers the visual tokens of sequence `i`. System and user rows
/// always survive, visual rows keep their order, and sequences left without
/// visual tokens are removed.
pub fn sample_step<T: Scalar>(
    batch: &SegmentBatch<T>,
    scores: &[Vec<f64>],
    fraction: f64,
) -> Result<(SegmentBatch<T>, StepRecord)> {
    check_fraction(fraction)?;
    if scores.len() != batch.sequences.len() {
        return Err(Error::Internal(format!(
            "{} score vectors for {} sequences",
            scores.len(),
            batch.sequences.len()
        )));
    }
    let mut owner = Vec::new();
    let mut flat = Vec::new();
    for (i, (seq, s)) in batch.sequences.iter().zip(scores).enumerate() {
        if s.len() != seq.layout.n_visual() {
            return Err(Error::Internal(format!(
                "sequence {i} has {} visual tokens but {} scores",
                seq.layout.n_visual(),
                s.len()
            )));
        }
        owner.extend((0..s.len()).map(|j| (i, j)));
        flat.extend_from_slice(s);
    }
    let before = flat.len();
    if before == 0 {
        return Err(Error::Internal("no live visual tokens to sample".into()));
    }
    let k = retained_count(fraction, before);
    let keep = select_top_k(&flat, k)?;

    let mut kept_per_seq: Vec<Vec<usize>> = vec![Vec::new(); batch.sequences.len()];
    for &g in &keep {
        let (i, j) = owner[g];
        kept_per_seq[i].push(j);
    }

    let mut sequences = Vec::new();
    let mut retained = Vec::with_capacity(k);
    for (seq, kept) in batch.sequences.iter().zip(&kept_per_seq) {
        if kept.is_empty() {
            continue;
        }
        let layout = &seq.layout;
        let (start, end) = layout.visual_span();
        let rows: Vec<usize> = (0..start)
            .chain(kept.iter().map(|&j| start + j))
            .chain(end..layout.len())
            .collect();
        let provenance: Vec<Provenance> = kept.iter().map(|&j| layout.provenance[j]).collect();
        retained.extend_from_slice(&provenance);
        sequences.push(Sequence {
            hidden: seq.hidden.select_rows(&rows),
            layout: TokenLayout {
                n_sys: layout.n_sys,
                n_user: layout.n_user,
                provenance,
            },
        });
    }
    let record = StepRecord {
        fraction,
        visual_before: before,
        visual_after: k,
        segments_before: live_segments(
            batch.sequences.iter().flat_map(|s| s.layout.provenance.iter()),
        ),
        segments_after: live_segments(retained.iter()),
        retained,
    };
    Ok((SegmentBatch { sequences }, record))
}

/// Concatenates the visual blocks of `batch` between a shared system and
/// user block. Hidden states are carried over unchanged.
pub fn merge_segments<T: Scalar>(
    batch: &SegmentBatch<T>,
    system_rows: &Matrix<T>,
    user_rows: &Matrix<T>,
) -> Result<Sequence<T>> {
    let mut parts = vec![system_rows.clone()];
    let mut provenance = Vec::new();
    for seq in &batch.sequences {
        let (start, end) = seq.layout.visual_span();
        parts.push(seq.hidden.select_rows(&(start..end).collect::<Vec<_>>()));
        provenance.extend_from_slice(&seq.layout.provenance);
    }
    parts.push(user_rows.clone());
    let refs: Vec<&Matrix<T>> = parts.iter().collect();
    Ok(Sequence {
        hidden: Matrix::vstack(&refs)?,
        layout: TokenLayout {
            n_sys: system_rows.rows(),
            n_user: user_rows.rows(),
            provenance,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// Length of every sequence this layer processed.
    pub lengths: Vec<usize>,
    pub step: Option<StepRecord>,
}

impl LayerTrace {
    pub fn total_length(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    pub fn lengths(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.lengths.clone()).collect()
    }

    /// One line per layer:
    /// `layer=<i> lengths=<n,..> live=<n> [step=<f> visual=<a>-><b> segments=<a>-><b> retained=<s:f:p ...>]`
    /// where `lengths` are the sequences the layer processed and `live` is
    /// the total left after its step.
    pub fn to_text(&self, final_length: usize) -> String {
        let mut out = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            let live = self
                .layers
                .get(i + 1)
                .map_or(final_length, LayerTrace::total_length);
            let lengths: Vec<String> = l.lengths.iter().map(|n| n.to_string()).collect();
            write!(out, "layer={} lengths={} live={}", l.layer, lengths.join(","), live).unwrap();
            if let Some(s) = &l.step {
                let triples: Vec<String> = s
                    .retained
                    .iter()
                    .map(|p| format!("{}:{}:{}", p.segment, p.frame, p.patch))
                    .collect();
                write!(
                    out,
                    " step={:.6} visual={}->{} segments={}->{} retained={}",
                    s.fraction,
                    s.visual_before,
                    s.visual_after,
                    s.segments_before,
                    s.segments_after,
                    triples.join(" ")
                )
                .unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Query-conditioned output of a run: the final sequence with its retained
/// visual tokens, plus the per-layer trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature<T> {
    pub final_hidden: Matrix<T>,
    pub layout: TokenLayout,
    /// Mean of the retained visual final states.
    pub pooled: Vec<T>,
    /// Segment whose system and user blocks frame the merged sequence.
    pub best_segment: usize,
    pub trace: Trace,
}

impl<T: Scalar> Signature<T> {
    fn new(seq: Sequence<T>, best_segment: usize, trace: Trace) -> Self {
        let (start, end) = seq.layout.visual_span();
        let d = seq.hidden.cols();
        let mut acc = vec![0.0f64; d];
        for i in start..end {
            for (a, v) in acc.iter_mut().zip(seq.hidden.row(i)) {
                *a += v.widen();
            }
        }
        let n = (end - start).max(1) as f64;
        let pooled = acc.into_iter().map(|v| T::narrow(v / n)).collect();
        Self {
            final_hidden: seq.hidden,
            layout: seq.layout,
            pooled,
            best_segment,
            trace,
        }
    }

    pub fn retained_count(&self) -> usize {
        self.layout.n_visual()
    }

    /// Retained visual tokens with their final hidden states, in
    /// `(segment, frame, patch)` order.
    pub fn retained(&self) -> impl Iterator<Item = (Provenance, &[T])> + '_ {
        let start = self.layout.n_sys;
        self.layout
            .provenance
            .iter()
            .enumerate()
            .map(move |(j, p)| (*p, self.final_hidden.row(start + j)))
    }

    pub fn last_hidden(&self) -> &[T] {
        self.final_hidden.row(self.final_hidden.rows() - 1)
    }

    pub fn pooled_f64(&self) -> Vec<f64> {
        self.pooled.iter().map(|v| v.widen()).collect()
    }

    /// Retained visual final states as an `N × d` matrix.
    pub fn retained_hidden(&self) -> Matrix<T> {
        let (start, end) = self.layout.visual_span();
        self.final_hidden.select_rows(&(start..end).collect::<Vec<_>>())
    }

    /// Writes `<stem>.pooled.srst`, `<stem>.retained.srst` and
    /// `<stem>.trace.txt` into `dir`.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let pooled: Vec<f32> = self.pooled.iter().map(|v| v.widen() as f32).collect();
        let p1 = dir.join(format!("{stem}.pooled.srst"));
        Tensor::vector(&pooled).write(&p1)?;
        let p2 = dir.join(format!("{stem}.retained.srst"));
        Tensor::from_matrix(&self.retained_hidden()).write(&p2)?;
        let p3 = dir.join(format!("{stem}.trace.txt"));
        std::fs::write(&p3, self.trace.to_text(self.layout.len()))
            .map_err(|e| Error::io(&p3, e))?;
        Ok(vec![p1, p2, p3])
    }
}

fn scores_for<T: Scalar>(
    seq: &Sequence<T>,
    last_row_weights: &[f64],
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    match mode {
        ScoreMode::Attention => score_visual_tokens(last_row_weights, &seq.layout),
        ScoreMode::Cosine => cosine_scores(&seq.hidden, &seq.layout),
    }
}

/// Index of the highest mean score, ties to the lower index.
fn best_segment(scores: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for (i, s) in scores.iter().enumerate() {
        let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
        if mean > best_mean {
            best = i;
            best_mean = mean;
        }
    }
    best
}

/// Self-reflective sampling over `n_segments` segments of `video`.
///
/// Segments run independently up to and including the first scheduled
/// layer. The first step selects globally across segments; the best
/// segment (highest mean visual score) contributes the system and user
/// blocks of the merged sequence, which continues through the remaining
/// layers with further steps applied in place.
pub fn run_selfres<T: Scalar>(
    video: &VideoTokens,
    schedule: &SamplingSchedule,
    n_segments: usize,
    weights: &Weights<T>,
    prompts: &Prompts,
    score: ScoreMode,
) -> Result<Signature<T>> {
    let layers = weights.config.layers;
    schedule.validate(layers)?;
    let mut batch = build_batch(video, n_segments, prompts, weights)?;
    let first = schedule.steps[0];
    let mut trace = Trace::default();

    let mut last_rows: Vec<Vec<f64>> = Vec::new();
    for layer in 0..=first.layer {
        let lengths = batch.sequences.iter().map(|s| s.layout.len()).collect();
        last_rows.clear();
        for seq in &mut batch.sequences {
            let out = forward_layer(&seq.hidden, layer, weights)?;
            seq.hidden = out.hidden;
            last_rows.push(out.last_row_weights);
        }
        trace.layers.push(LayerTrace {
            layer,
            lengths,
            step: None,
        });
    }

    // Scores are gathered for every segment before any selection happens.
    let scores: Vec<Vec<f64>> = batch
        .sequences
        .iter()
        .zip(&last_rows)
        .map(|(seq, w)| scores_for(seq, w, score))
        .collect::<Result<_>>()?;
    let best = best_segment(&scores);
    let (system_rows, user_rows) = {
        let seq = &batch.sequences[best];
        let n = seq.layout.len();
        (
            seq.hidden.select_rows(&(0..seq.layout.n_sys).collect::<Vec<_>>()),
            seq.hidden
                .select_rows(&(n - seq.layout.n_user..n).collect::<Vec<_>>()),
        )
    };
    let (pruned, record) = sample_step(&batch, &scores, first.fraction)?;
    trace.layers[first.layer].step = Some(record);
    let mut merged = merge_segments(&pruned, &system_rows, &user_rows)?;

    let mut pending = schedule.steps[1..].iter().peekable();
    for layer in first.layer + 1..layers {
        let lengths = vec![merged.layout.len()];
        let out = forward_layer(&merged.hidden, layer, weights)?;
        merged.hidden = out.hidden;
        let mut step = None;
        if let Some(s) = pending.next_if(|s| s.layer == layer) {
            let scores = scores_for(&merged, &out.last_row_weights, score)?;
            let single = SegmentBatch {
                sequences: vec![merged],
            };
            let (mut pruned, record) = sample_step(&single, &[scores], s.fraction)?;
            merged = pruned
                .sequences
                .pop()
                .ok_or_else(|| Error::Internal("sampling removed the merged sequence".into()))?;
            step = Some(record);
        }
        trace.layers.push(LayerTrace {
            layer,
            lengths,
            step,
        });
    }
    debug_assert!(pending.next().is_none());
    Ok(Signature::new(merged, best, trace))
}

/// Baseline: `count` frames spread linearly over the video, one sequence,
/// every layer, no pruning.
pub fn run_linear_frames<T: Scalar>(
    video: &VideoTokens,
    count: usize,
    weights: &Weights<T>,
    prompts: &Prompts,
) -> Result<Signature<T>> {
    let frames = sample_frames_linear(video.total_frames, count)?;
    let mut seq = assemble_sequence(prompts, video, &frames, 0, weights)?;
    let mut trace = Trace::default();
    for layer in 0..weights.config.layers {
        trace.layers.push(LayerTrace {
            layer,
            lengths: vec![seq.layout.len()],
            step: None,
        });
        seq.hidden = forward_layer(&seq.hidden, layer, weights)?.hidden;
    }
    Ok(Signature::new(seq, 0, trace))
}

/// Baseline with the model's default frame count.
pub fn run_linear<T: Scalar>(
    video: &VideoTokens,
    weights: &Weights<T>,
    prompts: &Prompts,
) -> Result<Signature<T>> {
    run_linear_frames(video, weights.config.frames_per_segment, weights, prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};

    fn layout(n_sys: usize, n_vis: usize, n_user: usize) -> TokenLayout {
        TokenLayout {
            n_sys,
            n_user,
            provenance: (0..n_vis)
                .map(|j| Provenance {
                    segment: 0,
                    slot: j as u32,
                    frame: j as u32,
                    patch: 0,
                })
                .collect(),
        }
    }

    // Stable sort by descending score keeps lower indices first among ties.
    fn oracle_top_k(scores: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut top = idx[..k].to_vec();
        top.sort();
        top
    }

    #[test]
    fn schedules() {
        let r = make_schedule(ScheduleMode::Regular, 5, 5, 3, 8).unwrap();
        assert_eq!(r.steps, vec![SamplingStep { layer: 5, fraction: 0.2 }]);

        let s = make_schedule(ScheduleMode::Smooth, 3, 5, 3, 8).unwrap();
        let f = 0.2f64.powf(1.0 / 3.0);
        assert_eq!(s.steps.iter().map(|s| s.layer).collect::<Vec<_>>(), vec![3, 4, 5]);
        for st in &s.steps {
            assert!((st.fraction - 0.5848).abs() < 1e-4);
            assert_eq!(st.fraction, f);
        }
        let product: f64 = s.steps.iter().map(|s| s.fraction).product();
        assert!((product - 0.2).abs() < 1e-12);

        for mode in [ScheduleMode::Regular, ScheduleMode::Smooth] {
            let one = make_schedule(mode, 2, 1, 3, 8).unwrap();
            assert!(one.is_identity());
        }

        assert!(matches!(
            make_schedule(ScheduleMode::Regular, 8, 5, 3, 8),
            Err(Error::Config(_))
        ));

        // runs past the stack: 2 steps of sqrt(1/5)
        let clamped = make_schedule(ScheduleMode::Smooth, 6, 5, 3, 8).unwrap();
        assert_eq!(clamped.steps.len(), 2);
        assert!((clamped.steps[0].fraction - 0.2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        let bad = SamplingSchedule::custom(vec![
            SamplingStep { layer: 3, fraction: 0.5 },
            SamplingStep { layer: 3, fraction: 0.5 },
        ]);
        assert!(matches!(bad.validate(8), Err(Error::Config(_))));
        let zero = SamplingSchedule::custom(vec![SamplingStep { layer: 1, fraction: 0.0 }]);
        assert!(zero.validate(8).is_err());
        let over = SamplingSchedule::custom(vec![SamplingStep { layer: 1, fraction: 1.5 }]);
        assert!(over.validate(8).is_err());
        assert!(SamplingSchedule::custom(vec![]).validate(8).is_err());
    }

    #[test]
    fn retained_count_law() {
        assert_eq!(retained_count(0.2, 1280), 256);
        assert_eq!(retained_count(1.0 / 3.0, 768), 256);
        assert_eq!(retained_count(0.001, 10), 1);
        assert_eq!(retained_count(1.0, 17), 17);
        assert_eq!(retained_count(0.5, 7), 3);
    }

    #[test]
    fn scoring() {
        let l = layout(2, 3, 1);
        let uniform = vec![1.0 / 6.0; 6];
        assert_eq!(score_visual_tokens(&uniform, &l).unwrap(), vec![1.0 / 6.0; 3]);

        let delta = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(score_visual_tokens(&delta, &l).unwrap(), vec![0.0, 1.0, 0.0]);

        let w = vec![0.05, 0.1, 0.3, 0.2, 0.15, 0.2];
        assert_eq!(score_visual_tokens(&w, &l).unwrap(), vec![0.3, 0.2, 0.15]);

        assert!(matches!(
            score_visual_tokens(&w[..5], &l),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(select_top_k(&[0.1, 0.9, 0.3, 0.8], 2).unwrap(), vec![1, 3]);
        assert_eq!(select_top_k(&[0.5, 0.9, 0.5], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_top_k(&[0.2, 0.2, 0.2], 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(select_top_k(&[0.1], 0), Err(Error::Usage(_))));
        assert!(matches!(select_top_k(&[0.1], 2), Err(Error::Usage(_))));
        assert_eq!(oracle_top_k(&[0.5, 0.9, 0.5], 2), vec![0, 1]);
    }

    fn toy_batch(n_seq: usize, n_vis: usize) -> SegmentBatch<f64> {
        let sequences = (0..n_seq)
            .map(|s| {
                let n = 2 + n_vis + 1;
                let rows: Vec<Vec<f64>> =
                    (0..n).map(|i| vec![(s * 100 + i) as f64, 0.5]).collect();
                let mut l = layout(2, n_vis, 1);
                for p in &mut l.provenance {
                    p.segment = s as u32;
                }
                Sequence {
                    hidden: Matrix::from_rows(&rows).unwrap(),
                    layout: l,
                }
            })
            .collect();
        SegmentBatch { sequences }
    }

    #[test]
    fn sample_step_identity_and_global_selection() {
        let batch = toy_batch(3, 4);
        let scores: Vec<Vec<f64>> = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.9, 0.05, 0.05, 0.8],
            vec![0.0, 0.0, 0.0, 0.0],
        ];
        let (same, rec) = sample_step(&batch, &scores, 1.0).unwrap();
        assert_eq!(same, batch);
        assert_eq!(rec.visual_after, 12);

        let (pruned, rec) = sample_step(&batch, &scores, 0.25).unwrap();
        assert_eq!(rec.visual_after, 3);
        assert_eq!((rec.segments_before, rec.segments_after), (3, 2));
        assert_eq!(pruned.n_segments(), 2);
        // segment 0 keeps token 3, segment 1 keeps tokens 0 and 3
        assert_eq!(pruned.sequences[0].hidden.rows(), 2 + 1 + 1);
        assert_eq!(pruned.sequences[0].hidden[(2, 0)], 5.0);
        assert_eq!(pruned.sequences[1].hidden[(2, 0)], 102.0);
        assert_eq!(pruned.sequences[1].hidden[(3, 0)], 105.0);
        // system and user rows are untouched
        assert_eq!(pruned.sequences[1].hidden[(0, 0)], 100.0);
        assert_eq!(pruned.sequences[1].hidden[(4, 0)], 106.0);

        let (one, _) = sample_step(&batch, &scores, 0.001).unwrap();
        assert_eq!(one.n_visual(), 1);

        assert!(matches!(sample_step(&batch, &scores, 0.0), Err(Error::Config(_))));
        assert!(matches!(sample_step(&batch, &scores, 1.01), Err(Error::Config(_))));
    }

    #[test]
    fn merge_keeps_order_and_states() {
        let batch = toy_batch(2, 2);
        let sys = Matrix::from_rows(&[[7.0, 7.0]]).unwrap();
        let user = Matrix::from_rows(&[[9.0, 9.0]]).unwrap();
        let m = merge_segments(&batch, &sys, &user).unwrap();
        let col: Vec<f64> = (0..m.hidden.rows()).map(|i| m.hidden[(i, 0)]).collect();
        assert_eq!(col, vec![7.0, 2.0, 3.0, 102.0, 103.0, 9.0]);
        assert_eq!(m.layout.visual_span(), (1, 5));
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            layers: 4,
            d_ff: 32,
            frames_per_segment: 4,
            patches_per_frame: 4,
            patch_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn small_video(cfg: &ModelConfig, t: usize) -> VideoTokens {
        let mut g = crate::rng::Gaussian::new(9);
        let n = t * cfg.patches_per_frame * cfg.patch_dim;
        let features = (0..n).map(|_| (0.5 * g.next()) as f32).collect();
        VideoTokens::new("toy", t, cfg.patches_per_frame, cfg.patch_dim, features).unwrap()
    }

    #[test]
    fn linear_run_shape() {
        let cfg = small_config();
        let w = init_weights::<f32>(&cfg).unwrap();
        let v = small_video(&cfg, 4);
        let sig = run_linear(&v, &w, &Prompts::default()).unwrap();
        assert_eq!(sig.retained_count(), 16);
        let frames: Vec<u32> = sig.retained().map(|(p, _)| p.frame).step_by(4).collect();
        assert_eq!(frames, vec![0, 1, 2, 3]);
        let lens: Vec<usize> = sig.trace.layers.iter().map(LayerTrace::total_length).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(sig.pooled.len(), 16);
    }

    #[test]
    fn selfres_identity_matches_linear() {
        let cfg = small_config();
        let w = init_weights::<f32>(&cfg).unwrap();
        let v = small_video(&cfg, 12);
        let p = Prompts::default();
        let ident = SamplingSchedule::custom(vec![
            SamplingStep { layer: 1, fraction: 1.0 },
            SamplingStep { layer: 2, fraction: 1.0 },
        ]);
        let a = run_selfres(&v, &ident, 1, &w, &p, ScoreMode::Attention).unwrap();
        let b = run_linear(&v, &w, &p).unwrap();
        assert_eq!(a.final_hidden, b.final_hidden);
    }

    #[test]
    fn selfres_regular_and_determinism() {
        let cfg = small_config();
        let w = init_weights::<f32>(&cfg).unwrap();
        let v = small_video(&cfg, 24);
        let p = Prompts::default();
        let sched = make_schedule(ScheduleMode::Regular, 1, 3, 1, cfg.layers).unwrap();
        let a = run_selfres(&v, &sched, 3, &w, &p, ScoreMode::Attention).unwrap();
        assert_eq!(a.retained_count(), 16);
        let step = a.trace.layers[1].step.as_ref().unwrap();
        assert!(step.segments_after >= 1 && step.segments_after <= 3);
        assert_eq!(a.trace.layers[1].lengths.len(), 3);
        assert_eq!(a.trace.layers[2].lengths, vec![a.layout.len()]);
        let provs: Vec<Provenance> = a.retained().map(|(p, _)| p).collect();
        assert!(provs.windows(2).all(|w| (w[0].segment, w[0].slot, w[0].patch) < (w[1].segment, w[1].slot, w[1].patch)));

        let b = run_selfres(&v, &sched, 3, &w, &p, ScoreMode::Attention).unwrap();
        assert_eq!(a, b);

        let c = run_selfres(&v, &sched, 3, &w, &p, ScoreMode::Cosine).unwrap();
        assert_eq!(c.retained_count(), 16);
    }

    #[test]
    fn identity_schedule_at_last_layer_matches_best_segment() {
        let cfg = small_config();
        let w = init_weights::<f32>(&cfg).unwrap();
        let v = small_video(&cfg, 12);
        let p = Prompts::default();
        let sched = SamplingSchedule::custom(vec![SamplingStep {
            layer: cfg.layers - 1,
            fraction: 1.0,
        }]);
        let sig = run_selfres(&v, &sched, 3, &w, &p, ScoreMode::Attention).unwrap();
        assert_eq!(sig.retained_count(), 3 * 16);

        let frames = crate::segmenter::build_segments(&v, &cfg, 3).unwrap();
        let seq = assemble_sequence(&p, &v, &frames[sig.best_segment], sig.best_segment, &w).unwrap();
        let mut h = seq.hidden;
        for l in 0..cfg.layers {
            h = forward_layer(&h, l, &w).unwrap().hidden;
        }
        let last = h.row(h.rows() - 1);
        for (a, b) in sig.last_hidden().iter().zip(last) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_schedule_beyond_stack() {
        let cfg = small_config();
        let w = init_weights::<f32>(&cfg).unwrap();
        let v = small_video(&cfg, 8);
        let sched = SamplingSchedule::custom(vec![SamplingStep { layer: 4, fraction: 0.5 }]);
        assert!(matches!(
            run_selfres(&v, &sched, 2, &w, &Prompts::default(), ScoreMode::Attention),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trace_text_format() {
        let cfg = small_config();
        let w = init_weights::<f32>(&cfg).unwrap();
        let v = small_video(&cfg, 8);
        let sched = make_schedule(ScheduleMode::Regular, 2, 2, 1, cfg.layers).unwrap();
        let sig = run_selfres(&v, &sched, 2, &w, &Prompts::default(), ScoreMode::Attention).unwrap();
        let text = sig.trace.to_text(sig.layout.len());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), cfg.layers);
        assert!(lines[0].starts_with("layer=0 lengths=67,67 live=134"), "{}", lines[0]);
        assert!(lines[2].contains("step=0.500000 visual=32->16"), "{}", lines[2]);
        assert!(lines[3].starts_with("layer=3 lengths=67 live=67"), "{}", lines[3]);
    }
}
