//! Acceptance checks shared by `selftest` and the `acceptance` test target.
//!
//! Each check computes its expectation independently of the code under
//! test (brute-force sorts, closed-form token and FLOP counts, hand-built
//! confusion tables) and reports a one-line outcome.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use selfres::evalkit::{save_predictions, ClassSet, EvalRecord, Label, DEFAULT_CLASSES};
use selfres::kernels::{causal_attention, causal_attention_weights, Matrix};
use selfres::model::ModelConfig;
use selfres::rng::{Gaussian, SplitMix64};
use selfres::sampler::{run_linear, run_selfres, select_top_k, SamplingSchedule, SamplingStep, ScoreMode};
use selfres::segmenter::{Prompts, VideoTokens};
use selfres::synthbench::{attention_flops, benchmark_specs, flops_estimate, gen_synthetic, sign_test_p, SyntheticSpec};
use selfres::{init_weights, Weights32};

use crate::commands::{cmd_eval, cmd_gen, cmd_run, mean_recall, recall_wins, Engine};
use crate::config::{ExperimentConfig, Method, SamplerKind};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} [{}] {} ({:.1}s): {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = f();
    Outcome {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn default_weights() -> Weights32 {
    init_weights(&ModelConfig::default()).expect("default config is valid")
}

fn test_video(seed: u64, total_frames: usize) -> VideoTokens {
    let cfg = ModelConfig::default();
    let spec = &benchmark_specs(1, seed, total_frames, &["Fighting".to_string()], &cfg).unwrap()[0];
    gen_synthetic(spec, &cfg).unwrap()
}

/// Stable sort by descending score keeps lower indices first on ties.
pub fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

pub fn selection_oracle() -> Outcome {
    timed(1, "selection oracle", || {
        let mut rng = SplitMix64::new(0x70_9C);
        let mut mismatches = 0;
        let mut with_dups = 0;
        for case in 0..1000 {
            let n = 1 + rng.below(2048) as usize;
            let scores: Vec<f64> = if case % 2 == 0 {
                (0..n).map(|_| rng.below(8) as f64 / 8.0).collect()
            } else {
                (0..n).map(|_| rng.next_unit53()).collect()
            };
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                with_dups += 1;
            }
            let k = 1 + rng.below(n as u64) as usize;
            if select_top_k(&scores, k).ok() != Some(top_k_oracle(&scores, k)) {
                mismatches += 1;
            }
        }
        (
            mismatches == 0,
            format!("1000 vectors ({with_dups} with duplicates), {mismatches} mismatches"),
        )
    })
}

/// `max(1, floor(f·n))` with the same representability allowance as the
/// engine.
fn keep(f: f64, n: usize) -> usize {
    ((f * n as f64 + 1e-9).floor() as usize).clamp(1, n)
}

/// Closed-form per-layer sequence lengths of a run.
fn closed_form_lengths(cfg: &ModelConfig, text: usize, ns: usize, schedule: &SamplingSchedule) -> Vec<Vec<usize>> {
    let per_segment = cfg.tokens_per_segment();
    let first = schedule.steps[0].layer;
    let mut visual = ns * per_segment;
    let mut lengths = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        if layer <= first {
            lengths.push(vec![text + per_segment; ns]);
        } else {
            lengths.push(vec![text + visual]);
        }
        if let Some(s) = schedule.steps.iter().find(|s| s.layer == layer) {
            visual = keep(s.fraction, visual);
        }
    }
    lengths
}

fn grid_methods() -> Vec<Method> {
    let mut grid = Vec::new();
    for ns in [1, 3, 5] {
        for r in [3, 5] {
            grid.push(Method::regular(r, ns));
        }
        for r in [2, 3] {
            for m in [2, 3] {
                grid.push(Method::smooth(r, ns, m));
            }
        }
    }
    grid
}

pub fn token_count_law() -> Outcome {
    timed(2, "token-count law", || {
        let weights = default_weights();
        let cfg = &weights.config;
        let video = test_video(11, 160);
        let prompts = Prompts::default();
        let runs: Vec<(Method, usize, usize)> = grid_methods()
            .par_iter()
            .map(|m| {
                let schedule = m.schedule(cfg.layers).unwrap().unwrap();
                let sig = run_selfres(&video, &schedule, m.ns, &weights, &prompts, ScoreMode::Attention).unwrap();
                let mut expect = m.ns * cfg.tokens_per_segment();
                for s in &schedule.steps {
                    expect = keep(s.fraction, expect);
                }
                (*m, sig.retained_count(), expect)
            })
            .collect();
        let bad: Vec<String> = runs
            .iter()
            .filter(|(_, got, want)| got != want)
            .map(|(m, got, want)| format!("{m}: {got} != {want}"))
            .collect();
        let sizes: Vec<String> = runs.iter().map(|(m, got, _)| format!("{m}={got}")).collect();
        if bad.is_empty() {
            (true, format!("{} schedules exact; {}", runs.len(), sizes.join(" ")))
        } else {
            (false, bad.join("; "))
        }
    })
}

pub fn identity_reduction() -> Outcome {
    timed(3, "identity reduction", || {
        let weights = default_weights();
        let prompts = Prompts::default();
        let mut worst = 0.0f64;
        for (seed, t) in [(3u64, 160usize), (4, 40)] {
            let video = test_video(seed, t);
            let linear = run_linear(&video, &weights, &prompts).unwrap();
            for r in 0..weights.config.layers {
                let schedule = SamplingSchedule::custom(vec![SamplingStep { layer: r, fraction: 1.0 }]);
                let sig = run_selfres(&video, &schedule, 1, &weights, &prompts, ScoreMode::Attention).unwrap();
                if sig.final_hidden.shape() != linear.final_hidden.shape() {
                    return (false, format!("shape differs at r={r}"));
                }
                for (a, b) in sig.final_hidden.data().iter().zip(linear.final_hidden.data()) {
                    worst = worst.max((a - b).abs() as f64);
                }
            }
        }
        (worst <= 1e-5, format!("max |diff| = {worst:.3e} over 2 videos x 8 layers (tol 1e-5)"))
    })
}

pub fn causality() -> Outcome {
    timed(4, "causality and normalization", || {
        let mut g = Gaussian::new(0xCA05);
        let mut worst_sum = 0.0f64;
        let mut nonzero_above = 0usize;
        let mut worst_last = 0.0f64;
        for _ in 0..10_000 {
            let n = 1 + g.uniform().below(24) as usize;
            let heads = 1usize << g.uniform().below(3);
            let dh = 1 + g.uniform().below(6) as usize;
            let d = heads * dh;
            let scale = 1.0 + 4.0 * g.uniform().next_unit53();
            let mut draw = || {
                let data: Vec<f32> = (0..n * d).map(|_| (scale * g.next()) as f32).collect();
                Matrix::from_vec(n, d, data).unwrap()
            };
            let (q, k, v) = (draw(), draw(), draw());
            let full = causal_attention_weights(&q, &k, heads).unwrap();
            let fast = causal_attention(&q, &k, &v, heads).unwrap();
            for w in &full {
                for i in 0..n {
                    let row = w.row(i);
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                    nonzero_above += row[i + 1..].iter().filter(|&&x| x != 0.0).count();
                }
            }
            for j in 0..n {
                let avg = full.iter().map(|w| w[(n - 1, j)]).sum::<f64>() / heads as f64;
                worst_last = worst_last.max((avg - fast.last_row_weights[j]).abs());
            }
            worst_sum = worst_sum.max((fast.last_row_weights.iter().sum::<f64>() - 1.0).abs());
        }
        (
            worst_sum <= 1e-6 && nonzero_above == 0 && worst_last <= 1e-9,
            format!(
                "10000 calls: max |row sum - 1| = {worst_sum:.2e}, nonzero above-diagonal = {nonzero_above}, fast-path last row max diff = {worst_last:.2e}"
            ),
        )
    })
}

/// `8nd² + 4n²d + 4nd·d_ff`, written out independently of the engine.
fn closed_form_layer(n: u64, cfg: &ModelConfig) -> u64 {
    let (d, dff) = (cfg.d as u64, cfg.d_ff as u64);
    8 * n * d * d + 4 * n * n * d + 4 * n * d * dff
}

pub fn flop_consistency() -> Outcome {
    timed(5, "FLOP consistency", || {
        let weights = default_weights();
        let cfg = weights.config.clone();
        let prompts = Prompts::default();
        let text = prompts.system.len() + prompts.user.len();
        let video = test_video(5, 160);
        let mut problems = Vec::new();
        let mut checked = 0;
        let mut methods = grid_methods();
        methods.push(Method::regular(4, 5));
        for m in &methods {
            let schedule = m.schedule(cfg.layers).unwrap().unwrap();
            let sig = run_selfres(&video, &schedule, m.ns, &weights, &prompts, ScoreMode::Attention).unwrap();
            let report = flops_estimate(&sig.trace.lengths(), &cfg).unwrap();
            let lengths = closed_form_lengths(&cfg, text, m.ns, &schedule);
            let closed: u64 = lengths
                .iter()
                .flat_map(|l| l.iter().map(|&n| closed_form_layer(n as u64, &cfg)))
                .sum();
            if sig.trace.lengths() != lengths || report.total != closed {
                problems.push(format!("{m}: engine {} vs closed form {closed}", report.total));
            }
            checked += 1;
        }
        let linear = run_linear(&video, &weights, &prompts).unwrap();
        let lin = flops_estimate(&linear.trace.lengths(), &cfg).unwrap();
        let n = (text + cfg.tokens_per_segment()) as u64;
        if lin.total != cfg.layers as u64 * closed_form_layer(n, &cfg) || lin.ratio != 1.0 {
            problems.push("linear run is not L x F(n)".into());
        }

        // Regular(r=4, N_s=5): quadratic term on the live token count.
        let schedule = Method::regular(4, 5).schedule(cfg.layers).unwrap().unwrap();
        let sig = run_selfres(&video, &schedule, 5, &weights, &prompts, ScoreMode::Attention).unwrap();
        let live: Vec<usize> = sig.trace.layers.iter().map(|l| l.total_length()).collect();
        let before = attention_flops(live[4], cfg.d);
        let after = attention_flops(live[5], cfg.d);
        if after * 25 != before {
            problems.push(format!("quadratic term {before} -> {after} is not exactly 1/25"));
        }
        (
            problems.is_empty(),
            if problems.is_empty() {
                format!(
                    "{checked} schedules + linear exact; Regular(4,5) live tokens {} -> {}, 4n^2d {before} -> {after} (x1/25)",
                    live[4], live[5]
                )
            } else {
                problems.join("; ")
            },
        )
    })
}

#[derive(Debug, Clone)]
pub struct Directional {
    pub videos: usize,
    pub linear_recall: f64,
    pub selfres_recall: f64,
    pub wins: usize,
    pub losses: usize,
    pub p_value: f64,
    pub linear_accuracy: f64,
    pub selfres_accuracy: f64,
    pub max_grid_hit: f64,
    pub max_plant_fraction: f64,
}

/// Linear baseline vs Smooth(N_s=5, r=3, m=3) over generated videos.
pub fn directional_experiment(videos: usize, base_seed: u64, total_frames: usize) -> Directional {
    let config = ExperimentConfig::default();
    let engine = Engine::new(&config).unwrap();
    let specs: Vec<SyntheticSpec> =
        benchmark_specs(videos, base_seed, total_frames, &config.classes, &config.model).unwrap();
    let f = config.model.frames_per_segment;
    let p = config.model.patches_per_frame;
    let grid: Vec<usize> = selfres::segmenter::sample_frames_linear(total_frames, f).unwrap();
    let (linear, selfres, hits): (Vec<_>, Vec<_>, Vec<_>) = specs
        .par_iter()
        .map(|spec| {
            let video = gen_synthetic(spec, &config.model).unwrap();
            let planted_frames: Vec<u32> = video.planted.iter().map(|t| t / p as u32).collect();
            let on_grid = planted_frames.iter().filter(|&&fr| grid.contains(&(fr as usize))).count();
            let hit = on_grid as f64 / planted_frames.len() as f64;
            let frac = video.planted.len() as f64 / (total_frames * p) as f64;
            let a = engine.evaluate(&video, &Method::linear(1)).unwrap();
            let b = engine.evaluate(&video, &Method::smooth(3, 5, 3)).unwrap();
            (a, b, (hit, frac))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((Vec::new(), Vec::new(), Vec::new()), |mut acc, (a, b, h)| {
            acc.0.push(a);
            acc.1.push(b);
            acc.2.push(h);
            acc
        });
    let acc = |outs: &[crate::commands::VideoOutcome]| {
        let correct = outs
            .iter()
            .filter(|o| o.predicted != Label::Unknown && o.predicted.name(&engine.classes) == o.true_label.as_deref().unwrap_or(""))
            .count();
        correct as f64 / outs.len() as f64
    };
    let (wins, losses) = recall_wins(&linear, &selfres);
    Directional {
        videos,
        linear_recall: mean_recall(&linear),
        selfres_recall: mean_recall(&selfres),
        wins,
        losses,
        p_value: sign_test_p(wins, losses),
        linear_accuracy: acc(&linear),
        selfres_accuracy: acc(&selfres),
        max_grid_hit: hits.iter().map(|h| h.0).fold(0.0, f64::max),
        max_plant_fraction: hits.iter().map(|h| h.1).fold(0.0, f64::max),
    }
}

pub fn directional(videos: usize) -> Outcome {
    timed(6, "directional benchmark", || {
        let d = directional_experiment(videos, ExperimentConfig::default().seed, 160);
        let passed = d.selfres_recall > d.linear_recall
            && d.p_value < 0.05
            && d.selfres_accuracy >= d.linear_accuracy
            && d.max_grid_hit < 0.3
            && d.max_plant_fraction <= 0.1;
        (
            passed,
            format!(
                "{} videos: recall linear {:.4} vs Self-ReS {:.4}, wins/losses {}/{}, sign p = {:.3e} (need < 0.05); accuracy linear {:.3} vs Self-ReS {:.3}; max grid hit {:.2}, max plant fraction {:.3}",
                d.videos,
                d.linear_recall,
                d.selfres_recall,
                d.wins,
                d.losses,
                d.p_value,
                d.linear_accuracy,
                d.selfres_accuracy,
                d.max_grid_hit,
                d.max_plant_fraction
            ),
        )
    })
}

/// (true label, predicted text, count) rows of the crafted 50-record file.
const CRAFTED: [(&str, &str, usize); 19] = [
    ("Abuse", "abuse", 4),
    ("Arrest", "An arrest is made", 3),
    ("Arrest", "robbery", 1),
    ("Arson", "Arson, clearly", 4),
    ("Assault", "assault", 3),
    ("Assault", "they are fighting", 2),
    ("Assault", "unclear", 1),
    ("Burglary", "BURGLARY", 4),
    ("Fighting", "fighting", 4),
    ("Fighting", "assault then fighting", 1),
    ("Robbery", "robbery", 2),
    ("Robbery", "stealing", 2),
    ("Shooting", "gunshots", 2),
    ("Shooting", "shooting", 2),
    ("Stealing", "stealing", 3),
    ("Stealing", "shoplifting", 2),
    ("Shoplifting", "The action is Shoplifting.", 5),
    ("Vandalism", "vandalism", 4),
    ("Vandalism", "nothing unusual happens", 1),
];

/// Nonzero cells of the crafted file's confusion matrix, by hand.
const CRAFTED_CELLS: [(&str, &str, u64); 19] = [
    ("Abuse", "Abuse", 4),
    ("Arrest", "Arrest", 3),
    ("Arrest", "Robbery", 1),
    ("Arson", "Arson", 4),
    ("Assault", "Assault", 3),
    ("Assault", "Fighting", 2),
    ("Assault", "Unknown", 1),
    ("Burglary", "Burglary", 4),
    ("Fighting", "Fighting", 4),
    ("Fighting", "Assault", 1),
    ("Robbery", "Robbery", 2),
    ("Robbery", "Stealing", 2),
    ("Shooting", "Unknown", 2),
    ("Shooting", "Shooting", 2),
    ("Stealing", "Stealing", 3),
    ("Stealing", "Shoplifting", 2),
    ("Shoplifting", "Shoplifting", 5),
    ("Vandalism", "Vandalism", 4),
    ("Vandalism", "Unknown", 1),
];

pub fn eval_exactness(scratch: &Path) -> Outcome {
    timed(7, "eval harness exactness", || {
        let classes = ClassSet::default();
        let dir = scratch.join("eval");
        fs::create_dir_all(&dir).unwrap();
        let mut records = Vec::new();
        for (t, p, count) in CRAFTED {
            for _ in 0..count {
                records.push(EvalRecord {
                    video_id: format!("v{:03}", records.len()),
                    true_label: t.into(),
                    predicted_text: p.into(),
                });
            }
        }
        let crafted = dir.join("crafted.csv");
        save_predictions(&crafted, &records).unwrap();
        let summary = cmd_eval(&crafted, &classes, &dir.join("crafted")).unwrap();
        let cm = &summary.confusion;

        let mut expected: BTreeMap<(usize, Label), u64> = BTreeMap::new();
        for (t, p, c) in CRAFTED_CELLS {
            let col = classes.index_of(p).map_or(Label::Unknown, Label::Class);
            expected.insert((classes.index_of(t).unwrap(), col), c);
        }
        let mut problems = Vec::new();
        for t in 0..classes.len() {
            let cols = (0..classes.len()).map(Label::Class).chain([Label::Unknown]);
            for col in cols {
                let want = expected.get(&(t, col)).copied().unwrap_or(0);
                if cm.get(t, col) != want {
                    problems.push(format!("cell ({}, {})", classes.name(t), col.name(&classes)));
                }
            }
        }
        let hand_correct = 38u64;
        if records.len() != 50 || cm.total() != 50 || cm.trace() != hand_correct {
            problems.push(format!("trace {} / total {}", cm.trace(), cm.total()));
        }
        if !summary.report.contains("76.0") {
            problems.push("crafted report does not print 76.0".into());
        }

        let mut big = Vec::with_capacity(1000);
        for i in 0..1000 {
            let t = DEFAULT_CLASSES[i % 11];
            let p = if i < 446 { t } else { DEFAULT_CLASSES[(i + 1) % 11] };
            big.push(EvalRecord {
                video_id: format!("b{i:04}"),
                true_label: t.into(),
                predicted_text: format!("I think it is {}", p.to_lowercase()),
            });
        }
        let big_path = dir.join("acc446.csv");
        save_predictions(&big_path, &big).unwrap();
        let s446 = cmd_eval(&big_path, &classes, &dir.join("acc446")).unwrap();
        let row = s446.report.lines().nth(1).unwrap_or("").to_string();
        if !row.split_whitespace().any(|c| c == "44.6") {
            problems.push(format!("446/1000 row {row:?} lacks 44.6"));
        }
        (
            problems.is_empty(),
            if problems.is_empty() {
                format!(
                    "50 records: {} of 50 correct, Assault->Fighting = {}, Unknown column = {}; 446/1000 row: {}",
                    cm.trace(),
                    cm.get(3, Label::Class(5)),
                    (0..classes.len()).map(|t| cm.get(t, Label::Unknown)).sum::<u64>(),
                    row.trim()
                )
            } else {
                problems.join("; ")
            },
        )
    })
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// gen → run (both samplers) → eval into `root`.
pub fn pipeline(root: &Path) {
    let cfg = ExperimentConfig::preset("smoke").unwrap();
    let data = root.join("data");
    cmd_gen(&cfg, &data).unwrap();
    let classes = cfg.class_set().unwrap();
    for (name, mode) in [("selfres", SamplerKind::Selfres), ("linear", SamplerKind::Linear)] {
        let run_cfg = ExperimentConfig { mode, ..cfg.clone() };
        let out = root.join(name);
        cmd_run(&run_cfg, &data, &out).unwrap();
        cmd_eval(&out.join("predictions.csv"), &classes, &out).unwrap();
    }
}

pub fn determinism(scratch: &Path) -> Outcome {
    timed(8, "determinism", || {
        let a = scratch.join("pipeline_a");
        let b = scratch.join("pipeline_b");
        pipeline(&a);
        pipeline(&b);
        let fa = files_under(&a);
        let fb = files_under(&b);
        if fa != fb {
            return (false, "the two runs wrote different file sets".into());
        }
        let count = |ext: &str| fa.iter().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
        let differing: Vec<String> = fa
            .iter()
            .filter(|p| fs::read(a.join(p)).unwrap() != fs::read(b.join(p)).unwrap())
            .map(|p| p.display().to_string())
            .collect();
        (
            differing.is_empty() && count("csv") > 0 && count("srst") > 0,
            format!(
                "{} files compared ({} csv, {} srst), {} differ {:?}",
                fa.len(),
                count("csv"),
                count("srst"),
                differing.len(),
                differing
            ),
        )
    })
}

/// Criteria 1–8 followed by the whole-suite runtime check.
pub fn run_all(scratch: &Path, videos: usize) -> Vec<Outcome> {
    let start = Instant::now();
    let mut outcomes = vec![
        selection_oracle(),
        token_count_law(),
        identity_reduction(),
        causality(),
        flop_consistency(),
        directional(videos),
        eval_exactness(scratch),
        determinism(scratch),
    ];
    let total = start.elapsed();
    outcomes.push(Outcome {
        id: 9,
        name: "whole-suite runtime",
        passed: total < Duration::from_secs(300),
        detail: format!("criteria 1-8 took {:.1}s (limit 300s)", total.as_secs_f64()),
        elapsed: total,
    });
    outcomes
}
