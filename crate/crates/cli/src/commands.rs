use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use selfres::evalkit::{
    accuracy, format_percent, format_report, load_predictions, save_predictions, ClassAnchors,
    ClassSet, ConfusionMatrix, EvalRecord, Label, ReportRow,
};
use selfres::model::{dump_weights, init_weights};
use selfres::sampler::{run_linear_frames, run_selfres};
use selfres::segmenter::VideoTokens;
use selfres::synthbench::{
    benchmark_specs, flops_estimate, gen_synthetic, planted_recall, sign_test_p, FlopReport,
};
use selfres::{Error, Result, Signature32, Weights32};

use crate::config::{ExperimentConfig, Method, MethodKind};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.json";
pub const TOY_SCALE_NOTE: &str = "toy-scale; not comparable to Table 1 absolutes";

/// Shared per-experiment state: weights, class anchors and prompts.
pub struct Engine {
    pub config: ExperimentConfig,
    pub weights: Weights32,
    pub classes: ClassSet,
    pub anchors: ClassAnchors,
}

/// What one method produced for one video.
#[derive(Debug, Clone)]
pub struct VideoOutcome {
    pub video_id: String,
    pub true_label: Option<String>,
    pub predicted: Label,
    pub recall: Option<f64>,
    pub flops: FlopReport,
    pub signature: Signature32,
}

impl Engine {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let weights = init_weights(&config.model)?;
        let classes = config.class_set()?;
        let anchors = ClassAnchors::new(&classes, &weights)?;
        Ok(Self {
            config: config.clone(),
            weights,
            classes,
            anchors,
        })
    }

    pub fn evaluate(&self, video: &VideoTokens, method: &Method) -> Result<VideoOutcome> {
        let cfg = &self.config;
        let signature = match method.schedule(cfg.model.layers)? {
            None => run_linear_frames(
                video,
                method.ns * cfg.model.frames_per_segment,
                &self.weights,
                &cfg.prompts,
            )?,
            Some(schedule) => run_selfres(
                video,
                &schedule,
                method.ns,
                &self.weights,
                &cfg.prompts,
                cfg.score,
            )?,
        };
        let recall = if video.planted.is_empty() {
            None
        } else {
            Some(planted_recall(&signature, &video.planted, video.patches_per_frame)?)
        };
        let flops = flops_estimate(&signature.trace.lengths(), &cfg.model)?;
        Ok(VideoOutcome {
            video_id: video.video_id.clone(),
            true_label: video.class_name.clone(),
            predicted: self.anchors.classify(&signature),
            recall,
            flops,
            signature,
        })
    }

    pub fn record(&self, o: &VideoOutcome) -> EvalRecord {
        EvalRecord {
            video_id: o.video_id.clone(),
            true_label: o.true_label.clone().unwrap_or_default(),
            predicted_text: o.predicted.name(&self.classes).to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub class: String,
    pub seed: u64,
}

pub fn read_manifest(dataset: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dataset.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), i + 1);
        let fields: Vec<&str> = line.split(',').collect();
        let [p, class, seed] = fields[..] else {
            return Err(Error::format(loc, "expected path,class,seed"));
        };
        let seed = seed
            .trim()
            .parse()
            .map_err(|e| Error::format(loc.clone(), format!("bad seed: {e}")))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(p.trim()),
            class: class.trim().to_string(),
            seed,
        });
    }
    if entries.is_empty() {
        return Err(Error::format(path.display().to_string(), "manifest lists no videos"));
    }
    Ok(entries)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    write_file(&out.join(CONFIG_ECHO), config.to_json())
}

/// Writes one synthetic video per spec plus `manifest.txt`.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    let ds = &config.dataset;
    let model = &config.model;
    let mut specs = benchmark_specs(ds.videos, config.seed, ds.total_frames, &config.classes, model)?;
    for s in &mut specs {
        s.plant_patch_fraction = ds.plant_patch_fraction;
        s.noise_sigma = ds.noise_sigma;
    }
    let videos_dir = out.join("videos");
    create_dir(&videos_dir)?;
    let budget = ds.total_frames * model.patches_per_frame / 10;
    let entries = specs
        .par_iter()
        .map(|spec| {
            let video = gen_synthetic(spec, model)?;
            if video.planted.len() > budget {
                return Err(Error::Config(format!(
                    "{} plants {} tokens, over the 10% budget of {budget}",
                    video.video_id,
                    video.planted.len()
                )));
            }
            video.save(&videos_dir, &video.video_id)?;
            Ok(ManifestEntry {
                path: PathBuf::from("videos").join(format!("{}.srst", video.video_id)),
                class: spec.class_name.clone(),
                seed: spec.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = String::new();
    for e in &entries {
        writeln!(manifest, "{},{},{}", e.path.display(), e.class, e.seed).unwrap();
    }
    write_file(&out.join(MANIFEST), manifest)?;
    echo_config(config, out)?;
    log::info!("wrote {} videos to {}", entries.len(), out.display());
    Ok(entries)
}

pub fn load_dataset(dataset: &Path) -> Result<Vec<VideoTokens>> {
    let entries = read_manifest(dataset)?;
    entries
        .par_iter()
        .map(|e| VideoTokens::load(&dataset.join(&e.path)))
        .collect()
}

fn evaluate_all(engine: &Engine, videos: &[VideoTokens], method: &Method) -> Result<Vec<VideoOutcome>> {
    let mut out = videos
        .par_iter()
        .map(|v| engine.evaluate(v, method))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<EvalRecord>,
    pub outcomes: Vec<VideoOutcome>,
}

/// Runs the configured method over a dataset. Writes `predictions.csv`,
/// `metrics.csv`, per-video signature dumps and the effective config.
pub fn cmd_run(config: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<RunSummary> {
    let engine = Engine::new(config)?;
    let method = config.method();
    let videos = load_dataset(dataset)?;
    let outcomes = evaluate_all(&engine, &videos, &method)?;

    let sig_dir = out.join("signatures");
    create_dir(&sig_dir)?;
    let mut metrics = String::from(
        "video_id,true_label,predicted,retained,planted_recall,flops,baseline_flops,flop_ratio\n",
    );
    for o in &outcomes {
        o.signature.dump(&sig_dir, &o.video_id)?;
        let recall = o.recall.map_or_else(String::new, |r| format!("{r:.6}"));
        writeln!(
            metrics,
            "{},{},{},{},{},{},{},{:.6}",
            o.video_id,
            o.true_label.as_deref().unwrap_or(""),
            o.predicted.name(&engine.classes),
            o.signature.retained_count(),
            recall,
            o.flops.total,
            o.flops.baseline_total,
            o.flops.ratio
        )
        .unwrap();
    }
    let records: Vec<EvalRecord> = outcomes.iter().map(|o| engine.record(o)).collect();
    save_predictions(&out.join("predictions.csv"), &records)?;
    write_file(&out.join("metrics.csv"), metrics)?;
    echo_config(config, out)?;
    log::info!("{}: {} videos -> {}", method, outcomes.len(), out.display());
    Ok(RunSummary { records, outcomes })
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: String,
    pub confusion: ConfusionMatrix,
}

fn report_row(method: Option<&Method>, layers: usize, accuracy: String) -> ReportRow {
    match method {
        None => ReportRow {
            method: "Predictions".into(),
            n_s: None,
            r: "-".into(),
            accuracy,
        },
        Some(m) if m.kind == MethodKind::Linear => ReportRow {
            method: "Baseline".into(),
            n_s: None,
            r: "-".into(),
            accuracy,
        },
        Some(m) => ReportRow {
            method: format!("Self-ReS {}", m.label()),
            n_s: Some(m.ns),
            r: m.r_cell(layers),
            accuracy,
        },
    }
}

/// Scores a predictions CSV. The row label comes from a `config.json`
/// echoed next to the predictions, when there is one.
pub fn cmd_eval(predictions: &Path, classes: &ClassSet, out: &Path) -> Result<EvalSummary> {
    let records = load_predictions(predictions)?;
    let confusion = ConfusionMatrix::from_records(&records, classes)?;
    let sibling = predictions.parent().map(|p| p.join(CONFIG_ECHO));
    let run_config = match sibling {
        Some(p) if p.is_file() => Some(ExperimentConfig::load(&p)?),
        _ => None,
    };
    let layers = run_config.as_ref().map_or(0, |c| c.model.layers);
    let method = run_config.as_ref().map(|c| c.method());
    let row = report_row(method.as_ref(), layers, confusion.accuracy_percent());
    let report = format_report(&[row]);
    create_dir(out)?;
    confusion.save_csv(&out.join("confusion.csv"))?;
    write_file(&out.join("report.txt"), &report)?;
    Ok(EvalSummary { report, confusion })
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: Method,
    pub accuracy: f64,
    pub accuracy_text: String,
    pub mean_recall: f64,
    pub mean_flop_ratio: f64,
    /// Per-video recall wins and losses against the first grid row.
    pub wins: usize,
    pub losses: usize,
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    pub table: String,
}

/// Per-video recall wins and losses of `b` over `a`; ties are dropped.
pub fn recall_wins(a: &[VideoOutcome], b: &[VideoOutcome]) -> (usize, usize) {
    let mut wins = 0;
    let mut losses = 0;
    for (x, y) in a.iter().zip(b) {
        debug_assert_eq!(x.video_id, y.video_id);
        if let (Some(rx), Some(ry)) = (x.recall, y.recall) {
            if ry > rx {
                wins += 1;
            } else if rx > ry {
                losses += 1;
            }
        }
    }
    (wins, losses)
}

pub fn mean_recall(outcomes: &[VideoOutcome]) -> f64 {
    let r: Vec<f64> = outcomes.iter().filter_map(|o| o.recall).collect();
    if r.is_empty() {
        0.0
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    }
}

pub fn bench_rows(engine: &Engine, videos: &[VideoTokens], grid: &[Method]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    let mut reference: Option<Vec<VideoOutcome>> = None;
    for method in grid {
        let outcomes = evaluate_all(engine, videos, method)?;
        let records: Vec<EvalRecord> = outcomes.iter().map(|o| engine.record(o)).collect();
        let cm = ConfusionMatrix::from_records(&records, &engine.classes)?;
        let (wins, losses) = reference.as_deref().map_or((0, 0), |r| recall_wins(r, &outcomes));
        rows.push(BenchRow {
            method: *method,
            accuracy: accuracy(&records, &engine.classes)?,
            accuracy_text: format_percent(cm.trace(), cm.total()),
            mean_recall: mean_recall(&outcomes),
            mean_flop_ratio: outcomes.iter().map(|o| o.flops.ratio).sum::<f64>() / outcomes.len() as f64,
            wins,
            losses,
        });
        if reference.is_none() {
            reference = Some(outcomes);
        }
    }
    Ok(rows)
}

pub fn format_bench(rows: &[BenchRow], layers: usize) -> String {
    let mut s = format!("# {TOY_SCALE_NOTE}\n");
    writeln!(
        s,
        "{:<18} {:>4} {:>8} {:>8} {:>13} {:>15} {:>12} {:>9}",
        "method", "N_s", "r_j/m", "accuracy", "planted_recall", "mean_flop_ratio", "wins/losses", "sign_p"
    )
    .unwrap();
    for (i, r) in rows.iter().enumerate() {
        let ns = if r.method.kind == MethodKind::Linear {
            format!("x{}", r.method.ns)
        } else {
            r.method.ns.to_string()
        };
        let (wl, p) = if i == 0 {
            ("-".to_string(), "-".to_string())
        } else {
            (
                format!("{}/{}", r.wins, r.losses),
                format!("{:.2e}", sign_test_p(r.wins, r.losses)),
            )
        };
        writeln!(
            s,
            "{:<18} {:>4} {:>8} {:>8} {:>13.4} {:>15.4} {:>12} {:>9}",
            r.method.label(),
            ns,
            r.method.r_cell(layers),
            r.accuracy_text,
            r.mean_recall,
            r.mean_flop_ratio,
            wl,
            p
        )
        .unwrap();
    }
    s
}

/// Every grid method over the dataset; writes `bench.txt` and `bench.csv`.
pub fn cmd_bench(config: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<BenchSummary> {
    let engine = Engine::new(config)?;
    if config.grid.is_empty() {
        return Err(Error::Config("bench grid is empty".into()));
    }
    let videos = load_dataset(dataset)?;
    let rows = bench_rows(&engine, &videos, &config.grid)?;
    let table = format_bench(&rows, config.model.layers);
    let mut csv = String::from("method,ns,r,m,accuracy,mean_planted_recall,mean_flop_ratio,wins,losses\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{:.6},{},{}",
            r.method.label(),
            r.method.ns,
            r.method.r,
            r.method.m,
            r.accuracy,
            r.mean_recall,
            r.mean_flop_ratio,
            r.wins,
            r.losses
        )
        .unwrap();
    }
    create_dir(out)?;
    write_file(&out.join("bench.txt"), &table)?;
    write_file(&out.join("bench.csv"), csv)?;
    echo_config(config, out)?;
    Ok(BenchSummary { rows, table })
}

pub fn cmd_dump_weights(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.model.validate()?;
    let weights: Weights32 = init_weights(&config.model)?;
    create_dir(out)?;
    let paths = dump_weights(&weights, out)?;
    echo_config(config, out)?;
    Ok(paths)
}
