//! Synthetic videos with planted events, planted-token recall and an
//! analytical FLOP model.
//!
//! Generation draws from one splitmix64 stream seeded with `spec.seed`:
//! first one draw per plant window choosing the window's starting patch,
//! then Box–Muller normals for every `(frame, patch, dim)` in row-major
//! order. A planted patch is `prototype + σ·z`; any other patch is
//! `sqrt(σ² + 1/d_p)·z`, which has the same per-coordinate variance.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::kernels::Scalar;
use crate::model::{class_prototype, ModelConfig};
use crate::rng::{Gaussian, SplitMix64};
use crate::sampler::Signature;
use crate::segmenter::{sample_frames_linear, VideoTokens};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub class_name: String,
    pub total_frames: usize,
    /// Half-open `[start, end)` frame ranges holding the event.
    pub plant_windows: Vec<(usize, usize)>,
    pub plant_patch_fraction: f64,
    pub noise_sigma: f64,
}

impl SyntheticSpec {
    pub fn new(seed: u64, class_name: impl Into<String>, total_frames: usize) -> Self {
        Self {
            seed,
            class_name: class_name.into(),
            total_frames,
            plant_windows: Vec::new(),
            plant_patch_fraction: 0.5,
            noise_sigma: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.total_frames == 0 {
            return Err(Error::Input("synthetic video needs at least one frame".into()));
        }
        if !(0.0..=1.0).contains(&self.plant_patch_fraction) {
            return Err(Error::Input(format!(
                "plant_patch_fraction {} is outside [0, 1]",
                self.plant_patch_fraction
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Input(format!("noise_sigma {} is invalid", self.noise_sigma)));
        }
        let mut sorted = self.plant_windows.clone();
        sorted.sort_unstable();
        for &(s, e) in &sorted {
            if s >= e || e > self.total_frames {
                return Err(Error::Input(format!(
                    "plant window ({s}, {e}) is not inside [0, {})",
                    self.total_frames
                )));
            }
        }
        if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::Input("plant windows overlap".into()));
        }
        Ok(())
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec, config: &ModelConfig) -> Result<VideoTokens> {
    spec.validate()?;
    let p = config.patches_per_frame;
    let dp = config.patch_dim;
    let t = spec.total_frames;
    let proto = class_prototype(&spec.class_name, config)?;

    let mut g = Gaussian::new(spec.seed);
    let per_frame = ((spec.plant_patch_fraction * p as f64).round() as usize).min(p);
    let mut planted_patches: Vec<Option<BTreeSet<usize>>> = vec![None; t];
    for &(start, end) in &spec.plant_windows {
        let offset = g.uniform().below(p as u64) as usize;
        let patches: BTreeSet<usize> = (0..per_frame).map(|i| (offset + i) % p).collect();
        for slot in &mut planted_patches[start..end] {
            *slot = Some(patches.clone());
        }
    }

    let sigma = spec.noise_sigma;
    let background = (sigma * sigma + 1.0 / dp as f64).sqrt();
    let mut features = Vec::with_capacity(t * p * dp);
    let mut planted = BTreeSet::new();
    for (frame, plant) in planted_patches.iter().enumerate() {
        for patch in 0..p {
            let is_planted = plant.as_ref().is_some_and(|s| s.contains(&patch));
            if is_planted {
                planted.insert((frame * p + patch) as u32);
                features.extend(proto.iter().map(|&c| (c as f64 + sigma * g.next()) as f32));
            } else {
                features.extend((0..dp).map(|_| (background * g.next()) as f32));
            }
        }
    }
    let mut video = VideoTokens::new(
        format!("synth_{:016x}", spec.seed),
        t,
        p,
        dp,
        features,
    )?;
    video.class_name = Some(spec.class_name.clone());
    video.planted = planted;
    Ok(video)
}

/// Fraction of ground-truth tokens present among the retained tokens,
/// matched on original `(frame, patch)`.
pub fn planted_recall<T: Scalar>(
    signature: &Signature<T>,
    ground_truth: &BTreeSet<u32>,
    patches_per_frame: usize,
) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::Usage("planted recall is undefined without planted tokens".into()));
    }
    let retained: BTreeSet<u32> = signature
        .retained()
        .map(|(p, _)| p.frame * patches_per_frame as u32 + p.patch)
        .collect();
    let hit = ground_truth.intersection(&retained).count();
    Ok(hit as f64 / ground_truth.len() as f64)
}

/// Fraction of planted frames that linear sampling of `count` frames hits.
pub fn grid_hit_fraction(windows: &[(usize, usize)], total_frames: usize, count: usize) -> Result<f64> {
    let grid: BTreeSet<usize> = sample_frames_linear(total_frames, count)?.into_iter().collect();
    let frames: Vec<usize> = windows.iter().flat_map(|&(s, e)| s..e).collect();
    if frames.is_empty() {
        return Ok(0.0);
    }
    Ok(frames.iter().filter(|f| grid.contains(f)).count() as f64 / frames.len() as f64)
}

/// Two disjoint event windows of 3 to 8 frames each, placed so that linear
/// sampling of `grid_count` frames hits fewer than 30% of planted frames.
pub fn nonlinear_windows(seed: u64, total_frames: usize, grid_count: usize) -> Result<Vec<(usize, usize)>> {
    if total_frames < 20 {
        return Err(Error::Input(format!(
            "need at least 20 frames for nonlinear plants, got {total_frames}"
        )));
    }
    let mut rng = SplitMix64::new(seed ^ 0x005E_ED0F_F61D);
    for _ in 0..10_000 {
        let mut windows = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = 3 + rng.below(6) as usize;
            let start = rng.below((total_frames - len) as u64) as usize;
            windows.push((start, start + len));
        }
        windows.sort_unstable();
        if windows[1].0 <= windows[0].1 {
            continue;
        }
        if grid_hit_fraction(&windows, total_frames, grid_count)? < 0.3 {
            return Ok(windows);
        }
    }
    Err(Error::Internal("could not place off-grid windows".into()))
}

/// `count` benchmark specs with classes assigned round-robin.
pub fn benchmark_specs(
    count: usize,
    base_seed: u64,
    total_frames: usize,
    classes: &[String],
    config: &ModelConfig,
) -> Result<Vec<SyntheticSpec>> {
    if classes.is_empty() {
        return Err(Error::Usage("no classes to plant".into()));
    }
    (0..count)
        .map(|i| {
            let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut spec = SyntheticSpec::new(seed, classes[i % classes.len()].clone(), total_frames);
            spec.plant_windows = nonlinear_windows(seed, total_frames, config.frames_per_segment)?;
            Ok(spec)
        })
        .collect()
}

/// Analytical forward cost of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    /// Sequence lengths processed at each layer.
    pub lengths: Vec<Vec<usize>>,
    pub per_layer: Vec<u64>,
    pub total: u64,
    /// Same formula with every layer processing the layer-0 lengths.
    pub baseline_total: u64,
    pub ratio: f64,
}

/// Cost of one layer over a length-`n` sequence:
/// `8·n·d²` (Q, K, V, O) `+ 4·n²·d` (scores and mixing) `+ 4·n·d·d_ff` (MLP),
/// which is `24·n·d² + 4·n²·d` when `d_ff = 4d`.
pub fn layer_flops(n: usize, config: &ModelConfig) -> u64 {
    let (n, d, dff) = (n as u64, config.d as u64, config.d_ff as u64);
    8 * n * d * d + attention_flops(n as usize, config.d) + 4 * n * d * dff
}

/// The quadratic part `4·n²·d`.
pub fn attention_flops(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    4 * n * n * d
}

pub fn flops_estimate(lengths: &[Vec<usize>], config: &ModelConfig) -> Result<FlopReport> {
    if lengths.len() != config.layers {
        return Err(Error::Usage(format!(
            "trace covers {} layers, model has {}",
            lengths.len(),
            config.layers
        )));
    }
    if lengths.iter().any(|l| l.is_empty() || l.contains(&0)) {
        return Err(Error::Usage("every layer must process at least one token".into()));
    }
    let cost = |l: &[usize]| -> u64 { l.iter().map(|&n| layer_flops(n, config)).sum() };
    let per_layer: Vec<u64> = lengths.iter().map(|l| cost(l)).collect();
    let total = per_layer.iter().sum();
    let baseline_total = cost(&lengths[0]) * config.layers as u64;
    Ok(FlopReport {
        lengths: lengths.to_vec(),
        per_layer,
        total,
        baseline_total,
        ratio: total as f64 / baseline_total as f64,
    })
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0f64; // ln C(n, 0)
    let mut p = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            p += (ln_choose + ln_half_n).exp();
        }
    }
    p.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::sampler::{run_linear_frames, run_selfres, SamplingSchedule, SamplingStep, ScoreMode};
    use crate::segmenter::Prompts;

    #[test]
    fn no_windows_no_plants() {
        let cfg = ModelConfig::default();
        let v = gen_synthetic(&SyntheticSpec::new(1, "Arson", 20), &cfg).unwrap();
        assert!(v.planted.is_empty());
        assert_eq!(v.features.len(), 20 * 16 * 32);
    }

    #[test]
    fn planted_count_and_determinism() {
        let cfg = ModelConfig::default();
        let mut spec = SyntheticSpec::new(5, "Robbery", 160);
        spec.plant_windows = vec![(120, 130)];
        let a = gen_synthetic(&spec, &cfg).unwrap();
        assert_eq!(a.planted.len(), 80);
        let frames: BTreeSet<u32> = a.planted.iter().map(|t| t / 16).collect();
        assert_eq!(frames, (120..130).collect());
        let b = gen_synthetic(&spec, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn planted_patches_carry_the_prototype() {
        let cfg = ModelConfig::default();
        let mut spec = SyntheticSpec::new(11, "Shooting", 40);
        spec.plant_windows = vec![(10, 30)];
        spec.noise_sigma = 0.0;
        let v = gen_synthetic(&spec, &cfg).unwrap();
        let proto = class_prototype("Shooting", &cfg).unwrap();
        let id = *v.planted.iter().next().unwrap() as usize;
        let (frame, patch) = (id / 16, id % 16);
        let row = &v.frame(frame)[patch * 32..(patch + 1) * 32];
        assert_eq!(row, &proto[..]);
    }

    #[test]
    fn rejects_bad_windows() {
        let cfg = ModelConfig::default();
        for w in [vec![(5, 5)], vec![(10, 41)], vec![(0, 10), (5, 12)]] {
            let mut spec = SyntheticSpec::new(1, "Abuse", 40);
            spec.plant_windows = w;
            assert!(matches!(gen_synthetic(&spec, &cfg), Err(Error::Input(_))));
        }
    }

    #[test]
    fn nonlinear_windows_are_off_grid() {
        for seed in 0..50 {
            let w = nonlinear_windows(seed, 160, 16).unwrap();
            assert_eq!(w.len(), 2);
            assert!(w[0].1 < w[1].0);
            assert!(grid_hit_fraction(&w, 160, 16).unwrap() < 0.3);
            let planted_frames: usize = w.iter().map(|(s, e)| e - s).sum();
            // 8 of 16 patches per planted frame, budget 10% of 160·16
            assert!(planted_frames * 8 <= 256);
        }
    }

    #[test]
    fn flop_formula() {
        let cfg = ModelConfig {
            d: 1,
            heads: 1,
            d_ff: 4,
            layers: 1,
            ..ModelConfig::default()
        };
        assert_eq!(layer_flops(1, &cfg), 28);
        let r = flops_estimate(&[vec![1]], &cfg).unwrap();
        assert_eq!((r.total, r.ratio), (28, 1.0));

        let cfg = ModelConfig::default();
        let n = 300;
        let r = flops_estimate(&vec![vec![n]; 8], &cfg).unwrap();
        assert_eq!(r.total, 8 * layer_flops(n, &cfg));
        assert_eq!(layer_flops(n, &cfg), 24 * 300 * 64 * 64 + 4 * 300 * 300 * 64);

        assert_eq!(attention_flops(1500, 64), 25 * attention_flops(300, 64));
        let mut pruned = vec![vec![1500]; 4];
        pruned.extend(vec![vec![300]; 4]);
        let r = flops_estimate(&pruned, &cfg).unwrap();
        assert!(r.ratio < 1.0);
        assert!(flops_estimate(&pruned[..7], &cfg).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert!((sign_test_p(1, 0) - 0.5).abs() < 1e-12);
        // P(X >= 9 | n = 10) = 11 / 1024
        assert!((sign_test_p(9, 1) - 11.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p(0, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_bounds() {
        let cfg = ModelConfig {
            d: 16,
            heads: 2,
            layers: 3,
            d_ff: 32,
            frames_per_segment: 4,
            patches_per_frame: 4,
            patch_dim: 8,
            ..ModelConfig::default()
        };
        let w = init_weights::<f32>(&cfg).unwrap();
        let mut spec = SyntheticSpec::new(3, "Arrest", 8);
        spec.plant_windows = vec![(1, 3), (6, 7)];
        let v = gen_synthetic(&spec, &cfg).unwrap();
        let p = Prompts::default();

        let ident = SamplingSchedule::custom(vec![SamplingStep { layer: 1, fraction: 1.0 }]);
        let all = run_selfres(&v, &ident, 2, &w, &p, ScoreMode::Attention).unwrap();
        assert_eq!(planted_recall(&all, &v.planted, 4).unwrap(), 1.0);

        // a single frame (frame 0) misses every planted frame
        let two = run_linear_frames(&v, 1, &w, &p).unwrap();
        assert_eq!(planted_recall(&two, &v.planted, 4).unwrap(), 0.0);

        assert!(planted_recall(&all, &BTreeSet::new(), 4).is_err());
    }
}
