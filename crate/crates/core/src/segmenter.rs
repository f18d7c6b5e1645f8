//! Frame sampling, segment construction and `[system ‖ visual ‖ user]`
//! sequence assembly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Matrix, Scalar};
use crate::model::{add_positions, embed_bytes_at, project_visual, ModelConfig, Weights};
use crate::tensor_io::Tensor;

pub const DEFAULT_SYSTEM_PROMPT: &str = "system:classify the action.";
pub const DEFAULT_USER_PROMPT: &str = "user:what action occurs?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    pub system: String,
    pub user: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM_PROMPT.into(),
            user: DEFAULT_USER_PROMPT.into(),
        }
    }
}

/// Patch features of a whole video, `T × patches_per_frame × patch_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokens {
    pub video_id: String,
    pub class_name: Option<String>,
    pub total_frames: usize,
    pub patches_per_frame: usize,
    pub patch_dim: usize,
    pub features: Vec<f32>,
    /// Ground-truth event tokens as `frame * patches_per_frame + patch`.
    pub planted: BTreeSet<u32>,
}

impl VideoTokens {
    pub fn new(
        video_id: impl Into<String>,
        total_frames: usize,
        patches_per_frame: usize,
        patch_dim: usize,
        features: Vec<f32>,
    ) -> Result<Self> {
        if total_frames == 0 {
            return Err(Error::Input("video has no frames".into()));
        }
        if features.len() != total_frames * patches_per_frame * patch_dim {
            return Err(Error::Input(format!(
                "feature length {} does not match {total_frames}×{patches_per_frame}×{patch_dim}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("feature value {i} is not finite")));
        }
        Ok(Self {
            video_id: video_id.into(),
            class_name: None,
            total_frames,
            patches_per_frame,
            patch_dim,
            features,
            planted: BTreeSet::new(),
        })
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        let n = self.patches_per_frame * self.patch_dim;
        &self.features[frame * n..(frame + 1) * n]
    }

    pub fn token_id(&self, frame: usize, patch: usize) -> u32 {
        (frame * self.patches_per_frame + patch) as u32
    }

    fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if self.patches_per_frame != config.patches_per_frame || self.patch_dim != config.patch_dim {
            return Err(Error::Input(format!(
                "video {} has {}×{} patches, model expects {}×{}",
                self.video_id,
                self.patches_per_frame,
                self.patch_dim,
                config.patches_per_frame,
                config.patch_dim
            )));
        }
        Ok(())
    }

    /// Writes `<stem>.srst` and the `<stem>.meta` sidecar into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let tensor = Tensor::new(
            vec![self.total_frames, self.patches_per_frame, self.patch_dim],
            self.features.clone(),
        )?;
        let path = dir.join(format!("{stem}.srst"));
        tensor.write(&path)?;
        let meta_path = path.with_extension("meta");
        fs::write(&meta_path, self.meta_text()).map_err(|e| Error::io(&meta_path, e))?;
        Ok(path)
    }

    fn meta_text(&self) -> String {
        let planted: Vec<String> = self.planted.iter().map(|t| t.to_string()).collect();
        let mut s = String::new();
        writeln!(s, "video_id={}", self.video_id).unwrap();
        writeln!(s, "class={}", self.class_name.as_deref().unwrap_or("")).unwrap();
        writeln!(s, "planted={}", planted.join(",")).unwrap();
        s
    }

    /// Reads a tensor file and its `.meta` sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let tensor = Tensor::read(path)?;
        let [t, p, dp] = tensor.dims[..] else {
            return Err(Error::format(
                path.display().to_string(),
                format!("expected rank 3, got dims {:?}", tensor.dims),
            ));
        };
        let mut video = VideoTokens::new(String::new(), t, p, dp, tensor.data)?;
        let meta_path = path.with_extension("meta");
        let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        for (lineno, line) in meta.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let loc = || format!("{}:{}", meta_path.display(), lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(loc(), "expected key=value"))?;
            match key.trim() {
                "video_id" => video.video_id = value.trim().to_string(),
                "class" => {
                    let v = value.trim();
                    video.class_name = (!v.is_empty()).then(|| v.to_string());
                }
                "planted" => {
                    for tok in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        let id: u32 = tok
                            .parse()
                            .map_err(|_| Error::format(loc(), format!("bad token id {tok:?}")))?;
                        if id as usize >= t * p {
                            return Err(Error::format(loc(), format!("token id {id} out of range")));
                        }
                        video.planted.insert(id);
                    }
                }
                other => return Err(Error::format(loc(), format!("unknown key {other:?}"))),
            }
        }
        if video.video_id.is_empty() {
            return Err(Error::format(meta_path.display().to_string(), "missing video_id"));
        }
        Ok(video)
    }
}

/// Where a visual token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub segment: u32,
    /// Frame position within the segment.
    pub slot: u32,
    /// Frame index in the original video timeline.
    pub frame: u32,
    pub patch: u32,
}

/// Bookkeeping for a `[system ‖ visual ‖ user]` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_sys: usize,
    pub n_user: usize,
    /// One entry per visual row, in sequence order.
    pub provenance: Vec<Provenance>,
}

impl TokenLayout {
    /// Visual token count `N`.
    pub fn n_visual(&self) -> usize {
        self.provenance.len()
    }

    /// Half-open row range of the visual block.
    pub fn visual_span(&self) -> (usize, usize) {
        (self.n_sys, self.n_sys + self.provenance.len())
    }

    /// Sequence length `N' = n_sys + N + n_user`.
    pub fn len(&self) -> usize {
        self.n_sys + self.provenance.len() + self.n_user
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<T> {
    pub hidden: Matrix<T>,
    pub layout: TokenLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch<T> {
    pub sequences: Vec<Sequence<T>>,
}

impl<T> SegmentBatch<T> {
    pub fn n_segments(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_visual(&self) -> usize {
        self.sequences.iter().map(|s| s.layout.n_visual()).sum()
    }
}

/// `count` frame indices spread uniformly over `0..total_frames`:
/// `round(i·(T−1)/(count−1))`, half rounded up.
pub fn sample_frames_linear(total_frames: usize, count: usize) -> Result<Vec<usize>> {
    if total_frames == 0 {
        return Err(Error::Input("cannot sample from a video with no frames".into()));
    }
    if count == 0 {
        return Err(Error::Usage("frame count must be at least 1".into()));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    let span = total_frames - 1;
    let den = count - 1;
    Ok((0..count).map(|i| (2 * i * span + den) / (2 * den)).collect())
}

/// Samples `n_segments × F` frames linearly and splits them into consecutive
/// runs of `F`.
pub fn build_segments(
    video: &VideoTokens,
    config: &ModelConfig,
    n_segments: usize,
) -> Result<Vec<Vec<usize>>> {
    if n_segments == 0 {
        return Err(Error::Usage("segment count must be at least 1".into()));
    }
    let f = config.frames_per_segment;
    let frames = sample_frames_linear(video.total_frames, n_segments * f)?;
    Ok(frames.chunks(f).map(<[usize]>::to_vec).collect())
}

/// Builds one sequence for the given frames. Positions run `0..N'` across
/// the whole sequence.
pub fn assemble_sequence<T: Scalar>(
    prompts: &Prompts,
    video: &VideoTokens,
    frames: &[usize],
    segment_id: usize,
    weights: &Weights<T>,
) -> Result<Sequence<T>> {
    let cfg = &weights.config;
    video.check_config(cfg)?;
    if prompts.system.is_empty() || prompts.user.is_empty() {
        return Err(Error::Input("system and user prompts must be nonempty".into()));
    }
    if let Some(&f) = frames.iter().find(|&&f| f >= video.total_frames) {
        return Err(Error::Input(format!(
            "frame {f} out of range for {} frames",
            video.total_frames
        )));
    }
    let p = cfg.patches_per_frame;
    let sys = embed_bytes_at(&prompts.system, 0, weights)?;
    let n_sys = sys.rows();

    let mut patches = Vec::with_capacity(frames.len() * p * cfg.patch_dim);
    let mut provenance = Vec::with_capacity(frames.len() * p);
    for (slot, &frame) in frames.iter().enumerate() {
        patches.extend(video.frame(frame).iter().map(|&v| T::narrow(v as f64)));
        for patch in 0..p {
            provenance.push(Provenance {
                segment: segment_id as u32,
                slot: slot as u32,
                frame: frame as u32,
                patch: patch as u32,
            });
        }
    }
    let patches = Matrix::from_vec(frames.len() * p, cfg.patch_dim, patches)?;
    let mut visual = project_visual(&patches, weights)?;
    add_positions(&mut visual, n_sys, cfg.position_scale());

    let user = embed_bytes_at(&prompts.user, n_sys + visual.rows(), weights)?;
    let hidden = Matrix::vstack(&[&sys, &visual, &user])?;
    let layout = TokenLayout {
        n_sys,
        n_user: user.rows(),
        provenance,
    };
    debug_assert_eq!(layout.len(), hidden.rows());
    Ok(Sequence { hidden, layout })
}

/// One assembled sequence per segment.
pub fn build_batch<T: Scalar>(
    video: &VideoTokens,
    n_segments: usize,
    prompts: &Prompts,
    weights: &Weights<T>,
) -> Result<SegmentBatch<T>> {
    let segments = build_segments(video, &weights.config, n_segments)?;
    let sequences = segments
        .iter()
        .enumerate()
        .map(|(i, frames)| assemble_sequence(prompts, video, frames, i, weights))
        .collect::<Result<_>>()?;
    Ok(SegmentBatch { sequences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed_bytes, init_weights, positional_encoding};
    use proptest::prelude::*;

    fn video(t: usize, cfg: &ModelConfig) -> VideoTokens {
        let n = t * cfg.patches_per_frame * cfg.patch_dim;
        let features = (0..n).map(|i| ((i % 97) as f32 - 48.0) / 50.0).collect();
        VideoTokens::new("v", t, cfg.patches_per_frame, cfg.patch_dim, features).unwrap()
    }

    // round(i·(T−1)/(count−1)) evaluated in exact rational arithmetic.
    fn formula(t: usize, count: usize) -> Vec<usize> {
        if count == 1 {
            return vec![0];
        }
        (0..count)
            .map(|i| {
                let num = i * (t - 1);
                let den = count - 1;
                let q = num / den;
                if 2 * (num % den) >= den {
                    q + 1
                } else {
                    q
                }
            })
            .collect()
    }

    #[test]
    fn linear_sampling_cases() {
        assert_eq!(sample_frames_linear(16, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(
            sample_frames_linear(100, 16).unwrap(),
            vec![0, 7, 13, 20, 26, 33, 40, 46, 53, 59, 66, 73, 79, 86, 92, 99]
        );
        assert_eq!(sample_frames_linear(1, 4).unwrap(), vec![0; 4]);
        assert!(matches!(sample_frames_linear(0, 4), Err(Error::Input(_))));
        assert!(sample_frames_linear(5, 0).is_err());
    }

    #[test]
    fn segments_cover_video() {
        let cfg = ModelConfig::default();
        let segs = build_segments(&video(80, &cfg), &cfg, 5).unwrap();
        let expect: Vec<Vec<usize>> = (0..5).map(|s| (s * 16..(s + 1) * 16).collect()).collect();
        assert_eq!(segs, expect);

        let v = video(160, &cfg);
        let segs = build_segments(&v, &cfg, 5).unwrap();
        assert_eq!(segs.len(), 5);
        assert!(segs.iter().all(|s| s.len() == 16));
        assert_eq!(segs.concat(), formula(160, 80));

        let one = build_segments(&v, &cfg, 1).unwrap();
        assert_eq!(one, vec![sample_frames_linear(160, 16).unwrap()]);
    }

    #[test]
    fn assembled_layout() {
        let cfg = ModelConfig::default();
        let w = init_weights::<f32>(&cfg).unwrap();
        let v = video(16, &cfg);
        let prompts = Prompts {
            system: "S:".into(),
            user: "Q?".into(),
        };
        let frames: Vec<usize> = (0..16).collect();
        let seq = assemble_sequence(&prompts, &v, &frames, 0, &w).unwrap();
        assert_eq!(seq.layout.len(), 260);
        assert_eq!(seq.hidden.rows(), 260);
        assert_eq!(seq.layout.visual_span(), (2, 258));
        assert_eq!(seq.layout.n_visual(), cfg.tokens_per_segment());
        for (j, p) in seq.layout.provenance.iter().enumerate() {
            assert_eq!((p.slot as usize, p.patch as usize), (j / 16, j % 16));
        }

        // user block carries positions 258, 259
        let user = embed_bytes("Q?", &w).unwrap();
        let pe0 = positional_encoding(0, 64);
        let pe258 = positional_encoding(258, 64);
        for c in 0..64 {
            let sc = cfg.position_scale();
            let expect = user[(0, c)] as f64 + sc * (pe258[c] - pe0[c]);
            assert!((seq.hidden[(258, c)] as f64 - expect).abs() < 1e-5);
        }

        let empty = Prompts {
            system: String::new(),
            ..Prompts::default()
        };
        assert!(matches!(
            assemble_sequence(&empty, &v, &frames, 0, &w),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn provenance_is_injective_over_a_batch() {
        let cfg = ModelConfig::default();
        let w = init_weights::<f32>(&cfg).unwrap();
        // T < N_s·F forces repeated frames
        let v = video(30, &cfg);
        let batch = build_batch(&v, 3, &Prompts::default(), &w).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in &batch.sequences {
            for p in &s.layout.provenance {
                assert!(seen.insert((p.segment, p.slot, p.patch)));
            }
        }
        assert_eq!(seen.len(), 3 * 256);
    }

    #[test]
    fn video_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            patches_per_frame: 2,
            patch_dim: 3,
            ..ModelConfig::default()
        };
        let mut v = video(4, &cfg);
        v.video_id = "clip_7".into();
        v.class_name = Some("Arson".into());
        v.planted = [1, 2, 7].into_iter().collect();
        let path = v.save(dir.path(), "clip_7").unwrap();
        let meta = fs::read_to_string(path.with_extension("meta")).unwrap();
        assert_eq!(meta, "video_id=clip_7\nclass=Arson\nplanted=1,2,7\n");
        assert_eq!(VideoTokens::load(&path).unwrap(), v);

        fs::write(path.with_extension("meta"), "video_id=x\nplanted=99\n").unwrap();
        assert!(matches!(VideoTokens::load(&path), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn segments_concatenate_to_linear_sampling(t in 1usize..400, ns in 1usize..7) {
            let cfg = ModelConfig::default();
            let v = VideoTokens::new("p", t, 1, 1, vec![0.0; t]).unwrap();
            let segs = build_segments(&v, &cfg, ns).unwrap();
            let flat = segs.concat();
            prop_assert_eq!(&flat, &sample_frames_linear(t, ns * 16).unwrap());
            prop_assert_eq!(&flat, &formula(t, ns * 16));
            prop_assert!(flat.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
