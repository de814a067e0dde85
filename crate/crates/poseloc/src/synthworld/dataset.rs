//! Dataset generation and the binary frame-file format.
//!
//! A dataset is a manifest (structured text) plus one binary frame file per
//! view. Everything is deterministic given the spec seeds: rebuilding with
//! the same spec produces byte-identical files.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{in_frustum, render_frame, ClutterField, RenderParams};
use super::{
    generate_trajectory, sample_configuration, DatasetManifest, Modality, ModalityFrame,
    MultimodalFrame, Trajectory, TrajectoryKind, ViewConfiguration, ViewEntry, DEFAULT_NODES,
    FRAME_RATE_HZ,
};
use crate::error::{Error, Result};
use crate::geometry::Arena;
use crate::nn::fnv1a;

const FRAME_FILE_MAGIC: u32 = 0x504c_4652; // "PLFR"
const FRAME_FILE_VERSION: u32 = 1;

/// Which dataset split a view belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Counts, durations and seeds defining a dataset build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub arena: Arena,
    pub seed: u64,
    pub n_nodes: usize,
    pub train_views: usize,
    pub val_views: usize,
    pub test_views: usize,
    /// Per-view trajectory duration, seconds.
    pub view_duration_s: f64,
    pub rate_hz: f64,
    /// Cross-split view-similarity ceiling; may need per-deployment tuning.
    pub ssim_threshold: f64,
}

impl Default for DatasetSpec {
    fn default() -> DatasetSpec {
        DatasetSpec {
            arena: Arena::default_arena(),
            seed: 1,
            n_nodes: DEFAULT_NODES,
            train_views: 13,
            val_views: 4,
            test_views: 5,
            view_duration_s: 40.0,
            rate_hz: FRAME_RATE_HZ,
            ssim_threshold: 0.60,
        }
    }
}

impl DatasetSpec {
    /// Small dataset for smoke tests and examples.
    pub fn tiny(seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed,
            train_views: 1,
            val_views: 1,
            test_views: 1,
            view_duration_s: 2.0,
            ..DatasetSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train_views < 1 || self.val_views < 1 || self.test_views < 1 {
            return Err(Error::InvalidInput(
                "each split needs at least one view".into(),
            ));
        }
        if self.view_duration_s <= 0.0 || self.rate_hz <= 0.0 {
            return Err(Error::InvalidInput(
                "duration and rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn view_seed(spec_seed: u64, split: SplitName, idx: usize, retry: u64) -> u64 {
    fnv1a(
        format!("{}/{}/{}/{}", spec_seed, split.as_str(), idx, retry).as_bytes(),
    )
}

fn trajectory_kind_for(idx: usize) -> TrajectoryKind {
    if idx % 2 == 0 {
        TrajectoryKind::Circular
    } else {
        TrajectoryKind::RandomWalk
    }
}

/// Fraction of frames in which the best-covered node sees the target.
fn best_node_coverage(
    params: &RenderParams,
    config: &ViewConfiguration,
    trajectory: &Trajectory,
) -> f64 {
    let mut best = 0.0;
    for pose in &config.node_poses {
        let visible = trajectory
            .samples
            .iter()
            .filter(|(_, p)| in_frustum(params, pose, *p))
            .count();
        let frac = visible as f64 / trajectory.samples.len().max(1) as f64;
        if frac > best {
            best = frac;
        }
    }
    best
}

/// One view candidate: a configuration whose trajectory is localizable
/// (some node keeps the target in frustum in at least 90% of frames).
fn generate_view_config(
    spec: &DatasetSpec,
    params: &RenderParams,
    split: SplitName,
    idx: usize,
    first_retry: u64,
) -> Result<(ViewConfiguration, Trajectory, u64)> {
    let traj_seed = fnv1a(format!("{}/{}/{}/traj", spec.seed, split.as_str(), idx).as_bytes());
    let kind = trajectory_kind_for(idx);
    let trajectory =
        generate_trajectory(kind, spec.view_duration_s, spec.rate_hz, traj_seed, &spec.arena)?;
    for retry in first_retry..first_retry + 50 {
        let seed = view_seed(spec.seed, split, idx, retry);
        let mut config = sample_configuration(seed, &spec.arena, spec.n_nodes)?;
        config.config_id = format!("{}_{:03}", split.as_str(), idx);
        if best_node_coverage(params, &config, &trajectory) >= 0.9 {
            return Ok((config, trajectory, retry));
        }
    }
    Err(Error::Generation(format!(
        "no localizable configuration for {} view {idx}",
        split.as_str()
    )))
}

/// Renders every frame of a view.
pub fn render_view_frames(
    params: &RenderParams,
    config: &ViewConfiguration,
    trajectory: &Trajectory,
) -> Result<Vec<MultimodalFrame>> {
    let clutters: Vec<ClutterField> = (0..config.node_poses.len())
        .map(|n| ClutterField::new(params, config.rng_seed, n))
        .collect();
    trajectory
        .samples
        .par_iter()
        .enumerate()
        .map(|(fi, (t, target))| {
            let mut nodes = Vec::with_capacity(config.node_poses.len());
            for (ni, pose) in config.node_poses.iter().enumerate() {
                let mut mods = Vec::with_capacity(Modality::ALL.len());
                for modality in Modality::ALL {
                    let noise_seed = fnv1a(
                        format!("{}/{}/{}/{}", config.rng_seed, fi, ni, modality.tag()).as_bytes(),
                    );
                    let mut frame =
                        render_frame(params, pose, *target, modality, &clutters[ni], noise_seed)?;
                    frame.node_index = ni;
                    mods.push(frame);
                }
                nodes.push(mods);
            }
            Ok(MultimodalFrame {
                timestamp: *t,
                nodes,
                target_gt: [target[0], target[1]],
            })
        })
        .collect()
}

/// First camera frame of each node, used by the view-similarity check.
pub fn first_camera_frames(
    params: &RenderParams,
    config: &ViewConfiguration,
    trajectory: &Trajectory,
) -> Result<Vec<Array2<f32>>> {
    let target = trajectory.samples[0].1;
    (0..config.node_poses.len())
        .map(|ni| {
            let clutter = ClutterField::new(params, config.rng_seed, ni);
            let noise_seed =
                fnv1a(format!("{}/0/{}/0", config.rng_seed, ni).as_bytes());
            let frame = render_frame(
                params,
                &config.node_poses[ni],
                target,
                Modality::CameraLike,
                &clutter,
                noise_seed,
            )?;
            Ok(frame.data)
        })
        .collect()
}

/// Builds the dataset under `out_dir`: `manifest.json` plus
/// `frames/<split>_<idx>.bin`. The split-similarity gate runs before any
/// frame is written; offending test/val configurations are regenerated up to
/// 20 times before failing hard.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let params = RenderParams::default();
    fs::create_dir_all(out_dir.join("frames"))?;

    struct Candidate {
        split: SplitName,
        idx: usize,
        config: ViewConfiguration,
        trajectory: Trajectory,
        retry: u64,
        cameras: Vec<Array2<f32>>,
    }

    let split_counts = [
        (SplitName::Train, spec.train_views),
        (SplitName::Val, spec.val_views),
        (SplitName::Test, spec.test_views),
    ];
    let mut candidates: Vec<Candidate> = Vec::new();
    for (split, count) in split_counts {
        for idx in 0..count {
            let (config, trajectory, retry) = generate_view_config(spec, &params, split, idx, 0)?;
            let cameras = first_camera_frames(&params, &config, &trajectory)?;
            candidates.push(Candidate {
                split,
                idx,
                config,
                trajectory,
                retry,
                cameras,
            });
        }
    }

    // Split-similarity gate: every cross-split pair must stay under the
    // threshold. The non-train side of an offending pair is regenerated.
    for _attempt in 0..20 {
        let mut worst: Option<(usize, usize, f64)> = None;
        for i in 0..candidates.len() {
            for j in (i + 1)..candidates.len() {
                if candidates[i].split == candidates[j].split {
                    continue;
                }
                let s = crate::evaluation::view_similarity(
                    &candidates[i].cameras,
                    &candidates[j].cameras,
                )?;
                if worst.map_or(true, |(_, _, w)| s > w) {
                    worst = Some((i, j, s));
                }
            }
        }
        let Some((i, j, sim)) = worst else { break };
        if sim < spec.ssim_threshold {
            break;
        }
        // Regenerate the test-side (or otherwise non-train) configuration.
        let offender = match (candidates[i].split, candidates[j].split) {
            (_, SplitName::Test) => j,
            (SplitName::Test, _) => i,
            (SplitName::Train, _) => j,
            _ => i,
        };
        let c = &candidates[offender];
        let (config, trajectory, retry) =
            generate_view_config(spec, &params, c.split, c.idx, c.retry + 1)?;
        let cameras = first_camera_frames(&params, &config, &trajectory)?;
        let (split, idx) = (c.split, c.idx);
        candidates[offender] = Candidate {
            split,
            idx,
            config,
            trajectory,
            retry,
            cameras,
        };
    }

    // Render and write frames, assemble manifest.
    let mut manifest = DatasetManifest {
        format_version: DatasetManifest::FORMAT_VERSION,
        arena: spec.arena,
        rate_hz: spec.rate_hz,
        ssim_threshold: spec.ssim_threshold,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in &candidates {
        let rel = format!("frames/{}_{:03}.bin", c.split.as_str(), c.idx);
        let frames = render_view_frames(&params, &c.config, &c.trajectory)?;
        write_frame_file(&out_dir.join(&rel), &c.config.config_id, &frames)?;
        let entry = ViewEntry {
            config_id: c.config.config_id.clone(),
            config: c.config.clone(),
            trajectory_kind: c.trajectory.kind,
            trajectory_seed: fnv1a(
                format!("{}/{}/{}/traj", spec.seed, c.split.as_str(), c.idx).as_bytes(),
            ),
            duration_s: spec.view_duration_s,
            n_frames: frames.len(),
            frame_file: rel,
        };
        match c.split {
            SplitName::Train => manifest.train.push(entry),
            SplitName::Val => manifest.val.push(entry),
            SplitName::Test => manifest.test.push(entry),
        }
    }
    manifest.validate()?;

    // Final gate on the written artifacts.
    let verdict = crate::evaluation::validate_split(&manifest, out_dir, spec.ssim_threshold)?;
    if !verdict.pass {
        return Err(Error::Generation(format!(
            "split validation failed after regeneration: {} vs {} at {:.3}",
            verdict.worst_pair.0, verdict.worst_pair.1, verdict.max_similarity
        )));
    }

    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Dataset(format!("manifest not found in {}: {e}", dir.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DatasetManifest::FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

// ---- binary frame files ----

fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_frame_file(path: &Path, config_id: &str, frames: &[MultimodalFrame]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_u32(&mut w, FRAME_FILE_MAGIC)?;
    write_u32(&mut w, FRAME_FILE_VERSION)?;
    write_u32(&mut w, frames.len() as u32)?;
    for frame in frames {
        write_record(&mut w, config_id, frame)?;
    }
    w.flush()?;
    Ok(())
}

fn write_record(w: &mut impl Write, config_id: &str, frame: &MultimodalFrame) -> Result<()> {
    w.write_all(&frame.timestamp.to_le_bytes())?;
    if frame.nodes.is_empty() {
        return Err(Error::Dataset("frame with no nodes".into()));
    }
    // config id is carried per record so files are self-describing
    write_u16(w, config_id.len() as u16)?;
    w.write_all(config_id.as_bytes())?;
    w.write_all(&[frame.nodes.len() as u8])?;
    for mods in &frame.nodes {
        if mods.len() != Modality::ALL.len() {
            return Err(Error::Dataset("node missing modalities".into()));
        }
        for m in mods {
            w.write_all(&[m.modality.tag()])?;
            let (r, c) = (m.data.nrows(), m.data.ncols());
            write_u16(w, r as u16)?;
            write_u16(w, c as u16)?;
            for v in m.data.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.write_all(&frame.target_gt[0].to_le_bytes())?;
    w.write_all(&frame.target_gt[1].to_le_bytes())?;
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let b = read_exact_buf(r, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact_buf(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let b = read_exact_buf(r, 8)?;
    Ok(f64::from_le_bytes(b.try_into().unwrap()))
}

fn read_record(r: &mut impl Read) -> Result<MultimodalFrame> {
    let timestamp = read_f64(r)?;
    let cid_len = read_u16(r)? as usize;
    let _cid = read_exact_buf(r, cid_len)?;
    let n_nodes = read_exact_buf(r, 1)?[0] as usize;
    let mut nodes = Vec::with_capacity(n_nodes);
    for ni in 0..n_nodes {
        let mut mods = Vec::with_capacity(Modality::ALL.len());
        for _ in 0..Modality::ALL.len() {
            let tag = read_exact_buf(r, 1)?[0];
            let modality = Modality::from_tag(tag)?;
            let rows = read_u16(r)? as usize;
            let cols = read_u16(r)? as usize;
            let raw = read_exact_buf(r, rows * cols * 4)?;
            let mut data = Vec::with_capacity(rows * cols);
            for chunk in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            mods.push(ModalityFrame {
                modality,
                node_index: ni,
                data: Array2::from_shape_vec((rows, cols), data)
                    .map_err(|e| Error::Dataset(format!("bad frame shape: {e}")))?,
            });
        }
        nodes.push(mods);
    }
    let gx = read_f64(r)?;
    let gy = read_f64(r)?;
    Ok(MultimodalFrame {
        timestamp,
        nodes,
        target_gt: [gx, gy],
    })
}

pub fn read_frame_file(path: &Path) -> Result<Vec<MultimodalFrame>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let magic = read_u32(&mut r)?;
    if magic != FRAME_FILE_MAGIC {
        return Err(Error::Dataset(format!("bad frame-file magic {magic:#x}")));
    }
    let version = read_u32(&mut r)?;
    if version != FRAME_FILE_VERSION {
        return Err(Error::Dataset(format!("unsupported frame-file version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    (0..count).map(|_| read_record(&mut r)).collect()
}

/// Reads only the first record of a frame file.
pub fn read_first_frame(path: &Path) -> Result<MultimodalFrame> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let magic = read_u32(&mut r)?;
    if magic != FRAME_FILE_MAGIC {
        return Err(Error::Dataset(format!("bad frame-file magic {magic:#x}")));
    }
    let _version = read_u32(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    if count == 0 {
        return Err(Error::Dataset("empty frame file".into()));
    }
    read_record(&mut r)
}

/// A split loaded fully into memory for training and evaluation.
pub struct FrameStore {
    pub root: PathBuf,
    pub views: Vec<LoadedView>,
}

pub struct LoadedView {
    pub entry: ViewEntry,
    pub frames: Vec<MultimodalFrame>,
}

impl FrameStore {
    pub fn load(manifest: &DatasetManifest, root: &Path, split: SplitName) -> Result<FrameStore> {
        let views = manifest
            .split(split)
            .iter()
            .map(|entry| {
                let frames = read_frame_file(&root.join(&entry.frame_file))?;
                if frames.len() != entry.n_frames {
                    return Err(Error::Dataset(format!(
                        "{}: expected {} frames, found {}",
                        entry.config_id,
                        entry.n_frames,
                        frames.len()
                    )));
                }
                Ok(LoadedView {
                    entry: entry.clone(),
                    frames,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameStore {
            root: root.to_path_buf(),
            views,
        })
    }

    pub fn total_frames(&self) -> usize {
        self.views.iter().map(|v| v.frames.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn frame_file_roundtrip_is_exact() {
        let spec = DatasetSpec::tiny(3);
        let params = RenderParams::default();
        let (config, trajectory, _) =
            generate_view_config(&spec, &params, SplitName::Train, 0, 0).unwrap();
        let frames = render_view_frames(&params, &config, &trajectory).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("v.bin");
        write_frame_file(&path, &config.config_id, &frames).unwrap();
        let back = read_frame_file(&path).unwrap();
        assert_eq!(back.len(), frames.len());
        for (a, b) in frames.iter().zip(back.iter()) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.target_gt, b.target_gt);
            for (na, nb) in a.nodes.iter().zip(b.nodes.iter()) {
                for (ma, mb) in na.iter().zip(nb.iter()) {
                    assert_eq!(ma.modality, mb.modality);
                    assert_eq!(ma.data, mb.data);
                }
            }
        }
        let first = read_first_frame(&path).unwrap();
        assert_eq!(first.timestamp, frames[0].timestamp);
    }

    #[test]
    fn timestamps_strictly_increasing_uniform() {
        let spec = DatasetSpec::tiny(5);
        let params = RenderParams::default();
        let (config, trajectory, _) =
            generate_view_config(&spec, &params, SplitName::Val, 0, 0).unwrap();
        let frames = render_view_frames(&params, &config, &trajectory).unwrap();
        let dt = 1.0 / spec.rate_hz;
        for w in frames.windows(2) {
            let gap = w[1].timestamp - w[0].timestamp;
            assert!(gap > 0.0);
            assert!((gap - dt).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_views_are_localizable() {
        let spec = DatasetSpec::tiny(7);
        let params = RenderParams::default();
        for split in SplitName::ALL {
            let (config, trajectory, _) =
                generate_view_config(&spec, &params, split, 0, 0).unwrap();
            assert!(best_node_coverage(&params, &config, &trajectory) >= 0.9);
        }
    }

    #[test]
    fn rejects_invalid_spec() {
        let mut spec = DatasetSpec::tiny(1);
        spec.train_views = 0;
        let dir = TempDir::new().unwrap();
        assert!(build_dataset(&spec, dir.path()).is_err());
    }
}
