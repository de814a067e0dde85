//! Synthetic desk-scale stand-in for a multi-view multimodal tracking
//! dataset: arrangements of sensor nodes observe a single target moving in a
//! plane, each node rendering camera-like, depth-like and radar-like frames
//! at 15 Hz.

pub mod dataset;
pub mod render;

pub use dataset::{build_dataset, read_frame_file, DatasetSpec, FrameStore, SplitName};
pub use render::{in_frustum, invert_observation, render_frame, ClutterField, RenderParams};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Arena, NodePose};
use crate::nn::fnv1a;

/// Synchronized frame rate shared by every modality.
pub const FRAME_RATE_HZ: f64 = 15.0;
/// Height of the plane the target moves in, meters.
pub const TARGET_Z: f64 = 0.1;
/// Default node count per view.
pub const DEFAULT_NODES: usize = 3;

/// Sensor modalities produced by each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    CameraLike,
    DepthLike,
    RadarLike,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::CameraLike, Modality::DepthLike, Modality::RadarLike];

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Modality::CameraLike | Modality::DepthLike => (48, 64),
            Modality::RadarLike => (32, 32),
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Modality::CameraLike => 0,
            Modality::DepthLike => 1,
            Modality::RadarLike => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Modality> {
        match tag {
            0 => Ok(Modality::CameraLike),
            1 => Ok(Modality::DepthLike),
            2 => Ok(Modality::RadarLike),
            other => Err(Error::Dataset(format!("unknown modality tag {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Modality::CameraLike => "camera_like",
            Modality::DepthLike => "depth_like",
            Modality::RadarLike => "radar_like",
        }
    }
}

/// One observation from one node in one modality.
#[derive(Debug, Clone)]
pub struct ModalityFrame {
    pub modality: Modality,
    pub node_index: usize,
    pub data: Array2<f32>,
}

/// One time-synchronized set of observations from every node plus the
/// target's ground-truth world position.
#[derive(Debug, Clone)]
pub struct MultimodalFrame {
    pub timestamp: f64,
    /// `frames[node][modality order: camera, depth, radar]`
    pub nodes: Vec<Vec<ModalityFrame>>,
    /// World-frame target position (x, y), meters.
    pub target_gt: [f64; 2],
}

/// One arrangement of sensor nodes (a "view").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewConfiguration {
    pub config_id: String,
    pub node_poses: Vec<NodePose>,
    pub rng_seed: u64,
}

impl ViewConfiguration {
    /// Minimum pairwise distance between node positions, meters.
    pub const MIN_NODE_SPACING: f64 = 0.1;

    pub fn validate(&self, arena: &Arena) -> Result<()> {
        if self.node_poses.is_empty() {
            return Err(Error::InvalidInput("view needs at least one node".into()));
        }
        for pose in &self.node_poses {
            if !arena.contains(pose.position) {
                return Err(Error::InvalidInput(format!(
                    "node position {:?} outside arena",
                    pose.position
                )));
            }
        }
        for i in 0..self.node_poses.len() {
            for j in (i + 1)..self.node_poses.len() {
                let a = self.node_poses[i].position;
                let b = self.node_poses[j].position;
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                    .sqrt();
                if d <= Self::MIN_NODE_SPACING {
                    return Err(Error::InvalidInput(format!(
                        "nodes {i} and {j} too close: {d:.3} m"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Trajectory flavors of the moving target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Circular,
    RandomWalk,
}

/// Uniformly sampled target path inside the arena at constant height.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub rate_hz: f64,
    /// `(t_seconds, world position)` samples, uniformly spaced at `1/rate`.
    pub samples: Vec<(f64, [f64; 3])>,
}

/// Samples a node arrangement: perimeter positions at sensor heights,
/// oriented toward random points in the central half of the arena.
/// Deterministic given the seed.
pub fn sample_configuration(seed: u64, arena: &Arena, n_nodes: usize) -> Result<ViewConfiguration> {
    if n_nodes < 1 {
        return Err(Error::InvalidInput("n_nodes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"view-config"));
    let o = arena.origin;
    let (ex, ey) = (arena.x_extent, arena.y_extent);
    let band = 0.6_f64.min(ex / 4.0).min(ey / 4.0); // distance-from-wall band

    let mut poses: Vec<NodePose> = Vec::with_capacity(n_nodes);
    let mut attempts = 0;
    while poses.len() < n_nodes {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Generation(format!(
                "node spacing unsatisfiable after {attempts} attempts"
            )));
        }
        // A point in the perimeter band: pick a wall, slide along it.
        let wall = rng.random_range(0..4u8);
        let along: f64 = rng.random_range(0.0..1.0);
        let off: f64 = rng.random_range(0.15..band);
        let (x, y) = match wall {
            0 => (o[0] + off, o[1] + along * ey),
            1 => (o[0] + ex - off, o[1] + along * ey),
            2 => (o[0] + along * ex, o[1] + off),
            _ => (o[0] + along * ex, o[1] + ey - off),
        };
        let z = rng.random_range(0.5..1.5);
        // Aim point in the central half of the floor plan.
        let aim = [
            o[0] + ex * rng.random_range(0.25..0.75),
            o[1] + ey * rng.random_range(0.25..0.75),
            rng.random_range(0.05..0.4),
        ];
        let pose = NodePose::looking_at([x, y, z], aim)?;
        let spaced = poses.iter().all(|p| {
            let d = ((p.position[0] - x).powi(2)
                + (p.position[1] - y).powi(2)
                + (p.position[2] - z).powi(2))
            .sqrt();
            d > ViewConfiguration::MIN_NODE_SPACING
        });
        if spaced {
            poses.push(pose);
        }
    }
    let config = ViewConfiguration {
        config_id: format!("cfg_{seed:016x}"),
        node_poses: poses,
        rng_seed: seed,
    };
    config.validate(arena)?;
    Ok(config)
}

/// Maximum target speed, m/s.
pub const MAX_TARGET_SPEED: f64 = 1.0;

/// Generates the target path. Circular paths orbit an in-arena circle at
/// constant angular velocity; random walks are velocity-smoothed and
/// reflected at the arena walls, never exceeding [`MAX_TARGET_SPEED`].
pub fn generate_trajectory(
    kind: TrajectoryKind,
    duration_s: f64,
    rate_hz: f64,
    seed: u64,
    arena: &Arena,
) -> Result<Trajectory> {
    if duration_s <= 0.0 || rate_hz <= 0.0 {
        return Err(Error::InvalidInput(
            "trajectory duration and rate must be positive".into(),
        ));
    }
    let n = (duration_s * rate_hz).round() as usize;
    let dt = 1.0 / rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"trajectory"));
    let o = arena.origin;
    let (ex, ey) = (arena.x_extent, arena.y_extent);
    let margin = 0.5;

    let mut samples = Vec::with_capacity(n);
    match kind {
        TrajectoryKind::Circular => {
            let rmax = (ex.min(ey) / 2.0 - margin).max(0.4);
            let radius = rng.random_range((0.4 * rmax).max(0.3)..rmax);
            let cx = o[0] + ex / 2.0 + rng.random_range(-0.2..0.2);
            let cy = o[1] + ey / 2.0 + rng.random_range(-0.2..0.2);
            let speed = rng.random_range(0.3..0.9_f64).min(MAX_TARGET_SPEED);
            let omega = speed / radius;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for i in 0..n {
                let t = i as f64 * dt;
                let a = phase + dir * omega * t;
                samples.push((t, [cx + radius * a.cos(), cy + radius * a.sin(), TARGET_Z]));
            }
        }
        TrajectoryKind::RandomWalk => {
            let mut pos = [
                o[0] + ex * rng.random_range(0.3..0.7),
                o[1] + ey * rng.random_range(0.3..0.7),
                TARGET_Z,
            ];
            let mut vel = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let (lo_x, hi_x) = (o[0] + margin, o[0] + ex - margin);
            let (lo_y, hi_y) = (o[1] + margin, o[1] + ey - margin);
            for i in 0..n {
                let t = i as f64 * dt;
                samples.push((t, pos));
                vel[0] += rng.random_range(-0.35..0.35);
                vel[1] += rng.random_range(-0.35..0.35);
                let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
                if speed > MAX_TARGET_SPEED {
                    vel[0] *= MAX_TARGET_SPEED / speed;
                    vel[1] *= MAX_TARGET_SPEED / speed;
                }
                pos[0] += vel[0] * dt;
                pos[1] += vel[1] * dt;
                // Reflect at walls; reflection preserves step length.
                if pos[0] < lo_x {
                    pos[0] = 2.0 * lo_x - pos[0];
                    vel[0] = -vel[0];
                } else if pos[0] > hi_x {
                    pos[0] = 2.0 * hi_x - pos[0];
                    vel[0] = -vel[0];
                }
                if pos[1] < lo_y {
                    pos[1] = 2.0 * lo_y - pos[1];
                    vel[1] = -vel[1];
                } else if pos[1] > hi_y {
                    pos[1] = 2.0 * hi_y - pos[1];
                    vel[1] = -vel[1];
                }
            }
        }
    }
    Ok(Trajectory {
        kind,
        rate_hz,
        samples,
    })
}

/// Per-view entry of the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewEntry {
    pub config_id: String,
    pub config: ViewConfiguration,
    pub trajectory_kind: TrajectoryKind,
    pub trajectory_seed: u64,
    pub duration_s: f64,
    pub n_frames: usize,
    /// Frame file path, relative to the manifest's directory.
    pub frame_file: String,
}

/// Manifest describing a generated dataset: splits, view configurations and
/// frame-file references.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub arena: Arena,
    pub rate_hz: f64,
    pub ssim_threshold: f64,
    pub train: Vec<ViewEntry>,
    pub val: Vec<ViewEntry>,
    pub test: Vec<ViewEntry>,
}

impl DatasetManifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn split(&self, name: SplitName) -> &[ViewEntry] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn all_views(&self) -> impl Iterator<Item = (&'static str, &ViewEntry)> {
        self.train
            .iter()
            .map(|v| ("train", v))
            .chain(self.val.iter().map(|v| ("val", v)))
            .chain(self.test.iter().map(|v| ("test", v)))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for (_, v) in self.all_views() {
            if !ids.insert(v.config_id.clone()) {
                return Err(Error::Dataset(format!(
                    "duplicate config_id {}",
                    v.config_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_configuration() {
        let arena = Arena::default_arena();
        let a = sample_configuration(42, &arena, 3).unwrap();
        let b = sample_configuration(42, &arena, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hundred_seeds_satisfy_spacing_invariant() {
        let arena = Arena::default_arena();
        for seed in 0..100 {
            let cfg = sample_configuration(seed, &arena, 3).unwrap();
            cfg.validate(&arena).unwrap();
            for pose in &cfg.node_poses {
                assert!(pose.position[2] >= 0.5 && pose.position[2] <= 1.5);
            }
        }
    }

    #[test]
    fn zero_nodes_rejected() {
        let arena = Arena::default_arena();
        assert!(sample_configuration(1, &arena, 0).is_err());
    }

    #[test]
    fn circular_trajectory_has_constant_radius_and_count() {
        let arena = Arena::default_arena();
        let t = generate_trajectory(TrajectoryKind::Circular, 10.0, 15.0, 7, &arena).unwrap();
        assert_eq!(t.samples.len(), 150);
        // Infer center from the mean, verify constant radius.
        let n = t.samples.len() as f64;
        let cx = t.samples.iter().map(|(_, p)| p[0]).sum::<f64>() / n;
        let cy = t.samples.iter().map(|(_, p)| p[1]).sum::<f64>() / n;
        let r0 = ((t.samples[0].1[0] - cx).powi(2) + (t.samples[0].1[1] - cy).powi(2)).sqrt();
        for (_, p) in &t.samples {
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - r0).abs() < 1e-9, "radius drift: {r} vs {r0}");
        }
    }

    #[test]
    fn random_walk_step_length_bounded() {
        let arena = Arena::default_arena();
        for seed in [0, 1, 2, 99] {
            let t =
                generate_trajectory(TrajectoryKind::RandomWalk, 30.0, 15.0, seed, &arena).unwrap();
            let max_step = MAX_TARGET_SPEED / 15.0 + 1e-12;
            for w in t.samples.windows(2) {
                let d = ((w[1].1[0] - w[0].1[0]).powi(2) + (w[1].1[1] - w[0].1[1]).powi(2)).sqrt();
                assert!(d <= max_step, "step {d} exceeds {max_step}");
            }
            for (_, p) in &t.samples {
                assert!(arena.contains(*p), "walk left the arena: {p:?}");
            }
        }
    }

    #[test]
    fn one_second_at_15hz_gives_15_uniform_samples() {
        let arena = Arena::default_arena();
        let t = generate_trajectory(TrajectoryKind::Circular, 1.0, 15.0, 3, &arena).unwrap();
        assert_eq!(t.samples.len(), 15);
        for (i, (ts, _)) in t.samples.iter().enumerate() {
            assert!((ts - i as f64 / 15.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_rejects_bad_inputs() {
        let arena = Arena::default_arena();
        assert!(generate_trajectory(TrajectoryKind::Circular, 0.0, 15.0, 1, &arena).is_err());
        assert!(generate_trajectory(TrajectoryKind::Circular, 5.0, 0.0, 1, &arena).is_err());
    }
}
