//! Synthetic sensor rendering: pinhole camera and depth frames plus a
//! range-azimuth radar grid, all derived from the node pose and target
//! position with deterministic per-frame noise.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Modality;
use crate::error::{Error, Result};
use crate::geometry::{local_to_world, world_to_local, NodePose};
use crate::nn::fnv1a;

/// Fixed sensor characteristics shared by every node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    /// Camera/depth image height and width, pixels.
    pub img_h: usize,
    pub img_w: usize,
    /// Horizontal field of view, radians (60 degrees).
    pub fov_h: f64,
    /// Additive pixel-noise deviation on camera intensities.
    pub camera_noise: f64,
    /// Multiplicative speckle deviation on radar intensities.
    pub radar_speckle: f64,
    /// Depth background (far plane), meters.
    pub far_plane: f64,
    /// Radar grid size (range bins x azimuth bins).
    pub radar_bins: usize,
    /// Maximum radar range, meters.
    pub radar_max_range: f64,
}

impl Default for RenderParams {
    fn default() -> RenderParams {
        RenderParams {
            img_h: 48,
            img_w: 64,
            fov_h: 60.0_f64.to_radians(),
            camera_noise: 0.02,
            radar_speckle: 0.25,
            far_plane: 15.0,
            radar_bins: 32,
            radar_max_range: 12.0,
        }
    }
}

impl RenderParams {
    /// Same sensors with all stochastic effects disabled.
    pub fn noiseless() -> RenderParams {
        RenderParams {
            camera_noise: 0.0,
            radar_speckle: 0.0,
            ..RenderParams::default()
        }
    }

    pub fn focal(&self) -> f64 {
        (self.img_w as f64 / 2.0) / (self.fov_h / 2.0).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.img_w as f64 / 2.0, self.img_h as f64 / 2.0)
    }
}

/// Target blob width in pixels falls off with distance (nearer looks bigger).
fn blob_sigma(distance: f64) -> f64 {
    (25.0 / distance.max(1e-6)).clamp(1.5, 12.0)
}

/// Projects a world point into pixel coordinates `(u, v)` plus the local
/// forward distance. Returns `None` when the point is behind the sensor.
fn project(params: &RenderParams, pose: &NodePose, p_world: [f64; 3]) -> Option<(f64, f64, [f64; 3])> {
    let local = world_to_local(pose, p_world);
    if local[0] <= 0.05 {
        return None;
    }
    let f = params.focal();
    let (cx, cy) = params.principal_point();
    // Local frame: +x forward, +y left, +z up. Pixel u grows rightward,
    // v grows downward.
    let u = cx - f * (local[1] / local[0]);
    let v = cy - f * (local[2] / local[0]);
    Some((u, v, local))
}

/// Whether the target projects inside the image bounds of a node.
pub fn in_frustum(params: &RenderParams, pose: &NodePose, target: [f64; 3]) -> bool {
    match project(params, pose, target) {
        Some((u, v, _)) => {
            u >= 0.0 && u < params.img_w as f64 && v >= 0.0 && v < params.img_h as f64
        }
        None => false,
    }
}

/// Fixed low-amplitude background pattern, deterministic per
/// (configuration seed, node). Different configurations therefore look
/// different to the structural-similarity split check.
#[derive(Debug, Clone)]
pub struct ClutterField {
    pub field: Array2<f32>,
}

impl ClutterField {
    pub fn new(params: &RenderParams, config_seed: u64, node_index: usize) -> ClutterField {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config_seed ^ fnv1a(b"clutter") ^ (node_index as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let (h, w) = (params.img_h, params.img_w);
        let n_waves = 6;
        let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
            .map(|_| {
                (
                    rng.random_range(0.5..4.0),  // fu cycles across width
                    rng.random_range(0.5..4.0),  // fv cycles across height
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.3..1.0), // relative amplitude
                )
            })
            .collect();
        let mut field = Array2::<f32>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (fu, fv, phase, amp) in &waves {
                    let arg = std::f64::consts::TAU
                        * (fu * j as f64 / w as f64 + fv * i as f64 / h as f64)
                        + phase;
                    acc += amp * arg.cos();
                }
                field[(i, j)] = acc as f32;
            }
        }
        // Normalize to [0, 0.25].
        let min = field.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = field.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = (max - min).max(1e-6);
        field.mapv_inplace(|v| (v - min) / span * 0.25);
        ClutterField { field }
    }
}

/// Renders one modality frame of the target as seen from `pose`.
///
/// Camera: per-configuration clutter plus a Gaussian intensity blob at the
/// projected target (absent when out of frustum) plus pixel noise.
/// Depth: far-plane background; blob footprint pixels carry the Euclidean
/// distance to the target. Radar: Gaussian blob at the target's
/// (range, azimuth) bin with multiplicative speckle.
pub fn render_frame(
    params: &RenderParams,
    pose: &NodePose,
    target: [f64; 3],
    modality: Modality,
    clutter: &ClutterField,
    noise_seed: u64,
) -> Result<super::ModalityFrame> {
    let data = match modality {
        Modality::CameraLike => render_camera(params, pose, target, clutter, noise_seed),
        Modality::DepthLike => render_depth(params, pose, target),
        Modality::RadarLike => render_radar(params, pose, target, noise_seed),
    };
    Ok(super::ModalityFrame {
        modality,
        node_index: usize::MAX, // caller assigns
        data,
    })
}

fn render_camera(
    params: &RenderParams,
    pose: &NodePose,
    target: [f64; 3],
    clutter: &ClutterField,
    noise_seed: u64,
) -> Array2<f32> {
    let (h, w) = (params.img_h, params.img_w);
    let mut img = clutter.field.clone();
    if let Some((u, v, local)) = project(params, pose, target) {
        let dist = (local[0] * local[0] + local[1] * local[1] + local[2] * local[2]).sqrt();
        let sigma = blob_sigma(dist);
        let two_s2 = 2.0 * sigma * sigma;
        let reach = (3.0 * sigma).ceil() as isize;
        let (u0, v0) = (u.round() as isize, v.round() as isize);
        for i in (v0 - reach).max(0)..=(v0 + reach).min(h as isize - 1) {
            for j in (u0 - reach).max(0)..=(u0 + reach).min(w as isize - 1) {
                let du = j as f64 - u;
                let dv = i as f64 - v;
                let val = 0.8 * (-(du * du + dv * dv) / two_s2).exp();
                img[(i as usize, j as usize)] += val as f32;
            }
        }
    }
    if params.camera_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ fnv1a(b"camera-noise"));
        let sigma = params.camera_noise;
        img.mapv_inplace(|v| v + (gauss(&mut rng) * sigma) as f32);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn render_depth(params: &RenderParams, pose: &NodePose, target: [f64; 3]) -> Array2<f32> {
    let (h, w) = (params.img_h, params.img_w);
    let mut img = Array2::<f32>::from_elem((h, w), params.far_plane as f32);
    if let Some((u, v, local)) = project(params, pose, target) {
        let dist = (local[0] * local[0] + local[1] * local[1] + local[2] * local[2]).sqrt();
        let sigma = blob_sigma(dist);
        let reach = (2.0 * sigma).ceil() as isize;
        let (u0, v0) = (u.round() as isize, v.round() as isize);
        for i in (v0 - reach).max(0)..=(v0 + reach).min(h as isize - 1) {
            for j in (u0 - reach).max(0)..=(u0 + reach).min(w as isize - 1) {
                let du = j as f64 - u;
                let dv = i as f64 - v;
                if du * du + dv * dv <= (2.0 * sigma) * (2.0 * sigma) {
                    img[(i as usize, j as usize)] = dist as f32;
                }
            }
        }
    }
    img
}

fn render_radar(
    params: &RenderParams,
    pose: &NodePose,
    target: [f64; 3],
    noise_seed: u64,
) -> Array2<f32> {
    let bins = params.radar_bins;
    let mut img = Array2::<f32>::from_elem((bins, bins), 0.05);
    let local = world_to_local(pose, target);
    let range = (local[0] * local[0] + local[1] * local[1]).sqrt();
    let azimuth = local[1].atan2(local[0]); // left positive
    let half_fov = std::f64::consts::FRAC_PI_2; // radar sees +-90 degrees
    if range < params.radar_max_range && azimuth.abs() < half_fov && local[0] > 0.0 {
        let row = range / params.radar_max_range * bins as f64;
        let col = (azimuth + half_fov) / (2.0 * half_fov) * bins as f64;
        let (sr, sc) = (1.0, 1.4);
        for i in 0..bins {
            for j in 0..bins {
                let dr = i as f64 + 0.5 - row;
                let dc = j as f64 + 0.5 - col;
                let val = 0.9 * (-(dr * dr) / (2.0 * sr * sr) - (dc * dc) / (2.0 * sc * sc)).exp();
                img[(i, j)] += val as f32;
            }
        }
    }
    if params.radar_speckle > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ fnv1a(b"radar-speckle"));
        let s = params.radar_speckle;
        img.mapv_inplace(|v| v * (1.0 + (gauss(&mut rng) * s) as f32).max(0.0));
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream deterministic.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inverse pinhole projection: pixel plus metric distance back to the world
/// point. Exact inverse of the noiseless projection.
pub fn invert_observation(
    params: &RenderParams,
    pixel: (f64, f64),
    depth_value: f64,
    pose: &NodePose,
) -> Result<[f64; 3]> {
    if depth_value <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "depth must be positive, got {depth_value}"
        )));
    }
    let (u, v) = pixel;
    if u < 0.0 || u >= params.img_w as f64 || v < 0.0 || v >= params.img_h as f64 {
        return Err(Error::InvalidInput(format!(
            "pixel ({u}, {v}) outside image bounds"
        )));
    }
    let f = params.focal();
    let (cx, cy) = params.principal_point();
    let dir = [1.0, -(u - cx) / f, -(v - cy) / f];
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let local = [
        dir[0] / norm * depth_value,
        dir[1] / norm * depth_value,
        dir[2] / norm * depth_value,
    ];
    Ok(local_to_world(pose, local))
}
