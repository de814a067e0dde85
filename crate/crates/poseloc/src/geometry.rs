//! Quaternion and rigid-transform math, plus the 7-value pose encoding
//! consumed by every conditioning mechanism.
//!
//! Conventions: quaternion component order is `(w, x, y, z)` with the
//! canonical sign `w >= 0` (tie broken by `x >= 0`), so that `q` and `-q`
//! encode one rotation and pose encodings are deterministic. Node-local
//! frames use +x as the optical/boresight axis, +y left, +z up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit quaternion `(w, x, y, z)` in canonical form (`w >= 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the given components.
    ///
    /// Fails if the norm is so small that the direction is meaningless.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Quaternion> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-9 {
            return Err(Error::InvalidInput(format!(
                "quaternion norm {n} too small to normalize"
            )));
        }
        Ok(Quaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
        .canonicalized())
    }

    /// Rotation of `angle` radians about the (not necessarily unit) `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Quaternion> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-12 {
            return Err(Error::InvalidInput("axis-angle axis is zero".into()));
        }
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        Quaternion::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Flips sign so `w >= 0`, with ties broken by `x >= 0`, then `y`, then `z`.
    pub fn canonicalized(self) -> Quaternion {
        let flip = self.w < 0.0
            || (self.w == 0.0
                && (self.x < 0.0
                    || (self.x == 0.0 && (self.y < 0.0 || (self.y == 0.0 && self.z < 0.0)))));
        if flip {
            Quaternion {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quaternion {
            w: aw * bw - ax * bx - ay * by - az * bz,
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
        }
    }
}

/// Converts a unit quaternion to a 3x3 rotation matrix (row-major).
///
/// The quaternion must be unit within 1e-6; the result is orthonormal with
/// determinant +1.
pub fn quat_to_matrix(q: &Quaternion) -> Result<[[f64; 3]; 3]> {
    let n = q.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "quaternion norm {n} deviates from 1 beyond 1e-6"
        )));
    }
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// A sensor node's rigid-body pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePose {
    pub quaternion: Quaternion,
    /// Position in meters, world frame.
    pub position: [f64; 3],
}

impl NodePose {
    pub fn new(quaternion: Quaternion, position: [f64; 3]) -> NodePose {
        NodePose {
            quaternion: quaternion.canonicalized(),
            position,
        }
    }

    pub fn identity() -> NodePose {
        NodePose {
            quaternion: Quaternion::IDENTITY,
            position: [0.0; 3],
        }
    }

    /// Pose positioned at `position` with its local +x axis pointing at `target`.
    ///
    /// Roll is fixed so the local +z axis stays as close to world +z as
    /// possible (sensors mounted upright).
    pub fn looking_at(position: [f64; 3], target: [f64; 3]) -> Result<NodePose> {
        let f = [
            target[0] - position[0],
            target[1] - position[1],
            target[2] - position[2],
        ];
        let fn_ = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
        if fn_ < 1e-9 {
            return Err(Error::InvalidInput(
                "look-at target coincides with position".into(),
            ));
        }
        let fwd = [f[0] / fn_, f[1] / fn_, f[2] / fn_];
        // left = up_world x fwd, up = fwd x left
        let mut left = [-fwd[1], fwd[0], 0.0];
        let ln = (left[0] * left[0] + left[1] * left[1]).sqrt();
        if ln < 1e-9 {
            // Looking straight up/down; pick an arbitrary horizontal left.
            left = [0.0, 1.0, 0.0];
        } else {
            left = [left[0] / ln, left[1] / ln, 0.0];
        }
        let up = [
            fwd[1] * left[2] - fwd[2] * left[1],
            fwd[2] * left[0] - fwd[0] * left[2],
            fwd[0] * left[1] - fwd[1] * left[0],
        ];
        // Columns of R are the local axes expressed in world coordinates.
        let m = [
            [fwd[0], left[0], up[0]],
            [fwd[1], left[1], up[1]],
            [fwd[2], left[2], up[2]],
        ];
        Ok(NodePose::new(matrix_to_quat(&m), position))
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        quat_to_matrix(&self.quaternion).expect("pose quaternion is unit by construction")
    }
}

/// Rotation matrix (row-major, orthonormal) to canonical unit quaternion.
pub fn matrix_to_quat(m: &[[f64; 3]; 3]) -> Quaternion {
    // Shepperd's method: pick the largest diagonal combination for stability.
    let trace = m[0][0] + m[1][1] + m[2][2];
    let (w, x, y, z) = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        (
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        )
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        (
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        )
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        (
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        )
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        (
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        )
    };
    Quaternion::new(w, x, y, z).expect("orthonormal matrix yields a valid quaternion")
}

/// World point to node-local coordinates: `p_local = R^T (p_world - t)`.
pub fn world_to_local(pose: &NodePose, p_world: [f64; 3]) -> [f64; 3] {
    let d = [
        p_world[0] - pose.position[0],
        p_world[1] - pose.position[1],
        p_world[2] - pose.position[2],
    ];
    mat_t_vec(&pose.rotation_matrix(), d)
}

/// Node-local point to world coordinates: `p_world = R p_local + t`.
pub fn local_to_world(pose: &NodePose, p_local: [f64; 3]) -> [f64; 3] {
    let r = mat_vec(&pose.rotation_matrix(), p_local);
    [
        r[0] + pose.position[0],
        r[1] + pose.position[1],
        r[2] + pose.position[2],
    ]
}

/// Axis-aligned world volume used for pose normalization and trajectory bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    /// World-frame corner with minimal coordinates.
    pub origin: [f64; 3],
    pub x_extent: f64,
    pub y_extent: f64,
    pub z_extent: f64,
}

impl Arena {
    pub fn new(origin: [f64; 3], x_extent: f64, y_extent: f64, z_extent: f64) -> Result<Arena> {
        if x_extent <= 0.0 || y_extent <= 0.0 || z_extent <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "arena extents must be positive, got ({x_extent}, {y_extent}, {z_extent})"
            )));
        }
        Ok(Arena {
            origin,
            x_extent,
            y_extent,
            z_extent,
        })
    }

    /// Default desk-scale arena: 7 m x 5 m x 2.5 m with origin at (0,0,0).
    pub fn default_arena() -> Arena {
        Arena {
            origin: [0.0; 3],
            x_extent: 7.0,
            y_extent: 5.0,
            z_extent: 2.5,
        }
    }

    pub fn extents(&self) -> [f64; 3] {
        [self.x_extent, self.y_extent, self.z_extent]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let e = self.extents();
        (0..3).all(|i| p[i] >= self.origin[i] && p[i] <= self.origin[i] + e[i])
    }

    pub fn center(&self) -> [f64; 3] {
        [
            self.origin[0] + self.x_extent / 2.0,
            self.origin[1] + self.y_extent / 2.0,
            self.origin[2] + self.z_extent / 2.0,
        ]
    }

    pub fn diagonal(&self) -> f64 {
        (self.x_extent * self.x_extent
            + self.y_extent * self.y_extent
            + self.z_extent * self.z_extent)
            .sqrt()
    }
}

/// The 7-value pose encoding: canonical quaternion followed by the position
/// normalized by the arena extents to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseVector7(pub [f64; 7]);

impl PoseVector7 {
    pub fn as_array(&self) -> &[f64; 7] {
        &self.0
    }
}

/// Encodes a node pose as the 7-vector fed to the conditioning networks.
///
/// Fails if the position lies outside the arena.
pub fn encode_pose(pose: &NodePose, arena: &Arena) -> Result<PoseVector7> {
    if !arena.contains(pose.position) {
        return Err(Error::OutOfRange(format!(
            "pose position {:?} outside arena",
            pose.position
        )));
    }
    let q = pose.quaternion.canonicalized();
    let e = arena.extents();
    let mut v = [0.0; 7];
    v[0] = q.w;
    v[1] = q.x;
    v[2] = q.y;
    v[3] = q.z;
    for i in 0..3 {
        v[4 + i] = (pose.position[i] - arena.origin[i]) / e[i];
    }
    Ok(PoseVector7(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut impl Rng) -> Quaternion {
        loop {
            let w: f64 = rng.random_range(-1.0..1.0);
            let x: f64 = rng.random_range(-1.0..1.0);
            let y: f64 = rng.random_range(-1.0..1.0);
            let z: f64 = rng.random_range(-1.0..1.0);
            let n = (w * w + x * x + y * y + z * z).sqrt();
            if n > 0.1 && n < 1.0 {
                return Quaternion::new(w, x, y, z).unwrap();
            }
        }
    }

    /// Independent rotation-matrix construction from the axis-angle form of `q`.
    fn matrix_from_axis_angle_oracle(q: &Quaternion) -> [[f64; 3]; 3] {
        // theta = 2 acos(w); axis = (x,y,z)/sin(theta/2). Rodrigues' formula.
        let w = q.w.clamp(-1.0, 1.0);
        let theta = 2.0 * w.acos();
        let s = (1.0 - w * w).sqrt();
        if s < 1e-12 {
            return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        }
        let a = [q.x / s, q.y / s, q.z / s];
        let (ct, st) = (theta.cos(), theta.sin());
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let kron = if i == j { 1.0 } else { 0.0 };
                // R = cos(t) I + sin(t) [a]_x + (1-cos(t)) a a^T
                let cross = match (i, j) {
                    (0, 1) => -a[2],
                    (0, 2) => a[1],
                    (1, 0) => a[2],
                    (1, 2) => -a[0],
                    (2, 0) => -a[1],
                    (2, 1) => a[0],
                    _ => 0.0,
                };
                m[i][j] = ct * kron + st * cross + (1.0 - ct) * a[i] * a[j];
            }
        }
        m
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let m = quat_to_matrix(&Quaternion::IDENTITY).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((m[i][j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ninety_degree_z_rotation_maps_x_to_y() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = Quaternion::new(h.cos(), 0.0, 0.0, h.sin()).unwrap();
        let m = quat_to_matrix(&q).unwrap();
        let v = mat_vec(&m, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2]).abs() < 1e-12);
    }

    #[test]
    fn quat_matrix_matches_axis_angle_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let m = quat_to_matrix(&q).unwrap();
            let oracle = matrix_from_axis_angle_oracle(&q);
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        (m[i][j] - oracle[i][j]).abs() <= 1e-12,
                        "mismatch at ({i},{j}): {} vs {}",
                        m[i][j],
                        oracle[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal_with_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let m = quat_to_matrix(&q).unwrap();
            // R R^T = I
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_unit_quaternion_rejected_by_matrix_conversion() {
        let q = Quaternion {
            w: 1.0,
            x: 0.5,
            y: 0.0,
            z: 0.0,
        };
        assert!(quat_to_matrix(&q).is_err());
    }

    #[test]
    fn double_cover_matrices_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let neg = Quaternion {
                w: -q.w,
                x: -q.x,
                y: -q.y,
                z: -q.z,
            };
            let a = quat_to_matrix(&q).unwrap();
            let b = quat_to_matrix(&neg).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn world_to_local_identity_pose_passthrough() {
        let pose = NodePose::identity();
        let p = world_to_local(&pose, [1.0, 2.0, 0.0]);
        assert_eq!(p, [1.0, 2.0, 0.0]);
    }

    #[test]
    fn world_to_local_translation_only() {
        let pose = NodePose::new(Quaternion::IDENTITY, [1.0, 0.0, 0.0]);
        let p = world_to_local(&pose, [1.0, 0.0, 0.0]);
        assert_eq!(p, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn local_world_roundtrip_within_1e9() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let pose = NodePose::new(
                random_unit_quat(&mut rng),
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ],
            );
            let p = [
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ];
            let back = local_to_world(&pose, world_to_local(&pose, p));
            for i in 0..3 {
                assert!((back[i] - p[i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn encode_pose_identity_at_origin() {
        let arena = Arena::default_arena();
        let pose = NodePose::identity();
        let v = encode_pose(&pose, &arena).unwrap();
        assert_eq!(v.0, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_pose_far_corner() {
        let arena = Arena::default_arena();
        let pose = NodePose::new(Quaternion::IDENTITY, [7.0, 5.0, 2.5]);
        let v = encode_pose(&pose, &arena).unwrap();
        assert_eq!(v.0, [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn encode_pose_canonicalizes_negated_quaternion() {
        let arena = Arena::default_arena();
        let q = Quaternion::new(-1.0, 0.0, 0.0, 0.0).unwrap();
        let pose = NodePose::new(q, [1.0, 1.0, 1.0]);
        let v = encode_pose(&pose, &arena).unwrap();
        assert_eq!(v.0[0], 1.0);
        assert_eq!(v.0[1], 0.0);
    }

    #[test]
    fn encode_pose_rejects_out_of_arena() {
        let arena = Arena::default_arena();
        let pose = NodePose::new(Quaternion::IDENTITY, [8.0, 0.0, 0.0]);
        assert!(encode_pose(&pose, &arena).is_err());
    }

    #[test]
    fn encode_pose_injective_over_pose_grid() {
        let arena = Arena::default_arena();
        let mut seen: Vec<[f64; 7]> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 0..100 {
            let pose = NodePose::new(
                random_unit_quat(&mut rng),
                [
                    0.5 + 6.0 * ((i % 10) as f64) / 10.0,
                    0.5 + 4.0 * ((i / 10) as f64) / 10.0,
                    1.0,
                ],
            );
            let v = encode_pose(&pose, &arena).unwrap().0;
            for prev in &seen {
                let dist: f64 = v
                    .iter()
                    .zip(prev.iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(dist > 1e-9, "pose encoding collision");
            }
            seen.push(v);
        }
    }

    #[test]
    fn looking_at_points_local_x_toward_target() {
        let pose = NodePose::looking_at([0.0, 0.0, 1.0], [3.0, 2.0, 0.1]).unwrap();
        let local = world_to_local(&pose, [3.0, 2.0, 0.1]);
        let dist = (3.0f64 * 3.0 + 2.0 * 2.0 + 0.81).sqrt();
        assert!((local[0] - dist).abs() < 1e-9);
        assert!(local[1].abs() < 1e-9);
        assert!(local[2].abs() < 1e-9);
    }

    #[test]
    fn matrix_quat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let m = quat_to_matrix(&q).unwrap();
            let q2 = matrix_to_quat(&m);
            let qc = q.canonicalized();
            assert!((q2.w - qc.w).abs() < 1e-9);
            assert!((q2.x - qc.x).abs() < 1e-9);
            assert!((q2.y - qc.y).abs() < 1e-9);
            assert!((q2.z - qc.z).abs() < 1e-9);
        }
    }
}
