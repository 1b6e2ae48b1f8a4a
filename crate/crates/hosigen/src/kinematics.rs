//! Motion representation, 6D rotation math, forward kinematics for the fixed
//! synthetic 22-joint skeleton, rigid object transforms, and BPS geometry
//! encoding.
//!
//! All types are immutable after construction and operations are pure.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 22;

/// Number of scalars in the per-frame motion feature vector:
/// root_pos(3) + 22 joint rot6d(132) + obj_pos(3) + obj_rot6d(6) + has_object(1).
pub const FRAME_FEATURES: usize = 3 + JOINT_COUNT * 6 + 3 + 6 + 1;

/// One frame of coupled human and object motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    pub root_pos: [f64; 3],
    /// 22 x 6 joint rotations, row-major (first two rotation-matrix columns).
    pub joint_rot6d: Vec<[f64; 6]>,
    pub obj_pos: [f64; 3],
    /// Object rotation, row-major 3x3.
    pub obj_rot: [[f64; 3]; 3],
    pub has_object: bool,
}

impl MotionFrame {
    /// Standing frame at a pelvis position with a given heading (yaw about z).
    pub fn standing(root_pos: [f64; 3], yaw: f64) -> Self {
        let rz = yaw_matrix(yaw);
        let mut joint_rot6d = vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; JOINT_COUNT];
        joint_rot6d[0] = matrix_to_rot6d(&rz).expect("yaw matrix is a rotation");
        MotionFrame {
            root_pos,
            joint_rot6d,
            obj_pos: [0.0; 3],
            obj_rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            has_object: false,
        }
    }

    pub fn obj_rot_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.obj_rot[r][c])
    }

    pub fn set_obj_rot(&mut self, m: &Matrix3<f64>) {
        for r in 0..3 {
            for c in 0..3 {
                self.obj_rot[r][c] = m[(r, c)];
            }
        }
    }
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// An ordered, constant-fps sequence of motion frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<MotionFrame>,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Vec<MotionFrame>, fps: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Data("motion sequence must be non-empty".into()));
        }
        if !(fps > 0.0) {
            return Err(Error::Data(format!("fps must be positive, got {fps}")));
        }
        Ok(MotionSequence { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Fixed synthetic skeleton: parent indices, bone offsets, semantic joint sets
/// and the per-joint sphere radii used as the body proxy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub id: String,
    pub parent: Vec<i32>,
    pub offset: Vec<[f64; 3]>,
    pub joint_radius: Vec<f64>,
    pub joint_names: Vec<String>,
    pub pelvis_joint: usize,
    pub foot_joints: Vec<usize>,
    pub hand_joints: Vec<usize>,
}

#[derive(Deserialize)]
struct SkeletonFileJoint {
    name: String,
    parent: i32,
    offset: [f64; 3],
    radius: f64,
}

#[derive(Deserialize)]
struct SkeletonFile {
    id: String,
    joints: Vec<SkeletonFileJoint>,
    pelvis_joint: usize,
    foot_joints: Vec<usize>,
    hand_joints: Vec<usize>,
}

static SKELETON: OnceLock<Skeleton> = OnceLock::new();

impl Skeleton {
    /// The fixed 22-joint humanoid shipped with the crate.
    pub fn default_human() -> &'static Skeleton {
        SKELETON.get_or_init(|| {
            let raw: SkeletonFile =
                serde_json::from_str(include_str!("../assets/skeleton22.json"))
                    .expect("bundled skeleton asset parses");
            let skel = Skeleton {
                id: raw.id,
                parent: raw.joints.iter().map(|j| j.parent).collect(),
                offset: raw.joints.iter().map(|j| j.offset).collect(),
                joint_radius: raw.joints.iter().map(|j| j.radius).collect(),
                joint_names: raw.joints.iter().map(|j| j.name.clone()).collect(),
                pelvis_joint: raw.pelvis_joint,
                foot_joints: raw.foot_joints,
                hand_joints: raw.hand_joints,
            };
            skel.validate().expect("bundled skeleton is a valid tree");
            skel
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.parent.len() != JOINT_COUNT {
            return Err(Error::Data(format!(
                "skeleton must have {JOINT_COUNT} joints"
            )));
        }
        if self.parent[0] != -1 {
            return Err(Error::Data("joint 0 must be the root".into()));
        }
        for (j, &p) in self.parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Data(format!(
                    "parent of joint {j} must precede it, got {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn max_radius(&self) -> f64 {
        self.joint_radius.iter().cloned().fold(0.0, f64::max)
    }
}

/// Interactive object geometry: BPS encoding, surface sample points in the
/// object frame, and the oriented-box collision proxy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectGeom {
    pub name: String,
    pub half_extents: [f64; 3],
    /// K x 3 surface samples in the object frame (box corners + face grids).
    pub surface_points: Vec<[f64; 3]>,
    /// 1024 x 3 offsets from the fixed basis points to the nearest surface point.
    pub bps: Vec<[f64; 3]>,
}

/// Fixed seed for the shared basis point set (1024 points, uniform in a ball).
pub const BPS_SEED: u64 = 0x0b5e_ed01;
/// Radius of the ball the basis points are drawn from, meters.
pub const BPS_RADIUS: f64 = 0.8;
pub const BPS_COUNT: usize = 1024;

static BPS_BASIS: OnceLock<Vec<[f64; 3]>> = OnceLock::new();

/// The shared basis point set: `BPS_COUNT` points uniform in a ball of radius
/// `BPS_RADIUS`, drawn from the fixed `BPS_SEED`.
pub fn bps_basis() -> &'static [[f64; 3]] {
    BPS_BASIS.get_or_init(|| {
        use rand::Rng;
        let mut rng = crate::util::rng_for(BPS_SEED, &[]);
        let mut out = Vec::with_capacity(BPS_COUNT);
        while out.len() < BPS_COUNT {
            let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
                out.push([p[0] * BPS_RADIUS, p[1] * BPS_RADIUS, p[2] * BPS_RADIUS]);
            }
        }
        out
    })
}

impl ObjectGeom {
    /// Box-shaped object: corners plus a 5x3 sample grid per face (K = 98),
    /// BPS-encoded against the shared basis.
    pub fn new_box(name: &str, half_extents: [f64; 3]) -> Self {
        let surface_points = box_surface_points(half_extents);
        let bps = bps_encode(&surface_points, bps_basis()).expect("non-empty surface");
        ObjectGeom {
            name: name.to_string(),
            half_extents,
            surface_points,
            bps,
        }
    }
}

/// Box corners plus a 5x3 grid on each face, 98 points total.
pub fn box_surface_points(he: [f64; 3]) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(98);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                pts.push([sx * he[0], sy * he[1], sz * he[2]]);
            }
        }
    }
    // Interior 5x3 grid per face (excludes edges so corners stay unique).
    let lin = |n: usize, k: usize| -> f64 { (k as f64 + 1.0) / (n as f64 + 1.0) * 2.0 - 1.0 };
    for axis in 0..3 {
        for side in [-1.0, 1.0] {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for i in 0..5 {
                for j in 0..3 {
                    let mut p = [0.0; 3];
                    p[axis] = side * he[axis];
                    p[u] = lin(5, i) * he[u];
                    p[v] = lin(3, j) * he[v];
                    pts.push(p);
                }
            }
        }
    }
    pts
}

// ---------------------------------------------------------------------------
// 6D rotation representation
// ---------------------------------------------------------------------------

/// Gram-Schmidt completion of the 6D rotation representation into a rotation
/// matrix: c1 = norm(a), c2 = norm(b - (b.c1)c1), c3 = c1 x c2.
pub fn rot6d_to_matrix(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    let na = a.norm();
    if na < 1e-8 {
        return Err(Error::DegenerateRotation);
    }
    let c1 = a / na;
    let u = b - c1 * b.dot(&c1);
    let nu = u.norm();
    if nu < 1e-8 {
        return Err(Error::DegenerateRotation);
    }
    let c2 = u / nu;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// First two columns of a rotation matrix, flattened (column 1 xyz, column 2 xyz).
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<[f64; 6]> {
    let ortho_err = (m.transpose() * m - Matrix3::identity()).norm();
    if ortho_err > 1e-5 || (m.determinant() - 1.0).abs() > 1e-5 {
        return Err(Error::NotARotation);
    }
    Ok([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

// ---------------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------------

/// Joint positions from a frame: p(root) = root_pos, and for each child,
/// p(j) = p(parent) + Rglobal(parent) . offset(j), with Rglobal accumulated
/// down the tree from the 6D joint rotations.
pub fn forward_kinematics(frame: &MotionFrame, skel: &Skeleton) -> Result<Vec<[f64; 3]>> {
    let (pos, _rot) = forward_kinematics_full(frame, skel)?;
    Ok(pos)
}

/// FK that also returns the per-joint global rotations.
pub fn forward_kinematics_full(
    frame: &MotionFrame,
    skel: &Skeleton,
) -> Result<(Vec<[f64; 3]>, Vec<Matrix3<f64>>)> {
    if frame.joint_rot6d.len() != JOINT_COUNT {
        return Err(Error::ShapeMismatch(format!(
            "expected {JOINT_COUNT} joint rotations, got {}",
            frame.joint_rot6d.len()
        )));
    }
    let mut pos = vec![[0.0; 3]; JOINT_COUNT];
    let mut rot = vec![Matrix3::identity(); JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        let local = rot6d_to_matrix(&frame.joint_rot6d[j])?;
        if skel.parent[j] < 0 {
            pos[j] = frame.root_pos;
            rot[j] = local;
        } else {
            let p = skel.parent[j] as usize;
            let off = Vector3::new(skel.offset[j][0], skel.offset[j][1], skel.offset[j][2]);
            let world_off = rot[p] * off;
            pos[j] = [
                pos[p][0] + world_off[0],
                pos[p][1] + world_off[1],
                pos[p][2] + world_off[2],
            ];
            rot[j] = rot[p] * local;
        }
    }
    Ok((pos, rot))
}

/// World positions of the object surface points for a frame carrying the object.
pub fn transform_object(geom: &ObjectGeom, frame: &MotionFrame) -> Result<Vec<[f64; 3]>> {
    if !frame.has_object {
        return Err(Error::NoObject);
    }
    Ok(transform_points(
        &geom.surface_points,
        &frame.obj_rot_matrix(),
        frame.obj_pos,
    ))
}

/// p_world = R . p_local + t for each point.
pub fn transform_points(points: &[[f64; 3]], rot: &Matrix3<f64>, trans: [f64; 3]) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| {
            let v = rot * Vector3::new(p[0], p[1], p[2]);
            [v[0] + trans[0], v[1] + trans[1], v[2] + trans[2]]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Basis point set encoding
// ---------------------------------------------------------------------------

/// Row i = (nearest surface point to basis_i) - basis_i.
pub fn bps_encode(surface_points: &[[f64; 3]], basis: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if surface_points.is_empty() {
        return Err(Error::EmptySurface);
    }
    Ok(basis
        .iter()
        .map(|b| {
            let mut best = surface_points[0];
            let mut best_d = f64::INFINITY;
            for p in surface_points {
                let d = (p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2) + (p[2] - b[2]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = *p;
                }
            }
            [best[0] - b[0], best[1] - b[1], best[2] - b[2]]
        })
        .collect())
}

/// Signed distance from a point to an axis-aligned box centered at the origin
/// (negative inside).
pub fn box_sdf_local(p: [f64; 3], he: [f64; 3]) -> f64 {
    let q = [p[0].abs() - he[0], p[1].abs() - he[1], p[2].abs() - he[2]];
    let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2)).sqrt();
    let inside = q[0].max(q[1]).max(q[2]).min(0.0);
    outside + inside
}

/// Signed distance from a world point to an oriented box (negative inside).
pub fn box_sdf_world(p: [f64; 3], rot: &Matrix3<f64>, center: [f64; 3], he: [f64; 3]) -> f64 {
    let d = Vector3::new(p[0] - center[0], p[1] - center[1], p[2] - center[2]);
    let local = rot.transpose() * d;
    box_sdf_local([local[0], local[1], local[2]], he)
}

// ---------------------------------------------------------------------------
// Motion feature vector <-> frame conversion (the network's view of a frame)
// ---------------------------------------------------------------------------

/// Flattens a frame into the 145-scalar feature vector. The object rotation is
/// stored as 6D inside the feature space.
pub fn frame_to_features(frame: &MotionFrame) -> [f64; FRAME_FEATURES] {
    let mut f = [0.0; FRAME_FEATURES];
    f[0..3].copy_from_slice(&frame.root_pos);
    for j in 0..JOINT_COUNT {
        f[3 + 6 * j..3 + 6 * (j + 1)].copy_from_slice(&frame.joint_rot6d[j]);
    }
    let base = 3 + 6 * JOINT_COUNT;
    f[base..base + 3].copy_from_slice(&frame.obj_pos);
    let r6 =
        matrix_to_rot6d(&frame.obj_rot_matrix()).unwrap_or([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    f[base + 3..base + 9].copy_from_slice(&r6);
    f[base + 9] = if frame.has_object { 1.0 } else { 0.0 };
    f
}

/// Rebuilds a frame from a feature vector. Joint 6D entries are kept raw;
/// the object rotation is re-orthonormalized through Gram-Schmidt (falling
/// back to identity if degenerate), and has_object thresholds at 0.5.
pub fn features_to_frame(f: &[f64]) -> MotionFrame {
    assert_eq!(f.len(), FRAME_FEATURES);
    let base = 3 + 6 * JOINT_COUNT;
    let mut joint_rot6d = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let mut r = [0.0; 6];
        r.copy_from_slice(&f[3 + 6 * j..3 + 6 * (j + 1)]);
        joint_rot6d.push(r);
    }
    let mut r6 = [0.0; 6];
    r6.copy_from_slice(&f[base + 3..base + 9]);
    let obj_rot = rot6d_to_matrix(&r6).unwrap_or_else(|_| Matrix3::identity());
    MotionFrame {
        root_pos: [f[0], f[1], f[2]],
        joint_rot6d,
        obj_pos: [f[base], f[base + 1], f[base + 2]],
        obj_rot: [
            [obj_rot[(0, 0)], obj_rot[(0, 1)], obj_rot[(0, 2)]],
            [obj_rot[(1, 0)], obj_rot[(1, 1)], obj_rot[(1, 2)]],
            [obj_rot[(2, 0)], obj_rot[(2, 1)], obj_rot[(2, 2)]],
        ],
        has_object: f[base + 9] > 0.5,
    }
}

// ---------------------------------------------------------------------------
// Differentiable kinematics: guarded Gram-Schmidt and FK with hand-derived
// vector-Jacobian products. Used by the training tape and by the sampling
// guidance, which chains gradients through these analytically.
//
// Unlike `rot6d_to_matrix`, the guarded variant never errors: norms are
// clamped at GS_EPS so gradients stay finite on raw network output.
// ---------------------------------------------------------------------------

const GS_EPS: f64 = 1e-8;

/// Saved forward state for the Gram-Schmidt VJP.
#[derive(Debug, Clone)]
pub struct GsCache {
    b: Vector3<f64>,
    na: f64,
    c1: Vector3<f64>,
    nu: f64,
    c2: Vector3<f64>,
}

/// Gram-Schmidt completion with clamped norms; returns the matrix and the
/// cache needed for the backward pass.
pub fn gs_guarded(r6: &[f64]) -> (Matrix3<f64>, GsCache) {
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    let na = a.norm().max(GS_EPS);
    let c1 = a / na;
    let u = b - c1 * b.dot(&c1);
    let nu = u.norm().max(GS_EPS);
    let c2 = u / nu;
    let c3 = c1.cross(&c2);
    (
        Matrix3::from_columns(&[c1, c2, c3]),
        GsCache { b, na, c1, nu, c2 },
    )
}

/// VJP of `gs_guarded`: gradient w.r.t. the 6 inputs given dL/dR.
pub fn gs_backward(cache: &GsCache, d_rot: &Matrix3<f64>) -> [f64; 6] {
    let g1d = d_rot.column(0).into_owned();
    let g2d = d_rot.column(1).into_owned();
    let g3 = d_rot.column(2).into_owned();
    // c3 = c1 x c2
    let mut g1 = g1d + cache.c2.cross(&g3);
    let g2 = g2d + g3.cross(&cache.c1);
    // c2 = u / nu with u = b - (b.c1) c1
    let gu = (g2 - cache.c2 * g2.dot(&cache.c2)) / cache.nu;
    let bc1 = cache.b.dot(&cache.c1);
    let guc1 = gu.dot(&cache.c1);
    let gb = gu - cache.c1 * guc1;
    g1 += -cache.b * guc1 - gu * bc1;
    // c1 = a / na
    let ga = (g1 - cache.c1 * g1.dot(&cache.c1)) / cache.na;
    [ga[0], ga[1], ga[2], gb[0], gb[1], gb[2]]
}

/// Saved forward state for the FK VJP over one feature row.
pub struct FkCache {
    pub local: Vec<Matrix3<f64>>,
    pub global: Vec<Matrix3<f64>>,
    pub pos: Vec<[f64; 3]>,
    gs: Vec<GsCache>,
}

/// FK over a raw feature row (root_pos + 22 x rot6d) with guarded rotations.
pub fn fk_forward_cached(features: &[f64], skel: &Skeleton) -> FkCache {
    let mut local = Vec::with_capacity(JOINT_COUNT);
    let mut gs = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let (m, c) = gs_guarded(&features[3 + 6 * j..3 + 6 * (j + 1)]);
        local.push(m);
        gs.push(c);
    }
    let mut global = vec![Matrix3::identity(); JOINT_COUNT];
    let mut pos = vec![[0.0; 3]; JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        if skel.parent[j] < 0 {
            pos[j] = [features[0], features[1], features[2]];
            global[j] = local[j];
        } else {
            let p = skel.parent[j] as usize;
            let off = Vector3::new(skel.offset[j][0], skel.offset[j][1], skel.offset[j][2]);
            let w = global[p] * off;
            pos[j] = [pos[p][0] + w[0], pos[p][1] + w[1], pos[p][2] + w[2]];
            global[j] = global[p] * local[j];
        }
    }
    FkCache {
        local,
        global,
        pos,
        gs,
    }
}

/// VJP of FK: accumulates dL/dfeatures (root + rot6d columns) from per-joint
/// position gradients. `d_pos[j]` is dL/d p_j.
pub fn fk_backward(
    cache: &FkCache,
    skel: &Skeleton,
    d_pos: &[[f64; 3]],
    d_features: &mut [f64],
) {
    let mut dp: Vec<Vector3<f64>> = d_pos
        .iter()
        .map(|g| Vector3::new(g[0], g[1], g[2]))
        .collect();
    let mut d_global = vec![Matrix3::<f64>::zeros(); JOINT_COUNT];
    for j in (0..JOINT_COUNT).rev() {
        if skel.parent[j] < 0 {
            d_features[0] += dp[j][0];
            d_features[1] += dp[j][1];
            d_features[2] += dp[j][2];
            let g6 = gs_backward(&cache.gs[j], &d_global[j]);
            for k in 0..6 {
                d_features[3 + 6 * j + k] += g6[k];
            }
        } else {
            let p = skel.parent[j] as usize;
            let off = Vector3::new(skel.offset[j][0], skel.offset[j][1], skel.offset[j][2]);
            // p_j = p_p + Rw_p . off
            let dpj = dp[j];
            dp[p] += dpj;
            d_global[p] += dpj * off.transpose();
            // Rw_j = Rw_p . R_j
            let carry = d_global[j] * cache.local[j].transpose();
            d_global[p] += carry;
            let d_local = cache.global[p].transpose() * d_global[j];
            let g6 = gs_backward(&cache.gs[j], &d_local);
            for k in 0..6 {
                d_features[3 + 6 * j + k] += g6[k];
            }
        }
    }
}

/// Object pose from a feature row with guarded rotation; returns rotation,
/// translation and the GS cache.
pub fn object_pose_cached(features: &[f64]) -> (Matrix3<f64>, [f64; 3], GsCache) {
    let base = 3 + 6 * JOINT_COUNT;
    let (rot, cache) = gs_guarded(&features[base + 3..base + 9]);
    let t = [features[base], features[base + 1], features[base + 2]];
    (rot, t, cache)
}

/// VJP of `p_world = R.p_local + t` over a set of local points: accumulates
/// dL/dfeatures (obj_pos + obj rot6d columns) from world-point gradients.
pub fn object_pose_backward(
    cache: &GsCache,
    points_local: &[[f64; 3]],
    d_world: &[[f64; 3]],
    d_features: &mut [f64],
) {
    let base = 3 + 6 * JOINT_COUNT;
    let mut d_rot = Matrix3::<f64>::zeros();
    for (p, g) in points_local.iter().zip(d_world) {
        let gv = Vector3::new(g[0], g[1], g[2]);
        let pv = Vector3::new(p[0], p[1], p[2]);
        d_rot += gv * pv.transpose();
        d_features[base] += g[0];
        d_features[base + 1] += g[1];
        d_features[base + 2] += g[2];
    }
    let g6 = gs_backward(cache, &d_rot);
    for k in 0..6 {
        d_features[base + 3 + k] += g6[k];
    }
}

// ---------------------------------------------------------------------------
// Motion file format: JSON lines. The header line carries fps and the skeleton
// identifier; each following line is one frame with named fields.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MotionHeader {
    fps: f64,
    skeleton: String,
}

#[derive(Serialize, Deserialize)]
struct MotionLine {
    root_pos: [f64; 3],
    /// 22x6, flattened row-major.
    joint_rot6d: Vec<f64>,
    obj_pos: [f64; 3],
    /// 3x3, flattened row-major.
    obj_rot: Vec<f64>,
    has_object: bool,
}

pub fn write_motion<W: Write>(seq: &MotionSequence, skel_id: &str, mut w: W) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &MotionHeader {
            fps: seq.fps,
            skeleton: skel_id.to_string(),
        },
    )?;
    w.write_all(b"\n")?;
    for frame in &seq.frames {
        let line = MotionLine {
            root_pos: frame.root_pos,
            joint_rot6d: frame.joint_rot6d.iter().flatten().cloned().collect(),
            obj_pos: frame.obj_pos,
            obj_rot: frame.obj_rot.iter().flatten().cloned().collect(),
            has_object: frame.has_object,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_motion<R: Read>(r: R) -> Result<(MotionSequence, String)> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let header: MotionHeader = serde_json::from_str(
        &lines
            .next()
            .ok_or_else(|| Error::Format("empty motion file".into()))??,
    )?;
    let mut frames = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MotionLine = serde_json::from_str(&line)?;
        if m.joint_rot6d.len() != JOINT_COUNT * 6 || m.obj_rot.len() != 9 {
            return Err(Error::Format("bad frame line shape".into()));
        }
        let joint_rot6d = m
            .joint_rot6d
            .chunks(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect();
        frames.push(MotionFrame {
            root_pos: m.root_pos,
            joint_rot6d,
            obj_pos: m.obj_pos,
            obj_rot: [
                [m.obj_rot[0], m.obj_rot[1], m.obj_rot[2]],
                [m.obj_rot[3], m.obj_rot[4], m.obj_rot[5]],
                [m.obj_rot[6], m.obj_rot[7], m.obj_rot[8]],
            ],
            has_object: m.has_object,
        });
    }
    Ok((MotionSequence::new(frames, header.fps)?, header.skeleton))
}

pub fn save_motion(seq: &MotionSequence, skel_id: &str, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_motion(seq, skel_id, BufWriter::new(f))
}

pub fn load_motion(path: &Path) -> Result<(MotionSequence, String)> {
    let f = std::fs::File::open(path)?;
    read_motion(f)
}
