//! Procedural carry-and-walk motion: 2d path planning on an inflated
//! occupancy map, a phase-driven stepping gait with planted feet, and
//! two-bone IK for legs and arms. Deterministic given the task seed.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::kinematics::{
    matrix_to_rot6d, yaw_matrix, MotionFrame, ObjectGeom, Skeleton, JOINT_COUNT,
};
use crate::voxel::{CellLabel, VoxelGrid};

pub const FPS: f64 = 30.0;
/// Standing and walking pelvis heights; walking is lower so step reach stays
/// inside the leg's IK budget.
pub const PELVIS_STAND_Z: f64 = 0.95;
pub const PELVIS_WALK_Z: f64 = 0.90;
/// Ankle height with a flat foot on the ground.
pub const ANKLE_Z: f64 = 0.09;
/// Lateral footfall offset (matches the hip offset).
pub const FOOT_LATERAL: f64 = 0.09;
/// Gap kept between the pelvis and the object's near face at pickup/place.
pub const STANDOFF_GAP: f64 = 0.32;

const L_THIGH: f64 = 0.40;
const L_SHIN: f64 = 0.42;
const L_UPPER_ARM: f64 = 0.28;
/// Forearm plus hand segment, targeted collinearly.
const L_FOREARM_HAND: f64 = 0.34;

#[derive(Debug, Clone, Copy)]
pub struct GaitParams {
    pub speed: f64,
    pub step_time: f64,
    pub swing_time: f64,
    pub accel: f64,
    pub turn_rate: f64,
}

impl GaitParams {
    /// Small deterministic per-task variation around the nominal gait.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = crate::util::rng_for(seed, &[0x6a17]);
        GaitParams {
            speed: rng.gen_range(0.62..0.74),
            step_time: rng.gen_range(0.32..0.36),
            swing_time: 0.24,
            accel: 1.4,
            turn_rate: 2.5,
        }
    }
}

// ---------------------------------------------------------------------------
// Small geometry helpers
// ---------------------------------------------------------------------------

fn v3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Rotation whose -z axis points along `dir`, with x steered by `hint`.
fn frame_from_minus_z(dir: Vector3<f64>, hint: Vector3<f64>) -> Matrix3<f64> {
    let c3 = -dir.normalize();
    let mut h = hint - c3 * hint.dot(&c3);
    if h.norm() < 1e-6 {
        let alt = Vector3::new(0.0, 1.0, 0.0);
        h = alt - c3 * alt.dot(&c3);
        if h.norm() < 1e-6 {
            h = Vector3::new(1.0, 0.0, 0.0) - c3 * c3.x;
        }
    }
    let c1 = h.normalize();
    let c2 = c3.cross(&c1);
    Matrix3::from_columns(&[c1, c2, c3])
}

/// Two-bone IK: unit directions for the upper and lower bone so the chain from
/// `root` reaches (the clamped) `target`, bending toward `pole`.
fn two_bone_ik(
    root: Vector3<f64>,
    target: Vector3<f64>,
    l1: f64,
    l2: f64,
    pole: Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut v = target - root;
    let mut d = v.norm();
    let dmin = (l1 - l2).abs() + 1e-4;
    let dmax = l1 + l2 - 1e-4;
    if d < 1e-9 {
        v = -Vector3::z();
        d = 1e-9;
    }
    let dc = d.clamp(dmin, dmax);
    let vhat = v / d;
    let cos_psi = ((l1 * l1 + dc * dc - l2 * l2) / (2.0 * l1 * dc)).clamp(-1.0, 1.0);
    let psi = cos_psi.acos();
    let mut perp = pole - vhat * pole.dot(&vhat);
    if perp.norm() < 1e-6 {
        let alt = if vhat.z.abs() < 0.9 {
            Vector3::z()
        } else {
            Vector3::x()
        };
        perp = alt - vhat * alt.dot(&vhat);
    }
    let phat = perp.normalize();
    let upper = vhat * psi.cos() + phat * psi.sin();
    let knee = root + upper * l1;
    let eff_target = root + vhat * dc;
    let lower = (eff_target - knee).normalize();
    (upper, lower)
}

// ---------------------------------------------------------------------------
// Pose assembly
// ---------------------------------------------------------------------------

/// Per-frame pose targets in world coordinates.
#[derive(Debug, Clone)]
pub struct PoseTargets {
    pub pelvis: [f64; 3],
    pub yaw: f64,
    pub ankle_l: [f64; 3],
    pub ankle_r: [f64; 3],
    pub hand_l: [f64; 3],
    pub hand_r: [f64; 3],
    pub obj_pos: [f64; 3],
    pub obj_rot: Matrix3<f64>,
    pub has_object: bool,
}

/// Solves joint rotations for the target set via analytic IK; the foot stays
/// flat facing the heading, wrist and hand are kept collinear with the forearm.
pub fn solve_pose(t: &PoseTargets, skel: &Skeleton) -> MotionFrame {
    let rz = yaw_matrix(t.yaw);
    let fwd = rz * Vector3::x();
    let root = v3(t.pelvis);
    let mut rot6d = vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; JOINT_COUNT];
    rot6d[0] = matrix_to_rot6d(&rz).expect("yaw rotation");

    // legs: joints (hip, knee, ankle) = (6,7,8) left, (10,11,12) right
    for (hip_j, ankle_t) in [(6usize, t.ankle_l), (10usize, t.ankle_r)] {
        let hip_off = v3(skel.offset[hip_j]);
        let hip_w = root + rz * hip_off;
        let (thigh, shin) = two_bone_ik(hip_w, v3(ankle_t), L_THIGH, L_SHIN, fwd);
        let g_hip = frame_from_minus_z(thigh, fwd);
        let g_knee = frame_from_minus_z(shin, fwd);
        let local_hip = rz.transpose() * g_hip;
        let local_knee = g_hip.transpose() * g_knee;
        let local_ankle = g_knee.transpose() * rz; // flat foot facing heading
        rot6d[hip_j] = matrix_to_rot6d(&orthonormalize(local_hip)).unwrap();
        rot6d[hip_j + 1] = matrix_to_rot6d(&orthonormalize(local_knee)).unwrap();
        rot6d[hip_j + 2] = matrix_to_rot6d(&orthonormalize(local_ankle)).unwrap();
    }

    // arms: joints (shoulder, elbow) = (14,15) left, (18,19) right;
    // wrist and hand keep identity locals so the hand lands on the 2-bone ray.
    for (sh_j, hand_t, side) in [(14usize, t.hand_l, 1.0), (18usize, t.hand_r, -1.0)] {
        // the spine chain is identity, so the shoulder sits at a fixed offset
        let sh_off = Vector3::new(
            skel.offset[sh_j][0],
            skel.offset[sh_j][1],
            skel.offset[1][2] + skel.offset[2][2] + skel.offset[3][2] + skel.offset[sh_j][2],
        );
        let sh_w = root + rz * sh_off;
        let pole = rz * Vector3::new(-0.7, side * 0.6, -0.2);
        let (upper, fore) = two_bone_ik(sh_w, v3(hand_t), L_UPPER_ARM, L_FOREARM_HAND, pole);
        let g_sh = frame_from_minus_z(upper, fwd);
        let g_el = frame_from_minus_z(fore, fwd);
        let local_sh = rz.transpose() * g_sh;
        let local_el = g_sh.transpose() * g_el;
        rot6d[sh_j] = matrix_to_rot6d(&orthonormalize(local_sh)).unwrap();
        rot6d[sh_j + 1] = matrix_to_rot6d(&orthonormalize(local_el)).unwrap();
    }

    let mut frame = MotionFrame {
        root_pos: t.pelvis,
        joint_rot6d: rot6d,
        obj_pos: t.obj_pos,
        obj_rot: [[0.0; 3]; 3],
        has_object: t.has_object,
    };
    frame.set_obj_rot(&t.obj_rot);
    frame
}

/// Re-orthonormalizes a near-rotation (products of constructed frames drift
/// a few ulps past the strict tolerance).
fn orthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let c1 = m.column(0).normalize();
    let c2r = m.column(1).into_owned();
    let c2 = (c2r - c1 * c2r.dot(&c1)).normalize();
    let c3 = c1.cross(&c2);
    Matrix3::from_columns(&[c1, c2, c3])
}

/// Neutral hanging-hand target relative to the pelvis, world frame.
fn neutral_hand(pelvis: Vector3<f64>, yaw: f64, side: f64, swing: f64) -> [f64; 3] {
    let rz = yaw_matrix(yaw);
    let p = pelvis + rz * Vector3::new(0.08 + 0.16 * swing, side * 0.24, -0.06);
    [p[0], p[1], p[2]]
}

/// Grip points in the object frame: both sides of the face nearest the
/// carrier (-x face), slightly above center.
pub fn grip_points_local(geom: &ObjectGeom) -> [[f64; 3]; 2] {
    let he = geom.half_extents;
    let gy = (he[1] * 0.8).min(0.22);
    let gz = (he[2] * 0.6).min(0.25);
    [[-he[0], gy, gz], [-he[0], -gy, gz]]
}

/// Carried-object pose as a function of the pelvis: held ahead of the chest,
/// rotating with the body, grips at a comfortable height.
pub fn carry_pose(pelvis: [f64; 3], yaw: f64, geom: &ObjectGeom) -> (Matrix3<f64>, [f64; 3]) {
    let he = geom.half_extents;
    let gz = (he[2] * 0.6).min(0.25);
    let rz = yaw_matrix(yaw);
    let center =
        v3(pelvis) + rz * Vector3::new(he[0] + 0.30, 0.0, 0.0) + Vector3::new(0.0, 0.0, 0.10 - gz);
    (rz, [center[0], center[1], center[2]])
}

/// Pelvis height needed to reach grips at the given world height.
fn crouch_pelvis_z(grip_z: f64) -> f64 {
    grip_z.clamp(0.40, PELVIS_STAND_Z)
}

/// World-space grip targets for an object pose.
fn grips_world(geom: &ObjectGeom, rot: &Matrix3<f64>, pos: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let g = grip_points_local(geom);
    let w0 = rot * v3(g[0]) + v3(pos);
    let w1 = rot * v3(g[1]) + v3(pos);
    ([w0[0], w0[1], w0[2]], [w1[0], w1[1], w1[2]])
}

// ---------------------------------------------------------------------------
// 2d planning on an inflated occupancy map
// ---------------------------------------------------------------------------

/// 2d occupancy: a column is blocked when any scene cell with center z in
/// (0.05, 1.9) is Blocked. Inflation is in meters.
pub struct NavGrid {
    pub nx: usize,
    pub ny: usize,
    pub cell: f64,
    pub origin: [f64; 2],
    blocked: Vec<bool>,
}

impl NavGrid {
    pub fn build(scene: &VoxelGrid, inflation: f64) -> NavGrid {
        let spec = scene.spec;
        let (nx, ny) = (spec.dims[0], spec.dims[1]);
        let mut blocked = vec![false; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                let mut b = false;
                for z in 0..spec.dims[2] {
                    let cz = spec.origin[2] + (z as f64 + 0.5) * spec.cell_size;
                    if cz <= 0.05 || cz >= 1.9 {
                        continue;
                    }
                    if scene.get([x, y, z]) == CellLabel::Blocked {
                        b = true;
                        break;
                    }
                }
                blocked[x + nx * y] = b;
            }
        }
        let r = (inflation / spec.cell_size).ceil() as isize;
        let mut inflated = blocked.clone();
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !blocked[x as usize + nx * y as usize] {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (x + dx, y + dy);
                        if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                            continue;
                        }
                        let dist = ((dx * dx + dy * dy) as f64).sqrt() * spec.cell_size;
                        if dist <= inflation {
                            inflated[qx as usize + nx * qy as usize] = true;
                        }
                    }
                }
            }
        }
        NavGrid {
            nx,
            ny,
            cell: spec.cell_size,
            origin: [spec.origin[0], spec.origin[1]],
            blocked: inflated,
        }
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let fx = (p[0] - self.origin[0]) / self.cell;
        let fy = (p[1] - self.origin[1]) / self.cell;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (x, y) = (fx as usize, fy as usize);
        if x >= self.nx || y >= self.ny {
            return None;
        }
        Some((x, y))
    }

    pub fn is_free_at(&self, p: [f64; 2]) -> bool {
        match self.cell_of(p) {
            Some((x, y)) => !self.is_blocked(x, y),
            None => false,
        }
    }

    pub fn is_blocked(&self, x: usize, y: usize) -> bool {
        self.blocked[x + self.nx * y]
    }

    fn center(&self, x: usize, y: usize) -> [f64; 2] {
        [
            self.origin[0] + (x as f64 + 0.5) * self.cell,
            self.origin[1] + (y as f64 + 0.5) * self.cell,
        ]
    }

    /// Shortest 8-connected path (no corner cutting), Dijkstra over the grid,
    /// then two rounds of corner smoothing. Exact endpoints are kept.
    pub fn plan(&self, from: [f64; 2], to: [f64; 2]) -> Option<Vec<[f64; 2]>> {
        let (sx, sy) = self.cell_of(from)?;
        let (tx, ty) = self.cell_of(to)?;
        if self.is_blocked(sx, sy) || self.is_blocked(tx, ty) {
            return None;
        }
        let n = self.nx * self.ny;
        let idx = |x: usize, y: usize| x + self.nx * y;
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = std::collections::BinaryHeap::new();
        dist[idx(sx, sy)] = 0.0;
        heap.push(std::cmp::Reverse((0.0f64.to_bits(), idx(sx, sy))));
        while let Some(std::cmp::Reverse((dbits, u))) = heap.pop() {
            let du = f64::from_bits(dbits);
            if du > dist[u] {
                continue;
            }
            if u == idx(tx, ty) {
                break;
            }
            let (ux, uy) = (u % self.nx, u / self.nx);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (vx, vy) = (ux as isize + dx, uy as isize + dy);
                    if vx < 0 || vy < 0 || vx >= self.nx as isize || vy >= self.ny as isize {
                        continue;
                    }
                    let (vx, vy) = (vx as usize, vy as usize);
                    if self.is_blocked(vx, vy) {
                        continue;
                    }
                    if dx != 0 && dy != 0 && (self.is_blocked(vx, uy) || self.is_blocked(ux, vy)) {
                        continue;
                    }
                    let w = if dx != 0 && dy != 0 {
                        std::f64::consts::SQRT_2
                    } else {
                        1.0
                    };
                    let nd = du + w;
                    let vi = idx(vx, vy);
                    if nd < dist[vi] {
                        dist[vi] = nd;
                        prev[vi] = u;
                        heap.push(std::cmp::Reverse((nd.to_bits(), vi)));
                    }
                }
            }
        }
        if !dist[idx(tx, ty)].is_finite() {
            return None;
        }
        let mut cells = vec![idx(tx, ty)];
        while *cells.last().unwrap() != idx(sx, sy) {
            cells.push(prev[*cells.last().unwrap()]);
        }
        cells.reverse();
        let mut pts: Vec<[f64; 2]> = cells
            .iter()
            .map(|&i| self.center(i % self.nx, i / self.nx))
            .collect();
        *pts.first_mut().unwrap() = from;
        *pts.last_mut().unwrap() = to;
        Some(chaikin(&chaikin(&pts)))
    }
}

/// One round of corner-cutting (endpoints kept).
fn chaikin(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    if pts.len() < 3 {
        return pts.to_vec();
    }
    let mut out = vec![pts[0]];
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        out.push([a[0] * 0.75 + b[0] * 0.25, a[1] * 0.75 + b[1] * 0.25]);
        out.push([a[0] * 0.25 + b[0] * 0.75, a[1] * 0.25 + b[1] * 0.75]);
    }
    out.push(*pts.last().unwrap());
    out
}

/// Arc-length parameterized polyline.
pub struct Polyline {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: Vec<[f64; 2]>) -> Polyline {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        Polyline { pts, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i + 1 >= self.pts.len() {
            return *self.pts.last().unwrap();
        }
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 1e-12 {
            (s - self.cum[i]) / seg
        } else {
            0.0
        };
        [
            self.pts[i][0] * (1.0 - t) + self.pts[i + 1][0] * t,
            self.pts[i][1] * (1.0 - t) + self.pts[i + 1][1] * t,
        ]
    }

    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        let a = self.point_at((s - 0.02).max(0.0));
        let b = self.point_at((s + 0.02).min(self.length()));
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let n = (dx * dx + dy * dy).sqrt();
        if n < 1e-9 {
            [1.0, 0.0]
        } else {
            [dx / n, dy / n]
        }
    }
}

// ---------------------------------------------------------------------------
// Motion builder: phases push frames while feet, hands and the object follow
// persistent state.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
}

struct Swing {
    side: Side,
    from: [f64; 2],
    to: [f64; 2],
    elapsed: f64,
    duration: f64,
}

pub struct MotionBuilder<'s> {
    pub frames: Vec<MotionFrame>,
    skel: &'s Skeleton,
    params: GaitParams,
    geom: ObjectGeom,
    pelvis_xy: [f64; 2],
    pelvis_z: f64,
    yaw: f64,
    anchor_l: [f64; 2],
    anchor_r: [f64; 2],
    swing: Option<Swing>,
    next_side: Side,
    gait_phase: f64,
    /// Explicit hand targets; None = neutral hanging pose with arm swing.
    hand_override: Option<([f64; 3], [f64; 3])>,
    obj_rot: Matrix3<f64>,
    obj_pos: [f64; 3],
    attached: bool,
}

fn lateral_anchors(xy: [f64; 2], yaw: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = yaw.sin_cos();
    let nl = [-s, c];
    (
        [xy[0] + nl[0] * FOOT_LATERAL, xy[1] + nl[1] * FOOT_LATERAL],
        [xy[0] - nl[0] * FOOT_LATERAL, xy[1] - nl[1] * FOOT_LATERAL],
    )
}

impl<'s> MotionBuilder<'s> {
    pub fn new(
        skel: &'s Skeleton,
        params: GaitParams,
        geom: ObjectGeom,
        start_xy: [f64; 2],
        yaw: f64,
        obj_rot: Matrix3<f64>,
        obj_pos: [f64; 3],
    ) -> Self {
        let (al, ar) = lateral_anchors(start_xy, yaw);
        MotionBuilder {
            frames: Vec::new(),
            skel,
            params,
            geom,
            pelvis_xy: start_xy,
            pelvis_z: PELVIS_STAND_Z,
            yaw,
            anchor_l: al,
            anchor_r: ar,
            swing: None,
            next_side: Side::Left,
            gait_phase: 0.0,
            hand_override: None,
            obj_rot,
            obj_pos,
            attached: false,
        }
    }

    fn ankle_pos(&self, side: Side) -> [f64; 3] {
        match (&self.swing, side) {
            (Some(sw), s) if sw.side == s => {
                let u = (sw.elapsed / sw.duration).clamp(0.0, 1.0);
                let t = u * u * (3.0 - 2.0 * u);
                let lift = 0.05 * (std::f64::consts::PI * u).sin();
                [
                    sw.from[0] * (1.0 - t) + sw.to[0] * t,
                    sw.from[1] * (1.0 - t) + sw.to[1] * t,
                    ANKLE_Z + lift,
                ]
            }
            _ => {
                let a = match side {
                    Side::Left => self.anchor_l,
                    Side::Right => self.anchor_r,
                };
                [a[0], a[1], ANKLE_Z]
            }
        }
    }

    fn advance_swing(&mut self) {
        if let Some(sw) = &mut self.swing {
            sw.elapsed += 1.0 / FPS;
            if sw.elapsed >= sw.duration - 1e-9 {
                match sw.side {
                    Side::Left => self.anchor_l = sw.to,
                    Side::Right => self.anchor_r = sw.to,
                }
                self.swing = None;
            }
        }
    }

    fn begin_swing(&mut self, side: Side, to: [f64; 2]) {
        let from = match side {
            Side::Left => self.anchor_l,
            Side::Right => self.anchor_r,
        };
        self.swing = Some(Swing {
            side,
            from,
            to,
            elapsed: 0.0,
            duration: self.params.swing_time,
        });
        self.next_side = match side {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        };
    }

    fn push_frame(&mut self) {
        let pelvis = [self.pelvis_xy[0], self.pelvis_xy[1], self.pelvis_z];
        if self.attached {
            let (r, p) = carry_pose(pelvis, self.yaw, &self.geom);
            self.obj_rot = r;
            self.obj_pos = p;
        }
        let (hand_l, hand_r) = match self.hand_override {
            Some(h) => h,
            None => {
                if self.attached {
                    grips_world(&self.geom, &self.obj_rot, self.obj_pos)
                } else {
                    let s = (self.gait_phase * std::f64::consts::TAU).sin();
                    (
                        neutral_hand(v3(pelvis), self.yaw, 1.0, s),
                        neutral_hand(v3(pelvis), self.yaw, -1.0, -s),
                    )
                }
            }
        };
        let targets = PoseTargets {
            pelvis,
            yaw: self.yaw,
            ankle_l: self.ankle_pos(Side::Left),
            ankle_r: self.ankle_pos(Side::Right),
            hand_l,
            hand_r,
            obj_pos: self.obj_pos,
            obj_rot: self.obj_rot,
            has_object: self.attached,
        };
        self.frames.push(solve_pose(&targets, self.skel));
        self.advance_swing();
    }

    pub fn current_xy(&self) -> [f64; 2] {
        self.pelvis_xy
    }

    pub fn current_yaw(&self) -> f64 {
        self.yaw
    }

    /// Standing still for `n` frames.
    pub fn stand(&mut self, n: usize) {
        for _ in 0..n {
            self.push_frame();
        }
    }

    /// Smoothly moves the pelvis height to `z` over `seconds`.
    fn ramp_pelvis_z(&mut self, z: f64, seconds: f64) {
        let n = (seconds * FPS).round().max(1.0) as usize;
        let z0 = self.pelvis_z;
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let t = u * u * (3.0 - 2.0 * u);
            self.pelvis_z = z0 * (1.0 - t) + z * t;
            self.push_frame();
        }
    }

    /// Turns in place toward `target_yaw`, restepping the feet midway and at
    /// the end so both remain grounded outside the swing windows.
    pub fn turn_to(&mut self, target_yaw: f64) {
        let delta = wrap_angle(target_yaw - self.yaw);
        if delta.abs() < 0.12 {
            self.yaw = target_yaw;
            return;
        }
        let total = (delta.abs() / self.params.turn_rate).max(0.2);
        let n = (total * FPS).ceil() as usize;
        let yaw0 = self.yaw;
        let restep_at = [n / 3, 2 * n / 3 + 1];
        let mut restep_side = Side::Left;
        for k in 1..=n {
            self.yaw = yaw0 + delta * k as f64 / n as f64;
            if restep_at.contains(&k) && self.swing.is_none() {
                let (al, ar) = lateral_anchors(self.pelvis_xy, self.yaw);
                let to = match restep_side {
                    Side::Left => al,
                    Side::Right => ar,
                };
                self.begin_swing(restep_side, to);
                restep_side = match restep_side {
                    Side::Left => Side::Right,
                    Side::Right => Side::Left,
                };
            }
            self.push_frame();
        }
        self.yaw = yaw0 + delta;
        // settle both feet to the final heading
        self.settle_feet();
    }

    /// Brings both feet to the lateral stance for the current pose.
    fn settle_feet(&mut self) {
        let (al, ar) = lateral_anchors(self.pelvis_xy, self.yaw);
        for (side, to) in [(Side::Left, al), (Side::Right, ar)] {
            let cur = match side {
                Side::Left => self.anchor_l,
                Side::Right => self.anchor_r,
            };
            let d = ((cur[0] - to[0]).powi(2) + (cur[1] - to[1]).powi(2)).sqrt();
            if d < 0.02 {
                continue;
            }
            while self.swing.is_some() {
                self.push_frame();
            }
            self.begin_swing(side, to);
            while self.swing.is_some() {
                self.push_frame();
            }
        }
    }

    /// Walks along a smoothed path with a trapezoid speed profile and a
    /// timed alternating step schedule. Ends standing at the path end.
    pub fn walk_path(&mut self, path: &Polyline, end_yaw: Option<f64>) {
        let total = path.length();
        if total < 0.06 {
            if let Some(y) = end_yaw {
                self.turn_to(y);
            }
            return;
        }
        // face the path start direction first
        let t0 = path.tangent_at(0.0);
        self.turn_to(t0[1].atan2(t0[0]));
        self.ramp_pelvis_z(PELVIS_WALK_Z, 0.2);

        let dt = 1.0 / FPS;
        let p = self.params;
        let mut s = 0.0;
        let mut v = 0.0;
        let mut step_clock = 0.0;
        let cycle = p.speed * 2.0 * p.step_time;
        let lead = 0.5 * cycle;
        let mut settled = false;
        let mut guard = 0usize;
        while !settled {
            guard += 1;
            if guard > 100_000 {
                break;
            }
            // trapezoid speed: decelerate to stop exactly at total
            let stop_dist = v * v / (2.0 * p.accel);
            if total - s <= stop_dist + 1e-9 {
                v = (v - p.accel * dt).max(0.0);
            } else {
                v = (v + p.accel * dt).min(p.speed);
            }
            s = (s + v * dt).min(total);
            let xy = path.point_at(s);
            self.pelvis_xy = xy;
            let tan = path.tangent_at(s);
            let target_yaw = tan[1].atan2(tan[0]);
            let dyaw = wrap_angle(target_yaw - self.yaw);
            let max_step = p.turn_rate * dt;
            self.yaw += dyaw.clamp(-max_step, max_step);
            self.gait_phase += dt / (2.0 * p.step_time) * (v / p.speed).max(0.05);
            self.pelvis_z = PELVIS_WALK_Z + 0.012 * (self.gait_phase * std::f64::consts::TAU * 2.0).sin();

            step_clock += dt;
            if v > 0.05 && step_clock >= p.step_time && self.swing.is_none() {
                step_clock = 0.0;
                let s_target = (s + lead).min(total);
                let fwd = path.tangent_at(s_target);
                let yaw_t = fwd[1].atan2(fwd[0]);
                let base = path.point_at(s_target);
                let (al, ar) = lateral_anchors(base, yaw_t);
                let to = match self.next_side {
                    Side::Left => al,
                    Side::Right => ar,
                };
                let side = self.next_side;
                self.begin_swing(side, to);
            }
            self.push_frame();
            if s >= total - 1e-9 && v <= 1e-9 && self.swing.is_none() {
                settled = true;
            }
        }
        self.pelvis_xy = path.point_at(total);
        if let Some(y) = end_yaw {
            self.turn_to(y);
        }
        self.ramp_pelvis_z(PELVIS_STAND_Z, 0.2);
        self.settle_feet();
    }

    /// Reach down, grip the object at its current pose, and lift it into the
    /// carry pose. The object attaches once the hands reach the grips.
    pub fn pickup(&mut self) {
        let floor_rot = self.obj_rot;
        let floor_pos = self.obj_pos;
        let (gl, gr) = grips_world(&self.geom, &floor_rot, floor_pos);
        let grip_z = gl[2].max(gr[2]);
        let crouch_z = crouch_pelvis_z(grip_z);
        // reach: crouch while hands travel to the grips
        let n = (0.4 * FPS).round() as usize;
        let z0 = self.pelvis_z;
        let pelvis = [self.pelvis_xy[0], self.pelvis_xy[1], self.pelvis_z];
        let s0 = (self.gait_phase * std::f64::consts::TAU).sin();
        let h0 = (
            neutral_hand(v3(pelvis), self.yaw, 1.0, s0),
            neutral_hand(v3(pelvis), self.yaw, -1.0, -s0),
        );
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let t = u * u * (3.0 - 2.0 * u);
            self.pelvis_z = z0 * (1.0 - t) + crouch_z * t;
            let lerp3 = |a: [f64; 3], b: [f64; 3]| {
                [
                    a[0] * (1.0 - t) + b[0] * t,
                    a[1] * (1.0 - t) + b[1] * t,
                    a[2] * (1.0 - t) + b[2] * t,
                ]
            };
            self.hand_override = Some((lerp3(h0.0, gl), lerp3(h0.1, gr)));
            self.push_frame();
        }
        // lift: object pose interpolates from the floor pose to the carry pose
        self.attached = true;
        self.hand_override = None;
        let n = (0.4 * FPS).round() as usize;
        let z1 = self.pelvis_z;
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let t = u * u * (3.0 - 2.0 * u);
            self.pelvis_z = z1 * (1.0 - t) + PELVIS_STAND_Z * t;
            let pelvis = [self.pelvis_xy[0], self.pelvis_xy[1], self.pelvis_z];
            let (cr, cp) = carry_pose(pelvis, self.yaw, &self.geom);
            let rot = slerp_yawish(&floor_rot, &cr, t);
            let pos = [
                floor_pos[0] * (1.0 - t) + cp[0] * t,
                floor_pos[1] * (1.0 - t) + cp[1] * t,
                floor_pos[2] * (1.0 - t) + cp[2] * t,
            ];
            // hold the interpolated pose explicitly during the lift
            self.attached = false;
            self.obj_rot = rot;
            self.obj_pos = pos;
            let (gl, gr) = grips_world(&self.geom, &rot, pos);
            self.hand_override = Some((gl, gr));
            self.push_frame_with_object_held();
        }
        self.attached = true;
        self.hand_override = None;
    }

    /// push_frame variant for the lift/lower ramps: has_object is true while
    /// the object pose is driven explicitly rather than by the carry pose.
    fn push_frame_with_object_held(&mut self) {
        let pelvis = [self.pelvis_xy[0], self.pelvis_xy[1], self.pelvis_z];
        let (hand_l, hand_r) = self
            .hand_override
            .unwrap_or_else(|| grips_world(&self.geom, &self.obj_rot, self.obj_pos));
        let targets = PoseTargets {
            pelvis,
            yaw: self.yaw,
            ankle_l: self.ankle_pos(Side::Left),
            ankle_r: self.ankle_pos(Side::Right),
            hand_l,
            hand_r,
            obj_pos: self.obj_pos,
            obj_rot: self.obj_rot,
            has_object: true,
        };
        self.frames.push(solve_pose(&targets, self.skel));
        self.advance_swing();
    }

    /// Lower the carried object to the target pose, release, and stand back up.
    pub fn place(&mut self, goal_rot: Matrix3<f64>, goal_pos: [f64; 3]) {
        let (start_rot, start_pos) = {
            let pelvis = [self.pelvis_xy[0], self.pelvis_xy[1], self.pelvis_z];
            carry_pose(pelvis, self.yaw, &self.geom)
        };
        let (gl, gr) = grips_world(&self.geom, &goal_rot, goal_pos);
        let crouch_z = crouch_pelvis_z(gl[2].max(gr[2]));
        let n = (0.45 * FPS).round() as usize;
        let z0 = self.pelvis_z;
        self.attached = false;
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let t = u * u * (3.0 - 2.0 * u);
            self.pelvis_z = z0 * (1.0 - t) + crouch_z * t;
            let rot = slerp_yawish(&start_rot, &goal_rot, t);
            let pos = [
                start_pos[0] * (1.0 - t) + goal_pos[0] * t,
                start_pos[1] * (1.0 - t) + goal_pos[1] * t,
                start_pos[2] * (1.0 - t) + goal_pos[2] * t,
            ];
            self.obj_rot = rot;
            self.obj_pos = pos;
            let (gl, gr) = grips_world(&self.geom, &rot, pos);
            self.hand_override = Some((gl, gr));
            self.push_frame_with_object_held();
        }
        // exact final pose, release
        self.obj_rot = goal_rot;
        self.obj_pos = goal_pos;
        self.attached = false;
        // stand up, hands back to neutral
        let n = (0.35 * FPS).round() as usize;
        let z1 = self.pelvis_z;
        let (hl0, hr0) = (gl, gr);
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let t = u * u * (3.0 - 2.0 * u);
            self.pelvis_z = z1 * (1.0 - t) + PELVIS_STAND_Z * t;
            let pelvis = [self.pelvis_xy[0], self.pelvis_xy[1], self.pelvis_z];
            let nl = neutral_hand(v3(pelvis), self.yaw, 1.0, 0.0);
            let nr = neutral_hand(v3(pelvis), self.yaw, -1.0, 0.0);
            let lerp3 = |a: [f64; 3], b: [f64; 3]| {
                [
                    a[0] * (1.0 - t) + b[0] * t,
                    a[1] * (1.0 - t) + b[1] * t,
                    a[2] * (1.0 - t) + b[2] * t,
                ]
            };
            self.hand_override = Some((lerp3(hl0, nl), lerp3(hr0, nr)));
            self.push_frame();
        }
        self.hand_override = None;
    }
}

/// Yaw-plane rotation interpolation (the gait only uses z rotations for the
/// object, so interpolating the yaw angle is exact here).
fn slerp_yawish(a: &Matrix3<f64>, b: &Matrix3<f64>, t: f64) -> Matrix3<f64> {
    let ya = a[(1, 0)].atan2(a[(0, 0)]);
    let yb = b[(1, 0)].atan2(b[(0, 0)]);
    yaw_matrix(ya + wrap_angle(yb - ya) * t)
}
