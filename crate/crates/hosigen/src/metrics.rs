//! Evaluation suite: goal errors and success, foot sliding, scene penetration
//! for human and object, human-object interaction metrics, and timing.
//!
//! All functions are pure; evaluation across tasks is embarrassingly parallel.

use nalgebra::Matrix3;

use crate::kinematics::{
    box_sdf_world, forward_kinematics, transform_points, MotionSequence, ObjectGeom, Skeleton,
};
use crate::voxel::{CellLabel, DistanceField, ObjectPolicy, VoxelGrid};
use crate::Result;

/// Success threshold on both goal distances, meters.
pub const SUCCESS_THRESHOLD: f64 = 0.10;
/// Hand-object contact threshold, meters.
pub const CONTACT_THRESHOLD: f64 = 0.05;
/// Foot-height scale H in the sliding weight 2 - 2^(h/H).
pub const FOOT_HEIGHT_SCALE: f64 = 0.05;

/// One evaluated task.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MetricsReport {
    pub t_h: f64,
    pub t_o: f64,
    pub success: bool,
    pub fs: f64,
    pub c_pct: f64,
    pub p_body: f64,
    pub hs: PenetrationTriple,
    pub os: PenetrationTriple,
    pub aits: f64,
    pub fps: f64,
    pub contact_precision: Option<f64>,
    pub contact_recall: Option<f64>,
    pub contact_f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct PenetrationTriple {
    /// Mean per-frame penetration depth sum, meters.
    pub p_mean: f64,
    /// Max per-frame penetration depth sum, meters.
    pub p_max: f64,
    /// Percentage of frames with any penetration.
    pub p_fpct: f64,
}

/// Final-frame goal errors: horizontal pelvis distance and 3d object-centroid
/// distance. Success requires both below the 10 cm threshold; sequences
/// without an object goal score t_o = 0.
pub fn goal_errors(
    seq: &MotionSequence,
    pelvis_goal: [f64; 2],
    object_goal: Option<[f64; 3]>,
) -> (f64, f64, bool) {
    let last = seq.frames.last().expect("non-empty sequence");
    let t_h = ((last.root_pos[0] - pelvis_goal[0]).powi(2)
        + (last.root_pos[1] - pelvis_goal[1]).powi(2))
    .sqrt();
    let t_o = match object_goal {
        Some(g) => ((last.obj_pos[0] - g[0]).powi(2)
            + (last.obj_pos[1] - g[1]).powi(2)
            + (last.obj_pos[2] - g[2]).powi(2))
        .sqrt(),
        None => 0.0,
    };
    let success = t_h < SUCCESS_THRESHOLD && t_o < SUCCESS_THRESHOLD;
    (t_h, t_o, success)
}

/// Ground-proximity weight for foot sliding: 2 - 2^(h/H), clamped to [0, 1].
fn slide_weight(height: f64) -> f64 {
    (2.0 - (height / FOOT_HEIGHT_SCALE).exp2()).clamp(0.0, 1.0)
}

/// Foot sliding: mean over consecutive frame pairs of the summed horizontal
/// foot-joint displacement weighted by ground proximity of the earlier frame,
/// scaled by 10 to match the usual table convention (a grounded foot sliding
/// 1 cm per frame scores 0.1).
pub fn foot_sliding(seq: &MotionSequence, skel: &Skeleton) -> Result<f64> {
    if seq.len() < 2 {
        return Ok(0.0);
    }
    let mut prev = forward_kinematics(&seq.frames[0], skel)?;
    let mut total = 0.0;
    for f in 1..seq.len() {
        let cur = forward_kinematics(&seq.frames[f], skel)?;
        for &j in &skel.foot_joints {
            let h = prev[j][2] - skel.joint_radius[j];
            let dx = cur[j][0] - prev[j][0];
            let dy = cur[j][1] - prev[j][1];
            total += slide_weight(h) * (dx * dx + dy * dy).sqrt();
        }
        prev = cur;
    }
    Ok(10.0 * total / (seq.len() - 1) as f64)
}

/// Exact penetration depth of a point: distance from the point to the nearest
/// free-cell cube boundary, zero when the containing cell is free (object
/// cells follow `policy`). Points outside the grid count as non-penetrating.
pub fn point_penetration_depth(
    point: [f64; 3],
    grid: &VoxelGrid,
    field: &DistanceField,
    policy: ObjectPolicy,
) -> f64 {
    let spec = grid.spec;
    let Some(cell) = spec.cell_of(point) else {
        return 0.0;
    };
    if grid.is_free(grid.get(cell), policy) {
        return 0.0;
    }
    // The center-distance field bounds the search radius for the nearest free
    // cube: its boundary is at most r0 + sqrt(3)*cell away from the point.
    let r0 = field.dist[spec.index(cell)];
    let radius = r0 + 3f64.sqrt() * spec.cell_size;
    let reach = (radius / spec.cell_size).ceil() as isize + 1;
    let mut best = f64::INFINITY;
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let c = [
                    cell[0] as isize + dx,
                    cell[1] as isize + dy,
                    cell[2] as isize + dz,
                ];
                if c.iter().any(|&v| v < 0)
                    || c[0] >= spec.dims[0] as isize
                    || c[1] >= spec.dims[1] as isize
                    || c[2] >= spec.dims[2] as isize
                {
                    continue;
                }
                let cu = [c[0] as usize, c[1] as usize, c[2] as usize];
                if !grid.is_free(grid.get(cu), policy) {
                    continue;
                }
                let center = spec.cell_center(cu);
                let half = spec.cell_size / 2.0;
                let mut d2 = 0.0;
                for a in 0..3 {
                    let lo = center[a] - half;
                    let hi = center[a] + half;
                    let e = if point[a] < lo {
                        lo - point[a]
                    } else if point[a] > hi {
                        point[a] - hi
                    } else {
                        0.0
                    };
                    d2 += e * e;
                }
                best = best.min(d2.sqrt());
            }
        }
    }
    if best.is_finite() {
        best
    } else {
        // No free cell within the bound (fully blocked neighborhood): fall
        // back to the center-distance value.
        r0
    }
}

/// Scene penetration triple over per-frame point sets: per-frame depth sum,
/// its mean and max over frames, and the percentage of penetrating frames.
pub fn scene_penetration(
    points_per_frame: &[Vec<[f64; 3]>],
    grid: &VoxelGrid,
    field: &DistanceField,
    policy: ObjectPolicy,
) -> PenetrationTriple {
    if points_per_frame.is_empty() {
        return PenetrationTriple::default();
    }
    let mut sums = Vec::with_capacity(points_per_frame.len());
    for pts in points_per_frame {
        let sum: f64 = pts
            .iter()
            .map(|&p| point_penetration_depth(p, grid, field, policy))
            .sum();
        sums.push(sum);
    }
    let n = sums.len() as f64;
    let p_mean = sums.iter().sum::<f64>() / n;
    let p_max = sums.iter().cloned().fold(0.0, f64::max);
    let penetrating = sums.iter().filter(|&&s| s > 0.0).count() as f64;
    PenetrationTriple {
        p_mean,
        p_max,
        p_fpct: 100.0 * penetrating / n,
    }
}

/// Human joint positions per frame (the human's point set for HS penetration).
pub fn human_points_per_frame(
    seq: &MotionSequence,
    skel: &Skeleton,
) -> Result<Vec<Vec<[f64; 3]>>> {
    seq.frames
        .iter()
        .map(|f| forward_kinematics(f, skel))
        .collect()
}

/// Object surface points per frame (the object's point set for OS penetration).
pub fn object_points_per_frame(seq: &MotionSequence, geom: &ObjectGeom) -> Vec<Vec<[f64; 3]>> {
    seq.frames
        .iter()
        .map(|f| transform_points(&geom.surface_points, &f.obj_rot_matrix(), f.obj_pos))
        .collect()
}

/// Human-object interaction metrics. Contact at a frame means the closest
/// hand joint is within 5 cm of the object box surface; C% is the share of
/// manipulation frames in contact. P_body sums joint-sphere penetration depth
/// into the object box over all frames. Optional ground-truth contact labels
/// yield precision/recall/F1.
pub fn ho_metrics(
    seq: &MotionSequence,
    skel: &Skeleton,
    geom: &ObjectGeom,
    gt_contact: Option<&[bool]>,
) -> Result<(f64, f64, Option<(f64, f64, f64)>)> {
    let mut manip_frames = 0usize;
    let mut contact_frames = 0usize;
    let mut p_body = 0.0;
    let mut predicted = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        let pos = forward_kinematics(frame, skel)?;
        let rot: Matrix3<f64> = frame.obj_rot_matrix();
        let min_hand = skel
            .hand_joints
            .iter()
            .map(|&j| box_sdf_world(pos[j], &rot, frame.obj_pos, geom.half_extents).abs())
            .fold(f64::INFINITY, f64::min);
        let in_contact = min_hand < CONTACT_THRESHOLD;
        predicted.push(in_contact && frame.has_object);
        if frame.has_object {
            manip_frames += 1;
            if in_contact {
                contact_frames += 1;
            }
        }
        for j in 0..pos.len() {
            let sdf = box_sdf_world(pos[j], &rot, frame.obj_pos, geom.half_extents);
            let depth = skel.joint_radius[j] - sdf;
            if depth > 0.0 {
                p_body += depth;
            }
        }
    }
    let c_pct = if manip_frames > 0 {
        100.0 * contact_frames as f64 / manip_frames as f64
    } else {
        0.0
    };
    let prf = gt_contact.map(|labels| {
        let tp = predicted
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p && l)
            .count() as f64;
        let fp = predicted
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p && !l)
            .count() as f64;
        let fne = predicted
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| !p && l)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
        let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 1.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1)
    });
    Ok((c_pct, p_body, prf))
}

/// Timing aggregation: mean wall time per task and frames per second of
/// generation wall time.
pub fn timing(task_seconds: &[f64], task_frames: &[usize]) -> (f64, f64) {
    if task_seconds.is_empty() {
        return (0.0, 0.0);
    }
    let total_time: f64 = task_seconds.iter().sum();
    let total_frames: usize = task_frames.iter().sum();
    let aits = total_time / task_seconds.len() as f64;
    let fps = if total_time > 0.0 {
        total_frames as f64 / total_time
    } else {
        0.0
    };
    (aits, fps)
}

/// L2-style differences against a paired ground-truth sequence: mean per
/// joint position error, root translation error, object translation error
/// and object rotation geodesic error (radians). Regression-test helper.
pub fn gt_difference(
    seq: &MotionSequence,
    gt: &MotionSequence,
    skel: &Skeleton,
) -> Result<(f64, f64, f64, f64)> {
    let n = seq.len().min(gt.len());
    let mut mpjpe = 0.0;
    let mut t_root = 0.0;
    let mut t_obj = 0.0;
    let mut o_obj = 0.0;
    for f in 0..n {
        let pa = forward_kinematics(&seq.frames[f], skel)?;
        let pb = forward_kinematics(&gt.frames[f], skel)?;
        let mut jsum = 0.0;
        for j in 0..pa.len() {
            jsum += dist3(pa[j], pb[j]);
        }
        mpjpe += jsum / pa.len() as f64;
        t_root += dist3(seq.frames[f].root_pos, gt.frames[f].root_pos);
        t_obj += dist3(seq.frames[f].obj_pos, gt.frames[f].obj_pos);
        let ra = seq.frames[f].obj_rot_matrix();
        let rb = gt.frames[f].obj_rot_matrix();
        let trace = (ra.transpose() * rb).trace();
        o_obj += ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    }
    let nf = n as f64;
    Ok((mpjpe / nf, t_root / nf, t_obj / nf, o_obj / nf))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distance field for penetration queries: object-occupied cells follow the
/// policy used for the queries themselves.
pub fn penetration_field(grid: &VoxelGrid, policy: ObjectPolicy) -> Result<DistanceField> {
    crate::voxel::distance_to_free(grid, policy)
}

/// True when every joint sphere of the posed human clears the blocked cells.
pub fn pose_collision_free(
    frame: &crate::kinematics::MotionFrame,
    skel: &Skeleton,
    grid: &VoxelGrid,
) -> Result<bool> {
    let pos = forward_kinematics(frame, skel)?;
    for (j, p) in pos.iter().enumerate() {
        if !sphere_clear(*p, skel.joint_radius[j], grid) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Sphere-vs-blocked-cube overlap test. Spheres poking outside the grid
/// volume count as colliding (outside is conservatively blocked).
pub fn sphere_clear(center: [f64; 3], radius: f64, grid: &VoxelGrid) -> bool {
    let spec = grid.spec;
    let maxc = spec.max_corner();
    for a in 0..3 {
        if center[a] - radius < spec.origin[a] - 1e-9 || center[a] + radius > maxc[a] + 1e-9 {
            return false;
        }
    }
    let reach = (radius / spec.cell_size).ceil() as isize + 1;
    let Some(c0) = spec.cell_of(center) else {
        return false;
    };
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let c = [
                    c0[0] as isize + dx,
                    c0[1] as isize + dy,
                    c0[2] as isize + dz,
                ];
                if c.iter().any(|&v| v < 0)
                    || c[0] >= spec.dims[0] as isize
                    || c[1] >= spec.dims[1] as isize
                    || c[2] >= spec.dims[2] as isize
                {
                    continue;
                }
                let cu = [c[0] as usize, c[1] as usize, c[2] as usize];
                if grid.get(cu) != CellLabel::Blocked {
                    continue;
                }
                let cc = spec.cell_center(cu);
                let half = spec.cell_size / 2.0;
                let mut d2 = 0.0;
                for a in 0..3 {
                    let e = (center[a] - (cc[a] + half))
                        .max((cc[a] - half) - center[a])
                        .max(0.0);
                    d2 += e * e;
                }
                if d2 < radius * radius {
                    return false;
                }
            }
        }
    }
    true
}

/// True when an oriented box pose overlaps no blocked cell (checked by cell
/// centers within the box, plus the box's own surface points).
pub fn box_collision_free(
    center: [f64; 3],
    rot: &Matrix3<f64>,
    he: [f64; 3],
    surface_points: &[[f64; 3]],
    grid: &VoxelGrid,
) -> bool {
    // surface points and center must be in free cells
    let pts = transform_points(surface_points, rot, center);
    for p in std::iter::once(&center).chain(pts.iter()) {
        if grid.label_at(*p) == CellLabel::Blocked {
            return false;
        }
    }
    // any blocked cell whose center lies inside the box also collides
    let spec = grid.spec;
    let r = (he[0].powi(2) + he[1].powi(2) + he[2].powi(2)).sqrt();
    if let Some(c0) = spec.cell_of(center) {
        let reach = (r / spec.cell_size).ceil() as isize + 1;
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let c = [
                        c0[0] as isize + dx,
                        c0[1] as isize + dy,
                        c0[2] as isize + dz,
                    ];
                    if c.iter().any(|&v| v < 0)
                        || c[0] >= spec.dims[0] as isize
                        || c[1] >= spec.dims[1] as isize
                        || c[2] >= spec.dims[2] as isize
                    {
                        continue;
                    }
                    let cu = [c[0] as usize, c[1] as usize, c[2] as usize];
                    if grid.get(cu) != CellLabel::Blocked {
                        continue;
                    }
                    let cc = spec.cell_center(cu);
                    if box_sdf_world(cc, rot, center, he) < 0.0 {
                        return false;
                    }
                }
            }
        }
    }
    true
}
