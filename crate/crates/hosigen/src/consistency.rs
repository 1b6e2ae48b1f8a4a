//! Consistency distillation of the diffusion teacher: boundary-projected
//! student predictions, the distillation loss between adjacent solver steps
//! with an EMA target network, and the multi-step consistency sampler.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::dataforge::{DatasetEntry, MixStream};
use crate::diffusion::{
    self, cfg_predict, ddim_step, q_sample, randn, sample_window, ElementPass, LossRow,
    NoiseSchedule, WindowSample,
};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, transform_points, Skeleton, FRAME_FEATURES};
use crate::net::{self, bind, EncodedConditions, ModelParams, NetConfig, Normalizer};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;
use crate::util;
use crate::voxel::WindowSpec;

/// Data std used by the boundary coefficients (sigma_d).
pub const SIGMA_DATA: f64 = 0.5;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    /// Number of teacher timesteps on the skip grid (uniform over the
    /// schedule, endpoints included).
    pub skip_points: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub ema_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_h: f64,
    pub lambda_o: f64,
    /// Probability an element trains the fully-masked condition pathway,
    /// keeping the coarse-pass branch in distribution.
    pub dynamic_dropout: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            skip_points: 25,
            omega_min: 0.0,
            omega_max: 3.0,
            ema_decay: 0.995,
            steps: 1000,
            batch_size: 64,
            lr: 1e-4,
            lambda_h: 1.0,
            lambda_o: 0.5,
            dynamic_dropout: 0.10,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.skip_points < 2 {
            return Err(Error::InvalidSpec("skip grid needs >= 2 points".into()));
        }
        if self.omega_min > self.omega_max {
            return Err(Error::InvalidSpec("omega range inverted".into()));
        }
        if !(0.0 < self.ema_decay && self.ema_decay <= 1.0) {
            return Err(Error::InvalidSpec("ema_decay must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The skip grid: strictly increasing teacher timesteps, endpoints included.
pub fn skip_grid(schedule: &NoiseSchedule, points: usize) -> Vec<usize> {
    util::rounded_linspace(0, schedule.len() - 1, points)
}

/// Squared noise-to-signal level. tau = 0 is the clean boundary with sigma
/// exactly zero, so the consistency function is the identity there.
pub fn sigma2(schedule: &NoiseSchedule, t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let ab = schedule.alpha_bar[t];
    (1.0 - ab) / ab
}

/// Skip-connection coefficients: c_skip = sd^2/(s^2 + sd^2),
/// c_out = s * sd / sqrt(s^2 + sd^2); c_skip(0) = 1 and c_out(0) = 0.
pub fn boundary_coeffs(schedule: &NoiseSchedule, t: usize) -> (f64, f64) {
    let s2 = sigma2(schedule, t);
    let sd2 = SIGMA_DATA * SIGMA_DATA;
    let c_skip = sd2 / (s2 + sd2);
    let c_out = s2.sqrt() * SIGMA_DATA / (s2 + sd2).sqrt();
    (c_skip, c_out)
}

/// Boundary projection on plain arrays: x0 = c_skip x_t + c_out f_raw.
pub fn boundary_project(
    f_raw: &Array2<f64>,
    x_t: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Array2<f64> {
    let (c_skip, c_out) = boundary_coeffs(schedule, t);
    x_t * c_skip + f_raw * c_out
}

/// Student consistency prediction (no gradients): raw denoiser output pushed
/// through the boundary projection.
pub fn student_predict(
    params: &ModelParams,
    x_t: &Array2<f64>,
    prefix: Option<&Array2<f64>>,
    t: usize,
    cond: &EncodedConditions,
    omega: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let raw = net::denoise_value(params, x_t, prefix, cond, t, omega)?;
    Ok(boundary_project(&raw, x_t, t, schedule))
}

/// Elementwise EMA: target = decay * target + (1 - decay) * online.
pub fn ema_update(target: &mut ModelParams, online: &ModelParams, decay: f64) -> Result<()> {
    target.ema_from(online, decay)
}

/// Squared-L2 distance between the two branch outputs (the d(.,.) of the
/// distillation objective), as a mean over entries.
pub fn cd_distance(online: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let d = online - target;
    d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
}

/// One distillation element: teacher solves one guided DDIM step from tau_n
/// to tau_{n-1}; the online student at tau_n chases the EMA target's output
/// at tau_{n-1}. The target branch receives no gradient. FK losses act on the
/// online student's boundary-projected prediction.
#[allow(clippy::too_many_arguments)]
pub fn cd_element_pass(
    student: &ModelParams,
    target_net: &ModelParams,
    teacher: &ModelParams,
    normalizer: &Normalizer,
    schedule: &NoiseSchedule,
    grid: &[usize],
    n: usize,
    sample: &WindowSample,
    skel: &'static Skeleton,
    eps: &Array2<f64>,
    omega: f64,
    drop_dynamic: bool,
    lambda_h: f64,
    lambda_o: f64,
) -> Result<ElementPass> {
    if n == 0 || n >= grid.len() {
        return Err(Error::NonAdjacentPair(n, grid.len()));
    }
    let (tau_prev, tau_n) = (grid[n - 1], grid[n]);
    let w = sample.x0.nrows();
    let x0_norm = normalizer.normalize_rows(&sample.x0);
    let prefix = x0_norm.slice(ndarray::s![0..2, ..]).to_owned();
    let x_tn = q_sample(&x0_norm, tau_n, eps, schedule)?;

    let mut cond_inputs = sample.cond.clone();
    if drop_dynamic {
        cond_inputs.dynamic_mask = [true; 3];
    }
    let cond = net::encode_conditions_values(teacher, &cond_inputs)?;
    // conditions are encoder outputs; the student shares the teacher encoders
    // at initialization but trains its own, so re-encode with each network
    let cond_target = net::encode_conditions_values(target_net, &cond_inputs)?;

    // teacher: guided x0 then one deterministic solver step
    let teacher_x0 = cfg_predict(teacher, &x_tn, Some(&prefix), tau_n, &cond, omega)?;
    let x_prev = ddim_step(&x_tn, tau_n, tau_prev, &teacher_x0, schedule)?;

    // target branch (EMA), no gradients
    let target_out = student_predict(
        target_net,
        &x_prev,
        Some(&prefix),
        tau_prev,
        &cond_target,
        omega,
        schedule,
    )?;

    // online branch on tape
    let mut tape = Tape::new();
    let b = bind(&mut tape, student);
    let cv = net::encode_conditions(&mut tape, &b, &cond_inputs)?;
    let raw = net::denoise(&mut tape, &b, &x_tn, Some(&prefix), &cv, tau_n, omega)?;
    let (c_skip, c_out) = boundary_coeffs(schedule, tau_n);
    let scaled = tape.scale(raw, c_out);
    let skip = (&x_tn * c_skip).into_dyn();
    let online = tape.add_const(scaled, &skip);

    let target_const = tape.input2(target_out);
    let l_cd = tape.mse(online, target_const);

    // FK losses on the online prediction (world units)
    let online_world = normalizer.denorm_on_tape(&mut tape, online, w);
    let sel = diffusion::aux_joint_selection(skel);
    let pred_joints = tape.fk_positions(online_world, skel, sel.clone());
    let mut gt_joints = Array2::<f64>::zeros((w, 3 * sel.len()));
    for (r, f) in sample.frames.iter().enumerate() {
        let pos = forward_kinematics(f, skel)?;
        for (k, &j) in sel.iter().enumerate() {
            gt_joints[(r, 3 * k)] = pos[j][0];
            gt_joints[(r, 3 * k + 1)] = pos[j][1];
            gt_joints[(r, 3 * k + 2)] = pos[j][2];
        }
    }
    let gt_j = tape.input2(gt_joints);
    let l_joints = tape.mse(pred_joints, gt_j);

    let pred_obj = tape.object_points(online_world, sample.obj_points.clone());
    let mut gt_obj = Array2::<f64>::zeros((w, 3 * sample.obj_points.len()));
    for (r, f) in sample.frames.iter().enumerate() {
        let pts = transform_points(&sample.obj_points, &f.obj_rot_matrix(), f.obj_pos);
        for (k, p) in pts.iter().enumerate() {
            gt_obj[(r, 3 * k)] = p[0];
            gt_obj[(r, 3 * k + 1)] = p[1];
            gt_obj[(r, 3 * k + 2)] = p[2];
        }
    }
    let gt_o = tape.input2(gt_obj);
    let l_obj = tape.mse(pred_obj, gt_o);

    let jh = tape.scale(l_joints, lambda_h);
    let jo = tape.scale(l_obj, lambda_o);
    let s1 = tape.add(l_cd, jh);
    let total_v = tape.add(s1, jo);

    let l_cd_val = tape.value(l_cd)[[0]];
    let l_joints_val = tape.value(l_joints)[[0]];
    let l_obj_val = tape.value(l_obj)[[0]];
    let total = tape.value(total_v)[[0]];
    if !total.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite distillation loss at pair ({tau_prev},{tau_n})"
        )));
    }

    let mut sweep = tape.backward(total_v);
    let grads = b
        .vars
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sweep
                .take(*v)
                .unwrap_or_else(|| ndarray::ArrayD::zeros(student.tensors[i].raw_dim()))
        })
        .collect();
    Ok(ElementPass {
        l_simple: l_cd_val,
        l_joints: l_joints_val,
        l_obj: l_obj_val,
        total,
        grads,
    })
}

/// Mutable distillation state; checkpoints snapshot and restore it.
pub struct DistillState {
    pub student: ModelParams,
    pub target: ModelParams,
    pub adam: Adam,
    pub next_step: usize,
}

/// Fresh distillation state: both the student and the EMA target start from
/// the teacher weights.
pub fn init_distill_state(teacher: &ModelParams, cfg: &DistillConfig) -> Result<DistillState> {
    cfg.validate()?;
    Ok(DistillState {
        student: teacher.clone(),
        target: teacher.clone(),
        adam: Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &teacher.shapes(),
        ),
        next_step: 0,
    })
}

/// Runs distillation steps [state.next_step, until); resumable and
/// deterministic like the teacher loop.
#[allow(clippy::too_many_arguments)]
pub fn distill_steps(
    state: &mut DistillState,
    teacher: &ModelParams,
    normalizer: &Normalizer,
    stream: &MixStream<'_>,
    wspec: WindowSpec,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    seed: u64,
    until: usize,
) -> Result<Vec<LossRow>> {
    let skel = Skeleton::default_human();
    let grid = skip_grid(schedule, cfg.skip_points);
    let net_cfg: NetConfig = state.student.config;
    let mut log = Vec::new();
    for step in state.next_step..until {
        let entries: Vec<&DatasetEntry> = (0..cfg.batch_size)
            .map(|e| stream.entry_for(&[0xdba7, step as u64, e as u64]))
            .collect();
        let student = &state.student;
        let target_net = &state.target;
        let passes: Vec<ElementPass> = entries
            .par_iter()
            .enumerate()
            .map(|(e, entry)| {
                let mut rng = util::rng_for(seed, &[0xd157, step as u64, e as u64]);
                let sample = sample_window(entry, net_cfg.window_frames, wspec, &mut rng);
                let n = rng.gen_range(1..grid.len());
                let eps = randn(net_cfg.window_frames, FRAME_FEATURES, &mut rng);
                let omega = rng.gen_range(cfg.omega_min..=cfg.omega_max);
                let drop = rng.gen_bool(cfg.dynamic_dropout);
                cd_element_pass(
                    student, target_net, teacher, normalizer, schedule, &grid, n, &sample,
                    skel, &eps, omega, drop, cfg.lambda_h, cfg.lambda_o,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let row = diffusion::apply_batch(&mut state.student, &mut state.adam, &passes, step)?;
        ema_update(&mut state.target, &state.student, cfg.ema_decay)?;
        state.next_step = step + 1;
        log.push(row);
    }
    Ok(log)
}

/// Distills the teacher into a consistency student from scratch.
pub fn distill(
    teacher: &ModelParams,
    normalizer: &Normalizer,
    stream: &MixStream<'_>,
    wspec: WindowSpec,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<LossRow>)> {
    let mut state = init_distill_state(teacher, cfg)?;
    let log = distill_steps(
        &mut state, teacher, normalizer, stream, wspec, schedule, cfg, seed, cfg.steps,
    )?;
    Ok((state.student, log))
}

/// Multi-step consistency sampling: each step evaluates the student once at a
/// grid timestep, applies the post hook (guidance and condition refreshes are
/// injected there), and re-noises the prediction to the next, lower timestep.
/// Returns the final clean prediction and the number of network evaluations.
#[allow(clippy::too_many_arguments)]
pub fn cm_multistep<C, H>(
    student: &ModelParams,
    schedule: &NoiseSchedule,
    grid: &[usize],
    x_init: Array2<f64>,
    step_taus: &[usize],
    prefix: Option<&Array2<f64>>,
    omega: f64,
    mut cond_provider: C,
    mut post_hook: H,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Array2<f64>, usize)>
where
    C: FnMut(usize, Option<&Array2<f64>>) -> Result<EncodedConditions>,
    H: FnMut(Array2<f64>, usize) -> Array2<f64>,
{
    if step_taus.is_empty() {
        return Err(Error::InvalidSpec("empty step list".into()));
    }
    for w in step_taus.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::InvalidSpec("step taus must be descending".into()));
        }
    }
    for &t in step_taus {
        if !grid.contains(&t) {
            return Err(Error::OffGrid(t));
        }
    }
    let mut evals = 0usize;
    let mut x = x_init;
    let mut x0: Option<Array2<f64>> = None;
    for (i, &tau) in step_taus.iter().enumerate() {
        let cond = cond_provider(i, x0.as_ref())?;
        let pred = student_predict(student, &x, prefix, tau, &cond, omega, schedule)?;
        evals += 1;
        let hooked = post_hook(pred, tau);
        if i + 1 < step_taus.len() {
            let eps = randn(hooked.nrows(), hooked.ncols(), rng);
            x = q_sample(&hooked, step_taus[i + 1], &eps, schedule)?;
        }
        x0 = Some(hooked);
    }
    Ok((x0.expect("at least one step"), evals))
}
