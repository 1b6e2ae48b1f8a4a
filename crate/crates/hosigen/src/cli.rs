//! Command-line orchestration: dataset synthesis, benchmark construction,
//! teacher training, consistency distillation, generation, and evaluation.
//! Every command is reproducible from (config file, seed); re-runs write
//! byte-identical data artifacts (timing and diagnostics files excluded).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{self, DistillConfig};
use crate::dataforge::{self, DatasetEntry, SourceTag, Task};
use crate::diffusion::{self, LossRow, NoiseSchedule, TrainConfig};
use crate::engine::{self, GenerationPlan, GuidanceConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::kinematics::{self, Skeleton};
use crate::metrics::{self, MetricsReport};
use crate::net::{self, Checkpoint, CheckpointMeta, NetConfig};
use crate::util;
use crate::voxel::{self, ObjectPolicy, VoxelGrid, WindowSpec};

// ---------------------------------------------------------------------------
// Run configuration (TOML)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_hoi: usize,
    pub n_hsi: usize,
    pub ratio_hoi: f64,
    pub ratio_hsi: f64,
    /// Benchmark construction inputs.
    pub n_scenes: usize,
    pub n_tasks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_hoi: 40,
            n_hsi: 20,
            ratio_hoi: 1.0,
            ratio_hsi: 0.5,
            n_scenes: 10,
            n_tasks: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    pub refine_steps: usize,
    pub max_windows: usize,
    pub omega: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            refine_steps: 15,
            max_windows: 12,
            omega: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    pub dataset_dir: PathBuf,
    pub benchmark_file: PathBuf,
    pub scenes_dir: PathBuf,
    pub teacher_ckpt: PathBuf,
    pub student_ckpt: PathBuf,
    pub train_log: PathBuf,
    pub distill_log: PathBuf,
    pub out_dir: PathBuf,
    pub report_file: PathBuf,
}

impl PathsConfig {
    pub fn under(root: &Path) -> Self {
        PathsConfig {
            dataset_dir: root.join("dataset"),
            benchmark_file: root.join("benchmark.json"),
            scenes_dir: root.join("scenes"),
            teacher_ckpt: root.join("teacher.ckpt"),
            student_ckpt: root.join("student.ckpt"),
            train_log: root.join("train_log.csv"),
            distill_log: root.join("distill_log.csv"),
            out_dir: root.join("generated"),
            report_file: root.join("report.csv"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule_steps: usize,
    pub net: NetConfig,
    pub window: WindowSpec,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub plan: PlanConfig,
    pub guidance: GuidanceConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn default_under(root: &Path) -> Self {
        RunConfig {
            seed: 42,
            schedule_steps: 1000,
            net: NetConfig::default(),
            window: WindowSpec::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            plan: PlanConfig::default(),
            guidance: GuidanceConfig::default(),
            synth: SynthConfig::default(),
            paths: PathsConfig::under(root),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidSpec(format!("config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.schedule_steps)
    }
}

// ---------------------------------------------------------------------------
// Dataset and benchmark persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    source_tag: SourceTag,
    scene: String,
    motion: String,
    task: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

pub fn save_dataset(entries: &[DatasetEntry], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        entries: Vec::new(),
    };
    for e in entries {
        let id = &e.task.id;
        let scene_name = format!("{id}.scene.json");
        let motion_name = format!("{id}.motion.jsonl");
        let task_name = format!("{id}.task.json");
        voxel::save_scene(&e.scene, &dir.join(&scene_name))?;
        kinematics::save_motion(&e.sequence, &Skeleton::default_human().id, &dir.join(&motion_name))?;
        fs::write(dir.join(&task_name), serde_json::to_vec(&e.task)?)?;
        manifest.entries.push(ManifestEntry {
            id: id.clone(),
            source_tag: e.source_tag,
            scene: scene_name,
            motion: motion_name,
            task: task_name,
        });
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json")).map_err(|_| {
            Error::Data(format!("no dataset manifest under {}", dir.display()))
        })?)?;
    manifest
        .entries
        .iter()
        .map(|m| {
            let scene = voxel::load_scene(&dir.join(&m.scene))?;
            let (sequence, _) = kinematics::load_motion(&dir.join(&m.motion))?;
            let task: Task = serde_json::from_slice(&fs::read(dir.join(&m.task))?)?;
            Ok(DatasetEntry {
                sequence,
                scene,
                task,
                source_tag: m.source_tag,
            })
        })
        .collect()
}

pub fn save_benchmark(tasks: &[Task], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(tasks)?)?;
    Ok(())
}

pub fn load_benchmark(path: &Path) -> Result<Vec<Task>> {
    let tasks: Vec<Task> = serde_json::from_slice(
        &fs::read(path).map_err(|_| Error::Data(format!("no benchmark at {}", path.display())))?,
    )?;
    Ok(tasks)
}

pub fn save_scenes(scenes: &[(String, VoxelGrid)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, grid) in scenes {
        voxel::save_scene(grid, &dir.join(format!("{name}.scene.json")))?;
    }
    Ok(())
}

pub fn load_scene_by_ref(dir: &Path, scene_ref: &str) -> Result<VoxelGrid> {
    voxel::load_scene(&dir.join(format!("{scene_ref}.scene.json")))
}

fn write_loss_log(path: &Path, rows: &[LossRow], append: bool) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    if !append {
        writeln!(f, "step,l_simple,l_joints,l_obj,total")?;
    }
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.step, r.l_simple, r.l_joints, r.l_obj, r.total
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Synthesizes the hybrid training dataset into the dataset directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let mut entries: Vec<DatasetEntry> = (0..cfg.synth.n_hoi)
        .into_par_iter()
        .map(|i| dataforge::synth_hoi_entry(i, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let hsi: Vec<DatasetEntry> = (0..cfg.synth.n_hsi)
        .into_par_iter()
        .map(|i| dataforge::synth_hsi_entry(i, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    entries.extend(hsi);
    save_dataset(&entries, &cfg.paths.dataset_dir)
}

/// Builds the benchmark: procedural scenes plus rejection-sampled tasks.
pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let scenes: Vec<(String, VoxelGrid)> = (0..cfg.synth.n_scenes)
        .map(|i| {
            (
                format!("scene{i:03}"),
                dataforge::gen_room_scene(util::subseed(cfg.seed, &[0x5ce, i as u64])),
            )
        })
        .collect();
    let tasks = dataforge::build_benchmark(
        &scenes,
        &dataforge::object_catalog(),
        cfg.synth.n_tasks,
        cfg.seed,
    )?;
    save_scenes(&scenes, &cfg.paths.scenes_dir)?;
    save_benchmark(&tasks, &cfg.paths.benchmark_file)
}

fn split_dataset(entries: &[DatasetEntry]) -> (Vec<DatasetEntry>, Vec<DatasetEntry>) {
    let hoi = entries
        .iter()
        .filter(|e| e.source_tag == SourceTag::SyntheticHoi)
        .cloned()
        .collect();
    let hsi = entries
        .iter()
        .filter(|e| e.source_tag == SourceTag::SyntheticHsi)
        .cloned()
        .collect();
    (hoi, hsi)
}

fn adam_sections(adam: &crate::optim::Adam) -> BTreeMap<String, Vec<ndarray::ArrayD<f64>>> {
    let mut sections = BTreeMap::new();
    sections.insert("adam_m".to_string(), adam.m.clone());
    sections.insert("adam_v".to_string(), adam.v.clone());
    sections
}

fn restore_adam(ckpt: &Checkpoint, lr: f64) -> Result<crate::optim::Adam> {
    let mut adam = crate::optim::Adam::new(
        crate::optim::AdamConfig {
            lr,
            ..Default::default()
        },
        &ckpt.params.shapes(),
    );
    adam.step = ckpt.meta.step;
    adam.m = ckpt
        .sections
        .get("adam_m")
        .ok_or_else(|| Error::Data("checkpoint lacks adam_m".into()))?
        .clone();
    adam.v = ckpt
        .sections
        .get("adam_v")
        .ok_or_else(|| Error::Data("checkpoint lacks adam_v".into()))?
        .clone();
    Ok(adam)
}

/// Trains (or resumes) the diffusion teacher and writes its checkpoint plus a
/// CSV loss log.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let entries = load_dataset(&cfg.paths.dataset_dir)?;
    let (hoi, hsi) = split_dataset(&entries);
    let stream = dataforge::mix_datasets(
        &hoi,
        &hsi,
        (cfg.synth.ratio_hoi, cfg.synth.ratio_hsi),
        cfg.seed,
    )?;
    let mut resume = false;
    let mut state = if cfg.paths.teacher_ckpt.exists() {
        let ckpt = net::load_checkpoint(&cfg.paths.teacher_ckpt)?;
        if ckpt.meta.step >= cfg.train.steps {
            return Ok(());
        }
        resume = true;
        let adam = restore_adam(&ckpt, cfg.train.lr)?;
        diffusion::TrainerState {
            next_step: ckpt.meta.step,
            normalizer: ckpt.meta.normalizer.clone(),
            params: ckpt.params,
            adam,
        }
    } else {
        diffusion::init_teacher_state(&stream, cfg.net, cfg.window, &cfg.train, cfg.seed)?
    };
    let schedule = cfg.schedule();
    let log = diffusion::teacher_steps(
        &mut state,
        &stream,
        cfg.window,
        &schedule,
        &cfg.train,
        cfg.seed,
        cfg.train.steps,
    )?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            kind: "teacher".into(),
            config: cfg.net,
            normalizer: state.normalizer.clone(),
            step: state.next_step,
            extra: serde_json::json!({"schedule_steps": cfg.schedule_steps}),
        },
        params: state.params,
        sections: adam_sections(&state.adam),
    };
    net::save_checkpoint(&ckpt, &cfg.paths.teacher_ckpt)?;
    write_loss_log(&cfg.paths.train_log, &log, resume)?;
    Ok(())
}

/// Distills (or resumes distilling) the consistency student from the teacher.
pub fn cmd_distill(cfg: &RunConfig) -> Result<()> {
    let teacher_ckpt = net::load_checkpoint(&cfg.paths.teacher_ckpt)
        .map_err(|_| Error::Data("teacher checkpoint missing; run train first".into()))?;
    let entries = load_dataset(&cfg.paths.dataset_dir)?;
    let (hoi, hsi) = split_dataset(&entries);
    let stream = dataforge::mix_datasets(
        &hoi,
        &hsi,
        (cfg.synth.ratio_hoi, cfg.synth.ratio_hsi),
        cfg.seed,
    )?;
    let mut resume = false;
    let mut state = if cfg.paths.student_ckpt.exists() {
        let ckpt = net::load_checkpoint(&cfg.paths.student_ckpt)?;
        if ckpt.meta.step >= cfg.distill.steps {
            return Ok(());
        }
        resume = true;
        let adam = restore_adam(&ckpt, cfg.distill.lr)?;
        let target_tensors = ckpt
            .sections
            .get("ema")
            .ok_or_else(|| Error::Data("student checkpoint lacks ema section".into()))?
            .clone();
        let mut target = ckpt.params.clone();
        target.tensors = target_tensors.into_iter().map(std::sync::Arc::new).collect();
        consistency::DistillState {
            next_step: ckpt.meta.step,
            student: ckpt.params,
            target,
            adam,
        }
    } else {
        consistency::init_distill_state(&teacher_ckpt.params, &cfg.distill)?
    };
    let schedule = cfg.schedule();
    let log = consistency::distill_steps(
        &mut state,
        &teacher_ckpt.params,
        &teacher_ckpt.meta.normalizer,
        &stream,
        cfg.window,
        &schedule,
        &cfg.distill,
        cfg.seed,
        cfg.distill.steps,
    )?;
    let mut sections = adam_sections(&state.adam);
    sections.insert(
        "ema".to_string(),
        state.target.tensors.iter().map(|t| t.as_ref().clone()).collect(),
    );
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            kind: "student".into(),
            config: cfg.net,
            normalizer: teacher_ckpt.meta.normalizer.clone(),
            step: state.next_step,
            extra: serde_json::json!({
                "schedule_steps": cfg.schedule_steps,
                "skip_points": cfg.distill.skip_points,
                "omega_range": [cfg.distill.omega_min, cfg.distill.omega_max],
                "ema_decay": cfg.distill.ema_decay,
            }),
        },
        params: state.student,
        sections,
    };
    net::save_checkpoint(&ckpt, &cfg.paths.student_ckpt)?;
    write_loss_log(&cfg.paths.distill_log, &log, resume)?;
    Ok(())
}

/// Generation options (the Table 2-4 style ablation switches).
#[derive(Debug, Clone)]
pub struct GenerateOpts {
    /// Total sampling steps per window (1 coarse + rest refinement).
    pub steps: Option<usize>,
    pub no_guidance: bool,
    pub no_dynamic: bool,
    pub sampler: SamplerKind,
    pub omega: Option<f64>,
    /// Output directory override.
    pub out_dir: Option<PathBuf>,
}

impl Default for GenerateOpts {
    fn default() -> Self {
        GenerateOpts {
            steps: None,
            no_guidance: false,
            no_dynamic: false,
            sampler: SamplerKind::Consistency,
            omega: None,
            out_dir: None,
        }
    }
}

/// Per-task generation summary (timing, evals, goal flag).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub task_id: String,
    pub seconds: f64,
    pub frames: usize,
    pub windows: usize,
    pub evals: usize,
    pub reached: bool,
}

/// Generates one motion file per benchmark task; writes diagnostics and a
/// timing summary CSV next to the motions.
pub fn cmd_generate(cfg: &RunConfig, opts: &GenerateOpts) -> Result<Vec<GenSummary>> {
    let ckpt_path = match opts.sampler {
        SamplerKind::Consistency => &cfg.paths.student_ckpt,
        SamplerKind::TeacherDdim => &cfg.paths.teacher_ckpt,
    };
    let ckpt = net::load_checkpoint(ckpt_path)
        .map_err(|_| Error::Data(format!("checkpoint missing at {}", ckpt_path.display())))?;
    let tasks = load_benchmark(&cfg.paths.benchmark_file)?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    fs::create_dir_all(&out_dir)?;

    let schedule = cfg.schedule();
    let grid = consistency::skip_grid(&schedule, cfg.distill.skip_points);
    let steps = opts.steps.unwrap_or(1 + cfg.plan.refine_steps).max(1);
    let plan = GenerationPlan {
        overlap: 2,
        coarse_steps: 1,
        refine_steps: steps - 1,
        max_windows: cfg.plan.max_windows,
        dynamic_perception: !opts.no_dynamic,
    };
    let guidance = if opts.no_guidance {
        GuidanceConfig::disabled()
    } else {
        cfg.guidance
    };
    let omega = opts.omega.unwrap_or(cfg.plan.omega);

    // scenes loaded once per distinct ref
    let mut scenes: BTreeMap<String, VoxelGrid> = BTreeMap::new();
    for t in &tasks {
        if !scenes.contains_key(&t.scene_ref) {
            scenes.insert(
                t.scene_ref.clone(),
                load_scene_by_ref(&cfg.paths.scenes_dir, &t.scene_ref)?,
            );
        }
    }

    let summaries: Vec<GenSummary> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| -> Result<GenSummary> {
            let scene = &scenes[&task.scene_ref];
            let started = std::time::Instant::now();
            let result = engine::generate(
                task,
                scene,
                &ckpt.params,
                &ckpt.meta.normalizer,
                &schedule,
                &grid,
                cfg.window,
                &plan,
                &guidance,
                omega,
                util::subseed(cfg.seed, &[0x9e7, i as u64]),
                opts.sampler,
            )?;
            let seconds = started.elapsed().as_secs_f64();
            kinematics::save_motion(
                &result.sequence,
                &Skeleton::default_human().id,
                &out_dir.join(format!("{}.motion.jsonl", task.id)),
            )?;
            // diagnostics CSV (per window/refine step)
            let mut diag = String::from("window,refine_step,bump_loss,contact_loss,wall_ms\n");
            for d in &result.diagnostics {
                diag.push_str(&format!(
                    "{},{},{},{},{}\n",
                    d.window, d.refine_step, d.bump_loss, d.contact_loss, d.wall_ms
                ));
            }
            fs::write(out_dir.join(format!("{}.diag.csv", task.id)), diag)?;
            Ok(GenSummary {
                task_id: task.id.clone(),
                seconds,
                frames: result.sequence.len(),
                windows: result.windows_used,
                evals: result.student_evals,
                reached: result.reached,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut timing = String::from("task_id,seconds,frames,windows,evals,reached\n");
    for s in &summaries {
        timing.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.task_id, s.seconds, s.frames, s.windows, s.evals, s.reached
        ));
    }
    fs::write(out_dir.join("timing.csv"), timing)?;
    Ok(summaries)
}

/// Evaluates generated motions against the benchmark; writes the report CSV
/// (one row per task plus an aggregate row).
pub fn cmd_evaluate(
    cfg: &RunConfig,
    motions_dir: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    let tasks = load_benchmark(&cfg.paths.benchmark_file)?;
    let dir = motions_dir.unwrap_or(&cfg.paths.out_dir);
    let report_path = report_path.unwrap_or(&cfg.paths.report_file);
    let skel = Skeleton::default_human();

    // timing summary, if the generator wrote one
    let timing: BTreeMap<String, (f64, usize)> = fs::read_to_string(dir.join("timing.csv"))
        .ok()
        .map(|text| {
            text.lines()
                .skip(1)
                .filter_map(|l| {
                    let mut parts = l.split(',');
                    let id = parts.next()?.to_string();
                    let secs: f64 = parts.next()?.parse().ok()?;
                    let frames: usize = parts.next()?.parse().ok()?;
                    Some((id, (secs, frames)))
                })
                .collect()
        })
        .unwrap_or_default();

    let mut scenes: BTreeMap<String, (VoxelGrid, crate::voxel::DistanceField)> = BTreeMap::new();
    for t in &tasks {
        if !scenes.contains_key(&t.scene_ref) {
            let grid = load_scene_by_ref(&cfg.paths.scenes_dir, &t.scene_ref)?;
            let field = metrics::penetration_field(&grid, ObjectPolicy::Free)?;
            scenes.insert(t.scene_ref.clone(), (grid, field));
        }
    }

    let reports: Vec<MetricsReport> = tasks
        .par_iter()
        .map(|task| -> Result<MetricsReport> {
            let motion_path = dir.join(format!("{}.motion.jsonl", task.id));
            let (seq, _) = kinematics::load_motion(&motion_path)
                .map_err(|_| Error::Data(format!("missing motion for task {}", task.id)))?;
            let (grid, field) = &scenes[&task.scene_ref];
            let (t_h, t_o, success) = metrics::goal_errors(
                &seq,
                task.pelvis_goal,
                task.has_object.then_some(task.object_goal),
            );
            let fs_metric = metrics::foot_sliding(&seq, skel)?;
            let (c_pct, p_body, _) = metrics::ho_metrics(&seq, skel, &task.object, None)?;
            let human_pts = metrics::human_points_per_frame(&seq, skel)?;
            let hs = metrics::scene_penetration(&human_pts, grid, field, ObjectPolicy::Free);
            let obj_pts = metrics::object_points_per_frame(&seq, &task.object);
            let os = metrics::scene_penetration(&obj_pts, grid, field, ObjectPolicy::Free);
            let (aits, fps) = timing
                .get(&task.id)
                .map(|&(s, f)| (s, if s > 0.0 { f as f64 / s } else { 0.0 }))
                .unwrap_or((0.0, 0.0));
            Ok(MetricsReport {
                t_h,
                t_o,
                success,
                fs: fs_metric,
                c_pct,
                p_body,
                hs,
                os,
                aits,
                fps,
                contact_precision: None,
                contact_recall: None,
                contact_f1: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    write_report(report_path, &tasks, &reports)?;
    Ok(reports)
}

/// Report CSV: per-task rows plus an aggregate row, in the column order
/// t_h, t_o, s_pct, fs, c_pct, p_body, HS triple, OS triple, aits, fps.
pub fn write_report(path: &Path, tasks: &[Task], reports: &[MetricsReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = String::from(
        "task_id,t_h,t_o,s_pct,fs,c_pct,p_body,hs_p_mean,hs_p_max,hs_p_fpct,os_p_mean,os_p_max,os_p_fpct,aits,fps\n",
    );
    for (t, r) in tasks.iter().zip(reports) {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            t.id,
            r.t_h,
            r.t_o,
            if r.success { 100.0 } else { 0.0 },
            r.fs,
            r.c_pct,
            r.p_body,
            r.hs.p_mean,
            r.hs.p_max,
            r.hs.p_fpct,
            r.os.p_mean,
            r.os.p_max,
            r.os.p_fpct,
            r.aits,
            r.fps
        ));
    }
    if !reports.is_empty() {
        let agg = aggregate_report(reports);
        text.push_str(&format!(
            "aggregate,{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            agg.t_h,
            agg.t_o,
            if agg.success { 100.0 } else { 0.0 },
            agg.fs,
            agg.c_pct,
            agg.p_body,
            agg.hs.p_mean,
            agg.hs.p_max,
            agg.hs.p_fpct,
            agg.os.p_mean,
            agg.os.p_max,
            agg.os.p_fpct,
            agg.aits,
            agg.fps
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Mean over tasks; `success` holds s_pct >= 50 for the aggregate row, with
/// the exact rate recoverable from the per-task rows.
pub fn aggregate_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let mut agg = MetricsReport::default();
    for r in reports {
        agg.t_h += r.t_h / n;
        agg.t_o += r.t_o / n;
        agg.fs += r.fs / n;
        agg.c_pct += r.c_pct / n;
        agg.p_body += r.p_body / n;
        agg.hs.p_mean += r.hs.p_mean / n;
        agg.hs.p_max += r.hs.p_max / n;
        agg.hs.p_fpct += r.hs.p_fpct / n;
        agg.os.p_mean += r.os.p_mean / n;
        agg.os.p_max += r.os.p_max / n;
        agg.os.p_fpct += r.os.p_fpct / n;
        agg.aits += r.aits / n;
        agg.fps += r.fps / n;
    }
    agg.success = success_rate(reports) >= 50.0;
    agg
}

/// Success percentage over a report set.
pub fn success_rate(reports: &[MetricsReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    100.0 * reports.iter().filter(|r| r.success).count() as f64 / reports.len() as f64
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "hosigen",
    about = "Desk-scale human-object-scene interaction generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize the hybrid training dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build the benchmark scenes and tasks.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the diffusion teacher (resumes from an existing checkpoint).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill the consistency student from the teacher.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate motions for every benchmark task.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Sampling steps per window (1 = coarse only).
        #[arg(long)]
        steps: Option<usize>,
        /// Disable bump-aware and contact guidance.
        #[arg(long)]
        no_guidance: bool,
        /// Keep dynamic scene windows masked during refinement.
        #[arg(long)]
        no_dynamic: bool,
        /// Sampler backend: consistency | teacher.
        #[arg(long, default_value = "consistency")]
        sampler: String,
        /// Guidance strength omega.
        #[arg(long)]
        omega: Option<f64>,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate generated motions and write the report CSV.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Motions directory (defaults to the configured output directory).
        #[arg(long)]
        motions: Option<PathBuf>,
        /// Report file override.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a default config file rooted at the given directory.
    InitConfig {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth { config } => RunConfig::load(&config).and_then(|c| cmd_synth(&c)),
        Command::Bench { config } => RunConfig::load(&config).and_then(|c| cmd_bench(&c)),
        Command::Train { config } => RunConfig::load(&config).and_then(|c| cmd_train(&c)),
        Command::Distill { config } => RunConfig::load(&config).and_then(|c| cmd_distill(&c)),
        Command::Generate {
            config,
            steps,
            no_guidance,
            no_dynamic,
            sampler,
            omega,
            out,
        } => RunConfig::load(&config).and_then(|c| {
            let sampler = match sampler.as_str() {
                "consistency" => SamplerKind::Consistency,
                "teacher" => SamplerKind::TeacherDdim,
                other => {
                    return Err(Error::InvalidSpec(format!("unknown sampler {other}")));
                }
            };
            cmd_generate(
                &c,
                &GenerateOpts {
                    steps,
                    no_guidance,
                    no_dynamic,
                    sampler,
                    omega,
                    out_dir: out,
                },
            )
            .map(|_| ())
        }),
        Command::Evaluate {
            config,
            motions,
            report,
        } => RunConfig::load(&config)
            .and_then(|c| cmd_evaluate(&c, motions.as_deref(), report.as_deref()).map(|_| ())),
        Command::InitConfig { root, out } => {
            let cfg = RunConfig::default_under(&root);
            cfg.save(&out)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence(_) => 4,
                Error::InvalidSpec(_) => 2,
                _ => 3,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default_under(dir.path());
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.net, cfg.net);
        assert_eq!(back.synth.n_tasks, cfg.synth.n_tasks);
        // bad key fails to parse
        std::fs::write(dir.path().join("bad.toml"), "nonsense_key = 3\n").unwrap();
        assert!(RunConfig::load(&dir.path().join("bad.toml")).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![dataforge::synth_hoi_entry(0, 900).unwrap()];
        save_dataset(&entries, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].task.id, entries[0].task.id);
        assert_eq!(back[0].sequence, entries[0].sequence);
        assert_eq!(back[0].scene, entries[0].scene);
    }

    #[test]
    fn empty_benchmark_gives_header_only_report() {
        let dir = tempfile::tempdir().unwrap();
        let report = dir.path().join("report.csv");
        write_report(&report, &[], &[]).unwrap();
        let text = std::fs::read_to_string(&report).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("task_id,"));
    }
}

