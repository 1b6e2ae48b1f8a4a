//! Diagnose generation quality against training-window reconstructions.

use hosigen::cli::RunConfig;
use hosigen::consistency::{skip_grid, student_predict};
use hosigen::diffusion::{q_sample, randn, sample_window, NoiseSchedule};
use hosigen::kinematics::FRAME_FEATURES;
use hosigen::net;
use ndarray::Array2;

fn main() {
    let root = std::path::PathBuf::from("/tmp/calib");
    let cfg = RunConfig::load(&root.join("run.toml")).unwrap();
    let ckpt = net::load_checkpoint(&cfg.paths.student_ckpt).unwrap();
    let schedule = NoiseSchedule::linear(cfg.schedule_steps);
    let grid = skip_grid(&schedule, cfg.distill.skip_points);
    let entries = hosigen::cli::load_dataset(&cfg.paths.dataset_dir).unwrap();
    let norm = &ckpt.meta.normalizer;

    // 1-step reconstruction of a mid-walk training window from pure noise
    for (name, hold_out) in [("train entry 0", 0usize), ("train entry 5", 5)] {
        let entry = &entries[hold_out];
        let mut rng = hosigen::util::rng_for(999, &[hold_out as u64]);
        let sample = sample_window(entry, cfg.net.window_frames, cfg.window, &mut rng);
        let x0n = norm.normalize_rows(&sample.x0);
        let prefix = x0n.slice(ndarray::s![0..2, ..]).to_owned();
        let cond = net::encode_conditions_values(&ckpt.params, &sample.cond).unwrap();
        let x_init = randn(cfg.net.window_frames, FRAME_FEATURES, &mut rng);
        let tau = grid[grid.len() - 1];
        let pred = student_predict(&ckpt.params, &x_init, Some(&prefix), tau, &cond, 1.0, &schedule).unwrap();
        // compare pelvis displacement pred vs gt
        let w = cfg.net.window_frames;
        let gt_disp = [
            sample.x0[(w - 1, 0)] - sample.x0[(0, 0)],
            sample.x0[(w - 1, 1)] - sample.x0[(0, 1)],
        ];
        let pr = norm.denormalize_rows(&pred);
        let pd = [pr[(w - 1, 0)] - pr[(0, 0)], pr[(w - 1, 1)] - pr[(0, 1)]];
        // mse in normalized space
        let d = &pred - &x0n;
        let mse = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        println!("{name}: 1-step masked? no. gt disp ({:.3},{:.3}) pred disp ({:.3},{:.3}) window-mse {:.4}", gt_disp[0], gt_disp[1], pd[0], pd[1], mse);

        // masked conditions (coarse-pass style)
        let mut mi = sample.cond.clone();
        mi.dynamic_mask = [true; 3];
        let mcond = net::encode_conditions_values(&ckpt.params, &mi).unwrap();
        let pred_m = student_predict(&ckpt.params, &x_init, Some(&prefix), tau, &mcond, 1.0, &schedule).unwrap();
        let pm = norm.denormalize_rows(&pred_m);
        let pmd = [pm[(w - 1, 0)] - pm[(0, 0)], pm[(w - 1, 1)] - pm[(0, 1)]];
        let dm = &pred_m - &x0n;
        let mse_m = dm.iter().map(|v| v * v).sum::<f64>() / dm.len() as f64;
        println!("   masked: pred disp ({:.3},{:.3}) mse {:.4}", pmd[0], pmd[1], mse_m);

        // lower-noise step: re-noise GT to grid[12] and predict
        let eps = randn(w, FRAME_FEATURES, &mut rng);
        let x_mid = q_sample(&x0n, grid[12], &eps, &schedule).unwrap();
        let pred2 = student_predict(&ckpt.params, &x_mid, Some(&prefix), grid[12], &cond, 1.0, &schedule).unwrap();
        let d2 = &pred2 - &x0n;
        let mse2 = d2.iter().map(|v| v * v).sum::<f64>() / d2.len() as f64;
        println!("   tau-mid from GT: mse {:.4}", mse2);
    }

    // generated pelvis trace for benchmark task 0
    let tasks = hosigen::cli::load_benchmark(&cfg.paths.benchmark_file).unwrap();
    let t0 = &tasks[0];
    let (seq, _) = hosigen::kinematics::load_motion(&root.join("gen_default16/task0000.motion.jsonl")).unwrap();
    println!("task0: start ({:.2},{:.2}) goal ({:.2},{:.2}) obj_goal ({:.2},{:.2},{:.2})",
        t0.start_xy()[0], t0.start_xy()[1], t0.pelvis_goal[0], t0.pelvis_goal[1],
        t0.object_goal[0], t0.object_goal[1], t0.object_goal[2]);
    for (i, f) in seq.frames.iter().enumerate().step_by(14) {
        println!("  f{:3}: pelvis ({:.2},{:.2},{:.2}) obj ({:.2},{:.2},{:.2}) has={}",
            i, f.root_pos[0], f.root_pos[1], f.root_pos[2], f.obj_pos[0], f.obj_pos[1], f.obj_pos[2], f.has_object);
    }
}
