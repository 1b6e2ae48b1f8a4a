//! Calibration harness: builds a small dataset, trains teacher + student at
//! the desk-scale toy config, and reports ablation metrics.

use std::time::Instant;

use hosigen::cli::{self, GenerateOpts, RunConfig};
use hosigen::consistency;
use hosigen::dataforge;
use hosigen::diffusion;
use hosigen::engine::SamplerKind;
use hosigen::metrics;
use hosigen::net::NetConfig;
use hosigen::voxel::WindowSpec;

fn toy_net() -> NetConfig {
    NetConfig {
        d_model: 64,
        denoiser_layers: 3,
        denoiser_heads: 4,
        vit_layers: 2,
        vit_heads: 4,
        window_frames: 16,
        patch_size: 8,
        window_resolution: 16,
        text_dim: 768,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let root = std::path::PathBuf::from("/tmp/calib");
    std::fs::create_dir_all(&root).unwrap();

    let mut cfg = RunConfig::default_under(&root);
    cfg.seed = 42;
    cfg.net = toy_net();
    cfg.window = WindowSpec { side_length: 1.2, resolution: 16 };
    cfg.schedule_steps = 1000;
    cfg.synth.n_hoi = 60;
    cfg.synth.n_hsi = 30;
    cfg.synth.n_scenes = 10;
    cfg.synth.n_tasks = 50;
    cfg.train.steps = std::env::var("TRAIN_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(5000);
    cfg.train.batch_size = 12;
    cfg.train.lr = 3e-4;
    cfg.train.norm_samples = 256;
    cfg.distill.steps = std::env::var("DISTILL_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1500);
    cfg.distill.batch_size = 12;
    cfg.distill.lr = 1e-4;
    cfg.plan.max_windows = 14;
    cfg.plan.omega = 1.0;
    cfg.save(&root.join("run.toml")).unwrap();

    if stage == "all" || stage == "synth" {
        let t = Instant::now();
        cli::cmd_synth(&cfg).unwrap();
        println!("synth: {:.1}s", t.elapsed().as_secs_f64());
        let t = Instant::now();
        cli::cmd_bench(&cfg).unwrap();
        println!("bench: {:.1}s", t.elapsed().as_secs_f64());
    }

    if stage == "all" || stage == "train" {
        let t = Instant::now();
        cli::cmd_train(&cfg).unwrap();
        println!("train({} steps): {:.1}s", cfg.train.steps, t.elapsed().as_secs_f64());
        let log = std::fs::read_to_string(&cfg.paths.train_log).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        for probe in [1, 50, 200, lines.len().saturating_sub(1)] {
            if probe < lines.len() { println!("  {}", lines[probe]); }
        }
    }

    if stage == "all" || stage == "distill" {
        let t = Instant::now();
        cli::cmd_distill(&cfg).unwrap();
        println!("distill({} steps): {:.1}s", cfg.distill.steps, t.elapsed().as_secs_f64());
        let log = std::fs::read_to_string(&cfg.paths.distill_log).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        for probe in [1, 50, lines.len().saturating_sub(1)] {
            if probe < lines.len() { println!("  {}", lines[probe]); }
        }
    }

    if stage == "all" || stage == "gen" {
        let variants: Vec<(&str, GenerateOpts)> = vec![
            ("default16", GenerateOpts::default()),
            ("noguide", GenerateOpts { no_guidance: true, ..Default::default() }),
            ("nodyn", GenerateOpts { no_dynamic: true, ..Default::default() }),
            ("steps1", GenerateOpts { steps: Some(1), ..Default::default() }),
            ("teacher", GenerateOpts { sampler: SamplerKind::TeacherDdim, ..Default::default() }),
        ];
        for (name, mut opts) in variants {
            opts.out_dir = Some(root.join(format!("gen_{name}")));
            let t = Instant::now();
            let summaries = match cli::cmd_generate(&cfg, &opts) {
                Ok(s) => s,
                Err(e) => { println!("{name}: ERROR {e}"); continue; }
            };
            let wall = t.elapsed().as_secs_f64();
            let reports = cli::cmd_evaluate(&cfg, Some(&root.join(format!("gen_{name}"))), Some(&root.join(format!("report_{name}.csv")))).unwrap();
            let n = reports.len() as f64;
            let succ = cli::success_rate(&reports);
            let hs: f64 = reports.iter().map(|r| r.hs.p_mean).sum::<f64>() / n;
            let os: f64 = reports.iter().map(|r| r.os.p_mean).sum::<f64>() / n;
            let th: f64 = reports.iter().map(|r| r.t_h).sum::<f64>() / n;
            let to: f64 = reports.iter().map(|r| r.t_o).sum::<f64>() / n;
            let total_secs: f64 = summaries.iter().map(|s| s.seconds).sum();
            let total_frames: usize = summaries.iter().map(|s| s.frames).sum();
            let (aits, fps) = metrics::timing(
                &summaries.iter().map(|s| s.seconds).collect::<Vec<_>>(),
                &summaries.iter().map(|s| s.frames).collect::<Vec<_>>(),
            );
            println!(
                "{name}: wall={wall:.0}s succ={succ:.0}% hs_pmean={hs:.4} os_pmean={os:.4} t_h={th:.3} t_o={to:.3} aits={aits:.2} fps={fps:.1} (sum {total_secs:.0}s/{total_frames}f)"
            );
        }
    }
    let _ = (diffusion::TrainConfig::default(), consistency::DistillConfig::default(), dataforge::SYNTH_MARGIN);
}
