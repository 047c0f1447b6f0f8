//! Command-line front end: train models, evaluate and probe checkpoints,
//! and synthesize scene corpora.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use verge_harness::config::{Config, EvalKind};
use verge_harness::export;
use verge_harness::probe::{probe_policy, ProbeOptions};
use verge_harness::protocol::{
    run_evaluation, run_training, synthesize_scene, ControllerKind, EvalOptions, MetricsRow,
    RunState, ScenePool,
};
use verge_harness::{checkpoint, HarnessError};

#[derive(Parser)]
#[command(
    name = "verge",
    about = "Joint disparity-representation and vergence-control learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints plus learning metrics.
    Train(TrainArgs),
    /// Evaluate a frozen checkpoint over fresh test fixations.
    Eval(EvalArgs),
    /// Sweep probe disparities and dump the policy response matrices.
    ProbePolicy(ProbeArgs),
    /// Synthesize a stereo scene corpus to image files.
    GenScenes(GenScenesArgs),
    /// Evaluate and probe a checkpoint, writing every artifact.
    Export(ExportArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Config TOML; defaults apply for missing fields or a missing flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for checkpoint.bin, metrics.csv, config.toml.
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint instead of starting fresh.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Override the scene budget (handy to extend a resumed run).
    #[arg(long)]
    scenes: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Plane,
    Conflict,
}

impl From<KindArg> for EvalKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Plane => EvalKind::Plane,
            KindArg::Conflict => EvalKind::Conflict,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Greedy,
    Oracle,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Greedy => ControllerKind::Greedy,
            ControllerArg::Oracle => ControllerKind::Oracle,
        }
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the checkpoint's eval section.
    #[arg(long)]
    fixations: Option<usize>,
    #[arg(long)]
    kind: Option<KindArg>,
    #[arg(long)]
    initial_error: Option<i32>,
    #[arg(long, value_enum, default_value_t = ControllerArg::Greedy)]
    controller: ControllerArg,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Defaults to the checkpoint's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    d_min: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    d_max: Option<i32>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct GenScenesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: u64,
    /// Fix the scene kind; omitted means the curriculum mix.
    #[arg(long)]
    kind: Option<KindArg>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fixations: Option<usize>,
    #[arg(long)]
    kind: Option<KindArg>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn print_metrics_row(r: &MetricsRow) {
    let sel = if r.selection_freq.iter().any(|&s| s > 0.0) {
        format!(
            "  sel F/IP/OP {:.2}/{:.2}/{:.2}",
            r.selection_freq[0], r.selection_freq[1], r.selection_freq[2]
        )
    } else {
        String::new()
    };
    println!(
        "[step {:>8}] |residual| {:6.3} px  reward {:+.4}{}",
        r.step, r.mean_abs_final_residual, r.mean_reward_parallel, sel
    );
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut state = match &args.resume {
        Some(ck) => {
            let s = checkpoint::load(ck).with_context(|| format!("loading {}", ck.display()))?;
            println!(
                "resuming at step {} (scene {}, fixation {})",
                s.total_steps, s.scene_index, s.fixation_index
            );
            s
        }
        None => RunState::fresh(load_config(&args.config)?, args.seed),
    };
    if let Some(scenes) = args.scenes {
        if scenes < state.scene_index {
            bail!("scene budget {scenes} is below the completed count {}", state.scene_index);
        }
        state.config.run.scenes = scenes;
        state.config_text = state.config.to_toml();
    }

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.toml"), &state.config_text)?;
    let metrics_path = args.out.join("metrics.csv");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(
        metrics_file,
        "step,mean_abs_final_residual,r_parallel,r_foveal,r_inner,r_outer,sel_f,sel_ip,sel_op"
    )?;
    let mut sink = |r: &MetricsRow| {
        print_metrics_row(r);
        let _ = writeln!(
            metrics_file,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.mean_abs_final_residual,
            r.mean_reward_parallel,
            r.mean_reward_foveal,
            r.mean_reward_inner,
            r.mean_reward_outer,
            r.selection_freq[0],
            r.selection_freq[1],
            r.selection_freq[2],
        );
        let _ = metrics_file.get_mut().flush();
    };

    let out = run_training(state, Some(&args.out), Some(&mut sink))?;
    println!(
        "trained {} steps ({} total); checkpoint at {}",
        out.steps_run,
        out.state.total_steps,
        out.checkpoint_path.as_deref().unwrap_or(std::path::Path::new("-")).display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let state = checkpoint::load(&args.checkpoint)?;
    let mut opts = EvalOptions::from_config(&state.config);
    if let Some(n) = args.fixations {
        opts.fixations = n;
    }
    if let Some(k) = args.kind {
        opts.kind = k.into();
    }
    if let Some(e) = args.initial_error {
        if e < 0 || e > state.config.env.v_max {
            bail!("initial error {e} outside [0, {}]", state.config.env.v_max);
        }
        opts.initial_error = e;
    }
    opts.controller = args.controller.into();
    opts.workers = args.workers.max(1);
    let seed = args.seed.unwrap_or(state.master_seed);

    let report = run_evaluation(&state.dicts, &state.agent, &state.config, &opts, seed)?;
    export::write_eval_report(&report, &args.out)?;
    print!("{}", export::eval_summary_text(&report));
    println!("wrote {}", args.out.join("trajectories.csv").display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> anyhow::Result<()> {
    let state = checkpoint::load(&args.checkpoint)?;
    let mut opts = ProbeOptions::from_config(&state.config);
    if let Some(d) = args.d_min {
        opts.d_min = d;
    }
    if let Some(d) = args.d_max {
        opts.d_max = d;
    }
    if let Some(n) = args.probes {
        opts.probes_per_d = n;
    }
    let seed = args.seed.unwrap_or(state.master_seed);
    let matrix = probe_policy(&state.dicts, &state.agent, &state.config, &opts, seed)?;
    let files = export::write_policy_matrices(&matrix, &args.out)?;
    for f in files {
        println!("wrote {}", args.out.join(f).display());
    }
    Ok(())
}

fn cmd_gen_scenes(args: GenScenesArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = String::from("id,kind,anchor_row,anchor_col,left,right,disparity\n");
    for i in 0..args.count {
        let scene = synthesize_scene(
            &config,
            ScenePool::Test,
            i,
            args.seed,
            args.kind.map(|k| EvalKind::from(k).scene_kind()),
        )?;
        let left = format!("{}-left.pgm", scene.id);
        let right = format!("{}-right.pgm", scene.id);
        let disparity = format!("{}-disparity.csv", scene.id);
        verge_core::env::save_scene(
            &scene,
            &args.out.join(&left),
            &args.out.join(&right),
            &args.out.join(&disparity),
        )
        .map_err(HarnessError::Env)?;
        let (kind, ar, ac) = match scene.anchor {
            Some((r, c)) => ("conflict", r.to_string(), c.to_string()),
            None => ("plane", String::new(), String::new()),
        };
        manifest.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            scene.id, kind, ar, ac, left, right, disparity
        ));
    }
    std::fs::write(args.out.join("manifest.csv"), manifest)?;
    println!("wrote {} scenes to {}", args.count, args.out.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> anyhow::Result<()> {
    let state = checkpoint::load(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.toml"), &state.config_text)?;

    let mut eval_opts = EvalOptions::from_config(&state.config);
    if let Some(n) = args.fixations {
        eval_opts.fixations = n;
    }
    if let Some(k) = args.kind {
        eval_opts.kind = k.into();
    }
    eval_opts.workers = args.workers.max(1);
    let report = run_evaluation(
        &state.dicts,
        &state.agent,
        &state.config,
        &eval_opts,
        state.master_seed,
    )?;
    export::write_eval_report(&report, &args.out.join("eval"))?;

    let probe_opts = ProbeOptions::from_config(&state.config);
    let matrix =
        probe_policy(&state.dicts, &state.agent, &state.config, &probe_opts, state.master_seed)?;
    export::write_policy_matrices(&matrix, &args.out.join("probe"))?;

    print!("{}", export::eval_summary_text(&report));
    println!("artifacts under {}", args.out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::ProbePolicy(a) => cmd_probe(a),
        Cmd::GenScenes(a) => cmd_gen_scenes(a),
        Cmd::Export(a) => cmd_export(a),
    }
}
