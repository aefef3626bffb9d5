use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eqcollide::checkpoint::{load_checkpoint, load_checkpoint_matching, read_manifest, save_checkpoint, TrainState};
use eqcollide::config::RunConfig;
use eqcollide::dataset::{generate_split, load_split, read_split_manifest};
use eqcollide::evaluation::{evaluate, parse_group_spec, parse_schedule, rollout, verify_equivariance};
use eqcollide::model::Model;
use eqcollide::plot::{plot_report, plot_trajectory};
use eqcollide::training::{append_loss_log, begin_stage2, finetune_subset, train_stage1, train_stage2, EpochLog};
use eqcollide::trajectory::{read_trajectory, write_trajectory, Trajectory};
use eqcollide::{Error, Result};

#[derive(Parser)]
#[command(
    name = "eqcollide",
    version,
    about = "Equivariant neural simulator for 2D deformable-body collisions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_json("{}", &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground-truth trajectories for one split.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root; the split goes into `<out>/<split>`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Objects per scene, overriding the config.
        #[arg(long)]
        n_objects: Option<usize>,
    },
    /// Train stage 1 or stage 2.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Split directory holding the training trajectories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage: u8,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Continue stage-2 training on a fraction of a dataset.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Share of the split to use.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Roll out every sample of a split and report position errors.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sample CSV.
        #[arg(long)]
        out: PathBuf,
        /// Summary CSV; defaults to `<out stem>_summary.csv`.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Comma-separated horizons, e.g. `1,5,10,15,20,25`.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        /// Split label written into the report; defaults to the directory name.
        #[arg(long)]
        split: Option<String>,
    },
    /// Roll out one trajectory from its first frame.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory directory whose first frame starts the rollout.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        steps: usize,
        /// Output trajectory directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare rollouts of transformed inputs with transformed rollouts.
    VerifyEquivariance {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `;`-separated elements: `identity` or `angle=..,tx=..,ty=..,cx=..,cy=..`.
        #[arg(long)]
        group: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Number of samples to check (all when omitted).
        #[arg(long)]
        samples: Option<usize>,
        /// Starting frame of each sample; defaults to `eval.equivariance_frame`.
        #[arg(long)]
        frame: Option<usize>,
    },
    /// Render a report CSV as curves or a trajectory as a frame grid.
    Plot {
        /// Report CSV or trajectory directory.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for report curves, PNG path for a trajectory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn data_split(data: &Path) -> Result<Vec<Trajectory>> {
    let samples = load_split(data)?;
    if samples.is_empty() {
        return Err(Error::validation(format!("{} holds no samples", data.display())));
    }
    Ok(samples.into_iter().map(|(_, t)| t).collect())
}

fn progress(path: &Path, out: &Path) -> impl FnMut(&EpochLog, &TrainState) -> Result<()> {
    let log = path.to_path_buf();
    let out = out.to_path_buf();
    move |row, state| {
        append_loss_log(&log, std::slice::from_ref(row))?;
        save_checkpoint(state, &out)?;
        eprintln!(
            "stage {} epoch {} L_dis {:.3e} L_recons {:.3e} total {:.3e}",
            row.stage, row.epoch, row.l_dis, row.l_recons, row.total
        );
        Ok(())
    }
}

fn reset_log(out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log = out.join("loss.csv");
    if log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    Ok(log)
}

fn cmd_train(
    config: &ConfigArgs,
    data: &Path,
    stage: u8,
    out: &Path,
    init: Option<&Path>,
    resume: bool,
    epochs: Option<usize>,
) -> Result<()> {
    let mut run = config.load()?;
    run.train.stage = stage;
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    run.train.validate()?;
    let model_cfg = run.effective_model()?;
    let dataset = data_split(data)?;
    let mut state = if resume {
        let s = load_checkpoint_matching(out, &model_cfg)?;
        if s.stage != stage {
            return Err(Error::validation(format!(
                "checkpoint in {} is from stage {}",
                out.display(),
                s.stage
            )));
        }
        s
    } else if stage == 1 {
        TrainState::fresh(Model::new(&model_cfg)?)
    } else {
        let init = init.ok_or_else(|| Error::validation("stage 2 needs --init <stage-1 checkpoint>"))?;
        begin_stage2(load_checkpoint_matching(init, &model_cfg)?)?
    };
    let log = if resume { out.join("loss.csv") } else { reset_log(out)? };
    if !resume {
        save_checkpoint(&state, out)?;
    }
    match stage {
        1 => train_stage1(&mut state, &dataset, &run.train, progress(&log, out))?,
        _ => train_stage2(&mut state, &dataset, &run.train, progress(&log, out))?,
    };
    save_checkpoint(&state, out)
}

fn cmd_finetune(
    config: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    fraction: Option<f64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut run = config.load()?;
    let fraction = fraction.unwrap_or(run.finetune.fraction);
    run.train.stage = 2;
    run.train.epochs = epochs.unwrap_or(run.finetune.epochs);
    let dataset = data_split(data)?;
    let subset = finetune_subset(&dataset, fraction)?;
    let mut state = begin_stage2(load_checkpoint(checkpoint)?)?;
    let log = reset_log(out)?;
    save_checkpoint(&state, out)?;
    eprintln!("finetuning on {} of {} trajectories", subset.len(), dataset.len());
    train_stage2(&mut state, subset, &run.train, progress(&log, out))?;
    save_checkpoint(&state, out)
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_summary.csv"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    summary: Option<&Path>,
    schedule: Option<&str>,
    workers: Option<usize>,
    split: Option<&str>,
) -> Result<()> {
    let run = config.load()?;
    let schedule = match schedule {
        Some(s) => parse_schedule(s)?,
        None => run.eval.schedule.clone(),
    };
    let manifest = read_manifest(checkpoint)?;
    let model = load_checkpoint(checkpoint)?.model;
    let samples = load_split(data)?;
    let split_name = match split {
        Some(s) => s.to_string(),
        None => read_split_manifest(data)?.split,
    };
    let report = evaluate(
        &model,
        &samples,
        &split_name,
        &schedule,
        &manifest.config_hash,
        workers.unwrap_or(run.eval.workers),
    )?;
    let summary = summary.map(Path::to_path_buf).unwrap_or_else(|| summary_path(out));
    report.write(out, &summary)?;
    let meta = serde_json::json!({
        "checkpoint_config_hash": manifest.config_hash,
        "schedule": schedule,
        "split": split_name,
        "samples": samples.len(),
        "metric": "mean over points of the squared position error at exactly step k",
    });
    let meta_path = out.with_extension("json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    for (step, m) in schedule.iter().zip(report.means()) {
        println!("{split_name} step {step}: mse {m:e}");
    }
    Ok(())
}

fn cmd_rollout(checkpoint: &Path, input: &Path, steps: usize, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.model;
    let gt = read_trajectory(input)?;
    let pred = rollout(&model, &gt.frames[0], steps, gt.dt)?;
    let hash = write_trajectory(&pred, out)?;
    println!("{hash}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    config: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    group: &str,
    out: &Path,
    steps: Option<usize>,
    samples: Option<usize>,
    frame: Option<usize>,
) -> Result<()> {
    let run = config.load()?;
    let elements = parse_group_spec(group)?;
    let model = load_checkpoint(checkpoint)?.model;
    let mut data = load_split(data)?;
    if let Some(n) = samples {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(Error::validation("no samples to check"));
    }
    let steps = steps.unwrap_or(run.eval.equivariance_steps);
    let frame = frame.unwrap_or(run.eval.equivariance_frame);
    let mut csv = String::from("sample_id,element,rotation,tx,ty,deviation\n");
    let mut worst: f64 = 0.0;
    for (id, traj) in &data {
        let start = traj.frames.get(frame).ok_or_else(|| {
            Error::validation(format!("sample {id} has {} frames, no frame {frame}", traj.n_frames()))
        })?;
        let devs = verify_equivariance(&model, start, &elements, steps, traj.dt)?;
        for (k, (g, d)) in elements.iter().zip(devs).enumerate() {
            csv.push_str(&format!(
                "{id},{k},{:e},{:e},{:e},{d:e}\n",
                g.rotation_angle, g.translation[0], g.translation[1]
            ));
            worst = worst.max(d);
        }
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    println!("max relative deviation {worst:e}");
    Ok(())
}

fn cmd_plot(input: &Path, out: &Path) -> Result<()> {
    if input.is_dir() {
        let traj = read_trajectory(input)?;
        plot_trajectory(&traj, out)?;
        println!("{}", out.display());
    } else {
        for p in plot_report(input, out)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen {
            config,
            out,
            count,
            split,
            workers,
            n_objects,
        } => {
            let mut run = config.load()?;
            if let Some(n) = n_objects {
                run.datagen.n_objects = n;
                run.validate()?;
            }
            let m = generate_split(&run, &out, &split, count, workers)?;
            for e in &m.entries {
                println!("{} {}", e.id, e.content_sha256);
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            stage,
            out,
            init,
            resume,
            epochs,
        } => cmd_train(&config, &data, stage, &out, init.as_deref(), resume, epochs),
        Command::Finetune {
            config,
            checkpoint,
            data,
            out,
            fraction,
            epochs,
        } => cmd_finetune(&config, &checkpoint, &data, &out, fraction, epochs),
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            summary,
            schedule,
            workers,
            split,
        } => cmd_eval(
            &config,
            &checkpoint,
            &data,
            &out,
            summary.as_deref(),
            schedule.as_deref(),
            workers,
            split.as_deref(),
        ),
        Command::Rollout {
            checkpoint,
            input,
            steps,
            out,
        } => cmd_rollout(&checkpoint, &input, steps, &out),
        Command::VerifyEquivariance {
            config,
            checkpoint,
            data,
            group,
            out,
            steps,
            samples,
            frame,
        } => cmd_verify(&config, &checkpoint, &data, &group, &out, steps, samples, frame),
        Command::Plot { input, out } => cmd_plot(&input, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
