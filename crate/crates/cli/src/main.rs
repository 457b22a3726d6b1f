mod config;
mod exit;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avseg_core::gradsuite;
use avseg_core::model::{
    evaluate_clips, frame_means, load_checkpoint, predict, save_checkpoint, train, ClipBatch,
    ModelConfig, ModelParams, Plan,
};
use avseg_core::synthdata::{
    generate_dataset, load_dataset, save_dataset, Clip, ClipKind, Dataset, Split,
};
use avseg_core::uncertainty::{encode_pgm, write_uncertainty_pgms};
use clap::{Parser, Subcommand, ValueEnum};

use config::{check_geometry, parse_mix, RunConfig};
use exit::{CliError, CONFIG, DIVERGENCE, MISMATCH};

#[derive(Parser)]
#[command(
    name = "avseg",
    version,
    about = "Audio-guided segmentation on synthetic clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    None,
    NoSgsm,
    NoCst,
    NoUe,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clips: Option<usize>,
        /// Easy, case-1 and case-2 fractions, e.g. 0.4,0.3,0.3.
        #[arg(long, value_parser = parse_mix)]
        mix: Option<[f64; 3]>,
    },
    /// Train a model and write a checkpoint, loss log and validation report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        ablate: Ablate,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dump the token grouping of one frame at one level (1 to 3).
    Groups {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clip: usize,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        level: usize,
        /// Directory for the label map.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write per-frame uncertainty maps of one clip.
    Uncmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clip: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every component at tiny shapes.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop one adjoint on purpose; the full-model check must then fail.
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth {
            config,
            out,
            seed,
            clips,
            mix,
        } => cmd_synth(config.as_deref(), &out, seed, clips, mix),
        Command::Train {
            config,
            data,
            out,
            ablate,
            steps,
            seed,
        } => cmd_train(config.as_deref(), &data, &out, ablate, steps, seed),
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
        } => cmd_eval(&checkpoint, &data, split.into(), report.as_deref()),
        Command::Groups {
            checkpoint,
            data,
            clip,
            frame,
            level,
            out,
        } => cmd_groups(&checkpoint, &data, clip, frame, level, &out),
        Command::Uncmap {
            checkpoint,
            data,
            clip,
            out,
        } => cmd_uncmap(&checkpoint, &data, clip, &out),
        Command::Gradcheck {
            config,
            seed,
            corrupt_adjoint,
        } => cmd_gradcheck(config.as_deref(), seed, corrupt_adjoint),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn cmd_synth(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    clips: Option<usize>,
    mix: Option<[f64; 3]>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.clips = clips.unwrap_or(cfg.clips);
    cfg.mix = mix.unwrap_or(cfg.mix);
    cfg.validate()?;
    let dataset = generate_dataset(cfg.seed, cfg.clips, cfg.mix, &cfg.synth)?;
    save_dataset(&dataset, out)?;
    let count = |k: ClipKind| {
        dataset
            .manifest
            .clips
            .iter()
            .filter(|c| c.kind == k)
            .count()
    };
    println!(
        "{} clips written to {}: easy {} case1 {} case2 {}",
        dataset.clips.len(),
        out.display(),
        count(ClipKind::Easy),
        count(ClipKind::Case1),
        count(ClipKind::Case2)
    );
    Ok(())
}

fn load_data_for(data: &Path, model: &ModelConfig) -> Result<Dataset, CliError> {
    let dataset = load_dataset(data)?;
    check_geometry(model, &dataset.manifest.config).map_err(|m| CliError::new(MISMATCH, m))?;
    Ok(dataset)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    ablate: Ablate,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.model.steps = steps.unwrap_or(cfg.model.steps);
    cfg.model.seed = seed.unwrap_or(cfg.model.seed);
    match ablate {
        Ablate::None => {}
        Ablate::NoSgsm => cfg.model.ablation.sgsm = false,
        Ablate::NoCst => cfg.model.ablation.cst = false,
        Ablate::NoUe => cfg.model.ablation.ue = false,
    }
    cfg.validate()?;
    let dataset = load_data_for(data, &cfg.model)?;
    let model = &cfg.model;
    let (params, log) = match train(&dataset, model, |line| log::info!("{line}")) {
        Ok(result) => result,
        Err(e) => {
            let e = CliError::from(e);
            if e.code == DIVERGENCE {
                return Err(CliError::new(
                    DIVERGENCE,
                    format!("training diverged: {}", e.message),
                ));
            }
            return Err(e);
        }
    };
    save_checkpoint(out, &params, model)?;
    let mut csv = String::from("step,total,seg,cst\n");
    for s in &log.steps {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            s.step, s.loss.total, s.loss.seg, s.loss.cst
        );
    }
    write_file(&out.join("loss.csv"), csv)?;
    let mut evals = String::from("step,epoch,val_jf,val_j,val_f\n");
    for e in &log.evals {
        let _ = writeln!(
            evals,
            "{},{},{},{},{}",
            e.step, e.epoch, e.val_jf, e.val_j, e.val_f
        );
    }
    write_file(&out.join("eval.csv"), evals)?;
    let report = evaluate_clips(
        &params,
        model,
        &Plan::new(model),
        &dataset.split(Split::Val),
    )?;
    write_file(&out.join("val_report.json"), report.to_json())?;
    println!("variant {} steps {}", model.ablation.name(), model.steps);
    if log.empty_positive > 0 {
        println!("frames with an empty positive set: {}", log.empty_positive);
    }
    print!("{}", report.to_table());
    Ok(())
}

fn load_model(
    checkpoint: &Path,
    data: &Path,
) -> Result<(ModelConfig, ModelParams, Dataset), CliError> {
    let (cfg, params) = load_checkpoint(checkpoint)?;
    let dataset = load_data_for(data, &cfg)?;
    Ok((cfg, params, dataset))
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let (cfg, params, dataset) = load_model(checkpoint, data)?;
    let result = evaluate_clips(&params, &cfg, &Plan::new(&cfg), &dataset.split(split))?;
    if let Some(path) = report {
        write_file(path, result.to_json())?;
    }
    print!("{}", result.to_table());
    Ok(())
}

fn find_clip(dataset: &Dataset, id: usize) -> Result<&Clip, CliError> {
    dataset.clips.iter().find(|c| c.id == id).ok_or_else(|| {
        CliError::new(
            CONFIG,
            format!("clip {id} not in dataset ({} clips)", dataset.clips.len()),
        )
    })
}

fn cmd_groups(
    checkpoint: &Path,
    data: &Path,
    clip_id: usize,
    frame: usize,
    level: usize,
    out: &Path,
) -> Result<(), CliError> {
    let (cfg, params, dataset) = load_model(checkpoint, data)?;
    let clip = find_clip(&dataset, clip_id)?;
    if frame >= cfg.frames {
        return Err(CliError::new(
            CONFIG,
            format!("frame {frame} out of range 0..{}", cfg.frames),
        ));
    }
    if !(1..=3).contains(&level) {
        return Err(CliError::new(
            CONFIG,
            format!("level {level} out of range 1..=3"),
        ));
    }
    if !cfg.ablation.sgsm {
        return Err(CliError::new(
            CONFIG,
            "this checkpoint was trained without grouping",
        ));
    }
    let pred = predict(&params, &cfg, &Plan::new(&cfg), &ClipBatch::from_clip(clip))?;
    let ga = &pred.decisions.groups[level - 1][frame];
    print!("{}", ga.to_table());
    let (h, w) = cfg.grid(level - 1);
    let top = ga.num_groups().saturating_sub(1).max(1);
    let pixels: Vec<u8> = ga.labels().iter().map(|&l| (l * 255 / top) as u8).collect();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(format!("groups_clip{clip_id:05}_t{frame}_l{level}.pgm"));
    write_file(&path, encode_pgm(&pixels, w, h))?;
    println!(
        "{} tokens, {} groups, label map {}",
        ga.num_tokens(),
        ga.num_groups(),
        path.display()
    );
    Ok(())
}

fn cmd_uncmap(checkpoint: &Path, data: &Path, clip_id: usize, out: &Path) -> Result<(), CliError> {
    let (cfg, params, dataset) = load_model(checkpoint, data)?;
    let clip = find_clip(&dataset, clip_id)?;
    if !cfg.ablation.ue {
        return Err(CliError::new(
            CONFIG,
            "this checkpoint was trained without the uncertainty branch",
        ));
    }
    let pred = predict(&params, &cfg, &Plan::new(&cfg), &ClipBatch::from_clip(clip))?;
    let dn = pred.delta_norm.expect("UE branch is on");
    let paths = write_uncertainty_pgms(&dn, out, &format!("clip{clip_id:05}"))?;
    let transitions = clip.spec.transition_frames();
    for (t, (mean, path)) in frame_means(&dn).iter().zip(&paths).enumerate() {
        let mark = if transitions.contains(&t) {
            " transition"
        } else {
            ""
        };
        println!(
            "frame {t} mean_delta_norm {mean:.6} {}{mark}",
            path.display()
        );
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64, corrupt: bool) -> Result<(), CliError> {
    // The suite runs at fixed tiny shapes; the config is only validated.
    RunConfig::load(config)?.validate()?;
    let lines = gradsuite::run(seed, corrupt)?;
    let mut failed = 0;
    for l in &lines {
        let verdict = if l.passed() { "ok" } else { "FAIL" };
        println!(
            "{:20} max_rel_error {:.3e} tol {:.0e} {verdict}",
            l.name, l.error, l.tol
        );
        failed += usize::from(!l.passed());
    }
    if failed > 0 {
        return Err(CliError::new(
            DIVERGENCE,
            format!("{failed} gradient checks failed"),
        ));
    }
    Ok(())
}
