use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mpt_core::config::{DatasetConfig, TrainConfig};
use mpt_core::diffeo::{exponentiate, jacobian_determinant, VelocityField};
use mpt_core::grad::{check_kernel, check_network, save_checkpoint, KERNELS};
use mpt_core::io::{load_tensor, save_pgm, save_tensor};
use mpt_core::metrics::{evaluate, mean_std, ClassScores, SegMask};
use mpt_core::morphpatch::deform_features;
use mpt_core::phantom::{load_split, make_dataset, MANIFEST};
use mpt_core::train::{config_sidecar, load_net, train, Dataset, LOG_HEADER};
use mpt_core::Tensor;

const KERNEL_TOL: f64 = 1e-6;
const NETWORK_TOL: f64 = 1e-4;

/// Morph-patch transformer toolkit: phantoms, training, evaluation,
/// deformation inspection and gradient checks.
#[derive(Parser)]
#[command(name = "mpt", version)]
struct Cli {
    /// Seed overriding the one in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset.
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or precomputed masks) on the eval split.
    Eval {
        #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
        ckpt: Option<PathBuf>,
        /// Directory of predicted masks named like the ground-truth masks.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Training config; defaults to the one saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Integrate a velocity field and warp an image with it.
    Deform {
        #[arg(long)]
        velocity: PathBuf,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, conflicts_with = "full")]
        kernel: Option<String>,
        /// Every kernel plus the whole network.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// CSV log path (default: `<out>.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Disable the morph path.
    #[arg(long)]
    no_mp: bool,
    /// Disable semantic clustering attention.
    #[arg(long)]
    no_sca: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Phantom { spec, out } => {
            let mut cfg = DatasetConfig::load(&spec)?;
            if let Some(s) = cli.seed {
                cfg.spec.seed = s;
            }
            make_dataset(&cfg.spec, cfg.n_train, cfg.n_eval, &out)
                .with_context(|| format!("writing dataset to {}", out.display()))?;
            println!("wrote {} train and {} eval samples to {}", cfg.n_train, cfg.n_eval, out.display());
        }
        Cmd::Train(a) => run_train(a, cli.seed)?,
        Cmd::Eval { ckpt, pred, data, config, split } => run_eval(ckpt, pred, &data, config, &split)?,
        Cmd::Deform { velocity, steps, image, out } => run_deform(&velocity, steps, &image, &out)?,
        Cmd::Gradcheck { kernel, full } => return run_gradcheck(kernel, full, cli.seed.unwrap_or(0)),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.model.morph &= !a.no_mp;
    cfg.model.sca &= !a.no_sca;
    let data = Dataset::load(&a.data, cfg.model.num_classes)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".csv");
        s.into()
    });
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{LOG_HEADER}")?;
    println!("{LOG_HEADER}");
    let out = train(&cfg, &data.train, &data.eval, |row| {
        let line = row.csv_row();
        println!("{line}");
        writeln!(log, "{line}")?;
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&a.out, &out.store).with_context(|| format!("writing {}", a.out.display()))?;
    fs::write(config_sidecar(&a.out), cfg.to_text())?;
    Ok(())
}

fn run_eval(
    ckpt: Option<PathBuf>,
    pred: Option<PathBuf>,
    data: &Path,
    config: Option<PathBuf>,
    split: &str,
) -> Result<()> {
    let dir = data.join(split);
    let scores = match (ckpt, pred) {
        (Some(ckpt), _) => {
            let cfg_path = config.unwrap_or_else(|| config_sidecar(&ckpt));
            let cfg = TrainConfig::load(&cfg_path).context("loading the training config")?;
            let net = load_net(&ckpt, &cfg.model)?;
            let samples = load_split(&dir, cfg.model.num_classes)?;
            mpt_core::train::evaluate_net(&net, &samples)?
        }
        (None, Some(pred)) => {
            let text = fs::read_to_string(dir.join(MANIFEST))
                .with_context(|| format!("reading {}", dir.join(MANIFEST).display()))?;
            let mut scores = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let mask = line.split_whitespace().nth(1).context("manifest line without a mask")?;
                let gt = SegMask::from_tensor(&load_tensor(dir.join(mask))?, 2)?;
                let p = SegMask::from_tensor(&load_tensor(pred.join(mask))?, 2)?;
                scores.push(evaluate(&p, &gt)?);
            }
            scores
        }
        (None, None) => bail!("either --ckpt or --pred is required"),
    };
    if scores.is_empty() {
        bail!("no samples in {}", dir.display());
    }
    let show = |name: &str, v: Vec<f64>| {
        let (m, s) = mean_std(&v);
        println!("{name} {m:.3} ({s:.3})");
    };
    show("Dice", scores.iter().map(|s| s.dice).collect());
    show("mIoU", scores.iter().map(|s| s.miou).collect());
    show("clDice", scores.iter().map(|s| s.cl_dice).collect());
    println!();
    println!("metric,class,value");
    for (i, class) in scores[0].classes.iter().map(|c| c.class).enumerate() {
        let mean =
            |f: fn(&ClassScores) -> f64| scores.iter().map(|s| f(&s.classes[i])).sum::<f64>() / scores.len() as f64;
        println!("dice,{class},{:.6}", mean(|c| c.dice));
        println!("iou,{class},{:.6}", mean(|c| c.iou));
        println!("cldice,{class},{:.6}", mean(|c| c.cl_dice));
    }
    Ok(())
}

fn run_deform(velocity: &Path, steps: usize, image: &Path, out: &Path) -> Result<()> {
    let v = VelocityField::unbounded(load_tensor(velocity).context("loading velocity")?)?;
    let img = load_tensor(image).context("loading image")?;
    let phi = exponentiate(&v, steps)?;
    let warped = deform_features(&img, &phi)?;
    let jac = jacobian_determinant(&phi)?;
    fs::create_dir_all(out)?;
    save_tensor(out.join("field.mtk"), phi.offsets())?;
    save_tensor(out.join("jacobian.mtk"), &jac)?;
    save_tensor(out.join("warped.mtk"), &warped)?;
    let plane = |t: &Tensor, c: usize| -> Result<Tensor> {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        Ok(Tensor::new(vec![h, w], t.data()[c * h * w..(c + 1) * h * w].to_vec())?)
    };
    save_pgm(out.join("field_row.pgm"), &plane(phi.offsets(), 0)?)?;
    save_pgm(out.join("field_col.pgm"), &plane(phi.offsets(), 1)?)?;
    save_pgm(out.join("jacobian.pgm"), &jac)?;
    for c in 0..warped.shape()[0] {
        let name = if warped.shape()[0] == 1 { "warped.pgm".to_string() } else { format!("warped_{c}.pgm") };
        save_pgm(out.join(name), &plane(&warped, c)?)?;
    }
    println!("min jacobian {:.6}", jac.min());
    Ok(())
}

fn run_gradcheck(kernel: Option<String>, full: bool, seed: u64) -> Result<ExitCode> {
    let names: Vec<&str> = match &kernel {
        Some(k) if !KERNELS.contains(&k.as_str()) => bail!("unknown kernel '{k}' (known: {})", KERNELS.join(", ")),
        Some(k) => vec![k.as_str()],
        None => KERNELS.to_vec(),
    };
    let mut ok = true;
    for name in names {
        let err = check_kernel(name, seed)?;
        let pass = err < KERNEL_TOL;
        ok &= pass;
        println!("{name} max rel-err {err:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    if full {
        let r = check_network(seed)?;
        let pass = r.max_rel_err < NETWORK_TOL;
        ok &= pass;
        println!(
            "network max rel-err {:.3e} over {} coordinates {}",
            r.max_rel_err,
            r.checked,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
