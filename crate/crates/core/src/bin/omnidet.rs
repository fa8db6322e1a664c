//! `omnidet` command line: gen-data, train, eval, plot.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use omnidet::data::{read_dataset, write_dataset, Dataset};
use omnidet::detector::Network;
use omnidet::evaluation::{write_detections, DetectionRecord};
use omnidet::plot::{plot_loss_curves, plot_map_comparison};
use omnidet::trainer::{
    evaluate_detections, load_checkpoint, predict_dataset, read_eval_log, read_loss_log, Trainer,
};
use omnidet::{Config, Error, Exec, Result};

/// Overrides every command's output directory.
const OUT_DIR_ENV: &str = "OMNIDET_OUT_DIR";

#[derive(Parser)]
#[command(name = "omnidet", version, about = "Omni-supervised toy lesion detector")]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a detector.
    Train(Train),
    /// Score a checkpoint on a dataset.
    Eval(Eval),
    /// Render loss curves and an mAP comparison from run directories.
    Plot(Plot),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value = "train")]
    split: String,
    /// Fractions r_f,r_w,r_u of full, weak and unlabeled records.
    #[arg(long, value_parser = parse_ratios)]
    granularity: Option<[f64; 3]>,
}

#[derive(Args)]
struct Train {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset for the learning-rate schedule.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    resume: bool,
    /// Re-partition a fully annotated training set as r_f,r_w,r_u.
    #[arg(long, value_parser = parse_ratios)]
    granularity: Option<[f64; 3]>,
    /// Turn off every auxiliary loss.
    #[arg(long)]
    supervised_only: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    warm_start_steps: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Any config key, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score the EMA teacher instead of the student.
    #[arg(long)]
    teacher: bool,
    /// Write detections as JSON lines.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Write the result table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    /// Run directories (each with losses.csv and optionally eval.csv); label=dir sets the bar label.
    #[arg(required = true)]
    runs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_ratios(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let r: [f64; 3] = parts
        .try_into()
        .map_err(|_| "expected three comma-separated ratios".to_string())?;
    if r.iter().any(|v| *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err("ratios must be nonnegative and sum to 1".into());
    }
    Ok(r)
}

fn out_dir(flag: &Path) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| flag.to_path_buf())
}

/// Layers config sources: defaults, TOML file, `--set` pairs, then named flags.
fn build_config(args: &Train) -> Result<Config> {
    let mut table = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            text.parse::<toml::Table>()?
        }
        None => toml::Table::new(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects key=value, got {kv:?}")))?;
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").expect("key v"))
            .unwrap_or_else(|_| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    let mut config: Config = table.try_into()?;
    macro_rules! flag {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { config.$f = v; } )* };
    }
    flag!(steps, learning_rate, seed, image_size, channels, warm_start_steps, eval_interval);
    if args.supervised_only {
        config = config.supervised_only();
    }
    config.validate()?;
    Ok(config)
}

fn gen_data(a: &GenData, exec: Exec) -> Result<()> {
    let mut ds = omnidet::data::generate_synthetic(a.seed, a.n, a.size, a.classes, &a.split, exec)?;
    if let Some(r) = a.granularity {
        ds = ds.partition(r, a.seed)?;
    }
    let out = out_dir(&a.out);
    write_dataset(&out, &ds)?;
    println!(
        "wrote {} images to {} (full {}, weak {}, unlabeled {})",
        ds.manifest.len(),
        out.display(),
        ds.manifest.count(omnidet::Granularity::Full),
        ds.manifest.count(omnidet::Granularity::Weak),
        ds.manifest.count(omnidet::Granularity::Unlabeled)
    );
    Ok(())
}

fn train(a: &Train, exec: Exec) -> Result<()> {
    let config = build_config(a)?;
    let out = out_dir(&a.out);
    let mut data: Dataset = read_dataset(&a.data)?;
    if data.manifest.num_classes != config.num_classes {
        return Err(Error::ConfigMismatch {
            field: "num_classes".into(),
            found: data.manifest.num_classes.to_string(),
            expected: config.num_classes.to_string(),
        });
    }
    if let Some(r) = a.granularity {
        data = data.partition(r, config.seed)?;
    }
    let val = a.val.as_deref().map(read_dataset).transpose()?;
    let mut trainer = if a.resume {
        let ckpt = load_checkpoint(&out.join("checkpoint.bin"))?;
        ckpt.ensure_compatible(&config)?;
        let mut t = Trainer::from_checkpoint(ckpt, exec)?;
        t.config.steps = config.steps;
        t.config.eval_interval = config.eval_interval;
        info!("resuming at step {}", t.state.step);
        t
    } else {
        Trainer::new(config, exec)?
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    std::fs::write(out.join("config.toml"), toml::to_string(&trainer.config).map_err(|e| Error::Invalid(e.to_string()))?)
        .map_err(|e| Error::io("writing config.toml", e))?;
    let reports = trainer.run(&data, val.as_ref(), &out)?;
    if let Some(last) = reports.last() {
        println!("step {} total loss {:.5}", last.step, last.total);
    }
    if let Some(val) = &val {
        let r = trainer.evaluate(val)?;
        println!("{}", r.table());
    }
    println!("checkpoint: {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn eval(a: &Eval, exec: Exec) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let net = Network::from_config(&ckpt.config);
    let params = if a.teacher { &ckpt.state.teacher.params } else { &ckpt.state.params };
    let dets = predict_dataset(&net, params, &ckpt.config, &data, exec)?;
    if let Some(p) = &a.detections {
        let recs: Vec<DetectionRecord> = data
            .manifest
            .records
            .iter()
            .zip(&dets)
            .flat_map(|(r, ds)| ds.iter().map(|d| DetectionRecord::new(&r.id, d)))
            .collect();
        write_detections(p, &recs)?;
    }
    let result = evaluate_detections(&data, dets, exec)?;
    if let Some(p) = &a.csv {
        result.write_csv(p)?;
    }
    print!("{}", result.table());
    Ok(())
}

fn plot(a: &Plot) -> Result<()> {
    let out = out_dir(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut bars = Vec::new();
    for spec in &a.runs {
        let (label, dir) = match spec.split_once('=') {
            Some((l, d)) => (l.to_string(), PathBuf::from(d)),
            None => {
                let d = PathBuf::from(spec);
                let l = d.file_name().map_or(spec.clone(), |f| f.to_string_lossy().into_owned());
                (l, d)
            }
        };
        let losses = read_loss_log(&dir.join("losses.csv"))?;
        let png = out.join(format!("{label}_losses.png"));
        plot_loss_curves(&losses, &png)?;
        println!("wrote {}", png.display());
        let eval_path = dir.join("eval.csv");
        if eval_path.exists() {
            if let Some(last) = read_eval_log(&eval_path)?.last() {
                bars.push((label, last.map));
            }
        }
    }
    if !bars.is_empty() {
        let png = out.join("map_comparison.png");
        plot_map_comparison(&bars, &png)?;
        println!("wrote {}", png.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
