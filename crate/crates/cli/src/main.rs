mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lshg_core::checkpoint::load_checkpoint;
use lshg_core::eval::{bench, coordinates, decode_targets, pckh, predict_joints};
use lshg_core::gradcheck::{run_suite, FD_TOLERANCE};
use lshg_core::graph::OpKind;
use lshg_core::hourglass::{
    build_network, closed_form_mac_count, closed_form_param_count, NetworkConfig, VARIANT_NAMES,
};
use lshg_core::pipeline::{load_dataset, make_synthetic_dataset, prepare_samples, train, write_dataset};
use lshg_core::reconcile::reconcile;
use lshg_core::{Error, Result};

use config::{keys_help, RunConfig};

#[derive(Parser)]
#[command(name = "lshg", version, about = "Lightweight stacked hourglass toolkit", after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file (`key = value` lines) or preset name.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerated and closed-form parameter counts, MACs, and the published-roster reconciliation.
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Reconcile all ten roster configurations at widths 128 and 256.
        #[arg(long)]
        all_table1: bool,
    },
    /// Finite-difference gradient suite in double precision.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dw1")]
        variant: String,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory with annotations.jsonl and its images.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        no_augment: bool,
    },
    /// PCKh of a checkpoint on a dataset directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "from_targets")]
        checkpoint: Option<PathBuf>,
        /// Score the decoded targets instead of network output.
        #[arg(long)]
        from_targets: bool,
        #[arg(long)]
        quarter_offset: bool,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Forward-pass timing with MAC and parameter counts, one row per config.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Further configs to compare.
        #[arg(long = "also")]
        also: Vec<String>,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Render synthetic stick figures with annotations.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
}

/// 0 success, 1 validation or usage, 2 numeric gate, 3 I/O.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) | Error::Consistency(_) => 2,
        Error::Io { .. } | Error::Image(_) | Error::Format(_) => 3,
        _ => 1,
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(spec) => RunConfig::load(spec)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn count_params(common: &Common, all: bool) -> Result<bool> {
    if all {
        let report = reconcile()?;
        print!("{}", report.to_text());
        if let Some(dir) = &common.out {
            create_dir(dir)?;
            write(&dir.join("reconciliation.csv"), &report.to_csv())?;
            write(&dir.join("reconciliation.txt"), &report.to_text())?;
        }
        return Ok(true);
    }
    let config = run_config(common)?.network;
    let net = build_network::<f32>(&config, 0)?;
    let enumerated = net.param_count();
    let closed = closed_form_param_count(&config);
    let macs = net.mac_count()?;
    let closed_macs = closed_form_mac_count(&config);
    println!("parameters (enumerated):  {enumerated}");
    println!("parameters (closed form): {closed}");
    println!("MACs (enumerated):        {macs}");
    println!("MACs (closed form):       {closed_macs}");
    for (part, n) in net.param_breakdown() {
        println!("  {part:<20} {n:>11}");
    }
    if enumerated != closed || macs != closed_macs {
        return Err(Error::Consistency("enumeration and closed form disagree".into()));
    }
    println!("audit: ok");
    Ok(true)
}

fn gradcheck(common: &Common, variant: &str, fault: Option<&str>) -> Result<bool> {
    let mut network = NetworkConfig::default();
    network.set("variant", variant).map_err(|_| {
        Error::Config(format!(
            "unknown variant `{variant}`; valid: {}",
            VARIANT_NAMES.join(", ")
        ))
    })?;
    let fault = fault
        .map(|f| OpKind::parse(f).ok_or_else(|| Error::Config(format!("unknown op `{f}`"))))
        .transpose()?;
    let seed = common.seed.unwrap_or(0);
    let reports = run_suite(network.variant, network.reduced_stem, seed, fault)?;
    let mut ok = true;
    for r in &reports {
        let pass = r.passed(FD_TOLERANCE);
        ok &= pass;
        println!(
            "{:<32} max_rel_err {:.3e}  {}  worst {}",
            r.component,
            r.max_rel_error,
            if pass { "PASS" } else { "FAIL" },
            r.worst
        );
    }
    for r in reports.iter().filter(|r| !r.passed(FD_TOLERANCE)) {
        eprintln!("gradient check failed in {} at {}", r.component, r.worst);
    }
    Ok(ok)
}

fn train_cmd(
    common: &Common,
    data: Option<&Path>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    no_augment: bool,
) -> Result<bool> {
    let mut config = run_config(common)?;
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(b) = batch_size {
        config.batch_size = b;
    }
    if let Some(lr) = lr {
        config.lr = lr;
    }
    if no_augment {
        config.augment = false;
    }
    let data = data
        .map(Path::to_path_buf)
        .or(config.data_dir.clone())
        .ok_or_else(|| Error::Config("train needs --data or data_dir".into()))?;
    let out = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("train needs --out or out_dir".into()))?;
    let samples = prepare_samples(&load_dataset(&data)?, &config.sample_config())?;
    let mut net = build_network::<f32>(&config.network, config.seed)?;
    let report = train(&mut net, &samples, &config.sample_config(), &config.train_config(), Some(&out))?;
    for r in &report.history {
        println!("epoch {:>4}  loss {:.6e}", r.epoch, r.mean_loss);
    }
    println!("wrote {}", out.display());
    Ok(true)
}

fn eval_cmd(
    common: &Common,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    from_targets: bool,
    quarter_offset: bool,
    threshold: f64,
) -> Result<bool> {
    let mut config = run_config(common)?;
    let net = match checkpoint {
        Some(path) if !from_targets => {
            let net = load_checkpoint::<f32>(path)?;
            config.network = net.config().clone();
            Some(net)
        }
        _ => None,
    };
    let data = data
        .map(Path::to_path_buf)
        .or(config.data_dir.clone())
        .ok_or_else(|| Error::Config("eval needs --data or data_dir".into()))?;
    let items = load_dataset(&data)?;
    let sample_config = config.sample_config();
    let samples = prepare_samples(&items, &sample_config)?;
    let decoded = match &net {
        Some(net) => predict_joints(net, &samples, &sample_config, config.batch_size, quarter_offset)?,
        None => decode_targets(&samples, &sample_config, quarter_offset)?,
    };
    let annotations: Vec<_> = items.into_iter().map(|(_, a)| a).collect();
    let report = pckh(&coordinates(&decoded), &annotations, threshold)?;
    print!("{}", report.to_csv());
    if !report.skipped_images.is_empty() {
        eprintln!("skipped images with zero head size: {:?}", report.skipped_images);
    }
    if let Some(out) = &config.out_dir {
        create_dir(out)?;
        write(&out.join("pckh.csv"), &report.to_csv())?;
    }
    Ok(true)
}

fn bench_cmd(common: &Common, also: &[String], iterations: usize, warmup: usize) -> Result<bool> {
    let mut names = vec![common.config.clone().unwrap_or_else(|| "hg1".into())];
    names.extend(also.iter().cloned());
    println!(
        "{:<20} {:>12} {:>16} {:>11} {:>11} {:>11}",
        "config", "params", "MACs", "median_ms", "p10_ms", "p90_ms"
    );
    for name in names {
        let config = RunConfig::load(&name)?;
        let net = build_network::<f32>(&config.network, common.seed.unwrap_or(0))?;
        let r = bench(&net, iterations, warmup, common.seed.unwrap_or(0))?;
        println!(
            "{:<20} {:>12} {:>16} {:>11.2} {:>11.2} {:>11.2}",
            name,
            r.params,
            r.macs,
            r.median * 1e3,
            r.p10 * 1e3,
            r.p90 * 1e3
        );
    }
    Ok(true)
}

fn synth(common: &Common, n: usize) -> Result<bool> {
    if n == 0 {
        return Err(Error::Config("synth needs --n ≥ 1".into()));
    }
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("synth needs --out".into()))?;
    write_dataset(&out, &make_synthetic_dataset(n, common.seed.unwrap_or(0)))?;
    println!("wrote {n} images to {}", out.display());
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::CountParams { common, all_table1 } => count_params(&common, all_table1),
        Command::Gradcheck {
            common,
            variant,
            inject_fault,
        } => gradcheck(&common, &variant, inject_fault.as_deref()),
        Command::Train {
            common,
            data,
            epochs,
            batch_size,
            lr,
            no_augment,
        } => train_cmd(&common, data.as_deref(), epochs, batch_size, lr, no_augment),
        Command::Eval {
            common,
            data,
            checkpoint,
            from_targets,
            quarter_offset,
            threshold,
        } => eval_cmd(&common, data.as_deref(), checkpoint.as_deref(), from_targets, quarter_offset, threshold),
        Command::Bench {
            common,
            also,
            iterations,
            warmup,
        } => bench_cmd(&common, &also, iterations, warmup),
        Command::Synth { common, n } => synth(&common, n),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("LSHG_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("LSHG_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lshg_core::blocks::Variant;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Consistency("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 3);
    }

    #[test]
    fn every_variant_name_is_accepted() {
        for v in VARIANT_NAMES {
            NetworkConfig::default().set("variant", v).unwrap();
        }
        assert_eq!(Variant::ALL.len() + 1, VARIANT_NAMES.len());
    }
}
