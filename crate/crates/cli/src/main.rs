use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mifl_core::config::PipelineConfig;
use mifl_core::data::{
    load_dataset, read_split_manifest, split_train_test, synth_generate, write_descriptors, write_split_manifest,
};
use mifl_core::eval::{cmc, fuse_scores, CmcCurve, ScoreMatrix};
use mifl_core::pipeline::{self, TrainedModel, TRAINING_LOG_FILE};
use mifl_core::verify::{self, VerifyOptions};

const SPLIT_FILE: &str = "split.csv";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(
    name = "mifl",
    version,
    about = "Cross-view matching with marginalized invariant features and a second-order metric"
)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Disable the corruption penalties in both learning stages.
    #[arg(long, global = true)]
    no_marg: bool,
    /// Disable the latent invariance term.
    #[arg(long, global = true)]
    no_inv: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute stripe descriptors for an image dataset and write them as CSV.
    Extract { dataset: PathBuf },
    /// Write a synthetic two-view descriptor dataset.
    Synth,
    /// Split identities, train every stage and write the model.
    Train { dataset: Option<PathBuf> },
    /// Rank the test identities with a trained model and write CMC curves.
    Evaluate {
        dataset: Option<PathBuf>,
        /// Model directory written by `train`.
        #[arg(long, value_name = "DIR", default_value = "model")]
        model: PathBuf,
        /// Extra score matrices (CSV) to fuse with the learned scores.
        #[arg(long, value_name = "PATH")]
        fuse: Vec<PathBuf>,
    },
    /// Run the numerical self-checks.
    Verify {
        /// Monte-Carlo draws for the expectation check.
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.synth.seed = cfg.seed;
    cfg.no_marg |= cli.no_marg;
    cfg.no_inv |= cli.no_inv;
    Ok(cfg)
}

fn dataset_path(arg: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| mifl_core::Error::Config("no dataset given on the command line or in the config".into()).into())
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| mifl_core::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn extract(cli: &Cli, dataset: &Path) -> Result<()> {
    let out = out_dir(cli, "descriptors")?;
    let d = load_dataset(dataset)?.with_descriptors()?;
    let rows = write_descriptors(&d, &out)?;
    println!("{} images, {rows} descriptor rows -> {}", d.len(), out.display());
    Ok(())
}

fn synth(cli: &Cli, cfg: &PipelineConfig) -> Result<()> {
    let out = out_dir(cli, "synthetic")?;
    let d = synth_generate(&cfg.synth)?;
    let rows = write_descriptors(&d, &out)?;
    println!(
        "{} identities, {rows} descriptor rows -> {}",
        cfg.synth.n_identities,
        out.display()
    );
    Ok(())
}

fn train(cli: &Cli, cfg: &PipelineConfig, dataset: &Option<PathBuf>) -> Result<()> {
    let path = dataset_path(dataset, cfg)?;
    let out = out_dir(cli, "model")?;
    let data = load_dataset(&path)?.with_descriptors()?;
    let n = data.identities().len();
    let p = cfg.train_identities.unwrap_or(n / 2);
    let (train, test) = split_train_test(&data, p, cfg.seed)?;
    write_split_manifest(&train, &test, &out.join(SPLIT_FILE))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())
        .with_context(|| format!("writing {}", out.join(CONFIG_FILE).display()))?;

    let shape = pipeline::plan(&train, cfg)?;
    println!(
        "{} training pairs, {} stripe pairs, kernel dim {}, latent concat {} -> metric dim {}",
        shape.training_pairs, shape.stripe_pairs, shape.kernel_dim, shape.concat_dim, shape.metric_dim
    );
    let (model, log) = pipeline::train(&train, cfg)?;
    model.save(&out)?;
    log.write_csv(&out.join(TRAINING_LOG_FILE))?;
    if let (Some(first), Some(last)) = (log.layer1.first(), log.layer1.last()) {
        println!("layer1 objective {:.6e} -> {:.6e}", first.objective, last.objective);
    }
    if let (Some(first), Some(last)) = (log.metric.first(), log.metric.last()) {
        println!("metric objective {first:.6e} -> {last:.6e}");
    }
    println!("model -> {}", out.display());
    Ok(())
}

fn write_summary(path: &Path, rows: &[(&str, &CmcCurve)]) -> Result<()> {
    let mut text = String::from("method,rank,rate\n");
    for (name, curve) in rows {
        for (rank, rate) in curve.summary() {
            text.push_str(&format!("{name},{rank},{rate}\n"));
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn evaluate(
    cli: &Cli,
    cfg: &PipelineConfig,
    dataset: &Option<PathBuf>,
    model_dir: &Path,
    fuse: &[PathBuf],
) -> Result<()> {
    let path = dataset_path(dataset, cfg)?;
    let out = match &cli.out {
        Some(_) => out_dir(cli, "")?,
        None => model_dir.to_path_buf(),
    };
    let model = TrainedModel::load(model_dir)?;
    let mut data = load_dataset(&path)?;
    let manifest = model_dir.join(SPLIT_FILE);
    if manifest.is_file() {
        let (_, test) = read_split_manifest(&manifest)?;
        data = data.restrict(&test);
        info!(
            "evaluating the {} test identities listed in {}",
            test.len(),
            manifest.display()
        );
    }
    let ev = pipeline::evaluate(&model, &data, cfg.seed)?;
    ev.learned.write_csv(&out.join("scores.csv"))?;
    ev.baseline.write_csv(&out.join("scores_baseline.csv"))?;
    ev.learned_cmc.write_csv(&out.join("cmc.csv"))?;
    ev.baseline_cmc.write_csv(&out.join("cmc_baseline.csv"))?;

    let mut rows = vec![
        ("learned", ev.learned_cmc.clone()),
        ("euclidean", ev.baseline_cmc.clone()),
    ];
    if !fuse.is_empty() {
        let mut lists = vec![ev.learned.clone()];
        for p in fuse {
            lists.push(ScoreMatrix::read_csv(p)?);
        }
        let fused = fuse_scores(&lists)?;
        let curve = cmc(&fused)?;
        fused.write_csv(&out.join("scores_fused.csv"))?;
        curve.write_csv(&out.join("cmc_fused.csv"))?;
        rows.push(("fused", curve));
    }
    let refs: Vec<(&str, &CmcCurve)> = rows.iter().map(|(n, c)| (*n, c)).collect();
    write_summary(&out.join("summary.csv"), &refs)?;

    println!(
        "{:<10} {:>7} {:>7} {:>7} {:>7}",
        "method", "rank1", "rank5", "rank10", "rank20"
    );
    for (name, curve) in &rows {
        let s = curve.summary();
        println!(
            "{name:<10} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            s[0].1, s[1].1, s[2].1, s[3].1
        );
    }
    println!("{} probes -> {}", ev.learned.probe_ids().len(), out.display());
    Ok(())
}

fn run_verify(cli: &Cli, cfg: &PipelineConfig, draws: usize, inject_fault: bool) -> Result<bool> {
    let opts = VerifyOptions {
        inject_gradient_fault: inject_fault,
        monte_carlo_draws: draws,
    };
    let checks = verify::run_all(cfg.seed, &opts)?;
    for c in &checks {
        println!("{c}");
    }
    if cli.out.is_some() {
        let out = out_dir(cli, "")?;
        let mut text = String::from("check,max_error,tolerance,instances,passed\n");
        for c in &checks {
            text.push_str(&format!(
                "{},{:e},{:e},{},{}\n",
                c.name,
                c.error,
                c.tolerance,
                c.instances,
                c.passed()
            ));
        }
        let path = out.join("verify.csv");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Extract { dataset } => extract(cli, dataset)?,
        Command::Synth => synth(cli, &cfg)?,
        Command::Train { dataset } => train(cli, &cfg, dataset)?,
        Command::Evaluate { dataset, model, fuse } => evaluate(cli, &cfg, dataset, model, fuse)?,
        Command::Verify { draws, inject_fault } => {
            if !run_verify(cli, &cfg, *draws, *inject_fault)? {
                eprintln!("verification failed");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<mifl_core::Error>() {
        Some(err) if !err.is_input_error() => 1,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_errors_map_to_two() {
        let e = anyhow::anyhow!(mifl_core::Error::Config("x".into()));
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::anyhow!(mifl_core::Error::Diverged {
            iteration: 3,
            term: "loss".into()
        });
        assert_eq!(exit_code(&e), 1);
        let e = anyhow::anyhow!(mifl_core::Error::Config("x".into()).in_stage("metric"));
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["mifl", "train", "data", "--seed", "3", "--no-inv", "--out", "m"]).unwrap();
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(cfg.no_inv && !cfg.no_marg);
    }
}
