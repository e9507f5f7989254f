//! `mvcc` command-line tool: dataset generation, training, evaluation and
//! experiment suites.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mvcc_core::config::{KeyValues, Ratio};
use mvcc_core::data::{generate_dataset, read_dataset, split, write_dataset, ConfusionMatrix, DataConfig, Manifest};
use mvcc_core::model::{load_checkpoint, save_checkpoint};
use mvcc_core::trainer::{run_experiment, run_suite, suite_csv, Datasets, SuiteConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "mvcc", version, about = "Multi-view correlation consistency for semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into DIR/train and DIR/eval.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes metrics.csv, checkpoint.bin, config.cfg and summary.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the mIoU of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `gen-data` output directory (its `eval/` part is used) or a
        /// single dataset directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run every configured (variant, η, w_cc) combination over seeds 0..K.
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the `jobs` key of the config.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::Suite {
            config,
            seeds,
            out,
            jobs,
        } => suite(&config, seeds, &out, jobs),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let mut kv = KeyValues::read(config)?;
    let ratio: Ratio = kv.take("ratio")?.unwrap_or(Ratio(0.125));
    let split_seed: u64 = kv.take("split_seed")?.unwrap_or(0);
    let cfg = DataConfig::from_kv(&mut kv)?;
    kv.finish()?;

    let train = generate_dataset(&cfg, cfg.count, cfg.seed)?;
    let manifest = split(&train.ids, ratio.0, split_seed)?;
    write_dataset(&out.join("train"), &train, &manifest, &cfg)?;

    let eval_cfg = DataConfig {
        count: cfg.eval_count,
        seed: cfg.eval_seed,
        ..cfg.clone()
    };
    let eval = generate_dataset(&eval_cfg, eval_cfg.count, eval_cfg.seed)?;
    let all_labeled = Manifest {
        entries: eval.ids.iter().map(|id| (id.clone(), true)).collect(),
    };
    write_dataset(&out.join("eval"), &eval, &all_labeled, &eval_cfg)?;
    println!(
        "wrote {} training images ({} labeled) and {} evaluation images to {}",
        train.len(),
        manifest.labeled().len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let mut kv = KeyValues::read(config)?;
    let cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let data = Datasets::load(&cfg.data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.cfg"), &cfg.to_kv_text())?;
    let record = run_experiment(&cfg, &data)?;
    write(&out.join("metrics.csv"), &record.metrics_csv())?;
    save_checkpoint(&record.best_net, &out.join("checkpoint.bin"))?;
    let summary = format!(
        "variant = {}\nseed = {}\nfinal_miou = {:.6}\nwall_time_s = {:.3}\n",
        cfg.variant,
        cfg.seed,
        record.final_miou,
        record.wall_time.as_secs_f64()
    );
    write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let dir = if data.join("eval").join("dataset.cfg").exists() {
        data.join("eval")
    } else {
        data.to_path_buf()
    };
    let (ds, _, _) = read_dataset(&dir)?;
    if ds.classes != net.config().classes {
        bail!("checkpoint predicts {} classes but the data has {}", net.config().classes, ds.classes);
    }
    let mut cm = ConfusionMatrix::new(ds.classes);
    for (img, label) in ds.images.iter().zip(&ds.labels) {
        cm.add(label, &net.predict(img)?)?;
    }
    let (miou, per_class) = cm.miou()?;
    println!("images = {}", ds.len());
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("iou_class{c} = {v:.6}"),
            None => println!("iou_class{c} = absent"),
        }
    }
    println!("miou = {miou:.6}");
    Ok(())
}

fn suite(config: &Path, seeds: u64, out: &Path, jobs: Option<usize>) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut kv = KeyValues::read(config)?;
    let suite = SuiteConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let data = Datasets::load(&suite.base.data)?;
    let seed_list: Vec<u64> = (0..seeds).collect();
    let configs = suite.runs(&seed_list);
    let rows = run_suite(&configs, &data, jobs.unwrap_or(suite.jobs));
    write(out, &suite_csv(&rows))?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    println!("{} runs, {failed} failed, results in {}", rows.len(), out.display());
    if failed == rows.len() {
        bail!("every run failed");
    }
    Ok(())
}
