use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use eaconv::basis::{build_basis_bank, filter_to_pgm, BasisConfig};
use eaconv::data::{
    generate_synthetic, load_checkpoint, load_cifar10_binary, save_checkpoint, Dataset,
    SyntheticSpec,
};
use eaconv::eaconv::{build_model, transfer_weights, ModelConfig};
use eaconv::gradcheck::{run_suite, GradcheckConfig};
use eaconv::perturb::{default_schedules, perturb_dataset, PerturbSpec, Schedule};
use eaconv::train::{compare_protocol, evaluate, robustness_sweep, train, CompareConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "eaconv", version, about = "Elastically-augmented convolutions: basis tools, training and robustness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a basis configuration and report its conditioning.
    GenBasis {
        #[arg(long, default_value_t = 3)]
        kernel_size: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Defaults to a complete basis (kernel_size²).
        #[arg(long)]
        num_basis: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every basis filter of every path as a PGM image.
    RenderBasis {
        /// Basis configuration JSON; the standard 3×3 basis when omitted.
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Nearest-neighbour magnification.
        #[arg(long, default_value_t = 16)]
        scale: usize,
    },
    /// Generate the synthetic shapes dataset (train and test files).
    GenData {
        /// Optional synthetic spec JSON (image_size, num_classes, channels, noise, seed).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model described by a JSON job file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize an EAConv model from a standard checkpoint.
    Transfer {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Layer indices to augment (default: first convolution).
        #[arg(long, value_delimiter = ',')]
        augment: Option<Vec<usize>>,
    },
    /// Apply one perturbation spec to a dataset.
    Perturb {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Accuracy of several checkpoints over perturbation severity schedules.
    Sweep {
        /// `name=path` pairs.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// JSON list of schedules; the defaults for the image size otherwise.
        #[arg(long)]
        schedules: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; a JSON copy is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train standard, data-augmented and EAConv models and sweep all three.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training set; the default synthetic set when omitted.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Directory for the three checkpoints and histories.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
}

/// Job file of the `train` command.
#[derive(Debug, Deserialize, Serialize)]
struct TrainJob {
    data: PathBuf,
    #[serde(default)]
    eval: Option<PathBuf>,
    /// Architecture; the four-conv CNN sized from the data when omitted.
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    widths: Option<[usize; 4]>,
    /// Augment the first convolution of the default architecture.
    #[serde(default)]
    augment_first_conv: bool,
    #[serde(default)]
    basis: Option<BasisConfig>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[serde(default)]
    init: Option<PathBuf>,
    #[serde(default)]
    model_seed: u64,
    #[serde(default)]
    train: TrainConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Loads `.bin` files as CIFAR-10 batches, anything else as the native format.
fn load_data(path: &Path) -> Result<Dataset> {
    let d = if path.extension().is_some_and(|e| e == "bin") {
        load_cifar10_binary(path)?
    } else {
        Dataset::load(path)?
    };
    Ok(d)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn default_synthetic(train_per_class: usize, test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = generate_synthetic(&SyntheticSpec::new(train_per_class, seed))?;
    let test = generate_synthetic(&SyntheticSpec::new(test_per_class, seed.wrapping_add(1)))?;
    Ok((train, test))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenBasis {
            kernel_size,
            sigma,
            alpha,
            num_basis,
            out,
        } => {
            let mut config = BasisConfig::standard(kernel_size, sigma, alpha);
            if let Some(b) = num_basis {
                config.num_basis = b;
            }
            let bank = build_basis_bank(&config)?;
            let condition = bank.projector().map(|p| p.condition()).ok();
            write(&out, serde_json::to_string_pretty(&config)?)?;
            print_json(&serde_json::json!({
                "paths": bank.paths(),
                "num_basis": bank.num_basis(),
                "complete": bank.is_complete(),
                "condition": condition,
            }))?;
        }
        Command::RenderBasis { basis, out, scale } => {
            let config = match basis {
                Some(p) => read_json(&p)?,
                None => BasisConfig::standard(3, 1.0, 0.5),
            };
            let bank = build_basis_bank(&config)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let k = bank.kernel_size();
            let scale = scale.max(1);
            for p in 0..bank.paths() {
                for b in 0..bank.num_basis() {
                    let f = bank.filter(p, b);
                    let side = k * scale;
                    let big: Vec<f64> = (0..side * side)
                        .map(|i| f[(i / side / scale) * k + (i % side) / scale])
                        .collect();
                    write(&out.join(format!("path{p}_basis{b:02}.pgm")), filter_to_pgm(&big, side))?;
                }
            }
            println!("wrote {} filters to {}", bank.paths() * bank.num_basis(), out.display());
        }
        Command::GenData {
            spec,
            train_per_class,
            test_per_class,
            seed,
            out,
        } => {
            let base: SyntheticSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::new(train_per_class, seed),
            };
            let train = generate_synthetic(&SyntheticSpec {
                samples_per_class: train_per_class,
                seed,
                ..base.clone()
            })?;
            let test = generate_synthetic(&SyntheticSpec {
                samples_per_class: test_per_class,
                seed: seed.wrapping_add(1),
                ..base
            })?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            train.save(&out.join("train.eads"))?;
            test.save(&out.join("test.eads"))?;
            println!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
        }
        Command::Train { config, out } => {
            let job: TrainJob = read_json(&config)?;
            let data = load_data(&job.data)?;
            let eval = job.eval.as_deref().map(load_data).transpose()?;
            let mut model = match &job.init {
                Some(p) => load_checkpoint(p)?,
                None => {
                    let mut cfg = job.model.clone().unwrap_or_else(|| {
                        ModelConfig::four_conv(
                            data.image_shape(),
                            job.widths.unwrap_or([16, 32, 32, 64]),
                            data.num_classes(),
                        )
                    });
                    if job.augment_first_conv {
                        cfg = cfg.augment_first_conv()?;
                    }
                    let bank = if cfg.is_augmented() {
                        let b = job.basis.clone().unwrap_or_else(|| BasisConfig::standard(3, 1.0, 0.5));
                        Some(build_basis_bank(&b)?.into_shared())
                    } else {
                        None
                    };
                    build_model(&cfg, bank, job.model_seed)?
                }
            };
            let history = train(&mut model, &data, &job.train, eval.as_ref())?;
            save_checkpoint(&model, &out)?;
            write(&sibling(&out, ".history.json"), serde_json::to_string_pretty(&history)?)?;
            if let Some(last) = history.epochs.last() {
                print_json(last)?;
            }
        }
        Command::Transfer {
            from,
            to,
            basis,
            augment,
        } => {
            let standard = load_checkpoint(&from)?;
            let config = match augment {
                Some(pos) => standard.config().augment(&pos)?,
                None => standard.config().augment_first_conv()?,
            };
            let basis = match basis {
                Some(p) => read_json(&p)?,
                None => BasisConfig::standard(3, 1.0, 0.5),
            };
            let bank = build_basis_bank(&basis)?.into_shared();
            let mut ea = build_model(&config, Some(bank), 0)?;
            let report = transfer_weights(&standard, &mut ea)?;
            save_checkpoint(&ea, &to)?;
            print_json(&serde_json::json!({
                "projected_layers": report.projected,
                "condition": report.condition,
            }))?;
        }
        Command::Perturb { spec, data, out } => {
            let spec: PerturbSpec = read_json(&spec)?;
            let d = load_data(&data)?;
            let p = perturb_dataset(&d, &spec)?;
            p.save(&out)?;
            println!("perturbed {} images into {}", p.len(), out.display());
        }
        Command::Evaluate { model, data } => {
            let m = load_checkpoint(&model)?;
            let d = load_data(&data)?;
            print_json(&serde_json::json!({ "accuracy": evaluate(&m, &d)?, "count": d.len() }))?;
        }
        Command::Sweep {
            models,
            data,
            schedules,
            seed,
            report,
        } => {
            let d = load_data(&data)?;
            let mut loaded = Vec::new();
            for spec in &models {
                let Some((name, path)) = spec.split_once('=') else {
                    bail!("--model expects name=path, got {spec:?}");
                };
                loaded.push((name.to_string(), load_checkpoint(Path::new(path))?));
            }
            let schedules: Vec<Schedule> = match schedules {
                Some(p) => read_json(&p)?,
                None => default_schedules(d.image_shape()[2]),
            };
            let refs: Vec<(&str, &_)> = loaded.iter().map(|(n, m)| (n.as_str(), m)).collect();
            let r = robustness_sweep(&refs, &d, &schedules, seed)?;
            write(&report, r.to_csv())?;
            write(&report.with_extension("json"), r.to_json()?)?;
            println!("wrote {} rows to {}", r.rows.len(), report.display());
        }
        Command::Compare {
            config,
            train: train_path,
            test: test_path,
            report,
            out_dir,
        } => {
            let cfg: CompareConfig = match config {
                Some(p) => read_json(&p)?,
                None => CompareConfig::default(),
            };
            let (train_set, test_set) = match (train_path, test_path) {
                (Some(a), Some(b)) => (load_data(&a)?, load_data(&b)?),
                (None, None) => default_synthetic(500, 100, 0)?,
                _ => bail!("--train and --test must be given together"),
            };
            let outcome = compare_protocol(&train_set, &test_set, &cfg)?;
            write(&report, outcome.report.to_csv())?;
            write(&report.with_extension("json"), outcome.report.to_json()?)?;
            write(&sibling(&report, ".summary.csv"), outcome.summary_csv())?;
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for (name, model) in &outcome.models {
                    save_checkpoint(model, &dir.join(format!("{name}.eacp")))?;
                }
                for (name, h) in &outcome.histories {
                    write(
                        &dir.join(format!("{name}.history.json")),
                        serde_json::to_string_pretty(h)?,
                    )?;
                }
            }
            print!("{}", outcome.summary_csv());
        }
        Command::Gradcheck {
            instances,
            seed,
            only,
        } => {
            let cfg = GradcheckConfig {
                instances,
                seed,
                ..GradcheckConfig::default()
            };
            let results = run_suite(&cfg, only.as_deref())?;
            print_json(&results)?;
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<eaconv::Error>())
                .map_or("error", eaconv::Error::kind);
            let doc = serde_json::json!({
                "error": {
                    "kind": kind,
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{doc}");
            ExitCode::FAILURE
        }
    }
}
