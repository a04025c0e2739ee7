use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use hff_core::gradsuite::run_suite;
use hff_core::srm::SrmKernelBank;
use hff_data::io::{images_to_tensor, load_rgb, plane_to_gray, save_gray, write_bytes};
use hff_data::{build_dataset, Dataset, DatasetConfig, Method};
use hff_train::eval::{cross_eval, evaluate, Checkpoint, RunMeta, Splits};
use hff_train::gradcam::gradcam;
use hff_train::samples::load_split;
use hff_train::{train_on, Result, TrainConfig, TrainError, TrainMethod};

#[derive(Parser)]
#[command(name = "hff", version, about = "Two-stream high-frequency forgery detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forgery dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training fakes per method; val gets a quarter, test half.
        #[arg(long)]
        per_method: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        group_size: usize,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        train_method: String,
        #[arg(long)]
        out: PathBuf,
        /// Read images on all cores; results are unchanged.
        #[arg(long)]
        parallel_load: bool,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train on one method per seed and test on every method.
    CrossEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_method: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Write the nine SRM residual channels of an image as PNGs.
    Srm {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Write a Grad-CAM heatmap for one image.
    Gradcam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "exit.rgb")]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 64-bit gradient-check suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

const KERNEL_NAMES: [&str; 3] = ["square3", "square5", "second_order"];
const COLOUR_NAMES: [&str; 3] = ["r", "g", "b"];

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn parse_fake_method(s: &str) -> Result<Method> {
    match s.parse::<TrainMethod>()? {
        TrainMethod::Only(m) => Ok(m),
        TrainMethod::All => Err(TrainError::Invalid("cross evaluation trains on a single method".into())),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|e| TrainError::Invalid(format!("bad seed `{t}`: {e}"))))
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            seed,
            per_method,
            size,
            group_size,
        } => {
            let mut config = DatasetConfig::per_method(seed, size, per_method);
            config.group_size = group_size;
            let manifest = build_dataset(&config, &out)?;
            for (split, records) in &manifest.splits {
                eprintln!("{split}: {} samples", records.len());
            }
            println!("{}", manifest.digest());
        }
        Command::Train {
            data,
            config,
            train_method,
            out,
            parallel_load,
        } => {
            let config = load_config(config.as_deref())?;
            let method: TrainMethod = train_method.parse()?;
            let dataset = Dataset::open(&data)?;
            let train = load_split(&dataset, "train", parallel_load)?;
            let val = match dataset.manifest.splits.contains_key("val") {
                true => load_split(&dataset, "val", parallel_load)?,
                false => Vec::new(),
            };
            let outcome = train_on(&config, &train, &val, method, |log| {
                let val = log.val_auc.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
                eprintln!("epoch {:3}  loss {:.6}  val_auc {val}", log.epoch, log.mean_loss);
            })?;
            let checkpoint = Checkpoint {
                params: outcome.params,
                meta: RunMeta {
                    config,
                    train_method: method,
                    manifest_digest: dataset.manifest.digest(),
                },
            };
            checkpoint.save(&out)?;
            let log_path = PathBuf::from(format!("{}.log.json", out.display()));
            let log = serde_json::to_string_pretty(&outcome.log).expect("log serialization cannot fail");
            write_bytes(&log_path, log.as_bytes())?;
            eprintln!("best epoch {}; wrote {} and {}", outcome.best_epoch, out.display(), log_path.display());
        }
        Command::Eval {
            ckpt,
            data,
            split,
            report,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let dataset = Dataset::open(&data)?;
            let r = evaluate(&checkpoint, &dataset, &split)?;
            r.save(&report)?;
            println!("{}", r.to_json());
        }
        Command::CrossEval {
            data,
            config,
            train_method,
            report,
            seeds,
        } => {
            let config = load_config(config.as_deref())?;
            let method = parse_fake_method(&train_method)?;
            let seeds = parse_seeds(&seeds)?;
            let dataset = Dataset::open(&data)?;
            let splits = Splits::load(&dataset, false)?;
            let r = cross_eval(&config, &splits, method, &seeds, |seed, log| {
                eprintln!("seed {seed} epoch {:3}  loss {:.6}", log.epoch, log.mean_loss);
            })?;
            r.save(&report)?;
            println!("{}", r.to_json());
        }
        Command::Srm { image, out_prefix } => {
            let img = load_rgb(&image)?;
            let x = images_to_tensor(&[&img])?.cast::<f64>();
            let residual = SrmKernelBank::default().residual_image(&x)?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            for (ch, plane) in residual.data().chunks(w * h).enumerate() {
                let path = PathBuf::from(format!(
                    "{out_prefix}_{}_{}.png",
                    KERNEL_NAMES[ch / 3],
                    COLOUR_NAMES[ch % 3]
                ));
                save_gray(&path, &plane_to_gray(plane, w, h))?;
                println!("{}", path.display());
            }
        }
        Command::Gradcam {
            ckpt,
            image,
            layer,
            out,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let model = checkpoint.model()?;
            let img = load_rgb(&image)?;
            let map = gradcam(&model, &checkpoint.params, &images_to_tensor(&[&img])?, &layer)?;
            save_gray(&out, &map.to_image())?;
        }
        Command::Gradcheck { seeds } => {
            let entries = run_suite(seeds)?;
            let mut worst: Vec<(String, f64, f64)> = Vec::new();
            for e in &entries {
                match worst.iter_mut().find(|w| w.0 == e.name) {
                    Some(w) => w.1 = w.1.max(e.max_rel_error),
                    None => worst.push((e.name.clone(), e.max_rel_error, e.tolerance)),
                }
            }
            let mut failed = 0;
            for (name, err, tol) in &worst {
                let ok = err <= tol;
                failed += usize::from(!ok);
                println!("{} {name:<20} max rel err {err:.3e} (tol {tol:.0e})", if ok { "ok  " } else { "FAIL" });
            }
            if failed > 0 {
                return Err(TrainError::Invalid(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
