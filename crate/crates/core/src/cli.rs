//! Command-line frontend. Exit codes: 0 success or match, 1 verification
//! non-match, 2 error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{make_verification_pairs, split_by_identity, DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate_method, reports_to_csv, Method};
use crate::network::Network;
use crate::pgm::{read_pgm, write_pgm};
use crate::training::{extractor_history_csv, generator_history_csv, train_extractor, train_generator, LossKind};

#[derive(Parser, Debug)]
#[command(name = "idsr", version, about = "Identity-preserving face super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic face corpus as PGM files plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long = "per-id")]
        per_id: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the feature extractor on the training identities.
    TrainExtractor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch `epoch,loss,accuracy` CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train a generator against a frozen extractor.
    TrainSr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        loss: LossArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Super-resolve one low-resolution PGM.
    Superres {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decide whether a low-res probe and a high-res gallery image match.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Defaults to the threshold stored with the model.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Write the method comparison table for the test identities.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for per-method `threshold,fpr,tpr` CSVs.
        #[arg(long = "roc-dir")]
        roc_dir: Option<PathBuf>,
        /// Directory for per-method distance matrices (CSV and PGM).
        #[arg(long = "matrix-dir")]
        matrix_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum LossArg {
    Recon,
    Ssim,
    Recog,
    Joint,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Recon => LossKind::Recon,
            LossArg::Ssim => LossKind::Ssim,
            LossArg::Recog => LossKind::Recog,
            LossArg::Joint => LossKind::Joint,
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_network(path: &Path, want_generator: bool) -> Result<Network> {
    let net = Checkpoint::load(path)?.network;
    let ok = if want_generator { net.scale().is_some() } else { net.descriptor_dim().is_some() };
    if !ok {
        let want = if want_generator { "a generator" } else { "a feature extractor" };
        return Err(Error::Invalid(format!("{} does not hold {want}", path.display())));
    }
    Ok(net)
}

fn splits(data: &Path, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let ds = Dataset::import(data, cfg.data.blur_sigma)?;
    if ds.scale != cfg.data.scale {
        return Err(Error::Invalid(format!(
            "dataset uses scale {} but the config says {}",
            ds.scale, cfg.data.scale
        )));
    }
    split_by_identity(&ds, cfg.train_fraction, cfg.data.seed)
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData {
            out,
            ids,
            per_id,
            seed,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = DataConfig {
                ids: ids.unwrap_or(cfg.data.ids),
                per_id: per_id.unwrap_or(cfg.data.per_id),
                seed: seed.unwrap_or(cfg.data.seed),
                ..cfg.data
            };
            let ds = Dataset::generate(&data)?;
            ds.export(&out)?;
            println!("wrote {} samples of {} identities to {}", ds.len(), data.ids, out.display());
            Ok(0)
        }
        Command::TrainExtractor {
            data,
            config,
            out,
            history,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (train, _) = splits(&data, &cfg)?;
            let trained = train_extractor(&train, &cfg.extractor, &cfg.train)?;
            trained.checkpoint().save(&out)?;
            if let Some(h) = history {
                write_text(&h, &extractor_history_csv(&trained.history))?;
            }
            println!(
                "extractor: {} identities, final training accuracy {:.4}",
                trained.classes.len(),
                trained.final_accuracy()
            );
            Ok(0)
        }
        Command::TrainSr {
            data,
            extractor,
            loss,
            config,
            out,
            history,
        } => {
            let cfg = load_config(config.as_deref())?;
            let f = load_network(&extractor, false)?;
            let (train, _) = splits(&data, &cfg)?;
            let tcfg = cfg.train_with_loss(loss.into());
            let trained = train_generator(&train, &f, &cfg.generator, &tcfg)?;
            let pairs = make_verification_pairs(&train, cfg.negatives_per_probe, cfg.data.seed)?;
            let fit = evaluate_method("fit", &train, &pairs, Method::Generator(&trained.network), &f, &tcfg.ssim)?;
            let gamma = fit.roc.eer_threshold();
            let mut ck = trained.checkpoint();
            ck.meta.insert("gamma".into(), gamma.to_string());
            ck.save(&out)?;
            if let Some(h) = history {
                write_text(&h, &generator_history_csv(&trained.history))?;
            }
            let last = trained.history.last().expect("epoch 0 is always recorded");
            println!("generator ({}): final loss {:.6}, threshold {gamma:.6}", tcfg.loss, last.selected);
            Ok(0)
        }
        Command::Superres { model, input, out } => {
            let g = load_network(&model, true)?;
            let lr = read_pgm(&input)?;
            write_pgm(&eval::super_resolve(&g, &lr)?, &out)?;
            Ok(0)
        }
        Command::Verify {
            model,
            extractor,
            probe,
            gallery,
            gamma,
        } => {
            let ck = Checkpoint::load(&model)?;
            let gamma = match gamma {
                Some(g) => g,
                None => ck
                    .meta
                    .get("gamma")
                    .and_then(|g| g.parse().ok())
                    .ok_or_else(|| Error::Invalid(format!("--gamma not given and {} stores no threshold", model.display())))?,
            };
            if gamma.is_nan() {
                return Err(Error::Invalid("gamma must be a number".into()));
            }
            if ck.network.scale().is_none() {
                return Err(Error::Invalid(format!("{} does not hold a generator", model.display())));
            }
            let f = load_network(&extractor, false)?;
            let (same, dist) = eval::verify_pair(&read_pgm(&probe)?, &read_pgm(&gallery)?, &ck.network, &f, gamma)?;
            println!("distance {dist:.6}");
            println!("{}", if same { "match" } else { "non-match" });
            Ok(if same { 0 } else { 1 })
        }
        Command::Evaluate {
            data,
            models,
            extractor,
            report,
            config,
            roc_dir,
            matrix_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let f = load_network(&extractor, false)?;
            let (_, test) = splits(&data, &cfg)?;
            let pairs = make_verification_pairs(&test, cfg.negatives_per_probe, cfg.data.seed)?;
            let mut nets = Vec::new();
            for m in &models {
                let name = m.file_stem().map_or_else(|| m.display().to_string(), |s| s.to_string_lossy().into_owned());
                nets.push((name, load_network(m, true)?));
            }
            let mut methods: Vec<(String, Method<'_>)> =
                nets.iter().map(|(n, g)| (n.clone(), Method::Generator(g))).collect();
            methods.push(("bicubic".into(), Method::Bicubic { scale: test.scale }));
            methods.push(("baseline-hr".into(), Method::HrBaseline));

            let mut reports = Vec::new();
            for (name, method) in &methods {
                let r = evaluate_method(name, &test, &pairs, *method, &f, &cfg.train.ssim)?;
                if let Some(dir) = &roc_dir {
                    write_text(&dir.join(format!("{name}.csv")), &r.roc.to_csv())?;
                }
                if let Some(dir) = &matrix_dir {
                    let all: Vec<_> = test.samples.iter().collect();
                    let m = eval::distance_matrix(&all, &all, *method, &f)?;
                    write_text(&dir.join(format!("{name}.csv")), &m.to_csv())?;
                    write_text(&dir.join(format!("{name}.labels.csv")), &m.labels_csv())?;
                    write_pgm(&m.heat_image()?, dir.join(format!("{name}.pgm")))?;
                }
                reports.push(r);
            }
            write_text(&report, &reports_to_csv(&reports))?;
            print!("{}", reports_to_csv(&reports));
            Ok(0)
        }
    }
}
