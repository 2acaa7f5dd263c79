use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};

use dgenctr::config::{describe_keys, Config};
use dgenctr::data::{
    generate_synthetic, load_delimited, load_delimited_with, split_synthetic, write_delimited, Dataset, DelimitedSpec,
    Split, SyntheticSpec, Vocabularies,
};
use dgenctr::error::Error;
use dgenctr::evaluation::{auc, format_summary, scored_examples, write_report, write_summary, ReportRow};
use dgenctr::model::{save_checkpoint, Checkpoint};
use dgenctr::trainer::{
    evaluate_model, finetune, pretrain, run_experiment_suite, suite_configs, ExperimentCache, Splits, Suite,
    TransferMode,
};
use dgenctr::verify::{run_suite, VerifySuite};

#[derive(Parser)]
#[command(name = "dgenctr", version, about = "Diffusion pretraining and CTR fine-tuning over categorical records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: train/validation/test files and true posteriors.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffusion pretraining on the training file.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning, optionally from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// none | full | embeddings-only | scoring-network-only (overrides run.transfer)
        #[arg(long)]
        transfer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the math against exact oracles.
    Verify {
        /// kernel | marginal | score-ratio | equivalence | gradcheck | metrics | all
        #[arg(long, default_value = "all")]
        suite: String,
        /// Use a deliberately wrong adjoint in the gradient-check fixture.
        #[arg(long)]
        tamper: bool,
    },
    /// Run a multi-seed study and report mean ± std and significance.
    Experiment {
        /// transfer | ablation | sweep
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data directory; the synthetic dataset is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit status: 1 usage, 2 data, 3 numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Schedule(_) => 1,
        Error::Data(_) | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::read(p),
        None => Ok(Config::default()),
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Usage(format!("{}: {e}", path.display()))
}

/// Output directory plus the list of files written into it.
struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn create(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), Error> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io(&p, e))
    }

    /// Writes `manifest.txt` with the SHA-256 of every artifact.
    fn finish(self) -> Result<(), Error> {
        let mut text = String::new();
        for name in &self.files {
            let p = self.dir.join(name);
            let bytes = fs::read(&p).map_err(|e| io(&p, e))?;
            text.push_str(&format!("{:x}  {name}\n", Sha256::digest(&bytes)));
        }
        let p = self.dir.join("manifest.txt");
        fs::write(&p, text).map_err(|e| io(&p, e))
    }
}

fn generate_data(config: Option<&Path>, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let spec = SyntheticSpec::from_params(&cfg.synthetic)?;
    let (ds, bayes) = generate_synthetic(&spec)?;
    let split = split_synthetic(&ds, &bayes, cfg.synthetic.seed)?;
    let vocabs = Vocabularies::numbered(ds.schema());
    let mut out = Out::create(out)?;
    let mut sidecar = String::from("split,row,bayes_score\n");
    for (ds, scores, name) in [
        (&split.train, &split.bayes_train, &cfg.data.train_file),
        (&split.validation, &split.bayes_validation, &cfg.data.validation_file),
        (&split.test, &split.bayes_test, &cfg.data.test_file),
    ] {
        write_delimited(ds, &vocabs, &out.path(name))?;
        for (i, s) in scores.iter().enumerate() {
            sidecar.push_str(&format!("{},{i},{s:?}\n", ds.split().as_str()));
        }
        println!("{:<10} {} rows", ds.split().as_str(), ds.len());
    }
    out.write("bayes_scores.csv", &sidecar)?;
    out.write("config.txt", &cfg.render())?;
    let test_auc = auc(&scored_examples(&split.bayes_test, &split.test))?;
    println!("bayes test auc {test_auc:.6}");
    out.finish()
}

struct LoadedData {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

fn load_data(cfg: &Config, dir: &Path) -> Result<LoadedData, Error> {
    let spec = DelimitedSpec {
        features: cfg.data.features.clone(),
    };
    let (train, vocabs) = load_delimited(&dir.join(&cfg.data.train_file), &spec)?;
    let validation = load_delimited_with(&dir.join(&cfg.data.validation_file), &vocabs, Split::Validation)?;
    let test = load_delimited_with(&dir.join(&cfg.data.test_file), &vocabs, Split::Test)?;
    Ok(LoadedData {
        train,
        validation,
        test,
    })
}

fn print_progress(line: &str) {
    println!("{line}");
    let _ = std::io::stdout().flush();
}

fn metric_rows(config_id: &str, seed: u64, split: Split, m: &dgenctr::evaluation::MetricReport) -> Vec<ReportRow> {
    let mut rows = vec![("auc", m.auc), ("logloss", m.logloss)];
    if let Some(g) = m.gauc_pv {
        rows.push(("gauc_pv", g));
    }
    rows.into_iter()
        .map(|(metric, value)| ReportRow {
            config_id: config_id.to_string(),
            seed,
            split: split.as_str().to_string(),
            metric: metric.to_string(),
            value,
        })
        .collect()
}

fn cmd_pretrain(config: Option<&Path>, data: &Path, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let d = load_data(&cfg, data)?;
    let mut out = Out::create(out)?;
    let (model, report) = pretrain(&cfg.run, &d.train, Some(&out.dir.clone()), &mut print_progress)?;
    for p in &report.checkpoints {
        out.files.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    save_checkpoint(&model, report.steps as u64, &out.path("pretrained.ckpt"))?;
    let mut losses = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{},{l:?}\n", i + 1));
    }
    out.write("pretrain_losses.csv", &losses)?;
    out.write("config.txt", &cfg.render())?;
    out.finish()
}

fn cmd_finetune(
    config: Option<&Path>,
    data: &Path,
    init: Option<&Path>,
    transfer: Option<&str>,
    out: &Path,
) -> Result<(), Error> {
    let mut cfg = load_config(config)?;
    if let Some(t) = transfer {
        cfg.run.run.transfer =
            TransferMode::parse(t).ok_or_else(|| usage(format!("unknown transfer mode `{t}`")))?;
    }
    let mode = cfg.run.run.transfer;
    let checkpoint = match (mode, init) {
        (TransferMode::None, Some(_)) => return Err(usage("--init given but transfer mode is `none`")),
        (TransferMode::None, None) => None,
        (_, None) => {
            return Err(usage(format!(
                "transfer mode `{}` needs --init <checkpoint>",
                mode.as_str()
            )))
        }
        (_, Some(p)) => Some(Checkpoint::read(p)?),
    };
    let d = load_data(&cfg, data)?;
    let (model, report) = finetune(&cfg.run, &d.train, &d.validation, checkpoint.as_ref(), &mut print_progress)?;
    let mut out = Out::create(out)?;
    save_checkpoint(&model, 0, &out.path("finetuned.ckpt"))?;
    let mut epochs = String::from("epoch,train_loss,val_auc,val_logloss\n");
    for e in &report.epochs {
        epochs.push_str(&format!(
            "{},{},{:?},{:?}\n",
            e.epoch,
            e.train_loss.map(|l| format!("{l:?}")).unwrap_or_default(),
            e.validation.auc,
            e.validation.logloss
        ));
    }
    out.write("finetune_epochs.csv", &epochs)?;
    let mut rows = Vec::new();
    for (split, ds) in [(Split::Validation, &d.validation), (Split::Test, &d.test)] {
        let m = evaluate_model(&model, ds)?;
        println!(
            "{:<10} auc {:.6} logloss {:.6}{}",
            split.as_str(),
            m.auc,
            m.logloss,
            m.gauc_pv.map(|g| format!(" gauc_pv {g:.6}")).unwrap_or_default()
        );
        rows.extend(metric_rows("finetune", cfg.run.run.seed, split, &m));
    }
    write_report(&out.path("report.csv"), &rows)?;
    out.write("config.txt", &cfg.render())?;
    out.finish()
}

fn cmd_verify(suite: &str, tamper: bool) -> Result<bool, Error> {
    let suites: Vec<VerifySuite> = if suite == "all" {
        VerifySuite::ALL.to_vec()
    } else {
        vec![VerifySuite::parse(suite).ok_or_else(|| usage(format!("unknown verify suite `{suite}`")))?]
    };
    let mut all_passed = true;
    println!("{:<12} {:<6} {:>12} {:>8}  check", "suite", "result", "error", "tol");
    for s in suites {
        for c in run_suite(s, tamper) {
            all_passed &= c.passed;
            println!(
                "{:<12} {:<6} {:>12.3e} {:>8.0e}  {}",
                c.suite,
                if c.passed { "PASS" } else { "FAIL" },
                c.error,
                c.tol,
                c.name
            );
        }
    }
    Ok(all_passed)
}

fn cmd_experiment(
    suite: &str,
    config: Option<&Path>,
    data: Option<&Path>,
    seeds: &str,
    out: &Path,
) -> Result<(), Error> {
    let suite = Suite::parse(suite).ok_or_else(|| usage(format!("unknown experiment suite `{suite}`")))?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    let cfg = load_config(config)?;
    let d = match data {
        Some(dir) => load_data(&cfg, dir)?,
        None => {
            let spec = SyntheticSpec::from_params(&cfg.synthetic)?;
            let (ds, bayes) = generate_synthetic(&spec)?;
            let s = split_synthetic(&ds, &bayes, cfg.synthetic.seed)?;
            LoadedData {
                train: s.train,
                validation: s.validation,
                test: s.test,
            }
        }
    };
    let splits = Splits {
        train: &d.train,
        validation: &d.validation,
        test: &d.test,
    };
    let configs = suite_configs(suite, &cfg.run);
    let mut cache = ExperimentCache::new();
    let report = run_experiment_suite(&configs, &seeds, splits, &mut cache, &mut print_progress);
    let mut out = Out::create(out)?;
    write_report(&out.path("report.csv"), &report.rows)?;
    write_summary(&out.path("summary.csv"), &report.summary)?;
    let mut sig = String::from("reference,variant,split,metric,u,p_value\n");
    println!("\n{}", format_summary(&report.summary));
    for s in &report.significance {
        sig.push_str(&format!(
            "{},{},{},{},{:?},{:?}\n",
            s.reference, s.variant, s.split, s.metric, s.u, s.p_value
        ));
        println!(
            "{} vs {} ({} {}): U = {}, p = {:.4}",
            s.reference, s.variant, s.split, s.metric, s.u, s.p_value
        );
    }
    out.write("significance.csv", &sig)?;
    if !report.failures.is_empty() {
        let mut text = String::new();
        for f in &report.failures {
            text.push_str(&format!("{} seed {}: {}\n", f.config_id, f.seed, f.error));
            println!("FAILED {} seed {}: {}", f.config_id, f.seed, f.error);
        }
        out.write("failures.txt", &text)?;
    }
    out.write("config.txt", &cfg.render())?;
    out.finish()
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenerateData { config, out } => generate_data(config.as_deref(), &out)?,
        Command::Pretrain { config, data, out } => cmd_pretrain(config.as_deref(), &data, &out)?,
        Command::Finetune {
            config,
            data,
            init,
            transfer,
            out,
        } => cmd_finetune(config.as_deref(), &data, init.as_deref(), transfer.as_deref(), &out)?,
        Command::Verify { suite, tamper } => {
            if !cmd_verify(&suite, tamper)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Experiment {
            suite,
            config,
            data,
            seeds,
            out,
        } => cmd_experiment(&suite, config.as_deref(), data.as_deref(), &seeds, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn command() -> clap::Command {
    let keys = format!("Config keys (section.key, default, meaning):\n{}", describe_keys());
    let mut cmd = Cli::command();
    for name in ["generate-data", "pretrain", "finetune", "experiment"] {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys));
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
