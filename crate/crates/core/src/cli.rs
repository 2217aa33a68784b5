//! Command-line driver: `train`, `sweep`, `inject`, `check` and `export-fig2`.
//!
//! Runs are described by a TOML file with `[dataset]`, `[noise]`, `[model]`, `[train]`
//! and `[output]` tables. Unknown keys are rejected. Any key can be overridden with
//! `--set dotted.key=value`, where `value` is parsed as a TOML value (falling back to
//! a bare string). Each run writes into its own timestamped directory under the
//! output root: `--output`, else `[output].dir`, else `$PERMLL_OUTPUT_ROOT`, else `runs`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (divergence, failed check),
//! 2 on a configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, BlobSpec, Dataset, Standardizer};
use crate::losses::LossKind;
use crate::model::Arch;
use crate::noise::{self, NoiseKind, NoiseSpec, NoisyDataset};
use crate::numerics::RngState;
use crate::propcheck::{self, CheckOptions, Prop};
use crate::trainer::{self, Checkpoint, RunReport, TrainConfig, TrainData, Trainer};
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PERMLL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Csv,
    Idx,
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Fraction of the (noisy) training pool held out for validation; 0 disables it.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default)]
    pub holdout_seed: u64,
    /// Standardize features with statistics of the training pool.
    #[serde(default)]
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSection>,
}

/// Training pool from `make_blobs` with `seed`; test set with the same centers and `seed + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSection {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub std: f64,
    #[serde(default)]
    pub seed: u64,
    pub test_per_class: usize,
}

impl BlobsSection {
    pub fn train_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.classes,
            per_class: self.per_class,
            dim: self.dim,
            separation: self.separation,
            std: self.std,
            seed: self.seed,
        }
    }

    pub fn test_spec(&self) -> BlobSpec {
        BlobSpec {
            per_class: self.test_per_class,
            seed: self.seed.wrapping_add(1),
            ..self.train_spec()
        }
    }
}

/// CSV files in the `f1..fm,label` schema. A training file carrying a `clean_label`
/// column is taken as already noisy and requires `noise.kind = "none"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write the final checkpoint into the run directory.
    #[serde(default = "default_true")]
    pub checkpoint: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub model: Arch,
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfigFile {
    /// Parses TOML text, applies `overrides` and validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfigFile = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; relative dataset paths are resolved against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = &mut self.dataset.csv {
            fix(&mut c.train);
            fix(&mut c.test);
        }
        if let Some(i) = &mut self.dataset.idx {
            fix(&mut i.train_images);
            fix(&mut i.train_labels);
            fix(&mut i.test_images);
            fix(&mut i.test_labels);
        }
    }

    /// Schema checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.holdout) {
            return Err(Error::Config(format!(
                "dataset.holdout must lie in [0, 1), got {}",
                d.holdout
            )));
        }
        let missing = |name: &str| {
            Error::Config(format!(
                "dataset.kind = \"{name}\" needs a [dataset.{name}] table"
            ))
        };
        match d.kind {
            DatasetKind::Blobs => {
                let b = d.blobs.as_ref().ok_or_else(|| missing("blobs"))?;
                b.train_spec().validate()?;
                if b.test_per_class == 0 {
                    return Err(Error::Config(
                        "dataset.blobs.test_per_class must be at least 1".into(),
                    ));
                }
                self.train.validate(b.classes)?;
            }
            DatasetKind::Csv => {
                d.csv.as_ref().ok_or_else(|| missing("csv"))?;
            }
            DatasetKind::Idx => {
                d.idx.as_ref().ok_or_else(|| missing("idx"))?;
            }
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return Err(Error::Config(format!(
                "noise.rate must lie in [0, 1], got {}",
                self.noise.rate
            )));
        }
        Ok(())
    }

    /// Frozen copy written into every run directory.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Sets `dotted.key = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut node = table;
    for part in path {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dataset file not found: {}",
            path.display()
        )))
    }
}

/// Loads the clean pool and test set, applies noise, standardization and the holdout split.
pub fn prepare_data(config: &RunConfigFile) -> Result<TrainData> {
    let d = &config.dataset;
    let (mut pool, mut test) = match d.kind {
        DatasetKind::Blobs => {
            let b = d.blobs.as_ref().expect("validated");
            (
                noise::apply(&config.noise, &data::make_blobs(&b.train_spec())?)?,
                data::make_blobs(&b.test_spec())?,
            )
        }
        DatasetKind::Csv => {
            let c = d.csv.as_ref().expect("validated");
            require_file(&c.train)?;
            require_file(&c.test)?;
            let table = data::read_csv_table(&c.train, c.classes)?;
            let classes = Some(table.dataset.classes);
            let test = data::read_csv_dataset(&c.test, classes.max(c.classes))?;
            let pool = match table.clean_labels {
                Some(clean) => {
                    if config.noise.kind != NoiseKind::None {
                        return Err(Error::Config(format!(
                            "{} already carries clean_label; set noise.kind = \"none\"",
                            c.train.display()
                        )));
                    }
                    NoisyDataset::with_clean_labels(table.dataset, clean)?
                }
                None => noise::apply(&config.noise, &table.dataset)?,
            };
            (pool, test)
        }
        DatasetKind::Idx => {
            let i = d.idx.as_ref().expect("validated");
            for p in [
                &i.train_images,
                &i.train_labels,
                &i.test_images,
                &i.test_labels,
            ] {
                require_file(p)?;
            }
            let train = data::read_idx_pair(&i.train_images, &i.train_labels, true)?;
            let mut test = data::read_idx_pair(&i.test_images, &i.test_labels, true)?;
            test.classes = test.classes.max(train.classes);
            (noise::apply(&config.noise, &train)?, test)
        }
    };
    if pool.data.dim != test.dim {
        return Err(Error::Config(format!(
            "training data has {} features, test data {}",
            pool.data.dim, test.dim
        )));
    }
    if test.labels.iter().any(|&y| y >= pool.data.classes) {
        return Err(Error::Config(
            "test labels exceed the training class count".into(),
        ));
    }
    test.classes = pool.data.classes;
    if d.standardize {
        let st = Standardizer::fit(&pool.data);
        st.apply(&mut pool.data);
        st.apply(&mut test);
    }
    config.train.validate(pool.data.classes)?;
    let (train, validation) = if d.holdout > 0.0 {
        let mut rng = RngState::seed_from_u64(d.holdout_seed);
        let (t, v) = noise::holdout_split(&pool, d.holdout, &mut rng)?;
        (t, Some(v))
    } else {
        (pool, None)
    };
    Ok(TrainData {
        train,
        validation,
        test,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "permll",
    version,
    about = "Train classifiers under label noise with per-sample permutation layers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and write report.json, epochs.csv, config.resolved and ckpt.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set train.eta_alpha=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output root (a run directory is created inside it).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint written under the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Train one run per (eta_alpha, I_alpha) cell and write sweep.csv.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        eta_alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        i_alpha: Vec<f64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Apply the config's noise to its training data and write a CSV with a clean_label column.
    Inject {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run property checks and print a summary followed by JSON verdicts.
    Check {
        /// Any of 2, 3, 4, fig2.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        props: Vec<String>,
        /// Trials per check (per class count for prop 4).
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON verdicts here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Where the fig2 curves go when fig2 is selected.
        #[arg(long, default_value = "fig2.csv")]
        fig2_csv: PathBuf,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write the gradient-norm curves at c = 2 as CSV.
    ExportFig2 {
        #[arg(long)]
        out: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "squared_l2,kl_divergence"
        )]
        losses: Vec<String>,
    },
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 2 for configuration problems, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn output_root(flag: Option<PathBuf>, config: Option<&OutputSection>) -> PathBuf {
    flag.or_else(|| config.and_then(|o| o.dir.clone()))
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Creates `<root>/<timestamp>-<tag>`, adding a numeric suffix if it already exists.
pub fn create_run_dir(root: &Path, tag: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{tag}");
    for k in 0.. {
        let name = if k == 0 {
            base.clone()
        } else {
            format!("{base}-{k}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Train {
            config,
            overrides,
            output,
            resume,
            quiet,
        } => cmd_train(&config, &overrides, output, resume.as_deref(), quiet),
        Command::Sweep {
            config,
            overrides,
            eta_alpha,
            i_alpha,
            output,
        } => cmd_sweep(&config, &overrides, &eta_alpha, &i_alpha, output),
        Command::Inject {
            config,
            overrides,
            out,
        } => cmd_inject(&config, &overrides, &out),
        Command::Check {
            props,
            trials,
            seed,
            json,
            fig2_csv,
            corrupt_gradient,
        } => {
            let props = props
                .iter()
                .map(|p| p.parse())
                .collect::<Result<Vec<Prop>>>()?;
            let opts = CheckOptions {
                trials,
                seed,
                corrupt_gradient,
            };
            cmd_check(&props, &opts, json.as_deref(), &fig2_csv)
        }
        Command::ExportFig2 { out, losses } => {
            let losses = losses
                .iter()
                .map(|l| l.parse())
                .collect::<Result<Vec<LossKind>>>()?;
            let csv = propcheck::figure2_csv(
                &losses,
                &propcheck::default_alpha_samples(),
                &propcheck::default_p1_grid(),
            )?;
            write(&out, &csv)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

pub fn cmd_train(
    config_path: &Path,
    overrides: &[String],
    output: Option<PathBuf>,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<i32> {
    let config = RunConfigFile::load(config_path, overrides)?;
    let data = prepare_data(&config)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(
            config.train.clone(),
            config.model,
            &data,
            Checkpoint::load(path)?,
        )?,
        None => Trainer::new(config.train.clone(), config.model, &data)?,
    };
    let hash = config.train.hash(&config.model);
    let dir = create_run_dir(&output_root(output, Some(&config.output)), &hash[..8])?;
    write(&dir.join("config.resolved"), &config.to_toml())?;

    let mut failure = None;
    while !trainer.is_done() {
        match trainer.run_epoch() {
            Ok(r) => {
                if !quiet {
                    eprintln!(
                        "epoch {:>4}  loss {:.5}  test {:6.2}%  perm {:6.2}%  conf {:.4}",
                        r.epoch,
                        r.train_loss,
                        r.test_accuracy,
                        r.permutation_accuracy,
                        r.mean_confidence
                    );
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let mut report: RunReport = trainer.report();
    if config.output.checkpoint {
        let ckpt = dir.join("ckpt");
        trainer.checkpoint().save(&ckpt)?;
        report.checkpoint_path = Some(ckpt.display().to_string());
    }
    if let Some(e) = &failure {
        report.diverged = Some(e.to_string());
    }
    write(&dir.join("report.json"), &report.to_json())?;
    write(&dir.join("epochs.csv"), &report.epochs_csv())?;
    println!("{}", dir.display());
    match failure {
        Some(e) => {
            eprintln!("error: {e}");
            Ok(exit_code(&e))
        }
        None => {
            println!(
                "final test accuracy {:.2}%, permutation accuracy {:.2}% (initial {:.2}%)",
                report.final_test_accuracy(),
                report.final_permutation_accuracy(),
                report.initial_permutation_accuracy
            );
            Ok(0)
        }
    }
}

pub fn cmd_sweep(
    config_path: &Path,
    overrides: &[String],
    eta_alpha: &[f64],
    i_alpha: &[f64],
    output: Option<PathBuf>,
) -> Result<i32> {
    let config = RunConfigFile::load(config_path, overrides)?;
    let data = prepare_data(&config)?;
    let cells = trainer::sweep(&config.train, config.model, &data, eta_alpha, i_alpha)?;
    let hash = config.train.hash(&config.model);
    let dir = create_run_dir(
        &output_root(output, Some(&config.output)),
        &format!("sweep-{}", &hash[..8]),
    )?;
    write(&dir.join("config.resolved"), &config.to_toml())?;
    write(&dir.join("sweep.csv"), &trainer::sweep_csv(&cells))?;
    println!("{}", dir.display());
    for c in cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell eta_alpha={} I_alpha={} failed: {}",
            c.eta_alpha,
            c.i_alpha,
            c.error.as_deref().unwrap_or_default()
        );
    }
    let ok: Vec<_> = cells.iter().filter(|c| c.perm_accuracy.is_some()).collect();
    let Some(best) = ok.iter().max_by(|a, b| {
        a.perm_accuracy
            .partial_cmp(&b.perm_accuracy)
            .expect("finite accuracy")
    }) else {
        eprintln!("every sweep cell failed");
        return Ok(1);
    };
    println!(
        "best cell: eta_alpha={} I_alpha={} permutation accuracy {:.2}% test accuracy {:.2}% ({} of {} cells succeeded)",
        best.eta_alpha,
        best.i_alpha,
        best.perm_accuracy.unwrap_or_default(),
        best.test_accuracy.unwrap_or_default(),
        ok.len(),
        cells.len()
    );
    Ok(0)
}

pub fn cmd_inject(config_path: &Path, overrides: &[String], out: &Path) -> Result<i32> {
    let config = RunConfigFile::load(config_path, overrides)?;
    let clean: Dataset = match config.dataset.kind {
        DatasetKind::Blobs => data::make_blobs(
            &config
                .dataset
                .blobs
                .as_ref()
                .expect("validated")
                .train_spec(),
        )?,
        DatasetKind::Csv => {
            let c = config.dataset.csv.as_ref().expect("validated");
            require_file(&c.train)?;
            data::read_csv_dataset(&c.train, c.classes)?
        }
        DatasetKind::Idx => {
            let i = config.dataset.idx.as_ref().expect("validated");
            require_file(&i.train_images)?;
            require_file(&i.train_labels)?;
            data::read_idx_pair(&i.train_images, &i.train_labels, true)?
        }
    };
    let noisy = noise::apply(&config.noise, &clean)?;
    data::write_csv_dataset(out, &noisy.data, Some(&noisy.clean_labels))?;
    println!(
        "wrote {} ({} samples, {:.2}% flipped)",
        out.display(),
        noisy.len(),
        100.0 * (1.0 - noisy.clean_fraction())
    );
    Ok(0)
}

pub fn cmd_check(
    props: &[Prop],
    opts: &CheckOptions,
    json: Option<&Path>,
    fig2_csv: &Path,
) -> Result<i32> {
    let reports = propcheck::run_checks(props, opts);
    for r in &reports {
        println!("{}", r.summary());
    }
    if props.contains(&Prop::Fig2) {
        let csv = propcheck::figure2_csv(
            Prop::Fig2.losses(),
            &propcheck::default_alpha_samples(),
            &propcheck::default_p1_grid(),
        )?;
        write(fig2_csv, &csv)?;
        println!("wrote {}", fig2_csv.display());
    }
    let verdicts =
        serde_json::to_string_pretty(&reports).map_err(|e| Error::Serde(e.to_string()))?;
    println!("{verdicts}");
    if let Some(path) = json {
        write(path, &verdicts)?;
    }
    Ok(if reports.iter().all(|r| r.passed()) {
        0
    } else {
        1
    })
}
