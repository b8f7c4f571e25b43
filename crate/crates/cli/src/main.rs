use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use distill_core::checkpoint;
use distill_core::data::{self, DataFormat};
use distill_core::eval::{self, EpochLog, RunReport};
use distill_core::experiment::{self, CellState, ExperimentFile, GridOptions};
use distill_core::training::{self, TrainConfig};
use distill_core::{Checkpoint, Dataset, Error, GenSpec, Result, Split};

#[derive(Parser)]
#[command(name = "distill", version, about = "Two-step knowledge distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    PackedBinary,
    TabularCsv,
}

impl From<Format> for DataFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::PackedBinary => DataFormat::PackedBinary,
            Format::TabularCsv => DataFormat::TabularCsv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its class histogram.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the output extension (`.csv` is tabular).
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised encoder pretraining on coarsened labels.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fine classes merged into each coarse label.
        #[arg(long, default_value_t = 1)]
        merge: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear-probe a pretrained encoder into a teacher.
    TrainTeacher {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a student by finetuning or distillation.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-1 accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write encoder features as a tabular CSV dataset.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Markdown tables from run reports (files or directories).
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Emit per-regime mean and std instead of one row per run.
        #[arg(long)]
        summary: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of an experiment file.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip cells whose inputs and outputs are unchanged.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_data(path: &Path) -> Result<Dataset> {
    data::load(path, DataFormat::from_path(path))
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = TrainConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_epoch(log: &EpochLog) {
    println!("{}", log.log_line());
}

/// Writes the checkpoint to `out`, the report next to it as `.json`, and
/// the wall-clock time as `.timing.json`.
fn save_run(out: &Path, ckpt: &Checkpoint, report: &RunReport) -> Result<()> {
    ckpt.save(out)?;
    let report_path = out.with_extension("json");
    fs::write(&report_path, report.without_timing().to_json())?;
    if let Some(secs) = report.wall_clock_seconds {
        fs::write(out.with_extension("timing.json"), format!("{{\"wall_clock_seconds\":{secs}}}\n"))?;
    }
    println!("test_acc={} report={}", report.test_accuracy, report_path.display());
    Ok(())
}

fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<RunReport>> {
    let mut files = Vec::new();
    let mut stack: Vec<PathBuf> = inputs.to_vec();
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for entry in fs::read_dir(&p)? {
                stack.push(entry?.path());
            }
        } else if p.is_file() {
            files.push(p);
        } else {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
    }
    files.sort();
    let mut reports = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.ends_with(".json") || name.ends_with(".timing.json") || name.ends_with(".splits.json") {
            continue;
        }
        let report = RunReport::from_json(&fs::read_to_string(&f)?)?;
        if report.role != checkpoint::Role::Pretrain {
            reports.push(report);
        }
    }
    if reports.is_empty() {
        return Err(Error::Config("no run reports found".into()));
    }
    Ok(reports)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, format, seed } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let mut gen: GenSpec = distill_core::data::parse_gen_spec(&text)?;
            if let Some(s) = seed {
                gen.seed = s;
            }
            let ds = data::generate(&gen)?;
            let format = format.map_or_else(|| DataFormat::from_path(&out), DataFormat::from);
            data::save(&ds, &out, format)?;
            for (class, count) in ds.class_histogram(None).iter().enumerate() {
                println!("class {class}: {count}");
            }
            println!("digest={:08x}", checkpoint::file_digest(&out)?);
        }
        Command::Pretrain { data, config, out, merge, seed } => {
            let ds = read_data(&data)?;
            let cfg = read_config(&config, seed)?;
            let (ckpt, report) = training::pretrain(&ds, &cfg, merge, &mut print_epoch)?;
            save_run(&out, &ckpt, &report)?;
        }
        Command::TrainTeacher { encoder, data, config, out, seed } => {
            let ds = read_data(&data)?;
            let cfg = read_config(&config, seed)?;
            let (ckpt, report) = training::train_teacher_probe(&encoder, &ds, &cfg, &mut print_epoch)?;
            save_run(&out, &ckpt, &report)?;
        }
        Command::TrainStudent { data, config, out, seed } => {
            let ds = read_data(&data)?;
            let cfg = read_config(&config, seed)?;
            let (ckpt, report) = training::train_student_with(&ds, &cfg, None, &mut print_epoch)?;
            save_run(&out, &ckpt, &report)?;
        }
        Command::Eval { ckpt, data, split, embeddings } => {
            let ds = read_data(&data)?;
            let model = checkpoint::read(&ckpt)?.model;
            let split = Split::from(split);
            let acc = eval::accuracy(&model, &ds, split)?;
            let n = ds.split_len(split);
            println!("split={split} accuracy={acc} correct={}/{n}", (acc * n as f64).round() as usize);
            if let Some(path) = embeddings {
                eval::embeddings(&model, &ds)?.save_csv(&path)?;
                println!("embeddings={}", path.display());
            }
        }
        Command::Report { inputs, summary, out } => {
            let reports = collect_reports(&inputs)?;
            let text = if summary { eval::emit_summary(&reports) } else { eval::emit_table(&reports) };
            match out {
                Some(p) => fs::write(p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Grid { config, out, jobs, resume, seed } => {
            let mut file = ExperimentFile::read(&config)?;
            if let Some(s) = seed {
                file = file.with_seed(s);
            }
            let opts = GridOptions {
                jobs,
                resume,
                base_dir: config.parent().map(Path::to_path_buf).unwrap_or_default(),
                timing: true,
            };
            let outcome = experiment::run_grid(&file, &out, &opts)?;
            for cell in &outcome.cells {
                match &cell.state {
                    CellState::Ran => println!("ran {}", cell.id),
                    CellState::Skipped => println!("skipped {}", cell.id),
                    CellState::Failed(msg) => eprintln!("failed {}: {msg}", cell.id),
                }
            }
            print!("{}", outcome.table);
            let failed = outcome.failures().count();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
