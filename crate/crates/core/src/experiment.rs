//! Config-driven regime grids.
//!
//! An experiment file names a dataset, the teachers to build, and the student
//! regimes to sweep. [`run_grid`] executes every cell into an output
//! directory laid out as
//!
//! ```text
//! data.dfd                         generated dataset (when `dataset.gen` is used)
//! pretrain/<preset>.{ckpt,json}    supervised encoder pretraining, one per preset
//! teachers/<name>.{ckpt,json}      linear-probed teachers
//! students/<cell>.{ckpt,json}      one per (preset, init, strategy, seed)
//! table.md, summary.md
//! ```
//!
//! Every cell writes a `.cell` stamp holding the digest of its inputs and of
//! the files it produced; `resume` skips cells whose stamp still matches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, DataFormat, Dataset, GenSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EpochLog, RunReport};
use crate::nn::Activation;
use crate::objectives::DistillConfig;
use crate::training::{self, InitKind, StrategyKind, Teacher, TrainConfig};

/// Training settings a file may override; unset fields keep the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_max: Option<f64>,
    pub lr_min: Option<f64>,
    pub weight_decay: Option<f64>,
    pub init_std: Option<f64>,
    pub activation: Option<Activation>,
    pub distill: Option<DistillConfig>,
    pub teacher_cache: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { cfg.$f = v; })*};
        }
        set!(epochs, batch_size, lr_max, lr_min, weight_decay, init_std, activation, distill, teacher_cache);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// Generate the dataset from a spec.
    #[serde(default)]
    pub gen: Option<GenSpec>,
    /// Or read it from disk, relative to the experiment file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<DataFormat>,
}

/// Supervised encoder pretraining on coarsened labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    /// Number of fine classes merged into each coarse label.
    #[serde(default = "one")]
    pub merge: usize,
    /// Separate pretraining corpus; defaults to the task dataset.
    #[serde(default)]
    pub corpus: Option<GenSpec>,
    #[serde(default)]
    pub train: TrainOverrides,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherEntry {
    pub name: String,
    pub preset: String,
    /// Existing encoder checkpoint. Without one, the encoder is pretrained
    /// per `pretrain`, falling back to the file's top-level block.
    #[serde(default)]
    pub encoder: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: Option<PretrainSpec>,
    /// Settings for the probe itself.
    #[serde(default)]
    pub train: TrainOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentEntry {
    pub preset: String,
    #[serde(default = "all_inits")]
    pub inits: Vec<InitKind>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<StrategyKind>,
    /// Teacher name for distillation cells.
    #[serde(default)]
    pub teacher: Option<String>,
    #[serde(default)]
    pub train: TrainOverrides,
}

fn all_inits() -> Vec<InitKind> {
    vec![InitKind::Scratch, InitKind::Pretrained]
}

fn all_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::Finetune, StrategyKind::Distill]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    /// Seed for pretraining and teachers, and for students without `seeds`.
    #[serde(default)]
    pub seed: u64,
    /// Student seeds; every regime runs once per seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    pub dataset: DatasetSource,
    /// Pretraining used for `init = "pretrained"` students and for teachers
    /// without an encoder of their own.
    #[serde(default)]
    pub pretrain: Option<PretrainSpec>,
    #[serde(default)]
    pub teachers: Vec<TeacherEntry>,
    #[serde(default)]
    pub students: Vec<StudentEntry>,
}

impl ExperimentFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Replaces the file seed and the student seed list.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.seeds = None;
        self
    }

    pub fn student_seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.gen.is_some() == d.path.is_some() {
            return Err(Error::Config("dataset needs exactly one of `gen` or `path`".into()));
        }
        if let Some(g) = &d.gen {
            g.validate()?;
        }
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }
        let mut names = Vec::new();
        for t in &self.teachers {
            if names.contains(&t.name.as_str()) {
                return Err(Error::Config(format!("duplicate teacher `{}`", t.name)));
            }
            names.push(&t.name);
            if t.encoder.is_none() && t.pretrain.is_none() && self.pretrain.is_none() {
                return Err(Error::Config(format!(
                    "teacher `{}` has no encoder and no pretraining block applies",
                    t.name
                )));
            }
        }
        for s in &self.students {
            if s.inits.contains(&InitKind::Pretrained) && self.pretrain.is_none() {
                return Err(Error::Config(format!(
                    "student `{}` uses pretrained init but no `pretrain` block is given",
                    s.preset
                )));
            }
            if s.strategies.contains(&StrategyKind::Distill) {
                match &s.teacher {
                    None => {
                        return Err(Error::Config(format!(
                            "student `{}` distills but names no teacher",
                            s.preset
                        )))
                    }
                    Some(n) if !names.contains(&n.as_str()) => {
                        return Err(Error::Config(format!("student `{}` names unknown teacher `{n}`", s.preset)))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub jobs: usize,
    pub resume: bool,
    /// Directory that relative paths in the file are resolved against.
    pub base_dir: PathBuf,
    /// Write wall-clock sidecars (`.timing.json`) next to each report.
    pub timing: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            jobs: 1,
            resume: false,
            base_dir: PathBuf::new(),
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellState {
    Ran,
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    /// Path of the cell's report relative to the output directory.
    pub id: String,
    pub state: CellState,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub cells: Vec<CellOutcome>,
    /// Teacher and student reports of the cells that succeeded.
    pub reports: Vec<RunReport>,
    pub table: String,
    pub summary: String,
}

impl GridOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &CellOutcome> {
        self.cells.iter().filter(|c| matches!(c.state, CellState::Failed(_)))
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Stamp {
    inputs: u32,
    checkpoint: u32,
    report: u32,
}

/// One unit of work with its output stem relative to the output directory.
struct Cell {
    stem: String,
    inputs: u32,
}

impl Cell {
    fn new(stem: String, inputs: &impl Serialize, deps: &[&str], out: &Path) -> Result<Cell> {
        let mut text = serde_json::to_string(inputs).expect("cell inputs serialize");
        for dep in deps {
            text.push_str(&format!("|{dep}={:08x}", checkpoint::file_digest(&out.join(dep))?));
        }
        Ok(Cell {
            stem,
            inputs: crc32fast::hash(text.as_bytes()),
        })
    }

    fn ckpt(&self) -> String {
        format!("{}.ckpt", self.stem)
    }

    fn is_done(&self, out: &Path) -> bool {
        let stamp = fs::read(out.join(format!("{}.cell", self.stem)))
            .ok()
            .and_then(|b| serde_json::from_slice::<Stamp>(&b).ok());
        let Some(stamp) = stamp else {
            return false;
        };
        let digest = |ext: &str| checkpoint::file_digest(&out.join(format!("{}.{ext}", self.stem))).ok();
        stamp.inputs == self.inputs
            && digest("ckpt") == Some(stamp.checkpoint)
            && digest("json") == Some(stamp.report)
    }

    fn run(
        &self,
        out: &Path,
        opts: &GridOptions,
        job: impl FnOnce(&mut dyn FnMut(&EpochLog)) -> Result<(checkpoint::Checkpoint, RunReport)>,
    ) -> Result<CellState> {
        if opts.resume && self.is_done(out) {
            return Ok(CellState::Skipped);
        }
        let ckpt_path = out.join(self.ckpt());
        if let Some(parent) = ckpt_path.parent() {
            fs::create_dir_all(parent)?;
        }
        let log_path = out.join(format!("{}.log", self.stem));
        let mut lines = String::new();
        let (ckpt, report) = job(&mut |log| {
            lines.push_str(&log.log_line());
            lines.push('\n');
        })?;
        fs::write(&log_path, lines)?;
        ckpt.save(&ckpt_path)?;
        let json = report.without_timing().to_json();
        fs::write(out.join(format!("{}.json", self.stem)), &json)?;
        if opts.timing {
            if let Some(secs) = report.wall_clock_seconds {
                fs::write(
                    out.join(format!("{}.timing.json", self.stem)),
                    format!("{{\"wall_clock_seconds\":{secs}}}\n"),
                )?;
            }
        }
        let stamp = Stamp {
            inputs: self.inputs,
            checkpoint: checkpoint::file_digest(&ckpt_path)?,
            report: crc32fast::hash(json.as_bytes()),
        };
        fs::write(
            out.join(format!("{}.cell", self.stem)),
            serde_json::to_string(&stamp).expect("stamp serializes"),
        )?;
        Ok(CellState::Ran)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads or generates the task dataset, writing generated data to `out`.
pub fn load_dataset(file: &ExperimentFile, opts: &GridOptions, out: &Path) -> Result<Dataset> {
    let d = &file.dataset;
    match (&d.gen, &d.path) {
        (Some(spec), _) => {
            let ds = data::generate(spec)?;
            let path = out.join("data.dfd");
            let fresh = data::Dataset::load_packed(&path).map(|old| old == ds).unwrap_or(false);
            if !fresh {
                ds.save_packed(&path)?;
            }
            Ok(ds)
        }
        (None, Some(p)) => {
            let p = resolve(&opts.base_dir, p);
            let fmt = d.format.unwrap_or_else(|| DataFormat::from_path(&p));
            data::load(&p, fmt)
        }
        (None, None) => Err(Error::Config("dataset needs `gen` or `path`".into())),
    }
}

fn pretrain_cfg(preset: &str, seed: u64, spec: &PretrainSpec) -> TrainConfig {
    let mut cfg = TrainConfig::new(preset);
    cfg.seed = seed;
    spec.train.apply(&mut cfg);
    cfg
}

fn pretrain_corpus(spec: &PretrainSpec, task: &Dataset) -> Result<Dataset> {
    match &spec.corpus {
        Some(g) => data::generate(g),
        None => Ok(task.clone()),
    }
}

fn fail(cells: &Mutex<Vec<CellOutcome>>, id: String, e: &Error) {
    cells.lock().expect("not poisoned").push(CellOutcome {
        id,
        state: CellState::Failed(e.to_string()),
    });
}

fn record(cells: &Mutex<Vec<CellOutcome>>, id: String, r: Result<CellState>) -> bool {
    let ok = r.is_ok();
    let state = r.unwrap_or_else(|e| CellState::Failed(e.to_string()));
    cells.lock().expect("not poisoned").push(CellOutcome { id, state });
    ok
}

/// Runs every cell of `file` into `out`. Cell failures are recorded in the
/// outcome rather than aborting the grid; only setup errors return `Err`.
pub fn run_grid(file: &ExperimentFile, out: &Path, opts: &GridOptions) -> Result<GridOutcome> {
    file.validate()?;
    fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_stages(file, out, opts))
}

fn run_stages(file: &ExperimentFile, out: &Path, opts: &GridOptions) -> Result<GridOutcome> {
    let dataset = load_dataset(file, opts, out)?;
    let cells = Mutex::new(Vec::new());

    // Stage 1: pretraining, one job per distinct (preset, block).
    let mut pretrain_jobs: BTreeMap<String, (String, PretrainSpec)> = BTreeMap::new();
    if let Some(block) = &file.pretrain {
        for s in file.students.iter().filter(|s| s.inits.contains(&InitKind::Pretrained)) {
            pretrain_jobs.insert(format!("pretrain/{}", s.preset), (s.preset.clone(), block.clone()));
        }
    }
    let mut teacher_encoders: BTreeMap<String, PathBuf> = BTreeMap::new();
    for t in &file.teachers {
        match (&t.encoder, &t.pretrain) {
            (Some(p), _) => {
                teacher_encoders.insert(t.name.clone(), resolve(&opts.base_dir, p));
            }
            (None, Some(own)) => {
                let stem = format!("pretrain/teacher-{}", t.name);
                teacher_encoders.insert(t.name.clone(), out.join(format!("{stem}.ckpt")));
                pretrain_jobs.insert(stem, (t.preset.clone(), own.clone()));
            }
            (None, None) => {
                let block = file.pretrain.clone().expect("validated");
                let stem = format!("pretrain/{}", t.preset);
                teacher_encoders.insert(t.name.clone(), out.join(format!("{stem}.ckpt")));
                pretrain_jobs.insert(stem, (t.preset.clone(), block));
            }
        }
    }
    let jobs: Vec<_> = pretrain_jobs.into_iter().collect();
    jobs.par_iter().for_each(|(stem, (preset, spec))| {
        let cfg = pretrain_cfg(preset, file.seed, spec);
        let result = pretrain_corpus(spec, &dataset).and_then(|corpus| {
            let cell = Cell::new(stem.clone(), &(&cfg, spec.merge, corpus.digest()), &[], out)?;
            cell.run(out, opts, |obs| training::pretrain(&corpus, &cfg, spec.merge, obs))
        });
        record(&cells, format!("{stem}.json"), result);
    });

    // Stage 2: teacher probes.
    let probes: Vec<Option<PathBuf>> = file
        .teachers
        .par_iter()
        .map(|t| {
            let stem = format!("teachers/{}", t.name);
            let id = format!("{stem}.json");
            let encoder = &teacher_encoders[&t.name];
            if !encoder.exists() {
                fail(&cells, id, &Error::Config(format!("encoder {} is missing", encoder.display())));
                return None;
            }
            let mut cfg = TrainConfig::new(&t.preset);
            cfg.seed = file.seed;
            t.train.apply(&mut cfg);
            let result = (|| {
                let inputs = (&cfg, dataset.digest(), checkpoint::file_digest(encoder)?);
                let cell = Cell::new(stem.clone(), &inputs, &[], out)?;
                cell.run(out, opts, |obs| {
                    match encoder.strip_prefix(out) {
                        Ok(rel) => training::train_teacher_probe_in(out, rel, &dataset, &cfg, obs),
                        Err(_) => training::train_teacher_probe(encoder, &dataset, &cfg, obs),
                    }
                })
            })();
            record(&cells, id, result).then(|| PathBuf::from(format!("{stem}.ckpt")))
        })
        .collect();
    let teachers: BTreeMap<String, Teacher> = file
        .teachers
        .iter()
        .zip(&probes)
        .filter_map(|(t, p)| {
            let rel = p.as_ref()?;
            let mut loaded = Teacher::load(&out.join(rel)).ok()?;
            loaded.provenance.name = t.name.clone();
            loaded.provenance.path = rel.display().to_string();
            Some((t.name.clone(), loaded))
        })
        .collect();

    // Stage 3: students.
    let mut student_cells = Vec::new();
    for s in &file.students {
        for &seed in &file.student_seeds() {
            for &init in &s.inits {
                for &strategy in &s.strategies {
                    student_cells.push((s, seed, init, strategy));
                }
            }
        }
    }
    student_cells.par_iter().for_each(|&(s, seed, init, strategy)| {
        let init_name = match init {
            InitKind::Scratch => "scratch",
            InitKind::Pretrained => "pretrained",
        };
        let strategy_name = match strategy {
            StrategyKind::Finetune => "finetune".to_string(),
            StrategyKind::Distill => format!("distill-{}", s.teacher.as_deref().unwrap_or("")),
        };
        let stem = format!("students/{}-{init_name}-{strategy_name}-s{seed}", s.preset);
        let id = format!("{stem}.json");
        let mut cfg = TrainConfig::new(&s.preset);
        cfg.seed = seed;
        cfg.init = init;
        cfg.strategy = strategy;
        s.train.apply(&mut cfg);
        let mut deps = Vec::new();
        let pretrained = format!("pretrain/{}.ckpt", s.preset);
        if init == InitKind::Pretrained {
            cfg.pretrained = Some(PathBuf::from(&pretrained));
            deps.push(pretrained.as_str());
        }
        let mut teacher = None;
        let teacher_rel;
        if strategy == StrategyKind::Distill {
            let name = s.teacher.as_deref().expect("validated");
            let Some(t) = teachers.get(name) else {
                fail(&cells, id, &Error::Config(format!("teacher `{name}` is unavailable")));
                return;
            };
            teacher_rel = t.provenance.path.clone();
            cfg.teacher = Some(PathBuf::from(&teacher_rel));
            deps.push(teacher_rel.as_str());
            teacher = Some(t);
        }
        if deps.iter().any(|d| !out.join(d).exists()) {
            fail(&cells, id, &Error::Config(format!("missing inputs for {stem}")));
            return;
        }
        let result = Cell::new(stem.clone(), &(&cfg, dataset.digest()), &deps, out).and_then(|cell| {
            cell.run(out, opts, |obs| training::train_student_in(out, &dataset, &cfg, teacher, obs))
        });
        record(&cells, id, result);
    });

    let mut cells = cells.into_inner().expect("not poisoned");
    cells.sort_by(|a, b| a.id.cmp(&b.id));
    let mut reports = Vec::new();
    for c in cells.iter().filter(|c| !matches!(c.state, CellState::Failed(_))) {
        if c.id.starts_with("pretrain/") {
            continue;
        }
        reports.push(RunReport::from_json(&fs::read_to_string(out.join(&c.id))?)?);
    }
    let table = if reports.is_empty() { String::new() } else { eval::emit_table(&reports) };
    let summary = if reports.is_empty() { String::new() } else { eval::emit_summary(&reports) };
    fs::write(out.join("table.md"), &table)?;
    fs::write(out.join("summary.md"), &summary)?;
    Ok(GridOutcome {
        cells,
        reports,
        table,
        summary,
    })
}
