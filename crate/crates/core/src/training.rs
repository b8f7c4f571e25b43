//! The two-step pipeline: linear probing of a pretrained teacher encoder,
//! then student training by plain finetuning or by distillation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{self, Checkpoint, Metadata, Metrics, Role};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, EpochLog, RunReport, TeacherProvenance};
use crate::nn::{self, Activation, Model, ModelSpec};
use crate::objectives::{self, DistillConfig};
use crate::optim::{AdamW, CosineSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    #[default]
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    Finetune,
    Distill,
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    64
}
fn d_lr_max() -> f64 {
    1e-4
}
fn d_lr_min() -> f64 {
    1e-6
}
fn d_wd() -> f64 {
    1e-4
}
fn d_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    #[serde(default)]
    pub init: InitKind,
    /// Checkpoint whose encoder seeds `init = "pretrained"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub strategy: StrategyKind,
    /// Teacher checkpoint for `strategy = "distill"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr_max")]
    pub lr_max: f64,
    #[serde(default = "d_lr_min")]
    pub lr_min: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_std")]
    pub init_std: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Precompute all teacher logits once instead of per batch.
    #[serde(default)]
    pub teacher_cache: bool,
}

impl TrainConfig {
    pub fn new(preset: &str) -> Self {
        TrainConfig {
            preset: preset.to_string(),
            init: InitKind::Scratch,
            pretrained: None,
            strategy: StrategyKind::Finetune,
            teacher: None,
            distill: DistillConfig::default(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr_max: d_lr_max(),
            lr_min: d_lr_min(),
            weight_decay: d_wd(),
            seed: 0,
            init_std: d_std(),
            activation: Activation::Relu,
            teacher_cache: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.init == InitKind::Pretrained && self.pretrained.is_none() {
            return Err(Error::Config("init = \"pretrained\" needs a `pretrained` checkpoint".into()));
        }
        if self.strategy == StrategyKind::Distill {
            if self.teacher.is_none() {
                return Err(Error::Config("strategy = \"distill\" needs a `teacher` checkpoint".into()));
            }
            self.distill.validate()?;
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        CosineSchedule::new(self.lr_max, self.lr_min, 1)?;
        Ok(())
    }

    pub fn model_spec(&self, dataset: &Dataset) -> Result<ModelSpec> {
        nn::preset(&self.preset, dataset.sample_shape(), dataset.num_classes(), self.activation)
    }

    /// Effective blend; finetuning is the `alpha = 0` case.
    fn blend(&self) -> DistillConfig {
        match self.strategy {
            StrategyKind::Finetune => DistillConfig {
                alpha: 0.0,
                ..self.distill
            },
            StrategyKind::Distill => self.distill,
        }
    }

    fn shuffle_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

/// A fixed teacher, read once for a student run.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: Model,
    pub provenance: TeacherProvenance,
}

impl Teacher {
    pub fn load(path: &Path) -> Result<Teacher> {
        let ckpt = checkpoint::read(path)?;
        Ok(Teacher {
            provenance: TeacherProvenance {
                name: ckpt.spec().name.clone(),
                path: path.display().to_string(),
                digest: checkpoint::file_digest(path)?,
            },
            model: ckpt.model,
        })
    }
}

enum TeacherLogits<'a> {
    None,
    PerBatch(&'a Model),
    /// Logits for every dataset index, row-major.
    Cached { logits: Vec<f64>, classes: usize },
}

struct Fit<'a> {
    dataset: &'a Dataset,
    cfg: &'a TrainConfig,
    role: Role,
    teacher: Option<&'a Teacher>,
}

impl Fit<'_> {
    fn run(self, mut model: Model, observer: &mut dyn FnMut(&EpochLog)) -> Result<(Checkpoint, RunReport)> {
        let start = Instant::now();
        let Fit {
            dataset,
            cfg,
            role,
            teacher,
        } = self;
        let blend = cfg.blend();
        let teacher_logits = match teacher {
            Some(t) if blend.alpha > 0.0 => {
                if t.model.spec().num_classes() != dataset.num_classes() {
                    return Err(Error::Config(format!(
                        "teacher `{}` predicts {} classes, dataset has {}",
                        t.provenance.name,
                        t.model.spec().num_classes(),
                        dataset.num_classes()
                    )));
                }
                if cfg.teacher_cache {
                    let all = t.model.forward(dataset.features())?;
                    TeacherLogits::Cached {
                        logits: all.into_data(),
                        classes: dataset.num_classes(),
                    }
                } else {
                    TeacherLogits::PerBatch(&t.model)
                }
            }
            _ => TeacherLogits::None,
        };

        let train_len = dataset.split_len(Split::Train);
        let steps_per_epoch = train_len.div_ceil(cfg.batch_size);
        let schedule = CosineSchedule::new(cfg.lr_max, cfg.lr_min, cfg.epochs * steps_per_epoch)?;
        let mut opt = AdamW::new(cfg.weight_decay);
        let selection_split = if dataset.has_val() { Split::Val } else { Split::Train };

        let mut step = 0;
        let mut logs = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, usize, Model)> = None;
        for epoch in 0..cfg.epochs {
            let batches = dataset.batches(Split::Train, cfg.batch_size, Some(cfg.shuffle_seed()), epoch as u64)?;
            let order = batches.order().to_vec();
            let mut loss_sum = 0.0;
            let mut lr = cfg.lr_max;
            for (idx, (x, y)) in order.chunks(cfg.batch_size).zip(batches) {
                lr = schedule.lr_at(step)?;
                let teacher_out = match &teacher_logits {
                    TeacherLogits::None => None,
                    TeacherLogits::PerBatch(t) => Some(t.forward(&x)?),
                    TeacherLogits::Cached { logits, classes } => {
                        let mut rows = Vec::with_capacity(idx.len() * classes);
                        for &i in idx {
                            rows.extend_from_slice(&logits[i * classes..(i + 1) * classes]);
                        }
                        Some(Tensor::new(vec![idx.len(), *classes], rows)?)
                    }
                };
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let input = tape.constant(&x);
                let logits = model.forward_on(&mut tape, &bound, input)?;
                let loss = objectives::total_loss(&mut tape, logits, teacher_out.as_ref(), &y, &blend)?;
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite { step, loss: value });
                }
                loss_sum += value * y.len() as f64;
                let grads = tape.backward(loss)?;
                model.zero_grad();
                model.accumulate_grads(&grads, &bound)?;
                opt.step(model.params_mut(), lr)?;
                step += 1;
            }
            let acc = eval::accuracy(&model, dataset, selection_split)?;
            let log = EpochLog {
                epoch: epoch + 1,
                train_loss: loss_sum / train_len as f64,
                selection_accuracy: acc,
                lr,
            };
            observer(&log);
            logs.push(log);
            let improved = match &best {
                None => true,
                Some((b, _, _)) => acc > *b || selection_split == Split::Train,
            };
            if improved {
                best = Some((acc, epoch + 1, model.clone()));
            }
        }
        let (selection_accuracy, selected_epoch, selected) = best.expect("at least one epoch");
        let stored = selected.rounded_to_f32();
        let test_accuracy = if dataset.split_len(Split::Test) > 0 {
            eval::accuracy(&stored, dataset, Split::Test)?
        } else {
            f64::NAN
        };
        let spec = selected.spec().clone();
        let report = RunReport {
            role,
            config: cfg.clone(),
            augmentation: "none".into(),
            dataset_digest: dataset.digest(),
            selection_split,
            epochs: logs,
            selected_epoch,
            test_accuracy,
            params: eval::count_params(&spec),
            flops: {
                let mut shape = vec![1];
                shape.extend_from_slice(&spec.input_shape);
                eval::count_flops(&spec, &shape)?
            },
            teacher: teacher.filter(|_| cfg.strategy == StrategyKind::Distill).map(|t| t.provenance.clone()),
            wall_clock_seconds: Some(start.elapsed().as_secs_f64()),
        };
        let ckpt = Checkpoint {
            model: selected,
            meta: Metadata {
                role,
                epoch: selected_epoch,
                config: Some(cfg.clone()),
                metrics: Some(Metrics {
                    selection_accuracy,
                    test_accuracy: test_accuracy.is_finite().then_some(test_accuracy),
                }),
            },
        };
        Ok((ckpt, report))
    }
}

/// Relative paths in a config resolve against `root`.
fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

fn initial_model(spec: &ModelSpec, cfg: &TrainConfig, root: &Path) -> Result<Model> {
    match cfg.init {
        InitKind::Scratch => Model::init_truncated_normal(spec, cfg.init_std, cfg.seed),
        InitKind::Pretrained => {
            let path = resolve(root, cfg.pretrained.as_deref().expect("validated"));
            Model::load_pretrained(spec, &path, cfg.init_std, cfg.seed)
        }
    }
}

/// Trains a student under `cfg`, loading its teacher from `cfg.teacher`.
pub fn train_student(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, RunReport)> {
    train_student_with(dataset, cfg, None, &mut |_| {})
}

/// Like [`train_student`], with an already-loaded teacher and a per-epoch observer.
pub fn train_student_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&Teacher>,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, RunReport)> {
    train_student_in(Path::new(""), dataset, cfg, teacher, observer)
}

/// Like [`train_student_with`], resolving relative checkpoint paths in `cfg`
/// against `root`. The report echoes the paths as written.
pub fn train_student_in(
    root: &Path,
    dataset: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&Teacher>,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, RunReport)> {
    cfg.validate()?;
    let loaded;
    let teacher = match (cfg.strategy, teacher) {
        (StrategyKind::Finetune, _) => None,
        (StrategyKind::Distill, Some(t)) => Some(t),
        (StrategyKind::Distill, None) => {
            let path = cfg.teacher.as_deref().expect("validated");
            let mut t = Teacher::load(&resolve(root, path))?;
            t.provenance.path = path.display().to_string();
            loaded = t;
            Some(&loaded)
        }
    };
    let spec = cfg.model_spec(dataset)?;
    let model = initial_model(&spec, cfg, root)?;
    Fit {
        dataset,
        cfg,
        role: Role::Student,
        teacher,
    }
    .run(model, observer)
}

/// Supervised pretraining from scratch on labels merged `merge`-to-1.
pub fn pretrain(
    dataset: &Dataset,
    cfg: &TrainConfig,
    merge: usize,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, RunReport)> {
    let coarse = dataset.coarsen(merge)?;
    let cfg = TrainConfig {
        init: InitKind::Scratch,
        pretrained: None,
        strategy: StrategyKind::Finetune,
        teacher: None,
        ..cfg.clone()
    };
    cfg.validate()?;
    let spec = cfg.model_spec(&coarse)?;
    let model = Model::init_truncated_normal(&spec, cfg.init_std, cfg.seed)?;
    Fit {
        dataset: &coarse,
        cfg: &cfg,
        role: Role::Pretrain,
        teacher: None,
    }
    .run(model, observer)
}

/// Builds a teacher from a pretrained encoder by training only a fresh
/// linear head with cross-entropy; the encoder stays frozen.
pub fn train_teacher_probe(
    encoder_ckpt: &Path,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, RunReport)> {
    train_teacher_probe_in(Path::new(""), encoder_ckpt, dataset, cfg, observer)
}

/// Like [`train_teacher_probe`] with `encoder_ckpt` relative to `root`.
pub fn train_teacher_probe_in(
    root: &Path,
    encoder_ckpt: &Path,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, RunReport)> {
    let cfg = TrainConfig {
        init: InitKind::Pretrained,
        pretrained: Some(encoder_ckpt.to_path_buf()),
        strategy: StrategyKind::Finetune,
        teacher: None,
        ..cfg.clone()
    };
    cfg.validate()?;
    let spec = cfg.model_spec(dataset)?;
    let model = Model::load_pretrained(&spec, &resolve(root, encoder_ckpt), cfg.init_std, cfg.seed)?.freeze_encoder();
    Fit {
        dataset,
        cfg: &cfg,
        role: Role::Teacher,
        teacher: None,
    }
    .run(model, observer)
}
