//! Flat `key = value` run configuration.
//!
//! Every field has a default, unknown keys are rejected, and the canonical
//! rendering (all keys, sorted) is what gets hashed into checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mpnn::SoftmaxAxis;
use crate::nets::{ConvNet, ConvNetSpec};
use crate::optim::LrSchedule;
use crate::transfer::{ClipMode, ClipPolicy, StudentOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    /// 3073-byte records: label byte + 3072 channel-planar pixels.
    TinyImage,
}

/// How a learning-rate decay point changes the rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayInterpretation {
    /// Multiply by 0.8 ("decrease by 20%").
    Multiply08,
    /// Multiply by 0.2.
    Multiply02,
}

impl DecayInterpretation {
    pub fn factor(self) -> f64 {
        match self {
            Self::Multiply08 => 0.8,
            Self::Multiply02 => 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetPhase {
    pub widths: Vec<usize>,
    pub blocks: usize,
    pub lr: f64,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub lr_milestones: Vec<f64>,
    pub decay_interpretation: DecayInterpretation,

    pub data_source: DataSource,
    pub data_train_path: Option<PathBuf>,
    pub data_test_path: Option<PathBuf>,
    pub data_count: usize,
    /// Seed of the synthetic renderer, independent of the run seed.
    pub data_seed: u64,
    pub data_classes: usize,
    pub sample_rate: f64,
    pub augment_crop: bool,
    pub augment_flip: bool,
    pub crop_padding: usize,

    pub teacher: NetPhase,
    pub student: NetPhase,

    pub mpnn_lr: f64,
    pub mpnn_iterations: u64,
    pub mpnn_rounds: usize,
    pub softmax_axis: SoftmaxAxis,
    pub ema_new_weight: f64,

    pub enable_k_int: bool,
    pub enable_k_alt: bool,
    pub student_compress_literal: bool,
    pub clip_mode: ClipMode,
    pub clip_epsilon: f64,

    pub cvis_literal: bool,
    pub viz_count: usize,

    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    pub resume_from: Option<PathBuf>,
    pub eval_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 128,
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: true,
            lr_milestones: vec![0.3, 0.6, 0.8],
            decay_interpretation: DecayInterpretation::Multiply08,
            data_source: DataSource::Synthetic,
            data_train_path: None,
            data_test_path: None,
            data_count: 2000,
            data_seed: 0,
            data_classes: 4,
            sample_rate: 1.0,
            augment_crop: true,
            augment_flip: true,
            crop_padding: 2,
            teacher: NetPhase {
                widths: vec![16, 32, 64],
                blocks: 2,
                lr: 0.1,
                iterations: 6000,
            },
            student: NetPhase {
                widths: vec![8, 16, 32],
                blocks: 1,
                lr: 0.1,
                iterations: 6000,
            },
            mpnn_lr: 0.1,
            mpnn_iterations: 8000,
            mpnn_rounds: 2,
            softmax_axis: SoftmaxAxis::Row,
            ema_new_weight: 0.9,
            enable_k_int: true,
            enable_k_alt: true,
            student_compress_literal: false,
            clip_mode: ClipMode::NormCapMin,
            clip_epsilon: 1e-12,
            cvis_literal: false,
            viz_count: 64,
            eval_every: 200,
            checkpoint_every: 1000,
            out_dir: PathBuf::from("runs"),
            resume_from: None,
            eval_checkpoint: None,
        }
    }
}

const HASH_EXEMPT: [&str; 2] = ["resume_from", "eval.checkpoint"];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key}: expected {what}, got {value:?}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, what))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "a boolean")),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim(), "a comma-separated list")).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v, "an integer")?,
            "batch_size" => self.batch_size = num(key, v, "an integer")?,
            "weight_decay" => self.weight_decay = num(key, v, "a number")?,
            "momentum" => self.momentum = num(key, v, "a number")?,
            "nesterov" => self.nesterov = flag(key, v)?,
            "lr.milestones" => self.lr_milestones = list(key, v)?,
            "lr.decay_interpretation" => {
                self.decay_interpretation = match v {
                    "multiply_0.8" => DecayInterpretation::Multiply08,
                    "multiply_0.2" => DecayInterpretation::Multiply02,
                    _ => return Err(bad(key, v, "multiply_0.8|multiply_0.2")),
                }
            }
            "data.source" => {
                self.data_source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "tiny_image" => DataSource::TinyImage,
                    _ => return Err(bad(key, v, "synthetic|tiny_image")),
                }
            }
            "data.train_path" => self.data_train_path = opt_path(v),
            "data.test_path" => self.data_test_path = opt_path(v),
            "data.count" => self.data_count = num(key, v, "an integer")?,
            "data.seed" => self.data_seed = num(key, v, "an integer")?,
            "data.classes" => self.data_classes = num(key, v, "an integer")?,
            "data.sample_rate" => self.sample_rate = num(key, v, "a number")?,
            "data.augment_crop" => self.augment_crop = flag(key, v)?,
            "data.augment_flip" => self.augment_flip = flag(key, v)?,
            "data.crop_padding" => self.crop_padding = num(key, v, "an integer")?,
            "teacher.widths" => self.teacher.widths = list(key, v)?,
            "teacher.blocks" => self.teacher.blocks = num(key, v, "an integer")?,
            "teacher.lr" => self.teacher.lr = num(key, v, "a number")?,
            "teacher.iterations" => self.teacher.iterations = num(key, v, "an integer")?,
            "student.widths" => self.student.widths = list(key, v)?,
            "student.blocks" => self.student.blocks = num(key, v, "an integer")?,
            "student.lr" => self.student.lr = num(key, v, "a number")?,
            "student.iterations" => self.student.iterations = num(key, v, "an integer")?,
            "mpnn.lr" => self.mpnn_lr = num(key, v, "a number")?,
            "mpnn.iterations" => self.mpnn_iterations = num(key, v, "an integer")?,
            "mpnn.rounds" => self.mpnn_rounds = num(key, v, "an integer")?,
            "mpnn.softmax_axis" => self.softmax_axis = v.parse()?,
            "ipca.ema_new_weight" => self.ema_new_weight = num(key, v, "a number")?,
            "student.enable_k_int" => self.enable_k_int = flag(key, v)?,
            "student.enable_k_alt" => self.enable_k_alt = flag(key, v)?,
            "student.compress_literal" => self.student_compress_literal = flag(key, v)?,
            "student.clip_mode" => self.clip_mode = v.parse()?,
            "student.clip_epsilon" => self.clip_epsilon = num(key, v, "a number")?,
            "viz.cvis_literal" => self.cvis_literal = flag(key, v)?,
            "viz.count" => self.viz_count = num(key, v, "an integer")?,
            "eval_every" => self.eval_every = num(key, v, "an integer")?,
            "checkpoint_every" => self.checkpoint_every = num(key, v, "an integer")?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "resume_from" => self.resume_from = opt_path(v),
            "eval.checkpoint" => self.eval_checkpoint = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("momentum", self.momentum.to_string()),
            ("nesterov", self.nesterov.to_string()),
            ("lr.milestones", join(&self.lr_milestones)),
            (
                "lr.decay_interpretation",
                match self.decay_interpretation {
                    DecayInterpretation::Multiply08 => "multiply_0.8",
                    DecayInterpretation::Multiply02 => "multiply_0.2",
                }
                .into(),
            ),
            (
                "data.source",
                match self.data_source {
                    DataSource::Synthetic => "synthetic",
                    DataSource::TinyImage => "tiny_image",
                }
                .into(),
            ),
            ("data.train_path", path_str(&self.data_train_path)),
            ("data.test_path", path_str(&self.data_test_path)),
            ("data.count", self.data_count.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.classes", self.data_classes.to_string()),
            ("data.sample_rate", self.sample_rate.to_string()),
            ("data.augment_crop", self.augment_crop.to_string()),
            ("data.augment_flip", self.augment_flip.to_string()),
            ("data.crop_padding", self.crop_padding.to_string()),
            ("teacher.widths", join(&self.teacher.widths)),
            ("teacher.blocks", self.teacher.blocks.to_string()),
            ("teacher.lr", self.teacher.lr.to_string()),
            ("teacher.iterations", self.teacher.iterations.to_string()),
            ("student.widths", join(&self.student.widths)),
            ("student.blocks", self.student.blocks.to_string()),
            ("student.lr", self.student.lr.to_string()),
            ("student.iterations", self.student.iterations.to_string()),
            ("mpnn.lr", self.mpnn_lr.to_string()),
            ("mpnn.iterations", self.mpnn_iterations.to_string()),
            ("mpnn.rounds", self.mpnn_rounds.to_string()),
            ("mpnn.softmax_axis", self.softmax_axis.to_string()),
            ("ipca.ema_new_weight", self.ema_new_weight.to_string()),
            ("student.enable_k_int", self.enable_k_int.to_string()),
            ("student.enable_k_alt", self.enable_k_alt.to_string()),
            ("student.compress_literal", self.student_compress_literal.to_string()),
            ("student.clip_mode", self.clip_mode.to_string()),
            ("student.clip_epsilon", self.clip_epsilon.to_string()),
            ("viz.cvis_literal", self.cvis_literal.to_string()),
            ("viz.count", self.viz_count.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("resume_from", path_str(&self.resume_from)),
            ("eval.checkpoint", path_str(&self.eval_checkpoint)),
        ];
        e.sort_by_key(|(k, _)| *k);
        e
    }

    /// Parses a config document on top of the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// sha256 of the canonical rendering, hex encoded. Keys that only say
    /// where to resume or what to evaluate do not change the run and are
    /// left out.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !HASH_EXEMPT.contains(&k) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return fail(format!("data.sample_rate must be in (0, 1], got {}", self.sample_rate));
        }
        if !(0.0..=1.0).contains(&self.ema_new_weight) {
            return fail("ipca.ema_new_weight must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        for (name, lr) in [("teacher", self.teacher.lr), ("student", self.student.lr), ("mpnn", self.mpnn_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} learning rate must be positive"));
            }
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return fail("lr.milestones are fractions in [0, 1]".into());
        }
        if self.mpnn_rounds == 0 {
            return fail("mpnn.rounds must be >= 1".into());
        }
        if self.data_classes < 2 {
            return fail("data.classes must be >= 2".into());
        }
        if self.data_source == DataSource::TinyImage && self.data_train_path.is_none() {
            return fail("data.source = tiny_image needs data.train_path".into());
        }
        ClipPolicy::new(self.clip_mode, self.clip_epsilon)?;
        let (t, s) = (self.teacher_spec()?, self.student_spec()?);
        if t.widths.len() != s.widths.len() {
            return fail("teacher and student need the same number of stages".into());
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (tn, sn) = (ConvNet::init(t, &mut rng)?, ConvNet::init(s, &mut rng)?);
        if sn.param_count() >= tn.param_count() {
            return fail(format!(
                "student ({}) must have fewer parameters than the teacher ({})",
                sn.param_count(),
                tn.param_count()
            ));
        }
        Ok(())
    }

    pub fn teacher_spec(&self) -> Result<ConvNetSpec> {
        ConvNetSpec::new(self.teacher.widths.clone(), self.teacher.blocks, self.data_classes)
    }

    pub fn student_spec(&self) -> Result<ConvNetSpec> {
        ConvNetSpec::new(self.student.widths.clone(), self.student.blocks, self.data_classes)
    }

    pub fn net_schedule(&self, phase: &NetPhase) -> LrSchedule {
        LrSchedule {
            initial: phase.lr,
            milestones: self.lr_milestones.clone(),
            factor: self.decay_interpretation.factor(),
            total: phase.iterations,
        }
    }

    pub fn student_options(&self) -> StudentOptions {
        StudentOptions {
            enable_int: self.enable_k_int,
            enable_alt: self.enable_k_alt,
            literal: self.student_compress_literal,
            axis: self.softmax_axis,
            clip: ClipPolicy {
                mode: self.clip_mode,
                epsilon: self.clip_epsilon,
            },
        }
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.out_dir.join("teacher.iepk")
    }

    pub fn teacher_best_checkpoint(&self) -> PathBuf {
        self.out_dir.join("teacher_best.iepk")
    }

    pub fn frame_checkpoint(&self) -> PathBuf {
        self.out_dir.join("frame.iepk")
    }

    pub fn student_checkpoint(&self) -> PathBuf {
        self.out_dir.join("student.iepk")
    }

    pub fn metrics_path(&self, phase: &str) -> PathBuf {
        self.out_dir.join(format!("{phase}_metrics.ndjson"))
    }
}
