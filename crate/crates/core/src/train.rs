//! The three training phases (teacher, MPNN + IPCA, student) and evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{stream_rng, BatchPlan, BatchStream, Dataset, DatasetHandle};
use crate::error::{Error, Result};
use crate::mpnn::{mpnn_forward, mpnn_loss, MpnnParams, SoftmaxAxis};
use crate::nets::{BnMode, ConvNet};
use crate::optim::{LrSchedule, Sgd};
use crate::params::Bound;
use crate::spca::{run_spca, FeatureMapBatch, IpcaState};
use crate::transfer::{student_step, FrozenTeacherFrame};

// Seed-stream purposes; every random draw of a run is tied to one of these.
const INIT_TEACHER: u64 = 10;
const INIT_MPNN: u64 = 11;
const INIT_STUDENT: u64 = 12;

/// Newline-delimited JSON records.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let unwritable = |source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(unwritable)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(unwritable)?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).expect("metrics serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|source| Error::Unwritable {
                path: self.path.clone(),
                source,
            })
    }
}

#[derive(Serialize)]
struct NetRecord<'a> {
    phase: &'a str,
    step: u64,
    loss: f64,
    lr: f64,
    test_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct EvalRecord {
    phase: &'static str,
    step: u64,
    test_accuracy: f64,
}

#[derive(Serialize)]
struct MpnnRecord {
    phase: &'static str,
    step: u64,
    loss: f64,
}

/// Top-1 accuracy in inference mode.
pub fn accuracy(net: &ConvNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let pred = net.predict(&data.images, 100)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Test accuracy of the network stored in a teacher, student or frame checkpoint.
pub fn evaluate(ckpt: &Checkpoint, data: &DatasetHandle) -> Result<f64> {
    let net = match ckpt.kind()?.as_str() {
        "frame" => ckpt.net("teacher.")?,
        _ => ckpt.net("net.")?,
    };
    accuracy(&net, &data.test)
}

fn net_checkpoint(kind: &str, cfg: &TrainConfig, net: &ConvNet, opt: &Sgd, step: u64) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.put_text("kind", kind);
    c.put_config(cfg);
    c.put_net("net.", net);
    c.put_optimizer("opt.", opt);
    c.put_u64s("rng", vec![cfg.seed, step]);
    c
}

fn sgd(cfg: &TrainConfig) -> Sgd {
    Sgd::new(cfg.momentum, cfg.nesterov, cfg.weight_decay)
}

fn diverged(step: u64, what: &str, value: f64) -> Error {
    Error::Diverged {
        step,
        detail: format!("{what} loss became {value}"),
    }
}

/// Target-task training of the teacher. Writes the final checkpoint, the
/// best one by test accuracy, and a resumable one every
/// `checkpoint_every` steps; resumes when `resume_from` is set.
pub fn train_teacher(cfg: &TrainConfig, data: &DatasetHandle) -> Result<Checkpoint> {
    let (mut net, mut opt, start) = match &cfg.resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.expect_kind(&["teacher"])?;
            if ck.config_hash()? != cfg.hash() {
                return Err(Error::Config(format!(
                    "{} was written under a different configuration; refusing to resume",
                    path.display()
                )));
            }
            (ck.net("net.")?, ck.optimizer("opt.")?, ck.u64s("rng")?[1])
        }
        None => {
            let net = ConvNet::init(cfg.teacher_spec()?, &mut stream_rng(cfg.seed, INIT_TEACHER, 0))?;
            (net, sgd(cfg), 0)
        }
    };
    let total = cfg.teacher.iterations;
    let schedule = cfg.net_schedule(&cfg.teacher);
    let plan = BatchPlan::from_handle(data, cfg.batch_size, cfg.seed);
    let mut log = MetricsLog::open(&cfg.metrics_path("teacher"), start > 0)?;
    let mut best = f64::NEG_INFINITY;
    info!("teacher: steps {start}..{total}, {} parameters", net.param_count());
    for batch in BatchStream::spawn(plan, Arc::new(data.train.clone()), start, total) {
        let step = batch.step;
        let lr = schedule.at(step);
        let tape = Tape::new();
        let bound = net.params.bind(&tape);
        let out = net.forward(&bound, tape.constant(batch.images), BnMode::Train)?;
        let loss = out.logits.cross_entropy(&batch.labels);
        let l = loss.item();
        if !l.is_finite() {
            return Err(diverged(step, "teacher", l));
        }
        let grads = bound.grads(&tape.backward(loss));
        opt.step(&mut net.params, &grads, lr)?;
        net.apply_bn_updates(&out.bn_updates);

        let done = step + 1;
        let evaluate_now = cfg.eval_every > 0 && done % cfg.eval_every == 0 || done == total;
        let test_accuracy = if evaluate_now { Some(accuracy(&net, &data.test)?) } else { None };
        if let Some(acc) = test_accuracy {
            info!("teacher step {done}: loss {l:.4}, test accuracy {acc:.4}");
            if acc > best {
                best = acc;
                net_checkpoint("teacher", cfg, &net, &opt, done).save(&cfg.teacher_best_checkpoint())?;
            }
        }
        log.record(&NetRecord {
            phase: "teacher",
            step,
            loss: l,
            lr,
            test_accuracy,
        })?;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            net_checkpoint("teacher", cfg, &net, &opt, done).save(&cfg.out_dir.join("teacher_resume.iepk"))?;
        }
    }
    let ck = net_checkpoint("teacher", cfg, &net, &opt, total);
    ck.save(&cfg.teacher_checkpoint())?;
    Ok(ck)
}

/// MPNN and IPCA state for every adjacent pair of a teacher, trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnnTrainer {
    pub ipca: Vec<IpcaState>,
    pub mpnn: Vec<MpnnParams>,
    pub optimizers: Vec<Sgd>,
    pub ema_new_weight: f64,
    pub axis: SoftmaxAxis,
}

impl MpnnTrainer {
    pub fn new(
        depths: &[usize],
        rounds: usize,
        optimizer: Sgd,
        ema_new_weight: f64,
        axis: SoftmaxAxis,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream_rng(seed, INIT_MPNN, 0);
        let ipca = depths
            .iter()
            .enumerate()
            .map(|(l, &d)| IpcaState::new(l, d))
            .collect::<Result<Vec<_>>>()?;
        let mpnn = (0..depths.len() - 1)
            .map(|l| MpnnParams::init(l, depths[l] / 2, depths[l + 1] / 2, rounds, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            optimizers: vec![optimizer; mpnn.len()],
            ipca,
            mpnn,
            ema_new_weight,
            axis,
        })
    }

    /// IPCA update on every sensing point, then one optimizer step on the
    /// mean relation loss over all pairs. Returns the loss before the step.
    pub fn step(&mut self, maps: &[FeatureMapBatch], lr: f64) -> Result<f64> {
        let outs = maps
            .iter()
            .zip(&self.ipca)
            .map(|(m, s)| run_spca(m, s, true, self.ema_new_weight))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let bounds: Vec<Bound> = self.mpnn.iter().map(|m| m.trainable.bind(&tape)).collect();
        let cs: Vec<_> = outs.iter().map(|o| tape.constant(o.compressed.c.clone())).collect();
        let mut estimates = Vec::with_capacity(self.mpnn.len());
        let mut stats = Vec::with_capacity(self.mpnn.len());
        for (l, (params, bound)) in self.mpnn.iter().zip(&bounds).enumerate() {
            let f = mpnn_forward(params, bound, cs[l], cs[l + 1], true)?;
            estimates.push(f.a_tilde);
            stats.push(f.bn_stats);
        }
        let targets: Vec<_> = outs[1..].iter().map(|o| tape.constant(o.affinity.a.clone())).collect();
        let loss = mpnn_loss(&targets, &estimates, self.axis);
        let value = loss.item();
        if !value.is_finite() {
            return Err(diverged(0, "mpnn", value));
        }
        let grads = tape.backward(loss);
        for (l, bound) in bounds.iter().enumerate() {
            let g = bound.grads(&grads);
            self.optimizers[l].step(&mut self.mpnn[l].trainable, &g, lr)?;
            if let Some((m, v)) = &stats[l] {
                self.mpnn[l].update_running_stats(m, v);
            }
        }
        for (s, o) in self.ipca.iter_mut().zip(outs) {
            *s = o.state;
        }
        Ok(value)
    }
}

/// Fits IPCA and the MPNNs on a frozen teacher; returns the frame checkpoint.
pub fn train_mpnn(cfg: &TrainConfig, data: &DatasetHandle, teacher_ckpt: &Checkpoint) -> Result<Checkpoint> {
    teacher_ckpt.expect_kind(&["teacher"])?;
    let teacher = teacher_ckpt.net("net.")?;
    let mut trainer = MpnnTrainer::new(
        &teacher.spec.widths,
        cfg.mpnn_rounds,
        sgd(cfg),
        cfg.ema_new_weight,
        cfg.softmax_axis,
        cfg.seed,
    )?;
    let schedule = LrSchedule::constant(cfg.mpnn_lr);
    let plan = BatchPlan::from_handle(data, cfg.batch_size, cfg.seed.wrapping_add(1));
    let mut log = MetricsLog::open(&cfg.metrics_path("mpnn"), false)?;
    let total = cfg.mpnn_iterations;
    info!("mpnn: {total} steps over {} pairs", trainer.mpnn.len());
    for batch in BatchStream::spawn(plan, Arc::new(data.train.clone()), 0, total) {
        let (_, maps) = teacher.forward_sensed(&batch.images, BnMode::Batch)?;
        let loss = trainer.step(&maps, schedule.at(batch.step)).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged {
                step: batch.step,
                detail,
            },
            e => e,
        })?;
        log.record(&MpnnRecord {
            phase: "mpnn",
            step: batch.step,
            loss,
        })?;
        if cfg.eval_every > 0 && (batch.step + 1) % cfg.eval_every == 0 {
            info!("mpnn step {}: loss {loss:.6}", batch.step + 1);
        }
    }
    let frame = FrozenTeacherFrame::new(teacher, trainer.ipca, trainer.mpnn)?;
    let mut ck = Checkpoint::new();
    ck.put_text("kind", "frame");
    ck.put_config(cfg);
    ck.put_frame(&frame);
    for (l, opt) in trainer.optimizers.iter().enumerate() {
        ck.put_optimizer(&format!("opt{l}."), opt);
    }
    ck.put_u64s("rng", vec![cfg.seed, total]);
    ck.put_text("source.teacher_digest", &teacher_ckpt.digest());
    ck.save(&cfg.frame_checkpoint())?;
    Ok(ck)
}

/// Student training with the enabled knowledge losses; test accuracy is
/// logged every `eval_every` steps.
pub fn train_student(cfg: &TrainConfig, data: &DatasetHandle, frame_ckpt: &Checkpoint) -> Result<Checkpoint> {
    frame_ckpt.expect_kind(&["frame"])?;
    let frame = frame_ckpt.frame()?;
    let mut rng = stream_rng(cfg.seed, INIT_STUDENT, 0);
    let mut student = ConvNet::init(cfg.student_spec()?, &mut rng)?;
    student.attach_adapters(&frame.depths(), &mut rng)?;
    let mut opt = sgd(cfg);
    let opts = cfg.student_options();
    let schedule = cfg.net_schedule(&cfg.student);
    let plan = BatchPlan::from_handle(data, cfg.batch_size, cfg.seed.wrapping_add(2));
    let mut log = MetricsLog::open(&cfg.metrics_path("student"), false)?;
    let total = cfg.student.iterations;
    info!(
        "student: {total} steps, k_int {}, k_alt {}, {} parameters",
        opts.enable_int,
        opts.enable_alt,
        student.param_count()
    );
    for batch in BatchStream::spawn(plan, Arc::new(data.train.clone()), 0, total) {
        let step = batch.step;
        let report = student_step(step, &batch.images, &batch.labels, &mut student, &frame, &opts, &mut opt, schedule.at(step))?;
        log.record(&report)?;
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 || done == total {
            let acc = accuracy(&student, &data.test)?;
            info!("student step {done}: target {:.4}, test accuracy {acc:.4}", report.l_target);
            log.record(&EvalRecord {
                phase: "student",
                step: done,
                test_accuracy: acc,
            })?;
        }
    }
    let mut ck = net_checkpoint("student", cfg, &student, &opt, total);
    ck.put_text("source.frame_digest", &frame_ckpt.digest());
    ck.save(&cfg.student_checkpoint())?;
    Ok(ck)
}
