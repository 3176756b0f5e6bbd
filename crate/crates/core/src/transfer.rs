//! Student-side knowledge transfer: descriptors computed through the frozen
//! teacher frame, the two knowledge losses and the clipped gradient combine.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::mpnn::{extract_knowledge, mpnn_forward, relation_kld, KnowledgeBundle, MpnnForward, MpnnParams, SoftmaxAxis};
use crate::nets::{depth_adapter, BnMode, ConvNet};
use crate::optim::Sgd;
use crate::params::{Bound, GradSet};
use crate::spca::{self, correction_sign, IpcaState, ANTIPODE_GUARD};
use crate::tensor::{dot, Tensor};

/// Everything the student borrows from the teacher phase. Never mutated
/// while the student trains.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTeacherFrame {
    pub teacher: ConvNet,
    pub ipca: Vec<IpcaState>,
    pub mpnn: Vec<MpnnParams>,
}

impl FrozenTeacherFrame {
    pub fn new(teacher: ConvNet, ipca: Vec<IpcaState>, mpnn: Vec<MpnnParams>) -> Result<Self> {
        let l = teacher.spec.sensing_points();
        if ipca.len() != l || mpnn.len() + 1 != l {
            return Err(Error::Shape(format!(
                "frame needs {l} IPCA states and {} MPNNs, got {} and {}",
                l.saturating_sub(1),
                ipca.len(),
                mpnn.len()
            )));
        }
        if let Some(s) = ipca.iter().find(|s| s.updates_seen == 0) {
            return Err(Error::UninitializedState(s.layer));
        }
        Ok(Self { teacher, ipca, mpnn })
    }

    pub fn depths(&self) -> Vec<usize> {
        self.ipca.iter().map(|s| s.dim).collect()
    }

    pub fn center(&self, l: usize) -> Vec<f64> {
        spca::center(self.ipca[l].dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `min(1, ‖g_target‖ / (‖z‖ + ε))`: knowledge gradients never outgrow
    /// the target gradient.
    NormCapMin,
    /// `max(1, ‖g_target‖ / ‖z‖)`, taken literally.
    PaperLiteralMax,
}

impl std::str::FromStr for ClipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm_cap_min" => Ok(Self::NormCapMin),
            "paper_literal_max" => Ok(Self::PaperLiteralMax),
            other => Err(Error::Config(format!(
                "clip_mode must be norm_cap_min|paper_literal_max, got {other}"
            ))),
        }
    }
}

impl std::fmt::Display for ClipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NormCapMin => "norm_cap_min",
            Self::PaperLiteralMax => "paper_literal_max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipPolicy {
    pub mode: ClipMode,
    pub epsilon: f64,
}

impl ClipPolicy {
    pub fn new(mode: ClipMode, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("clip epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self { mode, epsilon })
    }

    /// Scale applied to a knowledge gradient of norm `z_norm`.
    pub fn factor(&self, target_norm: f64, z_norm: f64) -> f64 {
        match self.mode {
            ClipMode::NormCapMin => (target_norm / (z_norm + self.epsilon)).min(1.0),
            // a zero gradient contributes nothing whatever the factor
            ClipMode::PaperLiteralMax if z_norm == 0.0 => 1.0,
            ClipMode::PaperLiteralMax => (target_norm / z_norm).max(1.0),
        }
    }
}

impl Default for ClipPolicy {
    fn default() -> Self {
        Self {
            mode: ClipMode::NormCapMin,
            epsilon: 1e-12,
        }
    }
}

/// Global gradient norms around the clip.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipNorms {
    pub target: f64,
    pub int_pre: f64,
    pub int_post: f64,
    pub alt_pre: f64,
    pub alt_post: f64,
}

pub fn clip_combine(g_target: &GradSet, g_int: &GradSet, g_alt: &GradSet, policy: &ClipPolicy) -> (GradSet, ClipNorms) {
    let target = g_target.norm();
    let (int_pre, alt_pre) = (g_int.norm(), g_alt.norm());
    let int = g_int.scaled(policy.factor(target, int_pre));
    let alt = g_alt.scaled(policy.factor(target, alt_pre));
    let norms = ClipNorms {
        target,
        int_pre,
        int_post: int.norm(),
        alt_pre,
        alt_post: alt.norm(),
    };
    (g_target.add(&int).add(&alt), norms)
}

/// One record of the per-step metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_target: f64,
    pub l_int: f64,
    pub l_alt: f64,
    pub norms: ClipNorms,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Stop-gradient first left singular vectors of `N x R x D` maps, one row per image.
pub fn left_vectors(maps: &Tensor) -> Result<Tensor> {
    let (n, r, d) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut u = Vec::with_capacity(n * r);
    for i in 0..n {
        let f = Tensor::from_parts(vec![r, d], maps.data()[i * r * d..(i + 1) * r * d].to_vec());
        if f.max_abs() == 0.0 {
            return Err(Error::DegenerateInput(format!("image {i}: all-zero student feature map")));
        }
        u.extend(svd(&f)?.left_vector(0));
    }
    Ok(Tensor::from_parts(vec![n, r], u))
}

/// Unit student descriptors from `N x R x D` maps with fixed projection
/// vectors `u`; gradients flow through the maps only.
pub fn student_pc_with<'t>(maps: Var<'t>, u: Tensor) -> Var<'t> {
    let q = maps.project_rows(u).normalize_rows();
    let value = q.value();
    let signs = (0..value.rows()).map(|r| correction_sign(value.row(r))).collect();
    q.scale_rows(signs)
}

/// `N x D` student descriptors from `N x H x W x D` (or `N x R x D`) maps.
pub fn student_pc_var<'t>(maps: Var<'t>) -> Result<Var<'t>> {
    let shape = maps.shape();
    let (n, d) = (shape[0], *shape.last().expect("non-scalar maps"));
    let r = shape[1..shape.len() - 1].iter().product();
    let maps = maps.reshape(&[n, r, d]);
    let u = left_vectors(&maps.value())?;
    Ok(student_pc_with(maps, u))
}

/// Descriptor of a single `HW x D` map.
pub fn student_pc(f: &Tensor) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let (r, d) = (f.rows(), f.cols());
    let maps = tape.constant(f.clone().reshape(&[1, r, d])?);
    Ok(student_pc_var(maps)?.value().data().to_vec())
}

/// Student descriptors expressed in the teacher's frozen coordinates.
///
/// By default this is the teacher's own pipeline (plane projection,
/// centering, V, S); `literal` uses `(p − μ)·V` only.
pub fn student_compress_var<'t>(p: Var<'t>, state: &IpcaState, literal: bool) -> Result<Var<'t>> {
    if state.updates_seen == 0 {
        return Err(Error::UninitializedState(state.layer));
    }
    let pv = p.value();
    if pv.cols() != state.dim {
        return Err(Error::Shape(format!("student width {} vs frame width {}", pv.cols(), state.dim)));
    }
    let tape = p.tape();
    let o = spca::center(state.dim);
    let x = if literal {
        p
    } else {
        for r in 0..pv.rows() {
            let d = dot(pv.row(r), &o);
            if d < -1.0 + ANTIPODE_GUARD {
                return Err(Error::Antipode(d));
            }
        }
        p.stereographic_rows(Rc::new(o))
    };
    let neg_mu = Tensor::from_parts(vec![state.dim], state.mu.iter().map(|m| -m).collect());
    let c = x.add_bias(tape.constant(neg_mu)).matmul(tape.constant(state.v.clone()));
    Ok(if literal {
        c
    } else {
        c.mul_bias(tape.constant(Tensor::from_parts(vec![state.s.len()], state.s.clone())))
    })
}

pub fn student_compress(p: &[f64], state: &IpcaState, literal: bool) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = tape.constant(Tensor::from_parts(vec![1, p.len()], p.to_vec()));
    Ok(student_compress_var(p, state, literal)?.value().data().to_vec())
}

fn check_pairing(what: &str, s: usize, t: usize) {
    assert_eq!(s, t, "{what}: {s} student vs {t} teacher tensors");
}

/// Mean over pairs of `KLD(σ(K^S) ‖ σ(K^T))`.
pub fn loss_int<'t>(k_s: &[Var<'t>], k_t: &[Tensor], axis: SoftmaxAxis) -> Var<'t> {
    check_pairing("loss_int", k_s.len(), k_t.len());
    assert!(!k_s.is_empty(), "loss_int over zero pairs");
    let tape = k_s[0].tape();
    let mut total: Option<Var<'t>> = None;
    for (s, t) in k_s.iter().zip(k_t) {
        assert_eq!(s.shape(), t.shape(), "loss_int shape mismatch");
        let term = relation_kld(*s, tape.constant(t.clone()), axis);
        total = Some(total.map_or(term, |acc| acc.add(term)));
    }
    total.expect("non-empty").scale(1.0 / k_s.len() as f64)
}

/// Mean over message tensors of `Σ|K^S − K^T| / (N² · E)`.
pub fn loss_alt<'t>(k_s: &[Var<'t>], k_t: &[Tensor]) -> Var<'t> {
    check_pairing("loss_alt", k_s.len(), k_t.len());
    assert!(!k_s.is_empty(), "loss_alt over zero tensors");
    let tape = k_s[0].tape();
    let mut total: Option<Var<'t>> = None;
    for (s, t) in k_s.iter().zip(k_t) {
        assert_eq!(s.value().len(), t.len(), "loss_alt shape mismatch");
        let t = tape.constant(t.clone().reshape(&s.shape()).expect("same element count"));
        // sum|d| / N² / E is the elementwise mean
        let term = s.sub(t).abs().mean();
        total = Some(total.map_or(term, |acc| acc.add(term)));
    }
    total.expect("non-empty").scale(1.0 / k_s.len() as f64)
}

fn frozen_mpnn<'t>(frame: &FrozenTeacherFrame, tape: &'t Tape, cs: &[Var<'t>]) -> Result<Vec<MpnnForward<'t>>> {
    frame
        .mpnn
        .iter()
        .enumerate()
        .map(|(l, params)| {
            let bound = params.trainable.bind_frozen(tape);
            mpnn_forward(params, &bound, cs[l], cs[l + 1], false)
        })
        .collect()
}

/// Teacher-side knowledge for one batch: the teacher runs with batch
/// statistics, SPCA uses the frozen states and the MPNNs their running
/// statistics.
pub fn teacher_knowledge(frame: &FrozenTeacherFrame, images: &Tensor) -> Result<KnowledgeBundle> {
    let tape = Tape::new();
    let (_, maps) = frame.teacher.forward_sensed(images, BnMode::Batch)?;
    let mut cs = Vec::with_capacity(maps.len());
    for (batch, state) in maps.iter().zip(&frame.ipca) {
        let plane = spca::plane_project(&spca::principal_components(batch)?)?;
        cs.push(tape.constant(spca::compress(&plane, state)?.c));
    }
    Ok(extract_knowledge(&frozen_mpnn(frame, &tape, &cs)?))
}

/// Student sensed maps -> adapters -> descriptors -> frozen MPNNs.
pub fn student_forwards<'t>(
    frame: &FrozenTeacherFrame,
    features: &[Var<'t>],
    bound: &Bound<'t>,
    literal: bool,
) -> Result<Vec<MpnnForward<'t>>> {
    if features.len() != frame.ipca.len() {
        return Err(Error::Shape(format!(
            "{} student sensing points vs {} in the frame",
            features.len(),
            frame.ipca.len()
        )));
    }
    let mut cs = Vec::with_capacity(features.len());
    for (l, f) in features.iter().enumerate() {
        let f = match bound.try_get(&format!("adapter{l}.weight")) {
            Some(w) => depth_adapter(*f, w),
            None => *f,
        };
        cs.push(student_compress_var(student_pc_var(f)?, &frame.ipca[l], literal)?);
    }
    let tape = features[0].tape();
    frozen_mpnn(frame, tape, &cs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentOptions {
    pub enable_int: bool,
    pub enable_alt: bool,
    pub literal: bool,
    pub axis: SoftmaxAxis,
    pub clip: ClipPolicy,
}

impl Default for StudentOptions {
    fn default() -> Self {
        Self {
            enable_int: true,
            enable_alt: true,
            literal: false,
            axis: SoftmaxAxis::Row,
            clip: ClipPolicy::default(),
        }
    }
}

/// One optimizer step of the student on the three tasks. With both
/// knowledge losses disabled the teacher is never touched.
#[allow(clippy::too_many_arguments)]
pub fn student_step(
    step: u64,
    images: &Tensor,
    labels: &[usize],
    student: &mut ConvNet,
    frame: &FrozenTeacherFrame,
    opts: &StudentOptions,
    optimizer: &mut Sgd,
    lr: f64,
) -> Result<LossReport> {
    let knowledge = opts.enable_int || opts.enable_alt;
    let k_t = if knowledge { Some(teacher_knowledge(frame, images)?) } else { None };

    let tape = Tape::new();
    let bound = student.params.bind(&tape);
    let out = student.forward(&bound, tape.constant(images.clone()), BnMode::Train)?;
    let target = out.logits.cross_entropy(labels);
    let g_target = bound.grads(&tape.backward(target));

    let (mut l_int, mut l_alt) = (0.0, 0.0);
    let (mut g_int, mut g_alt) = (GradSet::new(), GradSet::new());
    if let Some(k_t) = k_t {
        let forwards = student_forwards(frame, &out.features, &bound, opts.literal)?;
        if opts.enable_int {
            let k_s: Vec<Var> = forwards.iter().map(|f| f.a_tilde).collect();
            let loss = loss_int(&k_s, &k_t.k_int, opts.axis);
            l_int = loss.item();
            g_int = bound.grads(&tape.backward(loss));
        }
        if opts.enable_alt {
            let k_s: Vec<Var> = forwards.iter().flat_map(|f| f.messages.iter().copied()).collect();
            let loss = loss_alt(&k_s, &k_t.k_alt);
            l_alt = loss.item();
            g_alt = bound.grads(&tape.backward(loss));
        }
    }
    let l_target = target.item();
    if !(l_target.is_finite() && l_int.is_finite() && l_alt.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: format!("student losses target={l_target} int={l_int} alt={l_alt}"),
        });
    }

    let (total, norms) = clip_combine(&g_target, &g_int, &g_alt, &opts.clip);
    if opts.clip.mode == ClipMode::NormCapMin
        && (norms.int_post > norms.target + 1e-9 || norms.alt_post > norms.target + 1e-9)
    {
        return Err(Error::Diverged {
            step,
            detail: format!("clip contract violated: {norms:?}"),
        });
    }
    optimizer.step(&mut student.params, &total, lr)?;
    student.apply_bn_updates(&out.bn_updates);
    Ok(LossReport {
        step,
        l_target,
        l_int,
        l_alt,
        norms,
    })
}
