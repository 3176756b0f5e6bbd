//! Message-passing distillation network.
//!
//! For an adjacent pair of sensing points `(l, l+1)` the edges come from the
//! layer-`l` descriptors (linear map, batch norm, unit normalization, pairwise
//! Hadamard product) and the nodes are the layer-`l+1` descriptors used as
//! they are. Each round computes a GLU message from `[h_v − h_w, mean(e)]` and
//! adds it to the edge; the readout averages the final edge into an estimate
//! of the next stage's affinity matrix.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Which axis of a relation matrix the softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    Row,
    Column,
}

impl std::str::FromStr for SoftmaxAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(Self::Row),
            "column" | "col" => Ok(Self::Column),
            other => Err(Error::Config(format!("softmax_axis must be row|column, got {other}"))),
        }
    }
}

impl std::fmt::Display for SoftmaxAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Row => "row",
            Self::Column => "column",
        })
    }
}

/// Parameters of the network serving one adjacent pair of sensing points.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnnParams {
    /// Index `l` of the lower sensing point.
    pub layer: usize,
    /// Width of `C_l` (the linear map's input).
    pub in_width: usize,
    /// Width of `C_{l+1}` (the node features).
    pub node_width: usize,
    /// Edge width; equal to `in_width`.
    pub edge_width: usize,
    pub iterations: usize,
    /// `lm.weight`, `lm.bias`, `bn.gamma`, `bn.beta`, `glu.weight`, `glu.bias`.
    pub trainable: ParamSet,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
}

impl MpnnParams {
    pub fn init(
        layer: usize,
        in_width: usize,
        node_width: usize,
        iterations: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config("message-passing iterations must be >= 1".into()));
        }
        let e = in_width;
        let mut p = ParamSet::new();
        p.insert("lm.weight", uniform(rng, in_width, e));
        p.insert("lm.bias", Tensor::zeros(&[e]));
        p.insert("bn.gamma", Tensor::full(&[e], 1.0));
        p.insert("bn.beta", Tensor::zeros(&[e]));
        p.insert("glu.weight", uniform(rng, node_width + 1, 2 * e));
        p.insert("glu.bias", Tensor::zeros(&[2 * e]));
        Ok(Self {
            layer,
            in_width,
            node_width,
            edge_width: e,
            iterations,
            trainable: p,
            running_mean: vec![0.0; e],
            running_var: vec![1.0; e],
        })
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// `e⁰`: `N² x E` edge features, row `v·N + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState {
    pub e: Tensor,
    pub round: usize,
}

impl EdgeState {
    pub fn edge(&self, n: usize, v: usize, w: usize) -> &[f64] {
        self.e.row(v * n + w)
    }
}

/// Output of [`edge_init_var`]: the edges plus batch statistics when the
/// batch norm ran in training mode.
pub struct EdgeInit<'t> {
    pub edges: Var<'t>,
    pub bn_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn edge_init_var<'t>(
    params: &MpnnParams,
    bound: &Bound<'t>,
    c_l: Var<'t>,
    training: bool,
) -> EdgeInit<'t> {
    let z = c_l.matmul(bound.get("lm.weight")).add_bias(bound.get("lm.bias"));
    let (gamma, beta) = (bound.get("bn.gamma"), bound.get("bn.beta"));
    let (z, bn_stats) = if training {
        let (y, m, v) = z.batch_norm(gamma, beta, BN_EPS);
        (y, Some((m, v)))
    } else {
        (
            z.batch_norm_fixed(gamma, beta, &params.running_mean, &params.running_var, BN_EPS),
            None,
        )
    };
    EdgeInit {
        edges: z.normalize_rows().pairwise_hadamard(),
        bn_stats,
    }
}

pub fn edge_init(c_l: &Tensor, params: &MpnnParams, training: bool) -> EdgeState {
    let tape = Tape::new();
    let bound = params.trainable.bind_frozen(&tape);
    let e = edge_init_var(params, &bound, tape.constant(c_l.clone()), training).edges;
    EdgeState {
        e: (*e.value()).clone(),
        round: 0,
    }
}

/// GLU messages for every edge at once: `diffs` is `N² x K` (`h_v − h_w`),
/// `edges` is `N² x E`.
pub fn message_var<'t>(bound: &Bound<'t>, diffs: Var<'t>, edges: Var<'t>, edge_width: usize) -> Var<'t> {
    let x = diffs.concat_cols(edges.row_mean());
    let g = x.matmul(bound.get("glu.weight")).add_bias(bound.get("glu.bias"));
    let value = g.slice_cols(0, edge_width);
    let gate = g.slice_cols(edge_width, 2 * edge_width).sigmoid();
    value.mul(gate)
}

/// Message for a single edge.
pub fn message(h_v: &[f64], h_w: &[f64], e: &[f64], params: &MpnnParams) -> Vec<f64> {
    let tape = Tape::new();
    let bound = params.trainable.bind_frozen(&tape);
    let diff: Vec<f64> = h_v.iter().zip(h_w).map(|(a, b)| a - b).collect();
    let diffs = tape.constant(Tensor::from_parts(vec![1, diff.len()], diff));
    let edges = tape.constant(Tensor::from_parts(vec![1, e.len()], e.to_vec()));
    message_var(&bound, diffs, edges, params.edge_width).value().data().to_vec()
}

pub fn edge_update(e: &[f64], m: &[f64]) -> Vec<f64> {
    assert_eq!(e.len(), m.len(), "edge and message widths differ");
    e.iter().zip(m).map(|(a, b)| a + b).collect()
}

pub fn readout(e: &[f64]) -> f64 {
    e.iter().sum::<f64>() / e.len() as f64
}

/// Forward pass over one adjacent pair, recorded on a tape.
pub struct MpnnForward<'t> {
    /// `N x N` estimate of the next stage's affinity matrix.
    pub a_tilde: Var<'t>,
    /// One `N² x E` tensor per round.
    pub messages: Vec<Var<'t>>,
    pub edges0: Var<'t>,
    pub edges_final: Var<'t>,
    pub bn_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn mpnn_forward<'t>(
    params: &MpnnParams,
    bound: &Bound<'t>,
    c_l: Var<'t>,
    c_next: Var<'t>,
    training: bool,
) -> Result<MpnnForward<'t>> {
    let (cl, cn) = (c_l.value(), c_next.value());
    if cl.rows() != cn.rows() {
        return Err(Error::Shape(format!(
            "mpnn: {} lower descriptors vs {} upper descriptors",
            cl.rows(),
            cn.rows()
        )));
    }
    if cl.cols() != params.in_width || cn.cols() != params.node_width {
        return Err(Error::Shape(format!(
            "mpnn pair {} expects widths ({}, {}), got ({}, {})",
            params.layer,
            params.in_width,
            params.node_width,
            cl.cols(),
            cn.cols()
        )));
    }
    let n = cl.rows();
    let init = edge_init_var(params, bound, c_l, training);
    let diffs = c_next.pairwise_diff();
    let mut e = init.edges;
    let mut messages = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let m = message_var(bound, diffs, e, params.edge_width);
        e = e.add(m);
        messages.push(m);
    }
    Ok(MpnnForward {
        a_tilde: e.row_mean().reshape(&[n, n]),
        messages,
        edges0: init.edges,
        edges_final: e,
        bn_stats: init.bn_stats,
    })
}

/// `KLD(σ(target) ‖ σ(estimate))` along the configured axis, averaged over rows.
pub fn relation_kld<'t>(target: Var<'t>, estimate: Var<'t>, axis: SoftmaxAxis) -> Var<'t> {
    match axis {
        SoftmaxAxis::Row => target.kld_softmax_rows(estimate),
        SoftmaxAxis::Column => target.transpose().kld_softmax_rows(estimate.transpose()),
    }
}

/// Distillation loss averaged over the adjacent pairs of one step.
pub fn mpnn_loss<'t>(targets: &[Var<'t>], estimates: &[Var<'t>], axis: SoftmaxAxis) -> Var<'t> {
    assert_eq!(targets.len(), estimates.len(), "one estimate per target");
    assert!(!targets.is_empty(), "mpnn_loss over zero pairs");
    let mut total = relation_kld(targets[0], estimates[0], axis);
    for (t, e) in targets.iter().zip(estimates).skip(1) {
        total = total.add(relation_kld(*t, *e, axis));
    }
    total.scale(1.0 / targets.len() as f64)
}

/// Estimated next-stage affinities and the per-round messages of every
/// adjacent pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBundle {
    /// `L − 1` matrices, `N x N`.
    pub k_int: Vec<Tensor>,
    /// `(L − 1) · I` tensors, `N x N x E`, ordered by pair then round.
    pub k_alt: Vec<Tensor>,
}

pub fn extract_knowledge(forwards: &[MpnnForward<'_>]) -> KnowledgeBundle {
    let mut k_int = Vec::with_capacity(forwards.len());
    let mut k_alt = Vec::new();
    for f in forwards {
        let a = f.a_tilde.value();
        let n = a.rows();
        k_int.push((*a).clone());
        for m in &f.messages {
            let m = m.value();
            k_alt.push((*m).clone().reshape(&[n, n, m.cols()]).expect("message extent"));
        }
    }
    KnowledgeBundle { k_int, k_alt }
}
