//! Stacked PCA: per-image first principal component, sign correction,
//! sphere-to-plane mapping, incremental PCA of the plane space, compression
//! and the cosine affinity graph.

use crate::error::{Error, Result};
use crate::linalg::{complete_orthonormal, svd, EPS};
use crate::tensor::{dot, l2, Tensor};

/// Activations sensed at one network point, `N x H x W x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapBatch {
    pub layer: usize,
    maps: Tensor,
}

impl FeatureMapBatch {
    pub fn new(layer: usize, maps: Tensor) -> Result<Self> {
        let s = maps.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("feature maps must be NxHxWxD, got {s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::Shape(format!("need at least 2 samples for affinities, got {}", s[0])));
        }
        if s[3] % 2 != 0 || s[3] < 2 {
            return Err(Error::Config(format!("sensing depth must be even, got {}", s[3])));
        }
        Ok(Self { layer, maps })
    }

    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.maps.shape()[3]
    }

    pub fn spatial(&self) -> usize {
        self.maps.shape()[1] * self.maps.shape()[2]
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    /// Image `n` reshaped to `HW x D`.
    pub fn image_matrix(&self, n: usize) -> Tensor {
        let (hw, d) = (self.spatial(), self.depth());
        Tensor::from_parts(vec![hw, d], self.maps.data()[n * hw * d..(n + 1) * hw * d].to_vec())
    }
}

/// `sign(max(v) + min(v))`, with ties resolved to `+1`.
pub fn correction_sign(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if max + min < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn sign_correct(v: &[f64]) -> Vec<f64> {
    let s = correction_sign(v);
    v.iter().map(|x| s * x).collect()
}

/// Sign-corrected first right singular vector of an `HW x D` map.
pub fn first_pc(f: &Tensor) -> Result<Vec<f64>> {
    if f.max_abs() == 0.0 {
        return Err(Error::DegenerateInput("all-zero feature map has no principal direction".into()));
    }
    let d = svd(f)?;
    Ok(sign_correct(&d.right_vector(0)))
}

/// `P`: one first-PC row per image.
pub fn principal_components(batch: &FeatureMapBatch) -> Result<Tensor> {
    let d = batch.depth();
    let mut rows = Vec::with_capacity(batch.len() * d);
    for n in 0..batch.len() {
        rows.extend(first_pc(&batch.image_matrix(n))?);
    }
    Ok(Tensor::from_parts(vec![batch.len(), d], rows))
}

/// The center of the unit sphere's positive orthant, `[1/√D; D]`.
pub fn center(d: usize) -> Vec<f64> {
    vec![1.0 / (d as f64).sqrt(); d]
}

/// Inputs this close to the antipode of the center are rejected.
pub const ANTIPODE_GUARD: f64 = 1e-9;

/// `(p + o) / cos(acos(p·o)/2)² − 2o`.
pub fn stereographic(p: &[f64], o: &[f64]) -> Result<Vec<f64>> {
    let d = dot(p, o);
    if d < -1.0 + ANTIPODE_GUARD {
        return Err(Error::Antipode(d));
    }
    let den = crate::autodiff::stereo_denominator(d);
    Ok(p.iter().zip(o).map(|(pi, oi)| (pi + oi) / den - 2.0 * oi).collect())
}

/// `P̄`: every row of `p` mapped onto the plane orthogonal to the center.
pub fn plane_project(p: &Tensor) -> Result<Tensor> {
    let d = p.cols();
    let o = center(d);
    let mut out = Vec::with_capacity(p.len());
    for r in 0..p.rows() {
        out.extend(stereographic(p.row(r), &o)?);
    }
    Ok(Tensor::from_parts(p.shape().to_vec(), out))
}

/// Running second-stage PCA of the plane space for one sensing point.
#[derive(Debug, Clone, PartialEq)]
pub struct IpcaState {
    pub layer: usize,
    pub dim: usize,
    /// `dim x dim/2`, column-orthonormal once updated.
    pub v: Tensor,
    pub s: Vec<f64>,
    pub mu: Vec<f64>,
    pub updates_seen: u64,
}

impl IpcaState {
    pub fn new(layer: usize, dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Config(format!("ipca dimension must be even, got {dim}")));
        }
        Ok(Self {
            layer,
            dim,
            v: Tensor::zeros(&[dim, dim / 2]),
            s: vec![0.0; dim / 2],
            mu: vec![0.0; dim],
            updates_seen: 0,
        })
    }

    pub fn components(&self) -> usize {
        self.dim / 2
    }

    /// Number of non-zero singular values held.
    pub fn rank(&self) -> usize {
        self.s.iter().filter(|&&s| s > 0.0).count()
    }

    pub fn is_partially_ranked(&self) -> bool {
        self.rank() < self.components()
    }

    /// One incremental update with a batch of plane vectors.
    ///
    /// Stacks the centered batch, the previous components scaled by their
    /// singular values and the mean-shift row, keeps the leading half of the
    /// spectrum, sign-corrects each direction and moves the mean by an EMA
    /// that puts `ema_new_weight` on the incoming batch mean. A state that has
    /// never been updated contributes no rows, so the first update is plain
    /// PCA of the centered batch.
    pub fn update(&self, plane: &Tensor, ema_new_weight: f64) -> Result<IpcaState> {
        let (n, d) = (plane.rows(), plane.cols());
        if d != self.dim {
            return Err(Error::Shape(format!("ipca dim {} got rows of width {d}", self.dim)));
        }
        if n < 2 {
            return Err(Error::Shape("ipca update needs at least 2 rows".into()));
        }
        let k = self.components();
        let mut batch_mean = vec![0.0; d];
        for r in 0..n {
            batch_mean.iter_mut().zip(plane.row(r)).for_each(|(m, x)| *m += x / n as f64);
        }

        let mut stacked = Vec::with_capacity((n + k + 1) * d);
        for r in 0..n {
            stacked.extend(plane.row(r).iter().zip(&batch_mean).map(|(x, m)| x - m));
        }
        let mut rows = n;
        if self.updates_seen > 0 {
            for j in 0..k {
                stacked.extend((0..d).map(|i| self.s[j] * self.v.at(i, j)));
            }
            stacked.extend(self.mu.iter().zip(&batch_mean).map(|(a, b)| a - b));
            rows += k + 1;
        }
        let m = Tensor::from_parts(vec![rows, d], stacked);
        let dec = svd(&m)?;

        let avail = dec.s.len().min(k);
        let mut cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
        let mut s = vec![0.0; k];
        // numerically zero directions beyond the batch rank count as missing
        let floor = dec.s.first().copied().unwrap_or(0.0) * 1e-12;
        for j in 0..k {
            if j < avail && dec.s[j] > floor {
                s[j] = dec.s[j];
                cols.push(Some(dec.right_vector(j)));
            } else if j < avail {
                // zero singular value: the direction is arbitrary but orthonormal
                cols.push(Some(dec.right_vector(j)));
            } else {
                cols.push(None);
            }
        }
        let cols = complete_orthonormal(cols, d);
        let mut v = vec![0.0; d * k];
        for (j, col) in cols.iter().enumerate() {
            let col = sign_correct(col);
            for i in 0..d {
                v[i * k + j] = col[i];
            }
        }
        let keep = 1.0 - ema_new_weight;
        let mu = self
            .mu
            .iter()
            .zip(&batch_mean)
            .map(|(old, new)| keep * old + ema_new_weight * new)
            .collect();
        Ok(IpcaState {
            layer: self.layer,
            dim: d,
            v: Tensor::from_parts(vec![d, k], v),
            s,
            mu,
            updates_seen: self.updates_seen + 1,
        })
    }
}

/// `C`: `N x D/2` compressed descriptors of one sensing point.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSet {
    pub layer: usize,
    pub c: Tensor,
}

/// `C = ((P̄ − μ) · V) · diag(S)`.
pub fn compress(plane: &Tensor, state: &IpcaState) -> Result<CompressedSet> {
    if state.updates_seen == 0 {
        return Err(Error::UninitializedState(state.layer));
    }
    let (n, d) = (plane.rows(), plane.cols());
    if d != state.dim {
        return Err(Error::Shape(format!("compress: width {d} vs state dim {}", state.dim)));
    }
    let mut centered = plane.data().to_vec();
    for row in centered.chunks_mut(d) {
        row.iter_mut().zip(&state.mu).for_each(|(x, m)| *x -= m);
    }
    let mut c = Tensor::from_parts(vec![n, d], centered).matmul(&state.v)?;
    let k = state.components();
    for row in c.data_mut().chunks_mut(k) {
        row.iter_mut().zip(&state.s).for_each(|(x, s)| *x *= s);
    }
    Ok(CompressedSet { layer: state.layer, c })
}

/// `N x N` cosine-similarity graph of one interim embedding stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub layer: usize,
    pub a: Tensor,
}

pub fn affinity(c: &CompressedSet) -> AffinityMatrix {
    AffinityMatrix {
        layer: c.layer,
        a: cosine_matrix(&c.c),
    }
}

pub(crate) fn cosine_matrix(c: &Tensor) -> Tensor {
    let n = c.rows();
    let norms: Vec<f64> = (0..n).map(|r| l2(c.row(r)) + EPS).collect();
    let mut a = vec![0.0; n * n];
    for v in 0..n {
        for w in v..n {
            let x = dot(c.row(v), c.row(w)) / (norms[v] * norms[w]);
            a[v * n + w] = x;
            a[w * n + v] = x;
        }
    }
    Tensor::from_parts(vec![n, n], a)
}

#[derive(Debug, Clone)]
pub struct SpcaOutput {
    pub compressed: CompressedSet,
    pub affinity: AffinityMatrix,
    pub state: IpcaState,
}

/// Full stacked-PCA pass over one sensing point. The state is only
/// updated when `training` is set.
pub fn run_spca(
    batch: &FeatureMapBatch,
    state: &IpcaState,
    training: bool,
    ema_new_weight: f64,
) -> Result<SpcaOutput> {
    let p = principal_components(batch)?;
    let plane = plane_project(&p)?;
    let state = if training {
        state.update(&plane, ema_new_weight)?
    } else {
        state.clone()
    };
    let compressed = compress(&plane, &state)?;
    let affinity = affinity(&compressed);
    Ok(SpcaOutput {
        compressed,
        affinity,
        state,
    })
}
