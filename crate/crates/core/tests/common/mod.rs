//! Oracles and measurement routines shared by the integration tests and the
//! acceptance runner. Each routine returns what it measured; the caller
//! decides what counts as a pass.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iep_core::autodiff::{Tape, Var};
use iep_core::data::render_synthetic;
use iep_core::gradcheck::check_gradient_sampled;
use iep_core::mpnn::{edge_init_var, message_var, mpnn_forward, mpnn_loss, MpnnParams, SoftmaxAxis};
use iep_core::nets::{depth_adapter, BnMode, ConvNet, ConvNetSpec, BN_EPS};
use iep_core::optim::Sgd;
use iep_core::params::{Bound, GradSet, ParamSet};
use iep_core::spca::{center, stereographic, IpcaState};
use iep_core::train::MpnnTrainer;
use iep_core::transfer::{
    left_vectors, loss_alt, loss_int, student_compress_var, student_pc_with, student_step, teacher_knowledge,
    ClipMode, ClipPolicy, FrozenTeacherFrame, StudentOptions,
};
use iep_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; plenty for test data
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

pub fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

// ---------------------------------------------------------------- PCA oracle

/// Orthonormal basis (columns) of the hyperplane orthogonal to `o`.
pub fn plane_basis(o: &[f64], rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = o.len();
    let mut m = DMatrix::from_fn(d, d, |_, _| gaussian(rng));
    m.set_column(0, &nalgebra::DVector::from_column_slice(o));
    let q = m.qr().q();
    q.columns(1, d - 1).into_owned()
}

/// Top-`k` principal directions of the rows of `x` by eigendecomposition of
/// the sample covariance.
pub fn pca_oracle(x: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let cols: Vec<_> = order[..k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    (DMatrix::from_columns(&cols), values)
}

/// Largest principal angle, in degrees, between two column spaces with
/// orthonormal bases.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = (a.transpose() * b).singular_values();
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    min.acos().to_degrees()
}

pub fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub struct IpcaOracleOutcome {
    pub max_angle_deg: f64,
    pub spectral_gap: f64,
}

/// Plane vectors whose top half of the spectrum sits at least `gap` times
/// above the rest, streamed through IPCA in batches and compared with
/// full-batch PCA.
pub fn ipca_vs_pca(n: usize, d: usize, batch: usize, updates: usize, seed: u64) -> IpcaOracleOutcome {
    let mut rng = rng(seed);
    let k = d / 2;
    let basis = plane_basis(&center(d), &mut rng);
    // standard deviations: strong directions 3.0..4.5, weak ones 0.5..1.0
    let sd: Vec<f64> = (0..d - 1)
        .map(|i| {
            if i < k {
                4.5 - 1.5 * i as f64 / k as f64
            } else {
                1.0 - 0.5 * (i - k) as f64 / (d - 1 - k) as f64
            }
        })
        .collect();
    let offset: Vec<f64> = (0..d - 1).map(|_| 0.3 * gaussian(&mut rng)).collect();
    let mut x = DMatrix::zeros(n, d);
    for r in 0..n {
        let z: Vec<f64> = (0..d - 1).map(|i| offset[i] + sd[i] * gaussian(&mut rng)).collect();
        let row = &basis * nalgebra::DVector::from_vec(z);
        x.set_row(r, &row.transpose());
    }
    let (oracle, eigenvalues) = pca_oracle(&x, k);
    let mut state = IpcaState::new(0, d).unwrap();
    for u in 0..updates {
        let start = (u * batch) % n;
        let rows: Vec<f64> = (0..batch)
            .flat_map(|i| {
                let r = (start + i) % n;
                x.row(r).iter().copied().collect::<Vec<_>>()
            })
            .collect();
        state = state.update(&Tensor::new(&[batch, d], rows).unwrap(), 0.9).unwrap();
    }
    IpcaOracleOutcome {
        max_angle_deg: max_principal_angle(&to_dmatrix(&state.v), &oracle),
        spectral_gap: eigenvalues[k - 1] / eigenvalues[k],
    }
}

// ------------------------------------------------------------ stereographic

pub struct StereoOutcome {
    pub center_err: f64,
    pub perpendicular_err: f64,
    pub max_abs_dot: f64,
}

pub fn stereographic_identities(d: usize, samples: usize, seed: u64) -> StereoOutcome {
    let mut rng = rng(seed);
    let o = center(d);
    let at_center = stereographic(&o, &o).unwrap();
    let center_err = at_center.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    // a unit vector orthogonal to o: e0 − e1 scaled
    let mut p = vec![0.0; d];
    p[0] = std::f64::consts::FRAC_1_SQRT_2;
    p[1] = -std::f64::consts::FRAC_1_SQRT_2;
    let img = stereographic(&p, &o).unwrap();
    let perpendicular_err = img.iter().zip(&p).fold(0.0f64, |m, (a, b)| m.max((a - 2.0 * b).abs()));

    let mut max_abs_dot = 0.0f64;
    let mut drawn = 0;
    while drawn < samples {
        let p = unit_vector(d, &mut rng);
        // the antipode is excluded by contract
        if iep_core::tensor::dot(&p, &o) < -0.99 {
            continue;
        }
        let q = stereographic(&p, &o).unwrap();
        let scale = q.iter().map(|x| x.abs()).fold(1.0f64, f64::max);
        max_abs_dot = max_abs_dot.max(iep_core::tensor::dot(&q, &o).abs() / scale);
        drawn += 1;
    }
    StereoOutcome {
        center_err,
        perpendicular_err,
        max_abs_dot,
    }
}

// ------------------------------------------------------------ gradient suite

pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn probe<'t>(out: Var<'t>, tape: &'t Tape, seed: u64) -> Var<'t> {
    let mut r = rng(seed);
    let w = random_tensor(&out.shape(), &mut r);
    out.mul(tape.constant(w)).sum()
}

fn mpnn_params(layer: usize, in_width: usize, node_width: usize, rounds: usize, seed: u64) -> MpnnParams {
    let mut r = rng(seed);
    let mut p = MpnnParams::init(layer, in_width, node_width, rounds, &mut r).unwrap();
    // move the affine parameters off their exact initial values
    for (name, t) in p.trainable.iter_mut() {
        if name.ends_with("bias") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|x| *x = r.gen_range(-0.3..0.3));
        } else if name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|x| *x = r.gen_range(0.5..1.5));
        }
    }
    p.running_mean = (0..in_width).map(|_| r.gen_range(-0.2..0.2)).collect();
    p.running_var = (0..in_width).map(|_| r.gen_range(0.5..2.0)).collect();
    p
}

fn with_input(p: &ParamSet, name: &str, t: Tensor) -> ParamSet {
    let mut out = p.clone();
    out.insert(name, t);
    out
}

pub const H: f64 = 1e-4;
pub const LAYER_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

fn case(name: &'static str, tolerance: f64, f: impl for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>, p: &ParamSet, per_param: usize) -> GradCase {
    let r = check_gradient_sampled(f, p, H, per_param);
    GradCase {
        name,
        max_rel_error: r.max_rel_error,
        tolerance,
        coordinates: r.coordinates,
    }
}

/// Finite-difference checks of every trainable layer and of the composite
/// student objective. Inputs are checked alongside the weights.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut r = rng(31);

    // linear map + bias of the edge initializer
    let mp = mpnn_params(0, 6, 4, 2, 1);
    let mut lm = ParamSet::new();
    lm.insert("lm.weight", mp.trainable.tensor("lm.weight").clone());
    lm.insert("lm.bias", mp.trainable.tensor("lm.bias").clone());
    lm.insert("x", random_tensor(&[5, 6], &mut r));
    out.push(case(
        "linear map",
        LAYER_TOL,
        |t, b| probe(b.get("x").matmul(b.get("lm.weight")).add_bias(b.get("lm.bias")), t, 2),
        &lm,
        usize::MAX,
    ));

    // batch norm, batch statistics and running statistics
    let mut bn = ParamSet::new();
    bn.insert("gamma", Tensor::new(&[4], vec![1.2, 0.7, -0.4, 1.0]).unwrap());
    bn.insert("beta", Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap());
    bn.insert("x", random_tensor(&[6, 4], &mut r));
    out.push(case(
        "batch norm (batch stats)",
        LAYER_TOL,
        |t, b| probe(b.get("x").batch_norm(b.get("gamma"), b.get("beta"), BN_EPS).0, t, 3),
        &bn,
        usize::MAX,
    ));
    let (rm, rv) = (vec![0.1, -0.3, 0.0, 0.2], vec![0.5, 1.5, 1.0, 2.0]);
    out.push(case(
        "batch norm (running stats)",
        LAYER_TOL,
        move |t, b| probe(b.get("x").batch_norm_fixed(b.get("gamma"), b.get("beta"), &rm, &rv, BN_EPS), t, 4),
        &bn,
        usize::MAX,
    ));
    let mut bn4 = bn.clone();
    bn4.insert("x", random_tensor(&[2, 3, 3, 4], &mut r));
    out.push(case(
        "batch norm (feature maps)",
        LAYER_TOL,
        |t, b| probe(b.get("x").batch_norm(b.get("gamma"), b.get("beta"), BN_EPS).0, t, 5),
        &bn4,
        usize::MAX,
    ));

    // GLU messages
    let mut glu = ParamSet::new();
    glu.insert("glu.weight", mp.trainable.tensor("glu.weight").clone());
    glu.insert("glu.bias", mp.trainable.tensor("glu.bias").clone());
    glu.insert("diffs", random_tensor(&[9, 4], &mut r));
    glu.insert("edges", random_tensor(&[9, 6], &mut r));
    out.push(case(
        "GLU message",
        LAYER_TOL,
        |t, b| probe(message_var(b, b.get("diffs"), b.get("edges"), 6), t, 6),
        &glu,
        usize::MAX,
    ));

    // edge initializer end to end (LM -> BN -> normalize -> hadamard)
    let c = random_tensor(&[4, 6], &mut r);
    for (training, seed) in [(true, 7), (false, 8)] {
        let p = with_input(&mp.trainable, "c", c.clone());
        let mp = mp.clone();
        out.push(case(
            if training { "edge init (training)" } else { "edge init (inference)" },
            LAYER_TOL,
            move |t, b| probe(edge_init_var(&mp, b, b.get("c"), training).edges, t, seed),
            &p,
            usize::MAX,
        ));
    }

    // full message-passing net under its relation loss
    let mut pair = mp.trainable.clone();
    pair.insert("c_l", random_tensor(&[5, 6], &mut r));
    pair.insert("c_next", random_tensor(&[5, 4], &mut r));
    let target = random_tensor(&[5, 5], &mut r);
    let mp2 = mp.clone();
    out.push(case(
        "mpnn forward + relation loss",
        LAYER_TOL,
        move |t, b| {
            let f = mpnn_forward(&mp2, b, b.get("c_l"), b.get("c_next"), true).unwrap();
            mpnn_loss(&[t.constant(target.clone())], &[f.a_tilde], SoftmaxAxis::Row)
        },
        &pair,
        usize::MAX,
    ));

    // convolution, with stride and padding
    let mut conv = ParamSet::new();
    conv.insert("w", random_tensor(&[3, 3, 3, 4], &mut r));
    conv.insert("x", random_tensor(&[2, 5, 5, 3], &mut r));
    for (stride, seed, name) in [(1, 9, "conv 3x3 stride 1"), (2, 10, "conv 3x3 stride 2")] {
        out.push(case(
            name,
            LAYER_TOL,
            move |t, b| probe(b.get("x").conv2d(b.get("w"), stride, 1), t, seed),
            &conv,
            usize::MAX,
        ));
    }

    // depth adapter (1x1 conv)
    let mut adapter = ParamSet::new();
    adapter.insert("adapter0.weight", random_tensor(&[1, 1, 4, 6], &mut r));
    adapter.insert("x", random_tensor(&[2, 3, 3, 4], &mut r));
    out.push(case(
        "depth adapter",
        LAYER_TOL,
        |t, b| probe(depth_adapter(b.get("x"), b.get("adapter0.weight")), t, 11),
        &adapter,
        usize::MAX,
    ));

    out.push(composite_student_case());
    out
}

/// A small teacher frame fitted for a few steps, plus a student with
/// adapters, on a fixed batch.
pub struct Fixture {
    pub frame: FrozenTeacherFrame,
    pub student: ConvNet,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

pub fn fixture(n: usize, teacher_widths: &[usize], student_widths: &[usize], seed: u64) -> Fixture {
    let data = render_synthetic(n, 4, seed).unwrap();
    let mut r = rng(seed);
    let teacher = ConvNet::init(ConvNetSpec::new(teacher_widths.to_vec(), 1, 4).unwrap(), &mut r).unwrap();
    let (_, maps) = teacher.forward_sensed(&data.images, BnMode::Batch).unwrap();
    let mut trainer = MpnnTrainer::new(teacher_widths, 2, Sgd::new(0.9, true, 5e-4), 0.9, SoftmaxAxis::Row, seed).unwrap();
    for _ in 0..3 {
        trainer.step(&maps, 0.1).unwrap();
    }
    let frame = FrozenTeacherFrame::new(teacher, trainer.ipca, trainer.mpnn).unwrap();
    let mut student = ConvNet::init(ConvNetSpec::new(student_widths.to_vec(), 1, 4).unwrap(), &mut r).unwrap();
    student.attach_adapters(&frame.depths(), &mut r).unwrap();
    Fixture {
        frame,
        student,
        images: data.images,
        labels: data.labels,
    }
}

/// Target + K^int + K^alt losses of the student as one scalar, with the
/// stop-gradient projection vectors held at their base-point values.
fn composite_student_case() -> GradCase {
    let mut fx = fixture(6, &[4, 6], &[2, 4], 3);
    // Central differences are only meaningful where the loss is smooth over
    // ±h. At a raw initialization some ReLU input always sits within reach
    // of the step, so the check runs where BN shifts keep them clear.
    for (name, t) in fx.student.params.iter_mut() {
        if name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|b| *b = 4.0);
        }
    }
    let k_t = teacher_knowledge(&fx.frame, &fx.images).unwrap();
    let base_u: Vec<Tensor> = {
        let tape = Tape::new();
        let bound = fx.student.params.bind_frozen(&tape);
        let out = fx.student.forward(&bound, tape.constant(fx.images.clone()), BnMode::Train).unwrap();
        out.features
            .iter()
            .enumerate()
            .map(|(l, f)| {
                let f = depth_adapter(*f, bound.get(&format!("adapter{l}.weight")));
                let s = f.shape();
                left_vectors(&f.reshape(&[s[0], s[1] * s[2], s[3]]).value()).unwrap()
            })
            .collect()
    };
    let ctx = CompositeCtx {
        student: fx.student.clone(),
        frame: fx.frame,
        images: fx.images,
        labels: fx.labels,
        k_t,
        base_u,
    };
    case("composite student loss", COMPOSITE_TOL, |t, b| composite_loss(t, b, &ctx), &fx.student.params, 24)
}

struct CompositeCtx {
    student: ConvNet,
    frame: FrozenTeacherFrame,
    images: Tensor,
    labels: Vec<usize>,
    k_t: iep_core::mpnn::KnowledgeBundle,
    base_u: Vec<Tensor>,
}

fn composite_loss<'t>(tape: &'t Tape, b: &Bound<'t>, ctx: &CompositeCtx) -> Var<'t> {
    let out = ctx.student.forward(b, tape.constant(ctx.images.clone()), BnMode::Train).unwrap();
    let mut cs = Vec::new();
    for (l, feat) in out.features.iter().enumerate() {
        let m = depth_adapter(*feat, b.get(&format!("adapter{l}.weight")));
        let s = m.shape();
        let p = student_pc_with(m.reshape(&[s[0], s[1] * s[2], s[3]]), ctx.base_u[l].clone());
        cs.push(student_compress_var(p, &ctx.frame.ipca[l], false).unwrap());
    }
    let mut k_int = Vec::new();
    let mut k_alt = Vec::new();
    for (l, params) in ctx.frame.mpnn.iter().enumerate() {
        let frozen = params.trainable.bind_frozen(tape);
        let fw = mpnn_forward(params, &frozen, cs[l], cs[l + 1], false).unwrap();
        k_int.push(fw.a_tilde);
        k_alt.extend(fw.messages);
    }
    out.logits
        .cross_entropy(&ctx.labels)
        .add(loss_int(&k_int, &ctx.k_t.k_int, SoftmaxAxis::Row))
        .add(loss_alt(&k_alt, &ctx.k_t.k_alt))
}

// ------------------------------------------------------------ clip contract

pub fn random_gradset(rng: &mut ChaCha8Rng, names: &[&str], scale: f64) -> GradSet {
    let mut g = GradSet::new();
    for (i, name) in names.iter().enumerate() {
        let n = 1 + (i * 3 + 2) % 7;
        g.insert(*name, Tensor::vector((0..n).map(|_| scale * gaussian(rng)).collect()).unwrap());
    }
    g
}

fn flat_norm(g: &GradSet) -> f64 {
    g.iter().flat_map(|(_, t)| t.data().to_vec()).map(|x| x * x).sum::<f64>().sqrt()
}

pub struct ClipOutcome {
    pub trials: usize,
    /// Largest `‖clip(z)‖ − ‖g_target‖` seen in the default mode.
    pub worst_excess: f64,
    /// Default mode: clipped gradient is `k·z`, `k ≥ 0`, reconstructed exactly.
    pub direction_preserved: bool,
    /// Literal mode: applied factor equals `max(1, ‖g_t‖/‖z‖)` to 1e-12 relative.
    pub literal_exact: bool,
}

pub fn clip_contract(trials: usize, seed: u64) -> ClipOutcome {
    let mut rng = rng(seed);
    let names = ["a.weight", "a.bias", "b.weight", "c"];
    let default = ClipPolicy::default();
    let literal = ClipPolicy::new(ClipMode::PaperLiteralMax, 1e-12).unwrap();
    let mut out = ClipOutcome {
        trials,
        worst_excess: f64::NEG_INFINITY,
        direction_preserved: true,
        literal_exact: true,
    };
    for t in 0..trials {
        let log_scale = |rng: &mut ChaCha8Rng| 10f64.powf(rng.gen_range(-6.0..6.0));
        let (st, sz) = (log_scale(&mut rng), log_scale(&mut rng));
        let g_t = random_gradset(&mut rng, &names, st);
        // every tenth trial clips a zero gradient; some sets cover only part of the names
        let z = if t % 10 == 0 {
            random_gradset(&mut rng, &names, 0.0)
        } else {
            random_gradset(&mut rng, &names[..1 + t % names.len()], sz)
        };
        let empty = GradSet::new();

        let (total, norms) = iep_core::transfer::clip_combine(&g_t, &z, &empty, &default);
        out.worst_excess = out.worst_excess.max(norms.int_post - norms.target);
        let k = default.factor(g_t.norm(), z.norm());
        let expected = g_t.add(&z.scaled(k));
        let same = total
            .iter()
            .all(|(name, t)| expected.get(name).is_some_and(|e| e.data() == t.data()));
        if !(k >= 0.0 && k <= 1.0 && same) {
            out.direction_preserved = false;
        }

        let (_, lit) = iep_core::transfer::clip_combine(&g_t, &z, &empty, &literal);
        let (tn, zn) = (flat_norm(&g_t), flat_norm(&z));
        let want = if zn == 0.0 { 1.0 } else { (tn / zn).max(1.0) };
        let applied = literal.factor(lit.target, lit.int_pre);
        if (applied - want).abs() > 1e-12 * want || (zn > 0.0 && (lit.int_post / lit.int_pre - want).abs() > 1e-12 * want) {
            out.literal_exact = false;
        }
    }
    out
}

// ------------------------------------------------------- self-distillation

/// Knowledge losses at step 0 when the student is an exact copy of the teacher.
pub fn self_distillation_losses() -> (f64, f64) {
    let widths = [8, 12, 16];
    let fx = fixture(12, &widths, &widths, 5);
    let mut student = fx.frame.teacher.clone();
    let mut r = rng(0);
    student.attach_adapters(&fx.frame.depths(), &mut r).unwrap();
    let mut opt = Sgd::new(0.9, true, 5e-4);
    let report = student_step(
        0,
        &fx.images,
        &fx.labels,
        &mut student,
        &fx.frame,
        &StudentOptions::default(),
        &mut opt,
        0.1,
    )
    .unwrap();
    (report.l_int, report.l_alt)
}
