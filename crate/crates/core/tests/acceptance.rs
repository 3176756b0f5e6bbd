//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. The toy distillation (criteria 7, 8, 10) trains real
//! networks and takes a while on one core.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use iep_core::checkpoint::Checkpoint;
use iep_core::config::TrainConfig;
use iep_core::data::{render_synthetic, DatasetHandle};
use iep_core::mpnn::SoftmaxAxis;
use iep_core::nets::{BnMode, ConvNet, ConvNetSpec};
use iep_core::optim::Sgd;
use iep_core::train::{accuracy, evaluate, train_mpnn, train_student, train_teacher, MpnnTrainer};
use iep_core::viz::{class_separation, parse_csv, viz_records, write_records};

use common::*;

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

impl Line {
    fn print(&self) {
        println!(
            "criterion {:>2} {:<34} {}  {} [{:.1}s]",
            self.id,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.detail,
            self.elapsed.as_secs_f64()
        );
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

// ------------------------------------------------------------------ 1 - 6

fn criterion_1() -> Line {
    let (out, elapsed) = timed(|| ipca_vs_pca(256, 32, 64, 50, 1));
    Line {
        id: 1,
        name: "SPCA oracle equivalence",
        pass: out.spectral_gap >= 2.0 && out.max_angle_deg < 5.0 && elapsed < Duration::from_secs(10),
        detail: format!(
            "max principal angle {:.4}° (< 5°), spectral gap {:.2}x",
            out.max_angle_deg, out.spectral_gap
        ),
        elapsed,
    }
}

fn criterion_2() -> Line {
    let (out, elapsed) = timed(|| stereographic_identities(32, 10_000, 2));
    Line {
        id: 2,
        name: "stereographic identities",
        pass: out.center_err <= 1e-12
            && out.perpendicular_err <= 1e-12
            && out.max_abs_dot <= 1e-9
            && elapsed < Duration::from_secs(1),
        detail: format!(
            "p=o err {:.1e}, p⟂o err {:.1e}, max |p̄·o| {:.1e} over 1e4",
            out.center_err, out.perpendicular_err, out.max_abs_dot
        ),
        elapsed,
    }
}

fn criterion_3() -> Line {
    let (cases, elapsed) = timed(gradient_suite);
    let failed: Vec<_> = cases.iter().filter(|c| !(c.max_rel_error < c.tolerance)).map(|c| c.name).collect();
    let worst_layer = cases.iter().filter(|c| c.tolerance == LAYER_TOL).map(|c| c.max_rel_error).fold(0.0, f64::max);
    let composite = cases.iter().find(|c| c.tolerance == COMPOSITE_TOL).map_or(f64::NAN, |c| c.max_rel_error);
    Line {
        id: 3,
        name: "gradient suite",
        pass: failed.is_empty() && elapsed < Duration::from_secs(60),
        detail: format!(
            "{} cases, worst layer {worst_layer:.1e} (< 1e-4), composite {composite:.1e} (< 1e-3), h {H:.0e}{}",
            cases.len(),
            if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }
        ),
        elapsed,
    }
}

struct MpnnRun {
    initial: f64,
    final_loss: f64,
    crossed_at: Option<usize>,
    bytes: Vec<u8>,
}

/// Appendix optimizer settings on one fixed batch of teacher feature maps.
fn mpnn_fixed_batch() -> MpnnRun {
    let cfg = TrainConfig::default();
    let spec = ConvNetSpec::new(cfg.teacher.widths.clone(), cfg.teacher.blocks, 4).unwrap();
    let teacher = ConvNet::init(spec, &mut rng(40)).unwrap();
    let batch = render_synthetic(32, 4, 41).unwrap();
    let (_, maps) = teacher.forward_sensed(&batch.images, BnMode::Batch).unwrap();
    let opt = Sgd::new(0.9, true, 5e-4);
    let mut trainer = MpnnTrainer::new(&teacher.spec.widths, 2, opt, 0.9, SoftmaxAxis::Row, 42).unwrap();
    let mut initial = f64::NAN;
    let mut crossed_at = None;
    let mut last = f64::NAN;
    for step in 1..=2000 {
        let loss = trainer.step(&maps, 0.1).unwrap();
        if step == 1 {
            initial = loss;
        }
        if crossed_at.is_none() && loss < 0.1 * initial {
            crossed_at = Some(step);
        }
        last = loss;
    }
    let mut ck = Checkpoint::new();
    for (l, s) in trainer.ipca.iter().enumerate() {
        ck.put_ipca(s);
        if let Some(m) = trainer.mpnn.get(l) {
            ck.put_mpnn(m);
            ck.put_optimizer(&format!("opt{l}."), &trainer.optimizers[l]);
        }
    }
    MpnnRun {
        initial,
        final_loss: last,
        crossed_at,
        bytes: ck.to_bytes(),
    }
}

fn criterion_4(run: &MpnnRun, elapsed: Duration) -> Line {
    Line {
        id: 4,
        name: "MPNN convergence",
        pass: run.crossed_at.is_some() && elapsed < Duration::from_secs(300),
        detail: format!(
            "loss {:.4e} -> {:.4e}; below 10% at step {} of 2000 (lr 0.1, m 0.9 nesterov, wd 5e-4, I=2)",
            run.initial,
            run.final_loss,
            run.crossed_at.map_or("never".into(), |s| s.to_string())
        ),
        elapsed,
    }
}

fn criterion_5() -> Line {
    let (out, elapsed) = timed(|| clip_contract(1000, 5));
    Line {
        id: 5,
        name: "clip contract",
        pass: out.worst_excess <= 1e-9 && out.direction_preserved && out.literal_exact && elapsed < Duration::from_secs(1),
        detail: format!(
            "{} sets; max ‖clip(z)‖−‖g_t‖ = {:.1e}; direction kept: {}; literal factor exact: {}",
            out.trials, out.worst_excess, out.direction_preserved, out.literal_exact
        ),
        elapsed,
    }
}

fn criterion_6() -> Line {
    let ((l_int, l_alt), elapsed) = timed(self_distillation_losses);
    Line {
        id: 6,
        name: "self-distillation zero loss",
        pass: l_int < 1e-8 && l_alt < 1e-8 && elapsed < Duration::from_secs(10),
        detail: format!("step-0 l_int {l_int:.1e}, l_alt {l_alt:.1e} (< 1e-8)"),
        elapsed,
    }
}

// ------------------------------------------------------------------ 7 - 10

const SEEDS: [u64; 3] = [0, 1, 2];
const STUDENT_RATE: f64 = 0.25;

/// Desk-scale settings shared by every phase of the toy run.
fn toy_config(out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_overrides(&[
        "batch_size = 32",
        "data.count = 2000",
        "data.classes = 4",
        "lr.decay_interpretation = multiply_0.2",
        "teacher.iterations = 1200",
        "mpnn.iterations = 300",
        "student.iterations = 600",
        "eval_every = 200",
        "checkpoint_every = 0",
    ])
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    Plain,
    Both,
    IntOnly,
    AltOnly,
}

impl Variant {
    fn toggles(self) -> (bool, bool) {
        match self {
            Variant::Plain => (false, false),
            Variant::Both => (true, true),
            Variant::IntOnly => (true, false),
            Variant::AltOnly => (false, true),
        }
    }
}

fn student_config(root: &Path, seed: u64, v: Variant) -> TrainConfig {
    let mut cfg = toy_config(&root.join(format!("student_{v:?}_{seed}")));
    cfg.seed = seed;
    cfg.sample_rate = STUDENT_RATE;
    (cfg.enable_k_int, cfg.enable_k_alt) = v.toggles();
    cfg
}

struct Toy {
    teacher: Checkpoint,
    frame: Checkpoint,
    full: DatasetHandle,
    accuracy: BTreeMap<(Variant, u64), f64>,
    bytes: BTreeMap<String, Vec<u8>>,
    teacher_train_acc: f64,
    teacher_test_acc: f64,
}

fn run_student(root: &Path, seed: u64, v: Variant, frame: &Checkpoint) -> (f64, Vec<u8>) {
    let cfg = student_config(root, seed, v);
    let data = DatasetHandle::from_config(&cfg).unwrap();
    let ck = train_student(&cfg, &data, frame).unwrap();
    (evaluate(&ck, &data).unwrap(), ck.to_bytes())
}

/// Teacher and frame on the full training split; students on the sampled
/// subset, three seeds with and without knowledge, plus the single-knowledge
/// ablations on the first seed.
fn toy_distillation(root: &Path) -> Toy {
    let cfg = toy_config(&root.join("teacher"));
    let full = DatasetHandle::from_config(&cfg).unwrap();
    let teacher = train_teacher(&cfg, &full).unwrap();
    let net = teacher.net("net.").unwrap();
    let teacher_train_acc = accuracy(&net, &full.train).unwrap();
    let teacher_test_acc = accuracy(&net, &full.test).unwrap();
    let frame = train_mpnn(&cfg, &full, &teacher).unwrap();

    let mut bytes = BTreeMap::new();
    bytes.insert("teacher".to_string(), teacher.to_bytes());
    bytes.insert("frame".to_string(), frame.to_bytes());
    let mut acc = BTreeMap::new();
    let mut jobs: Vec<(u64, Variant)> = SEEDS.iter().flat_map(|&s| [(s, Variant::Plain), (s, Variant::Both)]).collect();
    jobs.extend([(SEEDS[0], Variant::IntOnly), (SEEDS[0], Variant::AltOnly)]);
    for (seed, v) in jobs {
        let (a, b) = run_student(root, seed, v, &frame);
        println!("    student seed {seed} {v:?}: test accuracy {a:.4}");
        acc.insert((v, seed), a);
        bytes.insert(format!("student_{v:?}_{seed}"), b);
    }
    Toy {
        teacher,
        frame,
        full,
        accuracy: acc,
        bytes,
        teacher_train_acc,
        teacher_test_acc,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7(toy: &Toy, elapsed: Duration) -> Line {
    let plain = mean(SEEDS.iter().map(|s| toy.accuracy[&(Variant::Plain, *s)]));
    let iep = mean(SEEDS.iter().map(|s| toy.accuracy[&(Variant::Both, *s)]));
    Line {
        id: 7,
        name: "end-to-end toy distillation",
        pass: iep >= plain - 0.005 && elapsed < Duration::from_secs(20 * 60),
        detail: format!(
            "rate {STUDENT_RATE}: plain {:.2}% vs IEP {:.2}% over 3 seeds, mean improvement {:+.2} pts (floor -0.5)",
            100.0 * plain,
            100.0 * iep,
            100.0 * (iep - plain)
        ),
        elapsed,
    }
}

fn criterion_8(toy: &Toy, elapsed: Duration) -> Line {
    let s = SEEDS[0];
    let row = |v: Variant| toy.accuracy[&(v, s)];
    let (int, alt, both) = (row(Variant::IntOnly), row(Variant::AltOnly), row(Variant::Both));
    println!("    ablation (seed {s}, sample rate {STUDENT_RATE})");
    println!("    | knowledge       | test accuracy |");
    println!("    |-----------------|---------------|");
    println!("    | none            | {:>12.2}% |", 100.0 * row(Variant::Plain));
    println!("    | K^int only      | {:>12.2}% |", 100.0 * int);
    println!("    | K^alt only      | {:>12.2}% |", 100.0 * alt);
    println!("    | K^int + K^alt   | {:>12.2}% |", 100.0 * both);
    Line {
        id: 8,
        name: "ablation structure",
        pass: [int, alt, both].iter().all(|a| a.is_finite()) && elapsed < Duration::from_secs(20 * 60),
        detail: format!(
            "3-row table produced; both >= each alone: {} (reported, not asserted)",
            both >= int && both >= alt
        ),
        elapsed,
    }
}

fn criterion_9(toy: &Toy, root: &Path) -> Line {
    let t = Instant::now();
    let frame = toy.frame.frame().unwrap();
    let test = &toy.full.test;
    let records = viz_records(&frame, &test.images, false).unwrap();
    let last = records.last().unwrap();
    let (within, cross) = class_separation(&last.a, &test.labels);
    let dir = root.join("viz");
    let files = write_records(&records, &dir).unwrap();
    let mut exact = true;
    for r in &records {
        let (n, layer, a) = parse_csv(&std::fs::read_to_string(dir.join(format!("affinity_l{}.csv", r.layer))).unwrap()).unwrap();
        exact &= n == test.len() && layer == r.layer && bits_equal(&a, &r.a);
        let (_, _, c) = parse_csv(&std::fs::read_to_string(dir.join(format!("cvis_l{}.csv", r.layer))).unwrap()).unwrap();
        exact &= bits_equal(&c, &r.c_vis);
        if let Some(k) = &r.k_alt {
            let (_, _, back) = parse_csv(&std::fs::read_to_string(dir.join(format!("kalt_l{}.csv", r.layer))).unwrap()).unwrap();
            exact &= bits_equal(&back, k);
        }
    }
    let elapsed = t.elapsed();
    Line {
        id: 9,
        name: "visualization property",
        pass: within > cross && exact && files.len() == 3 * records.len() - 1 && elapsed < Duration::from_secs(60),
        detail: format!(
            "last point on {} test images: within-class A {within:.4} vs cross-class {cross:.4}; {} files round-trip bit-exact: {exact}",
            test.len(),
            files.len()
        ),
        elapsed,
    }
}

fn bits_equal(a: &iep_core::Tensor, b: &iep_core::Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Replays the MPNN run and the toy chain for every plain student and the
/// first knowledge student, comparing checkpoint bytes.
fn criterion_10(mpnn_first: &MpnnRun, toy: &Toy, root: &Path) -> Line {
    let t = Instant::now();
    let mut mismatched = Vec::new();
    if mpnn_fixed_batch().bytes != mpnn_first.bytes {
        mismatched.push("mpnn fixed batch".to_string());
    }
    let cfg = toy_config(&root.join("teacher"));
    let teacher = train_teacher(&cfg, &toy.full).unwrap();
    let frame = train_mpnn(&cfg, &toy.full, &teacher).unwrap();
    let mut compared = vec![("teacher".to_string(), teacher.to_bytes()), ("frame".to_string(), frame.to_bytes())];
    let replays: Vec<(u64, Variant)> = SEEDS.iter().map(|&s| (s, Variant::Plain)).chain([(SEEDS[0], Variant::Both)]).collect();
    for (seed, v) in replays {
        let (_, b) = run_student(root, seed, v, &frame);
        compared.push((format!("student_{v:?}_{seed}"), b));
    }
    for (name, b) in &compared {
        if toy.bytes.get(name) != Some(b) {
            mismatched.push(name.clone());
        }
    }
    // the files on disk are the ones just compared
    let on_disk = std::fs::read(root.join("teacher").join("teacher.iepk")).unwrap();
    if on_disk != toy.teacher.to_bytes() {
        mismatched.push("teacher.iepk on disk".into());
    }
    Line {
        id: 10,
        name: "determinism",
        pass: mismatched.is_empty(),
        detail: format!(
            "{} checkpoints replayed (mpnn run, teacher, frame, {} students): {}",
            compared.len() + 1,
            compared.len() - 2,
            if mismatched.is_empty() { "all bit-identical".to_string() } else { format!("differ: {mismatched:?}") }
        ),
        elapsed: t.elapsed(),
    }
}

fn main() {
    let work = tempfile::tempdir().expect("scratch directory");
    let root: PathBuf = work.path().to_path_buf();
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut emit = |l: Line| {
        l.print();
        lines.push(l.pass);
    };

    emit(criterion_1());
    emit(criterion_2());
    emit(criterion_3());
    let (mpnn_run, mpnn_time) = timed(mpnn_fixed_batch);
    emit(criterion_4(&mpnn_run, mpnn_time));
    emit(criterion_5());
    emit(criterion_6());

    let (toy, toy_time) = timed(|| toy_distillation(&root));
    println!(
        "    teacher: train accuracy {:.4}, test accuracy {:.4}",
        toy.teacher_train_acc, toy.teacher_test_acc
    );
    emit(criterion_7(&toy, toy_time));
    emit(criterion_8(&toy, toy_time));
    emit(criterion_9(&toy, &root));
    emit(criterion_10(&mpnn_run, &toy, &root));

    let passed = lines.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1} min",
        lines.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    if passed != lines.len() {
        std::process::exit(1);
    }
}
