//! Plain-text exports of affinity matrices, message summaries and 3-D
//! display coordinates for external plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::mpnn::extract_knowledge;
use crate::nets::BnMode;
use crate::spca::{self, affinity, compress};
use crate::tensor::Tensor;
use crate::transfer::FrozenTeacherFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct VizRecord {
    pub layer: usize,
    /// `N x N` affinity matrix of this sensing point.
    pub a: Tensor,
    /// `N x N` mean message over rounds and edge components, for the pair
    /// starting at this point (absent for the last point).
    pub k_alt: Option<Tensor>,
    /// `N x 3` normalized top-3 compressed components.
    pub c_vis: Tensor,
}

/// Top three components of each row, scaled to unit length. With `literal`
/// the row is divided by the square root of the plain component sum when
/// that sum is positive (falling back to the unit-length form otherwise).
pub fn c_vis(c: &Tensor, literal: bool) -> Tensor {
    let k = c.cols().min(3);
    let mut out = Vec::with_capacity(c.rows() * 3);
    for r in 0..c.rows() {
        let mut top = [0.0; 3];
        top[..k].copy_from_slice(&c.row(r)[..k]);
        let sum: f64 = top.iter().sum();
        let denom = if literal && sum > 0.0 {
            sum.sqrt()
        } else {
            top.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let denom = if denom > 0.0 { denom } else { 1.0 };
        out.extend(top.iter().map(|x| x / denom));
    }
    Tensor::from_parts(vec![c.rows(), 3], out)
}

/// Mean over the `(L−1)·I` messages of one pair and their edge components.
fn k_alt_summary(messages: &[Tensor], n: usize) -> Tensor {
    let mut out = vec![0.0; n * n];
    for m in messages {
        let e = m.len() / (n * n);
        for (i, chunk) in m.data().chunks(e).enumerate() {
            out[i] += chunk.iter().sum::<f64>() / (e * messages.len()) as f64;
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

/// Records for every sensing point of the frame's teacher on `images`.
pub fn viz_records(frame: &FrozenTeacherFrame, images: &Tensor, cvis_literal: bool) -> Result<Vec<VizRecord>> {
    let (_, maps) = frame.teacher.forward_sensed(images, BnMode::Batch)?;
    let tape = Tape::new();
    let mut compressed = Vec::with_capacity(maps.len());
    for (m, state) in maps.iter().zip(&frame.ipca) {
        let plane = spca::plane_project(&spca::principal_components(m)?)?;
        compressed.push(compress(&plane, state)?);
    }
    let cs: Vec<_> = compressed.iter().map(|c| tape.constant(c.c.clone())).collect();
    let mut forwards = Vec::with_capacity(frame.mpnn.len());
    for (l, p) in frame.mpnn.iter().enumerate() {
        let bound = p.trainable.bind_frozen(&tape);
        forwards.push(crate::mpnn::mpnn_forward(p, &bound, cs[l], cs[l + 1], false)?);
    }
    let n = images.shape()[0];
    let mut records = Vec::with_capacity(maps.len());
    for (l, c) in compressed.iter().enumerate() {
        let k_alt = forwards.get(l).map(|f| {
            let bundle = extract_knowledge(std::slice::from_ref(f));
            k_alt_summary(&bundle.k_alt, n)
        });
        records.push(VizRecord {
            layer: l,
            a: affinity(c).a,
            k_alt,
            c_vis: c_vis(&c.c, cvis_literal),
        });
    }
    Ok(records)
}

/// Comma-separated rows under a `# N=..,layer=..` header; 17 significant
/// digits so every value parses back to the same bits.
pub fn to_csv(m: &Tensor, n: usize, layer: usize) -> String {
    let mut s = format!("# N={n},layer={layer}\n");
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

/// Inverse of [`to_csv`]: `(N, layer, matrix)`.
pub fn parse_csv(text: &str) -> Result<(usize, usize, Tensor)> {
    let bad = |m: &str| Error::Shape(format!("viz csv: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let fields = header.strip_prefix("# ").ok_or_else(|| bad("missing header"))?;
    let mut n = None;
    let mut layer = None;
    for kv in fields.split(',') {
        match kv.split_once('=') {
            Some(("N", v)) => n = v.parse().ok(),
            Some(("layer", v)) => layer = v.parse().ok(),
            _ => return Err(bad("unexpected header field")),
        }
    }
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|x| x.parse::<f64>().map_err(|_| bad("bad number"))).collect())
        .collect::<Result<_>>()?;
    let m = Tensor::from_rows(&rows)?;
    Ok((n.ok_or_else(|| bad("no N"))?, layer.ok_or_else(|| bad("no layer"))?, m))
}

/// Writes `affinity_l{l}.csv`, `kalt_l{l}.csv` and `cvis_l{l}.csv`.
pub fn write_records(records: &[VizRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let unwritable = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Unwritable { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(unwritable(out_dir))?;
    let mut files = Vec::new();
    for r in records {
        let n = r.a.rows();
        let mut outputs = vec![(format!("affinity_l{}.csv", r.layer), &r.a)];
        if let Some(k) = &r.k_alt {
            outputs.push((format!("kalt_l{}.csv", r.layer), k));
        }
        outputs.push((format!("cvis_l{}.csv", r.layer), &r.c_vis));
        for (name, m) in outputs {
            let path = out_dir.join(name);
            std::fs::write(&path, to_csv(m, n, r.layer)).map_err(unwritable(&path))?;
            files.push(path);
        }
    }
    Ok(files)
}

/// Mean off-diagonal affinity between same-label and different-label pairs.
pub fn class_separation(a: &Tensor, labels: &[usize]) -> (f64, f64) {
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for v in 0..labels.len() {
        for w in 0..labels.len() {
            if v == w {
                continue;
            }
            if labels[v] == labels[w] {
                within += a.at(v, w);
                nw += 1;
            } else {
                cross += a.at(v, w);
                nc += 1;
            }
        }
    }
    (within / nw.max(1) as f64, cross / nc.max(1) as f64)
}
