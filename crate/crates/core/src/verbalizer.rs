//! Label mapping from the `[MASK]` state: the prototypical verbalizer and
//! the MLP heads it is compared against.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// `u = h W + b`.
pub fn project(g: &mut Graph, h: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let (hd, (wd, t), bt) = (g.value(h).cols(), g.value(weight).dims2(), g.value(bias).numel());
    if hd != wd || bt != t {
        return Err(Error::shape(
            "project",
            format!("h has {hd} columns, weight is {wd}x{t}, bias has {bt}"),
        ));
    }
    g.affine(h, weight, bias)
}

/// Plain dot products `u c_k` for every prototype row.
pub fn similarity(g: &mut Graph, u: NodeId, prototypes: NodeId) -> Result<NodeId> {
    let (ut, pt) = (g.value(u).cols(), g.value(prototypes).cols());
    if ut != pt {
        return Err(Error::shape(
            "similarity",
            format!("u has {ut} columns, prototypes have {pt}"),
        ));
    }
    let ct = g.transpose(prototypes)?;
    g.matmul(u, ct)
}

/// Batch mean of `-log softmax(u C^T)[label]`.
pub fn vptm_loss(g: &mut Graph, u: NodeId, labels: &[usize], prototypes: NodeId) -> Result<NodeId> {
    let nc = g.value(prototypes).rows();
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= nc) {
        return Err(Error::invalid(format!("label {bad} outside {nc} classes")));
    }
    let logits = similarity(g, u, prototypes)?;
    g.cross_entropy(logits, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerbalizerOutput {
    pub u: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl VerbalizerOutput {
    pub fn from_u(u: &[f64], prototypes: &Tensor) -> Result<Self> {
        if prototypes.cols() != u.len() {
            return Err(Error::shape(
                "similarity",
                format!("u has {} entries, prototypes have {} columns", u.len(), prototypes.cols()),
            ));
        }
        let logits: Vec<f64> = (0..prototypes.rows())
            .map(|k| prototypes.row(k).iter().zip(u).map(|(a, b)| a * b).sum())
            .collect();
        Ok(VerbalizerOutput {
            u: u.to_vec(),
            probabilities: softmax(&logits),
            logits,
        })
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Hidden width of the two-layer head.
pub use crate::vit::MLP2_HIDDEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlpVariant {
    One,
    Two,
}

/// MLP-1: one affine map to class logits. MLP-2: affine to
/// [`MLP2_HIDDEN`] units, GELU, affine to class logits. `weights` are
/// `(w1, b1)` or `(w1, b1, w2, b2)` in that order.
pub fn mlp_head(g: &mut Graph, h: NodeId, variant: MlpVariant, weights: &[NodeId]) -> Result<NodeId> {
    match (variant, weights) {
        (MlpVariant::One, &[w, b]) => project(g, h, w, b),
        (MlpVariant::Two, &[w1, b1, w2, b2]) => {
            let z = project(g, h, w1, b1)?;
            let z = g.gelu(z)?;
            project(g, z, w2, b2)
        }
        _ => Err(Error::shape(
            "mlp_head",
            format!("{} weight tensors for {variant:?}", weights.len()),
        )),
    }
}

/// Head selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Pv,
    Mlp1,
    Mlp2,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Pv => "pv",
            HeadKind::Mlp1 => "mlp1",
            HeadKind::Mlp2 => "mlp2",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pv" => Ok(HeadKind::Pv),
            "mlp1" => Ok(HeadKind::Mlp1),
            "mlp2" => Ok(HeadKind::Mlp2),
            other => Err(Error::invalid(format!("unknown head `{other}` (pv, mlp1, mlp2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Proto,
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub kind: RowKind,
    pub class: usize,
    pub values: Vec<f64>,
}

/// `kind,class,v0..v{t-1}` with a header line; prototypes first.
pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let t = rows.first().map(|r| r.values.len()).unwrap_or(0);
    write!(f, "kind,class")?;
    for i in 0..t {
        write!(f, ",v{i}")?;
    }
    writeln!(f)?;
    for r in rows {
        let kind = match r.kind {
            RowKind::Proto => "proto",
            RowKind::Sample => "sample",
        };
        write!(f, "{kind},{}", r.class)?;
        for v in &r.values {
            write!(f, ",{v:e}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::invalid(format!("line {}: {what}", n + 1));
        let mut fields = line.split(',');
        let kind = match fields.next() {
            Some("proto") => RowKind::Proto,
            Some("sample") => RowKind::Sample,
            _ => return Err(bad("row kind must be proto or sample")),
        };
        let class = fields
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("bad class id"))?;
        let values = fields
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow { kind, class, values });
    }
    Ok(rows)
}
