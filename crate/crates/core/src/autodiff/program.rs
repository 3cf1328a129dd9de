//! Name-addressed op sequences evaluated onto a [`Graph`].
//!
//! Lets a forward pass be described as data (for gradient sweeps over the
//! whole op catalogue, or for tools driving the engine from outside Rust).

use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Instr {
    MatMul(String, String),
    Add(String, String),
    Mul(String, String),
    Scale(String, f64),
    Transpose(String),
    Reshape(String, Vec<usize>),
    ConcatRows(Vec<String>),
    SliceRows(String, usize, usize),
    Gelu(String),
    LayerNorm(String),
    Softmax(String),
    Log(String),
    Embedding(String, Vec<usize>),
    Mean(String),
    Sum(String),
}

impl Instr {
    pub fn name(&self) -> &'static str {
        match self {
            Instr::MatMul(..) => "matmul",
            Instr::Add(..) => "add",
            Instr::Mul(..) => "mul",
            Instr::Scale(..) => "scale",
            Instr::Transpose(..) => "transpose",
            Instr::Reshape(..) => "reshape",
            Instr::ConcatRows(..) => "concat_rows",
            Instr::SliceRows(..) => "slice_rows",
            Instr::Gelu(..) => "gelu",
            Instr::LayerNorm(..) => "layer_norm",
            Instr::Softmax(..) => "softmax",
            Instr::Log(..) => "log",
            Instr::Embedding(..) => "embedding",
            Instr::Mean(..) => "mean",
            Instr::Sum(..) => "sum",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Program {
    steps: Vec<(String, Instr)>,
}

impl Program {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `output = instr`.
    pub fn push(mut self, output: impl Into<String>, instr: Instr) -> Self {
        self.steps.push((output.into(), instr));
        self
    }

    pub fn steps(&self) -> &[(String, Instr)] {
        &self.steps
    }
}

/// Result of [`evaluate`]: the last step's node plus every named node.
#[derive(Debug)]
pub struct Evaluation {
    pub output: NodeId,
    pub env: HashMap<String, NodeId>,
}

/// Runs `program` against named inputs already bound as leaves in `g`.
pub fn evaluate_bound(
    g: &mut Graph,
    mut env: HashMap<String, NodeId>,
    program: &Program,
) -> Result<Evaluation> {
    let mut last = None;
    for (out, instr) in program.steps() {
        let lookup = |n: &String| {
            env.get(n).copied().ok_or_else(|| {
                Error::invalid(format!("`{}` reads undefined value `{}`", instr.name(), n))
            })
        };
        let id = match instr {
            Instr::MatMul(a, b) => g.matmul(lookup(a)?, lookup(b)?),
            Instr::Add(a, b) => g.add(lookup(a)?, lookup(b)?),
            Instr::Mul(a, b) => g.mul(lookup(a)?, lookup(b)?),
            Instr::Scale(a, s) => g.scale(lookup(a)?, *s),
            Instr::Transpose(a) => g.transpose(lookup(a)?),
            Instr::Reshape(a, shape) => g.reshape(lookup(a)?, shape),
            Instr::ConcatRows(parts) => {
                let ids = parts.iter().map(&lookup).collect::<Result<Vec<_>>>()?;
                g.concat_rows(&ids)
            }
            Instr::SliceRows(a, s, e) => g.slice_rows(lookup(a)?, *s, *e),
            Instr::Gelu(a) => g.gelu(lookup(a)?),
            Instr::LayerNorm(a) => g.layer_norm(lookup(a)?),
            Instr::Softmax(a) => g.softmax(lookup(a)?),
            Instr::Log(a) => g.log(lookup(a)?),
            Instr::Embedding(a, idx) => g.embedding(lookup(a)?, idx),
            Instr::Mean(a) => g.mean(lookup(a)?),
            Instr::Sum(a) => g.sum(lookup(a)?),
        }?;
        env.insert(out.clone(), id);
        last = Some(id);
    }
    let output = last.ok_or_else(|| Error::invalid("empty program"))?;
    Ok(Evaluation { output, env })
}

/// Binds `inputs` as leaves (all requiring gradients) and evaluates.
pub fn evaluate(
    g: &mut Graph,
    inputs: &BTreeMap<String, Tensor>,
    program: &Program,
) -> Result<Evaluation> {
    let mut env = HashMap::new();
    for (name, t) in inputs {
        env.insert(name.clone(), g.leaf(t.clone(), true)?);
    }
    evaluate_bound(g, env, program)
}
