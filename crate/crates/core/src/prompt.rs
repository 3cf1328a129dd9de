//! Prompt-augmented input sequences and the `[MASK]` read-out.
//!
//! The downstream input keeps the pretraining form: `[CLS]`, the patch
//! embeddings, `N_p` learnable prompts and one `[MASK]` slot, in one of four
//! orders. Prompts and the extra `[MASK]` carry no positional embedding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamSet, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::vit::{BoundBackbone, INIT_STD};

pub const PROMPT_PREFIX: &str = "prompt.";
pub const LAYOUT_ENTRY: &str = "prompt.meta.layout";

/// Order of `[CLS]` (C), patches (X), prompts (P) and `[MASK]` (M).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[default]
    #[serde(rename = "CXPM")]
    Cxpm,
    #[serde(rename = "CXMP")]
    Cxmp,
    #[serde(rename = "CPMX")]
    Cpmx,
    #[serde(rename = "CMPX")]
    Cmpx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Cls,
    Patches,
    Prompts,
    Mask,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::Cxpm, Layout::Cxmp, Layout::Cpmx, Layout::Cmpx];

    pub fn as_str(&self) -> &'static str {
        match self {
            Layout::Cxpm => "CXPM",
            Layout::Cxmp => "CXMP",
            Layout::Cpmx => "CPMX",
            Layout::Cmpx => "CMPX",
        }
    }

    fn parts(&self) -> [Part; 4] {
        use Part::*;
        match self {
            Layout::Cxpm => [Cls, Patches, Prompts, Mask],
            Layout::Cxmp => [Cls, Patches, Mask, Prompts],
            Layout::Cpmx => [Cls, Prompts, Mask, Patches],
            Layout::Cmpx => [Cls, Mask, Prompts, Patches],
        }
    }

    fn code(&self) -> f64 {
        Layout::ALL.iter().position(|l| l == self).unwrap() as f64
    }

    fn from_code(v: f64) -> Option<Layout> {
        Layout::ALL
            .iter()
            .position(|l| l.code() == v)
            .map(|i| Layout::ALL[i])
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown layout `{s}` (expected CXPM, CXMP, CPMX or CMPX)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub layout: Layout,
    pub n_patches: usize,
    pub n_prompts: usize,
}

impl SequenceLayout {
    pub fn new(layout: Layout, n_patches: usize, n_prompts: usize) -> Self {
        SequenceLayout {
            layout,
            n_patches,
            n_prompts,
        }
    }

    pub fn len(&self) -> usize {
        1 + self.n_patches + self.n_prompts + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn part_len(&self, p: Part) -> usize {
        match p {
            Part::Cls | Part::Mask => 1,
            Part::Patches => self.n_patches,
            Part::Prompts => self.n_prompts,
        }
    }

    fn offset(&self, target: Part) -> usize {
        self.layout
            .parts()
            .iter()
            .take_while(|&&p| p != target)
            .map(|&p| self.part_len(p))
            .sum()
    }

    pub fn mask_index(&self) -> usize {
        self.offset(Part::Mask)
    }

    /// Index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        self.offset(Part::Patches)
    }

    pub fn prompt_offset(&self) -> usize {
        self.offset(Part::Prompts)
    }
}

/// Concatenates the four groups in layout order. `prompts` may have zero
/// rows. Returns the sequence node and the `[MASK]` index.
pub fn assemble_sequence(
    g: &mut Graph,
    layout: Layout,
    cls: NodeId,
    patches: NodeId,
    prompts: NodeId,
    mask: NodeId,
) -> Result<(NodeId, usize)> {
    let d = g.value(cls).cols();
    for (what, id) in [("patches", patches), ("prompts", prompts), ("mask", mask)] {
        if g.value(id).cols() != d {
            return Err(Error::shape(
                "assemble_sequence",
                format!("{what} have {} columns, [CLS] has {d}", g.value(id).cols()),
            ));
        }
    }
    if g.value(cls).rows() != 1 || g.value(mask).rows() != 1 {
        return Err(Error::shape("assemble_sequence", "[CLS] and [MASK] must be single rows"));
    }
    let spec = SequenceLayout::new(layout, g.value(patches).rows(), g.value(prompts).rows());
    let ids: Vec<NodeId> = layout
        .parts()
        .iter()
        .filter(|&&p| spec.part_len(p) > 0)
        .map(|p| match p {
            Part::Cls => cls,
            Part::Patches => patches,
            Part::Prompts => prompts,
            Part::Mask => mask,
        })
        .collect();
    let seq = g.concat_rows(&ids)?;
    Ok((seq, spec.mask_index()))
}

/// Final hidden state (after the last layer norm) at `mask_index`.
pub fn mask_hidden(
    g: &mut Graph,
    backbone: &BoundBackbone,
    seq: NodeId,
    mask_index: usize,
) -> Result<NodeId> {
    let n = g.value(seq).rows();
    if mask_index >= n {
        return Err(Error::invalid(format!(
            "mask index {mask_index} outside a sequence of {n}"
        )));
    }
    let h = backbone.encode(g, seq)?;
    g.slice_rows(h, mask_index, mask_index + 1)
}

pub fn write_layout(ck: &mut Checkpoint, layout: Layout) {
    ck.push(LAYOUT_ENTRY, Tensor::new(vec![1], vec![layout.code()]).unwrap());
}

pub fn read_layout(ck: &Checkpoint) -> Result<Layout> {
    let code = ck
        .get(LAYOUT_ENTRY)
        .ok_or_else(|| Error::UnknownName(LAYOUT_ENTRY.into()))?
        .data()
        .first()
        .copied()
        .unwrap_or(-1.0);
    Layout::from_code(code).ok_or_else(|| Error::Format {
        offset: 0,
        detail: format!("bad layout code {code}"),
    })
}

/// The only tensors trained in prompt tuning: prompts, the projection into
/// prototype space, and one prototype per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub layout: Layout,
    pub params: ParamSet,
}

impl PromptState {
    /// Zero prompts and prototypes; projection weight truncated normal.
    pub fn init<R: Rng + ?Sized>(
        layout: Layout,
        hidden_dim: usize,
        n_prompts: usize,
        proto_dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::new();
        params.insert("prompts", Tensor::zeros(&[n_prompts, hidden_dim]));
        params.insert("proj.weight", Tensor::trunc_normal(&[hidden_dim, proto_dim], INIT_STD, rng));
        params.insert("proj.bias", Tensor::zeros(&[1, proto_dim]));
        params.insert("prototypes", Tensor::zeros(&[n_classes, proto_dim]));
        PromptState { layout, params }
    }

    pub fn n_prompts(&self) -> usize {
        self.params.get("prompts").map(|t| t.rows()).unwrap_or(0)
    }

    pub fn proto_dim(&self) -> usize {
        self.params.get("proj.bias").map(|t| t.cols()).unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.params.get("prototypes").map(|t| t.rows()).unwrap_or(0)
    }

    pub fn prototypes(&self) -> &Tensor {
        self.params.get("prototypes").expect("prototypes present")
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        write_layout(ck, self.layout);
        ck.extend_with_prefix(PROMPT_PREFIX, &self.params);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layout = read_layout(ck)?;
        let mut params = ParamSet::new();
        for name in ["prompts", "proj.weight", "proj.bias", "prototypes"] {
            let t = ck
                .get(&format!("{PROMPT_PREFIX}{name}"))
                .ok_or_else(|| Error::UnknownName(format!("{PROMPT_PREFIX}{name}")))?;
            params.insert(name, t.clone());
        }
        Ok(PromptState { layout, params })
    }
}
