use rand::Rng;

use super::config::BackboneConfig;
use crate::autodiff::{Bound, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// Pretrained encoder weights: patch projection, positional table for the
/// `[CLS]` slot plus one slot per patch, the `[CLS]` and `[MASK]` vectors,
/// the transformer blocks, the final norm and the vocabulary head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

fn block_name(i: usize, leaf: &str) -> String {
    format!("blocks.{i}.{leaf}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every backbone tensor with its shape and initializer, in storage order.
fn layout(config: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.hidden_dim;
    let m = config.mlp_dim();
    let mut l = vec![
        ("patch_embed.weight".to_string(), vec![config.patch_dim(), d], Init::Normal),
        ("patch_embed.bias".to_string(), vec![1, d], Init::Zeros),
        ("pos_embed".to_string(), vec![config.num_patches() + 1, d], Init::Normal),
        ("cls_token".to_string(), vec![1, d], Init::Normal),
        ("mask_token".to_string(), vec![1, d], Init::Normal),
    ];
    for i in 0..config.depth {
        l.push((block_name(i, "norm1.weight"), vec![1, d], Init::Ones));
        l.push((block_name(i, "norm1.bias"), vec![1, d], Init::Zeros));
        l.push((block_name(i, "attn.qkv.weight"), vec![d, 3 * d], Init::Normal));
        l.push((block_name(i, "attn.qkv.bias"), vec![1, 3 * d], Init::Zeros));
        l.push((block_name(i, "attn.proj.weight"), vec![d, d], Init::Normal));
        l.push((block_name(i, "attn.proj.bias"), vec![1, d], Init::Zeros));
        l.push((block_name(i, "norm2.weight"), vec![1, d], Init::Ones));
        l.push((block_name(i, "norm2.bias"), vec![1, d], Init::Zeros));
        l.push((block_name(i, "mlp.fc1.weight"), vec![d, m], Init::Normal));
        l.push((block_name(i, "mlp.fc1.bias"), vec![1, m], Init::Zeros));
        l.push((block_name(i, "mlp.fc2.weight"), vec![m, d], Init::Normal));
        l.push((block_name(i, "mlp.fc2.bias"), vec![1, d], Init::Zeros));
    }
    l.push(("norm.weight".to_string(), vec![1, d], Init::Ones));
    l.push(("norm.bias".to_string(), vec![1, d], Init::Zeros));
    l.push(("head.weight".to_string(), vec![d, config.vocab_size], Init::Normal));
    l.push(("head.bias".to_string(), vec![1, config.vocab_size], Init::Zeros));
    l
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        for (name, shape, init) in layout(&config) {
            let t = match init {
                Init::Normal => Tensor::trunc_normal(&shape, INIT_STD, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
            };
            ps.insert(name, t);
        }
        Ok(Backbone { config, params: ps })
    }

    /// Rebuilds from a parameter set, checking every expected tensor.
    pub fn from_params(config: BackboneConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let mut ordered = ParamSet::new();
        for (name, shape, _) in layout(&config) {
            let got = params.get(&name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "backbone",
                    format!("{name}: expected {shape:?}, got {:?}", got.shape()),
                ));
            }
            ordered.insert(name, got.clone());
        }
        Ok(Backbone {
            config,
            params: ordered,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_frozen(frozen);
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundBackbone> {
        Ok(BoundBackbone {
            config: self.config,
            vars: self.params.bind(g)?,
        })
    }

    /// Rounds every weight to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Backbone weights placed on one graph.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub config: BackboneConfig,
    pub vars: Bound,
}

impl BoundBackbone {
    fn id(&self, name: &str) -> Result<NodeId> {
        self.vars.id(name)
    }

    fn block(&self, i: usize, leaf: &str) -> Result<NodeId> {
        self.vars.id(&block_name(i, leaf))
    }

    pub fn mask_token(&self) -> Result<NodeId> {
        self.id("mask_token")
    }

    /// `e_cls + pos_0`.
    pub fn cls_embedding(&self, g: &mut Graph) -> Result<NodeId> {
        let pos = self.id("pos_embed")?;
        let p0 = g.slice_rows(pos, 0, 1)?;
        let cls = self.id("cls_token")?;
        g.add(cls, p0)
    }

    fn patch_positions(&self, g: &mut Graph) -> Result<NodeId> {
        let pos = self.id("pos_embed")?;
        g.slice_rows(pos, 1, self.config.num_patches() + 1)
    }

    /// `e_i = x_i W + b + pos_i` for every patch row.
    pub fn embed_patches(&self, g: &mut Graph, patches: NodeId) -> Result<NodeId> {
        let n = g.value(patches).rows();
        if n != self.config.num_patches() || g.value(patches).cols() != self.config.patch_dim() {
            return Err(Error::shape(
                "embed_patches",
                format!(
                    "patches {:?}, expected [{}, {}]",
                    g.value(patches).shape(),
                    self.config.num_patches(),
                    self.config.patch_dim()
                ),
            ));
        }
        let proj = g.affine(
            patches,
            self.id("patch_embed.weight")?,
            self.id("patch_embed.bias")?,
        )?;
        let pos = self.patch_positions(g)?;
        g.add(proj, pos)
    }

    /// Like [`Self::embed_patches`], but rows flagged in `masked` are
    /// replaced by the `[MASK]` vector before the positional term is added.
    pub fn embed_masked(&self, g: &mut Graph, patches: NodeId, masked: &[bool]) -> Result<NodeId> {
        let n = self.config.num_patches();
        if masked.len() != n || g.value(patches).rows() != n {
            return Err(Error::shape(
                "embed_masked",
                format!("{} mask flags for {} patches", masked.len(), g.value(patches).rows()),
            ));
        }
        let proj = g.affine(
            patches,
            self.id("patch_embed.weight")?,
            self.id("patch_embed.bias")?,
        )?;
        let table = g.concat_rows(&[proj, self.mask_token()?])?;
        let idx: Vec<usize> = masked
            .iter()
            .enumerate()
            .map(|(i, &m)| if m { n } else { i })
            .collect();
        let rows = g.embedding(table, &idx)?;
        let pos = self.patch_positions(g)?;
        g.add(rows, pos)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x)?;
        let s = g.mul(n, weight)?;
        g.add(s, bias)
    }

    fn attention(&self, g: &mut Graph, x: NodeId, layer: usize) -> Result<NodeId> {
        let qkv = g.affine(
            x,
            self.block(layer, "attn.qkv.weight")?,
            self.block(layer, "attn.qkv.bias")?,
        )?;
        let merged = g.attention(qkv, self.config.heads)?;
        g.affine(
            merged,
            self.block(layer, "attn.proj.weight")?,
            self.block(layer, "attn.proj.bias")?,
        )
    }

    fn block_forward(&self, g: &mut Graph, x: NodeId, layer: usize) -> Result<NodeId> {
        let h = self.norm(
            g,
            x,
            self.block(layer, "norm1.weight")?,
            self.block(layer, "norm1.bias")?,
        )?;
        let a = self.attention(g, h, layer)?;
        let x = g.add(x, a)?;
        let h = self.norm(
            g,
            x,
            self.block(layer, "norm2.weight")?,
            self.block(layer, "norm2.bias")?,
        )?;
        let h = g.affine(
            h,
            self.block(layer, "mlp.fc1.weight")?,
            self.block(layer, "mlp.fc1.bias")?,
        )?;
        let h = g.gelu(h)?;
        let h = g.affine(
            h,
            self.block(layer, "mlp.fc2.weight")?,
            self.block(layer, "mlp.fc2.bias")?,
        )?;
        g.add(x, h)
    }

    /// Full (unmasked) self-attention over the whole sequence, then the
    /// final layer norm. Output has the input's shape.
    pub fn encode(&self, g: &mut Graph, seq: NodeId) -> Result<NodeId> {
        let (n, d) = g.value(seq).dims2();
        if n == 0 || d != self.config.hidden_dim {
            return Err(Error::shape(
                "encode",
                format!("sequence {:?}", g.value(seq).shape()),
            ));
        }
        let mut x = seq;
        for layer in 0..self.config.depth {
            x = self.block_forward(g, x, layer).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteActivation { layer },
                other => other,
            })?;
        }
        self.norm(g, x, self.id("norm.weight")?, self.id("norm.bias")?)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteActivation {
                    layer: self.config.depth,
                },
                other => other,
            })
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn vocab_logits(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId> {
        g.affine(hidden, self.id("head.weight")?, self.id("head.bias")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedStream;

    fn tiny(depth: usize, heads: usize) -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            hidden_dim: 8,
            depth,
            heads,
            mlp_ratio: 2,
            vocab_size: 5,
        }
    }

    fn layer_norm_rows(t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..t.rows() {
            let x = t.row(r);
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for (o, v) in out.row_mut(r).iter_mut().zip(x) {
                *o = (v - mean) / (var + 1e-6).sqrt();
            }
        }
        out
    }

    #[test]
    fn depth_zero_encode_is_final_norm() {
        let mut rng = SeedStream::new(1).rng("init");
        let bb = Backbone::init(tiny(0, 2), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let b = bb.bind(&mut g).unwrap();
        let xn = g.constant(x.clone()).unwrap();
        let y = b.encode(&mut g, xn).unwrap();
        assert!(g.value(y).max_abs_diff(&layer_norm_rows(&x)) < 1e-12);
    }

    #[test]
    fn zero_projection_gives_positional_embeddings() {
        let mut rng = SeedStream::new(2).rng("init");
        let mut bb = Backbone::init(tiny(1, 1), &mut rng).unwrap();
        *bb.params.get_mut("patch_embed.weight").unwrap() = Tensor::zeros(&[16, 8]);
        let patches = Tensor::randn(&[4, 16], 1.0, &mut rng);
        let mut g = Graph::new();
        let b = bb.bind(&mut g).unwrap();
        let p = g.constant(patches).unwrap();
        let e = b.embed_patches(&mut g, p).unwrap();
        let pos = bb.params.get("pos_embed").unwrap();
        for i in 0..4 {
            assert_eq!(g.value(e).row(i), pos.row(i + 1));
        }
    }

    #[test]
    fn identical_patches_differ_by_positions() {
        let mut rng = SeedStream::new(3).rng("init");
        let bb = Backbone::init(tiny(1, 1), &mut rng).unwrap();
        let row = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let patches = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g).unwrap();
        let p = g.constant(patches).unwrap();
        let e = b.embed_patches(&mut g, p).unwrap();
        let e = g.value(e).clone();
        let pos = bb.params.get("pos_embed").unwrap();
        for c in 0..8 {
            let lhs = e.get(0, c) - e.get(2, c);
            let rhs = pos.get(1, c) - pos.get(3, c);
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_matches_direct_matmul() {
        let mut rng = SeedStream::new(4).rng("init");
        let bb = Backbone::init(tiny(1, 1), &mut rng).unwrap();
        let patches = Tensor::randn(&[4, 16], 1.0, &mut rng);
        let w = bb.params.get("patch_embed.weight").unwrap();
        let bias = bb.params.get("patch_embed.bias").unwrap();
        let pos = bb.params.get("pos_embed").unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g).unwrap();
        let p = g.constant(patches.clone()).unwrap();
        let e = b.embed_patches(&mut g, p).unwrap();
        let e = g.value(e).clone();
        for i in 0..4 {
            for c in 0..8 {
                let mut acc = 0.0;
                for k in 0..16 {
                    acc += patches.get(i, k) * w.get(k, c);
                }
                acc += bias.get(0, c) + pos.get(i + 1, c);
                assert!((acc - e.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_two_token_attention_matches_closed_form() {
        let cfg = BackboneConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            hidden_dim: 2,
            depth: 1,
            heads: 1,
            mlp_ratio: 1,
            vocab_size: 2,
        };
        let mut rng = SeedStream::new(5).rng("init");
        let mut bb = Backbone::init(cfg, &mut rng).unwrap();
        // Identity q/k/v, identity output projection, MLP disabled.
        let mut qkv = Tensor::zeros(&[2, 6]);
        for (r, c) in [(0, 0), (1, 1), (0, 2), (1, 3), (0, 4), (1, 5)] {
            qkv.set(r, c, 1.0);
        }
        *bb.params.get_mut("blocks.0.attn.qkv.weight").unwrap() = qkv;
        *bb.params.get_mut("blocks.0.attn.proj.weight").unwrap() = Tensor::eye(2);
        *bb.params.get_mut("blocks.0.mlp.fc2.weight").unwrap() = Tensor::zeros(&[2, 2]);

        let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![-2.0, 0.5]]).unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g).unwrap();
        let xn = g.constant(x.clone()).unwrap();
        let y = b.encode(&mut g, xn).unwrap();
        let y = g.value(y).clone();

        // Closed form: h = LN(x) (2-d rows normalize to (-1, 1) or (1, -1)
        // up to eps), a = softmax(h h^T / sqrt 2) h, out = LN(x + a).
        let h = layer_norm_rows(&x);
        let s = 1.0 / 2f64.sqrt();
        let mut pre = x.clone();
        for i in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|j| s * (h.get(i, 0) * h.get(j, 0) + h.get(i, 1) * h.get(j, 1)))
                .collect();
            let m = logits[0].max(logits[1]);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z = e[0] + e[1];
            for c in 0..2 {
                let a = (e[0] * h.get(0, c) + e[1] * h.get(1, c)) / z;
                pre.set(i, c, x.get(i, c) + a);
            }
        }
        let expected = layer_norm_rows(&pre);
        assert!(y.max_abs_diff(&expected) < 1e-12, "{y:?} vs {expected:?}");
    }

    #[test]
    fn swapping_identical_tokens_leaves_others_unchanged() {
        let mut rng = SeedStream::new(6).rng("init");
        let bb = Backbone::init(tiny(2, 2), &mut rng).unwrap();
        let mut x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let dup = x.row(1).to_vec();
        x.row_mut(3).copy_from_slice(&dup);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let b = bb.bind(&mut g).unwrap();
            let n = g.constant(x.clone()).unwrap();
            let y = b.encode(&mut g, n).unwrap();
            g.value(y).clone()
        };
        let y1 = run(&x);
        let mut swapped = x.clone();
        let r1 = x.row(1).to_vec();
        let r3 = x.row(3).to_vec();
        swapped.row_mut(1).copy_from_slice(&r3);
        swapped.row_mut(3).copy_from_slice(&r1);
        let y2 = run(&swapped);
        for r in [0, 2, 4] {
            for (a, b) in y1.row(r).iter().zip(y2.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_preserves_shape() {
        let mut rng = SeedStream::new(7).rng("init");
        let bb = Backbone::init(tiny(2, 4), &mut rng).unwrap();
        for n in [1, 2, 7, 20] {
            let mut g = Graph::new();
            let b = bb.bind(&mut g).unwrap();
            let x = g.constant(Tensor::randn(&[n, 8], 1.0, &mut rng)).unwrap();
            let y = b.encode(&mut g, x).unwrap();
            assert_eq!(g.value(y).shape(), &[n, 8]);
        }
    }

    #[test]
    fn masked_rows_hide_pixel_content() {
        let mut rng = SeedStream::new(8).rng("init");
        let bb = Backbone::init(tiny(1, 2), &mut rng).unwrap();
        let patches = Tensor::randn(&[4, 16], 1.0, &mut rng);
        let mut altered = patches.clone();
        altered.row_mut(2).iter_mut().for_each(|v| *v = 9.0);
        let masked = [false, false, true, false];
        let run = |p: &Tensor| {
            let mut g = Graph::new();
            let b = bb.bind(&mut g).unwrap();
            let n = g.constant(p.clone()).unwrap();
            let e = b.embed_masked(&mut g, n, &masked).unwrap();
            let y = b.encode(&mut g, e).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&patches), run(&altered));
    }
}
