//! Plain vision-transformer encoder: patchify, embed, pre-norm attention and
//! MLP blocks with residuals. All per-frame; frames share one weight set.

use crate::error::{shape_err, Result};
use crate::peft::{adapter_branch, linear_maybe_lora, LayerHooks};
use crate::tensor::{Graph, NodeId};
use serde::{Deserialize, Serialize};

/// LayerNorm epsilon used throughout the encoder and fusion head.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig::small()
    }
}

impl ViTConfig {
    /// ViT-Small: D=384, 12 layers, 6 heads, 16px patches.
    pub fn small() -> Self {
        ViTConfig { image_size: 256, patch_size: 16, depth: 12, dim: 384, heads: 6, mlp_ratio: 4 }
    }

    /// Desk-scale encoder used by the test suite and default gradient checks.
    pub fn tiny() -> Self {
        ViTConfig { image_size: 64, patch_size: 8, depth: 2, dim: 32, heads: 2, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(crate::error::Error::Config("vit: all dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(crate::error::Error::Config(format!(
                "vit: image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(crate::error::Error::Config(format!(
                "vit: dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }
}

/// Node ids of one transformer layer's parameters inside a graph.
#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

#[derive(Debug, Clone)]
pub struct BackboneNodes {
    pub patch_weight: NodeId,
    pub patch_bias: NodeId,
    pub cls_token: NodeId,
    pub pos_embed: NodeId,
    pub layers: Vec<LayerNodes>,
}

pub struct AttnOut {
    pub out: NodeId,
    /// Per-head attention probabilities, each [M,M'].
    pub probs: Vec<NodeId>,
}

pub struct LayerOut {
    pub z: NodeId,
    pub probs: Vec<NodeId>,
}

/// Linear patch embedding plus class token and position embedding:
/// rows are `[x_class; patches * W + b] + E_pos`.
pub fn embed(g: &mut Graph, patches: NodeId, nodes: &BackboneNodes) -> Result<NodeId> {
    let n = g.shape(patches)[0];
    let pos_rows = g.shape(nodes.pos_embed)[0];
    if n + 1 != pos_rows {
        return Err(shape_err!(
            "embed: {} patches need a position embedding with {} rows, found {}",
            n,
            n + 1,
            pos_rows
        ));
    }
    let xp = g.matmul(patches, nodes.patch_weight)?;
    let xp = g.add_bias(xp, nodes.patch_bias)?;
    let tokens = g.concat_rows(&[nodes.cls_token, xp])?;
    g.add(tokens, nodes.pos_embed)
}

/// Multi-head scaled-dot self-attention over an already-normalized sequence.
/// Queries come from the image tokens only when a prefix is present upstream;
/// here the whole input attends to itself.
pub fn attention(
    g: &mut Graph,
    x: NodeId,
    layer: &LayerNodes,
    heads: usize,
    hooks: &LayerHooks,
) -> Result<AttnOut> {
    let m = g.shape(x)[0];
    let d = g.shape(x)[1];
    let dh = d / heads;
    let lora = hooks.lora.as_ref();
    let q = linear_maybe_lora(g, x, layer.wq, layer.bq, lora.and_then(|l| l.q.as_ref()))?;
    let mut k = linear_maybe_lora(g, x, layer.wk, layer.bk, lora.and_then(|l| l.k.as_ref()))?;
    let mut v = linear_maybe_lora(g, x, layer.wv, layer.bv, lora.and_then(|l| l.v.as_ref()))?;
    if let Some(ia3) = &hooks.ia3 {
        if let Some(l_k) = ia3.l_k {
            let lk = g.repeat_rows(l_k, m)?;
            k = g.mul(k, lk)?;
        }
        if let Some(l_v) = ia3.l_v {
            let lv = g.repeat_rows(l_v, m)?;
            v = g.mul(v, lv)?;
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let p = g.softmax(scores, 1)?;
        probs.push(p);
        outs.push(g.matmul(p, vh)?);
    }
    let merged = g.concat_cols(&outs)?;
    let out = linear_maybe_lora(g, merged, layer.wo, layer.bo, lora.and_then(|l| l.o.as_ref()))?;
    Ok(AttnOut { out, probs })
}

/// One pre-norm transformer block: z += MSA(LN1(z)); z += MLP(LN2(z)),
/// with optional PEFT hooks (prefix tokens, LoRA on projections, IA3
/// scalings, parallel adapter on the MLP sublayer).
pub fn transformer_layer(
    g: &mut Graph,
    z: NodeId,
    layer: &LayerNodes,
    heads: usize,
    hooks: &LayerHooks,
) -> Result<LayerOut> {
    let m = g.shape(z)[0];
    let seq = match hooks.prefix {
        Some(prefix) => g.concat_rows(&[prefix, z])?,
        None => z,
    };
    let normed = g.layer_norm(seq, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let att = attention(g, normed, layer, heads, hooks)?;
    let att_tokens = match hooks.prefix {
        Some(prefix) => {
            let p = g.shape(prefix)[0];
            g.slice_rows(att.out, p, m)?
        }
        None => att.out,
    };
    let z1 = g.add(z, att_tokens)?;

    let mlp_in = g.layer_norm(z1, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    let h1 = g.matmul(mlp_in, layer.mlp_w1)?;
    let h1 = g.add_bias(h1, layer.mlp_b1)?;
    let mut h1 = g.gelu(h1)?;
    if let Some(l_mlp) = hooks.ia3.as_ref().and_then(|ia3| ia3.l_mlp) {
        let lm = g.repeat_rows(l_mlp, m)?;
        h1 = g.mul(h1, lm)?;
    }
    let h2 = g.matmul(h1, layer.mlp_w2)?;
    let mlp_out = g.add_bias(h2, layer.mlp_b2)?;
    let mut z2 = g.add(z1, mlp_out)?;
    if let Some(ad) = &hooks.adapter {
        let branch = adapter_branch(g, z1, ad)?;
        z2 = g.add(z2, branch)?;
    }
    Ok(LayerOut { z: z2, probs: att.probs })
}

pub struct BackboneOut {
    /// Per-frame patch features, each [N,D] (class token removed).
    pub frames: Vec<NodeId>,
    /// Attention probabilities from every frame, layer and head.
    pub probs: Vec<NodeId>,
}

/// Run each frame through the shared encoder: patchify, embed, `depth`
/// blocks, then drop the class token.
pub fn backbone_forward(
    g: &mut Graph,
    images: &[NodeId],
    cfg: &ViTConfig,
    nodes: &BackboneNodes,
    hooks: &[LayerHooks],
) -> Result<BackboneOut> {
    let n = cfg.num_patches();
    let mut frames = Vec::with_capacity(images.len());
    let mut probs = Vec::new();
    for &img in images {
        let patches = g.patchify(img, cfg.patch_size)?;
        let mut z = embed(g, patches, nodes)?;
        for (layer, layer_hooks) in nodes.layers.iter().zip(hooks) {
            let out = transformer_layer(g, z, layer, cfg.heads, layer_hooks)?;
            z = out.z;
            probs.extend(out.probs);
        }
        frames.push(g.slice_rows(z, 1, n)?);
    }
    Ok(BackboneOut { frames, probs })
}
