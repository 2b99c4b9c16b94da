//! Progressive upsampling decoder: log2(P) stages of 3x3 conv, per-channel
//! normalization, GELU and 2x bilinear upsampling, then a 1x1 head to
//! two-class logits at full input resolution.

use crate::error::{shape_err, Result};
use crate::tensor::{Graph, NodeId};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct StageNodes {
    pub kernel: NodeId,
    pub bias: NodeId,
    pub norm_gamma: NodeId,
    pub norm_beta: NodeId,
}

#[derive(Debug, Clone)]
pub struct DecoderNodes {
    pub stages: Vec<StageNodes>,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

/// Stage channel progression: halves each stage with a floor of 16.
pub fn stage_channels(dim: usize, patch_size: usize) -> Result<Vec<(usize, usize)>> {
    if patch_size == 0 || !patch_size.is_power_of_two() {
        return Err(shape_err!("decoder requires a power-of-two patch size, got {patch_size}"));
    }
    let stages = patch_size.trailing_zeros() as usize;
    let mut chans = Vec::with_capacity(stages);
    let mut c = dim;
    for _ in 0..stages {
        let next = (c / 2).max(16);
        chans.push((c, next));
        c = next;
    }
    Ok(chans)
}

/// Per-channel normalization over the spatial extent with affine parameters.
pub fn channel_norm(g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("channel_norm expects [C,H,W], got {:?}", s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = g.reshape(x, vec![c, h * w])?;
    let unit_g = g.constant(vec![1.0; h * w], vec![h * w])?;
    let unit_b = g.constant(vec![0.0; h * w], vec![h * w])?;
    let normed = g.layer_norm(flat, unit_g, unit_b, NORM_EPS)?;
    let scaled = g.scale_rows(normed, gamma)?;
    let shifted = g.bias_rows(scaled, beta)?;
    g.reshape(shifted, vec![c, h, w])
}

/// Upsample the change feature to full-resolution 2-class logits.
pub fn decode(g: &mut Graph, feature: NodeId, nodes: &DecoderNodes, patch_size: usize) -> Result<NodeId> {
    if patch_size == 0 || !patch_size.is_power_of_two() {
        return Err(shape_err!("decode requires a power-of-two patch size, got {patch_size}"));
    }
    let mut x = feature;
    for stage in &nodes.stages {
        x = g.conv2d(x, stage.kernel, stage.bias)?;
        x = channel_norm(g, x, stage.norm_gamma, stage.norm_beta)?;
        x = g.gelu(x)?;
        x = g.bilinear_up2(x)?;
    }
    g.conv2d(x, nodes.head_weight, nodes.head_bias)
}
