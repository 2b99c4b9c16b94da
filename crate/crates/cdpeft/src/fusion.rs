//! Masked cross-attention temporal fusion: a learned mask query attends over
//! the T per-frame features at each patch position, producing one change
//! feature per patch. Attention cost is exactly N*T scores; no spatial
//! (N x N) attention is ever materialized.

use crate::error::{shape_err, Result};
use crate::tensor::{Graph, NodeId};
use crate::vit::LN_EPS;

/// Node ids of the fusion head parameters inside a graph.
#[derive(Debug, Clone)]
pub struct FusionNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    /// Temporal position embedding [T,D], one row added to every patch of frame t.
    pub z_tp: NodeId,
    /// Mask query [1,D], shared by all patch positions.
    pub z_m: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub ln3_gamma: NodeId,
    pub ln3_beta: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

/// Reorder per-frame features [T,N,D] to per-patch groups [N,T,D] and add the
/// temporal position embedding (broadcast over patches).
pub fn temporal_stack(g: &mut Graph, z: NodeId, z_tp: NodeId) -> Result<NodeId> {
    let s = g.shape(z).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("temporal_stack expects [T,N,D], got {:?}", s));
    }
    let (t, n, d) = (s[0], s[1], s[2]);
    let tp_shape = g.shape(z_tp).to_vec();
    if tp_shape != [t, d] {
        return Err(shape_err!(
            "temporal_stack: z_tp {:?} does not match T={t}, D={d}",
            tp_shape
        ));
    }
    let zt = g.transpose01(z)?; // [N,T,D]
    let flat = g.reshape(zt, vec![n, t * d])?;
    let tp_row = g.reshape(z_tp, vec![t * d])?;
    let with_tp = g.add_bias(flat, tp_row)?;
    g.reshape(with_tp, vec![n, t, d])
}

pub struct McaOut {
    /// Fused per-patch features [N,D].
    pub out: NodeId,
    /// Attention probabilities [N,T]; rows sum to one.
    pub probs: NodeId,
}

/// One masked-cross-attention block over per-patch temporal groups.
///
/// Per patch n: Q = query(LN2(z_m)); K,V = key/value(LN1(z_t[n]));
/// z <- z_m + out(softmax(QK^T / sqrt(D)) V); z <- z + MLP(LN3(z)).
pub fn mca_block(g: &mut Graph, z_t: NodeId, nodes: &FusionNodes) -> Result<McaOut> {
    let s = g.shape(z_t).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("mca_block expects [N,T,D], got {:?}", s));
    }
    let (n, t, d) = (s[0], s[1], s[2]);

    let zm_rows = g.repeat_rows(nodes.z_m, n)?;
    let q_in = g.layer_norm(zm_rows, nodes.ln2_gamma, nodes.ln2_beta, LN_EPS)?;
    let q = g.matmul(q_in, nodes.wq)?;
    let q = g.add_bias(q, nodes.bq)?;

    let kv_in = g.reshape(z_t, vec![n * t, d])?;
    let kv_in = g.layer_norm(kv_in, nodes.ln1_gamma, nodes.ln1_beta, LN_EPS)?;
    let k = g.matmul(kv_in, nodes.wk)?;
    let k = g.add_bias(k, nodes.bk)?;
    let v = g.matmul(kv_in, nodes.wv)?;
    let v = g.add_bias(v, nodes.bv)?;

    // single-head attention at scale sqrt(D), one 1xT row per patch
    let scores = g.score_nt(q, k, t, 1.0 / (d as f64).sqrt())?;
    let probs = g.softmax(scores, 1)?;
    let mixed = g.mix_nt(probs, v)?;
    let o = g.matmul(mixed, nodes.wo)?;
    let o = g.add_bias(o, nodes.bo)?;
    let z1 = g.add(zm_rows, o)?;

    let h = g.layer_norm(z1, nodes.ln3_gamma, nodes.ln3_beta, LN_EPS)?;
    let h = g.matmul(h, nodes.mlp_w1)?;
    let h = g.add_bias(h, nodes.mlp_b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, nodes.mlp_w2)?;
    let h = g.add_bias(h, nodes.mlp_b2)?;
    let out = g.add(z1, h)?;
    Ok(McaOut { out, probs })
}

pub struct FuseOut {
    /// Change feature [D, H/P, W/P].
    pub feature: NodeId,
    pub probs: NodeId,
}

/// Full temporal fusion: stack per-frame features, run the MCA block, and
/// rearrange the fused rows onto the patch grid.
pub fn fuse(g: &mut Graph, frames: &[NodeId], nodes: &FusionNodes, grid: (usize, usize)) -> Result<FuseOut> {
    if frames.is_empty() {
        return Err(shape_err!("fuse needs at least one frame"));
    }
    let (gh, gw) = grid;
    let n = g.shape(frames[0])[0];
    let d = g.shape(frames[0])[1];
    if n != gh * gw {
        return Err(shape_err!("fuse: {} patch rows do not fill a {}x{} grid", n, gh, gw));
    }
    let t = frames.len();
    let stacked = g.concat_rows(frames)?; // [T*N, D]
    let stacked = g.reshape(stacked, vec![t, n, d])?;
    let z_t = temporal_stack(g, stacked, nodes.z_tp)?;
    let mca = mca_block(g, z_t, nodes)?;
    let grid_feat = g.transpose01(mca.out)?; // [D, N]
    let feature = g.reshape(grid_feat, vec![d, gh, gw])?;
    Ok(FuseOut { feature, probs: mca.probs })
}
