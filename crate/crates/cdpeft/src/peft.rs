//! Parameter-efficient tuning mechanisms and the frozen/trainable partition.
//!
//! Four insertable mechanisms (bottleneck adapter, LoRA, IA3, prefix tokens)
//! plus linear-probe and full-tuning modes. Adapter, LoRA and IA3 are exact
//! identities at their initialization; prefix tuning necessarily shifts
//! attention mass and is exempt from that property.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, NodeId};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMethod {
    Adapter,
    Lora,
    Ia3,
    Prefix,
    LinearProbe,
    Full,
}

impl FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "adapter" => Ok(PeftMethod::Adapter),
            "lora" => Ok(PeftMethod::Lora),
            "ia3" => Ok(PeftMethod::Ia3),
            "prefix" => Ok(PeftMethod::Prefix),
            "linear_probe" => Ok(PeftMethod::LinearProbe),
            "full" => Ok(PeftMethod::Full),
            other => Err(Error::Config(format!("unknown tuning method `{other}`"))),
        }
    }
}

impl fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PeftMethod::Adapter => "adapter",
            PeftMethod::Lora => "lora",
            PeftMethod::Ia3 => "ia3",
            PeftMethod::Prefix => "prefix",
            PeftMethod::LinearProbe => "linear_probe",
            PeftMethod::Full => "full",
        };
        f.write_str(s)
    }
}

/// Attention projections LoRA can reparameterize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
}

/// Activations IA3 can rescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ia3Target {
    K,
    V,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PeftConfig {
    pub method: PeftMethod,
    /// Adapter bottleneck factor r; D' = round(D / r).
    pub adapter_r: usize,
    /// Adapter branch scale s.
    pub adapter_s: f64,
    pub lora_rank: usize,
    pub lora_targets: Vec<LoraTarget>,
    pub ia3_targets: Vec<Ia3Target>,
    /// Learnable tokens prepended per layer in prefix mode.
    pub prefix_len: usize,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            method: PeftMethod::Adapter,
            adapter_r: 6,
            adapter_s: 1.0,
            lora_rank: 1,
            lora_targets: vec![LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv, LoraTarget::Wo],
            ia3_targets: vec![Ia3Target::K, Ia3Target::V, Ia3Target::Mlp],
            prefix_len: 10,
        }
    }
}

impl PeftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapter_r < 1 {
            return Err(Error::Config("peft: adapter_r must be >= 1".into()));
        }
        if self.lora_rank < 1 {
            return Err(Error::Config("peft: lora_rank must be >= 1".into()));
        }
        if self.prefix_len < 1 {
            return Err(Error::Config("peft: prefix_len must be >= 1".into()));
        }
        if self.method == PeftMethod::Lora && self.lora_targets.is_empty() {
            return Err(Error::Config("peft: lora_targets must not be empty".into()));
        }
        if self.method == PeftMethod::Ia3 && self.ia3_targets.is_empty() {
            return Err(Error::Config("peft: ia3_targets must not be empty".into()));
        }
        for i in 1..self.lora_targets.len() {
            if self.lora_targets[..i].contains(&self.lora_targets[i]) {
                return Err(Error::Config("peft: duplicate lora target".into()));
            }
        }
        for i in 1..self.ia3_targets.len() {
            if self.ia3_targets[..i].contains(&self.ia3_targets[i]) {
                return Err(Error::Config("peft: duplicate ia3 target".into()));
            }
        }
        Ok(())
    }

    /// Bottleneck width D' = round(D / r), at least 1.
    pub fn bottleneck_dim(&self, dim: usize) -> usize {
        ((dim as f64 / self.adapter_r as f64).round() as usize).max(1)
    }
}

/// Node ids of one layer's adapter parameters.
#[derive(Debug, Clone)]
pub struct AdapterNodes {
    pub w_down: NodeId,
    pub b_down: NodeId,
    pub w_up: NodeId,
    pub b_up: NodeId,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Default)]
pub struct LoraNodes {
    pub q: Option<LoraPair>,
    pub k: Option<LoraPair>,
    pub v: Option<LoraPair>,
    pub o: Option<LoraPair>,
}

#[derive(Debug, Clone, Default)]
pub struct Ia3Nodes {
    pub l_k: Option<NodeId>,
    pub l_v: Option<NodeId>,
    pub l_mlp: Option<NodeId>,
}

/// Everything a transformer layer may splice in.
#[derive(Debug, Clone, Default)]
pub struct LayerHooks {
    pub adapter: Option<AdapterNodes>,
    pub lora: Option<LoraNodes>,
    pub ia3: Option<Ia3Nodes>,
    pub prefix: Option<NodeId>,
}

/// The bottleneck branch s * (GELU(z W_down + b_down) W_up + b_up).
/// Reads the same input as the MLP sublayer, in parallel with it.
pub fn adapter_branch(g: &mut Graph, z: NodeId, ad: &AdapterNodes) -> Result<NodeId> {
    let h = g.matmul(z, ad.w_down)?;
    let h = g.add_bias(h, ad.b_down)?;
    let h = g.gelu(h)?;
    let up = g.matmul(h, ad.w_up)?;
    let up = g.add_bias(up, ad.b_up)?;
    g.scale(up, ad.scale)
}

/// x W + b + (x A) B: the frozen projection plus the low-rank update.
pub fn lora_forward(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, a: NodeId, bm: NodeId) -> Result<NodeId> {
    let base = g.matmul(x, w)?;
    let base = g.add_bias(base, b)?;
    let xa = g.matmul(x, a)?;
    let update = g.matmul(xa, bm)?;
    g.add(base, update)
}

/// Plain linear unless a LoRA pair is attached to this projection.
pub fn linear_maybe_lora(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, lora: Option<&LoraPair>) -> Result<NodeId> {
    match lora {
        Some(pair) => lora_forward(g, x, w, b, pair.a, pair.b),
        None => {
            let y = g.matmul(x, w)?;
            g.add_bias(y, b)
        }
    }
}

/// Scalar counts of the frozen/trainable split over a model's registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub frozen_count: usize,
    pub trainable_count: usize,
    pub ratio: f64,
}

/// Count every scalar in every parameter, split by the frozen flag.
pub fn partition_report(model: &Model) -> PartitionReport {
    let mut frozen = 0usize;
    let mut trainable = 0usize;
    for p in model.params() {
        if p.frozen {
            frozen += p.data.len();
        } else {
            trainable += p.data.len();
        }
    }
    let total = frozen + trainable;
    PartitionReport {
        frozen_count: frozen,
        trainable_count: trainable,
        ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::vit::{attention, transformer_layer, LayerNodes};

    fn constant(g: &mut Graph, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        g.constant(data, shape).unwrap()
    }

    fn test_layer(g: &mut Graph, rng: &mut Rng, d: usize, hidden: usize) -> LayerNodes {
        let mut mat = |r: usize, c: usize, g: &mut Graph| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.normal() * 0.3).collect();
            g.constant(data, vec![r, c]).unwrap()
        };
        let wq = mat(d, d, g);
        let wk = mat(d, d, g);
        let wv = mat(d, d, g);
        let wo = mat(d, d, g);
        let w1 = mat(d, hidden, g);
        let w2 = mat(hidden, d, g);
        LayerNodes {
            ln1_gamma: constant(g, vec![1.0; d], vec![d]),
            ln1_beta: constant(g, vec![0.0; d], vec![d]),
            wq,
            bq: constant(g, vec![0.0; d], vec![d]),
            wk,
            bk: constant(g, vec![0.0; d], vec![d]),
            wv,
            bv: constant(g, vec![0.0; d], vec![d]),
            wo,
            bo: constant(g, vec![0.1; d], vec![d]),
            ln2_gamma: constant(g, vec![1.0; d], vec![d]),
            ln2_beta: constant(g, vec![0.0; d], vec![d]),
            mlp_w1: w1,
            mlp_b1: constant(g, vec![0.0; hidden], vec![hidden]),
            mlp_w2: w2,
            mlp_b2: constant(g, vec![0.0; d], vec![d]),
        }
    }

    fn adapter_hooks(g: &mut Graph, rng: &mut Rng, d: usize, dp: usize, scale: f64, zero_up: bool) -> LayerHooks {
        let wd: Vec<f64> = (0..d * dp).map(|_| rng.normal() * 0.3).collect();
        let wu: Vec<f64> = if zero_up { vec![0.0; dp * d] } else { (0..dp * d).map(|_| rng.normal() * 0.3).collect() };
        LayerHooks {
            adapter: Some(AdapterNodes {
                w_down: constant(g, wd, vec![d, dp]),
                b_down: constant(g, vec![0.0; dp], vec![dp]),
                w_up: constant(g, wu, vec![dp, d]),
                b_up: constant(g, vec![0.0; d], vec![d]),
                scale,
            }),
            ..LayerHooks::default()
        }
    }

    #[test]
    fn adapter_zero_up_is_bitwise_identity() {
        let mut rng = Rng::new(1);
        let mut g = Graph::new();
        let d = 4;
        let layer = test_layer(&mut g, &mut rng, d, 8);
        let x = constant(&mut g, (0..3 * d).map(|_| rng.normal()).collect(), vec![3, d]);
        let plain = transformer_layer(&mut g, x, &layer, 2, &LayerHooks::default()).unwrap();
        let hooks = adapter_hooks(&mut g, &mut rng.clone(), d, 2, 1.0, true);
        let adapted = transformer_layer(&mut g, x, &layer, 2, &hooks).unwrap();
        assert_eq!(g.data(plain.z), g.data(adapted.z));
    }

    #[test]
    fn adapter_scale_zero_is_identity_for_any_weights() {
        let mut rng = Rng::new(2);
        let mut g = Graph::new();
        let d = 4;
        let layer = test_layer(&mut g, &mut rng, d, 8);
        let x = constant(&mut g, (0..3 * d).map(|_| rng.normal()).collect(), vec![3, d]);
        let plain = transformer_layer(&mut g, x, &layer, 2, &LayerHooks::default()).unwrap();
        let hooks = adapter_hooks(&mut g, &mut rng, d, 2, 0.0, false);
        let adapted = transformer_layer(&mut g, x, &layer, 2, &hooks).unwrap();
        for (a, b) in g.data(plain.z).iter().zip(g.data(adapted.z)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adapter_branch_hand_computed() {
        // D=4, D'=2, every weight hand-set
        let mut g = Graph::new();
        let z_data = vec![1.0, -1.0, 0.5, 2.0];
        let wd = vec![
            0.5, -0.1,
            0.2, 0.3,
            -0.4, 0.6,
            0.1, 0.1,
        ]; // [4,2]
        let bd = vec![0.05, -0.05];
        let wu = vec![
            1.0, 0.0, -1.0, 0.5,
            0.2, 0.4, 0.6, -0.2,
        ]; // [2,4]
        let bu = vec![0.01, 0.02, 0.03, 0.04];
        let s = 0.7;
        let z = constant(&mut g, z_data.clone(), vec![1, 4]);
        let nodes = AdapterNodes {
            w_down: constant(&mut g, wd.clone(), vec![4, 2]),
            b_down: constant(&mut g, bd.clone(), vec![2]),
            w_up: constant(&mut g, wu.clone(), vec![2, 4]),
            b_up: constant(&mut g, bu.clone(), vec![4]),
            scale: s,
        };
        let branch = adapter_branch(&mut g, z, &nodes).unwrap();

        // reference arithmetic
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let mut h = [0.0f64; 2];
        for j in 0..2 {
            for i in 0..4 {
                h[j] += z_data[i] * wd[i * 2 + j];
            }
            h[j] = gelu(h[j] + bd[j]);
        }
        for j in 0..4 {
            let mut u = bu[j];
            for i in 0..2 {
                u += h[i] * wu[i * 4 + j];
            }
            let want = s * u;
            let got = g.data(branch)[j];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn adapter_scale_rescales_only_the_branch() {
        // out(s=a) - out(s=0) == a * (out(s=1) - out(s=0))
        let d = 4;
        let run = |s: f64| -> Vec<f64> {
            let mut rng = Rng::new(3);
            let mut g = Graph::new();
            let layer = test_layer(&mut g, &mut rng, d, 8);
            let x = constant(&mut g, (0..2 * d).map(|_| rng.normal()).collect(), vec![2, d]);
            let hooks = adapter_hooks(&mut g, &mut Rng::new(17), d, 2, s, false);
            let out = transformer_layer(&mut g, x, &layer, 2, &hooks).unwrap();
            g.data(out.z).to_vec()
        };
        let at0 = run(0.0);
        let at1 = run(1.0);
        let a = 2.75;
        let at_a = run(a);
        for i in 0..at0.len() {
            let lhs = at_a[i] - at0[i];
            let rhs = a * (at1[i] - at0[i]);
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn lora_zero_b_matches_plain_projection() {
        let mut rng = Rng::new(4);
        let mut g = Graph::new();
        let (m, d, r) = (3, 4, 2);
        let x = constant(&mut g, (0..m * d).map(|_| rng.normal()).collect(), vec![m, d]);
        let w = constant(&mut g, (0..d * d).map(|_| rng.normal()).collect(), vec![d, d]);
        let b = constant(&mut g, (0..d).map(|_| rng.normal()).collect(), vec![d]);
        let a = constant(&mut g, (0..d * r).map(|_| rng.normal()).collect(), vec![d, r]);
        let bm = constant(&mut g, vec![0.0; r * d], vec![r, d]);
        let with = lora_forward(&mut g, x, w, b, a, bm).unwrap();
        let base = {
            let y = g.matmul(x, w).unwrap();
            g.add_bias(y, b).unwrap()
        };
        assert_eq!(g.data(with), g.data(base));
    }

    #[test]
    fn lora_merge_algebraic_identity() {
        // x W + (x A) B == x (W + A B) within 1e-10
        let mut rng = Rng::new(5);
        let (m, d, r) = (4, 6, 2);
        let xd: Vec<f64> = (0..m * d).map(|_| rng.normal()).collect();
        let wd: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        let bd: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let ad: Vec<f64> = (0..d * r).map(|_| rng.normal()).collect();
        let bmd: Vec<f64> = (0..r * d).map(|_| rng.normal()).collect();

        let mut g = Graph::new();
        let x = constant(&mut g, xd.clone(), vec![m, d]);
        let w = constant(&mut g, wd.clone(), vec![d, d]);
        let b = constant(&mut g, bd.clone(), vec![d]);
        let a = constant(&mut g, ad.clone(), vec![d, r]);
        let bm = constant(&mut g, bmd.clone(), vec![r, d]);
        let unmerged = lora_forward(&mut g, x, w, b, a, bm).unwrap();

        let mut ab = vec![0.0; d * d];
        crate::tensor::matmul_seq(&ad, &bmd, d, r, d, &mut ab);
        let merged_w: Vec<f64> = wd.iter().zip(&ab).map(|(w, u)| w + u).collect();
        let wm = constant(&mut g, merged_w, vec![d, d]);
        let merged = {
            let y = g.matmul(x, wm).unwrap();
            g.add_bias(y, b).unwrap()
        };
        for (u, v) in g.data(unmerged).iter().zip(g.data(merged)) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }

    #[test]
    fn lora_full_rank_degenerate_case() {
        // rank = d with A = I, B = delta: x W + x delta
        let mut rng = Rng::new(6);
        let (m, d) = (2, 3);
        let mut g = Graph::new();
        let x = constant(&mut g, (0..m * d).map(|_| rng.normal()).collect(), vec![m, d]);
        let w = constant(&mut g, (0..d * d).map(|_| rng.normal()).collect(), vec![d, d]);
        let b = constant(&mut g, vec![0.0; d], vec![d]);
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let a = constant(&mut g, eye, vec![d, d]);
        let delta_data: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        let delta = constant(&mut g, delta_data.clone(), vec![d, d]);
        let unmerged = lora_forward(&mut g, x, w, b, a, delta).unwrap();
        let wd = g.data(w).to_vec();
        let merged_w: Vec<f64> = wd.iter().zip(&delta_data).map(|(w, u)| w + u).collect();
        let wm = constant(&mut g, merged_w, vec![d, d]);
        let want = {
            let y = g.matmul(x, wm).unwrap();
            g.add_bias(y, b).unwrap()
        };
        for (u, v) in g.data(unmerged).iter().zip(g.data(want)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ia3_ones_is_bitwise_identity() {
        let mut rng = Rng::new(7);
        let mut g = Graph::new();
        let d = 4;
        let layer = test_layer(&mut g, &mut rng, d, 8);
        let x = constant(&mut g, (0..3 * d).map(|_| rng.normal()).collect(), vec![3, d]);
        let plain = transformer_layer(&mut g, x, &layer, 2, &LayerHooks::default()).unwrap();
        let hooks = LayerHooks {
            ia3: Some(Ia3Nodes {
                l_k: Some(constant(&mut g, vec![1.0; d], vec![1, d])),
                l_v: Some(constant(&mut g, vec![1.0; d], vec![1, d])),
                l_mlp: Some(constant(&mut g, vec![1.0; 8], vec![1, 8])),
            }),
            ..LayerHooks::default()
        };
        let scaled = transformer_layer(&mut g, x, &layer, 2, &hooks).unwrap();
        assert_eq!(g.data(plain.z), g.data(scaled.z));
    }

    #[test]
    fn ia3_zero_values_leave_only_output_bias() {
        let mut rng = Rng::new(8);
        let mut g = Graph::new();
        let d = 4;
        let layer = test_layer(&mut g, &mut rng, d, 8);
        let x = constant(&mut g, (0..3 * d).map(|_| rng.normal()).collect(), vec![3, d]);
        let hooks = LayerHooks {
            ia3: Some(Ia3Nodes {
                l_k: Some(constant(&mut g, vec![1.0; d], vec![1, d])),
                l_v: Some(constant(&mut g, vec![0.0; d], vec![1, d])),
                l_mlp: Some(constant(&mut g, vec![1.0; 8], vec![1, 8])),
            }),
            ..LayerHooks::default()
        };
        let out = attention(&mut g, x, &layer, 2, &hooks).unwrap();
        let bo = g.data(layer.bo).to_vec();
        for row in g.data(out.out).chunks(d) {
            assert_eq!(row, &bo[..]);
        }
    }

    #[test]
    fn ia3_key_scaling_hand_oracle() {
        // 2 tokens, 1 head, l_k = 2: scores double before softmax
        let mut g = Graph::new();
        let d = 2;
        let x = constant(&mut g, vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let layer = LayerNodes {
            ln1_gamma: constant(&mut g, vec![1.0; d], vec![d]),
            ln1_beta: constant(&mut g, vec![0.0; d], vec![d]),
            wq: constant(&mut g, eye.clone(), vec![2, 2]),
            bq: constant(&mut g, vec![0.0; 2], vec![2]),
            wk: constant(&mut g, eye.clone(), vec![2, 2]),
            bk: constant(&mut g, vec![0.0; 2], vec![2]),
            wv: constant(&mut g, eye.clone(), vec![2, 2]),
            bv: constant(&mut g, vec![0.0; 2], vec![2]),
            wo: constant(&mut g, eye.clone(), vec![2, 2]),
            bo: constant(&mut g, vec![0.0; 2], vec![2]),
            ln2_gamma: constant(&mut g, vec![1.0; d], vec![d]),
            ln2_beta: constant(&mut g, vec![0.0; d], vec![d]),
            mlp_w1: constant(&mut g, vec![0.0; 4], vec![2, 2]),
            mlp_b1: constant(&mut g, vec![0.0; 2], vec![2]),
            mlp_w2: constant(&mut g, vec![0.0; 4], vec![2, 2]),
            mlp_b2: constant(&mut g, vec![0.0; 2], vec![2]),
        };
        let hooks = LayerHooks {
            ia3: Some(Ia3Nodes {
                l_k: Some(constant(&mut g, vec![2.0; d], vec![1, d])),
                l_v: Some(constant(&mut g, vec![1.0; d], vec![1, d])),
                l_mlp: Some(constant(&mut g, vec![1.0; 2], vec![1, 2])),
            }),
            ..LayerHooks::default()
        };
        let out = attention(&mut g, x, &layer, 1, &hooks).unwrap();
        // reference: q = x, k = 2x, v = x; scores = q k^T / sqrt(2)
        let scale = 1.0 / (2.0f64).sqrt();
        for i in 0..2 {
            let q = [x_at(i, 0), x_at(i, 1)];
            let s0 = (q[0] * 2.0 * x_at(0, 0) + q[1] * 2.0 * x_at(0, 1)) * scale;
            let s1 = (q[0] * 2.0 * x_at(1, 0) + q[1] * 2.0 * x_at(1, 1)) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let want = [
                a0 * x_at(0, 0) + a1 * x_at(1, 0),
                a0 * x_at(0, 1) + a1 * x_at(1, 1),
            ];
            for j in 0..2 {
                let got = g.data(out.out)[i * 2 + j];
                assert!((got - want[j]).abs() < 1e-12, "{got} vs {}", want[j]);
            }
        }

        fn x_at(i: usize, j: usize) -> f64 {
            [[1.0, 0.0], [0.0, 1.0]][i][j]
        }
    }

    #[test]
    fn prefix_output_length_matches_input() {
        let mut rng = Rng::new(9);
        for prefix_len in [1usize, 3, 7] {
            let mut g = Graph::new();
            let d = 4;
            let layer = test_layer(&mut g, &mut rng, d, 8);
            let x = constant(&mut g, (0..5 * d).map(|_| rng.normal()).collect(), vec![5, d]);
            let prefix = constant(&mut g, (0..prefix_len * d).map(|_| rng.normal()).collect(), vec![prefix_len, d]);
            let hooks = LayerHooks { prefix: Some(prefix), ..LayerHooks::default() };
            let out = transformer_layer(&mut g, x, &layer, 2, &hooks).unwrap();
            assert_eq!(g.shape(out.z), &[5, d]);
            // attention ran over the extended sequence
            assert_eq!(g.shape(out.probs[0]), &[5 + prefix_len, 5 + prefix_len]);
        }
    }

    #[test]
    fn prefix_equal_token_splits_attention_mass() {
        let mut rng = Rng::new(10);
        let mut g = Graph::new();
        let d = 4;
        let layer = test_layer(&mut g, &mut rng, d, 8);
        let xdata: Vec<f64> = (0..2 * d).map(|_| rng.normal()).collect();
        let x = constant(&mut g, xdata.clone(), vec![2, d]);
        // prefix token identical to token 0
        let prefix = constant(&mut g, xdata[..d].to_vec(), vec![1, d]);
        let hooks = LayerHooks { prefix: Some(prefix), ..LayerHooks::default() };
        let out = transformer_layer(&mut g, x, &layer, 2, &hooks).unwrap();
        for &p in &out.probs {
            // keys 0 (prefix) and 1 (token 0) are identical, so every query
            // gives them exactly equal attention
            let rows = g.shape(p)[1];
            for row in g.data(p).chunks(rows) {
                assert_eq!(row[0], row[1], "identical keys must split mass equally");
            }
        }
    }

    #[test]
    fn partition_counts_match_enumeration_oracle() {
        use crate::model::build_model;
        // adapter at D=384, r=6: 2*D*D' + D' + D = 49,600 scalars per layer
        let vit = crate::vit::ViTConfig { image_size: 32, patch_size: 16, depth: 2, dim: 384, heads: 6, mlp_ratio: 4 };
        let peft = PeftConfig::default();
        let model = build_model(&vit, &peft, 2, 1).unwrap();
        let adapter_per_layer: usize = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("peft.layer0.adapter."))
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        assert_eq!(adapter_per_layer, 49_600);

        // lora rank 1 on all four projections: 4 * (D + D) = 3,072 per layer
        let mut lora_cfg = PeftConfig::default();
        lora_cfg.method = PeftMethod::Lora;
        lora_cfg.lora_rank = 1;
        let model = build_model(&vit, &lora_cfg, 2, 1).unwrap();
        let lora_per_layer: usize = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("peft.layer1.lora."))
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        assert_eq!(lora_per_layer, 3_072);

        // report counts equal an independent walk over the registry
        let report = partition_report(&model);
        let frozen: usize = model.params().iter().filter(|p| p.frozen).map(|p| p.shape.iter().product::<usize>()).sum();
        let trainable: usize = model.params().iter().filter(|p| !p.frozen).map(|p| p.shape.iter().product::<usize>()).sum();
        assert_eq!(report.frozen_count, frozen);
        assert_eq!(report.trainable_count, trainable);
        assert!((report.ratio - trainable as f64 / (frozen + trainable) as f64).abs() < 1e-15);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("adapter".parse::<PeftMethod>().unwrap(), PeftMethod::Adapter);
        assert_eq!("linear-probe".parse::<PeftMethod>().unwrap(), PeftMethod::LinearProbe);
        assert!("turbo".parse::<PeftMethod>().is_err());
    }

    #[test]
    fn bottleneck_rounding() {
        let mut cfg = PeftConfig::default();
        cfg.adapter_r = 6;
        assert_eq!(cfg.bottleneck_dim(384), 64);
        assert_eq!(cfg.bottleneck_dim(32), 5); // round(32/6)
        cfg.adapter_r = 100;
        assert_eq!(cfg.bottleneck_dim(8), 1); // clamped to 1
    }

    #[test]
    fn prefix_len_zero_rejected() {
        let mut cfg = PeftConfig::default();
        cfg.method = PeftMethod::Prefix;
        cfg.prefix_len = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn duplicate_targets_rejected() {
        let mut cfg = PeftConfig::default();
        cfg.method = PeftMethod::Ia3;
        cfg.ia3_targets = vec![Ia3Target::K, Ia3Target::K];
        assert!(cfg.validate().is_err());
        let mut cfg = PeftConfig::default();
        cfg.method = PeftMethod::Lora;
        cfg.lora_targets = vec![LoraTarget::Wq, LoraTarget::Wq];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_ia3_targets_build_and_stay_identity() {
        use crate::model::{build_model, GradMode};
        let vit = crate::vit::ViTConfig { image_size: 16, patch_size: 8, depth: 1, dim: 8, heads: 2, mlp_ratio: 2 };
        let mut cfg = PeftConfig::default();
        cfg.method = PeftMethod::Ia3;
        cfg.ia3_targets = vec![Ia3Target::V];
        let model = build_model(&vit, &cfg, 2, 4).unwrap();
        let ia3_params: Vec<&str> = model
            .params()
            .iter()
            .filter(|p| p.name.contains(".ia3."))
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(ia3_params, vec!["peft.layer0.ia3.l_v"]);
        // ones-initialized scaling on a single target is still an identity
        let mut probe_cfg = PeftConfig::default();
        probe_cfg.method = PeftMethod::LinearProbe;
        let probe = build_model(&vit, &probe_cfg, 2, 4).unwrap();
        let mut rng = Rng::new(61);
        let a: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.next_f64()).collect();
        let logits = |m: &crate::model::Model| {
            let mut g = Graph::new();
            let bound = m.bind(&mut g, GradMode::None).unwrap();
            let out = m.forward_channels(&mut g, &bound, &[&a, &b]).unwrap();
            g.data(out.logits).to_vec()
        };
        assert_eq!(logits(&model), logits(&probe));
    }
}
