//! Model assembly: a flat registry of named parameters (with frozen flags)
//! plus the wiring that turns them into graph leaves and runs the full
//! pipeline: shared encoder -> temporal fusion -> decoder.

use crate::decoder::{self, DecoderNodes, StageNodes};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionNodes};
use crate::peft::{AdapterNodes, Ia3Nodes, Ia3Target, LayerHooks, LoraNodes, LoraPair, LoraTarget, PeftConfig, PeftMethod};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId};
use crate::vit::{self, BackboneNodes, LayerNodes, ViTConfig};
use std::collections::HashMap;

const INIT_SIGMA: f64 = 0.02;

/// A named tensor with a frozen flag. Frozen parameters are never written by
/// the optimizer and stay bit-identical across training.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Evaluation: no gradients anywhere.
    None,
    /// Training: gradients for non-frozen parameters.
    Trainable,
    /// Gradient checking: gradients for everything.
    All,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    TruncNormal,
    /// Truncated normal with an explicit spread (newly added heads use
    /// fan-scaled widths; the backbone keeps the ViT-style 0.02).
    TruncNormalSigma(f64),
    Normal,
    Zeros,
    Ones,
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_gamma: usize,
    ln1_beta: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

#[derive(Debug, Clone)]
struct BackboneIdx {
    patch_weight: usize,
    patch_bias: usize,
    cls_token: usize,
    pos_embed: usize,
    layers: Vec<LayerIdx>,
}

#[derive(Debug, Clone)]
struct AdapterIdx {
    w_down: usize,
    b_down: usize,
    w_up: usize,
    b_up: usize,
}

#[derive(Debug, Clone, Default)]
struct LoraLayerIdx {
    q: Option<(usize, usize)>,
    k: Option<(usize, usize)>,
    v: Option<(usize, usize)>,
    o: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default)]
struct Ia3Idx {
    l_k: Option<usize>,
    l_v: Option<usize>,
    l_mlp: Option<usize>,
}

#[derive(Debug, Clone)]
enum PeftIdx {
    None,
    Adapter(Vec<AdapterIdx>),
    Lora(Vec<LoraLayerIdx>),
    Ia3(Vec<Ia3Idx>),
    Prefix(Vec<usize>),
}

#[derive(Debug, Clone)]
struct FusionIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    z_tp: usize,
    z_m: usize,
    ln1_gamma: usize,
    ln1_beta: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    ln3_gamma: usize,
    ln3_beta: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

#[derive(Debug, Clone)]
struct StageIdx {
    kernel: usize,
    bias: usize,
    norm_gamma: usize,
    norm_beta: usize,
}

#[derive(Debug, Clone)]
struct DecoderIdx {
    stages: Vec<StageIdx>,
    head_weight: usize,
    head_bias: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub vit: ViTConfig,
    pub peft: PeftConfig,
    /// Temporal capacity: rows of the temporal position embedding.
    pub frames: usize,
    pub seed: u64,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    backbone: BackboneIdx,
    peft_idx: PeftIdx,
    fusion: FusionIdx,
    decoder: DecoderIdx,
}

struct Registry {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, frozen: bool, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        match init {
            Init::Zeros => {}
            Init::Ones => data.iter_mut().for_each(|v| *v = 1.0),
            Init::TruncNormal => Rng::from_name(self.seed, &name).fill_trunc_normal(&mut data, INIT_SIGMA),
            Init::TruncNormalSigma(s) => Rng::from_name(self.seed, &name).fill_trunc_normal(&mut data, s),
            Init::Normal => Rng::from_name(self.seed, &name).fill_normal(&mut data, INIT_SIGMA),
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, data, shape, frozen });
        id
    }
}

/// Build a model: backbone parameters frozen for every method except `full`;
/// tuning parameters, fusion head and decoder trainable. `linear_probe` adds
/// no tuning parameters at all.
pub fn build_model(vit: &ViTConfig, peft: &PeftConfig, frames: usize, seed: u64) -> Result<Model> {
    vit.validate()?;
    peft.validate()?;
    if frames < 1 {
        return Err(Error::Config("model needs at least one frame".into()));
    }
    let d = vit.dim;
    let hidden = vit.mlp_ratio * d;
    let n = vit.num_patches();
    let freeze_backbone = peft.method != PeftMethod::Full;
    let mut reg = Registry { params: Vec::new(), index: HashMap::new(), seed };

    let patch_weight = reg.add("backbone.patch_embed.weight".into(), vec![3 * vit.patch_size * vit.patch_size, d], freeze_backbone, Init::TruncNormal);
    let patch_bias = reg.add("backbone.patch_embed.bias".into(), vec![d], freeze_backbone, Init::Zeros);
    let cls_token = reg.add("backbone.cls_token".into(), vec![1, d], freeze_backbone, Init::TruncNormal);
    let pos_embed = reg.add("backbone.pos_embed".into(), vec![n + 1, d], freeze_backbone, Init::TruncNormal);
    let mut layers = Vec::with_capacity(vit.depth);
    for i in 0..vit.depth {
        let p = |field: &str| format!("backbone.layer{i}.{field}");
        layers.push(LayerIdx {
            ln1_gamma: reg.add(p("ln1.gamma"), vec![d], freeze_backbone, Init::Ones),
            ln1_beta: reg.add(p("ln1.beta"), vec![d], freeze_backbone, Init::Zeros),
            wq: reg.add(p("attn.wq"), vec![d, d], freeze_backbone, Init::TruncNormal),
            bq: reg.add(p("attn.bq"), vec![d], freeze_backbone, Init::Zeros),
            wk: reg.add(p("attn.wk"), vec![d, d], freeze_backbone, Init::TruncNormal),
            bk: reg.add(p("attn.bk"), vec![d], freeze_backbone, Init::Zeros),
            wv: reg.add(p("attn.wv"), vec![d, d], freeze_backbone, Init::TruncNormal),
            bv: reg.add(p("attn.bv"), vec![d], freeze_backbone, Init::Zeros),
            wo: reg.add(p("attn.wo"), vec![d, d], freeze_backbone, Init::TruncNormal),
            bo: reg.add(p("attn.bo"), vec![d], freeze_backbone, Init::Zeros),
            ln2_gamma: reg.add(p("ln2.gamma"), vec![d], freeze_backbone, Init::Ones),
            ln2_beta: reg.add(p("ln2.beta"), vec![d], freeze_backbone, Init::Zeros),
            mlp_w1: reg.add(p("mlp.w1"), vec![d, hidden], freeze_backbone, Init::TruncNormal),
            mlp_b1: reg.add(p("mlp.b1"), vec![hidden], freeze_backbone, Init::Zeros),
            mlp_w2: reg.add(p("mlp.w2"), vec![hidden, d], freeze_backbone, Init::TruncNormal),
            mlp_b2: reg.add(p("mlp.b2"), vec![d], freeze_backbone, Init::Zeros),
        });
    }
    let backbone = BackboneIdx { patch_weight, patch_bias, cls_token, pos_embed, layers };

    let peft_idx = match peft.method {
        PeftMethod::LinearProbe | PeftMethod::Full => PeftIdx::None,
        PeftMethod::Adapter => {
            let dp = peft.bottleneck_dim(d);
            let mut v = Vec::with_capacity(vit.depth);
            for i in 0..vit.depth {
                let p = |field: &str| format!("peft.layer{i}.adapter.{field}");
                v.push(AdapterIdx {
                    w_down: reg.add(p("w_down"), vec![d, dp], false, Init::TruncNormal),
                    b_down: reg.add(p("b_down"), vec![dp], false, Init::Zeros),
                    w_up: reg.add(p("w_up"), vec![dp, d], false, Init::Zeros),
                    b_up: reg.add(p("b_up"), vec![d], false, Init::Zeros),
                });
            }
            PeftIdx::Adapter(v)
        }
        PeftMethod::Lora => {
            let r = peft.lora_rank;
            let mut v = Vec::with_capacity(vit.depth);
            for i in 0..vit.depth {
                let mut layer = LoraLayerIdx::default();
                for target in &peft.lora_targets {
                    let tag = match target {
                        LoraTarget::Wq => "wq",
                        LoraTarget::Wk => "wk",
                        LoraTarget::Wv => "wv",
                        LoraTarget::Wo => "wo",
                    };
                    let a = reg.add(format!("peft.layer{i}.lora.{tag}.a"), vec![d, r], false, Init::Normal);
                    let b = reg.add(format!("peft.layer{i}.lora.{tag}.b"), vec![r, d], false, Init::Zeros);
                    match target {
                        LoraTarget::Wq => layer.q = Some((a, b)),
                        LoraTarget::Wk => layer.k = Some((a, b)),
                        LoraTarget::Wv => layer.v = Some((a, b)),
                        LoraTarget::Wo => layer.o = Some((a, b)),
                    }
                }
                v.push(layer);
            }
            PeftIdx::Lora(v)
        }
        PeftMethod::Ia3 => {
            let mut v = Vec::with_capacity(vit.depth);
            for i in 0..vit.depth {
                let p = |field: &str| format!("peft.layer{i}.ia3.{field}");
                let mut idx = Ia3Idx::default();
                for target in &peft.ia3_targets {
                    match target {
                        Ia3Target::K => idx.l_k = Some(reg.add(p("l_k"), vec![1, d], false, Init::Ones)),
                        Ia3Target::V => idx.l_v = Some(reg.add(p("l_v"), vec![1, d], false, Init::Ones)),
                        Ia3Target::Mlp => idx.l_mlp = Some(reg.add(p("l_mlp"), vec![1, hidden], false, Init::Ones)),
                    }
                }
                v.push(idx);
            }
            PeftIdx::Ia3(v)
        }
        PeftMethod::Prefix => {
            let mut v = Vec::with_capacity(vit.depth);
            for i in 0..vit.depth {
                v.push(reg.add(format!("peft.layer{i}.prefix.tokens"), vec![peft.prefix_len, d], false, Init::TruncNormal));
            }
            PeftIdx::Prefix(v)
        }
    };

    let f = |field: &str| format!("fusion.{field}");
    let head_w = Init::TruncNormalSigma(xavier(d, d));
    let fusion = FusionIdx {
        wq: reg.add(f("query.weight"), vec![d, d], false, head_w),
        bq: reg.add(f("query.bias"), vec![d], false, Init::Zeros),
        wk: reg.add(f("key.weight"), vec![d, d], false, head_w),
        bk: reg.add(f("key.bias"), vec![d], false, Init::Zeros),
        wv: reg.add(f("value.weight"), vec![d, d], false, head_w),
        bv: reg.add(f("value.bias"), vec![d], false, Init::Zeros),
        wo: reg.add(f("out.weight"), vec![d, d], false, head_w),
        bo: reg.add(f("out.bias"), vec![d], false, Init::Zeros),
        z_tp: reg.add(f("z_tp"), vec![frames, d], false, Init::TruncNormal),
        z_m: reg.add(f("z_m"), vec![1, d], false, Init::TruncNormal),
        ln1_gamma: reg.add(f("ln1.gamma"), vec![d], false, Init::Ones),
        ln1_beta: reg.add(f("ln1.beta"), vec![d], false, Init::Zeros),
        ln2_gamma: reg.add(f("ln2.gamma"), vec![d], false, Init::Ones),
        ln2_beta: reg.add(f("ln2.beta"), vec![d], false, Init::Zeros),
        ln3_gamma: reg.add(f("ln3.gamma"), vec![d], false, Init::Ones),
        ln3_beta: reg.add(f("ln3.beta"), vec![d], false, Init::Zeros),
        mlp_w1: reg.add(f("mlp.w1"), vec![d, hidden], false, Init::TruncNormalSigma(xavier(d, hidden))),
        mlp_b1: reg.add(f("mlp.b1"), vec![hidden], false, Init::Zeros),
        mlp_w2: reg.add(f("mlp.w2"), vec![hidden, d], false, Init::TruncNormalSigma(xavier(hidden, d))),
        mlp_b2: reg.add(f("mlp.b2"), vec![d], false, Init::Zeros),
    };

    let chans = decoder::stage_channels(d, vit.patch_size)?;
    let mut stages = Vec::with_capacity(chans.len());
    for (i, (cin, cout)) in chans.iter().enumerate() {
        let p = |field: &str| format!("decoder.stage{i}.{field}");
        let kernel_init = Init::TruncNormalSigma((2.0 / (9 * cin) as f64).sqrt());
        stages.push(StageIdx {
            kernel: reg.add(p("conv.weight"), vec![*cout, *cin, 3, 3], false, kernel_init),
            bias: reg.add(p("conv.bias"), vec![*cout], false, Init::Zeros),
            norm_gamma: reg.add(p("norm.gamma"), vec![*cout], false, Init::Ones),
            norm_beta: reg.add(p("norm.beta"), vec![*cout], false, Init::Zeros),
        });
    }
    let last = chans.last().map_or(d, |&(_, c)| c);
    let head_weight = reg.add("decoder.head.weight".into(), vec![2, last, 1, 1], false, Init::TruncNormalSigma(xavier(last, 2)));
    let head_bias = reg.add("decoder.head.bias".into(), vec![2], false, Init::Zeros);
    // changed pixels are rare; bias the head toward "unchanged" at the start
    // so the focal/Jaccard combination is not flooded with false positives
    reg.params[head_bias].data[1] = -2.0;
    let decoder = DecoderIdx { stages, head_weight, head_bias };

    Ok(Model {
        vit: vit.clone(),
        peft: peft.clone(),
        frames,
        seed,
        params: reg.params,
        index: reg.index,
        backbone,
        peft_idx,
        fusion,
        decoder,
    })
}

/// All parameter leaves of one graph, plus the typed node bundles the
/// forward functions consume.
pub struct Bound {
    pub leaves: Vec<NodeId>,
    pub backbone: BackboneNodes,
    pub hooks: Vec<LayerHooks>,
    pub fusion: FusionNodes,
    pub decoder: DecoderNodes,
}

pub struct ForwardOut {
    /// Two-class logits [2,H,W].
    pub logits: NodeId,
    /// MCA attention probabilities [N,T].
    pub mca_probs: NodeId,
    /// Backbone attention probabilities (per frame, layer, head).
    pub attn_probs: Vec<NodeId>,
}

impl Model {
    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.params[i]),
            None => None,
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Round trainable parameters to checkpoint (f32) precision in place, so
    /// validation metrics are computed on exactly the values a checkpoint
    /// would reproduce.
    pub fn snap_trainable(&mut self) {
        for p in self.params.iter_mut() {
            if !p.frozen {
                for v in p.data.iter_mut() {
                    *v = (*v as f32) as f64;
                }
            }
        }
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| !self.params[i].frozen).collect()
    }

    /// Materialize every parameter as a graph leaf and wire up node bundles.
    pub fn bind(&self, g: &mut Graph, mode: GradMode) -> Result<Bound> {
        self.bind_with(g, mode, &[])
    }

    /// Like [`Model::bind`] but with selected parameters substituted by
    /// existing graph nodes (used by gradient checks to differentiate with
    /// respect to chosen parameters).
    pub fn bind_with(&self, g: &mut Graph, mode: GradMode, overrides: &[(usize, NodeId)]) -> Result<Bound> {
        let leaves: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if let Some(&(_, node)) = overrides.iter().find(|(pi, _)| *pi == i) {
                    return Ok(node);
                }
                let track = match mode {
                    GradMode::None => false,
                    GradMode::Trainable => !p.frozen,
                    GradMode::All => true,
                };
                g.leaf(p.data.clone(), p.shape.clone(), track)
            })
            .collect::<Result<_>>()?;

        let bb = &self.backbone;
        let backbone = BackboneNodes {
            patch_weight: leaves[bb.patch_weight],
            patch_bias: leaves[bb.patch_bias],
            cls_token: leaves[bb.cls_token],
            pos_embed: leaves[bb.pos_embed],
            layers: bb
                .layers
                .iter()
                .map(|l| LayerNodes {
                    ln1_gamma: leaves[l.ln1_gamma],
                    ln1_beta: leaves[l.ln1_beta],
                    wq: leaves[l.wq],
                    bq: leaves[l.bq],
                    wk: leaves[l.wk],
                    bk: leaves[l.bk],
                    wv: leaves[l.wv],
                    bv: leaves[l.bv],
                    wo: leaves[l.wo],
                    bo: leaves[l.bo],
                    ln2_gamma: leaves[l.ln2_gamma],
                    ln2_beta: leaves[l.ln2_beta],
                    mlp_w1: leaves[l.mlp_w1],
                    mlp_b1: leaves[l.mlp_b1],
                    mlp_w2: leaves[l.mlp_w2],
                    mlp_b2: leaves[l.mlp_b2],
                })
                .collect(),
        };

        let hooks: Vec<LayerHooks> = (0..self.vit.depth)
            .map(|i| match &self.peft_idx {
                PeftIdx::None => LayerHooks::default(),
                PeftIdx::Adapter(v) => LayerHooks {
                    adapter: Some(AdapterNodes {
                        w_down: leaves[v[i].w_down],
                        b_down: leaves[v[i].b_down],
                        w_up: leaves[v[i].w_up],
                        b_up: leaves[v[i].b_up],
                        scale: self.peft.adapter_s,
                    }),
                    ..LayerHooks::default()
                },
                PeftIdx::Lora(v) => {
                    let pair = |t: Option<(usize, usize)>| t.map(|(a, b)| LoraPair { a: leaves[a], b: leaves[b] });
                    LayerHooks {
                        lora: Some(LoraNodes {
                            q: pair(v[i].q),
                            k: pair(v[i].k),
                            v: pair(v[i].v),
                            o: pair(v[i].o),
                        }),
                        ..LayerHooks::default()
                    }
                }
                PeftIdx::Ia3(v) => LayerHooks {
                    ia3: Some(Ia3Nodes {
                        l_k: v[i].l_k.map(|p| leaves[p]),
                        l_v: v[i].l_v.map(|p| leaves[p]),
                        l_mlp: v[i].l_mlp.map(|p| leaves[p]),
                    }),
                    ..LayerHooks::default()
                },
                PeftIdx::Prefix(v) => LayerHooks { prefix: Some(leaves[v[i]]), ..LayerHooks::default() },
            })
            .collect();

        let fx = &self.fusion;
        let fusion = FusionNodes {
            wq: leaves[fx.wq],
            bq: leaves[fx.bq],
            wk: leaves[fx.wk],
            bk: leaves[fx.bk],
            wv: leaves[fx.wv],
            bv: leaves[fx.bv],
            wo: leaves[fx.wo],
            bo: leaves[fx.bo],
            z_tp: leaves[fx.z_tp],
            z_m: leaves[fx.z_m],
            ln1_gamma: leaves[fx.ln1_gamma],
            ln1_beta: leaves[fx.ln1_beta],
            ln2_gamma: leaves[fx.ln2_gamma],
            ln2_beta: leaves[fx.ln2_beta],
            ln3_gamma: leaves[fx.ln3_gamma],
            ln3_beta: leaves[fx.ln3_beta],
            mlp_w1: leaves[fx.mlp_w1],
            mlp_b1: leaves[fx.mlp_b1],
            mlp_w2: leaves[fx.mlp_w2],
            mlp_b2: leaves[fx.mlp_b2],
        };

        let dx = &self.decoder;
        let decoder = DecoderNodes {
            stages: dx
                .stages
                .iter()
                .map(|s| StageNodes {
                    kernel: leaves[s.kernel],
                    bias: leaves[s.bias],
                    norm_gamma: leaves[s.norm_gamma],
                    norm_beta: leaves[s.norm_beta],
                })
                .collect(),
            head_weight: leaves[dx.head_weight],
            head_bias: leaves[dx.head_bias],
        };

        Ok(Bound { leaves, backbone, hooks, fusion, decoder })
    }

    /// Full pipeline on already-created frame nodes (each [3,H,W]).
    pub fn forward(&self, g: &mut Graph, bound: &Bound, frames: &[NodeId]) -> Result<ForwardOut> {
        let out = vit::backbone_forward(g, frames, &self.vit, &bound.backbone, &bound.hooks)?;
        let fused = fusion::fuse(g, &out.frames, &bound.fusion, self.vit.grid())?;
        let logits = decoder::decode(g, fused.feature, &bound.decoder, self.vit.patch_size)?;
        Ok(ForwardOut { logits, mca_probs: fused.probs, attn_probs: out.probs })
    }

    /// Convenience: create constant image leaves from raw channel data and run.
    pub fn forward_channels(&self, g: &mut Graph, bound: &Bound, frames: &[&[f64]]) -> Result<ForwardOut> {
        let hw = self.vit.image_size;
        let ids: Vec<NodeId> = frames
            .iter()
            .map(|f| g.constant(f.to_vec(), vec![3, hw, hw]))
            .collect::<Result<_>>()?;
        self.forward(g, bound, &ids)
    }

    /// Fold every LoRA update into the frozen projections: W <- W + A B.
    /// Returns a tuning-free model that computes the merged forward.
    pub fn merge_lora(&self) -> Result<Model> {
        let lora = match &self.peft_idx {
            PeftIdx::Lora(v) => v.clone(),
            _ => return Err(Error::Config("merge_lora requires a lora model".into())),
        };
        let mut probe_cfg = self.peft.clone();
        probe_cfg.method = PeftMethod::LinearProbe;
        let mut merged = build_model(&self.vit, &probe_cfg, self.frames, self.seed)?;
        // same seed + name-derived init streams => identical base weights
        for (i, layer) in lora.iter().enumerate() {
            let targets = [
                (layer.q, format!("backbone.layer{i}.attn.wq")),
                (layer.k, format!("backbone.layer{i}.attn.wk")),
                (layer.v, format!("backbone.layer{i}.attn.wv")),
                (layer.o, format!("backbone.layer{i}.attn.wo")),
            ];
            for (pair, wname) in targets {
                let Some((ai, bi)) = pair else { continue };
                let a = &self.params[ai];
                let b = &self.params[bi];
                let d = a.shape[0];
                let r = a.shape[1];
                let k = b.shape[1];
                let mut delta = vec![0.0; d * k];
                crate::tensor::matmul_seq(&a.data, &b.data, d, r, k, &mut delta);
                let w = merged
                    .param_mut(&wname)
                    .ok_or_else(|| Error::Config(format!("missing projection {wname}")))?;
                for (wv, dv) in w.data.iter_mut().zip(&delta) {
                    *wv += dv;
                }
            }
        }
        // merged weights differ from the pristine frozen checkpoint
        for p in merged.params_mut() {
            if p.name.contains(".attn.w") {
                p.frozen = false;
            }
        }
        Ok(merged)
    }
}
