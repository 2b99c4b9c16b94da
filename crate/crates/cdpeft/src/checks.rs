//! Gradient-check registry: every differentiable operation, the composite
//! blocks, and the end-to-end model against central finite differences.

use crate::decoder;
use crate::error::Result;
use crate::fusion::{self, FusionNodes};
use crate::model::{build_model, GradMode};
use crate::peft::{self, AdapterNodes, LayerHooks, PeftConfig, PeftMethod};
use crate::rng::Rng;
use crate::tensor::{grad_check, Graph, GradCheckInput, NodeId};
use crate::train::focal_jaccard_loss;
use crate::vit::{self, LayerNodes, ViTConfig};

pub const FD_EPS: f64 = 1e-5;

pub struct Check {
    pub name: &'static str,
    run: Box<dyn Fn(u64) -> Result<f64> + Sync + Send>,
}

impl Check {
    pub fn run(&self, seed: u64) -> Result<f64> {
        (self.run)(seed)
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
}

fn rand(rng: &mut Rng, shape: &[usize]) -> GradCheckInput {
    let n: usize = shape.iter().product();
    GradCheckInput::new((0..n).map(|_| rng.normal()).collect(), shape.to_vec())
}

fn rand_positive(rng: &mut Rng, shape: &[usize]) -> GradCheckInput {
    let n: usize = shape.iter().product();
    GradCheckInput::new((0..n).map(|_| rng.uniform(0.5, 2.0)).collect(), shape.to_vec())
}

/// sum(x * frozen random weights): gives softmax-style ops a non-degenerate
/// downstream gradient.
fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = Rng::new(seed ^ 0x77e1_64f5);
    let n: usize = g.shape(x).iter().product();
    let shape = g.shape(x).to_vec();
    let w = g.constant((0..n).map(|_| rng.normal()).collect(), shape)?;
    let m = g.mul(x, w)?;
    g.sum(m)
}

pub fn registry() -> Vec<Check> {
    fn check(name: &'static str, run: impl Fn(u64) -> Result<f64> + Sync + Send + 'static) -> Check {
        Check { name, run: Box::new(run) }
    }

    vec![
        check("matmul", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 4]);
            let b = rand(&mut rng, &[4, 2]);
            grad_check(|g, ids| { let c = g.matmul(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("matmul_batched", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3, 4]);
            let b = rand(&mut rng, &[4, 2]);
            grad_check(|g, ids| { let c = g.matmul(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("matmul_batched_rhs", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3, 4]);
            let b = rand(&mut rng, &[2, 4, 3]);
            grad_check(|g, ids| { let c = g.matmul(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("matmul_nt", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 4]);
            let b = rand(&mut rng, &[5, 4]);
            grad_check(|g, ids| { let c = g.matmul_nt(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("add", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            let b = rand(&mut rng, &[2, 3]);
            grad_check(|g, ids| { let c = g.add(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("sub", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            let b = rand(&mut rng, &[2, 3]);
            grad_check(|g, ids| { let c = g.sub(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("mul", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            let b = rand(&mut rng, &[2, 3]);
            grad_check(|g, ids| { let c = g.mul(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("div", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            let b = rand_positive(&mut rng, &[2, 3]);
            grad_check(|g, ids| { let c = g.div(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("scale", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            grad_check(|g, ids| { let c = g.scale(ids[0], 1.7)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("add_bias", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 4]);
            let b = rand(&mut rng, &[4]);
            grad_check(|g, ids| { let c = g.add_bias(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("scale_rows", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 4]);
            let s = rand(&mut rng, &[3]);
            grad_check(|g, ids| { let c = g.scale_rows(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, s], FD_EPS)
        }),
        check("bias_rows", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 4]);
            let b = rand(&mut rng, &[3]);
            grad_check(|g, ids| { let c = g.bias_rows(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("gelu", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 5]);
            grad_check(|g, ids| { let c = g.gelu(ids[0])?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("exp", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            grad_check(|g, ids| { let c = g.exp(ids[0])?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("ln", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand_positive(&mut rng, &[2, 3]);
            grad_check(|g, ids| { let c = g.ln(ids[0])?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("softmax", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 5]);
            grad_check(|g, ids| { let c = g.softmax(ids[0], 1)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("softmax_axis0", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[4, 3]);
            grad_check(|g, ids| { let c = g.softmax(ids[0], 0)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("log_softmax", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 5]);
            grad_check(|g, ids| { let c = g.log_softmax(ids[0], 1)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("layer_norm", |seed| {
            let mut rng = Rng::new(seed);
            let x = rand(&mut rng, &[3, 5]);
            let gamma = rand_positive(&mut rng, &[5]);
            let beta = rand(&mut rng, &[5]);
            grad_check(
                |g, ids| { let c = g.layer_norm(ids[0], ids[1], ids[2], 1e-6)?; weighted_sum(g, c, seed) },
                &[x, gamma, beta],
                FD_EPS,
            )
        }),
        check("repeat_rows", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[1, 4]);
            grad_check(|g, ids| { let c = g.repeat_rows(ids[0], 5)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("concat_rows", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            let b = rand(&mut rng, &[3, 3]);
            grad_check(|g, ids| { let c = g.concat_rows(&[ids[0], ids[1]])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("slice_rows", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[5, 3]);
            grad_check(|g, ids| { let c = g.slice_rows(ids[0], 1, 3)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("concat_cols", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 2]);
            let b = rand(&mut rng, &[3, 4]);
            grad_check(|g, ids| { let c = g.concat_cols(&[ids[0], ids[1]])?; weighted_sum(g, c, seed) }, &[a, b], FD_EPS)
        }),
        check("slice_cols", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 6]);
            grad_check(|g, ids| { let c = g.slice_cols(ids[0], 2, 3)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("transpose01", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3, 2]);
            grad_check(|g, ids| { let c = g.transpose01(ids[0])?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("reshape", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 6]);
            grad_check(|g, ids| { let c = g.reshape(ids[0], vec![3, 4])?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("sum", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            grad_check(|g, ids| g.sum(ids[0]), &[a], FD_EPS)
        }),
        check("mean", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[2, 3]);
            grad_check(|g, ids| g.mean(ids[0]), &[a], FD_EPS)
        }),
        check("patchify", |seed| {
            let mut rng = Rng::new(seed);
            let a = rand(&mut rng, &[3, 4, 4]);
            grad_check(|g, ids| { let c = g.patchify(ids[0], 2)?; weighted_sum(g, c, seed) }, &[a], FD_EPS)
        }),
        check("score_nt", |seed| {
            let mut rng = Rng::new(seed);
            let q = rand(&mut rng, &[3, 4]);
            let kv = rand(&mut rng, &[6, 4]);
            grad_check(|g, ids| { let c = g.score_nt(ids[0], ids[1], 2, 0.7)?; weighted_sum(g, c, seed) }, &[q, kv], FD_EPS)
        }),
        check("mix_nt", |seed| {
            let mut rng = Rng::new(seed);
            let attn = rand(&mut rng, &[3, 2]);
            let kv = rand(&mut rng, &[6, 4]);
            grad_check(|g, ids| { let c = g.mix_nt(ids[0], ids[1])?; weighted_sum(g, c, seed) }, &[attn, kv], FD_EPS)
        }),
        check("conv3x3", |seed| {
            let mut rng = Rng::new(seed);
            let x = rand(&mut rng, &[2, 4, 4]);
            let k = rand(&mut rng, &[3, 2, 3, 3]);
            let b = rand(&mut rng, &[3]);
            grad_check(
                |g, ids| { let c = g.conv2d(ids[0], ids[1], ids[2])?; weighted_sum(g, c, seed) },
                &[x, k, b],
                FD_EPS,
            )
        }),
        check("conv1x1", |seed| {
            let mut rng = Rng::new(seed);
            let x = rand(&mut rng, &[3, 3, 3]);
            let k = rand(&mut rng, &[2, 3, 1, 1]);
            let b = rand(&mut rng, &[2]);
            grad_check(
                |g, ids| { let c = g.conv2d(ids[0], ids[1], ids[2])?; weighted_sum(g, c, seed) },
                &[x, k, b],
                FD_EPS,
            )
        }),
        check("bilinear_up2", |seed| {
            let mut rng = Rng::new(seed);
            let x = rand(&mut rng, &[2, 3, 3]);
            grad_check(|g, ids| { let c = g.bilinear_up2(ids[0])?; weighted_sum(g, c, seed) }, &[x], FD_EPS)
        }),
        check("channel_norm", |seed| {
            let mut rng = Rng::new(seed);
            let x = rand(&mut rng, &[3, 2, 2]);
            let gamma = rand_positive(&mut rng, &[3]);
            let beta = rand(&mut rng, &[3]);
            grad_check(
                |g, ids| { let c = decoder::channel_norm(g, ids[0], ids[1], ids[2])?; weighted_sum(g, c, seed) },
                &[x, gamma, beta],
                FD_EPS,
            )
        }),
        check("adapter_branch", |seed| {
            let mut rng = Rng::new(seed);
            let z = rand(&mut rng, &[3, 4]);
            let wd = rand(&mut rng, &[4, 2]);
            let bd = rand(&mut rng, &[2]);
            let wu = rand(&mut rng, &[2, 4]);
            let bu = rand(&mut rng, &[4]);
            grad_check(
                |g, ids| {
                    let nodes = AdapterNodes { w_down: ids[1], b_down: ids[2], w_up: ids[3], b_up: ids[4], scale: 0.8 };
                    let c = peft::adapter_branch(g, ids[0], &nodes)?;
                    weighted_sum(g, c, seed)
                },
                &[z, wd, bd, wu, bu],
                FD_EPS,
            )
        }),
        check("lora_forward", |seed| {
            let mut rng = Rng::new(seed);
            let x = rand(&mut rng, &[3, 4]);
            let w = rand(&mut rng, &[4, 4]);
            let b = rand(&mut rng, &[4]);
            let a = rand(&mut rng, &[4, 2]);
            let bm = rand(&mut rng, &[2, 4]);
            grad_check(
                |g, ids| {
                    let c = peft::lora_forward(g, ids[0], ids[1], ids[2], ids[3], ids[4])?;
                    weighted_sum(g, c, seed)
                },
                &[x, w, b, a, bm],
                FD_EPS,
            )
        }),
        check("attention", |seed| {
            let mut rng = Rng::new(seed);
            let d = 4;
            let x = rand(&mut rng, &[3, d]);
            let mut inputs = vec![x];
            for _ in 0..4 {
                inputs.push(rand(&mut rng, &[d, d]));
                inputs.push(rand(&mut rng, &[d]));
            }
            grad_check(
                |g, ids| {
                    let zeros = |g: &mut Graph| g.constant(vec![0.0; d], vec![d]);
                    let ones = |g: &mut Graph| g.constant(vec![1.0; d], vec![d]);
                    let layer = LayerNodes {
                        ln1_gamma: ones(g)?,
                        ln1_beta: zeros(g)?,
                        wq: ids[1],
                        bq: ids[2],
                        wk: ids[3],
                        bk: ids[4],
                        wv: ids[5],
                        bv: ids[6],
                        wo: ids[7],
                        bo: ids[8],
                        ln2_gamma: ones(g)?,
                        ln2_beta: zeros(g)?,
                        mlp_w1: ids[1],
                        mlp_b1: ids[2],
                        mlp_w2: ids[3],
                        mlp_b2: ids[4],
                    };
                    let out = vit::attention(g, ids[0], &layer, 2, &LayerHooks::default())?;
                    weighted_sum(g, out.out, seed)
                },
                &inputs,
                FD_EPS,
            )
        }),
        check("transformer_layer", |seed| {
            let mut rng = Rng::new(seed);
            let d = 4;
            let hidden = 8;
            let x = rand(&mut rng, &[3, d]);
            let mut inputs = vec![x];
            // ln1 gamma/beta, 4x (w,b), ln2 gamma/beta, mlp w1,b1,w2,b2
            inputs.push(rand_positive(&mut rng, &[d]));
            inputs.push(rand(&mut rng, &[d]));
            for _ in 0..4 {
                inputs.push(rand(&mut rng, &[d, d]));
                inputs.push(rand(&mut rng, &[d]));
            }
            inputs.push(rand_positive(&mut rng, &[d]));
            inputs.push(rand(&mut rng, &[d]));
            inputs.push(rand(&mut rng, &[d, hidden]));
            inputs.push(rand(&mut rng, &[hidden]));
            inputs.push(rand(&mut rng, &[hidden, d]));
            inputs.push(rand(&mut rng, &[d]));
            grad_check(
                |g, ids| {
                    let layer = LayerNodes {
                        ln1_gamma: ids[1],
                        ln1_beta: ids[2],
                        wq: ids[3],
                        bq: ids[4],
                        wk: ids[5],
                        bk: ids[6],
                        wv: ids[7],
                        bv: ids[8],
                        wo: ids[9],
                        bo: ids[10],
                        ln2_gamma: ids[11],
                        ln2_beta: ids[12],
                        mlp_w1: ids[13],
                        mlp_b1: ids[14],
                        mlp_w2: ids[15],
                        mlp_b2: ids[16],
                    };
                    let out = vit::transformer_layer(g, ids[0], &layer, 2, &LayerHooks::default())?;
                    weighted_sum(g, out.z, seed)
                },
                &inputs,
                FD_EPS,
            )
        }),
        check("mca_fuse", |seed| {
            let mut rng = Rng::new(seed);
            let d = 4;
            let hidden = 8;
            // two frames on a 2x2 grid
            let mut inputs = vec![rand(&mut rng, &[4, d]), rand(&mut rng, &[4, d])];
            for _ in 0..4 {
                inputs.push(rand(&mut rng, &[d, d]));
                inputs.push(rand(&mut rng, &[d]));
            }
            inputs.push(rand(&mut rng, &[2, d])); // z_tp
            inputs.push(rand(&mut rng, &[1, d])); // z_m
            for _ in 0..3 {
                inputs.push(rand_positive(&mut rng, &[d]));
                inputs.push(rand(&mut rng, &[d]));
            }
            inputs.push(rand(&mut rng, &[d, hidden]));
            inputs.push(rand(&mut rng, &[hidden]));
            inputs.push(rand(&mut rng, &[hidden, d]));
            inputs.push(rand(&mut rng, &[d]));
            grad_check(
                |g, ids| {
                    let nodes = FusionNodes {
                        wq: ids[2],
                        bq: ids[3],
                        wk: ids[4],
                        bk: ids[5],
                        wv: ids[6],
                        bv: ids[7],
                        wo: ids[8],
                        bo: ids[9],
                        z_tp: ids[10],
                        z_m: ids[11],
                        ln1_gamma: ids[12],
                        ln1_beta: ids[13],
                        ln2_gamma: ids[14],
                        ln2_beta: ids[15],
                        ln3_gamma: ids[16],
                        ln3_beta: ids[17],
                        mlp_w1: ids[18],
                        mlp_b1: ids[19],
                        mlp_w2: ids[20],
                        mlp_b2: ids[21],
                    };
                    let out = fusion::fuse(g, &[ids[0], ids[1]], &nodes, (2, 2))?;
                    weighted_sum(g, out.feature, seed)
                },
                &inputs,
                FD_EPS,
            )
        }),
        check("decode", |seed| {
            let mut rng = Rng::new(seed);
            // [8,2,2] feature, P=4: two stages then the head
            let chans = decoder::stage_channels(8, 4).unwrap();
            let mut inputs = vec![rand(&mut rng, &[8, 2, 2])];
            for (cin, cout) in &chans {
                inputs.push(rand(&mut rng, &[*cout, *cin, 3, 3]));
                inputs.push(rand(&mut rng, &[*cout]));
                inputs.push(rand_positive(&mut rng, &[*cout]));
                inputs.push(rand(&mut rng, &[*cout]));
            }
            let last = chans.last().unwrap().1;
            inputs.push(rand(&mut rng, &[2, last, 1, 1]));
            inputs.push(rand(&mut rng, &[2]));
            grad_check(
                |g, ids| {
                    let mut stages = Vec::new();
                    for s in 0..2 {
                        stages.push(decoder::StageNodes {
                            kernel: ids[1 + 4 * s],
                            bias: ids[2 + 4 * s],
                            norm_gamma: ids[3 + 4 * s],
                            norm_beta: ids[4 + 4 * s],
                        });
                    }
                    let nodes = decoder::DecoderNodes { stages, head_weight: ids[9], head_bias: ids[10] };
                    let logits = decoder::decode(g, ids[0], &nodes, 4)?;
                    weighted_sum(g, logits, seed)
                },
                &inputs,
                FD_EPS,
            )
        }),
        check("focal_jaccard_loss", |seed| {
            let mut rng = Rng::new(seed);
            let logits = rand(&mut rng, &[2, 2, 2]);
            let target: Vec<f64> = (0..4).map(|_| f64::from(rng.chance(0.5))).collect();
            grad_check(|g, ids| focal_jaccard_loss(g, ids[0], &target), &[logits], FD_EPS)
        }),
    ]
}

/// Encoder shape used for default gradient checks: 32x32 input, D=32, two
/// layers, two heads, 8px patches.
pub fn gradcheck_vit() -> ViTConfig {
    ViTConfig { image_size: 32, ..ViTConfig::tiny() }
}

/// Run every registered check at `points` seeds, keeping the worst error.
pub fn run_registry(points: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for c in registry() {
        let mut max_err: f64 = 0.0;
        for seed in 0..points {
            max_err = max_err.max(c.run(seed)?);
        }
        out.push(CheckResult { name: c.name.to_string(), max_err });
    }
    Ok(out)
}

/// End-to-end check: finite differences through the whole pipeline (both
/// frames through the encoder, fusion, decoder and loss) with respect to the
/// input image and a representative parameter from every module.
pub fn end_to_end(vit: &ViTConfig, seed: u64) -> Result<f64> {
    let mut peft_cfg = PeftConfig::default();
    peft_cfg.method = PeftMethod::Adapter;
    let mut model = build_model(vit, &peft_cfg, 2, seed)?;
    // activate the adapter branch so its gradients are non-trivial
    let mut rng = Rng::new(seed ^ 0xadaf);
    for i in 0..vit.depth {
        for field in ["w_up", "b_up"] {
            let p = model.param_mut(&format!("peft.layer{i}.adapter.{field}")).unwrap();
            for v in p.data.iter_mut() {
                *v = rng.normal() * 0.02;
            }
        }
    }

    let hw = vit.image_size;
    let mut drng = Rng::new(seed ^ 0x1a9e);
    let image_a: Vec<f64> = (0..3 * hw * hw).map(|_| drng.next_f64()).collect();
    let image_b: Vec<f64> = (0..3 * hw * hw).map(|_| drng.next_f64()).collect();
    let target: Vec<f64> = (0..hw * hw).map(|_| f64::from(drng.chance(0.3))).collect();

    let last = vit.depth - 1;
    let checked = [
        "backbone.layer0.attn.wq".to_string(),
        "backbone.pos_embed".to_string(),
        "peft.layer0.adapter.w_down".to_string(),
        format!("peft.layer{last}.adapter.w_up"),
        "fusion.z_m".to_string(),
        "fusion.value.weight".to_string(),
        "decoder.stage0.conv.bias".to_string(),
        "decoder.head.weight".to_string(),
        format!("backbone.layer{last}.mlp.b1"),
    ];
    let mut inputs = vec![GradCheckInput::new(image_a, vec![3, hw, hw])];
    let mut override_idx: Vec<usize> = Vec::new();
    for name in &checked {
        let idx = model.param_index(name).unwrap();
        let p = &model.params()[idx];
        override_idx.push(idx);
        inputs.push(GradCheckInput::new(p.data.clone(), p.shape.clone()));
    }

    grad_check(
        |g, ids| {
            let overrides: Vec<(usize, NodeId)> =
                override_idx.iter().zip(&ids[1..]).map(|(&pi, &node)| (pi, node)).collect();
            let bound = model.bind_with(g, GradMode::None, &overrides)?;
            let frame_b = g.constant(image_b.clone(), vec![3, hw, hw])?;
            let out = model.forward(g, &bound, &[ids[0], frame_b])?;
            focal_jaccard_loss(g, out.logits, &target)
        },
        &inputs,
        FD_EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every differentiable op stays under 1e-6 at 10 random points.
    #[test]
    fn primitive_ops_under_1e6_at_10_points() {
        let primitives = [
            "matmul", "matmul_batched", "matmul_batched_rhs", "matmul_nt", "add", "sub", "mul", "div",
            "scale", "add_bias", "scale_rows", "bias_rows", "gelu", "exp", "ln", "softmax",
            "softmax_axis0", "log_softmax", "layer_norm", "repeat_rows", "concat_rows", "slice_rows",
            "concat_cols", "slice_cols", "transpose01", "reshape", "sum", "mean", "patchify",
            "score_nt", "mix_nt", "conv3x3", "conv1x1", "bilinear_up2",
        ];
        for c in registry() {
            if !primitives.contains(&c.name) {
                continue;
            }
            for seed in 0..10 {
                let err = c.run(seed).unwrap();
                assert!(err < 1e-6, "{} seed {seed}: err {err}", c.name);
            }
        }
    }

    /// Composite blocks stay under 1e-5.
    #[test]
    fn composite_blocks_under_1e5() {
        let composites = [
            "channel_norm", "adapter_branch", "lora_forward", "attention", "transformer_layer",
            "mca_fuse", "decode", "focal_jaccard_loss",
        ];
        for c in registry() {
            if !composites.contains(&c.name) {
                continue;
            }
            for seed in 0..3 {
                let err = c.run(seed).unwrap();
                assert!(err < 1e-5, "{} seed {seed}: err {err}", c.name);
            }
        }
    }

    /// Gelu's spec example: gradient at x = 0.5 matches finite differences.
    #[test]
    fn gelu_gradient_at_half() {
        let x = GradCheckInput::new(vec![0.5], vec![1]);
        let err = grad_check(|g, ids| { let y = g.gelu(ids[0])?; g.sum(y) }, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "gelu grad err {err}");
    }

    /// Small end-to-end check on an 8x8 input stays under 1e-4.
    #[test]
    fn end_to_end_8x8() {
        let vit = ViTConfig { image_size: 8, patch_size: 4, depth: 1, dim: 8, heads: 2, mlp_ratio: 2 };
        let err = end_to_end(&vit, 3).unwrap();
        assert!(err < 1e-4, "end-to-end err {err}");
    }
}
