//! Finite-difference checks of every differentiable building block on
//! micro instances.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, mlp_forward, AttentionParams, MlpParams};
use crate::error::Result;
use crate::fusion::{
    additive_fuse, bottleneck_summarize, dynamic_pipeline, gated_fuse, retrieve_geo_features, static_pipeline, BottleneckParams,
    DynamicParams, FusionDims, FusionInputs, GateParams, Grid, Seq, StaticParams, StreamTag, TokenSequence, Variant,
};
use crate::masking::{MaskMode, MaskPlan};
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::synthdata::{generate_sample, Channels, SceneConfig, Split};
use crate::tensor::{check_gradients, GradcheckReport, Graph, NodeId, NumericsConfig, Tensor};

use super::{Model, ModelConfig};

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Matmul,
    Softmax,
    LayerNorm,
    MlpForward,
    CrossAttention,
    AdditiveFuse,
    BottleneckSummarize,
    RetrieveGeoFeatures,
    GatedFuse,
    StaticPipeline,
    DynamicPipeline,
    BackboneLoss,
}

impl Target {
    pub const ALL: [Target; 12] = [
        Target::Matmul,
        Target::Softmax,
        Target::LayerNorm,
        Target::MlpForward,
        Target::CrossAttention,
        Target::AdditiveFuse,
        Target::BottleneckSummarize,
        Target::RetrieveGeoFeatures,
        Target::GatedFuse,
        Target::StaticPipeline,
        Target::DynamicPipeline,
        Target::BackboneLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Matmul => "matmul",
            Target::Softmax => "softmax",
            Target::LayerNorm => "layer_norm",
            Target::MlpForward => "mlp_forward",
            Target::CrossAttention => "cross_attention",
            Target::AdditiveFuse => "additive_fuse",
            Target::BottleneckSummarize => "bottleneck_summarize",
            Target::RetrieveGeoFeatures => "retrieve_geo_features",
            Target::GatedFuse => "gated_fuse",
            Target::StaticPipeline => "static_pipeline",
            Target::DynamicPipeline => "dynamic_pipeline",
            Target::BackboneLoss => "backbone_loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("positive extents")
}

/// `sum(W * x)` for a fixed random `W`, so that every output entry gets a
/// distinct upstream gradient.
fn probe(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let w = random(g.shape(x), &mut rng(seed));
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn seq(t: Tensor, grid: Option<Grid>, tag: StreamTag) -> TokenSequence {
    TokenSequence::new(t, grid, tag).expect("consistent micro instance")
}

fn param_seq(g: &mut Graph, id: ParamId, grid: Option<Grid>, tag: StreamTag) -> Seq {
    Seq {
        node: g.param(id),
        grid,
        tag,
    }
}

/// Runs the check for one target at `tolerance`.
pub fn run(target: Target, tolerance: f64) -> GradcheckReport {
    match build(target, tolerance) {
        Ok(r) => r,
        Err(e) => GradcheckReport {
            name: target.name().into(),
            max_rel_err: f64::INFINITY,
            worst_param: String::new(),
            analytic: f64::NAN,
            numeric: f64::NAN,
            scalars_checked: 0,
            tolerance,
            passed: false,
            failure: Some(e.to_string()),
        },
    }
}

pub fn run_all(tolerance: f64) -> Vec<GradcheckReport> {
    Target::ALL.iter().map(|&t| run(t, tolerance)).collect()
}

fn build(target: Target, tol: f64) -> Result<GradcheckReport> {
    let name = target.name();
    let cfg = NumericsConfig::default();
    let mut r = rng(0x5eed ^ target as u64);
    let mut store = ParamStore::new();
    let report = match target {
        Target::Matmul => {
            let a = store.add("a", random(&[3, 4], &mut r))?;
            let b = store.add("b", random(&[4, 2], &mut r))?;
            check_gradients(
                name,
                &store,
                |g| {
                    let (a, b) = (g.param(a), g.param(b));
                    let y = g.matmul(a, b)?;
                    probe(g, y, 1)
                },
                FD_STEP,
                tol,
            )
        }
        Target::Softmax => {
            let x = store.add("x", random(&[3, 4], &mut r))?;
            check_gradients(
                name,
                &store,
                |g| {
                    let x = g.param(x);
                    let y = g.softmax(x, 1)?;
                    probe(g, y, 2)
                },
                FD_STEP,
                tol,
            )
        }
        Target::LayerNorm => {
            let x = store.add("x", random(&[3, 5], &mut r))?;
            let gain = store.add("gain", random(&[5], &mut r))?;
            let bias = store.add("bias", random(&[5], &mut r))?;
            check_gradients(
                name,
                &store,
                |g| {
                    let (x, ga, b) = (g.param(x), g.param(gain), g.param(bias));
                    let y = g.layer_norm(x, ga, b, cfg.ln_epsilon)?;
                    probe(g, y, 3)
                },
                FD_STEP,
                tol,
            )
        }
        Target::MlpForward => {
            let mlp = MlpParams::new(&mut store, "mlp", 4, 6, 3, &mut r)?;
            randomize_biases(&mut store, &mut r);
            let x = random(&[3, 4], &mut r);
            check_gradients(
                name,
                &store,
                |g| {
                    let x = g.constant(x.clone());
                    let y = mlp_forward(g, &mlp, x)?;
                    probe(g, y, 4)
                },
                FD_STEP,
                tol,
            )
        }
        Target::CrossAttention => {
            let attn = AttentionParams::new(&mut store, "attn", 8, 2, &mut r)?;
            let q = store.add("queries", random(&[3, 8], &mut r))?;
            let kv = store.add("keys_values", random(&[5, 8], &mut r))?;
            check_gradients(
                name,
                &store,
                |g| {
                    let (q, kv) = (g.param(q), g.param(kv));
                    let rec = cross_attention(g, &attn, q, kv)?;
                    probe(g, rec.context, 5)
                },
                FD_STEP,
                tol,
            )
        }
        Target::AdditiveFuse => {
            let proj = MlpParams::new(&mut store, "proj", 3, 0, 4, &mut r)?;
            randomize_biases(&mut store, &mut r);
            let v = seq(random(&[4, 4], &mut r), Some(Grid::new(2, 2, 1)), StreamTag::Vision);
            let geo = seq(random(&[9, 3], &mut r), Some(Grid::new(3, 3, 1)), StreamTag::Geometry);
            check_gradients(
                name,
                &store,
                |g| {
                    let (fv, fg) = (Seq::input(g, &v), Seq::input(g, &geo));
                    let out = additive_fuse(g, fv, fg, &proj)?;
                    probe(g, out.fused.node, 6)
                },
                FD_STEP,
                tol,
            )
        }
        Target::BottleneckSummarize => {
            let bp = BottleneckParams::new(&mut store, "bottleneck", 3, 8, 2, 1.0, &mut r)?;
            let p = seq(random(&[4, 8], &mut r), None, StreamTag::Prompt);
            check_gradients(
                name,
                &store,
                |g| {
                    let fp = Seq::input(g, &p);
                    let fb = bottleneck_summarize(g, &bp, fp)?;
                    probe(g, fb.node, 7)
                },
                FD_STEP,
                tol,
            )
        }
        Target::RetrieveGeoFeatures => {
            let attn = AttentionParams::new(&mut store, "attn3", 8, 2, &mut r)?;
            let fq = store.add("aligned", random(&[4, 8], &mut r))?;
            let z = store.add("z_g", random(&[3, 8], &mut r))?;
            check_gradients(
                name,
                &store,
                |g| {
                    let q = param_seq(g, fq, None, StreamTag::Geometry);
                    let z = param_seq(g, z, None, StreamTag::Bottleneck);
                    let out = retrieve_geo_features(g, q, z, &attn)?;
                    probe(g, out.node, 8)
                },
                FD_STEP,
                tol,
            )
        }
        Target::GatedFuse => {
            let gate = GateParams::new(&mut store, "gate", 4, &mut r)?;
            randomize_biases(&mut store, &mut r);
            let v = store.add("v", random(&[3, 4], &mut r))?;
            let gg = store.add("g", random(&[3, 4], &mut r))?;
            check_gradients(
                name,
                &store,
                |g| {
                    let v = param_seq(g, v, None, StreamTag::Vision);
                    let gs = param_seq(g, gg, None, StreamTag::Geometry);
                    let (out, _) = gated_fuse(g, v, gs, &gate, &cfg)?;
                    probe(g, out.fused.node, 9)
                },
                FD_STEP,
                tol,
            )
        }
        Target::StaticPipeline => {
            let params = StaticParams::new(&mut store, "static", 3, 8, &mut r)?;
            randomize_biases(&mut store, &mut r);
            let grid = Grid::new(2, 2, 2);
            let v = seq(random(&[8, 8], &mut r), Some(grid), StreamTag::Vision);
            let geo = seq(random(&[8, 3], &mut r), Some(grid), StreamTag::Geometry);
            let p = seq(random(&[2, 8], &mut r), None, StreamTag::Prompt);
            let plan = MaskPlan::new(MaskMode::Random, 0.5, 1.0)?;
            check_gradients(
                name,
                &store,
                |g| {
                    let inputs = FusionInputs {
                        vision: &v,
                        geometry: &geo,
                        prompt: &p,
                    };
                    let out = static_pipeline(g, &inputs, &params, &plan, &mut rng(10), &cfg)?;
                    probe(g, out.fused.node, 10)
                },
                FD_STEP,
                tol,
            )
        }
        Target::DynamicPipeline => {
            let dims = FusionDims {
                vision_grid: Grid::new(2, 2, 2),
                geometry_hw: (3, 3),
                geo_width: 3,
                width: 8,
                heads: 2,
                bottleneck_len: 2,
                qk_gain: 1.0,
            };
            let params = DynamicParams::new(&mut store, "dynamic", &dims, &mut r)?;
            randomize_biases(&mut store, &mut r);
            let v = seq(random(&[8, 8], &mut r), Some(dims.vision_grid), StreamTag::Vision);
            let geo = seq(random(&[18, 3], &mut r), Some(dims.geometry_grid()), StreamTag::Geometry);
            let p = seq(random(&[3, 8], &mut r), None, StreamTag::Prompt);
            let plan = MaskPlan::new(MaskMode::RelevanceTopK, 0.5, 1.0)?;
            check_gradients(
                name,
                &store,
                |g| {
                    let inputs = FusionInputs {
                        vision: &v,
                        geometry: &geo,
                        prompt: &p,
                    };
                    let out = dynamic_pipeline(g, &inputs, &params, &plan, &mut rng(11), &cfg)?;
                    let a = probe(g, out.fused.node, 11)?;
                    let z = out.appended_global.expect("dynamic path appends Z_G");
                    let b = probe(g, z.node, 12)?;
                    g.add(a, b)
                },
                FD_STEP,
                tol,
            )
        }
        Target::BackboneLoss => {
            let scene = micro_scene();
            let mc = ModelConfig {
                heads: 2,
                bottleneck_len: 2,
                n_layers: 1,
                mlp_hidden: 8,
                ..ModelConfig::default()
            };
            let mut model = Model::new(&mc, Variant::A, &scene, 12, cfg)?;
            randomize_biases(&mut model.store, &mut r);
            let sample = generate_sample(&scene, Split::Train, &mut r)?;
            let plan = MaskPlan::new(MaskMode::RelevanceTopK, 0.5, 1.0)?;
            let m = &model;
            check_gradients(
                name,
                &model.store,
                |g| m.loss(g, &sample, &plan, &mut rng(13)),
                FD_STEP,
                tol,
            )
        }
    };
    Ok(report)
}

/// Smallest scene the synthetic generator accepts, with a geometry grid
/// finer than the vision grid.
pub fn micro_scene() -> SceneConfig {
    SceneConfig {
        grid: Grid::new(2, 2, 2),
        geometry_grid: [3, 3],
        n_objects: 3,
        n_classes: 3,
        channels: Channels {
            vision: 10,
            geometry: 6,
            model: 10,
        },
        geometry_position: false,
        ..SceneConfig::default()
    }
}

/// Zero biases and unit gains hide errors in their gradients; perturb every
/// parameter that was initialised to a constant.
fn randomize_biases(store: &mut ParamStore, r: &mut StreamRng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let first = t.data()[0];
        if t.numel() > 0 && t.data().iter().all(|&v| v == first) {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * r.gen_range(-1.0..1.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for t in Target::ALL {
            assert_eq!(Target::parse(t.name()), Some(t));
        }
    }

    #[test]
    fn small_targets_pass() {
        for t in [Target::Matmul, Target::Softmax, Target::LayerNorm, Target::GatedFuse] {
            let r = run(t, 1e-4);
            assert!(r.passed, "{r:?}");
        }
    }
}
