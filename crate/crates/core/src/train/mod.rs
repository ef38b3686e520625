//! Backbone, optimisation and evaluation of the fusion variants.

mod backbone;
pub mod gradcheck;
mod optim;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backbone::{backbone_forward, positional_table, BackboneParams};
pub use optim::{lr_at, Adam, AdamConfig, Schedule};

use crate::error::{Error, Result};
use crate::fusion::{FusedSequence, FusionDims, FusionInputs, FusionModel, Grid, PipelineKind, Seq, Variant};
use crate::masking::{MaskMode, MaskPlan};
use crate::params::ParamStore;
use crate::rng::{derive_seed, stream_rng, StreamRng};
use crate::synthdata::{Dataset, Sample, SceneConfig};
use crate::tensor::{Graph, NodeId, NumericsConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pipeline: PipelineKind,
    /// Adds the bottleneck query to the gated static pipeline.
    pub static_qformer: bool,
    pub heads: usize,
    pub bottleneck_len: usize,
    /// Init multiplier on query/key projections inside the fusion module.
    pub fusion_qk_gain: f64,
    pub n_layers: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineKind::Dynamic,
            static_qformer: false,
            heads: 4,
            bottleneck_len: 8,
            fusion_qk_gain: 3.0,
            n_layers: 2,
            mlp_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mask: MaskPlan,
    pub variant: Variant,
    /// Test accuracy is logged every this many steps (0: final step only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 16,
            lr_peak: 3e-3,
            warmup_steps: 80,
            schedule: Schedule::WarmupCosine,
            adam: AdamConfig::default(),
            seed: 0,
            mask: MaskPlan {
                mode: MaskMode::RelevanceTopK,
                gamma: 0.8,
                beta: 0.5,
            },
            variant: Variant::A,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::contract("train.steps and train.batch_size must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::contract("train.warmup_steps must not exceed train.steps"));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::contract("train.lr_peak must be positive"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::contract("train.adam needs betas in [0, 1) and eps > 0"));
        }
        self.mask.validate()
    }

    pub fn lr(&self, s: usize) -> f64 {
        lr_at(self.schedule, self.lr_peak, self.warmup_steps, self.steps, s)
    }
}

/// The only mask evaluation accepts: inference never masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Disabled;

/// Fusion variant, backbone and their shared parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub fusion: FusionModel,
    pub backbone: BackboneParams,
    pub numerics: NumericsConfig,
}

/// Per-token diagnostics over the vision grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub grid: Grid,
    pub relevance: Option<Vec<f64>>,
    pub gate_mean: Option<Vec<f64>>,
}

pub fn fusion_dims(model: &ModelConfig, scene: &SceneConfig) -> FusionDims {
    FusionDims {
        vision_grid: scene.grid,
        geometry_hw: (scene.geometry_grid[0], scene.geometry_grid[1]),
        geo_width: scene.channels.geometry,
        width: scene.channels.model,
        heads: model.heads,
        bottleneck_len: model.bottleneck_len,
        qk_gain: model.fusion_qk_gain,
    }
}

impl Model {
    /// Parameters are initialised from the `init` stream of `seed`;
    /// parameter names depend only on the configuration.
    pub fn new(cfg: &ModelConfig, variant: Variant, scene: &SceneConfig, seed: u64, numerics: NumericsConfig) -> Result<Self> {
        scene.validate()?;
        numerics.validate()?;
        let mut rng = stream_rng(seed, "init", &[]);
        let mut store = ParamStore::new();
        let dims = fusion_dims(cfg, scene);
        let fusion = FusionModel::new(&mut store, cfg.pipeline, variant, dims, cfg.static_qformer, &mut rng)?;
        let backbone = BackboneParams::new(&mut store, dims.width, cfg.heads, cfg.n_layers, cfg.mlp_hidden, &mut rng)?;
        Ok(Self {
            store,
            fusion,
            backbone,
            numerics,
        })
    }

    /// Forward pass to `1 x 2` logits.
    pub fn logits<R: Rng + ?Sized>(&self, g: &mut Graph, sample: &Sample, plan: &MaskPlan, rng: &mut R) -> Result<(NodeId, FusedSequence)> {
        let inputs = FusionInputs {
            vision: &sample.vision,
            geometry: &sample.geometry,
            prompt: &sample.prompt,
        };
        let fused = self.fusion.forward(g, &inputs, plan, rng, &self.numerics)?;
        let prompt = Seq::input(g, &sample.prompt);
        let logits = backbone_forward(g, &self.backbone, &fused, prompt, &self.numerics)?;
        Ok((logits, fused))
    }

    pub fn loss<R: Rng + ?Sized>(&self, g: &mut Graph, sample: &Sample, plan: &MaskPlan, rng: &mut R) -> Result<NodeId> {
        let (logits, _) = self.logits(g, sample, plan, rng)?;
        g.cross_entropy(logits, sample.label)
    }

    pub fn predict(&self, sample: &Sample, _mask: Disabled) -> Result<usize> {
        let mut g = Graph::with_params(&self.store);
        let (logits, _) = self.logits(&mut g, sample, &MaskPlan::disabled(), &mut NoRng)?;
        let z = g.value(logits).data();
        Ok(usize::from(z[1] > z[0]))
    }

    /// Relevance and mean gate per vision token, computed without masking.
    pub fn diagnose(&self, sample: &Sample) -> Result<Diagnostics> {
        let mut g = Graph::with_params(&self.store);
        let (_, fused) = self.logits(&mut g, sample, &MaskPlan::disabled(), &mut NoRng)?;
        let grid = sample
            .vision
            .grid
            .ok_or_else(|| Error::contract("sample vision has no grid"))?;
        Ok(Diagnostics {
            grid,
            relevance: fused.relevance.map(|r| r.s),
            gate_mean: fused.gate.map(|gt| gt.token_means()),
        })
    }

    /// Loss and per-parameter gradient for one sample.
    fn sample_grad(&self, sample: &Sample, plan: &MaskPlan, rng: &mut StreamRng) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::with_params(&self.store);
        let loss = self.loss(&mut g, sample, plan, rng)?;
        g.check_finite()?;
        g.backward(loss)?;
        let mut grads = self.store.zeros_like();
        g.accumulate_param_grads(&mut grads);
        Ok((g.value(loss).data()[0], grads))
    }
}

/// Randomness source for disabled masking, which draws nothing.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference consumed randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference consumed randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference consumed randomness")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("inference consumed randomness")
    }
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn evaluate(model: &Model, samples: &[Sample], mask: Disabled) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate needs at least one sample"));
    }
    let hits = samples
        .par_iter()
        .map(|s| model.predict(s, mask).map(|p| usize::from(p == s.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,eval_acc\n");
        for r in &self.records {
            let acc = r.eval_acc.map(|a| format!("{a:.16e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.16e},{:.16e},{}\n", r.step, r.lr, r.loss, acc));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Batch indices for step `s`, drawn with replacement.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, "batch", &[step as u64]);
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Trains `model` in place. Step `s` logs the mean batch loss before its
/// update and the rate `lr(s + 1)` the update used.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::contract("training needs nonempty train and test splits"));
    }
    if model.fusion.variant() != cfg.variant {
        return Err(Error::contract(format!(
            "model built for variant {} but config asks for {}",
            model.fusion.variant(),
            cfg.variant
        )));
    }
    let mut adam = Adam::new(&model.store, cfg.adam);
    let mut history = History::default();
    for step in 0..cfg.steps {
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, data.train.len());
        let batch_seed = derive_seed(cfg.seed, "batch", &[step as u64]);
        let m = &*model;
        let parts: Vec<_> = idx
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let mut rng = stream_rng(cfg.seed, "mask", &[step as u64, b as u64]);
                m.sample_grad(&data.train[i], &cfg.mask, &mut rng)
            })
            .collect();
        let mut grads = model.store.zeros_like();
        let mut loss = 0.0;
        for part in parts {
            let (l, gr) = part.map_err(|e| Error::Diverged {
                step,
                batch_seed,
                detail: e.to_string(),
            })?;
            loss += l;
            for (acc, g) in grads.iter_mut().zip(&gr) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                batch_seed,
                detail: format!("mean loss {loss}"),
            });
        }
        for gr in &mut grads {
            gr.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let lr = cfg.lr(step + 1);
        adam.step(&mut model.store, &grads, lr);
        let last = step + 1 == cfg.steps;
        let eval_acc = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            Some(evaluate(model, &data.test, Disabled)?)
        } else {
            None
        };
        history.records.push(HistoryRecord { step, lr, loss, eval_acc });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_dataset;

    fn tiny_scene() -> SceneConfig {
        SceneConfig {
            grid: Grid::new(2, 2, 2),
            geometry_grid: [3, 3],
            n_objects: 3,
            n_classes: 4,
            channels: crate::synthdata::Channels {
                vision: 12,
                geometry: 6,
                model: 12,
            },
            geometry_position: false,
            ..SceneConfig::default()
        }
    }

    fn tiny_model(variant: Variant) -> Model {
        let mc = ModelConfig {
            heads: 2,
            bottleneck_len: 2,
            n_layers: 1,
            mlp_hidden: 8,
            ..ModelConfig::default()
        };
        Model::new(&mc, variant, &tiny_scene(), 3, NumericsConfig::default()).unwrap()
    }

    #[test]
    fn logits_have_two_entries() {
        let m = tiny_model(Variant::A);
        let d = make_dataset(&tiny_scene(), 2, 1, 1).unwrap();
        let mut g = Graph::with_params(&m.store);
        let (z, fused) = m.logits(&mut g, &d.train[0], &MaskPlan::disabled(), &mut NoRng).unwrap();
        assert_eq!(g.value(z).numel(), 2);
        assert_eq!(fused.downstream_len(&g), 8 + 2);
    }

    #[test]
    fn training_is_deterministic() {
        let d = make_dataset(&tiny_scene(), 8, 4, 2).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model(Variant::A);
            train(&mut m, &d, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.final_loss().unwrap().to_bits(), b.final_loss().unwrap().to_bits());
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.records.last().unwrap().eval_acc.is_some());
    }

    #[test]
    fn variant_mismatch_and_empty_eval() {
        let d = make_dataset(&tiny_scene(), 2, 1, 2).unwrap();
        let mut m = tiny_model(Variant::F);
        assert!(train(&mut m, &d, &TrainConfig::default()).is_err());
        assert!(evaluate(&m, &[], Disabled).is_err());
    }
}
