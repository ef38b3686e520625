//! Small pre-norm transformer encoder with a binary classification head.

use rand::Rng;

use crate::attention::{cross_attention, mlp_forward, AttentionParams, MlpParams};
use crate::error::{Error, Result};
use crate::fusion::{FusedSequence, LayerNormParams, Segment, Seq, StreamTag};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, NodeId, NumericsConfig, Tensor};

const TAGS: usize = 5;

fn tag_index(tag: StreamTag) -> usize {
    match tag {
        StreamTag::Vision => 0,
        StreamTag::Geometry => 1,
        StreamTag::Prompt => 2,
        StreamTag::Bottleneck => 3,
        StreamTag::Fused => 4,
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    attn: AttentionParams,
    ln2: LayerNormParams,
    mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    width: usize,
    type_table: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNormParams,
    head: MlpParams,
}

impl BackboneParams {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, heads: usize, n_layers: usize, mlp_hidden: usize, rng: &mut R) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::contract("backbone needs at least one layer"));
        }
        let type_table = store.add_normal("backbone.type", &[TAGS, width], 0.1, rng)?;
        let blocks = (0..n_layers)
            .map(|i| {
                let p = format!("backbone.block{i}");
                Ok(Block {
                    ln1: LayerNormParams::new(store, &format!("{p}.ln1"), width)?,
                    attn: AttentionParams::new(store, &format!("{p}.attn"), width, heads, rng)?,
                    ln2: LayerNormParams::new(store, &format!("{p}.ln2"), width)?,
                    mlp: MlpParams::new(store, &format!("{p}.mlp"), width, mlp_hidden, width, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let ln_f = LayerNormParams::new(store, "backbone.ln_f", width)?;
        let w = store.add_normal("backbone.head.l0.w", &[width, 2], 0.02, rng)?;
        let b = store.add_const("backbone.head.l0.b", &[2], 0.0)?;
        let head = MlpParams::from_linear(w, b, width, 2);
        Ok(Self {
            width,
            type_table,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Sinusoids at geometrically spaced frequencies; pairs of channels hold
/// `(sin, cos)` of `pos * f_k`.
fn sinusoid(pos: f64, out: &mut [f64]) {
    let m = out.len();
    for (j, o) in out.iter_mut().enumerate() {
        let k = (j / 2) as f64;
        let freq = 100f64.powf(-2.0 * k / m.max(1) as f64);
        *o = if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
}

/// Positional signal: gridded tokens split the channels into three groups
/// for `(t, h, w)`; other tokens use their index within the segment.
pub fn positional_table(segments: &[Segment], width: usize) -> Tensor {
    let total: usize = segments.iter().map(|s| s.len).sum();
    let mut t = Tensor::zeros(&[total, width]);
    let third = width / 3;
    let bounds = [0, third, 2 * third, width];
    let mut row = 0;
    let data = t.data_mut();
    for seg in segments {
        for i in 0..seg.len {
            let out = &mut data[(row + i) * width..][..width];
            match seg.grid {
                Some(gr) => {
                    let (ft, fh, fw) = gr.coords(i);
                    for (k, pos) in [ft, fh, fw].into_iter().enumerate() {
                        sinusoid(pos as f64, &mut out[bounds[k]..bounds[k + 1]]);
                    }
                }
                None => sinusoid(i as f64, out),
            }
        }
        row += seg.len;
    }
    t
}

fn type_onehot(segments: &[Segment]) -> Tensor {
    let total: usize = segments.iter().map(|s| s.len).sum();
    let mut t = Tensor::zeros(&[total, TAGS]);
    let mut row = 0;
    for seg in segments {
        for i in 0..seg.len {
            t.data_mut()[(row + i) * TAGS + tag_index(seg.tag)] = 1.0;
        }
        row += seg.len;
    }
    t
}

/// Logits (`1 x 2`) for `[fused, appended Z_G?, prompt]`.
pub fn backbone_forward(g: &mut Graph, params: &BackboneParams, fused: &FusedSequence, prompt: Seq, cfg: &NumericsConfig) -> Result<NodeId> {
    let pw = prompt.width(g);
    let fw = fused.fused.width(g);
    if pw != params.width || fw != params.width {
        return Err(Error::dim("backbone_forward", &[fw, pw], &[params.width]));
    }
    let mut parts = vec![fused.fused.node];
    if let Some(z) = fused.appended_global {
        parts.push(z.node);
    }
    parts.push(prompt.node);
    let mut segments = fused.segments(g);
    segments.push(Segment {
        len: prompt.len(g),
        grid: None,
        tag: StreamTag::Prompt,
    });
    let x = g.concat_rows(&parts)?;
    let pe = g.constant(positional_table(&segments, params.width));
    let onehot = g.constant(type_onehot(&segments));
    let table = g.param(params.type_table);
    let types = g.matmul(onehot, table)?;
    let x = g.add(x, pe)?;
    let mut x = g.add(x, types)?;
    for b in &params.blocks {
        let h = b.ln1.apply(g, x, cfg.ln_epsilon)?;
        let a = cross_attention(g, &b.attn, h, h)?;
        x = g.add(x, a.context)?;
        let h = b.ln2.apply(g, x, cfg.ln_epsilon)?;
        let m = mlp_forward(g, &b.mlp, h)?;
        x = g.add(x, m)?;
    }
    let x = params.ln_f.apply(g, x, cfg.ln_epsilon)?;
    let pooled = g.mean_rows(x)?;
    mlp_forward(g, &params.head, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Grid;

    #[test]
    fn positional_rows_differ_across_cells() {
        let gr = Grid::new(2, 2, 2);
        let segs = [Segment {
            len: 8,
            grid: Some(gr),
            tag: StreamTag::Fused,
        }];
        let t = positional_table(&segs, 12);
        for i in 0..8 {
            for j in 0..i {
                assert!(t.row(i) != t.row(j), "{i} vs {j}");
            }
        }
    }
}
