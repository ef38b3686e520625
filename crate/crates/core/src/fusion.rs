//! Fusion of vision and geometry token streams.
//!
//! Four schemes are provided:
//!
//! * additive: `F = F_V + MLP(Reshape(F_G))`;
//! * QFormer concatenation: learnable bottleneck tokens summarise the prompt,
//!   query the geometry tokens, and the result `Z_G` is appended as
//!   `[F_V, MLP(Z_G)]`;
//! * gated static: `F = a*V + (1-a)*G` with `V = LN(F_V~)`,
//!   `G = LN(MLP(Reshape(F_G)))`, and a sigmoid gate `a` over `[V || G]`;
//! * gated dynamic: as above but `G` is retrieved from `Z_G` by the aligned
//!   geometry tokens, and `Z_G` is appended after the gated tokens.
//!
//! [`FusionModel`] wires these into the six ablation variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, mlp_forward, AttentionParams, AttentionRecord, MlpParams};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, plan_mask, relevance_scores, MaskMode, MaskOutcome, MaskPlan, RelevanceScore};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, NodeId, NumericsConfig, Tensor};

/// Spatio-temporal token layout; token `i` sits at `t * h * w + row * w + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

impl Grid {
    pub const fn new(h: usize, w: usize, t: usize) -> Self {
        Self { h, w, t }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.t
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn frame_len(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, t: usize, row: usize, col: usize) -> usize {
        debug_assert!(t < self.t && row < self.h && col < self.w);
        (t * self.h + row) * self.w + col
    }

    /// `(t, row, col)` of token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let frame = self.frame_len();
        (i / frame, (i % frame) / self.w, i % self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTag {
    Vision,
    Geometry,
    Prompt,
    Bottleneck,
    Fused,
}

/// Owned `L x C` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub grid: Option<Grid>,
    pub tag: StreamTag,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, grid: Option<Grid>, tag: StreamTag) -> Result<Self> {
        let (l, _) = tokens.dims2()?;
        if let Some(gr) = grid {
            if gr.len() != l {
                return Err(Error::contract(format!("grid {gr:?} does not cover {l} tokens")));
            }
        }
        Ok(Self { tokens, grid, tag })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// A token sequence living in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seq {
    pub node: NodeId,
    pub grid: Option<Grid>,
    pub tag: StreamTag,
}

impl Seq {
    pub fn input(g: &mut Graph, seq: &TokenSequence) -> Self {
        Self {
            node: g.constant(seq.tokens.clone()),
            grid: seq.grid,
            tag: seq.tag,
        }
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.node)[0]
    }

    pub fn width(&self, g: &Graph) -> usize {
        g.shape(self.node)[1]
    }

    pub fn to_owned(&self, g: &Graph) -> TokenSequence {
        TokenSequence {
            tokens: g.value(self.node).clone(),
            grid: self.grid,
            tag: self.tag,
        }
    }

    fn retag(self, tag: StreamTag) -> Self {
        Self { tag, ..self }
    }

    fn require_grid(&self, what: &str) -> Result<Grid> {
        self.grid
            .ok_or_else(|| Error::contract(format!("{what} needs a token grid")))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_const(format!("{prefix}.gain"), &[width], 1.0)?,
            bias: store.add_const(format!("{prefix}.bias"), &[width], 0.0)?,
        })
    }

    pub(crate) fn apply(&self, g: &mut Graph, x: NodeId, eps: f64) -> Result<NodeId> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, eps)
    }
}

/// Gate weights `W_g (2C x C)`, `b_g`, and the two layer norms.
#[derive(Debug, Clone)]
pub struct GateParams {
    w_g: ParamId,
    b_g: ParamId,
    ln_v: LayerNormParams,
    ln_g: LayerNormParams,
    width: usize,
}

impl GateParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_g: store.add_glorot(format!("{prefix}.w_g"), 2 * width, width, rng)?,
            b_g: store.add_const(format!("{prefix}.b_g"), &[width], 0.0)?,
            ln_v: LayerNormParams::new(store, &format!("{prefix}.ln_v"), width)?,
            ln_g: LayerNormParams::new(store, &format!("{prefix}.ln_g"), width)?,
            width,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.w_g
    }

    pub fn bias(&self) -> ParamId {
        self.b_g
    }

    /// `(gain, bias)` of the vision-stream layer norm.
    pub fn ln_v(&self) -> (ParamId, ParamId) {
        (self.ln_v.gain, self.ln_v.bias)
    }

    pub fn ln_g(&self) -> (ParamId, ParamId) {
        (self.ln_g.gain, self.ln_g.bias)
    }
}

/// Gate values with the normed streams they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTensor {
    pub alpha: Tensor,
    pub v_normed: Tensor,
    pub g_normed: Tensor,
}

impl GateTensor {
    /// Mean gate per token over channels.
    pub fn token_means(&self) -> Vec<f64> {
        let c = self.alpha.shape()[1];
        self.alpha
            .data()
            .chunks_exact(c)
            .map(|r| r.iter().sum::<f64>() / c as f64)
            .collect()
    }
}

/// Learnable bottleneck tokens `B (L_B x C)` and the attention that reads
/// the prompt with them.
#[derive(Debug, Clone)]
pub struct BottleneckParams {
    tokens: ParamId,
    attn1: AttentionParams,
    len: usize,
}

impl BottleneckParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, len: usize, width: usize, heads: usize, qk_gain: f64, rng: &mut R) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract("bottleneck length must be at least 1"));
        }
        Ok(Self {
            tokens: store.add_normal(format!("{prefix}.tokens"), &[len, width], 1.0, rng)?,
            attn1: AttentionParams::with_qk_gain(store, &format!("{prefix}.attn1"), width, heads, qk_gain, rng)?,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tokens(&self) -> ParamId {
        self.tokens
    }

    pub fn attention(&self) -> &AttentionParams {
        &self.attn1
    }
}

/// Output of a fusion pipeline. Token sequences are graph nodes;
/// diagnostics are plain values.
#[derive(Debug, Clone)]
pub struct FusedSequence {
    pub fused: Seq,
    /// Grid of the leading rows of `fused` that are vision positions.
    pub prefix_grid: Option<Grid>,
    /// `Z_G`, appended after `fused` downstream (dynamic gated path).
    pub appended_global: Option<Seq>,
    pub gate: Option<GateTensor>,
    pub relevance: Option<RelevanceScore>,
    pub attention: Option<AttentionRecord>,
    pub mask: Option<MaskOutcome>,
}

impl FusedSequence {
    fn plain(fused: Seq) -> Self {
        Self {
            fused,
            prefix_grid: fused.grid,
            appended_global: None,
            gate: None,
            relevance: None,
            attention: None,
            mask: None,
        }
    }

    /// Token count the backbone sees from this fusion output.
    pub fn downstream_len(&self, g: &Graph) -> usize {
        self.fused.len(g) + self.appended_global.map_or(0, |z| z.len(g))
    }

    /// Layout of the downstream tokens: gridded vision positions first,
    /// then unpositioned blocks.
    pub fn segments(&self, g: &Graph) -> Vec<Segment> {
        let total = self.fused.len(g);
        let mut out = Vec::new();
        let mut used = 0;
        if let Some(gr) = self.prefix_grid {
            out.push(Segment {
                len: gr.len(),
                grid: Some(gr),
                tag: StreamTag::Fused,
            });
            used = gr.len();
        }
        if total > used {
            out.push(Segment {
                len: total - used,
                grid: None,
                tag: if used > 0 { StreamTag::Bottleneck } else { StreamTag::Fused },
            });
        }
        if let Some(z) = self.appended_global {
            out.push(Segment {
                len: z.len(g),
                grid: None,
                tag: StreamTag::Bottleneck,
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub len: usize,
    pub grid: Option<Grid>,
    pub tag: StreamTag,
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Per-frame bilinear resampling matrix (align-corners) mapping a token
/// grid `src` onto `(dst_h, dst_w)`, block-diagonal over frames.
pub fn interp_matrix(src: Grid, dst_h: usize, dst_w: usize) -> Tensor {
    let dst = Grid::new(dst_h, dst_w, src.t);
    let rows = axis_taps(src.h, dst_h);
    let cols = axis_taps(src.w, dst_w);
    let mut m = Tensor::zeros(&[dst.len(), src.len()]);
    let n_src = src.len();
    let data = m.data_mut();
    for t in 0..src.t {
        for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
                let out = dst.index(t, r, c);
                for (sr, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                    for (sc, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                        data[out * n_src + src.index(t, sr, sc)] += wr * wc;
                    }
                }
            }
        }
    }
    m
}

/// Resamples a gridded sequence to `(h, w)` per frame. Matching grids return
/// the input node untouched.
pub fn interp_align(g: &mut Graph, seq: Seq, target: (usize, usize)) -> Result<Seq> {
    let grid = seq.require_grid("interp_align")?;
    if (grid.h, grid.w) == target {
        return Ok(seq);
    }
    let m = g.constant(interp_matrix(grid, target.0, target.1));
    let node = g.matmul(m, seq.node)?;
    Ok(Seq {
        node,
        grid: Some(Grid::new(target.0, target.1, grid.t)),
        tag: seq.tag,
    })
}

/// Value-level [`interp_align`].
pub fn interp_align_values(seq: &TokenSequence, target: (usize, usize)) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let s = Seq::input(&mut g, seq);
    Ok(interp_align(&mut g, s, target)?.to_owned(&g))
}

fn check_frames(fv: &Seq, fg: &Seq) -> Result<(Grid, Grid)> {
    let gv = fv.require_grid("vision stream")?;
    let gg = fg.require_grid("geometry stream")?;
    if gv.t != gg.t {
        return Err(Error::contract(format!(
            "vision has {} frames but geometry has {}",
            gv.t, gg.t
        )));
    }
    Ok((gv, gg))
}

/// Geometry resampled to the vision grid and projected to `C`.
fn static_geometry(g: &mut Graph, fv: &Seq, fg: Seq, proj: &MlpParams) -> Result<Seq> {
    let (gv, _) = check_frames(fv, &fg)?;
    let aligned = interp_align(g, fg, (gv.h, gv.w))?;
    let node = mlp_forward(g, proj, aligned.node)?;
    Ok(Seq {
        node,
        grid: Some(gv),
        tag: StreamTag::Geometry,
    })
}

/// `F = F_V + MLP(Reshape(F_G))`.
pub fn additive_fuse(g: &mut Graph, fv: Seq, fg: Seq, proj: &MlpParams) -> Result<FusedSequence> {
    let geo = static_geometry(g, &fv, fg, proj)?;
    let node = g.add(fv.node, geo.node)?;
    Ok(FusedSequence::plain(Seq {
        node,
        grid: fv.grid,
        tag: StreamTag::Fused,
    }))
}

/// `F_B = CrossAttn_1(B, F_P)`.
pub fn bottleneck_summarize(g: &mut Graph, params: &BottleneckParams, fp: Seq) -> Result<Seq> {
    let b = g.param(params.tokens);
    let rec = cross_attention(g, &params.attn1, b, fp.node)?;
    Ok(Seq {
        node: rec.context,
        grid: None,
        tag: StreamTag::Bottleneck,
    })
}

/// `(Z_G, A) = CrossAttn_2(F_B, F_G_hat)`; the geometry must already be
/// projected to the model width.
pub fn geometry_query(g: &mut Graph, fb: Seq, fg_aligned: Seq, attn2: &AttentionParams) -> Result<(Seq, AttentionRecord)> {
    let rec = cross_attention(g, attn2, fb.node, fg_aligned.node)?;
    let z = Seq {
        node: rec.context,
        grid: None,
        tag: StreamTag::Bottleneck,
    };
    Ok((z, rec))
}

/// `F = [F_V, MLP(Z_G)]` along the token axis.
pub fn qformer_concat_fuse(g: &mut Graph, fv: Seq, zg: Seq, proj: &MlpParams) -> Result<FusedSequence> {
    let z = mlp_forward(g, proj, zg.node)?;
    let node = g.concat_rows(&[fv.node, z])?;
    Ok(FusedSequence {
        prefix_grid: fv.grid,
        ..FusedSequence::plain(Seq {
            node,
            grid: None,
            tag: StreamTag::Fused,
        })
    })
}

/// `F_G~ = CrossAttn_3(F_G_hat', Z_G)`: every aligned geometry token reads
/// the compact evidence.
pub fn retrieve_geo_features(g: &mut Graph, fg_prime: Seq, zg: Seq, attn3: &AttentionParams) -> Result<Seq> {
    let rec = cross_attention(g, attn3, fg_prime.node, zg.node)?;
    Ok(Seq {
        node: rec.context,
        grid: fg_prime.grid,
        tag: StreamTag::Geometry,
    })
}

/// `a = sigmoid(W_g [V || G] + b_g)`, `F = a*V + (1-a)*G`, evaluated as
/// `G + a*(V - G)` so that `V == G` yields `G` exactly.
pub fn gated_fuse(g: &mut Graph, fv_masked: Seq, fg_tilde: Seq, params: &GateParams, cfg: &NumericsConfig) -> Result<(FusedSequence, GateTensor)> {
    let (nv, cv) = g.value(fv_masked.node).dims2()?;
    let (ng, cg) = g.value(fg_tilde.node).dims2()?;
    if nv != ng || cv != cg || cv != params.width {
        return Err(Error::dim("gated_fuse", &[nv, cv], &[ng, cg]));
    }
    let v = params.ln_v.apply(g, fv_masked.node, cfg.ln_epsilon)?;
    let gn = params.ln_g.apply(g, fg_tilde.node, cfg.ln_epsilon)?;
    let cat = g.concat_cols(&[v, gn])?;
    let w = g.param(params.w_g);
    let b = g.param(params.b_g);
    let logits = g.matmul(cat, w)?;
    let logits = g.add_row(logits, b)?;
    let alpha = g.sigmoid(logits);
    let diff = g.sub(v, gn)?;
    let scaled = g.mul(alpha, diff)?;
    let node = g.add(gn, scaled)?;
    let gate = GateTensor {
        alpha: g.value(alpha).clone(),
        v_normed: g.value(v).clone(),
        g_normed: g.value(gn).clone(),
    };
    let fused = FusedSequence {
        gate: Some(gate.clone()),
        ..FusedSequence::plain(Seq {
            node,
            grid: fv_masked.grid,
            tag: StreamTag::Fused,
        })
    };
    Ok((fused, gate))
}

/// Raw input streams of one sample.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs<'a> {
    pub vision: &'a TokenSequence,
    pub geometry: &'a TokenSequence,
    pub prompt: &'a TokenSequence,
}

/// Parameters of the gated static pipeline.
#[derive(Debug, Clone)]
pub struct StaticParams {
    pub proj: MlpParams,
    pub gate: GateParams,
}

impl StaticParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, geo_width: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: MlpParams::new(store, &format!("{prefix}.proj"), geo_width, 0, width, rng)?,
            gate: GateParams::new(store, &format!("{prefix}.gate"), width, rng)?,
        })
    }
}

/// The prompt-conditioned geometry query shared by every QFormer-style
/// path: bottleneck, geometry projection, grid alignment, `CrossAttn_2`.
#[derive(Debug, Clone)]
pub struct QueryParams {
    pub bottleneck: BottleneckParams,
    pub geo_proj: MlpParams,
    pub align: MlpParams,
    pub attn2: AttentionParams,
}

impl QueryParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &FusionDims, rng: &mut R) -> Result<Self> {
        let c = dims.width;
        Ok(Self {
            bottleneck: BottleneckParams::new(store, &format!("{prefix}.bottleneck"), dims.bottleneck_len, c, dims.heads, dims.qk_gain, rng)?,
            geo_proj: MlpParams::new(store, &format!("{prefix}.geo_proj"), dims.geo_width, 2 * c, c, rng)?,
            align: MlpParams::new(store, &format!("{prefix}.align"), c, 2 * c, c, rng)?,
            attn2: AttentionParams::with_qk_gain(store, &format!("{prefix}.attn2"), c, dims.heads, dims.qk_gain, rng)?,
        })
    }
}

/// Intermediate products of the geometry query.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    /// Geometry projected to `C` and aligned to the vision grid.
    pub aligned: Seq,
    pub z_g: Seq,
    pub attention: AttentionRecord,
    pub relevance: RelevanceScore,
}

pub fn query_geometry(g: &mut Graph, inputs: &FusionInputs, params: &QueryParams, cfg: &NumericsConfig) -> Result<(Seq, QueryOutput)> {
    let fv = Seq::input(g, inputs.vision);
    let fg = Seq::input(g, inputs.geometry);
    let fp = Seq::input(g, inputs.prompt);
    let (gv, gg) = check_frames(&fv, &fg)?;
    let fb = bottleneck_summarize(g, &params.bottleneck, fp)?;
    let projected = mlp_forward(g, &params.geo_proj, fg.node)?;
    let resampled = interp_align(
        g,
        Seq {
            node: projected,
            grid: Some(gg),
            tag: StreamTag::Geometry,
        },
        (gv.h, gv.w),
    )?;
    let aligned = Seq {
        node: mlp_forward(g, &params.align, resampled.node)?,
        grid: Some(gv),
        tag: StreamTag::Geometry,
    };
    let (z_g, attention) = geometry_query(g, fb, aligned, &params.attn2)?;
    let relevance = relevance_scores(&attention.probs, cfg)?;
    Ok((
        fv,
        QueryOutput {
            aligned,
            z_g,
            attention,
            relevance,
        },
    ))
}

/// Parameters of the gated dynamic pipeline.
#[derive(Debug, Clone)]
pub struct DynamicParams {
    pub query: QueryParams,
    pub attn3: AttentionParams,
    pub gate: GateParams,
}

impl DynamicParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &FusionDims, rng: &mut R) -> Result<Self> {
        Ok(Self {
            query: QueryParams::new(store, prefix, dims, rng)?,
            attn3: AttentionParams::with_qk_gain(store, &format!("{prefix}.attn3"), dims.width, dims.heads, dims.qk_gain, rng)?,
            gate: GateParams::new(store, &format!("{prefix}.gate"), dims.width, rng)?,
        })
    }
}

fn mask_vision<R: Rng + ?Sized>(
    g: &mut Graph,
    fv: Seq,
    plan: &MaskPlan,
    scores: Option<&RelevanceScore>,
    rng: &mut R,
) -> Result<(Seq, MaskOutcome)> {
    let n = fv.len(g);
    let outcome = plan_mask(plan, n, scores, rng)?;
    let node = apply_mask(g, fv.node, &outcome)?;
    Ok((Seq { node, ..fv }, outcome))
}

/// Random (or disabled) masking, static geometry features, gated fusion.
pub fn static_pipeline<R: Rng + ?Sized>(
    g: &mut Graph,
    inputs: &FusionInputs,
    params: &StaticParams,
    plan: &MaskPlan,
    rng: &mut R,
    cfg: &NumericsConfig,
) -> Result<FusedSequence> {
    if plan.mode == MaskMode::RelevanceTopK {
        return Err(Error::contract("the static pipeline has no relevance scores; use random masking"));
    }
    let fv = Seq::input(g, inputs.vision);
    let fg = Seq::input(g, inputs.geometry);
    let (fv_masked, outcome) = mask_vision(g, fv, plan, None, rng)?;
    let geo = static_geometry(g, &fv, fg, &params.proj)?;
    let (mut fused, _) = gated_fuse(g, fv_masked, geo, &params.gate, cfg)?;
    fused.mask = Some(outcome);
    Ok(fused)
}

/// Bottleneck query over aligned geometry, relevance-guided masking,
/// retrieval of per-token geometry from `Z_G`, gated fusion, and `Z_G`
/// appended.
pub fn dynamic_pipeline<R: Rng + ?Sized>(
    g: &mut Graph,
    inputs: &FusionInputs,
    params: &DynamicParams,
    plan: &MaskPlan,
    rng: &mut R,
    cfg: &NumericsConfig,
) -> Result<FusedSequence> {
    let (fv, q) = query_geometry(g, inputs, &params.query, cfg)?;
    let (fv_masked, outcome) = mask_vision(g, fv, plan, Some(&q.relevance), rng)?;
    let geo = retrieve_geo_features(g, q.aligned, q.z_g, &params.attn3)?;
    let (mut fused, _) = gated_fuse(g, fv_masked, geo, &params.gate, cfg)?;
    fused.appended_global = Some(q.z_g.retag(StreamTag::Bottleneck));
    fused.relevance = Some(q.relevance);
    fused.attention = Some(q.attention);
    fused.mask = Some(outcome);
    Ok(fused)
}

/// Rows of a `index,t,h,w,value` CSV for a per-token quantity on `grid`.
pub fn grid_csv(values: &[f64], grid: Grid) -> Result<String> {
    if values.len() != grid.len() {
        return Err(Error::dim("grid_csv", &[values.len()], &[grid.h, grid.w, grid.t]));
    }
    let mut out = String::from("index,t,h,w,value\n");
    for (i, v) in values.iter().enumerate() {
        let (t, h, w) = grid.coords(i);
        out.push_str(&format!("{i},{t},{h},{w},{v:.16e}\n"));
    }
    Ok(out)
}

/// Ablation wiring: which of masking, gated fusion, and the original
/// (additive or concatenation) fusion are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Masking + gated fusion.
    A,
    /// Masking + original fusion.
    B,
    /// Masking with a parameter-free geometry injection.
    C,
    /// Gated fusion only.
    D,
    /// Original fusion only.
    E,
    /// No geometry branch.
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn masks(self) -> bool {
        matches!(self, Variant::A | Variant::B | Variant::C)
    }

    pub fn gated(self) -> bool {
        matches!(self, Variant::A | Variant::D)
    }

    pub fn original_fusion(self) -> bool {
        matches!(self, Variant::B | Variant::E)
    }

    pub fn uses_geometry(self) -> bool {
        self != Variant::F
    }

    pub fn letter(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "a" | "A" => Some(Variant::A),
            "b" | "B" => Some(Variant::B),
            "c" | "C" => Some(Variant::C),
            "d" | "D" => Some(Variant::D),
            "e" | "E" => Some(Variant::E),
            "f" | "F" => Some(Variant::F),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionDims {
    pub vision_grid: Grid,
    /// Geometry grid per frame `(H_G, W_G)`.
    pub geometry_hw: (usize, usize),
    pub geo_width: usize,
    pub width: usize,
    pub heads: usize,
    pub bottleneck_len: usize,
    /// Init multiplier on the query/key projections of the fusion attentions.
    pub qk_gain: f64,
}

impl FusionDims {
    pub fn geometry_grid(&self) -> Grid {
        Grid::new(self.geometry_hw.0, self.geometry_hw.1, self.vision_grid.t)
    }
}

#[derive(Debug, Clone)]
enum Wiring {
    StaticGated(StaticParams, Option<QueryParams>),
    StaticAdditive(MlpParams),
    StaticFixed,
    DynamicGated(DynamicParams),
    DynamicConcat(QueryParams, MlpParams),
    DynamicPlain(QueryParams),
    NoGeometry,
}

/// One ablation variant with its parameters.
#[derive(Debug, Clone)]
pub struct FusionModel {
    kind: PipelineKind,
    variant: Variant,
    dims: FusionDims,
    wiring: Wiring,
}

impl FusionModel {
    /// `static_qformer` adds the bottleneck query to the gated static
    /// pipeline and appends its `Z_G`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        kind: PipelineKind,
        variant: Variant,
        dims: FusionDims,
        static_qformer: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let p = "fusion";
        let wiring = match (kind, variant) {
            (_, Variant::F) => Wiring::NoGeometry,
            (PipelineKind::Static, Variant::A | Variant::D) => {
                let st = StaticParams::new(store, p, dims.geo_width, dims.width, rng)?;
                let q = if static_qformer {
                    Some(QueryParams::new(store, p, &dims, rng)?)
                } else {
                    None
                };
                Wiring::StaticGated(st, q)
            }
            (PipelineKind::Static, Variant::B | Variant::E) => {
                Wiring::StaticAdditive(MlpParams::new(store, &format!("{p}.proj"), dims.geo_width, 0, dims.width, rng)?)
            }
            (PipelineKind::Static, Variant::C) => {
                if dims.geo_width > dims.width {
                    return Err(Error::contract("parameter-free injection needs C_G <= C"));
                }
                Wiring::StaticFixed
            }
            (PipelineKind::Dynamic, Variant::A | Variant::D) => Wiring::DynamicGated(DynamicParams::new(store, p, &dims, rng)?),
            (PipelineKind::Dynamic, Variant::B | Variant::E) => Wiring::DynamicConcat(
                QueryParams::new(store, p, &dims, rng)?,
                MlpParams::new(store, &format!("{p}.concat_proj"), dims.width, 2 * dims.width, dims.width, rng)?,
            ),
            (PipelineKind::Dynamic, Variant::C) => Wiring::DynamicPlain(QueryParams::new(store, p, &dims, rng)?),
        };
        Ok(Self {
            kind,
            variant,
            dims,
            wiring,
        })
    }

    pub fn kind(&self) -> PipelineKind {
        self.kind
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> &FusionDims {
        &self.dims
    }

    /// The plan actually applied for `plan` under this variant: variants
    /// without masking always run disabled.
    pub fn effective_plan(&self, plan: &MaskPlan) -> MaskPlan {
        if self.variant.masks() {
            *plan
        } else {
            MaskPlan::disabled()
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        inputs: &FusionInputs,
        plan: &MaskPlan,
        rng: &mut R,
        cfg: &NumericsConfig,
    ) -> Result<FusedSequence> {
        let plan = self.effective_plan(plan);
        match &self.wiring {
            Wiring::NoGeometry => {
                let fv = Seq::input(g, inputs.vision);
                let (fv, outcome) = mask_vision(g, fv, &plan, None, rng)?;
                Ok(FusedSequence {
                    mask: Some(outcome),
                    ..FusedSequence::plain(fv.retag(StreamTag::Fused))
                })
            }
            Wiring::StaticGated(params, None) => static_pipeline(g, inputs, params, &plan, rng, cfg),
            Wiring::StaticGated(params, Some(query)) => {
                let (fv, q) = query_geometry(g, inputs, query, cfg)?;
                let scores = (plan.mode == MaskMode::RelevanceTopK).then_some(&q.relevance);
                let (fv_masked, outcome) = mask_vision(g, fv, &plan, scores, rng)?;
                let fg = Seq::input(g, inputs.geometry);
                let geo = static_geometry(g, &fv, fg, &params.proj)?;
                let (mut fused, _) = gated_fuse(g, fv_masked, geo, &params.gate, cfg)?;
                fused.appended_global = Some(q.z_g);
                fused.relevance = Some(q.relevance);
                fused.attention = Some(q.attention);
                fused.mask = Some(outcome);
                Ok(fused)
            }
            Wiring::StaticAdditive(proj) => {
                let fv = Seq::input(g, inputs.vision);
                let fg = Seq::input(g, inputs.geometry);
                let (fv_masked, outcome) = mask_vision(g, fv, &plan, None, rng)?;
                let mut fused = additive_fuse(g, fv_masked, fg, proj)?;
                fused.mask = Some(outcome);
                Ok(fused)
            }
            Wiring::StaticFixed => {
                let fv = Seq::input(g, inputs.vision);
                let fg = Seq::input(g, inputs.geometry);
                let (fv_masked, outcome) = mask_vision(g, fv, &plan, None, rng)?;
                let gv = fv.require_grid("vision stream")?;
                check_frames(&fv, &fg)?;
                let aligned = interp_align(g, fg, (gv.h, gv.w))?;
                let pad = g.constant(pad_embedding(self.dims.geo_width, self.dims.width));
                let geo = g.matmul(aligned.node, pad)?;
                let node = g.add(fv_masked.node, geo)?;
                Ok(FusedSequence {
                    mask: Some(outcome),
                    ..FusedSequence::plain(Seq {
                        node,
                        grid: Some(gv),
                        tag: StreamTag::Fused,
                    })
                })
            }
            Wiring::DynamicGated(params) => dynamic_pipeline(g, inputs, params, &plan, rng, cfg),
            Wiring::DynamicConcat(query, proj) => {
                let (fv, q) = query_geometry(g, inputs, query, cfg)?;
                let (fv_masked, outcome) = mask_vision(g, fv, &plan, Some(&q.relevance), rng)?;
                let mut fused = qformer_concat_fuse(g, fv_masked, q.z_g, proj)?;
                fused.relevance = Some(q.relevance);
                fused.attention = Some(q.attention);
                fused.mask = Some(outcome);
                Ok(fused)
            }
            Wiring::DynamicPlain(query) => {
                let (fv, q) = query_geometry(g, inputs, query, cfg)?;
                let (fv_masked, outcome) = mask_vision(g, fv, &plan, Some(&q.relevance), rng)?;
                let node = g.concat_rows(&[fv_masked.node, q.z_g.node])?;
                Ok(FusedSequence {
                    prefix_grid: fv.grid,
                    relevance: Some(q.relevance),
                    attention: Some(q.attention),
                    mask: Some(outcome),
                    ..FusedSequence::plain(Seq {
                        node,
                        grid: None,
                        tag: StreamTag::Fused,
                    })
                })
            }
        }
    }
}

/// `C_G x C` matrix embedding geometry channels into the first `C_G`
/// model channels.
fn pad_embedding(geo_width: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[geo_width, width]);
    for i in 0..geo_width {
        t.data_mut()[i * width + i] = 1.0;
    }
    t
}
