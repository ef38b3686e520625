//! Multi-head cross-attention and small MLP projections.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

/// Per-head query/key/value projections (`C -> C/h` each) and an output
/// projection `C -> C`. No biases.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    width: usize,
    heads: usize,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Self::with_qk_gain(store, prefix, width, heads, 1.0, rng)
    }

    /// Glorot init with the query and key projections multiplied by `qk_gain`,
    /// which sharpens the attention of a fresh layer.
    pub fn with_qk_gain<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, qk_gain: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let hd = width / heads;
        let mut mk = |kind: &str, store: &mut ParamStore| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|k| store.add_glorot(format!("{prefix}.{kind}.{k}"), width, hd, rng))
                .collect()
        };
        let wq = mk("wq", store)?;
        let wk = mk("wk", store)?;
        for &id in wq.iter().chain(&wk) {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= qk_gain);
        }
        let wv = mk("wv", store)?;
        let wo = store.add_glorot(format!("{prefix}.wo"), width, width, rng)?;
        Ok(Self {
            width,
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Query and key projections of head `k`, for tests that need to steer logits.
    pub fn query_key(&self, k: usize) -> (ParamId, ParamId) {
        (self.wq[k], self.wk[k])
    }

    pub fn value_output(&self, k: usize) -> (ParamId, ParamId) {
        (self.wv[k], self.wo)
    }
}

/// Attention probabilities (`heads x L_q x L_k`) alongside the graph node of
/// the projected context (`L_q x C`).
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub probs: Tensor,
    pub context: NodeId,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Probability of `(head, query, key)`.
    pub fn prob(&self, head: usize, query: usize, key: usize) -> f64 {
        self.probs.at(&[head, query, key])
    }
}

/// Scaled dot-product attention per head (scale `1/sqrt(C/h)`), heads
/// concatenated along channels, then output-projected.
pub fn cross_attention(g: &mut Graph, params: &AttentionParams, queries: NodeId, keys_values: NodeId) -> Result<AttentionRecord> {
    let (lq, cq) = g.value(queries).dims2()?;
    let (lk, ck) = g.value(keys_values).dims2()?;
    if cq != params.width || ck != params.width {
        return Err(Error::dim("cross_attention", &[cq, ck], &[params.width]));
    }
    let scale = 1.0 / (params.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    let mut probs = Vec::with_capacity(params.heads * lq * lk);
    for k in 0..params.heads {
        let (wq, wk, wv) = (g.param(params.wq[k]), g.param(params.wk[k]), g.param(params.wv[k]));
        let q = g.matmul(queries, wq)?;
        let key = g.matmul(keys_values, wk)?;
        let v = g.matmul(keys_values, wv)?;
        let logits = g.matmul_nt(q, key)?;
        let logits = g.scale(logits, scale);
        let p = g.softmax(logits, 1)?;
        probs.extend_from_slice(g.value(p).data());
        heads.push(g.matmul(p, v)?);
    }
    let cat = g.concat_cols(&heads)?;
    let wo = g.param(params.wo);
    let context = g.matmul(cat, wo)?;
    Ok(AttentionRecord {
        probs: Tensor::new(vec![params.heads, lq, lk], probs)?,
        context,
    })
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

/// Tokenwise perceptron: one linear layer, or two with GELU in between.
#[derive(Debug, Clone)]
pub struct MlpParams {
    layers: Vec<Linear>,
    in_width: usize,
    out_width: usize,
}

impl MlpParams {
    /// `hidden == 0` gives a single linear layer.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, in_width: usize, hidden: usize, out_width: usize, rng: &mut R) -> Result<Self> {
        let dims: Vec<usize> = if hidden == 0 {
            vec![in_width, out_width]
        } else {
            vec![in_width, hidden, out_width]
        };
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let w = store.add_glorot(format!("{prefix}.l{i}.w"), pair[0], pair[1], rng)?;
            let b = store.add_const(format!("{prefix}.l{i}.b"), &[pair[1]], 0.0)?;
            layers.push(Linear { w, b });
        }
        Ok(Self {
            layers,
            in_width,
            out_width,
        })
    }

    /// Single linear layer with explicit weights.
    pub fn linear_from(store: &mut ParamStore, prefix: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (i, o) = weight.dims2()?;
        if bias.numel() != o {
            return Err(Error::dim("MlpParams::linear_from", weight.shape(), bias.shape()));
        }
        let w = store.add(format!("{prefix}.l0.w"), weight)?;
        let b = store.add(format!("{prefix}.l0.b"), bias.reshape(vec![o])?)?;
        Ok(Self {
            layers: vec![Linear { w, b }],
            in_width: i,
            out_width: o,
        })
    }

    pub(crate) fn from_linear(w: ParamId, b: ParamId, in_width: usize, out_width: usize) -> Self {
        Self {
            layers: vec![Linear { w, b }],
            in_width,
            out_width,
        }
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }
}

pub fn mlp_forward(g: &mut Graph, params: &MlpParams, x: NodeId) -> Result<NodeId> {
    let (_, c) = g.value(x).dims2()?;
    if c != params.in_width {
        return Err(Error::dim("mlp_forward", g.shape(x), &[params.in_width, params.out_width]));
    }
    let mut h = x;
    for (i, layer) in params.layers.iter().enumerate() {
        if i > 0 {
            h = g.gelu(h);
        }
        let (w, b) = (g.param(layer.w), g.param(layer.b));
        let z = g.matmul(h, w)?;
        h = g.add_row(z, b)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn identical_keys_give_uniform_probs_and_mean_value() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 8, 2, &mut rng()).unwrap();
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap());
        let row: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let kv = g.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap());
        let rec = cross_attention(&mut g, &p, q, kv).unwrap();
        for &pr in rec.probs.data() {
            assert!((pr - 1.0 / 3.0).abs() < 1e-9);
        }
        // context = value row projected through every head and W_o
        let single = g.constant(Tensor::from_rows(&[row]).unwrap());
        let one = cross_attention(&mut g, &p, q, single).unwrap();
        assert!(g.value(rec.context).max_abs_diff(g.value(one.context)) < 1e-9);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 8, 2, &mut rng()).unwrap();
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::zeros(&[2, 8]));
        let kv = g.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(cross_attention(&mut g, &p, q, kv), Err(Error::Dimension { .. })));
    }

    #[test]
    fn width_must_divide_heads() {
        let mut store = ParamStore::new();
        assert!(AttentionParams::new(&mut store, "a", 6, 4, &mut rng()).is_err());
    }

    #[test]
    fn mlp_zero_and_identity() {
        let mut store = ParamStore::new();
        let zero = MlpParams::linear_from(&mut store, "z", Tensor::zeros(&[3, 3]), Tensor::zeros(&[3])).unwrap();
        let id = MlpParams::linear_from(&mut store, "i", Tensor::eye(3), Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_rows(&[[1.0, -2.0, 3.5], [0.25, 7.0, -1.0]]).unwrap());
        let z = mlp_forward(&mut g, &zero, x).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let y = mlp_forward(&mut g, &id, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn mlp_width_mismatch() {
        let mut store = ParamStore::new();
        let m = MlpParams::new(&mut store, "m", 4, 8, 2, &mut rng()).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[3, 5]));
        assert!(mlp_forward(&mut g, &m, x).is_err());
    }
}
