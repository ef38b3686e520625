//! Vision-token masking: a Bernoulli switch decides whether a sample is
//! masked at all, then either a uniform random subset or the most relevant
//! positions (by attention mass from the bottleneck queries) are zeroed.
//!
//! Masked tokens are zeroed in place; the sequence never shrinks.

use rand::Rng;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, NumericsConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Random,
    RelevanceTopK,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mode: MaskMode,
    /// Fraction of positions masked when masking fires.
    pub gamma: f64,
    /// Probability that masking fires for a given sample.
    pub beta: f64,
}

impl MaskPlan {
    pub const fn disabled() -> Self {
        Self {
            mode: MaskMode::Disabled,
            gamma: 0.0,
            beta: 0.0,
        }
    }

    pub fn new(mode: MaskMode, gamma: f64, beta: f64) -> Result<Self> {
        let plan = Self { mode, gamma, beta };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        check_unit("gamma", self.gamma)?;
        check_unit("beta", self.beta)
    }

    pub fn is_disabled(&self) -> bool {
        self.mode == MaskMode::Disabled
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::contract(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// `ceil(gamma * n)`, robust to the representation error of decimal ratios
/// such as `0.7 * 10 = 7.000000000000001`.
pub fn mask_count(n: usize, gamma: f64) -> usize {
    let raw = gamma * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Realised mask for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskOutcome {
    enabled: bool,
    mask_set: Vec<usize>,
    keep: Vec<bool>,
}

impl MaskOutcome {
    pub fn disabled(n: usize) -> Self {
        Self {
            enabled: false,
            mask_set: Vec::new(),
            keep: vec![true; n],
        }
    }

    /// Enabled mask over `n` positions zeroing exactly `set`.
    pub fn from_set(n: usize, mut set: Vec<usize>) -> Result<Self> {
        set.sort_unstable();
        set.dedup();
        if let Some(&last) = set.last() {
            if last >= n {
                return Err(Error::contract(format!("mask position {last} out of range for {n} tokens")));
            }
        }
        let mut keep = vec![true; n];
        for &j in &set {
            keep[j] = false;
        }
        Ok(Self {
            enabled: true,
            mask_set: set,
            keep,
        })
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn mask_set(&self) -> &[usize] {
        &self.mask_set
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// The binary vector `m` (0 at masked positions).
    pub fn m(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| k as u8).collect()
    }

    fn factors(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}

impl Serialize for MaskOutcome {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("MaskOutcome", 3)?;
        st.serialize_field("enabled", &self.enabled)?;
        st.serialize_field("k", &self.mask_set.len())?;
        st.serialize_field("mask_set", &self.mask_set)?;
        st.end()
    }
}

/// One Bernoulli(`beta`) draw; consumes exactly one uniform from `rng`.
pub fn sample_enable<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> Result<bool> {
    check_unit("beta", beta)?;
    let u: f64 = rng.gen();
    Ok(u < beta)
}

/// Uniform sample without replacement of `ceil(gamma * n)` positions, sorted.
pub fn random_mask_set<R: Rng + ?Sized>(n: usize, gamma: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::contract("random_mask_set needs at least one token"));
    }
    check_unit("gamma", gamma)?;
    let k = mask_count(n, gamma);
    let mut set = rand::seq::index::sample(rng, n, k).into_vec();
    set.sort_unstable();
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelevanceScore {
    /// Min-max normalised relevance, in `[0, 1)`.
    pub s: Vec<f64>,
    /// Mean attention mass per key over heads and queries.
    pub u: Vec<f64>,
}

/// Relevance from a `heads x queries x keys` probability tensor:
/// `u_j` is the mean over heads and queries, `s = (u - min u) / (max u - min u + eps)`.
pub fn relevance_scores(probs: &Tensor, cfg: &NumericsConfig) -> Result<RelevanceScore> {
    let &[h, lq, n] = probs.shape() else {
        return Err(Error::contract(format!(
            "relevance needs heads x queries x keys, got {:?}",
            probs.shape()
        )));
    };
    let mut u = vec![0.0; n];
    for row in probs.data().chunks_exact(n) {
        for (acc, &p) in u.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let denom = (h * lq) as f64;
    u.iter_mut().for_each(|v| *v /= denom);
    let min = u.iter().copied().fold(f64::INFINITY, f64::min);
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = u.iter().map(|&v| (v - min) / (max - min + cfg.epsilon)).collect();
    Ok(RelevanceScore { s, u })
}

/// Indices of the `ceil(gamma * N)` largest scores, ties toward the lower
/// index, returned sorted ascending.
pub fn topk_mask_set(scores: &[f64], gamma: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::contract("topk over an empty score vector"));
    }
    check_unit("gamma", gamma)?;
    let k = mask_count(scores.len(), gamma);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut set = order[..k].to_vec();
    set.sort_unstable();
    Ok(set)
}

/// Draws the enable bit, then selects positions per `plan.mode`.
/// `Disabled` consumes no randomness.
pub fn plan_mask<R: Rng + ?Sized>(plan: &MaskPlan, n: usize, scores: Option<&RelevanceScore>, rng: &mut R) -> Result<MaskOutcome> {
    plan.validate()?;
    if plan.is_disabled() {
        return Ok(MaskOutcome::disabled(n));
    }
    if !sample_enable(plan.beta, rng)? {
        return Ok(MaskOutcome::disabled(n));
    }
    let set = match plan.mode {
        MaskMode::Random => random_mask_set(n, plan.gamma, rng)?,
        MaskMode::RelevanceTopK => {
            let scores = scores.ok_or_else(|| Error::contract("TopK masking needs relevance scores"))?;
            if scores.s.len() != n {
                return Err(Error::dim("plan_mask", &[n], &[scores.s.len()]));
            }
            topk_mask_set(&scores.s, plan.gamma)?
        }
        MaskMode::Disabled => unreachable!(),
    };
    MaskOutcome::from_set(n, set)
}

/// Zeroes masked rows of an `N x C` node. A disabled outcome returns `x`
/// itself.
pub fn apply_mask(g: &mut Graph, x: NodeId, outcome: &MaskOutcome) -> Result<NodeId> {
    let (n, _) = g.value(x).dims2()?;
    if n != outcome.len() {
        return Err(Error::dim("apply_mask", g.shape(x), &[outcome.len()]));
    }
    if !outcome.enabled || outcome.mask_set.is_empty() {
        return Ok(x);
    }
    g.scale_rows(x, &outcome.factors())
}

/// Value-level [`apply_mask`].
pub fn apply_mask_values(x: &Tensor, outcome: &MaskOutcome) -> Result<Tensor> {
    let mut g = Graph::new();
    let id = g.constant(x.clone());
    let out = apply_mask(&mut g, id, outcome)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(!sample_enable(0.0, &mut rng).unwrap());
            assert!(sample_enable(1.0, &mut rng).unwrap());
        }
        assert!(sample_enable(1.5, &mut rng).is_err());
        assert!(sample_enable(-0.1, &mut rng).is_err());
    }

    #[test]
    fn enable_consumes_one_event() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        sample_enable(0.5, &mut a).unwrap();
        let _: f64 = b.gen();
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn random_set_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(random_mask_set(7, 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(random_mask_set(7, 1.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(random_mask_set(0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn relevance_hand_cases() {
        let cfg = NumericsConfig::default();
        let a = Tensor::new(vec![1, 1, 2], vec![0.2, 0.8]).unwrap();
        let r = relevance_scores(&a, &cfg).unwrap();
        assert_eq!(r.s[0], 0.0);
        assert!((r.s[1] - 0.6 / (0.6 + 1e-6)).abs() < 1e-15);
        assert!((r.s[1] - 0.999998).abs() < 1e-6);

        let uniform = Tensor::full(&[1, 1, 4], 0.25);
        assert_eq!(relevance_scores(&uniform, &cfg).unwrap().s, vec![0.0; 4]);

        let cancel = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = relevance_scores(&cancel, &cfg).unwrap();
        assert_eq!(r.u, vec![0.5, 0.5]);
        assert_eq!(r.s, vec![0.0, 0.0]);
    }

    #[test]
    fn topk_hand_cases() {
        assert_eq!(topk_mask_set(&[0.1, 0.9, 0.5], 0.6).unwrap(), vec![1, 2]);
        assert_eq!(topk_mask_set(&[0.5, 0.5, 0.1], 1.0 / 3.0).unwrap(), vec![0]);
        assert_eq!(topk_mask_set(&[0.3, 0.1, 0.2], 1.0).unwrap(), vec![0, 1, 2]);
        assert!(topk_mask_set(&[], 0.5).is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let same = apply_mask_values(&x, &MaskOutcome::disabled(2)).unwrap();
        assert_eq!(same, x);
        let o = MaskOutcome::from_set(2, vec![0]).unwrap();
        let y = apply_mask_values(&x, &o).unwrap();
        assert_eq!(y.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(y.row(1), x.row(1));
        assert!(apply_mask_values(&x, &MaskOutcome::disabled(3)).is_err());
    }

    #[test]
    fn outcome_json_shape() {
        let o = MaskOutcome::from_set(5, vec![3, 1]).unwrap();
        assert_eq!(
            serde_json::to_string(&o).unwrap(),
            r#"{"enabled":true,"k":2,"mask_set":[1,3]}"#
        );
        assert_eq!(o.m(), vec![1, 0, 1, 0, 1]);
        let d = MaskOutcome::disabled(3);
        assert_eq!(serde_json::to_string(&d).unwrap(), r#"{"enabled":false,"k":0,"mask_set":[]}"#);
    }

    #[test]
    fn plan_requires_scores_for_topk() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = MaskPlan::new(MaskMode::RelevanceTopK, 0.5, 1.0).unwrap();
        assert!(plan_mask(&plan, 4, None, &mut rng).is_err());
        let scores = RelevanceScore {
            s: vec![0.0, 1.0, 0.5, 0.2],
            u: vec![0.0; 4],
        };
        let o = plan_mask(&plan, 4, Some(&scores), &mut rng).unwrap();
        assert_eq!(o.mask_set(), &[1, 2]);
    }

    #[test]
    fn mask_count_handles_decimal_ratios() {
        assert_eq!(mask_count(10, 0.7), 7);
        assert_eq!(mask_count(10, 0.8), 8);
        assert_eq!(mask_count(5, 0.6), 3);
        assert_eq!(mask_count(1, 0.25), 1);
        assert_eq!(mask_count(64, 0.0), 0);
    }
}
