//! Synthetic spatial-reasoning scenes with an appearance shortcut.
//!
//! Each scene places objects on distinct vision cells. Two of them are the
//! candidates the question asks about: candidate 0 always sits in the left
//! half of the grid, candidate 1 in the right half, so answering means
//! binding a geometric quantity to a side. The vision stream carries class,
//! color and a marker channel lit on one candidate; at train time the
//! marker usually sits on the correct candidate, at test time it is a coin
//! flip. Only the geometry stream determines the label.
//!
//! Vision channels: `[class one-hot | rgb | marker | background | 0...]`.
//! Geometry channels: `[x, y, z, dx, dy, dz | 0...]`.
//! Prompt tokens: question, anchor, candidate 0, candidate 1; channels
//! `[class one-hot | role one-hot (4) | question one-hot (2) | 0...]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Grid, StreamTag, TokenSequence};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    CloserToAnchor,
    FasterOfTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channels {
    pub vision: usize,
    pub geometry: usize,
    pub model: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid: Grid,
    /// Geometry grid per frame `[H_G, W_G]`.
    pub geometry_grid: [usize; 2],
    pub n_objects: usize,
    pub n_classes: usize,
    pub channels: Channels,
    pub shortcut_strength: f64,
    pub question_type: QuestionType,
    /// Coordinates are drawn from `[-r, r]^3`.
    pub coordinate_range: f64,
    /// Candidate speeds, as fractions of the range, lie in `[lo, hi]`.
    pub speed_range: [f64; 2],
    /// Minimum gap between the two candidates' deciding quantities, as a
    /// fraction of the range; closer scenes are redrawn.
    pub min_gap: f64,
    /// Candidates move in uniformly random directions; otherwise along +x.
    pub isotropic_motion: bool,
    /// Geometry channels 6 and 7 carry the token's normalised grid column
    /// and row in `[-1, 1]`, as a positional embedding would.
    pub geometry_position: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: Grid::new(4, 4, 4),
            geometry_grid: [4, 4],
            n_objects: 4,
            n_classes: 8,
            channels: Channels {
                vision: 32,
                geometry: 8,
                model: 32,
            },
            shortcut_strength: 0.95,
            question_type: QuestionType::FasterOfTwo,
            coordinate_range: 1.0,
            speed_range: [0.1, 1.0],
            min_gap: 0.15,
            isotropic_motion: false,
            geometry_position: true,
        }
    }
}

const GEO_USED: usize = 6;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid;
        let bad = |m: String| Err(Error::contract(m));
        if g.h == 0 || g.w < 2 || g.t == 0 {
            return bad(format!("scene.grid {g:?} needs h >= 1, w >= 2, t >= 1"));
        }
        if self.n_objects < 3 {
            return bad(format!("scene.n_objects must be at least 3, got {}", self.n_objects));
        }
        if self.n_objects > g.h * g.w {
            return bad(format!(
                "scene.n_objects {} exceeds the {} grid cells",
                self.n_objects,
                g.h * g.w
            ));
        }
        if self.n_classes < self.n_objects {
            return bad("scene.n_classes must be at least n_objects".into());
        }
        let [hg, wg] = self.geometry_grid;
        if hg < g.h || wg < g.w {
            return bad(format!("scene.geometry_grid {hg}x{wg} must be at least the vision grid {}x{}", g.h, g.w));
        }
        if self.channels.vision != self.channels.model {
            return bad("scene.channels.vision must equal scene.channels.model".into());
        }
        if self.channels.vision < self.vision_used() {
            return bad(format!("scene.channels.vision must be at least {}", self.vision_used()));
        }
        if self.channels.model < self.prompt_used() {
            return bad(format!("scene.channels.model must be at least {}", self.prompt_used()));
        }
        let geo_used = if self.geometry_position { GEO_USED + 2 } else { GEO_USED };
        if self.channels.geometry < geo_used {
            return bad(format!("scene.channels.geometry must be at least {geo_used}"));
        }
        if !(0.0..=1.0).contains(&self.shortcut_strength) {
            return bad(format!("scene.shortcut_strength must lie in [0, 1], got {}", self.shortcut_strength));
        }
        if !(self.coordinate_range > 0.0 && self.coordinate_range.is_finite()) {
            return bad("scene.coordinate_range must be positive".into());
        }
        let [lo, hi] = self.speed_range;
        if !(0.0 <= lo && lo < hi && hi.is_finite()) {
            return bad("scene.speed_range must satisfy 0 <= lo < hi".into());
        }
        if !(self.min_gap >= 0.0 && self.min_gap < hi - lo) {
            return bad("scene.min_gap must lie in [0, hi - lo)".into());
        }
        Ok(())
    }

    pub fn geometry_token_grid(&self) -> Grid {
        Grid::new(self.geometry_grid[0], self.geometry_grid[1], self.grid.t)
    }

    pub fn marker_channel(&self) -> usize {
        self.n_classes + 3
    }

    fn background_channel(&self) -> usize {
        self.n_classes + 4
    }

    fn vision_used(&self) -> usize {
        self.n_classes + 5
    }

    fn prompt_used(&self) -> usize {
        self.n_classes + 6
    }
}

/// Where things are and what decides the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub question: QuestionType,
    /// Vision cells `(row, col)` of anchor, candidate 0, candidate 1.
    pub anchor_cell: [usize; 2],
    pub candidate_cells: [[usize; 2]; 2],
    pub marker_candidate: usize,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub vision: TokenSequence,
    pub geometry: TokenSequence,
    pub prompt: TokenSequence,
    pub label: usize,
    pub shortcut_agrees: bool,
    pub meta: SceneMeta,
}

/// First geometry-grid cell covered by vision cell `(row, col)`.
fn geometry_cell(cfg: &SceneConfig, row: usize, col: usize) -> (usize, usize) {
    let [hg, wg] = cfg.geometry_grid;
    ((row * hg).div_ceil(cfg.grid.h), (col * wg).div_ceil(cfg.grid.w))
}

/// Vision cell containing geometry cell `(gr, gc)`.
fn vision_cell(cfg: &SceneConfig, gr: usize, gc: usize) -> (usize, usize) {
    let [hg, wg] = cfg.geometry_grid;
    (gr * cfg.grid.h / hg, gc * cfg.grid.w / wg)
}

fn norm3(v: &[f64]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// The quantity that decides the label for each candidate, read from the
/// geometry tokens: mean per-frame displacement magnitude (FasterOfTwo) or
/// Euclidean distance to the anchor at the last frame (CloserToAnchor).
pub fn geometry_features(sample: &Sample) -> Result<[f64; 2]> {
    let grid = sample
        .geometry
        .grid
        .ok_or_else(|| Error::contract("sample geometry has no grid"))?;
    let token = |t: usize, cell: (usize, usize)| sample.geometry.tokens.row(grid.index(t, cell.0, cell.1));
    let vision_grid = sample.vision.grid.ok_or_else(|| Error::contract("sample vision has no grid"))?;
    let cfg = SceneConfig {
        grid: vision_grid,
        geometry_grid: [grid.h, grid.w],
        ..SceneConfig::default()
    };
    let cell = |c: [usize; 2]| geometry_cell(&cfg, c[0], c[1]);
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let cand = cell(sample.meta.candidate_cells[k]);
        *o = match sample.meta.question {
            QuestionType::FasterOfTwo => (0..grid.t).map(|t| norm3(&token(t, cand)[3..6])).sum::<f64>() / grid.t as f64,
            QuestionType::CloserToAnchor => {
                let last = grid.t - 1;
                let a = token(last, cell(sample.meta.anchor_cell));
                let c = token(last, cand);
                norm3(&[c[0] - a[0], c[1] - a[1], c[2] - a[2]])
            }
        };
    }
    Ok(out)
}

/// Recomputes the label from geometry alone.
pub fn label_oracle(sample: &Sample) -> Result<usize> {
    let [f0, f1] = geometry_features(sample)?;
    Ok(match sample.meta.question {
        QuestionType::FasterOfTwo => usize::from(f1 > f0),
        QuestionType::CloserToAnchor => usize::from(f1 < f0),
    })
}

/// Label implied by the marker channel alone.
pub fn marker_probe(sample: &Sample, marker_channel: usize) -> usize {
    let c = sample.vision.width();
    let grid = sample.vision.grid.expect("vision grid");
    let mut side = [0.0; 2];
    for (i, row) in sample.vision.tokens.data().chunks_exact(c).enumerate() {
        let (_, _, col) = grid.coords(i);
        side[usize::from(col >= grid.w / 2)] += row[marker_channel];
    }
    usize::from(side[1] > side[0])
}

fn unit_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

fn uniform3<R: Rng + ?Sized>(rng: &mut R, r: f64) -> [f64; 3] {
    [rng.gen_range(-r..=r), rng.gen_range(-r..=r), rng.gen_range(-r..=r)]
}

fn unit3<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = uniform3(rng, 1.0);
        let n = norm3(&v);
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

struct Placement {
    anchor: (usize, usize),
    cands: [(usize, usize); 2],
    others: Vec<(usize, usize)>,
}

fn place<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Placement {
    let (h, w) = (cfg.grid.h, cfg.grid.w);
    let half = w / 2;
    let c0 = (rng.gen_range(0..h), rng.gen_range(0..half));
    let c1 = (rng.gen_range(0..h), rng.gen_range(half..w));
    let mut free: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&p| p != c0 && p != c1)
        .collect();
    let need = cfg.n_objects - 2;
    let picks = rand::seq::index::sample(rng, free.len(), need).into_vec();
    let mut chosen: Vec<_> = picks.iter().map(|&i| free[i]).collect();
    free.clear();
    let anchor = chosen.remove(0);
    Placement {
        anchor,
        cands: [c0, c1],
        others: chosen,
    }
}

/// Per-object geometry: start position and per-frame velocity.
struct Motion {
    start: [f64; 3],
    velocity: [f64; 3],
}

impl Motion {
    fn at(&self, t: usize) -> [f64; 3] {
        let t = t as f64;
        [
            self.start[0] + t * self.velocity[0],
            self.start[1] + t * self.velocity[1],
            self.start[2] + t * self.velocity[2],
        ]
    }
}

/// Draws candidate motions until the deciding quantities differ by at
/// least `min_gap * r`; returns motions for anchor, cand0, cand1.
fn draw_motions<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> ([Motion; 3], usize) {
    let r = cfg.coordinate_range;
    let gap = (cfg.min_gap * r).max(1e-9);
    let still = |start| Motion {
        start,
        velocity: [0.0; 3],
    };
    loop {
        match cfg.question_type {
            QuestionType::FasterOfTwo => {
                let [lo, hi] = cfg.speed_range;
                let s0 = rng.gen_range(lo..=hi) * r;
                let s1 = rng.gen_range(lo..=hi) * r;
                let (d0, d1) = if cfg.isotropic_motion {
                    (unit3(rng), unit3(rng))
                } else {
                    ([1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
                };
                let p0 = uniform3(rng, r);
                let p1 = uniform3(rng, r);
                let anchor = uniform3(rng, r);
                if (s0 - s1).abs() < gap {
                    continue;
                }
                let mv = |p: [f64; 3], d: [f64; 3], s: f64| Motion {
                    start: p,
                    velocity: [d[0] * s, d[1] * s, d[2] * s],
                };
                return ([still(anchor), mv(p0, d0, s0), mv(p1, d1, s1)], usize::from(s1 > s0));
            }
            QuestionType::CloserToAnchor => {
                let a = uniform3(rng, r);
                let p0 = uniform3(rng, r);
                let p1 = uniform3(rng, r);
                let dist = |p: [f64; 3]| norm3(&[p[0] - a[0], p[1] - a[1], p[2] - a[2]]);
                let (e0, e1) = (dist(p0), dist(p1));
                if (e0 - e1).abs() < gap {
                    continue;
                }
                return ([still(a), still(p0), still(p1)], usize::from(e1 < e0));
            }
        }
    }
}

pub fn generate_sample<R: Rng + ?Sized>(cfg: &SceneConfig, split: Split, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let grid = cfg.grid;
    let geo_grid = cfg.geometry_token_grid();
    let r = cfg.coordinate_range;

    let placement = place(cfg, rng);
    let (motions, label) = draw_motions(cfg, rng);
    let mut cells = vec![placement.anchor, placement.cands[0], placement.cands[1]];
    cells.extend(&placement.others);
    let class_ids = rand::seq::index::sample(rng, cfg.n_classes, cfg.n_objects).into_vec();
    let colors: Vec<[f64; 3]> = (0..cfg.n_objects).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let others: Vec<Motion> = placement
        .others
        .iter()
        .map(|_| Motion {
            start: uniform3(rng, r),
            velocity: [0.0; 3],
        })
        .collect();
    let p_agree = match split {
        Split::Train => cfg.shortcut_strength,
        Split::Test => 0.5,
    };
    let shortcut_agrees = rng.gen::<f64>() < p_agree;
    let marker_candidate = if shortcut_agrees { label } else { 1 - label };

    let object_at = |cell: (usize, usize)| cells.iter().position(|&c| c == cell);

    let cv = cfg.channels.vision;
    let mut vision = vec![0.0; grid.len() * cv];
    for t in 0..grid.t {
        for row in 0..grid.h {
            for col in 0..grid.w {
                let tok = &mut vision[grid.index(t, row, col) * cv..][..cv];
                match object_at((row, col)) {
                    Some(k) => {
                        tok[class_ids[k]] = 1.0;
                        tok[cfg.n_classes..cfg.n_classes + 3].copy_from_slice(&colors[k]);
                        if k == 1 + marker_candidate {
                            tok[cfg.marker_channel()] = 1.0;
                        }
                    }
                    None => tok[cfg.background_channel()] = 1.0,
                }
            }
        }
    }

    let cg = cfg.channels.geometry;
    let background: Vec<[f64; 3]> = (0..geo_grid.h * geo_grid.w).map(|_| uniform3(rng, r)).collect();
    let mut geometry = vec![0.0; geo_grid.len() * cg];
    for t in 0..geo_grid.t {
        for gr in 0..geo_grid.h {
            for gc in 0..geo_grid.w {
                let tok = &mut geometry[geo_grid.index(t, gr, gc) * cg..][..cg];
                let motion = object_at(vision_cell(cfg, gr, gc)).map(|k| if k < 3 { &motions[k] } else { &others[k - 3] });
                match motion {
                    Some(m) => {
                        tok[..3].copy_from_slice(&m.at(t));
                        tok[3..6].copy_from_slice(&m.velocity);
                    }
                    None => tok[..3].copy_from_slice(&background[gr * geo_grid.w + gc]),
                }
                if cfg.geometry_position {
                    tok[GEO_USED] = unit_coord(gc, geo_grid.w);
                    tok[GEO_USED + 1] = unit_coord(gr, geo_grid.h);
                }
            }
        }
    }

    let c = cfg.channels.model;
    let mut prompt = vec![0.0; 4 * c];
    let role = cfg.n_classes;
    let q = match cfg.question_type {
        QuestionType::CloserToAnchor => 0,
        QuestionType::FasterOfTwo => 1,
    };
    prompt[role] = 1.0;
    prompt[role + 4 + q] = 1.0;
    for k in 0..3 {
        let tok = &mut prompt[(k + 1) * c..][..c];
        tok[class_ids[k]] = 1.0;
        tok[role + 1 + k] = 1.0;
    }

    let cell = |p: (usize, usize)| [p.0, p.1];
    Ok(Sample {
        vision: TokenSequence::new(Tensor::new(vec![grid.len(), cv], vision)?, Some(grid), StreamTag::Vision)?,
        geometry: TokenSequence::new(Tensor::new(vec![geo_grid.len(), cg], geometry)?, Some(geo_grid), StreamTag::Geometry)?,
        prompt: TokenSequence::new(Tensor::new(vec![4, c], prompt)?, None, StreamTag::Prompt)?,
        label,
        shortcut_agrees,
        meta: SceneMeta {
            question: cfg.question_type,
            anchor_cell: cell(placement.anchor),
            candidate_cells: [cell(placement.cands[0]), cell(placement.cands[1])],
            marker_candidate,
            classes: class_ids,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Sample `i` of each split is drawn from its own keyed stream, so the
/// dataset does not depend on generation order.
pub fn make_dataset(cfg: &SceneConfig, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::contract("dataset splits must be nonempty"));
    }
    cfg.validate()?;
    let split = |split: Split, n: usize| -> Result<Vec<Sample>> {
        use rayon::prelude::*;
        let tag = split as u64;
        (0..n)
            .into_par_iter()
            .map(|i| generate_sample(cfg, split, &mut stream_rng(seed, "data", &[tag, i as u64])))
            .collect()
    };
    Ok(Dataset {
        train: split(Split::Train, n_train)?,
        test: split(Split::Test, n_test)?,
    })
}

#[derive(Serialize, Deserialize)]
struct SeqRecord {
    grid: Option<Grid>,
    tokens: Vec<Vec<f64>>,
}

impl SeqRecord {
    fn from(seq: &TokenSequence) -> Self {
        let c = seq.width();
        Self {
            grid: seq.grid,
            tokens: seq.tokens.data().chunks_exact(c).map(<[f64]>::to_vec).collect(),
        }
    }

    fn into_seq(self, tag: StreamTag) -> Result<TokenSequence> {
        let tokens = Tensor::from_rows(&self.tokens)?;
        TokenSequence::new(tokens, self.grid, tag)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    label: usize,
    shortcut_agrees: bool,
    meta: SceneMeta,
    vision: SeqRecord,
    geometry: SeqRecord,
    prompt: SeqRecord,
}

impl Serialize for Sample {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SampleRecord {
            label: self.label,
            shortcut_agrees: self.shortcut_agrees,
            meta: self.meta.clone(),
            vision: SeqRecord::from(&self.vision),
            geometry: SeqRecord::from(&self.geometry),
            prompt: SeqRecord::from(&self.prompt),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Sample {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = SampleRecord::deserialize(d)?;
        let err = serde::de::Error::custom;
        Ok(Sample {
            vision: r.vision.into_seq(StreamTag::Vision).map_err(err)?,
            geometry: r.geometry.into_seq(StreamTag::Geometry).map_err(err)?,
            prompt: r.prompt.into_seq(StreamTag::Prompt).map_err(err)?,
            label: r.label,
            shortcut_agrees: r.shortcut_agrees,
            meta: r.meta,
        })
    }
}

/// One JSON object per sample, train first, each tagged with its split.
pub fn json_records(data: &Dataset) -> Result<Vec<serde_json::Value>> {
    let mut out = Vec::with_capacity(data.train.len() + data.test.len());
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        for s in samples {
            let mut v = serde_json::to_value(s)?;
            v["split"] = split.into();
            out.push(v);
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: std::io::Write>(mut out: W, data: &Dataset) -> Result<()> {
    for v in json_records(data)? {
        serde_json::to_writer(&mut out, &v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    #[test]
    fn candidates_sit_on_their_halves() {
        let cfg = SceneConfig::default();
        let mut r = rng(1);
        for _ in 0..200 {
            let s = generate_sample(&cfg, Split::Train, &mut r).unwrap();
            assert!(s.meta.candidate_cells[0][1] < 2);
            assert!(s.meta.candidate_cells[1][1] >= 2);
            assert_eq!(label_oracle(&s).unwrap(), s.label);
        }
    }

    #[test]
    fn marker_lights_exactly_one_object() {
        let cfg = SceneConfig::default();
        let mut r = rng(2);
        for _ in 0..100 {
            let s = generate_sample(&cfg, Split::Test, &mut r).unwrap();
            let grid = s.vision.grid.unwrap();
            let mut lit = std::collections::BTreeSet::new();
            for i in 0..grid.len() {
                if s.vision.tokens.row(i)[cfg.marker_channel()] != 0.0 {
                    let (_, h, w) = grid.coords(i);
                    lit.insert([h, w]);
                }
            }
            assert_eq!(lit.len(), 1);
            assert_eq!(lit.into_iter().next().unwrap(), s.meta.candidate_cells[s.meta.marker_candidate]);
        }
    }

    #[test]
    fn closer_to_anchor_hand_case() {
        let mut cfg = SceneConfig {
            question_type: QuestionType::CloserToAnchor,
            ..SceneConfig::default()
        };
        cfg.grid.t = 1;
        let mut s = generate_sample(&cfg, Split::Train, &mut rng(3)).unwrap();
        let grid = s.geometry.grid.unwrap();
        let cg = s.geometry.width();
        let put = |s: &mut Sample, cell: [usize; 2], p: [f64; 3]| {
            let i = grid.index(0, cell[0], cell[1]);
            s.geometry.tokens.data_mut()[i * cg..i * cg + 3].copy_from_slice(&p);
        };
        let (a, c0, c1) = (s.meta.anchor_cell, s.meta.candidate_cells[0], s.meta.candidate_cells[1]);
        put(&mut s, a, [0.0, 0.0, 0.0]);
        put(&mut s, c0, [1.0, 0.0, 0.0]);
        put(&mut s, c1, [5.0, 0.0, 0.0]);
        assert_eq!(label_oracle(&s).unwrap(), 0);
    }

    #[test]
    fn finer_geometry_grid_replays() {
        let cfg = SceneConfig {
            geometry_grid: [8, 8],
            ..SceneConfig::default()
        };
        let mut r = rng(4);
        for _ in 0..50 {
            let s = generate_sample(&cfg, Split::Train, &mut r).unwrap();
            assert_eq!(s.geometry.len(), 8 * 8 * 4);
            assert_eq!(label_oracle(&s).unwrap(), s.label);
        }
    }

    #[test]
    fn invalid_configs() {
        let too_many = SceneConfig {
            n_objects: 17,
            n_classes: 20,
            ..SceneConfig::default()
        };
        assert!(generate_sample(&too_many, Split::Train, &mut rng(0)).is_err());
        let coarse = SceneConfig {
            geometry_grid: [2, 2],
            ..SceneConfig::default()
        };
        assert!(coarse.validate().is_err());
        assert!(make_dataset(&SceneConfig::default(), 0, 1, 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let d = make_dataset(&SceneConfig::default(), 2, 1, 9).unwrap();
        let text = serde_json::to_string(&d.train[0]).unwrap();
        let back: Sample = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d.train[0]);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &d).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
