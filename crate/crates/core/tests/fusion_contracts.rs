use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geofuse_core::fusion::{
    gated_fuse, interp_align, interp_align_values, FusionDims, FusionInputs, FusionModel, GateParams, Grid, PipelineKind,
    Seq, StreamTag, TokenSequence, Variant,
};
use geofuse_core::masking::{MaskMode, MaskPlan};
use geofuse_core::{Graph, NumericsConfig, ParamStore, Tensor};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn seq(t: Tensor, grid: Option<Grid>, tag: StreamTag) -> TokenSequence {
    TokenSequence::new(t, grid, tag).unwrap()
}

/// Gate parameters with random weights and bias; layer norms at identity.
fn gate(rng: &mut ChaCha8Rng, c: usize, zero: bool) -> (ParamStore, GateParams) {
    let mut store = ParamStore::new();
    let p = GateParams::new(&mut store, "gate", c, rng).unwrap();
    let b = store.get_mut(p.bias());
    b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    if zero {
        for id in [p.weight(), p.bias()] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    (store, p)
}

fn run_gate(store: &ParamStore, p: &GateParams, v: &Tensor, gt: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
    let cfg = NumericsConfig::default();
    let mut g = Graph::with_params(store);
    let vn = g.constant(v.clone());
    let gn = g.constant(gt.clone());
    let sv = Seq {
        node: vn,
        grid: None,
        tag: StreamTag::Vision,
    };
    let sg = Seq {
        node: gn,
        grid: None,
        tag: StreamTag::Geometry,
    };
    let (fused, gate) = gated_fuse(&mut g, sv, sg, p, &cfg).unwrap();
    (g.value(fused.fused.node).clone(), gate.alpha, gate.v_normed, gate.g_normed)
}

#[test]
fn gate_is_open_interval_and_between_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..1000 {
        let (n, c) = (rng.gen_range(1..=16), rng.gen_range(2..=12));
        let (store, p) = gate(&mut rng, c, false);
        let v = random(&mut rng, n, c, 3.0);
        let gt = random(&mut rng, n, c, 3.0);
        let (f, alpha, vn, gn) = run_gate(&store, &p, &v, &gt);
        assert!(alpha.data().iter().all(|&a| a > 0.0 && a < 1.0), "instance {i}");
        for ((&f, &a), &b) in f.data().iter().zip(vn.data()).zip(gn.data()) {
            assert!(a.min(b) <= f && f <= a.max(b), "instance {i}: {f} outside [{a}, {b}]");
        }
    }
}

#[test]
fn zero_gate_parameters_average_the_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..1000 {
        let (n, c) = (rng.gen_range(1..=16), rng.gen_range(2..=12));
        let (store, p) = gate(&mut rng, c, true);
        let v = random(&mut rng, n, c, 3.0);
        let gt = random(&mut rng, n, c, 3.0);
        let (f, alpha, vn, gn) = run_gate(&store, &p, &v, &gt);
        assert!(alpha.data().iter().all(|&a| a == 0.5));
        for ((&f, &a), &b) in f.data().iter().zip(vn.data()).zip(gn.data()) {
            assert!((f - 0.5 * (a + b)).abs() <= 1e-12);
        }
    }
}

#[test]
fn identical_streams_pass_through_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..1000 {
        let (n, c) = (rng.gen_range(1..=16), rng.gen_range(2..=12));
        let (store, p) = gate(&mut rng, c, false);
        let v = random(&mut rng, n, c, 3.0);
        let (f, _, vn, _) = run_gate(&store, &p, &v, &v);
        assert_eq!(f, vn);
    }
}

fn dims(vision: Grid, geo_hw: (usize, usize)) -> FusionDims {
    FusionDims {
        vision_grid: vision,
        geometry_hw: geo_hw,
        geo_width: 6,
        width: 16,
        heads: 4,
        bottleneck_len: 5,
        qk_gain: 1.0,
    }
}

fn inputs(rng: &mut ChaCha8Rng, d: &FusionDims) -> (TokenSequence, TokenSequence, TokenSequence) {
    let gv = d.vision_grid;
    let gg = d.geometry_grid();
    (
        seq(random(rng, gv.len(), d.width, 1.0), Some(gv), StreamTag::Vision),
        seq(random(rng, gg.len(), d.geo_width, 1.0), Some(gg), StreamTag::Geometry),
        seq(random(rng, 3, d.width, 1.0), None, StreamTag::Prompt),
    )
}

const GRIDS: [(Grid, (usize, usize)); 3] = [
    (Grid { h: 4, w: 4, t: 4 }, (4, 4)),
    (Grid { h: 2, w: 3, t: 2 }, (5, 3)),
    (Grid { h: 3, w: 2, t: 1 }, (6, 7)),
];

#[test]
fn downstream_lengths_per_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = NumericsConfig::default();
    for (vision, geo) in GRIDS {
        let d = dims(vision, geo);
        let (v, gm, p) = inputs(&mut rng, &d);
        let inp = FusionInputs {
            vision: &v,
            geometry: &gm,
            prompt: &p,
        };
        let n = vision.len();
        for kind in [PipelineKind::Static, PipelineKind::Dynamic] {
            for variant in Variant::ALL {
                let mut store = ParamStore::new();
                let m = FusionModel::new(&mut store, kind, variant, d, false, &mut rng).unwrap();
                let plan = if kind == PipelineKind::Static {
                    MaskPlan::new(MaskMode::Random, 0.5, 1.0).unwrap()
                } else {
                    MaskPlan::new(MaskMode::RelevanceTopK, 0.5, 1.0).unwrap()
                };
                let mut g = Graph::with_params(&store);
                let fused = m.forward(&mut g, &inp, &plan, &mut rng, &cfg).unwrap();
                let want = match (kind, variant) {
                    (_, Variant::F) | (PipelineKind::Static, _) => n,
                    (PipelineKind::Dynamic, _) => n + d.bottleneck_len,
                };
                assert_eq!(fused.downstream_len(&g), want, "{kind:?} {variant} on {vision:?}");
                assert_eq!(fused.fused.width(&g), d.width);
                let segs = fused.segments(&g);
                assert_eq!(segs.iter().map(|s| s.len).sum::<usize>(), want);
                assert_eq!(segs[0].grid, Some(vision));
                assert_eq!(segs[0].len, n);
            }
        }
    }
}

#[test]
fn interp_is_identity_on_matching_grids_and_keeps_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for (vision, geo) in GRIDS {
        let same = seq(random(&mut rng, vision.len(), 6, 1.0), Some(vision), StreamTag::Geometry);
        let mut g = Graph::new();
        let s = Seq::input(&mut g, &same);
        let out = interp_align(&mut g, s, (vision.h, vision.w)).unwrap();
        assert_eq!(out.node, s.node);
        assert_eq!(interp_align_values(&same, (vision.h, vision.w)).unwrap().tokens, same.tokens);

        let gg = Grid::new(geo.0, geo.1, vision.t);
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rows: Vec<&[f64]> = (0..gg.len()).map(|_| &row[..]).collect();
        let constant = seq(Tensor::from_rows(&rows).unwrap(), Some(gg), StreamTag::Geometry);
        let out = interp_align_values(&constant, (vision.h, vision.w)).unwrap();
        assert_eq!(out.grid, Some(vision));
        for i in 0..vision.len() {
            for (a, b) in out.tokens.row(i).iter().zip(&row) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

fn fused_values(m: &FusionModel, store: &ParamStore, inp: &FusionInputs, plan: &MaskPlan, seed: u64) -> Tensor {
    let mut g = Graph::with_params(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = m.forward(&mut g, inp, plan, &mut rng, &NumericsConfig::default()).unwrap();
    g.value(f.fused.node).clone()
}

/// Which inputs reach the fused output: geometry for every variant but (f);
/// vision always, except the rows a fully-firing mask removes.
#[test]
fn streams_route_where_the_variant_says() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let d = dims(Grid::new(2, 3, 2), (3, 3));
    let (v, gm, p) = inputs(&mut rng, &d);
    let gm2 = seq(random(&mut rng, gm.len(), 6, 1.0), gm.grid, StreamTag::Geometry);
    let v2 = seq(random(&mut rng, v.len(), d.width, 1.0), v.grid, StreamTag::Vision);
    for kind in [PipelineKind::Static, PipelineKind::Dynamic] {
        let mode = if kind == PipelineKind::Static {
            MaskMode::Random
        } else {
            MaskMode::RelevanceTopK
        };
        let all = MaskPlan::new(mode, 1.0, 1.0).unwrap();
        for variant in Variant::ALL {
            let mut store = ParamStore::new();
            let m = FusionModel::new(&mut store, kind, variant, d, false, &mut rng).unwrap();
            let base = FusionInputs {
                vision: &v,
                geometry: &gm,
                prompt: &p,
            };
            let other_geo = FusionInputs { geometry: &gm2, ..base };
            let other_vis = FusionInputs { vision: &v2, ..base };
            let off = MaskPlan::disabled();
            let a = fused_values(&m, &store, &base, &off, 1);
            assert_eq!(
                a != fused_values(&m, &store, &other_geo, &off, 1),
                variant.uses_geometry(),
                "{kind:?} {variant} geometry routing"
            );
            assert_ne!(a, fused_values(&m, &store, &other_vis, &off, 1), "{kind:?} {variant} vision routing");
            if variant.masks() {
                // Every vision row zeroed: the output no longer sees vision.
                assert_eq!(
                    fused_values(&m, &store, &base, &all, 2),
                    fused_values(&m, &store, &other_vis, &all, 2),
                    "{kind:?} {variant} masked vision leaked"
                );
            } else {
                // Non-masking variants ignore the plan entirely.
                assert_eq!(fused_values(&m, &store, &base, &all, 2), a, "{kind:?} {variant}");
            }
        }
    }
}
