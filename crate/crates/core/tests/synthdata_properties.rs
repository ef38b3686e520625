use geofuse_core::synthdata::{
    geometry_features, label_oracle, make_dataset, marker_probe, QuestionType, Sample, SceneConfig,
};

fn accuracy(samples: &[Sample], f: impl Fn(&Sample) -> usize) -> f64 {
    samples.iter().filter(|s| f(s) == s.label).count() as f64 / samples.len() as f64
}

/// Independent replay: scan every geometry token whose cell maps onto a
/// candidate's vision cell and recompute the deciding quantity.
fn brute_force_label(s: &Sample) -> usize {
    let vg = s.vision.grid.unwrap();
    let gg = s.geometry.grid.unwrap();
    let cells_of = |cell: [usize; 2]| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..gg.h {
            for c in 0..gg.w {
                if [r * vg.h / gg.h, c * vg.w / gg.w] == cell {
                    out.push((r, c));
                }
            }
        }
        out
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut q = [0.0; 2];
    for (k, qk) in q.iter_mut().enumerate() {
        let cells = cells_of(s.meta.candidate_cells[k]);
        assert!(!cells.is_empty());
        let mut acc = 0.0;
        let mut count = 0.0;
        for &(r, c) in &cells {
            for t in 0..gg.t {
                let tok = s.geometry.tokens.row(gg.index(t, r, c));
                acc += match s.meta.question {
                    QuestionType::FasterOfTwo => norm(&tok[3..6]),
                    QuestionType::CloserToAnchor => {
                        let a = cells_of(s.meta.anchor_cell)[0];
                        let at = s.geometry.tokens.row(gg.index(t, a.0, a.1));
                        norm(&[tok[0] - at[0], tok[1] - at[1], tok[2] - at[2]])
                    }
                };
                count += 1.0;
            }
        }
        *qk = acc / count;
    }
    match s.meta.question {
        QuestionType::FasterOfTwo => usize::from(q[1] > q[0]),
        QuestionType::CloserToAnchor => usize::from(q[1] < q[0]),
    }
}

fn scenes() -> Vec<SceneConfig> {
    vec![
        SceneConfig::default(),
        SceneConfig {
            question_type: QuestionType::CloserToAnchor,
            ..SceneConfig::default()
        },
        SceneConfig {
            geometry_grid: [8, 8],
            ..SceneConfig::default()
        },
    ]
}

#[test]
fn label_replay_matches_for_every_sample() {
    for cfg in scenes() {
        let d = make_dataset(&cfg, 500, 500, 3).unwrap();
        for s in d.train.iter().chain(&d.test) {
            assert_eq!(label_oracle(s).unwrap(), s.label);
            assert_eq!(brute_force_label(s), s.label);
        }
    }
}

#[test]
fn shortcut_marker_reads_train_but_not_test() {
    for strength in [0.95, 0.8, 1.0] {
        let cfg = SceneConfig {
            shortcut_strength: strength,
            ..SceneConfig::default()
        };
        let d = make_dataset(&cfg, 2000, 2000, 4).unwrap();
        let m = cfg.marker_channel();
        let train = accuracy(&d.train, |s| marker_probe(s, m));
        let test = accuracy(&d.test, |s| marker_probe(s, m));
        assert!((train - strength).abs() <= 0.03, "strength {strength}: train {train}");
        assert!((test - 0.5).abs() <= 0.05, "strength {strength}: test {test}");
        let agree = d.test.iter().filter(|s| s.shortcut_agrees).count() as f64 / 2000.0;
        assert!((agree - 0.5).abs() <= 0.05);
    }
    let cfg = SceneConfig {
        shortcut_strength: 1.0,
        ..SceneConfig::default()
    };
    let d = make_dataset(&cfg, 1000, 1, 5).unwrap();
    assert!(d.train.iter().all(|s| s.shortcut_agrees));
}

#[test]
fn labels_are_balanced() {
    for cfg in scenes() {
        let d = make_dataset(&cfg, 2000, 2000, 6).unwrap();
        for split in [&d.train, &d.test] {
            let p = split.iter().filter(|s| s.label == 1).count() as f64 / split.len() as f64;
            assert!((p - 0.5).abs() <= 0.03, "{:?}: {p}", cfg.question_type);
        }
    }
}

#[test]
fn nearest_centroid_on_geometry_is_near_perfect() {
    for cfg in scenes() {
        let d = make_dataset(&cfg, 2000, 2000, 7).unwrap();
        let mut centroid = [[0.0; 2]; 2];
        let mut count = [0.0; 2];
        for s in &d.train {
            let f = geometry_features(s).unwrap();
            centroid[s.label][0] += f[0];
            centroid[s.label][1] += f[1];
            count[s.label] += 1.0;
        }
        for k in 0..2 {
            centroid[k][0] /= count[k];
            centroid[k][1] /= count[k];
        }
        let acc = accuracy(&d.test, |s| {
            let f = geometry_features(s).unwrap();
            let dist = |c: [f64; 2]| (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2);
            usize::from(dist(centroid[1]) < dist(centroid[0]))
        });
        assert!(acc > 0.95, "{:?}: {acc}", cfg.question_type);
    }
}

fn appearance(s: &Sample, marker: usize) -> Vec<f64> {
    let mut x = s.vision.tokens.data().to_vec();
    let c = s.vision.width();
    for row in x.chunks_exact_mut(c) {
        row[marker] = 0.0;
    }
    x.push(1.0);
    x
}

#[test]
fn appearance_without_marker_does_not_predict_label() {
    let cfg = SceneConfig::default();
    let d = make_dataset(&cfg, 2000, 2000, 8).unwrap();
    let m = cfg.marker_channel();
    let xs: Vec<Vec<f64>> = d.train.iter().map(|s| appearance(s, m)).collect();
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let (lr, l2) = (0.5, 1e-3);
    for _ in 0..200 {
        let mut grad = vec![0.0; dim];
        for (x, s) in xs.iter().zip(&d.train) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let err = 1.0 / (1.0 + (-z).exp()) - s.label as f64;
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * (g / xs.len() as f64 + l2 * *wi);
        }
    }
    let acc = accuracy(&d.test, |s| {
        let z: f64 = appearance(s, m).iter().zip(&w).map(|(a, b)| a * b).sum();
        usize::from(z > 0.0)
    });
    assert!(acc <= 0.55, "appearance probe reached {acc}");
}

#[test]
fn generation_is_bitwise_seed_deterministic() {
    let cfg = SceneConfig::default();
    let a = make_dataset(&cfg, 50, 20, 9).unwrap();
    let b = make_dataset(&cfg, 50, 20, 9).unwrap();
    let c = make_dataset(&cfg, 50, 20, 10).unwrap();
    let bits = |d: &geofuse_core::synthdata::Dataset| -> Vec<u64> {
        d.train
            .iter()
            .chain(&d.test)
            .flat_map(|s| s.vision.tokens.data().iter().chain(s.geometry.tokens.data()).map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    // A longer dataset shares its prefix with a shorter one.
    let longer = make_dataset(&cfg, 80, 20, 9).unwrap();
    assert_eq!(longer.train[..50], a.train[..]);
}
