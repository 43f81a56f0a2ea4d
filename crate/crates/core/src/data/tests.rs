use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::rms_residual;
use crate::metrics::{jaccard, BA44, BA45};

fn small_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        subjects: 12,
        nodes: 100,
        seed,
        ..GeneratorConfig::default()
    }
}

fn small(seed: u64) -> MeshDataset {
    generate_synthetic(&small_config(seed)).unwrap()
}

fn preprocessed(seed: u64) -> MeshDataset {
    preprocess(&small(seed), &PreprocessOptions::default()).unwrap()
}

fn rms_between(a: &[Vec3], b: &[Vec3]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    (total / a.len() as f64).sqrt()
}

#[test]
fn default_generator_output_is_valid() {
    let ds = generate_synthetic(&GeneratorConfig::default()).unwrap();
    assert_eq!(ds.subjects.len(), 100);
    assert_eq!(ds.num_nodes(), 1195);
    assert_eq!(ds.num_features(), 9);
    ds.validate().unwrap();
    let balance = ds.class_balance();
    assert!(balance.iter().all(|&b| b > 0.05), "{balance:?}");
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(small(5), small(5));
    assert_ne!(small(5).subjects[0].features, small(6).subjects[0].features);
}

#[test]
fn generator_rejects_bad_parameters() {
    for cfg in [
        GeneratorConfig {
            subjects: 5,
            ..small_config(0)
        },
        GeneratorConfig {
            nodes: 49,
            ..small_config(0)
        },
        GeneratorConfig {
            snr: f64::NAN,
            ..small_config(0)
        },
        GeneratorConfig {
            knn: 0,
            ..small_config(0)
        },
        GeneratorConfig {
            radius_jitter: 1.0,
            ..small_config(0)
        },
    ] {
        assert!(
            matches!(generate_synthetic(&cfg), Err(DataError::Parameter(_))),
            "{cfg:?}"
        );
    }
}

#[test]
fn nodes_are_identifiable_by_position() {
    let ds = generate_synthetic(&GeneratorConfig::default()).unwrap();
    let n = ds.num_nodes();
    let count = ds.subjects.len() as f64;
    // mean per-node coordinate standard deviation across subjects
    let mut spread = 0.0;
    for i in 0..n {
        let mean: Vec<f64> = (0..3)
            .map(|k| ds.subjects.iter().map(|m| m.coords[i][k]).sum::<f64>() / count)
            .collect();
        let var: f64 = ds
            .subjects
            .iter()
            .map(|m| {
                (0..3)
                    .map(|k| (m.coords[i][k] - mean[k]).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (count - 1.0);
        spread += var.sqrt();
    }
    spread /= n as f64;
    // typical spacing: mean length of the base mesh edges
    let base = &ds.subjects[0].coords;
    let edges = ds.topology.edges();
    let spacing: f64 = edges
        .iter()
        .map(|&(a, b)| dist(&base[a], &base[b]))
        .sum::<f64>()
        / edges.len() as f64;
    assert!(spread / spacing < 0.2, "spread {spread}, spacing {spacing}");
}

#[test]
fn feature_columns_sum_to_one_after_preprocessing() {
    let ds = preprocessed(1);
    for m in &ds.subjects {
        for c in 0..9 {
            let s: f64 = (0..m.num_nodes()).map(|r| m.features.get(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn node_normalization_is_selectable() {
    let opts = PreprocessOptions {
        feature_normalization: FeatureNormalization::Node,
        ..PreprocessOptions::default()
    };
    let ds = preprocess(&small(1), &opts).unwrap();
    let m = &ds.subjects[0];
    for r in 0..m.num_nodes() {
        assert!((m.features.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(
        ds.preprocessing.feature_normalization,
        Some(FeatureNormalization::Node)
    );
}

#[test]
fn coordinates_are_globally_centred_and_scaled() {
    let ds = preprocessed(2);
    let mut max = 0.0f64;
    let mut centroid = [0.0; 3];
    let mut count = 0.0;
    for p in ds.subjects.iter().flat_map(|m| &m.coords) {
        for k in 0..3 {
            max = max.max(p[k].abs());
            centroid[k] += p[k];
        }
        count += 1.0;
    }
    assert!((max - 1.0).abs() < 1e-9);
    for c in centroid {
        assert!((c / count).abs() < 1e-9);
    }
}

#[test]
fn expansion_matches_dense_matrix_powers() {
    let raw = small(3);
    let ds = preprocess(&raw, &PreprocessOptions::default()).unwrap();
    let n = raw.num_nodes();
    let mut a = vec![vec![false; n]; n];
    for &(i, j) in raw.topology.edges() {
        a[i][j] = true;
        a[j][i] = true;
    }
    let mut reach = a.clone();
    let mut power = a.clone();
    for _ in 1..4 {
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for m in 0..n {
                if power[i][m] {
                    for j in 0..n {
                        next[i][j] |= a[m][j];
                    }
                }
            }
        }
        power = next;
        for i in 0..n {
            for j in 0..n {
                reach[i][j] |= power[i][j];
            }
        }
    }
    let expected = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| reach[i][j])
        .count();
    assert_eq!(ds.topology.num_edges(), expected);
    assert_eq!(ds.preprocessing.base_edges, Some(raw.topology.num_edges()));
}

#[test]
fn preprocessing_is_guarded() {
    let ds = preprocessed(4);
    assert!(matches!(
        preprocess(&ds, &PreprocessOptions::default()),
        Err(DataError::AlreadyPreprocessed)
    ));
    let mut raw = small(4);
    let n = raw.num_nodes();
    for r in 0..n {
        raw.subjects[2].features.data_mut()[r * 9 + 7] = 0.0;
    }
    assert!(matches!(
        preprocess(&raw, &PreprocessOptions::default()),
        Err(DataError::ZeroColumn {
            subject: 2,
            column: 7
        })
    ));
}

#[test]
fn misalignment_moves_only_coordinates() {
    let ds = preprocessed(5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (moved, isos) = misalign(&ds, &mut rng, &MisalignScope::PerMesh).unwrap();
    assert_eq!(isos.len(), ds.subjects.len());
    for ((a, b), iso) in ds.subjects.iter().zip(&moved.subjects).zip(&isos) {
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        for i in (0..a.coords.len()).step_by(7) {
            for j in (0..a.coords.len()).step_by(11) {
                let before = dist(&a.coords[i], &a.coords[j]);
                let after = dist(&b.coords[i], &b.coords[j]);
                assert!((before - after).abs() < 1e-12);
            }
        }
        let fit = register_arun(&a.coords, &b.coords).unwrap();
        assert!(fit.isometry.max_abs_diff(iso) < 1e-9);
    }
    assert_eq!(moved.topology, ds.topology);
    assert!(matches!(
        misalign(&small(5), &mut rng, &MisalignScope::PerMesh),
        Err(DataError::NotPreprocessed)
    ));
}

#[test]
fn split_misalignment_uses_two_frames() {
    let ds = preprocessed(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = vec![0, 2, 4, 6];
    let (_, isos) = misalign(
        &ds,
        &mut rng,
        &MisalignScope::PerSplit {
            train: train.clone(),
        },
    )
    .unwrap();
    for i in 0..ds.subjects.len() {
        let same_as_train = isos[i] == isos[0];
        assert_eq!(same_as_train, train.contains(&i), "subject {i}");
    }
    assert_ne!(isos[0], isos[1]);
    assert!(matches!(
        misalign(&ds, &mut rng, &MisalignScope::PerSplit { train: vec![99] }),
        Err(DataError::BadSubject { index: 99, .. })
    ));
}

#[test]
fn realigning_aligned_data_changes_little() {
    let ds = preprocessed(7);
    let (re, fits) = realign(&ds, 3, DEFAULT_REALIGN_ITERS).unwrap();
    assert_eq!(re.subjects[3].coords, ds.subjects[3].coords);
    // subjects are co-registered by construction; what remains is the
    // rigid fit to the reference's own deformation
    let noise = 0.015 / ds.preprocessing.coord_scale.unwrap();
    for (i, (a, b)) in ds.subjects.iter().zip(&re.subjects).enumerate() {
        let moved = rms_between(&a.coords, &b.coords);
        assert!(
            moved < 0.25 * noise,
            "subject {i}: {moved} vs noise {noise}"
        );
        assert!(fits[i].residuals.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
    assert!(matches!(
        realign(&ds, 12, 20),
        Err(DataError::BadSubject { .. })
    ));
}

#[test]
fn realignment_undoes_misalignment_up_to_reference_frame() {
    let ds = preprocessed(8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (moved, isos) = misalign(&ds, &mut rng, &MisalignScope::PerMesh).unwrap();
    let reference = 4;
    let (re, _) = realign(&moved, reference, DEFAULT_REALIGN_ITERS).unwrap();
    assert_eq!(
        re.subjects[reference].coords,
        moved.subjects[reference].coords
    );
    let noise = 0.015 / ds.preprocessing.coord_scale.unwrap();
    for (i, (orig, back)) in ds.subjects.iter().zip(&re.subjects).enumerate() {
        let expected = isos[reference].apply(&orig.coords);
        let err = rms_between(&expected, &back.coords);
        assert!(err < noise, "subject {i}: {err} vs noise {noise}");
    }
}

#[test]
fn kfold_examples() {
    let splits = kfold_split(100, 10, 3).unwrap();
    assert_eq!(splits.len(), 10);
    let mut seen = vec![0usize; 100];
    for s in &splits {
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        s.test.iter().for_each(|&i| seen[i] += 1);
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(splits, kfold_split(100, 10, 3).unwrap());
    assert_ne!(splits, kfold_split(100, 10, 4).unwrap());
    for i in 0..10 {
        assert_eq!(splits[i].val, splits[(i + 1) % 10].test);
    }
    let uneven = kfold_split(32, 5, 0).unwrap();
    let sizes: Vec<usize> = uneven.iter().map(|s| s.test.len()).collect();
    assert_eq!(sizes, vec![7, 7, 6, 6, 6]);
    assert!(kfold_split(5, 6, 0).is_err());
    assert!(kfold_split(5, 2, 0).is_err());
}

#[test]
fn json_round_trip_is_exact() {
    let ds = preprocessed(9);
    let back = from_json(&to_json(&ds), "memory").unwrap();
    assert_eq!(back, ds);
    let raw = small(9);
    assert_eq!(from_json(&to_json(&raw), "memory").unwrap(), raw);
}

#[test]
fn corrupted_files_are_rejected_with_locations() {
    let ds = small(10);
    let text = to_json(&ds);
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["subjects"][3]["labels"][17] = serde_json::json!(3);
    let err = from_json(&value.to_string(), "bad.json")
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("subjects[3].labels[17]") && err.contains("subject 3, node 17"),
        "{err}"
    );

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["edges"][5] = serde_json::json!([0, 100]);
    let err = from_json(&value.to_string(), "bad.json")
        .unwrap_err()
        .to_string();
    assert!(err.starts_with("bad.json: edges[5]:"), "{err}");

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["subjects"][1]["coords"][2] = serde_json::json!([1.0, 2.0]);
    let err = from_json(&value.to_string(), "bad.json")
        .unwrap_err()
        .to_string();
    assert!(err.contains("subjects[1].coords[2]"), "{err}");

    let err = from_json("{\"num_nodes\": 3", "trunc.json")
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("trunc.json") && err.contains("line 1"),
        "{err}"
    );
}

#[test]
fn default_dataset_loads_quickly() {
    let ds = generate_synthetic(&GeneratorConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    save(&ds, &path).unwrap();
    let start = std::time::Instant::now();
    let back = load(&path).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(back, ds);
}

/// Multinomial logistic regression on standardized log-features, trained by
/// full-batch gradient descent.
fn logistic_baseline(ds: &MeshDataset, train: &[usize], test: &[usize]) -> f64 {
    let f = ds.num_features();
    let rows = |ids: &[usize]| -> Vec<(Vec<f64>, usize)> {
        ids.iter()
            .flat_map(|&s| {
                let m = &ds.subjects[s];
                (0..m.num_nodes())
                    .map(|r| {
                        (
                            m.features.row(r).iter().map(|v| v.ln()).collect(),
                            m.labels[r],
                        )
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let mut tr = rows(train);
    let mut te = rows(test);
    let n = tr.len() as f64;
    let mean: Vec<f64> = (0..f)
        .map(|c| tr.iter().map(|r| r.0[c]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..f)
        .map(|c| (tr.iter().map(|r| (r.0[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    for r in tr.iter_mut().chain(te.iter_mut()) {
        for c in 0..f {
            r.0[c] = (r.0[c] - mean[c]) / std[c];
        }
    }
    // class-balanced weights so the small areas are not ignored
    let mut counts = [0.0; 3];
    tr.iter().for_each(|r| counts[r.1] += 1.0);
    let weight = counts.map(|c| n / (3.0 * c));
    let mut w = vec![[0.0; 3]; f + 1];
    for _ in 0..300 {
        let mut grad = vec![[0.0; 3]; f + 1];
        for (x, y) in &tr {
            let z: Vec<f64> = (0..3)
                .map(|k| w[f][k] + (0..f).map(|c| x[c] * w[c][k]).sum::<f64>())
                .collect();
            let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..3 {
                let d = weight[*y] * (e[k] / s - f64::from(k == *y));
                for c in 0..f {
                    grad[c][k] += d * x[c];
                }
                grad[f][k] += d;
            }
        }
        for (wr, gr) in w.iter_mut().zip(&grad) {
            for k in 0..3 {
                wr[k] -= 0.5 * gr[k] / n;
            }
        }
    }
    let predict = |x: &[f64]| -> usize {
        (0..3)
            .map(|k| w[f][k] + (0..f).map(|c| x[c] * w[c][k]).sum::<f64>())
            .enumerate()
            .fold(
                (0, f64::MIN),
                |best, (k, v)| if v > best.1 { (k, v) } else { best },
            )
            .0
    };
    let y: Vec<usize> = te.iter().map(|r| r.1).collect();
    let yhat: Vec<usize> = te.iter().map(|r| predict(&r.0)).collect();
    (jaccard(&y, &yhat, BA44).unwrap() + jaccard(&y, &yhat, BA45).unwrap()) / 2.0
}

#[test]
fn features_alone_are_informative() {
    let cfg = GeneratorConfig {
        subjects: 20,
        nodes: 300,
        seed: 42,
        ..GeneratorConfig::default()
    };
    let ds = preprocess(
        &generate_synthetic(&cfg).unwrap(),
        &PreprocessOptions::default(),
    )
    .unwrap();
    let train: Vec<usize> = (0..15).collect();
    let test: Vec<usize> = (15..20).collect();
    let score = logistic_baseline(&ds, &train, &test);
    assert!(score > 0.40, "logistic baseline {score}");
}

#[test]
fn audit_isometries_map_original_onto_moved() {
    let ds = preprocessed(11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (moved, isos) = misalign(&ds, &mut rng, &MisalignScope::PerMesh).unwrap();
    for i in 0..ds.subjects.len() {
        assert!(rms_residual(&isos[i], &ds.subjects[i].coords, &moved.subjects[i].coords) < 1e-12);
    }
}
