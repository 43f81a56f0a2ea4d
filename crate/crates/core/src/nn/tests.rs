use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::geometry::{array_to_points, points_to_array, sample_isometry, Isometry};
use crate::metrics::{dice_loss, one_hot};

fn random_topology(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Topology {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Topology::new(n, edges).unwrap()
}

fn random_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array {
    Array::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

struct Case {
    features: Array,
    coords: Array,
    topo: Topology,
    edges: EdgeIndex,
    labels: Vec<usize>,
}

fn case(seed: u64, n: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = random_topology(&mut rng, n, 0.3);
    Case {
        features: random_array(&mut rng, n, 9, 1.0),
        coords: random_array(&mut rng, n, 3, 1.0),
        edges: EdgeIndex::from_topology(&topo),
        topo,
        labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
    }
}

fn probs(model: &Model, c: &Case) -> Array {
    model.predict(&c.features, &c.coords, &c.edges).unwrap()
}

fn transformed(iso: &Isometry, coords: &Array) -> Array {
    points_to_array(&iso.apply(&array_to_points(coords)))
}

#[test]
fn parameter_counts_match_closed_form_and_rounding() {
    let cases = [
        (Family::Mlp, false, 4963, 5),
        (Family::Gnn, true, 25603, 26),
        (Family::Egnn, true, 29991, 30),
    ];
    for (family, coords, expect, thousands) in cases {
        let spec = ModelSpec::new(family, coords, 0);
        let model = Model::new(spec.clone()).unwrap();
        assert_eq!(model.parameter_count(), expect, "{family}");
        assert_eq!(spec.parameter_count(), expect, "{family}");
        assert_eq!((expect as f64 / 1000.0).round() as usize, thousands);
    }
    for (family, coords) in [(Family::Mlp, true), (Family::Gnn, false)] {
        let spec = ModelSpec::new(family, coords, 0);
        assert_eq!(
            Model::new(spec.clone()).unwrap().parameter_count(),
            spec.parameter_count()
        );
    }
}

#[test]
fn spec_validation() {
    assert!(matches!(
        "cnn".parse::<Family>(),
        Err(NnError::UnknownFamily(_))
    ));
    assert_eq!("egnn".parse::<Family>().unwrap(), Family::Egnn);
    assert!(matches!(
        Model::new(ModelSpec::new(Family::Egnn, false, 0)),
        Err(NnError::Spec(_))
    ));
}

#[test]
fn parameter_names_are_stable() {
    let model = Model::new(ModelSpec::new(Family::Gnn, true, 0)).unwrap();
    let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names[0], "gnn.encoder.weight");
    assert!(names.contains(&"gnn.layer2.edge_mlp.dense1.weight"));
    assert_eq!(*names.last().unwrap(), "gnn.decoder.bias");
    let egnn = Model::new(ModelSpec::new(Family::Egnn, true, 0)).unwrap();
    assert!(egnn
        .param_index("egnn.layer4.coord_mlp.dense2.weight")
        .is_some());
    let mlp = Model::new(ModelSpec::new(Family::Mlp, false, 0)).unwrap();
    assert!(mlp.param_index("mlp.norm5.gamma").is_some());
    assert!(mlp.param_index("mlp.norm6.gamma").is_none());
}

#[test]
fn initialization_is_seeded() {
    let a = Model::new(ModelSpec::new(Family::Egnn, true, 3)).unwrap();
    let b = Model::new(ModelSpec::new(Family::Egnn, true, 3)).unwrap();
    let c = Model::new(ModelSpec::new(Family::Egnn, true, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params()[0].value, c.params()[0].value);
    // Glorot-uniform bound for the 9 -> 32 encoder
    let limit = (6.0f64 / 41.0).sqrt();
    assert!(a.params()[0].value.data().iter().all(|w| w.abs() < limit));
    assert!(a.params()[1].value.data().iter().all(|&b| b == 0.0));
}

#[test]
fn outputs_are_probability_rows() {
    let c = case(1, 12);
    for (family, coords) in [
        (Family::Mlp, false),
        (Family::Mlp, true),
        (Family::Gnn, true),
        (Family::Egnn, true),
    ] {
        let model = Model::new(ModelSpec::new(family, coords, 7)).unwrap();
        let p = probs(&model, &c);
        assert_eq!(p.shape(), &[12, 3]);
        for r in 0..12 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn input_dimensions_are_checked() {
    let c = case(2, 6);
    let model = Model::new(ModelSpec::new(Family::Gnn, true, 0)).unwrap();
    let bad = Array::zeros(vec![6, 12]);
    assert!(matches!(
        model.predict(&bad, &c.coords, &c.edges),
        Err(NnError::Input(_))
    ));
    let short = Array::zeros(vec![5, 3]);
    assert!(matches!(
        model.predict(&c.features, &short, &c.edges),
        Err(NnError::Input(_))
    ));
}

#[test]
fn mlp_ignores_topology() {
    let c = case(3, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let other = EdgeIndex::from_topology(&random_topology(&mut rng, 10, 0.5));
    let model = Model::new(ModelSpec::new(Family::Mlp, true, 1)).unwrap();
    let a = probs(&model, &c);
    let b = model.predict(&c.features, &c.coords, &other).unwrap();
    assert_eq!(a, b);
}

/// Plain-loop reference implementations of the layer formulas.
mod reference {
    use super::*;

    pub fn dense(x: &[Vec<f64>], model: &Model, layer: &DenseLayer) -> Vec<Vec<f64>> {
        let w = &model.params()[layer.weight].value;
        let b = &model.params()[layer.bias].value;
        x.iter()
            .map(|row| {
                (0..layer.out_dim)
                    .map(|o| {
                        b.data()[o] + (0..layer.in_dim).map(|i| row[i] * w.get(i, o)).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn swish(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        x.into_iter()
            .map(|r| r.into_iter().map(|v| v / (1.0 + (-v).exp())).collect())
            .collect()
    }

    pub fn block(x: &[Vec<f64>], model: &Model, b: &MlpBlock, last_swish: bool) -> Vec<Vec<f64>> {
        let y = dense(&swish(dense(x, model, &b.dense1)), model, &b.dense2);
        if last_swish {
            swish(y)
        } else {
            y
        }
    }

    pub fn rows(a: &Array) -> Vec<Vec<f64>> {
        (0..a.rows()).map(|r| a.row(r).to_vec()).collect()
    }

    pub fn layer(
        model: &Model,
        layer: &MessageLayer,
        h: &[Vec<f64>],
        x: &[Vec<f64>],
        lists: &[Vec<usize>],
        egnn: bool,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = h.len();
        let width = h[0].len();
        let mut h_out = Vec::new();
        let mut x_out = Vec::new();
        for i in 0..n {
            let mut m_i = vec![0.0; width];
            let mut shift = [0.0; 3];
            for &j in &lists[i] {
                let diff: Vec<f64> = (0..3).map(|k| x[i][k] - x[j][k]).collect();
                let mut input = h[i].clone();
                input.extend(&h[j]);
                if egnn {
                    input.push(diff.iter().map(|d| d * d).sum::<f64>().sqrt());
                }
                let m_ij = block(&[input], model, &layer.edge_mlp, true).remove(0);
                for (a, b) in m_i.iter_mut().zip(&m_ij) {
                    *a += b;
                }
                if egnn {
                    let w = block(&[m_ij], model, layer.coord_mlp.as_ref().unwrap(), false)[0][0];
                    for k in 0..3 {
                        shift[k] += w * diff[k];
                    }
                }
            }
            let mut input = h[i].clone();
            input.extend(&m_i);
            h_out.push(block(&[input], model, &layer.node_mlp, true).remove(0));
            let deg = lists[i].len();
            x_out.push(
                (0..3)
                    .map(|k| {
                        if deg == 0 {
                            x[i][k]
                        } else {
                            x[i][k] + shift[k] / deg as f64
                        }
                    })
                    .collect(),
            );
        }
        (h_out, x_out)
    }
}

fn tiny_model(family: Family) -> Model {
    let mut spec = ModelSpec::new(family, true, 0);
    spec.hidden = 2;
    spec.mp_layers = 1;
    let mut model = Model::new(spec).unwrap();
    // hand-set weights: a fixed, non-symmetric pattern
    let mut k = 0usize;
    model.update_params(|_, a| {
        for v in a.data_mut() {
            *v = 0.1 * ((k * 5 + 3) % 11) as f64 - 0.5;
            k += 1;
        }
    });
    model
}

fn layer_of(model: &Model) -> MessageLayer {
    match model.architecture() {
        Architecture::Graph { layers, .. } => layers[0],
        _ => unreachable!(),
    }
}

fn path3() -> (Topology, EdgeIndex) {
    let t = Topology::new(3, [(0, 1), (1, 2)]).unwrap();
    let e = EdgeIndex::from_topology(&t);
    (t, e)
}

#[test]
fn gnn_layer_matches_hand_computation_on_path() {
    let model = tiny_model(Family::Gnn);
    let layer = layer_of(&model);
    let (t, edges) = path3();
    let h = Array::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.7, 0.1]]).unwrap();
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let out = gnn_layer(&p, &layer, tape.constant(h.clone()), &edges)
        .unwrap()
        .to_array();
    let (expect, _) = reference::layer(
        &model,
        &layer,
        &reference::rows(&h),
        &vec![vec![0.0; 3]; 3],
        &t.adjacency_lists(),
        false,
    );
    for i in 0..3 {
        for c in 0..2 {
            assert!((out.get(i, c) - expect[i][c]).abs() < 1e-14);
        }
    }
}

#[test]
fn egnn_layer_matches_hand_computation_on_path() {
    let model = tiny_model(Family::Egnn);
    let layer = layer_of(&model);
    let (t, edges) = path3();
    let h = Array::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.7, 0.1]]).unwrap();
    let x = Array::from_rows(&[
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.5, -0.2],
        vec![0.4, 2.0, 1.0],
    ])
    .unwrap();
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let (ho, xo) = egnn_layer(
        &p,
        &layer,
        tape.constant(h.clone()),
        tape.constant(x.clone()),
        &edges,
    )
    .unwrap();
    let (eh, ex) = reference::layer(
        &model,
        &layer,
        &reference::rows(&h),
        &reference::rows(&x),
        &t.adjacency_lists(),
        true,
    );
    let (ho, xo) = (ho.to_array(), xo.to_array());
    for i in 0..3 {
        for c in 0..2 {
            assert!((ho.get(i, c) - eh[i][c]).abs() < 1e-14);
        }
        for k in 0..3 {
            assert!((xo.get(i, k) - ex[i][k]).abs() < 1e-14);
        }
    }
}

#[test]
fn edgeless_graph_sums_to_zero_messages() {
    let model = Model::new(ModelSpec::new(Family::Gnn, true, 5)).unwrap();
    let layer = layer_of(&model);
    let edges = EdgeIndex::from_topology(&Topology::new(4, []).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random_array(&mut rng, 4, 32, 1.0);
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let out = gnn_layer(&p, &layer, tape.constant(h.clone()), &edges)
        .unwrap()
        .to_array();
    let mut input = reference::rows(&h);
    for row in &mut input {
        row.extend([0.0; 32]);
    }
    let expect = reference::block(&input, &model, &layer.node_mlp, true);
    for i in 0..4 {
        for c in 0..32 {
            assert!((out.get(i, c) - expect[i][c]).abs() < 1e-13);
        }
    }
}

#[test]
fn egnn_isolated_and_coincident_nodes_keep_coordinates() {
    let model = Model::new(ModelSpec::new(Family::Egnn, true, 5)).unwrap();
    let layer = layer_of(&model);
    // nodes 0 and 1 coincide and share h; node 2 is isolated
    let edges = EdgeIndex::from_topology(&Topology::new(3, [(0, 1)]).unwrap());
    let h = Array::from_rows(&[vec![0.2; 32], vec![0.2; 32], vec![-0.4; 32]]).unwrap();
    let x = Array::from_rows(&[
        vec![0.5, 0.5, 0.5],
        vec![0.5, 0.5, 0.5],
        vec![1.0, -1.0, 3.0],
    ])
    .unwrap();
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let (_, xo) = egnn_layer(
        &p,
        &layer,
        tape.constant(h),
        tape.constant(x.clone()),
        &edges,
    )
    .unwrap();
    assert_eq!(xo.to_array(), x);
}

fn permute_rows(a: &Array, perm: &[usize]) -> Array {
    // old row i goes to position perm[i]
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    a.select_rows(&inv)
}

#[test]
fn graph_models_are_permutation_equivariant() {
    for seed in 0..5 {
        let c = case(seed, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut perm: Vec<usize> = (0..15).collect();
        perm.shuffle(&mut rng);
        let pedges = EdgeIndex::from_topology(&c.topo.permuted(&perm));
        for family in [Family::Gnn, Family::Egnn] {
            let model = Model::new(ModelSpec::new(family, true, seed)).unwrap();
            let base = probs(&model, &c);
            let moved = model
                .predict(
                    &permute_rows(&c.features, &perm),
                    &permute_rows(&c.coords, &perm),
                    &pedges,
                )
                .unwrap();
            assert!(moved.max_abs_diff(&permute_rows(&base, &perm)) < 1e-10);
        }
    }
}

#[test]
fn egnn_is_invariant_and_coordinates_equivariant() {
    let c = case(8, 14);
    let model = Model::new(ModelSpec::new(Family::Egnn, true, 8)).unwrap();
    let run = |coords: &Array| {
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let out = model
            .forward(
                &tape,
                &p,
                tape.constant(c.features.clone()),
                tape.constant(coords.clone()),
                &c.edges,
                Mode::Eval,
            )
            .unwrap();
        (
            out.probs.to_array(),
            out.coords.iter().map(|t| t.to_array()).collect::<Vec<_>>(),
        )
    };
    let (p0, x0) = run(&c.coords);
    assert_eq!(x0.len(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut reflections = 0;
    for _ in 0..20 {
        let iso = sample_isometry(&mut rng, 5.0);
        reflections += usize::from(iso.is_reflection());
        let (p1, x1) = run(&transformed(&iso, &c.coords));
        assert!(p1.max_abs_diff(&p0) < 1e-8);
        for (a, b) in x1.iter().zip(&x0) {
            assert!(a.max_abs_diff(&transformed(&iso, b)) < 1e-8);
        }
    }
    assert!(reflections > 0);
}

#[test]
fn coordinate_models_are_not_invariant() {
    let c = case(9, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for family in [Family::Gnn, Family::Mlp] {
        // an untrained four-layer GNN is nearly constant, so use one layer here
        let model = shallow_model(family, 1, 9);
        let base = probs(&model, &c);
        let worst = (0..10)
            .map(|_| {
                let iso = sample_isometry(&mut rng, 1.0);
                model
                    .predict(&c.features, &transformed(&iso, &c.coords), &c.edges)
                    .unwrap()
                    .max_abs_diff(&base)
            })
            .fold(0.0, f64::max);
        assert!(worst > 0.01, "{family}: {worst}");
    }
}

/// Gradient checks use one or two message-passing layers: through four
/// layers of Swish blocks at Glorot scale the input sensitivities drop to
/// ~1e-5, where central differences at 1e-6 are dominated by roundoff.
fn shallow_model(family: Family, layers: usize, seed: u64) -> Model {
    let mut spec = ModelSpec::new(family, true, seed);
    spec.mp_layers = layers;
    Model::new(spec).unwrap()
}

fn loss_wrt_input<'t>(
    model: &Model,
    c: &Case,
    wrt_coords: bool,
    tape: &'t Tape,
    x: Tensor<'t>,
) -> crate::autodiff::Result<Tensor<'t>> {
    let p = model.bind(tape, false);
    let (f, xc) = if wrt_coords {
        (tape.constant(c.features.clone()), x)
    } else {
        (x, tape.constant(c.coords.clone()))
    };
    let out = model
        .forward(tape, &p, f, xc, &c.edges, Mode::Train)
        .map_err(unwrap_ad)?;
    dice_loss(tape, &one_hot(&c.labels).unwrap(), out.probs).map_err(|e| match e {
        crate::metrics::MetricsError::Autodiff(a) => a,
        other => AutodiffError::GradCheck(other.to_string()),
    })
}

fn unwrap_ad(e: NnError) -> AutodiffError {
    match e {
        NnError::Autodiff(a) => a,
        other => AutodiffError::GradCheck(other.to_string()),
    }
}

#[test]
fn dice_loss_gradients_through_every_family() {
    for seed in 0..3 {
        let c = case(20 + seed, 6);
        for (family, coords) in [
            (Family::Mlp, true),
            (Family::Gnn, true),
            (Family::Egnn, true),
        ] {
            let model = shallow_model(family, 1 + seed as usize % 2, seed);
            let _ = coords;
            let err = grad_check(
                |t, x| loss_wrt_input(&model, &c, false, t, x),
                &c.features,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{family} features seed {seed}: {err}");
            let err = grad_check(
                |t, x| loss_wrt_input(&model, &c, true, t, x),
                &c.coords,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{family} coords seed {seed}: {err}");
        }
    }
}

#[test]
fn dice_loss_gradients_wrt_parameters() {
    let c = case(31, 6);
    let y = one_hot(&c.labels).unwrap();
    // the last layer's coordinate update never reaches the decoder, so the
    // coordinate MLP is checked in the first of two layers
    for (family, layers, name) in [
        (Family::Gnn, 1, "gnn.layer1.edge_mlp.dense1.bias"),
        (Family::Gnn, 1, "gnn.layer1.node_mlp.dense2.bias"),
        (Family::Egnn, 2, "egnn.layer1.coord_mlp.dense2.bias"),
        (Family::Egnn, 1, "egnn.layer1.edge_mlp.dense1.bias"),
        (Family::Mlp, 1, "mlp.norm3.gamma"),
    ] {
        let model = shallow_model(family, layers, 2);
        let idx = model.param_index(name).unwrap();
        let err = grad_check(
            |t, w| {
                let mut p = model.bind(t, false);
                p[idx] = w;
                let out = model
                    .forward(
                        t,
                        &p,
                        t.constant(c.features.clone()),
                        t.constant(c.coords.clone()),
                        &c.edges,
                        Mode::Train,
                    )
                    .map_err(unwrap_ad)?;
                dice_loss(t, &y, out.probs).map_err(|e| AutodiffError::GradCheck(e.to_string()))
            },
            &model.params()[idx].value,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn running_stats_drive_eval_mode() {
    let c = case(40, 10);
    let mut model = Model::new(ModelSpec::new(Family::Mlp, false, 1)).unwrap();
    let before = probs(&model, &c);
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let out = model
        .forward(
            &tape,
            &p,
            tape.constant(c.features.clone()),
            tape.constant(c.coords.clone()),
            &c.edges,
            Mode::Train,
        )
        .unwrap();
    assert_eq!(out.batch_stats.len(), 5);
    let stats = out.batch_stats.clone();
    drop(out);
    model.update_running_stats(&stats, 10);
    let norm = &model.norms()[0];
    assert!((norm.running_mean[0] - 0.1 * stats[0].0[0]).abs() < 1e-15);
    assert!((norm.running_var[0] - (0.9 + 0.1 * stats[0].1[0] * 10.0 / 9.0)).abs() < 1e-15);
    assert!(probs(&model, &c).max_abs_diff(&before) > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = case(41, 10);
    let dir = tempfile::tempdir().unwrap();
    for (family, coords) in [
        (Family::Mlp, true),
        (Family::Gnn, false),
        (Family::Egnn, true),
    ] {
        let mut model = Model::new(ModelSpec::new(family, coords, 11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        model.update_params(|_, a| {
            for v in a.data_mut() {
                *v += rng.random_range(-1e-3..1e-3);
            }
        });
        let stats = vec![(vec![0.123456789; 32], vec![1.987654321; 32]); 5];
        model.update_running_stats(&stats, 7);
        let path = dir.path().join(format!("{family}.json"));
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(probs(&back, &c), probs(&model, &c));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::new(ModelSpec::new(Family::Gnn, true, 0)).unwrap();
    let mut state = model.to_state();
    state.parameters[3].shape = vec![5, 5];
    assert!(matches!(
        Model::from_state(&state),
        Err(NnError::Checkpoint(_))
    ));
    let mut state = model.to_state();
    state.parameters.pop();
    assert!(matches!(
        Model::from_state(&state),
        Err(NnError::Checkpoint(_))
    ));
    let mut state = model.to_state();
    state.parameters[0].name = "gnn.nothing.weight".into();
    assert!(matches!(
        Model::from_state(&state),
        Err(NnError::Checkpoint(_))
    ));
}
