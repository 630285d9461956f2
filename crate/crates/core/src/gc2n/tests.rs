use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Dataset;
use crate::graph::build_graph;
use crate::numeric::{finite_difference, relative_error, ParamId, ParameterSet};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn vec_mat(v: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|c| (0..w.rows()).map(|r| v[r] * w.get(r, c)).sum()).collect()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (s, v) in acc.iter_mut().zip(x) {
        *s += a * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn squash_vec(v: &[f64]) -> Vec<f64> {
    let n2 = dot(v, v);
    let n = n2.sqrt();
    let f = if n == 0.0 { 0.0 } else { n / (1.0 + n2) };
    v.iter().map(|x| x * f).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn project_items_trivial_cases() {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::scalar(0.7));
    let w = tape.constant(Tensor::scalar(-2.0));
    let b = tape.constant(Tensor::scalar(0.25));
    let c = project_items(&mut tape, e, w, b).unwrap();
    assert!((tape.value(c).item().unwrap() - (0.7 * -2.0 + 0.25)).abs() < 1e-15);

    let e = tape.constant(random(5, 4, 1));
    let w = tape.constant(Tensor::zeros(4, 3));
    let bias = Tensor::row_vector(&[1.0, -2.0, 3.0]);
    let b = tape.constant(bias.clone());
    let c = project_items(&mut tape, e, w, b).unwrap();
    for r in 0..5 {
        assert_eq!(tape.value(c).row(r), bias.row(0));
    }

    let w_bad = tape.constant(Tensor::zeros(3, 3));
    assert!(matches!(project_items(&mut tape, e, w_bad, b), Err(Error::Shape { .. })));
}

#[test]
fn project_items_matches_dense_oracle() {
    let (m, d1, d2) = (6, 4, 3);
    let e = random(m, d1, 2);
    let w_l = random(d1, d2, 3);
    let b_l = random(1, d2, 4);

    // Straight-line evaluation: attention map, row softmax, two products, bias.
    let mut map = vec![vec![0.0; d1]; d1];
    for (r, row) in map.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..m).map(|i| e.get(i, r) * e.get(i, c)).sum::<f64>() / (d1 as f64).sqrt();
        }
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for v in row.iter_mut() {
            *v = v.exp() / z;
        }
    }
    let mut expected = Vec::new();
    for i in 0..m {
        let attended: Vec<f64> = (0..d1).map(|c| (0..d1).map(|r| e.get(i, r) * map[r][c]).sum()).collect();
        let out = vec_mat(&attended, &w_l);
        expected.extend(out.iter().zip(b_l.row(0)).map(|(a, b)| a + b));
    }

    let mut tape = Tape::new();
    let (ev, wv, bv) = (tape.constant(e), tape.constant(w_l), tape.constant(b_l));
    let c = project_items(&mut tape, ev, wv, bv).unwrap();
    close(tape.value(c).data(), &expected, 1e-12);
}

#[test]
fn project_items_never_builds_item_by_item_map() {
    let m = 300;
    let mut tape = Tape::new();
    let e = tape.constant(random(m, 16, 5));
    let w = tape.constant(random(16, 16, 6));
    let b = tape.constant(Tensor::zeros(1, 16));
    project_items(&mut tape, e, w, b).unwrap();
    let largest = tape.largest_value_len();
    assert!(largest <= m * 16, "largest intermediate has {largest} entries");
}

#[test]
fn project_items_scales_linearly() {
    use std::time::Instant;
    let sizes = [1000usize, 2000, 4000];
    let times: Vec<f64> = sizes
        .iter()
        .map(|&m| {
            let e = random(m, 16, 7);
            let w = random(16, 16, 8);
            (0..7)
                .map(|_| {
                    let start = Instant::now();
                    for _ in 0..10 {
                        let mut tape = Tape::new();
                        let (ev, wv) = (tape.constant(e.clone()), tape.constant(w.clone()));
                        let bv = tape.constant(Tensor::zeros(1, 16));
                        project_items(&mut tape, ev, wv, bv).unwrap();
                    }
                    start.elapsed().as_secs_f64()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    // Least-squares line through the three points; each point within 25% of it.
    let xs: Vec<f64> = sizes.iter().map(|&m| m as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, times.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&times).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let intercept = my - slope * mx;
    assert!(slope > 0.0);
    for (x, t) in xs.iter().zip(&times) {
        let fit = intercept + slope * x;
        assert!((t - fit).abs() <= 0.25 * fit, "times {times:?} off the linear fit");
    }
}

#[test]
fn project_accounts_cases() {
    let (n, d1, alpha, d2) = (4, 3, 2, 5);
    let e = random(n, d1, 9);
    let w = random(d1, alpha * d2, 10);
    let b = random(1, alpha * d2, 11);
    let mut tape = Tape::new();
    let (ev, wv, bv) = (tape.constant(e.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let c = project_accounts(&mut tape, ev, wv, bv, alpha).unwrap();
    assert_eq!(tape.value(c).shape(), [n * alpha, d2]);
    for k in 0..n {
        let flat: Vec<f64> = vec_mat(e.row(k), &w).iter().zip(b.row(0)).map(|(x, y)| x + y).collect();
        for h in 0..alpha {
            close(tape.value(c).row(k * alpha + h), &flat[h * d2..(h + 1) * d2], 1e-12);
        }
    }

    // Zero input leaves only the bias slices.
    let zero = tape.constant(Tensor::zeros(n, d1));
    let c = project_accounts(&mut tape, zero, wv, bv, alpha).unwrap();
    for k in 0..n {
        for h in 0..alpha {
            assert_eq!(tape.value(c).row(k * alpha + h), &b.row(0)[h * d2..(h + 1) * d2]);
        }
    }

    // α = 1 is an ordinary linear layer.
    let w1 = tape.constant(random(d1, d2, 12));
    let b1 = tape.constant(random(1, d2, 13));
    let c = project_accounts(&mut tape, ev, w1, b1, 1).unwrap();
    let lin = tape.matmul(ev, w1).unwrap();
    let lin = tape.add_row(lin, b1).unwrap();
    assert_eq!(tape.value(c), tape.value(lin));

    let bad = tape.constant(Tensor::zeros(d1, 7));
    let bad_b = tape.constant(Tensor::zeros(1, 7));
    assert!(matches!(project_accounts(&mut tape, ev, bad, bad_b, 2), Err(Error::Shape { .. })));
}

#[test]
fn correlation_weight_cases() {
    let delta: f64 = 0.8;
    let w = correlation_row(&[1.0, 0.0], &[&[delta, 0.3], &[delta, -0.4]]);
    let expected = delta.exp() / (2.0 * delta.exp().sqrt());
    close(&w, &[expected, expected], 1e-15);

    // Five neighbors against a scalar-loop oracle.
    let user = random(1, 6, 14);
    let items = random(5, 6, 15);
    let mut num = Vec::new();
    let mut denom = 0.0;
    for j in 0..5 {
        let mut s = 0.0;
        for c in 0..6 {
            s += user.get(0, c) * items.get(j, c);
        }
        num.push(s.exp());
        denom += s.exp().sqrt();
    }
    let oracle: Vec<f64> = num.iter().map(|v| v / denom).collect();
    let rows: Vec<&[f64]> = (0..5).map(|j| items.row(j)).collect();
    close(&correlation_row(user.row(0), &rows), &oracle, 1e-12);

    let mut tape = Tape::new();
    let scores: Vec<f64> = (0..5).map(|j| dot(user.row(0), items.row(j))).collect();
    let s = tape.constant(Tensor::column_vector(&scores));
    let a = tape.correlation_weights(s, &[0; 5], 1).unwrap();
    close(tape.value(a).data(), &oracle, 1e-12);
}

/// Account 0 bought items 0, 1, 2 in order; account 1 bought 2 then 0.
fn toy() -> (Dataset, SequentialGraph) {
    let d = Dataset::from_index_sequences(4, 2, &[(0, vec![0, 1, 2]), (1, vec![2, 0])]).unwrap();
    let g = build_graph(&d).unwrap();
    (d, g)
}

#[test]
fn propagation_matches_hand_unrolled_oracle() {
    let (_, g) = toy();
    let alpha = 2;
    let edges = EdgeIndex::new(&g, alpha, false);
    let d2 = 3;
    let users = random(4, d2, 20);
    let items = random(4, d2, 21);
    let w: Vec<Tensor> = (0..5).map(|s| random(d2, d2, 30 + s)).collect();

    let mut tape = Tape::new();
    let uv = tape.constant(users.clone());
    let iv = tape.constant(items.clone());
    let wv: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
    let layer = LayerVars { w1: wv[0], w2: wv[1], w3: wv[2], w4: wv[3], w5: wv[4] };
    let corr = correlation_weights(&mut tape, uv, iv, &edges, false).unwrap();
    let next_users = propagate_to_users(&mut tape, &layer, uv, iv, corr, &edges).unwrap();
    let next_items = propagate_to_items(&mut tape, &layer, uv, iv, &edges).unwrap();

    // Neighbor sets written out by hand.
    let account_items: [&[usize]; 2] = [&[0, 1, 2], &[0, 2]];
    for u in 0..4 {
        let nbrs = account_items[u / alpha];
        let rows: Vec<&[f64]> = nbrs.iter().map(|&j| items.row(j)).collect();
        let a = correlation_row(users.row(u), &rows);
        let mut expected = vec_mat(users.row(u), &w[2]);
        for (&j, &aj) in nbrs.iter().zip(&a) {
            axpy(&mut expected, 1.0, &vec_mat(items.row(j), &w[0]));
            axpy(&mut expected, aj, &vec_mat(items.row(j), &w[1]));
        }
        close(tape.value(next_users).row(u), &expected, 1e-12);
    }
    let item_users: [&[usize]; 4] = [&[0, 1, 2, 3], &[0, 1], &[0, 1, 2, 3], &[]];
    let item_preds: [&[usize]; 4] = [&[2], &[0], &[1], &[]];
    for j in 0..4 {
        let mut expected = vec![0.0; d2];
        for &u in item_users[j] {
            axpy(&mut expected, 1.0, &vec_mat(users.row(u), &w[3]));
        }
        for &p in item_preds[j] {
            axpy(&mut expected, 1.0, &vec_mat(items.row(p), &w[4]));
        }
        close(tape.value(next_items).row(j), &expected, 1e-12);
    }
    // Item 3 is isolated.
    assert_eq!(tape.value(next_items).row(3), &[0.0; 3]);
}

#[test]
fn propagation_trivial_cases() {
    // Account 1 has only test data, so its users see no items.
    let mut d = Dataset::from_index_sequences(3, 2, &[(0, vec![0, 1]), (1, vec![1, 2])]).unwrap();
    d.split[1] = crate::data::Split::Test;
    let g = build_graph(&d).unwrap();
    let edges = EdgeIndex::new(&g, 1, false);
    let mut tape = Tape::new();
    let users = random(2, 2, 40);
    let uv = tape.constant(users.clone());
    let iv = tape.constant(random(3, 2, 41));
    let zero = tape.constant(Tensor::zeros(2, 2));
    let w3 = random(2, 2, 42);
    let w3v = tape.constant(w3.clone());
    let w5 = random(2, 2, 43);
    let w5v = tape.constant(w5.clone());
    let layer = LayerVars { w1: zero, w2: zero, w3: w3v, w4: zero, w5: w5v };
    let corr = correlation_weights(&mut tape, uv, iv, &edges, false).unwrap();
    let out = propagate_to_users(&mut tape, &layer, uv, iv, corr, &edges).unwrap();
    // W₁ = W₂ = 0 and the no-neighbor user both reduce to the self term.
    for u in 0..2 {
        close(tape.value(out).row(u), &vec_mat(users.row(u), &w3), 1e-15);
    }
    let out = propagate_to_items(&mut tape, &layer, uv, iv, &edges).unwrap();
    close(tape.value(out).row(1), &vec_mat(tape.value(iv).row(0), &w5), 1e-15);
    assert_eq!(tape.value(out).row(2), &[0.0, 0.0]);
}

#[test]
fn normalized_adjacency_scales_messages() {
    let (_, g) = toy();
    let edges = EdgeIndex::new(&g, 2, true);
    let w = edges.ui_weight.as_ref().unwrap();
    // User 0 (account 0, 3 items) to item 1 (1 account × 2 users).
    let e = edges.ui_user.iter().zip(&edges.ui_item).position(|(&u, &j)| u == 0 && j == 1).unwrap();
    assert!((w[e] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    // Item 0 has one predecessor (2); item 2 has successors {0}.
    let e = edges.ii_dst.iter().position(|&j| j == 0).unwrap();
    assert!((edges.ii_weight.as_ref().unwrap()[e] - 1.0).abs() < 1e-15);
}

#[test]
fn aggregate_layers_cases() {
    let mut tape = Tape::new();
    let layers: Vec<Tensor> = (0..3).map(|s| random(3, 2, 50 + s)).collect();
    let vars: Vec<Var> = layers.iter().map(|t| tape.constant(t.clone())).collect();
    let sum = aggregate_layers(&mut tape, &vars).unwrap();
    let expected = layers[0].add(&layers[1]).unwrap().add(&layers[2]).unwrap();
    close(tape.value(sum).data(), expected.data(), 1e-15);
    let single = aggregate_layers(&mut tape, &vars[..1]).unwrap();
    assert_eq!(tape.value(single), &layers[0]);
    assert!(aggregate_layers(&mut tape, &[]).is_err());
}

/// Routing written out step by step for one account: returns the capsule and coupling.
fn scripted_routing(users: &[Vec<f64>], b0: &[f64], w_d: &Tensor, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let d2 = users[0].len();
    let mut b = b0.to_vec();
    let mut capsule = vec![0.0; d2];
    for _ in 0..iters {
        let mut s = vec![0.0; d2];
        for (p, u) in users.iter().enumerate() {
            axpy(&mut s, b[p], u);
        }
        capsule = squash_vec(&s);
        let mut agreement = vec![0.0; d2];
        for u in users {
            for c in 0..d2 {
                agreement[c] += u[c] * capsule[c];
            }
        }
        for (p, bp) in b.iter_mut().enumerate() {
            *bp += dot(w_d.row(p), &agreement);
        }
    }
    (capsule, b)
}

#[test]
fn routing_matches_scripted_oracle() {
    let (n, alpha, d2) = (3, 2, 4);
    let users = random(n * alpha, d2, 60).scale(2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let b0 = Tensor::new(n, alpha, (0..n * alpha).map(|_| rng.random::<f64>()).collect()).unwrap();
    let w_d = random(alpha, d2, 62);
    let owners: Vec<usize> = (0..n * alpha).map(|u| u / alpha).collect();

    let mut tape = Tape::new();
    let uv = tape.constant(users.clone());
    let wv = tape.constant(w_d.clone());
    let (cap, b) = dynamic_routing(&mut tape, uv, &b0, wv, 3, RoutingVariant::Standard, &owners).unwrap();
    for k in 0..n {
        let rows: Vec<Vec<f64>> = (0..alpha).map(|h| users.row(k * alpha + h).to_vec()).collect();
        let (c, bk) = scripted_routing(&rows, b0.row(k), &w_d, 3);
        close(tape.value(cap).row(k), &c, 1e-12);
        close(b.row(k), &bk, 1e-12);
    }
}

#[test]
fn routing_literal_variant_matches_its_formula() {
    let (n, alpha, d2) = (2, 3, 4);
    let users = random(n * alpha, d2, 63);
    let b0 = random(n, alpha, 64);
    let w_d = random(alpha, d2, 65);
    let owners: Vec<usize> = (0..n * alpha).map(|u| u / alpha).collect();
    let mut tape = Tape::new();
    let uv = tape.constant(users.clone());
    let wv = tape.constant(w_d.clone());
    let (cap, _) = dynamic_routing(&mut tape, uv, &b0, wv, 1, RoutingVariant::LiteralDoubleSum, &owners).unwrap();
    for k in 0..n {
        let b_sum: f64 = b0.row(k).iter().sum();
        let mut expected = vec![0.0; d2];
        for h in 0..alpha {
            let scaled: Vec<f64> = users.row(k * alpha + h).iter().map(|v| v * b_sum).collect();
            axpy(&mut expected, 1.0, &squash_vec(&scaled));
        }
        close(tape.value(cap).row(k), &expected, 1e-12);
    }
}

#[test]
fn routing_trivial_cases() {
    let mut tape = Tape::new();
    // α = 1, b = 1, W_d = 0: every iteration squashes the single capsule.
    let users = random(2, 3, 66);
    let uv = tape.constant(users.clone());
    let wv = tape.constant(Tensor::zeros(1, 3));
    for iters in 1..=3 {
        let (cap, b) =
            dynamic_routing(&mut tape, uv, &Tensor::ones(2, 1), wv, iters, RoutingVariant::Standard, &[0, 1]).unwrap();
        for k in 0..2 {
            close(tape.value(cap).row(k), &squash_vec(users.row(k)), 1e-15);
        }
        assert_eq!(b, Tensor::ones(2, 1));
    }

    // Zero users give a zero capsule and leave b unchanged.
    let zero = tape.constant(Tensor::zeros(4, 3));
    let b0 = random(2, 2, 67);
    let wv = tape.constant(random(2, 3, 68));
    let (cap, b) = dynamic_routing(&mut tape, zero, &b0, wv, 3, RoutingVariant::Standard, &[0, 0, 1, 1]).unwrap();
    assert_eq!(tape.value(cap), &Tensor::zeros(2, 3));
    assert_eq!(b, b0);

    assert!(matches!(
        dynamic_routing(&mut tape, zero, &b0, wv, 0, RoutingVariant::Standard, &[0, 0, 1, 1]),
        Err(Error::Config(_))
    ));
}

#[test]
fn routed_capsules_stay_inside_unit_ball() {
    let (n, alpha, d2) = (20, 3, 8);
    let owners: Vec<usize> = (0..n * alpha).map(|u| u / alpha).collect();
    let mut tape = Tape::new();
    let uv = tape.constant(random(n * alpha, d2, 70).scale(50.0));
    let wv = tape.constant(random(alpha, d2, 71));
    for iters in 1..=5 {
        let (cap, _) =
            dynamic_routing(&mut tape, uv, &random(n, alpha, 72), wv, iters, RoutingVariant::Standard, &owners).unwrap();
        for k in 0..n {
            assert!(dot(tape.value(cap).row(k), tape.value(cap).row(k)) < 1.0);
        }
    }
}

#[derive(Clone)]
struct Toy {
    params: ParameterSet,
    ids: Vec<ParamId>,
    cfg: Gc2nConfig,
    coupling: Tensor,
}

fn toy_params(cfg: Gc2nConfig, n_items: usize, n_accounts: usize, seed: u64) -> Toy {
    let (d1, d2, a) = (cfg.d1, cfg.d2, cfg.alpha);
    let mut shapes = vec![
        ("E_I", n_items, d1),
        ("E_A", n_accounts, d1),
        ("W_l", d1, d2),
        ("b_l", 1, d2),
        ("W_c", d1, a * d2),
        ("b_c", 1, a * d2),
        ("W_d", a, d2),
    ];
    let names: Vec<String> = (0..cfg.layers).flat_map(|l| (1..=5).map(move |i| format!("W{i}.{l}"))).collect();
    for name in &names {
        shapes.push((name.as_str(), d2, d2));
    }
    let mut params = ParameterSet::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(name, r, c))| params.register(name, random(r, c, seed + i as u64).scale(0.5)).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coupling = Tensor::new(n_accounts, a, (0..n_accounts * a).map(|_| rng.random::<f64>()).collect()).unwrap();
    Toy { params, ids, cfg, coupling }
}

fn toy_vars(tape: &mut Tape, toy: &Toy) -> Gc2nVars {
    let v: Vec<Var> = toy.ids.iter().map(|&id| tape.param(&toy.params, id)).collect();
    Gc2nVars {
        item_embeddings: v[0],
        account_embeddings: v[1],
        w_l: v[2],
        b_l: v[3],
        w_c: v[4],
        b_c: v[5],
        w_d: v[6],
        layers: v[7..]
            .chunks(5)
            .map(|w| LayerVars { w1: w[0], w2: w[1], w3: w[2], w4: w[3], w5: w[4] })
            .collect(),
    }
}

fn run(tape: &mut Tape, toy: &Toy, edges: &EdgeIndex) -> Gc2nOutput {
    let vars = toy_vars(tape, toy);
    forward::<ChaCha8Rng>(tape, &toy.cfg, edges, &vars, &toy.coupling, None).unwrap()
}

fn small_cfg() -> Gc2nConfig {
    Gc2nConfig { d1: 3, d2: 3, normalize_adjacency: false, cosine_correlation: false, ..Gc2nConfig::default() }
}

#[test]
fn zero_layers_return_projected_capsules() {
    let (_, g) = toy();
    let cfg = Gc2nConfig { layers: 0, use_dynamic_routing: false, ..small_cfg() };
    let toy = toy_params(cfg, 4, 2, 80);
    let edges = EdgeIndex::new(&g, 2, false);
    let mut tape = Tape::new();
    let out = run(&mut tape, &toy, &edges);
    assert_eq!(tape.value(out.items), tape.value(out.item_layers[0]));
    assert_eq!(tape.value(out.users), tape.value(out.user_layers[0]));
}

#[test]
fn forward_sums_all_layers() {
    let (_, g) = toy();
    let toy = toy_params(small_cfg(), 4, 2, 81);
    let edges = EdgeIndex::new(&g, 2, false);
    let mut tape = Tape::new();
    let out = run(&mut tape, &toy, &edges);
    assert_eq!(out.item_layers.len(), 3);
    let l = &out.item_layers;
    let expected = tape.value(l[0]).add(tape.value(l[1])).unwrap().add(tape.value(l[2])).unwrap();
    close(tape.value(out.items).data(), expected.data(), 1e-15);
}

#[test]
fn single_user_without_routing_is_plain_attentive_gcn() {
    let (_, g) = toy();
    let cfg = Gc2nConfig { alpha: 1, use_dynamic_routing: false, ..small_cfg() };
    let toy = toy_params(cfg, 4, 2, 82);
    let edges = EdgeIndex::new(&g, 1, false);
    let mut tape = Tape::new();
    let out = run(&mut tape, &toy, &edges);
    // The mean over one capsule is that capsule, bit for bit.
    assert_eq!(tape.value(out.accounts), tape.value(out.users));
}

#[test]
fn finalize_stacks_item_rows() {
    let (_, g) = toy();
    let toy = toy_params(small_cfg(), 4, 2, 83);
    let edges = EdgeIndex::new(&g, 2, false);
    let mut tape = Tape::new();
    let out = run(&mut tape, &toy, &edges);
    let (accounts, stack) = finalize(&tape, &out, &[2]);
    assert_eq!(stack.shape(), [1, 3]);
    assert_eq!(accounts.shape(), [2, 3]);
    let (_, a) = finalize(&tape, &out, &[0, 2, 1]);
    let (_, b) = finalize(&tape, &out, &[2, 0]);
    assert_eq!(a.row(1), b.row(0));
    let mut direct = vec![0.0; 3];
    for j in [0, 2, 1] {
        axpy(&mut direct, 1.0, tape.value(out.items).row(j));
    }
    close(a.transpose().matmul(&Tensor::ones(3, 1)).unwrap().data(), &direct, 1e-15);
}

#[test]
fn permuting_accounts_permutes_account_capsules() {
    let seqs = vec![(0, vec![0, 1, 2]), (1, vec![2, 3]), (2, vec![3, 4, 0]), (1, vec![4, 1])];
    let d = Dataset::from_index_sequences(5, 3, &seqs).unwrap();
    let toy = toy_params(Gc2nConfig { normalize_adjacency: true, ..small_cfg() }, 5, 3, 84);
    let edges = EdgeIndex::new(&build_graph(&d).unwrap(), 2, true);
    let mut tape = Tape::new();
    let out = run(&mut tape, &toy, &edges);
    let base = tape.value(out.accounts).clone();

    // new index of old account k
    let perm = [2usize, 0, 1];
    let permuted: Vec<(usize, Vec<usize>)> = seqs.iter().map(|(k, s)| (perm[*k], s.clone())).collect();
    let d2 = Dataset::from_index_sequences(5, 3, &permuted).unwrap();
    let edges2 = EdgeIndex::new(&build_graph(&d2).unwrap(), 2, true);
    let mut toy2 = toy_params(toy.cfg.clone(), 5, 3, 84);
    let e_a = toy.params.value(toy.ids[1]);
    let mut moved_e = Tensor::zeros(3, e_a.cols());
    let mut moved_b = Tensor::zeros(3, 2);
    for k in 0..3 {
        moved_e.row_mut(perm[k]).copy_from_slice(e_a.row(k));
        moved_b.row_mut(perm[k]).copy_from_slice(toy.coupling.row(k));
    }
    toy2.params.get_mut(toy2.ids[1]).value = moved_e;
    toy2.coupling = moved_b;
    let mut tape = Tape::new();
    let out2 = run(&mut tape, &toy2, &edges2);
    for k in 0..3 {
        close(tape.value(out2.accounts).row(perm[k]), base.row(k), 1e-12);
    }
}

#[test]
fn all_parameters_pass_gradient_check() {
    let (_, g) = toy();
    for cfg in [
        small_cfg(),
        Gc2nConfig { routing_variant: RoutingVariant::LiteralDoubleSum, normalize_adjacency: true, cosine_correlation: true, ..small_cfg() },
        Gc2nConfig { use_linear_attention: false, use_dynamic_routing: false, ..small_cfg() },
    ] {
        let edges = EdgeIndex::new(&g, cfg.alpha, cfg.normalize_adjacency);
        let toy = toy_params(cfg, 4, 2, 85);
        let r_items = random(4, 3, 86);
        let r_accounts = random(2, 3, 87);
        let loss = |toy: &Toy, tape: &mut Tape| -> Var {
            let out = run(tape, toy, &edges);
            let ri = tape.constant(r_items.clone());
            let ra = tape.constant(r_accounts.clone());
            let a = tape.mul(out.items, ri).unwrap();
            let b = tape.mul(out.accounts, ra).unwrap();
            let sa = tape.sum_all(a).unwrap();
            let sb = tape.sum_all(b).unwrap();
            tape.add(sa, sb).unwrap()
        };
        let mut tape = Tape::new();
        let root = loss(&toy, &mut tape);
        let mut grads = toy.params.clone();
        tape.backward(root, &mut grads).unwrap();
        for &id in &toy.ids {
            let numeric = finite_difference(toy.params.value(id), 1e-6, |probe| {
                let mut t = toy.clone();
                t.params.get_mut(id).value = probe.clone();
                let mut tape = Tape::new();
                let root = loss(&t, &mut tape);
                tape.value(root).item().unwrap()
            });
            let err = relative_error(grads.grad(id), &numeric, 1e-8);
            assert!(err < 1e-6, "{}: relative error {err}", toy.params.get(id).name);
        }
    }
}

#[test]
fn dropout_mask_is_inverted() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let m = dropout_mask(&mut rng, 100, 100, 0.1);
    assert!(m.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
    assert!((m.sum() / 10_000.0 - 1.0).abs() < 0.03);
}
