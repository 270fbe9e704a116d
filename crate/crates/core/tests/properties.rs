use nalgebra::DMatrix;
use proptest::prelude::*;

use dana::design::{post_scale, reduced_hessian};
use dana::dispatch::{feasible_initial, kkt_solve, random_problem, InitMode};
use dana::graph::{laplacian_from_weights, random_connected_graph, unit_laplacian, WeightedGraph};
use dana::linalg::{build_reduction_transform, schur_definiteness_check, sym_eig, taylor_q_inverse, SymMatrix};
use dana::sdp::{solve_sdp, LmiBlock, SdpOptions, SdpProblem, SdpStatus};
use dana::solver::{
    dana_run_dense, dana_run_message_passing, dana_run_message_passing_with, dana_step_dense, loop_conversion_check,
    MessagePassingOptions, SolverConfig,
};

fn sym_strategy(max_n: usize) -> impl Strategy<Value = SymMatrix> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec(-10.0f64..10.0, n * n).prop_map(move |v| SymMatrix::symmetrize(DMatrix::from_vec(n, n, v)))
    })
}

/// `(n, m, seed)` with a valid edge count for a connected simple graph.
fn graph_params(max_n: usize) -> impl Strategy<Value = (usize, usize, u64)> {
    (3..=max_n).prop_flat_map(|n| (Just(n), (n - 1)..=(n * (n - 1) / 2), any::<u64>()))
}

fn scaled_instance(n: usize, m: usize, seed: u64) -> (dana::dispatch::DispatchProblem, WeightedGraph, SymMatrix) {
    let g0 = random_connected_graph(n, m, seed).unwrap();
    let p = random_problem(n, (0.5, 2.0), (-1.0, 1.0), n as f64, seed).unwrap();
    let (l, beta) = post_scale(&unit_laplacian(&g0), p.a()).unwrap();
    let g = g0.with_weights(vec![beta; m]).unwrap();
    (p, g, l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigendecomposition_reconstructs(a in sym_strategy(12)) {
        let e = sym_eig(&a).unwrap();
        let n = a.order();
        prop_assert!(e.values.as_slice().windows(2).all(|w| w[0] <= w[1]));
        let rec = (e.reconstruct() - a.as_matrix()).norm();
        prop_assert!(rec <= 1e-10 * a.frobenius_norm().max(1.0));
        let orth = (e.vectors.transpose() * &e.vectors - DMatrix::identity(n, n)).norm();
        prop_assert!(orth <= 1e-10 * n as f64);
    }

    #[test]
    fn reduction_transform_invariants(n in 2usize..40) {
        let t = build_reduction_transform(n).unwrap();
        let tm = t.matrix();
        prop_assert!((tm.transpose() * tm - DMatrix::identity(n, n)).norm() <= 1e-10 * n as f64);
        let c = 1.0 / (n as f64).sqrt();
        prop_assert!(tm.column(n - 1).iter().all(|v| (v - c).abs() <= 1e-12));
        let proj = t.reduced_basis().transpose() * t.reduced_basis();
        let centering = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        prop_assert!((proj - centering).norm() <= 1e-10);
    }

    #[test]
    fn laplacians_are_centered_psd((n, m, seed) in graph_params(15), scale in 0.1f64..10.0) {
        let g = random_connected_graph(n, m, seed).unwrap();
        prop_assert!(g.is_connected());
        prop_assert_eq!(g.num_edges(), m);
        let l = laplacian_from_weights(&g.with_weights(vec![scale; m]).unwrap());
        for i in 0..n {
            let row: f64 = (0..n).map(|j| l[(i, j)]).sum();
            prop_assert!(row.abs() <= 1e-12 * scale * n as f64);
        }
        let e = sym_eig(&l).unwrap();
        prop_assert!(e.values[0].abs() <= 1e-10 * scale * n as f64);
        prop_assert!(e.values[1] > 1e-10, "connected graph has a single zero eigenvalue");
    }

    #[test]
    fn kkt_residuals_vanish(n in 1usize..60, seed in any::<u64>(), d in -100.0f64..100.0) {
        let p = random_problem(n, (0.1, 10.0), (-5.0, 5.0), d, seed).unwrap();
        let s = kkt_solve(&p);
        let scale = 1.0 + d.abs() + s.x_star.iter().map(|v| v.abs()).sum::<f64>();
        prop_assert!((s.x_star.iter().sum::<f64>() - d).abs() <= 1e-10 * scale);
        for i in 0..n {
            let r = p.a()[i] * s.x_star[i] + p.b()[i] + s.lambda_star;
            prop_assert!(r.abs() <= 1e-10 * (1.0 + s.lambda_star.abs()));
        }
    }

    #[test]
    fn dana_steps_preserve_total_demand((n, m, seed) in graph_params(12), q in 0usize..5) {
        let (p, _, l) = scaled_instance(n, m, seed);
        let mut x = feasible_initial(&p, InitMode::Random { seed });
        for _ in 0..5 {
            x = dana_step_dense(&x, &l, &p, q, 1.0).unwrap();
        }
        prop_assert!((x.iter().sum::<f64>() - p.demand()).abs() <= 1e-9 * p.demand().abs().max(1.0));
    }

    #[test]
    fn reduced_spectrum_matches_lhl((n, m, seed) in graph_params(12)) {
        let (p, _, l) = scaled_instance(n, m, seed);
        let h = p.hessian();
        let mut ms: Vec<f64> = sym_eig(&reduced_hessian(&l, &h).unwrap()).unwrap().values.to_vec();
        let lhl = SymMatrix::symmetrize(l.as_matrix() * h.as_matrix() * l.as_matrix());
        let mut full: Vec<f64> = sym_eig(&lhl).unwrap().values.to_vec();
        // Drop the eigenvalue belonging to the all-ones direction.
        full.remove(0);
        ms.sort_by(f64::total_cmp);
        for (a, b) in ms.iter().zip(&full) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn loop_conversion_random_pairs((n, m, seed) in graph_params(10), k in 1usize..5, q in 0usize..4) {
        let (p, _, l) = scaled_instance(n, m, seed);
        let x0 = feasible_initial(&p, InitMode::Concentrated);
        prop_assert!(loop_conversion_check(&p, &l, &x0, (k, q), (k * (q + 1), 0)).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn message_passing_ignores_agent_order((n, m, seed) in graph_params(9), q in 0usize..4, perm_seed in any::<u64>()) {
        let (p, g, _) = scaled_instance(n, m, seed);
        let x0 = feasible_initial(&p, InitMode::Uniform);
        let cfg = SolverConfig::dana(q, 8);
        let base = dana_run_message_passing(&p, &g, &cfg, &x0).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        let mut state = perm_seed;
        for i in (1..n).rev() {
            state = dana::rng::splitmix64(state);
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let opts = MessagePassingOptions { agent_order: Some(order), record_deliveries: true };
        let (shuffled, log) = dana_run_message_passing_with(&p, &g, &cfg, &x0, &opts).unwrap();
        prop_assert_eq!(&base.x_final, &shuffled.x_final);
        prop_assert!(log.iter().all(|d| g.has_edge(d.from, d.to)));
        let dense = dana_run_dense(&p, &laplacian_from_weights(&g), &cfg, &x0).unwrap();
        for (a, b) in dense.x_final.iter().zip(&base.x_final) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn taylor_inverse_error_bound(n in 1usize..8, seed in any::<u64>(), q in 0usize..25) {
        let mut s = seed;
        let mut next = || { s = dana::rng::splitmix64(s); (s >> 11) as f64 / (1u64 << 53) as f64 };
        let lambdas: Vec<f64> = (0..n).map(|_| 0.2 + 1.6 * next()).collect();
        let raw = DMatrix::from_fn(n, n, |_, _| next() - 0.5);
        let qm = raw.qr().q();
        let a = SymMatrix::symmetrize(&qm * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambdas.clone())) * qm.transpose());
        let eps = lambdas.iter().fold(0.0f64, |acc, l| acc.max((1.0 - l).abs()));
        let inv = a.as_matrix().clone().try_inverse().unwrap();
        let approx = taylor_q_inverse(&a, q).unwrap();
        let err = sym_eig(&SymMatrix::symmetrize(approx.as_matrix() - inv)).unwrap();
        let norm = err.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        prop_assert!(norm <= eps.powi(q as i32 + 1) / (1.0 - eps) * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn schur_routes_agree_on_psd_constructions(p in 1usize..5, q in 1usize..5, entries in prop::collection::vec(-1.0f64..1.0, 81)) {
        let k = p + q;
        let g = DMatrix::from_fn(k + 1, k, |i, j| entries[(i * k + j) % entries.len()]);
        let full = g.transpose() * g + DMatrix::identity(k, k) * 1e-3;
        let a = SymMatrix::symmetrize(full.view((0, 0), (p, p)).clone_owned());
        let b = full.view((0, p), (p, q)).clone_owned();
        let c = SymMatrix::symmetrize(full.view((p, p), (q, q)).clone_owned());
        let v = schur_definiteness_check(&a, &b, &c).unwrap();
        prop_assert!(v.agree());
        prop_assert!(v.block_psd);
    }

    #[test]
    fn sdp_recovers_largest_eigenvalue(a in sym_strategy(6)) {
        // minimize t subject to t I - A ⪰ 0.
        let n = a.order();
        let mut prob = SdpProblem::new(1);
        prob.set_objective(vec![1.0]).unwrap();
        let mut block = LmiBlock::new(a.scaled(-1.0));
        block.add_dense(0, &SymMatrix::identity(n)).unwrap();
        prob.add_block(block).unwrap();
        let sol = solve_sdp(&prob, &SdpOptions::default()).unwrap();
        prop_assert_eq!(sol.status, SdpStatus::Optimal);
        let lmax = sym_eig(&a).unwrap().max();
        prop_assert!((sol.y[0] - lmax).abs() <= 1e-6 * lmax.abs().max(1.0));
    }
}
