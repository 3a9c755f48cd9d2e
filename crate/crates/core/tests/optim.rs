use coldsim::compress::CompressorSpec;
use coldsim::consensus::ScalingSchedule;
use coldsim::linalg::{broadcast_row, column_mean, Mat};
use coldsim::objective::{Dataset, LogisticScale, Objective, Partition};
use coldsim::optim::*;
use coldsim::stream_rng;
use coldsim::theory::{certify_values, cold_rate_unbiased, CertMode};
use coldsim::topology::{build_graph, metropolis_weights, GraphKind, MixingMatrix};
use coldsim::Error;
use rand::Rng;

fn mixing(kind: GraphKind, n: usize, seed: u64) -> MixingMatrix {
    metropolis_weights(&build_graph(kind, n, seed).unwrap()).unwrap()
}

fn random_x(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = stream_rng(11, seed);
    Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
}

fn theorem_cfg(obj: &Objective, m: &MixingMatrix, q: &CompressorSpec) -> (ColdConfig, f64) {
    let delta = q.require_contracted(obj.d()).unwrap();
    let cert = cold_rate_unbiased(obj.mu(), obj.l(), delta, m, None, None);
    assert!(cert.valid, "{:?}", cert.reasons);
    (ColdConfig::new(cert.gamma, cert.tau.unwrap()).unwrap(), delta)
}

/// Projects a dual variable onto range(I-W) (zero column sums).
fn project(mut psi: Mat) -> Mat {
    let mean = column_mean(&psi);
    for i in 0..psi.nrows() {
        for (j, v) in mean.iter().enumerate() {
            psi[(i, j)] -= v;
        }
    }
    psi
}

#[test]
fn cold_identity_half_is_nids() {
    let mut rng = stream_rng(1, 0);
    for inst in 0..10u64 {
        let n = rng.gen_range(2..=10);
        let d = rng.gen_range(1..=5);
        let m = mixing(GraphKind::ErdosRenyi, n, inst);
        let obj = Objective::synthetic_quadratic(n, d, 1.0, 4.0, inst).unwrap();
        let x0 = random_x(n, d, inst);
        let gamma = 1.0 / obj.l();
        let opts = RunOptions {
            keep_iterates: true,
            ..Default::default()
        };
        let a = nids_run(&m, &obj, gamma, &x0, 200, &opts).unwrap();
        let cfg = ColdConfig::new(gamma, 0.5 / gamma).unwrap();
        let b = cold_run(&m, &obj, &CompressorSpec::identity(), &cfg, &x0, 200, &opts).unwrap();
        assert_eq!(a.iterates.len(), 200);
        for (xa, xb) in a.iterates.iter().zip(&b.iterates) {
            assert!((xa - xb).abs().max() < 1e-10);
        }
        assert!((&a.final_x - &b.final_x).abs().max() < 1e-10);
    }
}

#[test]
fn nids_single_node_is_gradient_descent() {
    let m = MixingMatrix::from_matrix(Mat::from_element(1, 1, 1.0)).unwrap();
    let obj = Objective::synthetic_quadratic(1, 3, 1.0, 3.0, 2).unwrap();
    let x0 = random_x(1, 3, 0);
    let gamma = 0.2;
    let t = nids_run(&m, &obj, gamma, &x0, 30, &RunOptions { keep_iterates: true, ..Default::default() }).unwrap();
    let mut x: Vec<f64> = x0.row(0).iter().copied().collect();
    for (k, xk) in t.iterates.iter().enumerate() {
        for j in 0..3 {
            assert!((xk[(0, j)] - x[j]).abs() < 1e-12, "k={k}");
        }
        let g = obj.local_grad(0, &x);
        for j in 0..3 {
            x[j] -= gamma * g[j];
        }
    }
}

#[test]
fn nids_stays_at_a_common_optimum() {
    // identical local costs: every ∇f_i(x*) vanishes, so X¹ = X⁰
    let m = mixing(GraphKind::ErdosRenyi, 6, 1);
    let a = Mat::from_row_slice(3, 3, &[3.0, 1.0, 0.0, 1.0, 2.0, 0.5, 0.0, 0.5, 1.0]);
    let b = coldsim::linalg::Vector::from_vec(vec![1.0, -2.0, 0.5]);
    let obj = Objective::quadratic(vec![a; 6], vec![b; 6]).unwrap();
    let xs = obj.optimum().unwrap().to_vec();
    let t = nids_run(&m, &obj, 0.1, &broadcast_row(6, &xs), 100, &RunOptions::default()).unwrap();
    for r in &t.records {
        assert!(r.max_node_error.unwrap() < 1e-10);
    }
}

#[test]
fn nids_returns_to_a_heterogeneous_optimum() {
    // the local step moves X⁰ = 1x*ᵀ off x* when local gradients differ
    let m = mixing(GraphKind::ErdosRenyi, 6, 1);
    let obj = Objective::synthetic_quadratic(6, 3, 1.0, 5.0, 1).unwrap();
    let xs = obj.optimum().unwrap().to_vec();
    let gamma = 1.0 / obj.l();
    let t = nids_run(&m, &obj, gamma, &broadcast_row(6, &xs), 400, &RunOptions::default()).unwrap();
    assert!(t.records[1].max_node_error.unwrap() > 1e-3);
    assert!(t.records.last().unwrap().max_node_error.unwrap() < 1e-10);
}

/// Roots of `z² - a z + b`, largest modulus.
fn max_root(a: f64, b: f64) -> f64 {
    let disc = a * a - 4.0 * b;
    if disc >= 0.0 {
        ((a.abs() + disc.sqrt()) / 2.0).max(((a.abs() - disc.sqrt()) / 2.0).abs())
    } else {
        b.sqrt()
    }
}

#[test]
fn nids_quadratic_consensus_follows_linear_recursion() {
    // ∇F(X) = 2(X - X⁰), so X^{k+1} = W̃((2-2γ)X^k - (1-2γ)X^{k-1})
    let m = mixing(GraphKind::Ring, 6, 0);
    let x0 = random_x(6, 2, 3);
    let obj = Objective::quadratic_consensus(&x0);
    let gamma = 1.0 / (2.0 * obj.l());
    let t = nids_run(&m, &obj, gamma, &x0, 120, &RunOptions { keep_iterates: true, ..Default::default() }).unwrap();
    let wl = m.lazy();
    let mut prev = x0.clone();
    let mut cur = &x0 - gamma * obj.stacked_grad(&x0);
    for xk in t.iterates.iter().skip(1) {
        assert!((xk - &cur).abs().max() < 1e-10);
        let next = &wl * ((2.0 - 2.0 * gamma) * &cur - (1.0 - 2.0 * gamma) * &prev);
        prev = std::mem::replace(&mut cur, next);
    }
    // slowest mode of the recursion on the disagreement subspace
    let bound = m.eigen().values.iter().skip(1).map(|&l| {
        let lt = 0.5 * (1.0 + l);
        max_root(lt * (2.0 - 2.0 * gamma), lt * (1.0 - 2.0 * gamma))
    });
    let bound = bound.fold(0.0, f64::max);
    let fit = certify_values(&t.column("max_node_error"), bound, None, 20, 0.0, CertMode::FittedRate).unwrap();
    // the slowest mode is a complex pair, so the log-linear fit oscillates around its modulus
    assert!(fit.fitted.unwrap() <= bound + 0.01, "{} vs {bound}", fit.fitted.unwrap());
}

#[test]
fn cold_node_local_form_keeps_fixed_point() {
    let m = mixing(GraphKind::ErdosRenyi, 7, 2);
    let obj = Objective::synthetic_quadratic(7, 3, 1.0, 5.0, 2).unwrap();
    let xs = broadcast_row(7, obj.optimum().unwrap());
    let q = CompressorSpec::c1();
    let (cfg, _) = theorem_cfg(&obj, &m, &q);
    let mut st = AlgoState::new(&xs);
    st.psi = project(-obj.stacked_grad(&xs));
    st.y_hat = xs.clone();
    st.k = 1;
    let mut run = ColdRunner::from_state(&m, &obj, &q, cfg, st, 0).unwrap();
    for _ in 0..100 {
        let y = run.y();
        run.step(&y);
        let (r1, r2, r3) = fixed_point_residual(run.state(), &m, &obj);
        assert!(r1 < 1e-10 && r2 < 1e-10 && r3 < 1e-10, "{r1} {r2} {r3}");
    }
}

#[test]
fn residuals_vanish_after_convergence() {
    let m = mixing(GraphKind::ErdosRenyi, 6, 4);
    let obj = Objective::synthetic_quadratic(6, 2, 1.0, 4.0, 4).unwrap();
    let q = CompressorSpec::c1();
    let (cfg, _) = theorem_cfg(&obj, &m, &q);
    let mut run = ColdRunner::new(&m, &obj, &q, cfg, &random_x(6, 2, 4), 3).unwrap();
    // the gap only sees the node average, so run a fixed horizon rather than
    // stopping at the first small gap
    for _ in 0..4000 {
        let y = run.y();
        run.step(&y);
    }
    let gap = obj.optimality_gap(&run.state().x);
    assert!(gap < 1e-8, "gap {gap}");
    let (r1, r2, r3) = fixed_point_residual(run.state(), &m, &obj);
    assert!(r1 < 1e-6 && r2 < 1e-6 && r3 < 1e-6, "{r1} {r2} {r3}");
}

#[test]
fn residuals_detect_non_optimal_states() {
    let m = mixing(GraphKind::ErdosRenyi, 5, 0);
    let obj = Objective::synthetic_quadratic(5, 2, 1.0, 4.0, 0).unwrap();
    let mut xs = obj.optimum().unwrap().to_vec();
    xs[0] += 1.0;
    let mut st = AlgoState::new(&broadcast_row(5, &xs));
    st.y_hat = st.x.clone();
    let (r1, r2, r3) = fixed_point_residual(&st, &m, &obj);
    assert!(r1 < 1e-12 && r2 == 0.0 && r3 > 0.1);
    let mut st = AlgoState::new(&random_x(5, 2, 1));
    st.psi = random_x(5, 2, 2);
    st.y_hat = random_x(5, 2, 3);
    let (r1, r2, r3) = fixed_point_residual(&st, &m, &obj);
    assert!(r1 > 0.0 && r2 > 0.0 && r3 > 0.0);
}

#[test]
fn lyapunov_vanishes_at_the_fixed_point() {
    let m = mixing(GraphKind::ErdosRenyi, 6, 5);
    let obj = Objective::synthetic_quadratic(6, 3, 1.0, 5.0, 5).unwrap();
    let xs_row = obj.optimum().unwrap().to_vec();
    let xs = broadcast_row(6, &xs_row);
    let psi = -obj.stacked_grad(&xs);
    let y = xs.clone();
    let inputs = LyapunovInputs {
        x: &xs,
        psi: &psi,
        psi_prev: &psi,
        y_hat: &xs,
        y_prev: &y,
        y: &y,
    };
    let cfg = ColdConfig::exploration(&obj, &m);
    let cfg = ColdConfig::new(cfg.gamma, 0.9 * cfg.tau).unwrap();
    for (v, delta) in [
        (LyapunovVariant::Unbiased, 0.3),
        (LyapunovVariant::Biased, 0.01),
        (LyapunovVariant::Scaled, 0.005),
    ] {
        let e = compute_lyapunov(&inputs, &m, &obj, &cfg, v, delta, 2.0, &xs_row).unwrap();
        assert!(e.total.abs() < 1e-12, "{v:?}: {}", e.total);
    }
}

/// `Σ_j v_jᵀ M v_j` over the columns of `a`.
fn dense_weighted(a: &Mat, m: &Mat) -> f64 {
    (0..a.ncols())
        .map(|j| {
            let v = a.column(j).into_owned();
            (v.transpose() * m * &v)[(0, 0)]
        })
        .sum()
}

#[test]
fn unbiased_lyapunov_matches_dense_oracle() {
    let n = 6;
    let m = mixing(GraphKind::ErdosRenyi, n, 6);
    let obj = Objective::synthetic_quadratic(n, 3, 1.0, 5.0, 6).unwrap();
    let xs_row = obj.optimum().unwrap().to_vec();
    let (gamma, tau, delta) = (0.08, 2.0, 0.25);
    let cfg = ColdConfig::new(gamma, tau).unwrap();
    let x = random_x(n, 3, 1);
    let psi = project(random_x(n, 3, 2));
    let psi_prev = project(random_x(n, 3, 3));
    let y_hat = random_x(n, 3, 4);
    let y_prev = random_x(n, 3, 5);
    let e = compute_lyapunov(
        &LyapunovInputs {
            x: &x,
            psi: &psi,
            psi_prev: &psi_prev,
            y_hat: &y_hat,
            y_prev: &y_prev,
            y: &y_prev,
        },
        &m,
        &obj,
        &cfg,
        LyapunovVariant::Unbiased,
        delta,
        2.0,
        &xs_row,
    )
    .unwrap()
    .total;

    // SVD pseudo-inverse, independent of the library's eigen-solver
    let ident = Mat::identity(n, n);
    let lap = &ident - m.w();
    let pinv = lap.clone().pseudo_inverse(1e-10).unwrap();
    let theta = pinv / tau - gamma * &ident;
    let xs = broadcast_row(n, &xs_row);
    let psi_star = -obj.stacked_grad(&xs);
    let dx = &x - &xs;
    let expected = dense_weighted(&dx, &ident) / gamma
        + dense_weighted(&(&psi - &psi_star), &(&theta + gamma * &ident))
        + dense_weighted(&(&psi - &psi_prev), &theta)
        + 2.0 * (1.0 + delta) * tau / (1.0 - delta) * dense_weighted(&(&y_hat - &y_prev), &lap);
    assert!((e - expected).abs() < 1e-10 * expected.abs().max(1.0), "{e} vs {expected}");
}

#[test]
fn lyapunov_requires_nonnegative_theta() {
    let m = mixing(GraphKind::Ring, 5, 0);
    let obj = Objective::synthetic_quadratic(5, 2, 1.0, 5.0, 0).unwrap();
    let gamma = 0.1;
    let cfg = ColdConfig::new(gamma, 1.0 / (gamma * (1.0 - m.lambda_n))).unwrap();
    let r = Lyapunov::new(LyapunovVariant::Unbiased, &m, &obj, &cfg, 0.1, 2.0, obj.optimum().unwrap());
    assert!(matches!(r, Err(Error::InvalidParameter(_))));
}

#[test]
fn dual_variable_sums_to_zero() {
    let m = mixing(GraphKind::ErdosRenyi, 8, 7);
    let obj = Objective::synthetic_quadratic(8, 4, 1.0, 5.0, 7).unwrap();
    let x0 = random_x(8, 4, 7);
    let cfg = ColdConfig::exploration(&obj, &m);
    let sch = ScalingSchedule::new(5.0, 0.98).unwrap();
    for (q, dyna) in [
        (CompressorSpec::c1(), false),
        (CompressorSpec::c3(), false),
        (CompressorSpec::c4(), true),
        (CompressorSpec::c2(), true),
    ] {
        let mut run = ColdRunner::new(&m, &obj, &q, if dyna { cfg.with_schedule(sch) } else { cfg }, &x0, 1).unwrap();
        for _ in 0..200 {
            let y = run.y();
            run.step(&y);
            let psi = &run.state().psi;
            let s: f64 = column_mean(psi).iter().map(|v| v.abs() * 8.0).sum();
            assert!(s <= 1e-9 * psi.norm().max(1.0), "{q}: {s}");
        }
    }
}

#[test]
fn dyna_cold_identity_ignores_the_schedule() {
    let m = mixing(GraphKind::ErdosRenyi, 6, 8);
    let obj = Objective::synthetic_quadratic(6, 3, 1.0, 5.0, 8).unwrap();
    let x0 = random_x(6, 3, 8);
    let cfg = ColdConfig::exploration(&obj, &m);
    let q = CompressorSpec::identity();
    let a = cold_run(&m, &obj, &q, &cfg, &x0, 150, &RunOptions::default()).unwrap();
    let b = dyna_cold_run(&m, &obj, &q, &cfg.with_schedule(ScalingSchedule::new(0.3, 0.9).unwrap()), &x0, 150, &RunOptions::default()).unwrap();
    assert!((&a.final_x - &b.final_x).abs().max() < 1e-10);
}

#[test]
fn dyna_cold_topk_is_scale_covariant() {
    let m = mixing(GraphKind::ErdosRenyi, 6, 9);
    let obj = Objective::synthetic_quadratic(6, 5, 1.0, 5.0, 9).unwrap();
    let x0 = random_x(6, 5, 9);
    let cfg = ColdConfig::exploration(&obj, &m);
    let q: CompressorSpec = "topk:l=2,p=2".parse().unwrap();
    let opts = RunOptions { seed: 4, force: true, ..Default::default() };
    let a = dyna_cold_run(&m, &obj, &q, &cfg.with_schedule(ScalingSchedule::new(1.0, 0.95).unwrap()), &x0, 200, &opts).unwrap();
    let b = dyna_cold_run(&m, &obj, &q, &cfg.with_schedule(ScalingSchedule::new(10.0, 0.95).unwrap()), &x0, 200, &opts).unwrap();
    let scale = a.final_x.abs().max().max(1.0);
    assert!((&a.final_x - &b.final_x).abs().max() < 1e-10 * scale);
    for (ra, rb) in a.records.iter().zip(&b.records) {
        let (ga, gb) = (ra.optimality_gap.unwrap(), rb.optimality_gap.unwrap());
        assert!((ga - gb).abs() <= 1e-10, "k={}: {ga} vs {gb}", ra.iter);
    }
}

#[test]
fn dyna_cold_binary_converges_on_logistic() {
    let (n, d) = (10, 5);
    let data = Dataset::synthetic_two_class(400, d, 1);
    let obj = Objective::logistic(&data, n, Partition::SortedLabel, 0.1, LogisticScale::NodeAverage).unwrap();
    let m = mixing(GraphKind::ErdosRenyi, n, 1);
    let x0 = Mat::zeros(n, d);
    let gamma = 1.0 / (2.0 * obj.l());
    let cfg = ColdConfig::new(gamma, 0.25 / (gamma * (1.0 - m.lambda_n))).unwrap();
    let sch = default_decay_schedule(&obj, &x0, gamma, f64::INFINITY).unwrap();
    let t = dyna_cold_run(&m, &obj, &CompressorSpec::c4(), &cfg.with_schedule(sch), &x0, 1500, &RunOptions::default()).unwrap();
    let gaps = t.column("optimality_gap");
    assert!(gaps.last().unwrap().unwrap() < 1e-6);
    let fit = certify_values(&gaps, 1.0, None, 100, 0.0, CertMode::FittedRate).unwrap();
    assert!(fit.fitted.unwrap() < 0.995, "{}", fit.detail);
}

#[test]
fn cold_requires_contracted_compressor() {
    let m = mixing(GraphKind::Ring, 4, 0);
    let obj = Objective::synthetic_quadratic(4, 2, 1.0, 2.0, 0).unwrap();
    let cfg = ColdConfig::exploration(&obj, &m);
    let x0 = random_x(4, 2, 0);
    let r = cold_run(&m, &obj, &CompressorSpec::c4(), &cfg, &x0, 10, &RunOptions::default());
    assert!(matches!(r, Err(Error::ContractMismatch(_))));
    let forced = RunOptions { force: true, ..Default::default() };
    assert!(cold_run(&m, &obj, &CompressorSpec::c4(), &cfg, &x0, 10, &forced).is_ok());
    assert!(dyna_cold_run(&m, &obj, &CompressorSpec::c4(), &cfg, &x0, 10, &forced).is_err());
}

#[test]
fn divergence_is_reported() {
    let m = mixing(GraphKind::Ring, 4, 0);
    let obj = Objective::synthetic_quadratic(4, 2, 1.0, 2.0, 0).unwrap();
    let cfg = ColdConfig::new(5.0, 1.0).unwrap();
    let r = cold_run(&m, &obj, &CompressorSpec::identity(), &cfg, &random_x(4, 2, 0), 500, &RunOptions::default());
    assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
}

#[test]
fn bits_count_one_round_per_step() {
    let m = mixing(GraphKind::ErdosRenyi, 6, 3);
    let obj = Objective::synthetic_quadratic(6, 4, 1.0, 2.0, 3).unwrap();
    let cfg = ColdConfig::exploration(&obj, &m);
    let q = CompressorSpec::c1();
    let t = cold_run(&m, &obj, &q, &cfg, &random_x(6, 4, 3), 20, &RunOptions::default()).unwrap();
    let per = q.bit_cost(4) as f64 * m.mean_degree();
    assert_eq!(t.records[0].bits_cumulative, 0.0);
    assert_eq!(t.records[1].bits_cumulative, 0.0);
    for r in &t.records[1..] {
        assert!((r.bits_cumulative - per * (r.iter - 1) as f64).abs() < 1e-9);
    }
    let t = nids_run(&m, &obj, 0.1, &random_x(6, 4, 3), 5, &RunOptions::default()).unwrap();
    assert!((t.records[4].bits_cumulative - 3.0 * 32.0 * 4.0 * m.mean_degree()).abs() < 1e-9);
}

#[test]
fn checkpoint_resume_continues_the_run() {
    let m = mixing(GraphKind::ErdosRenyi, 5, 2);
    let obj = Objective::synthetic_quadratic(5, 3, 1.0, 4.0, 2).unwrap();
    let q = CompressorSpec::identity();
    let cfg = ColdConfig::exploration(&obj, &m);
    let x0 = random_x(5, 3, 2);
    let mut full = ColdRunner::new(&m, &obj, &q, cfg, &x0, 0).unwrap();
    for _ in 0..10 {
        let y = full.y();
        full.step(&y);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    let mut f = std::fs::File::create(&path).unwrap();
    full.state().write_checkpoint(Algorithm::Cold, &mut f).unwrap();
    drop(f);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 8 * 4 + 8 * 4 * 15);
    let (algo, st) = AlgoState::read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(algo, Algorithm::Cold);
    let mut resumed = ColdRunner::from_state(&m, &obj, &q, cfg, st, 0).unwrap();
    for _ in 0..10 {
        let y = full.y();
        full.step(&y);
        let y = resumed.y();
        resumed.step(&y);
    }
    assert_eq!(resumed.state().k, 21);
    assert!((&full.state().x - &resumed.state().x).abs().max() < 1e-15);
}

#[test]
fn unbiased_contraction_small_instance() {
    let (n, d) = (6, 5);
    let m = mixing(GraphKind::ErdosRenyi, n, 3);
    let obj = Objective::synthetic_quadratic(n, d, 1.0, 4.0, 3).unwrap();
    let q = CompressorSpec::c1();
    let (cfg, delta) = theorem_cfg(&obj, &m, &q);
    let sigma = cold_rate_unbiased(obj.mu(), obj.l(), delta, &m, None, None).rate;
    let x0 = random_x(n, d, 3);
    let iters = 200;
    let mut avg = vec![0.0; iters];
    for seed in 0..10 {
        let opts = RunOptions {
            seed,
            lyapunov: Some((LyapunovVariant::Unbiased, delta)),
            ..Default::default()
        };
        let t = cold_run(&m, &obj, &q, &cfg, &x0, iters, &opts).unwrap();
        for (a, r) in avg.iter_mut().zip(&t.records) {
            *a += r.lyapunov.unwrap_or(0.0);
        }
    }
    for k in 12..iters {
        assert!(avg[k] / avg[k - 1] <= sigma + 0.02, "k={k}: {}", avg[k] / avg[k - 1]);
    }
}
