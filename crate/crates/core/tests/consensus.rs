use coldsim::compress::CompressorSpec;
use coldsim::consensus::{ccs_run, choco_gossip_run, exact_gossip_run, GossipOptions, ScalingSchedule};
use coldsim::linalg::{column_mean, consensus_error, max_row_norm, Mat};
use coldsim::stream_rng;
use coldsim::theory::{ccs_initial_scale, ccs_schedule, certify_values, CertMode};
use coldsim::topology::{build_graph, metropolis_weights, GraphKind, MixingMatrix};
use coldsim::Error;
use rand::Rng;

fn mixing(kind: GraphKind, n: usize, seed: u64) -> MixingMatrix {
    metropolis_weights(&build_graph(kind, n, seed).unwrap()).unwrap()
}

fn random_x(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = stream_rng(7, seed);
    Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn gossip_ring4_rate_matches_spectrum() {
    let m = mixing(GraphKind::Ring, 4, 0);
    let t = exact_gossip_run(&m, &random_x(4, 3, 1), 60);
    let r = certify_values(&t.column("consensus_error"), 1.0 / 3.0, None, 5, 0.0, CertMode::FittedRate).unwrap();
    assert!((r.fitted.unwrap() - 1.0 / 3.0).abs() < 0.01, "{}", r.detail);
}

#[test]
fn choco_identity_unit_step_is_gossip() {
    for seed in 0..5 {
        let m = mixing(GraphKind::ErdosRenyi, 8, seed);
        let x0 = random_x(8, 4, seed);
        // γ = 1 is outside the open theorem range at δ = 0 for some graphs
        let opts = GossipOptions {
            force: true,
            ..Default::default()
        };
        for iters in [1usize, 7, 50] {
            let c = choco_gossip_run(&m, &x0, &CompressorSpec::identity(), 1.0, iters, &opts).unwrap();
            let g = exact_gossip_run(&m, &x0, iters);
            assert!((c.final_x - &g.final_x).abs().max() < 1e-12);
        }
    }
}

#[test]
fn compressed_runs_preserve_the_mean() {
    let m = mixing(GraphKind::ErdosRenyi, 10, 3);
    let x0 = random_x(10, 5, 3);
    let mean0 = column_mean(&x0);
    let scale = x0.norm();
    let opts = GossipOptions {
        seed: 4,
        ..Default::default()
    };
    let t = choco_gossip_run(&m, &x0, &CompressorSpec::c1(), 0.05, 100, &opts);
    // C1 at d=5 declares δ < 1, so the run goes through
    let t = t.unwrap();
    let mean = column_mean(&t.final_x);
    for (a, b) in mean.iter().zip(&mean0) {
        assert!((a - b).abs() < 1e-9 * scale);
    }
    let sch = ScalingSchedule::new(10.0, 0.99).unwrap();
    let t = ccs_run(&m, &x0, &CompressorSpec::binary(), 0.01, &sch, 100, &opts).unwrap();
    let mean = column_mean(&t.final_x);
    for (a, b) in mean.iter().zip(&mean0) {
        assert!((a - b).abs() < 1e-9 * scale);
    }
}

#[test]
fn bits_grow_by_cost_times_degree() {
    let m = mixing(GraphKind::ErdosRenyi, 6, 2);
    let x0 = random_x(6, 4, 0);
    let t = choco_gossip_run(&m, &x0, &CompressorSpec::c1(), 0.05, 10, &GossipOptions::default()).unwrap();
    let per = CompressorSpec::c1().bit_cost(4) as f64 * m.mean_degree();
    for w in t.records.windows(2) {
        assert!((w[1].bits_cumulative - w[0].bits_cumulative - per).abs() < 1e-9);
    }
}

fn ccs_envelope(kind: GraphKind, n: usize, d: usize, iters: usize, seed: u64) {
    let m = mixing(kind, n, seed);
    let x0 = random_x(n, d, seed);
    let q = CompressorSpec::binary();
    let (delta, p) = q.require_absolute(d).unwrap();
    let cert = ccs_schedule(delta, p, n, d, &m, None);
    assert!(cert.valid, "{:?}", cert.reasons);
    let ce0 = consensus_error(&x0);
    let c_s = ccs_initial_scale(&cert, ce0, max_row_norm(&x0, p));
    let sch = ScalingSchedule::new(c_s, cert.rate).unwrap();
    let t = ccs_run(&m, &x0, &q, cert.gamma, &sch, iters, &GossipOptions::default()).unwrap();
    let r = certify_values(&t.column("consensus_error"), cert.rate, Some(ce0), 0, 1e-12, CertMode::PerStepEnvelope).unwrap();
    assert!(r.passed, "consensus envelope: {}", r.detail);
    let r = certify_values(&t.column("innovation_max"), cert.rate, Some(c_s), 0, 1e-12, CertMode::PerStepEnvelope).unwrap();
    assert!(r.passed, "innovation envelope: {}", r.detail);
}

#[test]
fn ccs_binary_envelope_ring4() {
    ccs_envelope(GraphKind::Ring, 4, 2, 500, 0);
}

#[test]
fn ccs_binary_envelope_other_graphs() {
    ccs_envelope(GraphKind::Complete, 4, 2, 300, 1);
    ccs_envelope(GraphKind::ErdosRenyi, 6, 3, 300, 2);
}

#[test]
fn ccs_scale_below_bound_is_caught() {
    // spread the start far beyond c_s·ς so the first scaled innovation leaves the unit ball
    let m = mixing(GraphKind::Ring, 4, 0);
    let q = CompressorSpec::binary();
    let cert = ccs_schedule(0.5, f64::INFINITY, 4, 2, &m, None);
    let x0 = Mat::from_row_slice(4, 2, &[50.0, -50.0, -50.0, 50.0, 0.0, 0.0, 1.0, 1.0]);
    let c_s = 0.1 * consensus_error(&x0) / cert.get("varsigma").unwrap();
    let sch = ScalingSchedule::new(c_s, cert.rate).unwrap();
    let r = ccs_run(&m, &x0, &q, cert.gamma, &sch, 50, &GossipOptions::default());
    assert!(matches!(r, Err(Error::ScalingViolation { .. })));
}
