use coldsim::compress::*;
use coldsim::stream_rng;
use proptest::prelude::*;
use rand::Rng;

fn specs() -> Vec<CompressorSpec> {
    [
        "identity",
        "binary",
        "C1",
        "C2",
        "C3",
        "C4",
        "unbiased:u=4,p=2",
        "biased:u=2,p=inf,phi=mean_square",
        "biased:u=4,p=2",
        "round:grid=-1:0.1:1",
        "log:min=-4,max=2",
        "topk:l=2",
        "randk:l=2",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .collect()
}

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..12)
}

fn compress(q: &CompressorSpec, x: &[f64], seed: u64) -> CompressedMessage {
    q.compress(x, &mut stream_rng(seed, 0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn same_seed_same_payload(x in vec_strategy(), seed in 0u64..1000) {
        for q in specs() {
            let a = compress(&q, &x, seed);
            let b = compress(&q, &x, seed);
            prop_assert_eq!(a.payload.len(), x.len());
            prop_assert!(a.payload.iter().zip(&b.payload).all(|(u, v)| u.to_bits() == v.to_bits()));
            prop_assert_eq!(a.bits, q.bit_cost(x.len()));
        }
    }

    #[test]
    fn sparsifiers_are_scale_covariant(x in vec_strategy(), c in 0.01f64..100.0, seed in 0u64..1000) {
        for s in ["topk:l=1", "topk:l=3", "randk:l=1", "randk:l=3"] {
            let q: CompressorSpec = s.parse().unwrap();
            let a = compress(&q, &x, seed);
            let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
            let b = compress(&q, &scaled, seed);
            for (u, v) in a.payload.iter().zip(&b.payload) {
                prop_assert!((c * u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rounding_lands_on_a_level(x in vec_strategy()) {
        let q: CompressorSpec = "round:grid=-1:0.1:1".parse().unwrap();
        let levels = grid_levels(-1.0, 0.1, 1.0).unwrap();
        let out = compress(&q, &x, 0);
        for (o, v) in out.payload.iter().zip(&x) {
            prop_assert!(levels.contains(o));
            // nearest level, or the end level when clamped
            let best = levels.iter().map(|l| (l - v).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(((o - v).abs() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsifiers_keep_l_entries(x in prop::collection::vec(0.1f64..5.0, 3..12), seed in 0u64..100) {
        for s in ["topk:l=2", "randk:l=2"] {
            let q: CompressorSpec = s.parse().unwrap();
            let out = compress(&q, &x, seed);
            prop_assert_eq!(out.payload.iter().filter(|v| **v != 0.0).count(), 2);
            for (o, v) in out.payload.iter().zip(&x) {
                prop_assert!(*o == 0.0 || (o - v).abs() < 1e-15 || s.starts_with("randk"));
            }
        }
    }
}

#[test]
fn zero_vector_maps_to_zero() {
    for q in specs() {
        for d in [1, 4, 64] {
            let out = compress(&q, &vec![0.0; d], 3);
            let expect_zero = !matches!(q.kind, CompressorKind::Binary | CompressorKind::NearestRounding { .. });
            if expect_zero {
                assert!(out.payload.iter().all(|v| *v == 0.0), "{q}");
            }
            assert_eq!(out.bits, q.bit_cost(d));
        }
    }
}

#[test]
fn unbiased_quantizers_have_zero_mean_error() {
    let mut rng = stream_rng(404, 0);
    for s in ["C1", "unbiased:u=4,p=2"] {
        let q: CompressorSpec = s.parse().unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let draws = 100_000;
            let mut sum = [0.0; 5];
            let mut sum_sq = [0.0; 5];
            let mut out = [0.0; 5];
            for _ in 0..draws {
                q.compress_into(&x, &mut out, &mut rng);
                for j in 0..5 {
                    let e = out[j] - x[j];
                    sum[j] += e;
                    sum_sq[j] += e * e;
                }
            }
            for j in 0..5 {
                let mean = sum[j] / draws as f64;
                let se = ((sum_sq[j] / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt();
                assert!(mean.abs() <= 4.0 * se + 1e-15, "{s}: coordinate {j} bias {mean} (se {se})");
            }
        }
    }
}

#[test]
fn monte_carlo_respects_declared_contracts() {
    let mut rng = stream_rng(405, 0);
    for q in specs() {
        for d in [1usize, 4, 64] {
            let c = q.contract(d);
            if let Some(delta) = c.contracted {
                let e = estimate_delta_contraction(&q, d, 10_000, &mut rng).unwrap();
                assert!(e.delta_hat <= delta + 3.0 * e.std_error + 1e-12, "{q} d={d}: {} > {delta}", e.delta_hat);
            }
            if let Some((delta, p)) = c.absolute {
                let e = estimate_delta_absolute(&q, d, p, 10_000, &mut rng).unwrap();
                assert!(e.delta_hat <= delta + 1e-12, "{q} d={d}: {} > {delta}", e.delta_hat);
            }
        }
    }
}

#[test]
fn declared_contracts_are_tight_for_deterministic_maps() {
    // binary at p = inf: worst case x_i = 0 or ±1 gives error 1/2
    let (delta, p) = CompressorSpec::binary().contract(4).absolute.unwrap();
    assert_eq!((delta, p), (0.5, f64::INFINITY));
    let mut rng = stream_rng(406, 0);
    let e = estimate_delta_absolute(&CompressorSpec::binary(), 4, p, 10_000, &mut rng).unwrap();
    assert!(e.delta_hat > 0.49);
    // fine grid: half the spacing
    let grid = CompressorSpec::uniform_grid(-1.0, 0.01, 1.0).unwrap();
    let (delta, _) = grid.contract(2).absolute.unwrap();
    assert!((delta - 0.005).abs() < 1e-12);
}
