use dbfem::params::ParamStore;
use dbfem::{flops_estimate, param_count, Dbfem, DbfemNet, Graph, InputShape, ModelConfig, Tensor, Variant};
use proptest::prelude::*;

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}

/// Runs the traced forward pass and returns the graph with its trace.
fn run(
    cfg: &ModelConfig,
    n: usize,
    global: [usize; 2],
    regions: [usize; 2],
) -> (Graph<f64>, dbfem::model::ForwardTrace) {
    let net = DbfemNet::new(cfg).unwrap();
    let params = ParamStore::<f64>::init(net.layout(), 3);
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let c = cfg.in_channels;
    let gv = g.constant(input(&[n, c, global[0], global[1]], 1));
    let rv = g.constant(input(&[n, 5 * c, regions[0], regions[1]], 2));
    let trace = net.forward_trace(&mut g, &pv, Some(gv), Some(rv)).unwrap();
    (g, trace)
}

#[test]
fn desk_branch_shapes() {
    let desk = ModelConfig::desk();
    let (g, t) = run(&desk.with_variant(Variant::Gfem), 2, [64, 64], [32, 32]);
    assert_eq!(g.shape(t.global_feature.unwrap()), [2, 16, 4, 4]);
    assert!(t.local_feature.is_none());

    let (g, t) = run(&desk.with_variant(Variant::Lfem), 2, [64, 64], [32, 32]);
    assert_eq!(g.shape(t.local_feature.unwrap()), [2, 16, 4, 4]);
    assert!(t.global_feature.is_none());

    let (g, t) = run(&desk, 3, [40, 32], [16, 16]);
    assert_eq!(g.shape(t.fused), [3, 32, 2, 2]);
    let a = t.attention.unwrap();
    for v in [a.z0, a.z1, a.z2, a.z3] {
        assert_eq!(g.shape(v), [3, 32, 4, 4]);
    }
    assert_eq!(g.shape(t.logits), [3, 5]);
}

#[test]
fn missing_branch_input_is_an_error() {
    let cfg = ModelConfig::desk();
    let m = Dbfem::<f32>::new(&cfg, 0).unwrap();
    let x = Tensor::zeros(&[1, 1, 40, 32]);
    assert!(m.logits(Some(&x), None).is_err());
    let r = Tensor::zeros(&[1, 5, 16, 16]);
    assert!(m.logits(None, Some(&r)).is_err());
    let gfem = Dbfem::<f32>::new(&cfg.with_variant(Variant::Gfem), 0).unwrap();
    assert_eq!(gfem.logits(Some(&x), None).unwrap().shape(), [1, 5]);
}

#[test]
fn param_count_matches_layout() {
    for cfg in [ModelConfig::tiny(), ModelConfig::desk(), ModelConfig::paper()] {
        for v in Variant::ALL {
            let c = cfg.with_variant(v);
            let net = DbfemNet::new(&c).unwrap();
            let by_hand: usize = net
                .layout()
                .specs()
                .iter()
                .map(|s| s.shape.iter().product::<usize>())
                .sum();
            assert_eq!(param_count(&c).unwrap(), by_hand as u64, "{v}");
        }
    }
}

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_is_fixed_and_macs_match_the_estimate(
        v in variant(),
        n in 1usize..4,
        gh in 24usize..72,
        gw in 24usize..72,
        rh in 12usize..40,
        rw in 12usize..40,
    ) {
        let cfg = ModelConfig::desk().with_variant(v);
        let (g, t) = run(&cfg, n, [gh, gw], [rh, rw]);
        for f in [t.global_feature, t.local_feature].into_iter().flatten() {
            prop_assert_eq!(g.shape(f), [n, 16, 4, 4]);
        }
        prop_assert_eq!(g.shape(t.logits), [n, 5]);
        let shape = InputShape { global: [1, gh, gw], regions: [5, rh, rw] };
        prop_assert_eq!(g.macs(), n as u64 * flops_estimate(&cfg, &shape).unwrap());
    }
}
