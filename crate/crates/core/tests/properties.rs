//! Property tests over randomly generated graphs, volumes and masks.

mod common;

use cobra_core::engine::{benchmark, plan_memory, Executor};
use cobra_core::graph::{deserialize_bytes, interpret, optimize, serialize_bytes, Op, Pass};
use cobra_core::metrics::{dsc, nsd, squared_edt};
use cobra_core::nn::{Activation, CounterRng, Tensor};
use cobra_core::postprocess::{argmax_channels, remap_labels};
use cobra_core::preprocess::{split_background, WindowSpec};
use cobra_core::train::{
    augment_rotate_inplane, augment_scale, augment_shift, softmax_channels, weighted_soft_dice_loss, Augment,
    ClassMaps, LossSpec,
};
use cobra_core::volume_io::{Geometry, Volume};
use proptest::prelude::*;

use common::*;

fn max_out_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| max_diff_t(x, y)).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn executor_matches_interpreter(seed in any::<u64>()) {
        let m = random_model(seed);
        let x = model_input(&m, seed ^ 0x55);
        let want = interpret(&m, std::slice::from_ref(&x)).unwrap();
        let got = Executor::new(&m, 2).unwrap().run_checked(std::slice::from_ref(&x)).unwrap();
        prop_assert!(max_out_diff(&want, &got) <= 1e-5);
    }

    #[test]
    fn executor_is_bit_identical_across_thread_counts(seed in any::<u64>()) {
        let m = random_model(seed);
        let x = model_input(&m, seed);
        let a = Executor::new(&m, 1).unwrap().run(std::slice::from_ref(&x)).unwrap();
        let b = Executor::new(&m, 3).unwrap().run(std::slice::from_ref(&x)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn optimized_graphs_are_smaller_or_equal_and_equivalent(seed in any::<u64>()) {
        let m = random_model(seed);
        let (opt, report) = optimize(&m, &Pass::ALL).unwrap();
        prop_assert!(report.nodes_after <= report.nodes_before);
        prop_assert_eq!(opt.graph.outputs.len(), m.graph.outputs.len());
        // nothing left to do at the fixpoint; an identity survives only to
        // expose a graph input directly as an output
        for n in &opt.graph.nodes {
            if let Op::Identity = n.op {
                let is_input = opt.graph.inputs.iter().any(|p| p.name == n.inputs[0]);
                prop_assert!(is_input && opt.graph.outputs.contains(&n.output), "identity {} kept", n.name);
            }
            if let Op::Add = n.op {
                let live = n.inputs.iter().any(|t| {
                    opt.graph.producer(t).is_none_or(|i| !matches!(opt.graph.nodes[i].op, Op::Constant { .. }))
                });
                prop_assert!(live, "add of two constants survived folding");
            }
        }
        let x = model_input(&m, 3);
        let a = interpret(&m, std::slice::from_ref(&x)).unwrap();
        let b = Executor::new(&opt, 1).unwrap().run(std::slice::from_ref(&x)).unwrap();
        prop_assert!(max_out_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn memory_plan_never_shares_live_buffers(seed in any::<u64>()) {
        let m = random_model(seed);
        let plan = plan_memory(&m).unwrap();
        prop_assert!(plan.verify().is_ok());
        for (i, a) in plan.slots.iter().enumerate() {
            for b in &plan.slots[i + 1..] {
                let overlap = a.first <= b.last && b.first <= a.last;
                prop_assert!(!(overlap && a.buffer == b.buffer), "{} and {} share buffer {}", a.name, b.name, a.buffer);
            }
            prop_assert!(plan.buffers[a.buffer] >= a.elements);
        }
    }

    #[test]
    fn serialization_round_trips_exactly(seed in any::<u64>()) {
        let m = random_model(seed);
        let bytes = serialize_bytes(&m).unwrap();
        let back = deserialize_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(serialize_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn fused_convs_carry_their_relu(seed in any::<u64>()) {
        let m = random_model(seed);
        let fused = cobra_core::graph::fuse_nodes(&m).unwrap();
        let before = count_kind(&m, |op| matches!(op, Op::Relu));
        let after = count_kind(&fused, |op| matches!(op, Op::Relu));
        let gained = count_kind(&fused, |op| matches!(op, Op::Conv { activation: Activation::Relu, .. }));
        prop_assert_eq!(before - after, gained);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dsc_and_nsd_are_symmetric_and_bounded(seed in any::<u64>(), tol in 0.3f64..3.0) {
        let mut rng = CounterRng::new(seed);
        let shape = [1 + rng.below(10), 1 + rng.below(10), 1 + rng.below(10)];
        let spacing = [0.5 + rng.uniform(), 0.5 + rng.uniform(), 0.5 + 2.0 * rng.uniform()];
        let p = random_labels(&mut rng, shape, spacing, 3);
        let g = random_labels(&mut rng, shape, spacing, 3);
        for c in 0..3u8 {
            let (a, b) = (dsc(&p, &g, c).unwrap(), dsc(&g, &p, c).unwrap());
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
            let (a, b) = (nsd(&p, &g, c, tol).unwrap(), nsd(&g, &p, c, tol).unwrap());
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(dsc(&p, &p, c).unwrap(), 1.0);
            prop_assert_eq!(nsd(&p, &p, c, tol).unwrap(), 1.0);
        }
    }

    #[test]
    fn nsd_grows_with_tolerance(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let shape = [2 + rng.below(8), 2 + rng.below(8), 2 + rng.below(8)];
        let p = random_labels(&mut rng, shape, [1.0, 1.5, 0.7], 2);
        let g = random_labels(&mut rng, shape, [1.0, 1.5, 0.7], 2);
        let mut last = 0.0;
        for tol in [0.5, 1.0, 2.0, 4.0, 100.0] {
            let v = nsd(&p, &g, 1, tol).unwrap();
            prop_assert!(v >= last);
            last = v;
        }
        let both = !p.mask(1).iter().any(|&b| b) == !g.mask(1).iter().any(|&b| b);
        prop_assert_eq!(last == 1.0, both);
    }

    #[test]
    fn edt_matches_brute_force(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let shape = [1 + rng.below(7), 1 + rng.below(7), 1 + rng.below(7)];
        let spacing = [0.3 + 2.0 * rng.uniform(), 0.3 + 2.0 * rng.uniform(), 0.3 + 2.0 * rng.uniform()];
        let n = shape.iter().product();
        let sites: Vec<bool> = (0..n).map(|_| rng.below(6) == 0).collect();
        let d2 = squared_edt(&sites, shape, spacing);
        let coord = |i: usize| [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
        for i in 0..n {
            let p = coord(i);
            let want = (0..n).filter(|&j| sites[j]).map(|j| {
                let q = coord(j);
                (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2)).sum::<f64>()
            }).fold(f64::INFINITY, f64::min);
            prop_assert!(want == d2[i] || (want - d2[i]).abs() <= 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn remap_inverts_split(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let shape = [1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6)];
        let lv = random_labels(&mut rng, shape, [1.0; 3], 5);
        let body: Vec<bool> = (0..lv.data().len()).map(|_| rng.below(2) == 1).collect();
        let split = split_background(&lv, &body).unwrap();
        prop_assert!(split.data().iter().zip(&body).all(|(&l, &b)| l != 0 || !b));
        prop_assert_eq!(remap_labels(&split).unwrap(), lv);
    }

    #[test]
    fn window_is_monotone_and_bounded(a in -3000f32..3000.0, b in -3000f32..3000.0) {
        for w in [WindowSpec::SOFT_TISSUE, WindowSpec::PANCREAS] {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(w.apply(lo) <= w.apply(hi));
            prop_assert!((0.0..=1.0).contains(&w.apply(a)));
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let k = 2 + rng.below(5);
        let n = 1 + rng.below(20);
        // values from a tiny set so ties are common
        let data: Vec<f32> = (0..k * n).map(|_| rng.below(3) as f32).collect();
        let lv = argmax_channels(&Tensor::new(vec![k, 1, 1, n], data.clone()).unwrap()).unwrap();
        for v in 0..n {
            let col: Vec<f32> = (0..k).map(|c| data[c * n + v]).collect();
            let best = col.iter().cloned().fold(f32::MIN, f32::max);
            let first = col.iter().position(|&x| x == best).unwrap();
            prop_assert_eq!(lv.data()[v] as usize, first);
        }
    }

    #[test]
    fn soft_dice_loss_is_in_unit_interval(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let k = 2 + rng.below(5);
        let shape = [1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)];
        let n: usize = shape.iter().product();
        let logits = ClassMaps::new(k, shape, (0..k * n).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let p = softmax_channels(&logits).unwrap();
        for v in 0..n {
            let s: f64 = (0..k).map(|c| p.channel(c)[v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let g = Geometry::with_shape(shape).unwrap();
        let lv = cobra_core::volume_io::LabelVolume::new(g, (0..n).map(|_| rng.below(k) as u8).collect(), k).unwrap();
        let oh = ClassMaps::one_hot(&lv, k).unwrap();
        let l = weighted_soft_dice_loss(&p, &oh, &LossSpec::uniform(k)).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn shift_round_trip_keeps_the_interior(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let shape = [2 + rng.below(6), 2 + rng.below(6), 2 + rng.below(6)];
        let g = Geometry::with_shape(shape).unwrap();
        let v = Volume::from_fn(g, |_, _, _| rng.uniform_range(-500.0, 500.0)).unwrap();
        let s = [0, 1, 2].map(|a| rng.below(shape[a]) as i64 - (shape[a] / 2) as i64);
        let back = augment_shift(&augment_shift(&v, s).unwrap(), s.map(|d| -d)).unwrap();
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let p = [z as i64, y as i64, x as i64];
                    let inside = (0..3).all(|a| p[a] + s[a] >= 0 && p[a] + s[a] < shape[a] as i64);
                    let want = if inside { v.get(z, y, x) } else { cobra_core::train::AIR_HU };
                    prop_assert_eq!(back.get(z, y, x), want);
                }
            }
        }
    }
}

#[test]
fn neutral_augmentations_are_identity() {
    let g = Geometry::new([3, 9, 8], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
    let v = Volume::from_fn(g, |z, y, x| (z * 100 + y * 10 + x) as f32).unwrap();
    assert_eq!(augment_rotate_inplane(&v, 0.0).unwrap().data(), v.data());
    assert_eq!(augment_scale(&v, 1.0).unwrap().data(), v.data());
    assert_eq!(augment_shift(&v, [0, 0, 0]).unwrap().data(), v.data());
    assert!(Augment::Scale(0.0).apply(&v).is_err());
}

#[test]
fn quarter_turn_moves_x_onto_y() {
    // odd in-plane extents so the centre is a voxel
    let g = Geometry::with_shape([1, 7, 7]).unwrap();
    let v = Volume::from_fn(g, |_, y, x| if y == 3 && x == 5 { 100.0 } else { 0.0 }).unwrap();
    let r = augment_rotate_inplane(&v, 90.0).unwrap();
    assert!((r.get(0, 5, 3) - 100.0).abs() < 1e-3, "{}", r.get(0, 5, 3));
}

#[test]
fn random_models_exercise_every_pass() {
    let (mut folded, mut eliminated, mut fused) = (false, false, false);
    for seed in 0..50 {
        let m = random_model(seed);
        folded |= cobra_core::graph::fold_constants(&m).unwrap() != m;
        eliminated |= cobra_core::graph::eliminate_redundant(&m).unwrap() != m;
        fused |= cobra_core::graph::fuse_nodes(&m).unwrap() != m;
    }
    assert!(folded && eliminated && fused);
}

#[test]
fn benchmark_report_serializes() {
    let m = random_model(11);
    let r = benchmark(&m, 3, 1, None).unwrap();
    assert_eq!(r.network.samples.len(), 2);
    assert!(r.network.min <= r.network.median && r.network.median <= r.network.max);
    assert_eq!(r.node_times.len(), m.graph.nodes.len());
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["threads", "network", "node_times", "peak_memory_bytes", "end_to_end"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

mod model_properties {
    use super::*;
    use cobra_core::graph::{read_weight_file, write_weight_file, GraphBuilder};
    use cobra_core::model::{
        build_model, count_params, factorize_conv, stored_params, wrap_bottleneck, ArchConfig, Bottleneck,
    };
    use cobra_core::nn::ConvSpec;

    fn small_config(rng: &mut CounterRng) -> ArchConfig {
        let levels = 2 + rng.below(2);
        let base = [4usize, 8][rng.below(2)];
        let widths: Vec<usize> = (0..levels).map(|l| base << l).collect();
        let unit = 2 << (levels - 1);
        ArchConfig {
            levels,
            widths,
            wide_levels: rng.below(levels + 1),
            bottleneck_factor_wide: 4,
            factorize: rng.below(4) != 0,
            ..ArchConfig::reference()
        }
        .with_input_shape([unit * (1 + rng.below(2)), unit * (1 + rng.below(2)), unit * (1 + rng.below(3))])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn factorization_preserves_shapes(k in 2usize..8, ci in 1usize..9, co in 1usize..9,
                                          sz in 1usize..3, sy in 1usize..3, sx in 1usize..3,
                                          d in 1usize..20, h in 1usize..20, w in 1usize..20) {
            let spec = ConvSpec::new(ci, co, [k; 3]).with_stride([sz, sy, sx]);
            let chain = factorize_conv(&spec).unwrap();
            let full = spec.output_extent([d, h, w]);
            let mut e = Ok([d, h, w]);
            for s in &chain {
                e = e.and_then(|v| s.output_extent(v));
            }
            match full {
                Ok(f) => prop_assert_eq!(e.unwrap(), f),
                Err(_) => prop_assert!(e.is_err()),
            }
            prop_assert_eq!(chain[0].in_channels, ci);
            prop_assert!(chain.iter().all(|s| s.out_channels == co));
        }

        #[test]
        fn bottleneck_preserves_shapes(c in 1usize..6, f in 1usize..5, cout in 1usize..9, n in 2usize..7) {
            let width = c * f;
            let mut b = GraphBuilder::new();
            let x = b.input("x", &[width, n, n, n]);
            let bn = Bottleneck::new(width, f).with_io(width, cout);
            let mut seen = 0;
            let y = wrap_bottleneck(&mut b, &x, &bn, "blk", |b, r, inner| {
                seen = inner;
                Ok(b.conv(r, ConvSpec::new(inner, inner, [3, 3, 3]), "body"))
            }).unwrap();
            prop_assert_eq!(seen, c);
            b.output(&y);
            let shapes = b.finish().infer_shapes().unwrap();
            prop_assert_eq!(&shapes[&y], &vec![cout, n, n, n]);
        }

        #[test]
        fn parameter_count_matches_stored_weights(seed in any::<u64>()) {
            let mut rng = CounterRng::new(seed);
            let cfg = small_config(&mut rng);
            let m = build_model(&cfg, seed).unwrap();
            let n = count_params(&m.graph);
            prop_assert_eq!(n, stored_params(&m.weights));
            // element count derived from the serialized byte length
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("w.cbr");
            write_weight_file(&m.weights, &p).unwrap();
            let back = read_weight_file(&p).unwrap();
            let bytes: usize = back.iter().map(|(_, t)| t.data().len() * 4).sum();
            prop_assert_eq!(bytes / 4, n);
        }

        #[test]
        fn random_networks_give_finite_outputs(seed in any::<u64>()) {
            let mut rng = CounterRng::new(seed);
            let cfg = small_config(&mut rng);
            let m = build_model(&cfg, seed).unwrap();
            let x = cobra_core::engine::random_input(&m, seed).unwrap();
            let y = cobra_core::engine::execute(&m, &x, 1).unwrap();
            let [d, h, w] = cfg.input_shape;
            prop_assert_eq!(y.dims(), &[6, d, h, w]);
            prop_assert!(y.all_finite());
        }
    }

    #[test]
    fn factorization_never_adds_parameters_at_equal_width() {
        for k in 2..8 {
            for c in 2..40 {
                let spec = ConvSpec::new(c, c, [k; 3]);
                let f: usize = factorize_conv(&spec).unwrap().iter().map(ConvSpec::param_count).sum();
                assert!(f <= spec.param_count(), "k={k} C={c}: {f} > {}", spec.param_count());
            }
        }
    }

    /// With intermediate widths equal to Cout the weight count is
    /// k(Cin Cout + 2 Cout^2) against k^3 Cin Cout, so factorization saves
    /// weights exactly when 1 + 2 Cout / Cin <= k^2; widening convolutions
    /// with small kernels are the exception.
    #[test]
    fn factorization_saving_condition() {
        for k in 2..8usize {
            for ci in 1..16usize {
                for co in 1..16usize {
                    let spec = ConvSpec::new(ci, co, [k; 3]).with_bias(false);
                    let f: usize = factorize_conv(&spec).unwrap().iter().map(ConvSpec::param_count).sum();
                    assert_eq!(f <= spec.param_count(), ci + 2 * co <= k * k * ci, "k={k} ci={ci} co={co}");
                }
            }
        }
        let widening = ConvSpec::new(2, 3, [2; 3]);
        let f: usize = factorize_conv(&widening).unwrap().iter().map(ConvSpec::param_count).sum();
        assert_eq!((f, widening.param_count()), (57, 51));
    }
}
