use proptest::prelude::*;

use prompt_gating::interference::{decompose_head, decompose_two, measure_mi, HeadInstance};
use prompt_gating::linalg::Qr;
use prompt_gating::plugins::{
    build_input, combine_plugins, forward_with_plugins, write_plugin, Family, KeyOwner, Plugin, PluginCombo,
};
use prompt_gating::rng::Rng;
use prompt_gating::taskgen::{
    compose, evaluate, gen_multi_aspect, gen_single_aspect, Aspect, AspectValue, LengthRange,
};
use prompt_gating::tensor::{grad_check, EntrySelection, Graph, Tensor, Var};
use prompt_gating::transformer::{
    build_embeddings, decoder_forward, encode, BaseModel, Injection, ModelConfig, PluginRowPolicy, SegmentedInput, BOS,
};
use prompt_gating::Result;

const OPS: usize = 20;

/// `sum(op(inputs) ⊙ weights)` for op number `op`, on inputs shaped for it.
fn op_case(op: usize, seed: u64) -> (Vec<Tensor>, impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut rng = Rng::new(seed);
    let (m, n, k) = (rng.range_inclusive(1, 4), rng.range_inclusive(1, 4), rng.range_inclusive(1, 4));
    let mut r = |rows, cols| Tensor::randn(rows, cols, 1.0, &mut rng);
    let inputs = match op {
        0 => vec![r(m, k), r(k, n)],
        1 => vec![r(m, k), r(n, k)],
        2..=4 => vec![r(m, n), r(m, n)],
        5 => vec![r(m, n), r(1, n)],
        11 => vec![r(m, n + 1), r(1, n + 1), r(1, n + 1)],
        12 => vec![r(m, 5)],
        13 => vec![r(6, n)],
        16 | 17 => vec![r(m, n), r(k, n), r(m, k)],
        _ => vec![r(m, n)],
    };
    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let out = match op {
            0 => g.matmul(v[0], v[1])?,
            1 => g.matmul_bt(v[0], v[1])?,
            2 => g.add(v[0], v[1])?,
            3 => g.sub(v[0], v[1])?,
            4 => g.mul(v[0], v[1])?,
            5 => g.add_row(v[0], v[1])?,
            6 => g.scale(v[0], -1.7)?,
            7 => g.sigmoid(v[0])?,
            8 => g.gelu(v[0])?,
            9 => g.softmax_rows(v[0])?,
            10 => {
                let (rows, cols) = g.shape(v[0]);
                let sq = if rows <= cols { g.slice_cols(v[0], 0, rows)? } else { g.slice_rows(v[0], 0, cols)? };
                g.causal_softmax_rows(sq)?
            }
            11 => g.layer_norm(v[0], v[1], v[2], 1e-5)?,
            12 => {
                let targets: Vec<usize> = (0..g.shape(v[0]).0).map(|i| (i * 3 + 1) % 5).collect();
                return g.cross_entropy(v[0], &targets);
            }
            13 => g.gather_rows(v[0], &[5, 0, 2, 2])?,
            14 => {
                let rows = g.shape(v[0]).0;
                g.slice_rows(v[0], rows / 2, rows - rows / 2)?
            }
            15 => {
                let cols = g.shape(v[0]).1;
                g.slice_cols(v[0], cols / 2, cols - cols / 2)?
            }
            16 => g.concat_rows(&[v[0], v[1]])?,
            17 => {
                let t = g.matmul_bt(v[2], v[2])?;
                let t = g.slice_cols(t, 0, 1)?;
                g.concat_cols(&[v[0], t])?
            }
            18 => return g.sum(v[0]),
            _ => return g.mean(v[0]),
        };
        let (rows, cols) = g.shape(out);
        let mut wr = Rng::new(seed ^ 0x5eed);
        let w = g.constant(Tensor::randn(rows, cols, 1.0, &mut wr));
        let weighted = g.mul(out, w)?;
        g.sum(weighted)
    };
    (inputs, f)
}

fn model() -> &'static BaseModel {
    use std::sync::OnceLock;
    static MODEL: OnceLock<BaseModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut m = BaseModel::init(ModelConfig::default(), 11).unwrap();
        let mut rng = Rng::new(5);
        m.params.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v += 0.1 * rng.normal();
            }
        });
        m.freeze();
        m
    })
}

fn noisy_plugin(aspect: Aspect, family: Family, seed: u64, scale: f64) -> Plugin {
    let mut p = Plugin::init(aspect, family, &model().config, seed);
    let mut rng = Rng::new(seed.wrapping_add(99));
    for t in &mut p.tensors {
        for v in t.data_mut() {
            *v += scale * rng.normal();
        }
    }
    p
}

fn family_strategy() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Prompt), Just(Family::Prefix), Just(Family::Gated)]
}

fn source_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(10usize..40, 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_op_gradient_matches_finite_differences(op in 0..OPS, seed in any::<u64>()) {
        let (inputs, f) = op_case(op, seed);
        let report = grad_check(&f, &inputs, 1e-5, 1e-4, EntrySelection::All).unwrap();
        prop_assert!(report.passed, "op {op}: rel err {:e}", report.max_rel_error);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one_and_sigmoid_is_open(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(rows, cols, 10.0, &mut rng));
        let s = g.softmax_rows(x).unwrap();
        for r in 0..rows {
            let total: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
        let sig = g.sigmoid(x).unwrap();
        prop_assert!(g.value(sig).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn second_backward_doubles_gradients(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let a = g.param(Tensor::randn(3, 4, 1.0, &mut rng));
        let b = g.param(Tensor::randn(4, 2, 1.0, &mut rng));
        let y = g.matmul(a, b).unwrap();
        let y = g.gelu(y).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(a).unwrap().clone();
        g.backward(loss).unwrap();
        let twice = g.grad(a).unwrap();
        for (x, y) in once.data().iter().zip(twice.data()) {
            prop_assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn forward_and_gradients_are_bit_reproducible(x in source_strategy(), family in family_strategy()) {
        let run = || {
            let combo = combine_plugins(&[noisy_plugin(Aspect::Shift, family, 1, 0.1)]).unwrap();
            let f = forward_with_plugins(model(), &combo, &x, &[AspectValue::label("+2")]).unwrap();
            f.output.data().to_vec()
        };
        prop_assert_eq!(run(), run());
        let (inputs, f) = op_case(11, x.len() as u64);
        let a = prompt_gating::tensor::analytic_gradients(&f, &inputs).unwrap();
        let b = prompt_gating::tensor::analytic_gradients(&f, &inputs).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn attention_rows_sum_to_one_with_plugins(x in source_strategy(), family in family_strategy(), seed in 0u64..50) {
        let combo = combine_plugins(&[
            noisy_plugin(Aspect::Shift, family, seed, 0.5),
            noisy_plugin(Aspect::Mark, family, seed + 1, 0.5),
        ]).unwrap();
        let f = forward_with_plugins(model(), &combo, &x, &[AspectValue::label("+1"), AspectValue::label("m3")]).unwrap();
        for layer in &f.trace.attention {
            for w in layer {
                for r in 0..w.rows() {
                    let total: f64 = w.row(r).iter().sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn moving_a_segment_keeps_its_positions(x in source_strategy(), a in prop::collection::vec(3usize..60, 1..4), b in prop::collection::vec(3usize..60, 1..4)) {
        let config = &model().config;
        let mut first = SegmentedInput::source(&x);
        first.push(&a, 1);
        first.push(&b, 2);
        let mut second = SegmentedInput::source(&x);
        second.push(&b, 2);
        second.push(&a, 1);
        let mut g = Graph::new();
        let params = model().params.bind(&mut g, false);
        let e1 = build_embeddings(&mut g, &params, config, &first).unwrap();
        let e2 = build_embeddings(&mut g, &params, config, &second).unwrap();
        let (r1, r2) = (first.segment_range(1), second.segment_range(2));
        prop_assert_eq!(&first.positions()[r1.clone()], &second.positions()[r2.clone()]);
        for (i, j) in r1.zip(r2) {
            prop_assert_eq!(g.value(e1).row(i), g.value(e2).row(j));
        }
    }

    #[test]
    fn decoder_is_causal(x in source_strategy(), prev in prop::collection::vec(3usize..64, 1..8), t in 0usize..8, tok in 3usize..64) {
        let config = &model().config;
        let prev: Vec<usize> = std::iter::once(BOS).chain(prev).collect();
        let t = t % prev.len();
        let mut changed = prev.clone();
        changed[t] = tok;
        let mut g = Graph::new();
        let params = model().params.bind(&mut g, false);
        let enc = encode(&mut g, &params, config, &SegmentedInput::source(&x), &Injection::none(), PluginRowPolicy::Standard).unwrap();
        let l1 = decoder_forward(&mut g, &params, config, &prev, enc.output).unwrap();
        let l2 = decoder_forward(&mut g, &params, config, &changed, enc.output).unwrap();
        for r in 0..t {
            prop_assert_eq!(g.value(l1).row(r), g.value(l2).row(r));
        }
    }

    #[test]
    fn combining_never_mutates_and_keeps_bytes(family in family_strategy(), seed in 0u64..100) {
        let a = noisy_plugin(Aspect::Order, family, seed, 0.3);
        let b = noisy_plugin(Aspect::Keyword, family, seed + 7, 0.3);
        let bytes = |p: &Plugin| {
            let mut buf = Vec::new();
            let names: Vec<String> = p.family.layout(&model().config).into_iter().map(|(n, _)| n).collect();
            write_plugin(&mut buf, p, &names).unwrap();
            buf
        };
        let (ba, bb) = (bytes(&a), bytes(&b));
        let combo = combine_plugins(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(&combo.plugins()[0], &a);
        prop_assert_eq!(bytes(&combo.plugins()[0]), ba);
        prop_assert_eq!(bytes(&combo.plugins()[1]), bb);
    }

    #[test]
    fn applied_gates_lie_strictly_inside_unit_interval(x in source_strategy(), seed in 0u64..100, scale in 0.0f64..30.0) {
        let mut p = noisy_plugin(Aspect::Mark, Family::Gated, seed, 0.0);
        let mut rng = Rng::new(seed);
        for j in 0..model().config.enc_layers {
            for v in p.gate_layer_mut(j).unwrap().1.data_mut() {
                *v = (2.0 * rng.uniform() - 1.0) * scale;
            }
        }
        for j in 0..model().config.enc_layers {
            let gate = p.gate_layer(j).unwrap().1;
            prop_assert!(gate.data().iter().map(|g| 1.0 / (1.0 + (-g).exp())).all(|s| s > 0.0 && s < 1.0));
        }
        let combo = combine_plugins(&[p]).unwrap();
        let f = forward_with_plugins(model(), &combo, &x, &[AspectValue::label("m1")]).unwrap();
        prop_assert!(f.output.is_finite());
    }

    #[test]
    fn swapping_gated_plugins_permutes_plugin_rows(x in source_strategy(), seed in 0u64..100) {
        let a = noisy_plugin(Aspect::Shift, Family::Gated, seed, 0.5);
        let b = noisy_plugin(Aspect::Mark, Family::Gated, seed + 3, 0.5);
        let va = AspectValue::label("+1");
        let vb = AspectValue::label("m2");
        let ab = forward_with_plugins(model(), &combine_plugins(&[a.clone(), b.clone()]).unwrap(), &x, &[va.clone(), vb.clone()]).unwrap();
        let ba = forward_with_plugins(model(), &combine_plugins(&[b, a]).unwrap(), &x, &[vb, va]).unwrap();
        let p = model().config.prompt_len;
        let text = ab.layout.text_rows;
        let xs = ab.layout.source.clone();
        for (ha, hb) in ab.trace.hidden.iter().zip(&ba.trace.hidden) {
            let mut x_change: f64 = 0.0;
            for r in xs.clone() {
                x_change += ha.row(r).iter().zip(hb.row(r)).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            }
            let mut perm: f64 = 0.0;
            for i in 0..p {
                perm += ha.row(text + i).iter().zip(ha.row(text + p + i)).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            }
            prop_assert!(x_change.sqrt() < perm.sqrt());
        }
    }

    #[test]
    fn head_decompositions_reconstruct(x in source_strategy(), family in family_strategy(), seed in 0u64..100, layer in 0usize..4, head in 0usize..4) {
        let combo = combine_plugins(&[
            noisy_plugin(Aspect::Shift, family, seed, 0.5),
            noisy_plugin(Aspect::Order, family, seed + 1, 0.5),
        ]).unwrap();
        let f = forward_with_plugins(model(), &combo, &x, &[AspectValue::label("+2"), AspectValue::label("rev")]).unwrap();
        let q = f.layout.source.start + seed as usize % x.len();
        let inst = HeadInstance::from_forward(&f, layer, head, q).unwrap();
        let one = decompose_head(&inst).unwrap();
        let two = decompose_two(&inst).unwrap();
        prop_assert!(one.residual < 1e-10 && two.residual < 1e-10);
        prop_assert!((one.s + one.t - 1.0).abs() <= 1e-12);
        prop_assert!(two.mass_error() <= 1e-12);
        prop_assert!(f.layout.key_owners().iter().any(|o| *o == KeyOwner::Plugin(1)));
    }

    #[test]
    fn mi_is_nonnegative_and_zero_on_itself(family in family_strategy(), seed in 0u64..100) {
        let sep = combine_plugins(&[noisy_plugin(Aspect::Shift, family, seed, 0.2), noisy_plugin(Aspect::Mark, family, seed + 1, 0.2)]).unwrap();
        let joint = combine_plugins(&[noisy_plugin(Aspect::Shift, family, seed + 2, 0.2), noisy_plugin(Aspect::Mark, family, seed + 3, 0.2)]).unwrap();
        let eval = gen_multi_aspect(&[Aspect::Shift, Aspect::Mark], 3, LengthRange::default(), seed).unwrap();
        let same = measure_mi(model(), &sep, &sep, &eval).unwrap();
        prop_assert!(same.per_layer.iter().all(|&m| m == 0.0));
        let diff = measure_mi(model(), &sep, &joint, &eval).unwrap();
        prop_assert!(diff.per_layer.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn qr_is_orthonormal_and_reconstructs(seed in any::<u64>(), m in 1usize..12, extra in 0usize..4) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(m + extra, m, 1.0, &mut rng);
        let qr = Qr::of(&a).unwrap();
        prop_assert!(qr.orthogonality_error() < 1e-10);
        prop_assert!(qr.reconstruction_error(&a) < 1e-10);
    }

    #[test]
    fn verifiers_accept_their_transforms(aspect in prop_oneof![Just(Aspect::Shift), Just(Aspect::Mark), Just(Aspect::Order), Just(Aspect::Keyword)], seed in any::<u64>()) {
        for ex in gen_single_aspect(aspect, 50, LengthRange::default(), seed).unwrap() {
            let v = ex.value(aspect).unwrap();
            prop_assert_eq!(aspect.verify(&ex.x, &ex.y, v).unwrap(), 1.0);
        }
    }

    #[test]
    fn aspects_commute(seed in any::<u64>(), i in 0usize..4, j in 0usize..4) {
        prop_assume!(i != j);
        let (a, b) = (Aspect::ALL[i], Aspect::ALL[j]);
        for ex in gen_multi_aspect(&[a, b], 30, LengthRange::default(), seed).unwrap() {
            let (va, vb) = (ex.value(a).unwrap().clone(), ex.value(b).unwrap().clone());
            let ab = compose(&ex.x, &[(a, va.clone()), (b, vb.clone())]).unwrap();
            let ba = compose(&ex.x, &[(b, vb), (a, va)]).unwrap();
            prop_assert_eq!(&ab, &ba);
            prop_assert_eq!(&ab, &ex.y);
        }
    }

    #[test]
    fn metrics_are_bounded_means(seed in any::<u64>(), noise in prop::collection::vec(0usize..64, 0..6)) {
        let ex = gen_multi_aspect(&Aspect::ALL, 20, LengthRange::default(), seed).unwrap();
        let outs: Vec<Vec<usize>> = ex.iter().enumerate().map(|(i, e)| if i % 2 == 0 { e.y.clone() } else { noise.clone() }).collect();
        let m = evaluate(&outs, &ex, &Aspect::ALL).unwrap();
        prop_assert!(m.per_aspect.values().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = m.per_aspect.values().sum::<f64>() / 4.0;
        prop_assert!((m.average - mean).abs() < 1e-15);
    }
}

#[test]
fn empty_combo_leaves_base_untouched() {
    let x = [12, 19, 33];
    let combo = PluginCombo::empty();
    let f = forward_with_plugins(model(), &combo, &x, &[]).unwrap();
    let mut g = Graph::new();
    let params = model().params.bind(&mut g, false);
    let enc = encode(&mut g, &params, &model().config, &build_input(&x, &[]).unwrap(), &Injection::none(), PluginRowPolicy::Standard).unwrap();
    assert_eq!(f.output.data(), g.value(enc.output).data());
}
