use super::*;
use proptest::prelude::*;

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = CounterRng::new(seed, 7);
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn standard_layouts() {
    let g = GeneratorSpec::standard(32, ShortcutKind::Gated).unwrap();
    assert_eq!((g.stem, g.widths.clone()), (256, vec![256; 3]));
    let g = GeneratorSpec::standard(128, ShortcutKind::Gated).unwrap();
    assert_eq!(g.widths, vec![512, 512, 256, 128, 64]);
    let d = DiscriminatorSpec::standard(128).unwrap();
    let layout: Vec<_> = d.blocks.iter().map(|b| (b.width, b.down)).collect();
    assert_eq!(
        layout,
        [
            (64, true),
            (128, true),
            (256, true),
            (512, true),
            (512, true),
            (512, false)
        ]
    );
    assert!(matches!(
        GeneratorSpec::standard(64, ShortcutKind::Gated),
        Err(Error::UnsupportedResolution(64))
    ));
    assert!(DiscriminatorSpec::standard(48).is_err());
    assert!(GeneratorSpec::scaled(12, 4, ShortcutKind::Gated).is_err());
}

#[test]
fn fc_parameter_count() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = CounterRng::new(0, 0);
    Dense::new(
        &mut store,
        "fc",
        128,
        4096,
        true,
        Init::GlorotUniform,
        false,
        &mut rng,
    )
    .unwrap();
    assert_eq!(store.count(), 528_384);
}

#[test]
fn gated_generator_count_matches_hand_tally() {
    let g = Generator::<f32>::new(GeneratorSpec::standard(32, ShortcutKind::Gated).unwrap(), 0)
        .unwrap();
    // FC + 3 × (cBN sources + two 3×3 convs + Wg, Wr, Wo) + final BN + conv
    let fc = 128 * 4096 + 4096;
    let cbn = 4 * (128 * 256 + 256);
    let convs = 2 * (256 * 256 * 9 + 256);
    let gates = 2 * (512 * 256 + 256) + (256 * 256 + 256);
    let tail = 2 * 256 + (3 * 256 * 9 + 3);
    assert_eq!(g.param_count(), fc + 3 * (cbn + convs + gates) + tail);
    assert_eq!(g.param_count(), 5_457_923);

    let id = Generator::<f32>::new(
        GeneratorSpec::standard(32, ShortcutKind::Identity).unwrap(),
        0,
    )
    .unwrap();
    assert!(id.param_count() < g.param_count());
}

#[test]
fn layer_counts_sum_to_total() {
    for kind in ShortcutKind::ALL {
        let g = Generator::<f32>::new(GeneratorSpec::scaled(16, 8, kind).unwrap(), 1).unwrap();
        let layers = g.layer_counts();
        assert_eq!(
            layers.iter().map(|(_, n)| n).sum::<usize>(),
            g.param_count()
        );
        assert!(layers.iter().any(|(n, _)| n == "g.fc"));
    }
}

#[test]
fn generator_32_shape_and_range() {
    let mut g = Generator::<f32>::new(GeneratorSpec::standard(32, ShortcutKind::Gated).unwrap(), 2)
        .unwrap();
    let z = normal(&[2, 128], 1).cast();
    let x = g.generate(&z, None, true).unwrap();
    assert_eq!(x.shape(), &[2, 3, 32, 32]);
    assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn generator_128_shape() {
    let mut g = Generator::<f32>::new(
        GeneratorSpec::standard(128, ShortcutKind::Gated).unwrap(),
        3,
    )
    .unwrap();
    let z = normal(&[2, 128], 2).cast();
    let x = g.generate(&z, None, true).unwrap();
    assert_eq!(x.shape(), &[2, 3, 128, 128]);
}

#[test]
fn discriminator_32_shape() {
    let mut d = Discriminator::<f32>::new(DiscriminatorSpec::standard(32).unwrap(), 4).unwrap();
    let mut tape = Tape::new();
    let bind = d.params.bind(&mut tape);
    let x = tape.leaf(normal(&[4, 3, 32, 32], 3).cast());
    let y = d
        .forward(&mut Ctx::train(&mut tape), &bind, x, None)
        .unwrap();
    assert_eq!(tape.shape(y), &[4, 1]);
    let wrong = tape.leaf(Tensor::zeros([1, 3, 16, 16]));
    assert!(d
        .forward(&mut Ctx::train(&mut tape), &bind, wrong, None)
        .is_err());
}

#[test]
fn projection_adds_inner_product() {
    let mut spec = DiscriminatorSpec::scaled(8, 4).unwrap();
    spec.classes = Some(3);
    let mut d = Discriminator::<f64>::new(spec, 5).unwrap();
    d.warm_up_sn(10);
    let labels = [2, 0];
    let mut tape = Tape::new();
    let bind = d.params.bind(&mut tape);
    let x = tape.leaf(normal(&[2, 3, 8, 8], 4));
    let out = d
        .forward_parts(&mut Ctx::frozen(&mut tape), &bind, x, Some(&labels))
        .unwrap();

    // Recompute φ(x) without the projection and form ⟨e_y, φ⟩ by hand.
    let mut plain = d.clone();
    plain.embed = None;
    let mut tape2 = Tape::new();
    let bind2 = plain.params.bind(&mut tape2);
    let x2 = tape2.leaf(normal(&[2, 3, 8, 8], 4));
    let base = plain
        .forward(&mut Ctx::frozen(&mut tape2), &bind2, x2, None)
        .unwrap();
    assert_eq!(tape.value(out.base), tape2.value(base));

    let table = &d.params.by_name("d.embed.table").unwrap().value;
    let sigma = d.embed.as_ref().unwrap().sn.as_ref().unwrap().sigma;
    let mut tape3 = Tape::new();
    let bind3 = plain.params.bind(&mut tape3);
    let mut ctx = Ctx::frozen(&mut tape3);
    let mut v = ctx.tape.constant(tape2.value(x2).clone());
    for b in &mut plain.blocks {
        v = b.forward(&mut ctx, &bind3, v).unwrap();
    }
    let r = ctx.tape.relu(v);
    let phi = ctx.tape.global_sum_pool(r).unwrap();
    let h = tape3.value(phi).clone();
    let c = h.shape()[1];
    for (row, &y) in labels.iter().enumerate() {
        let dot: f64 = (0..c)
            .map(|j| table.data()[y * c + j] / sigma * h.data()[row * c + j])
            .sum();
        let logit = tape.value(out.logit).data()[row];
        let base = tape.value(out.base).data()[row];
        assert!((logit - base - dot).abs() < 1e-10, "{logit} {base} {dot}");
    }
}

#[test]
fn shortcut_swap_keeps_main_path() {
    let collect = |kind| {
        let g = Generator::<f64>::new(GeneratorSpec::scaled(16, 4, kind).unwrap(), 9).unwrap();
        g.params
            .iter()
            .filter(|p| !p.name.contains(".shortcut."))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect::<Vec<_>>()
    };
    let reference = collect(ShortcutKind::Identity);
    for kind in ShortcutKind::ALL {
        let other = collect(kind);
        assert_eq!(other.len(), reference.len());
        for ((na, a), (nb, b)) in reference.iter().zip(&other) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape(), "{na}");
        }
    }
}

#[test]
fn single_class_with_zero_embedding_matches_unconditional() {
    let base = GeneratorSpec::scaled(8, 4, ShortcutKind::Gated).unwrap();
    let mut g = Generator::<f64>::new(base.clone(), 11).unwrap();
    let mut c = Generator::<f64>::new(
        GeneratorSpec {
            classes: Some(1),
            ..base
        },
        11,
    )
    .unwrap();
    // Give the unconditional cBN sources non-trivial weights, then mirror
    // them into the conditional generator (extra embedding rows stay zero).
    let mut rng = CounterRng::new(5, 5);
    for p in g.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    for p in c.params.iter_mut() {
        if p.name == "g.embed.table" {
            p.value = Tensor::zeros(p.value.shape());
            continue;
        }
        let src = &g.params.by_name(&p.name).unwrap().value;
        if src.shape() == p.value.shape() {
            p.value = src.clone();
        } else {
            let n = src.len();
            p.value.data_mut()[..n].copy_from_slice(src.data());
            p.value.data_mut()[n..].fill(0.0);
        }
    }
    let z = normal(&[3, 128], 12);
    let a = g.generate(&z, None, true).unwrap();
    let b = c.generate(&z, Some(&[0, 0, 0]), true).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(c.generate(&z, None, true).is_err());
    assert!(g.generate(&z, Some(&[0, 0, 0]), true).is_err());
}

#[test]
fn spectral_norm_warm_up_matches_svd() {
    let mut spec = DiscriminatorSpec::scaled(8, 6).unwrap();
    spec.classes = Some(4);
    let mut d = Discriminator::<f64>::new(spec, 13).unwrap();
    d.warm_up_sn(100);
    let n_layers = d
        .blocks
        .iter()
        .map(|b| 2 + b.shortcut.is_some() as usize)
        .sum::<usize>()
        + 2;
    let params = d.params.clone();
    let layers = d.sn_layers();
    assert_eq!(layers.len(), n_layers);
    for layer in layers {
        let w = &params.get(layer.weight).value;
        let (rows, cols) = (layer.state.u.len(), layer.state.v.len());
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, w.data());
        let u = nalgebra::DVector::from_column_slice(&layer.state.u);
        let v = nalgebra::DVector::from_column_slice(&layer.state.v);
        let sigma_hat = (u.transpose() * &m * v)[(0, 0)];
        let top = (m / sigma_hat).singular_values().max();
        assert!((0.99..=1.01).contains(&top), "{}: {top}", layer.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_shape_and_range_over_spec_grid(
        res in prop::sample::select(vec![8usize, 16]),
        width in 2usize..5,
        kind in prop::sample::select(ShortcutKind::ALL.to_vec()),
        classes in prop::option::of(1usize..4),
        sn in any::<bool>(),
        batch in 2usize..4,
    ) {
        let spec = GeneratorSpec { classes, sn, ..GeneratorSpec::scaled(res, width, kind).unwrap() };
        let mut g = Generator::<f64>::new(spec, 3).unwrap();
        let labels: Vec<usize> = (0..batch).map(|i| i % classes.unwrap_or(1)).collect();
        let z = normal(&[batch, 128], 1);
        let x = g.generate(&z, classes.map(|_| &labels[..]), true).unwrap();
        prop_assert_eq!(x.shape(), &[batch, 3, res, res]);
        prop_assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let mut dspec = DiscriminatorSpec::scaled(res, width).unwrap();
        dspec.classes = classes;
        let mut d = Discriminator::<f64>::new(dspec, 4).unwrap();
        let mut tape = Tape::new();
        let bind = d.params.bind(&mut tape);
        let xv = tape.leaf(x);
        let y = d.forward(&mut Ctx::train(&mut tape), &bind, xv, classes.map(|_| &labels[..])).unwrap();
        prop_assert_eq!(tape.shape(y), &[batch, 1]);
    }
}
