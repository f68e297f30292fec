use super::*;
use crate::tensor::kernels::{conv2d, Padding};
use crate::tensor::Tape;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = CounterRng::new(seed, 11);
    Tensor::from_fn(shape, |_| rng.normal())
}

struct Fixture {
    store: ParamStore<f64>,
    block: GenBlock<f64>,
}

fn block(cfg: BlockConfig, seed: u64) -> Fixture {
    let mut rng = CounterRng::new(seed, 0);
    let mut store = ParamStore::new();
    let block = GenBlock::new(&mut store, "b", cfg, 6, false, &mut rng).unwrap();
    Fixture { store, block }
}

fn run(fx: &mut Fixture, x: &Tensor<f64>) -> GatedShortcutTrace<f64> {
    let mut tape = Tape::new();
    let bind = fx.store.bind(&mut tape);
    let f_i = tape.leaf(x.clone());
    let cond = tape.leaf(random(&[x.shape()[0], 6], 99));
    let (_, trace) = fx
        .block
        .forward_traced(&mut Ctx::frozen(&mut tape), &bind, f_i, Some(cond))
        .unwrap();
    trace
}

fn pointwise(store: &ParamStore<f64>, name: &str, x: &Tensor<f64>) -> Tensor<f64> {
    let k = &store.by_name(&format!("{name}.kernel")).unwrap().value;
    let b = &store.by_name(&format!("{name}.bias")).unwrap().value;
    conv2d(x, k, Some(b), Padding::Same).unwrap()
}

fn zero_param(store: &mut ParamStore<f64>, name: &str) {
    let p = store.by_name_mut(name).unwrap();
    p.value = Tensor::zeros(p.value.shape());
}

fn set_bias(store: &mut ParamStore<f64>, name: &str, v: f64) {
    let p = store.by_name_mut(name).unwrap();
    p.value = Tensor::full(p.value.shape(), v);
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

fn square(kind: ShortcutKind) -> BlockConfig {
    BlockConfig {
        resample: Resample::None,
        ..BlockConfig::up(4, 4, kind)
    }
}

#[test]
fn main_path_up_shape() {
    let mut rng = CounterRng::new(1, 0);
    let mut store = ParamStore::<f32>::new();
    let cfg = BlockConfig::up(256, 256, ShortcutKind::Gated);
    let mut main = MainPath::new(&mut store, "m", &cfg, 128, false, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.leaf(random(&[1, 256, 4, 4], 1).cast());
    let z = tape.leaf(random(&[1, 128], 2).cast());
    let f_c = main
        .forward(&mut Ctx::train(&mut tape), &bind, x, Some(z))
        .unwrap();
    assert_eq!(tape.shape(f_c), &[1, 256, 8, 8]);

    let wrong = tape.leaf(Tensor::zeros([1, 128, 4, 4]));
    assert!(main
        .forward(&mut Ctx::train(&mut tape), &bind, wrong, Some(z))
        .is_err());
}

#[test]
fn zeroed_final_conv_gives_zero_features() {
    let mut fx = block(BlockConfig::up(4, 4, ShortcutKind::Gated), 2);
    zero_param(&mut fx.store, "b.main.conv2.kernel");
    let trace = run(&mut fx, &random(&[2, 4, 3, 3], 3));
    assert!(trace.f_c.data().iter().all(|&v| v == 0.0));
    assert_eq!(trace.f_c.shape(), &[2, 4, 6, 6]);
}

#[test]
fn gate_strictly_inside_unit_interval() {
    for kind in [
        ShortcutKind::Gated,
        ShortcutKind::Egs,
        ShortcutKind::SogConv,
    ] {
        let mut fx = block(BlockConfig::up(4, 4, kind), 4);
        let trace = run(&mut fx, &random(&[2, 4, 2, 2], 5).map(|v| 10.0 * v));
        assert!(trace
            .f_g
            .unwrap()
            .data()
            .iter()
            .all(|&g| g > 0.0 && g < 1.0));
    }
}

#[test]
fn gated_saturation_limits() {
    let x = random(&[2, 4, 2, 2], 6);
    for (bias, use_conv) in [(20.0, true), (-20.0, false)] {
        let mut fx = block(BlockConfig::up(4, 4, ShortcutKind::Gated), 7);
        zero_param(&mut fx.store, "b.shortcut.Wg.kernel");
        set_bias(&mut fx.store, "b.shortcut.Wg.bias", bias);
        let trace = run(&mut fx, &x);
        let source = if use_conv {
            &trace.f_c
        } else {
            trace.f_r.as_ref().unwrap()
        };
        let expect = pointwise(&fx.store, "b.shortcut.Wo", source);
        assert_close(&trace.f_o, &expect, 1e-6);
    }
}

#[test]
fn egs_zeroed_gate_is_scaled_identity() {
    let mut fx = block(square(ShortcutKind::Egs), 8);
    zero_param(&mut fx.store, "b.shortcut.Wg.kernel");
    let trace = run(&mut fx, &random(&[2, 4, 3, 3], 9));
    let half_sum = trace
        .f_i
        .zip_map(&trace.f_c, "t", |a, b| 0.5 * (a + b))
        .unwrap();
    assert_close(&trace.f_o, &half_sum, 1e-7);
}

#[test]
fn saturated_gates_select_one_branch() {
    let x = random(&[2, 4, 3, 3], 10);
    let cases = [
        (ShortcutKind::Egs, 50.0, "f_i"),
        (ShortcutKind::Egs, -50.0, "f_c"),
        (ShortcutKind::Sog, 50.0, "sum"),
        (ShortcutKind::Sog, -50.0, "f_c"),
    ];
    for (kind, bias, expect) in cases {
        let mut fx = block(square(kind), 11);
        zero_param(&mut fx.store, "b.shortcut.Wg.kernel");
        set_bias(&mut fx.store, "b.shortcut.Wg.bias", bias);
        let t = run(&mut fx, &x);
        let want = match expect {
            "f_i" => t.f_i.clone(),
            "f_c" => t.f_c.clone(),
            _ => t.f_i.zip_map(&t.f_c, "t", |a, b| a + b).unwrap(),
        };
        assert_close(&t.f_o, &want, 1e-12);
    }
}

#[test]
fn zeroed_gates_degrade_to_closed_forms() {
    let x = random(&[2, 4, 3, 3], 12);
    for kind in ShortcutKind::ALL {
        let mut fx = block(square(kind), 13);
        if kind != ShortcutKind::Identity {
            zero_param(&mut fx.store, "b.shortcut.Wg.kernel");
        }
        let t = run(&mut fx, &x);
        let comb = |f: fn(f64, f64) -> f64, a: &Tensor<f64>, b: &Tensor<f64>| {
            a.zip_map(b, "t", f).unwrap()
        };
        let want = match kind {
            ShortcutKind::Identity => comb(|a, b| a + b, &x, &t.f_c),
            ShortcutKind::Gated => {
                let inner = comb(|c, r| 0.5 * c + 0.5 * r, &t.f_c, t.f_r.as_ref().unwrap());
                pointwise(&fx.store, "b.shortcut.Wo", &inner)
            }
            ShortcutKind::Egs => comb(|i, c| 0.5 * i + 0.5 * c, &t.f_i, &t.f_c),
            ShortcutKind::Sog => comb(|i, c| 0.5 * i + c, &t.f_i, &t.f_c),
            ShortcutKind::EgsConv => pointwise(
                &fx.store,
                "b.shortcut.Wo",
                &comb(|i, c| 0.5 * i + 0.5 * c, &t.f_i, &t.f_c),
            ),
            ShortcutKind::SogConv => pointwise(
                &fx.store,
                "b.shortcut.Wo",
                &comb(|i, c| 0.5 * i + c, &t.f_i, &t.f_c),
            ),
        };
        assert_close(&t.f_o, &want, 1e-12);
    }
}

#[test]
fn identity_skip_with_zeroed_main_path() {
    let mut fx = block(square(ShortcutKind::Identity), 14);
    zero_param(&mut fx.store, "b.main.conv2.kernel");
    let x = random(&[2, 4, 3, 3], 15);
    let t = run(&mut fx, &x);
    assert_close(&t.f_o, &x, 0.0);
}

#[test]
fn identity_projection_shape() {
    let mut rng = CounterRng::new(1, 0);
    let mut store = ParamStore::<f32>::new();
    let cfg = BlockConfig::up(512, 256, ShortcutKind::Identity);
    let mut b = GenBlock::new(&mut store, "b", cfg, 128, false, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.leaf(random(&[1, 512, 8, 8], 1).cast());
    let z = tape.leaf(random(&[1, 128], 2).cast());
    let out = b
        .forward(&mut Ctx::train(&mut tape), &bind, x, Some(z))
        .unwrap();
    assert_eq!(tape.shape(out), &[1, 256, 16, 16]);
}

#[test]
fn channel_reducing_gating_blocks() {
    for kind in ShortcutKind::ALL {
        let mut fx = block(BlockConfig::up(6, 4, kind), 16);
        let t = run(&mut fx, &random(&[2, 6, 2, 2], 17));
        assert_eq!(t.f_o.shape(), &[2, 4, 4, 4], "{kind}");
    }
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = BlockConfig::up(4, 4, ShortcutKind::Gated);
    cfg.c_g = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = BlockConfig::up(4, 4, ShortcutKind::Egs);
    cfg.c_o = 8;
    assert!(cfg.validate().is_err());
    cfg.shortcut = ShortcutKind::EgsConv;
    assert!(cfg.validate().is_ok());
    cfg.resample = Resample::Down;
    assert!(cfg.validate().is_err());
}

#[test]
fn conditional_shortcut_norm_adds_parameters() {
    let mut cfg = BlockConfig::up(4, 4, ShortcutKind::Gated);
    let plain = block(cfg, 1).store.count();
    cfg.shortcut_norm = ShortcutNorm::Conditional;
    let cond = block(cfg, 1).store.count();
    assert_eq!(cond - plain, 2 * (6 * 4 + 4));
}

#[test]
fn disc_block_shapes() {
    let mut rng = CounterRng::new(1, 0);
    let mut store = ParamStore::<f32>::new();
    let mut first = DiscBlock::new(&mut store, "d1", 3, 128, true, false, true, &mut rng).unwrap();
    let mut keep = DiscBlock::new(&mut store, "d2", 128, 128, false, true, true, &mut rng).unwrap();
    assert!(keep.shortcut.is_none());
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.leaf(random(&[1, 3, 32, 32], 3).cast());
    let mut ctx = Ctx::train(&mut tape);
    let h = first.forward(&mut ctx, &bind, x).unwrap();
    assert_eq!(ctx.tape.shape(h), &[1, 128, 16, 16]);
    let h2 = keep.forward(&mut ctx, &bind, h).unwrap();
    assert_eq!(ctx.tape.shape(h2), &[1, 128, 16, 16]);

    let odd = ctx.tape.leaf(Tensor::zeros([1, 3, 5, 5]));
    assert!(matches!(
        first.forward(&mut ctx, &bind, odd),
        Err(Error::OddSpatial { .. })
    ));
}

#[test]
fn shortcut_kind_round_trips_through_str() {
    for k in ShortcutKind::ALL {
        assert_eq!(k.as_str().parse::<ShortcutKind>().unwrap(), k);
    }
    assert!("resnet".parse::<ShortcutKind>().is_err());
}
