use super::*;
use crate::blocks::ShortcutKind;
use crate::data::{synth_dataset, Dataset, SynthKind};
use crate::model::{DiscriminatorSpec, GeneratorSpec};

fn tiny(preset: Preset, data: &Dataset, seed: u64) -> Trainer<f32> {
    let mut cfg = TrainConfig::preset(preset).scaled_to(40);
    cfg.batch_d = 4;
    cfg.batch_g = 4;
    let mut g = GeneratorSpec::scaled(8, 4, ShortcutKind::Gated).unwrap();
    g.z_dim = 8;
    Trainer::new(cfg, g, DiscriminatorSpec::scaled(8, 4).unwrap(), data, seed).unwrap()
}

fn blobs() -> Dataset {
    synth_dataset(SynthKind::Blobs, 8, 3, 30, 0).unwrap()
}

#[test]
fn cifar_schedule_is_five_to_one() {
    let data = blobs();
    let mut t = tiny(Preset::Cifar, &data, 1);
    for n in 1..=4u64 {
        let r = t.step(&data).unwrap();
        assert_eq!(r.iter, n);
        assert_eq!(t.counters.d_updates, 5 * n);
        assert_eq!(t.counters.real_batches, 5 * n);
        assert_eq!(t.counters.g_updates, n);
        assert_eq!(t.opt_d.t, 5 * n);
        assert_eq!(t.opt_g.t, n);
        assert!(r.loss_d.is_finite() && r.loss_g.is_finite());
        assert!(r.loss_d >= 0.0);
        assert_eq!(r.lr_g, r.lr_d);
    }
}

#[test]
fn ttur_schedule_is_one_to_one_with_faster_d() {
    let data = blobs();
    let mut t = tiny(Preset::Ttur, &data, 1);
    assert!(t.g.spec.sn && t.d.spec.sn);
    for n in 1..=3u64 {
        let r = t.step(&data).unwrap();
        assert_eq!((t.counters.d_updates, t.counters.g_updates), (n, n));
        assert_eq!(r.lr_d, 4.0 * r.lr_g);
    }
    let c = tiny(Preset::Cifar, &data, 1);
    assert!(!c.g.spec.sn && c.d.spec.sn);
}

#[test]
fn learning_rate_decays_to_zero_at_the_end() {
    let data = blobs();
    let mut t = tiny(Preset::Ttur, &data, 2);
    t.cfg = t.cfg.scaled_to(4);
    t.cfg.decay_last = 2;
    let lrs: Vec<f64> = (0..4).map(|_| t.step(&data).unwrap().lr_g).collect();
    assert_eq!(lrs, [1e-4, 1e-4, 1e-4, 0.5e-4]);
    assert_eq!(t.cfg.lr_g_at(4), 0.0);
}

#[test]
fn fixed_seed_gives_identical_losses() {
    let data = blobs();
    let run = || {
        let mut t = tiny(Preset::Ttur, &data, 3);
        (0..100)
            .map(|_| {
                let r = t.step(&data).unwrap();
                (r.loss_d.to_bits(), r.loss_g.to_bits())
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn conditional_models_train() {
    let data = blobs();
    let mut cfg = TrainConfig::preset(Preset::Cifar).scaled_to(10);
    cfg.batch_d = 4;
    cfg.batch_g = 4;
    cfg.n_dis = 2;
    let mut g = GeneratorSpec::scaled(8, 4, ShortcutKind::Gated).unwrap();
    g.classes = Some(3);
    let mut d = DiscriminatorSpec::scaled(8, 4).unwrap();
    d.classes = Some(3);
    let mut t = Trainer::<f32>::new(cfg.clone(), g.clone(), d.clone(), &data, 0).unwrap();
    for _ in 0..3 {
        assert!(t.step(&data).unwrap().loss_d.is_finite());
    }
    d.classes = None;
    assert!(Trainer::<f32>::new(cfg.clone(), g.clone(), d, &data, 0).is_err());
    let mut d4 = DiscriminatorSpec::scaled(8, 4).unwrap();
    d4.classes = Some(4);
    g.classes = Some(4);
    assert!(Trainer::<f32>::new(cfg, g, d4, &data, 0).is_err());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let data = blobs();
    let mut t = tiny(Preset::Cifar, &data, 4);
    for _ in 0..3 {
        t.step(&data).unwrap();
    }
    let bytes = t.to_archive().to_bytes();
    let archive = crate::archive::Archive::from_bytes(&bytes).unwrap();
    let mut fresh = tiny(Preset::Cifar, &data, 4);
    fresh.restore(&archive, &data).unwrap();
    assert_eq!(fresh.to_archive().to_bytes(), bytes);
    for (a, b) in t.g.params.iter().zip(fresh.g.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let names: Vec<_> = archive.entries.iter().map(|e| e.name.as_str()).collect();
    assert!(names.iter().any(|n| n.ends_with(".running_var")));
    assert!(names.iter().any(|n| n.ends_with(".sn_u")));
    assert!(names.iter().any(|n| n.starts_with("opt_g.v.g.")));
}

#[test]
fn resume_replays_the_next_ten_losses_exactly() {
    let data = blobs();
    let mut straight = tiny(Preset::Cifar, &data, 5);
    for _ in 0..7 {
        straight.step(&data).unwrap();
    }
    let archive = straight.to_archive();
    let expect: Vec<_> = (0..10).map(|_| straight.step(&data).unwrap()).collect();

    let mut resumed = tiny(Preset::Cifar, &data, 5);
    resumed.restore(&archive, &data).unwrap();
    let got: Vec<_> = (0..10).map(|_| resumed.step(&data).unwrap()).collect();
    for (a, b) in expect.iter().zip(&got) {
        assert_eq!(a.iter, b.iter);
        assert_eq!(a.loss_d.to_bits(), b.loss_d.to_bits());
        assert_eq!(a.loss_g.to_bits(), b.loss_g.to_bits());
    }
    assert_eq!(resumed.counters, straight.counters);
}

#[test]
fn failed_restore_leaves_trainer_untouched() {
    let data = blobs();
    let mut t = tiny(Preset::Cifar, &data, 6);
    t.step(&data).unwrap();
    let mut archive = t.to_archive();
    archive.entries.retain(|e| !e.name.starts_with("opt_d."));
    let mut fresh = tiny(Preset::Cifar, &data, 6);
    let before = fresh.to_archive().to_bytes();
    assert!(fresh.restore(&archive, &data).is_err());
    assert_eq!(fresh.to_archive().to_bytes(), before);

    let mut other = tiny(Preset::Cifar, &data, 6);
    let mut wide = GeneratorSpec::scaled(8, 6, ShortcutKind::Gated).unwrap();
    wide.z_dim = 8;
    other.g = crate::model::Generator::new(wide, 0).unwrap();
    other.opt_g = AdamState::new(&other.g.params, 0.0, 0.9);
    assert!(other.restore(&t.to_archive(), &data).is_err());
}

#[test]
fn metrics_rows_format_and_parse() {
    let row = MetricsRow {
        iter: 3,
        loss_d: Some(1.5),
        loss_g: Some(-0.25),
        lr_g: Some(2e-4),
        lr_d: Some(2e-4),
        fid: None,
        is: None,
    };
    assert_eq!(row.to_csv(), "3,1.5,-0.25,0.0002,0.0002,,");
    assert_eq!(MetricsRow::parse(&row.to_csv()).unwrap(), row);
    assert_eq!(METRICS_HEADER.split(',').count(), 7);
    assert!(MetricsRow::parse("1,2").is_err());
}
