use std::path::Path;

use gsgan::archive::Archive;
use gsgan::config::{parse_pairs, RunConfig};
use gsgan::image::read_ppm;
use gsgan::session::{self, checkpoint_path, metrics_path, samples_path};
use gsgan::train::{MetricsRow, METRICS_HEADER};

fn tiny(out: &Path, preset: &str, iters: u64, extra: &str) -> RunConfig {
    let text = format!(
        "preset = {preset}\n\
         out_dir = {}\n\
         data.resolution = 8\n\
         data.size = 120\n\
         g.width = 8\n\
         d.width = 8\n\
         train.iters = {iters}\n\
         train.decay_last = {iters}\n\
         train.batch_d = 8\n\
         train.batch_g = 8\n\
         eval.every = 0\n\
         ckpt.every = 0\n\
         sample.every = 0\n",
        out.display()
    );
    let base = parse_pairs(&text).unwrap();
    RunConfig::with_overrides(&base, &parse_pairs(extra).unwrap()).unwrap()
}

fn rows(out: &Path) -> Vec<MetricsRow> {
    let text = std::fs::read_to_string(metrics_path(out)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    lines.map(|l| MetricsRow::parse(l).unwrap()).collect()
}

#[test]
fn cifar_smoke_run_writes_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "cifar", 200, "");
    let summary = session::train(&cfg, None, |_| {}).unwrap();
    assert_eq!(summary.iter, 200);
    assert_eq!(summary.counters.d_updates, 1000);
    assert_eq!(summary.counters.g_updates, 200);
    let rows = rows(dir.path());
    assert_eq!(rows.len(), 200);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.iter, i as u64 + 1);
        assert!(r.loss_d.unwrap().is_finite() && r.loss_g.unwrap().is_finite());
        assert_eq!(r.lr_g, r.lr_d);
        assert!(r.fid.is_none());
    }
    assert_eq!(rows[0].lr_g, Some(2e-4));
    assert!(rows[199].lr_g.unwrap() < 2e-6);
}

#[test]
fn ttur_rows_use_a_four_times_faster_discriminator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "ttur", 30, "");
    let summary = session::train(&cfg, None, |_| {}).unwrap();
    assert_eq!(summary.counters.d_updates, 30);
    for r in rows(dir.path()) {
        assert_eq!(r.lr_d.unwrap(), 4.0 * r.lr_g.unwrap());
    }
}

#[test]
fn evaluation_rows_land_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(
        dir.path(),
        "cifar",
        25,
        "eval.every = 10\neval.samples = 40\neval.real = 80\nsample.every = 10\nckpt.every = 10\n",
    );
    let mut seen = Vec::new();
    session::train(&cfg, None, |r| seen.push(*r)).unwrap();
    let rows = rows(dir.path());
    assert_eq!(rows, seen);
    assert_eq!(rows.len(), 26);
    assert!(rows[0].loss_d.is_none() && rows[0].fid.is_some());
    let evaluated: Vec<u64> = rows
        .iter()
        .filter(|r| r.fid.is_some())
        .map(|r| r.iter)
        .collect();
    assert_eq!(evaluated, [0, 10, 20, 25]);
    assert!(rows
        .iter()
        .all(|r| r.fid.is_none_or(|f| f >= 0.0 && f.is_finite())));
    assert!(rows.iter().all(|r| r.is.is_none_or(|s| s >= 1.0)));

    for it in [10, 20, 25] {
        assert!(checkpoint_path(dir.path(), it).exists());
        let (w, h, _) = read_ppm(&std::fs::read(samples_path(dir.path(), it)).unwrap()).unwrap();
        assert_eq!((w, h), (64, 64));
    }
    let curves =
        session::eval_curves(&std::fs::read_to_string(metrics_path(dir.path())).unwrap()).unwrap();
    assert_eq!(curves.lines().count(), 5);
}

#[test]
fn fixed_seed_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let extra = "eval.every = 10\neval.samples = 40\neval.real = 80\n";
    session::train(&tiny(a.path(), "cifar", 20, extra), None, |_| {}).unwrap();
    session::train(&tiny(b.path(), "cifar", 20, extra), None, |_| {}).unwrap();
    assert_eq!(
        std::fs::read(metrics_path(a.path())).unwrap(),
        std::fs::read(metrics_path(b.path())).unwrap()
    );

    let c = tempfile::tempdir().unwrap();
    session::train(&tiny(c.path(), "cifar", 20, "seed = 1\n"), None, |_| {}).unwrap();
    assert_ne!(rows(a.path())[19].loss_d, rows(c.path())[19].loss_d);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    let extra = "eval.every = 5\neval.samples = 40\neval.real = 80\nckpt.every = 7\n";
    let cfg = tiny(straight.path(), "ttur", 21, extra);
    session::train(&cfg, None, |_| {}).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    // a stale tail past the checkpoint must be discarded
    std::fs::copy(metrics_path(straight.path()), metrics_path(resumed.path())).unwrap();
    std::fs::copy(
        checkpoint_path(straight.path(), 7),
        checkpoint_path(resumed.path(), 7),
    )
    .unwrap();
    let cfg2 = tiny(resumed.path(), "ttur", 21, extra);
    let summary = session::train(&cfg2, Some(&checkpoint_path(resumed.path(), 7)), |_| {}).unwrap();
    assert_eq!(summary.rows.first().unwrap().iter, 8);
    assert_eq!(summary.iter, 21);
    assert_eq!(
        std::fs::read(metrics_path(straight.path())).unwrap(),
        std::fs::read(metrics_path(resumed.path())).unwrap()
    );

    let strip = |dir: &Path| {
        let mut a = Archive::load(checkpoint_path(dir, 21)).unwrap();
        a.header.remove("config.out_dir");
        a
    };
    assert_eq!(strip(straight.path()), strip(resumed.path()));
}

#[test]
fn checkpoints_carry_their_config_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "cifar", 4, "ckpt.every = 4\ng.shortcut = egs\n");
    session::train(&cfg, None, |_| {}).unwrap();
    let path = checkpoint_path(dir.path(), 4);
    let archive = Archive::load(&path).unwrap();
    let (stored, mut g) = session::load_generator(&archive).unwrap();
    assert_eq!(stored.pairs(), cfg.pairs());
    let images = session::sample(&mut g, 5, 0, false).unwrap();
    assert_eq!(images.shape(), &[5, 3, 8, 8]);
    assert!(images.data().iter().all(|v| v.abs() <= 1.0));
    assert_eq!(images, session::sample(&mut g, 5, 0, false).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(Archive::load(&path).is_err());
    assert!(session::train(&cfg, Some(&path), |_| {}).is_err());
}

#[test]
fn pass_through_evaluation_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "cifar", 1, "eval.real = 120\n");
    let s = session::eval_pass_through(&cfg).unwrap();
    assert!(s.fid.abs() < 1e-6, "{}", s.fid);
    let cfg = tiny(
        dir.path(),
        "cifar",
        1,
        "eval.real = 120\neval.extractor = moments\n",
    );
    assert!(session::eval_pass_through(&cfg).unwrap().fid.abs() < 1e-6);
}
