use forestsr::metrics::chamfer;
use forestsr::model::{infer_block, super_resolve, ModelConfig};
use forestsr::pcio::{denormalize, tile, Frame, PointCloud};
use forestsr::synthgen::{generate, ForestSpec};
use forestsr::trainer::{make_dataset, read_checkpoint, write_checkpoint, Dataset, TrainConfig, Trainer};

fn plot(seed: u64) -> forestsr::synthgen::Forest {
    generate(&ForestSpec {
        extent: [5.0, 5.0],
        trees: 1,
        dbh_cm: (30.0, 40.0),
        height_m: (8.0, 9.0),
        crown_m: (3.0, 3.5),
        hr_density: 800.0,
        lr_density: 60.0,
        lr_noise: 0.02,
        seed,
        ..ForestSpec::default()
    })
    .unwrap()
}

fn small_model() -> ModelConfig {
    let mut m = ModelConfig::with_widths(5, 2, 8, 16);
    m.res_blocks = 1;
    m
}

fn data(seed: u64) -> Dataset {
    let f = plot(seed);
    make_dataset(&f.lr, &f.hr, 2.5, 5, 0.15, 0).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        initial_lr: 2e-3,
        patience: epochs,
        block_edge: 2.5,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_model_beats_its_input() {
    let d = data(11);
    let mut t = Trainer::new(small_model(), train_cfg(25)).unwrap();
    t.run(&d, None, |_| {}).unwrap();
    let losses: Vec<f64> = t.history.records.iter().map(|r| r.train_loss).collect();
    assert!(losses.last().unwrap() < &losses[0]);

    let test = plot(12);
    let sr = super_resolve(&test.lr, &t.best_model(), 2.5).unwrap();
    let before = chamfer(&test.lr, &test.hr).unwrap();
    let after = chamfer(&sr, &test.hr).unwrap();
    assert!(after < before, "SR {after} vs LR {before}");
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let d = data(3);
    let run = || {
        let mut t = Trainer::new(small_model(), train_cfg(3)).unwrap();
        t.run(&d, None, |_| {}).unwrap();
        (t.history.to_csv(), t.best_model())
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert!(a.starts_with("# forestsr history v1\nepoch,train_loss,val_loss,lr\n"));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let d = data(4);
    let mut straight = Trainer::new(small_model(), train_cfg(4)).unwrap();
    straight.run(&d, None, |_| {}).unwrap();

    let mut first = Trainer::new(small_model(), train_cfg(4)).unwrap();
    first.run(&d, Some(2), |_| {}).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&first, &mut buf).unwrap();
    let mut resumed = read_checkpoint(&mut buf.as_slice()).unwrap();
    resumed.run(&d, None, |_| {}).unwrap();

    assert_eq!(straight.history.to_csv(), resumed.history.to_csv());
    assert_eq!(straight.best_model(), resumed.best_model());
    assert_eq!(straight.current, resumed.current);
}

#[test]
fn checkpoint_round_trip_preserves_inference_bitwise() {
    let d = data(5);
    let mut t = Trainer::new(small_model(), train_cfg(2)).unwrap();
    t.run(&d, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    forestsr::trainer::save_checkpoint(&t, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = forestsr::trainer::load_trainer(&path).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&loaded, &mut again).unwrap();
    assert_eq!(bytes, again);

    let f = plot(6);
    let before = super_resolve(&f.lr, &t.best_model(), 2.5).unwrap();
    let after = super_resolve(&f.lr, &loaded.best_model(), 2.5).unwrap();
    assert_eq!(before, after);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let d = data(7);
    let t = Trainer::new(small_model(), train_cfg(1)).unwrap();
    let _ = d;
    let mut buf = Vec::new();
    write_checkpoint(&t, &mut buf).unwrap();
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(read_checkpoint(&mut trailing.as_slice()).is_err());
    let truncated = &buf[..buf.len() - 5];
    assert!(read_checkpoint(&mut &truncated[..]).is_err());
    let mut wrong_version = buf.clone();
    wrong_version[8] = 99;
    assert!(matches!(
        read_checkpoint(&mut wrong_version.as_slice()),
        Err(forestsr::Error::Version { found: 99, .. })
    ));
}

#[test]
fn block_outputs_stay_inside_their_cells() {
    let f = plot(8);
    let m = forestsr::model::ModelState::<f32>::new(small_model(), 0).unwrap();
    for b in tile(&f.lr, 2.5).unwrap() {
        let nb = Frame::of_cell(&b).normalize(&b.points.points).unwrap();
        let Ok(out) = infer_block(&nb, &m) else { continue };
        let world: PointCloud = denormalize(&out);
        for p in &world.points {
            for k in 0..3 {
                let lo = b.origin.axis(k) - 1e-9;
                assert!(p.axis(k) >= lo && p.axis(k) <= lo + b.edge + 2e-9);
            }
        }
    }
}
