use std::time::Instant;
use airdepth_core::dataset::SynthParams;
use airdepth_core::pipeline::{generate_dataset, train, TrainConfig};

#[test]
#[ignore]
fn bench_train_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams { seed: 42, ..Default::default() };
    let t0 = Instant::now();
    let frames = generate_dataset(&params, 20, dir.path(), false).unwrap();
    println!("datagen 20 frames: {:.2?}", t0.elapsed());

    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let t1 = Instant::now();
    let (_, _) = train(&frames, dir.path(), &cfg, |l| {
        println!("epoch {} loss {:.4} mult {} l2 {:.4}", l.epoch, l.mean_loss, l.lr_multiplier, l.l2_penalty);
    }).unwrap();
    let dt = t1.elapsed();
    println!("2 epochs x 20 frames = 40 iters: {:.2?} ({:.1} ms/iter)", dt, dt.as_secs_f64() * 1000.0 / 40.0);
    println!("extrapolated 10k iters: {:.1} min", dt.as_secs_f64() / 40.0 * 10000.0 / 60.0);
}
