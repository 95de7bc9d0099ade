use latentmine::datakit::Checkpoint;
use latentmine::eval::frechet_distance;
use latentmine::gan::{pretrain, GanArch};
use latentmine::miner::{mined_sample, train_miner};
use latentmine::{scenarios, GanModel, TrainConfig, TransferRun};

fn quick(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 16, iterations: 30, seed, ..TrainConfig::default() }
}

fn small_source() -> GanModel {
    let arch = GanArch { latent_dim: 4, gen_width: 16, gen_depth: 2, critic_width: 16, critic_depth: 2 };
    pretrain(&quick(1), &arch, &scenarios::ring(), &mut |_| {}).unwrap()
}

#[test]
fn pretrained_model_survives_a_file_round_trip() {
    let model = small_source();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    let back = GanModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(model.sample(64, 5).unwrap(), back.sample(64, 5).unwrap());
    assert_eq!(model.to_checkpoint().content_hash(), back.to_checkpoint().content_hash());
}

#[test]
fn mining_leaves_the_generator_untouched_and_reloads_exactly() {
    let source = small_source();
    let target = scenarios::target(&scenarios::single_mode(&scenarios::ring(), 0).unwrap(), 40, 7).unwrap();
    let mut run = TransferRun::new(&source, target, 2, 4, 3).unwrap();
    let mut records = 0;
    train_miner(&mut run, &quick(3), 20, &mut |_| records += 1).unwrap();
    assert!(records > 0);
    assert_eq!(run.generator.param_hash(), source.generator.param_hash());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mined.ckpt");
    run.to_checkpoint().save(&path).unwrap();
    let back = TransferRun::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(mined_sample(&run, 50, 9).unwrap(), mined_sample(&back, 50, 9).unwrap());
}

#[test]
fn samples_from_one_seed_have_zero_frechet_to_themselves() {
    let x = small_source().sample(200, 2).unwrap();
    assert!(frechet_distance(&x, &x).unwrap().abs() < 1e-9);
}
