use cyclefuse_core::config::{ModelConfig, RunConfig};
use cyclefuse_core::data::generate_synthetic_dataset;
use cyclefuse_core::experiment::evaluate_checkpoint;
use cyclefuse_core::pretrain::{pretrain_conditioners, PretrainConfig, PretrainedConditioners};
use cyclefuse_core::trainer::{latest_checkpoint, read_checkpoint_manifest, read_log, LogRecord, Trainer};

fn quick_pretrain() -> PretrainConfig {
    PretrainConfig {
        identity_steps: 5,
        landmark_steps: 5,
        expression_steps: 5,
        backbone_steps: 5,
        batch_size: 4,
        pool_persons: 2,
        ..Default::default()
    }
}

#[test]
fn generate_pretrain_train_resume_evaluate() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let g = generate_synthetic_dataset(5, 3, 16, 4, &data).unwrap();

    let model = ModelConfig::tiny();
    let pre = pretrain_conditioners(&model, &g.train, Some(&g.test), &quick_pretrain()).unwrap();
    pre.save(&root.path().join("pre")).unwrap();
    let pre = PretrainedConditioners::load(&root.path().join("pre")).unwrap();

    let mut cfg = RunConfig::default();
    cfg.model = model.clone();
    cfg.schedule.steps = 10;
    cfg.train.steps = 4;
    cfg.train.batch_size = 2;
    cfg.train.checkpoint_every = 2;
    cfg.data.root = data.clone();
    let run = root.path().join("run");

    // Interrupted after two steps, then resumed to the end.
    let mut half = cfg.clone();
    half.train.steps = 2;
    Trainer::new(half, pre.preset_for(&model).unwrap()).unwrap().run(&run, None).unwrap();
    let ckpt = latest_checkpoint(&run).unwrap();
    assert_eq!(read_checkpoint_manifest(&ckpt).unwrap().step, 2);

    let mut resumed = Trainer::resume(&ckpt, None).unwrap();
    assert_eq!(resumed.current_step(), 2);
    let straight_dir = root.path().join("straight");
    let mut straight = Trainer::new(cfg.clone(), pre.preset_for(&model).unwrap()).unwrap();
    straight.step().unwrap();
    straight.step().unwrap();
    for _ in 0..2 {
        assert_eq!(resumed.step().unwrap(), straight.step().unwrap());
    }
    let fin = straight.save_checkpoint(&straight_dir).unwrap();

    let a = evaluate_checkpoint(&fin, None, None).unwrap();
    let b = evaluate_checkpoint(&fin, Some(&data), None).unwrap();
    assert_eq!(a, b);
    a.validate().unwrap();
    assert_eq!(a.images, g.test.len());
    assert_eq!(a.config_hash, cfg.hash());

    let logged = read_log(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(logged.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count(), 2);
}
