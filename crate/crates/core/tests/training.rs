use akgp_core::ablation::{prepare, AblationData};
use akgp_core::config::{AblationConfig, KnowledgeMode};
use akgp_core::fusion::{FreezePolicy, Group};
use akgp_core::model::ModelParams;
use akgp_core::rng::mix_seed;
use akgp_core::synth::shuffle_labels;
use akgp_core::trainer::Stage;
use akgp_core::{build_graph, TrainConfig, Trainer};

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 3,
        finetune_epochs: 4,
        ablation: AblationConfig { n_examples: 1000, n_pretrain_examples: 400, ..Default::default() },
        ..Default::default()
    }
}

fn trainer_for(cfg: &TrainConfig, data: &AblationData) -> Trainer {
    let graph = build_graph(&data.world.triples, cfg.d_k, mix_seed(cfg.seed, 7)).unwrap();
    Trainer::new(cfg.clone(), graph).unwrap()
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let cfg = quick_cfg();
    let data = prepare(&cfg).unwrap();
    let train = shuffle_labels(&data.train(), 5);
    let test = shuffle_labels(&data.test(), 6);
    for knowledge in [KnowledgeMode::None, KnowledgeMode::Retrieve] {
        let cfg = TrainConfig { knowledge, ..cfg.clone() };
        let mut t = trainer_for(&cfg, &data);
        t.fit(Some(&data.pretrain), &train, None).unwrap();
        let acc = t.evaluate(&test).unwrap().accuracy;
        assert!((acc - 0.25).abs() <= 0.05, "{knowledge:?}: accuracy {acc}");
    }
}

#[test]
fn zero_task_weight_stays_at_chance() {
    let cfg = TrainConfig { lambda2: 0.0, freeze: vec![], ..quick_cfg() };
    let data = prepare(&cfg).unwrap();
    let mut t = trainer_for(&cfg, &data);
    t.fit(None, &data.train(), None).unwrap();
    let acc = t.evaluate(&data.test()).unwrap().accuracy;
    assert!((acc - 0.25).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn knowledge_path_beats_baseline_on_held_out_entities() {
    let cfg = TrainConfig::default();
    let data = prepare(&cfg).unwrap();
    let mut full = trainer_for(&cfg, &data);
    full.fit(Some(&data.pretrain), &data.train(), None).unwrap();
    let base_cfg = TrainConfig { knowledge: KnowledgeMode::None, use_gate: false, lambda1: 0.0, freeze: vec![], ..cfg.clone() };
    let mut base = trainer_for(&base_cfg, &data);
    base.fit(None, &data.train(), None).unwrap();
    let (f, b) = (full.evaluate(&data.test()).unwrap(), base.evaluate(&data.test()).unwrap());
    assert!(b.accuracy <= 0.40, "baseline {}", b.accuracy);
    assert!(f.accuracy >= b.accuracy + 0.15, "full {} vs baseline {}", f.accuracy, b.accuracy);
    assert!(f.retrieval_hit_rate.unwrap() > 0.5, "{:?}", f.retrieval_hit_rate);
}

#[test]
fn stages_apply_their_policies() {
    let cfg = quick_cfg();
    let data = prepare(&cfg).unwrap();
    let mut t = trainer_for(&cfg, &data);
    assert_eq!(t.stage(), Stage::Init);
    let adaptor = |t: &Trainer| -> Vec<Vec<f64>> {
        t.params.tensors().iter().filter(|(_, g, _)| *g == Group::ThetaA).map(|(_, _, x)| x.data().to_vec()).collect()
    };
    let before_a = adaptor(&t);
    t.pretrain_epoch(&data.pretrain).unwrap();
    assert_eq!(t.params.policy(), FreezePolicy::pretrain());
    assert_eq!(adaptor(&t), before_a);
    let k_before = t.params.knowledge_embeddings(&t.graph).unwrap();
    t.finetune_epoch(&data.train()).unwrap();
    assert_eq!(t.params.policy(), FreezePolicy::finetune_default());
    assert_eq!(t.params.knowledge_embeddings(&t.graph).unwrap(), k_before);
    assert_ne!(adaptor(&t), before_a);
    assert_eq!(t.adam.step, (data.train().len() as u64).div_ceil(cfg.batch_size as u64));
}

#[test]
fn adaptor_is_under_a_tenth_of_the_parameters() {
    let cfg = TrainConfig::default();
    let data = prepare(&TrainConfig { ablation: AblationConfig { n_examples: 10, ..Default::default() }, ..cfg.clone() }).unwrap();
    let graph = build_graph(&data.world.triples, cfg.d_k, 0).unwrap();
    let p = ModelParams::new(&cfg, &graph).unwrap();
    let adaptor = p.group_param_count(Group::ThetaA);
    let total = p.param_count();
    assert!(adaptor * 10 < total, "{adaptor} of {total}");
    let sum: usize = Group::ALL.iter().map(|&g| p.group_param_count(g)).sum();
    assert_eq!(sum, total);
}

#[test]
fn evaluation_leaves_parameters_alone() {
    let cfg = quick_cfg();
    let data = prepare(&cfg).unwrap();
    let t = trainer_for(&cfg, &data);
    let snapshot = t.to_checkpoint();
    t.evaluate(&data.test()).unwrap();
    assert_eq!(t.to_checkpoint(), snapshot);
}
