mod common;

use common::{build, rng, tiny_batches, tiny_config, tiny_spec};
use slam_core::data::gen_synthetic_corpus;
use slam_core::model::ModelConfig;
use slam_core::objectives::{LossBundle, Objective};
use slam_core::params::{Init, ParamStore};
use slam_core::tensor::{Gradients, Graph};
use slam_core::trainer::{
    build_objective, compute_gradients, prepare_step, Adam, Checkpoint, LoadOptions, MetricsRecord, OptimizerConfig,
    Stage, StageKind, StageSchedule, StepBatches, TrainConfig, TrainData, Trainer,
};
use slam_core::SlamError;

fn tiny_train() -> TrainConfig {
    TrainConfig { batch_size: 4, ..TrainConfig::default() }
}

fn tiny_trainer(cfg: ModelConfig, seed: u64) -> Trainer {
    Trainer::new(cfg, OptimizerConfig { warmup_steps: 5, ..OptimizerConfig::default() }, tiny_train(), seed).unwrap()
}

fn tiny_data() -> TrainData {
    TrainData::from(gen_synthetic_corpus(&tiny_spec(), 11).unwrap())
}

fn run_records(t: &mut Trainer, schedule: &StageSchedule, data: &TrainData, stop_at: Option<u64>) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    t.run(schedule, data, stop_at, &mut |_, r| {
        out.push(r.clone());
        Ok(())
    })
    .unwrap();
    out
}

fn values(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn learning_rate_warms_up_then_decays() {
    let c = OptimizerConfig { peak_lr: 1e-3, warmup_steps: 200, ..OptimizerConfig::default() };
    assert!((c.lr(100) - 5e-4).abs() < 1e-15);
    assert!((c.lr(200) - 1e-3).abs() < 1e-15);
    assert!((c.lr(800) - 5e-4).abs() < 1e-15);
}

/// Reference Adam written out per coordinate.
fn adam_oracle(p0: &[f64], grads: &[Vec<f64>], cfg: &OptimizerConfig) -> Vec<f64> {
    let mut p = p0.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as f64;
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let lr = cfg.peak_lr * (t / cfg.warmup_steps as f64).min((cfg.warmup_steps as f64 / t).sqrt());
        for j in 0..p.len() {
            let gj = g[j] * s;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / (1.0 - cfg.beta1.powf(t));
            let vh = v[j] / (1.0 - cfg.beta2.powf(t));
            p[j] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    p
}

fn one_param_store(values: &[f64]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.add("w", &[values.len()], Init::Zeros, &mut rng(0)).unwrap();
    store.value_mut(id).data_mut().copy_from_slice(values);
    store
}

#[test]
fn adam_matches_a_hand_oracle_over_three_steps() {
    let cfg = OptimizerConfig { peak_lr: 0.1, warmup_steps: 1, clip_norm: 100.0, ..OptimizerConfig::default() };
    let p0 = [1.0, -2.0, 0.5];
    let seq = [vec![0.5, -1.0, 0.0], vec![0.1, 0.2, 0.3], vec![-0.3, 0.0, 0.1]];
    let mut store = one_param_store(&p0);
    let mut adam = Adam::new(cfg.clone(), &store);
    let id = store.ids().next().unwrap();
    for (k, g) in seq.iter().enumerate() {
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(id).data_mut().copy_from_slice(g);
        adam.update(&mut store, &grads).unwrap();
        if k == 0 {
            // The first bias-corrected step has magnitude lr on every
            // coordinate with a nonzero gradient.
            let p = store.value(id).data();
            assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6 && p[2] == 0.5);
        }
    }
    let want = adam_oracle(&p0, &seq, &cfg);
    for (a, b) in store.value(id).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(adam.step_count(), 3);
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let p0 = [0.3, -0.7];
    let mut store = one_param_store(&p0);
    let mut adam = Adam::new(OptimizerConfig::default(), &store);
    for _ in 0..3 {
        let grads = Gradients::zeros_like(&store);
        let stats = adam.update(&mut store, &grads).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
    }
    assert_eq!(store.value(store.ids().next().unwrap()).data(), &p0);
}

#[test]
fn clipping_rescales_by_the_global_norm() {
    let mut store = one_param_store(&[0.0, 0.0]);
    let id = store.ids().next().unwrap();
    let cfg = OptimizerConfig { clip_norm: 1.0, ..OptimizerConfig::default() };
    let mut adam = Adam::new(cfg.clone(), &store);
    let mut grads = Gradients::zeros_like(&store);
    grads.get_mut(id).data_mut().copy_from_slice(&[6.0, 8.0]);
    let stats = adam.update(&mut store, &grads).unwrap();
    assert_eq!(stats.grad_norm, 10.0);
    assert!((stats.clip_scale - 0.1).abs() < 1e-15);
    let want = adam_oracle(&[0.0, 0.0], &[vec![6.0, 8.0]], &cfg);
    assert!((store.value(id).data()[0] - want[0]).abs() < 1e-15);
}

#[test]
fn non_finite_gradients_are_rejected() {
    let mut store = one_param_store(&[0.0]);
    let id = store.ids().next().unwrap();
    let mut adam = Adam::new(OptimizerConfig::default(), &store);
    let mut grads = Gradients::zeros_like(&store);
    grads.get_mut(id).data_mut()[0] = f64::NAN;
    assert!(matches!(adam.update(&mut store, &grads), Err(SlamError::NonFinite(_))));
    assert_eq!(store.value(id).data()[0], 0.0);
}

fn all_batches() -> StepBatches {
    let b = tiny_batches(4);
    StepBatches { speech: Some(b.speech), text: Some(b.text), paired: Some(b.paired.clone()), stm: Some(b.paired) }
}

#[test]
fn per_objective_passes_equal_one_summed_graph() {
    let cfg = tiny_config();
    let (model, store) = build::<f64>(cfg.clone(), 5);
    let batches = all_batches();
    let prepared = prepare_step(&cfg, &tiny_train(), &batches, &Objective::ALL, 2.0, &mut rng(9)).unwrap();
    let (bundle, split, _) = compute_gradients(&model, &store, &batches, &prepared).unwrap();

    let mut g = Graph::new(&store);
    let mut total = None;
    let mut summed = LossBundle::default();
    for obj in Objective::ALL {
        let l = build_objective(&mut g, &model, &batches, &prepared, obj).unwrap();
        for (name, v) in LossBundle::NAMES.iter().zip(l.bundle.values()) {
            if v != 0.0 {
                assert_eq!(summed.get(name), Some(0.0));
            }
        }
        summed.bert += l.bundle.bert;
        summed.stm += l.bundle.stm;
        total = Some(match total {
            None => l.weighted,
            Some(t) => g.add(t, l.weighted).unwrap(),
        });
    }
    let total = total.unwrap();
    let joint_total = g.scalar_value(total).unwrap();
    let joint = g.backward(total).unwrap();

    assert!((bundle.total - joint_total).abs() < 1e-9 * joint_total.abs().max(1.0));
    assert_eq!(bundle.bert, summed.bert);
    let scale = joint.global_norm().max(1e-12);
    for (a, b) in split.iter().zip(joint.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * scale, "{x} vs {y}");
        }
    }
}

#[test]
fn speech_only_objectives_leave_text_embeddings_untouched() {
    let cfg = tiny_config();
    let (model, store) = build::<f64>(cfg.clone(), 2);
    let batches = all_batches();
    let prepared = prepare_step(&cfg, &tiny_train(), &batches, StageKind::SpeechOnly.objectives(), 2.0, &mut rng(1)).unwrap();
    let (bundle, grads, ppl) = compute_gradients(&model, &store, &batches, &prepared).unwrap();
    assert!(grads.get(model.text_embedding_param()).data().iter().all(|&x| x == 0.0));
    assert_eq!((bundle.bert, bundle.tlm_text, bundle.stm), (0.0, 0.0, 0.0));
    assert!(bundle.w2v_mlm > 0.0);
    assert_eq!(ppl.unwrap().len(), cfg.codebook_groups);
}

#[test]
fn self_supervised_stage_runs_exactly_its_steps_without_paired_losses() {
    let mut t = tiny_trainer(tiny_config(), 0);
    let schedule = StageSchedule::new(vec![Stage { kind: StageKind::SelfSupervised, steps: 10 }]).unwrap();
    let recs = run_records(&mut t, &schedule, &tiny_data(), None);
    assert_eq!(recs.len(), 10);
    assert_eq!(recs.last().unwrap().step, 10);
    for r in &recs {
        assert_eq!(r.stage, "self_supervised");
        assert_eq!((r.losses.tlm_text, r.losses.tlm_speech, r.losses.stm), (0.0, 0.0, 0.0));
        assert!(r.losses.bert > 0.0 && r.losses.w2v_mlm > 0.0);
    }
    assert_eq!(t.optimizer.step_count(), 10);
}

#[test]
fn multi_stage_run_switches_objectives_at_the_boundary() {
    let mut t = tiny_trainer(tiny_config(), 0);
    let schedule = StageSchedule::multi_stage(3, 3, 2).unwrap();
    let recs = run_records(&mut t, &schedule, &tiny_data(), None);
    let stages: Vec<&str> = recs.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(
        stages,
        ["self_supervised", "self_supervised", "self_supervised", "with_alignment", "with_alignment", "with_alignment", "speech_only", "speech_only"]
    );
    assert!(recs[3..6].iter().all(|r| r.losses.tlm_text > 0.0 && r.losses.stm > 0.0));
    assert!(recs[6..].iter().all(|r| r.losses.bert == 0.0 && r.losses.stm == 0.0));
    assert_eq!(t.optimizer.step_count(), 8, "optimizer state carries across stages");
}

#[test]
fn optimizer_reset_flag_restarts_the_step_count() {
    let train = TrainConfig { reset_optimizer_between_stages: true, ..tiny_train() };
    let mut t = Trainer::new(tiny_config(), OptimizerConfig::default(), train, 0).unwrap();
    run_records(&mut t, &StageSchedule::multi_stage(2, 3, 0).unwrap(), &tiny_data(), None);
    assert_eq!(t.optimizer.step_count(), 3);
}

#[test]
fn ten_steps_are_bitwise_reproducible() {
    let data = tiny_data();
    let schedule = StageSchedule::multi_stage(5, 5, 0).unwrap();
    let mut a = tiny_trainer(tiny_config(), 21);
    let mut b = tiny_trainer(tiny_config(), 21);
    let ra: Vec<LossBundle> = run_records(&mut a, &schedule, &data, None).into_iter().map(|r| r.losses).collect();
    let rb: Vec<LossBundle> = run_records(&mut b, &schedule, &data, None).into_iter().map(|r| r.losses).collect();
    assert_eq!(ra.len(), 10);
    assert_eq!(ra, rb);
    assert_eq!(values(&a.store), values(&b.store));
    let mut c = tiny_trainer(tiny_config(), 22);
    let rc: Vec<LossBundle> = run_records(&mut c, &schedule, &data, None).into_iter().map(|r| r.losses).collect();
    assert_ne!(ra, rc);
}

#[test]
fn resuming_mid_stage_reproduces_the_uninterrupted_run() {
    let data = tiny_data();
    let schedule = StageSchedule::multi_stage(4, 4, 0).unwrap();
    let mut full = tiny_trainer(tiny_config(), 3);
    let want = run_records(&mut full, &schedule, &data, None);

    let mut first = tiny_trainer(tiny_config(), 3);
    let mut got = run_records(&mut first, &schedule, &data, Some(5));
    assert_eq!(got.len(), 5);
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    got.extend(run_records(&mut resumed, &schedule, &data, None));

    assert_eq!(got, want);
    assert_eq!(values(&resumed.store), values(&full.store));
    assert_eq!(resumed.state, full.state);
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let mut t = tiny_trainer(tiny_config(), 4);
    run_records(&mut t, &StageSchedule::multi_stage(2, 0, 0).unwrap(), &tiny_data(), None);
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.slam");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    let restored = Trainer::from_checkpoint(&back).unwrap();
    assert_eq!(values(&restored.store), values(&t.store));
    assert_eq!(restored.optimizer.moments().0, t.optimizer.moments().0);
    assert_eq!(restored.rng_state(), t.rng_state());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = tiny_trainer(tiny_config(), 4).checkpoint().to_bytes().unwrap();
    for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(SlamError::Corrupt(_))), "cut at {cut}");
    }
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(SlamError::Corrupt(_))));
    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&version), Err(SlamError::Version { found: 99, .. })));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(SlamError::Corrupt(_))));
}

#[test]
fn fingerprint_mismatch_needs_force() {
    let deeper = ModelConfig { n_shared_layers: 2, ..tiny_config() };
    let ckpt = tiny_trainer(deeper, 1).checkpoint();
    let mut t = tiny_trainer(tiny_config(), 1);
    assert!(matches!(t.restore(&ckpt, LoadOptions::default()), Err(SlamError::Fingerprint { .. })));
    assert!(t.restore(&ckpt, LoadOptions { force: true, partial: false }).is_err());
}

#[test]
fn partial_load_copies_matching_tensors_and_lists_the_rest() {
    let deeper = ModelConfig { n_shared_layers: 2, ..tiny_config() };
    let source = tiny_trainer(deeper, 1);
    let ckpt = source.checkpoint();
    let mut t = tiny_trainer(tiny_config(), 2);
    let unmatched = t.restore(&ckpt, LoadOptions { force: true, partial: true }).unwrap();
    assert!(!unmatched.is_empty());
    assert!(unmatched.iter().all(|n| n.starts_with("shared.layers.1.")), "{unmatched:?}");
    let name = "shared.layers.0.attention.query.weight";
    let a = t.store.value(t.store.id_of(name).unwrap());
    let b = source.store.value(source.store.id_of(name).unwrap());
    assert_eq!(a, b);
    assert_eq!(t.optimizer.step_count(), 0);
}
