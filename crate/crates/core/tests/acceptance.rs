//! Acceptance run: one PASS/FAIL line per criterion, at the desk
//! configuration. Takes tens of minutes on a single core.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slam_core::config::Config;
use slam_core::data::{gen_synthetic_corpus, write_synthetic_corpus, SyntheticCorpus};
use slam_core::eval::{
    gradcheck_suite, probe_cross_modal, probe_frame_classifier, probe_stm, CrossModalOptions, FrameProbeOptions,
    ProbeReport, StmProbeOptions, SuiteOptions,
};
use slam_core::model::{ModelConfig, SlamModel};
use slam_core::nn::{Dropout, PaddingMask};
use slam_core::objectives::{
    sample_paired_masks, sample_speech_spans, sample_text_spans, SPEECH_RATIO, SPEECH_SPAN, TEXT_RATIO, TEXT_SPAN,
};
use slam_core::params::ParamStore;
use slam_core::tensor::{Graph, NdArray};
use slam_core::trainer::{Checkpoint, MetricsRecord, StageSchedule, TrainData, Trainer};
use slam_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Report {
    failures: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, title: &str, result: Result<Outcome>) {
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} C{id:<2} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(id);
        }
    }
}

const GRADCHECK_BUDGET_S: f64 = 60.0;
const MASK_DRAWS: usize = 10_000;
const SMOKE_STEPS: u64 = 500;
const SMOKE_BUDGET_S: f64 = 15.0 * 60.0;
const SMOKE_DROP: f64 = 0.30;
const STAGE2_STEPS: u64 = 2000;
const STM_PAIRS: usize = 1000;

fn c1_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let reports = gradcheck_suite(&SuiteOptions::default())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| (a.max_rel_err / a.tolerance).total_cmp(&(b.max_rel_err / b.tolerance))).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    Ok(outcome(
        failed.is_empty() && secs < GRADCHECK_BUDGET_S,
        format!(
            "{} blocks, worst {} {:.2e} (tol {:.0e}), failed {:?}, {secs:.1}s",
            reports.len(),
            worst.name,
            worst.max_rel_err,
            worst.tolerance,
            failed
        ),
    ))
}

fn c2_masking() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (text_len, speech_len) = (100, 64);
    let (mut text, mut speech, mut paired) = (0.0, 0.0, 0.0);
    let mut text_ok = true;
    let mut paired_ok = true;
    for _ in 0..MASK_DRAWS {
        let t = sample_text_spans(text_len, TEXT_RATIO, TEXT_SPAN, &mut rng);
        text_ok &= t.positions.iter().collect::<BTreeSet<_>>().len() == t.positions.len();
        text += t.coverage();
        speech += sample_speech_spans(speech_len, SPEECH_RATIO, SPEECH_SPAN, true, &mut rng).coverage();
        let (s, p) = sample_paired_masks(speech_len, text_len, &mut rng)?;
        paired_ok &= p.is_contiguous() && p.positions.len() == (0.5 * text_len as f64).round() as usize;
        paired += s.coverage();
    }
    let n = MASK_DRAWS as f64;
    let (text, speech, paired) = (text / n, speech / n, paired / n);
    let pass = (text - 0.15).abs() <= 0.01 && (speech - 0.50).abs() <= 0.05 && (paired - 0.75).abs() <= 0.05 && text_ok && paired_ok;
    Ok(outcome(
        pass,
        format!(
            "text {text:.4} (spans disjoint: {text_ok}), speech {speech:.4}, paired speech {paired:.4}, paired text single span of 50: {paired_ok}"
        ),
    ))
}

fn c3_shape_law() -> Result<Outcome> {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::<f32>::new();
    let model = SlamModel::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(3))?;
    let reach = |speech: bool, text: bool| -> Result<(usize, BTreeSet<String>)> {
        let mut g = Graph::new(&store);
        let mut drop = Dropout::off();
        let frames = g.constant(NdArray::full(&[1, 128, cfg.feature_dim], 0.5f32));
        let enc = model.speech_encode(&mut g, frames, &[128], None, &mut drop)?;
        let tmask = PaddingMask::from_lengths(vec![10]);
        let w = model.text_encode(&mut g, &[4, 5, 6, 7, 8, 9, 10, 11, 12, 13], &tmask)?;
        let out = model.multimodal_encode(
            &mut g,
            speech.then_some((enc.c, &enc.mask)),
            text.then_some((w.w, &w.mask)),
            speech && text,
            &mut drop,
        )?;
        let len = out.seq_len();
        // Parameters the multimodal output actually depends on.
        let sum = g.sum(out.h)?;
        let grads = g.backward(sum)?;
        let names = store
            .iter()
            .filter(|(id, _)| grads.get(*id).data().iter().any(|&x| x != 0.0))
            .map(|(_, p)| p.name.clone())
            .collect();
        Ok((len, names))
    };
    let (len, _) = reach(true, true)?;
    let (_, speech) = reach(true, false)?;
    let (_, text) = reach(false, true)?;
    let both: BTreeSet<String> = speech.intersection(&text).cloned().collect();
    let shared_layers: BTreeSet<String> = both.iter().filter_map(|n| n.split('.').nth(2).map(|i| i.to_string())).collect();
    let only_shared = both.iter().all(|n| n.starts_with("shared.layers."));
    let pass = len == 43 && only_shared && shared_layers.len() == cfg.n_shared_layers;
    Ok(outcome(
        pass,
        format!(
            "length {len} (want 43), {} tensors reachable from both modalities, all in shared layers: {only_shared}, layers {:?}",
            both.len(),
            shared_layers
        ),
    ))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn run(t: &mut Trainer, schedule: &StageSchedule, data: &TrainData) -> Result<Vec<MetricsRecord>> {
    let mut recs = Vec::new();
    t.run(schedule, data, None, &mut |_, r| {
        recs.push(r.clone());
        Ok(())
    })?;
    Ok(recs)
}

fn c4_smoke(t: &mut Trainer, data: &TrainData) -> Result<(Outcome, Vec<MetricsRecord>)> {
    let start = Instant::now();
    let recs = run(t, &StageSchedule::multi_stage(SMOKE_STEPS, 0, 0)?, data)?;
    let secs = start.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    let mut pass = secs <= SMOKE_BUDGET_S && recs.len() as u64 == SMOKE_STEPS;
    for name in ["bert", "w2v_contrastive", "w2v_mlm", "diversity"] {
        let first = mean(recs[..50].iter().map(|r| r.losses.get(name).unwrap()));
        let last = mean(recs[recs.len() - 50..].iter().map(|r| r.losses.get(name).unwrap()));
        let drop = 1.0 - last / first;
        pass &= drop >= SMOKE_DROP;
        parts.push(format!("{name} {first:.3}->{last:.3} (-{:.1}%)", 100.0 * drop));
    }
    Ok((outcome(pass, format!("{}, {secs:.0}s", parts.join(", "))), recs))
}

fn c5_codebook(recs: &[MetricsRecord], cfg: &ModelConfig) -> Result<Outcome> {
    let tail = &recs[recs.len() - 50..];
    let groups: Vec<f64> = (0..cfg.codebook_groups).map(|g| mean(tail.iter().map(|r| r.code_perplexity[g]))).collect();
    let floor = 0.25 * cfg.codebook_size as f64;
    Ok(outcome(
        groups.iter().all(|&p| p >= floor),
        format!("per-group perplexity {groups:.1?} over the last 50 steps (floor {floor})"),
    ))
}

fn fresh(cfg: &Config, seed: u64) -> Result<Trainer> {
    Trainer::new(cfg.model_config(), cfg.optimizer(), cfg.train_config(), seed)
}

fn c6_stm(trained: &Trainer, control: &Trainer, corpus: &SyntheticCorpus) -> Result<Outcome> {
    let opts = StmProbeOptions { pairs: STM_PAIRS, ..StmProbeOptions::default() };
    let acc = probe_stm(&trained.model, &trained.store, &corpus.heldout, &opts)?.metric("accuracy").unwrap();
    let base = probe_stm(&control.model, &control.store, &corpus.heldout, &opts)?.metric("accuracy").unwrap();
    Ok(outcome(
        acc >= 0.90 && (base - 0.5).abs() <= 0.05,
        format!("accuracy {acc:.3} over {STM_PAIRS} pairs, untrained control {base:.3}"),
    ))
}

fn c7_cross_modal(trained: &Trainer, control: &Trainer, corpus: &SyntheticCorpus) -> Result<Outcome> {
    let opts = CrossModalOptions::default();
    let r = probe_cross_modal(&trained.model, &trained.store, &corpus.heldout, &opts)?;
    let base = probe_cross_modal(&control.model, &control.store, &corpus.heldout, &opts)?.metric("gap").unwrap();
    let gap = r.metric("gap").unwrap();
    Ok(outcome(
        gap >= 0.05 && base.abs() <= 0.02,
        format!(
            "true speech {:.3}, noise {:.3}, gap {gap:.3}; untrained gap {base:.3}",
            r.metric("accuracy_true_speech").unwrap(),
            r.metric("accuracy_noise_speech").unwrap()
        ),
    ))
}

fn c8_frames(trained: &Trainer, corpus: &SyntheticCorpus) -> Result<Outcome> {
    let r = probe_frame_classifier(&trained.model, &trained.store, &corpus.paired, &corpus.heldout, &FrameProbeOptions::default())?;
    let red = r.metric("relative_reduction").unwrap();
    Ok(outcome(
        red >= 0.30,
        format!(
            "TER {:.3} vs random-init {:.3}, relative reduction {:.0}%",
            r.metric("token_error_rate").unwrap(),
            r.metric("baseline_token_error_rate").unwrap(),
            100.0 * red
        ),
    ))
}

const ABLATION_STEPS: u64 = 300;
const ABLATION_BATCH: usize = 16;

fn probes(t: &Trainer, corpus: &SyntheticCorpus) -> Result<Vec<ProbeReport>> {
    Ok(vec![
        probe_stm(&t.model, &t.store, &corpus.heldout, &StmProbeOptions::default())?,
        probe_cross_modal(&t.model, &t.store, &corpus.heldout, &CrossModalOptions::default())?,
        probe_frame_classifier(&t.model, &t.store, &corpus.paired, &corpus.heldout, &FrameProbeOptions::default())?,
    ])
}

fn c9_ablation(corpus: &SyntheticCorpus, data: &TrainData) -> Result<Outcome> {
    let cfg = Config { batch_size: ABLATION_BATCH, ..Config::default() };
    let mut multi = fresh(&cfg, 9)?;
    run(&mut multi, &StageSchedule::multi_stage(ABLATION_STEPS / 2, ABLATION_STEPS / 2, 0)?, data)?;
    let mut one = fresh(&cfg, 9)?;
    run(&mut one, &StageSchedule::one_stage(ABLATION_STEPS)?, data)?;
    let a = probes(&multi, corpus)?;
    let b = probes(&one, corpus)?;
    let comparable = a.iter().zip(&b).all(|(x, y)| {
        x.probe == y.probe && x.fingerprint == y.fingerprint && x.metrics.keys().eq(y.metrics.keys())
    });
    let pick = |rs: &[ProbeReport], i: usize, k: &str| rs[i].metric(k).unwrap();
    Ok(outcome(
        comparable,
        format!(
            "{ABLATION_STEPS} steps at batch {ABLATION_BATCH}; multi-stage vs one-stage: STM acc {:.3} vs {:.3}, cross-modal gap {:.3} vs {:.3}, TER {:.3} vs {:.3}",
            pick(&a, 0, "accuracy"),
            pick(&b, 0, "accuracy"),
            pick(&a, 1, "gap"),
            pick(&b, 1, "gap"),
            pick(&a, 2, "token_error_rate"),
            pick(&b, 2, "token_error_rate"),
        ),
    ))
}

fn c10_determinism(cfg: &Config, data: &TrainData) -> Result<Outcome> {
    let cfg = Config { batch_size: 8, ..cfg.clone() };
    let schedule = StageSchedule::multi_stage(5, 5, 0)?;
    let mut a = fresh(&cfg, 10)?;
    let mut b = fresh(&cfg, 10)?;
    let ra = run(&mut a, &schedule, data)?;
    let rb = run(&mut b, &schedule, data)?;
    let same_losses = ra.len() == 10 && ra.iter().zip(&rb).all(|(x, y)| x.losses == y.losses);

    let mut first = fresh(&cfg, 10)?;
    let mut resumed_recs = Vec::new();
    first.run(&schedule, data, Some(4), &mut |_, r| {
        resumed_recs.push(r.clone());
        Ok(())
    })?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("mid.slam");
    first.checkpoint().save(&path)?;
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path)?)?;
    resumed_recs.extend(run(&mut resumed, &schedule, data)?);
    let params = |t: &Trainer| t.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
    let resume_ok = resumed_recs == ra && params(&resumed) == params(&a);

    let spec = cfg.synthetic_spec();
    let (d1, d2) = (dir.path().join("c1"), dir.path().join("c2"));
    write_synthetic_corpus(&d1, &spec, 77)?;
    write_synthetic_corpus(&d2, &spec, 77)?;
    let mut files = 0;
    let mut corpus_ok = true;
    for entry in std::fs::read_dir(&d1)? {
        let name = entry?.file_name();
        corpus_ok &= std::fs::read(d1.join(&name))? == std::fs::read(d2.join(&name))?;
        files += 1;
    }
    Ok(outcome(
        same_losses && resume_ok && corpus_ok && files > 0,
        format!("10-step losses identical: {same_losses}, resume from step 4 identical: {resume_ok}, corpus files identical: {corpus_ok} ({files} files)"),
    ))
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let start = Instant::now();
    let mut report = Report { failures: Vec::new() };
    report.line(1, "gradient suite", c1_gradients());
    report.line(2, "masking statistics", c2_masking());
    report.line(3, "shape law and shared-layer audit", c3_shape_law());

    let cfg = Config::default();
    let corpus = gen_synthetic_corpus(&cfg.synthetic_spec(), cfg.data_seed).expect("corpus");
    let data = TrainData::from(corpus.clone());
    let mut trainer = fresh(&cfg, cfg.seed).expect("trainer");
    match c4_smoke(&mut trainer, &data) {
        Ok((o, recs)) => {
            report.line(4, "stage-1 pre-training smoke", Ok(o));
            report.line(5, "codebook health", c5_codebook(&recs, &cfg.model_config()));
        }
        Err(e) => {
            report.line(4, "stage-1 pre-training smoke", Err(e));
            report.line(5, "codebook health", Ok(outcome(false, "no criterion-4 run".into())));
        }
    }

    // Stage 2 continues the criterion-4 model with every objective active.
    let stage2 = StageSchedule::multi_stage(SMOKE_STEPS, STAGE2_STEPS, 0).and_then(|s| run(&mut trainer, &s, &data).map(|_| ()));
    let control = fresh(&cfg, cfg.seed + 1).expect("control");
    match stage2 {
        Ok(()) => {
            report.line(6, "STM probe", c6_stm(&trainer, &control, &corpus));
            report.line(7, "cross-modal transfer", c7_cross_modal(&trainer, &control, &corpus));
            report.line(8, "frame representation probe", c8_frames(&trainer, &corpus));
        }
        Err(e) => {
            let msg = format!("stage 2 failed: {e}");
            for (id, title) in [(6, "STM probe"), (7, "cross-modal transfer"), (8, "frame representation probe")] {
                report.line(id, title, Ok(outcome(false, msg.clone())));
            }
        }
    }
    report.line(9, "multi-stage vs one-stage ablation", c9_ablation(&corpus, &data));
    report.line(10, "determinism and persistence", c10_determinism(&cfg, &data));

    println!(
        "acceptance: {} of 10 criteria passed in {:.0}s",
        10 - report.failures.len(),
        start.elapsed().as_secs_f64()
    );
    if !report.failures.is_empty() {
        std::process::exit(1);
    }
}
