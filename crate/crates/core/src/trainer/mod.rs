//! Mixed-batch training step, optimizer, stage schedule and run loop.
//!
//! Each step draws one batch per modality the active objectives need, runs a
//! separate forward and backward pass per objective, sums the parameter
//! gradients and applies a single clipped Adam update.

mod checkpoint;

pub use checkpoint::{Checkpoint, LoadOptions, OptimizerSnapshot, RngState, CHECKPOINT_VERSION};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchLimits, BatchStream, Example, PairedBatch, SpeechBatch, StreamCursor, SyntheticCorpus, TextBatch};
use crate::error::{Result, SlamError};
use crate::model::{latent_len, ModelConfig, QuantizeMode, SlamModel};
use crate::nn::Dropout;
use crate::objectives::{
    bert_loss, corrupt_text, make_stm_batch, sample_paired_masks, sample_speech_masks, sample_text_masks, stm_loss,
    tlm_loss, w2v_bert_loss, LossBundle, MaskSpec, MaskedText, Objective, Replacement, StmBatch,
};
use crate::params::ParamStore;
use crate::tensor::{Gradients, Graph, NdArray, Scalar, Var};

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { peak_lr: 1e-3, warmup_steps: 200, clip_norm: 1.0, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.clip_norm > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SlamError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate of update number `step` (1-based): linear warmup, then
    /// inverse square-root decay.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.peak_lr / (step.max(1) as f64).sqrt();
        }
        let (s, w) = (step.max(1) as f64, self.warmup_steps as f64);
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Statistics of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when not clipped).
    pub clip_scale: f64,
    pub lr: f64,
}

/// Adam with bias correction and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<NdArray<S>>,
    v: Vec<NdArray<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, p)| NdArray::zeros(p.value.shape())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[NdArray<S>], &[NdArray<S>]) {
        (&self.m, &self.v)
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            a.data_mut().iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<NdArray<S>>, v: Vec<NdArray<S>>) -> Result<()> {
        let same = |a: &[NdArray<S>], b: &[NdArray<S>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(SlamError::Shape("optimizer moments do not match the parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Clips `grads` to the configured global norm and applies one update.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<UpdateStats> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(SlamError::Shape("gradient count does not match the optimizer".into()));
        }
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(SlamError::NonFinite("gradient norm".into()));
        }
        let clip_scale = if grad_norm > self.config.clip_norm { self.config.clip_norm / grad_norm } else { 1.0 };
        self.step += 1;
        let c = &self.config;
        let lr = c.lr(self.step);
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.value_mut(id).data_mut();
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j].as_f64() * clip_scale;
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = S::from_f64(mj);
                v[j] = S::from_f64(vj);
                let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p[j] = S::from_f64(p[j].as_f64() - step);
            }
        }
        Ok(UpdateStats { grad_norm, clip_scale, lr })
    }
}

// ----------------------------------------------------------------------
// Schedule
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Unpaired text and speech only.
    SelfSupervised,
    /// Unpaired objectives plus TLM and STM on paired data.
    WithAlignment,
    /// w2v-BERT on speech only.
    SpeechOnly,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::SelfSupervised => "self_supervised",
            StageKind::WithAlignment => "with_alignment",
            StageKind::SpeechOnly => "speech_only",
        }
    }

    pub fn objectives(self) -> &'static [Objective] {
        match self {
            StageKind::SelfSupervised => &[Objective::Bert, Objective::W2vBert],
            StageKind::WithAlignment => &Objective::ALL,
            StageKind::SpeechOnly => &[Objective::W2vBert],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(SlamError::Config("schedule has no stages".into()));
        }
        if let Some(s) = stages.iter().find(|s| s.steps == 0) {
            return Err(SlamError::Config(format!("stage {} has zero steps", s.kind.name())));
        }
        Ok(StageSchedule { stages })
    }

    /// Self-supervised, then with alignment, then speech-only; stages with
    /// zero steps are left out.
    pub fn multi_stage(self_supervised: u64, with_alignment: u64, speech_only: u64) -> Result<Self> {
        let stages = [
            (StageKind::SelfSupervised, self_supervised),
            (StageKind::WithAlignment, with_alignment),
            (StageKind::SpeechOnly, speech_only),
        ]
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .map(|(kind, steps)| Stage { kind, steps })
        .collect();
        Self::new(stages)
    }

    /// Every objective from the first step.
    pub fn one_stage(steps: u64) -> Result<Self> {
        Self::new(vec![Stage { kind: StageKind::WithAlignment, steps }])
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn needs_paired(&self) -> bool {
        self.stages.iter().any(|s| s.kind == StageKind::WithAlignment)
    }
}

// ----------------------------------------------------------------------
// Training step
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub limits: BatchLimits,
    pub stm_negative_ratio: f64,
    pub reset_optimizer_between_stages: bool,
    /// Checkpoint period in steps for the run loop's caller; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            limits: BatchLimits::default(),
            stm_negative_ratio: 0.5,
            reset_optimizer_between_stages: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(SlamError::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.stm_negative_ratio) {
            return Err(SlamError::Config("stm_negative_ratio must be in [0, 1]".into()));
        }
        if self.limits.max_frames < 4 || self.limits.max_tokens < 2 {
            return Err(SlamError::Config("batch length limits are too small".into()));
        }
        Ok(())
    }
}

/// Batches available to one training step.
#[derive(Clone, Debug, Default)]
pub struct StepBatches {
    pub speech: Option<SpeechBatch>,
    pub text: Option<TextBatch>,
    pub paired: Option<PairedBatch>,
    /// Paired batch for STM, sampled separately from the TLM batch.
    pub stm: Option<PairedBatch>,
}

/// Masks, corruptions and random seeds for one step, drawn before any
/// forward pass so that every objective sees the same inputs however the
/// passes are grouped.
#[derive(Clone, Debug)]
pub struct PreparedStep {
    pub objectives: Vec<Objective>,
    pub speech_masks: Vec<MaskSpec>,
    pub masked_text: Option<MaskedText>,
    pub paired_speech_masks: Vec<MaskSpec>,
    pub paired_text: Option<MaskedText>,
    pub stm: Option<StmBatch>,
    pub tau: f64,
    pub seed: u64,
    pub mask_rate_text: f64,
    pub mask_rate_speech: f64,
}

fn coverage(masks: &[MaskSpec]) -> (usize, usize) {
    masks.iter().fold((0, 0), |(m, n), s| (m + s.positions.len(), n + s.len))
}

fn ratio((m, n): (usize, usize)) -> f64 {
    if n == 0 {
        0.0
    } else {
        m as f64 / n as f64
    }
}

pub fn prepare_step<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    train: &TrainConfig,
    batches: &StepBatches,
    objectives: &[Objective],
    tau: f64,
    rng: &mut R,
) -> Result<PreparedStep> {
    let mut p = PreparedStep {
        objectives: objectives.to_vec(),
        speech_masks: Vec::new(),
        masked_text: None,
        paired_speech_masks: Vec::new(),
        paired_text: None,
        stm: None,
        tau,
        seed: 0,
        mask_rate_text: 0.0,
        mask_rate_speech: 0.0,
    };
    let mut text_cov = (0, 0);
    let mut speech_cov = (0, 0);
    for obj in objectives {
        match obj {
            Objective::Bert => {
                let text = batches.text.as_ref().ok_or(SlamError::MissingBatch("text"))?;
                let masks = sample_text_masks(text, rng);
                let c = coverage(&masks);
                text_cov = (text_cov.0 + c.0, text_cov.1 + c.1);
                p.masked_text = Some(corrupt_text(text, &masks, cfg.vocab_size, Replacement::Bert, rng)?);
            }
            Objective::W2vBert => {
                let speech = batches.speech.as_ref().ok_or(SlamError::MissingBatch("speech"))?;
                p.speech_masks = sample_speech_masks(speech, rng);
                let c = coverage(&p.speech_masks);
                speech_cov = (speech_cov.0 + c.0, speech_cov.1 + c.1);
            }
            Objective::Tlm => {
                let paired = batches.paired.as_ref().ok_or(SlamError::MissingBatch("paired"))?;
                let mut text_masks = Vec::new();
                for (b, &frames) in paired.speech.lengths.iter().enumerate() {
                    let (s, t) = sample_paired_masks(latent_len(frames), paired.text.mask.lengths()[b], rng)?;
                    p.paired_speech_masks.push(s);
                    text_masks.push(t);
                }
                let (ct, cs) = (coverage(&text_masks), coverage(&p.paired_speech_masks));
                text_cov = (text_cov.0 + ct.0, text_cov.1 + ct.1);
                speech_cov = (speech_cov.0 + cs.0, speech_cov.1 + cs.1);
                p.paired_text = Some(corrupt_text(&paired.text, &text_masks, cfg.vocab_size, Replacement::Bert, rng)?);
            }
            Objective::Stm => {
                let paired = batches.stm.as_ref().ok_or(SlamError::MissingBatch("stm"))?;
                p.stm = Some(make_stm_batch(paired, train.stm_negative_ratio, rng)?);
            }
        }
    }
    p.seed = rng.next_u64();
    p.mask_rate_text = ratio(text_cov);
    p.mask_rate_speech = ratio(speech_cov);
    Ok(p)
}

/// Weighted loss of one objective built into a graph, with its unweighted
/// terms.
pub struct ObjectiveLoss {
    pub weighted: Var,
    pub bundle: LossBundle,
    pub perplexity: Option<Vec<f64>>,
}

fn objective_rng(seed: u64, obj: Objective, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(obj as u64 * 4 + purpose);
    r
}

fn weighted_sum<S: Scalar>(g: &mut Graph<'_, S>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, w)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    acc.ok_or_else(|| SlamError::Empty("no loss terms".into()))
}

fn scalar<S: Scalar>(g: &Graph<'_, S>, v: Var, name: &str) -> Result<f64> {
    let x = g.scalar_value(v)?.as_f64();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(SlamError::NonFinite(format!("{name} loss is {x}")))
    }
}

/// Builds the loss of `obj` into `g`.
pub fn build_objective<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    batches: &StepBatches,
    prepared: &PreparedStep,
    obj: Objective,
) -> Result<ObjectiveLoss> {
    let w = &model.config.loss_weights;
    let rate = model.config.conformer.dropout_rate;
    let mut drop = if rate > 0.0 { Dropout::train(rate, objective_rng(prepared.seed, obj, 0)) } else { Dropout::off() };
    let mut bundle = LossBundle::default();
    let mut perplexity = None;
    let weighted = match obj {
        Objective::Bert => {
            let text = batches.text.as_ref().ok_or(SlamError::MissingBatch("text"))?;
            let masked = prepared.masked_text.as_ref().ok_or(SlamError::MissingBatch("text masks"))?;
            let l = bert_loss(g, model, text, masked, &mut drop)?;
            bundle.bert = scalar(g, l, "bert")?;
            weighted_sum(g, &[(l, w.bert)])?
        }
        Objective::W2vBert => {
            let speech = batches.speech.as_ref().ok_or(SlamError::MissingBatch("speech"))?;
            let mut noise = objective_rng(prepared.seed, obj, 1);
            let mut negatives = objective_rng(prepared.seed, obj, 2);
            let out = w2v_bert_loss(
                g,
                model,
                speech,
                &prepared.speech_masks,
                QuantizeMode { tau: prepared.tau, noise: Some(&mut noise), hard: true },
                &mut negatives,
                &mut drop,
            )?;
            let mut terms = vec![(out.mlm, w.w2v_mlm), (out.diversity, w.diversity)];
            bundle.w2v_mlm = scalar(g, out.mlm, "w2v_mlm")?;
            bundle.diversity = scalar(g, out.diversity, "diversity")?;
            if let Some(c) = out.contrastive {
                bundle.w2v_contrastive = scalar(g, c, "w2v_contrastive")?;
                terms.insert(0, (c, w.w2v_contrastive));
            }
            perplexity = Some(out.perplexity);
            weighted_sum(g, &terms)?
        }
        Objective::Tlm => {
            let paired = batches.paired.as_ref().ok_or(SlamError::MissingBatch("paired"))?;
            let text = prepared.paired_text.as_ref().ok_or(SlamError::MissingBatch("paired masks"))?;
            let out = tlm_loss(g, model, paired, &prepared.paired_speech_masks, text, &mut drop)?;
            bundle.tlm_text = scalar(g, out.text, "tlm_text")?;
            bundle.tlm_speech = scalar(g, out.speech, "tlm_speech")?;
            weighted_sum(g, &[(out.text, w.tlm_text), (out.speech, w.tlm_speech)])?
        }
        Objective::Stm => {
            let paired = batches.stm.as_ref().ok_or(SlamError::MissingBatch("stm"))?;
            let stm = prepared.stm.as_ref().ok_or(SlamError::MissingBatch("stm pairs"))?;
            let out = stm_loss(g, model, &paired.speech, stm, &mut drop)?;
            bundle.stm = scalar(g, out.loss, "stm")?;
            weighted_sum(g, &[(out.loss, w.stm)])?
        }
    };
    Ok(ObjectiveLoss { weighted, bundle, perplexity })
}

fn merge(into: &mut LossBundle, from: &LossBundle) {
    into.bert += from.bert;
    into.w2v_contrastive += from.w2v_contrastive;
    into.w2v_mlm += from.w2v_mlm;
    into.diversity += from.diversity;
    into.tlm_text += from.tlm_text;
    into.tlm_speech += from.tlm_speech;
    into.stm += from.stm;
}

/// Runs one forward and backward pass per objective and sums the
/// gradients.
pub fn compute_gradients<S: Scalar>(
    model: &SlamModel,
    store: &ParamStore<S>,
    batches: &StepBatches,
    prepared: &PreparedStep,
) -> Result<(LossBundle, Gradients<S>, Option<Vec<f64>>)> {
    let mut bundle = LossBundle::default();
    let mut grads = Gradients::zeros_like(store);
    let mut perplexity = None;
    for &obj in &prepared.objectives {
        let mut g = Graph::new(store);
        let loss = build_objective(&mut g, model, batches, prepared, obj)?;
        merge(&mut bundle, &loss.bundle);
        if loss.perplexity.is_some() {
            perplexity = loss.perplexity;
        }
        grads.accumulate(&g.backward(loss.weighted)?);
    }
    bundle.finalize(&model.config.loss_weights)?;
    if !grads.is_finite() {
        return Err(SlamError::NonFinite("parameter gradients".into()));
    }
    Ok((bundle, grads, perplexity))
}

/// Result of one [`train_step`].
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: LossBundle,
    pub update: UpdateStats,
    pub code_perplexity: Vec<f64>,
    pub mask_rate_text: f64,
    pub mask_rate_speech: f64,
}

/// One optimizer update from the summed gradients of every active
/// objective.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar, R: Rng + ?Sized>(
    model: &SlamModel,
    store: &mut ParamStore<S>,
    optimizer: &mut Adam<S>,
    train: &TrainConfig,
    batches: &StepBatches,
    objectives: &[Objective],
    tau: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    let prepared = prepare_step(&model.config, train, batches, objectives, tau, rng)?;
    let (losses, grads, perplexity) = compute_gradients(model, store, batches, &prepared)?;
    let update = optimizer.update(store, &grads)?;
    Ok(StepOutcome {
        losses,
        update,
        code_perplexity: perplexity.unwrap_or_default(),
        mask_rate_text: prepared.mask_rate_text,
        mask_rate_speech: prepared.mask_rate_speech,
    })
}

// ----------------------------------------------------------------------
// Run loop
// ----------------------------------------------------------------------

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub grad_norm: f64,
    pub lr: f64,
    pub code_perplexity: Vec<f64>,
    pub mask_rate_text: f64,
    pub mask_rate_speech: f64,
}

/// Training examples per split.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub speech: Vec<Example>,
    pub text: Vec<Example>,
    pub paired: Vec<Example>,
}

impl From<SyntheticCorpus> for TrainData {
    fn from(c: SyntheticCorpus) -> Self {
        TrainData { speech: c.speech, text: c.text, paired: c.paired }
    }
}

/// Position of a run: stage, step and data-stream cursors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub stage: usize,
    pub step_in_stage: u64,
    pub global_step: u64,
    pub speech_cursor: StreamCursor,
    pub text_cursor: StreamCursor,
    pub paired_cursor: StreamCursor,
}

struct Streams {
    speech: Option<BatchStream>,
    text: Option<BatchStream>,
    paired: Option<BatchStream>,
}

fn stream_seed(run_seed: u64, stage: usize, split: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(run_seed);
    r.set_stream(1_000 + stage as u64 * 8 + split);
    r.next_u64()
}

fn open_stream(n: usize, batch_size: usize, seed: u64, cursor: StreamCursor, needed: bool, split: &'static str) -> Result<Option<BatchStream>> {
    if !needed {
        return Ok(None);
    }
    if n < batch_size {
        return Err(SlamError::InvalidArgument(format!("{split} split has {n} examples, fewer than one batch of {batch_size}")));
    }
    let mut s = BatchStream::new(n, batch_size, seed)?;
    s.seek(cursor)?;
    Ok(Some(s))
}

/// Model, parameters, optimizer, sampling state and run position.
pub struct Trainer {
    pub model: SlamModel,
    pub store: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub train: TrainConfig,
    pub seed: u64,
    pub state: RunState,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model initialised from `seed`.
    pub fn new(model: ModelConfig, optimizer: OptimizerConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        optimizer.validate()?;
        train.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = SlamModel::new(model, &mut store, &mut init)?;
        let opt = Adam::new(optimizer, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Trainer { model, store, optimizer: opt, train, seed, state: RunState::default(), rng })
    }

    /// Rewinds the stage position and data cursors so that a new schedule
    /// can run on the current parameters and optimizer. The global step is
    /// kept.
    pub fn begin_new_schedule(&mut self) {
        self.state = RunState { global_step: self.state.global_step, ..RunState::default() };
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub(crate) fn set_rng(&mut self, state: &RngState) {
        self.rng = state.restore();
    }

    fn next_batches<'d>(&self, data: &'d TrainData, streams: &mut Streams, kind: StageKind) -> Result<StepBatches> {
        fn pick(split: &[Example], idx: Vec<usize>) -> Vec<&Example> {
            idx.into_iter().map(|i| &split[i]).collect()
        }
        let limits = self.train.limits;
        let mut b = StepBatches::default();
        let objectives = kind.objectives();
        if objectives.contains(&Objective::W2vBert) {
            let s = streams.speech.as_mut().ok_or(SlamError::MissingBatch("speech"))?;
            b.speech = Some(SpeechBatch::from_examples(&pick(&data.speech, s.next_indices()?), limits.max_frames)?);
        }
        if objectives.contains(&Objective::Bert) {
            let s = streams.text.as_mut().ok_or(SlamError::MissingBatch("text"))?;
            b.text = Some(TextBatch::from_examples(&pick(&data.text, s.next_indices()?), limits.max_tokens)?);
        }
        if objectives.contains(&Objective::Tlm) {
            let s = streams.paired.as_mut().ok_or(SlamError::MissingBatch("paired"))?;
            b.paired = Some(PairedBatch::from_examples(&pick(&data.paired, s.next_indices()?), &limits)?);
        }
        if objectives.contains(&Objective::Stm) {
            let s = streams.paired.as_mut().ok_or(SlamError::MissingBatch("paired"))?;
            b.stm = Some(PairedBatch::from_examples(&pick(&data.paired, s.next_indices()?), &limits)?);
        }
        Ok(b)
    }

    /// Runs `schedule` from the current [`RunState`]. Stops early once the
    /// global step reaches `stop_at`. `on_step` sees the trainer after each
    /// update.
    pub fn run(
        &mut self,
        schedule: &StageSchedule,
        data: &TrainData,
        stop_at: Option<u64>,
        on_step: &mut dyn FnMut(&Trainer, &MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.state.stage < schedule.stages().len() {
            let stage_idx = self.state.stage;
            let stage = schedule.stages()[stage_idx].clone();
            if self.state.step_in_stage == 0 {
                log::info!("stage {} ({}): {} steps", stage_idx + 1, stage.kind.name(), stage.steps);
                if stage_idx > 0 && self.train.reset_optimizer_between_stages {
                    self.optimizer.reset();
                }
            }
            let objectives = stage.kind.objectives();
            let bs = self.train.batch_size;
            let mut streams = Streams {
                speech: open_stream(
                    data.speech.len(),
                    bs,
                    stream_seed(self.seed, stage_idx, 0),
                    self.state.speech_cursor,
                    objectives.contains(&Objective::W2vBert),
                    "speech",
                )?,
                text: open_stream(
                    data.text.len(),
                    bs,
                    stream_seed(self.seed, stage_idx, 1),
                    self.state.text_cursor,
                    objectives.contains(&Objective::Bert),
                    "text",
                )?,
                paired: open_stream(
                    data.paired.len(),
                    bs,
                    stream_seed(self.seed, stage_idx, 2),
                    self.state.paired_cursor,
                    objectives.contains(&Objective::Tlm) || objectives.contains(&Objective::Stm),
                    "paired",
                )?,
            };
            while self.state.step_in_stage < stage.steps {
                if stop_at.is_some_and(|s| self.state.global_step >= s) {
                    return Ok(());
                }
                let batches = self.next_batches(data, &mut streams, stage.kind)?;
                let tau = self.model.config.gumbel_tau(self.state.global_step);
                let outcome = train_step(
                    &self.model,
                    &mut self.store,
                    &mut self.optimizer,
                    &self.train,
                    &batches,
                    objectives,
                    tau,
                    &mut self.rng,
                )
                .map_err(|e| match e {
                    SlamError::NonFinite(m) => {
                        SlamError::NonFinite(format!("{m} at step {} ({})", self.state.global_step + 1, stage.kind.name()))
                    }
                    other => other,
                })?;
                self.state.step_in_stage += 1;
                self.state.global_step += 1;
                let cursor = |s: &Option<BatchStream>| s.as_ref().map(BatchStream::cursor).unwrap_or_default();
                self.state.speech_cursor = cursor(&streams.speech);
                self.state.text_cursor = cursor(&streams.text);
                self.state.paired_cursor = cursor(&streams.paired);
                let record = MetricsRecord {
                    step: self.state.global_step,
                    stage: stage.kind.name().to_string(),
                    losses: outcome.losses,
                    grad_norm: outcome.update.grad_norm,
                    lr: outcome.update.lr,
                    code_perplexity: outcome.code_perplexity,
                    mask_rate_text: outcome.mask_rate_text,
                    mask_rate_speech: outcome.mask_rate_speech,
                };
                on_step(self, &record)?;
            }
            self.state = RunState { stage: stage_idx + 1, global_step: self.state.global_step, ..RunState::default() };
        }
        Ok(())
    }
}
