use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ProbeReport;
use crate::data::{Example, Frames, PairedBatch, SpeechBatch, TextBatch};
use crate::error::{Result, SlamError};
use crate::model::{latent_len, SlamModel};
use crate::nn::{Dropout, Linear};
use crate::objectives::{corrupt_text, derangement, predictions, sample_paired_masks, stm_logits, text_mlm_logits, Replacement};
use crate::params::ParamStore;
use crate::tensor::{Graph, NdArray};
use crate::trainer::{Adam, OptimizerConfig};

/// Smallest held-out split the STM probe accepts, in pairs.
pub const MIN_STM_PAIRS: usize = 100;

/// Subsampling factor between acoustic frames and latent frames.
const FRAMES_PER_LATENT: usize = 4;

fn batches<T>(items: &[T], size: usize) -> impl Iterator<Item = &[T]> {
    items.chunks(size.max(1))
}

#[derive(Clone, Debug)]
pub struct StmProbeOptions {
    /// Total pairs, half matched and half mismatched.
    pub pairs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Permute the labels before scoring (label-noise control).
    pub shuffle_labels: bool,
}

impl Default for StmProbeOptions {
    fn default() -> Self {
        StmProbeOptions { pairs: 1000, batch_size: 32, seed: 0, shuffle_labels: false }
    }
}

/// Matched/mismatched classification accuracy over balanced pairs built from
/// `heldout`: every utterance once with its own transcript and once with the
/// transcript of a derangement partner.
pub fn probe_stm(
    model: &SlamModel,
    store: &ParamStore<f32>,
    heldout: &[Example],
    opts: &StmProbeOptions,
) -> Result<ProbeReport> {
    let n = opts.pairs / 2;
    if 2 * n < MIN_STM_PAIRS || heldout.len() < n {
        return Err(SlamError::InvalidArgument(format!(
            "STM probe needs at least {MIN_STM_PAIRS} pairs; asked for {} from {} utterances",
            opts.pairs,
            heldout.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let examples = &heldout[..n];
    let partner = derangement(n, &mut rng)?;

    // (utterance, transcript source, label)
    let mut pairs = Vec::with_capacity(2 * n);
    for i in 0..n {
        pairs.push((i, i, 1usize));
        let same = examples[partner[i]].tokens()? == examples[i].tokens()?;
        pairs.push((i, partner[i], usize::from(same)));
    }

    let mut predicted = Vec::with_capacity(pairs.len());
    for chunk in batches(&pairs, opts.batch_size) {
        let speech: Vec<&Example> = chunk.iter().map(|&(u, _, _)| &examples[u]).collect();
        let speech = SpeechBatch::from_examples(&speech, usize::MAX)?;
        let seqs: Vec<&[usize]> = chunk.iter().map(|&(_, s, _)| examples[s].tokens()).collect::<Result<_>>()?;
        let ids = chunk.iter().map(|&(_, s, _)| examples[s].id).collect();
        let text = TextBatch::from_sequences(&seqs, ids, usize::MAX)?;
        let mut g = Graph::new(store);
        let logits = stm_logits(&mut g, model, &speech, &text, &mut Dropout::off())?;
        predicted.extend(predictions(g.value(logits)));
    }

    let mut labels: Vec<usize> = pairs.iter().map(|&(_, _, l)| l).collect();
    if opts.shuffle_labels {
        labels.shuffle(&mut rng);
    }
    let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let positives = labels.iter().filter(|&&l| l == 1).count();

    let mut report = ProbeReport::new("stm", &model.config, opts.seed);
    report.metrics.insert("accuracy".into(), correct as f64 / pairs.len() as f64);
    report.metrics.insert(
        "predicted_matched_rate".into(),
        predicted.iter().filter(|&&p| p == 1).count() as f64 / pairs.len() as f64,
    );
    report.conditions = vec!["matched".into(), "mismatched".into()];
    report.counts.insert("pairs".into(), pairs.len());
    report.counts.insert("matched".into(), positives);
    report.counts.insert("mismatched".into(), pairs.len() - positives);
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct CrossModalOptions {
    /// Utterances used; `None` takes the whole split.
    pub limit: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CrossModalOptions {
    fn default() -> Self {
        CrossModalOptions { limit: None, batch_size: 32, seed: 0 }
    }
}

/// Frames with the same per-utterance mean and variance as `f`, drawn i.i.d.
fn matched_noise<R: Rng + ?Sized>(f: &Frames, rng: &mut R) -> Frames {
    let n = f.data.len().max(1) as f64;
    let mean = f.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = f.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let normal = Normal::new(mean, var.sqrt()).expect("finite moments");
    Frames { len: f.len, dim: f.dim, data: (0..f.data.len()).map(|_| normal.sample(rng) as f32).collect() }
}

/// Masked-transcript recovery with the true speech and with speech replaced
/// by matched-variance noise. The text mask is the paired single span, with
/// every masked position set to `[MASK]`; speech is left unmasked.
pub fn probe_cross_modal(
    model: &SlamModel,
    store: &ParamStore<f32>,
    heldout: &[Example],
    opts: &CrossModalOptions,
) -> Result<ProbeReport> {
    let n = opts.limit.map_or(heldout.len(), |l| l.min(heldout.len()));
    if n == 0 {
        return Err(SlamError::Empty("cross-modal probe over zero utterances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let examples = &heldout[..n];
    let noisy: Vec<Example> = examples
        .iter()
        .map(|e| Ok(Example { frames: Some(matched_noise(e.frames()?, &mut rng)), ..e.clone() }))
        .collect::<Result<_>>()?;

    let (mut hits_true, mut hits_noise, mut total) = (0usize, 0usize, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in batches(&idx, opts.batch_size) {
        let clean: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let batch = PairedBatch::from_examples(&clean, &crate::data::BatchLimits { max_frames: usize::MAX, max_tokens: usize::MAX })?;
        let masks = batch
            .text
            .mask
            .lengths()
            .iter()
            .zip(&batch.speech.lengths)
            .map(|(&lt, &ls)| Ok(sample_paired_masks(latent_len(ls), lt, &mut rng)?.1))
            .collect::<Result<Vec<_>>>()?;
        let masked = corrupt_text(&batch.text, &masks, model.config.vocab_size, Replacement::MaskOnly, &mut rng)?;
        let targets = masked.target_ids();
        total += targets.len();

        let noise: Vec<&Example> = chunk.iter().map(|&i| &noisy[i]).collect();
        let noise = SpeechBatch::from_examples(&noise, usize::MAX)?;
        for (speech, hits) in [(&batch.speech, &mut hits_true), (&noise, &mut hits_noise)] {
            let mut g = Graph::new(store);
            let frames = g.constant(speech.frames.clone());
            let mut drop = Dropout::off();
            let enc = model.speech_encode(&mut g, frames, &speech.lengths, None, &mut drop)?;
            let w = model.text_encode(&mut g, &masked.input, &batch.text.mask)?;
            let out = model.multimodal_encode(&mut g, Some((enc.c, &enc.mask)), Some((w.w, &w.mask)), true, &mut drop)?;
            let logits = text_mlm_logits(&mut g, model, &out, &masked)?;
            *hits += predictions(g.value(logits)).iter().zip(&targets).filter(|(p, t)| p == t).count();
        }
    }

    let acc_true = hits_true as f64 / total as f64;
    let acc_noise = hits_noise as f64 / total as f64;
    let mut report = ProbeReport::new("crossmodal", &model.config, opts.seed);
    report.metrics.insert("accuracy_true_speech".into(), acc_true);
    report.metrics.insert("accuracy_noise_speech".into(), acc_noise);
    report.metrics.insert("gap".into(), acc_true - acc_noise);
    report.conditions = vec!["true_speech".into(), "noise_speech".into()];
    report.counts.insert("utterances".into(), n);
    report.counts.insert("masked_tokens".into(), total);
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct FrameProbeOptions {
    pub epochs: usize,
    pub batch_rows: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Seed of the randomly initialised baseline model.
    pub baseline_seed: u64,
}

impl Default for FrameProbeOptions {
    fn default() -> Self {
        FrameProbeOptions { epochs: 10, batch_rows: 256, learning_rate: 1e-2, seed: 0, baseline_seed: 1 }
    }
}

/// Frozen speech-branch outputs of the shared encoder, one row per latent
/// frame, with the index of the token slot that owns each frame.
struct FrameFeatures {
    rows: Vec<f32>,
    /// `(utterance, token slot, token id)` per row.
    slots: Vec<(usize, usize, usize)>,
}

fn frame_features(model: &SlamModel, store: &ParamStore<f32>, examples: &[Example], batch: usize) -> Result<FrameFeatures> {
    let d = model.config.model_dim();
    let mut rows = Vec::new();
    let mut slots = Vec::new();
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in batches(&idx, batch) {
        let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let speech = SpeechBatch::from_examples(&refs, usize::MAX)?;
        let mut g = Graph::new(store);
        let frames = g.constant(speech.frames.clone());
        let mut drop = Dropout::off();
        let enc = model.speech_encode(&mut g, frames, &speech.lengths, None, &mut drop)?;
        let out = model.multimodal_encode(&mut g, Some((enc.c, &enc.mask)), None, false, &mut drop)?;
        let h = g.value(out.h).data();
        let t_max = out.seq_len();
        for (b, ex) in refs.iter().enumerate() {
            let tokens = ex.tokens()?;
            let align = ex
                .alignment
                .as_ref()
                .ok_or_else(|| SlamError::InvalidArgument(format!("utterance {} has no alignment", ex.id)))?;
            for t in 0..out.speech_lens[b] {
                let centre = t * FRAMES_PER_LATENT + FRAMES_PER_LATENT / 2 - 1;
                let Some(slot) = align.iter().position(|&(s, e)| s <= centre && centre < e) else { continue };
                let r = (b * t_max + t) * d;
                rows.extend_from_slice(&h[r..r + d]);
                slots.push((chunk[b], slot, tokens[slot]));
            }
        }
    }
    Ok(FrameFeatures { rows, slots })
}

/// Softmax regression from features to token ids trained with Adam; returns
/// the classifier's store and layer.
fn train_linear(features: &FrameFeatures, d: usize, classes: usize, opts: &FrameProbeOptions) -> Result<(ParamStore<f32>, Linear)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f32>::new();
    let layer = Linear::new(&mut store, "probe", d, classes, true, &mut rng)?;
    let opt_cfg = OptimizerConfig { peak_lr: opts.learning_rate, warmup_steps: 1, clip_norm: f64::INFINITY, ..OptimizerConfig::default() };
    let mut adam = Adam::new(opt_cfg, &store);
    let n = features.slots.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_rows.max(1)) {
            let mut x = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                x.extend_from_slice(&features.rows[i * d..(i + 1) * d]);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| features.slots[i].2).collect();
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.constant(NdArray::new(&[chunk.len(), d], x)?);
                let logits = layer.forward(&mut g, x)?;
                let loss = g.cross_entropy(logits, &labels)?;
                g.backward(loss)?
            };
            adam.update(&mut store, &grads)?;
        }
    }
    Ok((store, layer))
}

/// Token error rate of the probe on `features`: frames vote per token slot,
/// ties going to the larger summed log-probability.
fn token_error_rate(store: &ParamStore<f32>, layer: &Linear, features: &FrameFeatures, d: usize) -> Result<(f64, usize)> {
    let n = features.slots.len();
    let mut g = Graph::new(store);
    let x = g.constant(NdArray::new(&[n, d], features.rows.clone())?);
    let logits = layer.forward(&mut g, x)?;
    let logp = g.log_softmax(logits)?;
    let logp = g.value(logp);
    let classes = logp.last_dim();
    let pred = predictions(logp);

    let mut slots: std::collections::BTreeMap<(usize, usize), (usize, Vec<usize>, Vec<f64>)> = Default::default();
    for (i, &(u, s, tok)) in features.slots.iter().enumerate() {
        let e = slots.entry((u, s)).or_insert_with(|| (tok, vec![0; classes], vec![0.0; classes]));
        e.1[pred[i]] += 1;
        for (c, acc) in e.2.iter_mut().enumerate() {
            *acc += logp.data()[i * classes + c] as f64;
        }
    }
    let mut errors = 0;
    for (tok, votes, score) in slots.values() {
        let best = (0..classes)
            .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(score[a].total_cmp(&score[b])))
            .expect("non-empty class set");
        errors += usize::from(best != *tok);
    }
    Ok((errors as f64 / slots.len().max(1) as f64, slots.len()))
}

fn probe_ter(
    model: &SlamModel,
    store: &ParamStore<f32>,
    train: &[Example],
    test: &[Example],
    opts: &FrameProbeOptions,
) -> Result<(f64, usize, usize)> {
    let d = model.config.model_dim();
    let train_f = frame_features(model, store, train, 32)?;
    let test_f = frame_features(model, store, test, 32)?;
    if train_f.slots.is_empty() || test_f.slots.is_empty() {
        return Err(SlamError::Empty("frame probe without aligned frames".into()));
    }
    let (probe_store, layer) = train_linear(&train_f, d, model.config.vocab_size, opts)?;
    let (ter, slots) = token_error_rate(&probe_store, &layer, &test_f, d)?;
    Ok((ter, train_f.slots.len(), slots))
}

/// Linear token classifier on frozen speech-branch features, trained on
/// `train` and scored on `test`, next to the same probe on a randomly
/// initialised model.
pub fn probe_frame_classifier(
    model: &SlamModel,
    store: &ParamStore<f32>,
    train: &[Example],
    test: &[Example],
    opts: &FrameProbeOptions,
) -> Result<ProbeReport> {
    let (ter, train_rows, test_slots) = probe_ter(model, store, train, test, opts)?;
    let mut base_store = ParamStore::<f32>::new();
    let base = SlamModel::new(model.config.clone(), &mut base_store, &mut ChaCha8Rng::seed_from_u64(opts.baseline_seed))?;
    let (base_ter, _, _) = probe_ter(&base, &base_store, train, test, opts)?;

    let mut report = ProbeReport::new("frames", &model.config, opts.seed);
    report.metrics.insert("token_error_rate".into(), ter);
    report.metrics.insert("baseline_token_error_rate".into(), base_ter);
    let reduction = if base_ter > 0.0 { (base_ter - ter) / base_ter } else { 0.0 };
    report.metrics.insert("relative_reduction".into(), reduction);
    report.conditions = vec!["checkpoint".into(), "random_init".into()];
    report.counts.insert("train_frames".into(), train_rows);
    report.counts.insert("test_token_slots".into(), test_slots);
    Ok(report)
}
