//! Mask samplers and the four pre-training losses.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PairedBatch, SpeechBatch, TextBatch, MASK, NUM_SPECIALS};
use crate::error::{Result, SlamError};
use crate::model::{latent_len, LossWeights, MultimodalOutput, QuantizeMode, SlamModel};
use crate::nn::{Dropout, PaddingMask};
use crate::tensor::{Graph, NdArray, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Speech,
    Text,
}

/// Masked positions of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub modality: Modality,
    /// Valid length of the sequence the mask was drawn for.
    pub len: usize,
    /// Sorted, distinct masked positions.
    pub positions: Vec<usize>,
    pub ratio: f64,
    pub span: usize,
    pub single_span: bool,
}

impl MaskSpec {
    fn from_flags(modality: Modality, flags: &[bool], ratio: f64, span: usize, single_span: bool) -> Self {
        MaskSpec {
            modality,
            len: flags.len(),
            positions: flags.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect(),
            ratio,
            span,
            single_span,
        }
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.len];
        for &p in &self.positions {
            f[p] = true;
        }
        f
    }

    pub fn coverage(&self) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            self.positions.len() as f64 / self.len as f64
        }
    }

    pub fn is_contiguous(&self) -> bool {
        self.positions.windows(2).all(|w| w[1] == w[0] + 1)
    }
}

/// Non-overlapping spans of length `span`. The span count is
/// `round(ratio·len/span)`; when that is zero a single span of
/// `max(1, round(ratio·len))` tokens is used instead.
pub fn sample_text_spans<R: Rng + ?Sized>(len: usize, ratio: f64, span: usize, rng: &mut R) -> MaskSpec {
    let mut flags = vec![false; len];
    if len > 0 && span > 0 {
        let n_spans = (ratio * len as f64 / span as f64).round() as usize;
        let (n, l) = if n_spans == 0 {
            (1, ((ratio * len as f64).round() as usize).clamp(1, len))
        } else {
            let l = span.min(len);
            (n_spans.min(len / l), l)
        };
        // Stars and bars: choose n gap slots among free + n.
        let free = len - n * l;
        let mut slots = index::sample(rng, free + n, n).into_vec();
        slots.sort_unstable();
        for (i, c) in slots.into_iter().enumerate() {
            let start = c + i * (l - 1);
            flags[start..start + l].iter_mut().for_each(|f| *f = true);
        }
    }
    MaskSpec::from_flags(Modality::Text, &flags, ratio, span, false)
}

/// Expected fraction of `len` positions covered by `k` distinct span starts
/// of length `span`, tabulated for `k = 0..=n`.
fn expected_coverage_table(len: usize, span: usize) -> Vec<f64> {
    let n = len - span + 1;
    // Number of starts covering each position.
    let windows: Vec<usize> = (0..len).map(|p| p.min(n - 1) + 1 - p.saturating_sub(span - 1)).collect();
    // miss[p] = C(n - w_p, k) / C(n, k), updated incrementally in k.
    let mut miss = vec![1.0f64; len];
    let mut table = Vec::with_capacity(n + 1);
    table.push(0.0);
    for k in 0..n {
        let mut covered = 0.0;
        for (m, &w) in miss.iter_mut().zip(&windows) {
            *m = if n - k <= w { 0.0 } else { *m * (n - w - k) as f64 / (n - k) as f64 };
            covered += 1.0 - *m;
        }
        table.push(covered / len as f64);
    }
    table
}

/// Span starts drawn uniformly without replacement; spans may overlap. The
/// number of starts is randomised between the two neighbouring counts so
/// that the expected coverage equals `ratio`.
pub fn sample_speech_spans<R: Rng + ?Sized>(
    len: usize,
    ratio: f64,
    span: usize,
    allow_overlap: bool,
    rng: &mut R,
) -> MaskSpec {
    if !allow_overlap {
        let mut m = sample_text_spans(len, ratio, span, rng);
        m.modality = Modality::Speech;
        return m;
    }
    let mut flags = vec![false; len];
    if len > 0 && span >= len {
        flags.iter_mut().for_each(|f| *f = true);
    } else if len > 0 && span > 0 && ratio > 0.0 {
        let table = expected_coverage_table(len, span);
        let n = len - span + 1;
        let k = match table.iter().position(|&e| e >= ratio) {
            None => n,
            Some(0) => 0,
            Some(hi) => {
                let (lo_e, hi_e) = (table[hi - 1], table[hi]);
                let p_hi = (ratio - lo_e) / (hi_e - lo_e);
                if rng.random::<f64>() < p_hi {
                    hi
                } else {
                    hi - 1
                }
            }
        };
        for s in index::sample(rng, n, k) {
            flags[s..s + span].iter_mut().for_each(|f| *f = true);
        }
    }
    MaskSpec::from_flags(Modality::Speech, &flags, ratio, span, false)
}

pub const TEXT_RATIO: f64 = 0.15;
pub const TEXT_SPAN: usize = 5;
pub const SPEECH_RATIO: f64 = 0.5;
pub const SPEECH_SPAN: usize = 10;
pub const PAIRED_TEXT_RATIO: f64 = 0.5;
pub const PAIRED_SPEECH_RATIO: f64 = 0.75;

/// Paired-data masks: one contiguous text span of `round(0.5·T')` with a
/// uniform start, and speech spans targeting 75% coverage.
pub fn sample_paired_masks<R: Rng + ?Sized>(
    speech_len: usize,
    text_len: usize,
    rng: &mut R,
) -> Result<(MaskSpec, MaskSpec)> {
    if speech_len < 2 || text_len < 2 {
        return Err(SlamError::InvalidArgument(format!(
            "paired masking needs both lengths >= 2, got speech {speech_len} text {text_len}"
        )));
    }
    let speech = sample_speech_spans(speech_len, PAIRED_SPEECH_RATIO, SPEECH_SPAN, true, rng);
    let l = ((PAIRED_TEXT_RATIO * text_len as f64).round() as usize).clamp(1, text_len);
    let start = rng.random_range(0..=text_len - l);
    let mut flags = vec![false; text_len];
    flags[start..start + l].iter_mut().for_each(|f| *f = true);
    let text = MaskSpec::from_flags(Modality::Text, &flags, PAIRED_TEXT_RATIO, l, true);
    Ok((speech, text))
}

/// How masked text positions are corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    /// 80% [MASK], 10% random content token, 10% unchanged.
    Bert,
    /// Every masked position becomes [MASK].
    MaskOnly,
}

/// Text batch with corrupted inputs and the original tokens at masked
/// positions.
#[derive(Clone, Debug)]
pub struct MaskedText {
    /// Row-major `[B, T']` corrupted ids.
    pub input: Vec<usize>,
    /// `(row, position, original token)` for each masked position.
    pub targets: Vec<(usize, usize, usize)>,
}

impl MaskedText {
    pub fn target_ids(&self) -> Vec<usize> {
        self.targets.iter().map(|&(_, _, t)| t).collect()
    }
}

pub fn corrupt_text<R: Rng + ?Sized>(
    batch: &TextBatch,
    masks: &[MaskSpec],
    vocab_size: usize,
    replacement: Replacement,
    rng: &mut R,
) -> Result<MaskedText> {
    if masks.len() != batch.batch_size() {
        return Err(SlamError::Shape(format!("{} text masks for {} rows", masks.len(), batch.batch_size())));
    }
    let t = batch.mask.max_len();
    let mut input = batch.tokens.clone();
    let mut targets = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        if m.len != batch.mask.lengths()[b] {
            return Err(SlamError::Shape(format!("text mask for length {} on row of length {}", m.len, batch.mask.lengths()[b])));
        }
        for &p in &m.positions {
            let orig = batch.tokens[b * t + p];
            targets.push((b, p, orig));
            input[b * t + p] = match replacement {
                Replacement::MaskOnly => MASK,
                Replacement::Bert => {
                    let u: f64 = rng.random();
                    if u < 0.8 {
                        MASK
                    } else if u < 0.9 {
                        rng.random_range(NUM_SPECIALS..vocab_size)
                    } else {
                        orig
                    }
                }
            };
        }
    }
    Ok(MaskedText { input, targets })
}

/// Draws a text mask per row of `batch`.
pub fn sample_text_masks<R: Rng + ?Sized>(batch: &TextBatch, rng: &mut R) -> Vec<MaskSpec> {
    batch.mask.lengths().iter().map(|&l| sample_text_spans(l, TEXT_RATIO, TEXT_SPAN, rng)).collect()
}

/// Draws a latent-frame mask per utterance of `batch`.
pub fn sample_speech_masks<R: Rng + ?Sized>(batch: &SpeechBatch, rng: &mut R) -> Vec<MaskSpec> {
    batch
        .lengths
        .iter()
        .map(|&l| sample_speech_spans(latent_len(l), SPEECH_RATIO, SPEECH_SPAN, true, rng))
        .collect()
}

/// Flattens per-utterance masks to `[B·T_lat]` flags.
pub fn speech_flags(masks: &[MaskSpec], t_lat: usize) -> Vec<bool> {
    let mut flags = vec![false; masks.len() * t_lat];
    for (b, m) in masks.iter().enumerate() {
        for &p in &m.positions {
            flags[b * t_lat + p] = true;
        }
    }
    flags
}

// ----------------------------------------------------------------------
// Losses
// ----------------------------------------------------------------------

/// Anchor rows and their candidate rows (positive first) for the
/// contrastive loss. Missing negatives are `None` and masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSampling {
    pub anchors: Vec<usize>,
    pub candidates: Vec<Option<usize>>,
    pub k: usize,
}

/// For each masked row, samples up to `k` distractors among the other masked
/// rows of the same utterance. Utterances with fewer than two masked rows are
/// skipped with a warning.
pub fn sample_negatives<R: Rng + ?Sized>(masked_rows: &[Vec<usize>], k: usize, rng: &mut R) -> NegativeSampling {
    let mut anchors = Vec::new();
    let mut candidates = Vec::new();
    for (u, rows) in masked_rows.iter().enumerate() {
        if rows.len() < 2 {
            if !rows.is_empty() {
                log::warn!("utterance {u} has {} masked position(s); skipped in contrastive loss", rows.len());
            }
            continue;
        }
        let m = rows.len();
        let take = k.min(m - 1);
        for (i, &row) in rows.iter().enumerate() {
            anchors.push(row);
            candidates.push(Some(row));
            for j in index::sample(rng, m - 1, take) {
                let j = if j >= i { j + 1 } else { j };
                candidates.push(Some(rows[j]));
            }
            candidates.extend(std::iter::repeat_n(None, k - take));
        }
    }
    NegativeSampling { anchors, candidates, k }
}

/// Mean of `-log softmax(cos(c, ·)/κ)[positive]` over anchors; `c` and `q`
/// are `[rows, d]`. Returns `None` when there are no anchors.
pub fn contrastive_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    c: Var,
    q: Var,
    sampling: &NegativeSampling,
    kappa: f64,
) -> Result<Option<Var>> {
    let n = sampling.anchors.len();
    if n == 0 {
        return Ok(None);
    }
    let width = sampling.k + 1;
    let anchor_idx: Vec<Option<usize>> =
        sampling.anchors.iter().flat_map(|&a| std::iter::repeat_n(Some(a), width)).collect();
    let a = g.gather_rows(c, &anchor_idx)?;
    let b = g.gather_rows(q, &sampling.candidates)?;
    let sims = g.cosine_rows(a, b)?;
    let logits = g.scale(sims, 1.0 / kappa)?;
    let logits = g.reshape(logits, &[n, width])?;
    let missing: Vec<bool> = sampling.candidates.iter().map(Option::is_none).collect();
    let logits = if missing.contains(&true) { g.masked_fill(logits, &missing, f64::NEG_INFINITY)? } else { logits };
    Ok(Some(g.cross_entropy(logits, &vec![0; n])?))
}

/// `(1/G)·Σ_g (1 − exp(H(p̄_g))/V)` where `p̄_g` averages the rows of
/// `assign_probs` (`[R·G, V]`) listed in `rows` (indices into `0..R`).
/// Also returns the per-group perplexities `exp(H(p̄_g))`.
pub fn diversity_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    assign_probs: Var,
    rows: &[usize],
    groups: usize,
) -> Result<(Var, Vec<f64>)> {
    if rows.is_empty() {
        return Err(SlamError::Empty("diversity loss over zero positions".into()));
    }
    let v = g.value(assign_probs).last_dim();
    let total = g.value(assign_probs).numel() / (groups * v);
    let flat = g.reshape(assign_probs, &[total, groups * v])?;
    let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
    let picked = g.gather_rows(flat, &idx)?;
    let summed = g.sum_rows(picked)?;
    let mean = g.scale(summed, 1.0 / rows.len() as f64)?;
    let guarded = g.affine(mean, 1.0, 1e-12)?;
    let log = g.log(guarded)?;
    let plogp = g.mul(mean, log)?;
    let plogp = g.reshape(plogp, &[groups, v])?;
    let neg_entropy = g.sum_last(plogp)?;
    let entropy = g.scale(neg_entropy, -1.0)?;
    let perplexity = g.exp(entropy)?;
    let per_group: Vec<f64> = g.value(perplexity).to_f64_vec();
    let total_ppl = g.sum(perplexity)?;
    let loss = g.affine(total_ppl, -1.0 / (groups * v) as f64, 1.0)?;
    Ok((loss, per_group))
}

/// Text logits `[n, V_text]` at the masked positions of a multimodal output.
pub fn text_mlm_logits<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    out: &MultimodalOutput,
    masked: &MaskedText,
) -> Result<Var> {
    if masked.targets.is_empty() {
        return Err(SlamError::Empty("text MLM with zero masked positions".into()));
    }
    let rows: Vec<usize> = masked.targets.iter().map(|&(b, t, _)| out.text_row(b, t)).collect();
    let h = model.gather(g, out.h, &rows)?;
    model.mlm_text_head(g, h)
}

fn text_mlm<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    out: &MultimodalOutput,
    masked: &MaskedText,
) -> Result<Var> {
    let logits = text_mlm_logits(g, model, out, masked)?;
    g.cross_entropy(logits, &masked.target_ids())
}

/// Speech code cross-entropy at `(b, t)` positions given flat code targets
/// `[B·T_lat·G]`.
fn speech_mlm<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    out: &MultimodalOutput,
    positions: &[(usize, usize)],
    t_lat: usize,
    code_targets: &[usize],
) -> Result<Var> {
    if positions.is_empty() {
        return Err(SlamError::Empty("speech MLM with zero masked positions".into()));
    }
    let groups = model.config.codebook_groups;
    let rows: Vec<usize> = positions.iter().map(|&(b, t)| out.speech_row(b, t)).collect();
    let h = model.gather(g, out.h, &rows)?;
    let logits = model.mlm_speech_head(g, h)?;
    let logits = g.reshape(logits, &[positions.len() * groups, model.config.codebook_size])?;
    let targets: Vec<usize> = positions
        .iter()
        .flat_map(|&(b, t)| (0..groups).map(move |k| code_targets[(b * t_lat + t) * groups + k]))
        .collect();
    g.cross_entropy(logits, &targets)
}

fn masked_positions(masks: &[MaskSpec]) -> Vec<(usize, usize)> {
    masks.iter().enumerate().flat_map(|(b, m)| m.positions.iter().map(move |&t| (b, t))).collect()
}

fn frames_var<S: Scalar>(g: &mut Graph<'_, S>, batch: &SpeechBatch) -> Var {
    g.constant(batch.frames.cast::<S>())
}

/// Masked language modelling on a text-only batch: mean cross-entropy over
/// masked positions.
pub fn bert_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    batch: &TextBatch,
    masked: &MaskedText,
    drop: &mut Dropout,
) -> Result<Var> {
    if masked.targets.is_empty() {
        return Err(SlamError::Empty("BERT loss with zero masked positions".into()));
    }
    let w = model.text_encode(g, &masked.input, &batch.mask)?;
    let out = model.multimodal_encode(g, None, Some((w.w, &w.mask)), false, drop)?;
    text_mlm(g, model, &out, masked)
}

pub struct W2vOutput {
    /// `None` when no utterance had two masked positions.
    pub contrastive: Option<Var>,
    pub mlm: Var,
    pub diversity: Var,
    pub perplexity: Vec<f64>,
    /// Code targets `[B·T_lat·G]`.
    pub targets: Vec<usize>,
}

/// Contrastive, masked code prediction and diversity terms on a speech-only
/// batch. `masks` are latent-frame masks, one per utterance.
pub fn w2v_bert_loss<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    batch: &SpeechBatch,
    masks: &[MaskSpec],
    quantize: QuantizeMode<'_, R>,
    negatives_rng: &mut R,
    drop: &mut Dropout,
) -> Result<W2vOutput> {
    let positions = masked_positions(masks);
    if positions.is_empty() {
        return Err(SlamError::Empty("w2v-BERT loss with zero masked positions".into()));
    }
    let frames = frames_var(g, batch);
    let t_lat = latent_len(batch.frames.shape()[1]);
    let flags = speech_flags(masks, t_lat);
    let enc = model.speech_encode(g, frames, &batch.lengths, Some(&flags), drop)?;
    check_mask_lengths(masks, &enc.mask)?;

    let quant = model.quantize(g, enc.x, quantize)?;
    let targets = model.code_targets(g, &quant);

    let d = model.config.model_dim();
    let rows = batch.batch_size() * t_lat;
    let c_flat = g.reshape(enc.c, &[rows, d])?;
    let q_flat = g.reshape(quant.q, &[rows, d])?;
    let per_utt: Vec<Vec<usize>> =
        masks.iter().enumerate().map(|(b, m)| m.positions.iter().map(|&t| b * t_lat + t).collect()).collect();
    let sampling = sample_negatives(&per_utt, model.config.num_negatives, negatives_rng);
    let contrastive = contrastive_loss(g, c_flat, q_flat, &sampling, model.config.contrastive_temperature)?;

    let out = model.multimodal_encode(g, Some((enc.c, &enc.mask)), None, false, drop)?;
    let mlm = speech_mlm(g, model, &out, &positions, t_lat, &targets)?;

    let valid: Vec<usize> = (0..batch.batch_size())
        .flat_map(|b| (0..enc.mask.lengths()[b]).map(move |t| b * t_lat + t))
        .collect();
    let (diversity, perplexity) = diversity_loss(g, quant.assign_probs, &valid, model.config.codebook_groups)?;
    Ok(W2vOutput { contrastive, mlm, diversity, perplexity, targets })
}

fn check_mask_lengths(masks: &[MaskSpec], mask: &PaddingMask) -> Result<()> {
    if masks.len() != mask.batch() || masks.iter().zip(mask.lengths()).any(|(m, &l)| m.len != l) {
        return Err(SlamError::Shape("speech masks do not match latent lengths".into()));
    }
    Ok(())
}

pub struct TlmOutput {
    pub text: Var,
    pub speech: Var,
}

/// Masked text and masked speech-code prediction on the CLS-prefixed
/// concatenation of paired speech and text.
pub fn tlm_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    batch: &PairedBatch,
    speech_masks: &[MaskSpec],
    masked_text: &MaskedText,
    drop: &mut Dropout,
) -> Result<TlmOutput> {
    let positions = masked_positions(speech_masks);
    if positions.is_empty() || masked_text.targets.is_empty() {
        return Err(SlamError::Empty("TLM loss with zero masked positions".into()));
    }
    let frames = frames_var(g, &batch.speech);
    let t_lat = latent_len(batch.speech.frames.shape()[1]);
    let flags = speech_flags(speech_masks, t_lat);
    let enc = model.speech_encode(g, frames, &batch.speech.lengths, Some(&flags), drop)?;
    check_mask_lengths(speech_masks, &enc.mask)?;
    let logits = model.code_logits(g, enc.x)?;
    let targets = crate::model::argmax_rows(g.value(logits));

    let w = model.text_encode(g, &masked_text.input, &batch.text.mask)?;
    let out = model.multimodal_encode(g, Some((enc.c, &enc.mask)), Some((w.w, &w.mask)), true, drop)?;
    let text = text_mlm(g, model, &out, masked_text)?;
    let speech = speech_mlm(g, model, &out, &positions, t_lat, &targets)?;
    Ok(TlmOutput { text, speech })
}

/// A uniformly random permutation without fixed points.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(SlamError::InvalidArgument(format!("no derangement of {n} element(s)")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

/// Paired batch in which some transcripts are swapped for another
/// example's, with matched (1) / mismatched (0) labels.
#[derive(Clone, Debug)]
pub struct StmBatch {
    pub text: TextBatch,
    pub labels: Vec<usize>,
}

/// Replaces `round(ratio·B)` transcripts (at least one, at most `B − 1`)
/// with those of a derangement of the batch. A swapped transcript that is
/// identical in content keeps the matched label.
pub fn make_stm_batch<R: Rng + ?Sized>(batch: &PairedBatch, negative_ratio: f64, rng: &mut R) -> Result<StmBatch> {
    let b = batch.batch_size();
    if b < 2 {
        return Err(SlamError::InvalidArgument("STM needs a batch of at least 2 pairs".into()));
    }
    let n_neg = ((negative_ratio * b as f64).round() as usize).clamp(1, b - 1);
    let sigma = derangement(b, rng)?;
    let negatives = index::sample(rng, b, n_neg).into_vec();
    let mut source: Vec<usize> = (0..b).collect();
    for &i in &negatives {
        source[i] = sigma[i];
    }
    let rows: Vec<&[usize]> = source.iter().map(|&s| batch.text.row(s)).collect();
    let labels = (0..b).map(|i| usize::from(rows[i] == batch.text.row(i))).collect();
    let ids = source.iter().map(|&s| batch.text.ids[s]).collect();
    let text = TextBatch::from_sequences(&rows, ids, usize::MAX)?;
    Ok(StmBatch { text, labels })
}

pub struct StmOutput {
    pub loss: Var,
    /// `[B, 2]` logits; column 1 is "matched".
    pub logits: Var,
}

/// Cross-entropy of the matched/mismatched prediction read from CLS. No
/// masking is applied.
pub fn stm_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    speech: &SpeechBatch,
    stm: &StmBatch,
    drop: &mut Dropout,
) -> Result<StmOutput> {
    let logits = stm_logits(g, model, speech, &stm.text, drop)?;
    let loss = g.cross_entropy(logits, &stm.labels)?;
    Ok(StmOutput { loss, logits })
}

/// STM logits `[B, 2]` for speech paired with the given transcripts.
pub fn stm_logits<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &SlamModel,
    speech: &SpeechBatch,
    text: &TextBatch,
    drop: &mut Dropout,
) -> Result<Var> {
    let frames = frames_var(g, speech);
    let enc = model.speech_encode(g, frames, &speech.lengths, None, drop)?;
    let w = model.text_encode(g, &text.tokens, &text.mask)?;
    let out = model.multimodal_encode(g, Some((enc.c, &enc.mask)), Some((w.w, &w.mask)), true, drop)?;
    let rows: Vec<usize> = (0..speech.batch_size()).map(|b| out.cls_row(b).expect("cls present")).collect();
    let h = model.gather(g, out.h, &rows)?;
    model.stm_logits(g, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Bert,
    W2vBert,
    Tlm,
    Stm,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Bert, Objective::W2vBert, Objective::Tlm, Objective::Stm];
}

/// Named scalar losses of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub bert: f64,
    pub w2v_contrastive: f64,
    pub w2v_mlm: f64,
    pub diversity: f64,
    pub tlm_text: f64,
    pub tlm_speech: f64,
    pub stm: f64,
    pub total: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 7] =
        ["bert", "w2v_contrastive", "w2v_mlm", "diversity", "tlm_text", "tlm_speech", "stm"];

    pub fn values(&self) -> [f64; 7] {
        [self.bert, self.w2v_contrastive, self.w2v_mlm, self.diversity, self.tlm_text, self.tlm_speech, self.stm]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|&n| n == name).map(|i| self.values()[i])
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let weights = [w.bert, w.w2v_contrastive, w.w2v_mlm, w.diversity, w.tlm_text, w.tlm_speech, w.stm];
        self.values().iter().zip(weights).map(|(l, w)| l * w).sum()
    }

    /// Recomputes `total` from the individual terms.
    pub fn finalize(&mut self, w: &LossWeights) -> Result<()> {
        self.total = self.weighted_total(w);
        if let Some(i) = self.values().iter().position(|v| !v.is_finite()) {
            return Err(SlamError::NonFinite(format!("loss {}", Self::NAMES[i])));
        }
        if !self.total.is_finite() {
            return Err(SlamError::NonFinite("total loss".into()));
        }
        Ok(())
    }
}

/// Argmax predictions of `[n, V]` logits.
pub fn predictions<S: Scalar>(logits: &NdArray<S>) -> Vec<usize> {
    crate::model::argmax_rows(logits)
}
