use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{PairedBatch, SpeechBatch, TextBatch};
use crate::error::Result;
use crate::model::{latent_len, ModelConfig, QuantizeMode, SlamModel};
use crate::nn::{
    ConformerLayer, ConvModule, Dropout, FeedForward, LayerNorm, Linear, MultiHeadSelfAttention, PaddingMask,
};
use crate::objectives::{
    bert_loss, contrastive_loss, corrupt_text, diversity_loss, make_stm_batch, sample_negatives, sample_paired_masks,
    sample_speech_spans, sample_text_masks, speech_flags, stm_loss, tlm_loss, w2v_bert_loss, MaskSpec, Replacement,
    SPEECH_RATIO, SPEECH_SPAN,
};
use crate::params::ParamStore;
use crate::tensor::gradcheck::{check_inputs, check_params, check_used_params, CheckOptions, CheckReport};
use crate::tensor::{Graph, NdArray, Var};

/// Tolerance for operators that are linear in the checked coordinates.
pub const LINEAR_TOLERANCE: f64 = 1e-6;
pub const SMOOTH_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub model: ModelConfig,
    /// Coordinates sampled per parameter tensor.
    pub per_param: usize,
    pub seed: u64,
    /// Corrupt every analytic backward pass (negative control).
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { model: ModelConfig::default(), per_param: 2, seed: 0, inject_fault: false }
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    NdArray::new(shape, data).expect("shape matches data")
}

/// Contracts `y` with fixed random weights so every element reaches the loss.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randn(g.shape(y), &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Moves every parameter off its initial value so that zero biases and unit
/// gains do not hide errors.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += 0.1 * z;
        }
    }
}

/// Random paired examples at lengths `tokens`, rendered from fresh
/// prototypes.
fn toy_batch(cfg: &ModelConfig, tokens: &[usize], fpt: usize, rng: &mut ChaCha8Rng) -> Result<PairedBatch> {
    let f = cfg.feature_dim;
    let content = cfg.vocab_size - crate::data::NUM_SPECIALS;
    let seqs: Vec<Vec<usize>> = tokens
        .iter()
        .map(|&n| (0..n).map(|_| crate::data::NUM_SPECIALS + rng.random_range(0..content)).collect())
        .collect();
    let lengths: Vec<usize> = tokens.iter().map(|&n| n * fpt).collect();
    let t = lengths.iter().copied().max().unwrap_or(0);
    let frames = randn(&[tokens.len(), t, f], rng);
    let mut frames = frames.cast::<f32>();
    for (b, &l) in lengths.iter().enumerate() {
        frames.data_mut()[(b * t + l) * f..(b + 1) * t * f].iter_mut().for_each(|v| *v = 0.0);
    }
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let ids: Vec<u64> = (0..tokens.len() as u64).collect();
    Ok(PairedBatch {
        speech: SpeechBatch { frames, lengths, ids: ids.clone() },
        text: TextBatch::from_sequences(&refs, ids, usize::MAX)?,
    })
}

fn no_noise() -> Option<&'static mut ChaCha8Rng> {
    None
}

/// Finite-difference checks of every block and of the composite model,
/// all in `f64`.
pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let cfg = &opts.model;
    cfg.validate()?;
    let conf = &cfg.conformer;
    let d = conf.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let linear_opts = CheckOptions { inject_fault: opts.inject_fault, ..CheckOptions::with_tolerance(LINEAR_TOLERANCE) };
    let smooth_opts = CheckOptions {
        eps: 1e-5,
        floor: 1e-6,
        inject_fault: opts.inject_fault,
        ..CheckOptions::with_tolerance(SMOOTH_TOLERANCE)
    };
    let per = opts.per_param;
    let mut reports = Vec::new();

    let (b, t) = (2, 7);
    let mask = PaddingMask::new(vec![t, t - 2], t)?;
    let x = randn(&[b, t, d], &mut rng);

    macro_rules! block {
        ($name:expr, $ctor:expr, $opts:expr, |$g:ident, $blk:ident, $x:ident| $body:expr) => {{
            let mut store = ParamStore::<f64>::new();
            let $blk = $ctor(&mut store, &mut rng)?;
            perturb(&mut store, &mut rng);
            let f = |$g: &mut Graph<'_, f64>| -> Result<Var> {
                let $x = $g.constant(x.clone());
                let y = $body?;
                project($g, y, 1)
            };
            reports.push(check_params($name, &store, per.max(8), &mut rng, $opts, f)?);
        }};
    }

    block!("linear", |s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| Linear::new(s, "l", d, d, true, r), linear_opts, |g, l, x| l.forward(g, x));
    block!("layer_norm", |s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| LayerNorm::new(s, "ln", d, r), smooth_opts, |g, l, x| l.forward(g, x));
    block!("feed_forward", |s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| FeedForward::new(s, "ffn", conf, r), smooth_opts, |g, l, x| l.forward(g, x, &mut Dropout::off()));
    block!(
        "self_attention",
        |s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| MultiHeadSelfAttention::new(s, "mhsa", conf, r),
        smooth_opts,
        |g, l, x| l.forward(g, x, &mask, &mut Dropout::off())
    );
    block!("conv_module", |s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| ConvModule::new(s, "conv", conf, r), smooth_opts, |g, l, x| l.forward(g, x, &mask, &mut Dropout::off()));
    block!(
        "conformer_layer",
        |s: &mut ParamStore<f64>, r: &mut ChaCha8Rng| ConformerLayer::new(s, "layer", conf, r),
        smooth_opts,
        |g, l, x| l.forward(g, x, &mask, &mut Dropout::off())
    );

    // Parameter-free loss terms, differentiated with respect to their inputs.
    {
        let rows = 8;
        let c = randn(&[rows, d], &mut rng);
        let q = randn(&[rows, d], &mut rng);
        let sampling = sample_negatives(&[vec![0, 1, 2, 3, 4], vec![5, 6, 7]], 3, &mut rng);
        let kappa = cfg.contrastive_temperature.max(0.5);
        reports.push(check_inputs("contrastive_loss", &[c, q], smooth_opts, |g, v| {
            Ok(contrastive_loss(g, v[0], v[1], &sampling, kappa)?.expect("anchors present"))
        })?);
        let gc = cfg.codebook_groups;
        let logits = randn(&[rows * gc, cfg.codebook_size], &mut rng);
        let valid: Vec<usize> = (0..rows - 1).collect();
        reports.push(check_inputs("diversity_loss", &[logits], smooth_opts, |g, v| {
            let p = g.softmax(v[0])?;
            Ok(diversity_loss(g, p, &valid, gc)?.0)
        })?);
    }

    // Model-level blocks on a small paired batch.
    let mut store = ParamStore::<f64>::new();
    let model = SlamModel::new(cfg.clone(), &mut store, &mut rng)?;
    perturb(&mut store, &mut rng);
    let batch = toy_batch(cfg, &[4, 3], 8, &mut rng)?;
    let frames = batch.speech.frames.cast::<f64>();
    let lens = batch.speech.lengths.clone();
    let t_lat = latent_len(frames.shape()[1]);
    let speech_masks: Vec<MaskSpec> =
        lens.iter().map(|&l| sample_speech_spans(latent_len(l), SPEECH_RATIO, SPEECH_SPAN, true, &mut rng)).collect();
    let flags = speech_flags(&speech_masks, t_lat);
    let text_masks = sample_text_masks(&batch.text, &mut rng);
    let masked_text = corrupt_text(&batch.text, &text_masks, cfg.vocab_size, Replacement::Bert, &mut rng)?;
    let mut paired_speech = Vec::new();
    let mut paired_text = Vec::new();
    for (&ls, &lt) in lens.iter().zip(batch.text.mask.lengths()) {
        let (s, t) = sample_paired_masks(latent_len(ls), lt, &mut rng)?;
        paired_speech.push(s);
        paired_text.push(t);
    }
    let paired_masked = corrupt_text(&batch.text, &paired_text, cfg.vocab_size, Replacement::Bert, &mut rng)?;
    let stm = make_stm_batch(&batch, 0.5, &mut rng)?;
    let neg_seed = rng.random::<u64>();

    let mut run = |name: &str, tol: CheckOptions, f: &dyn Fn(&mut Graph<'_, f64>) -> Result<Var>| -> Result<()> {
        reports.push(check_used_params(name, &store, per, &mut rng, tol, f)?);
        Ok(())
    };

    run("subsampler", smooth_opts, &|g| {
        let x = g.constant(frames.clone());
        let (y, _) = model.speech_latents(g, x, &lens)?;
        project(g, y, 2)
    })?;
    run("speech_encoder", smooth_opts, &|g| {
        let x = g.constant(frames.clone());
        let enc = model.speech_encode(g, x, &lens, Some(&flags), &mut Dropout::off())?;
        project(g, enc.c, 3)
    })?;
    run("text_encoder", smooth_opts, &|g| {
        let enc = model.text_encode(g, &batch.text.tokens, &batch.text.mask)?;
        project(g, enc.w, 4)
    })?;
    run("shared_encoder", smooth_opts, &|g| {
        let x = g.constant(frames.clone());
        let enc = model.speech_encode(g, x, &lens, None, &mut Dropout::off())?;
        let w = model.text_encode(g, &batch.text.tokens, &batch.text.mask)?;
        let out = model.multimodal_encode(g, Some((enc.c, &enc.mask)), Some((w.w, &w.mask)), true, &mut Dropout::off())?;
        project(g, out.h, 5)
    })?;
    run("quantizer", smooth_opts, &|g| {
        let x = g.constant(frames.clone());
        let (lat, _) = model.speech_latents(g, x, &lens)?;
        let quant = model.quantize(g, lat, QuantizeMode { tau: 1.5, noise: no_noise(), hard: false })?;
        project(g, quant.q, 6)
    })?;
    run("bert_loss", smooth_opts, &|g| bert_loss(g, &model, &batch.text, &masked_text, &mut Dropout::off()))?;
    let w2v = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let mut negatives = ChaCha8Rng::seed_from_u64(neg_seed);
        let out = w2v_bert_loss(
            g,
            &model,
            &batch.speech,
            &speech_masks,
            QuantizeMode { tau: 1.5, noise: no_noise(), hard: false },
            &mut negatives,
            &mut Dropout::off(),
        )?;
        let w = &model.config.loss_weights;
        let mut terms = vec![(out.mlm, w.w2v_mlm), (out.diversity, w.diversity)];
        if let Some(c) = out.contrastive {
            terms.push((c, w.w2v_contrastive));
        }
        weighted(g, &terms)
    };
    run("w2v_bert_loss", smooth_opts, &w2v)?;
    let tlm = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let out = tlm_loss(g, &model, &batch, &paired_speech, &paired_masked, &mut Dropout::off())?;
        let w = &model.config.loss_weights;
        weighted(g, &[(out.text, w.tlm_text), (out.speech, w.tlm_speech)])
    };
    run("tlm_loss", smooth_opts, &tlm)?;
    let stm_f = |g: &mut Graph<'_, f64>| -> Result<Var> {
        Ok(stm_loss(g, &model, &batch.speech, &stm, &mut Dropout::off())?.loss)
    };
    run("stm_loss", smooth_opts, &stm_f)?;
    run("composite_model", smooth_opts, &|g| {
        let w = &model.config.loss_weights;
        let bert = bert_loss(g, &model, &batch.text, &masked_text, &mut Dropout::off())?;
        let bert = g.scale(bert, w.bert)?;
        let parts = [bert, w2v(g)?, tlm(g)?, stm_f(g)?];
        let stm_w = g.scale(parts[3], w.stm)?;
        let a = g.add(parts[0], parts[1])?;
        let b = g.add(parts[2], stm_w)?;
        g.add(a, b)
    })?;
    Ok(reports)
}

fn weighted(g: &mut Graph<'_, f64>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("at least one term"))
}
