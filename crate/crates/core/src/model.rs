//! Speech encoder, text encoder, shared multimodal encoder, quantizer and
//! output heads.
//!
//! Parameter names are grouped by owner: `speech.*` and `quantizer.*` belong
//! to the speech branch, `text.*` to the text branch, `shared.*` to the
//! multimodal encoder and `heads.*` to the objective-specific projections.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::nn::{tiled_pe, ConformerConfig, ConformerStack, Dropout, LayerNorm, Linear, PaddingMask};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Graph, NdArray, Scalar, Var};

/// Relative weight of each objective in the aggregated loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bert: f64,
    pub w2v_contrastive: f64,
    pub w2v_mlm: f64,
    pub diversity: f64,
    pub tlm_text: f64,
    pub tlm_speech: f64,
    pub stm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bert: 1.0,
            w2v_contrastive: 1.0,
            w2v_mlm: 1.0,
            diversity: 0.1,
            tlm_text: 1.0,
            tlm_speech: 1.0,
            stm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub n_speech_layers: usize,
    pub n_shared_layers: usize,
    pub vocab_size: usize,
    pub codebook_groups: usize,
    pub codebook_size: usize,
    pub subsample_channels: usize,
    pub conformer: ConformerConfig,
    pub contrastive_temperature: f64,
    pub num_negatives: usize,
    pub gumbel_tau_start: f64,
    pub gumbel_tau_end: f64,
    pub gumbel_tau_decay: f64,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            n_speech_layers: 2,
            n_shared_layers: 4,
            vocab_size: 64,
            codebook_groups: 2,
            codebook_size: 32,
            subsample_channels: 32,
            conformer: ConformerConfig::default(),
            contrastive_temperature: 0.1,
            num_negatives: 10,
            gumbel_tau_start: 2.0,
            gumbel_tau_end: 0.5,
            gumbel_tau_decay: 0.995,
            loss_weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.conformer.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.conformer.validate()?;
        let bad = |m: String| Err(SlamError::Config(m));
        if self.feature_dim == 0 || self.subsample_channels == 0 {
            return bad("feature_dim and subsample_channels must be positive".into());
        }
        if self.n_shared_layers == 0 {
            return bad("n_shared_layers must be at least 1".into());
        }
        if self.vocab_size <= crate::data::NUM_SPECIALS {
            return bad(format!("vocab_size {} leaves no room for content symbols", self.vocab_size));
        }
        if self.codebook_groups == 0 || self.model_dim() % self.codebook_groups != 0 {
            return bad(format!(
                "model_dim {} not divisible by codebook_groups {}",
                self.model_dim(),
                self.codebook_groups
            ));
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2".into());
        }
        if self.model_dim() % 2 != 0 {
            return bad("model_dim must be even for positional encodings".into());
        }
        if self.contrastive_temperature <= 0.0 || self.num_negatives == 0 {
            return bad("contrastive temperature and negative count must be positive".into());
        }
        if !(self.gumbel_tau_end > 0.0 && self.gumbel_tau_start >= self.gumbel_tau_end)
            || !(0.0..=1.0).contains(&self.gumbel_tau_decay)
        {
            return bad("gumbel temperature schedule must satisfy start >= end > 0, decay in [0,1]".into());
        }
        Ok(())
    }

    /// Gumbel-softmax temperature after `step` updates.
    pub fn gumbel_tau(&self, step: u64) -> f64 {
        (self.gumbel_tau_start * self.gumbel_tau_decay.powf(step as f64)).max(self.gumbel_tau_end)
    }

    /// Frequency bins left after the two stride-2 convolutions.
    pub fn subsampled_freq(&self) -> usize {
        self.feature_dim.div_ceil(2).div_ceil(2)
    }
}

/// Length after one same-padded stride-2 convolution.
fn halve(t: usize) -> usize {
    t.div_ceil(2)
}

/// Latent length for `frames` input frames.
pub fn latent_len(frames: usize) -> usize {
    halve(halve(frames))
}

pub struct SpeechEncoderOutput {
    /// Unmasked latent features `[B, T_lat, d]`.
    pub x: Var,
    /// Contextual features `[B, T_lat, d]`, layer-normalised.
    pub c: Var,
    pub mask: PaddingMask,
}

pub struct TextEncoderOutput {
    pub w: Var,
    pub mask: PaddingMask,
}

/// Multimodal encoder output with the row layout of each example.
///
/// Example `b` occupies `[cls?, speech valid, text valid, padding]`.
pub struct MultimodalOutput {
    pub h: Var,
    pub mask: PaddingMask,
    pub has_cls: bool,
    pub speech_lens: Vec<usize>,
    pub text_lens: Vec<usize>,
}

impl MultimodalOutput {
    pub fn seq_len(&self) -> usize {
        self.mask.max_len()
    }

    fn row(&self, b: usize, t: usize) -> usize {
        b * self.seq_len() + t
    }

    pub fn cls_row(&self, b: usize) -> Option<usize> {
        self.has_cls.then(|| self.row(b, 0))
    }

    /// Flat row of speech position `t` of example `b`.
    pub fn speech_row(&self, b: usize, t: usize) -> usize {
        debug_assert!(t < self.speech_lens[b]);
        self.row(b, usize::from(self.has_cls) + t)
    }

    /// Flat row of text position `t` of example `b`.
    pub fn text_row(&self, b: usize, t: usize) -> usize {
        debug_assert!(t < self.text_lens[b]);
        self.row(b, usize::from(self.has_cls) + self.speech_lens[b] + t)
    }
}

pub struct QuantizerOutput {
    /// Codebook vectors `[B, T, d]`: exactly one entry per group on the
    /// forward path when hard.
    pub q: Var,
    /// Selected entry per `(b, t, g)`.
    pub ids: Vec<usize>,
    /// Noise-free assignment probabilities `[B·T·G, V]`.
    pub assign_probs: Var,
    /// Noise-free logits `[B·T·G, V]`.
    pub logits: Var,
}

/// How the quantizer picks codebook entries.
pub struct QuantizeMode<'r, R: Rng + ?Sized> {
    pub tau: f64,
    /// Gumbel noise source; `None` disables noise.
    pub noise: Option<&'r mut R>,
    /// Straight-through hard selection; soft mixing otherwise.
    pub hard: bool,
}

#[derive(Clone, Debug)]
struct Subsampler {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    norm: LayerNorm,
    proj: Linear,
}

#[derive(Clone, Debug)]
pub struct SlamModel {
    pub config: ModelConfig,
    subsampler: Subsampler,
    speech_mask_emb: ParamId,
    speech_layers: ConformerStack,
    speech_norm: LayerNorm,
    text_emb: ParamId,
    text_norm: LayerNorm,
    cls: ParamId,
    modality_speech: ParamId,
    modality_text: ParamId,
    modality_cls: ParamId,
    shared: ConformerStack,
    quant_proj: Linear,
    codebook: ParamId,
    stm_head: Linear,
    text_mlm_bias: ParamId,
    speech_mlm: Vec<Linear>,
}

impl SlamModel {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim();
        let c = config.subsample_channels;
        let (g_count, v_code) = (config.codebook_groups, config.codebook_size);
        let conv = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let subsampler = Subsampler {
            conv1_w: store.add("speech.subsample.conv1.weight", &[3, 3, 1, c], conv(9), rng)?,
            conv1_b: store.add("speech.subsample.conv1.bias", &[c], Init::Zeros, rng)?,
            conv2_w: store.add("speech.subsample.conv2.weight", &[3, 3, c, c], conv(9 * c), rng)?,
            conv2_b: store.add("speech.subsample.conv2.bias", &[c], Init::Zeros, rng)?,
            norm: LayerNorm::new(store, "speech.subsample.norm", config.subsampled_freq() * c, rng)?,
            proj: Linear::new(store, "speech.subsample.proj", config.subsampled_freq() * c, d, true, rng)?,
        };
        let speech_mask_emb = store.add("speech.mask_emb", &[d], Init::Uniform(1.0), rng)?;
        let speech_layers =
            ConformerStack::new(store, "speech.layers", config.n_speech_layers, &config.conformer, rng)?;
        let speech_norm = LayerNorm::new(store, "speech.norm", d, rng)?;

        let text_emb = store.add("text.embedding", &[config.vocab_size, d], Init::Normal(0.02), rng)?;
        let text_norm = LayerNorm::new(store, "text.norm", d, rng)?;

        let cls = store.add("shared.cls", &[d], Init::Normal(0.02), rng)?;
        let modality_speech = store.add("shared.modality.speech", &[d], Init::Normal(0.02), rng)?;
        let modality_text = store.add("shared.modality.text", &[d], Init::Normal(0.02), rng)?;
        let modality_cls = store.add("shared.modality.cls", &[d], Init::Normal(0.02), rng)?;
        let shared = ConformerStack::new(store, "shared.layers", config.n_shared_layers, &config.conformer, rng)?;

        let quant_proj = Linear::with_init(store, "quantizer.proj", d, g_count * v_code, true, Init::Normal(1.0), rng)?;
        let codebook = store.add("quantizer.codebook", &[g_count, v_code, d / g_count], Init::Uniform(1.0), rng)?;

        let head = Init::Normal(0.02);
        let stm_head = Linear::with_init(store, "heads.stm", d, 2, true, head, rng)?;
        let text_mlm_bias = store.add("heads.text_mlm.bias", &[config.vocab_size], Init::Zeros, rng)?;
        let speech_mlm = (0..g_count)
            .map(|g| Linear::with_init(store, &format!("heads.speech_mlm.{g}"), d, v_code, true, head, rng))
            .collect::<Result<_>>()?;

        Ok(SlamModel {
            config,
            subsampler,
            speech_mask_emb,
            speech_layers,
            speech_norm,
            text_emb,
            text_norm,
            cls,
            modality_speech,
            modality_text,
            modality_cls,
            shared,
            quant_proj,
            codebook,
            stm_head,
            text_mlm_bias,
            speech_mlm,
        })
    }

    pub fn text_embedding_param(&self) -> ParamId {
        self.text_emb
    }

    /// Subsampler and projection: `[B, T, F]` frames to latents `[B, T_lat, d]`.
    pub fn speech_latents<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        frames: Var,
        lens: &[usize],
    ) -> Result<(Var, PaddingMask)> {
        let s = g.shape(frames).to_vec();
        if s.len() != 3 || s[2] != self.config.feature_dim || lens.len() != s[0] {
            return Err(SlamError::Shape(format!(
                "speech input {s:?} with {} lengths, expected [B, T, {}]",
                lens.len(),
                self.config.feature_dim
            )));
        }
        if s[1] == 0 || lens.contains(&0) {
            return Err(SlamError::Empty("speech sequence with no frames".into()));
        }
        if lens.iter().any(|&l| l > s[1]) {
            return Err(SlamError::InvalidArgument(format!("lengths {lens:?} exceed {} frames", s[1])));
        }
        let sub = &self.subsampler;
        let x = g.reshape(frames, &[s[0], s[1], s[2], 1])?;
        let x = g.mask_time(x, lens)?;
        let (w, b) = (g.param(sub.conv1_w), g.param(sub.conv1_b));
        let x = g.conv2d(x, w, b, (2, 2))?;
        let x = g.swish(x)?;
        let lens1: Vec<usize> = lens.iter().map(|&l| halve(l)).collect();
        let x = g.mask_time(x, &lens1)?;
        let (w, b) = (g.param(sub.conv2_w), g.param(sub.conv2_b));
        let x = g.conv2d(x, w, b, (2, 2))?;
        let x = g.swish(x)?;
        let lens2: Vec<usize> = lens1.iter().map(|&l| halve(l)).collect();
        let x = g.mask_time(x, &lens2)?;
        let sx = g.shape(x).to_vec();
        let x = g.reshape(x, &[sx[0], sx[1], sx[2] * sx[3]])?;
        let x = sub.norm.forward(g, x)?;
        let x = sub.proj.forward(g, x)?;
        let x = g.mask_time(x, &lens2)?;
        let t_lat = sx[1];
        Ok((x, PaddingMask::new(lens2, t_lat)?))
    }

    /// Replaces latent positions flagged in `masked` (`[B·T_lat]`) by the
    /// learned mask embedding.
    pub fn apply_speech_mask<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, masked: &[bool]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let rows = s[0] * s[1];
        if masked.len() != rows {
            return Err(SlamError::Shape(format!("speech mask of {} for {rows} latent rows", masked.len())));
        }
        if !masked.contains(&true) {
            return Ok(x);
        }
        let d = s[2];
        let flat = g.reshape(x, &[rows, d])?;
        let e = g.param(self.speech_mask_emb);
        let e = g.reshape(e, &[1, d])?;
        let pool = g.concat(&[flat, e], 0)?;
        let idx: Vec<Option<usize>> = masked.iter().enumerate().map(|(r, &m)| Some(if m { rows } else { r })).collect();
        let y = g.gather_rows(pool, &idx)?;
        g.reshape(y, &s)
    }

    /// Full speech branch. `masked` (`[B·T_lat]`) selects latent positions to
    /// replace before the speech-specific layers.
    pub fn speech_encode<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        frames: Var,
        lens: &[usize],
        masked: Option<&[bool]>,
        drop: &mut Dropout,
    ) -> Result<SpeechEncoderOutput> {
        let (x, mask) = self.speech_latents(g, frames, lens)?;
        let input = match masked {
            Some(m) => self.apply_speech_mask(g, x, m)?,
            None => x,
        };
        let c = if self.speech_layers.depth() == 0 {
            input
        } else {
            let s = g.shape(input).to_vec();
            let pe = g.constant(tiled_pe(s[0], s[1], s[2])?);
            let h = g.add(input, pe)?;
            let h = g.mask_time(h, mask.lengths())?;
            let h = self.speech_layers.forward(g, h, &mask, drop)?;
            let h = self.speech_norm.forward(g, h)?;
            g.mask_time(h, mask.lengths())?
        };
        Ok(SpeechEncoderOutput { x, c, mask })
    }

    /// Token embedding, positional encoding and layer norm. `tokens` is a
    /// row-major `[B, T']` id matrix.
    pub fn text_encode<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        tokens: &[usize],
        mask: &PaddingMask,
    ) -> Result<TextEncoderOutput> {
        let (b, t) = (mask.batch(), mask.max_len());
        if tokens.len() != b * t {
            return Err(SlamError::Shape(format!("{} token ids for a [{b}, {t}] batch", tokens.len())));
        }
        let d = self.config.model_dim();
        let table = g.param(self.text_emb);
        let e = g.embedding(table, tokens, &[b, t])?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let pe = g.constant(tiled_pe(b, t, d)?);
        let h = g.add(e, pe)?;
        let h = self.text_norm.forward(g, h)?;
        let w = g.mask_time(h, mask.lengths())?;
        Ok(TextEncoderOutput { w, mask: mask.clone() })
    }

    /// Adds per-segment positions and a modality vector, flattened to rows.
    fn segment_rows<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, modality: ParamId) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let pe = g.constant(tiled_pe(s[0], s[1], s[2])?);
        let h = g.add(x, pe)?;
        let m = g.param(modality);
        let h = g.add_broadcast(h, m)?;
        g.reshape(h, &[s[0] * s[1], s[2]])
    }

    /// Shared encoder over speech, text or both, optionally prefixed by the
    /// learned CLS vector.
    pub fn multimodal_encode<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        speech: Option<(Var, &PaddingMask)>,
        text: Option<(Var, &PaddingMask)>,
        cls: bool,
        drop: &mut Dropout,
    ) -> Result<MultimodalOutput> {
        let batch = match (&speech, &text) {
            (None, None) => return Err(SlamError::InvalidArgument("multimodal input needs at least one modality".into())),
            (Some((_, m)), None) | (None, Some((_, m))) => m.batch(),
            (Some((_, a)), Some((_, b))) => {
                if a.batch() != b.batch() {
                    return Err(SlamError::Shape(format!("speech batch {} vs text batch {}", a.batch(), b.batch())));
                }
                a.batch()
            }
        };
        let d = self.config.model_dim();
        let n_cls = usize::from(cls);
        let (ts, speech_lens) = speech.as_ref().map_or((0, vec![0; batch]), |(_, m)| (m.max_len(), m.lengths().to_vec()));
        let (tt, text_lens) = text.as_ref().map_or((0, vec![0; batch]), |(_, m)| (m.max_len(), m.lengths().to_vec()));
        let len = n_cls + ts + tt;

        let mut parts = Vec::new();
        let mut base = 0;
        let speech_base = base;
        if let Some((x, _)) = speech {
            if g.shape(x) != [batch, ts, d] {
                return Err(SlamError::Shape(format!("speech features {:?}", g.shape(x))));
            }
            parts.push(self.segment_rows(g, x, self.modality_speech)?);
            base += batch * ts;
        }
        let text_base = base;
        if let Some((w, _)) = text {
            if g.shape(w) != [batch, tt, d] {
                return Err(SlamError::Shape(format!("text features {:?}", g.shape(w))));
            }
            parts.push(self.segment_rows(g, w, self.modality_text)?);
            base += batch * tt;
        }
        let cls_row = base;
        if cls {
            let c = g.param(self.cls);
            let m = g.param(self.modality_cls);
            let c = g.add(c, m)?;
            parts.push(g.reshape(c, &[1, d])?);
        }
        let pool = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };

        let mut idx = Vec::with_capacity(batch * len);
        let mut lengths = Vec::with_capacity(batch);
        for b in 0..batch {
            let start = idx.len();
            if cls {
                idx.push(Some(cls_row));
            }
            idx.extend((0..speech_lens[b]).map(|t| Some(speech_base + b * ts + t)));
            idx.extend((0..text_lens[b]).map(|t| Some(text_base + b * tt + t)));
            lengths.push(idx.len() - start);
            idx.resize(start + len, None);
        }
        let h = g.gather_rows(pool, &idx)?;
        let h = g.reshape(h, &[batch, len, d])?;
        let mask = PaddingMask::new(lengths, len)?;
        let h = self.shared.forward(g, h, &mask, drop)?;
        Ok(MultimodalOutput { h, mask, has_cls: cls, speech_lens, text_lens })
    }

    /// Gumbel-softmax quantization of latents `[B, T, d]`.
    pub fn quantize<S: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        mode: QuantizeMode<'_, R>,
    ) -> Result<QuantizerOutput> {
        if !(mode.tau > 0.0) {
            return Err(SlamError::InvalidArgument(format!("quantizer temperature must be positive, got {}", mode.tau)));
        }
        let s = g.shape(x).to_vec();
        let (gc, v) = (self.config.codebook_groups, self.config.codebook_size);
        let d = self.config.model_dim();
        let rows = s[0] * s[1];
        let logits = self.code_logits(g, x)?;
        let assign_probs = g.softmax(logits)?;

        let noisy = match mode.noise {
            Some(rng) => {
                let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
                let noise: Vec<f64> = (0..rows * gc * v).map(|_| gumbel.sample(rng)).collect();
                let noise = g.constant(NdArray::from_f64(&[rows * gc, v], &noise)?);
                g.add(logits, noise)?
            }
            None => logits,
        };
        let scaled = g.scale(noisy, 1.0 / mode.tau)?;
        let soft = g.softmax(scaled)?;
        let ids = argmax_rows(g.value(noisy));
        let y = if mode.hard {
            let mut hard = vec![S::zero(); rows * gc * v];
            for (r, &i) in ids.iter().enumerate() {
                hard[r * v + i] = S::one();
            }
            g.straight_through(soft, NdArray::new(&[rows * gc, v], hard)?)?
        } else {
            soft
        };
        let y = g.reshape(y, &[rows, gc, v])?;
        let y = g.transpose01(y)?;
        let book = g.param(self.codebook);
        let q = g.bmm(y, book)?;
        let q = g.transpose01(q)?;
        let q = g.reshape(q, &[s[0], s[1], d])?;
        Ok(QuantizerOutput { q, ids, assign_probs, logits })
    }

    /// Noise-free quantizer logits `[B·T·G, V]` for latents `[B, T, d]`.
    pub fn code_logits<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.config.model_dim() {
            return Err(SlamError::Shape(format!("quantizer input {s:?}")));
        }
        let rows = s[0] * s[1] * self.config.codebook_groups;
        let logits = self.quant_proj.forward(g, x)?;
        g.reshape(logits, &[rows, self.config.codebook_size])
    }

    /// Codebook-id targets: argmax of the noise-free logits, `[B·T·G]`.
    pub fn code_targets<S: Scalar>(&self, g: &Graph<'_, S>, quant: &QuantizerOutput) -> Vec<usize> {
        argmax_rows(g.value(quant.logits))
    }

    /// STM logits `[B, 2]` from CLS vectors `[B, d]`.
    pub fn stm_logits<S: Scalar>(&self, g: &mut Graph<'_, S>, h_cls: Var) -> Result<Var> {
        self.stm_head.forward(g, h_cls)
    }

    /// STM match probabilities `[B, 2]`; column 1 is "matched".
    pub fn stm_head<S: Scalar>(&self, g: &mut Graph<'_, S>, h_cls: Var) -> Result<Var> {
        let l = self.stm_logits(g, h_cls)?;
        g.softmax(l)
    }

    /// Text logits `[n, V_text]` via the tied embedding table.
    pub fn mlm_text_head<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Result<Var> {
        let table = g.param(self.text_emb);
        let logits = g.matmul_bt(h, table)?;
        let bias = g.param(self.text_mlm_bias);
        g.add_broadcast(logits, bias)
    }

    /// Code logits `[n, G, V_code]`.
    pub fn mlm_speech_head<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Result<Var> {
        let n = g.shape(h)[0];
        let per_group = self
            .speech_mlm
            .iter()
            .map(|head| head.forward(g, h))
            .collect::<Result<Vec<_>>>()?;
        let cat = if per_group.len() == 1 { per_group[0] } else { g.concat(&per_group, 1)? };
        g.reshape(cat, &[n, self.config.codebook_groups, self.config.codebook_size])
    }

    /// Rows `[n, d]` of `h` at the given flat positions.
    pub fn gather<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var, rows: &[usize]) -> Result<Var> {
        let d = self.config.model_dim();
        let total = g.value(h).numel() / d;
        let flat = g.reshape(h, &[total, d])?;
        let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        g.gather_rows(flat, &idx)
    }
}

pub(crate) fn argmax_rows<S: Scalar>(a: &NdArray<S>) -> Vec<usize> {
    let n = a.last_dim();
    a.data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Closed-form parameter count for a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.model_dim();
    let (h, k, c) = (cfg.conformer.ffn_hidden, cfg.conformer.conv_kernel_size, cfg.subsample_channels);
    let (gc, v) = (cfg.codebook_groups, cfg.codebook_size);
    let ln = 2 * d;
    let ffn = ln + (d * h + h) + (h * d + d);
    let mhsa = ln + 3 * (d * d + d) + d * d;
    let conv = ln + (d * 2 * d + 2 * d) + (k * d + d) + ln + (d * d + d);
    let layer = 2 * ffn + mhsa + conv + ln;
    let flat = cfg.subsampled_freq() * c;
    let subsampler = (9 * c + c) + (9 * c * c + c) + 2 * flat + (flat * d + d);
    let speech = subsampler + d + cfg.n_speech_layers * layer + ln;
    let text = cfg.vocab_size * d + ln;
    let shared = 4 * d + cfg.n_shared_layers * layer;
    let quantizer = (d * gc * v + gc * v) + gc * v * (d / gc);
    let heads = (2 * d + 2) + cfg.vocab_size + gc * (d * v + v);
    speech + text + shared + quantizer + heads
}
