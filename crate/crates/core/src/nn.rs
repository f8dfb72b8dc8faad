//! Conformer building blocks.
//!
//! Every block stores only [`ParamId`]s and evaluates on a caller-provided
//! [`Graph`], so the same instance can be run against an `f32` training store
//! or an `f64` copy of it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Graph, NdArray, Scalar, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub num_heads: usize,
    pub conv_kernel_size: usize,
    /// Group count of the normalisation inside the convolution module.
    pub conv_groups: usize,
    pub dropout_rate: f64,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        ConformerConfig {
            model_dim: 64,
            ffn_hidden: 256,
            num_heads: 4,
            conv_kernel_size: 5,
            conv_groups: 4,
            dropout_rate: 0.0,
        }
    }
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SlamError::Config(m));
        if self.model_dim == 0 || self.ffn_hidden == 0 {
            return bad("model_dim and ffn_hidden must be positive".into());
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.conv_kernel_size % 2 == 0 {
            return bad(format!("conv_kernel_size must be odd, got {}", self.conv_kernel_size));
        }
        if self.conv_groups == 0 || self.model_dim % self.conv_groups != 0 {
            return bad(format!(
                "model_dim {} not divisible by conv_groups {}",
                self.model_dim, self.conv_groups
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// Valid lengths of a padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddingMask {
    lengths: Vec<usize>,
    max_len: usize,
}

impl PaddingMask {
    pub fn new(lengths: Vec<usize>, max_len: usize) -> Result<Self> {
        if let Some(&l) = lengths.iter().find(|&&l| l > max_len) {
            return Err(SlamError::InvalidArgument(format!(
                "valid length {l} exceeds padded length {max_len}"
            )));
        }
        Ok(PaddingMask { lengths, max_len })
    }

    /// Mask padded to the longest sequence.
    pub fn from_lengths(lengths: Vec<usize>) -> Self {
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        PaddingMask { lengths, max_len }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// Row-major `[B, T]` validity flags.
    pub fn flags(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&l| (0..self.max_len).map(move |t| t < l))
            .collect()
    }

    pub fn num_valid(&self) -> usize {
        self.lengths.iter().sum()
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() < 2 || shape[0] != self.batch() || shape[1] != self.max_len {
            return Err(SlamError::Shape(format!(
                "mask for {} rows of length {} applied to {:?}",
                self.batch(),
                self.max_len,
                shape
            )));
        }
        Ok(())
    }
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(..)`.
pub fn sinusoidal_pe<S: Scalar>(max_len: usize, d: usize) -> Result<NdArray<S>> {
    if d % 2 != 0 {
        return Err(SlamError::InvalidArgument(format!("positional encoding needs even d, got {d}")));
    }
    let mut data = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(S::from_f64(angle.sin()));
            data.push(S::from_f64(angle.cos()));
        }
    }
    NdArray::new(&[max_len, d], data)
}

/// Positional table tiled across a batch: `[batch, len, d]`.
pub(crate) fn tiled_pe<S: Scalar>(batch: usize, len: usize, d: usize) -> Result<NdArray<S>> {
    let pe = sinusoidal_pe::<S>(len, d)?;
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        data.extend_from_slice(pe.data());
    }
    NdArray::new(&[batch, len, d], data)
}

/// Inverted dropout. Inactive when the rate is zero or no generator is set.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply<S: Scalar>(&mut self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n = g.value(x).numel();
        let mask: Vec<S> = (0..n)
            .map(|_| S::from_f64(if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }))
            .collect();
        let m = g.constant(NdArray::new(&shape, mask)?);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::Xavier { fan_in: d_in, fan_out: d_out };
        Self::with_init(store, name, d_in, d_out, bias, init, rng)
    }

    pub fn with_init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[d_in, d_out], init, rng)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[d_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), &[d], Init::Ones, rng)?,
            beta: store.add(&format!("{name}.beta"), &[d], Init::Zeros, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pre-norm feed-forward module: LN, expand, swish, project.
#[derive(Clone, Debug)]
pub struct FeedForward {
    norm: LayerNorm,
    expand: Linear,
    project: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim, rng)?,
            expand: Linear::new(store, &format!("{name}.expand"), cfg.model_dim, cfg.ffn_hidden, true, rng)?,
            project: Linear::new(store, &format!("{name}.project"), cfg.ffn_hidden, cfg.model_dim, true, rng)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.expand.forward(g, h)?;
        let h = g.swish(h)?;
        let h = drop.apply(g, h)?;
        let h = self.project.forward(g, h)?;
        drop.apply(g, h)
    }
}

/// Pre-norm multi-head self-attention with key-padding mask. The residual
/// connection is left to the caller.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(MultiHeadSelfAttention {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, rng)?,
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng)?,
            heads: cfg.num_heads,
        })
    }

    /// Returns the module output and the attention node (whose weights can
    /// be read with [`Graph::attention_weights`]).
    pub fn forward_with_weights<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        mask: &PaddingMask,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        mask.check(g.shape(x))?;
        let h = self.norm.forward(g, x)?;
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let att = g.attention(q, k, v, self.heads, mask.lengths())?;
        let out = self.output.forward(g, att)?;
        Ok((drop.apply(g, out)?, att))
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        mask: &PaddingMask,
        drop: &mut Dropout,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, x, mask, drop)?.0)
    }
}

/// LN, pointwise expansion to 2d, GLU, depthwise convolution over time,
/// group norm, swish, pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise_weight: ParamId,
    depthwise_bias: ParamId,
    group_norm: LayerNorm,
    groups: usize,
    pointwise_out: Linear,
}

impl ConvModule {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, k) = (cfg.model_dim, cfg.conv_kernel_size);
        let limit = 1.0 / (k as f64).sqrt();
        Ok(ConvModule {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, rng)?,
            pointwise_in: Linear::new(store, &format!("{name}.pointwise_in"), d, 2 * d, true, rng)?,
            depthwise_weight: store.add(&format!("{name}.depthwise.weight"), &[k, d], Init::Uniform(limit), rng)?,
            depthwise_bias: store.add(&format!("{name}.depthwise.bias"), &[d], Init::Zeros, rng)?,
            group_norm: LayerNorm::new(store, &format!("{name}.group_norm"), d, rng)?,
            groups: cfg.conv_groups,
            pointwise_out: Linear::new(store, &format!("{name}.pointwise_out"), d, d, true, rng)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        mask: &PaddingMask,
        drop: &mut Dropout,
    ) -> Result<Var> {
        mask.check(g.shape(x))?;
        let h = self.norm.forward(g, x)?;
        let h = self.pointwise_in.forward(g, h)?;
        let h = g.glu(h)?;
        let h = g.mask_time(h, mask.lengths())?;
        let (w, b) = (g.param(self.depthwise_weight), g.param(self.depthwise_bias));
        let h = g.depthwise_conv1d(h, w, b)?;
        let (gamma, beta) = (g.param(self.group_norm.gamma), g.param(self.group_norm.beta));
        let h = g.group_norm(h, self.groups, gamma, beta, LN_EPS)?;
        let h = g.swish(h)?;
        let h = self.pointwise_out.forward(g, h)?;
        drop.apply(g, h)
    }
}

/// Half-step FFN, self-attention, convolution module, half-step FFN, final
/// layer norm; each module is residual.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    ffn_in: FeedForward,
    attention: MultiHeadSelfAttention,
    conv: ConvModule,
    ffn_out: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(ConformerLayer {
            ffn_in: FeedForward::new(store, &format!("{name}.ffn_in"), cfg, rng)?,
            attention: MultiHeadSelfAttention::new(store, &format!("{name}.attention"), cfg, rng)?,
            conv: ConvModule::new(store, &format!("{name}.conv"), cfg, rng)?,
            ffn_out: FeedForward::new(store, &format!("{name}.ffn_out"), cfg, rng)?,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), cfg.model_dim, rng)?,
        })
    }

    /// Padded positions of the output are zeroed.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        mask: &PaddingMask,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = self.ffn_in.forward(g, x, drop)?;
        let h = g.scale(h, 0.5)?;
        let x = g.add(x, h)?;
        let h = self.attention.forward(g, x, mask, drop)?;
        let x = g.add(x, h)?;
        let h = self.conv.forward(g, x, mask, drop)?;
        let x = g.add(x, h)?;
        let h = self.ffn_out.forward(g, x, drop)?;
        let h = g.scale(h, 0.5)?;
        let x = g.add(x, h)?;
        let x = self.final_norm.forward(g, x)?;
        g.mask_time(x, mask.lengths())
    }
}

/// A stack of Conformer layers named `{prefix}.{i}`.
#[derive(Clone, Debug)]
pub struct ConformerStack {
    layers: Vec<ConformerLayer>,
}

impl ConformerStack {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        depth: usize,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| ConformerLayer::new(store, &format!("{prefix}.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(ConformerStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        mut x: Var,
        mask: &PaddingMask,
        drop: &mut Dropout,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, mask, drop)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, CheckOptions};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        NdArray::new(shape, data).unwrap()
    }

    fn small_cfg() -> ConformerConfig {
        ConformerConfig { model_dim: 8, ffn_hidden: 16, num_heads: 2, conv_kernel_size: 3, conv_groups: 2, dropout_rate: 0.0 }
    }

    #[test]
    fn pe_examples() {
        let pe = sinusoidal_pe::<f64>(6, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_pe::<f64>(4, 5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ConformerConfig::default().validate().is_ok());
        let odd_heads = ConformerConfig { num_heads: 3, ..Default::default() };
        assert!(odd_heads.validate().is_err());
        let even_kernel = ConformerConfig { conv_kernel_size: 4, ..Default::default() };
        assert!(even_kernel.validate().is_err());
    }

    #[test]
    fn padding_mask_rejects_overlong() {
        assert!(PaddingMask::new(vec![3, 5], 4).is_err());
        let m = PaddingMask::new(vec![1, 2], 2).unwrap();
        assert_eq!(m.flags(), vec![true, false, true, true]);
    }

    #[test]
    fn mhsa_rejects_mask_batch_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let att = MultiHeadSelfAttention::new(&mut store, "att", &small_cfg(), &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(randn(&[2, 3, 8], &mut rng));
        let mask = PaddingMask::new(vec![3, 3, 3], 3).unwrap();
        assert!(att.forward(&mut g, x, &mask, &mut Dropout::off()).is_err());
    }

    #[test]
    fn conformer_layer_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = ConformerLayer::new(&mut store, "layer", &small_cfg(), &mut rng).unwrap();
        let x = randn(&[2, 4, 8], &mut rng);
        let target = randn(&[2, 4, 8], &mut rng);
        let mask = PaddingMask::new(vec![4, 3], 4).unwrap();
        let report = check_params("conformer", &store, 3, &mut rng, CheckOptions::with_tolerance(1e-3), |g| {
            let x = g.constant(x.clone());
            let y = layer.forward(g, x, &mask, &mut Dropout::off())?;
            let t = g.constant(target.clone());
            let p = g.mul(y, t)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::<f64>::detached();
        let x = g.constant(NdArray::full(&[4], 2.0));
        let mut d = Dropout::train(0.0, ChaCha8Rng::seed_from_u64(0));
        assert_eq!(d.apply(&mut g, x).unwrap(), x);
        let mut d = Dropout::train(0.5, ChaCha8Rng::seed_from_u64(0));
        let y = d.apply(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }
}
