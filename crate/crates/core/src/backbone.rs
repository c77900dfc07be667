//! ResNet-Conformer SELD network.
//!
//! Input features arrive as `[batch, time, freq, channel]` and are moved to
//! `[batch, channel, time, freq]` for the convolutional encoder. The encoder is
//! a two-convolution stem followed by four residual stages of two basic blocks
//! each; stages 1 to 3 end in a frequency-only max-pool. The flattened last
//! stage feeds a projection, a Conformer stack, a ×`label_downsample` temporal
//! mean-pool and the two output heads.
//!
//! Every convolution output (plus the raw input) is a numbered mixing site so
//! a [`MixPlan`] can blend the batch with a permutation of itself at any depth.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::mixaug::{block_conv_site, mix_on_tape, MixPlan, NUM_SITES};
use crate::nn::{BatchNorm, Conv2d, Ctx, LayerNorm, Linear};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::{s, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Acoustic input channels: four log-Mel maps and three intensity maps.
pub const AUDIO_CHANNELS: usize = 7;
/// Visual input channels: two Gaussian vectors for each of six speakers.
pub const VISUAL_CHANNELS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub n_freq: usize,
    pub channels: [usize; 4],
    /// Frequency pooling factor after stages 1, 2 and 3.
    pub pool_kernels: [usize; 3],
    pub embed_dim: usize,
    pub conformer_layers: usize,
    pub attn_heads: usize,
    pub conv_kernel: usize,
    pub n_classes: usize,
    pub label_downsample: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    /// Full-size audio-only network.
    pub fn teacher() -> Self {
        Self {
            in_channels: AUDIO_CHANNELS,
            n_freq: 64,
            channels: [64, 128, 256, 512],
            pool_kernels: [4, 4, 2],
            embed_dim: 256,
            conformer_layers: 8,
            attn_heads: 8,
            conv_kernel: 31,
            n_classes: 13,
            label_downsample: 5,
            head_hidden: 256,
            dropout: 0.05,
        }
    }

    /// Full-size audio-visual network.
    pub fn student() -> Self {
        Self {
            in_channels: AUDIO_CHANNELS + VISUAL_CHANNELS,
            ..Self::teacher()
        }
    }

    /// Shrunken network for CPU experiments and gradient checks.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            n_freq: 64,
            channels: [8, 16, 32, 64],
            pool_kernels: [4, 4, 2],
            embed_dim: 32,
            conformer_layers: 2,
            attn_heads: 4,
            conv_kernel: 7,
            n_classes: 13,
            label_downsample: 5,
            head_hidden: 32,
            dropout: 0.0,
        }
    }

    /// Same architecture with a different number of input channels.
    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        Self {
            in_channels,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.channels.iter().any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.embed_dim == 0 || self.attn_heads == 0 || self.embed_dim % self.attn_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of attn_heads {}",
                self.embed_dim, self.attn_heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        let mut f = self.n_freq;
        for &k in &self.pool_kernels {
            if k == 0 || f % k != 0 {
                return bad(format!(
                    "pool kernel {k} does not divide frequency size {f}"
                ));
            }
            f /= k;
        }
        if self.label_downsample == 0 || self.n_classes == 0 {
            return bad("label_downsample and n_classes must be positive".into());
        }
        Ok(())
    }

    /// Frequency size at the output of each stage.
    pub fn stage_freqs(&self) -> [usize; 4] {
        let mut f = self.n_freq;
        let mut out = [0; 4];
        for (s, o) in out.iter_mut().enumerate() {
            if s < 3 {
                f /= self.pool_kernels[s];
            }
            *o = f;
        }
        out
    }

    /// Width of the flattened last stage fed to the projection.
    pub fn encoder_width(&self) -> usize {
        self.channels[3] * self.stage_freqs()[3]
    }

    /// `(freq, channel)` size of the feature map at every mixing site.
    pub fn site_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(0, 0); NUM_SITES];
        dims[0] = (self.n_freq, self.in_channels);
        dims[1] = (self.n_freq, self.channels[0]);
        dims[2] = (self.n_freq, self.channels[0]);
        let freqs = self.stage_freqs();
        let mut f_in = self.n_freq;
        for s in 0..4 {
            let c = self.channels[s];
            dims[block_conv_site(s, 0, 0)] = (f_in, c);
            dims[block_conv_site(s, 0, 1)] = (f_in, c);
            dims[block_conv_site(s, 1, 0)] = (f_in, c);
            dims[block_conv_site(s, 1, 1)] = (freqs[s], c);
            f_in = freqs[s];
        }
        dims
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, 1),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, rng),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, dropout: f64) -> Var {
        let h = self.norm.forward(ctx, x);
        let h = self.up.forward(ctx, h);
        let h = ctx.tape.swish(h);
        let h = ctx.dropout(h, dropout);
        let h = self.down.forward(ctx, h);
        ctx.dropout(h, dropout)
    }
}

#[derive(Clone, Debug)]
struct SelfAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: ParamId,
    bn: BatchNorm,
    pointwise_out: Linear,
}

#[derive(Clone, Debug)]
struct ConformerLayer {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Head {
    hidden: Linear,
    out: Linear,
}

impl Head {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let h = self.hidden.forward(ctx, x);
        let h = ctx.tape.relu(h);
        self.out.forward(ctx, h)
    }
}

/// Layer handles of one network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: [ConvBn; 2],
    stages: Vec<[BasicBlock; 2]>,
    projection: Linear,
    conformer: Vec<ConformerLayer>,
    classifier: Head,
    regressor: Head,
}

/// Intermediate tensors and outputs of one forward pass (all on the context tape).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, L, N]` activity probabilities.
    pub activity: Var,
    /// `[batch, L, 3N]` Cartesian locations.
    pub location: Var,
    /// Input as `[batch, channel, time, freq]` (after any input-layer mixing).
    pub input: Var,
    /// Stage outputs as `[batch, channel, time, freq]`.
    pub stages: [Var; 4],
    /// `[batch, time, encoder_width]`.
    pub encoder: Var,
    /// `[batch, time, D]` Conformer output.
    pub context: Var,
    /// `[batch·heads, time, time]` attention weights, one per Conformer layer.
    pub attention: Vec<Var>,
}

impl Backbone {
    /// Register all parameters in `store` and return the layer handles.
    pub fn new<T: Scalar, R: Rng>(
        config: BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let stem = [
            ConvBn::new(store, "stem.0", config.in_channels, c[0], 3, rng),
            ConvBn::new(store, "stem.1", c[0], c[0], 3, rng),
        ];
        let mut stages = Vec::with_capacity(4);
        let mut cin = c[0];
        for (s, &cout) in c.iter().enumerate() {
            let mk = |store: &mut ParamStore<T>, b: usize, cin: usize, rng: &mut R| {
                let name = format!("stage{s}.block{b}");
                BasicBlock {
                    first: ConvBn::new(store, &format!("{name}.conv0"), cin, cout, 3, rng),
                    second: ConvBn::new(store, &format!("{name}.conv1"), cout, cout, 3, rng),
                    shortcut: (cin != cout).then(|| {
                        ConvBn::new(store, &format!("{name}.shortcut"), cin, cout, 1, rng)
                    }),
                }
            };
            let b0 = mk(store, 0, cin, rng);
            let b1 = mk(store, 1, cout, rng);
            stages.push([b0, b1]);
            cin = cout;
        }
        let d = config.embed_dim;
        let projection = Linear::new(store, "projection", config.encoder_width(), d, rng);
        let conformer = (0..config.conformer_layers)
            .map(|i| {
                let name = format!("conformer{i}");
                let attn = SelfAttention {
                    norm: LayerNorm::new(store, &format!("{name}.attn.norm"), d),
                    query: Linear::new(store, &format!("{name}.attn.query"), d, d, rng),
                    key: Linear::new(store, &format!("{name}.attn.key"), d, d, rng),
                    value: Linear::new(store, &format!("{name}.attn.value"), d, d, rng),
                    out: Linear::new(store, &format!("{name}.attn.out"), d, d, rng),
                };
                let k = config.conv_kernel;
                let conv = ConvModule {
                    norm: LayerNorm::new(store, &format!("{name}.conv.norm"), d),
                    pointwise_in: Linear::new(
                        store,
                        &format!("{name}.conv.pointwise_in"),
                        d,
                        2 * d,
                        rng,
                    ),
                    depthwise: store.trainable(
                        format!("{name}.conv.depthwise"),
                        kaiming_uniform(&[d, k], k, 1.0, rng),
                    ),
                    bn: BatchNorm::new(store, &format!("{name}.conv.bn"), d, 2),
                    pointwise_out: Linear::new(
                        store,
                        &format!("{name}.conv.pointwise_out"),
                        d,
                        d,
                        rng,
                    ),
                };
                ConformerLayer {
                    ff1: FeedForward::new(store, &format!("{name}.ff1"), d, rng),
                    attn,
                    conv,
                    ff2: FeedForward::new(store, &format!("{name}.ff2"), d, rng),
                    final_norm: LayerNorm::new(store, &format!("{name}.norm"), d),
                }
            })
            .collect();
        let (h, n) = (config.head_hidden, config.n_classes);
        let classifier = Head {
            hidden: Linear::new(store, "classifier.hidden", d, h, rng),
            out: Linear::new(store, "classifier.out", h, n, rng),
        };
        let regressor = Head {
            hidden: Linear::new(store, "regressor.hidden", d, h, rng),
            out: Linear::new(store, "regressor.out", h, 3 * n, rng),
        };
        Ok(Self {
            config,
            stem,
            stages,
            projection,
            conformer,
            classifier,
            regressor,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if shape.len() != 4 || shape[2] != cfg.n_freq || shape[3] != cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected [batch, time, {}, {}], got {shape:?}",
                cfg.n_freq, cfg.in_channels
            )));
        }
        if shape[0] == 0 || shape[1] == 0 || shape[1] % cfg.label_downsample != 0 {
            return Err(Error::Shape(format!(
                "time axis {} must be a positive multiple of {}",
                shape[1], cfg.label_downsample
            )));
        }
        Ok(())
    }

    /// Full forward pass of `x: [batch, time, freq, channel]` with optional mixing.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        plan: Option<&MixPlan>,
    ) -> Result<ForwardOutput> {
        self.check_input(ctx.tape.shape(x))?;
        let plan = plan.filter(|p| p.is_active());
        if let Some(p) = plan {
            if p.layer >= NUM_SITES {
                return Err(Error::InvalidInput(format!(
                    "mixing layer {} out of range",
                    p.layer
                )));
            }
        }
        let mix = |ctx: &mut Ctx<'_, T>, site: usize, h: Var| -> Result<Var> {
            match plan {
                Some(p) if p.layer == site => mix_on_tape(&mut ctx.tape, p, h),
                _ => Ok(h),
            }
        };

        let h = ctx.tape.permute(x, &[0, 3, 1, 2]);
        let input = mix(ctx, 0, h)?;
        let mut h = input;
        for (i, layer) in self.stem.iter().enumerate() {
            h = layer.forward(ctx, h);
            h = ctx.tape.relu(h);
            h = mix(ctx, 1 + i, h)?;
        }
        let mut stages = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                let y = block.first.forward(ctx, h);
                let y = ctx.tape.relu(y);
                let y = mix(ctx, block_conv_site(s, b, 0), y)?;
                let y = block.second.forward(ctx, y);
                let skip = match &block.shortcut {
                    Some(sc) => sc.forward(ctx, h),
                    None => h,
                };
                let y = ctx.tape.add(y, skip);
                let mut y = ctx.tape.relu(y);
                if b == 1 && s < 3 {
                    y = ctx.tape.max_pool_last(y, self.config.pool_kernels[s]);
                }
                h = mix(ctx, block_conv_site(s, b, 1), y)?;
            }
            stages.push(h);
        }
        let stages: [Var; 4] = stages.try_into().expect("four stages");

        let shape = ctx.tape.shape(h).to_vec();
        let (bsz, c, t, f) = (shape[0], shape[1], shape[2], shape[3]);
        let e = ctx.tape.permute(h, &[0, 2, 1, 3]);
        let encoder = ctx.tape.reshape(e, &[bsz, t, c * f]);
        let mut z = self.projection.forward(ctx, encoder);
        let mut attention = Vec::with_capacity(self.conformer.len());
        for layer in &self.conformer {
            let (out, attn) = self.conformer_layer(ctx, layer, z)?;
            z = out;
            attention.push(attn);
        }
        let context = z;
        let pooled = ctx
            .tape
            .mean_pool_axis(context, 1, self.config.label_downsample);
        let logits = self.classifier.forward(ctx, pooled);
        let activity = ctx.tape.sigmoid(logits);
        let location = self.regressor.forward(ctx, pooled);
        Ok(ForwardOutput {
            activity,
            location,
            input,
            stages,
            encoder,
            context,
            attention,
        })
    }

    fn conformer_layer<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        layer: &ConformerLayer,
        x: Var,
    ) -> Result<(Var, Var)> {
        let p = self.config.dropout;
        let half = T::c(0.5);

        let f = layer.ff1.forward(ctx, x, p);
        let f = ctx.tape.scale(f, half);
        let x = ctx.tape.add(x, f);

        let (a, attn) = self.self_attention(ctx, &layer.attn, x);
        let a = ctx.dropout(a, p);
        let x = ctx.tape.add(x, a);

        let m = &layer.conv;
        let c = m.norm.forward(ctx, x);
        let c = m.pointwise_in.forward(ctx, c);
        let c = ctx.tape.glu(c, 2);
        let w = ctx.param(m.depthwise);
        let c = ctx.tape.depthwise_conv1d(c, w);
        let c = m.bn.forward(ctx, c);
        let c = ctx.tape.swish(c);
        let c = m.pointwise_out.forward(ctx, c);
        let c = ctx.dropout(c, p);
        let x = ctx.tape.add(x, c);

        let f = layer.ff2.forward(ctx, x, p);
        let f = ctx.tape.scale(f, half);
        let x = ctx.tape.add(x, f);
        Ok((layer.final_norm.forward(ctx, x), attn))
    }

    fn self_attention<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        m: &SelfAttention,
        x: Var,
    ) -> (Var, Var) {
        let shape = ctx.tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.attn_heads;
        let dh = d / heads;
        let h = m.norm.forward(ctx, x);
        let split = |ctx: &mut Ctx<'_, T>, lin: &Linear| {
            let y = lin.forward(ctx, h);
            let y = ctx.tape.reshape(y, &[b, t, heads, dh]);
            let y = ctx.tape.permute(y, &[0, 2, 1, 3]);
            ctx.tape.reshape(y, &[b * heads, t, dh])
        };
        let q = split(ctx, &m.query);
        let k = split(ctx, &m.key);
        let v = split(ctx, &m.value);
        let kt = ctx.tape.permute(k, &[0, 2, 1]);
        let scores = ctx.tape.bmm(q, kt);
        let scores = ctx
            .tape
            .scale(scores, T::one() / T::from_usize_lossy(dh).sqrt());
        let attn = ctx.tape.softmax_last(scores);
        let o = ctx.tape.bmm(attn, v);
        let o = ctx.tape.reshape(o, &[b, heads, t, dh]);
        let o = ctx.tape.permute(o, &[0, 2, 1, 3]);
        let o = ctx.tape.reshape(o, &[b, t, d]);
        (m.out.forward(ctx, o), attn)
    }

    /// Name of the first convolution weight, the only tensor whose shape depends on `in_channels`.
    pub fn input_conv_name() -> &'static str {
        "stem.0.conv.weight"
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Backbone,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Backbone::new(config, &mut store, rng)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.net.config
    }

    /// Inference-mode forward without gradient recording; returns `(activity, location)`.
    pub fn predict(&self, x: &ArrayD<T>) -> Result<(ArrayD<T>, ArrayD<T>)> {
        let mut ctx = Ctx::eval(&self.store);
        let xv = ctx.tape.constant(x.clone());
        let out = self.net.forward(&mut ctx, xv, None)?;
        Ok((
            ctx.tape.value(out.activity).clone(),
            ctx.tape.value(out.location).clone(),
        ))
    }
}

/// Copy teacher weights into a student whose input has extra channels.
///
/// Every student tensor with a same-named teacher tensor is overwritten. The
/// first convolution keeps the teacher's slices for the leading input channels
/// and zeros the rest, so the student initially ignores the extra inputs.
pub fn init_student_from_teacher<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
) -> Result<()> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.with_in_channels(sc.in_channels) != *sc {
        return Err(Error::Config(
            "teacher and student differ beyond input channels".into(),
        ));
    }
    if sc.in_channels < tc.in_channels {
        return Err(Error::Config(
            "student has fewer input channels than the teacher".into(),
        ));
    }
    for entry in teacher.store.entries() {
        let Some(id) = student.store.find(&entry.name) else {
            return Err(Error::Config(format!(
                "student lacks parameter {}",
                entry.name
            )));
        };
        let dst = student.store.value_mut(id);
        if dst.shape() == entry.value.shape() {
            dst.assign(&entry.value);
        } else if entry.name == Backbone::input_conv_name() {
            dst.fill(T::zero());
            dst.slice_mut(s![.., 0..tc.in_channels, .., ..])
                .assign(&entry.value);
        } else {
            return Err(Error::Shape(format!(
                "parameter {} differs in shape",
                entry.name
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixaug::{MixMethod, PatchBox};
    use crate::nn::{apply_buffer_updates, Mode};
    use crate::params::normal;
    use ndarray::{Axis, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(in_channels: usize) -> BackboneConfig {
        BackboneConfig {
            n_freq: 16,
            channels: [4, 4, 6, 8],
            pool_kernels: [2, 2, 2],
            embed_dim: 8,
            attn_heads: 2,
            conv_kernel: 3,
            n_classes: 3,
            head_hidden: 8,
            conformer_layers: 1,
            ..BackboneConfig::desk(in_channels)
        }
    }

    fn input(b: usize, t: usize, cfg: &BackboneConfig, seed: u64) -> ArrayD<f64> {
        normal(
            &[b, t, cfg.n_freq, cfg.in_channels],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn full_size_shapes() {
        let cfg = BackboneConfig::teacher();
        assert_eq!(cfg.stage_freqs(), [16, 4, 2, 2]);
        assert_eq!(cfg.encoder_width(), 1024);
        let dims = cfg.site_dims();
        assert_eq!(dims[0], (64, 7));
        assert_eq!(dims[6], (16, 64));
        assert_eq!(dims[18], (2, 512));
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let cfg = BackboneConfig::desk(7);
        let model = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = input(2, 20, &cfg, 2);
        let mut ctx = Ctx::train(&model.store, 0);
        let xv = ctx.tape.constant(x);
        let out = model.net.forward(&mut ctx, xv, None).unwrap();
        assert_eq!(ctx.tape.shape(out.activity), &[2, 4, 13]);
        assert_eq!(ctx.tape.shape(out.location), &[2, 4, 39]);
        assert_eq!(ctx.tape.shape(out.encoder), &[2, 20, 128]);
        assert_eq!(ctx.tape.shape(out.context), &[2, 20, 32]);
        let freqs: Vec<usize> = out.stages.iter().map(|&s| ctx.tape.shape(s)[3]).collect();
        assert_eq!(freqs, vec![16, 4, 2, 2]);
        assert!(ctx
            .tape
            .value(out.activity)
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
        for &a in &out.attention {
            for row in ctx.tape.value(a).lanes(Axis(2)) {
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_input_and_plan() {
        let cfg = tiny(7);
        let model = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ctx = Ctx::eval(&model.store);
        let bad = ctx.tape.constant(ArrayD::zeros(IxDyn(&[1, 7, 16, 7])));
        assert!(model.net.forward(&mut ctx, bad, None).is_err());
        let x = ctx.tape.constant(input(1, 10, &cfg, 1));
        let plan = MixPlan::point(MixMethod::PointMix, 40, 0.5, (16, 7), vec![0]);
        assert!(model.net.forward(&mut ctx, x, Some(&plan)).is_err());
    }

    #[test]
    fn eval_is_batch_independent() {
        let cfg = tiny(7);
        let mut model = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // populate running statistics with one training pass
        let mut ctx = Ctx::train(&model.store, 0);
        let xv = ctx.tape.constant(input(3, 10, &cfg, 5));
        model.net.forward(&mut ctx, xv, None).unwrap();
        let (_, updates) = ctx.finish();
        apply_buffer_updates(&mut model.store, updates);

        let x = input(2, 10, &cfg, 6);
        let single = model
            .predict(&x.slice(s![0..1, .., .., ..]).to_owned().into_dyn())
            .unwrap();
        let dup = ndarray::concatenate(
            Axis(0),
            &[x.slice(s![0..1, .., .., ..]), x.slice(s![0..1, .., .., ..])],
        )
        .unwrap();
        let both = model.predict(&dup.into_dyn()).unwrap();
        let pair = model.predict(&x).unwrap();
        assert_eq!(
            both.0.index_axis(Axis(0), 1),
            single.0.index_axis(Axis(0), 0)
        );
        assert_eq!(
            pair.0.index_axis(Axis(0), 0),
            single.0.index_axis(Axis(0), 0)
        );
        assert_eq!(
            pair.1.index_axis(Axis(0), 0),
            single.1.index_axis(Axis(0), 0)
        );
    }

    #[test]
    fn zero_input_is_finite() {
        let cfg = tiny(7);
        let model = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut ctx = if mode == Mode::Train {
                Ctx::train(&model.store, 0)
            } else {
                Ctx::eval(&model.store)
            };
            let xv = ctx.tape.constant(ArrayD::zeros(IxDyn(&[2, 10, 16, 7])));
            let out = model.net.forward(&mut ctx, xv, None).unwrap();
            assert!(ctx.tape.value(out.location).iter().all(|v| v.is_finite()));
        }
    }

    fn run(
        model: &Model<f64>,
        x: &ArrayD<f64>,
        plan: Option<&MixPlan>,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let mut ctx = Ctx::train(&model.store, 7);
        let xv = ctx.tape.constant(x.clone());
        let out = model.net.forward(&mut ctx, xv, plan).unwrap();
        (
            ctx.tape.value(out.activity).clone(),
            ctx.tape.value(out.location).clone(),
        )
    }

    #[test]
    fn identity_plan_matches_plain_forward() {
        let cfg = tiny(7);
        let model = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = input(3, 10, &cfg, 8);
        let plain = run(&model, &x, None);
        assert_eq!(run(&model, &x, Some(&MixPlan::none(3))), plain);
        let dims = cfg.site_dims();
        for site in [0, 5, 18] {
            let plan = MixPlan::point(MixMethod::PointMix, site, 1.0, dims[site], vec![2, 0, 1]);
            assert_eq!(run(&model, &x, Some(&plan)), plain, "site {site}");
        }
    }

    #[test]
    fn input_mixing_equals_premixed_input() {
        let cfg = tiny(7);
        let model = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = input(3, 10, &cfg, 9);
        let pairing = vec![1, 2, 0];
        let partner = x.select(Axis(0), &pairing);
        let dims = cfg.site_dims()[0];
        let point = MixPlan::point(MixMethod::Mixup, 0, 0.3, dims, pairing.clone());
        let patch = MixPlan::patch(
            MixMethod::CutMix,
            0,
            0.6,
            dims,
            PatchBox {
                f1: 2,
                f2: 9,
                c1: 1,
                c2: 5,
            },
            pairing,
        );
        for plan in [point, patch] {
            // premix in [batch, channel, time, freq] layout
            let to_nchw = |a: &ArrayD<f64>| {
                a.clone()
                    .permuted_axes(IxDyn(&[0, 3, 1, 2]))
                    .as_standard_layout()
                    .into_owned()
            };
            let mixed = crate::mixaug::apply_mix(&plan, &to_nchw(&x), &to_nchw(&partner)).unwrap();
            let mixed = mixed
                .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                .as_standard_layout()
                .into_owned();
            let a = run(&model, &x, Some(&plan));
            let b = run(&model, &mixed, None);
            for (u, v) in a.0.iter().zip(b.0.iter()).chain(a.1.iter().zip(b.1.iter())) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn student_starts_as_teacher() {
        let tcfg = tiny(7);
        let teacher = Model::<f64>::new(tcfg.clone(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut student = Model::<f64>::new(
            tcfg.with_in_channels(19),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        init_student_from_teacher(&teacher, &mut student).unwrap();
        let extra = student.store.num_trainable() as i64 - teacher.store.num_trainable() as i64;
        assert_eq!(extra, (tcfg.channels[0] * 12 * 9) as i64);

        let av = input(2, 10, &tcfg.with_in_channels(19), 12);
        let audio = av.slice(s![.., .., .., 0..7]).to_owned().into_dyn();
        let (pt, yt) = teacher.predict(&audio).unwrap();
        let (ps, ys) = student.predict(&av).unwrap();
        for (a, b) in pt.iter().zip(ps.iter()).chain(yt.iter().zip(ys.iter())) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
