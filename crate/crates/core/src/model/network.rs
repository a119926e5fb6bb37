use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MaskActivation, ModelConfig, VisualStreamPair};
use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone)]
struct BlockIds {
    in_w: ParamId,
    in_b: ParamId,
    prelu1: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    dw: ParamId,
    prelu2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    dilation: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    enc_w: ParamId,
    dec_w: ParamId,
    emb_orig_w: ParamId,
    emb_orig_b: ParamId,
    emb_pi: Option<(ParamId, ParamId)>,
    ad_dw: ParamId,
    ad_pw: ParamId,
    ad_pb: ParamId,
    ad_prelu: ParamId,
    ad_g: ParamId,
    ad_b: ParamId,
    in_ln_g: ParamId,
    in_ln_b: ParamId,
    bn_w: ParamId,
    bn_b: ParamId,
    audio_blocks: Vec<BlockIds>,
    fuse_w: ParamId,
    fuse_b: ParamId,
    fusion_blocks: Vec<BlockIds>,
    out_prelu: ParamId,
    mask_w: ParamId,
    mask_b: ParamId,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Encoded mixture, `N × T`.
    pub audio: Var,
    /// Upsampled visual embedding, `d × T`.
    pub visual: Var,
    /// Estimated mask, `N × T`.
    pub mask: Var,
    /// Extracted waveform, `1 × len`.
    pub estimate: Var,
}

/// The extraction network and its parameters.
#[derive(Debug, Clone)]
pub struct Piave<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Const(f64),
}

/// Names a parameter and creates it; every tensor draws from its own
/// stream seeded by `(seed, name)`, so variants that add or drop a branch
/// share all common weights.
struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

impl<T: Real> Builder<'_, T> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Const(c) => vec![T::from_f64_lossy(c); n],
            Init::FanIn(fan_in) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect()
            }
        };
        self.store.push(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn block(&mut self, prefix: &str, c: &ModelConfig, dilation: usize) -> Result<BlockIds> {
        let (b, h, k) = (c.bottleneck, c.hidden, c.tcn_kernel);
        Ok(BlockIds {
            in_w: self.param(&format!("{prefix}.in.w"), &[h, b, 1], Init::FanIn(b))?,
            in_b: self.param(&format!("{prefix}.in.b"), &[h], Init::Const(0.0))?,
            prelu1: self.param(&format!("{prefix}.prelu1"), &[h], Init::Const(PRELU_INIT))?,
            ln1_g: self.param(&format!("{prefix}.ln1.g"), &[h], Init::Const(1.0))?,
            ln1_b: self.param(&format!("{prefix}.ln1.b"), &[h], Init::Const(0.0))?,
            dw: self.param(&format!("{prefix}.dw"), &[h, k], Init::FanIn(k))?,
            prelu2: self.param(&format!("{prefix}.prelu2"), &[h], Init::Const(PRELU_INIT))?,
            ln2_g: self.param(&format!("{prefix}.ln2.g"), &[h], Init::Const(1.0))?,
            ln2_b: self.param(&format!("{prefix}.ln2.b"), &[h], Init::Const(0.0))?,
            out_w: self.param(&format!("{prefix}.out.w"), &[b, h, 1], Init::FanIn(h))?,
            out_b: self.param(&format!("{prefix}.out.b"), &[b], Init::Const(0.0))?,
            dilation,
        })
    }

    fn stack(&mut self, prefix: &str, c: &ModelConfig, repeats: usize) -> Result<Vec<BlockIds>> {
        let mut blocks = Vec::new();
        for r in 0..repeats {
            for x in 0..c.blocks_per_repeat {
                blocks.push(self.block(&format!("{prefix}.{r}.{x}"), c, 1 << x)?);
            }
        }
        Ok(blocks)
    }
}

fn build_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Ids)> {
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        seed,
    };
    let c = config;
    let (n, bn, d, v) = (c.enc_filters, c.bottleneck, c.visual_dim, c.visual_features);
    let enc_w = b.param("encoder.w", &[n, 1, c.enc_kernel], Init::FanIn(c.enc_kernel))?;
    let dec_w = b.param("decoder.w", &[n, 1, c.enc_kernel], Init::FanIn(n))?;
    let emb_orig_w = b.param("visual.embed_orig.w", &[d, v, 1], Init::FanIn(v))?;
    let emb_orig_b = b.param("visual.embed_orig.b", &[d], Init::Const(0.0))?;
    let emb_pi = if c.pose_invariant_stream {
        Some((
            b.param("visual.embed_pi.w", &[d, v, 1], Init::FanIn(v))?,
            b.param("visual.embed_pi.b", &[d], Init::Const(0.0))?,
        ))
    } else {
        None
    };
    let ids = Ids {
        enc_w,
        dec_w,
        emb_orig_w,
        emb_orig_b,
        emb_pi,
        ad_dw: b.param("visual.adapter.dw", &[d, 3], Init::FanIn(3))?,
        ad_pw: b.param("visual.adapter.pw", &[d, d, 1], Init::FanIn(d))?,
        ad_pb: b.param("visual.adapter.pb", &[d], Init::Const(0.0))?,
        ad_prelu: b.param("visual.adapter.prelu", &[d], Init::Const(PRELU_INIT))?,
        ad_g: b.param("visual.adapter.ln.g", &[d], Init::Const(1.0))?,
        ad_b: b.param("visual.adapter.ln.b", &[d], Init::Const(0.0))?,
        in_ln_g: b.param("separator.ln.g", &[n], Init::Const(1.0))?,
        in_ln_b: b.param("separator.ln.b", &[n], Init::Const(0.0))?,
        bn_w: b.param("separator.bottleneck.w", &[bn, n, 1], Init::FanIn(n))?,
        bn_b: b.param("separator.bottleneck.b", &[bn], Init::Const(0.0))?,
        audio_blocks: b.stack("separator.audio", c, c.audio_repeats)?,
        fuse_w: b.param("separator.fuse.w", &[bn, bn + d, 1], Init::FanIn(bn + d))?,
        fuse_b: b.param("separator.fuse.b", &[bn], Init::Const(0.0))?,
        fusion_blocks: b.stack("separator.fusion", c, c.fusion_repeats)?,
        out_prelu: b.param("separator.out.prelu", &[bn], Init::Const(PRELU_INIT))?,
        mask_w: b.param("separator.mask.w", &[n, bn, 1], Init::FanIn(bn))?,
        mask_b: b.param("separator.mask.b", &[n], Init::Const(0.0))?,
    };
    Ok((store, ids))
}

impl<T: Real> Piave<T> {
    /// Freshly initialized network.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, ids) = build_params(&config, seed)?;
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    /// Network with the given parameters, which must match the layout
    /// implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.assign_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Piave<U> {
        Piave {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Multiplies the decoder, and so every output waveform, by `gain`.
    pub fn scale_output(&mut self, gain: T) {
        for w in self.params.get_mut(self.ids.dec_w).data_mut() {
            *w *= gain;
        }
    }

    /// Parameter id of the pose-invariant embedder's bias, if present.
    pub fn pose_invariant_bias(&self) -> Option<ParamId> {
        self.ids.emb_pi.map(|(_, b)| b)
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Adds every parameter to `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// ReLU-activated strided convolution: `1 × len` → `N × T` with
    /// `T = (len - kernel) / stride + 1`.
    pub fn encode_audio(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let len = *g.shape(x).last().unwrap_or(&0);
        if len < self.config.enc_kernel {
            return Err(Error::TooShort(format!(
                "mixture of {len} samples is shorter than the {}-sample encoder kernel",
                self.config.enc_kernel
            )));
        }
        let h = g.conv1d(x, p[self.ids.enc_w.index()], None, self.config.enc_stride, 0, 1)?;
        Ok(g.relu(h))
    }

    /// Transposed convolution back to `1 × len`, trimmed or padded.
    pub fn decode_audio(&self, g: &mut Graph<T>, p: &[Var], masked: Var, len: usize) -> Result<Var> {
        if g.shape(masked).first() != Some(&self.config.enc_filters) {
            return Err(Error::Dimension(format!(
                "decoder expects {} channels, got shape {:?}",
                self.config.enc_filters,
                g.shape(masked)
            )));
        }
        let y = g.conv_transpose1d(masked, p[self.ids.dec_w.index()], self.config.enc_stride)?;
        g.fit_length(y, len)
    }

    fn stream_leaf(&self, g: &mut Graph<T>, frames: &super::FeatureFrames) -> Result<Var> {
        let data = frames
            .transposed()
            .into_iter()
            .map(|v| T::from_f64_lossy(v as f64))
            .collect();
        Ok(g.constant(Tensor::new(vec![frames.features(), frames.frames()], data)?))
    }

    /// Embeds both views per frame, fuses them by addition, runs the
    /// temporal adapter and upsamples to `audio_frames` steps.
    pub fn encode_visual(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        streams: &VisualStreamPair,
        audio_frames: usize,
    ) -> Result<Var> {
        let v = self.config.visual_features;
        if streams.original.features() != v {
            return Err(Error::Dimension(format!(
                "model expects {v} visual features, got {}",
                streams.original.features()
            )));
        }
        if streams.frames() == 0 {
            return Err(Error::Empty("visual stream has no frames".into()));
        }
        let orig = self.stream_leaf(g, &streams.original)?;
        let mut fused = g.conv1d(
            orig,
            p[self.ids.emb_orig_w.index()],
            Some(p[self.ids.emb_orig_b.index()]),
            1,
            0,
            1,
        )?;
        match (self.ids.emb_pi, &streams.pose_invariant) {
            (Some((w, b)), Some(pi)) => {
                if pi.frames() != streams.original.frames() || pi.features() != v {
                    return Err(Error::Dimension(format!(
                        "pose-invariant stream {}×{} vs original {}×{}",
                        pi.frames(),
                        pi.features(),
                        streams.original.frames(),
                        v
                    )));
                }
                let x = self.stream_leaf(g, pi)?;
                let e = g.conv1d(x, p[w.index()], Some(p[b.index()]), 1, 0, 1)?;
                fused = g.add(e, fused)?;
            }
            (Some(_), None) => {
                return Err(Error::Config(
                    "this model needs the pose-invariant stream".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "single-stream model must not be given a pose-invariant stream".into(),
                ))
            }
            (None, None) => {}
        }
        let h = g.depthwise_separable_conv1d(
            fused,
            p[self.ids.ad_dw.index()],
            p[self.ids.ad_pw.index()],
            Some(p[self.ids.ad_pb.index()]),
            1,
            1,
        )?;
        let h = g.prelu(h, p[self.ids.ad_prelu.index()])?;
        let h = g.global_layer_norm(h, p[self.ids.ad_g.index()], p[self.ids.ad_b.index()])?;
        let adapted = g.add(fused, h)?;
        g.nearest_upsample_time(adapted, audio_frames)
    }

    fn block(&self, g: &mut Graph<T>, p: &[Var], ids: &BlockIds, x: Var) -> Result<Var> {
        let pad = ids.dilation * (self.config.tcn_kernel - 1) / 2;
        let h = g.conv1d(x, p[ids.in_w.index()], Some(p[ids.in_b.index()]), 1, 0, 1)?;
        let h = g.prelu(h, p[ids.prelu1.index()])?;
        let h = g.global_layer_norm(h, p[ids.ln1_g.index()], p[ids.ln1_b.index()])?;
        let h = g.depthwise_conv1d(h, p[ids.dw.index()], ids.dilation, pad)?;
        let h = g.prelu(h, p[ids.prelu2.index()])?;
        let h = g.global_layer_norm(h, p[ids.ln2_g.index()], p[ids.ln2_b.index()])?;
        let h = g.conv1d(h, p[ids.out_w.index()], Some(p[ids.out_b.index()]), 1, 0, 1)?;
        g.add(x, h)
    }

    /// Mask over the encoded mixture, conditioned on the visual embedding.
    pub fn separator_mask(&self, g: &mut Graph<T>, p: &[Var], audio: Var, visual: Var) -> Result<Var> {
        let (ta, tv) = (g.shape(audio)[1], g.shape(visual)[1]);
        if ta != tv {
            return Err(Error::Dimension(format!(
                "audio has {ta} frames but visual embedding has {tv}"
            )));
        }
        let ids = &self.ids;
        let h = g.global_layer_norm(audio, p[ids.in_ln_g.index()], p[ids.in_ln_b.index()])?;
        let mut h = g.conv1d(h, p[ids.bn_w.index()], Some(p[ids.bn_b.index()]), 1, 0, 1)?;
        for b in &ids.audio_blocks {
            h = self.block(g, p, b, h)?;
        }
        let joint = g.concat(&[h, visual], 0)?;
        let mut h = g.conv1d(joint, p[ids.fuse_w.index()], Some(p[ids.fuse_b.index()]), 1, 0, 1)?;
        for b in &ids.fusion_blocks {
            h = self.block(g, p, b, h)?;
        }
        let h = g.prelu(h, p[ids.out_prelu.index()])?;
        let m = g.conv1d(h, p[ids.mask_w.index()], Some(p[ids.mask_b.index()]), 1, 0, 1)?;
        Ok(match self.config.mask_activation {
            MaskActivation::Relu => g.relu(m),
            MaskActivation::Sigmoid => g.sigmoid(m),
        })
    }

    /// Full forward pass: decode(mask ⊙ encode(mixture)).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        mixture: &[T],
        streams: &VisualStreamPair,
    ) -> Result<ForwardOutput> {
        let len = mixture.len();
        let x = g.constant(Tensor::new(vec![1, len], mixture.to_vec())?);
        let audio = self.encode_audio(g, p, x)?;
        let frames = g.shape(audio)[1];
        let visual = self.encode_visual(g, p, streams, frames)?;
        let mask = self.separator_mask(g, p, audio, visual)?;
        let masked = g.mul(mask, audio)?;
        let estimate = self.decode_audio(g, p, masked, len)?;
        Ok(ForwardOutput {
            audio,
            visual,
            mask,
            estimate,
        })
    }

    /// Inference: the extracted waveform, same length as `mixture`.
    pub fn extract(&self, mixture: &[T], streams: &VisualStreamPair) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, mixture, streams)?;
        Ok(g.value(out.estimate).data().to_vec())
    }
}
