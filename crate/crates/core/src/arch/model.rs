//! Forward pass: initial convolution, conditioning, the core block stack, decoder.

use super::config::{
    DecoderConv, DecoderReduce, ImageDims, InitialNonlinearity, InitialNorm, StoicConfig,
    TimeConcat, LAYER_NORM_EPS, TIME_FEATURES,
};
use super::params::{block_prefix, ParamStore};
use super::params::{build_params, randomize_params};
use crate::error::{Result, StoicError};
use crate::numerics::kernels::{self, gelu_scalar, AttnDims};
use crate::numerics::{
    batch_norm2d, conv2d, conv_transpose2d, finite_diff_grad_check, gelu, layer_norm, mlp,
    multi_head_attention, AttentionParams, Element, GradCheckOptions, GradReport, MlpParams,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch_of<E: Element>(op: &'static str, x: &Tensor<E>, rank: usize) -> Result<usize> {
    if x.rank() != rank {
        return Err(StoicError::shape(
            op,
            format!("expected rank {rank}, got {:?}", x.shape()),
        ));
    }
    Ok(x.shape()[0])
}

/// Convolves `[B, C', H, W]` with the variant's geometry and flattens the spatial map
/// row-major into a `[B, T, L]` sequence. No tokenization, no positional embedding.
pub fn initial_conv<E: Element>(
    x: &Tensor<E>,
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Tensor<E>> {
    let batch = batch_of("initial_conv", x, 4)?;
    let expected = config.init_conv_in_channels();
    if x.shape()[1] != expected {
        return Err(StoicError::shape(
            "initial_conv",
            format!(
                "input has {} channels, {} time concat expects {expected}",
                x.shape()[1],
                config.time_concat
            ),
        ));
    }
    let (_, s, p) = config.stride.geometry();
    let mut y = conv2d(
        x,
        params.get("init_conv/weight")?,
        params.get("init_conv/bias")?,
        s,
        p,
    )?;
    if config.initial_norm == InitialNorm::BatchNorm {
        y = batch_norm2d(
            &y,
            params.get("init_norm/gamma")?,
            params.get("init_norm/beta")?,
            LAYER_NORM_EPS,
        )?;
    }
    if config.initial_nonlinearity == InitialNonlinearity::Gelu {
        y = gelu(&y);
    }
    let (l, t) = (config.embed_dim, y.shape()[2] * y.shape()[3]);
    y.reshape(&[batch, l, t])?.transpose_last2()
}

/// `[sin(t·f_i) | cos(t·f_i)]` with geometric frequencies `f_i = 10000^(−i/half)`.
pub fn sinusoidal_features<E: Element>(t: &[usize], dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let row_start = data.len();
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(E::from_f64((step as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(E::from_f64((step as f64 * freq).cos()));
        }
        data.resize(row_start + dim, E::zero());
    }
    Tensor::from_vec(data, &[t.len(), dim]).expect("consistent shape")
}

/// One channel plane per batch element: sinusoidal features → linear → reshape to the
/// input grid (`before_conv`) or the post-conv grid (`after_conv`).
pub fn time_embed<E: Element>(
    t: &[usize],
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Tensor<E>> {
    let (h, w) = match config.time_concat {
        TimeConcat::BeforeConv => (config.image.height, config.image.width),
        TimeConcat::AfterConv => config.grid(),
    };
    let plane = sinusoidal_features::<E>(t, TIME_FEATURES).linear(
        params.get("time_embed/weight")?,
        Some(params.get("time_embed/bias")?),
    )?;
    plane.reshape(&[t.len(), 1, h, w])
}

/// Joins the context tokens onto the feature channels and projects back to `L`.
///
/// Each of the 77 tokens is mapped by a shared linear layer to a `T`-long plane; the planes
/// are concatenated as extra channels (`L → L+77`) and a per-position linear maps `L+77 → L`.
pub fn apply_context<E: Element>(
    features: &Tensor<E>,
    context: &Tensor<E>,
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Tensor<E>> {
    let ctx = config
        .context
        .ok_or_else(|| StoicError::Config("model has no context path".into()))?;
    let batch = batch_of("apply_context", features, 3)?;
    if context.shape() != [batch, ctx.tokens, ctx.token_dim] {
        return Err(StoicError::shape(
            "apply_context",
            format!(
                "context {:?}, expected [{batch}, {}, {}]",
                context.shape(),
                ctx.tokens,
                ctx.token_dim
            ),
        ));
    }
    let planes = context.linear(
        params.get("context_embed/weight")?,
        Some(params.get("context_embed/bias")?),
    )?;
    let planes = planes.transpose_last2()?; // [B, T, 77]
    let joined = Tensor::concat(&[features, &planes], 2)?;
    joined.linear(
        params.get("context_proj/weight")?,
        Some(params.get("context_proj/bias")?),
    )
}

/// Pre-LN residual transformer block: `y = x + MHA(LN(x))`, `z = y + MLP(LN(y))`.
pub fn core_block<E: Element>(
    seq: &Tensor<E>,
    params: &ParamStore<E>,
    index: usize,
    heads: usize,
) -> Result<Tensor<E>> {
    let p = block_prefix(index);
    let g = |name: &str| params.get(&format!("{p}/{name}"));
    let h = layer_norm(seq, g("ln1/gamma")?, g("ln1/beta")?, LAYER_NORM_EPS)?;
    let attn = AttentionParams {
        qkv_w: g("attn/qkv_w")?,
        qkv_b: g("attn/qkv_b")?,
        out_w: g("attn/out_w")?,
        out_b: g("attn/out_b")?,
    };
    let y = seq.add(&multi_head_attention(&h, attn, heads)?)?;
    let h = layer_norm(&y, g("ln2/gamma")?, g("ln2/beta")?, LAYER_NORM_EPS)?;
    let m = MlpParams {
        fc1_w: g("mlp/fc1_w")?,
        fc1_b: g("mlp/fc1_b")?,
        fc2_w: g("mlp/fc2_w")?,
        fc2_b: g("mlp/fc2_b")?,
    };
    y.add(&mlp(&h, m)?)
}

/// Runs the N blocks, keeping every intermediate sequence.
pub fn core_stack_materialized<E: Element>(
    seq: &Tensor<E>,
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Vec<Tensor<E>>> {
    let mut outs = Vec::with_capacity(config.num_blocks);
    let mut cur = seq.clone();
    for i in 0..config.num_blocks {
        cur = core_block(&cur, params, i, config.heads)?;
        outs.push(cur.clone());
    }
    Ok(outs)
}

pub fn core_stack<E: Element>(
    seq: &Tensor<E>,
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Tensor<E>> {
    let mut cur = seq.clone();
    for i in 0..config.num_blocks {
        cur = core_block(&cur, params, i, config.heads)?;
    }
    Ok(cur)
}

/// Inference-only execution of the block stack over two ping-pong activation buffers and
/// one set of scratch buffers, all sized once for a `[B, T, L]` sequence. Activation memory
/// is independent of the number of blocks.
pub struct StreamingStack<E: Element> {
    dims: AttnDims,
    hidden: usize,
    buffers: [Vec<E>; 2],
    normed: Vec<E>,
    qkv: Vec<E>,
    probs: Vec<E>,
    mixed: Vec<E>,
    projected: Vec<E>,
    expanded: Vec<E>,
}

impl<E: Element> StreamingStack<E> {
    pub fn new(batch: usize, config: &StoicConfig) -> Self {
        let (t, l) = (config.tokens(), config.embed_dim);
        let n = batch * t * l;
        StreamingStack {
            dims: AttnDims {
                batch,
                tokens: t,
                width: l,
                heads: config.heads,
            },
            hidden: config.mlp_hidden(),
            buffers: [vec![E::zero(); n], vec![E::zero(); n]],
            normed: vec![E::zero(); n],
            qkv: vec![E::zero(); 3 * n],
            probs: vec![E::zero(); batch * config.heads * t * t],
            mixed: vec![E::zero(); n],
            projected: vec![E::zero(); n],
            expanded: vec![E::zero(); batch * t * config.mlp_hidden()],
        }
    }

    /// Bytes held by the activation and scratch buffers.
    pub fn footprint_bytes(&self) -> usize {
        let elems = self.buffers.iter().map(Vec::len).sum::<usize>()
            + self.normed.len()
            + self.qkv.len()
            + self.probs.len()
            + self.mixed.len()
            + self.projected.len()
            + self.expanded.len();
        elems * std::mem::size_of::<E>()
    }

    pub fn run(
        &mut self,
        seq: &Tensor<E>,
        params: &ParamStore<E>,
        num_blocks: usize,
    ) -> Result<Tensor<E>> {
        let AttnDims {
            batch,
            tokens,
            width,
            ..
        } = self.dims;
        if seq.shape() != [batch, tokens, width] {
            return Err(StoicError::shape(
                "streaming_stack",
                format!("{:?} vs [{batch}, {tokens}, {width}]", seq.shape()),
            ));
        }
        self.buffers[0].copy_from_slice(seq.data());
        let eps = E::from_f64(LAYER_NORM_EPS);
        let (l, hidden) = (width, self.hidden);
        for i in 0..num_blocks {
            let p = block_prefix(i);
            let g = |name: &str| params.get(&format!("{p}/{name}")).map(|t| t.data());
            let (src, dst) = if i % 2 == 0 {
                let [a, b] = &mut self.buffers;
                (&*a, b)
            } else {
                let [a, b] = &mut self.buffers;
                (&*b, a)
            };
            kernels::layer_norm_into(
                src,
                g("ln1/gamma")?,
                g("ln1/beta")?,
                eps,
                &mut self.normed,
                None,
            );
            kernels::linear_into(
                &self.normed,
                g("attn/qkv_w")?,
                Some(g("attn/qkv_b")?),
                l,
                3 * l,
                &mut self.qkv,
            );
            kernels::attention_probs_into(&self.qkv, self.dims, &mut self.probs);
            kernels::attention_apply_into(&self.qkv, &self.probs, self.dims, &mut self.mixed);
            kernels::linear_into(
                &self.mixed,
                g("attn/out_w")?,
                Some(g("attn/out_b")?),
                l,
                l,
                &mut self.projected,
            );
            for ((d, &s), &a) in dst.iter_mut().zip(src.iter()).zip(&self.projected) {
                *d = s + a;
            }
            kernels::layer_norm_into(
                dst,
                g("ln2/gamma")?,
                g("ln2/beta")?,
                eps,
                &mut self.normed,
                None,
            );
            kernels::linear_into(
                &self.normed,
                g("mlp/fc1_w")?,
                Some(g("mlp/fc1_b")?),
                l,
                hidden,
                &mut self.expanded,
            );
            self.expanded.iter_mut().for_each(|v| *v = gelu_scalar(*v));
            kernels::linear_into(
                &self.expanded,
                g("mlp/fc2_w")?,
                Some(g("mlp/fc2_b")?),
                hidden,
                l,
                &mut self.projected,
            );
            for (d, &m) in dst.iter_mut().zip(&self.projected) {
                *d = *d + m;
            }
        }
        let out = &self.buffers[num_blocks % 2];
        Tensor::from_vec(out.clone(), seq.shape())
    }
}

/// Layer norm, channel reduction (`slice` or `linear`), reshape to `[B, C, H_o, W_o]`, then
/// the final spatial layer back to `[B, C, H, W]`.
pub fn decoder<E: Element>(
    seq: &Tensor<E>,
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Tensor<E>> {
    let batch = batch_of("decoder", seq, 3)?;
    let (gh, gw) = config.grid();
    let c = config.image.channels;
    if seq.shape()[1] != gh * gw || seq.shape()[2] != config.embed_dim {
        return Err(StoicError::shape(
            "decoder",
            format!(
                "sequence {:?}, expected [B, {}, {}]",
                seq.shape(),
                gh * gw,
                config.embed_dim
            ),
        ));
    }
    let h = layer_norm(
        seq,
        params.get("decoder/ln/gamma")?,
        params.get("decoder/ln/beta")?,
        LAYER_NORM_EPS,
    )?;
    let reduced = match config.decoder_reduce {
        DecoderReduce::Slice => {
            if c > config.embed_dim {
                return Err(StoicError::Config(format!(
                    "slice reduce needs channels {c} <= embed_dim {}",
                    config.embed_dim
                )));
            }
            h.narrow_last(0, c)?
        }
        DecoderReduce::Linear => h.linear(
            params.get("decoder/reduce/weight")?,
            Some(params.get("decoder/reduce/bias")?),
        )?,
    };
    let img = reduced.transpose_last2()?.reshape(&[batch, c, gh, gw])?;
    let (_, s, p) = config.decoder_geometry();
    let (w, b) = (
        params.get("decoder/conv/weight")?,
        params.get("decoder/conv/bias")?,
    );
    match config.decoder_conv {
        DecoderConv::Conv => conv2d(&img, w, b, s, p),
        DecoderConv::ConvTranspose => conv_transpose2d(&img, w, b, s, p),
    }
}

/// Everything up to (not including) the block stack: time/context conditioning and the
/// initial convolution. Returns the `[B, T, L]` sequence the blocks consume.
pub fn embed_input<E: Element>(
    x_t: &Tensor<E>,
    t: &[usize],
    context: Option<&Tensor<E>>,
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Tensor<E>> {
    let batch = batch_of("stoic_forward", x_t, 4)?;
    let img = config.image;
    if x_t.shape()[1..] != [img.channels, img.height, img.width] {
        return Err(StoicError::shape(
            "stoic_forward",
            format!(
                "input {:?}, expected [B, {}, {}, {}]",
                x_t.shape(),
                img.channels,
                img.height,
                img.width
            ),
        ));
    }
    if t.len() != batch {
        return Err(StoicError::shape(
            "stoic_forward",
            format!("{} timesteps for batch {batch}", t.len()),
        ));
    }
    match (config.context.is_some(), context.is_some()) {
        (true, false) => {
            return Err(StoicError::invalid(
                "stoic_forward",
                "model is conditional but no context was given",
            ))
        }
        (false, true) => {
            return Err(StoicError::invalid(
                "stoic_forward",
                "model is unconditional but a context was given",
            ))
        }
        _ => {}
    }

    let plane = time_embed(t, params, config)?;
    let mut seq = match config.time_concat {
        TimeConcat::BeforeConv => {
            initial_conv(&Tensor::concat(&[x_t, &plane], 1)?, params, config)?
        }
        TimeConcat::AfterConv => {
            let seq = initial_conv(x_t, params, config)?;
            let column = plane.reshape(&[batch, config.tokens(), 1])?;
            Tensor::concat(&[&seq, &column], 2)?.linear(
                params.get("time_proj/weight")?,
                Some(params.get("time_proj/bias")?),
            )?
        }
    };
    if let Some(ctx) = context {
        seq = apply_context(&seq, ctx, params, config)?;
    }
    Ok(seq)
}

/// Noise prediction `ε̂(x_t, t[, c])`, same shape as `x_t`.
pub fn stoic_forward<E: Element>(
    x_t: &Tensor<E>,
    t: &[usize],
    context: Option<&Tensor<E>>,
    params: &ParamStore<E>,
    config: &StoicConfig,
) -> Result<Tensor<E>> {
    let seq = embed_input(x_t, t, context, params, config)?;
    let seq = core_stack(&seq, params, config)?;
    decoder(&seq, params, config)
}

/// A configuration bound to its parameters.
#[derive(Clone, Debug)]
pub struct StoicModel<E: Element = f32> {
    pub config: StoicConfig,
    pub params: ParamStore<E>,
}

impl<E: Element> StoicModel<E> {
    pub fn new(config: StoicConfig, params: ParamStore<E>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(StoicModel { config, params })
    }

    pub fn forward(
        &self,
        x_t: &Tensor<E>,
        t: &[usize],
        context: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        stoic_forward(x_t, t, context, &self.params, &self.config)
    }
}

/// Finite-difference check of the whole network in 64-bit: parameters are perturbed away
/// from the zero-initialized decoder, and the scalar is the MSE of a two-image batch
/// against a random target.
pub fn model_grad_check(
    config: &StoicConfig,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradReport> {
    config.validate()?;
    let params = randomize_params(
        &build_params::<f64>(config, seed)?,
        seed.wrapping_add(11),
        0.3,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let mut draw = |shape: &[usize]| -> Result<Tensor<f64>> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    };
    let ImageDims {
        channels,
        height,
        width,
    } = config.image;
    let x = draw(&[2, channels, height, width])?;
    let target = draw(&[2, channels, height, width])?;
    let ctx = config
        .context
        .map(|cc| draw(&[2, cc.tokens, cc.token_dim]))
        .transpose()?;
    let f =
        |ps: &ParamStore<f64>| stoic_forward(&x, &[3, 17], ctx.as_ref(), ps, config)?.mse(&target);
    finite_diff_grad_check(f, &params, opts)
}
