//! Encoder and the two decoder families.
//!
//! Both decoders share the affine maps `theta_0 .. theta_L`. The plain stack
//! computes
//!
//! ```text
//! h1 = act(theta_0 z);  h_{l+1} = act(theta_l h_l);  logits = theta_L h_L
//! ```
//!
//! and the skip stack feeds `z` into every layer after the first through a
//! learned combiner
//!
//! ```text
//! h_{l+1} = act(W_l^h (theta_l h_l) + W_l^z z + b_l);  logits = W_L^h (theta_L h_L) + W_L^z z + b_L
//! ```
//!
//! With `W^h = I`, `W^z = 0` and `b = 0` the skip stack evaluates to exactly
//! the plain one.
//!
//! Parameters live in a flat, named [`ParamSet`]; a [`Vae`] pairs it with
//! the index layout of its architecture and binds it onto a tape on demand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::distributions::{GaussianVars, LOGVAR_MAX, LOGVAR_MIN};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'t>(self, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub encoder_widths: Vec<usize>,
    /// Hidden widths `h1 .. hL`; the length is the decoder depth `L`.
    pub decoder_widths: Vec<usize>,
    pub skip_enabled: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// MLP encoder with two 512-unit layers and a decoder of `depth` 512-unit layers.
    pub fn mlp(data_dim: usize, latent_dim: usize, depth: usize, skip_enabled: bool) -> Self {
        Self {
            latent_dim,
            data_dim,
            encoder_widths: vec![512, 512],
            decoder_widths: vec![512; depth],
            skip_enabled,
            activation: Activation::Relu,
        }
    }

    pub fn depth(&self) -> usize {
        self.decoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.data_dim == 0 {
            return Err(Error::Config("latent_dim and data_dim must be positive".into()));
        }
        if self.decoder_widths.is_empty() {
            return Err(Error::Config("decoder needs at least one hidden layer".into()));
        }
        if self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter().map(|(n, t)| (n.to_string(), t.norm_sq())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug)]
struct AffineIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct SkipIdx {
    wh: usize,
    wz: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder_hidden: Vec<AffineIdx>,
    mean_head: AffineIdx,
    logvar_head: AffineIdx,
    decoder: Vec<AffineIdx>,
    skips: Vec<SkipIdx>,
}

/// `(name, shape)` of every parameter in the canonical order.
fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let affine = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, fan_in: usize, fan_out: usize| {
        out.push((format!("{prefix}.weight"), vec![fan_in, fan_out]));
        out.push((format!("{prefix}.bias"), vec![fan_out]));
    };
    let mut width = config.data_dim;
    for (i, &w) in config.encoder_widths.iter().enumerate() {
        affine(&mut out, format!("encoder.hidden.{i}"), width, w);
        width = w;
    }
    affine(&mut out, "encoder.mean".into(), width, config.latent_dim);
    affine(&mut out, "encoder.logvar".into(), width, config.latent_dim);

    let widths = decoder_io_widths(config);
    for (l, pair) in widths.windows(2).enumerate() {
        affine(&mut out, format!("decoder.layer.{l}"), pair[0], pair[1]);
    }
    if config.skip_enabled {
        for l in 1..=config.depth() {
            let w = widths[l + 1];
            out.push((format!("decoder.skip.{l}.wh"), vec![w, w]));
            out.push((format!("decoder.skip.{l}.wz"), vec![config.latent_dim, w]));
            out.push((format!("decoder.skip.{l}.bias"), vec![w]));
        }
    }
    out
}

/// `[D, h1, .., hL, P]`.
fn decoder_io_widths(config: &ModelConfig) -> Vec<usize> {
    let mut w = vec![config.latent_dim];
    w.extend(&config.decoder_widths);
    w.push(config.data_dim);
    w
}

fn build_layout(config: &ModelConfig, params: &ParamSet) -> Result<Layout> {
    let expected = parameter_shapes(config);
    if expected.len() != params.len() {
        return Err(Error::Config(format!(
            "architecture expects {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for ((name, shape), (got_name, got)) in expected.iter().zip(params.iter()) {
        if name != got_name || shape.as_slice() != got.shape() {
            return Err(Error::Config(format!(
                "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                got.shape()
            )));
        }
    }
    let idx = |name: String| params.index_of(&name).expect("validated above");
    let affine = |prefix: String| AffineIdx {
        weight: idx(format!("{prefix}.weight")),
        bias: idx(format!("{prefix}.bias")),
    };
    Ok(Layout {
        encoder_hidden: (0..config.encoder_widths.len())
            .map(|i| affine(format!("encoder.hidden.{i}")))
            .collect(),
        mean_head: affine("encoder.mean".into()),
        logvar_head: affine("encoder.logvar".into()),
        decoder: (0..=config.depth())
            .map(|l| affine(format!("decoder.layer.{l}")))
            .collect(),
        skips: if config.skip_enabled {
            (1..=config.depth())
                .map(|l| SkipIdx {
                    wh: idx(format!("decoder.skip.{l}.wh")),
                    wz: idx(format!("decoder.skip.{l}.wz")),
                    bias: idx(format!("decoder.skip.{l}.bias")),
                })
                .collect()
        } else {
            Vec::new()
        },
    })
}

/// Glorot-uniform weights (`bound = sqrt(6 / (fan_in + fan_out))`) and zero
/// biases, drawn from the `init` substream of `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = rng::substream(seed, rng::INIT);
    let mut params = ParamSet::new();
    for (name, shape) in parameter_shapes(config) {
        let tensor = if shape.len() == 2 {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let data = (0..shape[0] * shape[1])
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(shape, data)?
        } else {
            Tensor::zeros(&shape)
        };
        params.push(name, tensor);
    }
    Ok(params)
}

/// Which parameter groups receive gradients when bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    All,
    Encoder,
    Decoder,
    Nothing,
}

/// A variational autoencoder: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Vae {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl Vae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    fn is_encoder_param(&self, i: usize) -> bool {
        self.params.names()[i].starts_with("encoder.")
    }

    pub fn bind<'t>(&self, tape: &'t Tape, track: Track) -> BoundVae<'t> {
        let vars: Vec<Var<'t>> = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let tracked = match track {
                    Track::All => true,
                    Track::Encoder => self.is_encoder_param(i),
                    Track::Decoder => !self.is_encoder_param(i),
                    Track::Nothing => false,
                };
                if tracked {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let l = &self.layout;
        let affine = |a: &AffineIdx| AffineVars {
            weight: vars[a.weight],
            bias: vars[a.bias],
        };
        let encoder = EncoderVars {
            hidden: l.encoder_hidden.iter().map(affine).collect(),
            mean: affine(&l.mean_head),
            logvar: affine(&l.logvar_head),
            activation: self.config.activation,
        };
        let plain = PlainDecoderVars {
            layers: l.decoder.iter().map(affine).collect(),
            activation: self.config.activation,
        };
        let decoder = if self.config.skip_enabled {
            DecoderVars::Skip(SkipDecoderVars {
                base: plain,
                skips: l
                    .skips
                    .iter()
                    .map(|s| SkipVars {
                        wh: vars[s.wh],
                        wz: vars[s.wz],
                        bias: vars[s.bias],
                    })
                    .collect(),
            })
        } else {
            DecoderVars::Plain(plain)
        };
        BoundVae {
            vars,
            encoder,
            decoder,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> AffineVars<'t> {
    pub fn apply(&self, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(&self.weight)?.add(&self.bias)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SkipVars<'t> {
    pub wh: Var<'t>,
    pub wz: Var<'t>,
    pub bias: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct EncoderVars<'t> {
    pub hidden: Vec<AffineVars<'t>>,
    pub mean: AffineVars<'t>,
    pub logvar: AffineVars<'t>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct PlainDecoderVars<'t> {
    /// `theta_0 .. theta_L`.
    pub layers: Vec<AffineVars<'t>>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct SkipDecoderVars<'t> {
    pub base: PlainDecoderVars<'t>,
    /// `W_1 .. W_L`.
    pub skips: Vec<SkipVars<'t>>,
}

#[derive(Clone, Debug)]
pub enum DecoderVars<'t> {
    Plain(PlainDecoderVars<'t>),
    Skip(SkipDecoderVars<'t>),
}

/// Gaussian posterior parameters for a batch `x`; log-variances are clamped
/// to `[LOGVAR_MIN, LOGVAR_MAX]`.
pub fn encode<'t>(x: &Var<'t>, enc: &EncoderVars<'t>) -> Result<GaussianVars<'t>> {
    let mut h = *x;
    for layer in &enc.hidden {
        h = enc.activation.apply(&layer.apply(&h)?)?;
    }
    Ok(GaussianVars {
        mean: enc.mean.apply(&h)?,
        logvar: enc.logvar.apply(&h)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?,
    })
}

/// Bernoulli logits of the plain stack.
pub fn decode_plain<'t>(z: &Var<'t>, dec: &PlainDecoderVars<'t>) -> Result<Var<'t>> {
    let last = dec.layers.len() - 1;
    let mut h = *z;
    for (l, layer) in dec.layers.iter().enumerate() {
        h = layer.apply(&h)?;
        if l < last {
            h = dec.activation.apply(&h)?;
        }
    }
    Ok(h)
}

/// `act(h_out W^h + z W^z + b)`, with the identity in place of `act` on the
/// output layer.
pub fn skip_combine<'t>(
    h_out: &Var<'t>,
    z: &Var<'t>,
    skip: &SkipVars<'t>,
    activation: Activation,
    is_last: bool,
) -> Result<Var<'t>> {
    let pre = h_out
        .matmul(&skip.wh)?
        .add(&z.matmul(&skip.wz)?)?
        .add(&skip.bias)?;
    if is_last {
        Ok(pre)
    } else {
        activation.apply(&pre)
    }
}

/// Bernoulli logits of the skip stack.
pub fn decode_skip<'t>(z: &Var<'t>, dec: &SkipDecoderVars<'t>) -> Result<Var<'t>> {
    let layers = &dec.base.layers;
    let act = dec.base.activation;
    if dec.skips.len() + 1 != layers.len() {
        return Err(Error::Config(format!(
            "skip decoder has {} affine maps but {} skip combiners",
            layers.len(),
            dec.skips.len()
        )));
    }
    let mut h = act.apply(&layers[0].apply(z)?)?;
    let depth = dec.skips.len();
    for (l, skip) in dec.skips.iter().enumerate() {
        let f = layers[l + 1].apply(&h)?;
        h = skip_combine(&f, z, skip, act, l + 1 == depth)?;
    }
    Ok(h)
}

/// A [`Vae`] whose parameters are recorded on a tape.
pub struct BoundVae<'t> {
    vars: Vec<Var<'t>>,
    pub encoder: EncoderVars<'t>,
    pub decoder: DecoderVars<'t>,
}

impl<'t> BoundVae<'t> {
    pub fn encode(&self, x: &Var<'t>) -> Result<GaussianVars<'t>> {
        encode(x, &self.encoder)
    }

    pub fn decode(&self, z: &Var<'t>) -> Result<Var<'t>> {
        match &self.decoder {
            DecoderVars::Plain(d) => decode_plain(z, d),
            DecoderVars::Skip(d) => decode_skip(z, d),
        }
    }

    /// Variables in [`ParamSet`] order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
