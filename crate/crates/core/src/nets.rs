//! Generator, discriminator and segmentor networks.
//!
//! Each network is described by a flat table of convolution layers
//! ([`ConvSpec`]). Initialization allocates parameters from that table, and
//! the forward functions consume them in the same order, so a
//! [`ParamSet`] is nothing more than the ordered list of layer tensors.
//!
//! * Generator: 7x7 stem, two stride-2 downsampling convolutions, residual
//!   blocks, two stride-2 transposed convolutions and a 7x7 `tanh` head.
//! * Discriminator: stack of 4x4 stride-2 convolutions with leaky ReLU and a
//!   3x3 head producing one unbounded score per patch.
//! * Segmentor: U-shaped encoder/decoder with skip connections emitting
//!   per-pixel class logits.
//!
//! Normalization is instance normalization without affine parameters or
//! running statistics, so every forward is a pure function of its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 4;
const GENERATOR_DOWNSAMPLING: usize = 2;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub n_discriminator_layers: usize,
    pub n_classes: usize,
    pub segmentor_depth: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::for_image_size(64)
    }
}

impl ArchConfig {
    /// Standard configuration: 4 residual blocks up to 64 px, 6 above.
    pub fn for_image_size(image_size: usize) -> Self {
        Self {
            image_size,
            base_channels: 32,
            n_residual_blocks: if image_size > 64 { 6 } else { 4 },
            n_discriminator_layers: 3,
            n_classes: N_CLASSES,
            segmentor_depth: 3,
        }
    }

    /// Deepest power-of-two downsampling used by any of the networks.
    pub fn max_downsampling(&self) -> usize {
        GENERATOR_DOWNSAMPLING.max(self.n_discriminator_layers).max(self.segmentor_depth)
    }

    /// Every invalid field, in declaration order.
    pub fn problems(&self) -> Vec<Error> {
        let mut out = Vec::new();
        if self.n_classes != N_CLASSES {
            out.push(Error::validation("arch.n_classes", format!("must be {N_CLASSES}")));
        }
        if self.base_channels == 0 {
            out.push(Error::validation("arch.base_channels", "must be positive"));
        }
        if self.n_discriminator_layers == 0 {
            out.push(Error::validation("arch.n_discriminator_layers", "must be positive"));
        }
        if self.segmentor_depth == 0 {
            out.push(Error::validation("arch.segmentor_depth", "must be positive"));
        }
        let factor = 1usize << self.max_downsampling();
        if self.image_size == 0 || self.image_size % factor != 0 {
            out.push(Error::validation(
                "arch.image_size",
                format!("{} is not divisible by {factor}", self.image_size),
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Side length of the discriminator score map.
    pub fn patch_map_size(&self) -> usize {
        self.image_size >> self.n_discriminator_layers
    }
}

/// One convolution layer of a network table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
    pub bias: bool,
}

impl ConvSpec {
    fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { c_in, c_out, kernel, stride, pad, transposed: false, bias: false }
    }

    fn up(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, kernel: 4, stride: 2, pad: 1, transposed: true, bias: false }
    }

    fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.c_in, self.c_out, self.kernel, self.kernel]
        } else {
            [self.c_out, self.c_in, self.kernel, self.kernel]
        }
    }

    /// Number of input values contributing to one output value.
    pub fn fan_in(&self) -> usize {
        let taps = self.kernel * self.kernel;
        if self.transposed {
            (self.c_in * taps / (self.stride * self.stride)).max(1)
        } else {
            self.c_in * taps
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Generator,
    Discriminator,
    Segmentor,
}

impl Network {
    pub fn layout(self, arch: &ArchConfig) -> Vec<ConvSpec> {
        match self {
            Network::Generator => generator_layout(arch),
            Network::Discriminator => discriminator_layout(arch),
            Network::Segmentor => segmentor_layout(arch),
        }
    }
}

fn generator_layout(arch: &ArchConfig) -> Vec<ConvSpec> {
    let c = arch.base_channels;
    let mut l = vec![ConvSpec::conv(1, c, 7, 1, 3), ConvSpec::conv(c, 2 * c, 3, 2, 1), ConvSpec::conv(2 * c, 4 * c, 3, 2, 1)];
    for _ in 0..arch.n_residual_blocks {
        l.push(ConvSpec::conv(4 * c, 4 * c, 3, 1, 1));
        l.push(ConvSpec::conv(4 * c, 4 * c, 3, 1, 1));
    }
    l.push(ConvSpec::up(4 * c, 2 * c));
    l.push(ConvSpec::up(2 * c, c));
    l.push(ConvSpec::conv(c, 1, 7, 1, 3).with_bias());
    l
}

fn discriminator_layout(arch: &ArchConfig) -> Vec<ConvSpec> {
    let c = arch.base_channels;
    let mut l = vec![ConvSpec::conv(1, c, 4, 2, 1).with_bias()];
    for i in 1..arch.n_discriminator_layers {
        l.push(ConvSpec::conv(c << (i - 1), c << i, 4, 2, 1));
    }
    l.push(ConvSpec::conv(c << (arch.n_discriminator_layers - 1), 1, 3, 1, 1).with_bias());
    l
}

fn segmentor_layout(arch: &ArchConfig) -> Vec<ConvSpec> {
    let c = arch.base_channels;
    let d = arch.segmentor_depth;
    let mut l = vec![ConvSpec::conv(1, c, 3, 1, 1), ConvSpec::conv(c, c, 3, 1, 1)];
    for lvl in 1..=d {
        l.push(ConvSpec::conv(c << (lvl - 1), c << lvl, 3, 2, 1));
        l.push(ConvSpec::conv(c << lvl, c << lvl, 3, 1, 1));
    }
    for lvl in (1..=d).rev() {
        l.push(ConvSpec::up(c << lvl, c << (lvl - 1)));
        l.push(ConvSpec::conv(c << lvl, c << (lvl - 1), 3, 1, 1));
    }
    l.push(ConvSpec::conv(c, arch.n_classes, 1, 1, 0).with_bias());
    l
}

/// Ordered parameter tensors of one network: weight, then bias when the
/// layer has one, for every layer of its table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub network: Network,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Fan-in scaled normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(network: Network, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut tensors = Vec::new();
        for spec in network.layout(arch) {
            let shape = spec.weight_shape();
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::c(normal.sample(rng))).collect();
            tensors.push(Tensor::from_vec(&shape, data).expect("layout shape"));
            if spec.bias {
                tensors.push(Tensor::zeros(&[spec.c_out]));
            }
        }
        Self { network, tensors }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers the tensors in `g`, as trainable leaves or as constants.
    pub fn attach(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Checks tensor shapes against the network table for `arch`.
    pub fn check_layout(&self, arch: &ArchConfig) -> Result<()> {
        let mut expected = Vec::new();
        for spec in self.network.layout(arch) {
            expected.push(spec.weight_shape().to_vec());
            if spec.bias {
                expected.push(vec![spec.c_out]);
            }
        }
        let actual: Vec<Vec<usize>> = self.tensors.iter().map(|t| t.shape().to_vec()).collect();
        if actual != expected {
            return Err(Error::Shape(format!(
                "{:?} parameters do not match the architecture",
                self.network
            )));
        }
        Ok(())
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crc32fast::Hasher::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(&v.bits().to_le_bytes());
            }
        }
        h.finalize() as u64
    }
}

/// The five parameter sets of the model plus the training position.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub g1: ParamSet<T>,
    pub g2: ParamSet<T>,
    pub d1: ParamSet<T>,
    pub d2: ParamSet<T>,
    pub s: ParamSet<T>,
    pub arch: ArchConfig,
    pub step: u64,
    pub rng_seed: u64,
}

/// Indices of the independent initialization streams.
const STREAMS: [(Network, u64); 5] = [
    (Network::Generator, 1),
    (Network::Generator, 2),
    (Network::Discriminator, 3),
    (Network::Discriminator, 4),
    (Network::Segmentor, 5),
];

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> ModelBundle<T> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut sets = STREAMS.iter().map(|&(net, stream)| ParamSet::init(net, arch, &mut stream_rng(seed, stream)));
        Ok(Self {
            g1: sets.next().unwrap(),
            g2: sets.next().unwrap(),
            d1: sets.next().unwrap(),
            d2: sets.next().unwrap(),
            s: sets.next().unwrap(),
            arch: arch.clone(),
            step: 0,
            rng_seed: seed,
        })
    }

    pub fn groups(&self) -> [&ParamSet<T>; 5] {
        [&self.g1, &self.g2, &self.d1, &self.d2, &self.s]
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for set in self.groups() {
            set.check_layout(&self.arch)?;
            if !set.is_finite() {
                return Err(Error::NonFinite(format!("{:?} parameters", set.network)));
            }
        }
        Ok(())
    }

    /// Per-group fingerprints in the order G1, G2, D1, D2, S.
    pub fn fingerprints(&self) -> [u64; 5] {
        self.groups().map(ParamSet::fingerprint)
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
    specs: std::vec::IntoIter<ConvSpec>,
}

impl<'a> Cursor<'a> {
    fn new(vars: &'a [Var], network: Network, arch: &ArchConfig) -> Result<Self> {
        let specs = network.layout(arch);
        let expected: usize = specs.iter().map(|s| 1 + s.bias as usize).sum();
        if vars.len() != expected {
            return Err(Error::Shape(format!(
                "{network:?} expects {expected} parameter tensors, got {}",
                vars.len()
            )));
        }
        Ok(Self { vars, pos: 0, specs: specs.into_iter() })
    }

    fn layer<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let spec = self.specs.next().expect("layer table exhausted");
        let w = self.vars[self.pos];
        self.pos += 1;
        let b = if spec.bias {
            self.pos += 1;
            Some(self.vars[self.pos - 1])
        } else {
            None
        };
        if spec.transposed {
            g.conv_transpose2d(x, w, b, spec.stride, spec.pad)
        } else {
            g.conv2d(x, w, b, spec.stride, spec.pad)
        }
    }

    fn norm_relu<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.layer(g, x)?;
        let h = g.instance_norm(h)?;
        Ok(g.relu(h))
    }
}

fn check_input<T: Scalar>(g: &Graph<T>, arch: &ArchConfig, x: Var) -> Result<()> {
    let [_, c, h, w] = g.value(x).dims4()?;
    if c != 1 || h != arch.image_size || w != arch.image_size {
        return Err(Error::Shape(format!(
            "expected (B, 1, {s}, {s}) images, got {:?}",
            g.value(x).shape(),
            s = arch.image_size
        )));
    }
    Ok(())
}

/// Generator forward on graph variables; output values lie in (-1, 1).
pub fn generator<T: Scalar>(g: &mut Graph<T>, params: &[Var], arch: &ArchConfig, x: Var) -> Result<Var> {
    check_input(g, arch, x)?;
    let mut p = Cursor::new(params, Network::Generator, arch)?;
    let mut h = p.norm_relu(g, x)?;
    h = p.norm_relu(g, h)?;
    h = p.norm_relu(g, h)?;
    for _ in 0..arch.n_residual_blocks {
        let r = p.norm_relu(g, h)?;
        let r = p.layer(g, r)?;
        let r = g.instance_norm(r)?;
        h = g.add(h, r)?;
    }
    h = p.norm_relu(g, h)?;
    h = p.norm_relu(g, h)?;
    let out = p.layer(g, h)?;
    Ok(g.tanh(out))
}

/// Discriminator forward; returns a `(B, 1, P, P)` map of raw patch scores.
pub fn discriminator<T: Scalar>(g: &mut Graph<T>, params: &[Var], arch: &ArchConfig, x: Var) -> Result<Var> {
    check_input(g, arch, x)?;
    let mut p = Cursor::new(params, Network::Discriminator, arch)?;
    let h = p.layer(g, x)?;
    let mut h = g.leaky_relu(h, LEAKY_SLOPE);
    for _ in 1..arch.n_discriminator_layers {
        h = p.layer(g, h)?;
        h = g.instance_norm(h)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
    }
    p.layer(g, h)
}

/// Segmentor forward; returns `(B, n_classes, S, S)` logits.
pub fn segmentor<T: Scalar>(g: &mut Graph<T>, params: &[Var], arch: &ArchConfig, x: Var) -> Result<Var> {
    check_input(g, arch, x)?;
    let mut p = Cursor::new(params, Network::Segmentor, arch)?;
    let h = p.norm_relu(g, x)?;
    let mut h = p.norm_relu(g, h)?;
    let mut skips = Vec::with_capacity(arch.segmentor_depth);
    for _ in 0..arch.segmentor_depth {
        skips.push(h);
        h = p.norm_relu(g, h)?;
        h = p.norm_relu(g, h)?;
    }
    while let Some(skip) = skips.pop() {
        h = p.norm_relu(g, h)?;
        h = g.concat_channels(h, skip)?;
        h = p.norm_relu(g, h)?;
    }
    p.layer(g, h)
}

type NetFn<T> = fn(&mut Graph<T>, &[Var], &ArchConfig, Var) -> Result<Var>;

fn eval<T: Scalar>(f: NetFn<T>, params: &ParamSet<T>, arch: &ArchConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.attach(&mut g, false);
    let x = g.constant(images.clone());
    let y = f(&mut g, &vars, arch, x)?;
    Ok(g.value(y).clone())
}

/// Translates a `(B, 1, S, S)` batch.
pub fn generator_forward<T: Scalar>(params: &ParamSet<T>, arch: &ArchConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    eval(generator, params, arch, images)
}

pub fn discriminator_forward<T: Scalar>(params: &ParamSet<T>, arch: &ArchConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    eval(discriminator, params, arch, images)
}

pub fn segmentor_forward<T: Scalar>(params: &ParamSet<T>, arch: &ArchConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    eval(segmentor, params, arch, images)
}
