//! Generator and discriminator networks.
//!
//! A network is a fixed layer plan plus a [`NetworkParams`] list whose order
//! follows the plan. Forward passes bind the parameters onto a [`Tape`] and
//! walk the plan, so building and running can never disagree on layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PadMode, PaddingSpec, Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Encoder, residual body and decoder mapping a 1-channel patch to a
/// same-size patch in `(-1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    /// Demodulated kernels when true; instance norm after every hidden
    /// convolution when false.
    pub demodulation: bool,
    pub eps: f64,
    pub norm_eps: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 1,
            base_channels: 64,
            n_residual_blocks: 6,
            demodulation: true,
            eps: 1e-8,
            norm_eps: 1e-5,
        }
    }
}

impl GeneratorSpec {
    pub fn with_base_channels(base_channels: usize, demodulation: bool) -> Self {
        GeneratorSpec {
            base_channels,
            demodulation,
            ..Self::default()
        }
    }
}

/// PatchGAN discriminator producing a spatial logit map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_layers: usize,
    pub norm_eps: f64,
    pub slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 1,
            base_channels: 64,
            n_layers: 4,
            norm_eps: 1e-5,
            slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn with_base_channels(base_channels: usize) -> Self {
        DiscriminatorSpec {
            base_channels,
            ..Self::default()
        }
    }
}

/// Architecture record stored alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "network", rename_all = "snake_case")]
pub enum Architecture {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    None,
    Relu,
    Leaky,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: PaddingSpec,
        /// Demodulate the kernel (generator hidden layers only).
        modulated: bool,
        norm: bool,
        act: Act,
    },
    ConvT {
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        crop: PaddingSpec,
        modulated: bool,
        norm: bool,
        act: Act,
    },
    ResStart,
    ResEnd,
}

fn generator_plan(s: &GeneratorSpec) -> Vec<Layer> {
    let c = s.base_channels;
    let m = s.demodulation;
    let n = !s.demodulation;
    let conv = |name: String, cin, cout, k, stride, pad, act| Layer::Conv {
        name,
        cin,
        cout,
        k,
        stride,
        pad,
        modulated: m,
        norm: n,
        act,
    };
    let mut plan = vec![
        conv("enc0".into(), s.in_channels, c, 7, 1, PaddingSpec::reflect(3), Act::Relu),
        conv("enc1".into(), c, 2 * c, 3, 2, PaddingSpec::zero(1), Act::Relu),
        conv("enc2".into(), 2 * c, 4 * c, 3, 2, PaddingSpec::zero(1), Act::Relu),
    ];
    for b in 0..s.n_residual_blocks {
        plan.push(Layer::ResStart);
        plan.push(conv(format!("res{b}.conv0"), 4 * c, 4 * c, 3, 1, PaddingSpec::reflect(1), Act::Relu));
        plan.push(conv(format!("res{b}.conv1"), 4 * c, 4 * c, 3, 1, PaddingSpec::reflect(1), Act::None));
        plan.push(Layer::ResEnd);
    }
    // Cropping one leading row/column of the (H-1)*2+3 output doubles the
    // size exactly.
    let crop = PaddingSpec::sides(PadMode::Zero, 1, 0, 1, 0);
    for (i, (cin, cout)) in [(4 * c, 2 * c), (2 * c, c)].into_iter().enumerate() {
        plan.push(Layer::ConvT {
            name: format!("dec{i}"),
            cin,
            cout,
            k: 3,
            stride: 2,
            crop,
            modulated: m,
            norm: n,
            act: Act::Relu,
        });
    }
    plan.push(Layer::Conv {
        name: "out".into(),
        cin: c,
        cout: s.in_channels,
        k: 7,
        stride: 1,
        pad: PaddingSpec::reflect(3),
        modulated: false,
        norm: false,
        act: Act::Tanh,
    });
    plan
}

fn discriminator_plan(s: &DiscriminatorSpec) -> Vec<Layer> {
    let mut plan = Vec::new();
    let mut cin = s.in_channels;
    for i in 0..s.n_layers {
        let cout = s.base_channels << i;
        plan.push(Layer::Conv {
            name: format!("d{i}"),
            cin,
            cout,
            k: 4,
            stride: 2,
            pad: PaddingSpec::zero(1),
            modulated: false,
            norm: i > 0,
            act: Act::Leaky,
        });
        cin = cout;
    }
    // A 4x4 stride-1 conv keeps the map size only with one extra row and
    // column of padding on the far side.
    plan.push(Layer::Conv {
        name: "out".into(),
        cin,
        cout: 1,
        k: 4,
        stride: 1,
        pad: PaddingSpec::sides(PadMode::Zero, 1, 2, 1, 2),
        modulated: false,
        norm: false,
        act: Act::None,
    });
    plan
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    /// Registers every tensor on the tape, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

fn init_params<T: Scalar>(plan: &[Layer], seed: u64) -> NetworkParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for layer in plan {
        let (name, shape, cout) = match layer {
            Layer::Conv {
                name, cin, cout, k, ..
            } => (name, [*cout, *cin, *k, *k], *cout),
            Layer::ConvT {
                name, cin, cout, k, ..
            } => (name, [*cin, *cout, *k, *k], *cout),
            _ => continue,
        };
        names.push(format!("{name}.weight"));
        tensors.push(Tensor::randn(&shape, INIT_STD, &mut rng));
        names.push(format!("{name}.bias"));
        tensors.push(Tensor::zeros(&[cout]));
    }
    NetworkParams { names, tensors }
}

pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<NetworkParams<T>> {
    if spec.in_channels == 0 || spec.base_channels == 0 || !(spec.eps > 0.0) || !(spec.norm_eps > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid generator spec {spec:?}")));
    }
    Ok(init_params(&generator_plan(spec), seed))
}

pub fn build_discriminator<T: Scalar>(
    spec: &DiscriminatorSpec,
    seed: u64,
) -> Result<NetworkParams<T>> {
    if spec.in_channels == 0 || spec.base_channels == 0 || spec.n_layers == 0 {
        return Err(Error::InvalidArgument(format!("invalid discriminator spec {spec:?}")));
    }
    Ok(init_params(&discriminator_plan(spec), seed))
}

fn activate<'t, T: Scalar>(x: Var<'t, T>, act: Act, slope: f64) -> Var<'t, T> {
    match act {
        Act::None => x,
        Act::Relu => x.relu(),
        Act::Leaky => x.leaky_relu(slope),
        Act::Tanh => x.tanh(),
    }
}

fn check_finite<T: Scalar>(v: &Var<'_, T>, what: &str, layer: &str) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("{what} layer {layer}")))
    }
}

fn run_plan<'t, T: Scalar>(
    plan: &[Layer],
    params: &[Var<'t, T>],
    x: Var<'t, T>,
    demod_eps: f64,
    norm_eps: f64,
    slope: f64,
    what: &str,
) -> Result<Var<'t, T>> {
    let n_expected = plan
        .iter()
        .filter(|l| matches!(l, Layer::Conv { .. } | Layer::ConvT { .. }))
        .count()
        * 2;
    if params.len() != n_expected {
        return Err(Error::shape(
            "network",
            format!("{what} expects {n_expected} parameter tensors, got {}", params.len()),
        ));
    }
    let mut h = x;
    let mut skips = Vec::new();
    let mut p = params.iter();
    for layer in plan {
        let (name, out) = match layer {
            Layer::ResStart => {
                skips.push(h);
                continue;
            }
            Layer::ResEnd => {
                let skip = skips.pop().expect("balanced residual plan");
                h = h.add(&skip)?;
                continue;
            }
            Layer::Conv {
                name,
                stride,
                pad,
                modulated,
                norm,
                act,
                ..
            } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                let w = if *modulated { w.demodulate(demod_eps, 0)? } else { *w };
                let mut y = h.conv2d(&w, Some(b), *stride, *pad)?;
                check_finite(&y, what, name)?;
                if *norm {
                    y = y.instance_norm(None, None, norm_eps)?;
                }
                (name, activate(y, *act, slope))
            }
            Layer::ConvT {
                name,
                stride,
                crop,
                modulated,
                norm,
                act,
                ..
            } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                let w = if *modulated { w.demodulate(demod_eps, 1)? } else { *w };
                let mut y = h.conv_transpose2d(&w, Some(b), *stride, *crop)?;
                check_finite(&y, what, name)?;
                if *norm {
                    y = y.instance_norm(None, None, norm_eps)?;
                }
                (name, activate(y, *act, slope))
            }
        };
        check_finite(&out, what, name)?;
        h = out;
    }
    Ok(h)
}

/// Generator forward on a `[B, 1, H, W]` batch (H, W divisible by 4).
pub fn generator_forward<'t, T: Scalar>(
    spec: &GeneratorSpec,
    params: &[Var<'t, T>],
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    run_plan(&generator_plan(spec), params, x, spec.eps, spec.norm_eps, 0.0, "generator")
}

/// Discriminator forward: `[B, 1, 32, 32]` maps to `[B, 1, 2, 2]` logits.
pub fn discriminator_forward<'t, T: Scalar>(
    spec: &DiscriminatorSpec,
    params: &[Var<'t, T>],
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    run_plan(&discriminator_plan(spec), params, x, 0.0, spec.norm_eps, spec.slope, "discriminator")
}

/// A generator with its weights, for gradient-free use.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: NetworkParams<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        let params = build_generator(&spec, seed)?;
        Ok(Generator { spec, params })
    }

    /// Maps a `[B, 1, H, W]` batch without recording gradients.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let y = generator_forward(&self.spec, &vars, tape.constant(x.clone()))?;
        let out = y.value().as_ref().clone();
        Ok(out)
    }
}

/// Names of the layers a generator spec instantiates, in order.
pub fn generator_layer_names(spec: &GeneratorSpec) -> Vec<String> {
    generator_plan(spec)
        .into_iter()
        .filter_map(|l| match l {
            Layer::Conv { name, .. } | Layer::ConvT { name, .. } => Some(name),
            _ => None,
        })
        .collect()
}
