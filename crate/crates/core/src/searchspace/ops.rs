use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvParams, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Param, ParamGroup, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const NUM_OPS: usize = 8;

/// Candidate operations. The discriminant is the column index in the
/// architecture tables and the tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Zero,
    SkipConnect,
    AvgPool3x3,
    MaxPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
}

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Zero,
        OpKind::SkipConnect,
        OpKind::AvgPool3x3,
        OpKind::MaxPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "Zero",
            OpKind::SkipConnect => "SkipConnect",
            OpKind::AvgPool3x3 => "AvgPool3x3",
            OpKind::MaxPool3x3 => "MaxPool3x3",
            OpKind::SepConv3x3 => "SepConv3x3",
            OpKind::SepConv5x5 => "SepConv5x5",
            OpKind::DilConv3x3 => "DilConv3x3",
            OpKind::DilConv5x5 => "DilConv5x5",
        }
    }

    fn kernel(self) -> usize {
        match self {
            OpKind::SepConv5x5 | OpKind::DilConv5x5 => 5,
            _ => 3,
        }
    }
}

impl core::fmt::Display for OpKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown operation `{s}`")))
    }
}

/// `(name, shape)` of every weight an operation owns. Convolutions carry no
/// bias and normalisation has no affine parameters.
pub fn op_param_shapes(kind: OpKind, channels: usize, stride: usize) -> Vec<(&'static str, Vec<usize>)> {
    let c = channels;
    let k = kind.kernel();
    match kind {
        OpKind::Zero | OpKind::AvgPool3x3 | OpKind::MaxPool3x3 => Vec::new(),
        OpKind::SkipConnect if stride == 1 => Vec::new(),
        OpKind::SkipConnect => factorized_reduce_shapes(c, c),
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => vec![
            ("dw1", vec![c, 1, k, k]),
            ("pw1", vec![c, c, 1, 1]),
            ("dw2", vec![c, 1, k, k]),
            ("pw2", vec![c, c, 1, 1]),
        ],
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => vec![("dw", vec![c, 1, k, k]), ("pw", vec![c, c, 1, 1])],
    }
}

pub(crate) fn factorized_reduce_shapes(c_in: usize, c_out: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("fr_a", vec![c_out / 2, c_in, 1, 1]),
        ("fr_b", vec![c_out - c_out / 2, c_in, 1, 1]),
    ]
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn init_weight<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// Output spatial extent of a 3x3/pad-1 window at `stride`.
pub(crate) fn strided(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

pub(crate) fn relu_conv_bn<T: Real>(tape: &Tape<T>, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
    let h = tape.relu(x);
    let h = tape.conv2d(&h, w, ConvParams::new(1, 0, 1, 1))?;
    tape.batch_norm(&h)
}

pub(crate) fn factorized_reduce<T: Real>(tape: &Tape<T>, x: &Var<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let h = tape.relu(x);
    let p = ConvParams::new(2, 0, 1, 1);
    let left = tape.conv2d(&h, a, p)?;
    let shifted = tape.slice_spatial(&h, 1, 1)?;
    let right = tape.conv2d(&shifted, b, p)?;
    let cat = tape.concat_channels(&[left, right])?;
    tape.batch_norm(&cat)
}

/// Applies `kind` to `x`. `weights` are the bound tensors listed by
/// [`op_param_shapes`] in the same order.
pub fn apply_op<T: Real>(tape: &Tape<T>, kind: OpKind, stride: usize, weights: &[&Var<T>], x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4("apply_op")?;
    let k = kind.kernel();
    match kind {
        OpKind::Zero => Ok(tape.constant(Tensor::zeros(&[n, c, strided(h, stride), strided(w, stride)]))),
        OpKind::SkipConnect if stride == 1 => Ok(x.clone()),
        OpKind::SkipConnect => factorized_reduce(tape, x, weights[0], weights[1]),
        OpKind::AvgPool3x3 => tape.pool2d(x, PoolKind::Avg, 3, stride),
        OpKind::MaxPool3x3 => tape.pool2d(x, PoolKind::Max, 3, stride),
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let pad = k / 2;
            let y = tape.relu(x);
            let y = tape.conv2d(&y, weights[0], ConvParams::new(stride, pad, 1, c))?;
            let y = tape.conv2d(&y, weights[1], ConvParams::new(1, 0, 1, 1))?;
            let y = tape.batch_norm(&y)?;
            let y = tape.relu(&y);
            let y = tape.conv2d(&y, weights[2], ConvParams::new(1, pad, 1, c))?;
            let y = tape.conv2d(&y, weights[3], ConvParams::new(1, 0, 1, 1))?;
            tape.batch_norm(&y)
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let y = tape.relu(x);
            let y = tape.conv2d(&y, weights[0], ConvParams::new(stride, k - 1, 2, c))?;
            let y = tape.conv2d(&y, weights[1], ConvParams::new(1, 0, 1, 1))?;
            tape.batch_norm(&y)
        }
    }
}

/// A standalone candidate operation with its own weights.
#[derive(Clone, Debug)]
pub struct Operation<T> {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    pub params: ParamStore<T>,
}

pub fn make_op<T: Real, R: Rng + ?Sized>(kind: OpKind, channels: usize, stride: usize, rng: &mut R) -> Result<Operation<T>> {
    if channels == 0 {
        return Err(Error::Config("operation needs at least one channel".into()));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("stride must be 1 or 2, got {stride}")));
    }
    let mut params = ParamStore::new();
    for (name, shape) in op_param_shapes(kind, channels, stride) {
        params.push(Param::new(
            String::from(name),
            ParamGroup::Shared,
            init_weight(&shape, rng),
        ));
    }
    Ok(Operation {
        kind,
        channels,
        stride,
        params,
    })
}

impl<T: Real> Operation<T> {
    pub fn forward(&self, tape: &Tape<T>, bound: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let ws: Vec<&Var<T>> = (0..self.params.len()).map(|i| bound.get(ParamId(i))).collect();
        apply_op(tape, self.kind, self.stride, &ws, x)
    }
}
