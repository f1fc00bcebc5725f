use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use core::marker::PhantomData;
use core::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvParams, PoolKind};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

enum Op<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar,
    MulScalarVar,
    Relu,
    Log,
    Sum,
    Mean,
    SumN,
    Conv2d(ConvParams),
    Pool {
        kind: PoolKind,
        stride: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        inv_std: Vec<T>,
    },
    Softmax(usize),
    CrossEntropy {
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
    GlobalAvgPool,
    Linear,
    MatMul,
    Concat,
    SliceSpatial(usize, usize),
    Select(usize),
    Reshape,
    StraightThrough,
}

struct Origin<T> {
    op: Op<T>,
    inputs: Vec<Var<T>>,
}

struct Node<T> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    origin: Option<Origin<T>>,
    grad: RefCell<Option<Tensor<T>>>,
}

/// A tensor in a recorded computation. Cloning is cheap (shared node).
pub struct Var<T>(Rc<Node<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> core::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when the tensor was produced by a recorded operation.
    pub fn has_origin(&self) -> bool {
        self.0.origin.is_some()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &Var<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Records differentiable operations. Operations run in no-record mode, or
/// on inputs that do not require gradients, produce detached constants and
/// leave the tape untouched.
pub struct Tape<T> {
    recording: Cell<bool>,
    recorded: Cell<usize>,
    _elem: PhantomData<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            recording: Cell::new(true),
            recorded: Cell::new(0),
            _elem: PhantomData,
        }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.recorded.get()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Runs `f` with recording switched off. Values are identical to a
    /// recorded run; results carry no gradient linkage.
    pub fn no_record<R>(&self, f: impl FnOnce(&Self) -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f(self);
        self.recording.set(prev);
        out
    }

    fn node(value: Tensor<T>, requires_grad: bool, origin: Option<Origin<T>>) -> Var<T> {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            origin,
            grad: RefCell::new(None),
        }))
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        Self::node(value, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Self::node(value, false, None)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[&Var<T>]) -> Var<T> {
        let track = self.recording.get() && inputs.iter().any(|v| v.requires_grad());
        if track {
            self.recorded.set(self.recorded.get() + 1);
            let origin = Origin {
                op,
                inputs: inputs.iter().map(|v| (*v).clone()).collect(),
            };
            Self::node(value, true, Some(origin))
        } else {
            Self::node(value, false, None)
        }
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a.value(), b.value())?;
        Ok(self.push(zip(a.value(), b.value(), |x, y| x + y), Op::Add, &[a, b]))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a.value(), b.value())?;
        Ok(self.push(zip(a.value(), b.value(), |x, y| x - y), Op::Sub, &[a, b]))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a.value(), b.value())?;
        Ok(self.push(zip(a.value(), b.value(), |x, y| x * y), Op::Mul, &[a, b]))
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        self.push(a.value().map(|v| v * c), Op::Scale(c), &[a])
    }

    pub fn add_scalar(&self, a: &Var<T>, c: T) -> Var<T> {
        self.push(a.value().map(|v| v + c), Op::AddScalar, &[a])
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar_var(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        if s.value().numel() != 1 {
            return Err(dim_err("mul_scalar_var", format!("scale has shape {:?}", s.shape())));
        }
        let k = s.value().item();
        Ok(self.push(x.value().map(|v| v * k), Op::MulScalarVar, &[x, s]))
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        self.push(x.value().map(|v| v.max(T::zero())), Op::Relu, &[x])
    }

    pub fn log(&self, x: &Var<T>) -> Var<T> {
        self.push(x.value().map(|v| v.ln()), Op::Log, &[x])
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        self.push(Tensor::scalar(x.value().sum()), Op::Sum, &[x])
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = T::of(x.value().numel() as f64);
        self.push(Tensor::scalar(x.value().sum() / n), Op::Mean, &[x])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum_n(&self, xs: &[Var<T>]) -> Result<Var<T>> {
        let first = xs.first().ok_or_else(|| dim_err("sum_n", "no inputs"))?;
        let mut acc = first.value().clone();
        for x in &xs[1..] {
            same_shape("sum_n", &acc, x.value())?;
            acc.add_assign(x.value());
        }
        let refs: Vec<&Var<T>> = xs.iter().collect();
        Ok(self.push(acc, Op::SumN, &refs))
    }

    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, p: ConvParams) -> Result<Var<T>> {
        let y = kernels::conv2d(x.value(), w.value(), p)?;
        Ok(self.push(y, Op::Conv2d(p), &[x, w]))
    }

    pub fn pool2d(&self, x: &Var<T>, kind: PoolKind, window: usize, stride: usize) -> Result<Var<T>> {
        let (y, argmax) = kernels::pool2d(x.value(), kind, window, stride)?;
        Ok(self.push(y, Op::Pool { kind, stride, argmax }, &[x]))
    }

    pub fn batch_norm(&self, x: &Var<T>) -> Result<Var<T>> {
        let (y, inv_std) = kernels::batch_norm(x.value())?;
        Ok(self.push(y, Op::BatchNorm { inv_std }, &[x]))
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let y = kernels::softmax(x.value(), axis)?;
        Ok(self.push(y, Op::Softmax(axis), &[x]))
    }

    pub fn cross_entropy(&self, logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
        let (loss, probs) = kernels::cross_entropy(logits.value(), labels)?;
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = kernels::global_avg_pool(x.value())?;
        Ok(self.push(y, Op::GlobalAvgPool, &[x]))
    }

    /// `x [N,F] · wᵀ + b` with `w [O,F]`, `b [O]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (n, f) = x.value().dims2("linear")?;
        let (o, f2) = w.value().dims2("linear")?;
        if f != f2 || b.shape() != [o] {
            return Err(dim_err(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let xs = x.value().data();
        let ws = w.value().data();
        let bs = b.value().data();
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            let row = &xs[r * f..(r + 1) * f];
            for j in 0..o {
                let wr = &ws[j * f..(j + 1) * f];
                out[r * o + j] = bs[j] + row.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::Linear, &[x, w, b]))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = kernels::matmul(a.value(), b.value())?;
        Ok(self.push(y, Op::MatMul, &[a, b]))
    }

    pub fn concat_channels(&self, xs: &[Var<T>]) -> Result<Var<T>> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|v| v.value()).collect();
        let y = kernels::concat_channels(&parts)?;
        let refs: Vec<&Var<T>> = xs.iter().collect();
        Ok(self.push(y, Op::Concat, &refs))
    }

    pub fn slice_spatial(&self, x: &Var<T>, off_h: usize, off_w: usize) -> Result<Var<T>> {
        let y = kernels::slice_spatial(x.value(), off_h, off_w)?;
        Ok(self.push(y, Op::SliceSpatial(off_h, off_w), &[x]))
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let y = x.value().clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape, &[x]))
    }

    /// Picks one element (flat index) as a scalar.
    pub fn select(&self, x: &Var<T>, index: usize) -> Result<Var<T>> {
        let v = *x
            .value()
            .data()
            .get(index)
            .ok_or_else(|| dim_err("select", format!("index {index} out of {}", x.value().numel())))?;
        Ok(self.push(Tensor::scalar(v), Op::Select(index), &[x]))
    }

    /// Forward value is exactly `hard`; the backward pass routes the incoming
    /// gradient to `soft` unchanged.
    pub fn straight_through(&self, soft: &Var<T>, hard: Tensor<T>) -> Result<Var<T>> {
        same_shape("straight_through", soft.value(), &hard)?;
        Ok(self.push(hard, Op::StraightThrough, &[soft]))
    }

    /// Reverse accumulation from a scalar. Gradients are added to whatever
    /// each tensor already holds.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if loss.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Contract("loss was not recorded on the tape".into()));
        }
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = alloc::collections::BTreeSet::new();
        let mut stack = vec![loss.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            if let Some(origin) = &v.0.origin {
                for i in &origin.inputs {
                    if i.requires_grad() && !seen.contains(&i.id()) {
                        stack.push(i.clone());
                    }
                }
            }
            order.push(v);
        }
        // Ids grow monotonically, so descending id is a reverse topological order.
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: BTreeMap<u64, Tensor<T>> = BTreeMap::new();
        pending.insert(loss.id(), Tensor::full(loss.shape(), T::one()));
        for v in order {
            let Some(g) = pending.remove(&v.id()) else {
                continue;
            };
            if let Some(origin) = &v.0.origin {
                let grads = backward_op(&origin.op, &origin.inputs, v.value(), &g)?;
                for (input, gi) in origin.inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.add_assign(&gi),
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
            let mut slot = v.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn backward_op<T: Real>(
    op: &Op<T>,
    inputs: &[Var<T>],
    out: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let need = |i: usize| inputs[i].requires_grad();
    let when = |i: usize, f: &dyn Fn() -> Result<Tensor<T>>| -> Result<Option<Tensor<T>>> {
        if need(i) {
            f().map(Some)
        } else {
            Ok(None)
        }
    };
    let x0 = inputs[0].value();
    Ok(match op {
        Op::Add => vec![when(0, &|| Ok(gy.clone()))?, when(1, &|| Ok(gy.clone()))?],
        Op::Sub => vec![
            when(0, &|| Ok(gy.clone()))?,
            when(1, &|| Ok(gy.map(|g| -g)))?,
        ],
        Op::Mul => {
            let x1 = inputs[1].value();
            vec![
                when(0, &|| Ok(zip(gy, x1, |g, b| g * b)))?,
                when(1, &|| Ok(zip(gy, x0, |g, a| g * a)))?,
            ]
        }
        Op::Scale(c) => vec![when(0, &|| Ok(gy.map(|g| g * *c)))?],
        Op::AddScalar => vec![when(0, &|| Ok(gy.clone()))?],
        Op::MulScalarVar => {
            let k = inputs[1].value().item();
            vec![
                when(0, &|| Ok(gy.map(|g| g * k)))?,
                when(1, &|| {
                    let s: T = gy.data().iter().zip(x0.data()).map(|(&g, &x)| g * x).sum();
                    Ok(Tensor::full(inputs[1].shape(), s))
                })?,
            ]
        }
        Op::Relu => vec![when(0, &|| {
            Ok(zip(gy, x0, |g, x| if x > T::zero() { g } else { T::zero() }))
        })?],
        Op::Log => vec![when(0, &|| Ok(zip(gy, x0, |g, x| g / x)))?],
        Op::Sum => vec![when(0, &|| Ok(Tensor::full(x0.shape(), gy.item())))?],
        Op::Mean => vec![when(0, &|| {
            Ok(Tensor::full(x0.shape(), gy.item() / T::of(x0.numel() as f64)))
        })?],
        Op::SumN => (0..inputs.len())
            .map(|i| when(i, &|| Ok(gy.clone())))
            .collect::<Result<_>>()?,
        Op::Conv2d(p) => {
            let (gx, gw) = kernels::conv2d_backward(x0, inputs[1].value(), gy, *p, need(0), need(1))?;
            vec![gx, gw]
        }
        Op::Pool { kind, stride, argmax } => vec![when(0, &|| {
            kernels::pool2d_backward(x0.shape(), *kind, *stride, argmax, gy)
        })?],
        Op::BatchNorm { inv_std } => vec![when(0, &|| kernels::batch_norm_backward(out, inv_std, gy))?],
        Op::Softmax(axis) => vec![when(0, &|| kernels::softmax_backward(out, gy, *axis))?],
        Op::CrossEntropy { probs, labels } => vec![when(0, &|| {
            let c = probs.shape()[1];
            let scale = gy.item() / T::of(labels.len() as f64);
            let mut g = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                g.data_mut()[r * c + l] -= T::one();
            }
            Ok(g.map(|v| v * scale))
        })?],
        Op::GlobalAvgPool => vec![when(0, &|| {
            let (n, c, h, w) = x0.dims4("global_avg_pool")?;
            let hw = h * w;
            let k = T::one() / T::of(hw as f64);
            let mut data = Vec::with_capacity(n * c * hw);
            for &g in gy.data() {
                data.extend(core::iter::repeat_n(g * k, hw));
            }
            Tensor::new(x0.shape().to_vec(), data)
        })?],
        Op::Linear => {
            let w = inputs[1].value();
            let n = x0.shape()[0];
            let o = w.shape()[0];
            vec![
                when(0, &|| kernels::matmul(gy, w))?,
                when(1, &|| kernels::matmul(&kernels::transpose(gy)?, x0))?,
                when(2, &|| {
                    let mut b = vec![T::zero(); o];
                    for r in 0..n {
                        for j in 0..o {
                            b[j] += gy.data()[r * o + j];
                        }
                    }
                    Tensor::new(vec![o], b)
                })?,
            ]
        }
        Op::MatMul => {
            let b = inputs[1].value();
            vec![
                when(0, &|| kernels::matmul(gy, &kernels::transpose(b)?))?,
                when(1, &|| kernels::matmul(&kernels::transpose(x0)?, gy))?,
            ]
        }
        Op::Concat => {
            let (n, _, h, w) = gy.dims4("concat")?;
            let hw = h * w;
            let total_c = gy.shape()[1];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, input) in inputs.iter().enumerate() {
                let c = input.shape()[1];
                if need(i) {
                    let mut data = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total_c + offset) * hw;
                        data.extend_from_slice(&gy.data()[start..start + c * hw]);
                    }
                    grads.push(Some(Tensor::new(input.shape().to_vec(), data)?));
                } else {
                    grads.push(None);
                }
                offset += c;
            }
            grads
        }
        Op::SliceSpatial(oh, ow) => vec![when(0, &|| {
            let (n, c, h, w) = x0.dims4("slice_spatial")?;
            let nw = w - ow;
            let mut g = vec![T::zero(); x0.numel()];
            for plane in 0..n * c {
                for y in *oh..h {
                    let src = &gy.data()[(plane * (h - oh) + (y - oh)) * nw..][..nw];
                    g[plane * h * w + y * w + ow..plane * h * w + (y + 1) * w].copy_from_slice(src);
                }
            }
            Tensor::new(x0.shape().to_vec(), g)
        })?],
        Op::Select(index) => vec![when(0, &|| {
            let mut g = Tensor::zeros(x0.shape());
            g.data_mut()[*index] = gy.item();
            Ok(g)
        })?],
        Op::Reshape => vec![when(0, &|| gy.clone().reshape(x0.shape()))?],
        Op::StraightThrough => vec![when(0, &|| Ok(gy.clone()))?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.leaf(Tensor::scalar(5.0), true);
        let z = tape.mul(&x, &y).unwrap();
        tape.backward(&z).unwrap();
        assert_eq!(x.grad().unwrap().item(), 5.0);
        assert_eq!(y.grad().unwrap().item(), 2.0);
    }

    #[test]
    fn grads_accumulate_until_reset() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 12.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.relu(&x);
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn no_record_leaves_tape_untouched() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let before = tape.len();
        let detached = tape.no_record(|t| t.softmax(&x, 0).unwrap());
        assert_eq!(tape.len(), before);
        assert!(!detached.requires_grad());
        let recorded = tape.softmax(&x, 0).unwrap();
        assert_eq!(tape.len(), before + 1);
        assert_eq!(detached.value(), recorded.value());
        assert!(tape.is_recording());
    }

    #[test]
    fn reused_input_sums_contributions() {
        // f(x) = x*x + 3x at x=2 -> 7
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let sq = tape.mul(&x, &x).unwrap();
        let lin = tape.scale(&x, 3.0);
        let y = tape.add(&sq, &lin).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 7.0);
        // intermediates requiring grad also hold gradients
        assert_eq!(sq.grad().unwrap().item(), 1.0);
    }

    #[test]
    fn straight_through_forward_is_exact() {
        let tape = Tape::new();
        let soft = tape.leaf(t(&[3], &[0.2, 0.5, 0.3]), true);
        let hard = t(&[3], &[0.0, 1.0, 0.0]);
        let st = tape.straight_through(&soft, hard.clone()).unwrap();
        assert_eq!(st.value(), &hard);
        let s = tape.select(&st, 1).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(soft.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
