use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::ArchParams;
use super::genotype::Genotype;
use super::ops::{
    apply_op, factorized_reduce, factorized_reduce_shapes, init_weight, op_param_shapes, relu_conv_bn, strided, OpKind,
    NUM_OPS,
};
use super::topology::{CellTopology, CellType, NUM_EDGES, NUM_INPUT_NODES, NUM_INTERMEDIATE_NODES};
use crate::autograd::{kernels, ConvParams, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Param, ParamGroup, ParamId, ParamStore};
use crate::regularizers::identity_drop_forward;
use crate::sampler::EdgeDraws;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub num_cells: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Stem width is `stem_multiplier * init_channels`.
    pub stem_multiplier: usize,
}

impl NetworkSpec {
    /// 8 cells, 16 initial channels.
    pub fn search_profile(num_classes: usize, in_channels: usize) -> Self {
        Self {
            num_cells: 8,
            init_channels: 16,
            num_classes,
            in_channels,
            stem_multiplier: 3,
        }
    }

    /// 4 cells, 8 initial channels.
    pub fn desk_profile(num_classes: usize, in_channels: usize) -> Self {
        Self {
            num_cells: 4,
            init_channels: 8,
            ..Self::search_profile(num_classes, in_channels)
        }
    }

    /// Reduction cells sit at one and two thirds of the depth.
    pub fn reduction_positions(&self) -> [usize; 2] {
        [self.num_cells / 3, 2 * self.num_cells / 3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cells < 3 {
            return Err(Error::Config(format!("need at least 3 cells, got {}", self.num_cells)));
        }
        if self.init_channels < 2 {
            return Err(Error::Config("init_channels must be at least 2".into()));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.stem_multiplier == 0 {
            return Err(Error::Config(format!("invalid network spec {self:?}")));
        }
        Ok(())
    }

    /// Inputs must be `[N, in_channels, H, W]` with `H` and `W` divisible by 4
    /// so both reductions halve evenly.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [n, c, h, w] if *n > 0 && *c == self.in_channels && h % 4 == 0 && w % 4 == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Dimension {
                op: "network input",
                detail: format!(
                    "expected [N, {}, H, W] with H, W multiples of 4, got {shape:?}",
                    self.in_channels
                ),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Preprocess {
    ReluConvBn(ParamId),
    FactorizedReduce(ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellLayout {
    pub reduction: bool,
    pub channels: usize,
    pre0: Preprocess,
    pre1: ParamId,
    /// `ops[edge][op]`: weights of each candidate on each edge.
    ops: Vec<Vec<Vec<ParamId>>>,
}

impl CellLayout {
    pub fn cell_type(&self) -> CellType {
        if self.reduction {
            CellType::Reduce
        } else {
            CellType::Normal
        }
    }
}

/// What one edge computes in a forward pass.
#[derive(Clone)]
pub enum EdgePlan<T> {
    /// Contributes nothing.
    Off,
    /// One operation, optionally scaled by a straight-through coefficient.
    Single { op: OpKind, coeff: Option<Var<T>> },
    /// Weighted sum over all candidates with constant weights.
    Mixture { weights: [T; NUM_OPS] },
}

#[derive(Clone)]
pub struct NetPlan<T> {
    pub normal: Vec<EdgePlan<T>>,
    pub reduce: Vec<EdgePlan<T>>,
}

impl<T: Real> NetPlan<T> {
    pub fn cell(&self, cell: CellType) -> &[EdgePlan<T>] {
        match cell {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    /// Only the genotype's chosen edges, each with its chosen operation.
    pub fn from_genotype(g: &Genotype) -> Result<Self> {
        g.validate()?;
        let cell = |pairs: &[(usize, OpKind)]| {
            let mut plan = vec![EdgePlan::Off; NUM_EDGES];
            for (j, node) in pairs.chunks(2).enumerate() {
                for &(pred, op) in node {
                    let e = CellTopology::edge_index(pred, NUM_INPUT_NODES + j).expect("validated genotype");
                    plan[e] = EdgePlan::Single { op, coeff: None };
                }
            }
            plan
        };
        Ok(Self {
            normal: cell(&g.normal),
            reduce: cell(&g.reduce),
        })
    }

    /// Every edge mixes all candidates with the given `[14, 8]` weights.
    pub fn mixture(normal: &Tensor<T>, reduce: &Tensor<T>) -> Result<Self> {
        let cell = |w: &Tensor<T>| -> Result<Vec<EdgePlan<T>>> {
            if w.shape() != [NUM_EDGES, NUM_OPS] {
                return Err(Error::Input(format!("mixture weights must be [14, 8], got {:?}", w.shape())));
            }
            Ok(w.data()
                .chunks(NUM_OPS)
                .map(|row| {
                    let mut weights = [T::zero(); NUM_OPS];
                    weights.copy_from_slice(row);
                    EdgePlan::Mixture { weights }
                })
                .collect())
        };
        Ok(Self {
            normal: cell(normal)?,
            reduce: cell(reduce)?,
        })
    }

    /// Single-path plan of sub-graph `k`. With `coeffs` (the `[14, 8]`
    /// straight-through matrices for normal and reduction cells) each edge
    /// output is scaled by its selected coefficient so gradients reach the
    /// architecture logits.
    pub fn subgraph(tape: &Tape<T>, masks: &SubGraphMasks<T>, k: usize, coeffs: Option<[&Var<T>; 2]>) -> Result<Self> {
        masks.validate()?;
        if k >= masks.k() {
            return Err(Error::Contract(format!("sub-graph {k} requested, only {} sampled", masks.k())));
        }
        let cell = |cell: CellType| -> Result<Vec<EdgePlan<T>>> {
            let draws = masks.draws(cell);
            (0..NUM_EDGES)
                .map(|e| {
                    let idx = draws.index(e, k);
                    let coeff = match coeffs {
                        Some(c) => Some(tape.select(c[cell.index()], e * NUM_OPS + idx)?),
                        None => None,
                    };
                    Ok(EdgePlan::Single {
                        op: OpKind::ALL[idx],
                        coeff,
                    })
                })
                .collect()
        };
        Ok(Self {
            normal: cell(CellType::Normal)?,
            reduce: cell(CellType::Reduce)?,
        })
    }
}

/// Source of masks for skip-connect outputs.
pub trait SkipMasker<T> {
    fn mask(&mut self, shape: &[usize]) -> Result<Option<Tensor<T>>>;
}

pub struct NoMask;

impl<T> SkipMasker<T> for NoMask {
    fn mask(&mut self, _shape: &[usize]) -> Result<Option<Tensor<T>>> {
        Ok(None)
    }
}

/// K mutually exclusive single-path selections per cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubGraphMasks<T> {
    pub normal: EdgeDraws<T>,
    pub reduce: EdgeDraws<T>,
}

impl<T: Real> SubGraphMasks<T> {
    /// Normal-cell edges are drawn first, then reduction-cell edges.
    pub fn sample<R: Rng + ?Sized>(alpha: &ArchParams<T>, k: usize, tau: T, rng: &mut R) -> Result<Self> {
        Ok(Self {
            normal: EdgeDraws::sample(alpha.normal(), k, tau, rng)?,
            reduce: EdgeDraws::sample(alpha.reduce(), k, tau, rng)?,
        })
    }

    pub fn k(&self) -> usize {
        self.normal.k
    }

    pub fn draws(&self, cell: CellType) -> &EdgeDraws<T> {
        match cell {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    /// Every hard row one-hot at its recorded index, feasible at its draw,
    /// and the K indices of each edge pairwise distinct.
    pub fn validate(&self) -> Result<()> {
        for cell in CellType::BOTH {
            let d = self.draws(cell);
            if d.num_edges != NUM_EDGES || d.num_ops != NUM_OPS || d.draws.len() != NUM_EDGES {
                return Err(Error::Contract(format!("{cell:?} masks have the wrong shape")));
            }
            for (e, edge) in d.draws.iter().enumerate() {
                if edge.len() != d.k {
                    return Err(Error::Contract(format!("{cell:?} edge {e} has {} draws", edge.len())));
                }
                for draw in edge {
                    let ones = draw.hard.iter().filter(|&&v| v == T::one()).count();
                    let zeros = draw.hard.iter().filter(|&&v| v == T::zero()).count();
                    if draw.hard.len() != NUM_OPS
                        || ones != 1
                        || ones + zeros != NUM_OPS
                        || draw.hard.get(draw.index) != Some(&T::one())
                        || !draw.feasible[draw.index]
                    {
                        return Err(Error::Contract(format!("{cell:?} edge {e}: mask row is not a feasible one-hot")));
                    }
                }
            }
            if !d.exclusive() {
                return Err(Error::Contract(format!("{cell:?} masks are not mutually exclusive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: ParamStore<T>,
    stem: ParamId,
    cells: Vec<CellLayout>,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

impl<T: Real> Network<T> {
    /// Builds the super-net: every candidate on every edge of every cell gets
    /// its own weights.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let shared = |params: &mut ParamStore<T>, name: String, shape: &[usize], rng: &mut R| {
            params.push(Param::new(name, ParamGroup::Shared, init_weight(shape, rng)))
        };
        let c = spec.init_channels;
        let c_stem = spec.stem_multiplier * c;
        let stem = shared(&mut params, "stem".into(), &[c_stem, spec.in_channels, 3, 3], rng);

        let reductions = spec.reduction_positions();
        let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(spec.num_cells);
        for i in 0..spec.num_cells {
            let reduction = reductions.contains(&i);
            if reduction {
                c_cur *= 2;
            }
            let pre0 = if reduction_prev {
                let shapes = factorized_reduce_shapes(c_pp, c_cur);
                Preprocess::FactorizedReduce(
                    shared(&mut params, format!("cell{i}.pre0.a"), &shapes[0].1, rng),
                    shared(&mut params, format!("cell{i}.pre0.b"), &shapes[1].1, rng),
                )
            } else {
                Preprocess::ReluConvBn(shared(&mut params, format!("cell{i}.pre0"), &[c_cur, c_pp, 1, 1], rng))
            };
            let pre1 = shared(&mut params, format!("cell{i}.pre1"), &[c_cur, c_p, 1, 1], rng);
            let mut ops = Vec::with_capacity(NUM_EDGES);
            for (e, edge) in CellTopology::edges().enumerate() {
                let stride = if reduction && edge.from < NUM_INPUT_NODES { 2 } else { 1 };
                let per_op = OpKind::ALL
                    .iter()
                    .map(|&kind| {
                        op_param_shapes(kind, c_cur, stride)
                            .into_iter()
                            .map(|(name, shape)| {
                                params.push(Param::new(
                                    format!("cell{i}.edge{e}.{kind}.{name}"),
                                    ParamGroup::EdgeOp {
                                        cell: i,
                                        edge: e,
                                        op: kind.index(),
                                    },
                                    init_weight(&shape, rng),
                                ))
                            })
                            .collect()
                    })
                    .collect();
                ops.push(per_op);
            }
            cells.push(CellLayout {
                reduction,
                channels: c_cur,
                pre0,
                pre1,
                ops,
            });
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = NUM_INTERMEDIATE_NODES * c_cur;
        }
        let classifier_w = shared(&mut params, "classifier.w".into(), &[spec.num_classes, c_p], rng);
        let bound = 1.0 / (c_p as f64).sqrt();
        let bias = Tensor::from_fn(&[spec.num_classes], |_| T::of(rng.gen_range(-bound..bound)));
        let classifier_b = params.push(Param::new("classifier.b", ParamGroup::Shared, bias));
        Ok(Self {
            spec,
            params,
            stem,
            cells,
            classifier_w,
            classifier_b,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cells(&self) -> &[CellLayout] {
        &self.cells
    }

    /// Weights of candidate `op` on `edge` of cell `cell`.
    pub fn edge_op_params(&self, cell: usize, edge: usize, op: OpKind) -> &[ParamId] {
        &self.cells[cell].ops[edge][op.index()]
    }

    /// Stem convolution followed by normalisation.
    pub fn stem(&self, tape: &Tape<T>, bound: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        self.spec.check_input(x.shape())?;
        let y = tape.conv2d(x, bound.get(self.stem), ConvParams::new(1, 1, 1, 1))?;
        tape.batch_norm(&y)
    }

    pub fn forward(
        &self,
        tape: &Tape<T>,
        bound: &Bound<T>,
        x: &Var<T>,
        plan: &NetPlan<T>,
        masker: &mut dyn SkipMasker<T>,
    ) -> Result<Var<T>> {
        let s = self.stem(tape, bound, x)?;
        self.forward_from_stem(tape, bound, &s, plan, masker)
    }

    /// Cells and classifier head on an already computed stem output, so K
    /// sub-graphs can share one stem evaluation.
    pub fn forward_from_stem(
        &self,
        tape: &Tape<T>,
        bound: &Bound<T>,
        stem: &Var<T>,
        plan: &NetPlan<T>,
        masker: &mut dyn SkipMasker<T>,
    ) -> Result<Var<T>> {
        let mut s0 = stem.clone();
        let mut s1 = stem.clone();
        for (i, cell) in self.cells.iter().enumerate() {
            let out = self.cell_forward(tape, bound, i, cell, &s0, &s1, plan.cell(cell.cell_type()), masker)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = tape.global_avg_pool(&s1)?;
        tape.linear(&pooled, bound.get(self.classifier_w), bound.get(self.classifier_b))
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_forward(
        &self,
        tape: &Tape<T>,
        bound: &Bound<T>,
        index: usize,
        cell: &CellLayout,
        s0: &Var<T>,
        s1: &Var<T>,
        plan: &[EdgePlan<T>],
        masker: &mut dyn SkipMasker<T>,
    ) -> Result<Var<T>> {
        if plan.len() != NUM_EDGES {
            return Err(Error::Contract(format!("cell plan has {} edges", plan.len())));
        }
        let p0 = match cell.pre0 {
            Preprocess::ReluConvBn(w) => relu_conv_bn(tape, s0, bound.get(w))?,
            Preprocess::FactorizedReduce(a, b) => factorized_reduce(tape, s0, bound.get(a), bound.get(b))?,
        };
        let p1 = relu_conv_bn(tape, s1, bound.get(cell.pre1))?;
        let (n, c, h, w) = p1.value().dims4("cell")?;
        if p0.shape() != p1.shape() {
            return Err(Error::Dimension {
                op: "cell",
                detail: format!("cell {index} inputs disagree: {:?} vs {:?}", p0.shape(), p1.shape()),
            });
        }
        let cell_stride = if cell.reduction { 2 } else { 1 };
        let node_shape = [n, c, strided(h, cell_stride), strided(w, cell_stride)];

        let mut states: Vec<Var<T>> = vec![p0, p1];
        for j in 0..NUM_INTERMEDIATE_NODES {
            let mut parts: Vec<Var<T>> = Vec::new();
            for (pred, e) in CellTopology::incoming(j).enumerate() {
                let stride = if cell.reduction && pred < NUM_INPUT_NODES { 2 } else { 1 };
                let x = &states[pred];
                let weights_of = |op: OpKind| -> Vec<&Var<T>> {
                    cell.ops[e][op.index()].iter().map(|&id| bound.get(id)).collect()
                };
                match &plan[e] {
                    EdgePlan::Off => {}
                    // Zero contributes exactly nothing, to the value and to every gradient.
                    EdgePlan::Single { op: OpKind::Zero, .. } => {}
                    EdgePlan::Single { op, coeff } => {
                        let y = apply_op(tape, *op, stride, &weights_of(*op), x)?;
                        let y = if *op == OpKind::SkipConnect {
                            let mask = masker.mask(y.shape())?;
                            identity_drop_forward(tape, &y, coeff.as_ref(), mask.as_ref())?
                        } else if let Some(c) = coeff {
                            tape.mul_scalar_var(&y, c)?
                        } else {
                            y
                        };
                        parts.push(y);
                    }
                    EdgePlan::Mixture { weights } => {
                        for op in OpKind::ALL.iter().skip(1) {
                            let y = apply_op(tape, *op, stride, &weights_of(*op), x)?;
                            parts.push(tape.scale(&y, weights[op.index()]));
                        }
                    }
                }
            }
            let node = if parts.is_empty() {
                tape.constant(Tensor::zeros(&node_shape))
            } else {
                tape.sum_n(&parts)?
            };
            states.push(node);
        }
        tape.concat_channels(&states[NUM_INPUT_NODES..])
    }
}

/// Logits of sub-graph `k`: every edge runs only its selected operation.
#[allow(clippy::too_many_arguments)]
pub fn subgraph_forward<T: Real>(
    tape: &Tape<T>,
    net: &Network<T>,
    bound: &Bound<T>,
    x: &Var<T>,
    masks: &SubGraphMasks<T>,
    k: usize,
    coeffs: Option<[&Var<T>; 2]>,
    masker: &mut dyn SkipMasker<T>,
) -> Result<Var<T>> {
    let plan = NetPlan::subgraph(tape, masks, k, coeffs)?;
    net.forward(tape, bound, x, &plan, masker)
}

/// `softmax(alpha / tau)` per edge, no noise.
pub fn mixture_weights<T: Real>(alpha: &ArchParams<T>, tau: T) -> Result<[Tensor<T>; 2]> {
    let w = |t: &Tensor<T>| kernels::softmax(&t.map(|v| v / tau), 1);
    Ok([w(alpha.normal())?, w(alpha.reduce())?])
}

/// Class probabilities of the noise-free super-net mixture, computed without
/// recording anything on the tape.
pub fn supernet_teacher_forward<T: Real>(
    tape: &Tape<T>,
    net: &Network<T>,
    bound: &Bound<T>,
    x: &Var<T>,
    alpha: &ArchParams<T>,
    tau: T,
) -> Result<Tensor<T>> {
    let [wn, wr] = mixture_weights(alpha, tau)?;
    let plan = NetPlan::mixture(&wn, &wr)?;
    tape.no_record(|t| {
        let logits = net.forward(t, bound, x, &plan, &mut NoMask)?;
        Ok(t.softmax(&logits, 1)?.value().clone())
    })
}
