//! The alternating weight / architecture search loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam, AdamConfig, Sgd, SgdConfig};
use crate::params::Bound;
use crate::regularizers::{
    distill_loss, drop_schedule, lambda_schedule, DistillConfig, DropBlockConfig, DropMasker,
};
use crate::scalar::Real;
use crate::searchspace::{
    count_skip_connect, derive_genotype, supernet_teacher_forward, ArchParams, CellType, Genotype, NetPlan, Network,
    NetworkSpec, NoMask, SkipCounts, SubGraphMasks, NUM_OPS,
};
use crate::tensor::Tensor;

/// Linear temperature ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self { start: 10.0, end: 1.0 }
    }
}

impl TauSchedule {
    pub fn tau_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        if p == 1.0 {
            return self.end;
        }
        self.start + (self.end - self.start) * p
    }

    pub fn validate(&self) -> Result<()> {
        if self.end > 0.0 && self.start > self.end && self.start.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("temperature must decrease to a positive value: {self:?}")))
        }
    }
}

/// `10 - 9 * progress`.
pub fn tau_at(progress: f64) -> f64 {
    TauSchedule::default().tau_at(progress)
}

/// Everything the loop needs besides the network shape and the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchHyper {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: TauSchedule,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub dropblock: DropBlockConfig,
    pub distill: DistillConfig,
}

impl Default for SearchHyper {
    fn default() -> Self {
        Self {
            k: 2,
            epochs: 240,
            batch_size: 128,
            seed: 0,
            tau: TauSchedule::default(),
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            dropblock: DropBlockConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl SearchHyper {
    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_OPS).contains(&self.k) {
            return Err(Error::Config(format!("K must be in 1..={NUM_OPS}, got {}", self.k)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.tau.validate()?;
        self.sgd.validate()?;
        self.adam.validate()?;
        self.dropblock.validate()?;
        self.distill.validate()
    }
}

/// Images `[N, C, H, W]` with one label each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let n = images.dims4("batch")?.0;
        if n == 0 || n != labels.len() {
            return Err(Error::Input(format!("{n} images but {} labels", labels.len())));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// Schedule values at one point of training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    pub progress: f64,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub drop_prob: f64,
}

impl Schedules {
    pub fn at(hyper: &SearchHyper, step: u64, total: u64) -> Self {
        let progress = if total == 0 { 1.0 } else { step.min(total) as f64 / total as f64 };
        Self {
            progress,
            lr: cosine_lr(hyper.sgd.lr, step, total),
            tau: hyper.tau.tau_at(progress),
            lambda: lambda_schedule(progress, &hyper.distill),
            drop_prob: drop_schedule(progress, &hyper.dropblock),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState<T> {
    pub hyper: SearchHyper,
    pub net: Network<T>,
    pub alpha: ArchParams<T>,
    pub sgd: Sgd<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub epoch: usize,
    pub total_steps: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> SearchState<T> {
    /// Weights are initialised from the seed; α starts at zero.
    pub fn new(spec: NetworkSpec, hyper: SearchHyper, steps_per_epoch: usize) -> Result<Self> {
        hyper.validate()?;
        if steps_per_epoch == 0 {
            return Err(Error::Config("an epoch needs at least one step".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let net = Network::new(spec, &mut rng)?;
        let sgd = Sgd::new(hyper.sgd.clone(), net.params().len());
        let adam = Adam::new(hyper.adam.clone(), 2);
        let total_steps = (hyper.epochs * steps_per_epoch) as u64;
        Ok(Self {
            hyper,
            net,
            alpha: ArchParams::zeros(),
            sgd,
            adam,
            step: 0,
            epoch: 0,
            total_steps,
            rng,
        })
    }

    pub fn schedules(&self) -> Schedules {
        Schedules::at(&self.hyper, self.step, self.total_steps)
    }

    pub fn genotype(&self) -> Genotype {
        derive_genotype(&self.alpha)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics<T> {
    /// Loss summed over the K sub-graphs divided by K, on the training batch.
    pub train_loss: f64,
    pub train_acc: f64,
    /// Same on the validation batch, before the architecture update.
    pub val_loss: f64,
    pub val_acc: f64,
    pub tau: f64,
    pub lambda: f64,
    pub drop_prob: f64,
    pub lr: f64,
    /// L2 norm of the weight gradient before clipping.
    pub weight_grad_norm: f64,
    /// Gradient applied to the normal and reduction logits.
    pub alpha_grad: [Tensor<T>; 2],
    /// Masks used in each phase.
    pub masks: [SubGraphMasks<T>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub tau: f64,
    pub lambda: f64,
    pub drop_prob: f64,
    pub skip_count_normal: usize,
    pub skip_count_reduce: usize,
    pub seconds: f64,
}

fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

struct PhaseOutcome<T> {
    total: Var<T>,
    loss: f64,
    acc: f64,
}

/// Sum over sub-graphs of cross-entropy plus guidance. `coeffs` carries the
/// straight-through matrices in the architecture phase.
#[allow(clippy::too_many_arguments)]
fn subgraph_losses<T: Real>(
    tape: &Tape<T>,
    state: &mut SearchState<T>,
    bound: &Bound<T>,
    batch: &Batch<T>,
    masks: &SubGraphMasks<T>,
    alpha_vars: Option<&[Var<T>; 2]>,
    sched: &Schedules,
) -> Result<PhaseOutcome<T>> {
    let tau = T::of(sched.tau);
    let x = tape.constant(batch.images.clone());
    let teacher = if sched.lambda > 0.0 {
        Some(supernet_teacher_forward(tape, &state.net, bound, &x, &state.alpha, tau)?)
    } else {
        None
    };
    let stem = state.net.stem(tape, bound, &x)?;
    let mut parts = Vec::with_capacity(masks.k());
    let mut acc = 0.0;
    let mut masker = DropMasker::new(&state.hyper.dropblock, sched.drop_prob, &mut state.rng);
    for k in 0..masks.k() {
        let coeffs = match alpha_vars {
            Some([an, ar]) => Some([
                masks.normal.coefficients(tape, an, tau, k)?,
                masks.reduce.coefficients(tape, ar, tau, k)?,
            ]),
            None => None,
        };
        let plan = NetPlan::subgraph(tape, masks, k, coeffs.as_ref().map(|[a, b]| [a, b]))?;
        let logits = state.net.forward_from_stem(tape, bound, &stem, &plan, &mut masker)?;
        acc += accuracy(logits.value(), &batch.labels);
        let mut loss = tape.cross_entropy(&logits, &batch.labels)?;
        if let Some(p_super) = &teacher {
            let p_sub = tape.softmax(&logits, 1)?;
            let d = distill_loss(tape, p_super, &p_sub, T::of(sched.lambda))?;
            loss = tape.add(&loss, &d)?;
        }
        parts.push(loss);
    }
    let total = tape.sum_n(&parts)?;
    let k = masks.k() as f64;
    Ok(PhaseOutcome {
        loss: total.value().item().as_f64() / k,
        acc: acc / k,
        total,
    })
}

fn diagnostic<T: Real>(state: &SearchState<T>, masks: &SubGraphMasks<T>, phase: &str) -> String {
    let mut out = format!("{phase} loss is not finite at step {}", state.step);
    for cell in CellType::BOTH {
        let a = state.alpha.table(cell).data();
        let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
        let mean = a.iter().map(|v| v.as_f64()).sum::<f64>() / a.len() as f64;
        out += &format!("; alpha_{cell:?}: min {lo} max {hi} mean {mean}");
        let d = masks.draws(cell);
        let picks: Vec<Vec<usize>> = (0..d.num_edges).map(|e| (0..d.k).map(|k| d.index(e, k)).collect()).collect();
        out += &format!("; masks_{cell:?}: {picks:?}");
    }
    out
}

/// Outcome of one phase of a step.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport<T> {
    /// Loss summed over the K sub-graphs divided by K.
    pub loss: f64,
    pub acc: f64,
    pub masks: SubGraphMasks<T>,
}

/// Weight update on `batch` with freshly sampled masks. Architecture logits
/// are constants here. Returns the report and the pre-clip gradient norm.
pub fn weight_phase<T: Real>(state: &mut SearchState<T>, batch: &Batch<T>, sched: &Schedules) -> Result<(PhaseReport<T>, f64)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let masks = SubGraphMasks::sample(&state.alpha, state.hyper.k, T::of(sched.tau), &mut state.rng)?;
    let tape = Tape::new();
    let bound = state.net.params().bind(&tape, true);
    let out = subgraph_losses(&tape, state, &bound, batch, &masks, None, sched)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            diagnostic: diagnostic(state, &masks, "weight phase"),
        });
    }
    tape.backward(&out.total)?;
    drop(out.total);
    let params = state.net.params_mut();
    params.absorb_grads(&bound);
    drop(bound);
    let norm = state.sgd.step(params.params_mut(), sched.lr)?;
    params.zero_grads();
    Ok((
        PhaseReport {
            loss: out.loss,
            acc: out.acc,
            masks,
        },
        norm,
    ))
}

/// Architecture update on `batch` with freshly sampled masks. Weights are
/// constants here. Returns the report and the gradient applied to the
/// normal and reduction logits.
pub fn arch_phase<T: Real>(
    state: &mut SearchState<T>,
    batch: &Batch<T>,
    sched: &Schedules,
) -> Result<(PhaseReport<T>, [Tensor<T>; 2])> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let masks = SubGraphMasks::sample(&state.alpha, state.hyper.k, T::of(sched.tau), &mut state.rng)?;
    let tape = Tape::new();
    let bound = state.net.params().bind(&tape, false);
    let alpha_vars = [
        tape.leaf(state.alpha.normal().clone(), true),
        tape.leaf(state.alpha.reduce().clone(), true),
    ];
    let out = subgraph_losses(&tape, state, &bound, batch, &masks, Some(&alpha_vars), sched)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            diagnostic: diagnostic(state, &masks, "architecture phase"),
        });
    }
    tape.backward(&out.total)?;
    let grads = [0, 1].map(|i| {
        alpha_vars[i]
            .take_grad()
            .unwrap_or_else(|| Tensor::zeros(alpha_vars[i].shape()))
    });
    for (p, g) in state.alpha.params_mut().iter_mut().zip(&grads) {
        p.accumulate_grad(g.clone());
    }
    state.adam.step(state.alpha.params_mut())?;
    state.alpha.zero_grads();
    Ok((
        PhaseReport {
            loss: out.loss,
            acc: out.acc,
            masks,
        },
        grads,
    ))
}

/// One weight update on `train` followed by one architecture update on `val`.
/// Each phase samples its own masks.
pub fn search_step<T: Real>(state: &mut SearchState<T>, train: &Batch<T>, val: &Batch<T>) -> Result<StepMetrics<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let sched = state.schedules();
    let (w, weight_grad_norm) = weight_phase(state, train, &sched)?;
    let (a, alpha_grad) = arch_phase(state, val, &sched)?;
    state.step += 1;
    Ok(StepMetrics {
        train_loss: w.loss,
        train_acc: w.acc,
        val_loss: a.loss,
        val_acc: a.acc,
        tau: sched.tau,
        lambda: sched.lambda,
        drop_prob: sched.drop_prob,
        lr: sched.lr,
        weight_grad_norm,
        alpha_grad,
        masks: [w.masks, a.masks],
    })
}

/// Training and validation halves of the search data.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchData<T> {
    pub train: Batch<T>,
    pub val: Batch<T>,
}

impl<T: Real> SearchData<T> {
    /// Whole batches per epoch; a split smaller than one batch is used whole.
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        (self.train.len().min(self.val.len()) / batch_size).max(1)
    }

    fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<(Batch<T>, Batch<T>)> {
        let mut ti: Vec<usize> = (0..self.train.len()).collect();
        let mut vi: Vec<usize> = (0..self.val.len()).collect();
        ti.shuffle(rng);
        vi.shuffle(rng);
        let size = batch_size.min(ti.len()).min(vi.len());
        (0..self.steps_per_epoch(batch_size))
            .map(|s| {
                let r = s * size..(s + 1) * size;
                (self.train.select(&ti[r.clone()]), self.val.select(&vi[r]))
            })
            .collect()
    }
}

/// Monotonic seconds, supplied by the caller.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// For callers that do not care about timings.
pub struct NullClock;

impl Clock for NullClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Runs the remaining epochs of `state`. After each epoch `observer` sees
/// the metrics and the state (for logging or checkpointing); an error from
/// it stops the search.
pub fn run_search<T: Real, F>(
    state: &mut SearchState<T>,
    data: &SearchData<T>,
    clock: &dyn Clock,
    mut observer: F,
) -> Result<Genotype>
where
    F: FnMut(&EpochMetrics, &SearchState<T>) -> Result<()>,
{
    let steps = data.steps_per_epoch(state.hyper.batch_size);
    if steps as u64 * state.hyper.epochs as u64 != state.total_steps {
        return Err(Error::Config(format!(
            "state was built for {} steps but the data gives {steps} per epoch",
            state.total_steps
        )));
    }
    while state.epoch < state.hyper.epochs {
        let start = clock.seconds();
        let batches = data.epoch_batches(state.hyper.batch_size, &mut state.rng);
        let (mut train_loss, mut val_loss, mut val_acc) = (0.0, 0.0, 0.0);
        let mut last = None;
        for (train, val) in &batches {
            let m = search_step(state, train, val)?;
            train_loss += m.train_loss;
            val_loss += m.val_loss;
            val_acc += m.val_acc;
            last = Some(m);
        }
        let last = last.expect("at least one step per epoch");
        let n = batches.len() as f64;
        let SkipCounts { normal, reduce } = count_skip_connect(&state.genotype());
        state.epoch += 1;
        let metrics = EpochMetrics {
            epoch: state.epoch,
            train_loss: train_loss / n,
            val_loss: val_loss / n,
            val_acc: val_acc / n,
            tau: last.tau,
            lambda: last.lambda,
            drop_prob: last.drop_prob,
            skip_count_normal: normal,
            skip_count_reduce: reduce,
            seconds: clock.seconds() - start,
        };
        observer(&metrics, state)?;
    }
    Ok(state.genotype())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            seed: 0,
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub train_loss: Vec<f64>,
    pub val_acc: f64,
}

/// Logits of `net` restricted to `plan`, evaluated in chunks without
/// recording.
pub fn predict<T: Real>(net: &Network<T>, plan: &NetPlan<T>, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    let (n, ..) = images.dims4("predict")?;
    let tape = Tape::new();
    let bound = net.params().bind(&tape, false);
    let mut data = Vec::new();
    let mut classes = 0;
    for start in (0..n).step_by(chunk.max(1)) {
        let rows: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let x = tape.constant(images.gather_rows(&rows));
        let logits = net.forward(&tape, &bound, &x, plan, &mut NoMask)?;
        classes = logits.shape()[1];
        data.extend_from_slice(logits.value().data());
    }
    Tensor::new(alloc::vec![n, classes], data)
}

/// Trains a fresh network restricted to `genotype` from scratch on `train`
/// and reports accuracy on `val`.
pub fn evaluate_genotype<T: Real>(
    spec: NetworkSpec,
    genotype: &Genotype,
    data: &SearchData<T>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let plan = NetPlan::from_genotype(genotype)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<T>::new(spec, &mut rng)?;
    let mut sgd = Sgd::new(cfg.sgd.clone(), net.params().len());
    let steps = (data.train.len() / cfg.batch_size).max(1);
    let size = cfg.batch_size.min(data.train.len());
    let total = (steps * cfg.epochs) as u64;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..data.train.len()).collect();
        idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for s in 0..steps {
            let batch = data.train.select(&idx[s * size..(s + 1) * size]);
            let tape = Tape::new();
            let bound = net.params().bind(&tape, true);
            let x = tape.constant(batch.images);
            let logits = net.forward(&tape, &bound, &x, &plan, &mut NoMask)?;
            let loss = tape.cross_entropy(&logits, &batch.labels)?;
            let l = loss.value().item().as_f64();
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    diagnostic: "evaluation loss is not finite".into(),
                });
            }
            sum += l;
            tape.backward(&loss)?;
            net.params_mut().absorb_grads(&bound);
            drop(bound);
            sgd.step(net.params_mut().params_mut(), cosine_lr(cfg.sgd.lr, step, total))?;
            net.params_mut().zero_grads();
            step += 1;
        }
        train_loss.push(sum / steps as f64);
    }
    let logits = predict(&net, &plan, &data.val.images, 256)?;
    Ok(EvalReport {
        train_loss,
        val_acc: accuracy(&logits, &data.val.labels),
    })
}
