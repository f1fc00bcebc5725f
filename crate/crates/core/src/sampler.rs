//! Gumbel top-K sampling without replacement.
//!
//! One Gumbel vector `g` is drawn per edge, the perturbed scores are
//! `r = (alpha + g) / tau`, and K draws are taken sequentially: each draw is a
//! softmax over the still-feasible entries of `r`, the one-hot selection is
//! its argmax, and the selected entry is then pushed to `-inf` with
//! `r <- r + log(1 - onehot)`. Because the noise is shared across the K
//! draws, the selections are the top-K order statistics of `r`, i.e. a
//! Plackett-Luce sample without replacement.
//!
//! The forward pass uses the one-hot selection; the backward pass uses the
//! gradient of the soft vector (straight-through).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{kernels, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Bound applied to uniform draws before the double logarithm.
pub const UNIFORM_CLAMP: f64 = 1e-20;

/// `-log(-log(u))` with `u` clamped to `[1e-20, 1 - 1e-20]`. In `f64`,
/// `1 - 1e-20` rounds to 1, so the upper bound is the largest double below 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let upper = (1.0 - UNIFORM_CLAMP).min(1.0 - f64::EPSILON / 2.0);
    let u = u.clamp(UNIFORM_CLAMP, upper);
    -Float::ln(-Float::ln(u))
}

pub fn gumbel_noise<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::of(gumbel_from_uniform(rng.gen::<f64>()))).collect()
}

/// Perturbed, temperature-scaled scores with the feasible set they imply.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelState<T> {
    r: Vec<T>,
    feasible: Vec<bool>,
    draws_taken: usize,
}

impl<T: Real> GumbelState<T> {
    /// `r = (alpha + noise) * (1 / tau)`.
    pub fn new(alpha: &[T], noise: &[T], tau: T) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        if alpha.len() != noise.len() {
            return Err(Error::Input(format!(
                "{} logits but {} noise values",
                alpha.len(),
                noise.len()
            )));
        }
        let inv_tau = T::one() / tau;
        let r: Vec<T> = alpha.iter().zip(noise).map(|(&a, &g)| (a + g) * inv_tau).collect();
        Ok(Self::from_scores(r))
    }

    /// Wraps precomputed scores; `-inf` entries are infeasible.
    pub fn from_scores(r: Vec<T>) -> Self {
        let feasible = r.iter().map(|&v| v != T::neg_infinity()).collect();
        Self {
            r,
            feasible,
            draws_taken: 0,
        }
    }

    pub fn scores(&self) -> &[T] {
        &self.r
    }

    pub fn feasible(&self) -> &[bool] {
        &self.feasible
    }

    pub fn draws_taken(&self) -> usize {
        self.draws_taken
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawResult<T> {
    /// Softmax over the feasible entries; infeasible entries are exactly 0.
    pub soft: Vec<T>,
    /// One-hot at `index`.
    pub hard: Vec<T>,
    pub index: usize,
    /// Feasible set at the time of this draw.
    pub feasible: Vec<bool>,
}

/// Lowest index among the maxima of the feasible scores.
fn feasible_argmax<T: Real>(r: &[T], feasible: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in r.iter().zip(feasible).enumerate() {
        if ok && best.is_none_or(|b| v > r[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn soft_select<T: Real>(state: &GumbelState<T>) -> Result<DrawResult<T>> {
    let index = feasible_argmax(&state.r, &state.feasible).ok_or(Error::ExhaustedSampler)?;
    let scores = Tensor::new(vec![state.r.len()], state.r.clone())?;
    let soft = kernels::softmax(&scores, 0)
        .map_err(|_| Error::ExhaustedSampler)?
        .into_data();
    let mut hard = vec![T::zero(); state.r.len()];
    hard[index] = T::one();
    Ok(DrawResult {
        soft,
        hard,
        index,
        feasible: state.feasible.clone(),
    })
}

/// `r <- r + log(1 - hard)`: the selected entry becomes `-inf`, the rest are
/// untouched.
pub fn mask_update<T: Real>(mut state: GumbelState<T>, hard: &[T]) -> Result<GumbelState<T>> {
    if hard.len() != state.r.len() {
        return Err(Error::Contract(format!(
            "selection has {} entries, scores have {}",
            hard.len(),
            state.r.len()
        )));
    }
    let ones = hard.iter().filter(|&&h| h == T::one()).count();
    let zeros = hard.iter().filter(|&&h| h == T::zero()).count();
    if ones != 1 || ones + zeros != hard.len() {
        return Err(Error::Contract("selection is not one-hot".into()));
    }
    let idx = hard.iter().position(|&h| h == T::one()).unwrap_or(0);
    if !state.feasible[idx] {
        return Err(Error::Contract(format!("selection {idx} is already infeasible")));
    }
    for (r, &h) in state.r.iter_mut().zip(hard) {
        // log(1 - 1) = -inf, log(1 - 0) = 0
        *r += (T::one() - h).ln();
    }
    state.feasible[idx] = false;
    state.draws_taken += 1;
    Ok(state)
}

pub fn sample_topk_with_noise<T: Real>(alpha: &[T], noise: &[T], k: usize, tau: T) -> Result<Vec<DrawResult<T>>> {
    if k == 0 || k > alpha.len() {
        return Err(Error::Config(format!(
            "K must lie in 1..={}, got {k}",
            alpha.len()
        )));
    }
    let mut state = GumbelState::new(alpha, noise, tau)?;
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        let d = soft_select(&state)?;
        state = mask_update(state, &d.hard)?;
        draws.push(d);
    }
    Ok(draws)
}

/// K exclusive draws for one edge. One Gumbel vector is drawn and shared by
/// all K draws.
pub fn sample_topk<T: Real, R: Rng + ?Sized>(alpha: &[T], k: usize, tau: T, rng: &mut R) -> Result<Vec<DrawResult<T>>> {
    if k == 0 || k > alpha.len() {
        return Err(Error::Config(format!(
            "K must lie in 1..={}, got {k}",
            alpha.len()
        )));
    }
    let noise = gumbel_noise::<T, R>(alpha.len(), rng);
    sample_topk_with_noise(alpha, &noise, k, tau)
}

/// Baseline: K independent Gumbel-softmax draws, which may repeat.
pub fn sample_with_replacement<T: Real, R: Rng + ?Sized>(alpha: &[T], k: usize, tau: T, rng: &mut R) -> Result<Vec<DrawResult<T>>> {
    (0..k)
        .map(|_| {
            let noise = gumbel_noise::<T, R>(alpha.len(), rng);
            soft_select(&GumbelState::new(alpha, &noise, tau)?)
        })
        .collect()
}

/// Straight-through coefficients for one draw over a vector of logits:
/// value equal to `draw.hard`, gradient equal to that of `draw.soft` with
/// respect to `alpha`.
pub fn ste_coefficient<T: Real>(tape: &Tape<T>, alpha: &Var<T>, noise: &[T], tau: T, draw: &DrawResult<T>) -> Result<Var<T>> {
    let shape = alpha.shape().to_vec();
    let noise = Tensor::new(shape.clone(), noise.to_vec())?;
    let mask = feasibility_offsets(&draw.feasible);
    let soft = soft_path(tape, alpha, &noise, tau, &Tensor::new(shape.clone(), mask)?, shape.len() - 1)?;
    tape.straight_through(&soft, Tensor::new(shape, draw.hard.clone())?)
}

fn feasibility_offsets<T: Real>(feasible: &[bool]) -> Vec<T> {
    feasible
        .iter()
        .map(|&ok| if ok { T::zero() } else { T::neg_infinity() })
        .collect()
}

/// `softmax((alpha + noise) * (1/tau) + offsets)` on the tape.
pub fn soft_path<T: Real>(
    tape: &Tape<T>,
    alpha: &Var<T>,
    noise: &Tensor<T>,
    tau: T,
    offsets: &Tensor<T>,
    axis: usize,
) -> Result<Var<T>> {
    let perturbed = tape.add(alpha, &tape.constant(noise.clone()))?;
    let r = tape.scale(&perturbed, T::one() / tau);
    let masked = tape.add(&r, &tape.constant(offsets.clone()))?;
    tape.softmax(&masked, axis)
}

/// K exclusive selections for every edge of one cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDraws<T> {
    pub k: usize,
    pub num_edges: usize,
    pub num_ops: usize,
    /// `[edges * ops]`, one Gumbel vector per edge.
    pub noise: Vec<T>,
    /// `draws[edge][k]`
    pub draws: Vec<Vec<DrawResult<T>>>,
}

impl<T: Real> EdgeDraws<T> {
    pub fn sample<R: Rng + ?Sized>(alpha: &Tensor<T>, k: usize, tau: T, rng: &mut R) -> Result<Self> {
        let (num_edges, num_ops) = alpha.dims2("sample")?;
        let mut noise = Vec::with_capacity(num_edges * num_ops);
        let mut draws = Vec::with_capacity(num_edges);
        for e in 0..num_edges {
            let row = &alpha.data()[e * num_ops..(e + 1) * num_ops];
            let g = gumbel_noise::<T, R>(num_ops, rng);
            draws.push(sample_topk_with_noise(row, &g, k, tau)?);
            noise.extend(g);
        }
        Ok(Self {
            k,
            num_edges,
            num_ops,
            noise,
            draws,
        })
    }

    /// Selected operation index of sub-graph `k` on `edge`.
    pub fn index(&self, edge: usize, k: usize) -> usize {
        self.draws[edge][k].index
    }

    /// `[edges, ops]` one-hot matrix of sub-graph `k`.
    pub fn hard_matrix(&self, k: usize) -> Tensor<T> {
        let mut m = Tensor::zeros(&[self.num_edges, self.num_ops]);
        for e in 0..self.num_edges {
            m.data_mut()[e * self.num_ops + self.index(e, k)] = T::one();
        }
        m
    }

    pub fn soft_matrix(&self, k: usize) -> Tensor<T> {
        let data = self.draws.iter().flat_map(|d| d[k].soft.iter().copied()).collect();
        Tensor::new(vec![self.num_edges, self.num_ops], data).expect("consistent draws")
    }

    /// Straight-through coefficient matrix `[edges, ops]` for sub-graph `k`.
    pub fn coefficients(&self, tape: &Tape<T>, alpha: &Var<T>, tau: T, k: usize) -> Result<Var<T>> {
        let shape = [self.num_edges, self.num_ops];
        if alpha.shape() != shape {
            return Err(Error::Input(format!(
                "alpha shape {:?} does not match draws {:?}",
                alpha.shape(),
                shape
            )));
        }
        let offsets: Vec<T> = self
            .draws
            .iter()
            .flat_map(|d| feasibility_offsets::<T>(&d[k].feasible))
            .collect();
        let soft = soft_path(
            tape,
            alpha,
            &Tensor::new(shape.to_vec(), self.noise.clone())?,
            tau,
            &Tensor::new(shape.to_vec(), offsets)?,
            1,
        )?;
        tape.straight_through(&soft, self.hard_matrix(k))
    }

    /// True when, on every edge, the K selections are pairwise distinct.
    pub fn exclusive(&self) -> bool {
        self.draws.iter().all(|d| {
            let mut seen = vec![false; self.num_ops];
            d.iter().all(|x| !core::mem::replace(&mut seen[x.index], true))
        })
    }
}
