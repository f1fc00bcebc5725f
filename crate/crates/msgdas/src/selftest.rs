//! Sampler distribution checks and finite-difference gradient checks, run by
//! `msgdas selftest` and by the acceptance tests.

use msgdas_core::autograd::{ConvParams, PoolKind, Tape, Var};
use msgdas_core::gradcheck::{check, project};
use msgdas_core::params::Bound;
use msgdas_core::regularizers::{distill_loss, identity_drop_forward};
use msgdas_core::sampler::{
    gumbel_noise, sample_topk, sample_topk_with_noise, soft_path, ste_coefficient, EdgeDraws,
};
use msgdas_core::searchspace::{make_op, OpKind};
use msgdas_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Number of draw sets with a repeated operation over `trials` random
/// logits, temperatures and seeds, cycling K through 2, 4 and 8. Each trial
/// draws one 8-way vector and one full 14-edge table.
pub fn exclusivity_violations(trials: usize, seed: u64) -> Result<usize> {
    let mut meta = rng(seed);
    let mut violations = 0;
    for t in 0..trials {
        let k = [2, 4, 8][t % 3];
        let tau = meta.gen_range(0.5..10.0);
        let alpha: Vec<f64> = (0..8).map(|_| meta.gen_range(-3.0..3.0)).collect();
        let mut r = rng(meta.gen());
        let draws = sample_topk(&alpha, k, tau, &mut r)?;
        let mut seen = [false; 8];
        if draws.iter().any(|d| std::mem::replace(&mut seen[d.index], true)) {
            violations += 1;
        }
        let table = Tensor::from_fn(&[14, 8], |_| meta.gen_range(-3.0..3.0));
        if !EdgeDraws::sample(&table, k, tau, &mut r)?.exclusive() {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Total-variation distance between the empirical ordered-pair frequencies
/// of K = 2 draws from α = [0, ln 2, ln 3, ln 4] at τ = 1 and the
/// sequential-softmax probabilities `p_i p_j / (1 - p_i)`.
pub fn plackett_luce_tv(draws: usize, seed: u64) -> Result<f64> {
    let alpha = [0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()];
    let p = [0.1, 0.2, 0.3, 0.4];
    let mut counts = [[0usize; 4]; 4];
    let mut r = rng(seed);
    for _ in 0..draws {
        let d = sample_topk(&alpha, 2, 1.0, &mut r)?;
        counts[d[0].index][d[1].index] += 1;
    }
    let mut tv = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let expected = if i == j { 0.0 } else { p[i] * p[j] / (1.0 - p[i]) };
            tv += (counts[i][j] as f64 / draws as f64 - expected).abs();
        }
    }
    Ok(tv / 2.0)
}

/// Number of random score vectors (|O| from 2 to 5, every K) for which the
/// sequential masked argmax disagrees with sorting `(α + g) / τ`.
pub fn topk_mismatches(vectors: usize, seed: u64) -> Result<usize> {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for v in 0..vectors {
        let m = 2 + v % 4;
        let k = r.gen_range(1..=m);
        let tau = r.gen_range(0.2..5.0);
        let alpha: Vec<f64> = (0..m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let noise: Vec<f64> = gumbel_noise(m, &mut r);
        let scores: Vec<f64> = alpha.iter().zip(&noise).map(|(a, g)| (a + g) / tau).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let got: Vec<usize> = sample_topk_with_noise(&alpha, &noise, k, tau)?
            .iter()
            .map(|d| d.index)
            .collect();
        if got != order[..k] {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Sample mean and variance of `n` Gumbel(0, 1) draws.
pub fn gumbel_moments(n: usize, seed: u64) -> (f64, f64) {
    let g: Vec<f64> = gumbel_noise(n, &mut rng(seed));
    let mean = g.iter().sum::<f64>() / n as f64;
    let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    /// Smooth cases get the tighter tolerance.
    pub smooth: bool,
    pub rel_error: f64,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        if self.smooth {
            1e-4
        } else {
            1e-3
        }
    }

    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance()
    }
}

const EPS: f64 = 1e-5;

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Magnitudes in [0.1, 1) with random signs: no ReLU kink inside the stencil.
fn off_kink(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Well separated distinct values, so pooling winners are stable.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

struct Suite {
    cases: Vec<GradCase>,
}

impl Suite {
    fn run(
        &mut self,
        name: impl Into<String>,
        smooth: bool,
        eps: f64,
        inputs: &[Tensor<f64>],
        f: impl Fn(&Tape<f64>, &[Var<f64>]) -> msgdas_core::Result<Var<f64>>,
    ) -> Result<()> {
        let r = check(inputs, eps, f)?;
        self.cases.push(GradCase {
            name: name.into(),
            smooth,
            rel_error: r.max_rel_error(),
        });
        Ok(())
    }
}

/// Central differences against the tape for every primitive, every
/// candidate operation at both strides, the guidance loss and the sampler's
/// soft path. Straight-through coefficients have a piecewise-constant
/// forward, so their backward is compared with the soft path's gradient.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut r = rng(seed);
    let mut s = Suite { cases: Vec::new() };
    let a = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let scalar = uniform(&[], -1.0, 1.0, &mut r);

    s.run("add", true, EPS, &[a.clone(), b.clone()], |t, v| project(t, &t.add(&v[0], &v[1])?, 1))?;
    s.run("sub", true, EPS, &[a.clone(), b.clone()], |t, v| project(t, &t.sub(&v[0], &v[1])?, 2))?;
    s.run("mul", true, EPS, &[a.clone(), b.clone()], |t, v| project(t, &t.mul(&v[0], &v[1])?, 3))?;
    s.run("scale", true, EPS, std::slice::from_ref(&a), |t, v| project(t, &t.scale(&v[0], 1.7), 4))?;
    s.run("add_scalar", true, EPS, std::slice::from_ref(&a), |t, v| {
        let y = t.add_scalar(&v[0], 0.3);
        project(t, &t.mul(&y, &y)?, 5)
    })?;
    s.run("mul_scalar_var", true, EPS, &[a.clone(), scalar], |t, v| {
        project(t, &t.mul_scalar_var(&v[0], &v[1])?, 6)
    })?;
    s.run("relu", false, EPS, &[off_kink(&[3, 4, 2], &mut r)], |t, v| project(t, &t.relu(&v[0]), 7))?;
    s.run("log", true, EPS, &[uniform(&[7], 0.2, 2.0, &mut r)], |t, v| project(t, &t.log(&v[0]), 8))?;
    s.run("sum", true, EPS, std::slice::from_ref(&a), |t, v| {
        let y = t.mul(&v[0], &v[0])?;
        Ok(t.sum(&y))
    })?;
    s.run("mean", true, EPS, std::slice::from_ref(&a), |t, v| {
        let y = t.mul(&v[0], &v[0])?;
        Ok(t.mean(&y))
    })?;
    s.run("sum_n", true, EPS, &[a.clone(), b.clone()], |t, v| {
        project(t, &t.sum_n(&[v[0].clone(), v[1].clone(), v[0].clone()])?, 9)
    })?;

    let x = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let convs = [
        ("conv2d 3x3", vec![4, 3, 3, 3], ConvParams::new(1, 1, 1, 1)),
        ("conv2d 1x1 stride 2", vec![4, 3, 1, 1], ConvParams::new(2, 0, 1, 1)),
        ("conv2d depthwise stride 2", vec![3, 1, 3, 3], ConvParams::new(2, 1, 1, 3)),
        ("conv2d depthwise dilated", vec![3, 1, 5, 5], ConvParams::new(1, 4, 2, 3)),
    ];
    for (i, (name, ws, p)) in convs.into_iter().enumerate() {
        let w = uniform(&ws, -0.5, 0.5, &mut r);
        s.run(name, true, EPS, &[x.clone(), w], |t, v| project(t, &t.conv2d(&v[0], &v[1], p)?, 10 + i as u64))?;
    }
    for stride in [1, 2] {
        let d = distinct(&[2, 2, 6, 6], &mut r);
        s.run(format!("avg pool stride {stride}"), true, EPS, std::slice::from_ref(&d), |t, v| {
            project(t, &t.pool2d(&v[0], PoolKind::Avg, 3, stride)?, 20)
        })?;
        s.run(format!("max pool stride {stride}"), false, EPS, &[d], |t, v| {
            project(t, &t.pool2d(&v[0], PoolKind::Max, 3, stride)?, 21)
        })?;
    }
    s.run("batch_norm", true, EPS, std::slice::from_ref(&a), |t, v| project(t, &t.batch_norm(&v[0])?, 22))?;
    s.run("softmax", true, EPS, &[uniform(&[3, 5], -2.0, 2.0, &mut r)], |t, v| {
        project(t, &t.softmax(&v[0], 1)?, 23)
    })?;
    s.run("cross_entropy", true, EPS, &[uniform(&[4, 5], -3.0, 3.0, &mut r)], |t, v| {
        t.cross_entropy(&v[0], &[0, 4, 2, 2])
    })?;
    s.run("global_avg_pool", true, EPS, std::slice::from_ref(&a), |t, v| project(t, &t.global_avg_pool(&v[0])?, 24))?;
    let fx = uniform(&[4, 6], -1.0, 1.0, &mut r);
    s.run(
        "linear",
        true,
        EPS,
        &[fx.clone(), uniform(&[3, 6], -1.0, 1.0, &mut r), uniform(&[3], -1.0, 1.0, &mut r)],
        |t, v| project(t, &t.linear(&v[0], &v[1], &v[2])?, 25),
    )?;
    s.run("matmul", true, EPS, &[fx, uniform(&[6, 5], -1.0, 1.0, &mut r)], |t, v| {
        project(t, &t.matmul(&v[0], &v[1])?, 26)
    })?;
    s.run("concat_channels", true, EPS, &[a.clone(), b.clone()], |t, v| {
        project(t, &t.concat_channels(&[v[0].clone(), v[1].clone()])?, 27)
    })?;
    s.run("slice_spatial", true, EPS, std::slice::from_ref(&a), |t, v| project(t, &t.slice_spatial(&v[0], 1, 1)?, 28))?;
    s.run("reshape", true, EPS, std::slice::from_ref(&a), |t, v| project(t, &t.reshape(&v[0], &[4, 24])?, 29))?;
    s.run("select", true, EPS, std::slice::from_ref(&a), |t, v| {
        let y = t.select(&v[0], 5)?;
        t.mul(&y, &y)
    })?;
    s.run("identity_drop_forward", true, EPS, &[a.clone(), uniform(&[], 0.2, 1.0, &mut r)], |t, v| {
        let mask = Tensor::from_fn(&[2, 3, 4, 4], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
        project(t, &identity_drop_forward(t, &v[0], Some(&v[1]), Some(&mask))?, 30)
    })?;
    let teacher = msgdas_core::autograd::kernels::softmax(&uniform(&[3, 4], -1.0, 1.0, &mut r), 1)?;
    s.run("distill_loss", true, EPS, &[uniform(&[3, 4], -1.0, 1.0, &mut r)], |t, v| {
        let p = t.softmax(&v[0], 1)?;
        distill_loss(t, &teacher, &p, 0.7)
    })?;

    for stride in [1, 2] {
        for kind in OpKind::ALL.into_iter().filter(|&k| k != OpKind::Zero) {
            let op = make_op::<f64, _>(kind, 2, stride, &mut r)?;
            let mut inputs = vec![uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut r)];
            inputs.extend(op.params.params().iter().map(|p| p.value.clone()));
            // ReLU and max inside; a small step keeps the stencil off the kinks
            s.run(format!("{kind:?} stride {stride}"), false, 1e-6, &inputs, |t, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                project(t, &op.forward(t, &bound, &v[0])?, 31)
            })?;
        }
    }

    let alpha = uniform(&[3, 5], -1.0, 1.0, &mut r);
    let noise = uniform(&[3, 5], -1.0, 2.0, &mut r);
    let mut offsets = Tensor::zeros(&[3, 5]);
    for i in [2, 5, 9] {
        offsets.data_mut()[i] = f64::NEG_INFINITY;
    }
    for tau in [0.5, 1.0, 4.0] {
        s.run(format!("soft_path tau {tau}"), true, 1e-6, std::slice::from_ref(&alpha), |t, v| {
            project(t, &soft_path(t, &v[0], &noise, tau, &offsets, 1)?, 32)
        })?;
    }
    s.cases.push(straight_through_case(&mut r)?);
    Ok(s.cases)
}

/// Relative difference between the gradient of a straight-through
/// coefficient and that of the soft path it wraps, for the second of two
/// draws (one entry already masked).
fn straight_through_case(r: &mut ChaCha8Rng) -> Result<GradCase> {
    let alpha: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let noise: Vec<f64> = gumbel_noise(6, r);
    let tau = 0.7;
    let draws = sample_topk_with_noise(&alpha, &noise, 2, tau)?;
    let weights: Vec<f64> = (0..6).map(|i| 0.3 + i as f64 * 0.25).collect();
    let grad = |st: bool| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![6], alpha.clone())?, true);
        let y = if st {
            ste_coefficient(&tape, &a, &noise, tau, &draws[1])?
        } else {
            let offsets: Vec<f64> = draws[1]
                .feasible
                .iter()
                .map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            soft_path(&tape, &a, &Tensor::new(vec![6], noise.clone())?, tau, &Tensor::new(vec![6], offsets)?, 0)?
        };
        let w = tape.constant(Tensor::new(vec![6], weights.clone())?);
        tape.backward(&tape.sum(&tape.mul(&y, &w)?))?;
        Ok(a.grad().map(|g| g.into_data()).unwrap_or_default())
    };
    let (st, soft) = (grad(true)?, grad(false)?);
    let scale = soft.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let diff = st.iter().zip(&soft).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(GradCase {
        name: "straight_through (backward = soft path)".into(),
        smooth: true,
        rel_error: diff / scale,
    })
}

/// Everything `msgdas selftest` runs, with the acceptance sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let (mean, var) = gumbel_moments(1_000_000, seed);
    let euler = 0.577_215_664_901_532_9;
    let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
    out.push(CheckOutcome::new(
        "gumbel moments",
        (mean - euler).abs() < 0.01 && (var - pi2_6).abs() < 0.02,
        format!("mean {mean:.4} (want {euler:.4}), variance {var:.4} (want {pi2_6:.4})"),
    ));
    let v = exclusivity_violations(10_000, seed)?;
    out.push(CheckOutcome::new("sampler exclusivity", v == 0, format!("{v} violations in 10000 trials")));
    let tv = plackett_luce_tv(200_000, seed)?;
    out.push(CheckOutcome::new(
        "Plackett-Luce pairs",
        tv < 0.01,
        format!("total variation {tv:.5} over 200000 draws"),
    ));
    let m = topk_mismatches(1_000, seed)?;
    out.push(CheckOutcome::new("top-K equals sorted scores", m == 0, format!("{m} mismatches in 1000 vectors")));
    for case in gradient_suite(seed)? {
        out.push(CheckOutcome::new(
            format!("gradient {}", case.name),
            case.passed(),
            format!("relative error {:.2e} (tolerance {:.0e})", case.rel_error, case.tolerance()),
        ));
    }
    Ok(out)
}
