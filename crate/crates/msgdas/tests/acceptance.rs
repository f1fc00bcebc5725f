//! The ten acceptance criteria. They run sequentially in one test so the
//! wall-clock measurements do not compete with each other, and each prints
//! one PASS/FAIL line to stderr (uncaptured).

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use msgdas::cli::cli_main_with;
use msgdas::config::SearchConfig;
use msgdas::persist::{read_genotype, read_metrics, GENOTYPE_FILE, METRICS_FILE};
use msgdas::run::{evaluate, search_to_dir, OutputMode};
use msgdas::selftest::{exclusivity_violations, gradient_suite, plackett_luce_tv, topk_mismatches};
use msgdas_core::autograd::Tape;
use msgdas_core::engine::{arch_phase, weight_phase, Batch, Schedules, SearchHyper, SearchState};
use msgdas_core::params::ParamGroup;
use msgdas_core::regularizers::{
    distill_loss, dropblock_mask, dropout_mask, identity_drop_forward, lambda_schedule, DistillConfig,
    DropBlockConfig,
};
use msgdas_core::sampler::{sample_topk_with_noise, ste_coefficient};
use msgdas_core::searchspace::{
    subgraph_forward, supernet_teacher_forward, ArchParams, CellType, Network, NetworkSpec, NoMask, OpKind,
    SubGraphMasks, NUM_INTERMEDIATE_NODES,
};
use msgdas_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sampler_exclusivity() -> Outcome {
    let v = exclusivity_violations(10_000, 11).unwrap();
    (v == 0, format!("{v} violations over 10000 trials, K in {{2,4,8}}"))
}

fn plackett_luce() -> Outcome {
    let start = Instant::now();
    let tv = plackett_luce_tv(200_000, 12).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (tv < 0.01 && secs < 30.0, format!("TV {tv:.5} (< 0.01) in {secs:.2}s (< 30s)"))
}

fn gumbel_topk() -> Outcome {
    let m = topk_mismatches(1_000, 13).unwrap();
    (m == 0, format!("{m} mismatches over 1000 score vectors, |O| <= 5"))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cases = gradient_suite(14).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {:.2e}", c.name, c.rel_error))
        .collect();
    let worst = |smooth: bool| {
        cases
            .iter()
            .filter(|c| c.smooth == smooth)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    };
    (
        failed.is_empty() && secs < 120.0,
        format!(
            "{} cases, worst smooth {:.2e} (< 1e-4), worst other {:.2e} (< 1e-3), {secs:.2}s; failed: {failed:?}",
            cases.len(),
            worst(true),
            worst(false)
        ),
    )
}

/// d/dα_skip of `sum(w * coeff * (x * mask))` for a draw that picked the
/// skip slot.
fn skip_logit_gradient(x: &Tensor<f64>, w: &Tensor<f64>, mask: Option<&Tensor<f64>>) -> f64 {
    let alpha = Tensor::new(vec![4], vec![0.2, 1.5, -0.3, 0.4]).unwrap();
    let noise = [0.0; 4];
    let draw = &sample_topk_with_noise(alpha.data(), &noise, 1, 1.0).unwrap()[0];
    assert_eq!(draw.index, 1);
    let tape = Tape::new();
    let a = tape.leaf(alpha, true);
    let coeff = ste_coefficient(&tape, &a, &noise, 1.0, draw).unwrap();
    let c = tape.select(&coeff, 1).unwrap();
    let y = identity_drop_forward(&tape, &tape.constant(x.clone()), Some(&c), mask).unwrap();
    let loss = tape.sum(&tape.mul(&y, &tape.constant(w.clone())).unwrap());
    tape.backward(&loss).unwrap();
    a.grad().unwrap().data()[1]
}

fn attenuation_ratio(block: bool, keep: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [2, 3, 16, 16];
    let x = Tensor::from_fn(&shape, |_| r.gen_range(0.5..1.5));
    let w = Tensor::from_fn(&shape, |_| r.gen_range(0.5..1.5));
    let full = skip_logit_gradient(&x, &w, None);
    let n = 10_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let m = if block {
            dropblock_mask(&shape, 3, 1.0 - keep, &mut r).unwrap()
        } else {
            dropout_mask(&shape, 1.0 - keep, &mut r).unwrap()
        };
        sum += skip_logit_gradient(&x, &w, Some(&m));
    }
    sum / n as f64 / full
}

fn skip_gradient_attenuation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (block, tol) in [(false, 0.05), (true, 0.10)] {
        for keep in [0.7, 0.9] {
            let ratio = attenuation_ratio(block, keep, 15 + block as u64);
            let rel = (ratio / keep - 1.0).abs();
            ok &= rel < tol;
            parts.push(format!(
                "{} p={keep}: mean/unmasked {ratio:.4}, rel err {rel:.4} (< {tol})",
                if block { "block" } else { "element" }
            ));
        }
    }
    (ok, parts.join("; "))
}

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        num_cells: 3,
        init_channels: 2,
        num_classes: 3,
        in_channels: 2,
        stem_multiplier: 1,
    }
}

fn distillation_identities() -> Outcome {
    let mut r = rng(16);
    let tape = Tape::new();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = r.gen_range(2..12);
        let raw: Vec<f64> = (0..c).map(|_| r.gen_range(0.01..1.0f64).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let entropy = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let t = Tensor::new(vec![1, c], p).unwrap();
        let d = distill_loss(&tape, &t, &tape.constant(t.clone()), 1.0).unwrap().value().item();
        worst = worst.max((d - entropy).abs());
    }

    // operations only the teacher mixture uses receive no gradient, and the
    // teacher forward leaves the tape untouched
    let net = Network::<f64>::new(tiny_spec(), &mut rng(17)).unwrap();
    let alpha = ArchParams::zeros();
    let masks = SubGraphMasks::sample(&alpha, 1, 1.0, &mut rng(18)).unwrap();
    let tape = Tape::new();
    let bound = net.params().bind(&tape, true);
    let x = tape.constant(Tensor::from_fn(&[2, 2, 8, 8], |i| ((i * 31) % 17) as f64 * 0.1 - 0.8));
    let before = tape.len();
    let p_super = supernet_teacher_forward(&tape, &net, &bound, &x, &alpha, 5.0).unwrap();
    let tape_grew = tape.len() != before;
    let logits = subgraph_forward(&tape, &net, &bound, &x, &masks, 0, None, &mut NoMask).unwrap();
    let p_sub = tape.softmax(&logits, 1).unwrap();
    let loss = distill_loss(&tape, &p_super, &p_sub, 0.5).unwrap();
    tape.backward(&loss).unwrap();
    let mut leaked = 0;
    for (v, p) in bound.vars().iter().zip(net.params().params()) {
        if let ParamGroup::EdgeOp { cell, edge, op } = p.group {
            let used = masks.draws(net.cells()[cell].cell_type()).index(edge, 0) == op;
            if !used && v.grad().is_some() {
                leaked += 1;
            }
        }
    }

    let cfg = DistillConfig::default();
    let (l0, l1) = (lambda_schedule(0.0, &cfg), lambda_schedule(1.0, &cfg));
    (
        worst < 1e-6 && leaked == 0 && !tape_grew && l0 == 0.0 && l1 == 0.01,
        format!(
            "max |distill(p,p,1) - H(p)| {worst:.2e} over 100; teacher-only params with gradient {leaked}; \
             teacher recorded on tape: {tape_grew}; lambda(0) {l0}, lambda(1) {l1}"
        ),
    )
}

fn phase_separation() -> Outcome {
    let hyper = SearchHyper {
        k: 2,
        epochs: 1,
        batch_size: 4,
        seed: 19,
        dropblock: DropBlockConfig::disabled(),
        distill: DistillConfig { lambda_final: 0.0 },
        ..SearchHyper::default()
    };
    let mut r = rng(20);
    let mut batch = || {
        let images = Tensor::from_fn(&[4, 2, 8, 8], |_| r.gen_range(-1.0..1.0));
        Batch::new(images, vec![0, 1, 2, 0]).unwrap()
    };
    let (train, val) = (batch(), batch());
    let mut state = SearchState::<f64>::new(tiny_spec(), hyper, 1).unwrap();
    let sched = state.schedules();
    let weights = |s: &SearchState<f64>| -> Vec<Tensor<f64>> {
        s.net.params().params().iter().map(|p| p.value.clone()).collect()
    };
    let (alpha0, w0) = (state.alpha.clone(), weights(&state));
    let (report, _) = weight_phase(&mut state, &train, &sched).unwrap();
    let alpha_fixed = state.alpha == alpha0;
    let w1 = weights(&state);

    let mut mismatched = Vec::new();
    let (mut shared, mut paths) = (0, 0);
    for (p, old) in state.net.params().params().iter().zip(&w0) {
        let changed = p.value != *old;
        let expected = match p.group {
            ParamGroup::Shared => {
                shared += changed as usize;
                true
            }
            ParamGroup::EdgeOp { cell, edge, op } => {
                let d = report.masks.draws(state.net.cells()[cell].cell_type());
                let used = (0..2).any(|k| d.index(edge, k) == op);
                paths += (used && changed) as usize;
                used
            }
            ParamGroup::Arch => false,
        };
        if changed != expected {
            mismatched.push(p.name.clone());
        }
    }
    let stem_head = ["stem", "classifier.w", "classifier.b"].iter().all(|name| {
        let i = state.net.params().params().iter().position(|p| p.name == *name).unwrap();
        state.net.params().params()[i].value != w0[i]
    });

    arch_phase(&mut state, &val, &sched).unwrap();
    let w_fixed = weights(&state) == w1;
    let alpha_moved = state.alpha != alpha0;
    (
        alpha_fixed && w_fixed && alpha_moved && mismatched.is_empty() && stem_head,
        format!(
            "alpha unchanged in weight phase: {alpha_fixed}; weights unchanged in arch phase: {w_fixed}; \
             changed = sampled paths ({paths} tensors) + shared ({shared} tensors, stem/head moved: {stem_head}); \
             mismatches {mismatched:?}"
        ),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut sink = Vec::new();
    let argv: Vec<&str> = std::iter::once("msgdas").chain(args.iter().copied()).collect();
    cli_main_with(argv, &mut sink)
}

/// CSV text with the wall-clock column removed.
fn metrics_without_seconds(dir: &Path) -> String {
    read_metrics(&dir.join(METRICS_FILE))
        .unwrap()
        .into_iter()
        .map(|mut m| {
            m.seconds = 0.0;
            format!("{m:?}\n")
        })
        .collect()
}

fn desk_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    let mut minutes = Vec::new();
    for d in &dirs {
        let start = Instant::now();
        let args = ["search", "--dataset", "synthetic", "--k", "2", "--epochs", "30", "--seed", "0", "--out"];
        let mut argv: Vec<&str> = args.to_vec();
        argv.push(d.to_str().unwrap());
        let code = run_cli(&argv);
        if code != 0 {
            return (false, format!("search exited with {code}"));
        }
        minutes.push(start.elapsed().as_secs_f64() / 60.0);
    }
    let g = match read_genotype(&dirs[0].join(GENOTYPE_FILE)) {
        Ok(g) => g,
        Err(e) => return (false, format!("genotype rejected: {e}")),
    };
    let no_zero = CellType::BOTH
        .iter()
        .all(|&c| g.cell(c).iter().all(|(_, op)| *op != OpKind::Zero));
    let two_preds = CellType::BOTH.iter().all(|&c| {
        g.cell(c).len() == 2 * NUM_INTERMEDIATE_NODES
            && g.cell(c).chunks(2).enumerate().all(|(j, pair)| {
                pair[0].0 < pair[1].0 && pair[1].0 < j + 2
            })
    });
    let deterministic = metrics_without_seconds(&dirs[0]) == metrics_without_seconds(&dirs[1])
        && std::fs::read(dirs[0].join(GENOTYPE_FILE)).unwrap() == std::fs::read(dirs[1].join(GENOTYPE_FILE)).unwrap();
    let acc = evaluate(&SearchConfig::desk(), &g).unwrap().val_acc;
    let fast = minutes.iter().all(|&m| m < 15.0);
    (
        fast && no_zero && two_preds && deterministic && acc >= 0.8,
        format!(
            "search {:.2} / {:.2} min (< 15); no Zero: {no_zero}; 2 predecessors per node: {two_preds}; \
             same-seed runs identical: {deterministic}; derived network val acc {acc:.4} (>= 0.80)",
            minutes[0], minutes[1]
        ),
    )
}

fn k_cost_monotone() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut per_epoch = Vec::new();
    for k in [1, 2, 4] {
        let mut cfg = SearchConfig::desk();
        cfg.search.k = k;
        cfg.search.epochs = 2;
        let out = tmp.path().join(format!("k{k}"));
        search_to_dir(&cfg, &out, OutputMode::Fresh, |_| {}).unwrap();
        let m = read_metrics(&out.join(METRICS_FILE)).unwrap();
        per_epoch.push(m.iter().map(|m| m.seconds).sum::<f64>() / m.len() as f64);
    }
    (
        per_epoch[0] < per_epoch[1] && per_epoch[1] < per_epoch[2],
        format!(
            "seconds per epoch K=1 {:.2}, K=2 {:.2}, K=4 {:.2} (batch 64, seed 0)",
            per_epoch[0], per_epoch[1], per_epoch[2]
        ),
    )
}

fn schedule_endpoints() -> Outcome {
    let h = SearchHyper::default();
    let total = 1000;
    let (s0, s1) = (Schedules::at(&h, 0, total), Schedules::at(&h, total, total));
    (
        s0.tau == 10.0 && s1.tau == 1.0 && s0.lr == 0.025 && s1.lr == 0.0 && s0.drop_prob == 0.0,
        format!(
            "tau(0) {} tau(1) {} lr(0) {} lr(end) {} drop_prob(0) {}",
            s0.tau, s1.tau, s0.lr, s1.lr, s0.drop_prob
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("sampler exclusivity", sampler_exclusivity),
        ("Plackett-Luce equivalence", plackett_luce),
        ("Gumbel top-K equals sorted top-K", gumbel_topk),
        ("gradient integrity", gradient_integrity),
        ("skip gradient attenuation under masks", skip_gradient_attenuation),
        ("distillation identities", distillation_identities),
        ("phase separation and coverage", phase_separation),
        ("desk end-to-end search", desk_end_to_end),
        ("K-cost monotonicity", k_cost_monotone),
        ("schedule endpoints", schedule_endpoints),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (passed, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        let line = format!(
            "acceptance {:>2} {} {name}: {detail}\n",
            i + 1,
            if passed { "PASS" } else { "FAIL" }
        );
        // written past the test harness capture so every line shows
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
