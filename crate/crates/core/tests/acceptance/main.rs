//! Acceptance suite: one test per acceptance criterion, each printing a
//! PASS/FAIL line. Run with `cargo test -p divclust-core --test acceptance
//! -- --nocapture` to see the lines.
//!
//! The reduced-scale image-clustering criteria (5 and 9) run on the real
//! MNIST IDX files when they are available (set `MNIST_DIR`, or place the
//! files under `data/mnist/`); otherwise they fall back to a procedurally
//! generated three-class digit corpus routed through the same IDX loader
//! and protocol, and say so in their output.

mod fdcheck;

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use divclust_core::autodiff::Tape;
use divclust_core::data::{load_idx, make_circle_ring, kmeans, Dataset};
use divclust_core::kernel::{gaussian_kernel, gaussian_kernel_node, pairwise_sq_dist, sigma_rule};
use divclust_core::loss::{corner_transform, cs_term, clustering_loss, TermFlags, DENOM_EPSILON};
use divclust_core::metrics::{acc, hungarian, nmi};
use divclust_core::network::{build_conv_arch, build_mlp_arch, Mode};
use divclust_core::tensor::Tensor;
use divclust_core::trainer::{
    ablation_grid, run_ablation, train_multi, train_once, vote_ensemble, ArchKind, RunResult,
    TrainConfig,
};

/// Serializes the compute-heavy criteria so their wall-clock assertions are
/// not distorted by the test harness running them concurrently.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(n: usize, detail: String) {
    println!("criterion {}: PASS - {}", n, detail);
}

fn fail(n: usize, detail: String) -> ! {
    println!("criterion {}: FAIL - {}", n, detail);
    panic!("criterion {} failed: {}", n, detail);
}

fn check(n: usize, ok: bool, detail: String) {
    if !ok {
        fail(n, detail);
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness for both architectures
// ---------------------------------------------------------------------------

fn gradcheck_max_error(
    net: &mut divclust_core::network::Network<f64>,
    batch: Tensor<f64>,
    step: f64,
) -> f64 {
    net.set_mode(Mode::Train);
    let flat = net.param_vector();

    // Analytic gradient of the full loss through the tape.
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, &batch).unwrap();
    let dists = tape.pairwise_sq_dist(pass.hidden);
    let sigma = sigma_rule(tape.value(dists));
    let kernel = gaussian_kernel_node(&mut tape, dists, sigma);
    let loss = clustering_loss(&mut tape, kernel, pass.assignments, TermFlags::all()).unwrap();
    tape.backward(loss.total);
    let mut analytic: Vec<f64> = Vec::with_capacity(flat.len());
    for &id in &pass.params {
        let g = tape.grad(id).expect("every parameter receives a gradient");
        analytic.extend_from_slice(g.data());
    }
    let tape_loss = tape.value(loss.total).scalar_value();

    // Independent evaluator, checked for consistency before it judges.
    let model = fdcheck::FdModel::new(net, batch);
    let base = model.full_forward(&flat);
    assert!(
        (base.loss - tape_loss).abs() <= 1e-9 * tape_loss.abs().max(1.0),
        "evaluator and tape disagree at the base point: {} vs {}",
        base.loss,
        tape_loss
    );
    let probe: Vec<usize> = (0..60)
        .map(|i| (i * 2_654_435_761usize) % model.total_params())
        .collect();
    model.verify_against_full(&base, &flat, &probe, step);

    (0..flat.len())
        .into_par_iter()
        .map(|i| {
            let plus = model.perturbed_loss(&base, &flat, i, step);
            let minus = model.perturbed_loss(&base, &flat, i, -step);
            let central = (plus - minus) / (2.0 * step);
            (analytic[i] - central).abs() / analytic[i].abs().max(1.0)
        })
        .reduce(|| 0.0, f64::max)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _guard = heavy_guard();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240);

    let mut mlp = build_mlp_arch::<f64>(10, 3).unwrap();
    mlp.init_he(31);
    let batch = Tensor::from_vec(
        &[8, 10],
        (0..80).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let mlp_err = gradcheck_max_error(&mut mlp, batch, 1e-6);
    check(1, mlp_err < 1e-4, format!("mlp max relative error {} >= 1e-4", mlp_err));

    let mut conv = build_conv_arch::<f64>(1, 16, 16, 3).unwrap();
    conv.init_he(32);
    let batch = Tensor::from_vec(
        &[8, 1, 16, 16],
        (0..8 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
    );
    let conv_err = gradcheck_max_error(&mut conv, batch, 1e-6);
    check(1, conv_err < 1e-4, format!("conv max relative error {} >= 1e-4", conv_err));

    let elapsed = start.elapsed().as_secs_f64();
    check(1, elapsed < 30.0, format!("gradient check took {:.1}s >= 30s", elapsed));
    pass(
        1,
        format!(
            "full-loss gradients match central differences (mlp {:.2e}, conv {:.2e}, {:.1}s)",
            mlp_err, conv_err, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Hungarian solver vs exhaustive search
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..200 {
        let n = rng.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(0..1000) as f64).collect())
            .collect();
        let got = hungarian(&cost).unwrap();
        let want = oracles::brute_force_min_cost(&cost);
        check(
            2,
            got.total_cost == want,
            format!("trial {}: solver cost {} vs exhaustive {}", trial, got.total_cost, want),
        );
    }
    pass(2, "200 random cost matrices up to 6x6 match the exhaustive minimum exactly".into());
}

// ---------------------------------------------------------------------------
// 3. CS term vs naive triple loop
// ---------------------------------------------------------------------------

fn random_kernel_assignment(
    rng: &mut ChaCha8Rng,
    m: usize,
    k: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let h: Vec<f64> = (0..m * 5).map(|_| rng.random_range(-1.5..1.5)).collect();
    let h = Tensor::from_vec(&[m, 5], h);
    let d = pairwise_sq_dist(&h);
    let kernel = gaussian_kernel(&d, sigma_rule(&d)).unwrap().values;
    let mut a = Tensor::zeros(&[m, k]);
    for q in 0..m {
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (i, e) in exps.into_iter().enumerate() {
            a.set2(q, i, e / sum);
        }
    }
    (kernel, a)
}

#[test]
fn criterion_3_cs_term_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let m = rng.random_range(2..=10);
        let k = rng.random_range(2..=4);
        let (kernel, a) = random_kernel_assignment(&mut rng, m, k);
        let mut tape = Tape::new();
        let kn = tape.constant(kernel.clone());
        let an = tape.constant(a.clone());
        let node = cs_term(&mut tape, kn, an);
        let got = tape.value(node).scalar_value();
        let want = oracles::cs_triple_loop(&kernel, &a, DENOM_EPSILON);
        let rel = (got - want).abs() / want.abs().max(1e-300);
        check(
            3,
            rel < 1e-10,
            format!("trial {} (m={}, k={}): relative error {}", trial, m, k, rel),
        );
    }
    pass(3, "50 random (K, A) pairs match the naive triple-loop evaluation within 1e-10".into());
}

// ---------------------------------------------------------------------------
// 4. Synthetic nonlinearity: circle + ring
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_circle_ring_beats_kmeans() {
    let _guard = heavy_guard();
    let start = Instant::now();
    let data: Dataset<f32> = make_circle_ring(500, 1.0, 4.0, 0.15, 40).unwrap();
    let labels = data.labels.clone().unwrap();

    let mut cfg = TrainConfig::new(ArchKind::Mlp, 2);
    cfg.learning_rate = 1e-3;
    cfg.iterations = 1000;
    cfg.runs = 5;
    cfg.seed = 7;
    cfg.parallel_runs = 2;
    let outcome = train_multi(&data, &cfg).unwrap();
    let best_acc4 = acc(&labels, &outcome.best_run().assignments).unwrap();

    let km = kmeans(&data, 2, 5, 11).unwrap();
    let km_acc = acc(&labels, &km).unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    check(4, best_acc4 >= 0.90, format!("best-of-5 accuracy {:.4} < 0.90", best_acc4));
    check(
        4,
        best_acc4 > km_acc,
        format!("accuracy {:.4} does not exceed k-means {:.4}", best_acc4, km_acc),
    );
    check(4, elapsed < 300.0, format!("took {:.1}s >= 5 min", elapsed));
    pass(
        4,
        format!(
            "circle+ring best-of-5 accuracy {:.4} vs k-means {:.4} ({:.0}s)",
            best_acc4, km_acc, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 5 and 9. Reduced-scale image clustering and the vote ensemble
// ---------------------------------------------------------------------------

fn mnist_paths() -> Option<(PathBuf, PathBuf)> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Ok(dir) = std::env::var("MNIST_DIR") {
        candidates.push(PathBuf::from(dir));
    }
    candidates.push(PathBuf::from("data/mnist"));
    candidates.push(PathBuf::from("../../data/mnist"));
    for dir in candidates {
        let images = dir.join("train-images-idx3-ubyte");
        let labels = dir.join("train-labels-idx1-ubyte");
        if images.is_file() && labels.is_file() {
            return Some((images, labels));
        }
    }
    None
}

#[test]
fn criterion_5_and_9_reduced_scale_digits() {
    let _guard = heavy_guard();
    let start = Instant::now();

    let tmp = tempfile::tempdir().unwrap();
    let (images, labels_path, corpus) = match mnist_paths() {
        Some((images, labels)) => (images, labels, "MNIST"),
        None => {
            let (images, labels) = synthdigits::write_digit_idx(tmp.path(), 1100, 90);
            println!(
                "criterion 5: note - MNIST IDX files not found (set MNIST_DIR); \
                 running the same protocol on procedurally generated digits"
            );
            (images, labels, "synthetic digits")
        }
    };

    let data: Dataset<f32> = load_idx(&images, &labels_path, Some(&[0, 1, 2]), Some(1000), 17).unwrap();
    assert_eq!(data.len(), 3000);
    let labels = data.labels.clone().unwrap();

    let mut cfg = TrainConfig::new(ArchKind::Mlp, 3);
    cfg.learning_rate = 1e-4;
    cfg.iterations = 1500;
    cfg.runs = 5;
    cfg.seed = 23;
    cfg.parallel_runs = 2;
    let outcome = train_multi(&data, &cfg).unwrap();
    let best_acc = acc(&labels, &outcome.best_run().assignments).unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    check(
        5,
        best_acc >= 0.80,
        format!("[{}] best-of-5 accuracy {:.4} < 0.80", corpus, best_acc),
    );
    check(5, elapsed < 900.0, format!("took {:.1}s >= 15 min", elapsed));
    pass(
        5,
        format!(
            "[{}] 3 classes x 1000 images, best-of-5 accuracy {:.4} ({:.0}s)",
            corpus, best_acc, elapsed
        ),
    );

    // The trained kernel matrix shows class block structure: the mean
    // within-class entry exceeds the mean between-class entry on a sample.
    {
        let best = outcome.best_run();
        let indices: Vec<usize> = (0..300).map(|i| i * 10).collect();
        let batch = data.gather_flat(&indices);
        let mut tape = Tape::new();
        let pass = best.network.forward_inference(&mut tape, &batch).unwrap();
        let hidden = tape.value(pass.hidden).clone();
        let dists = pairwise_sq_dist(&hidden);
        let kernel = gaussian_kernel(&dists, sigma_rule(&dists)).unwrap();
        let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..indices.len() {
            for j in (i + 1)..indices.len() {
                let v = kernel.values.get2(i, j) as f64;
                if labels[indices[i]] == labels[indices[j]] {
                    within = (within.0 + v, within.1 + 1);
                } else {
                    between = (between.0 + v, between.1 + 1);
                }
            }
        }
        let within = within.0 / within.1 as f64;
        let between = between.0 / between.1 as f64;
        check(
            5,
            within > between,
            format!(
                "[{}] trained kernel lacks block structure: within {:.4} vs between {:.4}",
                corpus, within, between
            ),
        );
        println!(
            "criterion 5: note - trained kernel block structure: mean within-class {:.4}, between-class {:.4}",
            within, between
        );
    }

    // Criterion 9, directional part: the vote does not fall more than two
    // points below the selected run.
    let vote = outcome.vote(3).unwrap();
    let vote_acc = acc(&labels, &vote).unwrap();
    check(
        9,
        vote_acc >= best_acc - 0.02,
        format!("[{}] vote accuracy {:.4} < best {:.4} - 0.02", corpus, vote_acc, best_acc),
    );
    pass(
        9,
        format!("[{}] vote accuracy {:.4} vs best {:.4}", corpus, vote_acc, best_acc),
    );
}

// ---------------------------------------------------------------------------
// 6. Metric properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_metric_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let n = rng.random_range(5..60);
        let k = rng.random_range(2..=5usize);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let clusters: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

        // Identity.
        check(6, nmi(&labels, &labels).unwrap() == 1.0, format!("trial {}: nmi identity", trial));
        check(6, acc(&labels, &labels).unwrap() == 1.0, format!("trial {}: acc identity", trial));

        // Relabeling invariance on both arguments.
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabeled: Vec<usize> = clusters.iter().map(|&c| perm[c]).collect();
        let (n1, n2) = (nmi(&labels, &clusters).unwrap(), nmi(&labels, &relabeled).unwrap());
        check(6, (n1 - n2).abs() < 1e-12, format!("trial {}: nmi relabel {} vs {}", trial, n1, n2));
        let (a1, a2) = (acc(&labels, &clusters).unwrap(), acc(&labels, &relabeled).unwrap());
        check(6, (a1 - a2).abs() < 1e-12, format!("trial {}: acc relabel {} vs {}", trial, a1, a2));
        let relabeled_l: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
        let n3 = nmi(&relabeled_l, &clusters).unwrap();
        let a3 = acc(&relabeled_l, &clusters).unwrap();
        check(6, (n1 - n3).abs() < 1e-12, format!("trial {}: nmi left relabel", trial));
        check(6, (a1 - a3).abs() < 1e-12, format!("trial {}: acc left relabel", trial));

        // Hungarian-based accuracy equals exhaustive matching.
        let brute = oracles::brute_force_acc(&labels, &clusters);
        check(
            6,
            (a1 - brute).abs() < 1e-12,
            format!("trial {}: acc {} vs brute force {}", trial, a1, brute),
        );
    }
    pass(6, "identity, relabeling invariance, and brute-force agreement over 100 random partitions".into());
}

// ---------------------------------------------------------------------------
// 7. Loss invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_loss_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let m = rng.random_range(3..=10);
        let k = rng.random_range(2..=4);
        let (kernel, a) = random_kernel_assignment(&mut rng, m, k);

        // Pairwise CS ratios for both the raw assignments and the
        // corner-transformed scores stay in [0, 1].
        let ratios = |cols: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            let quad = |i: usize, j: usize| {
                let mut s = 0.0;
                for q in 0..m {
                    for l in 0..m {
                        s += cols(q, i) * kernel.get2(q, l) * cols(l, j);
                    }
                }
                s
            };
            let mut out = Vec::new();
            for i in 0..k {
                for j in (i + 1)..k {
                    out.push(quad(i, j) / (quad(i, i) * quad(j, j) + DENOM_EPSILON).sqrt());
                }
            }
            out
        };
        for r in ratios(&|q, i| a.get2(q, i)) {
            check(7, (0.0..=1.0 + 1e-12).contains(&r), format!("trial {}: ratio {}", trial, r));
        }

        let mut tape = Tape::new();
        let an = tape.constant(a.clone());
        let mn = corner_transform(&mut tape, an);
        let m_vals = tape.value(mn).clone();
        for &v in m_vals.data() {
            check(
                7,
                v > 0.0 && v <= 1.0,
                format!("trial {}: corner score {} outside (0,1]", trial, v),
            );
        }
        for r in ratios(&|q, i| m_vals.get2(q, i)) {
            check(7, (0.0..=1.0 + 1e-12).contains(&r), format!("trial {}: corner ratio {}", trial, r));
        }

        // Full breakdown bounds and column-permutation invariance.
        let eval = |assign: Tensor<f64>| {
            let mut tape = Tape::new();
            let kn = tape.constant(kernel.clone());
            let an = tape.constant(assign);
            let nodes = clustering_loss(&mut tape, kn, an, TermFlags::all()).unwrap();
            nodes.breakdown(&tape)
        };
        let b = eval(a.clone());
        check(7, (0.0..=1.0 + 1e-12).contains(&b.l2), format!("trial {}: l2 {}", trial, b.l2));

        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut permuted = Tensor::zeros(&[m, k]);
        for q in 0..m {
            for (dst, &src) in perm.iter().enumerate() {
                permuted.set2(q, dst, a.get2(q, src));
            }
        }
        let bp = eval(permuted);
        for (x, y, name) in [(b.l1, bp.l1, "l1"), (b.l2, bp.l2, "l2"), (b.l3, bp.l3, "l3")] {
            check(
                7,
                (x - y).abs() <= 1e-10,
                format!("trial {}: {} changes under column permutation: {} vs {}", trial, name, x, y),
            );
        }
    }
    pass(7, "CS ratios in [0,1], l2 in [0,1], corner scores in (0,1], permutation invariance within 1e-10".into());
}

// ---------------------------------------------------------------------------
// 8. Kernel invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_kernel_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..50 {
        let m = rng.random_range(3..=20);
        let d = rng.random_range(2..=8);
        let h: Vec<f64> = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = Tensor::from_vec(&[m, d], h);
        let dists = pairwise_sq_dist(&h);
        let kernel = gaussian_kernel(&dists, sigma_rule(&dists)).unwrap();
        let report = kernel.report();
        check(
            8,
            report.max_asymmetry <= 1e-6,
            format!("trial {}: asymmetry {}", trial, report.max_asymmetry),
        );
        check(
            8,
            report.max_diag_deviation == 0.0,
            format!("trial {}: diagonal deviates by {}", trial, report.max_diag_deviation),
        );
        check(
            8,
            report.min_entry > 0.0 && report.max_entry <= 1.0,
            format!("trial {}: entries [{}, {}]", trial, report.min_entry, report.max_entry),
        );
        check(
            8,
            report.min_eigenvalue >= -1e-6 * report.max_eigenvalue,
            format!(
                "trial {}: min eigenvalue {} vs max {}",
                trial, report.min_eigenvalue, report.max_eigenvalue
            ),
        );
    }

    // Bandwidth fixtures with hand-computed medians.
    let fixture = |dists: &[f64]| -> Tensor<f64> {
        // Distances between consecutive points on a line reproduce an
        // arbitrary multiset only for specific layouts, so build the matrix
        // directly instead.
        let n = match dists.len() {
            1 => 2,
            3 => 3,
            6 => 4,
            other => panic!("unsupported fixture size {}", other),
        };
        let mut m = Tensor::zeros(&[n, n]);
        let mut it = dists.iter();
        for i in 0..n {
            for j in (i + 1)..n {
                let d = *it.next().unwrap();
                m.set2(i, j, d * d);
                m.set2(j, i, d * d);
            }
        }
        m
    };
    check(8, sigma_rule(&fixture(&[5.0])) == 0.15 * 5.0, "two points at distance 5".into());
    check(
        8,
        sigma_rule(&fixture(&[1.0, 2.0, 100.0])) == 0.15 * 2.0,
        "odd count takes the middle order statistic".into(),
    );
    check(
        8,
        sigma_rule(&fixture(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])) == 0.15 * 3.5,
        "even count averages the two central order statistics".into(),
    );
    pass(8, "50 random kernels satisfy the contract; bandwidth fixtures are exact".into());
}

// ---------------------------------------------------------------------------
// 9. Ensemble alignment exactness (the cheap half)
// ---------------------------------------------------------------------------

fn fake_run(run_index: usize, total: f64, assignments: Vec<usize>, k: usize) -> RunResult<f32> {
    RunResult {
        run_index,
        seed: run_index as u64,
        k,
        final_loss: divclust_core::loss::LossBreakdown { l1: total, l2: 0.0, l3: 0.0, total },
        assignments,
        network: build_mlp_arch::<f32>(2, k).unwrap(),
        trace: Vec::new(),
        failed: None,
    }
}

#[test]
fn criterion_9_vote_alignment_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..25 {
        let n = rng.random_range(10..60);
        let k = rng.random_range(2..=5usize);
        let reference: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut runs = vec![fake_run(0, 0.1, reference.clone(), k)];
        for r in 1..3 {
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<usize> = reference.iter().map(|&c| perm[c]).collect();
            runs.push(fake_run(r, 0.1 + r as f64 * 0.1, permuted, k));
        }
        let vote = vote_ensemble(&runs, 3).unwrap();
        check(
            9,
            vote == reference,
            format!("trial {}: vote over permuted labelings differs from the reference", trial),
        );
    }
    pass(9, "three labelings identical up to permutation vote back to the reference exactly".into());
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_training_is_bitwise_deterministic() {
    let data: Dataset<f32> = make_circle_ring(40, 1.0, 4.0, 0.15, 10).unwrap();
    let mut cfg = TrainConfig::new(ArchKind::Mlp, 2);
    cfg.batch_size = 20;
    cfg.iterations = 60;
    cfg.learning_rate = 1e-3;
    let a = train_once(&data, &cfg, 77).unwrap();
    let b = train_once(&data, &cfg, 77).unwrap();
    let bits = |r: &RunResult<f32>| -> Vec<(u64, u64, u64, u64, u64)> {
        r.trace
            .iter()
            .map(|rec| {
                (
                    rec.l1.to_bits(),
                    rec.l2.to_bits(),
                    rec.l3.to_bits(),
                    rec.total.to_bits(),
                    rec.sigma.to_bits(),
                )
            })
            .collect()
    };
    check(10, bits(&a) == bits(&b), "loss traces differ between identical invocations".into());
    check(10, a.assignments == b.assignments, "final assignments differ".into());
    check(
        10,
        a.network.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            == b.network.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        "final parameters differ".into(),
    );
    pass(10, "identical seed gives bitwise-identical traces, parameters, and assignments".into());
}

// ---------------------------------------------------------------------------
// 11. Ablation harness
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_ablation_harness() {
    let _guard = heavy_guard();
    let data: Dataset<f32> = make_circle_ring(60, 1.0, 4.0, 0.15, 11).unwrap();
    let mut cfg = TrainConfig::new(ArchKind::Mlp, 2);
    cfg.batch_size = 20;
    cfg.iterations = 120;
    cfg.learning_rate = 1e-3;
    cfg.runs = 2;
    let rows = run_ablation(&data, &cfg, 2).unwrap();

    check(11, rows.len() == 7, format!("expected 7 rows, got {}", rows.len()));
    let labels: Vec<String> = rows.iter().map(|r| r.terms.label()).collect();
    check(
        11,
        labels == ["l1", "l2", "l3", "l1+l2", "l1+l3", "l2+l3", "l1+l2+l3"],
        format!("unexpected subset order {:?}", labels),
    );
    for row in &rows {
        check(11, row.accuracies.len() == 2, "each subset runs `repeats` times".into());
        check(11, row.std >= 0.0 && row.max >= row.mean - 1e-12, "summary statistics are consistent".into());
    }
    check(11, ablation_grid().len() == 7, "grid enumerates the 7 non-empty subsets".into());

    // Disabled terms log exact zeros.
    let mut solo = cfg.clone();
    solo.terms = TermFlags { l1: false, l2: true, l3: false };
    solo.iterations = 30;
    let run = train_once(&data, &solo, 5).unwrap();
    for rec in &run.trace {
        check(
            11,
            rec.l1 == 0.0 && rec.l3 == 0.0 && rec.total == rec.l2,
            format!("disabled terms must be exact zeros, got l1={} l3={}", rec.l1, rec.l3),
        );
    }

    // A single repeat reports zero spread.
    let one = run_ablation(&data, &cfg, 1).unwrap();
    check(11, one.iter().all(|r| r.std == 0.0), "repeats=1 must report std 0".into());

    pass(11, "7 subset rows with mean/std/max accuracy; disabled terms log exact zeros".into());
}

// Writes the fallback corpus to a fixed location for manual inspection and
// CLI experiments; not part of the acceptance run.
#[test]
#[ignore]
fn dump_surrogate_digits() {
    let dir = PathBuf::from("/tmp/digits");
    std::fs::create_dir_all(&dir).unwrap();
    let (images, labels) = synthdigits::write_digit_idx(&dir, 1100, 90);
    println!("wrote {} and {}", images.display(), labels.display());
}
