//! The training loop: mini-batch gradient descent with Adam on the
//! three-term loss, multi-run selection by lowest unsupervised loss, the
//! majority-vote ensemble over the top runs, and the term-ablation harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel_node, sigma_rule};
use crate::loss::{clustering_loss, LossBreakdown, TermFlags};
use crate::metrics::hungarian;
use crate::network::{build_conv_arch, build_mlp_arch, Mode, Network};
use crate::scalar::{cast, dbl, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    Conv,
    Mlp,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchKind::Conv => f.write_str("conv"),
            ArchKind::Mlp => f.write_str("mlp"),
        }
    }
}

/// Training configuration. `new` applies desk-scale defaults (3000
/// iterations, 5 runs) so experiments finish in minutes; `paper_scale`
/// restores the reference protocol (70000 iterations, 20 runs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchKind,
    pub k: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub runs: usize,
    pub vote_top: usize,
    pub terms: TermFlags,
    pub parallel_runs: usize,
}

impl TrainConfig {
    pub fn new(arch: ArchKind, k: usize) -> Self {
        TrainConfig {
            arch,
            k,
            batch_size: 100,
            learning_rate: Self::default_learning_rate(arch),
            iterations: 3000,
            seed: 0,
            runs: 5,
            vote_top: 3,
            terms: TermFlags::all(),
            parallel_runs: 1,
        }
    }

    pub fn default_learning_rate(arch: ArchKind) -> f64 {
        match arch {
            ArchKind::Conv => 1e-3,
            ArchKind::Mlp => 1e-5,
        }
    }

    pub fn paper_scale(mut self) -> Self {
        self.iterations = 70_000;
        self.runs = 20;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("need at least one iteration".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("need at least one run".into()));
        }
        if self.vote_top == 0 {
            return Err(Error::Config("vote_top must be at least 1".into()));
        }
        if self.parallel_runs == 0 {
            return Err(Error::Config("parallel_runs must be at least 1".into()));
        }
        if self.terms.none_enabled() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with the conventional constants.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_network(net: &Network<T>) -> Self {
        let shapes: Vec<Vec<usize>> = net.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. `grads[i] = None` is treated as a zero
    /// gradient for that parameter.
    pub fn step(&mut self, params: &mut [(String, Tensor<T>)], grads: &[Option<&Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), self.first_moment.len(), "adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "adam: gradient count mismatch");
        self.step += 1;
        let b1 = cast::<T>(ADAM_BETA1);
        let b2 = cast::<T>(ADAM_BETA2);
        let eps = cast::<T>(ADAM_EPSILON);
        let lr_t = cast::<T>(lr);
        let corr1 = T::one() - cast::<T>(ADAM_BETA1.powi(self.step as i32));
        let corr2 = T::one() - cast::<T>(ADAM_BETA2.powi(self.step as i32));
        for (i, (_, param)) in params.iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            debug_assert_eq!(m.shape(), param.shape());
            match grads[i] {
                Some(g) => {
                    assert_eq!(g.shape(), param.shape(), "adam: gradient shape mismatch");
                    for ((pm, pv), (&gv, p)) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut())
                        .zip(g.data().iter().zip(param.data_mut()))
                    {
                        *pm = b1 * *pm + (T::one() - b1) * gv;
                        *pv = b2 * *pv + (T::one() - b2) * gv * gv;
                        let m_hat = *pm / corr1;
                        let v_hat = *pv / corr2;
                        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                None => {
                    for ((pm, pv), p) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut())
                        .zip(param.data_mut())
                    {
                        *pm *= b1;
                        *pv *= b2;
                        let m_hat = *pm / corr1;
                        let v_hat = *pv / corr2;
                        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Epoch-shuffling mini-batch scheduler. Every epoch reshuffles the point
/// order; full batches are emitted in order and a trailing short batch is
/// dropped, so kernel and loss statistics always see the same batch size.
pub struct BatchScheduler {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchScheduler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size <= n, "batch size {} exceeds dataset size {}", batch_size, n);
        let mut s = BatchScheduler {
            n,
            batch_size,
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.batches_per_epoch() * self.batch_size {
            self.reshuffle();
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..start + self.batch_size]
    }
}

/// One metrics record per iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub sigma: f64,
}

/// Outcome of a single training run.
#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub run_index: usize,
    pub seed: u64,
    pub k: usize,
    /// Loss breakdown averaged over the final epoch's iterations.
    pub final_loss: LossBreakdown,
    /// Crisp label per data point (argmax of the inference-mode softmax).
    pub assignments: Vec<usize>,
    /// The trained parameters.
    pub network: Network<T>,
    pub trace: Vec<IterRecord>,
    /// Diagnostic when the run aborted on a non-finite loss; failed runs are
    /// never selected.
    pub failed: Option<String>,
}

impl<T: Scalar> RunResult<T> {
    pub fn is_ok(&self) -> bool {
        self.failed.is_none()
    }
}

fn build_network<T: Scalar>(data: &Dataset<T>, cfg: &TrainConfig) -> Result<Network<T>> {
    match cfg.arch {
        ArchKind::Mlp => build_mlp_arch(data.item_len(), cfg.k),
        ArchKind::Conv => {
            let shape = data.item_shape();
            if shape.len() != 3 {
                return Err(Error::Data(format!(
                    "conv architecture requires [c,h,w] items, got {:?}",
                    shape
                )));
            }
            build_conv_arch(shape[0], shape[1], shape[2], cfg.k)
        }
    }
}

fn batch_for<T: Scalar>(data: &Dataset<T>, cfg: &TrainConfig, indices: &[usize]) -> Tensor<T> {
    match cfg.arch {
        ArchKind::Mlp => data.gather_flat(indices),
        ArchKind::Conv => data.gather(indices),
    }
}

/// Crisp labels over the whole dataset from an inference-mode forward pass,
/// chunked to bound memory. Argmax ties resolve to the lowest index.
pub fn crisp_assignments<T: Scalar>(net: &Network<T>, data: &Dataset<T>, arch: ArchKind) -> Result<Vec<usize>> {
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let chunk = 500usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = match arch {
            ArchKind::Mlp => data.gather_flat(&indices),
            ArchKind::Conv => data.gather(&indices),
        };
        let mut tape = Tape::new();
        let pass = net.forward_inference(&mut tape, &batch)?;
        let a = tape.value(pass.assignments);
        for i in 0..a.rows() {
            let row = a.row(i);
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            out.push(best);
        }
        start = end;
    }
    Ok(out)
}

/// One full training run: epoch-shuffled mini-batches, a forward pass per
/// iteration, the adaptive bandwidth and kernel over the hidden tap, the
/// three-term loss, and an Adam update. A non-finite loss aborts the run
/// with a diagnostic instead of an error.
pub fn train_once<T: Scalar>(data: &Dataset<T>, cfg: &TrainConfig, seed: u64) -> Result<RunResult<T>> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "dataset of {} points is smaller than batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }

    let mut net = build_network(data, cfg)?;
    net.init_he(seed);
    net.set_mode(Mode::Train);
    let mut adam = AdamState::for_network(&net);
    let mut scheduler = BatchScheduler::new(data.len(), cfg.batch_size, seed.wrapping_add(0x9e37_79b9));

    let mut trace: Vec<IterRecord> = Vec::with_capacity(cfg.iterations);
    let mut failed = None;

    for iter in 0..cfg.iterations {
        let indices: Vec<usize> = scheduler.next_batch().to_vec();
        let batch = batch_for(data, cfg, &indices);

        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &batch)?;
        let dists = tape.pairwise_sq_dist(pass.hidden);
        let sigma = sigma_rule(tape.value(dists));
        let kernel = gaussian_kernel_node(&mut tape, dists, sigma);
        let loss = clustering_loss(&mut tape, kernel, pass.assignments, cfg.terms)?;

        if let Err(e) = tape.finite_status(loss.total) {
            failed = Some(format!("iteration {}: {}", iter, e));
            break;
        }
        let breakdown = loss.breakdown(&tape);
        if !breakdown.total.is_finite() {
            failed = Some(format!("iteration {}: non-finite loss total", iter));
            break;
        }

        tape.backward(loss.total);
        let grads: Vec<Option<&Tensor<T>>> = pass.params.iter().map(|&id| tape.grad(id)).collect();
        adam.step(net.params_mut(), &grads, cfg.learning_rate);

        trace.push(IterRecord {
            iter,
            l1: breakdown.l1,
            l2: breakdown.l2,
            l3: breakdown.l3,
            total: breakdown.total,
            sigma: dbl(sigma),
        });
    }

    net.set_mode(Mode::Inference);

    if let Some(diagnostic) = failed {
        return Ok(RunResult {
            run_index: 0,
            seed,
            k: cfg.k,
            final_loss: LossBreakdown::nan(),
            assignments: Vec::new(),
            network: net,
            trace,
            failed: Some(diagnostic),
        });
    }

    // Average the breakdown over the last epoch's iterations.
    let window = scheduler.batches_per_epoch().min(trace.len()).max(1);
    let tail = &trace[trace.len() - window..];
    let mean = |f: fn(&IterRecord) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    let final_loss = LossBreakdown {
        l1: mean(|r| r.l1),
        l2: mean(|r| r.l2),
        l3: mean(|r| r.l3),
        total: mean(|r| r.total),
    };

    let assignments = crisp_assignments(&net, data, cfg.arch)?;

    Ok(RunResult {
        run_index: 0,
        seed,
        k: cfg.k,
        final_loss,
        assignments,
        network: net,
        trace,
        failed: None,
    })
}

/// All runs of a multi-run experiment plus the index of the selected one.
#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub runs: Vec<RunResult<T>>,
    pub best: usize,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn best_run(&self) -> &RunResult<T> {
        &self.runs[self.best]
    }

    /// Majority-vote labels over the top runs by unsupervised loss.
    pub fn vote(&self, top: usize) -> Result<Vec<usize>> {
        vote_ensemble(&self.runs, top)
    }
}

/// Execute `cfg.runs` independent runs (run i derives seed `cfg.seed + i`)
/// and select the one with the lowest final unsupervised loss. Failed runs
/// stay in the list but are never selected. Runs execute in parallel when
/// `cfg.parallel_runs > 1`; selection is independent of completion order.
pub fn train_multi<T: Scalar>(data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.runs).map(|i| cfg.seed.wrapping_add(i as u64)).collect();

    let mut runs: Vec<RunResult<T>> = if cfg.parallel_runs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel_runs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
        pool.install(|| {
            use rayon::prelude::*;
            seeds
                .par_iter()
                .map(|&s| train_once(data, cfg, s))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        let mut out = Vec::with_capacity(cfg.runs);
        for &s in &seeds {
            out.push(train_once(data, cfg, s)?);
        }
        out
    };
    for (i, run) in runs.iter_mut().enumerate() {
        run.run_index = i;
    }

    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_ok())
        .min_by(|(ia, a), (ib, b)| {
            a.final_loss
                .total
                .partial_cmp(&b.final_loss.total)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .ok_or(Error::AllRunsFailed)?;

    Ok(TrainOutcome { runs, best })
}

/// Majority vote over the `top` lowest-loss runs. The lowest-loss run is the
/// reference; every other run's labels are first remapped by the optimal
/// one-to-one matching that maximizes agreement with the reference. Vote
/// ties go to the reference run's label when it is among the tied labels,
/// otherwise to the smallest label.
pub fn vote_ensemble<T: Scalar>(runs: &[RunResult<T>], top: usize) -> Result<Vec<usize>> {
    let mut ok_runs: Vec<&RunResult<T>> = runs.iter().filter(|r| r.is_ok()).collect();
    if top == 0 || top > ok_runs.len() {
        return Err(Error::Config(format!(
            "vote needs 1..={} runs, asked for {}",
            ok_runs.len(),
            top
        )));
    }
    ok_runs.sort_by(|a, b| {
        a.final_loss
            .total
            .partial_cmp(&b.final_loss.total)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.run_index.cmp(&b.run_index))
    });
    let selected = &ok_runs[..top];
    let reference = selected[0];
    let n = reference.assignments.len();
    let k = reference.k;
    for run in selected.iter() {
        if run.assignments.len() != n {
            return Err(Error::LengthMismatch(run.assignments.len(), n));
        }
        if run.k != k {
            return Err(Error::Config(format!("runs disagree on k: {} vs {}", run.k, k)));
        }
    }

    // Align each run to the reference.
    let mut aligned: Vec<Vec<usize>> = Vec::with_capacity(top);
    aligned.push(reference.assignments.clone());
    for run in &selected[1..] {
        let mut contingency = vec![vec![0usize; k]; k];
        for (&a, &b) in reference.assignments.iter().zip(&run.assignments) {
            contingency[a][b] += 1;
        }
        // Minimize disagreement: cost[run_label][ref_label] = -count.
        let cost: Vec<Vec<f64>> = (0..k)
            .map(|b| (0..k).map(|a| -(contingency[a][b] as f64)).collect())
            .collect();
        let matching = hungarian(&cost)?;
        let remapped: Vec<usize> = run.assignments.iter().map(|&b| matching.row_to_col[b]).collect();
        aligned.push(remapped);
    }

    // Majority vote per point.
    let mut votes = vec![0usize; k];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        votes.iter_mut().for_each(|v| *v = 0);
        for labels in &aligned {
            votes[labels[i]] += 1;
        }
        let max = *votes.iter().max().unwrap();
        let ref_label = aligned[0][i];
        let label = if votes[ref_label] == max {
            ref_label
        } else {
            votes.iter().position(|&v| v == max).unwrap()
        };
        out.push(label);
    }
    Ok(out)
}

/// One row of the term-ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub terms: TermFlags,
    /// Best-run accuracy of each repeat.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// The seven non-empty term subsets, single terms first.
pub fn ablation_grid() -> Vec<TermFlags> {
    vec![
        TermFlags { l1: true, l2: false, l3: false },
        TermFlags { l1: false, l2: true, l3: false },
        TermFlags { l1: false, l2: false, l3: true },
        TermFlags { l1: true, l2: true, l3: false },
        TermFlags { l1: true, l2: false, l3: true },
        TermFlags { l1: false, l2: true, l3: true },
        TermFlags { l1: true, l2: true, l3: true },
    ]
}

/// Run every term subset `repeats` times (each repeat is a full multi-run
/// selection with a derived seed) and report mean, population standard
/// deviation, and max of the best-run accuracy.
pub fn run_ablation<T: Scalar>(
    data: &Dataset<T>,
    base: &TrainConfig,
    repeats: usize,
) -> Result<Vec<AblationRow>> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("ablation requires a labeled dataset".into()))?;
    if repeats == 0 {
        return Err(Error::Config("ablation needs at least one repeat".into()));
    }
    let mut rows = Vec::with_capacity(7);
    for terms in ablation_grid() {
        let mut accuracies = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let mut cfg = base.clone();
            cfg.terms = terms;
            cfg.seed = base.seed.wrapping_add(1_000_003u64.wrapping_mul(rep as u64));
            let outcome = train_multi(data, &cfg)?;
            let score = crate::metrics::acc(labels, &outcome.best_run().assignments)?;
            accuracies.push(score);
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let var =
            accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accuracies.len() as f64;
        let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(AblationRow { terms, accuracies, mean, std: var.sqrt(), max });
    }
    Ok(rows)
}
