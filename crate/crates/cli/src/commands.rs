//! The four subcommands: train, ablate, export-kernel, saliency.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use divclust_core::data::{kmeans, Dataset};
use divclust_core::kernel::{gaussian_kernel, pairwise_sq_dist, sigma_rule, write_pgm, KernelMatrix};
use divclust_core::loss::TermFlags;
use divclust_core::metrics::{acc, nmi};
use divclust_core::network::Network;
use divclust_core::tensor::Tensor;
use divclust_core::trainer::{run_ablation, train_multi, ArchKind, RunResult, TrainConfig};
use divclust_core::Tape32;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::cli::{AblateArgs, ExportKernelArgs, SaliencyArgs, TrainArgs};
use crate::config::{pick, pick_required, KvConfig};
use crate::datasets::{self, parse_class_list, seed_for, DataOptions, DataSpec};

fn parse_arch(s: &str) -> Result<ArchKind> {
    match s {
        "conv" => Ok(ArchKind::Conv),
        "mlp" => Ok(ArchKind::Mlp),
        other => bail!("unknown architecture '{}' (expected conv or mlp)", other),
    }
}

pub struct ResolvedRun {
    pub spec: DataSpec,
    pub opts: DataOptions,
    pub cfg: TrainConfig,
    pub kmeans_baseline: bool,
    /// Fully materialized key=value view, written next to the outputs.
    pub kv: KvConfig,
}

/// Layer defaults, config file, and explicit flags into one concrete
/// configuration, and materialize it for provenance.
pub fn resolve_train(args: &TrainArgs) -> Result<ResolvedRun> {
    let file = match &args.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };

    let spec_str: String = pick_required(args.data.data.clone(), &file, "data")?;
    let spec = DataSpec::parse(&spec_str)?;
    let arch_str: String = pick_required(args.arch.clone(), &file, "arch")?;
    let arch = parse_arch(&arch_str)?;
    let k: usize = pick_required(args.k, &file, "k")?;

    let paper_scale = args.paper_scale || file.get::<bool>("paper_scale")?.unwrap_or(false);
    let default_iterations = if paper_scale { 70_000 } else { 3_000 };
    let default_runs = if paper_scale { 20 } else { 5 };

    let mut cfg = TrainConfig::new(arch, k);
    cfg.batch_size = pick(args.batch_size, &file, "batch_size", 100)?;
    cfg.learning_rate = pick(
        args.learning_rate,
        &file,
        "learning_rate",
        TrainConfig::default_learning_rate(arch),
    )?;
    cfg.iterations = pick(args.iterations, &file, "iterations", default_iterations)?;
    cfg.runs = pick(args.runs, &file, "runs", default_runs)?;
    cfg.vote_top = pick(args.vote_top, &file, "vote_top", 3)?;
    cfg.seed = pick(args.seed, &file, "seed", 0)?;
    cfg.parallel_runs = pick(args.parallel_runs, &file, "parallel_runs", 1)?;
    let terms_str: String = pick(args.terms.clone(), &file, "terms", "l1+l2+l3".to_string())?;
    cfg.terms = TermFlags::parse(&terms_str)?;
    cfg.validate()?;

    let defaults = DataOptions::default();
    let classes = match (&args.data.classes, file.raw("classes")) {
        (Some(s), _) => Some(parse_class_list(s)?),
        (None, Some(s)) => Some(parse_class_list(s)?),
        (None, None) => None,
    };
    let opts = DataOptions {
        n_per_class: pick(args.data.n_per_class, &file, "n_per_class", defaults.n_per_class)?,
        inner_radius: pick(args.data.inner_radius, &file, "inner_radius", defaults.inner_radius)?,
        ring_radius: pick(args.data.ring_radius, &file, "ring_radius", defaults.ring_radius)?,
        noise_std: pick(args.data.noise_std, &file, "noise_std", defaults.noise_std)?,
        classes,
        per_class_cap: match (args.data.per_class_cap, file.get::<usize>("per_class_cap")?) {
            (Some(v), _) => Some(v),
            (None, v) => v,
        },
        csv_labels: args.data.csv_labels || file.get::<bool>("csv_labels")?.unwrap_or(false),
    };
    let kmeans_baseline = args.kmeans_baseline || file.get::<bool>("kmeans_baseline")?.unwrap_or(false);

    let mut kv = KvConfig::default();
    kv.set("data", &spec);
    kv.set("arch", arch);
    kv.set("k", k);
    kv.set("batch_size", cfg.batch_size);
    kv.set("learning_rate", cfg.learning_rate);
    kv.set("iterations", cfg.iterations);
    kv.set("runs", cfg.runs);
    kv.set("vote_top", cfg.vote_top);
    kv.set("seed", cfg.seed);
    kv.set("parallel_runs", cfg.parallel_runs);
    kv.set("terms", cfg.terms.label());
    kv.set("kmeans_baseline", kmeans_baseline);
    if matches!(spec, DataSpec::Rings) {
        kv.set("n_per_class", opts.n_per_class);
        kv.set("inner_radius", opts.inner_radius);
        kv.set("ring_radius", opts.ring_radius);
        kv.set("noise_std", opts.noise_std);
    }
    if let Some(classes) = &opts.classes {
        let joined: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        kv.set("classes", joined.join(","));
    }
    kv.set_opt("per_class_cap", opts.per_class_cap);
    if opts.csv_labels {
        kv.set("csv_labels", true);
    }

    Ok(ResolvedRun { spec, opts, cfg, kmeans_baseline, kv })
}

fn write_metrics_log(path: &Path, runs: &[RunResult<f32>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for run in runs {
        for rec in &run.trace {
            let line = serde_json::json!({
                "run": run.run_index,
                "iter": rec.iter,
                "l1": rec.l1,
                "l2": rec.l2,
                "l3": rec.l3,
                "total": rec.total,
                "sigma": rec.sigma,
            });
            writeln!(f, "{}", line)?;
        }
    }
    Ok(())
}

fn write_assignments(path: &Path, assignments: &[usize], labels: Option<&[usize]>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    match labels {
        Some(labels) => {
            writeln!(f, "index,cluster,label")?;
            for (i, (&a, &l)) in assignments.iter().zip(labels).enumerate() {
                writeln!(f, "{},{},{}", i, a, l)?;
            }
        }
        None => {
            writeln!(f, "index,cluster")?;
            for (i, &a) in assignments.iter().enumerate() {
                writeln!(f, "{},{}", i, a)?;
            }
        }
    }
    Ok(())
}

struct ReportRow {
    method: String,
    nmi: f64,
    acc_percent: f64,
}

fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<12}{:>8}{:>10}\n", "Method", "NMI", "ACC[%]"));
    for row in rows {
        out.push_str(&format!(
            "{:<12}{:>8.4}{:>10.2}\n",
            row.method, row.nmi, row.acc_percent
        ));
    }
    out
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let resolved = resolve_train(args)?;
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("divclust_out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    resolved.kv.save(&out_dir.join("config.resolved"))?;

    let data = datasets::load(
        &resolved.spec,
        &resolved.opts,
        seed_for(resolved.cfg.seed, "data"),
    )?;
    eprintln!(
        "dataset '{}': {} points, item shape {:?}",
        data.name,
        data.len(),
        data.item_shape()
    );

    let outcome = train_multi(&data, &resolved.cfg)?;
    write_metrics_log(&out_dir.join("metrics.jsonl"), &outcome.runs)?;

    let mut run_entries = Vec::new();
    for run in &outcome.runs {
        let ckpt_name = format!("run{}.ckpt", run.run_index);
        run.network.save(&out_dir.join(&ckpt_name))?;
        run_entries.push(serde_json::json!({
            "run": run.run_index,
            "seed": run.seed,
            "failed": run.failed,
            "final_loss": run.final_loss,
            "checkpoint": ckpt_name,
        }));
    }
    let runs_json = serde_json::json!({
        "best_run": outcome.best,
        "runs": run_entries,
    });
    std::fs::write(
        out_dir.join("runs.json"),
        serde_json::to_string_pretty(&runs_json)?,
    )?;

    let best = outcome.best_run();
    write_assignments(
        &out_dir.join("best_assignments.csv"),
        &best.assignments,
        data.labels.as_deref(),
    )?;

    let ok_runs = outcome.runs.iter().filter(|r| r.is_ok()).count();
    let top = resolved.cfg.vote_top.min(ok_runs);
    if top < resolved.cfg.vote_top {
        eprintln!(
            "note: only {} successful runs, vote uses top {} instead of {}",
            ok_runs, top, resolved.cfg.vote_top
        );
    }
    let vote = outcome.vote(top)?;
    write_assignments(&out_dir.join("vote_assignments.csv"), &vote, data.labels.as_deref())?;

    let mut report = String::new();
    report.push_str(&format!(
        "best run: {} (final loss {:.6}: l1 {:.6}, l2 {:.6}, l3 {:.6})\n",
        best.run_index, best.final_loss.total, best.final_loss.l1, best.final_loss.l2, best.final_loss.l3
    ));
    if let Some(labels) = data.labels.as_deref() {
        let mut rows = vec![
            ReportRow {
                method: "best".into(),
                nmi: nmi(labels, &best.assignments)?,
                acc_percent: 100.0 * acc(labels, &best.assignments)?,
            },
            ReportRow {
                method: "vote".into(),
                nmi: nmi(labels, &vote)?,
                acc_percent: 100.0 * acc(labels, &vote)?,
            },
        ];
        if resolved.kmeans_baseline {
            let km = kmeans(
                &data,
                resolved.cfg.k,
                resolved.cfg.runs,
                seed_for(resolved.cfg.seed, "kmeans"),
            )?;
            rows.push(ReportRow {
                method: "kmeans".into(),
                nmi: nmi(labels, &km)?,
                acc_percent: 100.0 * acc(labels, &km)?,
            });
        }
        report.push_str(&format_report(&rows));
    } else {
        report.push_str("no labels: supervised scores unavailable\n");
    }
    std::fs::write(out_dir.join("report.txt"), &report)?;
    print!("{}", report);
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let resolved = resolve_train(&args.train)?;
    let out_dir = args.train.out.clone().unwrap_or_else(|| PathBuf::from("divclust_out"));
    std::fs::create_dir_all(&out_dir)?;
    let mut kv = resolved.kv.clone();
    kv.set("repeats", args.repeats);
    kv.save(&out_dir.join("config.resolved"))?;

    let data = datasets::load(
        &resolved.spec,
        &resolved.opts,
        seed_for(resolved.cfg.seed, "data"),
    )?;
    if data.labels.is_none() {
        bail!("ablation requires a labeled dataset");
    }

    let rows = run_ablation(&data, &resolved.cfg, args.repeats)?;

    let mut table = String::new();
    table.push_str(&format!(
        "{:<10}{:>18}{:>10}\n",
        "Cost", "Mean ± std [%]", "Max [%]"
    ));
    let mut csv = String::from("terms,mean_acc,std_acc,max_acc\n");
    for row in &rows {
        table.push_str(&format!(
            "{:<10}{:>10.2} ± {:<5.2}{:>10.2}\n",
            row.terms.label(),
            100.0 * row.mean,
            100.0 * row.std,
            100.0 * row.max
        ));
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.terms.label(),
            row.mean,
            row.std,
            row.max
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), &csv)?;
    std::fs::write(out_dir.join("ablation.txt"), &table)?;
    print!("{}", table);
    Ok(())
}

/// Hidden representations for a label-sorted sample, to inspect the block
/// structure of the learned kernel matrix.
pub fn cmd_export_kernel(args: &ExportKernelArgs) -> Result<()> {
    let net: Network<f32> = Network::load(&args.checkpoint)?;
    let spec = DataSpec::parse(&args.data)?;
    let opts = data_options_from_flags(args.classes.as_deref(), args.per_class_cap, args.csv_labels)?;
    let data = datasets::load(&spec, &opts, seed_for(args.seed, "data"))?;
    let Some(labels) = data.labels.clone() else {
        bail!("kernel export requires a labeled dataset");
    };
    std::fs::create_dir_all(&args.out)?;

    // Seeded sample of at most `sample` points.
    let n = data.len();
    let take = args.sample.min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_for(args.seed, "kernel-sample"));
    indices.shuffle(&mut rng);
    indices.truncate(take);
    indices.sort_unstable();

    let batch = batch_for_network(&net, &data, &indices)?;
    let mut tape = Tape32::new();
    let pass = net.forward_inference(&mut tape, &batch)?;
    let hidden = tape.value(pass.hidden).clone();

    let dists = pairwise_sq_dist(&hidden);
    let sigma = sigma_rule(&dists);
    let kernel = gaussian_kernel(&dists, sigma)?;
    let sample_labels: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    let sorted = kernel.sorted_by_labels(&sample_labels)?;
    let mut sorted_labels = sample_labels.clone();
    sorted_labels.sort_unstable();

    sorted.write_csv(&args.out.join("kernel.csv"))?;
    sorted.write_pgm(&args.out.join("kernel.pgm"))?;

    let (within, between) = block_means(&sorted, &sorted_labels);
    println!(
        "kernel over {} samples (sigma {:.6}): mean within-class {:.6}, between-class {:.6}",
        take, sigma, within, between
    );
    Ok(())
}

fn block_means(kernel: &KernelMatrix<f32>, labels: &[usize]) -> (f64, f64) {
    let m = kernel.batch();
    let (mut within, mut between) = (0.0f64, 0.0f64);
    let (mut n_within, mut n_between) = (0usize, 0usize);
    for i in 0..m {
        for j in (i + 1)..m {
            let v = kernel.values.get2(i, j) as f64;
            if labels[i] == labels[j] {
                within += v;
                n_within += 1;
            } else {
                between += v;
                n_between += 1;
            }
        }
    }
    (
        if n_within > 0 { within / n_within as f64 } else { 0.0 },
        if n_between > 0 { between / n_between as f64 } else { 0.0 },
    )
}

fn data_options_from_flags(
    classes: Option<&str>,
    per_class_cap: Option<usize>,
    csv_labels: bool,
) -> Result<DataOptions> {
    let mut opts = DataOptions::default();
    if let Some(s) = classes {
        opts.classes = Some(parse_class_list(s)?);
    }
    opts.per_class_cap = per_class_cap;
    opts.csv_labels = csv_labels;
    Ok(opts)
}

fn batch_for_network(net: &Network<f32>, data: &Dataset<f32>, indices: &[usize]) -> Result<Tensor<f32>> {
    if net.input_shape().len() == 3 {
        if data.item_shape() != net.input_shape() {
            bail!(
                "checkpoint expects items of shape {:?}, dataset has {:?}",
                net.input_shape(),
                data.item_shape()
            );
        }
        Ok(data.gather(indices))
    } else {
        if data.item_len() != net.input_shape()[0] {
            bail!(
                "checkpoint expects {} features, dataset items have {}",
                net.input_shape()[0],
                data.item_len()
            );
        }
        Ok(data.gather_flat(indices))
    }
}

pub fn cmd_saliency(args: &SaliencyArgs) -> Result<()> {
    let net: Network<f32> = Network::load(&args.checkpoint)?;
    let spec = DataSpec::parse(&args.data)?;
    let opts = data_options_from_flags(args.classes.as_deref(), args.per_class_cap, args.csv_labels)?;
    let data = datasets::load(&spec, &opts, seed_for(args.seed, "data"))?;
    std::fs::create_dir_all(&args.out)?;

    let image_shaped = data.item_shape().len() == 3;
    if !image_shaped {
        eprintln!("warning: dataset items are not images; maps are exported as 1-row PGMs");
    }
    if net.input_shape().len() == 1 && image_shaped {
        eprintln!("warning: flat checkpoint on image data; saliency maps are reshaped to the image");
    }

    let samples: Vec<usize> = args
        .samples
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad sample index '{}'", s)))
        .collect::<Result<_>>()?;

    for &idx in &samples {
        if idx >= data.len() {
            bail!("sample {} out of range ({} points)", idx, data.len());
        }
        let item = data.item(idx);
        let net_item = if net.input_shape().len() == 1 && item.shape().len() > 1 {
            item.reshaped(&[data.item_len()])
        } else {
            item.clone()
        };

        // Cluster of this sample = argmax of the inference softmax.
        let batch = net_item.reshaped(&{
            let mut s = vec![1];
            s.extend_from_slice(net.input_shape());
            s
        });
        let mut tape = Tape32::new();
        let pass = net.forward_inference(&mut tape, &batch)?;
        let row = tape.value(pass.assignments);
        let mut unit = 0usize;
        let mut best = row.get2(0, 0);
        for j in 1..net.k() {
            if row.get2(0, j) > best {
                best = row.get2(0, j);
                unit = j;
            }
        }

        let map = net.guided_backprop(&net_item, unit)?;
        let map = map.reshaped(item.shape());

        let (h, w, input_plane, map_plane) = to_planes(&item, &map);
        write_pgm(
            &args.out.join(format!("input_{}.pgm", idx)),
            w,
            h,
            &to_unit_bytes(&input_plane),
        )?;
        write_pgm(
            &args.out.join(format!("saliency_{}.pgm", idx)),
            w,
            h,
            &normalize_bytes(&map_plane),
        )?;
        println!("sample {}: cluster {}, maps written", idx, unit);
    }
    Ok(())
}

/// Collapse an item and its saliency map to single grayscale planes.
/// Multi-channel images reduce by channel mean (input) and by the largest
/// absolute channel value (saliency); vectors become a 1-row image.
fn to_planes(item: &Tensor<f32>, map: &Tensor<f32>) -> (usize, usize, Vec<f64>, Vec<f64>) {
    match item.shape() {
        [c, h, w] => {
            let (c, h, w) = (*c, *h, *w);
            let mut input_plane = vec![0.0f64; h * w];
            let mut map_plane = vec![0.0f64; h * w];
            for ci in 0..c {
                for p in 0..h * w {
                    input_plane[p] += item.data()[ci * h * w + p] as f64 / c as f64;
                    let v = map.data()[ci * h * w + p] as f64;
                    if v.abs() > map_plane[p].abs() {
                        map_plane[p] = v;
                    }
                }
            }
            (h, w, input_plane, map_plane)
        }
        shape => {
            let n: usize = shape.iter().product();
            (
                1,
                n,
                item.data().iter().map(|&v| v as f64).collect(),
                map.data().iter().map(|&v| v as f64).collect(),
            )
        }
    }
}

fn to_unit_bytes(plane: &[f64]) -> Vec<u8> {
    plane
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Min-max normalize to [0,255]; a constant map exports as all zeros.
fn normalize_bytes(plane: &[f64]) -> Vec<u8> {
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return vec![0u8; plane.len()];
    }
    plane
        .iter()
        .map(|&v| (255.0 * (v - min) / (max - min)).round().clamp(0.0, 255.0) as u8)
        .collect()
}
