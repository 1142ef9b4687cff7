//! Dataset ingestion and synthesis, plus the k-means baseline.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{cast, dbl, Scalar};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// What rescaling was applied at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Normalization {
    /// Values ingested untouched.
    None,
    /// 8-bit pixels scaled into [0,1].
    UnitInterval,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// [n, d] for vector data or [n, c, h, w] for images.
    pub features: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub name: String,
    pub normalization: Normalization,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one item, without the leading batch axis.
    pub fn item_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn item_len(&self) -> usize {
        self.item_shape().iter().product()
    }

    /// Copy the given rows into a batch tensor, preserving the item shape.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let d = self.item_len();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.item_shape());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Tensor::from_vec(&shape, data)
    }

    /// Same rows flattened to [batch, d], for the fully connected network.
    pub fn gather_flat(&self, indices: &[usize]) -> Tensor<T> {
        let batch = self.gather(indices);
        let d = self.item_len();
        batch.reshaped(&[indices.len(), d])
    }

    /// One item with its native shape.
    pub fn item(&self, index: usize) -> Tensor<T> {
        self.gather(&[index]).reshaped(self.item_shape())
    }

    /// Features viewed as [n, d] regardless of item shape.
    pub fn flat_features(&self) -> Tensor<T> {
        self.features.reshaped(&[self.len(), self.item_len()])
    }
}

/// Two nonlinearly separable classes in the plane: a Gaussian disc at the
/// origin and a surrounding ring with radial Gaussian noise. The disc
/// standard deviation is half the nominal radius, which keeps the classes
/// separated at the default radii.
pub fn make_circle_ring<T: Scalar>(
    n_per_class: usize,
    inner_radius: f64,
    ring_radius: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if inner_radius <= 0.0 || ring_radius <= 0.0 {
        return Err(Error::Data("radii must be positive".into()));
    }
    if ring_radius <= inner_radius {
        return Err(Error::Data(format!(
            "ring radius {} must exceed inner radius {}",
            ring_radius, inner_radius
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let disc_std = inner_radius / 2.0;
    for _ in 0..n_per_class {
        let x: f64 = dbl(f64::standard_normal(&mut rng)) * disc_std;
        let y: f64 = dbl(f64::standard_normal(&mut rng)) * disc_std;
        data.push(cast::<T>(x));
        data.push(cast::<T>(y));
        labels.push(0);
    }
    for _ in 0..n_per_class {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = ring_radius + dbl(f64::standard_normal(&mut rng)) * noise_std;
        data.push(cast::<T>(radius * angle.cos()));
        data.push(cast::<T>(radius * angle.sin()));
        labels.push(1);
    }
    Ok(Dataset {
        features: Tensor::from_vec(&[n, 2], data),
        labels: Some(labels),
        name: "circle+ring".into(),
        normalization: Normalization::None,
    })
}

fn read_u32_be(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label pair (the MNIST container format): big-endian
/// dimension fields, magic 0x00000803 for images and 0x00000801 for labels.
/// Pixels are scaled by 1/255. An optional class filter with a per-class cap
/// takes a balanced, seed-deterministic subsample.
pub fn load_idx<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    classes_filter: Option<&[usize]>,
    per_class_cap: Option<usize>,
    seed: u64,
) -> Result<Dataset<T>> {
    let mut images = BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_u32_be(&mut images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad image magic 0x{:08x} in {}",
            magic,
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut images)? as usize;
    let rows = read_u32_be(&mut images)? as usize;
    let cols = read_u32_be(&mut images)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    images
        .read_exact(&mut pixels)
        .map_err(|_| Error::Data(format!("truncated image file {}", images_path.display())))?;

    let mut labels_file = BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_u32_be(&mut labels_file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad label magic 0x{:08x} in {}",
            magic,
            labels_path.display()
        )));
    }
    let label_count = read_u32_be(&mut labels_file)? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "image/label count mismatch: {} images vs {} labels",
            count, label_count
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    labels_file
        .read_exact(&mut raw_labels)
        .map_err(|_| Error::Data(format!("truncated label file {}", labels_path.display())))?;

    let selected: Vec<usize> = match classes_filter {
        None => (0..count).collect(),
        Some(classes) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ordered_classes = classes.to_vec();
            ordered_classes.sort_unstable();
            ordered_classes.dedup();
            let mut keep = Vec::new();
            for &class in &ordered_classes {
                let mut members: Vec<usize> = (0..count)
                    .filter(|&i| raw_labels[i] as usize == class)
                    .collect();
                if let Some(cap) = per_class_cap {
                    if members.len() < cap {
                        return Err(Error::Data(format!(
                            "class {} has only {} samples, cap is {}",
                            class,
                            members.len(),
                            cap
                        )));
                    }
                    members.shuffle(&mut rng);
                    members.truncate(cap);
                    members.sort_unstable();
                }
                keep.extend(members);
            }
            keep
        }
    };

    let d = rows * cols;
    let inv = cast::<T>(1.0 / 255.0);
    let mut data = Vec::with_capacity(selected.len() * d);
    let mut labels = Vec::with_capacity(selected.len());
    for &i in &selected {
        for &p in &pixels[i * d..(i + 1) * d] {
            data.push(cast::<T>(p as f64) * inv);
        }
        labels.push(raw_labels[i] as usize);
    }
    Ok(Dataset {
        features: Tensor::from_vec(&[selected.len(), 1, rows, cols], data),
        labels: Some(labels),
        name: "idx".into(),
        normalization: Normalization::UnitInterval,
    })
}

/// Load a rectangular numeric CSV; when `has_labels` the final column is an
/// integer class label. No rescaling is applied.
pub fn load_dense_csv<T: Scalar>(path: &Path, has_labels: bool) -> Result<Dataset<T>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut data: Vec<T> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    let mut n = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Data(format!(
                    "ragged row at line {}: {} cells, expected {}",
                    lineno + 1,
                    cells.len(),
                    w
                )))
            }
            _ => {}
        }
        let feature_cells = if has_labels { &cells[..cells.len() - 1] } else { &cells[..] };
        for cell in feature_cells {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!("non-numeric cell '{}' at line {}", cell, lineno + 1))
            })?;
            data.push(cast::<T>(v));
        }
        if has_labels {
            let cell = cells[cells.len() - 1].trim();
            let label: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("non-numeric label '{}' at line {}", cell, lineno + 1))
            })?;
            if label < 0.0 || label.fract() != 0.0 {
                return Err(Error::Data(format!(
                    "label '{}' at line {} is not a non-negative integer",
                    cell,
                    lineno + 1
                )));
            }
            labels.push(label as usize);
        }
        n += 1;
    }
    let width = width.ok_or_else(|| Error::Data(format!("empty file {}", path.display())))?;
    let d = if has_labels { width - 1 } else { width };
    if d == 0 {
        return Err(Error::Data("no feature columns".into()));
    }
    Ok(Dataset {
        features: Tensor::from_vec(&[n, d], data),
        labels: has_labels.then_some(labels),
        name: "csv".into(),
        normalization: Normalization::None,
    })
}

/// Write a dataset in the same CSV layout `load_dense_csv` reads.
pub fn save_dense_csv<T: Scalar>(dataset: &Dataset<T>, path: &Path, include_labels: bool) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let flat = dataset.flat_features();
    let d = flat.cols();
    let mut line = String::new();
    for i in 0..dataset.len() {
        line.clear();
        for j in 0..d {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{}", dbl(flat.get2(i, j))));
        }
        if include_labels {
            let labels = dataset
                .labels
                .as_ref()
                .ok_or_else(|| Error::Data("dataset has no labels to write".into()))?;
            line.push(',');
            line.push_str(&labels[i].to_string());
        }
        line.push('\n');
        f.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Lloyd's algorithm from k-means++ seeding; best of `restarts` by
/// within-cluster sum of squares. Empty clusters are reseeded to the point
/// farthest from its assigned centroid.
pub fn kmeans<T: Scalar>(data: &Dataset<T>, k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = data.len();
    if k < 2 {
        return Err(Error::Config(format!("kmeans needs k >= 2, got {}", k)));
    }
    if n < k {
        return Err(Error::Data(format!("kmeans needs at least {} points, got {}", k, n)));
    }
    let flat = data.flat_features();
    let d = flat.cols();
    let x: Vec<f64> = flat.data().iter().map(|&v| dbl(v)).collect();
    let point = |i: usize| &x[i * d..(i + 1) * d];
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for (va, vb) in a.iter().zip(b) {
            let diff = va - vb;
            s += diff * diff;
        }
        s
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;

    for _ in 0..restarts.max(1) {
        // k-means++ seeding.
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
        centroids.push(point(rng.random_range(0..n)).to_vec());
        let mut nearest = vec![f64::INFINITY; n];
        while centroids.len() < k {
            let newest = centroids.last().unwrap();
            let mut total = 0.0;
            for i in 0..n {
                let dist = sq_dist(point(i), newest);
                if dist < nearest[i] {
                    nearest[i] = dist;
                }
                total += nearest[i];
            }
            let chosen = if total > 0.0 {
                let mut target = rng.random_range(0.0..total);
                let mut pick = n - 1;
                for (i, &w) in nearest.iter().enumerate() {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                // All points coincide with a centroid already.
                rng.random_range(0..n)
            };
            centroids.push(point(chosen).to_vec());
        }

        // Lloyd iterations to an assignment fixpoint (or 300 rounds).
        let mut assignments = vec![0usize; n];
        #[cfg(debug_assertions)]
        let mut prev_wcss = f64::INFINITY;
        for _round in 0..300 {
            let mut changed = false;
            for i in 0..n {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let dist = sq_dist(point(i), centroid);
                    if dist < best_d {
                        best_d = dist;
                        best_c = c;
                    }
                }
                if assignments[i] != best_c {
                    assignments[i] = best_c;
                    changed = true;
                }
            }
            // The assignment step can only shrink the objective.
            #[cfg(debug_assertions)]
            {
                let wcss: f64 =
                    (0..n).map(|i| sq_dist(point(i), &centroids[assignments[i]])).sum();
                debug_assert!(
                    wcss <= prev_wcss + 1e-9 * (1.0 + prev_wcss.abs()),
                    "Lloyd objective increased: {} -> {}",
                    prev_wcss,
                    wcss
                );
                prev_wcss = wcss;
            }
            let mut counts = vec![0usize; k];
            let mut sums = vec![vec![0.0f64; d]; k];
            for i in 0..n {
                counts[assignments[i]] += 1;
                for (s, &v) in sums[assignments[i]].iter_mut().zip(point(i)) {
                    *s += v;
                }
            }
            let mut reseeded = false;
            for c in 0..k {
                if counts[c] == 0 {
                    // Reseed to the point farthest from its centroid.
                    let mut far_i = 0;
                    let mut far_d = -1.0;
                    for i in 0..n {
                        let dist = sq_dist(point(i), &centroids[assignments[i]]);
                        if dist > far_d {
                            far_d = dist;
                            far_i = i;
                        }
                    }
                    centroids[c] = point(far_i).to_vec();
                    assignments[far_i] = c;
                    changed = true;
                    reseeded = true;
                } else {
                    for (j, s) in sums[c].iter().enumerate() {
                        centroids[c][j] = s / counts[c] as f64;
                    }
                }
            }
            #[cfg(debug_assertions)]
            if reseeded {
                // Reseeding an empty cluster restarts the descent.
                prev_wcss = f64::INFINITY;
            }
            #[cfg(not(debug_assertions))]
            let _ = reseeded;
            if !changed {
                break;
            }
        }

        let wcss: f64 = (0..n).map(|i| sq_dist(point(i), &centroids[assignments[i]])).sum();
        if best.as_ref().is_none_or(|(b, _)| wcss < *b) {
            best = Some((wcss, assignments));
        }
    }

    Ok(best.expect("at least one restart").1)
}
