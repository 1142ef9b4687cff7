//! Gaussian similarity matrices over hidden representations.
//!
//! The bandwidth follows an adaptive rule: 15% of the median pairwise
//! Euclidean distance of the current batch, recomputed on every loss
//! evaluation. The bandwidth is a batch statistic, not a parameter: no
//! gradient flows through the median.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{pairwise_sq_dist_values, NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::{cast, dbl, Scalar};
use crate::tensor::Tensor;

/// Fraction of the median pairwise distance used as bandwidth.
pub const SIGMA_MEDIAN_FRACTION: f64 = 0.15;

/// Floor applied when the median distance collapses to zero.
pub const SIGMA_FLOOR: f64 = 1e-9;

/// A batch-by-batch Gaussian similarity matrix together with the bandwidth
/// it was built with. Entries are exp(-d^2 / (2 sigma^2)): symmetric, unit
/// diagonal, values in (0, 1].
#[derive(Debug, Clone)]
pub struct KernelMatrix<T> {
    pub values: Tensor<T>,
    pub sigma: T,
}

/// Squared Euclidean distances between the rows of `h` ([m,d] -> [m,m]).
/// Entry (i,j) is the direct difference sum; negatives from round-off are
/// clamped at zero.
pub fn pairwise_sq_dist<T: Scalar>(h: &Tensor<T>) -> Tensor<T> {
    pairwise_sq_dist_values(h)
}

/// Adaptive bandwidth: 0.15 x median of the strictly-upper-triangular
/// Euclidean (not squared) distances. A collapsed batch (median zero) is
/// clamped to a small floor instead of erroring.
pub fn sigma_rule<T: Scalar>(sq_dists: &Tensor<T>) -> T {
    let m = sq_dists.rows();
    let mut dists: Vec<T> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            dists.push(sq_dists.get2(i, j).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median = if dists.is_empty() {
        T::zero()
    } else if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        // Mean of the two central order statistics.
        let hi = dists.len() / 2;
        (dists[hi - 1] + dists[hi]) / cast::<T>(2.0)
    };
    let sigma = cast::<T>(SIGMA_MEDIAN_FRACTION) * median;
    if sigma > T::zero() {
        sigma
    } else {
        cast::<T>(SIGMA_FLOOR)
    }
}

/// Elementwise exp(-d^2 / (2 sigma^2)) over a squared-distance matrix.
pub fn gaussian_kernel<T: Scalar>(sq_dists: &Tensor<T>, sigma: T) -> Result<KernelMatrix<T>> {
    if sigma <= T::zero() {
        return Err(Error::InvalidBandwidth(dbl(sigma)));
    }
    let scale = -(T::one() / (cast::<T>(2.0) * sigma * sigma));
    let values = sq_dists.map(|d| (d * scale).exp());
    Ok(KernelMatrix { values, sigma })
}

/// Graph version of the kernel construction: differentiable with respect to
/// the squared distances, with sigma folded in as a constant.
pub fn gaussian_kernel_node<T: Scalar>(tape: &mut Tape<T>, sq_dists: NodeId, sigma: T) -> NodeId {
    assert!(sigma > T::zero(), "gaussian_kernel_node: sigma must be positive");
    let scale = -(T::one() / (cast::<T>(2.0) * sigma * sigma));
    let scaled = tape.mul_scalar(sq_dists, scale);
    tape.exp(scaled)
}

/// Measured deviations from the kernel-matrix contract.
#[derive(Debug, Clone)]
pub struct KernelReport {
    pub max_asymmetry: f64,
    pub max_diag_deviation: f64,
    pub min_entry: f64,
    pub max_entry: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl KernelReport {
    /// Symmetry within 1e-6, exact unit diagonal, entries in (0,1], and a
    /// minimum eigenvalue no smaller than -1e-6 times the maximum one.
    pub fn is_valid(&self) -> bool {
        self.max_asymmetry <= 1e-6
            && self.max_diag_deviation == 0.0
            && self.min_entry > 0.0
            && self.max_entry <= 1.0
            && self.min_eigenvalue >= -1e-6 * self.max_eigenvalue
    }
}

impl<T: Scalar> KernelMatrix<T> {
    pub fn batch(&self) -> usize {
        self.values.rows()
    }

    pub fn report(&self) -> KernelReport {
        let m = self.batch();
        let v = &self.values;
        let mut max_asym = 0.0f64;
        let mut max_diag = 0.0f64;
        let mut min_entry = f64::INFINITY;
        let mut max_entry = f64::NEG_INFINITY;
        for i in 0..m {
            max_diag = max_diag.max((dbl(v.get2(i, i)) - 1.0).abs());
            for j in 0..m {
                let e = dbl(v.get2(i, j));
                min_entry = min_entry.min(e);
                max_entry = max_entry.max(e);
                if j > i {
                    max_asym = max_asym.max((e - dbl(v.get2(j, i))).abs());
                }
            }
        }
        let eigs = symmetric_eigenvalues(v);
        let min_eig = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        let max_eig = eigs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        KernelReport {
            max_asymmetry: max_asym,
            max_diag_deviation: max_diag,
            min_entry,
            max_entry,
            min_eigenvalue: min_eig,
            max_eigenvalue: max_eig,
        }
    }

    /// Rows and columns reordered by ascending label (stable in the original
    /// index), for block-structure inspection.
    pub fn sorted_by_labels(&self, labels: &[usize]) -> Result<KernelMatrix<T>> {
        let m = self.batch();
        if labels.len() != m {
            return Err(Error::LengthMismatch(labels.len(), m));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&i| (labels[i], i));
        let mut out = Tensor::zeros(&[m, m]);
        for (i, &oi) in order.iter().enumerate() {
            for (j, &oj) in order.iter().enumerate() {
                out.set2(i, j, self.values.get2(oi, oj));
            }
        }
        Ok(KernelMatrix { values: out, sigma: self.sigma })
    }

    /// Comma-separated values, one row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let m = self.batch();
        let mut line = String::new();
        for i in 0..m {
            line.clear();
            for j in 0..m {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{}", dbl(self.values.get2(i, j))));
            }
            line.push('\n');
            f.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// 8-bit binary PGM with pixel value 255 * k_ij.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let m = self.batch();
        let bytes: Vec<u8> = self
            .values
            .data()
            .iter()
            .map(|&v| (dbl(v) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_pgm(path, m, m, &bytes)
    }
}

/// Binary (P5) PGM writer shared by the kernel and saliency exports.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    assert_eq!(bytes.len(), width * height);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations (f64).
/// Used to check positive semidefiniteness up to numerical tolerance.
pub fn symmetric_eigenvalues<T: Scalar>(mat: &Tensor<T>) -> Vec<f64> {
    let n = mat.rows();
    let mut a: Vec<f64> = mat.data().iter().map(|&v| dbl(v)).collect();
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[idx(i, j)] * a[idx(i, j)];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[idx(p, p)];
                let aqq = a[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[idx(i, i)]).collect()
}
