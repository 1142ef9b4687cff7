//! Finite-difference verification of the full training loss over every
//! network parameter.
//!
//! The evaluator re-implements the forward pass and loss with plain loops,
//! independent of the tape ops it checks. Central differences need two loss
//! evaluations per parameter; re-running the whole network ~300k times would
//! blow the time budget, so each perturbed evaluation reuses the cached
//! activations of the base point and recomputes only what the perturbed
//! coordinate can reach (one dense column, one conv channel, one batchnorm
//! feature, and everything downstream of it). `verify_against_full` spot
//! checks the incremental path against full re-evaluation.
//!
//! The bandwidth is frozen at its base-point value throughout: it is a batch
//! statistic, not a parameter, and the gradient under test is defined with
//! the bandwidth held constant.

use divclust_core::network::{LayerSpec, Network, BN_EPSILON};
use divclust_core::tensor::Tensor;

const EPS_DENOM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum Changed {
    Cols(Vec<usize>),
    Channels(Vec<usize>),
    All,
}

pub struct Cache {
    acts: Vec<Tensor<f64>>,
    sq_dists: Tensor<f64>,
    kernel: Tensor<f64>,
    pub sigma: f64,
    pub loss: f64,
}

pub struct FdModel {
    specs: Vec<LayerSpec>,
    hidden_tap: usize,
    batch: Tensor<f64>,
    layout: Vec<ParamSlot>,
    total: usize,
}

impl FdModel {
    pub fn new(net: &Network<f64>, batch: Tensor<f64>) -> FdModel {
        let mut layout = Vec::new();
        let mut offset = 0usize;
        for (name, tensor) in net.params() {
            let (layer_str, kind_str) = name
                .strip_prefix("layer")
                .and_then(|r| r.split_once('.'))
                .expect("parameter names follow layer<i>.<kind>");
            let kind = match kind_str {
                "weight" => ParamKind::Weight,
                "bias" => ParamKind::Bias,
                "gamma" => ParamKind::Gamma,
                "beta" => ParamKind::Beta,
                other => panic!("unexpected parameter kind {}", other),
            };
            layout.push(ParamSlot {
                layer: layer_str.parse().expect("layer index"),
                kind,
                offset,
                len: tensor.numel(),
            });
            offset += tensor.numel();
        }
        FdModel {
            specs: net.specs().to_vec(),
            hidden_tap: net.hidden_tap(),
            batch,
            layout,
            total: offset,
        }
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    fn slot_for(&self, layer: usize, kind: ParamKind) -> &ParamSlot {
        self.layout
            .iter()
            .find(|s| s.layer == layer && s.kind == kind)
            .expect("slot exists")
    }

    fn param<'a>(&self, flat: &'a [f64], layer: usize, kind: ParamKind) -> &'a [f64] {
        let slot = self.slot_for(layer, kind);
        &flat[slot.offset..slot.offset + slot.len]
    }

    fn input_of<'a>(&'a self, cache_acts: &'a [Tensor<f64>], layer: usize) -> &'a Tensor<f64> {
        if layer == 0 {
            &self.batch
        } else {
            &cache_acts[layer - 1]
        }
    }

    // -- plain layer math ----------------------------------------------------

    fn dense_full(&self, input: &Tensor<f64>, w: &[f64], b: &[f64], units: usize) -> Tensor<f64> {
        let (m, d) = (input.shape()[0], input.shape()[1]);
        let mut out = vec![0.0; m * units];
        for i in 0..m {
            let row = input.row(i);
            let orow = &mut out[i * units..(i + 1) * units];
            orow.copy_from_slice(b);
            for (f, &x) in row.iter().enumerate() {
                let wrow = &w[f * units..(f + 1) * units];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += x * wv;
                }
            }
            let _ = d;
        }
        Tensor::from_vec(&[m, units], out)
    }

    fn conv_full(&self, input: &Tensor<f64>, w: &[f64], b: &[f64], filters: usize, kernel: usize) -> Tensor<f64> {
        let s = input.shape();
        let (m, c, h, wd) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
        let mut out = vec![0.0; m * filters * oh * ow];
        for bi in 0..m {
            for f in 0..filters {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[f];
                        for ci in 0..c {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let x = input.data()
                                        [((bi * c + ci) * h + oy + ky) * wd + ox + kx];
                                    let wv = w[((f * c + ci) * kernel + ky) * kernel + kx];
                                    acc += x * wv;
                                }
                            }
                        }
                        out[((bi * filters + f) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[m, filters, oh, ow], out)
    }

    fn pool_full(&self, input: &Tensor<f64>) -> Tensor<f64> {
        let s = input.shape();
        let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; m * c * oh * ow];
        for bi in 0..m {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut mx = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = input.data()
                                    [((bi * c + ci) * h + oy * 2 + dy) * w + ox * 2 + dx];
                                if v > mx {
                                    mx = v;
                                }
                            }
                        }
                        out[((bi * c + ci) * oh + oy) * ow + ox] = mx;
                    }
                }
            }
        }
        Tensor::from_vec(&[m, c, oh, ow], out)
    }

    /// Batch-statistics batchnorm over one feature column of `input`,
    /// written into `out`.
    fn bn_feature(&self, input: &Tensor<f64>, out: &mut Tensor<f64>, j: usize, gamma: f64, beta: f64) {
        let m = input.shape()[0];
        let mut mean = 0.0;
        for i in 0..m {
            mean += input.get2(i, j);
        }
        mean /= m as f64;
        let mut var = 0.0;
        for i in 0..m {
            let d = input.get2(i, j) - mean;
            var += d * d;
        }
        var /= m as f64;
        let std = (var + BN_EPSILON).sqrt();
        for i in 0..m {
            out.set2(i, j, (input.get2(i, j) - mean) / std * gamma + beta);
        }
    }

    fn bn_full(&self, input: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
        let (m, n) = (input.shape()[0], input.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for j in 0..n {
            self.bn_feature(input, &mut out, j, gamma[j], beta[j]);
        }
        out
    }

    fn softmax_full(&self, input: &Tensor<f64>) -> Tensor<f64> {
        let (m, n) = (input.shape()[0], input.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = input.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            for &e in &exps {
                denom += e;
            }
            for (j, e) in exps.into_iter().enumerate() {
                out.set2(i, j, e / denom);
            }
        }
        out
    }

    fn relu_full(&self, input: &Tensor<f64>) -> Tensor<f64> {
        input.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    fn layer_forward(&self, flat: &[f64], li: usize, input: &Tensor<f64>) -> Tensor<f64> {
        match &self.specs[li] {
            LayerSpec::Dense { units, .. } => self.dense_full(
                input,
                self.param(flat, li, ParamKind::Weight),
                self.param(flat, li, ParamKind::Bias),
                *units,
            ),
            LayerSpec::Conv2d { filters, kernel, .. } => self.conv_full(
                input,
                self.param(flat, li, ParamKind::Weight),
                self.param(flat, li, ParamKind::Bias),
                *filters,
                *kernel,
            ),
            LayerSpec::MaxPool2x2 => self.pool_full(input),
            LayerSpec::Relu => self.relu_full(input),
            LayerSpec::Flatten => {
                let m = input.shape()[0];
                let rest: usize = input.shape()[1..].iter().product();
                input.reshaped(&[m, rest])
            }
            LayerSpec::BatchNorm { .. } => self.bn_full(
                input,
                self.param(flat, li, ParamKind::Gamma),
                self.param(flat, li, ParamKind::Beta),
            ),
            LayerSpec::Softmax => self.softmax_full(input),
        }
    }

    // -- loss ----------------------------------------------------------------

    fn sq_dists_of(&self, hidden: &Tensor<f64>) -> Tensor<f64> {
        let (m, d) = (hidden.shape()[0], hidden.shape()[1]);
        let mut out = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in (i + 1)..m {
                let mut s = 0.0;
                for f in 0..d {
                    let diff = hidden.get2(i, f) - hidden.get2(j, f);
                    s += diff * diff;
                }
                out.set2(i, j, s);
                out.set2(j, i, s);
            }
        }
        out
    }

    fn sigma_of(&self, sq_dists: &Tensor<f64>) -> f64 {
        let m = sq_dists.shape()[0];
        let mut dists = Vec::with_capacity(m * (m - 1) / 2);
        for i in 0..m {
            for j in (i + 1)..m {
                dists.push(sq_dists.get2(i, j).sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if dists.len() % 2 == 1 {
            dists[dists.len() / 2]
        } else {
            0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
        };
        let sigma = 0.15 * median;
        if sigma > 0.0 {
            sigma
        } else {
            1e-9
        }
    }

    fn kernel_of(&self, sq_dists: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
        let scale = -1.0 / (2.0 * sigma * sigma);
        sq_dists.map(|d| (d * scale).exp())
    }

    fn loss_of(&self, kernel: &Tensor<f64>, assign: &Tensor<f64>) -> f64 {
        let m = assign.shape()[0];
        let k = assign.shape()[1];
        let quad = |u: &dyn Fn(usize) -> f64, v: &dyn Fn(usize) -> f64| {
            let mut s = 0.0;
            for q in 0..m {
                for l in 0..m {
                    s += u(q) * kernel.get2(q, l) * v(l);
                }
            }
            s
        };
        let cs = |cols: &dyn Fn(usize, usize) -> f64| {
            let mut total = 0.0;
            for i in 0..k {
                for j in (i + 1)..k {
                    let ci = |q: usize| cols(q, i);
                    let cj = |q: usize| cols(q, j);
                    let num = quad(&ci, &cj);
                    let den = (quad(&ci, &ci) * quad(&cj, &cj) + EPS_DENOM).sqrt();
                    total += num / den;
                }
            }
            total / k as f64
        };

        let l1 = cs(&|q, i| assign.get2(q, i));

        let mut upper = 0.0;
        for q in 0..m {
            for l in (q + 1)..m {
                let mut dot = 0.0;
                for i in 0..k {
                    dot += assign.get2(q, i) * assign.get2(l, i);
                }
                upper += dot;
            }
        }
        let l2 = upper / (m * (m - 1) / 2) as f64;

        let corner = |q: usize, i: usize| {
            let mut dist = 0.0;
            for j in 0..k {
                let e = if j == i { 1.0 } else { 0.0 };
                let diff = assign.get2(q, j) - e;
                dist += diff * diff;
            }
            (-dist).exp()
        };
        let l3 = cs(&corner);

        l1 + l2 + l3
    }

    pub fn full_forward(&self, flat: &[f64]) -> Cache {
        let mut acts = Vec::with_capacity(self.specs.len());
        let mut cur = self.batch.clone();
        for li in 0..self.specs.len() {
            cur = self.layer_forward(flat, li, &cur);
            acts.push(cur.clone());
        }
        let hidden = &acts[self.hidden_tap];
        let sq_dists = self.sq_dists_of(hidden);
        let sigma = self.sigma_of(&sq_dists);
        let kernel = self.kernel_of(&sq_dists, sigma);
        let assign = acts.last().unwrap();
        let loss = self.loss_of(&kernel, assign);
        Cache { acts, sq_dists, kernel, sigma, loss }
    }

    /// Loss at the base parameters with one coordinate shifted by `delta`,
    /// reusing the base cache (and its bandwidth).
    pub fn perturbed_loss(&self, base: &Cache, flat: &[f64], coord: usize, delta: f64) -> f64 {
        let slot = self
            .layout
            .iter()
            .find(|s| coord >= s.offset && coord < s.offset + s.len)
            .expect("coordinate in range");
        let idx = coord - slot.offset;
        let li = slot.layer;
        let input = self.input_of(&base.acts, li);

        // Perturbed layer output via a cheap update of the cached output.
        let (mut cur, mut changed) = match (&self.specs[li], slot.kind) {
            (LayerSpec::Dense { units, .. }, ParamKind::Weight) => {
                let (i, j) = (idx / units, idx % units);
                let mut out = base.acts[li].clone();
                let m = input.shape()[0];
                for b in 0..m {
                    let v = out.get2(b, j) + delta * input.get2(b, i);
                    out.set2(b, j, v);
                }
                (out, Changed::Cols(vec![j]))
            }
            (LayerSpec::Dense { .. }, ParamKind::Bias) => {
                let mut out = base.acts[li].clone();
                let m = input.shape()[0];
                for b in 0..m {
                    let v = out.get2(b, idx) + delta;
                    out.set2(b, idx, v);
                }
                (out, Changed::Cols(vec![idx]))
            }
            (LayerSpec::Conv2d { in_channels, kernel, .. }, ParamKind::Weight) => {
                let per_filter = in_channels * kernel * kernel;
                let f = idx / per_filter;
                let rem = idx % per_filter;
                let ci = rem / (kernel * kernel);
                let ky = (rem / kernel) % kernel;
                let kx = rem % kernel;
                let mut out = base.acts[li].clone();
                let s = input.shape();
                let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = out.shape().to_vec();
                let (filters, oh, ow) = (os[1], os[2], os[3]);
                for b in 0..m {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let x = input.data()[((b * c + ci) * h + oy + ky) * w + ox + kx];
                            out.data_mut()[((b * filters + f) * oh + oy) * ow + ox] += delta * x;
                        }
                    }
                }
                (out, Changed::Channels(vec![f]))
            }
            (LayerSpec::Conv2d { .. }, ParamKind::Bias) => {
                let mut out = base.acts[li].clone();
                let os = out.shape().to_vec();
                let (m, filters, oh, ow) = (os[0], os[1], os[2], os[3]);
                for b in 0..m {
                    for p in 0..oh * ow {
                        out.data_mut()[((b * filters + idx) * oh * ow) + p] += delta;
                    }
                }
                (out, Changed::Channels(vec![idx]))
            }
            (LayerSpec::BatchNorm { .. }, ParamKind::Gamma) => {
                let gamma = self.param(flat, li, ParamKind::Gamma)[idx] + delta;
                let beta = self.param(flat, li, ParamKind::Beta)[idx];
                let mut out = base.acts[li].clone();
                self.bn_feature(input, &mut out, idx, gamma, beta);
                (out, Changed::Cols(vec![idx]))
            }
            (LayerSpec::BatchNorm { .. }, ParamKind::Beta) => {
                let mut out = base.acts[li].clone();
                let m = input.shape()[0];
                for b in 0..m {
                    let v = out.get2(b, idx) + delta;
                    out.set2(b, idx, v);
                }
                (out, Changed::Cols(vec![idx]))
            }
            (spec, kind) => panic!("no parameters of kind {:?} on layer {:?}", kind, spec),
        };

        // Propagate downstream, narrowing work to what the change reaches.
        let mut hidden: Option<(Tensor<f64>, Changed)> = None;
        if li == self.hidden_tap {
            hidden = Some((cur.clone(), changed.clone()));
        }
        for lj in (li + 1)..self.specs.len() {
            let base_in = self.input_of(&base.acts, lj);
            let (next, next_changed) = match &self.specs[lj] {
                LayerSpec::Relu => (self.relu_full(&cur), changed.clone()),
                LayerSpec::Flatten => {
                    let m = cur.shape()[0];
                    let rest: usize = cur.shape()[1..].iter().product();
                    let per_channel: usize = cur.shape()[2..].iter().product();
                    let mapped = match &changed {
                        Changed::Channels(cs) if cs.len() * per_channel <= 32 => {
                            let mut cols = Vec::new();
                            for &c in cs {
                                cols.extend(c * per_channel..(c + 1) * per_channel);
                            }
                            Changed::Cols(cols)
                        }
                        Changed::Channels(_) => Changed::All,
                        other => other.clone(),
                    };
                    (cur.reshaped(&[m, rest]), mapped)
                }
                LayerSpec::MaxPool2x2 => (self.pool_full(&cur), changed.clone()),
                LayerSpec::Softmax => (self.softmax_full(&cur), Changed::All),
                LayerSpec::Dense { units, .. } => {
                    let w = self.param(flat, lj, ParamKind::Weight);
                    match &changed {
                        Changed::Cols(cols) if cols.len() <= 32 => {
                            let mut out = base.acts[lj].clone();
                            let m = cur.shape()[0];
                            for &j in cols {
                                for b in 0..m {
                                    let dx = cur.get2(b, j) - base_in.get2(b, j);
                                    if dx == 0.0 {
                                        continue;
                                    }
                                    let wrow = &w[j * units..(j + 1) * units];
                                    let orow =
                                        &mut out.data_mut()[b * units..(b + 1) * units];
                                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                                        *o += dx * wv;
                                    }
                                }
                            }
                            (out, Changed::All)
                        }
                        _ => (self.layer_forward(flat, lj, &cur), Changed::All),
                    }
                }
                LayerSpec::BatchNorm { .. } => match &changed {
                    Changed::Cols(cols) if cols.len() <= 32 => {
                        let gamma = self.param(flat, lj, ParamKind::Gamma);
                        let beta = self.param(flat, lj, ParamKind::Beta);
                        let mut out = base.acts[lj].clone();
                        for &j in cols {
                            self.bn_feature(&cur, &mut out, j, gamma[j], beta[j]);
                        }
                        (out, changed.clone())
                    }
                    _ => (self.layer_forward(flat, lj, &cur), Changed::All),
                },
                LayerSpec::Conv2d { in_channels, filters, kernel } => match &changed {
                    Changed::Channels(cs) if cs.len() <= 8 => {
                        let w = self.param(flat, lj, ParamKind::Weight);
                        let mut out = base.acts[lj].clone();
                        let s = cur.shape().to_vec();
                        let (m, c, h, wd) = (s[0], s[1], s[2], s[3]);
                        assert_eq!(c, *in_channels);
                        let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
                        for &ci in cs {
                            for b in 0..m {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        for f in 0..*filters {
                                            let mut acc = 0.0;
                                            for ky in 0..*kernel {
                                                for kx in 0..*kernel {
                                                    let pos = ((b * c + ci) * h + oy + ky) * wd
                                                        + ox
                                                        + kx;
                                                    let dx = cur.data()[pos] - base_in.data()[pos];
                                                    if dx != 0.0 {
                                                        acc += dx
                                                            * w[((f * c + ci) * kernel + ky)
                                                                * kernel
                                                                + kx];
                                                    }
                                                }
                                            }
                                            out.data_mut()
                                                [((b * filters + f) * oh + oy) * ow + ox] += acc;
                                        }
                                    }
                                }
                            }
                        }
                        (out, Changed::All)
                    }
                    _ => (self.layer_forward(flat, lj, &cur), Changed::All),
                },
            };
            cur = next;
            changed = next_changed;
            if lj == self.hidden_tap {
                hidden = Some((cur.clone(), changed.clone()));
            }
        }
        let assign = cur;

        // Kernel: reuse the base matrix when the hidden tap is untouched,
        // update changed feature columns of the distance matrix when the
        // change is narrow, recompute otherwise. The bandwidth stays frozen.
        let loss = match hidden {
            None => self.loss_of(&base.kernel, &assign),
            Some((h, Changed::Cols(cols))) if cols.len() <= 32 => {
                let base_h = &base.acts[self.hidden_tap];
                let m = h.shape()[0];
                let mut d = base.sq_dists.clone();
                for q in 0..m {
                    for l in (q + 1)..m {
                        let mut v = d.get2(q, l);
                        for &j in &cols {
                            let old = base_h.get2(q, j) - base_h.get2(l, j);
                            let new = h.get2(q, j) - h.get2(l, j);
                            v += new * new - old * old;
                        }
                        let v = v.max(0.0);
                        d.set2(q, l, v);
                        d.set2(l, q, v);
                    }
                }
                let kernel = self.kernel_of(&d, base.sigma);
                self.loss_of(&kernel, &assign)
            }
            Some((h, _)) => {
                let d = self.sq_dists_of(&h);
                let kernel = self.kernel_of(&d, base.sigma);
                self.loss_of(&kernel, &assign)
            }
        };
        loss
    }

    /// Spot-check the incremental evaluator against full re-evaluation with
    /// the bandwidth pinned to the base value.
    pub fn verify_against_full(&self, base: &Cache, flat: &[f64], coords: &[usize], delta: f64) {
        for &coord in coords {
            let fast = self.perturbed_loss(base, flat, coord, delta);
            let mut perturbed = flat.to_vec();
            perturbed[coord] += delta;
            let full = {
                let mut acts = Vec::with_capacity(self.specs.len());
                let mut cur = self.batch.clone();
                for li in 0..self.specs.len() {
                    cur = self.layer_forward(&perturbed, li, &cur);
                    acts.push(cur.clone());
                }
                let hidden = &acts[self.hidden_tap];
                let d = self.sq_dists_of(hidden);
                let kernel = self.kernel_of(&d, base.sigma);
                self.loss_of(&kernel, acts.last().unwrap())
            };
            let diff = (fast - full).abs();
            assert!(
                diff <= 1e-11 * full.abs().max(1.0),
                "incremental evaluation diverges at coord {}: {} vs {} (diff {})",
                coord,
                fast,
                full,
                diff
            );
        }
    }
}
