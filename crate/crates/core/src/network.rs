//! The two clustering architectures and their plumbing: a LeNet-style
//! convolutional network for images and a 200-200-500-k fully connected
//! network for vector data. Both end in a softmax whose width is the number
//! of clusters, and both designate one hidden layer (the relu following the
//! batch-normalized fully connected layer) as the representation the kernel
//! matrix is computed over.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DVCLNET1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { inputs: usize, units: usize },
    Conv2d { in_channels: usize, filters: usize, kernel: usize },
    MaxPool2x2,
    Relu,
    BatchNorm { features: usize },
    Softmax,
    Flatten,
}

impl LayerSpec {
    /// Per-item output shape, validating that consecutive layers compose.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, units } => {
                if input != [*inputs] {
                    return Err(Error::Architecture(format!(
                        "dense layer expects [{}], got {:?}",
                        inputs, input
                    )));
                }
                Ok(vec![*units])
            }
            LayerSpec::Conv2d { in_channels, filters, kernel } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(Error::Architecture(format!(
                        "conv layer expects [{}, h, w], got {:?}",
                        in_channels, input
                    )));
                }
                let (h, w) = (input[1], input[2]);
                if h < *kernel || w < *kernel {
                    return Err(Error::Architecture(format!(
                        "spatial {}x{} too small for a {0}x{0} kernel",
                        h,
                        kernel
                    )));
                }
                Ok(vec![*filters, h - kernel + 1, w - kernel + 1])
            }
            LayerSpec::MaxPool2x2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return Err(Error::Architecture(format!(
                        "maxpool expects [c, h>=2, w>=2], got {:?}",
                        input
                    )));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
            LayerSpec::BatchNorm { features } => {
                if input != [*features] {
                    return Err(Error::Architecture(format!(
                        "batchnorm expects [{}], got {:?}",
                        features, input
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone)]
pub struct BnState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Everything one forward pass exposes to the training loop.
pub struct ForwardPass {
    pub input: NodeId,
    /// Pre-softmax scores (the unnormalized cluster scores).
    pub logits: NodeId,
    /// Row-stochastic soft assignments.
    pub assignments: NodeId,
    /// The designated hidden representation tap.
    pub hidden: NodeId,
    /// One tape node per parameter, aligned with `Network::params`.
    pub params: Vec<NodeId>,
    /// Output node of every layer, for inspection.
    pub layer_outputs: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    k: usize,
    hidden_tap: usize,
    params: Vec<(String, Tensor<T>)>,
    bn_states: Vec<BnState<T>>,
    mode: Mode,
    initialized: bool,
}

/// Convolutional architecture for images: conv(32, 5x5) -> pool -> relu ->
/// conv(64, 5x5) -> pool -> relu -> flatten -> dense(100) -> batchnorm ->
/// relu -> dense(k) -> softmax. The hidden tap is the 100-unit relu output.
pub fn build_conv_arch<T: Scalar>(
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
) -> Result<Network<T>> {
    if k < 2 {
        return Err(Error::Architecture(format!("need at least 2 clusters, got {}", k)));
    }
    let input_shape = vec![channels, height, width];
    let mut specs = vec![
        LayerSpec::Conv2d { in_channels: channels, filters: 32, kernel: 5 },
        LayerSpec::MaxPool2x2,
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_channels: 32, filters: 64, kernel: 5 },
        LayerSpec::MaxPool2x2,
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ];
    let mut shape = input_shape.clone();
    for spec in &specs {
        shape = spec.output_shape(&shape)?;
    }
    let flat = shape[0];
    specs.extend([
        LayerSpec::Dense { inputs: flat, units: 100 },
        LayerSpec::BatchNorm { features: 100 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 100, units: k },
        LayerSpec::Softmax,
    ]);
    let hidden_tap = 9; // the relu after the batch-normalized dense(100)
    Network::from_specs(specs, input_shape, hidden_tap)
}

/// Fully connected architecture for vector data: dense(200) -> relu ->
/// dense(200) -> relu -> dense(500) -> batchnorm -> relu -> dense(k) ->
/// softmax. The hidden tap is the 500-unit relu output.
pub fn build_mlp_arch<T: Scalar>(input_dim: usize, k: usize) -> Result<Network<T>> {
    if input_dim < 1 {
        return Err(Error::Architecture("input dimension must be at least 1".into()));
    }
    if k < 2 {
        return Err(Error::Architecture(format!("need at least 2 clusters, got {}", k)));
    }
    let specs = vec![
        LayerSpec::Dense { inputs: input_dim, units: 200 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 200, units: 200 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 200, units: 500 },
        LayerSpec::BatchNorm { features: 500 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 500, units: k },
        LayerSpec::Softmax,
    ];
    let hidden_tap = 6;
    Network::from_specs(specs, vec![input_dim], hidden_tap)
}

impl<T: Scalar> Network<T> {
    /// Assemble a network from explicit layer specs. Validates shape
    /// composition, requires a single trailing softmax, and allocates
    /// zeroed parameters.
    pub fn from_specs(
        specs: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        hidden_tap: usize,
    ) -> Result<Network<T>> {
        if specs.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::Architecture("last layer must be softmax".into()));
        }
        if specs.iter().filter(|s| matches!(s, LayerSpec::Softmax)).count() != 1 {
            return Err(Error::Architecture("exactly one softmax layer is required".into()));
        }
        if hidden_tap >= specs.len() {
            return Err(Error::Architecture("hidden tap index out of range".into()));
        }
        let mut shape = input_shape.clone();
        let mut params = Vec::new();
        let mut bn_states = Vec::new();
        for (li, spec) in specs.iter().enumerate() {
            shape = spec.output_shape(&shape)?;
            match spec {
                LayerSpec::Dense { inputs, units } => {
                    params.push((format!("layer{}.weight", li), Tensor::zeros(&[*inputs, *units])));
                    params.push((format!("layer{}.bias", li), Tensor::zeros(&[*units])));
                }
                LayerSpec::Conv2d { in_channels, filters, kernel } => {
                    params.push((
                        format!("layer{}.weight", li),
                        Tensor::zeros(&[*filters, *in_channels, *kernel, *kernel]),
                    ));
                    params.push((format!("layer{}.bias", li), Tensor::zeros(&[*filters])));
                }
                LayerSpec::BatchNorm { features } => {
                    params.push((format!("layer{}.gamma", li), Tensor::zeros(&[*features])));
                    params.push((format!("layer{}.beta", li), Tensor::zeros(&[*features])));
                    bn_states.push(BnState {
                        running_mean: Tensor::zeros(&[*features]),
                        running_var: Tensor::filled(&[*features], T::one()),
                    });
                }
                _ => {}
            }
        }
        if shape.len() != 1 {
            return Err(Error::Architecture(format!("output shape {:?} is not a vector", shape)));
        }
        let k = shape[0];
        Ok(Network {
            specs,
            input_shape,
            k,
            hidden_tap,
            params,
            bn_states,
            mode: Mode::Inference,
            initialized: false,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hidden_tap(&self) -> usize {
        self.hidden_tap
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn_states
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameters concatenated in declaration order.
    pub fn param_vector(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in &self.params {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_param_vector(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count(), "parameter vector length mismatch");
        let mut offset = 0;
        for (_, t) in &mut self.params {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.initialized = true;
    }

    /// He initialization: weights ~ Normal(0, 2/fan_in), zero biases,
    /// batchnorm scale one and shift zero. Deterministic in the seed.
    pub fn init_he(&mut self, seed: u64) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for (name, tensor) in &mut self.params {
            if name.ends_with(".weight") {
                let shape = tensor.shape().to_vec();
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let std = cast::<T>((2.0 / fan_in as f64).sqrt());
                for v in tensor.data_mut() {
                    *v = T::standard_normal(&mut rng) * std;
                }
            } else if name.ends_with(".gamma") {
                for v in tensor.data_mut() {
                    *v = T::one();
                }
            } else {
                for v in tensor.data_mut() {
                    *v = T::zero();
                }
            }
        }
        for bn in &mut self.bn_states {
            bn.running_mean = Tensor::zeros(bn.running_mean.shape());
            bn.running_var = Tensor::filled(bn.running_var.shape(), T::one());
        }
        self.initialized = true;
    }

    /// Forward pass honoring the current mode. Train mode uses batch
    /// statistics for batchnorm (and updates the running averages), tracks
    /// parameters on the tape, and requires a batch of at least two.
    pub fn forward(&mut self, tape: &mut Tape<T>, batch: &Tensor<T>) -> Result<ForwardPass> {
        match self.mode {
            Mode::Train => {
                let b = batch.shape()[0];
                if b < 2 {
                    return Err(Error::DegenerateBatch(b));
                }
                let (pass, stats) = self.run_forward(tape, batch, true, false, true)?;
                let momentum = cast::<T>(BN_MOMENTUM);
                let blend = T::one() - momentum;
                for (bn_idx, mean, var) in stats {
                    let st = &mut self.bn_states[bn_idx];
                    for (r, &m) in st.running_mean.data_mut().iter_mut().zip(mean.data()) {
                        *r = momentum * *r + blend * m;
                    }
                    for (r, &v) in st.running_var.data_mut().iter_mut().zip(var.data()) {
                        *r = momentum * *r + blend * v;
                    }
                }
                Ok(pass)
            }
            Mode::Inference => self.forward_inference(tape, batch),
        }
    }

    /// Read-only inference pass: running batchnorm statistics, untracked
    /// parameters. Safe to share across threads.
    pub fn forward_inference(&self, tape: &mut Tape<T>, batch: &Tensor<T>) -> Result<ForwardPass> {
        let (pass, _) = self.run_forward(tape, batch, false, false, false)?;
        Ok(pass)
    }

    #[allow(clippy::type_complexity)]
    fn run_forward(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        track_params: bool,
        track_input: bool,
        batch_stats: bool,
    ) -> Result<(ForwardPass, Vec<(usize, Tensor<T>, Tensor<T>)>)> {
        let bshape = batch.shape();
        if bshape.len() != self.input_shape.len() + 1 || bshape[1..] != self.input_shape[..] {
            return Err(Error::Data(format!(
                "batch shape {:?} does not match input shape {:?}",
                bshape, self.input_shape
            )));
        }
        let b = bshape[0];

        let input = if track_input {
            tape.var(batch.clone())
        } else {
            tape.constant(batch.clone())
        };
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|(_, t)| if track_params { tape.var(t.clone()) } else { tape.constant(t.clone()) })
            .collect();

        let mut cur = input;
        let mut cursor = 0usize;
        let mut bn_cursor = 0usize;
        let mut hidden = None;
        let mut logits = None;
        let mut layer_outputs = Vec::with_capacity(self.specs.len());
        let mut bn_updates = Vec::new();

        for (li, spec) in self.specs.iter().enumerate() {
            match spec {
                LayerSpec::Dense { .. } => {
                    let w = param_nodes[cursor];
                    let bias = param_nodes[cursor + 1];
                    cursor += 2;
                    let prod = tape.matmul(cur, w);
                    cur = tape.add_row(prod, bias);
                }
                LayerSpec::Conv2d { .. } => {
                    let w = param_nodes[cursor];
                    let bias = param_nodes[cursor + 1];
                    cursor += 2;
                    cur = tape.conv2d(cur, w, bias);
                }
                LayerSpec::MaxPool2x2 => cur = tape.maxpool2x2(cur),
                LayerSpec::Relu => cur = tape.relu(cur),
                LayerSpec::Flatten => {
                    let n: usize = tape.value(cur).shape()[1..].iter().product();
                    cur = tape.reshape(cur, &[b, n]);
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = param_nodes[cursor];
                    let beta = param_nodes[cursor + 1];
                    cursor += 2;
                    let eps = cast::<T>(BN_EPSILON);
                    if batch_stats {
                        let mean = tape.col_means(cur);
                        let neg_mean = tape.mul_scalar(mean, -T::one());
                        let centered = tape.add_row(cur, neg_mean);
                        let sq = tape.mul(centered, centered);
                        let var = tape.col_means(sq);
                        let guarded = tape.add_scalar(var, eps);
                        let std = tape.sqrt(guarded);
                        let normed = tape.div_row(centered, std);
                        let scaled = tape.mul_row(normed, gamma);
                        cur = tape.add_row(scaled, beta);
                        bn_updates.push((
                            bn_cursor,
                            tape.value(mean).clone(),
                            tape.value(var).clone(),
                        ));
                    } else {
                        let st = &self.bn_states[bn_cursor];
                        let mean = tape.constant(st.running_mean.clone());
                        let var = tape.constant(st.running_var.clone());
                        let neg_mean = tape.mul_scalar(mean, -T::one());
                        let centered = tape.add_row(cur, neg_mean);
                        let guarded = tape.add_scalar(var, eps);
                        let std = tape.sqrt(guarded);
                        let normed = tape.div_row(centered, std);
                        let scaled = tape.mul_row(normed, gamma);
                        cur = tape.add_row(scaled, beta);
                    }
                    bn_cursor += 1;
                }
                LayerSpec::Softmax => {
                    logits = Some(cur);
                    cur = tape.softmax(cur);
                }
            }
            layer_outputs.push(cur);
            if li == self.hidden_tap {
                hidden = Some(cur);
            }
        }

        Ok((
            ForwardPass {
                input,
                logits: logits.expect("softmax layer present"),
                assignments: cur,
                hidden: hidden.expect("hidden tap within range"),
                params: param_nodes,
                layer_outputs,
            },
            bn_updates,
        ))
    }

    /// Guided backpropagation saliency for one input item.
    ///
    /// Differentiates the pre-softmax score of `unit` with respect to the
    /// input; at every relu the backward flow is zeroed both where the
    /// forward activation was non-positive and where the incoming flow is
    /// negative. Runs in inference mode.
    pub fn guided_backprop(&self, item: &Tensor<T>, unit: usize) -> Result<Tensor<T>> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        if unit >= self.k {
            return Err(Error::Config(format!("unit {} out of {} clusters", unit, self.k)));
        }
        if item.shape() != self.input_shape {
            return Err(Error::Data(format!(
                "item shape {:?} does not match input shape {:?}",
                item.shape(),
                self.input_shape
            )));
        }
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(&self.input_shape);
        let batch = item.reshaped(&batch_shape);

        let mut tape = Tape::new();
        let (pass, _) = self.run_forward(&mut tape, &batch, false, true, false)?;
        let score = tape.select(pass.logits, unit);
        tape.backward_guided(score);
        let grad = tape
            .grad(pass.input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&batch_shape));
        Ok(grad.reshaped(&self.input_shape))
    }

    // -- checkpoint io -------------------------------------------------------

    /// Write a versioned checkpoint: a manifest header (names, shapes, byte
    /// offsets) followed by all tensors as little-endian 32-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let append = |name: String, tensor: &Tensor<T>, param: bool, entries: &mut Vec<ManifestTensor>, blob: &mut Vec<u8>| {
            let offset = blob.len() as u64;
            for &v in tensor.data() {
                let f = v.to_f64().expect("finite") as f32;
                blob.extend_from_slice(&f.to_le_bytes());
            }
            entries.push(ManifestTensor {
                name,
                shape: tensor.shape().to_vec(),
                offset,
                len: tensor.numel() as u64,
                param,
            });
        };
        for (name, tensor) in &self.params {
            append(name.clone(), tensor, true, &mut entries, &mut blob);
        }
        for (bi, bn) in self.bn_states.iter().enumerate() {
            append(format!("bn{}.running_mean", bi), &bn.running_mean, false, &mut entries, &mut blob);
            append(format!("bn{}.running_var", bi), &bn.running_var, false, &mut entries, &mut blob);
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            layers: self.specs.clone(),
            input_shape: self.input_shape.clone(),
            k: self.k,
            hidden_tap: self.hidden_tap,
            tensors: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {}", e)))?;

        let mut f = std::fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network<T>> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", magic)));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version)));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let manifest_len = u64::from_le_bytes(len) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        f.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::Checkpoint(format!("manifest decode: {}", e)))?;
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;

        let mut net = Network::from_specs(manifest.layers, manifest.input_shape, manifest.hidden_tap)?;
        if net.k != manifest.k {
            return Err(Error::Checkpoint(format!(
                "manifest k {} disagrees with architecture k {}",
                manifest.k, net.k
            )));
        }
        let read_tensor = |entry: &ManifestTensor| -> Result<Tensor<T>> {
            let start = entry.offset as usize;
            let end = start + entry.len as usize * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("tensor {} extends past blob", entry.name)));
            }
            let mut data = Vec::with_capacity(entry.len as usize);
            for chunk in blob[start..end].chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                data.push(cast::<T>(v as f64));
            }
            if entry.shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("tensor {} shape mismatch", entry.name)));
            }
            Ok(Tensor::from_vec(&entry.shape, data))
        };

        for entry in &manifest.tensors {
            if entry.param {
                let slot = net
                    .params
                    .iter_mut()
                    .find(|(n, _)| n == &entry.name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
                slot.1 = read_tensor(entry)?;
            } else if let Some(rest) = entry.name.strip_prefix("bn") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Checkpoint(format!("bad state name {}", entry.name)))?;
                let bi: usize = idx
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad state name {}", entry.name)))?;
                if bi >= net.bn_states.len() {
                    return Err(Error::Checkpoint(format!("state index {} out of range", bi)));
                }
                match field {
                    "running_mean" => net.bn_states[bi].running_mean = read_tensor(entry)?,
                    "running_var" => net.bn_states[bi].running_var = read_tensor(entry)?,
                    other => return Err(Error::Checkpoint(format!("unknown state field {}", other))),
                }
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor {}", entry.name)));
            }
        }
        net.initialized = true;
        net.mode = Mode::Inference;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    k: usize,
    hidden_tap: usize,
    tensors: Vec<ManifestTensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    param: bool,
}
