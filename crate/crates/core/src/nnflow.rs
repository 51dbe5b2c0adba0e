//! Small dense networks with hand-derived gradients and an Adam optimizer.
//!
//! Parameters live in one flat `Vec<f64>` laid out layer by layer as
//! `W_0, b_0, W_1, b_1, ...`, with each weight matrix stored row-major as
//! `(out, in)`. Gradients use the same layout, so the optimizer never needs to
//! know about layers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z * sigmoid(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!(
                "mlp input_dim and output_dim must be >= 1 (got {} and {})",
                self.input_dim, self.output_dim
            )));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("mlp hidden_dims must be non-empty".into()));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::Config(format!("mlp hidden_dims[{pos}] must be >= 1")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

fn layer_slots(spec: &MlpSpec) -> Vec<LayerSlot> {
    let mut offset = 0;
    spec.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            slot
        })
        .collect()
}

/// Network parameters. Immutable once training is done; reads are thread-safe.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    slots: Vec<LayerSlot>,
    data: Vec<f64>,
}

/// Cached activations from a batched forward pass, consumed by [`MlpParams::backward`].
pub struct ForwardTrace {
    /// Input to each layer (`layer_inputs[0]` is the network input).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl MlpParams {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        let mut rng = rng::from_seed(spec.seed);
        for slot in params.slots.clone() {
            let scale = 1.0 / (slot.fan_in as f64).sqrt();
            let end = slot.weight_offset + slot.fan_in * slot.fan_out;
            for w in &mut params.data[slot.weight_offset..end] {
                *w = rng.random_range(-scale..scale);
            }
        }
        Ok(params)
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            slots: layer_slots(spec),
            data: vec![0.0; spec.param_count()],
            spec: spec.clone(),
        })
    }

    pub fn from_flat(spec: &MlpSpec, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_count();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, spec needs {expected}",
                data.len()
            )));
        }
        Ok(Self {
            slots: layer_slots(spec),
            data,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn total_count(&self) -> usize {
        self.data.len()
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let s = self.slots[layer];
        ArrayView2::from_shape(
            (s.fan_out, s.fan_in),
            &self.data[s.weight_offset..s.bias_offset],
        )
        .expect("layer slot matches spec")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let s = self.slots[layer];
        ArrayView1::from(&self.data[s.bias_offset..s.bias_offset + s.fan_out])
    }

    /// Zero the last layer so the network output is identically zero.
    pub fn zero_output_layer(&mut self) {
        let s = *self.slots.last().expect("at least one layer");
        self.data[s.weight_offset..s.bias_offset + s.fan_out].fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch laid out one sample per row.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        let act = self.spec.activation;
        let last = self.slots.len() - 1;
        let mut h = inputs.to_owned();
        for k in 0..=last {
            let mut z = h.dot(&self.weights(k).t());
            z += &self.bias(k);
            if k < last {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(inputs)?;
        let act = self.spec.activation;
        let last = self.slots.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.slots.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = inputs.to_owned();
        for k in 0..=last {
            let mut z = h.dot(&self.weights(k).t());
            z += &self.bias(k);
            layer_inputs.push(h);
            if k < last {
                h = z.mapv(|v| act.apply(v));
                pre_activations.push(z);
            } else {
                h = z;
            }
        }
        Ok(ForwardTrace {
            layer_inputs,
            pre_activations,
            output: h,
        })
    }

    /// Gradient of `sum_b upstream[b] . output[b]` with respect to the flat parameters.
    pub fn backward(&self, trace: &ForwardTrace, upstream: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if upstream.dim() != trace.output.dim() {
            return Err(Error::Shape(format!(
                "upstream shape {:?} does not match output shape {:?}",
                upstream.dim(),
                trace.output.dim()
            )));
        }
        let act = self.spec.activation;
        let mut grad = vec![0.0; self.data.len()];
        let mut g = upstream.to_owned();
        for k in (0..self.slots.len()).rev() {
            let s = self.slots[k];
            let dw = g.t().dot(&trace.layer_inputs[k]);
            grad[s.weight_offset..s.bias_offset]
                .copy_from_slice(dw.as_standard_layout().as_slice().expect("standard layout"));
            let db = g.sum_axis(Axis(0));
            grad[s.bias_offset..s.bias_offset + s.fan_out]
                .copy_from_slice(db.as_slice().expect("contiguous"));
            if k > 0 {
                let mut prev = g.dot(&self.weights(k));
                prev.zip_mut_with(&trace.pre_activations[k - 1], |d, &z| {
                    *d *= act.derivative(z)
                });
                g = prev;
            }
        }
        Ok(grad)
    }

    /// Gradient of `upstream . f(input)` for one input.
    pub fn grad(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.spec.output_dim {
            return Err(Error::Shape(format!(
                "upstream has length {}, network output_dim is {}",
                upstream.len(),
                self.spec.output_dim
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let trace = self.forward_trace(x)?;
        let u = ArrayView2::from_shape((1, upstream.len()), upstream)
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.backward(&trace, u)
    }

    fn check_input(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network input_dim is {}",
                inputs.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient or update is
    /// rejected and leaves both the state and the parameters untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: gradient length {}, parameter length {}, state length {}",
                grad.len(),
                params.len(),
                self.m.len()
            )));
        }
        let step = self.t as usize + 1;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                step,
                msg: format!("non-finite gradient entry {i}: {}", grad[i]),
            });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut m_new = Vec::with_capacity(grad.len());
        let mut v_new = Vec::with_capacity(grad.len());
        let mut p_new = Vec::with_capacity(grad.len());
        for ((&g, (&m, &v)), &p) in grad
            .iter()
            .zip(self.m.iter().zip(self.v.iter()))
            .zip(params.iter())
        {
            let m1 = beta1 * m + (1.0 - beta1) * g;
            let v1 = beta2 * v + (1.0 - beta2) * g * g;
            let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
            m_new.push(m1);
            v_new.push(v1);
            p_new.push(p - update);
        }
        if let Some(i) = p_new.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numerical {
                step,
                msg: format!("update made parameter {i} non-finite"),
            });
        }
        params.copy_from_slice(&p_new);
        self.m = m_new;
        self.v = v_new;
        self.t += 1;
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PFMCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    spec: MlpSpec,
    count: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Binary checkpoint: magic, LE `u32` version, LE `u32` header length, a JSON
/// header carrying the spec, then `count` little-endian `f64` parameters.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &MlpParams,
    extra: &serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        spec: params.spec.clone(),
        count: params.data.len(),
        extra: extra.clone(),
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for v in &params.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MlpParams, serde_json::Value)> {
    let bad = |msg: String| Error::Parse { line: 0, msg };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| bad(format!("checkpoint header: {e}")))?;
    if header.count != header.spec.param_count() {
        return Err(bad(format!(
            "header declares {} parameters, spec needs {}",
            header.count,
            header.spec.param_count()
        )));
    }
    let mut bytes = vec![0u8; header.count * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((MlpParams::from_flat(&header.spec, data)?, header.extra))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &MlpParams,
    extra: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), params, extra)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MlpParams, serde_json::Value)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

/// Turn a slice of equal-length rows into a batch matrix.
pub fn rows_to_array(rows: &[Vec<f64>], cols: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Shape(format!(
                "row {i} has length {}, expected {cols}",
                row.len()
            )));
        }
        out.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
    }
    Ok(out)
}

pub fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}
