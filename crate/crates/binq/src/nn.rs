//! Binarization-aware layers and model assembly.
//!
//! Weight binarization replaces a layer's weights with `s_n · F(w*)` in the
//! forward pass, where `s_n = mean|w*|` is recomputed every forward and
//! treated as a constant; the backward pass multiplies the incoming gradient
//! by `B(w*) · s_n`. Activation binarization (BWA) quantizes the pre-GEMM
//! activations with the same kind of forward-backward node, and BWAA
//! additionally wraps each binarized layer's integer accumulators into the
//! 8-bit window.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomGradSpec, Tape, VarId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::quantizers::{sign_q, QuantizerPair};
use crate::tensor::Tensor;

/// Cyclic 8-bit accumulator wrap: `((v + 128) mod 256) − 128`.
pub fn wrap_value_i8(v: f64) -> f64 {
    (v + 128.0).rem_euclid(256.0) - 128.0
}

/// Wrap a tensor of integer dot products into the 8-bit window; returns the
/// wrapped tensor and the fraction of values that overflowed.
pub fn accumulator_wrap(acc: &Tensor, bits: u8) -> Result<(Tensor, f64)> {
    if bits != 8 {
        return Err(Error::Config(format!(
            "unsupported accumulator width {bits}: only 8-bit wrapping is implemented"
        )));
    }
    let overflow = acc
        .data()
        .iter()
        .filter(|&&v| !(-128.0..=127.0).contains(&v))
        .count();
    let rate = if acc.numel() == 0 { 0.0 } else { overflow as f64 / acc.numel() as f64 };
    Ok((acc.map(wrap_value_i8), rate))
}

/// Elementwise `F(x)` with backward multiplier `B(x)`.
pub fn bin_activation(tape: &Tape, x: VarId, pair: &QuantizerPair) -> VarId {
    tape.apply_custom(
        x,
        CustomGradSpec { forward: &|v| pair.forward(v), backward: &|v| pair.backward(v) },
    )
}

/// Quantize a weight tensor on the tape: forward `s·F(w*)`, backward
/// multiplier `s·B(w*)`; returns the quantized node and the scale used.
pub fn bin_weight(tape: &Tape, w: VarId, pair: &QuantizerPair, scale: bool) -> (VarId, f64) {
    let s = if scale { tape.value(w).mean_abs() } else { 1.0 };
    let node = tape.apply_custom(
        w,
        CustomGradSpec {
            forward: &|v| s * pair.forward(v),
            backward: &|v| s * pair.backward(v),
        },
    );
    (node, s)
}

/// Binarized linear layer: `x · (s·F(w*))` plus an optional (never
/// binarized) bias.
pub fn bin_linear_forward(
    tape: &Tape,
    x: VarId,
    w: VarId,
    bias: Option<VarId>,
    pair: &QuantizerPair,
    scale: bool,
) -> Result<VarId> {
    let (wq, _s) = bin_weight(tape, w, pair, scale);
    let mut out = tape.matmul(x, wq)?;
    if let Some(b) = bias {
        out = tape.add_bias(out, b)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Binarize weights only.
    Bw,
    /// Binarize weights and pre-GEMM activations.
    Bwa,
    /// BWA plus 8-bit accumulator wrapping.
    Bwaa,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Linear { inp: usize, out: usize },
    Conv2d { cin: usize, cout: usize, k: usize, stride: usize, padding: usize },
    Relu,
    Pool,
    Flatten,
    Norm { mean: f64, std: f64 },
}

impl LayerKind {
    fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }
}

/// One assembled layer with its quantization points resolved.
#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub quantize_weights: bool,
    pub quantize_acts: bool,
    pub wrap_acc: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub mode: TaskMode,
}

/// Per-forward diagnostics.
#[derive(Clone, Debug, Default)]
pub struct ForwardStats {
    /// `(layer name, s_n)` for each weight-quantized layer.
    pub scales: Vec<(String, f64)>,
    /// `(layer name, overflow fraction)` for each wrapped layer.
    pub overflow: Vec<(String, f64)>,
}

/// Loss, batch accuracy, and gradients from one training forward/backward.
pub struct BatchResult {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Vec<Tensor>,
    pub stats: ForwardStats,
}

pub struct ForwardPass {
    pub logits: VarId,
    /// Tape vars of the parameters, in [`Model::init_params`] order.
    pub param_vars: Vec<VarId>,
    pub stats: ForwardStats,
}

/// Remove relu layers whose output reaches a sign-quantized layer input
/// (directly or through pool/flatten): sign of a nonnegative tensor is the
/// constant +1 under the sign(0) = +1 tie-break, so the sign activation
/// subsumes the nonlinearity there.
fn drop_relu_before_sign(layers: Vec<Layer>) -> Vec<Layer> {
    let doomed: Vec<bool> = layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if !matches!(l.kind, LayerKind::Relu) {
                return false;
            }
            for next in &layers[i + 1..] {
                match next.kind {
                    LayerKind::Pool | LayerKind::Flatten => continue,
                    _ => return next.quantize_acts,
                }
            }
            false
        })
        .collect();
    layers.into_iter().zip(doomed).filter(|(_, d)| !d).map(|(l, _)| l).collect()
}

impl Model {
    /// Assemble a model, installing quantization points per mode. The first
    /// and last weighted layers stay full-precision when `fp_edges` is set
    /// (the usual practice).
    pub fn build(specs: &[LayerKind], mode: TaskMode, fp_edges: bool) -> Result<Model> {
        let weighted: Vec<usize> = specs
            .iter()
            .enumerate()
            .filter(|(_, k)| k.has_weights())
            .map(|(i, _)| i)
            .collect();
        if weighted.is_empty() {
            return Err(Error::Config("model has no weighted layers".into()));
        }
        let first = *weighted.first().unwrap();
        let last = *weighted.last().unwrap();
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                let edge = fp_edges && (i == first || i == last);
                let quantize_weights = kind.has_weights() && !edge;
                let quantize_acts =
                    quantize_weights && matches!(mode, TaskMode::Bwa | TaskMode::Bwaa);
                let wrap_acc = quantize_acts && mode == TaskMode::Bwaa;
                let name = match kind {
                    LayerKind::Linear { .. } => format!("linear{i}"),
                    LayerKind::Conv2d { .. } => format!("conv{i}"),
                    LayerKind::Relu => format!("relu{i}"),
                    LayerKind::Pool => format!("pool{i}"),
                    LayerKind::Flatten => format!("flatten{i}"),
                    LayerKind::Norm { .. } => format!("norm{i}"),
                };
                Layer { name, kind: kind.clone(), quantize_weights, quantize_acts, wrap_acc }
            })
            .collect();
        let layers = drop_relu_before_sign(layers);
        Ok(Model { layers, mode })
    }

    /// Parameter tensors in forward order: weight then bias per weighted
    /// layer, Xavier-uniform init, deterministic under seed.
    pub fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Linear { inp, out } => {
                    let bound = (6.0 / (inp + out) as f64).sqrt();
                    let w: Vec<f64> =
                        (0..inp * out).map(|_| rng.gen_range(-bound..bound)).collect();
                    params.push(Tensor::new(vec![inp, out], w).unwrap());
                    params.push(Tensor::zeros(&[out]));
                }
                LayerKind::Conv2d { cin, cout, k, .. } => {
                    let fan_in = cin * k * k;
                    let fan_out = cout * k * k;
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let w: Vec<f64> =
                        (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
                    params.push(Tensor::new(vec![cout, cin, k, k], w).unwrap());
                    params.push(Tensor::zeros(&[cout]));
                }
                _ => {}
            }
        }
        params
    }

    /// Names of the parameter tensors, matching [`Model::init_params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            if layer.kind.has_weights() {
                names.push(format!("{}.weight", layer.name));
                names.push(format!("{}.bias", layer.name));
            }
        }
        names
    }

    /// Whether the parameter at `index` is a binarized weight tensor.
    pub fn param_is_binarized(&self, index: usize) -> bool {
        let mut i = 0;
        for layer in &self.layers {
            if layer.kind.has_weights() {
                if i == index {
                    return layer.quantize_weights;
                }
                if i + 1 == index {
                    return false; // bias
                }
                i += 2;
            }
        }
        false
    }

    /// Build the forward graph for a batch; `weight_pair` drives weight
    /// quantization, `act_pair` activation quantization.
    pub fn forward(
        &self,
        tape: &Tape,
        x: Tensor,
        params: &[Tensor],
        weight_pair: &QuantizerPair,
        act_pair: &QuantizerPair,
    ) -> Result<ForwardPass> {
        let mut stats = ForwardStats::default();
        let mut param_vars = Vec::with_capacity(params.len());
        let mut next_param = 0;
        let mut h = tape.var(x);
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                    let w = tape.var(params[next_param].clone());
                    let b = tape.var(params[next_param + 1].clone());
                    param_vars.push(w);
                    param_vars.push(b);
                    next_param += 2;

                    let mut xin = h;
                    if layer.quantize_acts {
                        xin = bin_activation(tape, xin, act_pair);
                    }
                    if layer.wrap_acc {
                        // unscaled ±1 weights → integer accumulators → wrap →
                        // scale → bias
                        let (wq, s) = bin_weight(tape, w, weight_pair, false);
                        let scale = tape.value(w).mean_abs();
                        let acc = match layer.kind {
                            LayerKind::Linear { .. } => tape.matmul(xin, wq)?,
                            _ => conv_forward(tape, xin, wq, &layer.kind)?,
                        };
                        let rate = {
                            let v = tape.value(acc);
                            v.data().iter().filter(|&&x| !(-128.0..=127.0).contains(&x)).count()
                                as f64
                                / v.numel() as f64
                        };
                        stats.overflow.push((layer.name.clone(), rate));
                        stats.scales.push((layer.name.clone(), scale));
                        let _ = s;
                        let wrapped = tape.wrap_i8(acc);
                        let scaled = tape.scale(wrapped, scale);
                        h = tape.add_bias(scaled, b)?;
                    } else if layer.quantize_weights {
                        let (wq, s) = bin_weight(tape, w, weight_pair, true);
                        stats.scales.push((layer.name.clone(), s));
                        let out = match layer.kind {
                            LayerKind::Linear { .. } => tape.matmul(xin, wq)?,
                            _ => conv_forward(tape, xin, wq, &layer.kind)?,
                        };
                        h = tape.add_bias(out, b)?;
                    } else {
                        let out = match layer.kind {
                            LayerKind::Linear { .. } => tape.matmul(xin, w)?,
                            _ => conv_forward(tape, xin, w, &layer.kind)?,
                        };
                        h = tape.add_bias(out, b)?;
                    }
                }
                LayerKind::Relu => h = tape.relu(h),
                LayerKind::Pool => h = tape.max_pool2(h)?,
                LayerKind::Flatten => h = tape.flatten(h)?,
                LayerKind::Norm { mean, std } => {
                    let (m, s) = (*mean, *std);
                    h = tape.apply_custom(
                        h,
                        CustomGradSpec {
                            forward: &|v| (v - m) / s,
                            backward: &|_| 1.0 / s,
                        },
                    );
                }
            }
        }
        Ok(ForwardPass { logits: h, param_vars, stats })
    }

    /// Cross-entropy loss, batch accuracy, and parameter gradients for one
    /// batch.
    pub fn loss_and_grads(
        &self,
        x: Tensor,
        labels: &[usize],
        params: &[Tensor],
        weight_pair: &QuantizerPair,
        act_pair: &QuantizerPair,
    ) -> Result<BatchResult> {
        let tape = Tape::new();
        let pass = self.forward(&tape, x, params, weight_pair, act_pair)?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        let loss_val = tape.value(loss).item();
        let accuracy = {
            let logits = tape.value(pass.logits);
            let classes = logits.shape()[1];
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(i, &label)| {
                    let row = &logits.data()[i * classes..(i + 1) * classes];
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    argmax == label
                })
                .count();
            correct as f64 / labels.len().max(1) as f64
        };
        let mut grads = tape.backward(loss);
        let grads = pass.param_vars.iter().map(|&v| grads.take(v)).collect();
        Ok(BatchResult { loss: loss_val, accuracy, grads, stats: pass.stats })
    }

    /// Classification accuracy over a dataset.
    pub fn evaluate(
        &self,
        dataset: &Dataset,
        params: &[Tensor],
        weight_pair: &QuantizerPair,
        act_pair: &QuantizerPair,
        batch: usize,
    ) -> Result<f64> {
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..dataset.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (x, labels) = dataset.gather(chunk);
            let tape = Tape::new();
            let pass = self.forward(&tape, x, params, weight_pair, act_pair)?;
            let logits = tape.value(pass.logits);
            let classes = logits.shape()[1];
            for (i, &label) in labels.iter().enumerate() {
                let row = &logits.data()[i * classes..(i + 1) * classes];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / dataset.len().max(1) as f64)
    }
}

fn conv_forward(tape: &Tape, x: VarId, w: VarId, kind: &LayerKind) -> Result<VarId> {
    let LayerKind::Conv2d { stride, padding, .. } = kind else {
        return Err(Error::Config("conv_forward on non-conv layer".into()));
    };
    tape.conv2d(x, w, *stride, *padding)
}

/// Bit-packed binary weight tensor: bit 1 ⇔ positive, LSB-first.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBinaryTensor {
    pub shape: Vec<usize>,
    pub scale: f32,
    pub bits: Vec<u8>,
}

/// Pack a tensor whose entries are exactly `±s`.
pub fn pack_weights(w: &Tensor, s: f64) -> Result<PackedBinaryTensor> {
    let mut bits = vec![0u8; w.numel().div_ceil(8)];
    for (i, &v) in w.data().iter().enumerate() {
        if v == s {
            bits[i / 8] |= 1 << (i % 8);
        } else if v != -s {
            return Err(Error::Pack { index: i, value: v, scale: s });
        }
    }
    Ok(PackedBinaryTensor { shape: w.shape().to_vec(), scale: s as f32, bits })
}

pub fn unpack_weights(p: &PackedBinaryTensor) -> Tensor {
    let n: usize = p.shape.iter().product();
    let s = p.scale as f64;
    let data = (0..n)
        .map(|i| if p.bits[i / 8] >> (i % 8) & 1 == 1 { s } else { -s })
        .collect();
    Tensor::new(p.shape.clone(), data).unwrap()
}

/// A packed model: the binarized layers of a trained network.
#[derive(Clone, Debug, Default)]
pub struct PackedModel {
    pub layers: Vec<(String, PackedBinaryTensor)>,
}

const BQW_MAGIC: &[u8; 4] = b"BQW1";

impl PackedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(BQW_MAGIC);
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (name, t) in &self.layers {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&t.scale.to_le_bytes());
            buf.extend_from_slice(&t.bits);
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*at..*at + n)
                .ok_or_else(|| Error::Format("truncated .bqw file".into()))?;
            *at += n;
            Ok(s)
        };
        if take(&mut at, 4)? != BQW_MAGIC {
            return Err(Error::Format("bad .bqw magic".into()));
        }
        let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut at, nlen)?.to_vec())
                .map_err(|e| Error::Format(e.to_string()))?;
            let rank = take(&mut at, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
            }
            let scale = f32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
            let n: usize = shape.iter().product();
            let bits = take(&mut at, n.div_ceil(8))?.to_vec();
            layers.push((name, PackedBinaryTensor { shape, scale, bits }));
        }
        Ok(PackedModel { layers })
    }
}

/// Export a trained model: binarized weights go packed (hard sign of `w*`,
/// scaled), everything else into an FP checkpoint map.
pub fn export_model(
    model: &Model,
    params: &[Tensor],
) -> (PackedModel, Vec<(String, Tensor)>) {
    let names = model.param_names();
    let mut packed = PackedModel::default();
    let mut fp = Vec::new();
    for (i, (name, t)) in names.iter().zip(params).enumerate() {
        if model.param_is_binarized(i) {
            let s = t.mean_abs();
            let hard = t.map(|v| s * sign_q(v));
            packed.layers.push((name.clone(), pack_weights(&hard, s).unwrap()));
        } else {
            fp.push((name.clone(), t.clone()));
        }
    }
    (packed, fp)
}

/// FP checkpoint: JSON manifest (`name → shape`) next to a raw little-endian
/// f32 blob.
pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    #[derive(Serialize)]
    struct Entry<'a> {
        name: &'a str,
        shape: &'a [usize],
        dtype: &'static str,
    }
    let manifest: Vec<Entry> = tensors
        .iter()
        .map(|(n, t)| Entry { name: n, shape: t.shape(), dtype: "f32" })
        .collect();
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let mut blob = Vec::new();
    for (_, t) in tensors {
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    #[derive(Deserialize)]
    struct Entry {
        name: String,
        shape: Vec<usize>,
    }
    let manifest: Vec<Entry> =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
    let mut blob = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut blob)?;
    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(Error::Format(format!(
            "checkpoint blob {} bytes, manifest implies {}",
            blob.len(),
            total * 4
        )));
    }
    let mut out = Vec::with_capacity(manifest.len());
    let mut at = 0;
    for e in manifest {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = blob[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        at += 4 * n;
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

/// Per-layer memory accounting for a packed model plus its FP remainder.
pub struct MemoryRow {
    pub name: String,
    pub fp_bytes: usize,
    pub stored_bytes: usize,
}

pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
    pub ratio: f64,
}

pub fn report_memory(
    packed: &PackedModel,
    fp_layers: &[(String, Vec<usize>)],
) -> Result<MemoryReport> {
    if packed.layers.is_empty() && fp_layers.is_empty() {
        return Err(Error::Format("empty model".into()));
    }
    let mut rows = Vec::new();
    for (name, t) in &packed.layers {
        let numel: usize = t.shape.iter().product();
        // per-layer .bqw header: name record + rank byte + dims + scale
        let header = 4 + name.len() + 1 + 4 * t.shape.len() + 4;
        rows.push(MemoryRow {
            name: name.clone(),
            fp_bytes: 4 * numel,
            stored_bytes: header + t.bits.len(),
        });
    }
    for (name, shape) in fp_layers {
        let numel: usize = shape.iter().product();
        rows.push(MemoryRow { name: name.clone(), fp_bytes: 4 * numel, stored_bytes: 4 * numel });
    }
    let fp: usize = rows.iter().map(|r| r.fp_bytes).sum();
    let stored: usize = rows.iter().map(|r| r.stored_bytes).sum::<usize>() + 8; // file magic+count
    Ok(MemoryReport { rows, ratio: fp as f64 / stored as f64 })
}
