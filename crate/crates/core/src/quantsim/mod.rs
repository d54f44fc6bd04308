//! Weight fake-quantization and desk-scale evaluation.
//!
//! Only weights are quantized. Activations stay in `f32`; the activation
//! bit-width only enters BOPs accounting. Biases are never quantized.

mod forward;
mod model;
mod quantize;

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator;
use crate::feature_store::{find, read_container, FmapError};
use crate::tensor::Tensor;

pub use forward::{argmax_rows, forward, forward_recording};
pub use model::{Conv2d, Dense, Layer, LayerSpec, ModelGraph, ModelSpec};
pub use quantize::{layer_mse, quantize_dequantize, QuantizedTensor, MAX_BITS, MIN_BITS};

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("bit-width {0} outside the supported range 2..=8")]
    Bits(u32),
    #[error("tensor `{0}` has non-finite values")]
    NonFinite(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("layer `{layer}`: {msg}")]
    Layer { layer: String, msg: String },
    #[error("layer `{layer}`: weight container has no tensor `{tensor}`")]
    MissingTensor { layer: String, tensor: String },
    #[error("config has {config} bit-widths but the model has {layers} quantizable layers")]
    ConfigLength { config: usize, layers: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Container(#[from] FmapError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Labeled image batch.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, c, h, w]`
    pub images: Tensor,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>) -> Result<Self, QuantError> {
        if images.shape().len() != 4 {
            return Err(QuantError::Dataset(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(QuantError::Dataset(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    /// Reads the `images` and `labels` tensors of a container.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuantError> {
        let (tensors, _) = read_container(path)?;
        Self::from_tensors(&tensors)
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self, QuantError> {
        let images = find(tensors, "images").ok_or_else(|| QuantError::Dataset("missing `images` tensor".into()))?;
        let labels = find(tensors, "labels").ok_or_else(|| QuantError::Dataset("missing `labels` tensor".into()))?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(QuantError::Dataset(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(images.clone(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch with the given image indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let shape = self.images.shape();
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = indices.len();
        Self {
            images: Tensor::new(self.images.name(), new_shape, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[u32]) -> f64 {
    let pred = argmax_rows(logits);
    let correct = pred.iter().zip(labels).filter(|(&p, &l)| p == l as usize).count();
    if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layer_ids: Vec<String>,
    pub bits: Vec<u32>,
    pub per_layer_mse: Vec<f64>,
    pub activation_bits: u32,
    pub accuracy: f64,
    pub size_bytes: f64,
    pub bops: f64,
}

/// Fake-quantizes every quantizable layer at its bit-width. Returns the new
/// model and the per-layer weight MSE.
pub fn quantize_model(model: &ModelGraph, bits: &[u32]) -> Result<(ModelGraph, Vec<f64>), QuantError> {
    let layers = model.quantizable();
    if bits.len() != layers.len() {
        return Err(QuantError::ConfigLength {
            config: bits.len(),
            layers: layers.len(),
        });
    }
    let mut mse = Vec::with_capacity(bits.len());
    let quantized = model.map_weights(|k, w| {
        let (deq, _) = quantize_dequantize(w, bits[k])?;
        mse.push(layer_mse(w, &deq)?);
        Ok::<_, QuantError>(deq)
    })?;
    Ok((quantized, mse))
}

/// Quantizes weights per `bits`, runs the dataset, and reports accuracy,
/// per-layer MSE, size and BOPs.
pub fn evaluate_config(
    model: &ModelGraph,
    bits: &[u32],
    dataset: &Dataset,
    activation_bits: u32,
) -> Result<EvalReport, QuantError> {
    let (quantized, per_layer_mse) = quantize_model(model, bits)?;
    let logits = forward(&quantized, &dataset.images)?;
    let profile = model.profile();
    Ok(EvalReport {
        layer_ids: model.quantizable_names(),
        bits: bits.to_vec(),
        per_layer_mse,
        activation_bits,
        accuracy: top1_accuracy(&logits, &dataset.labels),
        size_bytes: allocator::model_size(bits, &profile),
        bops: allocator::bops(bits, &profile, activation_bits),
    })
}

/// Accuracy of the unquantized model.
pub fn evaluate_float(model: &ModelGraph, dataset: &Dataset) -> Result<f64, QuantError> {
    let logits = forward(model, &dataset.images)?;
    Ok(top1_accuracy(&logits, &dataset.labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_dense() -> ModelGraph {
        let layer = Layer::Dense(Dense {
            name: "fc".into(),
            out: 2,
            input: 3,
            weight: Tensor::new("fc.weight", vec![2, 3], vec![0.9, -0.3, 0.1, -0.2, 0.7, 0.05]).unwrap(),
            bias: Some(vec![0.01, -0.01]),
        });
        ModelGraph::new("one".into(), vec![3, 1, 1], vec![Layer::Flatten, layer]).unwrap()
    }

    fn data() -> Dataset {
        let images = Tensor::new("images", vec![2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        Dataset::new(images, vec![0, 1]).unwrap()
    }

    #[test]
    fn single_layer_report_is_deterministic() {
        let m = single_dense();
        let a = evaluate_config(&m, &[8], &data(), 8).unwrap();
        let b = evaluate_config(&m, &[8], &data(), 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.accuracy, 1.0);
        assert_eq!(a.size_bytes, 6.0);
        assert_eq!(a.bops, 6.0 * 8.0 * 8.0);
        assert_eq!(a.layer_ids, vec!["fc".to_string()]);
    }

    #[test]
    fn config_length_mismatch() {
        let err = evaluate_config(&single_dense(), &[8, 8], &data(), 8).unwrap_err();
        assert!(matches!(err, QuantError::ConfigLength { config: 2, layers: 1 }));
    }

    #[test]
    fn dataset_validation() {
        let images = Tensor::zeros("images", vec![2, 1, 1, 1]).unwrap();
        assert!(Dataset::new(images.clone(), vec![0]).is_err());
        let labels = Tensor::new("labels", vec![2], vec![0.0, 1.5]).unwrap();
        assert!(Dataset::from_tensors(&[images, labels]).is_err());
    }
}
