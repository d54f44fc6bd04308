//! Sequential CNN description and loading.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::LayerProfile;
use crate::feature_store::{find, read_container};
use crate::tensor::Tensor;

use super::QuantError;

/// One entry of the model file's `layers` list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Dense {
        name: String,
        out: usize,
        #[serde(rename = "in")]
        input: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Relu,
    GlobalAvgpool,
    Flatten,
}

/// Model file contents. `weights` is resolved relative to the model file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[c, h, w]` of one input image.
    pub input_shape: Vec<usize>,
    pub weights: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub out_c: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_c, in_c, kernel, kernel]`
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub out: usize,
    pub input: usize,
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    GlobalAvgpool,
    Flatten,
}

impl Layer {
    pub fn label(&self) -> &str {
        match self {
            Layer::Conv2d(c) => &c.name,
            Layer::Dense(d) => &d.name,
            Layer::Relu => "relu",
            Layer::GlobalAvgpool => "global_avgpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Dense(d) => Some(&d.weight),
            _ => None,
        }
    }

    fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::Dense(d) => Some(&mut d.weight),
            _ => None,
        }
    }
}

/// A validated sequential model with weights attached.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Output shape (without batch) after each layer.
    shapes: Vec<Vec<usize>>,
}

fn take_tensor(tensors: &[Tensor], name: &str, shape: &[usize], layer: &str) -> Result<Tensor, QuantError> {
    let t = find(tensors, name).ok_or_else(|| QuantError::MissingTensor {
        layer: layer.to_string(),
        tensor: name.to_string(),
    })?;
    if t.shape() != shape {
        return Err(QuantError::Layer {
            layer: layer.to_string(),
            msg: format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()),
        });
    }
    Ok(t.clone())
}

fn take_bias(tensors: &[Tensor], name: &Option<String>, len: usize, layer: &str) -> Result<Option<Vec<f32>>, QuantError> {
    name.as_ref()
        .map(|n| take_tensor(tensors, n, &[len], layer).map(Tensor::into_data))
        .transpose()
}

impl ModelGraph {
    pub fn from_spec(spec: &ModelSpec, tensors: &[Tensor]) -> Result<Self, QuantError> {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    LayerSpec::Conv2d {
                        name,
                        out_c,
                        in_c,
                        kernel,
                        stride,
                        padding,
                        weight,
                        bias,
                    } => Layer::Conv2d(Conv2d {
                        weight: take_tensor(tensors, weight, &[*out_c, *in_c, *kernel, *kernel], name)?,
                        bias: take_bias(tensors, bias, *out_c, name)?,
                        name: name.clone(),
                        out_c: *out_c,
                        in_c: *in_c,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    }),
                    LayerSpec::Dense {
                        name,
                        out,
                        input,
                        weight,
                        bias,
                    } => Layer::Dense(Dense {
                        weight: take_tensor(tensors, weight, &[*out, *input], name)?,
                        bias: take_bias(tensors, bias, *out, name)?,
                        name: name.clone(),
                        out: *out,
                        input: *input,
                    }),
                    LayerSpec::Relu => Layer::Relu,
                    LayerSpec::GlobalAvgpool => Layer::GlobalAvgpool,
                    LayerSpec::Flatten => Layer::Flatten,
                })
            })
            .collect::<Result<Vec<_>, QuantError>>()?;
        Self::new(spec.name.clone(), spec.input_shape.clone(), layers)
    }

    /// Validates shape compatibility of adjacent layers.
    pub fn new(name: String, input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self, QuantError> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        if cur.len() != 3 || cur.contains(&0) {
            return Err(QuantError::Layer {
                layer: "input".into(),
                msg: format!("input shape must be [c, h, w], got {cur:?}"),
            });
        }
        for layer in &layers {
            cur = output_shape(layer, &cur)?;
            shapes.push(cur.clone());
        }
        Ok(Self {
            name,
            input_shape,
            layers,
            shapes,
        })
    }

    /// Reads a model file and the weight container it names.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuantError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QuantError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| QuantError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        let weights = path.parent().unwrap_or(Path::new(".")).join(&spec.weights);
        let (tensors, _) = read_container(&weights)?;
        Self::from_spec(&spec, &tensors)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_shape, Vec::as_slice)
    }

    pub(crate) fn shape_after(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub(crate) fn shape_before(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    /// Indices into `layers` of conv2d and dense layers, in order.
    pub fn quantizable(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn quantizable_names(&self) -> Vec<String> {
        self.quantizable().into_iter().map(|i| self.layers[i].label().to_string()).collect()
    }

    /// Parameter and MAC counts per quantizable layer. Biases are not counted.
    pub fn profile(&self) -> Vec<LayerProfile> {
        self.quantizable()
            .into_iter()
            .map(|i| {
                let layer = &self.layers[i];
                let params = layer.weight().map_or(0, Tensor::len) as u64;
                let macs = match layer {
                    Layer::Conv2d(c) => {
                        let out = self.shape_after(i);
                        (out[1] * out[2] * c.out_c * c.in_c * c.kernel * c.kernel) as u64
                    }
                    Layer::Dense(d) => (d.out * d.input) as u64,
                    _ => 0,
                };
                LayerProfile {
                    layer_id: layer.label().to_string(),
                    param_count: params,
                    mac_count: macs,
                    pinned_bits: None,
                }
            })
            .collect()
    }

    /// Replaces each quantizable layer's weight with `f(layer_index, weight)`.
    pub fn map_weights<E>(&self, mut f: impl FnMut(usize, &Tensor) -> Result<Tensor, E>) -> Result<Self, E> {
        let mut out = self.clone();
        for (k, i) in self.quantizable().into_iter().enumerate() {
            let w = out.layers[i].weight_mut().expect("quantizable layer");
            *w = f(k, w)?;
        }
        Ok(out)
    }
}

fn output_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>, QuantError> {
    let err = |msg: String| QuantError::Layer {
        layer: layer.label().to_string(),
        msg,
    };
    match layer {
        Layer::Conv2d(c) => {
            let &[ch, h, w] = input else {
                return Err(err(format!("conv2d expects [c, h, w] input, got {input:?}")));
            };
            if ch != c.in_c {
                return Err(err(format!("expects {} input channels, got {ch}", c.in_c)));
            }
            if c.stride == 0 || c.kernel == 0 {
                return Err(err("kernel and stride must be positive".into()));
            }
            let (ph, pw) = (h + 2 * c.padding, w + 2 * c.padding);
            if ph < c.kernel || pw < c.kernel {
                return Err(err(format!("kernel {} larger than padded input {ph}x{pw}", c.kernel)));
            }
            Ok(vec![c.out_c, (ph - c.kernel) / c.stride + 1, (pw - c.kernel) / c.stride + 1])
        }
        Layer::Dense(d) => match input {
            [n] if *n == d.input => Ok(vec![d.out]),
            _ => Err(err(format!("dense expects [{}] input, got {input:?}", d.input))),
        },
        Layer::Relu => Ok(input.to_vec()),
        Layer::GlobalAvgpool => match input {
            [c, _, _] => Ok(vec![*c, 1, 1]),
            _ => Err(err(format!("global_avgpool expects [c, h, w], got {input:?}"))),
        },
        Layer::Flatten => Ok(vec![input.iter().product()]),
    }
}
