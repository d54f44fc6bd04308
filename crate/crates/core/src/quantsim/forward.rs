use crate::tensor::Tensor;

use super::model::{Conv2d, Dense, Layer, ModelGraph};
use super::QuantError;

fn conv2d(c: &Conv2d, x: &[f32], in_shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    let (h, w) = (in_shape[1] as isize, in_shape[2] as isize);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = c.kernel;
    let wt = c.weight.data();
    let mut out = vec![0.0f32; c.out_c * oh * ow];
    for o in 0..c.out_c {
        let b = c.bias.as_ref().map_or(0.0, |b| b[o]);
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b;
                for ci in 0..c.in_c {
                    for ky in 0..k {
                        let iy = (y * c.stride + ky) as isize - c.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (xo * c.stride + kx) as isize - c.padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let xi = (ci * h as usize + iy as usize) * w as usize + ix as usize;
                            acc += wt[((o * c.in_c + ci) * k + ky) * k + kx] * x[xi];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    out
}

fn dense(d: &Dense, x: &[f32]) -> Vec<f32> {
    let wt = d.weight.data();
    (0..d.out)
        .map(|o| {
            let row = &wt[o * d.input..(o + 1) * d.input];
            let b = d.bias.as_ref().map_or(0.0, |b| b[o]);
            row.iter().zip(x).fold(b, |acc, (w, v)| acc + w * v)
        })
        .collect()
}

fn global_avgpool(x: &[f32], shape: &[usize]) -> Vec<f32> {
    let plane = shape[1] * shape[2];
    x.chunks_exact(plane)
        .map(|p| p.iter().sum::<f32>() / plane as f32)
        .collect()
}

fn check_input(model: &ModelGraph, input: &Tensor) -> Result<usize, QuantError> {
    let shape = input.shape();
    if shape.len() != 4 || shape[1..] != model.input_shape[..] {
        let first = model.layers.first().map_or("input", Layer::label);
        return Err(QuantError::Layer {
            layer: first.to_string(),
            msg: format!(
                "input batch has shape {shape:?}, expected [n, {}, {}, {}]",
                model.input_shape[0], model.input_shape[1], model.input_shape[2]
            ),
        });
    }
    Ok(shape[0])
}

/// Layer index after which each quantizable layer's feature map is taken:
/// the following relu when there is one, otherwise the layer itself.
fn record_points(model: &ModelGraph) -> Vec<usize> {
    model
        .quantizable()
        .into_iter()
        .map(|i| match model.layers.get(i + 1) {
            Some(Layer::Relu) => i + 1,
            _ => i,
        })
        .collect()
}

fn run(model: &ModelGraph, input: &Tensor, record: bool) -> Result<(Tensor, Vec<Tensor>), QuantError> {
    let n = check_input(model, input)?;
    let image_len: usize = model.input_shape.iter().product();
    let points = if record { record_points(model) } else { Vec::new() };
    let mut recorded: Vec<Vec<f32>> = vec![Vec::new(); points.len()];
    let out_len: usize = model.output_shape().iter().product();
    let mut logits = Vec::with_capacity(n * out_len);

    for image in input.data().chunks_exact(image_len) {
        let mut x = image.to_vec();
        for (i, layer) in model.layers.iter().enumerate() {
            let in_shape = model.shape_before(i);
            x = match layer {
                Layer::Conv2d(c) => conv2d(c, &x, in_shape, model.shape_after(i)),
                Layer::Dense(d) => dense(d, &x),
                Layer::Relu => {
                    x.iter_mut().for_each(|v| *v = v.max(0.0));
                    x
                }
                Layer::GlobalAvgpool => global_avgpool(&x, in_shape),
                Layer::Flatten => x,
            };
            for (slot, _) in points.iter().enumerate().filter(|(_, &p)| p == i) {
                recorded[slot].extend_from_slice(&x);
            }
        }
        logits.extend_from_slice(&x);
    }

    let logits = Tensor::new("logits", vec![n, out_len], logits).expect("batch output shape");
    let quantizable = model.quantizable();
    let features = points
        .iter()
        .zip(recorded)
        .zip(quantizable)
        .map(|((&p, data), q)| {
            let s = model.shape_after(p);
            let shape = match s {
                [c, h, w] => vec![n, *c, *h, *w],
                _ => vec![n, s.iter().product(), 1, 1],
            };
            Tensor::new(model.layers[q].label(), shape, data).expect("recorded feature shape")
        })
        .collect();
    Ok((logits, features))
}

/// Runs a `[n, c, h, w]` batch through the model and returns `[n, classes]`.
pub fn forward(model: &ModelGraph, input: &Tensor) -> Result<Tensor, QuantError> {
    run(model, input, false).map(|(logits, _)| logits)
}

/// Like [`forward`], also returning one `[n, c, h, w]` feature map per
/// quantizable layer (named after the layer), taken after its activation.
/// Dense outputs are recorded as `[n, out, 1, 1]`.
pub fn forward_recording(model: &ModelGraph, input: &Tensor) -> Result<(Tensor, Vec<Tensor>), QuantError> {
    run(model, input, true)
}

/// Index of the largest logit per row; the first one wins on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks_exact(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
