//! Regenerates the committed fixture set under `fixtures/`.
//!
//!     cargo run -p csmpq --example gen_fixture -- [out_dir]
//!
//! Dataset: 10 classes of 8x8 single-channel images, each a randomly shifted
//! and scaled class prototype plus Gaussian noise. Model: three random
//! He-initialized conv layers and a random hidden dense layer, with the output
//! layer fit in closed form by ridge regression on the hidden activations.
//! Everything is seeded, so reruns produce identical files.

use std::path::PathBuf;

use csmpq::feature_store::{write_container, Metadata};
use csmpq::pipeline::{extract_features, DEFAULT_SAMPLES};
use csmpq::quantsim::{evaluate_float, forward, forward_recording, Dataset, LayerSpec, ModelGraph, ModelSpec};
use csmpq::report::{write_json, ProfileFile};
use csmpq::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

const CLASSES: usize = 10;
const SIDE: usize = 8;
const TRAIN: usize = 2000;
const EVAL: usize = 500;
const NOISE: f64 = 0.6;
const RIDGE: f64 = 1e-1;
const SEED: u64 = 7;
const FEATURE_SEED: u64 = 42;

fn prototypes(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..CLASSES)
        .map(|_| {
            let raw: Vec<f64> = (0..SIDE * SIDE).map(|_| normal.sample(rng)).collect();
            // 3x3 box blur for spatially coherent blobs.
            let mut smooth = vec![0.0; SIDE * SIDE];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                            if (0..SIDE as i32).contains(&yy) && (0..SIDE as i32).contains(&xx) {
                                acc += raw[yy as usize * SIDE + xx as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    smooth[y * SIDE + x] = acc / cnt;
                }
            }
            let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
            let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64).sqrt();
            smooth.iter().map(|v| (v - mean) / std).collect()
        })
        .collect()
}

fn sample_images(rng: &mut ChaCha8Rng, protos: &[Vec<f64>], n: usize, name: &str) -> Dataset {
    let noise = Normal::new(0.0, NOISE).unwrap();
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        let (sy, sx) = (rng.random_range(-1i32..=1), rng.random_range(-1i32..=1));
        let amp = rng.random_range(0.8..1.2);
        for y in 0..SIDE as i32 {
            for x in 0..SIDE as i32 {
                let (py, px) = (y - sy, x - sx);
                let base = if (0..SIDE as i32).contains(&py) && (0..SIDE as i32).contains(&px) {
                    protos[class][py as usize * SIDE + px as usize]
                } else {
                    0.0
                };
                data.push((amp * base + noise.sample(rng)) as f32);
            }
        }
        labels.push(class as u32);
    }
    let images = Tensor::new(name, vec![n, 1, SIDE, SIDE], data).unwrap();
    Dataset::new(images, labels).unwrap()
}

fn he(rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n = shape.iter().product();
    Tensor::new(name, shape, (0..n).map(|_| normal.sample(rng) as f32).collect()).unwrap()
}

fn bias(rng: &mut ChaCha8Rng, name: &str, n: usize) -> Tensor {
    Tensor::new(name, vec![n], (0..n).map(|_| rng.random_range(-0.05..0.05f32)).collect()).unwrap()
}

fn conv(name: &str, out_c: usize, in_c: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        name: name.into(),
        out_c,
        in_c,
        kernel: 3,
        stride,
        padding: 1,
        weight: format!("{name}.weight"),
        bias: Some(format!("{name}.bias")),
    }
}

fn dense(name: &str, out: usize, input: usize) -> LayerSpec {
    LayerSpec::Dense {
        name: name.into(),
        out,
        input,
        weight: format!("{name}.weight"),
        bias: Some(format!("{name}.bias")),
    }
}

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures")));
    std::fs::create_dir_all(&out_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let protos = prototypes(&mut rng);
    let train = sample_images(&mut rng, &protos, TRAIN, "images");
    let eval = sample_images(&mut rng, &protos, EVAL, "images");

    let spec = ModelSpec {
        name: "fixture-cnn".into(),
        input_shape: vec![1, SIDE, SIDE],
        weights: "weights.fmap".into(),
        layers: vec![
            conv("conv1", 8, 1, 1),
            LayerSpec::Relu,
            conv("conv2", 16, 8, 2),
            LayerSpec::Relu,
            conv("conv3", 16, 16, 1),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            dense("fc1", 64, 256),
            LayerSpec::Relu,
            dense("fc2", CLASSES, 64),
        ],
    };
    let mut weights = vec![
        he(&mut rng, "conv1.weight", vec![8, 1, 3, 3], 9),
        bias(&mut rng, "conv1.bias", 8),
        he(&mut rng, "conv2.weight", vec![16, 8, 3, 3], 72),
        bias(&mut rng, "conv2.bias", 16),
        he(&mut rng, "conv3.weight", vec![16, 16, 3, 3], 144),
        bias(&mut rng, "conv3.bias", 16),
        he(&mut rng, "fc1.weight", vec![64, 256], 256),
        bias(&mut rng, "fc1.bias", 64),
        Tensor::zeros("fc2.weight", vec![CLASSES, 64]).unwrap(),
        Tensor::zeros("fc2.bias", vec![CLASSES]).unwrap(),
    ];

    // Hidden activations (post-relu fc1) of the training set.
    let model = ModelGraph::from_spec(&spec, &weights).unwrap();
    let (_, feats) = forward_recording(&model, &train.images).unwrap();
    let hidden = &feats[3];
    let h = 64;
    let design = DMatrix::from_fn(TRAIN, h + 1, |r, c| {
        if c == h {
            1.0
        } else {
            hidden.data()[r * h + c] as f64
        }
    });
    let targets = DMatrix::from_fn(TRAIN, CLASSES, |r, c| if train.labels[r] as usize == c { 1.0 } else { 0.0 });
    let gram = design.transpose() * &design + DMatrix::identity(h + 1, h + 1) * (RIDGE * TRAIN as f64);
    let rhs = design.transpose() * &targets;
    let solution = gram.cholesky().expect("ridge system is positive definite").solve(&rhs);
    let fc2_w: Vec<f32> = (0..CLASSES)
        .flat_map(|o| (0..h).map(move |i| (o, i)))
        .map(|(o, i)| solution[(i, o)] as f32)
        .collect();
    let fc2_b: Vec<f32> = (0..CLASSES).map(|o| solution[(h, o)] as f32).collect();
    weights[8] = Tensor::new("fc2.weight", vec![CLASSES, h], fc2_w).unwrap();
    weights[9] = Tensor::new("fc2.bias", vec![CLASSES], fc2_b).unwrap();
    let model = ModelGraph::from_spec(&spec, &weights).unwrap();

    let train_acc = evaluate_float(&model, &train).unwrap();
    let eval_acc = evaluate_float(&model, &eval).unwrap();
    println!("train accuracy {train_acc:.4}, eval accuracy {eval_acc:.4}");

    let mut meta = Metadata::new();
    meta.insert("model".into(), json!(spec.name));
    write_container(&weights, &meta, out_dir.join("weights.fmap")).unwrap();
    write_json(&spec, out_dir.join("model.json")).unwrap();

    let labels = Tensor::new("labels", vec![EVAL], eval.labels.iter().map(|&l| l as f32).collect()).unwrap();
    let mut meta = Metadata::new();
    meta.insert("classes".into(), json!(CLASSES));
    meta.insert("noise_std".into(), json!(NOISE));
    write_container(&[eval.images.clone(), labels], &meta, out_dir.join("dataset.fmap")).unwrap();

    let logits = forward(&model, &eval.images).unwrap();
    let mut meta = Metadata::new();
    meta.insert("float_accuracy".into(), json!(eval_acc));
    write_container(&[logits], &meta, out_dir.join("reference_logits.fmap")).unwrap();

    write_json(&ProfileFile { layers: model.profile() }, out_dir.join("profile.json")).unwrap();

    let (features, meta) = extract_features(&model, &eval, DEFAULT_SAMPLES, FEATURE_SEED).unwrap();
    write_container(&features, &meta, out_dir.join("features.fmap")).unwrap();
    println!("wrote fixtures to {}", out_dir.display());
}
