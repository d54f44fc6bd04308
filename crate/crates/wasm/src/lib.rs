//! Browser bindings for the interactive demo page in `www/`.
//!
//! Each exported function returns a JSON string. The logic lives in plain
//! functions so it can be tested natively.

use csmpq::allocator::{importance, model_size, solve_lp, BitRange, Budget, LayerProfile};
use csmpq::feature_store::decode;
use csmpq::quantsim::{layer_mse, quantize_dequantize, ModelGraph, ModelSpec};
use csmpq::report::ProfileFile;
use csmpq::separability::{pool_features, score_layer, PooledFeatures};
use csmpq::Tensor;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const FEATURES: &[u8] = include_bytes!("../../../fixtures/features.fmap");
const WEIGHTS: &[u8] = include_bytes!("../../../fixtures/weights.fmap");
const PROFILE: &str = include_str!("../../../fixtures/profile.json");
const MODEL: &str = include_str!("../../../fixtures/model.json");

/// Fixture layers with their separability score and cost counts.
pub fn fixture_layers_json() -> Result<Value, String> {
    let (tensors, _) = decode(FEATURES).map_err(|e| e.to_string())?;
    let profile: ProfileFile = serde_json::from_str(PROFILE).map_err(|e| e.to_string())?;
    let layers = profile
        .layers
        .iter()
        .map(|p| {
            let t = tensors
                .iter()
                .find(|t| t.name() == p.layer_id)
                .ok_or_else(|| format!("no features for `{}`", p.layer_id))?;
            let score = score_layer(&pool_features(t).map_err(|e| e.to_string())?);
            Ok(json!({
                "layer_id": p.layer_id,
                "alpha": score.alpha,
                "param_count": p.param_count,
                "mac_count": p.mac_count,
            }))
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Value::Array(layers))
}

pub struct AllocRequest<'a> {
    pub alpha: &'a [f64],
    pub params: &'a [f64],
    pub macs: &'a [f64],
    pub beta: f64,
    /// Budget as a fraction of the uniform 8-bit cost.
    pub budget_fraction: f64,
    pub use_bops: bool,
    pub act_bits: u32,
    pub min_bits: u32,
    pub max_bits: u32,
    pub pin_first_last: bool,
}

pub fn allocate_json(req: &AllocRequest) -> Result<Value, String> {
    let n = req.alpha.len();
    if req.params.len() != n || req.macs.len() != n {
        return Err("alpha, params and macs must have the same length".into());
    }
    let profiles: Vec<LayerProfile> = (0..n)
        .map(|i| LayerProfile {
            layer_id: format!("layer{i}"),
            param_count: req.params[i].max(1.0) as u64,
            mac_count: req.macs[i].max(0.0) as u64,
            pinned_bits: (req.pin_first_last && (i == 0 || i + 1 == n)).then_some(8),
        })
        .collect();
    let eight = vec![8; n];
    let reference = if req.use_bops {
        csmpq::allocator::bops(&eight, &profiles, req.act_bits)
    } else {
        model_size(&eight, &profiles)
    };
    let limit = req.budget_fraction * reference;
    let budget = if req.use_bops {
        Budget::bops(limit, req.act_bits)
    } else {
        Budget::size_bytes(limit, req.act_bits)
    };
    let range = BitRange::new(req.min_bits, req.max_bits).map_err(|e| e.to_string())?;
    let theta = importance(req.alpha, req.beta).map_err(|e| e.to_string())?;
    let config = solve_lp(&theta, &profiles, &budget, range).map_err(|e| e.to_string())?;
    Ok(json!({
        "bits": config.bits,
        "theta": theta.theta,
        "objective": config.objective,
        "relaxed_objective": config.relaxed_objective,
        "size_bytes": config.size_bytes,
        "bops": config.bops,
        "limit": limit,
        "feasible": config.feasible,
    }))
}

/// Quantizer transfer curve on `[-1, 1]`.
pub fn staircase_json(bits: u32, points: usize) -> Result<Value, String> {
    let points = points.max(2);
    let x: Vec<f32> = (0..points)
        .map(|i| -1.0 + 2.0 * i as f32 / (points - 1) as f32)
        .collect();
    let t = Tensor::new("x", vec![points], x.clone()).map_err(|e| e.to_string())?;
    let (deq, q) = quantize_dequantize(&t, bits).map_err(|e| e.to_string())?;
    Ok(json!({
        "x": x,
        "y": deq.data(),
        "scale": q.scale,
        "levels": 2 * q.qmax() + 1,
        "mse": layer_mse(&t, &deq).map_err(|e| e.to_string())?,
    }))
}

/// Weight MSE for bits 2..=8 of every fixture layer.
pub fn mse_by_bits_json() -> Result<Value, String> {
    let (tensors, _) = decode(WEIGHTS).map_err(|e| e.to_string())?;
    let spec: ModelSpec = serde_json::from_str(MODEL).map_err(|e| e.to_string())?;
    let model = ModelGraph::from_spec(&spec, &tensors).map_err(|e| e.to_string())?;
    let rows = model
        .quantizable()
        .into_iter()
        .map(|i| {
            let layer = &model.layers[i];
            let w = layer.weight().expect("quantizable");
            let mse = (2..=8)
                .map(|b| {
                    let (deq, _) = quantize_dequantize(w, b).map_err(|e| e.to_string())?;
                    layer_mse(w, &deq).map_err(|e| e.to_string())
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok(json!({ "layer_id": layer.label(), "mse": mse }))
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Value::Array(rows))
}

/// Scores a `c_out x n` matrix given row-major (feature rows).
pub fn separability_json(values: &[f64], c_out: usize, n: usize) -> Result<Value, String> {
    if c_out == 0 || n == 0 || values.len() != c_out * n {
        return Err(format!("expected {c_out} x {n} values, got {}", values.len()));
    }
    let rows: Vec<Vec<f64>> = values.chunks(n).map(<[f64]>::to_vec).collect();
    let p = PooledFeatures::from_rows("grid", &rows).map_err(|e| e.to_string())?;
    let s = score_layer(&p);
    let words: Vec<Vec<bool>> = (0..c_out).map(|i| (0..n).map(|j| s.words.contains(i, j)).collect()).collect();
    let tfidf: Vec<&[f64]> = (0..c_out).map(|i| s.tfidf_star.row(i)).collect();
    Ok(json!({
        "words": words,
        "idf": s.idf_star,
        "tfidf": tfidf,
        "word_count": s.word_count(),
        "alpha": s.alpha,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fixture_layers() -> Result<String, JsValue> {
    to_js(fixture_layers_json())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn allocate(
    alpha: Vec<f64>,
    params: Vec<f64>,
    macs: Vec<f64>,
    beta: f64,
    budget_fraction: f64,
    use_bops: bool,
    act_bits: u32,
    min_bits: u32,
    max_bits: u32,
    pin_first_last: bool,
) -> Result<String, JsValue> {
    to_js(allocate_json(&AllocRequest {
        alpha: &alpha,
        params: &params,
        macs: &macs,
        beta,
        budget_fraction,
        use_bops,
        act_bits,
        min_bits,
        max_bits,
        pin_first_last,
    }))
}

#[wasm_bindgen]
pub fn staircase(bits: u32, points: usize) -> Result<String, JsValue> {
    to_js(staircase_json(bits, points))
}

#[wasm_bindgen]
pub fn mse_by_bits() -> Result<String, JsValue> {
    to_js(mse_by_bits_json())
}

#[wasm_bindgen]
pub fn separability(values: Vec<f64>, c_out: usize, n: usize) -> Result<String, JsValue> {
    to_js(separability_json(&values, c_out, n))
}
