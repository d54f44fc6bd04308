use crate::tensor::Tensor;

use super::QuantError;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Symmetric per-tensor integer codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub q: Vec<i32>,
    pub scale: f64,
    pub bits: u32,
}

impl QuantizedTensor {
    /// Largest code magnitude, `2^(bits-1) - 1`.
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// `q * scale` without rounding to `f32`.
    pub fn dequantize_f64(&self) -> Vec<f64> {
        self.q.iter().map(|&q| q as f64 * self.scale).collect()
    }
}

fn qmax(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Fake-quantizes `w` with a symmetric restricted-range quantizer.
///
/// `scale = max|w| / qmax`, codes are rounded half away from zero. An all-zero
/// tensor gets `scale = 1` and all-zero codes.
pub fn quantize_dequantize(w: &Tensor, bits: u32) -> Result<(Tensor, QuantizedTensor), QuantError> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(QuantError::Bits(bits));
    }
    let qm = qmax(bits);
    let max_abs = w.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if !max_abs.is_finite() {
        return Err(QuantError::NonFinite(w.name().to_string()));
    }
    let (scale, q): (f64, Vec<i32>) = if max_abs == 0.0 {
        (1.0, vec![0; w.len()])
    } else {
        let q = w
            .data()
            .iter()
            .map(|&v| {
                // f64::round is half away from zero.
                let r = (v as f64 * qm as f64 / max_abs).round();
                r.clamp(-qm as f64, qm as f64) as i32
            })
            .collect();
        (max_abs / qm as f64, q)
    };
    let deq = q.iter().map(|&c| (c as f64 * scale) as f32).collect();
    let tensor = Tensor::new(w.name(), w.shape().to_vec(), deq).expect("shape unchanged");
    Ok((tensor, QuantizedTensor { q, scale, bits }))
}

/// Mean squared elementwise difference.
pub fn layer_mse(original: &Tensor, dequantized: &Tensor) -> Result<f64, QuantError> {
    if original.shape() != dequantized.shape() {
        return Err(QuantError::ShapeMismatch {
            left: original.shape().to_vec(),
            right: dequantized.shape().to_vec(),
        });
    }
    let sum: f64 = original
        .data()
        .iter()
        .zip(dequantized.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / original.len() as f64)
}
