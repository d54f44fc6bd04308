//! Layer class-separability scoring with a masked TF-IDF.
//!
//! Each sampled image is a "document" and each pooled channel is a candidate
//! "word". A channel counts as a word for an image when its pooled activation
//! lies at least one population standard deviation away from that image's
//! mean channel activation. The layer score is the summed TF-IDF mass divided
//! by the total number of word occurrences in the layer.

use crate::tensor::Tensor;

/// Added to the per-image activation sum in the TF denominator.
pub const TF_EPSILON: f64 = 1e-12;

/// Relative slack on the word threshold. Deviations equal to the standard
/// deviation in exact arithmetic (e.g. any image with two channels) must not
/// be decided by rounding.
pub const THRESHOLD_RTOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SeparabilityError {
    #[error("layer `{layer}`: expected a 4-D feature map [n, c, h, w], got shape {shape:?}")]
    NotFourD { layer: String, shape: Vec<usize> },
    #[error("layer `{layer}`: non-finite pooled value at feature {feature}, image {image}")]
    NonFinite { layer: String, feature: usize, image: usize },
    #[error("empty feature matrix ({rows} x {cols})")]
    Empty { rows: usize, cols: usize },
    #[error("ragged feature matrix: row {row} has {len} entries, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("document {doc} has no term occurrences")]
    EmptyDocument { doc: usize },
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SeparabilityError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(SeparabilityError::Empty { rows: r, cols: c });
        }
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(SeparabilityError::Ragged {
                    row: i,
                    len: row.len(),
                    expected: c,
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |i| self.get(i, j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Pooled features of one layer: `values[i][j]` is channel `i` of image `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub layer_id: String,
    pub values: Matrix,
    pub image_ids: Vec<usize>,
    /// Carried through for reporting; scoring does not look at it.
    pub class_ids: Option<Vec<u32>>,
}

impl PooledFeatures {
    /// Builds from a `c_out x n` matrix given as feature rows.
    pub fn from_rows(layer_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self, SeparabilityError> {
        let layer_id = layer_id.into();
        let values = Matrix::from_rows(rows)?;
        check_finite(&layer_id, &values)?;
        Ok(Self {
            image_ids: (0..values.cols()).collect(),
            class_ids: None,
            layer_id,
            values,
        })
    }

    pub fn c_out(&self) -> usize {
        self.values.rows()
    }

    pub fn n_images(&self) -> usize {
        self.values.cols()
    }

    /// Reorders images so that new column `k` is old column `order[k]`.
    pub fn permute_images(&self, order: &[usize]) -> Self {
        let mut values = Matrix::zeros(self.c_out(), self.n_images());
        for i in 0..self.c_out() {
            for (k, &j) in order.iter().enumerate() {
                values.set(i, k, self.values.get(i, j));
            }
        }
        Self {
            layer_id: self.layer_id.clone(),
            values,
            image_ids: order.iter().map(|&j| self.image_ids[j]).collect(),
            class_ids: self
                .class_ids
                .as_ref()
                .map(|c| order.iter().map(|&j| c[j]).collect()),
        }
    }

    /// Reorders channels so that new row `k` is old row `order[k]`.
    pub fn permute_features(&self, order: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| self.values.row(i).to_vec()).collect();
        Self {
            values: Matrix::from_rows(&rows).expect("permutation of a valid matrix"),
            ..self.clone()
        }
    }

    /// Multiplies every channel of image `j` by `c`.
    pub fn scale_image(&self, j: usize, c: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.c_out() {
            out.values.set(i, j, self.values.get(i, j) * c);
        }
        out
    }
}

fn check_finite(layer: &str, values: &Matrix) -> Result<(), SeparabilityError> {
    for i in 0..values.rows() {
        for j in 0..values.cols() {
            if !values.get(i, j).is_finite() {
                return Err(SeparabilityError::NonFinite {
                    layer: layer.to_string(),
                    feature: i,
                    image: j,
                });
            }
        }
    }
    Ok(())
}

/// Global average pool of an `[n, c, h, w]` feature map into a `c x n` matrix.
pub fn pool_features(feature_map: &Tensor) -> Result<PooledFeatures, SeparabilityError> {
    let &[n, c, h, w] = feature_map.shape() else {
        return Err(SeparabilityError::NotFourD {
            layer: feature_map.name().to_string(),
            shape: feature_map.shape().to_vec(),
        });
    };
    let plane = h * w;
    let data = feature_map.data();
    let mut values = Matrix::zeros(c, n);
    for j in 0..n {
        for i in 0..c {
            let start = (j * c + i) * plane;
            let sum: f64 = data[start..start + plane].iter().map(|&v| v as f64).sum();
            values.set(i, j, sum / plane as f64);
        }
    }
    check_finite(feature_map.name(), &values)?;
    Ok(PooledFeatures {
        layer_id: feature_map.name().to_string(),
        values,
        image_ids: (0..n).collect(),
        class_ids: None,
    })
}

/// Per-channel sets of images in which the channel is a word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSets {
    /// `mask[i * n + j]` is true iff image `j` is in the set of feature `i`.
    mask: Vec<bool>,
    c_out: usize,
    n: usize,
}

impl WordSets {
    pub fn from_mask(mask: Vec<bool>, c_out: usize, n: usize) -> Self {
        assert_eq!(mask.len(), c_out * n, "mask size");
        Self { mask, c_out, n }
    }

    pub fn contains(&self, feature: usize, image: usize) -> bool {
        self.mask[feature * self.n + image]
    }

    /// Sorted image indices of the set of `feature`.
    pub fn set(&self, feature: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.contains(feature, j)).collect()
    }

    pub fn set_size(&self, feature: usize) -> usize {
        self.mask[feature * self.n..(feature + 1) * self.n]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Total word occurrences across all features.
    pub fn total(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// Number of documents (sampled images).
    pub fn sample_size(&self) -> usize {
        self.n
    }
}

/// Marks channel `i` as a word of image `j` when
/// `|A[i][j] - mean_j| >= std_j`, statistics taken over the channels of image `j`.
pub fn select_words(features: &PooledFeatures) -> WordSets {
    let (c_out, n) = (features.c_out(), features.n_images());
    let mut mask = vec![false; c_out * n];
    for j in 0..n {
        let col: Vec<f64> = features.values.column(j).collect();
        if col.iter().all(|&v| v.to_bits() == col[0].to_bits()) {
            // Zero variance: every deviation (0) meets the threshold (0).
            for i in 0..c_out {
                mask[i * n + j] = true;
            }
            continue;
        }
        let mean = col.iter().sum::<f64>() / c_out as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c_out as f64;
        let std = var.sqrt();
        for (i, v) in col.iter().enumerate() {
            mask[i * n + j] = (v - mean).abs() >= std * (1.0 - THRESHOLD_RTOL);
        }
    }
    WordSets { mask, c_out, n }
}

fn check_dims(words: &WordSets, rows: usize, cols: usize) -> Result<(), SeparabilityError> {
    if words.c_out != rows || words.n != cols {
        return Err(SeparabilityError::Dimensions(format!(
            "word sets are {}x{}, matrix is {rows}x{cols}",
            words.c_out, words.n
        )));
    }
    Ok(())
}

/// Masked term frequency: the word's activation over the image's total activation.
pub fn term_frequency(features: &PooledFeatures, words: &WordSets) -> Result<Matrix, SeparabilityError> {
    let (c_out, n) = (features.c_out(), features.n_images());
    check_dims(words, c_out, n)?;
    let mut tf = Matrix::zeros(c_out, n);
    for j in 0..n {
        let denom = features.values.column(j).sum::<f64>() + TF_EPSILON;
        for i in 0..c_out {
            if words.contains(i, j) {
                tf.set(i, j, features.values.get(i, j) / denom);
            }
        }
    }
    Ok(tf)
}

/// Smoothed IDF, natural log: `ln((1 + |S|) / (1 + |N_i|))`.
pub fn inverse_document_frequency(words: &WordSets) -> Vec<f64> {
    let s = words.n as f64;
    (0..words.c_out)
        .map(|i| ((1.0 + s) / (1.0 + words.set_size(i) as f64)).ln())
        .collect()
}

pub fn layer_tfidf(tf: &Matrix, idf: &[f64]) -> Result<Matrix, SeparabilityError> {
    if tf.rows() != idf.len() {
        return Err(SeparabilityError::Dimensions(format!(
            "tf has {} rows, idf has {} entries",
            tf.rows(),
            idf.len()
        )));
    }
    let mut out = tf.clone();
    for (i, &w) in idf.iter().enumerate() {
        for j in 0..tf.cols() {
            out.set(i, j, tf.get(i, j) * w);
        }
    }
    Ok(out)
}

/// Total TF-IDF mass over total word occurrences (at least 1).
pub fn layer_separability(tfidf: &Matrix, words: &WordSets) -> Result<f64, SeparabilityError> {
    check_dims(words, tfidf.rows(), tfidf.cols())?;
    Ok(tfidf.sum() / words.total().max(1) as f64)
}

/// Everything computed for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScore {
    pub layer_id: String,
    pub words: WordSets,
    pub tf_star: Matrix,
    pub idf_star: Vec<f64>,
    pub tfidf_star: Matrix,
    pub alpha: f64,
}

impl LayerScore {
    pub fn word_count(&self) -> usize {
        self.words.total()
    }
}

pub fn score_layer(features: &PooledFeatures) -> LayerScore {
    let words = select_words(features);
    let tf_star = term_frequency(features, &words).expect("dimensions from the same features");
    let idf_star = inverse_document_frequency(&words);
    let tfidf_star = layer_tfidf(&tf_star, &idf_star).expect("dimensions from the same features");
    let alpha = layer_separability(&tfidf_star, &words).expect("dimensions from the same features");
    LayerScore {
        layer_id: features.layer_id.clone(),
        words,
        tf_star,
        idf_star,
        tfidf_star,
        alpha,
    }
}

/// Textbook TF-IDF over raw counts (`terms x docs`), with base-10 IDF and a
/// `1 + df` denominator. A term present in every document gets a negative IDF.
pub fn classic_tfidf(term_counts: &[Vec<u64>]) -> Result<Matrix, SeparabilityError> {
    let rows: Vec<Vec<f64>> = term_counts
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect();
    let counts = Matrix::from_rows(&rows)?;
    let (terms, docs) = (counts.rows(), counts.cols());
    let totals: Vec<f64> = (0..docs).map(|j| counts.column(j).sum()).collect();
    if let Some(doc) = totals.iter().position(|&t| t == 0.0) {
        return Err(SeparabilityError::EmptyDocument { doc });
    }
    let mut out = Matrix::zeros(terms, docs);
    for i in 0..terms {
        let df = counts.row(i).iter().filter(|&&c| c > 0.0).count();
        let idf = (docs as f64 / (1 + df) as f64).log10();
        for (j, &total) in totals.iter().enumerate() {
            out.set(i, j, counts.get(i, j) / total * idf);
        }
    }
    Ok(out)
}
