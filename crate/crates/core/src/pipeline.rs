//! End-to-end stages: extract, analyze, allocate, simulate.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::allocator::{self, AllocError, BitRange, Budget, LayerProfile};
use crate::feature_store::{read_container, write_container, FmapError, Metadata};
use crate::quantsim::{self, Dataset, EvalReport, ModelGraph, QuantError};
use crate::report::{
    read_json, write_json, AllocatedLayer, AllocationReport, LayerScoreEntry, ProfileFile, ReportError, ScoresReport,
};
use crate::separability::{pool_features, score_layer, SeparabilityError};
use crate::tensor::Tensor;

/// Bit-width of pinned layers.
pub const PINNED_BITS: u32 = 8;
pub const DEFAULT_SAMPLES: usize = 32;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_ACT_BITS: u32 = 8;
pub const QAT_BITS: BitRange = BitRange { min: 4, max: 8 };
pub const PTQ_BITS: BitRange = BitRange { min: 2, max: 4 };

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Container(#[from] FmapError),
    #[error(transparent)]
    Separability(#[from] SeparabilityError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("layer mismatch: {0}")]
    LayerMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    fn in_stage(self, stage: &'static str) -> Self {
        PipelineError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, past any stage wrappers.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub fn is_io(&self) -> bool {
        match self.root() {
            PipelineError::Container(FmapError::Io { .. }) => true,
            PipelineError::Quant(QuantError::Io { .. }) | PipelineError::Quant(QuantError::Container(FmapError::Io { .. })) => {
                true
            }
            PipelineError::Report(r) => r.is_io(),
            _ => false,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self.root(), PipelineError::Alloc(AllocError::Infeasible { .. }))
    }
}

/// Ordered layer names: the `layers` metadata list when present, otherwise
/// every tensor in container order.
fn layer_order(tensors: &[Tensor], metadata: &Metadata) -> Result<Vec<String>, PipelineError> {
    match metadata.get("layers") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| PipelineError::Config(format!("metadata `layers` must be a list of names: {e}"))),
        None => Ok(tensors.iter().map(|t| t.name().to_string()).collect()),
    }
}

fn labels(metadata: &Metadata) -> Option<Vec<u32>> {
    metadata.get("labels").and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// Scores every layer of a feature dump.
pub fn analyze(tensors: &[Tensor], metadata: &Metadata) -> Result<ScoresReport, PipelineError> {
    let order = layer_order(tensors, metadata)?;
    let class_ids = labels(metadata);
    let maps = order
        .iter()
        .map(|name| {
            tensors
                .iter()
                .find(|t| t.name() == name)
                .ok_or_else(|| PipelineError::LayerMismatch(format!("feature dump has no tensor for layer `{name}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let sample_count = maps.first().map_or(0, |t| t.shape()[0]);
    if let Some(bad) = maps.iter().find(|t| t.shape()[0] != sample_count) {
        return Err(PipelineError::LayerMismatch(format!(
            "layer `{}` has {} images, expected {sample_count}",
            bad.name(),
            bad.shape()[0]
        )));
    }

    // Layers are independent; score them on separate threads.
    let scored: Vec<Result<LayerScoreEntry, SeparabilityError>> = std::thread::scope(|s| {
        let handles: Vec<_> = maps
            .iter()
            .map(|&t| {
                let class_ids = class_ids.clone();
                s.spawn(move || {
                    let mut pooled = pool_features(t)?;
                    pooled.class_ids = class_ids.filter(|c| c.len() == pooled.n_images());
                    let score = score_layer(&pooled);
                    let c_out = pooled.c_out();
                    Ok(LayerScoreEntry {
                        layer_id: score.layer_id.clone(),
                        alpha: score.alpha,
                        c_out,
                        word_count: score.word_count(),
                        mean_words_per_feature: score.word_count() as f64 / c_out as f64,
                        saturated_features: score.idf_star.iter().filter(|&&v| v == 0.0).count(),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let layers = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ScoresReport { sample_count, layers })
}

pub fn analyze_file(features: &Path, out: &Path) -> Result<ScoresReport, PipelineError> {
    let (tensors, metadata) = read_container(features)?;
    let report = analyze(&tensors, &metadata)?;
    write_json(&report, out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocateOptions {
    pub beta: f64,
    pub bit_range: BitRange,
    pub budget: Budget,
    pub pin_first_last: bool,
    /// Extra layer ids pinned at [`PINNED_BITS`].
    pub pinned: Vec<String>,
}

/// Applies pinning options to a profile.
pub fn pin_layers(profile: &[LayerProfile], pin_first_last: bool, extra: &[String]) -> Result<Vec<LayerProfile>, PipelineError> {
    let ids: HashSet<&str> = profile.iter().map(|p| p.layer_id.as_str()).collect();
    if let Some(unknown) = extra.iter().find(|id| !ids.contains(id.as_str())) {
        return Err(PipelineError::LayerMismatch(format!("cannot pin unknown layer `{unknown}`")));
    }
    let last = profile.len().saturating_sub(1);
    Ok(profile
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut p = p.clone();
            let edge = pin_first_last && (i == 0 || i == last);
            if p.pinned_bits.is_none() && (edge || extra.contains(&p.layer_id)) {
                p.pinned_bits = Some(PINNED_BITS);
            }
            p
        })
        .collect())
}

/// Importance plus LP over the layers of `profile`, in profile order.
pub fn allocate(scores: &ScoresReport, profile: &[LayerProfile], opts: &AllocateOptions) -> Result<AllocationReport, PipelineError> {
    if scores.layers.len() != profile.len() {
        return Err(PipelineError::LayerMismatch(format!(
            "scores cover {} layers, profile has {}",
            scores.layers.len(),
            profile.len()
        )));
    }
    let alpha = profile
        .iter()
        .map(|p| {
            scores
                .alpha(&p.layer_id)
                .ok_or_else(|| PipelineError::LayerMismatch(format!("no score for profile layer `{}`", p.layer_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let profile = pin_layers(profile, opts.pin_first_last, &opts.pinned)?;
    let theta = allocator::importance(&alpha, opts.beta)?;
    let config = allocator::solve_lp(&theta, &profile, &opts.budget, opts.bit_range)?;
    let layers = profile
        .iter()
        .enumerate()
        .map(|(i, p)| AllocatedLayer {
            layer_id: p.layer_id.clone(),
            bits: config.bits[i],
            alpha: alpha[i],
            theta: theta.theta[i],
            pinned: p.pinned_bits.is_some(),
        })
        .collect();
    Ok(AllocationReport {
        beta: opts.beta,
        bit_range: opts.bit_range,
        budget: opts.budget,
        layers,
        config,
    })
}

pub fn allocate_files(scores: &Path, profile: &Path, opts: &AllocateOptions, out: &Path) -> Result<AllocationReport, PipelineError> {
    let scores: ScoresReport = read_json(scores)?;
    let profile: ProfileFile = read_json(profile)?;
    let report = allocate(&scores, &profile.layers, opts)?;
    write_json(&report, out)?;
    Ok(report)
}

/// Evaluates an allocation on a model after checking layer names line up.
pub fn simulate(model: &ModelGraph, allocation: &AllocationReport, dataset: &Dataset) -> Result<EvalReport, PipelineError> {
    let names = model.quantizable_names();
    let ids = allocation.layer_ids();
    if names.len() != ids.len() {
        return Err(PipelineError::LayerMismatch(format!(
            "allocation has {} layers, model has {} quantizable layers",
            ids.len(),
            names.len()
        )));
    }
    if names != ids {
        return Err(PipelineError::LayerMismatch(format!(
            "allocation layers {ids:?} do not match model layers {names:?}"
        )));
    }
    Ok(quantsim::evaluate_config(
        model,
        &allocation.config.bits,
        dataset,
        allocation.budget.activation_bits,
    )?)
}

pub fn simulate_files(model: &Path, allocation: &Path, dataset: &Path, out: &Path) -> Result<EvalReport, PipelineError> {
    let model = ModelGraph::load(model)?;
    let allocation: AllocationReport = read_json(allocation)?;
    let dataset = Dataset::load(dataset)?;
    let report = simulate(&model, &allocation, &dataset)?;
    write_json(&report, out)?;
    Ok(report)
}

/// Draws `samples` images (without replacement, seeded) and records the
/// post-activation feature map of every quantizable layer.
pub fn extract_features(
    model: &ModelGraph,
    dataset: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<(Vec<Tensor>, Metadata), PipelineError> {
    if samples == 0 || samples > dataset.len() {
        return Err(PipelineError::Config(format!(
            "cannot sample {samples} images from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, dataset.len(), samples).into_vec();
    let batch = dataset.select(&indices);
    let (_, features) = quantsim::forward_recording(model, &batch.images)?;

    let mut metadata = Metadata::new();
    metadata.insert("model".into(), json!(model.name));
    metadata.insert("layers".into(), json!(model.quantizable_names()));
    metadata.insert("labels".into(), json!(batch.labels));
    metadata.insert("image_indices".into(), json!(indices));
    metadata.insert("sample_count".into(), json!(samples));
    metadata.insert("seed".into(), json!(seed));
    Ok((features, metadata))
}

/// Budget flag values; exactly one must be set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpec {
    Megabytes(f64),
    Bops(f64),
}

impl BudgetSpec {
    pub fn to_budget(self, activation_bits: u32) -> Budget {
        match self {
            BudgetSpec::Megabytes(mb) => Budget::size_mb(mb, activation_bits),
            BudgetSpec::Bops(b) => Budget::bops(b, activation_bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    /// Existing dump to analyze; when absent one is extracted from `dataset`.
    pub features: Option<PathBuf>,
    /// Profile file; when absent it is derived from the model.
    pub profile: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub beta: f64,
    pub bit_range: BitRange,
    pub budget: BudgetSpec,
    pub activation_bits: u32,
    pub pin_first_last: bool,
    pub pinned: Vec<String>,
    pub samples: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(model: PathBuf, dataset: PathBuf, out_dir: PathBuf, budget: BudgetSpec) -> Self {
        Self {
            model,
            dataset,
            features: None,
            profile: None,
            out_dir,
            beta: DEFAULT_BETA,
            bit_range: QAT_BITS,
            budget,
            activation_bits: DEFAULT_ACT_BITS,
            pin_first_last: true,
            pinned: Vec::new(),
            samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        BitRange::new(self.bit_range.min, self.bit_range.max)?;
        if self.samples == 0 {
            return Err(PipelineError::Config("sample count must be at least 1".into()));
        }
        let limit = match self.budget {
            BudgetSpec::Megabytes(v) | BudgetSpec::Bops(v) => v,
        };
        if !(limit > 0.0 && limit.is_finite()) {
            return Err(PipelineError::Config(format!("budget must be positive, got {limit}")));
        }
        Ok(())
    }
}

/// Files written by [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub features: PathBuf,
    pub profile: PathBuf,
    pub scores: PathBuf,
    pub allocation: PathBuf,
    pub eval: PathBuf,
    pub allocation_report: AllocationReport,
    pub eval_report: EvalReport,
}

pub const FEATURES_FILE: &str = "features.fmap";
pub const PROFILE_FILE: &str = "profile.json";
pub const SCORES_FILE: &str = "scores.json";
pub const ALLOCATION_FILE: &str = "allocation.json";
pub const EVAL_FILE: &str = "eval.json";

/// Extract (optional), analyze, allocate, simulate.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutputs, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|source| {
        PipelineError::Report(ReportError::Io {
            path: cfg.out_dir.display().to_string(),
            source,
        })
    })?;
    let out = |name: &str| cfg.out_dir.join(name);

    let model = ModelGraph::load(&cfg.model).map_err(|e| PipelineError::from(e).in_stage("load"))?;
    let dataset = Dataset::load(&cfg.dataset).map_err(|e| PipelineError::from(e).in_stage("load"))?;

    let features = match &cfg.features {
        Some(path) => path.clone(),
        None => {
            let path = out(FEATURES_FILE);
            extract_features(&model, &dataset, cfg.samples, cfg.seed)
                .and_then(|(t, m)| Ok(write_container(&t, &m, &path)?))
                .map_err(|e| e.in_stage("extract"))?;
            path
        }
    };

    let profile = match &cfg.profile {
        Some(path) => {
            let file: ProfileFile = read_json(path).map_err(|e| PipelineError::from(e).in_stage("load"))?;
            file.layers
        }
        None => model.profile(),
    };
    let profile_path = out(PROFILE_FILE);
    write_json(&ProfileFile { layers: profile.clone() }, &profile_path).map_err(|e| PipelineError::from(e).in_stage("load"))?;

    let scores_path = out(SCORES_FILE);
    let scores = analyze_file(&features, &scores_path).map_err(|e| e.in_stage("analyze"))?;

    let opts = AllocateOptions {
        beta: cfg.beta,
        bit_range: cfg.bit_range,
        budget: cfg.budget.to_budget(cfg.activation_bits),
        pin_first_last: cfg.pin_first_last,
        pinned: cfg.pinned.clone(),
    };
    let allocation_path = out(ALLOCATION_FILE);
    let allocation_report = allocate(&scores, &profile, &opts)
        .and_then(|r| {
            write_json(&r, &allocation_path)?;
            Ok(r)
        })
        .map_err(|e| e.in_stage("allocate"))?;

    let eval_path = out(EVAL_FILE);
    let eval_report = simulate(&model, &allocation_report, &dataset)
        .and_then(|r| {
            write_json(&r, &eval_path)?;
            Ok(r)
        })
        .map_err(|e| e.in_stage("simulate"))?;

    Ok(PipelineOutputs {
        features,
        profile: profile_path,
        scores: scores_path,
        allocation: allocation_path,
        eval: eval_path,
        allocation_report,
        eval_report,
    })
}
