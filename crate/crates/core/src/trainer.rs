//! Seeded end-to-end training, validation snapshotting, prediction, and
//! ablation runs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{normalize_bands, sample_split, HsiCube, LabelRaster, Split, SplitWarning};
use crate::error::{contract, Error, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{argmax_classes, forward, record_loss, ForwardOptions, GraphStructure, LabelMatrix, ModelParams};
use crate::optim::{adam_step, AdamState};
use crate::pca::pca_reduce;
use crate::segmentation::{init_anchors, slic_segment, SegmentationMap};
use crate::tensor::Tensor;

/// Input scaling applied to the cube before anything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Per-band min-max to `[0, 1]`.
    Minmax,
    None,
}

/// Every knob of a training run. Missing keys in a config file take the
/// defaults below (the Indian Pines settings); unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub beta: f64,
    pub gamma: f64,
    pub region_count: usize,
    pub slic_compactness: f64,
    pub slic_iterations: usize,
    pub pca_components: usize,
    pub layer_count: usize,
    pub seed: u64,
    pub per_class: usize,
    pub small_class_budget: usize,
    pub val_fraction: f64,
    /// Validate (and snapshot the best model) every this many iterations;
    /// 0 disables snapshotting and keeps the final iterate.
    pub val_interval: usize,
    /// Propagate with the re-normalized filtered adjacency.
    pub renormalize: bool,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            learning_rate: 0.001,
            hidden_width: 60,
            beta: 0.01,
            gamma: 0.2,
            region_count: 200,
            slic_compactness: 0.1,
            slic_iterations: 10,
            pca_components: 3,
            layer_count: 2,
            seed: 0,
            per_class: 30,
            small_class_budget: 15,
            val_fraction: 0.1,
            val_interval: 50,
            renormalize: true,
            normalization: Normalization::Minmax,
        }
    }
}

impl TrainConfig {
    /// Defaults for University of Pavia.
    pub fn pavia() -> Self {
        Self { iterations: 500, hidden_width: 210, beta: 0.05, ..Self::default() }
    }

    /// Defaults for Salinas.
    pub fn salinas() -> Self {
        Self { iterations: 2000, learning_rate: 0.0001, hidden_width: 110, beta: 0.02, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(contract(format!("config: {m}")));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be > 0");
        }
        if self.layer_count == 0 || self.hidden_width == 0 {
            return bad("layer_count and hidden_width must be >= 1");
        }
        if self.region_count == 0 || self.slic_iterations == 0 || self.pca_components == 0 {
            return bad("region_count, slic_iterations and pca_components must be >= 1");
        }
        if !(self.slic_compactness >= 0.0) {
            return bad("slic_compactness must be >= 0");
        }
        if self.small_class_budget == 0 || self.per_class < self.small_class_budget {
            return bad("need per_class >= small_class_budget >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Layer widths `[d, u, …, u, classes]`.
    pub fn widths(&self, bands: usize, classes: usize) -> Vec<usize> {
        let mut w = vec![bands];
        w.extend(std::iter::repeat(self.hidden_width).take(self.layer_count - 1));
        w.push(classes);
        w
    }
}

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Metric factors frozen at the identity (Euclidean similarity).
    NoMetric,
    /// Edge filter disabled (`beta = 0`).
    NoEdgeFilter,
    /// No pixel-to-region projection; convolutions run on an 8-neighbour
    /// pixel graph.
    NoProjection,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMetric, Variant::NoEdgeFilter, Variant::NoProjection];

    pub fn code(self) -> u32 {
        match self {
            Variant::Full => 0,
            Variant::NoMetric => 1,
            Variant::NoEdgeFilter => 2,
            Variant::NoProjection => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    /// Config as the variant actually trains it.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        match self {
            Variant::NoEdgeFilter => TrainConfig { beta: 0.0, ..config.clone() },
            _ => config.clone(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoMetric => "v1",
            Variant::NoEdgeFilter => "v2",
            Variant::NoProjection => "v3",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "v0" => Ok(Variant::Full),
            "v1" | "no-metric" => Ok(Variant::NoMetric),
            "v2" | "no-edge-filter" => Ok(Variant::NoEdgeFilter),
            "v3" | "no-projection" => Ok(Variant::NoProjection),
            other => Err(contract(format!("unknown variant {other:?} (expected full, v1, v2 or v3)"))),
        }
    }
}

/// Normalized pixels plus the graph the model runs on.
#[derive(Clone, Debug)]
pub struct Scene {
    /// `[pixels, bands]`.
    pub pixels: Tensor,
    pub segmentation: Option<SegmentationMap>,
    pub structure: GraphStructure,
}

pub fn normalized_pixels(cube: &HsiCube, normalization: Normalization) -> Tensor {
    match normalization {
        Normalization::Minmax => normalize_bands(cube).values,
        Normalization::None => cube.values.clone(),
    }
}

/// Segments the cube (PCA features, then SLIC) unless the variant skips
/// the projection.
pub fn prepare_scene(cube: &HsiCube, config: &TrainConfig, variant: Variant) -> Result<Scene> {
    let pixels = normalized_pixels(cube, config.normalization);
    if variant == Variant::NoProjection {
        let structure = GraphStructure::pixel_grid(cube.height, cube.width);
        return Ok(Scene { pixels, segmentation: None, structure });
    }
    let normalized = HsiCube { values: pixels.clone(), band_ranges: None, ..cube.clone() };
    let k = config.pca_components.min(cube.bands);
    let pca = pca_reduce(&normalized, k)?;
    let regions = config.region_count.min(cube.pixel_count());
    let seg = slic_segment(&pca.features, cube.height, cube.width, regions, config.slic_compactness, config.slic_iterations)?;
    log::info!("segmented {} into {} regions (requested {})", cube.dims_string(), seg.region_count(), config.region_count);
    let structure = GraphStructure::from_segmentation(&seg);
    Ok(Scene { pixels, segmentation: Some(seg), structure })
}

/// Rebuilds the scene for a trained model: same normalization, the stored
/// segmentation (or the pixel grid).
pub fn scene_for_model(model: &TrainedModel, cube: &HsiCube) -> Result<Scene> {
    if (cube.height, cube.width, cube.bands) != (model.height, model.width, model.bands) {
        return Err(contract(format!(
            "model expects {}x{}x{}, cube is {}",
            model.height,
            model.width,
            model.bands,
            cube.dims_string()
        )));
    }
    let pixels = normalized_pixels(cube, model.config.normalization);
    let structure = match &model.segmentation {
        Some(seg) => GraphStructure::from_segmentation(seg),
        None => GraphStructure::pixel_grid(cube.height, cube.width),
    };
    Ok(Scene { pixels, segmentation: model.segmentation.clone(), structure })
}

/// Parameters and everything needed to run them on the scene they were
/// trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub segmentation: Option<SegmentationMap>,
    pub params: ModelParams,
}

impl TrainedModel {
    pub fn forward_options(&self) -> ForwardOptions {
        forward_options(&self.config, self.variant)
    }
}

fn forward_options(config: &TrainConfig, variant: Variant) -> ForwardOptions {
    ForwardOptions {
        gamma: config.gamma,
        beta: config.beta,
        renormalize: config.renormalize,
        train_metrics: variant != Variant::NoMetric,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub iteration: usize,
    pub val_oa: f64,
    /// Smallest column sum of the soft assignment (projected variants).
    pub min_region_mass: Option<f64>,
}

/// Everything observed during one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub variant: Variant,
    pub region_count: Option<usize>,
    pub train_pixels: usize,
    pub val_pixels: usize,
    pub test_pixels: usize,
    pub split_warnings: Vec<SplitWarning>,
    /// Training loss before each update.
    pub loss: Vec<f64>,
    pub val_history: Vec<ValPoint>,
    /// Iteration of the returned snapshot.
    pub selected_iteration: usize,
    pub best_val_oa: Option<f64>,
    pub final_val_oa: Option<f64>,
    /// Test metrics of the returned (validation-selected) snapshot.
    pub test_metrics: Option<Metrics>,
    /// Test metrics of the last iterate.
    pub final_test_metrics: Option<Metrics>,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    /// Copy with the wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_seconds: 0.0, ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub record: RunRecord,
    pub split: Split,
}

/// Trains the full model.
pub fn train(cube: &HsiCube, labels: &LabelRaster, config: &TrainConfig) -> Result<TrainOutcome> {
    train_variant(cube, labels, config, Variant::Full)
}

/// Trains `variant` under `config` (with the variant's overrides applied).
pub fn train_variant(cube: &HsiCube, labels: &LabelRaster, config: &TrainConfig, variant: Variant) -> Result<TrainOutcome> {
    let start = Instant::now();
    let config = variant.apply(config);
    config.validate()?;
    if !labels.matches(cube) {
        return Err(contract(format!(
            "labels are {}x{}, cube is {}",
            labels.height,
            labels.width,
            cube.dims_string()
        )));
    }
    let classes = labels.num_classes();
    let present = labels.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(contract("need at least two labeled classes"));
    }
    let scene = prepare_scene(cube, &config, variant)?;
    let split = sample_split(labels, config.per_class, config.small_class_budget, config.val_fraction, config.seed)?;
    let targets = LabelMatrix::from_raster(labels, &split.train_idx)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let anchors = match &scene.segmentation {
        Some(seg) => {
            let normalized = HsiCube { values: scene.pixels.clone(), band_ranges: None, ..cube.clone() };
            Some(init_anchors(&normalized, seg)?)
        }
        None => None,
    };
    let mut params = ModelParams::init(anchors, &config.widths(cube.bands, classes), &mut rng)?;
    if variant == Variant::NoMetric {
        for m in &mut params.metrics {
            *m = Tensor::eye(m.rows());
        }
    }
    let opts = forward_options(&config, variant);
    let trainable: Vec<bool> = param_trainable_mask(&params, opts.train_metrics);
    let mut states: Vec<AdamState> = params.tensors().iter().map(|t| AdamState::new(t.shape())).collect();

    let mut losses = Vec::with_capacity(config.iterations);
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for iteration in 1..=config.iterations {
        let mut tape = Tape::new();
        let trace = match forward(&mut tape, &scene.pixels, &scene.structure, &params, &opts) {
            Ok(t) => t,
            // Updated parameters that break the forward pass (e.g. anchors so
            // far away that a region's assignment mass underflows) diverged.
            Err(Error::Contract(reason)) if iteration > 1 => {
                log::error!("forward pass failed at iteration {iteration}: {reason}");
                return Err(Error::Divergence { iteration, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        let loss_var = record_loss(&mut tape, trace.probabilities, &targets)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            log::error!("loss became {loss} at iteration {iteration}");
            return Err(Error::Divergence { iteration, loss });
        }
        losses.push(loss);
        let grads = tape.backward(loss_var)?;
        let vars = trace.parameter_vars();
        drop(trace);
        for (((p, var), state), &train) in params_mut(&mut params).into_iter().zip(vars).zip(&mut states).zip(&trainable) {
            if train {
                *p = adam_step(p, &grads.wrt(&tape, var), state, config.learning_rate)?;
            }
        }

        let checkpoint = config.val_interval > 0 && (iteration % config.val_interval == 0 || iteration == config.iterations);
        if checkpoint && !split.val_idx.is_empty() {
            let eval = evaluate_params(&scene, &params, &opts)?;
            let val_oa = accuracy(&eval.predictions, labels, &split.val_idx);
            log::debug!("iteration {iteration}: loss {loss:.6}, val OA {val_oa:.4}, min region mass {:?}", eval.min_region_mass);
            val_history.push(ValPoint { iteration, val_oa, min_region_mass: eval.min_region_mass });
            // Ties go to the later iterate.
            if best.as_ref().map_or(true, |b| val_oa >= b.0) {
                best = Some((val_oa, iteration, params.clone()));
            }
        }
    }

    let final_params = params;
    let final_val_oa = val_history.last().filter(|p| p.iteration == config.iterations).map(|p| p.val_oa);
    let (selected, selected_iteration, best_val_oa) = match best {
        Some((oa, it, p)) => (p, it, Some(oa)),
        None => (final_params.clone(), config.iterations, None),
    };
    let test_metrics_of = |p: &ModelParams| -> Result<Option<Metrics>> {
        if split.test_idx.is_empty() {
            return Ok(None);
        }
        let eval = evaluate_params(&scene, p, &opts)?;
        compute_metrics(&eval.predictions, labels, &split.test_idx).map(Some)
    };
    let test_metrics = test_metrics_of(&selected)?;
    let final_test_metrics = if selected_iteration == config.iterations { test_metrics.clone() } else { test_metrics_of(&final_params)? };

    let record = RunRecord {
        config: config.clone(),
        variant,
        region_count: scene.segmentation.as_ref().map(SegmentationMap::region_count),
        train_pixels: split.train_idx.len(),
        val_pixels: split.val_idx.len(),
        test_pixels: split.test_idx.len(),
        split_warnings: split.warnings.clone(),
        loss: losses,
        val_history,
        selected_iteration,
        best_val_oa,
        final_val_oa,
        test_metrics,
        final_test_metrics,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let model = TrainedModel {
        config,
        variant,
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        classes,
        segmentation: scene.segmentation,
        params: selected,
    };
    Ok(TrainOutcome { model, record, split })
}

/// Trains a variant and keeps only its record.
pub fn run_ablation(cube: &HsiCube, labels: &LabelRaster, config: &TrainConfig, variant: Variant) -> Result<RunRecord> {
    train_variant(cube, labels, config, variant).map(|o| o.record)
}

fn param_trainable_mask(params: &ModelParams, train_metrics: bool) -> Vec<bool> {
    let mut mask: Vec<bool> = params.anchors.iter().map(|_| true).collect();
    for _ in &params.weights {
        mask.push(true);
        mask.push(train_metrics);
    }
    mask
}

/// Mutable views in [`ModelParams::tensors`] order.
fn params_mut(params: &mut ModelParams) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = params.anchors.iter_mut().collect();
    for (w, m) in params.weights.iter_mut().zip(params.metrics.iter_mut()) {
        out.push(w);
        out.push(m);
    }
    out
}

struct Evaluation {
    predictions: Vec<u16>,
    min_region_mass: Option<f64>,
}

fn evaluate_params(scene: &Scene, params: &ModelParams, opts: &ForwardOptions) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let trace = forward(&mut tape, &scene.pixels, &scene.structure, params, opts)?;
    let min_region_mass = trace.assignment.map(|p| {
        let pat = tape.pattern(p).expect("sparse assignment");
        let mut sums = vec![0.0; pat.cols()];
        for (_, j, k) in pat.entries() {
            sums[j] += tape.value(p).data()[k];
        }
        sums.into_iter().fold(f64::INFINITY, f64::min)
    });
    Ok(Evaluation { predictions: argmax_classes(tape.value(trace.probabilities)), min_region_mass })
}

fn accuracy(pred: &[u16], labels: &LabelRaster, idx: &[usize]) -> f64 {
    let hits = idx.iter().filter(|&&i| pred[i] == labels.labels[i]).count();
    hits as f64 / idx.len() as f64
}

/// Per-pixel class probabilities of a trained model on `cube`.
pub fn predict_probabilities(model: &TrainedModel, cube: &HsiCube) -> Result<Tensor> {
    let scene = scene_for_model(model, cube)?;
    let mut tape = Tape::new();
    let trace = forward(&mut tape, &scene.pixels, &scene.structure, &model.params, &model.forward_options())?;
    Ok(tape.value(trace.probabilities).clone())
}

/// Most probable class (1-based) per pixel; ties go to the lowest id.
pub fn predict(model: &TrainedModel, cube: &HsiCube) -> Result<Vec<u16>> {
    Ok(argmax_classes(&predict_probabilities(model, cube)?))
}
