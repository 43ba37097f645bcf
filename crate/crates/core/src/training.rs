//! Backpropagation through the temperature layer and the training loop.
//!
//! The forward pass contracts the effective sites `O = A * exp(-beta A)`.
//! Gradients are first formed with respect to `O` from cached partial
//! products of the chain on either side of each site, then mapped back to
//! `A` by the elementwise coefficient `dO/dA = (1 - beta A) * exp(-beta A)`.

use std::f64::consts::LN_2;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::contraction::{absorb_features, contract_two_sided, Factor, ScaledVector};
use crate::data::{batches, Dataset};
use crate::error::{FttnError, Result};
use crate::feature_map::{embed_pixels, EmbeddedImage, FeatureMap, LOCAL_DIM};
use crate::loss::softmax_cross_entropy;
use crate::model::{effective_sites_with, ModelShape, MpsClassifier, SiteDims, Temperature};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng;
use crate::tensor::{check_finite, Tensor};

/// Samples handled by one worker before its partial sum joins the batch total.
/// Fixed so the reduction order does not depend on the thread count.
const SAMPLES_PER_TASK: usize = 8;

/// One tensor per model site, shape-congruent with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    sites: Vec<Tensor>,
}

impl GradientSet {
    pub fn new(sites: Vec<Tensor>) -> Self {
        GradientSet { sites }
    }

    pub fn zeros_like(model: &MpsClassifier) -> Self {
        GradientSet {
            sites: model.sites().iter().map(|s| Tensor::zeros(s.shape().to_vec())).collect(),
        }
    }

    pub fn sites(&self) -> &[Tensor] {
        &self.sites
    }

    pub fn into_sites(self) -> Vec<Tensor> {
        self.sites
    }

    pub fn max_abs(&self) -> f64 {
        self.sites.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// `dO/dA = (1 - beta a) exp(-beta a)` elementwise.
pub fn grad_coefficient(site: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(FttnError::InvalidArgument(format!("beta must be finite and >= 0, got {beta}")));
    }
    let out = site.map(|a| (1.0 - beta * a) * (-beta * a).exp());
    check_finite(&out, "grad_coefficient")?;
    Ok(out)
}

/// Effective sites and backprop coefficients for one model snapshot.
struct Prepared {
    effective: Vec<Tensor>,
    coefficients: Option<Vec<Tensor>>,
    /// See [`calibrate`].
    ln_calibration: f64,
}

impl Prepared {
    fn new(model: &MpsClassifier, temperature: Option<&Temperature>, ln_calibration: f64) -> Result<Self> {
        if !ln_calibration.is_finite() {
            return Err(FttnError::InvalidArgument(format!("logit calibration {ln_calibration} is not finite")));
        }
        match temperature {
            None => Ok(Prepared {
                effective: model.sites().to_vec(),
                coefficients: None,
                ln_calibration,
            }),
            Some(t) => {
                let effective = effective_sites_with(model, t)?;
                let coefficients = model
                    .sites()
                    .iter()
                    .enumerate()
                    .map(|(k, site)| {
                        if t.applies_to(k, model.shape()) {
                            grad_coefficient(site, t.beta)
                        } else {
                            Ok(Tensor::ones(site.shape().to_vec()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Prepared {
                    effective,
                    coefficients: Some(coefficients),
                    ln_calibration,
                })
            }
        }
    }

    /// Maps gradients with respect to the effective sites onto the weights.
    fn to_weight_gradient(&self, grad_effective: Vec<Vec<f64>>, shape: &ModelShape) -> Result<GradientSet> {
        let sites = grad_effective
            .into_iter()
            .enumerate()
            .map(|(k, mut g)| {
                if let Some(c) = &self.coefficients {
                    g.iter_mut().zip(c[k].data()).for_each(|(g, c)| *g *= c);
                }
                Tensor::new(shape.site_dims(k).weight_shape(), g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientSet { sites })
    }
}

fn zero_buffers(shape: &ModelShape) -> Vec<Vec<f64>> {
    (0..shape.n_sites)
        .map(|k| vec![0.0; shape.site_dims(k).weight_len()])
        .collect()
}

/// `acc[i, s, j..] += scale * a[i] * psi[s] * b[j..]` over the site layout.
fn add_outer(acc: &mut [f64], dims: SiteDims, psi: &[f64; LOCAL_DIM], a: &[f64], b: &[f64], scale: f64) {
    let block = dims.right_len() * dims.label_len();
    debug_assert_eq!(a.len(), dims.left_len());
    debug_assert_eq!(b.len(), block);
    for (i, &ai) in a.iter().enumerate() {
        for (s, &p) in psi.iter().enumerate() {
            let coef = scale * ai * p;
            if coef == 0.0 {
                continue;
            }
            let row = &mut acc[(i * LOCAL_DIM + s) * block..(i * LOCAL_DIM + s + 1) * block];
            for (o, &x) in row.iter_mut().zip(b) {
                *o += coef * x;
            }
        }
    }
}

/// `2^exp2 * exp(ln_extra)` without overflowing the intermediate terms.
fn combined_scale(exp2: i64, ln_extra: f64) -> f64 {
    (exp2 as f64 * LN_2 + ln_extra).exp()
}

/// Adds `d loss / d effective-site` of one sample to `acc`; returns the loss
/// and the class scores.
fn accumulate_sample(
    shape: &ModelShape,
    prepared: &Prepared,
    image: &EmbeddedImage,
    label: usize,
    acc: &mut [Vec<f64>],
) -> Result<(f64, ScaledVector)> {
    let effective = &prepared.effective;
    let ln_cal = prepared.ln_calibration;
    let chain = absorb_features(shape, effective, image)?;
    let n = shape.n_sites;
    let p = shape.label_site;

    // left[k] = chain[0] ... chain[k-1] for k <= p
    let mut left = Vec::with_capacity(p + 1);
    left.push(Factor::unit());
    for k in 0..p {
        let next = left[k].product(&chain[k])?;
        left.push(next);
    }
    // right[k - p] = chain[k+1] ... chain[n-1] for k >= p
    let mut right = vec![Factor::unit(); n - p];
    for k in (p + 1..n).rev() {
        right[k - 1 - p] = chain[k].product(&right[k - p])?;
    }

    let scores = ScaledVector::from_factor(left[p].product(&chain[p])?.product(&right[0])?);
    let (loss, g) = softmax_cross_entropy(&scores.with_log_offset(ln_cal), label)?;
    if g.iter().all(|&x| x == 0.0) {
        // saturated and correct: no gradient, and the zero environments below
        // would meet an overflowing scale
        return Ok((loss, scores));
    }

    let sites = image.sites();
    let label_dims = shape.site_dims(p);
    let rv = right[0].values();
    let outer: Vec<f64> = rv.iter().flat_map(|&r| g.iter().map(move |&gl| r * gl)).collect();
    add_outer(
        &mut acc[p],
        label_dims,
        &sites[p],
        left[p].values(),
        &outer,
        combined_scale(left[p].exponent() + right[0].exponent(), ln_cal),
    );

    let weighted_label = chain[p].contract_labels(&g)?;
    if p > 0 {
        let mut w = weighted_label.product(&right[0])?;
        for k in (0..p).rev() {
            let scale = combined_scale(left[k].exponent() + w.exponent(), ln_cal);
            add_outer(&mut acc[k], shape.site_dims(k), &sites[k], left[k].values(), w.values(), scale);
            if k > 0 {
                w = chain[k].product(&w)?;
            }
        }
    }
    if p + 1 < n {
        let mut u = left[p].product(&weighted_label)?;
        for k in p + 1..n {
            let r = &right[k - p];
            let scale = combined_scale(u.exponent() + r.exponent(), ln_cal);
            add_outer(&mut acc[k], shape.site_dims(k), &sites[k], u.values(), r.values(), scale);
            if k + 1 < n {
                u = u.product(&chain[k])?;
            }
        }
    }
    Ok((loss, scores))
}

/// Samples [`calibrate`] averages over.
pub const CALIBRATION_SAMPLES: usize = 64;

/// Natural log of the factor `kappa` that maps raw chain scores onto logits.
///
/// Raw scores of a long chain sit far outside the `f64` range, and their size
/// depends on `N`, `beta` and the initial noise. `kappa` is the reciprocal of
/// the geometric mean, over the first [`CALIBRATION_SAMPLES`] images, of each
/// image's largest absolute class score, so logits start out of order one.
/// Training fixes it from the initial model and keeps it for the whole run;
/// being one constant it never changes a prediction, and the gradient treats
/// it as a constant.
pub fn calibrate(
    model: &MpsClassifier,
    dataset: &Dataset,
    temperature: Option<&Temperature>,
    feature_map: FeatureMap,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(FttnError::EmptyDataset);
    }
    check_compatible(model, dataset)?;
    let prepared = Prepared::new(model, temperature, 0.0)?;
    let m = dataset.len().min(CALIBRATION_SAMPLES);
    let logs = (0..m)
        .into_par_iter()
        .map(|k| {
            let image = embed_pixels(dataset.image(k), feature_map)?;
            let scores = scores_prepared(model.shape(), &prepared.effective, &image)?;
            let max = scores.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            Ok(max.ln() + scores.log_scale)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ln_cal = -logs.iter().sum::<f64>() / m as f64;
    if !ln_cal.is_finite() {
        return Err(FttnError::NonFinite("class scores vanish on the calibration images".into()));
    }
    Ok(ln_cal)
}

/// Loss and exact weight gradient for one labelled image, with logits scaled
/// by `exp(ln_calibration)`.
///
/// `temperature = None` runs the bare chain without the temperature layer.
pub fn backward(
    model: &MpsClassifier,
    image: &EmbeddedImage,
    label: usize,
    temperature: Option<&Temperature>,
    ln_calibration: f64,
) -> Result<(f64, GradientSet)> {
    let prepared = Prepared::new(model, temperature, ln_calibration)?;
    let mut acc = zero_buffers(model.shape());
    let (loss, _) = accumulate_sample(model.shape(), &prepared, image, label, &mut acc)?;
    Ok((loss, prepared.to_weight_gradient(acc, model.shape())?))
}

/// Class scores through the same contraction path used in training.
pub fn predict_scores(
    model: &MpsClassifier,
    image: &EmbeddedImage,
    temperature: Option<&Temperature>,
) -> Result<ScaledVector> {
    let prepared = Prepared::new(model, temperature, 0.0)?;
    scores_prepared(model.shape(), &prepared.effective, image)
}

fn scores_prepared(shape: &ModelShape, effective: &[Tensor], image: &EmbeddedImage) -> Result<ScaledVector> {
    contract_two_sided(&absorb_features(shape, effective, image)?, shape.label_site)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Batch gradient is the mean over samples.
    #[default]
    Mean,
    /// Batch gradient is the sum over samples.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// `None` trains the bare chain without the temperature layer.
    pub temperature: Option<Temperature>,
    pub seed: u64,
    pub reduction: Reduction,
    /// Elementwise clamp of the batch gradient.
    pub clip: Option<f64>,
    pub feature_map: FeatureMap,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 50,
            adam: AdamConfig::default(),
            temperature: Some(Temperature {
                beta: 0.0,
                exclude_label_site: false,
            }),
            seed: 0,
            reduction: Reduction::Mean,
            clip: None,
            feature_map: FeatureMap::Linear,
        }
    }
}

impl TrainConfig {
    pub fn beta(&self) -> f64 {
        self.temperature.map_or(0.0, |t| t.beta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(FttnError::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(FttnError::InvalidArgument("batch size must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(FttnError::InvalidArgument("clip magnitude must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Averaged (or summed) loss and weight gradient over a set of samples.
pub fn batch_gradient(
    model: &MpsClassifier,
    dataset: &Dataset,
    indices: &[usize],
    temperature: Option<&Temperature>,
    feature_map: FeatureMap,
    reduction: Reduction,
    ln_calibration: f64,
) -> Result<(f64, GradientSet)> {
    let prepared = Prepared::new(model, temperature, ln_calibration)?;
    batch_gradient_prepared(model.shape(), &prepared, dataset, indices, feature_map, reduction)
}

fn batch_gradient_prepared(
    shape: &ModelShape,
    prepared: &Prepared,
    dataset: &Dataset,
    indices: &[usize],
    feature_map: FeatureMap,
    reduction: Reduction,
) -> Result<(f64, GradientSet)> {
    if indices.is_empty() {
        return Err(FttnError::EmptyDataset);
    }
    let partials = indices
        .par_chunks(SAMPLES_PER_TASK)
        .map(|chunk| {
            let mut acc = zero_buffers(shape);
            let mut loss = 0.0;
            for &k in chunk {
                let image = embed_pixels(dataset.image(k), feature_map)?;
                loss += accumulate_sample(shape, prepared, &image, dataset.label(k), &mut acc)?.0;
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut parts = partials.into_iter();
    let (mut loss, mut total) = parts.next().unwrap();
    for (l, acc) in parts {
        loss += l;
        for (t, a) in total.iter_mut().zip(acc) {
            t.iter_mut().zip(a).for_each(|(t, a)| *t += a);
        }
    }
    let n = indices.len() as f64;
    if reduction == Reduction::Mean {
        let inv = 1.0 / n;
        total.iter_mut().flatten().for_each(|g| *g *= inv);
    }
    Ok((loss / n, prepared.to_weight_gradient(total, shape)?))
}

/// Accuracy, mean loss and confusion counts over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluation with the loss calibrated on `dataset` itself (see [`calibrate`]).
pub fn evaluate_detailed(
    model: &MpsClassifier,
    dataset: &Dataset,
    temperature: Option<&Temperature>,
    feature_map: FeatureMap,
) -> Result<Evaluation> {
    let ln_cal = calibrate(model, dataset, temperature, feature_map)?;
    evaluate_calibrated(model, dataset, temperature, feature_map, ln_cal)
}

/// Evaluation with the loss computed on logits scaled by `exp(ln_calibration)`.
pub fn evaluate_calibrated(
    model: &MpsClassifier,
    dataset: &Dataset,
    temperature: Option<&Temperature>,
    feature_map: FeatureMap,
    ln_calibration: f64,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(FttnError::EmptyDataset);
    }
    check_compatible(model, dataset)?;
    let prepared = Prepared::new(model, temperature, ln_calibration)?;
    let results = (0..dataset.len())
        .into_par_iter()
        .map(|k| {
            let image = embed_pixels(dataset.image(k), feature_map)?;
            let scores = scores_prepared(model.shape(), &prepared.effective, &image)?;
            let calibrated = scores.with_log_offset(prepared.ln_calibration);
            let (loss, _) = softmax_cross_entropy(&calibrated, dataset.label(k))?;
            Ok((scores.argmax(), loss))
        })
        .collect::<Result<Vec<_>>>()?;

    let l = model.num_classes();
    let mut confusion = vec![vec![0usize; l]; l];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (k, (pred, sample_loss)) in results.into_iter().enumerate() {
        let truth = dataset.label(k);
        confusion[truth][pred] += 1;
        correct += usize::from(pred == truth);
        loss += sample_loss;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        mean_loss: loss / dataset.len() as f64,
        confusion,
    })
}

/// Fraction of samples whose top score matches the label.
pub fn evaluate(
    model: &MpsClassifier,
    dataset: &Dataset,
    temperature: Option<&Temperature>,
    feature_map: FeatureMap,
) -> Result<f64> {
    Ok(evaluate_detailed(model, dataset, temperature, feature_map)?.accuracy)
}

fn check_compatible(model: &MpsClassifier, dataset: &Dataset) -> Result<()> {
    if dataset.pixels_per_image() != model.n_sites() {
        return Err(FttnError::DimensionMismatch(format!(
            "images have {} pixels, model has {} sites",
            dataset.pixels_per_image(),
            model.n_sites()
        )));
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(FttnError::DimensionMismatch(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub beta: f64,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,step,train_loss,train_acc,test_acc,beta,wall_time_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.step,
            self.train_loss,
            self.train_acc,
            self.test_acc.map_or(String::new(), |a| a.to_string()),
            self.beta,
            self.wall_time_s
        )
    }
}

/// Shuffle seed of one epoch, derived from the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    rng::indexed_stream(seed, "epoch", epoch as u64).gen()
}

/// Trains in place. Metrics row 0 is the evaluation before any update;
/// each later row follows one epoch. `on_epoch` sees every row as it is made.
pub fn train(
    model: &mut MpsClassifier,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(FttnError::EmptyDataset);
    }
    check_compatible(model, train_set)?;
    if let Some(t) = test_set {
        check_compatible(model, t)?;
    }
    let start = Instant::now();
    let temperature = config.temperature.as_ref();
    let mut state = AdamState::new();
    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let ln_cal = calibrate(model, train_set, temperature, config.feature_map)?;

    let mut record = |epoch: usize, model: &MpsClassifier, steps: u64| -> Result<()> {
        let train_eval = evaluate_calibrated(model, train_set, temperature, config.feature_map, ln_cal)?;
        let test_acc = test_set
            .map(|t| evaluate(model, t, temperature, config.feature_map))
            .transpose()?;
        let row = EpochMetrics {
            epoch,
            step: steps,
            train_loss: train_eval.mean_loss,
            train_acc: train_eval.accuracy,
            test_acc,
            beta: config.beta(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        metrics.push(row);
        Ok(())
    };

    record(0, model, 0)?;
    for epoch in 1..=config.epochs {
        for batch in batches(train_set, config.batch_size, epoch_seed(config.seed, epoch)) {
            let prepared = Prepared::new(model, temperature, ln_cal)?;
            let (_, mut grads) = batch_gradient_prepared(
                model.shape(),
                &prepared,
                train_set,
                &batch.indices,
                config.feature_map,
                config.reduction,
            )?;
            if let Some(c) = config.clip {
                grads
                    .sites
                    .iter_mut()
                    .for_each(|t| t.data_mut().iter_mut().for_each(|g| *g = g.clamp(-c, c)));
            }
            adam_step(model, &grads, &mut state, &config.adam)?;
        }
        if model.sites().iter().any(|s| s.data().iter().any(|v| !v.is_finite())) {
            return Err(FttnError::NonFinite(format!("model parameters after epoch {epoch}")));
        }
        record(epoch, model, state.steps())?;
    }
    Ok(metrics)
}
