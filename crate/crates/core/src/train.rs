//! Adam optimization, augmentation, the training loop, metrics, 3-fold
//! cross-validation, the ablation ladder, and the minimum-force policy.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{bce_loss, ArchVariant, FusionModel, ModalityMask, ModelConfig, Reduction};
use crate::tensor::{Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write as _;
use std::path::Path;

/// Samples per gradient sub-chunk. Batches are split at fixed boundaries
/// into chunks that may run on different threads; chunk results are reduced
/// in index order, so the outcome is independent of the thread count.
const SUB_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Bilinear resize applied before cropping.
    pub resize_hw: (usize, usize),
    /// Random crop at train time, center crop at eval time.
    pub crop_hw: (usize, usize),
    /// Stop once the running train accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            resize_hw: (20, 20),
            crop_hw: (16, 16),
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self, n_samples: usize) -> Result<()> {
        if n_samples == 0 {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_samples {
            return Err(Error::Config(format!(
                "batch_size {} must be in 1..={n_samples}",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config("epochs and learning_rate must be positive".into()));
        }
        if self.crop_hw.0 > self.resize_hw.0 || self.crop_hw.1 > self.resize_hw.1 {
            return Err(Error::Config(format!(
                "crop {:?} larger than resize {:?}",
                self.crop_hw, self.resize_hw
            )));
        }
        Ok(())
    }
}

/// Per-parameter Adam moments; `t` counts completed steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &[(String, &Tensor)]) -> Self {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step over a flat parameter list.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((name, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![p.len()],
                rhs: vec![g.len()],
            });
        }
        let _ = name;
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ── augmentation ────────────────────────────────────────────────────

/// Bilinear resize with corner-aligned sampling, so a linear ramp stays
/// exactly linear.
pub fn bilinear_resize(image: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_resize",
            lhs: image.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let scale = |o: usize, on: usize, n: usize| -> f64 {
        if on <= 1 {
            0.0
        } else {
            o as f64 * (n - 1) as f64 / (on - 1) as f64
        }
    };
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = scale(oy, oh, h);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..ow {
                let fx = scale(ox, ow, w);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let v = plane[y0 * w + x0] * (1.0 - ty) * (1.0 - tx)
                    + plane[y0 * w + x1] * (1.0 - ty) * tx
                    + plane[y1 * w + x0] * ty * (1.0 - tx)
                    + plane[y1 * w + x1] * ty * tx;
                dst[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    Ok(out)
}

fn crop(image: &Tensor, oy: usize, ox: usize, hw: (usize, usize)) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ch_, cw) = hw;
    debug_assert!(oy + ch_ <= h && ox + cw <= w);
    let mut out = Tensor::zeros(&[c, ch_, cw]);
    let src = image.data();
    let dst = out.data_mut();
    for chn in 0..c {
        for y in 0..ch_ {
            let s = (chn * h + oy + y) * w + ox;
            dst[(chn * ch_ + y) * cw..(chn * ch_ + y + 1) * cw]
                .copy_from_slice(&src[s..s + cw]);
        }
    }
    out
}

/// Training view: bilinear resize then a uniformly random crop.
pub fn augment<R: Rng>(
    image: &Tensor,
    resize_hw: (usize, usize),
    crop_hw: (usize, usize),
    rng: &mut R,
) -> Result<Tensor> {
    if crop_hw.0 > resize_hw.0 || crop_hw.1 > resize_hw.1 {
        return Err(Error::Config(format!(
            "crop {crop_hw:?} larger than resized image {resize_hw:?}"
        )));
    }
    let resized = bilinear_resize(image, resize_hw)?;
    let oy = rng.gen_range(0..=resize_hw.0 - crop_hw.0);
    let ox = rng.gen_range(0..=resize_hw.1 - crop_hw.1);
    Ok(crop(&resized, oy, ox, crop_hw))
}

/// Evaluation view: bilinear resize then the deterministic center crop.
pub fn eval_view(image: &Tensor, resize_hw: (usize, usize), crop_hw: (usize, usize)) -> Result<Tensor> {
    if crop_hw.0 > resize_hw.0 || crop_hw.1 > resize_hw.1 {
        return Err(Error::Config(format!(
            "crop {crop_hw:?} larger than resized image {resize_hw:?}"
        )));
    }
    let resized = bilinear_resize(image, resize_hw)?;
    let oy = (resize_hw.0 - crop_hw.0) / 2;
    let ox = (resize_hw.1 - crop_hw.1) / 2;
    Ok(crop(&resized, oy, ox, crop_hw))
}

// ── metrics ─────────────────────────────────────────────────────────

/// Accuracy / precision / recall from a confusion matrix. Precision is
/// `None` when no positives were predicted, recall `None` when the set has
/// no positive labels; both are excluded from fold averages, with a count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Metrics> {
        let n = tp + fp + tn + fn_;
        if n == 0 {
            return Err(Error::Contract("metrics over an empty set".into()));
        }
        Ok(Metrics {
            accuracy: (tp + tn) as f64 / n as f64,
            precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
            recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
            tp,
            fp,
            tn,
            fn_,
        })
    }

    /// Threshold probabilities at `threshold` (p >= threshold predicts 1)
    /// and count the confusion matrix.
    pub fn from_predictions(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
        if probs.len() != labels.len() {
            return Err(Error::Contract("probs/labels length mismatch".into()));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= threshold, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Metrics::from_counts(tp, fp, tn, fn_)
    }
}

/// Mean and population standard deviation of per-fold metrics. `None`
/// entries are excluded and counted.
#[derive(Debug, Clone)]
pub struct MetricsSummary {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_precision: Option<f64>,
    pub std_precision: Option<f64>,
    pub undefined_precision: usize,
    pub mean_recall: Option<f64>,
    pub std_recall: Option<f64>,
    pub undefined_recall: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsSummary {
    pub fn over_folds(folds: &[Metrics]) -> Result<MetricsSummary> {
        if folds.is_empty() {
            return Err(Error::Contract("no folds to summarize".into()));
        }
        let acc: Vec<f64> = folds.iter().map(|m| m.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let prec: Vec<f64> = folds.iter().filter_map(|m| m.precision).collect();
        let rec: Vec<f64> = folds.iter().filter_map(|m| m.recall).collect();
        let (mean_precision, std_precision) = if prec.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&prec);
            (Some(m), Some(s))
        };
        let (mean_recall, std_recall) = if rec.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&rec);
            (Some(m), Some(s))
        };
        Ok(MetricsSummary {
            mean_accuracy,
            std_accuracy,
            mean_precision,
            std_precision,
            undefined_precision: folds.len() - prec.len(),
            mean_recall,
            std_recall,
            undefined_recall: folds.len() - rec.len(),
        })
    }
}

// ── forward helpers ─────────────────────────────────────────────────

fn model_views(model: &FusionModel, s: &Sample) -> Result<(Tensor, Tensor)> {
    let crop_hw = model.cfg.backbone.input_hw;
    Ok((
        eval_view(&s.visual, model.cfg.resize_hw, crop_hw)?,
        eval_view(&s.tactile, model.cfg.resize_hw, crop_hw)?,
    ))
}

/// Probability of grasp success for one raw (uncropped) sample.
pub fn predict_sample(model: &FusionModel, s: &Sample) -> Result<f64> {
    let (v, t) = model_views(model, s)?;
    let mut tape = Tape::new();
    let ids = model.stage(&mut tape, false);
    let vi = tape.leaf(v);
    let ti = tape.leaf(t);
    let p = model.forward(&mut tape, &ids, vi, ti)?;
    Ok(tape.data(p)[0])
}

/// A/P/R of the model over a dataset at the given decision threshold.
pub fn evaluate(model: &FusionModel, data: &[Sample], threshold: f64) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let probs: Result<Vec<f64>> = data
        .par_iter()
        .map(|s| predict_sample(model, s))
        .collect();
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&probs?, &labels, threshold)
}

// ── training loop ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub loss: f64,
    pub metrics: Metrics,
}

pub type TrainHistory = Vec<EpochStats>;

/// Train in-place with seeded shuffling and per-batch Adam steps. The
/// returned history holds the mean loss and running train metrics per epoch.
pub fn train(model: &mut FusionModel, data: &[Sample], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate(data.len())?;
    if cfg.crop_hw != model.cfg.backbone.input_hw {
        return Err(Error::Config(format!(
            "crop {:?} does not match model input {:?}",
            cfg.crop_hw, model.cfg.backbone.input_hw
        )));
    }
    if cfg.resize_hw != model.cfg.resize_hw {
        return Err(Error::Config(format!(
            "resize {:?} does not match model resize {:?}",
            cfg.resize_hw, model.cfg.resize_hw
        )));
    }

    let named = model.named_params();
    let mut state = AdamState::for_params(&named);
    let n_params = named.len();
    drop(named);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss_sum = 0.0;
        let mut probs = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());

        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            // fixed sub-chunk boundaries keep the reduction order independent
            // of thread scheduling
            let chunk_results: Result<Vec<(f64, Vec<f64>, Vec<Vec<f64>>)>> = batch
                .par_chunks(SUB_BATCH)
                .map(|chunk| forward_backward_chunk(model, data, chunk, cfg, epoch, b))
                .collect();
            let chunk_results = chunk_results?;

            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n_params);
            let mut batch_loss = 0.0;
            for (ci, (loss_sum, chunk_probs, chunk_grads)) in chunk_results.into_iter().enumerate()
            {
                batch_loss += loss_sum;
                probs.extend_from_slice(&chunk_probs);
                if ci == 0 {
                    grads = chunk_grads;
                } else {
                    for (acc, g) in grads.iter_mut().zip(chunk_grads) {
                        for (a, gv) in acc.iter_mut().zip(g) {
                            *a += gv;
                        }
                    }
                }
            }
            labels.extend(batch.iter().map(|&i| data[i].label));
            epoch_loss_sum += batch_loss;

            let mut params = model.named_params_mut();
            adam_step(&mut params, &grads, &mut state, cfg)?;
        }

        let metrics = Metrics::from_predictions(&probs, &labels, 0.5)?;
        let loss = epoch_loss_sum * cfg.batch_size as f64 / data.len() as f64;
        history.push(EpochStats { loss, metrics });

        if let Some(target) = cfg.stop_at_train_accuracy {
            if history.last().unwrap().metrics.accuracy >= target {
                break;
            }
        }
    }
    Ok(history)
}

/// Forward/backward over one fixed sub-chunk on its own tape. Returns the
/// summed per-sample loss scaled by 1/batch, the per-sample probabilities,
/// and the gradient of `(1/batch) * sum(chunk losses)`.
fn forward_backward_chunk(
    model: &FusionModel,
    data: &[Sample],
    chunk: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    batch_size: f64,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let ids = model.stage(&mut tape, true);
    let mut prob_ids = Vec::with_capacity(chunk.len());
    let mut labels = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let mut rng = crate::data::sample_rng(
            cfg.seed ^ 0xA0A0_A0A0_A0A0_A0A0,
            (epoch as u64) << 32 | i as u64,
        );
        let s = &data[i];
        let v = augment(&s.visual, cfg.resize_hw, cfg.crop_hw, &mut rng)?;
        let t = augment(&s.tactile, cfg.resize_hw, cfg.crop_hw, &mut rng)?;
        let vi = tape.leaf(v);
        let ti = tape.leaf(t);
        prob_ids.push(model.forward(&mut tape, &ids, vi, ti)?);
        labels.push(s.label as f64);
    }
    let probs_id = tape.concat(&prob_ids, 0)?;
    let loss_sum = bce_loss(&mut tape, probs_id, &labels, Reduction::Sum)?;
    let loss = tape.mul_scalar(loss_sum, 1.0 / batch_size)?;
    tape.backward(loss)?;

    let probs = tape.data(probs_id).to_vec();
    let grads: Vec<Vec<f64>> = ids
        .flat
        .iter()
        .map(|id| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(*id).len()])
        })
        .collect();
    Ok((tape.data(loss)[0], probs, grads))
}

// ── cross-validation and ablation ───────────────────────────────────

/// Stratified fold assignment: seeded shuffle within each class, then one
/// continuing round-robin pass over folds. Folds are disjoint, cover the
/// dataset, and differ in size by at most one (larger folds first).
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::Config(format!(
            "cannot split {} samples into {k} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0usize;
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    Ok(folds)
}

#[derive(Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub history: TrainHistory,
    /// Metrics on the held-out fold.
    pub val: Metrics,
    /// Metrics on the external test set, when one was supplied.
    pub test: Option<Metrics>,
    pub model: FusionModel,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub val_summary: MetricsSummary,
    pub test_summary: Option<MetricsSummary>,
}

/// K-fold cross-validation with a fresh, deterministically seeded model per
/// fold. Each fold trains on the complement and is scored on the held-out
/// fold (and optionally on an external test set).
pub fn kfold_cross_validate(
    data: &[Sample],
    k: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    external_test: Option<&[Sample]>,
) -> Result<CvOutcome> {
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let folds = stratified_folds(&labels, k, train_cfg.seed)?;
    let mut outcomes = Vec::with_capacity(k);
    for (fi, test_idx) in folds.iter().enumerate() {
        let in_test: std::collections::HashSet<usize> = test_idx.iter().copied().collect();
        let train_set: Vec<Sample> = (0..data.len())
            .filter(|i| !in_test.contains(i))
            .map(|i| data[i].clone())
            .collect();
        let val_set: Vec<Sample> = test_idx.iter().map(|&i| data[i].clone()).collect();

        let mut model = FusionModel::init(
            model_cfg.clone(),
            train_cfg.seed ^ (fi as u64 + 1).wrapping_mul(0x5851_F42D_4C95_7F2D),
        )?;
        let mut fold_cfg = train_cfg.clone();
        fold_cfg.seed = train_cfg.seed ^ (fi as u64) << 17;
        let history = train(&mut model, &train_set, &fold_cfg)?;
        let val = evaluate(&model, &val_set, 0.5)?;
        let test = match external_test {
            Some(t) => Some(evaluate(&model, t, 0.5)?),
            None => None,
        };
        outcomes.push(FoldOutcome {
            fold: fi,
            history,
            val,
            test,
            model,
        });
    }
    let val_summary = MetricsSummary::over_folds(&outcomes.iter().map(|o| o.val).collect::<Vec<_>>())?;
    let test_summary = if external_test.is_some() {
        Some(MetricsSummary::over_folds(
            &outcomes.iter().filter_map(|o| o.test).collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    Ok(CvOutcome {
        folds: outcomes,
        val_summary,
        test_summary,
    })
}

/// The five configurations of the comparison ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    VisualOnly,
    TactileOnly,
    ConcatFusion,
    CoAttentionOnly,
    FullFusion,
}

pub const ABLATION_LADDER: [AblationVariant; 5] = [
    AblationVariant::VisualOnly,
    AblationVariant::TactileOnly,
    AblationVariant::ConcatFusion,
    AblationVariant::CoAttentionOnly,
    AblationVariant::FullFusion,
];

impl AblationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::VisualOnly => "visual-only",
            AblationVariant::TactileOnly => "tactile-only",
            AblationVariant::ConcatFusion => "concat",
            AblationVariant::CoAttentionOnly => "ours-m",
            AblationVariant::FullFusion => "ours",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ABLATION_LADDER
            .iter()
            .copied()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{name}'")))
    }

    /// Derive this variant's model config from the base config.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::VisualOnly => {
                cfg.variant = ArchVariant::FullFusion;
                cfg.mask = ModalityMask::Tactile;
            }
            AblationVariant::TactileOnly => {
                cfg.variant = ArchVariant::FullFusion;
                cfg.mask = ModalityMask::Visual;
            }
            AblationVariant::ConcatFusion => {
                cfg.variant = ArchVariant::ConcatFusion;
                cfg.mask = ModalityMask::None;
            }
            AblationVariant::CoAttentionOnly => {
                cfg.variant = ArchVariant::CoAttentionOnly;
                cfg.mask = ModalityMask::None;
            }
            AblationVariant::FullFusion => {
                cfg.variant = ArchVariant::FullFusion;
                cfg.mask = ModalityMask::None;
            }
        }
        cfg
    }
}

#[derive(Debug)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub cv: CvOutcome,
}

/// Train all five ladder configurations identically (same data, folds, seeds,
/// and schedule) and collect their cross-validation outcomes.
pub fn ablation_suite(
    train_data: &[Sample],
    external_test: Option<&[Sample]>,
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
) -> Result<Vec<AblationRow>> {
    ABLATION_LADDER
        .iter()
        .map(|variant| {
            let cfg = variant.apply(base_cfg);
            let cv = kfold_cross_validate(train_data, k, &cfg, train_cfg, external_test)?;
            Ok(AblationRow {
                variant: *variant,
                cv,
            })
        })
        .collect()
}

// ── minimum-force policy ────────────────────────────────────────────

/// Sweep the gripping force from `f_min` upward in `step` increments and
/// return the first force the predictor accepts, or `(f_max, false)` if the
/// cap is reached without a predicted success.
pub fn minimum_force_policy(
    mut predictor: impl FnMut(f64) -> bool,
    f_min: f64,
    f_max: f64,
    step: f64,
) -> Result<(f64, bool)> {
    if !(f_min <= f_max) || !(step > 0.0) {
        return Err(Error::Config(format!(
            "invalid force sweep: f_min {f_min}, f_max {f_max}, step {step}"
        )));
    }
    let n_steps = ((f_max - f_min) / step + 1e-9).floor() as usize;
    for i in 0..=n_steps {
        let f = f_min + i as f64 * step;
        if predictor(f) {
            return Ok((f, true));
        }
    }
    Ok((f_max, false))
}

// ── metrics CSV ─────────────────────────────────────────────────────

/// One `run,fold,epoch,loss,accuracy,precision,recall` row. Undefined
/// precision/recall serialize as empty fields.
#[derive(Debug, Clone)]
pub struct CsvRow {
    pub run: String,
    pub fold: usize,
    /// Epoch number, or "final" for the per-fold summary row.
    pub epoch: String,
    pub loss: Option<f64>,
    pub metrics: Metrics,
}

pub fn format_metrics_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from("run,fold,epoch,loss,accuracy,precision,recall\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{}\n",
            r.run,
            r.fold,
            r.epoch,
            opt(r.loss),
            r.metrics.accuracy,
            opt(r.metrics.precision),
            opt(r.metrics.recall),
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format_metrics_csv(rows).as_bytes())?;
    Ok(())
}

/// History plus final metrics for one fold, in CSV row form.
pub fn csv_rows_for_fold(
    run: &str,
    fold: usize,
    history: &TrainHistory,
    final_metrics: &Metrics,
) -> Vec<CsvRow> {
    let mut rows: Vec<CsvRow> = history
        .iter()
        .enumerate()
        .map(|(e, st)| CsvRow {
            run: run.to_string(),
            fold,
            epoch: e.to_string(),
            loss: Some(st.loss),
            metrics: st.metrics,
        })
        .collect();
    rows.push(CsvRow {
        run: run.to_string(),
        fold,
        epoch: "final".to_string(),
        loss: None,
        metrics: *final_metrics,
    });
    rows
}
