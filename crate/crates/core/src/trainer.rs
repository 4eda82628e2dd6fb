//! Analysis-by-synthesis training.
//!
//! Each outer iteration synthesises every training utterance with the
//! current model, splits the residual evenly among the contours covering
//! each unit, and fits every generator to its share for a number of inner
//! epochs. Contour and weight networks are trained jointly through the
//! product `weight * contour`, with a per-batch penalty pulling the mean
//! weight towards 1.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FunctionType, ProsodyFrame, Utterance};
use crate::error::{Error, Result};
use crate::eval::{mean_std, rmse_vocalic};
use crate::net::{apply_update, Gradients, Momentum, SgdConfig};
use crate::wcg::{build_ramps, weight_from_sigmoid, ContextMode, Contribution, ModelSet, WeightedContourGenerator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Strength of the `(batch mean weight - 1)^2` penalty.
    pub reg_coeff: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_iterations: usize,
    pub inner_epochs: usize,
    /// Outer iterations without validation improvement before stopping.
    pub patience: usize,
    /// Stop when the training RMSE changes by less than this (semitones).
    pub tolerance: f64,
    pub seed: u64,
    /// Functions whose contour generators receive no updates.
    pub frozen_cg: BTreeSet<FunctionType>,
    pub pitch_loss_weight: f64,
    pub duration_loss_weight: f64,
    pub context_mode: ContextMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 256,
            reg_coeff: 10.0,
            learning_rate: 0.01,
            momentum: 0.9,
            max_iterations: 20,
            inner_epochs: 50,
            patience: 5,
            tolerance: 0.01,
            seed: 0,
            frozen_cg: BTreeSet::new(),
            pitch_loss_weight: 1.0,
            duration_loss_weight: 1.0,
            context_mode: ContextMode::Attitude,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".to_string());
        }
        if !(self.reg_coeff >= 0.0 && self.reg_coeff.is_finite()) {
            bad.push(format!("reg_coeff must be >= 0, got {}", self.reg_coeff));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.max_iterations == 0 || self.inner_epochs == 0 || self.patience == 0 {
            bad.push("max_iterations, inner_epochs and patience must be positive".to_string());
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            bad.push(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if !(self.pitch_loss_weight >= 0.0 && self.duration_loss_weight >= 0.0) {
            bad.push("loss weights must be non-negative".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }

    fn loss_weights(&self) -> [f64; 4] {
        let p = self.pitch_loss_weight;
        [p, p, p, self.duration_loss_weight]
    }
}

/// Every instance's weighted contribution, in instance order.
pub fn decompose(model: &ModelSet, utterance: &Utterance) -> Result<Vec<Contribution>> {
    (0..utterance.instances.len())
        .map(|k| model.contribution(utterance, k))
        .collect()
}

/// Overlap-and-add of all contributions; uncovered units stay zero.
pub fn synthesize(model: &ModelSet, utterance: &Utterance) -> Result<Vec<ProsodyFrame>> {
    Ok(overlap_add(&decompose(model, utterance)?, utterance.len()))
}

pub(crate) fn overlap_add(parts: &[Contribution], len: usize) -> Vec<ProsodyFrame> {
    let mut out = vec![ProsodyFrame::ZERO; len];
    for c in parts {
        for (k, f) in c.frames.iter().enumerate() {
            out[c.start + k] = out[c.start + k] + *f;
        }
    }
    out
}

/// Regression targets per instance: its contribution plus an equal share
/// of the residual at every unit it covers. Pitch residuals outside vocalic
/// nuclei count as zero.
pub fn distribute_residuals(model: &ModelSet, utterance: &Utterance) -> Result<Vec<Vec<ProsodyFrame>>> {
    let parts = decompose(model, utterance)?;
    Ok(targets_from_parts(&parts, utterance))
}

fn targets_from_parts(parts: &[Contribution], utterance: &Utterance) -> Vec<Vec<ProsodyFrame>> {
    let synth = overlap_add(parts, utterance.len());
    let mut cover = vec![0usize; utterance.len()];
    for c in parts {
        for k in 0..c.frames.len() {
            cover[c.start + k] += 1;
        }
    }
    let share: Vec<ProsodyFrame> = utterance
        .units
        .iter()
        .zip(&synth)
        .zip(&cover)
        .map(|((u, s), &n)| {
            let mut r = u.observed - *s;
            if !u.has_vocalic_nucleus {
                r.pitch = [0.0; 3];
            }
            let n = n.max(1) as f64;
            ProsodyFrame::from_array(r.to_array().map(|v| v / n))
        })
        .collect();
    parts
        .iter()
        .map(|c| {
            c.frames
                .iter()
                .enumerate()
                .map(|(k, f)| *f + share[c.start + k])
                .collect()
        })
        .collect()
}

/// One training example: a function instance with its inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ramps: Vec<[f64; 4]>,
    pub context: Vec<f64>,
    pub targets: Vec<[f64; 4]>,
}

/// Samples for every instance of the utterance, tagged with the generator index.
pub fn utterance_samples(model: &ModelSet, utterance: &Utterance) -> Result<Vec<(usize, Sample)>> {
    let parts = decompose(model, utterance)?;
    let targets = targets_from_parts(&parts, utterance);
    utterance
        .instances
        .iter()
        .enumerate()
        .zip(targets)
        .map(|((k, inst), t)| {
            let g = model
                .registry
                .position(&inst.function)
                .ok_or_else(|| Error::UnknownFunction(inst.function.to_string()))?;
            let ext = model.generators[g].scope_extension_right;
            Ok((
                g,
                Sample {
                    ramps: build_ramps(inst, ext, utterance.len())
                        .iter()
                        .map(|r| r.to_array())
                        .collect(),
                    context: model.context(utterance, k)?,
                    targets: t.iter().map(|f| f.to_array()).collect(),
                },
            ))
        })
        .collect()
}

/// Samples of the whole corpus grouped by generator, in corpus order.
pub fn corpus_samples(model: &ModelSet, corpus: &Corpus) -> Result<Vec<Vec<Sample>>> {
    let per_utt: Vec<Vec<(usize, Sample)>> = corpus
        .utterances
        .par_iter()
        .map(|u| utterance_samples(model, u))
        .collect::<Result<_>>()?;
    let mut grouped = vec![Vec::new(); model.generators.len()];
    for (g, s) in per_utt.into_iter().flatten() {
        grouped[g].push(s);
    }
    Ok(grouped)
}

/// Momentum buffers for both networks of one generator.
#[derive(Clone, Debug)]
pub struct GeneratorOptimizer {
    cg: Momentum,
    wm: Momentum,
}

impl GeneratorOptimizer {
    pub fn new(g: &WeightedContourGenerator) -> Self {
        GeneratorOptimizer {
            cg: Momentum::new(&g.cg),
            wm: Momentum::new(&g.wm),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub weight_mean: f64,
}

/// One gradient step on `batch`:
/// `L = mean_frames(sum_c lw_c (w*c - t)^2) + reg_coeff * (mean_batch(w) - 1)^2`.
pub fn train_batch(
    g: &mut WeightedContourGenerator,
    batch: &[&Sample],
    config: &TrainingConfig,
    weight_target: crate::wcg::WeightTarget,
    opt: &mut GeneratorOptimizer,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let frozen = config.frozen_cg.contains(&g.function);
    let lw = config.loss_weights();
    let n_frames: usize = batch.iter().map(|s| s.ramps.len()).sum();
    let norm = 1.0 / n_frames.max(1) as f64;
    let mut g_cg = Gradients::zeros_like(&g.cg);
    let mut g_wm = Gradients::zeros_like(&g.wm);

    let mut sq = 0.0;
    let mut weights = Vec::with_capacity(batch.len());
    let mut dweights = Vec::with_capacity(batch.len());
    let mut wm_traces = Vec::with_capacity(batch.len());
    for s in batch {
        if s.ramps.len() != s.targets.len() {
            return Err(Error::Dimension {
                what: "sample targets",
                expected: s.ramps.len(),
                got: s.targets.len(),
            });
        }
        let (w, trace) = if g.identity_weight {
            (1.0, None)
        } else {
            let t = g.wm.trace(&s.context)?;
            (weight_from_sigmoid(t.output()[0]), Some(t))
        };
        let mut dw = 0.0;
        for (ramp, target) in s.ramps.iter().zip(&s.targets) {
            let trace = g.cg.trace(ramp)?;
            let c = trace.output();
            let mut dc = [0.0; 4];
            for k in 0..4 {
                let scaled = weight_target.scales(k);
                let pred = if scaled { w * c[k] } else { c[k] };
                let err = pred - target[k];
                sq += lw[k] * err * err;
                let dpred = 2.0 * lw[k] * err * norm;
                if scaled {
                    dc[k] = w * dpred;
                    dw += dpred * c[k];
                } else {
                    dc[k] = dpred;
                }
            }
            if !frozen {
                g.cg.backward_trace(&trace, &dc, &mut g_cg)?;
            }
        }
        weights.push(w);
        dweights.push(dw);
        wm_traces.push(trace);
    }
    let b = batch.len() as f64;
    let mean_w = weights.iter().sum::<f64>() / b;
    let penalty = if g.identity_weight {
        0.0
    } else {
        config.reg_coeff * (mean_w - 1.0).powi(2)
    };
    let loss = sq * norm + penalty;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss of `{}`", g.function)));
    }
    if !g.identity_weight {
        let dpen = 2.0 * config.reg_coeff * (mean_w - 1.0) / b;
        for (dw, trace) in dweights.iter().zip(&wm_traces) {
            if let Some(t) = trace {
                // w = 2 * sigmoid output
                g.wm.backward_trace(t, &[2.0 * (dw + dpen)], &mut g_wm)?;
            }
        }
    }
    let sgd = config.sgd();
    if !frozen {
        apply_update(&mut g.cg, &g_cg, &mut opt.cg, &sgd)?;
    }
    if !g.identity_weight {
        apply_update(&mut g.wm, &g_wm, &mut opt.wm, &sgd)?;
    }
    Ok(BatchStats {
        loss,
        weight_mean: mean_w,
    })
}

/// One pass over `samples` in batches of `config.batch_size`, in the given
/// order. Returns the mean batch loss.
pub fn train_function_epoch(
    g: &mut WeightedContourGenerator,
    samples: &[Sample],
    order: &[usize],
    config: &TrainingConfig,
    weight_target: crate::wcg::WeightTarget,
    opt: &mut GeneratorOptimizer,
) -> Result<f64> {
    if order.is_empty() {
        return Err(Error::InvalidArgument(format!("no samples for `{}`", g.function)));
    }
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        total += train_batch(g, &batch, config, weight_target, opt)?.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub function: FunctionType,
    pub samples: usize,
    pub loss: f64,
    pub weight_mean: f64,
    pub weight_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phase: String,
    pub iteration: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub functions: Vec<FunctionRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
    /// Index into `records` of the restored snapshot of the last phase.
    pub best: Option<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn best_record(&self) -> Option<&IterationRecord> {
        self.best.and_then(|b| self.records.get(b))
    }

    fn append(&mut self, other: TrainHistory) {
        let offset = self.records.len();
        self.records.extend(other.records);
        self.best = other.best.map(|b| b + offset);
    }

    /// Writes one row per (iteration, function).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record([
            "phase",
            "iteration",
            "function",
            "samples",
            "loss",
            "weight_mean",
            "weight_std",
            "train_rmse",
            "val_rmse",
        ])?;
        for r in &self.records {
            for f in &r.functions {
                w.write_record([
                    r.phase.clone(),
                    r.iteration.to_string(),
                    f.function.to_string(),
                    f.samples.to_string(),
                    f.loss.to_string(),
                    f.weight_mean.to_string(),
                    f.weight_std.to_string(),
                    r.train_rmse.to_string(),
                    r.val_rmse.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_coverage(model: &ModelSet, corpus: &Corpus) -> Result<()> {
    for u in &corpus.utterances {
        for i in &u.instances {
            model.generator(&i.function)?;
        }
        if model.registry.attitude_position(&u.attitude).is_none() {
            return Err(Error::UnknownFunction(u.attitude.to_string()));
        }
    }
    Ok(())
}

/// Corpus RMSE used for monitoring; falls back to `fallback` when the
/// corpus has no scorable utterance.
fn monitor_rmse(model: &ModelSet, corpus: &Corpus, fallback: f64) -> Result<f64> {
    if corpus.is_empty() {
        return Ok(fallback);
    }
    let r = rmse_vocalic(model, corpus)?;
    Ok(if r.per_utterance.is_empty() { fallback } else { r.mean })
}

/// Runs the outer analysis-by-synthesis loop with early stopping on the
/// validation pitch RMSE and restores the best snapshot.
pub fn analysis_by_synthesis(
    model: ModelSet,
    train: &Corpus,
    val: &Corpus,
    config: &TrainingConfig,
) -> Result<(ModelSet, TrainHistory)> {
    run_phase(model, train, val, config, "full")
}

fn run_phase(
    mut model: ModelSet,
    train: &Corpus,
    val: &Corpus,
    config: &TrainingConfig,
    phase: &str,
) -> Result<(ModelSet, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    check_coverage(&model, train)?;
    check_coverage(&model, val)?;

    let weight_target = model.weight_target;
    let mut opts: Vec<GeneratorOptimizer> = model.generators.iter().map(GeneratorOptimizer::new).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelSet, usize)> = None;
    let mut stale = 0;
    let mut prev_train = f64::INFINITY;

    for it in 0..config.max_iterations {
        let samples = corpus_samples(&model, train)?;
        let losses: Vec<Option<f64>> = model
            .generators
            .par_iter_mut()
            .zip(opts.par_iter_mut())
            .zip(samples.par_iter())
            .enumerate()
            .map(|(gi, ((g, opt), samples))| -> Result<Option<f64>> {
                if samples.is_empty() {
                    return Ok(None);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(((it as u64) << 32) | gi as u64);
                let mut order: Vec<usize> = (0..samples.len()).collect();
                let mut loss = 0.0;
                for _ in 0..config.inner_epochs {
                    order.shuffle(&mut rng);
                    loss = train_function_epoch(g, samples, &order, config, weight_target, opt)?;
                }
                g.trained = true;
                Ok(Some(loss))
            })
            .collect::<Result<_>>()?;

        let functions = model
            .generators
            .iter()
            .zip(&samples)
            .zip(&losses)
            .filter_map(|((g, s), loss)| loss.map(|l| (g, s, l)))
            .map(|(g, s, loss)| {
                let w: Vec<f64> = s.iter().map(|x| g.weight(&x.context)).collect::<Result<_>>()?;
                let (weight_mean, weight_std) = mean_std(&w);
                Ok(FunctionRecord {
                    function: g.function.clone(),
                    samples: s.len(),
                    loss,
                    weight_mean,
                    weight_std,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let train_rmse = monitor_rmse(&model, train, f64::NAN)?;
        let val_rmse = monitor_rmse(&model, val, train_rmse)?;
        if !val_rmse.is_finite() {
            return Err(Error::Divergence(format!(
                "validation RMSE is {val_rmse} at iteration {it} of phase `{phase}`"
            )));
        }
        history.records.push(IterationRecord {
            phase: phase.to_string(),
            iteration: it,
            train_rmse,
            val_rmse,
            functions,
        });

        match &best {
            Some((b, _, _)) if val_rmse >= *b => stale += 1,
            _ => {
                best = Some((val_rmse, model.clone(), history.records.len() - 1));
                stale = 0;
            }
        }
        if stale >= config.patience || (prev_train - train_rmse).abs() < config.tolerance {
            break;
        }
        prev_train = train_rmse;
    }
    let (_, snapshot, idx) = best.expect("at least one iteration ran");
    history.best = Some(idx);
    Ok((snapshot, history))
}

/// Two-phase training: fit contour generators on `pretrain` with identity
/// weights, then train weights on `full` with those generators frozen.
///
/// Functions that never occur in `pretrain` keep trainable generators in the
/// second phase.
pub fn pretrain_freeze(
    model: ModelSet,
    pretrain: &Corpus,
    full: &Corpus,
    val: &Corpus,
    config: &TrainingConfig,
) -> Result<(ModelSet, TrainHistory)> {
    if pretrain.is_empty() {
        return Err(Error::InvalidArgument("pretraining subset is empty".into()));
    }
    let attitudes: BTreeSet<&FunctionType> = pretrain.utterances.iter().map(|u| &u.attitude).collect();
    let pre_val = val.filter(|u| attitudes.contains(&u.attitude));
    let (phase1, mut history) = run_phase(model.set_identity_weights(), pretrain, &pre_val, config, "pretrain")?;
    let (phase2, h2) = weights_phase(phase1, full, val, config, "freeze")?;
    history.append(h2);
    Ok((phase2, history))
}

/// Retrains only the weight modules of generators that have already been
/// fitted; generators never trained stay fully trainable.
pub fn retrain_weights_only(
    model: ModelSet,
    corpus: &Corpus,
    val: &Corpus,
    config: &TrainingConfig,
) -> Result<(ModelSet, TrainHistory)> {
    weights_phase(model, corpus, val, config, "weights")
}

fn weights_phase(
    mut model: ModelSet,
    corpus: &Corpus,
    val: &Corpus,
    config: &TrainingConfig,
    phase: &str,
) -> Result<(ModelSet, TrainHistory)> {
    let mut cfg = config.clone();
    for g in &mut model.generators {
        g.identity_weight = false;
        if g.trained {
            cfg.frozen_cg.insert(g.function.clone());
        }
    }
    run_phase(model, corpus, val, &cfg, phase)
}
