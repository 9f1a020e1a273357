//! SGD training of the prompt parameters over a frozen backbone, the
//! fine-tuning baseline, and species pre-training of the backbone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::Backbone;
use crate::error::{FrptError, Result};
use crate::model::{Ablation, FrptParams};
use crate::retrieval::{self, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub gaussian_std: f64,
    pub flip: bool,
    pub crop: bool,
    /// CAH bottleneck ratio and IN epsilon.
    pub reduction: usize,
    pub epsilon: f64,
    /// Checkpoint period in epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Train images scored for the per-epoch Recall@1 column.
    pub recall_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 200,
            lr_decay: 0.9,
            lr_decay_every: 50,
            seed: 0,
            gaussian_std: 0.25,
            flip: true,
            crop: true,
            reduction: 8,
            epsilon: 1e-5,
            checkpoint_every: 0,
            recall_subset: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FrptError::Config(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return bad("weight_decay must be non-negative and lr_decay positive");
        }
        if self.lr_decay_every == 0 || self.reduction == 0 {
            return bad("lr_decay_every and reduction must be at least 1");
        }
        if !(self.gaussian_std > 0.0) || !(self.epsilon > 0.0) {
            return bad("gaussian_std and epsilon must be positive");
        }
        Ok(())
    }
}

/// `lr0 · lr_decay^floor(epoch / lr_decay_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_update(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || grad.len() != velocity.len() {
        return Err(FrptError::Shape(format!(
            "sgd lengths differ: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(FrptError::Divergence(format!("non-finite gradient {} at index {i}", grad[i])));
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + (g + wd * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Horizontal flip and a random crop from a 9/8-upscaled canvas.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, flip: bool, crop: bool, rng: &mut R) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = image.clone();
    if crop {
        let (bh, bw) = (h * 9 / 8, w * 9 / 8);
        let big = resize(image, bh, bw);
        let (oy, ox) = (rng.gen_range(0..=bh - h), rng.gen_range(0..=bw - w));
        let d = out.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    d[(ch * h + y) * w + x] = big.data()[(ch * bh + y + oy) * bw + x + ox];
                }
            }
        }
    }
    if flip && rng.gen_bool(0.5) {
        for row in out.data_mut().chunks_mut(w) {
            row.reverse();
        }
    }
    out
}

/// Bilinear resize with half-pixel centres.
fn resize(image: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = |len: usize, olen: usize, o: usize| {
        let f = ((o as f32 + 0.5) * len as f32 / olen as f32 - 0.5).clamp(0.0, (len - 1) as f32);
        let i = (f.floor() as usize).min(len.saturating_sub(2));
        (i, f - i as f32)
    };
    let d = image.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for y in 0..oh {
        let (y0, fy) = src(h, oh, y);
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..ow {
            let (x0, fx) = src(w, ow, x);
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * oh + y) * ow + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).expect("resize shape")
}

/// Momentum buffers, one per learnable tensor.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    velocities: Vec<Vec<f32>>,
}

/// Learnable state of a run: the prompt parameters and, when fine-tuning,
/// the backbone.
pub struct Learner<'a> {
    pub params: FrptParams,
    pub backbone: &'a mut Backbone,
}

impl Learner<'_> {
    fn tensors_mut(&mut self) -> Vec<(&mut Tensor<f32>, bool)> {
        let mut v: Vec<(&mut Tensor<f32>, bool)> =
            self.params.named_mut().into_iter().map(|(_, t, decay)| (t, decay)).collect();
        if !self.backbone.is_frozen() {
            for s in &mut self.backbone.stages {
                v.push((&mut s.weight, true));
                v.push((&mut s.bias, false));
            }
        }
        v
    }
}

/// Loss and gradients of one image, gradients in [`Learner`] tensor order.
fn image_gradients(params: &FrptParams, backbone: &Backbone, image: &Tensor<f32>, label: usize) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let (out, loss) = params.loss(&mut tape, backbone, image, label)?;
    let value = tape.scalar(loss) as f64;
    if !value.is_finite() {
        return Err(FrptError::Divergence(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(loss)?;
    let mut vars = out.params.ordered();
    if !backbone.is_frozen() {
        for (w, b) in out.backbone.weights.iter().zip(&out.backbone.biases) {
            vars.push(*w);
            vars.push(*b);
        }
    }
    let sizes: Vec<usize> = params
        .named()
        .iter()
        .map(|(_, t)| t.len())
        .chain(backbone.stages.iter().filter(|_| !backbone.is_frozen()).flat_map(|s| [s.weight.len(), s.bias.len()]))
        .collect();
    let g = vars
        .iter()
        .zip(sizes)
        .map(|(&v, n)| grads.get(v).map_or_else(|| vec![0.0; n], <[f32]>::to_vec))
        .collect();
    Ok((value, g))
}

/// One SGD step on the mean loss of `batch`. Images run in parallel; their
/// gradients are summed in batch order, so results do not depend on
/// scheduling.
pub fn train_step(learner: &mut Learner, batch: &[(Tensor<f32>, usize)], opt: &mut OptState, lr: f64, cfg: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(FrptError::InvalidValue("empty batch".into()));
    }
    let classes = learner.params.classes();
    if let Some((_, l)) = batch.iter().find(|(_, l)| *l >= classes) {
        return Err(FrptError::InvalidValue(format!("label {l} outside {classes} classes")));
    }
    let (params, backbone) = (&learner.params, &*learner.backbone);
    let per_image = batch
        .par_iter()
        .map(|(img, label)| image_gradients(params, backbone, img, *label))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut total = per_image[0].1.clone();
    for (_, g) in &per_image[1..] {
        for (acc, gi) in total.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    let loss = per_image.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
    let mut tensors = learner.tensors_mut();
    if opt.velocities.is_empty() {
        opt.velocities = tensors.iter().map(|(t, _)| vec![0.0; t.len()]).collect();
    }
    if opt.velocities.len() != tensors.len() {
        return Err(FrptError::Structure("optimizer state does not match the learnable tensors".into()));
    }
    // check every gradient before touching any parameter
    for g in &mut total {
        g.iter_mut().for_each(|v| *v *= scale);
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(FrptError::Divergence(format!("non-finite gradient {bad}")));
        }
    }
    for (((t, decay), g), v) in tensors.iter_mut().zip(&total).zip(&mut opt.velocities) {
        let wd = if *decay { cfg.weight_decay } else { 0.0 };
        sgd_update(t.data_mut(), g, v, lr, cfg.momentum, wd)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub recall1: f64,
}

pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.frpt";

pub struct TrainOutcome {
    pub params: FrptParams,
    /// Present for fine-tuning runs.
    pub tuned_backbone: Option<Backbone>,
    pub log: Vec<EpochLog>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Dense labels `0..K` in ascending order of the original labels.
pub fn relabel(samples: &[Sample]) -> (Vec<usize>, Vec<usize>) {
    let mut classes: Vec<usize> = samples.iter().map(|s| s.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let dense = samples.iter().map(|s| classes.binary_search(&s.label).expect("present")).collect();
    (classes, dense)
}

/// The first `shots` images of every class, in input order.
pub fn take_shots(samples: &[Sample], shots: usize) -> Vec<Sample> {
    let mut seen = std::collections::HashMap::new();
    samples
        .iter()
        .filter(|s| {
            let n = seen.entry(s.label).or_insert(0usize);
            *n += 1;
            *n <= shots
        })
        .cloned()
        .collect()
}

/// Trains prompt parameters (or, with `ablation.finetune`, the backbone as
/// well) on `train`. Writes `metrics.csv` and `checkpoint.frpt` under `out`
/// when given. The caller's backbone is never modified.
pub fn train(
    cfg: &TrainConfig,
    train: &[Sample],
    backbone: &Backbone,
    ablation: &Ablation,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(FrptError::InvalidValue("no training images".into()));
    }
    let image_size = train[0].image.shape()[1];
    let (classes, dense) = relabel(train);
    let mut init_rng = rng_for(cfg.seed, 0);
    let params = FrptParams::init(
        backbone,
        image_size,
        classes.len(),
        ablation,
        cfg.gaussian_std,
        cfg.reduction,
        cfg.epsilon,
        &mut init_rng,
    )?;
    let mut tuned = backbone.clone();
    tuned.set_learnable(ablation.finetune);
    let mut learner = Learner { params, backbone: &mut tuned };
    log::info!(
        "{}: {} learnable parameters, {} classes, {} images",
        ablation.label(),
        learner.params.parameter_count() + if ablation.finetune { backbone.parameter_count() } else { 0 },
        classes.len(),
        train.len()
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| FrptError::io(dir, e))?;
    }
    let subset: Vec<Sample> = {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng_for(cfg.seed, 1));
        idx.truncate(cfg.recall_subset.min(train.len()));
        idx.sort_unstable();
        idx.iter().map(|&i| train[i].clone()).collect()
    };
    let mut opt = OptState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng_for(cfg.seed, 2 + 2 * epoch as u64));
        let mut aug_rng = rng_for(cfg.seed, 3 + 2 * epoch as u64);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Tensor<f32>, usize)> = chunk
                .iter()
                .map(|&i| (augment(&train[i].image, cfg.flip, cfg.crop, &mut aug_rng), dense[i]))
                .collect();
            let loss = train_step(&mut learner, &batch, &mut opt, lr, cfg).map_err(|e| {
                log::error!("epoch {epoch}: {e}; last checkpoint kept");
                e
            })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let index = retrieval::build_index(&subset, learner.backbone, &learner.params)?;
        let recall1 = retrieval::recall_at_k(&index, 1)?.recall;
        let row = EpochLog { epoch, lr, loss: loss_sum / train.len() as f64, recall1 };
        log::debug!("{row:?}");
        log.push(row);
        if let Some(dir) = out {
            write_metrics(&dir.join(METRICS), &log)?;
            let last = epoch + 1 == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                let tuned_ref = ablation.finetune.then_some(&*learner.backbone);
                learner.params.save(&dir.join(CHECKPOINT), tuned_ref)?;
            }
        }
    }
    if let (Some(dir), 0) = (out, cfg.epochs) {
        write_metrics(&dir.join(METRICS), &log)?;
        learner.params.save(&dir.join(CHECKPOINT), ablation.finetune.then_some(&*learner.backbone))?;
    }
    let params = learner.params;
    Ok(TrainOutcome { params, tuned_backbone: ablation.finetune.then_some(tuned), log })
}

pub fn write_metrics(path: &Path, log: &[EpochLog]) -> Result<()> {
    let err = |e: csv::Error| FrptError::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["epoch", "lr", "loss", "recall1"]).map_err(err)?;
    for r in log {
        w.write_record([r.epoch.to_string(), r.lr.to_string(), r.loss.to_string(), r.recall1.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| FrptError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub heldout_accuracy: f64,
    pub chance: f64,
    pub log: Vec<EpochLog>,
}

/// Prompt-tuning settings of the recorded desk benchmark runs.
pub fn benchmark_config(seed: u64) -> TrainConfig {
    TrainConfig { lr0: 3e-3, epochs: 60, gaussian_std: 0.1, recall_subset: 64, seed, ..TrainConfig::default() }
}

/// [`benchmark_config`] stretched so a run over `shots` images per class
/// makes as many image passes, and decays its rate as often, as a run over
/// `full` images per class. The per-epoch recall subset shrinks to match.
pub fn few_shot_config(seed: u64, shots: usize, full: usize) -> TrainConfig {
    let base = benchmark_config(seed);
    let shots = shots.clamp(1, full.max(1));
    let stretch = |n: usize| (n * full).div_ceil(shots);
    TrainConfig {
        epochs: stretch(base.epochs),
        lr_decay_every: stretch(base.lr_decay_every),
        recall_subset: (base.recall_subset * shots / full).max(2),
        ..base
    }
}

/// Species pre-training settings for the desk backbone.
pub fn pretrain_config(seed: u64) -> TrainConfig {
    TrainConfig { lr0: 3e-3, epochs: 30, recall_subset: 64, seed, ..TrainConfig::default() }
}

/// Fraction of `samples` whose arg-max logit is their label.
pub fn accuracy(params: &FrptParams, backbone: &Backbone, samples: &[(Tensor<f32>, usize)]) -> Result<f64> {
    let right = samples
        .par_iter()
        .map(|(img, label)| {
            let mut tape = Tape::new();
            let out = params.forward(&mut tape, backbone, img)?;
            let logits = tape.value(out.logits);
            let best = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)));
            Ok(usize::from(best == Some(*label)))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(right.iter().sum::<usize>() as f64 / samples.len().max(1) as f64)
}

/// Trains `init` end to end as a species classifier, returns the frozen
/// result. Labels must already be dense `0..K`.
pub fn pretrain_backbone(
    cfg: &TrainConfig,
    init: &Backbone,
    species_train: &[Sample],
    species_heldout: &[Sample],
) -> Result<(Backbone, PretrainReport)> {
    let ablation = Ablation { use_dpp: false, use_cah: false, use_in: false, finetune: true };
    let outcome = train(cfg, species_train, init, &ablation, None)?;
    let mut backbone = outcome.tuned_backbone.expect("fine-tuning run keeps its backbone");
    backbone.set_learnable(false);
    let (classes, _) = relabel(species_train);
    let heldout: Vec<(Tensor<f32>, usize)> = species_heldout
        .iter()
        .map(|s| {
            classes
                .binary_search(&s.label)
                .map(|l| (s.image.clone(), l))
                .map_err(|_| FrptError::InvalidValue(format!("held-out species {} unseen in training", s.label)))
        })
        .collect::<Result<_>>()?;
    let heldout_accuracy = accuracy(&outcome.params, &backbone, &heldout)?;
    Ok((backbone, PretrainReport { heldout_accuracy, chance: 1.0 / classes.len() as f64, log: outcome.log }))
}

/// Output directory layout helper for ablation sweeps.
pub fn run_dir(root: &Path, ablation: &Ablation, seed: u64) -> PathBuf {
    let tag = ablation.label().replace(['+', '(', ')', '/', ' '], "_");
    root.join(format!("{tag}_seed{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneArch;

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-3);
        assert_eq!(lr_schedule(49, &cfg), 1e-3);
        assert!((lr_schedule(50, &cfg) - 9e-4).abs() < 1e-15);
        assert!((lr_schedule(100, &cfg) - 8.1e-4).abs() < 1e-15);
    }

    #[test]
    fn sgd_cases() {
        let mut p = vec![1.0f32, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, [0.95, -2.1]);

        // two steps under a constant gradient move by lr·g·(1 + 1.9)
        let mut p = vec![0.0f32];
        let mut v = vec![0.0f32];
        for _ in 0..2 {
            sgd_update(&mut p, &[1.0], &mut v, 0.01, 0.9, 0.0).unwrap();
        }
        assert!((p[0] + 0.01 * 2.9).abs() < 1e-7);

        let mut p = vec![3.0f32];
        sgd_update(&mut p, &[0.0], &mut [0.0], 0.5, 0.9, 0.0).unwrap();
        assert_eq!(p, [3.0]);

        assert!(matches!(sgd_update(&mut [0.0], &[f32::NAN], &mut [0.0], 0.1, 0.9, 0.0), Err(FrptError::Divergence(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn augment_keeps_shape_and_identity_when_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        assert_eq!(augment(&img, false, false, &mut rng), img);
        let a = augment(&img, true, true, &mut rng);
        assert_eq!(a.shape(), [3, 32, 32]);
        let flat = Tensor::full(&[3, 8, 8], 0.4f32);
        assert!(augment(&flat, true, true, &mut rng).max_abs_diff(&flat) < 1e-6);
    }

    #[test]
    fn few_shot_budget_matches_full_runs() {
        let full = benchmark_config(3);
        let five = few_shot_config(3, 5, 40);
        assert_eq!(five.epochs * 5, full.epochs * 40);
        assert_eq!(five.lr_decay_every * 5, full.lr_decay_every * 40);
        assert_eq!(five.seed, 3);
        assert_eq!(few_shot_config(3, 40, 40), full);
        assert_eq!(few_shot_config(0, 7, 40).epochs, (60 * 40usize).div_ceil(7));
    }

    #[test]
    fn shots_take_first_of_each_class() {
        let s: Vec<Sample> = (0..12)
            .map(|i| Sample { id: i, label: i % 3, image: Tensor::zeros(&[1]) })
            .collect();
        let ids: Vec<usize> = take_shots(&s, 2).iter().map(|s| s.id).collect();
        assert_eq!(ids, [0, 1, 2, 3, 4, 5]);
    }

    fn toy(n_per: usize, seed: u64) -> Vec<Sample> {
        // four classes, each a square of its own colour at a random spot
        let colours = [[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9], [0.9, 0.9, 0.1]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..4 * n_per {
            let c = i % 4;
            let mut img = Tensor::uniform(&[3, 16, 16], 0.0, 0.2, &mut rng);
            let (y0, x0) = (rng.gen_range(0..10), rng.gen_range(0..10));
            for (ch, &v) in colours[c].iter().enumerate() {
                for y in 0..6 {
                    for x in 0..6 {
                        img.set(&[ch, y0 + y, x0 + x], v);
                    }
                }
            }
            out.push(Sample { id: i, label: c, image: img });
        }
        out
    }

    #[test]
    fn frozen_step_leaves_backbone_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Backbone::<f32>::init(&BackboneArch::desk(), &mut rng).unwrap();
        let before = b.to_weight_file().encode();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, recall_subset: 8, ..TrainConfig::default() };
        let out = train(&cfg, &toy(2, 0), &b, &Ablation::default(), None).unwrap();
        assert_eq!(b.to_weight_file().encode(), before);
        assert!(out.tuned_backbone.is_none());
        assert!(out.params.dpp.as_ref().unwrap().w_k.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn accumulation_does_not_depend_on_threads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Backbone::<f32>::init(&BackboneArch::desk(), &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, recall_subset: 4, ..TrainConfig::default() };
        let data = toy(2, 1);
        let run = || train(&cfg, &data, &b, &Ablation::default(), None).unwrap().params;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(run);
        let parallel = run();
        for ((_, a), (_, b)) in serial.named().iter().zip(parallel.named()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn toy_loss_falls_below_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Backbone::<f32>::init(&BackboneArch::desk(), &mut rng).unwrap();
        // 200 steps of batch 8 over 32 images
        let cfg = TrainConfig { epochs: 50, batch_size: 8, lr0: 0.5, recall_subset: 8, crop: false, flip: false, ..TrainConfig::default() };
        let ablation = Ablation { use_dpp: false, ..Ablation::default() };
        let out = train(&cfg, &toy(8, 2), &b, &ablation, None).unwrap();
        let first = out.log[0].loss;
        let last = out.log.last().unwrap().loss;
        assert!((first - 4f64.ln()).abs() < 0.2, "first epoch loss {first}");
        assert!(last < 0.5, "final loss {last}");
    }
}
