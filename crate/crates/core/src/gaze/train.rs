use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cluster::{kmeans_cluster, BalancedSampler, ClusterModel, DEFAULT_CLUSTERS};
use super::data::{GazeDataset, GazeSample};
use super::metrics::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::model::{count_params, param_digest, GazeModel, Module};
use crate::tensor::{l1_loss, AdamW, AdamWConfig, Tensor};

/// Hyperparameters for both training phases. Serialized as a flat
/// `key=value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Replay samples per personalization step.
    pub replay_r: usize,
    pub seed: u64,
    /// Head-only epochs before adapter training.
    pub warmup_epochs: usize,
    pub head_lr: f32,
    pub weight_decay: f32,
    pub clusters: usize,
    /// Personalization stops after this many epochs without a better
    /// personal-validation error.
    pub patience: usize,
    /// Adapter norms use batch statistics while training. Off keeps the
    /// running statistics fixed.
    pub batch_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 15,
            batch_size: 32,
            replay_r: 15,
            seed: 0,
            warmup_epochs: 1,
            head_lr: 1e-2,
            weight_decay: 0.05,
            clusters: DEFAULT_CLUSTERS,
            patience: 10,
            batch_stats: true,
        }
    }
}

impl TrainConfig {
    /// Low learning rate and heavy replay: five images are memorized within
    /// a few dozen steps at higher rates, which costs general accuracy.
    pub fn personalization() -> Self {
        Self {
            lr: 5e-4,
            epochs: 200,
            replay_r: 45,
            batch_stats: false,
            ..Self::default()
        }
    }

    /// Overrides fields from `key=value` lines; `#` starts a comment.
    pub fn apply_kv(mut self, text: &str) -> Result<Self> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(format!("`{k}` needs a number, got `{v}`")))
            };
            let int = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| bad(format!("`{k}` needs an integer, got `{v}`")))
            };
            match k {
                "lr" => self.lr = num(v)? as f32,
                "epochs" => self.epochs = int(v)? as usize,
                "batch_size" => self.batch_size = int(v)? as usize,
                "replay_r" => self.replay_r = int(v)? as usize,
                "seed" => self.seed = int(v)?,
                "warmup_epochs" => self.warmup_epochs = int(v)? as usize,
                "head_lr" => self.head_lr = num(v)? as f32,
                "weight_decay" => self.weight_decay = num(v)? as f32,
                "clusters" => self.clusters = int(v)? as usize,
                "patience" => self.patience = int(v)? as usize,
                "batch_stats" => {
                    self.batch_stats = v
                        .parse()
                        .map_err(|_| bad(format!("`{k}` needs true or false, got `{v}`")))?
                }
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        Ok(self)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lr={}\nepochs={}\nbatch_size={}\nreplay_r={}\nseed={}\nwarmup_epochs={}\nhead_lr={}\nweight_decay={}\nclusters={}\npatience={}\nbatch_stats={}\n",
            self.lr,
            self.epochs,
            self.batch_size,
            self.replay_r,
            self.seed,
            self.warmup_epochs,
            self.head_lr,
            self.weight_decay,
            self.clusters,
            self.patience,
            self.batch_stats
        )
    }
}

fn optimizer(lr: f32, weight_decay: f32) -> AdamW {
    AdamW::new(AdamWConfig {
        lr,
        weight_decay,
        ..AdamWConfig::default()
    })
}

/// One L1 step on whatever is currently trainable. Gradients reach the
/// trunk only when some trunk parameter is trainable.
pub fn train_step(
    model: &mut GazeModel,
    images: &Tensor,
    labels: &Tensor,
    opt: &mut AdamW,
    batch_stats: bool,
) -> Result<f32> {
    model.zero_grad();
    let trunk_trainable = model
        .parameters()
        .iter()
        .any(|p| p.trainable && !p.buffer && !p.name.starts_with("head."));
    let loss = if trunk_trainable {
        let (feats, cache) = model.forward_trunk_train(images, batch_stats)?;
        let (out, hc) = model.head_forward_train(&feats[3])?;
        let (loss, g) = l1_loss(&out, labels)?;
        let d_f4 = model.head_backward(&hc, &g, true)?.expect("input grad");
        model.backward_trunk(&cache, [None, None, None, Some(&d_f4)])?;
        loss
    } else {
        let [_, _, _, f4] = model.forward_stages(images)?;
        head_step_grads(model, &f4, labels)?
    };
    opt.step(model.parameters_mut())?;
    Ok(loss)
}

fn head_step_grads(model: &mut GazeModel, f4: &Tensor, labels: &Tensor) -> Result<f32> {
    let (out, hc) = model.head_forward_train(f4)?;
    let (loss, g) = l1_loss(&out, labels)?;
    model.head_backward(&hc, &g, false)?;
    Ok(loss)
}

/// Digest of everything outside the adapters and the head.
pub fn backbone_digest(model: &GazeModel) -> String {
    param_digest(model.backbone_parameters())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epoch_losses: Vec<f32>,
    pub val: Option<EvalReport>,
    pub tunable_params: usize,
    pub backbone_before: String,
    pub backbone_after: String,
    pub clusters: ClusterModel,
}

fn cosine(lr: f32, t: usize, total: usize) -> f32 {
    0.5 * lr * (1.0 + (std::f32::consts::PI * t as f32 / total.max(1) as f32).cos())
}

/// Generalized phase: a head-only warmup on the frozen trunk, then all
/// adapters (and nothing else) trained on balanced batches.
pub fn train_generalized(
    model: &mut GazeModel,
    train: &GazeDataset,
    val: Option<&GazeDataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f32),
) -> Result<TrainReport> {
    if !model.has_adapters() {
        return Err(Error::Config(
            "train_generalized needs adapters attached".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let backbone_before = backbone_digest(model);
    let clusters = kmeans_cluster(train, config.clusters.min(train.len()), config.seed)?;
    let mut sampler = BalancedSampler::new(&clusters, config.seed);
    let steps = train.len().div_ceil(config.batch_size);
    let mut epoch_losses = Vec::new();

    if config.warmup_epochs > 0 {
        model.set_trainable(false);
        model.head.set_trainable(true);
        let idx: Vec<usize> = (0..train.len()).collect();
        let mut f4s = Vec::new();
        for chunk in idx.chunks(super::metrics::EVAL_CHUNK) {
            let [_, _, _, f4] = model.forward_stages(&train.images(chunk)?)?;
            f4s.push(f4);
        }
        let f4_all = Tensor::stack_batch(&f4s.iter().collect::<Vec<_>>())?;
        let mut opt = optimizer(config.head_lr, config.weight_decay);
        for e in 0..config.warmup_epochs {
            let mut total = 0.0;
            for _ in 0..steps {
                let b = sampler.next_batch(config.batch_size);
                model.zero_grad();
                total += head_step_grads(model, &f4_all.select_batch(&b)?, &train.labels(&b)?)?;
                opt.step(model.parameters_mut())?;
            }
            epoch_losses.push(total / steps as f32);
            on_epoch(e, total / steps as f32);
        }
    }

    model.set_trainable(false);
    model.set_adapters_trainable(|_| true);
    let tunable_params = count_params(model, true);
    let mut opt = optimizer(config.lr, config.weight_decay);
    let total_steps = config.epochs * steps;
    for e in 0..config.epochs {
        let mut total = 0.0;
        for s in 0..steps {
            opt.set_lr(cosine(config.lr, e * steps + s, total_steps));
            let b = sampler.next_batch(config.batch_size);
            total += train_step(
                model,
                &train.images(&b)?,
                &train.labels(&b)?,
                &mut opt,
                config.batch_stats,
            )?;
        }
        epoch_losses.push(total / steps as f32);
        on_epoch(config.warmup_epochs + e, total / steps as f32);
    }
    model.zero_grad();
    let val = match val {
        Some(v) if !v.is_empty() => Some(evaluate(model, v)?),
        _ => None,
    };
    Ok(TrainReport {
        epoch_losses,
        val,
        tunable_params,
        backbone_before,
        backbone_after: backbone_digest(model),
        clusters,
    })
}

/// Data for a personalization run.
pub struct PersonalizeInputs<'a> {
    /// Exactly five labelled images of one subject.
    pub personal: &'a [GazeSample],
    /// Generalized training data and its clustering, for replay.
    pub replay: &'a GazeDataset,
    pub clusters: &'a ClusterModel,
    /// The subject's held-out images.
    pub holdout: Option<&'a GazeDataset>,
    /// Generalized validation split, for the forgetting check.
    pub general_val: Option<&'a GazeDataset>,
    /// Optional early-stopping set for the subject.
    pub personal_val: Option<&'a GazeDataset>,
}

pub const PERSONAL_SHOTS: usize = 5;

#[derive(Clone, Debug)]
pub struct PersonalizeReport {
    pub subject: String,
    pub tunable_params: usize,
    pub epochs_run: usize,
    pub holdout_before: Option<EvalReport>,
    pub holdout_after: Option<EvalReport>,
    pub general_before: Option<EvalReport>,
    pub general_after: Option<EvalReport>,
}

fn eval_opt(model: &GazeModel, data: Option<&GazeDataset>) -> Result<Option<EvalReport>> {
    match data {
        Some(d) if !d.is_empty() => Ok(Some(evaluate(model, d)?)),
        _ => Ok(None),
    }
}

/// Fine-tunes only the last stage's adapters on five personal images, each
/// step mixing them with `replay_r` cluster-balanced generalized samples.
pub fn personalize(
    model: &mut GazeModel,
    inputs: &PersonalizeInputs,
    config: &TrainConfig,
) -> Result<PersonalizeReport> {
    if !model.has_adapters() {
        return Err(Error::Config("personalize needs adapters attached".into()));
    }
    if inputs.personal.len() != PERSONAL_SHOTS {
        return Err(Error::InvalidArgument(format!(
            "personalization takes exactly {PERSONAL_SHOTS} samples, got {}",
            inputs.personal.len()
        )));
    }
    let subject = inputs.personal[0].subject.clone();
    if let Some(other) = inputs.personal.iter().find(|s| s.subject != subject) {
        return Err(Error::InvalidArgument(format!(
            "personal samples mix subjects `{subject}` and `{}`",
            other.subject
        )));
    }
    if inputs.replay.len() != inputs.clusters.assignments.len() {
        return Err(Error::InvalidArgument(
            "replay clustering does not match the replay set".into(),
        ));
    }
    let holdout_before = eval_opt(model, inputs.holdout)?;
    let general_before = eval_opt(model, inputs.general_val)?;

    model.set_trainable(false);
    model.set_adapters_trainable(|s| s == 3);
    let tunable_params = count_params(model, true);
    let personal = GazeDataset::new(inputs.personal.to_vec());
    let all5: Vec<usize> = (0..PERSONAL_SHOTS).collect();
    let (p_img, p_lab) = (personal.images(&all5)?, personal.labels(&all5)?);
    let mut sampler = BalancedSampler::new(inputs.clusters, config.seed);
    let mut opt = optimizer(config.lr, config.weight_decay);

    let snapshot = |m: &GazeModel| -> Vec<Tensor> {
        m.adapter_parameters()
            .iter()
            .map(|p| p.value.clone())
            .collect()
    };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for e in 0..config.epochs {
        opt.set_lr(cosine(config.lr, e, config.epochs));
        let (images, labels) = if config.replay_r > 0 {
            let r = sampler.next_batch(config.replay_r);
            let mut lab = p_lab.data().to_vec();
            lab.extend_from_slice(inputs.replay.labels(&r)?.data());
            (
                Tensor::stack_batch(&[&p_img, &inputs.replay.images(&r)?])?,
                Tensor::new(&[PERSONAL_SHOTS + r.len(), 2], lab)?,
            )
        } else {
            (p_img.clone(), p_lab.clone())
        };
        train_step(model, &images, &labels, &mut opt, config.batch_stats)?;
        epochs_run += 1;
        if let Some(pv) = inputs.personal_val.filter(|d| !d.is_empty()) {
            let err = evaluate(model, pv)?.mean_deg;
            if best.as_ref().is_none_or(|(b, _)| err < *b) {
                best = Some((err, snapshot(model)));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, values)) = best {
        let mut it = values.into_iter();
        model.visit_mut(&mut |p| {
            if p.name.contains(".adapter.") {
                p.value = it.next().expect("same adapter layout");
            }
        });
    }
    model.zero_grad();
    Ok(PersonalizeReport {
        subject,
        tunable_params,
        epochs_run,
        holdout_before,
        holdout_after: eval_opt(model, inputs.holdout)?,
        general_before,
        general_after: eval_opt(model, inputs.general_val)?,
    })
}

/// Mean angular error per subject, keyed by subject id.
pub fn per_subject_means(report: &EvalReport) -> BTreeMap<String, f64> {
    report
        .per_subject
        .iter()
        .map(|r| (r.subject.clone(), r.mean_deg))
        .collect()
}
