//! Targets, losses and the optimisation loop.
//!
//! The classification loss `L_r` is the cross-entropy of the head. The
//! auxiliary loss `L_p` compares, stage by stage, the encoder's state
//! distribution with the fraction of responses that are still Unknown (deeper
//! than the stage), Support or Denial:
//!
//! ```text
//! L = w_r L_r + lambda L_p,   L_p = sum_t KL(p_t || p̂_t)
//! ```
//!
//! `L_r` is averaged over the batch, `L_p` over the batch trees that carry
//! state labels.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, ModelError, Prediction};
use crate::encoder::{stage_count, Dynamics};
use crate::eval::{compute_metrics, Metrics};
use crate::format::LabeledTree;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::nn::softmax_backward;
use crate::stance::StateLabels;
use crate::tree::PropagationTree;

/// Floor applied to predicted probabilities inside the KL ratio.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("tree '{0}' has fewer than two nodes; stage targets need at least one response")]
    TooSmall(String),
    #[error("labels do not cover tree '{0}'")]
    LabelCoverage(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (L_r={l_r}, L_p={l_p})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        l_r: f64,
        l_p: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Responses per state at one stage; `unknown + support + denial` is the
/// number of responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCounts {
    pub unknown: usize,
    pub support: usize,
    pub denial: usize,
}

impl StageCounts {
    pub fn total(&self) -> usize {
        self.unknown + self.support + self.denial
    }

    /// `(p_u, p_s, p_d)`, summing to exactly 1.0 in index order. The last
    /// nonzero entry absorbs the rounding residue; zero counts stay exactly 0.
    pub fn probs(&self) -> [f64; 3] {
        let counts = [self.unknown, self.support, self.denial];
        let n = self.total() as f64;
        let mut p = counts.map(|c| c as f64 / n);
        if let Some(last) = counts.iter().rposition(|&c| c > 0) {
            let head: f64 = p[..last].iter().fold(0.0, |acc, v| acc + v);
            p[last] = 1.0 - head;
        }
        p
    }
}

/// Stage counts for `t = 1..=T`, with `T` the encoder's stage count.
pub fn target_counts(tree: &PropagationTree, labels: &StateLabels) -> Result<Vec<StageCounts>, TrainError> {
    if tree.len() < 2 {
        return Err(TrainError::TooSmall(tree.event_id().to_string()));
    }
    let depth = tree.depth();
    // per-depth tallies of Support / Denial
    let mut support = vec![0usize; depth + 1];
    let mut denial = vec![0usize; depth + 1];
    for v in 1..tree.len() {
        let state = *labels
            .states
            .get(&v)
            .ok_or_else(|| TrainError::LabelCoverage(tree.event_id().to_string()))?;
        let d = tree.node_depth(v);
        if state == 0 {
            support[d] += 1;
        } else {
            denial[d] += 1;
        }
    }
    let responses = tree.len() - 1;
    let (mut s, mut d) = (0, 0);
    Ok((1..=stage_count(tree))
        .map(|t| {
            if t <= depth {
                s += support[t];
                d += denial[t];
            }
            StageCounts {
                unknown: responses - s - d,
                support: s,
                denial: d,
            }
        })
        .collect())
}

pub fn target_distributions(tree: &PropagationTree, labels: &StateLabels) -> Result<Vec<[f64; 3]>, TrainError> {
    Ok(target_counts(tree, labels)?.iter().map(StageCounts::probs).collect())
}

/// `KL(p || q)` with `0 ln 0 = 0` and `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum()
}

/// Per-tree `L_p`: the stage KL terms summed over the tree's stages.
pub fn kl_state_loss(targets: &[[f64; 3]], predictions: &[[f64; 3]]) -> f64 {
    assert_eq!(targets.len(), predictions.len(), "stage counts differ");
    targets.iter().zip(predictions).map(|(p, q)| kl_divergence(p, q)).sum()
}

/// Gradient of [`kl_state_loss`] with respect to the pre-softmax scores.
pub fn kl_state_grad(targets: &[[f64; 3]], predictions: &[[f64; 3]]) -> Vec<[f64; 3]> {
    targets
        .iter()
        .zip(predictions)
        .map(|(p, q)| {
            let g: [f64; 3] = std::array::from_fn(|k| if q[k] >= PROB_FLOOR { -p[k] / q[k] } else { 0.0 });
            softmax_backward(q, &g)
        })
        .collect()
}

pub fn cross_entropy(pred: &Prediction, label: u8) -> f64 {
    -pred.probs[label as usize].max(f64::MIN_POSITIVE).ln()
}

/// Per-tree objective; `kl` is `None` for trees without state labels.
pub fn joint_loss(pred: &Prediction, label: u8, kl: Option<f64>, lambda: f64) -> f64 {
    cross_entropy(pred, label) + kl.map_or(0.0, |k| lambda * k)
}

/// Initial value for a transition rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateInit {
    Fixed(f64),
    /// Uniform on (0, 1), drawn independently for each rate.
    Random,
}

impl RateInit {
    pub fn resolve<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            RateInit::Fixed(v) => v,
            RateInit::Random => rng.random::<f64>(),
        }
    }
}

impl FromStr for RateInit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" | "rd" | "rd." => Ok(RateInit::Random),
            other => other
                .parse::<f64>()
                .map_err(|_| format!("rate init '{s}' is neither a number nor 'random'"))
                .and_then(|v| {
                    if (0.0..=1.0).contains(&v) {
                        Ok(RateInit::Fixed(v))
                    } else {
                        Err(format!("rate init {v} outside [0, 1]"))
                    }
                }),
        }
    }
}

impl std::fmt::Display for RateInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RateInit::Fixed(v) => write!(f, "{v}"),
            RateInit::Random => f.write_str("random"),
        }
    }
}

impl Serialize for RateInit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RateInit::Fixed(v) => s.serialize_f64(*v),
            RateInit::Random => s.serialize_str("random"),
        }
    }
}

impl<'de> Deserialize<'de> for RateInit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => RateInit::from_str(&v.to_string()),
            Raw::Text(s) => RateInit::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub dynamics: Dynamics,
    /// Off: backbone-only baseline.
    pub use_encoder: bool,
    pub lambda: f64,
    /// Weight of the classification loss; 0 trains on `L_p` alone and selects
    /// checkpoints by validation `L_p`.
    pub ce_weight: f64,
    pub alpha0: RateInit,
    pub beta0: RateInit,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            dynamics: Dynamics::Eusd,
            use_encoder: true,
            lambda: 0.5,
            ce_weight: 1.0,
            alpha0: RateInit::Fixed(0.5),
            beta0: RateInit::Fixed(0.5),
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            patience: 10,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.backbone.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.ce_weight >= 0.0 && self.ce_weight.is_finite()) {
            return bad("ce_weight must be finite and >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        Ok(())
    }
}

/// Adam with L2 regularisation folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(size: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    /// Rates are not decayed: pulling their raw values to zero would bias
    /// both towards one half.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let g = grads.to_flat();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut off = 0;
        params.visit_mut(&mut |name, xs| {
            let decay = if name.ends_with("_raw") { 0.0 } else { self.weight_decay };
            for (i, x) in xs.iter_mut().enumerate() {
                let k = off + i;
                let gk = g[k] + decay * *x;
                self.m[k] = b1 * self.m[k] + (1.0 - b1) * gk;
                self.v[k] = b2 * self.v[k] + (1.0 - b2) * gk * gk;
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            off += xs.len();
        });
        params.encoder.project();
    }
}

/// One tree's contribution to the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeLoss {
    pub l_r: f64,
    pub l_p: Option<f64>,
}

/// Loss terms and the gradient of `ce_weight * L_r + kl_weight * L_p` for a
/// single tree.
pub fn tree_loss_and_grad(
    model: &Model,
    tree: &PropagationTree,
    targets: Option<&[[f64; 3]]>,
    ce_weight: f64,
    kl_weight: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(TreeLoss, ModelParams), TrainError> {
    let trace = model.forward(tree, rng)?;
    let pred = trace.prediction;
    let label = tree.label() as usize;
    let g_logits: [f64; 2] =
        std::array::from_fn(|k| ce_weight * (pred.probs[k] - if k == label { 1.0 } else { 0.0 }));
    let (l_p, g_scores) = match targets {
        Some(t) => {
            let d = &trace.encoding.distributions;
            let g = kl_state_grad(t, d)
                .into_iter()
                .map(|s| s.map(|v| kl_weight * v))
                .collect();
            (Some(kl_state_loss(t, d)), g)
        }
        None => (None, Vec::new()),
    };
    let grads = model.backward(&trace, &g_logits, &g_scores);
    Ok((
        TreeLoss {
            l_r: cross_entropy(&pred, tree.label()),
            l_p,
        },
        grads,
    ))
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_r: f64,
    pub l_p: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_l_p: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Stage targets for a labeled tree with at least one response.
fn targets_for(item: &LabeledTree) -> Result<Option<Vec<[f64; 3]>>, TrainError> {
    match &item.labels {
        Some(labels) if item.tree.len() >= 2 => target_distributions(&item.tree, labels).map(Some),
        _ => Ok(None),
    }
}

/// Trees per gradient-reduction chunk. Fixed so that summation order, and
/// therefore the result, does not depend on the thread count.
const REDUCE_CHUNK: usize = 8;

pub fn predict_all(model: &Model, trees: &[LabeledTree]) -> Result<Vec<Prediction>, ModelError> {
    trees.par_iter().map(|t| model.predict(&t.tree)).collect()
}

/// Mean per-tree `L_p` over labeled trees, if any.
pub fn mean_state_loss(model: &Model, trees: &[LabeledTree]) -> Result<Option<f64>, TrainError> {
    let losses: Vec<Option<f64>> = trees
        .par_iter()
        .map(|item| -> Result<Option<f64>, TrainError> {
            let Some(t) = targets_for(item)? else { return Ok(None) };
            let enc = crate::encoder::encode(&item.tree, &model.params.encoder, model.config.dynamics);
            Ok(Some(kl_state_loss(&t, &enc.distributions)))
        })
        .collect::<Result<_, _>>()?;
    let vals: Vec<f64> = losses.into_iter().flatten().collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

fn evaluate_split(model: &Model, trees: &[LabeledTree]) -> Result<Option<Metrics>, TrainError> {
    if trees.is_empty() {
        return Ok(None);
    }
    let preds = predict_all(model, trees)?;
    let scores: Vec<f64> = preds.iter().map(Prediction::rumor_probability).collect();
    let labels: Vec<u8> = trees.iter().map(|t| t.tree.label()).collect();
    Ok(Some(compute_metrics(&scores, &labels).expect("aligned non-empty inputs")))
}

pub fn model_config(cfg: &TrainConfig, input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        backbone: cfg.backbone,
        dynamics: cfg.dynamics,
        use_encoder: cfg.use_encoder,
    }
}

/// Trains from scratch. Deterministic for a fixed seed regardless of thread count.
pub fn train(train_set: &[LabeledTree], val_set: &[LabeledTree], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let input_dim = train_set[0]
        .tree
        .features()
        .ok_or_else(|| ModelError::MissingFeatures(train_set[0].tree.event_id().to_string()))?
        .ncols();
    let run = || train_inner(train_set, val_set, cfg, input_dim);
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        pool.install(run)
    } else {
        run()
    }
}

fn train_inner(
    train_set: &[LabeledTree],
    val_set: &[LabeledTree],
    cfg: &TrainConfig,
    input_dim: usize,
) -> Result<TrainOutcome, TrainError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alpha0 = cfg.alpha0.resolve(&mut init_rng);
    let beta0 = cfg.beta0.resolve(&mut init_rng);
    let mut model = Model::new(model_config(cfg, input_dim), alpha0, beta0, &mut init_rng)?;
    let mut adam = Adam::new(model.params.len(), cfg.lr, cfg.weight_decay);

    let targets: Vec<Option<Vec<[f64; 3]>>> = train_set.iter().map(targets_for).collect::<Result<_, _>>()?;
    let select_on_state_loss = cfg.ce_weight == 0.0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let (mut sum_r, mut sum_p, mut n_p) = (0.0, 0.0, 0usize);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let labeled = batch.iter().filter(|&&i| targets[i].is_some()).count();
            let ce_w = cfg.ce_weight / batch.len() as f64;
            let kl_w = if labeled > 0 { cfg.lambda / labeled as f64 } else { 0.0 };
            let model_ref = &model;
            let partials: Vec<(f64, f64, usize, ModelParams)> = batch
                .par_chunks(REDUCE_CHUNK)
                .map(|chunk| {
                    let mut acc = ModelParams::zeros(&model_ref.config);
                    let (mut r, mut p, mut np) = (0.0, 0.0, 0usize);
                    for &i in chunk {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
                        rng.set_stream(((epoch as u64) << 32) | i as u64);
                        let (loss, g) = tree_loss_and_grad(
                            model_ref,
                            &train_set[i].tree,
                            targets[i].as_deref(),
                            ce_w,
                            kl_w,
                            Some(&mut rng),
                        )?;
                        acc.add_scaled(1.0, &g);
                        r += loss.l_r;
                        if let Some(lp) = loss.l_p {
                            p += lp;
                            np += 1;
                        }
                    }
                    Ok((r, p, np, acc))
                })
                .collect::<Result<_, TrainError>>()?;
            let mut grads = ModelParams::zeros(&model.config);
            let (mut br, mut bp, mut bn) = (0.0, 0.0, 0usize);
            for (r, p, np, g) in &partials {
                grads.add_scaled(1.0, g);
                br += r;
                bp += p;
                bn += np;
            }
            if !br.is_finite() || !bp.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    l_r: br / batch.len() as f64,
                    l_p: if bn > 0 { bp / bn as f64 } else { 0.0 },
                });
            }
            adam.step(&mut model.params, &grads);
            sum_r += br;
            sum_p += bp;
            n_p += bn;
        }

        let metrics = evaluate_split(&model, val_set)?;
        let val_l_p = mean_state_loss(&model, val_set)?;
        let record = EpochRecord {
            epoch,
            l_r: sum_r / train_set.len() as f64,
            l_p: (n_p > 0).then(|| sum_p / n_p as f64),
            val_acc: metrics.map(|m| m.acc),
            val_auc: metrics.and_then(|m| m.auc),
            val_f1: metrics.map(|m| m.f1),
            val_l_p,
            alpha: model.params.encoder.alpha(),
            beta: model.params.encoder.beta(),
        };
        log::info!(
            "epoch {epoch}: L_r {:.4} L_p {} val_acc {}",
            record.l_r,
            record.l_p.map_or("-".into(), |v| format!("{v:.4}")),
            record.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
        );

        // Higher is better for the selection score.
        let score = if select_on_state_loss {
            val_l_p.map(|v| -v)
        } else {
            record.val_acc
        };
        log.push(record);
        match score {
            Some(s) if best.as_ref().is_none_or(|(b, _, _)| s > *b) => {
                best = Some((s, epoch, model.params.clone()));
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
            None => {}
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => epochs_run,
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        epochs_run,
    })
}

/// Scalar objective of a batch as optimised by [`train`] (without dropout or
/// weight decay), for gradient checks.
pub fn batch_objective(model: &Model, items: &[LabeledTree], ce_weight: f64, lambda: f64) -> Result<f64, TrainError> {
    let labeled = items.iter().filter(|t| t.labels.is_some() && t.tree.len() >= 2).count();
    let mut total = 0.0;
    for item in items {
        let pred = model.predict(&item.tree)?;
        total += ce_weight * cross_entropy(&pred, item.tree.label()) / items.len() as f64;
        if let Some(t) = targets_for(item)? {
            let enc = crate::encoder::encode(&item.tree, &model.params.encoder, model.config.dynamics);
            total += lambda * kl_state_loss(&t, &enc.distributions) / labeled as f64;
        }
    }
    Ok(total)
}

/// Analytic gradient of [`batch_objective`].
pub fn batch_gradient(model: &Model, items: &[LabeledTree], ce_weight: f64, lambda: f64) -> Result<ModelParams, TrainError> {
    let labeled = items.iter().filter(|t| t.labels.is_some() && t.tree.len() >= 2).count();
    let mut grads = ModelParams::zeros(&model.config);
    for item in items {
        let t = targets_for(item)?;
        let kl_w = if labeled > 0 { lambda / labeled as f64 } else { 0.0 };
        let (_, g) = tree_loss_and_grad(model, &item.tree, t.as_deref(), ce_weight / items.len() as f64, kl_w, None)?;
        grads.add_scaled(1.0, &g);
    }
    Ok(grads)
}

/// Largest relative discrepancy per named tensor between the analytic gradient
/// and central differences with step `eps`.
pub fn gradient_check(
    model: &Model,
    items: &[LabeledTree],
    ce_weight: f64,
    lambda: f64,
    eps: f64,
) -> Result<Vec<(String, f64)>, TrainError> {
    let analytic = batch_gradient(model, items, ce_weight, lambda)?.to_flat();
    let mut names: Vec<(String, usize)> = Vec::new();
    model.params.visit(&mut |n, s| names.push((n.to_string(), s.len())));
    let mut out = Vec::new();
    let mut off = 0;
    for (name, len) in names {
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let k = off + i;
            let eval_at = |delta: f64| -> Result<f64, TrainError> {
                let mut m = model.clone();
                let mut idx = 0;
                m.params.visit_mut(&mut |_, s| {
                    if k >= idx && k < idx + s.len() {
                        s[k - idx] += delta;
                    }
                    idx += s.len();
                });
                batch_objective(&m, items, ce_weight, lambda)
            };
            let fd = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
            let a = analytic[k];
            // Relative error with an absolute floor for near-zero entries.
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
            worst = worst.max(err);
        }
        out.push((name, worst));
        off += len;
    }
    Ok(out)
}

/// Element-wise mean of the state distributions predicted for a tree.
pub fn predicted_state_distributions(model: &Model, tree: &PropagationTree) -> Vec<[f64; 3]> {
    crate::encoder::encode(tree, &model.params.encoder, model.config.dynamics).distributions
}
