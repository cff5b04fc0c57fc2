//! Few-shot classification methods over a shared convolutional backbone:
//! attention matching, prototype distances, learned relation scores,
//! gradient-based adaptation (with optional first-order approximation), and
//! transfer baselines with linear or cosine classifier heads.
//!
//! All methods expose the same surface: given an episode, produce one score
//! row per query image (higher = more likely). Training and evaluation
//! loops are method-agnostic apart from how those scores are produced.

use rand::Rng;

use crate::datasets::{standard_augment, ClassSplit, LabeledImageSet};
use crate::episodes::{
    apply_label_swaps, episode_stream, sample_episode, Episode, EpisodeError, EpisodeSpec,
};
use crate::nn::{Backbone, BackboneConfig, ConvBlock, Linear, Mode, ParamCursor};
use crate::optim::{accumulate, collect, sgd_step, Optimizer};
use crate::rng::SeedTree;
use crate::tensor::{
    linear, no_grad, softmax, softmax_cross_entropy, Scalar, Tape, Tensor, TensorError,
};

/// Cosine-head logit scale for the cosine-classifier baseline.
pub const COSINE_SCALE: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum MethodError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("confidence interval needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Matching,
    Proto,
    Relation,
    Maml,
    Baseline,
    BaselinePlus,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "matching" => Some(Method::Matching),
            "proto" => Some(Method::Proto),
            "relation" => Some(Method::Relation),
            "maml" => Some(Method::Maml),
            "baseline" => Some(Method::Baseline),
            "baseline++" | "baseline_pp" => Some(Method::BaselinePlus),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Matching => "matching",
            Method::Proto => "proto",
            Method::Relation => "relation",
            Method::Maml => "maml",
            Method::Baseline => "baseline",
            Method::BaselinePlus => "baseline++",
        }
    }

    pub const ALL: [Method; 6] = [
        Method::Matching,
        Method::Proto,
        Method::Relation,
        Method::Maml,
        Method::Baseline,
        Method::BaselinePlus,
    ];

    /// Baselines train with plain supervised batches; everything else
    /// trains on episodes.
    pub fn episodic_training(&self) -> bool {
        !matches!(self, Method::Baseline | Method::BaselinePlus)
    }
}

/// Training hyperparameters shared by all methods. Fields irrelevant to a
/// given method are ignored by it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: EpisodeSpec,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Validation tasks per epoch (best-epoch selection).
    pub val_episodes: usize,
    /// Outer (meta) learning rate; also the supervised pretraining rate.
    pub meta_lr: f64,
    /// Gradient-adaptation inner loop.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub meta_batch: usize,
    /// Baseline episode-time head fitting.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Supervised pretraining.
    pub pretrain_batch: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            spec: EpisodeSpec::default(),
            epochs: 10,
            episodes_per_epoch: 100,
            val_episodes: 100,
            meta_lr: 1e-3,
            inner_lr: 0.01,
            inner_steps: 2,
            first_order: false,
            meta_batch: 4,
            finetune_steps: 100,
            finetune_lr: 0.01,
            pretrain_batch: 64,
            augment: false,
        }
    }
}

/// A method plus its trainable modules.
pub struct Model<F: Scalar = f32> {
    pub method: Method,
    pub backbone: Backbone<F>,
    pub relation: Option<RelationHead<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn new(
        method: Method,
        mut config: BackboneConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        if method == Method::Relation {
            // Relation scoring needs spatial maps, not pooled vectors.
            config.keep_spatial = 2.min(config.blocks);
        }
        let backbone = Backbone::new(config, rng);
        let relation = (method == Method::Relation)
            .then(|| RelationHead::new(2 * config.channels, config.map_side(), rng));
        Model {
            method,
            backbone,
            relation,
        }
    }

    pub fn params(&self) -> Vec<Tensor<F>> {
        let mut out = self.backbone.params();
        if let Some(rel) = &self.relation {
            rel.collect_params(&mut out);
        }
        out
    }

    /// View of this model with substituted parameters (running statistics
    /// stay shared with `self`).
    pub fn with_params(&self, params: &[Tensor<F>]) -> Model<F> {
        let n_bb = self.backbone.params().len();
        let backbone = self.backbone.with_params(&params[..n_bb]);
        let relation = self.relation.as_ref().map(|rel| {
            let mut cur = ParamCursor::new(&params[n_bb..]);
            let mut r = rel.clone();
            r.load_params(&mut cur);
            assert!(cur.exhausted(), "parameter count mismatch");
            r
        });
        Model {
            method: self.method,
            backbone,
            relation,
        }
    }

    pub fn deep_clone(&self) -> Model<F> {
        Model {
            method: self.method,
            backbone: self.backbone.deep_clone(),
            relation: self.relation.as_ref().map(|r| r.deep_clone()),
        }
    }
}

/// One-hot label matrix [n, n_way] as untracked data.
pub fn one_hot<F: Scalar>(labels: &[usize], n_way: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; labels.len() * n_way];
    for (i, &l) in labels.iter().enumerate() {
        data[i * n_way + l] = F::ONE;
    }
    Tensor::from_vec(data, &[labels.len(), n_way]).expect("sized above")
}

/// Rows scaled to unit L2 norm; zero rows are left near zero rather than
/// blowing up. The squared norm is clamped before the square root so the
/// gradient stays finite at zero rows.
pub fn normalize_rows<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
    let norms = x.mul(x)?.sum_axis1().clamp_min(1e-16).sqrt();
    x.div(&norms.broadcast_cols(x.shape()[1]))
}

/// Attention-based class probabilities: cosine similarity to every support
/// embedding, softmax over the support set, attention mass summed per class.
/// Output rows are probabilities in (0,1) summing to 1.
pub fn matching_probs<F: Scalar>(
    support_emb: &Tensor<F>,
    support_labels: &[usize],
    n_way: usize,
    query_emb: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    let sims = normalize_rows(query_emb)?.matmul(&normalize_rows(support_emb)?.transpose2())?;
    softmax(&sims).matmul(&one_hot(support_labels, n_way))
}

/// Negative log-likelihood of probability rows (used with `matching_probs`,
/// whose outputs are already probabilities, not logits).
pub fn probs_nll<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>, TensorError> {
    Ok(probs.gather_axis1(labels)?.ln().mean_all().neg())
}

/// Per-class mean of support embeddings, [n_way, dim]. Assumes a balanced
/// support set (episodes guarantee this, label noise preserves it).
pub fn compute_prototypes<F: Scalar>(
    support_emb: &Tensor<F>,
    support_labels: &[usize],
    n_way: usize,
) -> Result<Tensor<F>, TensorError> {
    let k = support_labels.len() / n_way;
    Ok(one_hot(support_labels, n_way)
        .transpose2()
        .matmul(support_emb)?
        .scale(1.0 / k as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SqEuclidean,
    Cosine,
}

/// Query-to-prototype scores: negative squared Euclidean distance, or
/// cosine similarity.
pub fn proto_logits<F: Scalar>(
    prototypes: &Tensor<F>,
    query_emb: &Tensor<F>,
    metric: Metric,
) -> Result<Tensor<F>, TensorError> {
    match metric {
        Metric::SqEuclidean => {
            let qp = query_emb.matmul(&prototypes.transpose2())?;
            let q2 = query_emb.mul(query_emb)?.sum_axis1();
            let p2 = prototypes.mul(prototypes)?.sum_axis1();
            qp.scale(2.0)
                .sub(&q2.broadcast_cols(prototypes.shape()[0]))?
                .sub(&p2.broadcast_rows(query_emb.shape()[0]))
        }
        Metric::Cosine => normalize_rows(query_emb)?.matmul(&normalize_rows(prototypes)?.transpose2()),
    }
}

/// Learned similarity module: two conv blocks over channel-concatenated
/// (query map, class map) pairs, then a two-layer scorer.
#[derive(Clone)]
pub struct RelationHead<F: Scalar = f32> {
    pub block1: ConvBlock<F>,
    pub block2: ConvBlock<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> RelationHead<F> {
    pub fn new(in_ch: usize, map_side: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let side = (map_side / 2) / 2;
        assert!(side >= 1, "relation head needs map_side >= 4, got {map_side}");
        RelationHead {
            block1: ConvBlock::new(in_ch, 64, true, rng),
            block2: ConvBlock::new(64, 64, true, rng),
            fc1: Linear::new(64 * side * side, 8, true, rng),
            fc2: Linear::new(8, 1, true, rng),
        }
    }

    pub fn forward(&self, pairs: &Tensor<F>, mode: Mode) -> Result<Tensor<F>, TensorError> {
        let h = self.block2.forward(&self.block1.forward(pairs, mode)?, mode)?;
        let h = self.fc1.forward(&h.flatten2())?.relu();
        self.fc2.forward(&h)
    }

    pub fn collect_params(&self, out: &mut Vec<Tensor<F>>) {
        self.block1.collect_params(out);
        self.block2.collect_params(out);
        self.fc1.collect_params(out);
        self.fc2.collect_params(out);
    }

    pub fn load_params(&mut self, cur: &mut ParamCursor<F>) {
        self.block1.load_params(cur);
        self.block2.load_params(cur);
        self.fc1.load_params(cur);
        self.fc2.load_params(cur);
    }

    pub fn deep_clone(&self) -> Self {
        RelationHead {
            block1: self.block1.deep_clone(),
            block2: self.block2.deep_clone(),
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
        }
    }
}

/// Relation scores [n_query, n_way] from one backbone pass over the
/// combined support+query batch.
pub fn relation_scores<F: Scalar>(
    backbone: &Backbone<F>,
    head: &RelationHead<F>,
    x_all: &Tensor<F>,
    support_labels: &[usize],
    n_way: usize,
    mode: Mode,
) -> Result<Tensor<F>, TensorError> {
    let n_support = support_labels.len();
    let n_query = x_all.shape()[0] - n_support;
    let maps = backbone.forward_maps(x_all, mode)?;
    let (c, side) = (maps.shape()[1], maps.shape()[2]);
    let s_maps = maps.select_rows(&(0..n_support).collect::<Vec<_>>())?;
    let q_maps = maps.select_rows(&(n_support..n_support + n_query).collect::<Vec<_>>())?;
    // Class maps are per-class means of support maps.
    let class_maps = compute_prototypes(
        &s_maps.reshape(&[n_support, c * side * side])?,
        support_labels,
        n_way,
    )?
    .reshape(&[n_way, c, side, side])?;
    // All (query, class) pairs, query-major.
    let rep_q: Vec<usize> = (0..n_query).flat_map(|q| std::iter::repeat(q).take(n_way)).collect();
    let tile_c: Vec<usize> = (0..n_query).flat_map(|_| 0..n_way).collect();
    let pairs = q_maps
        .select_rows(&rep_q)?
        .concat_ch(&class_maps.select_rows(&tile_c)?)?;
    head.forward(&pairs, mode)?.reshape(&[n_query, n_way])
}

/// Gradient-adaptation inner loop: `inner_steps` SGD steps on the support
/// loss, starting from `init` = backbone parameters plus a zero linear head.
/// With `track_init` the updates are recorded so the outer loss can
/// differentiate through them; without it the gradients are treated as
/// constants (first-order approximation).
pub fn maml_adapt<F: Scalar>(
    backbone: &Backbone<F>,
    init: &[Tensor<F>],
    support_x: &Tensor<F>,
    support_labels: &[usize],
    inner_lr: f64,
    inner_steps: usize,
    track_init: bool,
) -> Result<Vec<Tensor<F>>, TensorError> {
    let mut fast: Vec<Tensor<F>> = init.to_vec();
    for _ in 0..inner_steps {
        let logits = maml_logits(backbone, &fast, support_x)?;
        let loss = softmax_cross_entropy(&logits, support_labels)?;
        // Always keep the tape alive across steps; dropping the gradient
        // history (first-order) happens by detaching the update direction,
        // not by consuming the tape.
        let grads = loss.backward(true)?;
        fast = fast
            .iter()
            .map(|p| match grads.wrt(p) {
                Some(g) => {
                    let g = if track_init { g } else { g.detach() };
                    p.sub(&g.scale(inner_lr)).expect("gradient matches shape")
                }
                None => p.clone(),
            })
            .collect();
    }
    Ok(fast)
}

/// Forward through the episode model `params` = backbone params + [head
/// weight, head bias]. Normalization always uses current-batch statistics,
/// matching the adaptation regime.
pub fn maml_logits<F: Scalar>(
    backbone: &Backbone<F>,
    params: &[Tensor<F>],
    x: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    let n_bb = params.len() - 2;
    let bb = backbone.with_params(&params[..n_bb]);
    let emb = bb.forward(x, Mode::InnerTrain)?;
    linear(&emb, &params[n_bb], Some(&params[n_bb + 1]))
}

/// Fresh zero-initialized episode head. Zero init keeps the method exactly
/// equivariant under label permutation, so only the backbone is meta-learned.
pub fn maml_episode_head<F: Scalar>(n_way: usize, dim: usize) -> [Tensor<F>; 2] {
    [
        Tensor::zeros(&[n_way, dim]).requires_grad(),
        Tensor::zeros(&[n_way]).requires_grad(),
    ]
}

/// Classifier-head logits for the transfer baselines.
fn head_logits<F: Scalar>(
    emb: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    cosine: bool,
) -> Result<Tensor<F>, TensorError> {
    if cosine {
        Ok(normalize_rows(emb)?
            .matmul(&normalize_rows(w)?.transpose2())?
            .scale(COSINE_SCALE))
    } else {
        linear(emb, w, Some(b))
    }
}

/// Transfer-baseline episode inference: freeze the backbone, fit a fresh
/// zero-initialized head on the support set by full-batch SGD, return query
/// logits. `cosine` selects the cosine-classifier variant.
pub fn finetune_classify<F: Scalar>(
    backbone: &Backbone<F>,
    support_x: &Tensor<F>,
    support_labels: &[usize],
    n_way: usize,
    query_x: &Tensor<F>,
    cosine: bool,
    steps: usize,
    lr: f64,
) -> Result<Tensor<F>, TensorError> {
    let (s_emb, q_emb) = {
        let _g = no_grad();
        (
            backbone.forward(support_x, Mode::Eval)?,
            backbone.forward(query_x, Mode::Eval)?,
        )
    };
    let dim = s_emb.shape()[1];
    let tape = Tape::<F>::new();
    let _scope = tape.scope();
    // The linear head starts at zero; the cosine head starts at the class
    // prototypes (a zero cosine head has degenerate geometry: every logit
    // sits at the clamp and the first gradient step is 1/clamp-sized).
    let mut w = if cosine {
        let protos = {
            let _g = no_grad();
            compute_prototypes(&s_emb, support_labels, n_way)?
        };
        protos.requires_grad()
    } else {
        Tensor::zeros(&[n_way, dim]).requires_grad()
    };
    let mut b = Tensor::zeros(&[n_way]).requires_grad();
    for _ in 0..steps {
        let mark = tape.checkpoint();
        let loss = softmax_cross_entropy(&head_logits(&s_emb, &w, &b, cosine)?, support_labels)?;
        let grads = loss.backward(false)?;
        let pair = [w, b];
        let g = collect(&pair, &grads);
        let mut stepped = sgd_step(&pair, &g, lr).into_iter();
        w = stepped.next().expect("two params");
        b = stepped.next().expect("two params");
        tape.rewind(mark);
    }
    let _g = no_grad();
    head_logits(&q_emb, &w, &b, cosine)
}

/// Support and query images stacked into one [S+Q, C, H, W] batch
/// (support first).
fn episode_batch<F: Scalar>(set: &LabeledImageSet, ep: &Episode) -> Tensor<F> {
    let mut idx = ep.support_idx.clone();
    idx.extend_from_slice(&ep.query_idx);
    set.batch(&idx)
}

/// Score matrix [n_query, n_way] for one episode under the given method.
/// For matching these are probabilities; for every other method, logits.
pub fn episode_scores<F: Scalar>(
    model: &Model<F>,
    set: &LabeledImageSet,
    ep: &Episode,
    cfg: &TrainConfig,
    training: bool,
) -> Result<Tensor<F>, MethodError> {
    let n_way = ep.spec.n_way;
    let n_support = ep.support_idx.len();
    let n_query = ep.query_idx.len();
    let mode = if training { Mode::Train } else { Mode::Eval };
    match model.method {
        Method::Matching | Method::Proto => {
            let emb = model.backbone.forward(&episode_batch(set, ep), mode)?;
            let s_emb = emb.select_rows(&(0..n_support).collect::<Vec<_>>())?;
            let q_emb = emb.select_rows(&(n_support..n_support + n_query).collect::<Vec<_>>())?;
            if model.method == Method::Matching {
                Ok(matching_probs(&s_emb, &ep.support_labels, n_way, &q_emb)?)
            } else {
                let protos = compute_prototypes(&s_emb, &ep.support_labels, n_way)?;
                Ok(proto_logits(&protos, &q_emb, Metric::SqEuclidean)?)
            }
        }
        Method::Relation => {
            let head = model.relation.as_ref().expect("relation model has a head");
            Ok(relation_scores(
                &model.backbone,
                head,
                &episode_batch(set, ep),
                &ep.support_labels,
                n_way,
                mode,
            )?)
        }
        Method::Maml => {
            let dim = model.backbone.config.embedding_dim();
            let mut init = model.backbone.params();
            init.extend(maml_episode_head::<F>(n_way, dim));
            let fast = maml_adapt(
                &model.backbone,
                &init,
                &set.batch(&ep.support_idx),
                &ep.support_labels,
                cfg.inner_lr,
                cfg.inner_steps,
                training && !cfg.first_order,
            )?;
            Ok(maml_logits(&model.backbone, &fast, &set.batch(&ep.query_idx))?)
        }
        Method::Baseline | Method::BaselinePlus => Ok(finetune_classify(
            &model.backbone,
            &set.batch(&ep.support_idx),
            &ep.support_labels,
            n_way,
            &set.batch(&ep.query_idx),
            model.method == Method::BaselinePlus,
            cfg.finetune_steps,
            cfg.finetune_lr,
        )?),
    }
}

/// Training loss for a score matrix: NLL for probability rows, softmax
/// cross-entropy for logits.
pub fn scores_loss<F: Scalar>(
    method: Method,
    scores: &Tensor<F>,
    query_labels: &[usize],
) -> Result<Tensor<F>, TensorError> {
    match method {
        Method::Matching => probs_nll(scores, query_labels),
        _ => softmax_cross_entropy(scores, query_labels),
    }
}

/// Fraction of query rows whose argmax matches the label.
pub fn scores_accuracy<F: Scalar>(scores: &Tensor<F>, query_labels: &[usize]) -> f64 {
    let pred = scores.argmax_rows();
    let hits = pred
        .iter()
        .zip(query_labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / query_labels.len().max(1) as f64
}

/// Mean and 95% half-width (1.96 * sd / sqrt(n), sample sd) of a series.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Evaluation summary over a set of tasks. Accuracies are fractions in
/// [0,1]; `format_line` renders the conventional percent form.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_tasks: usize,
    pub noise_swaps: usize,
    pub eval_seed: u64,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub task_accuracies: Vec<f64>,
}

impl EvalReport {
    /// "76.04 ± 0.71" (percent, 95% confidence half-width).
    pub fn format_line(&self) -> String {
        format!(
            "{:.2} \u{b1} {:.2}",
            100.0 * self.mean_accuracy,
            100.0 * self.ci95
        )
    }
}

/// Evaluates on `n_tasks` episodes drawn from `class_pool`. Task `t` depends
/// only on `eval_seed` and `t`, so reports are reproducible and independent
/// of evaluation order or count. `noise_swaps` support label swaps are
/// injected per task before inference.
pub fn eval_loop<F: Scalar>(
    model: &Model<F>,
    set: &LabeledImageSet,
    class_pool: &[usize],
    spec: EpisodeSpec,
    n_tasks: usize,
    eval_seed: u64,
    noise_swaps: usize,
    cfg: &TrainConfig,
) -> Result<EvalReport, MethodError> {
    if n_tasks < 2 {
        return Err(MethodError::TooFewTasks(n_tasks));
    }
    let tree = SeedTree::new(eval_seed).derive("eval");
    let mut accs = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut rng = tree.derive_indexed("task", t as u64).rng();
        let mut ep = sample_episode(set, class_pool, spec, &mut rng)?;
        if noise_swaps > 0 {
            let mut noise_rng = tree.derive_indexed("noise", t as u64).rng();
            ep = apply_label_swaps(&ep, noise_swaps, &mut noise_rng);
        }
        // Adaptation-based methods need a scratch tape; pure metric methods
        // can skip recording entirely.
        let scores = match model.method {
            Method::Maml | Method::Baseline | Method::BaselinePlus => {
                let tape = Tape::<F>::new();
                let _scope = tape.scope();
                episode_scores(model, set, &ep, cfg, false)?
            }
            _ => {
                let _g = no_grad();
                episode_scores(model, set, &ep, cfg, false)?
            }
        };
        accs.push(scores_accuracy(&scores, &ep.query_labels));
    }
    let (mean, ci) = mean_ci95(&accs);
    Ok(EvalReport {
        method: model.method.name().to_string(),
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        n_query: spec.n_query,
        n_tasks,
        noise_swaps,
        eval_seed,
        mean_accuracy: mean,
        ci95: ci,
        task_accuracies: accs,
    })
}

/// One row of training history.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Trains `model` on the train classes of `split`, validating on the val
/// classes each epoch, and returns the best-validation snapshot plus the
/// history. With `epochs == 0` the initial model comes back untouched.
pub fn train_loop<F: Scalar>(
    model: Model<F>,
    set: &LabeledImageSet,
    split: &ClassSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model<F>, Vec<HistoryRow>), MethodError> {
    if model.method.episodic_training() {
        train_episodic(model, set, split, cfg, seed)
    } else {
        train_supervised(model, set, split, cfg, seed)
    }
}

fn train_episodic<F: Scalar>(
    model: Model<F>,
    set: &LabeledImageSet,
    split: &ClassSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model<F>, Vec<HistoryRow>), MethodError> {
    let tree = SeedTree::new(seed).derive("train");
    let val_seed = SeedTree::new(seed).derive("val").seed();
    let tape = Tape::<F>::new();
    let _scope = tape.scope();
    let mut params = model.params();
    let mut opt = Optimizer::adam(&params, cfg.meta_lr);
    let mut best = model.deep_clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let batch_size = if model.method == Method::Maml {
        cfg.meta_batch.max(1)
    } else {
        1
    };
    for epoch in 0..cfg.epochs {
        let episodes = episode_stream(
            set,
            &split.train,
            cfg.spec,
            tree.derive("episodes"),
            epoch as u64,
            cfg.episodes_per_epoch,
        )?;
        let mut loss_sum = 0.0;
        for batch in episodes.chunks(batch_size) {
            let mark = tape.checkpoint();
            let mut grad_acc: Vec<Option<Tensor<F>>> = vec![None; params.len()];
            for ep in batch {
                let view = model.with_params(&params);
                let scores = episode_scores(&view, set, ep, cfg, true)?;
                let loss = scores_loss(model.method, &scores, &ep.query_labels)?;
                loss_sum += loss.item().to_f64();
                let grads = loss.scale(1.0 / batch.len() as f64).backward(false)?;
                accumulate(&mut grad_acc, &collect(&params, &grads));
            }
            params = opt.step(&params, &grad_acc);
            tape.rewind(mark);
        }
        let train_loss = loss_sum / cfg.episodes_per_epoch.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(MethodError::NonFinite { epoch });
        }
        let view = model.with_params(&params);
        let val = eval_loop(&view, set, &split.val, cfg.spec, cfg.val_episodes, val_seed, 0, cfg)?;
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_acc: val.mean_accuracy,
        });
        if val.mean_accuracy > best_acc {
            best_acc = val.mean_accuracy;
            best = view.deep_clone();
        }
    }
    Ok((best, history))
}

fn train_supervised<F: Scalar>(
    model: Model<F>,
    set: &LabeledImageSet,
    split: &ClassSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model<F>, Vec<HistoryRow>), MethodError> {
    let tree = SeedTree::new(seed).derive("pretrain");
    let val_seed = SeedTree::new(seed).derive("val").seed();
    let sub = set.restrict_classes(&split.train);
    let n_classes = sub.n_classes();
    let dim = model.backbone.config.embedding_dim();
    let tape = Tape::<F>::new();
    let _scope = tape.scope();
    let mut params = model.params();
    let n_bb = params.len();
    params.push(Tensor::zeros(&[n_classes, dim]).requires_grad());
    params.push(Tensor::zeros(&[n_classes]).requires_grad());
    let mut opt = Optimizer::adam(&params, cfg.meta_lr);
    let mut best = model.deep_clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sub.len()).collect();
        let mut rng = tree.derive_indexed("order", epoch as u64).rng();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut aug_rng = tree.derive_indexed("augment", epoch as u64).rng();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.pretrain_batch) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let x = if cfg.augment {
                let plane = sub.channels * sub.height * sub.width;
                let mut data = Vec::with_capacity(chunk.len() * plane);
                for &i in chunk {
                    let img = standard_augment(
                        &sub.images[i],
                        sub.height,
                        sub.width,
                        sub.channels,
                        &mut aug_rng,
                    );
                    data.extend(img.iter().map(|&v| F::from_f64(v as f64)));
                }
                Tensor::from_vec(data, &[chunk.len(), sub.channels, sub.height, sub.width])?
            } else {
                sub.batch(chunk)
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| sub.labels[i]).collect();
            let mark = tape.checkpoint();
            let bb = model.backbone.with_params(&params[..n_bb]);
            let logits = linear(
                &bb.forward(&x, Mode::Train)?,
                &params[n_bb],
                Some(&params[n_bb + 1]),
            )?;
            let loss = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss.item().to_f64();
            batches += 1;
            let grads = loss.backward(false)?;
            let g = collect(&params, &grads);
            params = opt.step(&params, &g);
            tape.rewind(mark);
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(MethodError::NonFinite { epoch });
        }
        let view = model.with_params(&params[..n_bb]);
        let val = eval_loop(&view, set, &split.val, cfg.spec, cfg.val_episodes, val_seed, 0, cfg)?;
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_acc: val.mean_accuracy,
        });
        if val.mean_accuracy > best_acc {
            best_acc = val.mean_accuracy;
            best = view.deep_clone();
        }
    }
    Ok((best, history))
}
