//! The round protocol: positive-only client updates, server aggregation, the
//! server spreadout step, and the end-to-end training loop.
//!
//! One round proceeds as the paper's algorithm does. Every participating
//! client receives the shared embedder parameters and the embedding of its
//! own class — never anyone else's — runs a few full-batch SGD steps on its
//! positive-only risk, and returns both. The server averages the embedder
//! parameters (weighted by sample count, normalized over participants),
//! writes each returned class row back into the matrix, and then takes one
//! spreadout gradient step at rate `lambda * eta` to push class embeddings
//! apart, followed by row re-normalization.
//!
//! Four modes share this skeleton:
//!
//! * `FedAws` — the full protocol, with either the pairwise regularizer or
//!   its mined top-k variant on the server.
//! * `Baseline1` — no server step (`lambda = 0`); class rows are still
//!   updated by clients, which is exactly the configuration that collapses.
//! * `Baseline2` — clients never touch their class row, so the matrix stays
//!   at its random initialization.
//! * `OracleSoftmax` — no federation at all: centralized full-batch training
//!   on pooled data with softmax cross entropy, the comparison upper bound.
//!
//! Clients within a round run data-parallel over an immutable snapshot of the
//! server state; all reductions happen in a fixed order (sorted by class,
//! then client), so results are identical for any thread count.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{ClientShard, DataError, LabeledDataset};
use crate::losses::{pos_hinge_loss, softmax_xent, LossError, Margin};
use crate::math::{self, MathError, Matrix, RngState};
use crate::metrics::{self, MetricsError, MetricsRecord};
use crate::model::{
    backward, embed, ClassEmbeddingMatrix, EmbedderParams, ModelError, SparseInstance,
};
use crate::spreadout::{grad_reg_sp, grad_reg_sp_top, SpreadoutError};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("shard for class {0} is empty")]
    EmptyShard(usize),
    #[error("duplicate client id {0} in one round")]
    DuplicateClient(usize),
    #[error("class id {class} unknown ({classes} classes configured)")]
    UnknownClass { class: usize, classes: usize },
    #[error("cannot sample {count} clients from a population of {population}")]
    CountOutOfRange { count: usize, population: usize },
    #[error("invalid aggregation weights: {0}")]
    InvalidWeights(String),
    #[error("non-finite parameters detected after round {round}")]
    NonFinite { round: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Spreadout(#[from] SpreadoutError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Training mode; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    FedAws,
    Baseline1,
    Baseline2,
    OracleSoftmax,
}

/// The positive-only loss a client minimizes, as a function of the logit of
/// its own class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositiveLoss {
    /// `max(0, margin - s)^2`; the experimental default with margin 0.9.
    SquaredHinge { margin: f64 },
    /// `(1 - s)^2`, the positive part of the cosine contrastive loss; this
    /// is the form under which the federated objective equals the composite
    /// empirical risk.
    CclPos,
}

impl PositiveLoss {
    /// Loss value and its derivative in the logit.
    pub fn value_grad(&self, s: f64) -> (f64, f64) {
        match *self {
            PositiveLoss::SquaredHinge { margin } => pos_hinge_loss(s, margin),
            PositiveLoss::CclPos => {
                let d = 1.0 - s;
                (d * d, -2.0 * d)
            }
        }
    }
}

/// Optimizer applied to the embedder parameters inside one client update.
/// The class embedding itself always takes plain SGD steps at `eta`.
///
/// Adagrad state lives within a single round; clients are stateless between
/// rounds in this simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClientOptimizer {
    Sgd,
    Adagrad { epsilon: f64 },
}

/// What a client does locally in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPlan {
    pub eta: f64,
    pub steps: usize,
    pub pos_loss: PositiveLoss,
    pub optimizer: ClientOptimizer,
    /// False in Baseline-2: the class embedding is returned untouched.
    pub update_class_embedding: bool,
}

/// What a client sends back: its updated embedder parameters and its own
/// class embedding, plus enough bookkeeping for weighting.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub class_id: usize,
    pub params: EmbedderParams,
    pub class_embedding: Vec<f64>,
    pub sample_count: usize,
}

/// Per-participant aggregation weights: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, FederationError> {
        if weights.is_empty() {
            return Err(FederationError::InvalidWeights("empty".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(FederationError::InvalidWeights("negative or non-finite".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FederationError::InvalidWeights(format!("sum {sum} != 1")));
        }
        Ok(Self(weights))
    }

    /// Default weighting: `w_i = n_i / sum_j n_j`, uniform importance per
    /// training sample.
    pub fn by_sample_count(updates: &[ClientUpdate]) -> Result<Self, FederationError> {
        let total: usize = updates.iter().map(|u| u.sample_count).sum();
        if total == 0 {
            return Err(FederationError::InvalidWeights("no samples".into()));
        }
        Self::new(updates.iter().map(|u| u.sample_count as f64 / total as f64).collect())
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Everything the server holds between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: EmbedderParams,
    pub class_embeddings: ClassEmbeddingMatrix,
    pub round: usize,
    /// Coordinator-only stream used for client (and candidate) sampling.
    rng: RngState,
}

impl ServerState {
    /// A state outside any training loop, for evaluation and the theory
    /// checkers; its sampling stream is fixed at seed 0 and never used.
    pub fn detached(params: EmbedderParams, class_embeddings: ClassEmbeddingMatrix) -> Self {
        Self { params, class_embeddings, round: 0, rng: RngState::new(0) }
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.class_embeddings.is_finite()
    }
}

/// Embedder architecture: vocabulary size, token embedding width, and the
/// MLP layer output sizes (the last one is the class-embedding dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub token_dim: usize,
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.token_dim)
    }
}

/// The per-run plan template; each round stamps it into a [`RoundPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub model: ModelConfig,
    pub num_classes: usize,
    /// Client learning rate, shared by the server spreadout step as the base
    /// rate that `lambda` multiplies.
    pub eta: f64,
    pub local_steps: usize,
    /// Learning-rate multiplier of the server spreadout step.
    pub lambda: f64,
    /// Mined negatives per class; `None` selects the full pairwise
    /// regularizer.
    pub mining_k: Option<usize>,
    /// Candidate-pool cap for mining; pools larger than this are subsampled.
    pub mining_candidate_cap: usize,
    pub nu: Margin,
    pub pos_loss: PositiveLoss,
    /// Participants per round; `None` means all clients.
    pub clients_per_round: Option<usize>,
    pub client_optimizer: ClientOptimizer,
    /// Softmax temperature for the oracle mode.
    pub softmax_temperature: f64,
    pub seed: u64,
}

impl TrainingConfig {
    /// Experiment defaults: squared hinge with margin 0.9, `k = 10`,
    /// `lambda = 10`, one local step, plain SGD.
    pub fn new(mode: TrainingMode, model: ModelConfig, num_classes: usize, seed: u64) -> Self {
        Self {
            mode,
            model,
            num_classes,
            eta: 0.1,
            local_steps: 1,
            lambda: 10.0,
            mining_k: Some(10),
            mining_candidate_cap: 4096,
            nu: Margin::default(),
            pos_loss: PositiveLoss::SquaredHinge { margin: 0.9 },
            clients_per_round: None,
            client_optimizer: ClientOptimizer::Sgd,
            softmax_temperature: 0.1,
            seed,
        }
    }

    pub fn validate(&self, shards: &[ClientShard]) -> Result<(), FederationError> {
        let fail = |msg: String| Err(FederationError::InvalidConfig(msg));
        if self.num_classes == 0 {
            return fail("no classes".into());
        }
        if self.model.vocab == 0 || self.model.token_dim == 0 {
            return fail("degenerate model shape".into());
        }
        if self.model.hidden.contains(&0) {
            return fail("zero-width layer".into());
        }
        if !(self.eta > 0.0) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.local_steps == 0 {
            return fail("local steps must be at least 1".into());
        }
        if !(self.softmax_temperature > 0.0) {
            return fail("softmax temperature must be positive".into());
        }
        if let Some(k) = self.mining_k {
            if k == 0 || k > self.num_classes.saturating_sub(1) {
                return fail(format!(
                    "mining k = {k} invalid for {} classes",
                    self.num_classes
                ));
            }
        }
        if let Some(count) = self.clients_per_round {
            if count == 0 || count > shards.len() {
                return Err(FederationError::CountOutOfRange {
                    count,
                    population: shards.len(),
                });
            }
        }
        for s in shards {
            if s.class_id() >= self.num_classes {
                return Err(FederationError::UnknownClass {
                    class: s.class_id(),
                    classes: self.num_classes,
                });
            }
            for x in s.instances() {
                if x.max_index() >= self.model.vocab {
                    return Err(FederationError::Model(ModelError::VocabOutOfRange {
                        index: x.max_index(),
                        vocab: self.model.vocab,
                    }));
                }
            }
        }
        Ok(())
    }

    /// Initial server state: seeded embedder parameters, class rows uniform
    /// on the unit sphere, and the coordinator sampling stream. All three
    /// derive from independent children of the run seed.
    pub fn init_state(&self) -> ServerState {
        let root = RngState::new(self.seed);
        let mut params_rng = root.derive(1);
        let params = EmbedderParams::init(
            self.model.vocab,
            self.model.token_dim,
            &self.model.hidden,
            &mut params_rng,
        );
        let mut class_rng = root.derive(2);
        let class_embeddings = ClassEmbeddingMatrix::random_unit(
            self.num_classes,
            self.model.embedding_dim(),
            &mut class_rng,
        );
        ServerState { params, class_embeddings, round: 0, rng: root.derive(3) }
    }

    fn local_plan(&self) -> LocalPlan {
        LocalPlan {
            eta: self.eta,
            steps: self.local_steps,
            pos_loss: self.pos_loss,
            optimizer: self.client_optimizer,
            update_class_embedding: self.mode != TrainingMode::Baseline2,
        }
    }
}

/// One stamped round: which shards participate and with what parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    /// Participating shard indices, sorted ascending.
    pub participants: Vec<usize>,
    pub eta: f64,
    pub local_steps: usize,
    pub lambda: f64,
    pub mining_k: Option<usize>,
    pub nu: Margin,
    pub mode: TrainingMode,
}

/// Uniform sample of `count` distinct client indices from `[0, population)`,
/// sorted; deterministic given the stream state.
pub fn sample_clients(
    rng: &mut RngState,
    population: usize,
    count: usize,
) -> Result<Vec<usize>, FederationError> {
    if count == 0 || count > population {
        return Err(FederationError::CountOutOfRange { count, population });
    }
    Ok(rng.sample_without_replacement(population, count))
}

/// Run one client's local optimization from the round-start snapshot.
///
/// The inputs are exactly what the protocol allows a client to see: the
/// shared embedder parameters, the embedding of its own class, and its own
/// shard. Each step takes the full-batch gradient of the mean positive loss
/// over the shard, updates the embedder through the configured optimizer and
/// the class embedding by plain SGD, then re-normalizes the class embedding.
pub fn client_update(
    params: &EmbedderParams,
    class_embedding: &[f64],
    shard: &ClientShard,
    client_id: usize,
    plan: &LocalPlan,
) -> Result<ClientUpdate, FederationError> {
    if shard.is_empty() {
        return Err(FederationError::EmptyShard(shard.class_id()));
    }
    let mut theta = params.clone();
    let mut w = class_embedding.to_vec();
    let n = shard.len() as f64;
    let mut adagrad_acc: Option<Vec<f64>> = None;

    for _ in 0..plan.steps {
        let mut grad_theta = theta.zeros_like();
        let mut grad_w = vec![0.0; w.len()];
        let mut any_active = false;
        for x in shard.instances() {
            let g = embed(&theta, x)?;
            let s = math::dot(&g, &w)?;
            let (_, ds) = plan.pos_loss.value_grad(s);
            if ds == 0.0 {
                continue;
            }
            any_active = true;
            for (gw, gi) in grad_w.iter_mut().zip(&g) {
                *gw += ds * gi / n;
            }
            let upstream: Vec<f64> = w.iter().map(|wi| ds * wi / n).collect();
            let gt = backward(&theta, x, &upstream)?;
            grad_theta.add_scaled(&gt, 1.0)?;
        }
        if !any_active {
            break; // every hinge inactive: the remaining steps are identities
        }
        match plan.optimizer {
            ClientOptimizer::Sgd => theta.add_scaled(&grad_theta, -plan.eta)?,
            ClientOptimizer::Adagrad { epsilon } => {
                let gflat = grad_theta.to_flat();
                let acc = adagrad_acc.get_or_insert_with(|| vec![0.0; gflat.len()]);
                let mut tflat = theta.to_flat();
                for ((t, g), a) in tflat.iter_mut().zip(&gflat).zip(acc.iter_mut()) {
                    *a += g * g;
                    *t -= plan.eta * g / (a.sqrt() + epsilon);
                }
                theta = EmbedderParams::from_flat(&theta, &tflat)?;
            }
        }
        if plan.update_class_embedding {
            for (wi, gw) in w.iter_mut().zip(&grad_w) {
                *wi -= plan.eta * gw;
            }
            w = math::normalize(&w)?;
        }
    }

    Ok(ClientUpdate {
        client_id,
        class_id: shard.class_id(),
        params: theta,
        class_embedding: w,
        sample_count: shard.len(),
    })
}

/// Combine the round's updates: weighted average of the embedder parameters,
/// and per-class replacement of the returned class rows.
///
/// A class owned by a single participant gets its returned row verbatim.
/// When several shards share a class, their returned copies are averaged by
/// weight and re-normalized. Non-participating classes keep their previous
/// rows. The reduction runs in (class, client) order so floating-point sums
/// are reproducible.
pub fn aggregate(
    updates: &[ClientUpdate],
    weights: &AggregationWeights,
    prev: &ServerState,
) -> Result<(EmbedderParams, ClassEmbeddingMatrix), FederationError> {
    if updates.is_empty() {
        return Err(FederationError::InvalidWeights("no updates".into()));
    }
    if updates.len() != weights.len() {
        return Err(FederationError::InvalidWeights(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let classes = prev.class_embeddings.num_classes();
    for u in updates {
        if u.class_id >= classes {
            return Err(FederationError::UnknownClass { class: u.class_id, classes });
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| (updates[i].class_id, updates[i].client_id, i));
    for pair in order.windows(2) {
        if updates[pair[0]].client_id == updates[pair[1]].client_id {
            return Err(FederationError::DuplicateClient(updates[pair[0]].client_id));
        }
    }

    let terms: Vec<(f64, &EmbedderParams)> =
        order.iter().map(|&i| (weights.get(i), &updates[i].params)).collect();
    let params = EmbedderParams::weighted_sum(&terms)?;

    let mut class_embeddings = prev.class_embeddings.clone();
    let mut at = 0;
    while at < order.len() {
        let class = updates[order[at]].class_id;
        let mut end = at + 1;
        while end < order.len() && updates[order[end]].class_id == class {
            end += 1;
        }
        if end - at == 1 {
            class_embeddings.replace_row_unit(class, &updates[order[at]].class_embedding)?;
        } else {
            let dim = class_embeddings.dim();
            let mut avg = vec![0.0; dim];
            let mut weight_sum = 0.0;
            for &i in &order[at..end] {
                let w = weights.get(i);
                weight_sum += w;
                for (a, v) in avg.iter_mut().zip(&updates[i].class_embedding) {
                    *a += w * v;
                }
            }
            for a in avg.iter_mut() {
                *a /= weight_sum;
            }
            class_embeddings.set_row(class, &avg)?;
        }
        at = end;
    }
    Ok((params, class_embeddings))
}

/// Which regularizer gradient the server step uses when mining is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningPlan {
    /// Classes whose neighborhoods are mined (the round's active classes).
    pub active: Vec<usize>,
    /// Candidate pool the neighbors are drawn from.
    pub candidates: Vec<usize>,
    pub k: usize,
}

/// The server's spreadout step: `W <- W - lambda * eta * grad`, with the
/// pairwise regularizer by default or the mined variant when a plan is
/// given, followed by row re-normalization. `lambda = 0` reduces to
/// re-normalization alone.
pub fn server_spreadout_step(
    mut w_tilde: ClassEmbeddingMatrix,
    lambda: f64,
    eta: f64,
    nu: Margin,
    mining: Option<&MiningPlan>,
) -> Result<ClassEmbeddingMatrix, FederationError> {
    if lambda > 0.0 {
        let grad = match mining {
            Some(plan) => {
                grad_reg_sp_top(w_tilde.as_matrix(), &plan.active, &plan.candidates, plan.k)?
            }
            None => grad_reg_sp(w_tilde.as_matrix(), nu),
        };
        w_tilde.apply_gradient_step(&grad, lambda * eta)?;
    } else {
        w_tilde.renormalize_rows()?;
    }
    Ok(w_tilde)
}

/// Evaluation view of the training shards: instances concatenated in shard
/// order with their class labels.
pub fn dataset_from_shards(
    shards: &[ClientShard],
    num_classes: usize,
    vocab: usize,
) -> Result<LabeledDataset, FederationError> {
    let mut instances: Vec<SparseInstance> = Vec::new();
    let mut labels = Vec::new();
    for s in shards {
        for x in s.instances() {
            instances.push(x.clone());
            labels.push(s.class_id());
        }
    }
    Ok(LabeledDataset::new(instances, labels, num_classes, vocab)?)
}

/// Execute `rounds` rounds in the configured mode and record metrics after
/// each. Returns the final state and the per-round records.
///
/// Identical configs and seeds produce bit-identical records, independent of
/// how many worker threads execute the clients.
pub fn run_training(
    config: &TrainingConfig,
    shards: &[ClientShard],
    rounds: usize,
) -> Result<(ServerState, Vec<MetricsRecord>), FederationError> {
    config.validate(shards)?;
    let mut state = config.init_state();
    let eval = dataset_from_shards(shards, config.num_classes, config.model.vocab)?;
    let mut records = Vec::with_capacity(rounds);

    for round in 0..rounds {
        let plan = stamp_round_plan(config, &mut state, shards.len(), round)?;
        match config.mode {
            TrainingMode::OracleSoftmax => oracle_round(&mut state, config, &eval)?,
            _ => federated_round(&mut state, config, &plan, shards)?,
        }
        state.round = round + 1;
        if !state.is_finite() {
            return Err(FederationError::NonFinite { round });
        }
        records.push(metrics::round_record(round, &state, &eval, &config.pos_loss, config.nu)?);
    }
    Ok((state, records))
}

fn stamp_round_plan(
    config: &TrainingConfig,
    state: &mut ServerState,
    population: usize,
    round: usize,
) -> Result<RoundPlan, FederationError> {
    if population == 0 {
        return Err(FederationError::InvalidConfig("no shards".into()));
    }
    let count = config.clients_per_round.unwrap_or(population);
    let participants = sample_clients(&mut state.rng, population, count)?;
    Ok(RoundPlan {
        round,
        participants,
        eta: config.eta,
        local_steps: config.local_steps,
        lambda: config.lambda,
        mining_k: config.mining_k,
        nu: config.nu,
        mode: config.mode,
    })
}

fn federated_round(
    state: &mut ServerState,
    config: &TrainingConfig,
    plan: &RoundPlan,
    shards: &[ClientShard],
) -> Result<(), FederationError> {
    let local = config.local_plan();
    let params = &state.params;
    let class_embeddings = &state.class_embeddings;
    let updates: Vec<ClientUpdate> = plan
        .participants
        .par_iter()
        .map(|&i| {
            let shard = &shards[i];
            client_update(params, class_embeddings.row(shard.class_id()), shard, i, &local)
        })
        .collect::<Result<_, _>>()?;

    let weights = AggregationWeights::by_sample_count(&updates)?;
    let (params_next, w_tilde) = aggregate(&updates, &weights, state)?;
    state.params = params_next;

    let lambda = match config.mode {
        TrainingMode::FedAws => config.lambda,
        TrainingMode::Baseline1 | TrainingMode::Baseline2 => 0.0,
        TrainingMode::OracleSoftmax => unreachable!("oracle mode has its own round"),
    };
    let mining = if lambda > 0.0 {
        config.mining_k.map(|k| {
            let mut active: Vec<usize> =
                plan.participants.iter().map(|&i| shards[i].class_id()).collect();
            active.sort_unstable();
            active.dedup();
            MiningPlan { active, candidates: mining_candidates(config, state), k }
        })
    } else {
        None
    };
    state.class_embeddings =
        server_spreadout_step(w_tilde, lambda, config.eta, config.nu, mining.as_ref())?;
    Ok(())
}

/// Candidate pool for mining: every class when small enough, otherwise a
/// seeded uniform subsample at the configured cap.
fn mining_candidates(config: &TrainingConfig, state: &mut ServerState) -> Vec<usize> {
    let c = config.num_classes;
    if c <= config.mining_candidate_cap {
        (0..c).collect()
    } else {
        state.rng.sample_without_replacement(c, config.mining_candidate_cap)
    }
}

/// One centralized oracle round: `local_steps` full-batch steps of softmax
/// cross entropy over the pooled data, updating the embedder and the whole
/// class matrix jointly, with row re-normalization after each step.
fn oracle_round(
    state: &mut ServerState,
    config: &TrainingConfig,
    data: &LabeledDataset,
) -> Result<(), FederationError> {
    let n = data.len() as f64;
    let temperature = config.softmax_temperature;
    for _ in 0..config.local_steps {
        let params = &state.params;
        let class_embeddings = &state.class_embeddings;
        // Per-instance gradients in parallel, reduced sequentially in
        // instance order.
        let per_instance: Vec<(EmbedderParams, Vec<f64>, Vec<f64>)> = data
            .instances()
            .par_iter()
            .zip(data.labels().par_iter())
            .map(|(x, &y)| -> Result<_, FederationError> {
                let g = embed(params, x)?;
                let s = crate::model::score(class_embeddings, &g)?;
                let (_, grad_s) = softmax_xent(&s, y, temperature)?;
                // Upstream on the instance embedding: W^T grad_s.
                let dim = class_embeddings.dim();
                let mut upstream = vec![0.0; dim];
                for (c, &gs) in grad_s.iter().enumerate() {
                    for (u, wc) in upstream.iter_mut().zip(class_embeddings.row(c)) {
                        *u += gs * wc;
                    }
                }
                let grad_theta = backward(params, x, &upstream)?;
                Ok((grad_theta, grad_s, g))
            })
            .collect::<Result<_, _>>()?;

        let mut grad_theta = state.params.zeros_like();
        let mut grad_w =
            Matrix::zeros(state.class_embeddings.num_classes(), state.class_embeddings.dim());
        for (gt, grad_s, g) in &per_instance {
            grad_theta.add_scaled(gt, 1.0 / n)?;
            for (c, &gs) in grad_s.iter().enumerate() {
                let row = grad_w.row_mut(c);
                for (r, gi) in row.iter_mut().zip(g) {
                    *r += gs * gi / n;
                }
            }
        }
        state.params.add_scaled(&grad_theta, -config.eta)?;
        state.class_embeddings.apply_gradient_step(&grad_w, config.eta)?;
    }
    Ok(())
}
