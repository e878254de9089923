//! The decentralized round engine.
//!
//! Round 0 initializes every client with join round 0, compresses the fresh
//! models and sends them along an initial peer graph. Each later round r
//! activates joiners with a dense warm-up epoch, builds a new random peer
//! graph, lets every active client consume what round r−1 sent it — momentum
//! reference, teacher weighting and alignment for delayed clients, then E
//! epochs of masked SGD — refreshes the weight clustering and mask, and
//! finally ships the new compressed model along this round's edges.
//!
//! Determinism: every random choice draws from a stream derived from
//! (master seed, purpose, client, round), and per-client updates never share
//! state, so serial and parallel execution produce identical metrics.

mod flops;
mod graph;
mod metrics;

pub use flops::{account_flops, dkm_flops, match_flops, train_flops, wcp_flops};
pub use graph::{build_peer_graph, PeerGraph};
pub use metrics::{to_csv, to_jsonl, MetricsRow};

use crate::cfd::{self, FrequencySet, TeacherWeights};
use crate::data::{self, Partition, SyntheticDataset};
use crate::dkm::{self, AlignConfig, AlignTeacher};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Matrix, ModelParams, PruneMask};
use crate::rng::{self, Stream};
use crate::wcp::{self, CompressedModel};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// What crosses the wire and which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Weight clustering on the wire, alignment for delayed clients.
    Full,
    /// Weight clustering on the wire, alignment disabled (λ = 0 ablation).
    NoAlign,
    /// Raw f32 weights on the wire, no pruning, no alignment; the dense
    /// cost baseline.
    DenseWire,
}

/// A client that joins after training has begun.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayedClient {
    pub id: u32,
    pub join_round: u32,
}

/// Full description of one simulation. `run_simulation` is a pure function
/// of this struct, master seed included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rounds: u32,
    pub clients: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub local_epochs: u32,
    /// Weight of the alignment loss in the combined objective.
    pub lambda: f64,
    /// Reference-model momentum coefficient.
    pub gamma: f64,
    /// Peers sampled per client per round.
    pub peers: usize,
    /// Clusters per layer (table size).
    pub k: usize,
    pub wcp_max_iters: usize,
    pub wcp_tol: f64,
    pub t_dkm: usize,
    pub sigma: f64,
    pub n_freq: usize,
    pub alpha_mix: f64,
    pub beta_dist: f64,
    pub eps: f64,
    pub seed: u64,
    /// Hidden layer widths of the shared MLP architecture.
    pub hidden: Vec<usize>,
    pub init_scale: f64,
    pub classes: usize,
    pub feature_dim: usize,
    pub samples: usize,
    pub spread: f64,
    pub dirichlet_alpha: f64,
    pub test_fraction: f64,
    pub delayed: Vec<DelayedClient>,
    /// Alignment window after joining; None aligns every round from join on.
    pub align_rounds: Option<u32>,
    pub mode: RunMode,
    pub parallel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            clients: 8,
            batch_size: 32,
            learning_rate: 0.05,
            local_epochs: 1,
            lambda: 0.5,
            gamma: 0.1,
            peers: 3,
            k: wcp::DEFAULT_K,
            wcp_max_iters: wcp::DEFAULT_MAX_ITERS,
            wcp_tol: wcp::DEFAULT_TOL,
            t_dkm: dkm::DEFAULT_T_DKM,
            sigma: cfd::DEFAULT_SIGMA,
            n_freq: cfd::DEFAULT_N_FREQ,
            alpha_mix: dkm::DEFAULT_ALPHA_MIX,
            beta_dist: dkm::DEFAULT_BETA_DIST,
            eps: dkm::EPSILON,
            seed: 0,
            hidden: vec![32, 16],
            init_scale: 1.0,
            classes: 4,
            feature_dim: 16,
            samples: 4000,
            spread: 0.8,
            dirichlet_alpha: 0.4,
            test_fraction: 0.25,
            delayed: Vec::new(),
            align_rounds: None,
            mode: RunMode::Full,
            parallel: true,
        }
    }
}

impl SimConfig {
    /// Layer dimension chain of the shared architecture.
    pub fn arch(&self) -> Vec<usize> {
        let mut dims = vec![self.feature_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.classes);
        dims
    }

    /// Validate every field, reporting all offenders at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.clients == 0 {
            bad.push("clients must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            bad.push(format!("learning_rate={} must be > 0", self.learning_rate));
        }
        if self.local_epochs == 0 {
            bad.push("local_epochs must be >= 1".to_string());
        }
        if !(self.lambda >= 0.0) {
            bad.push(format!("lambda={} must be >= 0", self.lambda));
        }
        if !(self.gamma >= 0.0) {
            bad.push(format!("gamma={} must be >= 0", self.gamma));
        }
        if self.k < 2 {
            bad.push(format!("k={} must be >= 2", self.k));
        }
        if self.wcp_max_iters == 0 {
            bad.push("wcp_max_iters must be >= 1".to_string());
        }
        if !(self.wcp_tol > 0.0) {
            bad.push(format!("wcp_tol={} must be > 0", self.wcp_tol));
        }
        if self.t_dkm == 0 {
            bad.push("t_dkm must be >= 1".to_string());
        }
        if !(self.sigma > 0.0) {
            bad.push(format!("sigma={} must be > 0", self.sigma));
        }
        if self.n_freq == 0 {
            bad.push("n_freq must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            bad.push(format!("alpha_mix={} must lie in [0, 1]", self.alpha_mix));
        }
        if !(self.beta_dist > 0.0) {
            bad.push(format!("beta_dist={} must be > 0", self.beta_dist));
        }
        if !(self.eps > 0.0) {
            bad.push(format!("eps={} must be > 0", self.eps));
        }
        if self.hidden.contains(&0) {
            bad.push("hidden widths must all be >= 1".to_string());
        }
        if !(self.init_scale > 0.0) {
            bad.push(format!("init_scale={} must be > 0", self.init_scale));
        }
        if self.classes < 2 {
            bad.push(format!("classes={} must be >= 2", self.classes));
        }
        if self.feature_dim == 0 {
            bad.push("feature_dim must be >= 1".to_string());
        }
        if self.samples < self.classes.max(self.clients as usize) {
            bad.push(format!(
                "samples={} must cover classes={} and clients={}",
                self.samples, self.classes, self.clients
            ));
        }
        if !(self.spread >= 0.0) {
            bad.push(format!("spread={} must be >= 0", self.spread));
        }
        if !(self.dirichlet_alpha > 0.0) {
            bad.push(format!("dirichlet_alpha={} must be > 0", self.dirichlet_alpha));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bad.push(format!("test_fraction={} must lie in (0, 1)", self.test_fraction));
        }
        for d in &self.delayed {
            if d.id >= self.clients {
                bad.push(format!("delayed client id {} out of range", d.id));
            }
            if d.join_round == 0 {
                bad.push(format!("delayed client {} must have join_round >= 1", d.id));
            }
            if d.join_round > self.rounds && self.rounds > 0 {
                bad.push(format!(
                    "delayed client {} joins at round {} after the last round {}",
                    d.id, d.join_round, self.rounds
                ));
            }
        }
        let mut ids: Vec<u32> = self.delayed.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.delayed.len() {
            bad.push("delayed client ids must be distinct".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn join_round(&self, id: u32) -> u32 {
        self.delayed
            .iter()
            .find(|d| d.id == id)
            .map(|d| d.join_round)
            .unwrap_or(0)
    }

    fn align_config(&self) -> AlignConfig {
        AlignConfig {
            t_dkm: self.t_dkm,
            alpha_mix: self.alpha_mix,
            beta_dist: self.beta_dist,
            eps: self.eps,
        }
    }
}

// ---------------------------------------------------------------------------
// Client state and messages
// ---------------------------------------------------------------------------

/// One client's private state between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub join_round: u32,
    pub model: ModelParams,
    pub mask: PruneMask,
    /// Latest weight-clustered snapshot; absent until the first compression
    /// (and always absent in dense-wire mode).
    pub compressed: Option<CompressedModel>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub is_delayed: bool,
}

/// Dense f32 wire format for the baseline:
/// `"DCDN" | u8 1 | client u32 | round u32 | layer_count u16 |
///  per layer rows u32, cols u32, rows·cols f32 | per layer bias_len u32, f32s`.
fn encode_dense(model: &ModelParams, client_id: u32, round: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"DCDN");
    out.push(1);
    out.extend_from_slice(&client_id.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u16).to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
        for &w in layer.weight.data() {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    for layer in &model.layers {
        out.extend_from_slice(&(layer.bias.len() as u32).to_le_bytes());
        for &b in &layer.bias {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    out
}

fn decode_dense(bytes: &[u8], activation: Activation) -> Result<ModelParams> {
    let fail = |what: &str| Error::Protocol(format!("dense message: {what}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(fail("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != b"DCDN" {
        return Err(fail("bad magic"));
    }
    if take(1)?[0] != 1 {
        return Err(fail("bad version"));
    }
    let _client = take(4)?;
    let _round = take(4)?;
    let layer_count = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let mut weights = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
        }
        weights.push(Matrix::new(rows, cols, data)?);
    }
    let mut layers = Vec::with_capacity(layer_count);
    for weight in weights {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut bias = Vec::with_capacity(len);
        for _ in 0..len {
            bias.push(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
        }
        layers.push(nn::Layer { weight, bias });
    }
    let consumed = pos;
    if consumed != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    ModelParams::new(layers, activation)
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

struct Inbound {
    sender: u32,
    bytes: Vec<u8>,
}

pub struct Simulation {
    cfg: SimConfig,
    dataset: SyntheticDataset,
    clients: BTreeMap<u32, ClientState>,
    active: BTreeSet<u32>,
    inbox: BTreeMap<u32, Vec<Inbound>>,
    metrics: Vec<MetricsRow>,
}

/// Result of one client's local update, merged at the round barrier.
struct UpdateOutcome {
    state: ClientState,
    row: MetricsRow,
}

/// Run the whole protocol; the metrics table is a pure function of the
/// config.
pub fn run_simulation(cfg: &SimConfig) -> Result<Vec<MetricsRow>> {
    let mut sim = Simulation::new(cfg.clone())?;
    sim.setup()?;
    for round in 1..=cfg.rounds {
        sim.run_round(round)?;
    }
    Ok(sim.metrics)
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = data::gen_synthetic(
            cfg.classes,
            cfg.feature_dim,
            cfg.samples,
            cfg.spread,
            rng::derive_seed(cfg.seed, Stream::DataGen, 0, 0),
        )?;
        let mut part_rng = rng::stream(cfg.seed, Stream::Partition, 0, 0);
        let partition = data::dirichlet_partition(
            &dataset.labels,
            cfg.clients as usize,
            cfg.dirichlet_alpha,
            &mut part_rng,
        )?;
        let mut split_rng = rng::stream(cfg.seed, Stream::Split, 0, 0);
        let partition: Partition =
            data::split_train_test(partition, &dataset.labels, cfg.test_fraction, &mut split_rng)?;

        let mut clients = BTreeMap::new();
        for id in 0..cfg.clients {
            let join_round = cfg.join_round(id);
            let mut init_rng = rng::stream(cfg.seed, Stream::Init, id as u64, 0);
            let model =
                ModelParams::init(&cfg.arch(), Activation::Tanh, cfg.init_scale, &mut init_rng)?;
            let mask = PruneMask::all_true(&model);
            clients.insert(
                id,
                ClientState {
                    id,
                    join_round,
                    model,
                    mask,
                    compressed: None,
                    train_idx: partition.train[id as usize].clone(),
                    test_idx: partition.test[id as usize].clone(),
                    is_delayed: join_round > 0,
                },
            );
        }
        Ok(Self {
            cfg,
            dataset,
            clients,
            active: BTreeSet::new(),
            inbox: BTreeMap::new(),
            metrics: Vec::new(),
        })
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn client(&self, id: u32) -> Option<&ClientState> {
        self.clients.get(&id)
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.dataset
    }

    /// Dense average of the active clients' models — the consensus iterate.
    pub fn consensus_model(&self) -> Result<ModelParams> {
        let models: Vec<&ModelParams> =
            self.active.iter().map(|id| &self.clients[id].model).collect();
        nn::mean_models(&models)
    }

    /// Round 0: activate clients with join round 0, compress their fresh
    /// models and send along the initial peer graph. Consumed in round 1.
    pub fn setup(&mut self) -> Result<()> {
        let starters: Vec<u32> = self
            .clients
            .values()
            .filter(|c| c.join_round == 0)
            .map(|c| c.id)
            .collect();
        for id in starters {
            self.active.insert(id);
            if self.cfg.mode != RunMode::DenseWire {
                let client = self.clients.get_mut(&id).unwrap();
                let (compressed, mask) = wcp::compress_model(
                    &client.model,
                    id,
                    0,
                    self.cfg.k,
                    self.cfg.wcp_max_iters,
                    self.cfg.wcp_tol,
                )?;
                client.compressed = Some(compressed);
                client.mask = mask;
            }
        }
        let mut graph_rng = rng::stream(self.cfg.seed, Stream::Graph, 0, 0);
        let graph = build_peer_graph(&self.active, self.cfg.peers, 0, &mut graph_rng);
        self.deliver(&graph, 0)?;
        Ok(())
    }

    /// Encode each active client's current message and push it to this
    /// round's receivers; returns per-sender byte counts.
    fn deliver(&mut self, graph: &PeerGraph, round: u32) -> Result<BTreeMap<u32, u64>> {
        let mut sent = BTreeMap::new();
        for (&sender, receivers) in graph.senders() {
            if receivers.is_empty() {
                sent.insert(sender, 0);
                continue;
            }
            let client = &self.clients[&sender];
            let bytes = match self.cfg.mode {
                RunMode::DenseWire => encode_dense(&client.model, sender, round),
                _ => {
                    let compressed = client.compressed.as_ref().ok_or_else(|| {
                        Error::Protocol(format!("client {sender} has no compressed model to send"))
                    })?;
                    wcp::encode_wire(compressed)
                }
            };
            sent.insert(sender, (bytes.len() * receivers.len()) as u64);
            for &receiver in receivers {
                self.inbox
                    .entry(receiver)
                    .or_default()
                    .push(Inbound { sender, bytes: bytes.clone() });
            }
        }
        Ok(sent)
    }

    /// One full round: activate joiners, build this round's graph,
    /// local-update every active client on last round's messages, then send
    /// fresh compressed models.
    pub fn run_round(&mut self, round: u32) -> Result<()> {
        let joiners: Vec<u32> = self
            .clients
            .values()
            .filter(|c| c.join_round == round)
            .map(|c| c.id)
            .collect();
        let mut warmup_flops: BTreeMap<u32, u64> = BTreeMap::new();
        for id in joiners {
            warmup_flops.insert(id, self.warmup_client(id)?);
            self.active.insert(id);
        }

        let mut graph_rng = rng::stream(self.cfg.seed, Stream::Graph, round as u64, 0);
        let graph = build_peer_graph(&self.active, self.cfg.peers, round, &mut graph_rng);

        // Shared frequency set for every comparison this round.
        let freqs = if self.cfg.mode == RunMode::Full && self.cfg.lambda > 0.0 {
            Some(FrequencySet::generate(
                self.cfg.n_freq,
                self.cfg.sigma,
                rng::derive_seed(self.cfg.seed, Stream::Frequencies, round as u64, 0),
            )?)
        } else {
            None
        };

        // Pull each client's pending messages, then update everyone at the
        // round barrier.
        let mut work: Vec<(ClientState, Vec<Inbound>)> = Vec::new();
        for &id in &self.active {
            let mut received = self.inbox.remove(&id).unwrap_or_default();
            received.sort_by_key(|m| m.sender);
            work.push((self.clients[&id].clone(), received));
        }

        let cfg = &self.cfg;
        let dataset = &self.dataset;
        let freqs_ref = freqs.as_ref();
        let outcomes: Result<Vec<UpdateOutcome>> = if cfg.parallel {
            work.into_par_iter()
                .map(|(state, received)| {
                    local_update(cfg, dataset, state, &received, round, freqs_ref)
                })
                .collect()
        } else {
            work.into_iter()
                .map(|(state, received)| {
                    local_update(cfg, dataset, state, &received, round, freqs_ref)
                })
                .collect()
        };
        let outcomes = outcomes?;

        let mut rows: BTreeMap<u32, MetricsRow> = BTreeMap::new();
        for outcome in outcomes {
            let id = outcome.state.id;
            self.clients.insert(id, outcome.state);
            rows.insert(id, outcome.row);
        }

        let sent = self.deliver(&graph, round)?;
        for (id, row) in &mut rows {
            row.bytes_sent = sent.get(id).copied().unwrap_or(0);
            row.flops += warmup_flops.get(id).copied().unwrap_or(0);
        }
        self.metrics.extend(rows.into_values());
        Ok(())
    }

    /// One dense pass of mini-batch SGD over the joiner's own shard; returns
    /// the FLOPs spent so the join-round row can account for it.
    pub fn warmup_client(&mut self, id: u32) -> Result<u64> {
        let cfg = self.cfg.clone();
        let client = self.clients.get_mut(&id).unwrap();
        if client.train_idx.is_empty() {
            return Err(Error::Config(format!("client {id} joined with an empty shard")));
        }
        let mut order = client.train_idx.clone();
        let mut rng = rng::stream(cfg.seed, Stream::Warmup, id as u64, 0);
        order.shuffle(&mut rng);
        let dense = PruneMask::all_true(&client.model);
        let mut flops = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (features, labels) = self.dataset.gather(batch);
            let (_, cache) = nn::forward_loss(&client.model, &dense, &features, &labels)?;
            let grad = nn::backward(&client.model, &dense, &cache, &features, &labels)?;
            flops += account_flops(&client.model, &dense, batch.len() as u64);
            let reference = client.model.clone();
            client.model =
                nn::apply_update(&client.model, &grad, &dense, cfg.learning_rate, 0.0, &reference)?;
        }
        client.mask = dense;
        Ok(flops)
    }
}

/// The per-client body of a round: reference model from received messages,
/// teacher weighting and alignment when delayed, E epochs of masked SGD with
/// the momentum term, then a weight-clustering refresh.
fn local_update(
    cfg: &SimConfig,
    dataset: &SyntheticDataset,
    mut client: ClientState,
    received: &[Inbound],
    round: u32,
    freqs: Option<&FrequencySet>,
) -> Result<UpdateOutcome> {
    let bytes_recv: u64 = received.iter().map(|m| m.bytes.len() as u64).sum();
    let mut flops: u64 = 0;

    // Decode neighbors and form the momentum reference.
    let mut teacher_models: Vec<CompressedModel> = Vec::new();
    let mut dense_models: Vec<ModelParams> = Vec::new();
    for msg in received {
        match cfg.mode {
            RunMode::DenseWire => {
                let model = decode_dense(&msg.bytes, client.model.activation)?;
                check_architecture(cfg, &model, msg.sender)?;
                dense_models.push(model);
            }
            _ => {
                let compressed = wcp::decode_wire(&msg.bytes)?;
                let model = compressed.to_model(client.model.activation)?;
                check_architecture(cfg, &model, msg.sender)?;
                dense_models.push(model);
                teacher_models.push(compressed);
            }
        }
    }
    let theta_ref = if dense_models.is_empty() {
        client.model.clone()
    } else {
        let refs: Vec<&ModelParams> = dense_models.iter().collect();
        nn::mean_models(&refs)?
    };

    // Teacher weighting, once per round, for delayed clients only.
    let aligning = cfg.mode == RunMode::Full
        && cfg.lambda > 0.0
        && client.is_delayed
        && !teacher_models.is_empty()
        && client.compressed.is_some()
        && cfg
            .align_rounds
            .map(|window| round - client.join_round < window)
            .unwrap_or(true);
    let alpha: Option<TeacherWeights> = if aligning {
        let own = client.compressed.as_ref().unwrap();
        let freqs = freqs.expect("frequency set exists whenever alignment can run");
        let scores: Vec<f64> = teacher_models
            .iter()
            .map(|teacher| cfd::cfd_model(own, teacher, freqs))
            .collect::<Result<_>>()?;
        Some(cfd::teacher_weights(&scores)?)
    } else {
        None
    };

    // E epochs of masked SGD on the combined loss.
    let align_cfg = cfg.align_config();
    let own_tables: Vec<Vec<f64>> = client
        .compressed
        .as_ref()
        .map(|c| c.layers.iter().map(|l| l.table().values().to_vec()).collect())
        .unwrap_or_default();
    let mut batch_rng = rng::stream(cfg.seed, Stream::Batches, client.id as u64, round as u64);
    let mut align_loss_sum = 0.0;
    let mut align_calls = 0u64;
    for _ in 0..cfg.local_epochs {
        let mut order = client.train_idx.clone();
        order.shuffle(&mut batch_rng);
        for batch in order.chunks(cfg.batch_size) {
            let (features, labels) = dataset.gather(batch);
            let (_, cache) = nn::forward_loss(&client.model, &client.mask, &features, &labels)?;
            let mut grad = nn::backward(&client.model, &client.mask, &cache, &features, &labels)?;
            flops += account_flops(&client.model, &client.mask, batch.len() as u64);

            if let Some(alpha) = &alpha {
                let mut batch_align = 0.0;
                for (l, layer) in client.model.layers.iter().enumerate() {
                    let teachers: Vec<AlignTeacher<'_>> = teacher_models
                        .iter()
                        .map(|t| AlignTeacher::from_layer(&t.layers[l]))
                        .collect();
                    let weights = layer.weight.data();
                    let (loss, align_grad) = dkm::align_loss_and_grad(
                        weights,
                        &own_tables[l],
                        &teachers,
                        alpha,
                        &align_cfg,
                    )?;
                    batch_align += loss;
                    grad.add_weight_grad(l, &align_grad, cfg.lambda);
                    let n = weights.len() as u64;
                    flops += dkm_flops(n, own_tables[l].len() as u64, cfg.t_dkm as u64);
                    for teacher in &teachers {
                        flops += match_flops(
                            teacher.centroids.len() as u64,
                            own_tables[l].len() as u64,
                            n,
                        );
                    }
                }
                align_loss_sum += batch_align;
                align_calls += 1;
            }

            client.model = nn::apply_update(
                &client.model,
                &grad,
                &client.mask,
                cfg.learning_rate,
                cfg.gamma,
                &theta_ref,
            )?;
        }
    }

    // Weight-clustering refresh: new centroids, indices and mask.
    if cfg.mode != RunMode::DenseWire {
        let mut layers = Vec::with_capacity(client.model.layers.len());
        let mut masks = Vec::with_capacity(client.model.layers.len());
        for layer in &client.model.layers {
            let out =
                wcp::wcp_compress(layer.weight.data(), cfg.k, cfg.wcp_max_iters, cfg.wcp_tol)?;
            flops += wcp_flops(
                layer.weight.data().len() as u64,
                cfg.k as u64,
                out.iterations as u64,
            );
            masks.push(out.mask);
            layers.push(wcp::CompressedLayer::new(
                layer.weight.rows(),
                layer.weight.cols(),
                out.table,
                out.indices,
            )?);
        }
        client.compressed = Some(CompressedModel {
            client_id: client.id,
            round,
            layers,
            biases: client.model.layers.iter().map(|l| l.bias.clone()).collect(),
        });
        client.mask = PruneMask::from_layers(masks);
    }

    let acc = if client.test_idx.is_empty() {
        None
    } else {
        let (features, labels) = dataset.gather(&client.test_idx);
        Some(nn::evaluate(&client.model, &client.mask, &features, &labels)?)
    };

    let row = MetricsRow {
        round,
        client_id: client.id,
        delayed: client.is_delayed,
        acc,
        bytes_sent: 0, // filled at the send barrier
        bytes_recv,
        flops,
        align_loss: (align_calls > 0).then(|| align_loss_sum / align_calls as f64),
    };
    Ok(UpdateOutcome { state: client, row })
}

fn check_architecture(cfg: &SimConfig, model: &ModelParams, sender: u32) -> Result<()> {
    if model.dims() != cfg.arch() {
        return Err(Error::Protocol(format!(
            "client {sender} sent architecture {:?}, expected {:?}",
            model.dims(),
            cfg.arch()
        )));
    }
    Ok(())
}
