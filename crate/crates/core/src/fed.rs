//! Federated rounds: local training, synthetic up/down communication, the
//! three-phase schedule, and the raw-update baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, CodecError, SyntheticDataset, DEGENERATE_NORM};
use crate::data::Dataset;
use crate::ledger::{fedavg_payload_scalars, Ledger, LedgerError, MetricsSink, Mode, PayloadSpec, RoundRecord};
use crate::models::{accuracy, minibatch_gradient, MlpSpec, ModelError, ParamVector};
use crate::optim::{sgd_step, AdamConfig, OptimError, SgdConfig};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },
    #[error("round {round}: client {client} diverged from the server (max abs diff {diff:e})")]
    SyncViolation { round: usize, client: usize, diff: f64 },
    #[error("round {round}: client {client}: {source}")]
    ClientCodec {
        round: usize,
        client: usize,
        source: CodecError,
    },
    #[error("round {round}: server: {source}")]
    ServerCodec { round: usize, source: CodecError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// How many minibatches a client trains on per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synfreq {
    Minibatches(usize),
    /// One pass over the shard: `ceil(shard / batch_size)` minibatches.
    Epoch,
}

impl Synfreq {
    pub fn steps(self, shard_len: usize, batch_size: usize) -> usize {
        match self {
            Synfreq::Minibatches(n) => n,
            Synfreq::Epoch => shard_len.div_ceil(batch_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub num_clients: usize,
    pub synfreq: Synfreq,
    pub nimgs: usize,
    /// Server-side payload size; `None` reuses `nimgs`.
    pub down_nimgs: Option<usize>,
    pub switch1: usize,
    pub switch2: usize,
    pub max_rounds: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: Mode,
    /// Count the down leg once per client instead of once per broadcast.
    pub broadcast_per_client: bool,
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidConfig(m));
        if self.num_clients == 0 {
            return bad("num_clients must be >= 1".into());
        }
        if self.mode == Mode::SingleDevice && self.num_clients != 1 {
            return bad(format!("single_device needs num_clients = 1, got {}", self.num_clients));
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be >= 1".into());
        }
        if !(0 < self.switch1 && self.switch1 <= self.switch2 && self.switch2 <= self.max_rounds) {
            return bad(format!(
                "need 0 < switch1 <= switch2 <= max_rounds, got {} / {} / {}",
                self.switch1, self.switch2, self.max_rounds
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.synfreq == Synfreq::Minibatches(0) {
            return bad("synfreq must be >= 1".into());
        }
        if self.nimgs == 0 || self.down_nimgs == Some(0) {
            return bad("nimgs must be >= 1".into());
        }
        self.sgd.validate()?;
        self.adam.validate()?;
        Ok(())
    }

    pub fn down_nimgs(&self) -> usize {
        self.down_nimgs.unwrap_or(self.nimgs)
    }
}

/// How a round's transmitted update is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepScale {
    Scaled(f64),
    /// Raw updates are exchanged instead of payloads.
    FullUpdate,
}

pub fn phase_of(round: usize, cfg: &FedConfig) -> u8 {
    if round < cfg.switch1 {
        1
    } else if round < cfg.switch2 {
        2
    } else {
        3
    }
}

pub fn phase_multiplier(round: usize, r_loss_final: f64, cfg: &FedConfig) -> StepScale {
    match phase_of(round, cfg) {
        1 => StepScale::Scaled(1.0),
        2 => StepScale::Scaled((1.0 - r_loss_final).clamp(0.0, 1.0)),
        _ => StepScale::FullUpdate,
    }
}

// Stream tags keep the per-purpose generators apart.
pub const STREAM_BATCHES: u64 = 1;
pub const STREAM_ENCODE_UP: u64 = 2;
pub const STREAM_ENCODE_DOWN: u64 = 3;
pub const STREAM_PARTITION: u64 = 4;
pub const STREAM_ATTACK: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one `(stream, party, round)` generator; a pure function of its
/// arguments so execution order cannot change results.
pub fn derive_seed(seed: u64, stream: u64, party: u64, round: u64) -> u64 {
    [stream, party, round].iter().fold(splitmix(seed), |h, &v| splitmix(h ^ v))
}

/// Minibatch index lists (into the shard) for one client-round: the shard is
/// reshuffled at the start of every pass; the last batch of a pass may be
/// short.
pub fn minibatch_schedule(shard_len: usize, batch_size: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..shard_len).collect();
    let mut pos = shard_len;
    while out.len() < steps {
        if pos >= shard_len {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let end = (pos + batch_size).min(shard_len);
        out.push(order[pos..end].to_vec());
        pos = end;
    }
    out
}

/// Client batch seeds for `round`.
pub fn batch_seed(seed: u64, client: usize, round: usize) -> u64 {
    derive_seed(seed, STREAM_BATCHES, client as u64, round as u64)
}

/// Disjoint, class-balanced shards whose sizes differ by at most one.
pub fn iid_partition(indices: &[usize], labels: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PARTITION, 0, 0));
    let mut idx = indices.to_vec();
    idx.shuffle(&mut rng);
    idx.sort_by_key(|&i| labels[i]);
    let mut shards = vec![Vec::new(); k];
    for (j, i) in idx.into_iter().enumerate() {
        shards[j % k].push(i);
    }
    shards
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub theta: ParamVector,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta: ParamVector,
    pub round: usize,
}

/// Runs the given minibatches from `theta` and returns `theta - theta_end`.
pub fn client_local_update(
    theta: &ParamVector,
    inputs: &Tensor,
    labels: &[usize],
    batches: &[Vec<usize>],
    lr: f64,
) -> Result<ParamVector, FedError> {
    let mut cur = theta.clone();
    for b in batches {
        let x = inputs.select_rows(b);
        let y: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
        let g = minibatch_gradient(&cur, &x, &y)?;
        cur = sgd_step(&cur, &g, lr)?;
    }
    Ok(theta.sub(&cur)?)
}

/// Element-wise mean, summed in list order.
pub fn aggregate(updates: &[ParamVector]) -> Result<ParamVector, FedError> {
    Ok(ParamVector::mean(updates)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// A client's local training produced no change; it sent nothing.
    ZeroClientUpdate { round: usize, client: usize },
    /// The aggregate vanished; the down leg was skipped.
    ZeroAggregate { round: usize },
    /// Layers with a vanished synthetic gradient, set to ratio 0.
    DeadLayers {
        round: usize,
        party: String,
        layers: Vec<usize>,
    },
}

/// Client-side outcome of one up leg.
enum Upload {
    Payload(SyntheticDataset),
    Raw(ParamVector),
    Nothing,
}

pub struct Federation {
    cfg: FedConfig,
    spec: MlpSpec,
    server: ServerState,
    clients: Vec<ClientState>,
    test_inputs: Tensor,
    test_labels: Vec<usize>,
    ledger: Ledger,
    events: Vec<Event>,
}

impl Federation {
    pub fn new(cfg: FedConfig, spec: MlpSpec, data: &Dataset) -> Result<Self, FedError> {
        cfg.validate()?;
        if spec.input_dim() != data.input_dim() || spec.num_classes() != data.num_classes {
            return Err(FedError::InvalidConfig(format!(
                "model maps {} -> {} but data has {} features and {} classes",
                spec.input_dim(),
                spec.num_classes(),
                data.input_dim(),
                data.num_classes
            )));
        }
        let theta = spec.init();
        let shards = iid_partition(&data.train, &data.labels, cfg.num_clients, cfg.seed);
        let mut clients = Vec::with_capacity(cfg.num_clients);
        for (id, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(FedError::EmptyShard { client: id });
            }
            let (inputs, labels) = data.subset(shard);
            clients.push(ClientState {
                id,
                inputs,
                labels,
                theta: theta.clone(),
            });
        }
        let (test_inputs, test_labels) = data.test_split();
        Ok(Self {
            cfg,
            spec,
            server: ServerState { theta, round: 0 },
            clients,
            test_inputs,
            test_labels,
            ledger: Ledger::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn test_accuracy(&self) -> Result<f64, FedError> {
        Ok(accuracy(&self.server.theta, &self.test_inputs, &self.test_labels)?)
    }

    fn payload_spec(&self) -> PayloadSpec {
        PayloadSpec {
            nimgs: self.cfg.nimgs,
            input_dim: self.spec.input_dim(),
            class_count: self.spec.num_classes(),
            layer_count: self.spec.num_layers(),
            param_count: self.spec.param_count(),
        }
    }

    fn down_copies(&self) -> u64 {
        if self.cfg.broadcast_per_client {
            self.clients.len() as u64
        } else {
            1
        }
    }

    /// Runs every remaining round, emitting each record to `sink`.
    pub fn run<W: std::io::Write>(&mut self, mut sink: Option<&mut MetricsSink<W>>) -> Result<Vec<RoundRecord>, FedError> {
        let mut out = Vec::new();
        while self.server.round < self.cfg.max_rounds {
            let rec = self.run_round()?;
            if let Some(s) = sink.as_deref_mut() {
                s.emit(&rec)?;
            }
            out.push(rec);
        }
        Ok(out)
    }

    pub fn run_round(&mut self) -> Result<RoundRecord, FedError> {
        let round = self.server.round + 1;
        let phase = phase_of(round, &self.cfg);
        let raw = self.cfg.mode == Mode::Fedavg || phase == 3;
        let lr = self.cfg.sgd.lr_at_epoch(round);

        let mut uploads = Vec::with_capacity(self.clients.len());
        let mut r_losses = Vec::new();
        let mut up_scalars = 0u64;
        for c in &self.clients {
            let steps = self.cfg.synfreq.steps(c.labels.len(), self.cfg.batch_size);
            let batches = minibatch_schedule(
                c.labels.len(),
                self.cfg.batch_size,
                steps,
                batch_seed(self.cfg.seed, c.id, round),
            );
            let u_real = client_local_update(&c.theta, &c.inputs, &c.labels, &batches, lr)?;
            if raw {
                up_scalars += fedavg_payload_scalars(&self.payload_spec());
                uploads.push(Upload::Raw(u_real));
                continue;
            }
            if u_real.l2_norm() < DEGENERATE_NORM {
                self.events.push(Event::ZeroClientUpdate { round, client: c.id });
                uploads.push(Upload::Nothing);
                continue;
            }
            let seed = derive_seed(self.cfg.seed, STREAM_ENCODE_UP, c.id as u64, round as u64);
            let (ds, report) = codec::encode(&u_real, &c.theta, self.cfg.nimgs, &self.cfg.adam, seed)
                .map_err(|source| FedError::ClientCodec {
                    round,
                    client: c.id,
                    source,
                })?;
            if !report.dead_layers.is_empty() {
                self.events.push(Event::DeadLayers {
                    round,
                    party: format!("client {}", c.id),
                    layers: report.dead_layers,
                });
            }
            up_scalars += report.payload_scalars;
            r_losses.push(ds.final_r_loss);
            uploads.push(Upload::Payload(ds));
        }

        // Server: rebuild each client's update and average in client-id order.
        let mut decoded = Vec::with_capacity(uploads.len());
        for (c, up) in self.clients.iter().zip(&uploads) {
            decoded.push(match up {
                Upload::Raw(u) => u.clone(),
                Upload::Nothing => self.spec.zeros(),
                Upload::Payload(ds) => self.receive(round, ds).map_err(|source| FedError::ClientCodec {
                    round,
                    client: c.id,
                    source,
                })?,
            });
        }
        let u_serv = aggregate(&decoded)?;

        let mut down_scalars = 0u64;
        if raw {
            down_scalars = fedavg_payload_scalars(&self.payload_spec()) * self.down_copies();
            self.server.theta = self.server.theta.sub(&u_serv)?;
            for c in &mut self.clients {
                c.theta = c.theta.sub(&u_serv)?;
            }
        } else if u_serv.l2_norm() < DEGENERATE_NORM {
            self.events.push(Event::ZeroAggregate { round });
        } else if self.cfg.mode == Mode::SingleDevice {
            // The only party resets itself to the decoded trajectory.
            self.server.theta = self.server.theta.sub(&u_serv)?;
            for c in &mut self.clients {
                c.theta = c.theta.sub(&u_serv)?;
            }
        } else {
            let seed = derive_seed(self.cfg.seed, STREAM_ENCODE_DOWN, 0, round as u64);
            let server_err = |source| FedError::ServerCodec { round, source };
            let (ds, report) = codec::encode(&u_serv, &self.server.theta, self.cfg.down_nimgs(), &self.cfg.adam, seed)
                .map_err(server_err)?;
            if !report.dead_layers.is_empty() {
                self.events.push(Event::DeadLayers {
                    round,
                    party: "server".into(),
                    layers: report.dead_layers,
                });
            }
            down_scalars = report.payload_scalars * self.down_copies();
            let step = self.receive(round, &ds).map_err(server_err)?;
            self.server.theta = self.server.theta.sub(&step)?;
            for i in 0..self.clients.len() {
                let step = self.receive_at(round, &self.clients[i].theta, &ds).map_err(server_err)?;
                let c = &mut self.clients[i];
                c.theta = c.theta.sub(&step)?;
            }
        }

        for c in &self.clients {
            let diff = c.theta.max_abs_diff(&self.server.theta)?;
            if diff != 0.0 {
                return Err(FedError::SyncViolation {
                    round,
                    client: c.id,
                    diff,
                });
            }
        }
        self.server.round = round;

        let mean_r_loss = if r_losses.is_empty() {
            0.0
        } else {
            r_losses.iter().sum::<f64>() / r_losses.len() as f64
        };
        let acc = self.test_accuracy()?;
        Ok(self
            .ledger
            .close_round(round, phase, self.cfg.mode, acc, mean_r_loss, up_scalars, down_scalars))
    }

    fn receive(&self, round: usize, ds: &SyntheticDataset) -> Result<ParamVector, CodecError> {
        self.receive_at(round, &self.server.theta, ds)
    }

    /// Decodes `ds` against `theta` and applies the phase multiplier.
    fn receive_at(&self, round: usize, theta: &ParamVector, ds: &SyntheticDataset) -> Result<ParamVector, CodecError> {
        let u = codec::decode(theta, ds)?;
        Ok(match phase_multiplier(round, ds.final_r_loss, &self.cfg) {
            StepScale::Scaled(m) if m == 1.0 => u,
            StepScale::Scaled(m) => u.scale(m),
            StepScale::FullUpdate => u,
        })
    }
}
