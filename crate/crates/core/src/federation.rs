//! Client/server round protocol with exact wire accounting.
//!
//! A round: sample participants, resynchronize any stale participant,
//! train all adapter matrices locally, upload (per strategy), aggregate in
//! ascending client order, then send the new global state back to the
//! participants. The "wire" is the adapter container without digest
//! trailer, so every message size is exact and reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{shared_from_container, MMAStack, WIRE_HEADER_BYTES};
use crate::backbone::BackboneBundle;
use crate::container::{Container, Kind};
use crate::error::{Error, Result};
use crate::rng::{tag, CtrRng};
use crate::tensorcore::Tensor;
use crate::trainer::{local_train, FewShotSet, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Upload and average only the shared projections.
    SharedOnly,
    /// Upload and average all five matrices of every block.
    FullAdapterAvg,
    /// No communication at all.
    LocalOnly,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::SharedOnly => "shared_only",
            Strategy::FullAdapterAvg => "full_adapter_avg",
            Strategy::LocalOnly => "local_only",
        }
    }
}

/// How uploads are weighted during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1 / participants`.
    #[default]
    Uniform,
    /// Proportional to each participant's few-shot set size.
    DataSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub round: u64,
    pub direction: Direction,
    pub client: usize,
    pub payload: Vec<u8>,
    /// Always `payload.len()`.
    pub byte_count: usize,
}

impl RoundMessage {
    fn new(round: u64, direction: Direction, client: usize, payload: Vec<u8>) -> Self {
        let byte_count = payload.len();
        Self { round, direction, client, payload, byte_count }
    }

    /// Bytes carrying matrix values (everything after the fixed header and metadata).
    pub fn value_bytes(&self) -> usize {
        self.byte_count - WIRE_HEADER_BYTES
    }

    pub fn record(&self) -> CommRecord {
        CommRecord { round: self.round, direction: self.direction, client: self.client, bytes: self.byte_count }
    }
}

/// One row of the communication log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: u64,
    pub direction: Direction,
    pub client: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub stack: MMAStack,
    pub shard: FewShotSet,
    pub train_cfg: TrainConfig,
    pub last_participation_round: Option<u64>,
    /// Server version this client last received; `None` before the first broadcast.
    pub synced_version: Option<u64>,
}

impl ClientState {
    pub fn new(id: usize, stack: MMAStack, shard: FewShotSet, train_cfg: TrainConfig) -> Self {
        Self { id, stack, shard, train_cfg, last_participation_round: None, synced_version: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Global adapters. Under `SharedOnly` only the shared projections are
    /// meaningful; under `FullAdapterAvg` every matrix is.
    pub global: MMAStack,
    pub round: u64,
    /// Bumped whenever the global state changes.
    pub version: u64,
    pub strategy: Strategy,
    pub participation: f64,
    pub weighting: Weighting,
    pub seed: u64,
}

impl ServerState {
    pub fn new(global: MMAStack, strategy: Strategy, participation: f64, seed: u64) -> Result<Self> {
        check_fraction(participation)?;
        Ok(Self { global, round: 0, version: 0, strategy, participation, weighting: Weighting::Uniform, seed })
    }

    pub fn global_shared(&self) -> Vec<Tensor> {
        self.global.shared()
    }
}

fn check_fraction(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("participation fraction must lie in (0, 1], got {q}")))
    }
}

/// `ceil(q N)` distinct ids from stream `(seed, [PARTICIPANTS, round])`, ascending.
pub fn sample_participants(n: usize, q: f64, round: u64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Contract("cannot sample participants from zero clients".into()));
    }
    check_fraction(q)?;
    // guard against products like 0.3 * 10 = 3.0000000000000004
    let k = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    if k == n {
        return Ok((0..n).collect());
    }
    Ok(CtrRng::for_stream(seed, &[tag::PARTICIPANTS, round]).sample_indices(n, k))
}

/// Elementwise uniform mean, accumulated in the given (ascending client) order.
pub fn aggregate_shared(uploads: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    aggregate_weighted(uploads, &vec![1.0; uploads.len()])
}

/// `sum_i w_i U_i / sum_i w_i`, accumulated in order.
pub fn aggregate_weighted(uploads: &[Vec<Tensor>], weights: &[f64]) -> Result<Vec<Tensor>> {
    let first = uploads.first().ok_or_else(|| Error::Protocol("aggregation needs at least one upload".into()))?;
    if weights.len() != uploads.len() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Protocol("one positive weight per upload is required".into()));
    }
    for u in uploads {
        if u.len() != first.len() || u.iter().zip(first).any(|(a, b)| !a.same_shape(b)) {
            return Err(Error::Protocol("uploads have inconsistent shapes".into()));
        }
    }
    let uniform = weights.iter().all(|&w| w == 1.0);
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(first.len());
    for m in 0..first.len() {
        let mut acc = Tensor::zeros(first[m].rows(), first[m].cols());
        for (u, &w) in uploads.iter().zip(weights) {
            for (a, &x) in acc.values_mut().iter_mut().zip(u[m].values()) {
                *a += if uniform { x } else { w * x };
            }
        }
        acc.values_mut().iter_mut().for_each(|a| *a /= total);
        out.push(acc);
    }
    Ok(out)
}

fn decode(payload: &[u8]) -> Result<Container> {
    Container::decode(payload).map_err(|e| Error::Protocol(format!("undecodable payload: {e}")))
}

/// Applies a downlink payload to a client stack; local matrices are only
/// touched by full-adapter payloads.
fn apply_downlink(stack: &mut MMAStack, payload: &[u8]) -> Result<()> {
    let c = decode(payload)?;
    match c.kind {
        Kind::AdapterShared => {
            let (first, last, mats) = shared_from_container(&c)?;
            if (first, last) != (stack.first_block(), stack.last_block()) {
                return Err(Error::Protocol("shared payload covers different blocks".into()));
            }
            stack.set_shared(&mats)
        }
        Kind::AdapterFull => {
            let global = MMAStack::from_container(&c)?;
            if (global.d, global.r, global.first_block(), global.last_block())
                != (stack.d, stack.r, stack.first_block(), stack.last_block())
            {
                return Err(Error::Protocol("adapter payload has different dimensions".into()));
            }
            *stack = global;
            Ok(())
        }
        other => Err(Error::Protocol(format!("unexpected payload kind {other:?}"))),
    }
}

fn downlink_payload(server: &ServerState) -> Option<Vec<u8>> {
    match server.strategy {
        Strategy::SharedOnly => Some(server.global.shared_container().encode(false)),
        Strategy::FullAdapterAvg => Some(server.global.to_container().encode(false)),
        Strategy::LocalOnly => None,
    }
}

/// Overwrites the shared projections of the listed clients with copies of
/// the server's, one downlink message each.
pub fn broadcast_shared(server: &ServerState, clients: &mut [ClientState], ids: &[usize]) -> Result<Vec<RoundMessage>> {
    let payload = server.global.shared_container().encode(false);
    send(server, clients, ids, &payload)
}

fn send(server: &ServerState, clients: &mut [ClientState], ids: &[usize], payload: &[u8]) -> Result<Vec<RoundMessage>> {
    let mut out = Vec::with_capacity(ids.len());
    let len = clients.len();
    for &id in ids {
        let c = clients.get_mut(id).ok_or(Error::Index { what: "client", index: id, len })?;
        apply_downlink(&mut c.stack, payload)?;
        c.synced_version = Some(server.version);
        out.push(RoundMessage::new(server.round, Direction::Down, id, payload.to_vec()));
    }
    Ok(out)
}

/// Strategy-dependent broadcast; `LocalOnly` sends nothing.
pub fn broadcast(server: &ServerState, clients: &mut [ClientState], ids: &[usize]) -> Result<Vec<RoundMessage>> {
    match downlink_payload(server) {
        Some(p) => send(server, clients, ids, &p),
        None => Ok(Vec::new()),
    }
}

fn uplink_payload(strategy: Strategy, stack: &MMAStack) -> Option<Vec<u8>> {
    match strategy {
        Strategy::SharedOnly => Some(stack.shared_container().encode(false)),
        Strategy::FullAdapterAvg => Some(stack.to_container().encode(false)),
        Strategy::LocalOnly => None,
    }
}

/// Result of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Index of the round that ran (the server counter before the round).
    pub round: u64,
    pub participants: Vec<usize>,
    pub messages: Vec<RoundMessage>,
    /// Per participant, its epoch-loss trace.
    pub losses: Vec<(usize, Vec<f64>)>,
    /// Data-weighted last-epoch loss over participants.
    pub objective: f64,
}

impl RoundOutcome {
    pub fn bytes(&self, direction: Direction) -> usize {
        self.messages.iter().filter(|m| m.direction == direction).map(|m| m.byte_count).sum()
    }
}

/// Runs one round. All work happens on copies; the server and clients are
/// only updated once every participant has succeeded. `parallel` trains
/// participants on the rayon pool; results do not depend on it.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    backbone: &BackboneBundle,
    parallel: bool,
) -> Result<RoundOutcome> {
    if !backbone.is_frozen() {
        return Err(Error::State("federated rounds require a frozen backbone".into()));
    }
    let t = server.round;
    let participants = sample_participants(clients.len(), server.participation, t, server.seed)?;
    let mut next_server = server.clone();
    let mut staged: Vec<ClientState> = participants.iter().map(|&i| clients[i].clone()).collect();
    let mut messages = Vec::new();

    // resynchronize participants that missed earlier updates
    if let Some(p) = downlink_payload(server) {
        for c in staged.iter_mut().filter(|c| c.synced_version != Some(server.version)) {
            apply_downlink(&mut c.stack, &p)?;
            c.synced_version = Some(server.version);
            messages.push(RoundMessage::new(t, Direction::Down, c.id, p.clone()));
        }
    }

    let train = |c: &ClientState| local_train(backbone, &c.stack, &c.shard, &c.train_cfg, t);
    let results: Vec<Result<(MMAStack, Vec<f64>)>> =
        if parallel { staged.par_iter().map(train).collect() } else { staged.iter().map(train).collect() };
    let mut losses = Vec::with_capacity(staged.len());
    for (c, r) in staged.iter_mut().zip(results) {
        let (stack, trace) = r?;
        c.stack = stack;
        c.last_participation_round = Some(t);
        losses.push((c.id, trace));
    }

    let mut uploads = Vec::new();
    let mut weights = Vec::new();
    for c in &staged {
        if let Some(p) = uplink_payload(server.strategy, &c.stack) {
            let msg = RoundMessage::new(t, Direction::Up, c.id, p);
            let received = decode(&msg.payload)?;
            uploads.push(received);
            weights.push(match server.weighting {
                Weighting::Uniform => 1.0,
                Weighting::DataSize => c.shard.len() as f64,
            });
            messages.push(msg);
        }
    }
    if !uploads.is_empty() {
        match server.strategy {
            Strategy::SharedOnly => {
                let mats = uploads.iter().map(|c| shared_from_container(c).map(|(_, _, m)| m)).collect::<Result<Vec<_>>>()?;
                let mean = aggregate_weighted(&mats, &weights)?;
                next_server.global.set_shared(&mean)?;
            }
            Strategy::FullAdapterAvg => {
                let stacks = uploads.iter().map(MMAStack::from_container).collect::<Result<Vec<_>>>()?;
                let flat: Vec<Vec<Tensor>> = stacks.iter().map(flatten).collect();
                let mean = aggregate_weighted(&flat, &weights)?;
                unflatten(&mut next_server.global, &mean);
            }
            Strategy::LocalOnly => unreachable!("local-only clients never upload"),
        }
        next_server.version += 1;
        let ids: Vec<usize> = (0..staged.len()).collect();
        if let Some(p) = downlink_payload(&next_server) {
            for &i in &ids {
                apply_downlink(&mut staged[i].stack, &p)?;
                staged[i].synced_version = Some(next_server.version);
                messages.push(RoundMessage::new(t, Direction::Down, staged[i].id, p.clone()));
            }
        }
    }

    let total_n: usize = staged.iter().map(|c| c.shard.len()).sum();
    let objective = staged
        .iter()
        .zip(&losses)
        .map(|(c, (_, tr))| tr.last().copied().unwrap_or(f64::NAN) * c.shard.len() as f64 / total_n.max(1) as f64)
        .sum();

    next_server.round = t + 1;
    *server = next_server;
    for c in staged {
        let id = c.id;
        clients[id] = c;
    }
    Ok(RoundOutcome { round: t, participants, messages, losses, objective })
}

fn flatten(s: &MMAStack) -> Vec<Tensor> {
    s.blocks.iter().flat_map(|b| crate::adapter::Matrix::ALL.map(|m| b.matrix(m).clone())).collect()
}

fn unflatten(s: &mut MMAStack, mats: &[Tensor]) {
    let mut it = mats.iter();
    for b in &mut s.blocks {
        for m in crate::adapter::Matrix::ALL {
            *b.matrix_mut(m) = it.next().expect("one matrix per slot").clone();
        }
    }
}

/// Sends the current global state to every client once (nothing under `LocalOnly`).
pub fn final_sync(server: &ServerState, clients: &mut [ClientState]) -> Result<Vec<RoundMessage>> {
    let ids: Vec<usize> = (0..clients.len()).collect();
    broadcast(server, clients, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn participant_counts() {
        assert_eq!(sample_participants(5, 1.0, 3, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        let p = sample_participants(100, 0.1, 2, 9).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p, sample_participants(100, 0.1, 2, 9).unwrap());
        assert_eq!(sample_participants(10, 0.3, 0, 0).unwrap().len(), 3);
        assert!(matches!(sample_participants(0, 0.5, 0, 0), Err(Error::Contract(_))));
        assert!(sample_participants(4, 0.0, 0, 0).is_err());
    }

    #[test]
    fn aggregation_identities() {
        let w = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 3.0]]).unwrap();
        assert!(aggregate_shared(&[vec![w.clone()]]).unwrap()[0].bit_eq(&w));
        let z = aggregate_shared(&[vec![w.clone()], vec![w.scale(-1.0)]]).unwrap();
        assert!(z[0].values().iter().all(|&x| x == 0.0));
        assert!(matches!(aggregate_shared(&[]), Err(Error::Protocol(_))));
        let bad = aggregate_shared(&[vec![w.clone()], vec![Tensor::zeros(1, 2)]]);
        assert!(matches!(bad, Err(Error::Protocol(_))));
    }
}
