use std::sync::Arc;

use rand::seq::index;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::{train_adapters, AdapterSet, Backbone, LossKind, LoraModel, Schedule};
use crate::rng::RandomSource;

/// What a client sends back: its sample count and the change it made to each
/// proxy matrix. No data and no trained weights leave the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub sample_count: usize,
    pub deltas: AdapterSet,
}

/// Fine-tunes the received proxy adapters on the client's shard and returns
/// `trained − proxy` for every matrix.
pub fn client_round(
    client_id: usize,
    shard: &Dataset,
    proxies: &AdapterSet,
    backbone: &Arc<Backbone>,
    kind: LossKind,
    schedule: Schedule,
    rng: &RandomSource,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument(format!("client {client_id} has no data")));
    }
    let model = LoraModel::new(Arc::clone(backbone), proxies.clone())?;
    let trained = train_adapters(
        &model,
        shard.features(),
        shard.targets(),
        kind,
        schedule,
        rng,
    )?;
    Ok(ClientUpdate {
        client_id,
        sample_count: shard.len(),
        deltas: trained.sub(proxies)?,
    })
}

/// `participants` distinct ids out of `0..clients`, uniformly, ascending.
/// The stream is derived from `rng` and the round so any round can be
/// replayed on its own.
pub fn sample_clients(
    clients: usize,
    participants: usize,
    round: usize,
    rng: &RandomSource,
) -> Result<Vec<usize>> {
    if participants == 0 || participants > clients {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {participants} of {clients} clients"
        )));
    }
    if participants == clients {
        return Ok((0..clients).collect());
    }
    let mut stream = rng.derive(format!("sample-{round}"));
    let mut ids = index::sample(&mut stream, clients, participants).into_vec();
    ids.sort_unstable();
    Ok(ids)
}
