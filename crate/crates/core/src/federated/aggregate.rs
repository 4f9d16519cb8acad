use rand::seq::index::sample;

use super::wire::ClientUpdate;
use crate::error::{Error, Result};
use crate::model::SpeakerId;
use crate::rng::Rng;
use crate::tensor::{ParamSet, ParamTag};

/// Server-side state: the shared parameters and the round counter.
#[derive(Clone, Debug)]
pub struct ServerState {
    global: ParamSet,
    round: usize,
}

impl ServerState {
    /// Rejects any private tensor: the server never stores one.
    pub fn new(global: ParamSet) -> Result<Self> {
        if let Some(t) = global.iter().find(|t| t.tag != ParamTag::Federated) {
            return Err(Error::Schema(format!("server may not hold private tensor {:?}", t.name)));
        }
        Ok(ServerState { global, round: 0 })
    }

    pub fn params(&self) -> &ParamSet {
        &self.global
    }

    pub fn into_params(self) -> ParamSet {
        self.global
    }

    pub fn round(&self) -> usize {
        self.round
    }
}

/// `w ← w + Σ c_i·d_i / Σ c_i`. Updates are applied in client-id order so
/// the result does not depend on the order of `updates`.
pub fn aggregate_fedavg(server: &mut ServerState, updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates to aggregate".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id());
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id() == w[1].client_id()) {
        return Err(Error::Aggregation(format!("duplicate update from client {}", w[0].client_id().0)));
    }
    for u in &sorted {
        server
            .global
            .check_schema(u.delta())
            .map_err(|e| Error::Schema(format!("update from client {}: {e}", u.client_id().0)))?;
    }
    let total: u64 = sorted.iter().map(|u| u.sample_count()).sum();
    if total == 0 {
        return Err(Error::Aggregation("updates carry zero samples in total".into()));
    }
    let total = total as f64;
    for t in server.global.iter_mut() {
        let mut acc = vec![0.0; t.value.len()];
        for u in &sorted {
            let c = u.sample_count() as f64;
            let d = u.delta().value(&t.name)?;
            for (a, x) in acc.iter_mut().zip(d.data()) {
                *a += c * x;
            }
        }
        for (w, a) in t.value.data_mut().iter_mut().zip(&acc) {
            *w += a / total;
        }
    }
    server.round += 1;
    Ok(())
}

/// Number of updates kept out of `n` when dropping `drop_fraction`.
pub fn feddrop_keep(n: usize, drop_fraction: f64) -> usize {
    // tolerance so that e.g. 0.9·10 counts as 9, not 10
    (((1.0 - drop_fraction) * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps a uniform random subset of `⌈(1−drop)·n⌉` updates and averages
/// those. Returns the surviving client ids in ascending order.
pub fn aggregate_feddrop(
    server: &mut ServerState,
    updates: &[ClientUpdate],
    drop_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<SpeakerId>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop_fraction must lie in [0, 1), got {drop_fraction}")));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id());
    let keep = feddrop_keep(sorted.len(), drop_fraction);
    if keep == 0 {
        return Err(Error::Aggregation("every client update was dropped".into()));
    }
    let mut idx = sample(rng, sorted.len(), keep).into_vec();
    idx.sort_unstable();
    let survivors: Vec<ClientUpdate> = idx.into_iter().map(|i| sorted[i].clone()).collect();
    aggregate_fedavg(server, &survivors)?;
    Ok(survivors.iter().map(|u| u.client_id()).collect())
}
