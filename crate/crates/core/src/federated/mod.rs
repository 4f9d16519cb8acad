//! Simulated federated fine-tuning. Shared tensors are averaged by the
//! server each round; each client's persona row never leaves the client.
//! Client deltas cross the client/server boundary as serialized bytes.

mod aggregate;
mod client;
mod sim;
mod wire;

pub use aggregate::{aggregate_fedavg, aggregate_feddrop, feddrop_keep, ServerState};
pub use client::{
    assemble_model, init_clients, init_persona_row, local_train, ClientData, ClientState, FedConfig, Strategy,
};
pub use sim::{lift_pretrained, run_round, run_simulation, ClientRoundStats, RoundOutcome, RoundRecord, Simulation};
pub use wire::{contains_any_name, ClientUpdate, UPDATE_FORMAT_VERSION};

#[cfg(test)]
mod tests;
