//! Server broadcast, client training, aggregation and the round loop.

mod aggregate;
mod client;
mod run;
mod server;

pub use aggregate::{aggregate, Weighting};
pub use client::{client_round, sample_clients, ClientUpdate};
pub use run::{
    prepare, run_training, Federation, RoundEvent, RoundReport, RunOptions, RunOutcome, Setup,
};
pub use server::{BitWidth, Broadcast, Payload, Quantization, ServerState};
