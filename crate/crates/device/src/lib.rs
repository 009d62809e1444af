//! Hardware-in-the-loop emulation of a domain-wall synapse.
//!
//! [`server::serve`] plays the device over newline-delimited JSON on TCP;
//! [`client::RemoteBackend`] lets the simulator's forward pass sample
//! synapses from such a server instead of in process.

pub mod client;
pub mod conformance;
pub mod protocol;
pub mod server;
pub mod trace;

pub use client::{RemoteBackend, RetryPolicy};
pub use protocol::{SynapseRequest, SynapseResponse, PROTOCOL_VERSION};
pub use server::{connection_stream, serve, LatencyModel, ServerConfig, ServerHandle, TraceConfig};
pub use trace::{detect_pinning, synthesize_kerr_trace, KerrTrace, TraceError};
