//! Interactive shared-control service speaking newline-delimited JSON.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{parse_client, ClientMsg, ConfigUpdate, Role, ServerMsg, SlicePayload, Telemetry};
pub use server::{spawn, Catalog, LoopStats, ServerConfig, ServerHandle};
pub use session::{ScenarioEntry, Session, SessionSettings, Status};
