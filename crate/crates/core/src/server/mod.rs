//! Control server: client channels, the control machine, frame assembly and
//! FITS recording.

pub mod fits;
pub mod fsm;
pub mod line;
pub mod setup;
pub mod assembly;
pub mod config;
pub mod link;
pub mod channels;
pub mod devices;
pub mod gateway;
pub mod http;
pub mod core;

pub use self::core::{Server, ServerError};
pub use config::ServerConfig;
