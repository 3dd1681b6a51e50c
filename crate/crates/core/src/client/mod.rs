//! Symbolic client: the batch macro language, its executor and an
//! interactive session.

pub mod exec;
pub mod script;

pub use exec::{execute, repl, Connection, ExecOptions, ExitStatus, Executor, Outcome, ServerConnection, Value};
pub use script::{parse_script, pretty, Diagnostic, Script};
