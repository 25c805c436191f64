//! REST server, remote executor and deployment helpers behind `tfctl`.

pub mod deploy;
pub mod remote;
pub mod server;
