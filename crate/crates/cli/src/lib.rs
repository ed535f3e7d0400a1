//! Command-line tools and the HTTP/WebSocket render service.

pub mod artifact;
pub mod commands;
pub mod render_io;
pub mod server;
