//! Start the HTTP service on a local port.
//!
//! `cargo run --release --example serve -- [bind]`

use mvseg::service::{serve, ServiceConfig};

#[tokio::main]
async fn main() -> mvseg::Result<()> {
    let mut config = ServiceConfig::default();
    if let Some(bind) = std::env::args().nth(1) {
        config.bind = bind;
    }
    println!("listening on http://{}", config.bind);
    serve(config).await
}
