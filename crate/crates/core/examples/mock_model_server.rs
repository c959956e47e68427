//! Serves the mock models over the remote gateway protocol, so the remote
//! adapter can be tried without real networks.
//!
//! `cargo run --example mock_model_server -- 127.0.0.1:8500` then
//! `promptsmith --gateway custom --gateway-url http://127.0.0.1:8500 inject ...`

use promptsmith::gateway::mock::{mock_gateway, DEFAULT_MOCK_SEED};
use promptsmith::gateway::remote;

#[tokio::main]
async fn main() -> promptsmith::Result<()> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8500".into());
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    println!("mock model server on http://{}", listener.local_addr()?);
    axum::serve(listener, remote::router(mock_gateway(DEFAULT_MOCK_SEED))).await?;
    Ok(())
}
