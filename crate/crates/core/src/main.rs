use std::io::{stderr, stdout};

use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env(promptsmith::config::LOG_ENV).unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(stderr)
        .init();
    let env = std::env::vars().collect();
    let code = promptsmith::cli::dispatch(std::env::args_os(), env, &mut stdout().lock(), &mut stderr());
    std::process::exit(code);
}
