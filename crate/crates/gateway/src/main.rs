use std::io::IsTerminal;

use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .init();
    let code = cfagent_gateway::cli::main_with(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
