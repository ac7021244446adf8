//! Stub tool server speaking the NDJSON tool protocol over stdio or TCP.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use tokio::net::TcpListener;

use cfagent_core::ArtifactStore;
use cfagent_runtime::stub_server::{StubHandler, STUB_TOOLS};
use cfagent_runtime::wire::{serve_connection, FaultPlan, FrameHandler, ServeExit, ServerOptions};

#[derive(Debug, Parser)]
#[command(name = "cfagent-stub", about = "Deterministic stub tool server")]
struct Args {
    /// Shared artifact directory.
    #[arg(long)]
    store: PathBuf,
    /// Tool to serve; repeat for several. Defaults to all stubs.
    #[arg(long = "tool")]
    tools: Vec<String>,
    /// Listen on this address instead of stdio.
    #[arg(long)]
    tcp: Option<String>,
    /// Close the connection instead of answering request N + 1.
    #[arg(long)]
    crash_after: Option<u64>,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Answer request N + 1 onwards with garbage.
    #[arg(long)]
    garble_after: Option<u64>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    if let Some(bad) = args.tools.iter().find(|t| !STUB_TOOLS.contains(&t.as_str())) {
        eprintln!("error: no stub named {bad}");
        std::process::exit(2);
    }
    let store = match ArtifactStore::open(&args.store) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    let handler: Arc<dyn FrameHandler> = match args.tools.as_slice() {
        [] => Arc::new(StubHandler::new(store)),
        [one] => Arc::new(StubHandler::single(store, one)),
        many => Arc::new(StubHandler::only(store, &many.iter().map(String::as_str).collect::<Vec<_>>())),
    };
    let options = ServerOptions::with_faults(FaultPlan {
        crash_after: args.crash_after,
        delay_ms: args.delay_ms,
        garble_after: args.garble_after,
    });
    let result = match &args.tcp {
        None => serve_connection(tokio::io::stdin(), tokio::io::stdout(), handler, options).await.map(|exit| {
            if exit == ServeExit::Crashed {
                std::process::exit(1);
            }
        }),
        Some(addr) => accept_loop(addr, handler, options).await,
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

async fn accept_loop(addr: &str, handler: Arc<dyn FrameHandler>, options: ServerOptions) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    println!("{}", listener.local_addr()?);
    loop {
        let (stream, _) = listener.accept().await?;
        let (reader, writer) = stream.into_split();
        let (handler, options) = (handler.clone(), options.clone());
        tokio::spawn(async move {
            let _ = serve_connection(reader, writer, handler, options).await;
        });
    }
}
