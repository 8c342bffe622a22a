use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use protoid::encoder::EncoderHandle;
use protoid_service::{app, AppState, TOKEN_ENV};

/// Serves classification sets and operator sessions over HTTP. Set
/// PROTOID_TOKEN to require `Authorization: Bearer <token>`.
#[derive(Debug, Parser)]
#[command(name = "protoid-service", version)]
struct Args {
    #[arg(long, env = "PROTOID_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "PROTOID_PORT", default_value_t = 8080)]
    port: u16,
    /// Folder for uploaded sets and session files.
    #[arg(long, env = "PROTOID_DATA_DIR", default_value = "protoid-data")]
    data_dir: PathBuf,
    /// Checkpoint path, `pixel:N` or `external:DIM:SIZE:COMMAND`. Without
    /// one, classify answers 503.
    #[arg(long, env = "PROTOID_ENCODER")]
    encoder: Option<String>,
    /// Set files to load at startup.
    #[arg(long = "set")]
    sets: Vec<PathBuf>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    if let Err(e) = serve(args).await {
        eprintln!("protoid-service: {e}");
        std::process::exit(1);
    }
}

async fn serve(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let encoder = args.encoder.as_deref().map(EncoderHandle::from_spec).transpose()?;
    let state = AppState::open(&args.data_dir, encoder, std::env::var(TOKEN_ENV).ok())?;
    for p in &args.sets {
        let bytes = std::fs::read(p)?;
        state.add_set(&bytes).map_err(|e| format!("{}: {e:?}", p.display()))?;
    }
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("protoid-service listening on http://{addr}");
    axum::serve(listener, app(Arc::new(state))).await?;
    Ok(())
}
