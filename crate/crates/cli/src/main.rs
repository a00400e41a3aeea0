use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use osar_cli::commands::{self, Command, ServeArgs};
use osar_cli::server::{router, AppState};
use osar_cli::{exit_code, Cli};
use osar_core::pipeline::Profile;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Denoise(a) => commands::denoise(a).map(drop),
        Command::Classify(a) => commands::classify(a),
        Command::Synth(a) => commands::synth(a),
        Command::Metrics(a) => commands::metrics(a).map(drop),
        Command::Phantom(a) => commands::phantom(a),
        Command::Serve(a) => serve(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn serve(args: &ServeArgs) -> osar_core::Result<()> {
    let data_dir = std::env::var_os("OSAR_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| args.data_dir.clone());
    let config = Profile::parse(&args.profile)?.config();
    let state = AppState::new(data_dir.clone(), config, 1);
    let addr = SocketAddr::from(([0, 0, 0, 0], args.port));
    let io = |e| osar_core::Error::Io {
        path: data_dir.clone(),
        source: e,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(io)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
        log::info!("listening on {addr}, data in {}", data_dir.display());
        axum::serve(listener, router(state)).await.map_err(io)
    })
}
