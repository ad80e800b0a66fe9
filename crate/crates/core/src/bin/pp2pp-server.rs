use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use pp2pp::api::{self, ApiConfig, ServerConfig, Services};
use pp2pp::bench::{self, Mode};
use pp2pp::clock::SystemClock;
use pp2pp::ledger::LedgerConfig;
use pp2pp::rp::RpConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "pp2pp-server", version, about = "PP2PP relying party and ledger server")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Directory for records, blobs, ledger, audit log and keys.
    #[arg(long, env = "PP2PP_DATA_DIR", conflicts_with = "in_memory")]
    data_dir: Option<PathBuf>,
    /// Keep all state in memory (lost on exit).
    #[arg(long)]
    in_memory: bool,
    /// 48-byte server key file; defaults to `<data-dir>/keys.bin`.
    #[arg(long, env = "PP2PP_KEYFILE")]
    keyfile: Option<PathBuf>,
    #[arg(long, default_value = pp2pp::rp::DEFAULT_RP_ID)]
    rp_id: String,
    /// Public origin used in one-time links and LINK tokens.
    #[arg(long)]
    base_url: Option<String>,
    /// Usernames holding the bank role (repeatable).
    #[arg(long = "bank-user", default_values_t = vec!["bank".to_owned()])]
    bank_users: Vec<String>,
    #[arg(long)]
    allow_bank_enrollment: bool,
    #[arg(long)]
    no_rate_limit: bool,
    /// Take the client address from this header (only behind a proxy you trust).
    #[arg(long)]
    trusted_proxy_header: Option<String>,
    #[arg(long)]
    secure_cookies: bool,
    /// Run a timing benchmark against a throwaway in-memory server and exit.
    #[arg(long, value_name = "register|auth")]
    bench: Option<Mode>,
    #[arg(long, short = 'n', default_value_t = 5)]
    n: usize,
    /// Also write the benchmark rows as CSV.
    #[arg(long, requires = "bench")]
    csv: Option<PathBuf>,
}

fn config(a: &Args) -> ServerConfig {
    let base_url = a.base_url.clone().unwrap_or_else(|| format!("https://{}", a.rp_id));
    ServerConfig {
        data_dir: if a.in_memory { None } else { a.data_dir.clone() },
        keyfile: a.keyfile.clone(),
        rp: RpConfig {
            rp_id: a.rp_id.clone(),
            base_url: base_url.clone(),
            ..RpConfig::default()
        },
        ledger: LedgerConfig {
            bank_users: a.bank_users.iter().cloned().collect(),
            base_url,
            ..LedgerConfig::default()
        },
        api: ApiConfig {
            rate_limits: (!a.no_rate_limit).then(Default::default),
            trusted_proxy_header: a.trusted_proxy_header.clone(),
            secure_cookies: a.secure_cookies,
            allow_bank_enrollment: a.allow_bank_enrollment,
            ..ApiConfig::default()
        },
    }
}

fn run_bench(a: &Args, mode: Mode) -> Result<(), String> {
    let mut cfg = config(a);
    cfg.data_dir = None;
    cfg.keyfile = None;
    cfg.api.rate_limits = None;
    let server = api::spawn(&cfg, "127.0.0.1:0".parse().unwrap(), Arc::new(SystemClock))
        .map_err(|e| e.to_string())?;
    let rows = bench::run(&server.base_url(), mode, a.n).map_err(|e| e.to_string())?;
    print!("{}", bench::render_table(mode, &rows));
    if let Some(path) = &a.csv {
        std::fs::write(path, bench::render_csv(mode, &rows)).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    server.shutdown().map_err(|e| e.to_string())
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
}

fn main() -> ExitCode {
    let args = Args::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    if let Some(mode) = args.bench {
        return match run_bench(&args, mode) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("bench failed: {e}");
                ExitCode::from(2)
            }
        };
    }

    if args.data_dir.is_none() && !args.in_memory {
        eprintln!("either --data-dir or --in-memory is required");
        return ExitCode::from(2);
    }
    let cfg = config(&args);
    let services = match Services::open(&cfg, Arc::new(SystemClock)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("startup failed: {e}");
            return ExitCode::from(2);
        }
    };
    let st = api::state(services, cfg.api.clone());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let r = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.listen).await?;
        let addr = listener.local_addr()?;
        tracing::info!(%addr, rp_id = %cfg.rp.rp_id, "listening");
        println!("listening on http://{addr}");
        api::serve(listener, st, shutdown_signal()).await
    });
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("server error: {e}");
            ExitCode::from(2)
        }
    }
}
