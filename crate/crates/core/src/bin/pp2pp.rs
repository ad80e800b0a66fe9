use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use pp2pp::attack::{self, Attack, Env, Victim};
use pp2pp::authenticator::{Card, CardError};
use pp2pp::client::{Client, ClientError};
use pp2pp::clock::SystemClock;
use pp2pp::ledger::{self, DisputeOutcome, TokenKind, LEDGER_FILE};
use pp2pp::rp::{Outbox, OUTBOX_FILE};
use pp2pp::store::Store;

#[derive(Parser, Debug)]
#[command(name = "pp2pp", version, about = "PP2PP client with a software security key")]
struct Cli {
    #[arg(long, global = true, env = "PP2PP_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Card file (default ~/.pp2pp/card).
    #[arg(long, global = true, env = "PP2PP_CARD")]
    card: Option<PathBuf>,
    /// Card PIN; also encrypts the card file.
    #[arg(long, global = true, env = "PP2PP_PIN", hide_env_values = true)]
    pin: Option<String>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Manage the local software card.
    #[command(subcommand)]
    Card(CardCmd),
    /// Enroll the card for a new user.
    Register { username: String, email: String },
    /// Authenticate with the card and store the session.
    Login { username: String },
    /// Ask for a one-time login link by email.
    LinkRequest { email: String },
    /// Log in with a one-time link.
    LinkLogin { link: String },
    Logout,
    Balance,
    History {
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = 50)]
        limit: usize,
    },
    /// Send money directly.
    Pay { payee: String, amount: u64 },
    #[command(subcommand)]
    Token(TokenCmd),
    /// Ask `payer` for money.
    Request { payer: String, amount: u64 },
    /// Accept (or reject) a payment request addressed to you.
    Ack { txn_id: String, decision: Decision },
    Dispute { txn_id: String, reason: String },
    /// Bank only.
    Resolve { txn_id: String, outcome: DisputeOutcome },
    /// Open an account (bank: any user with a deposit; others: yourself).
    OpenAccount {
        username: String,
        #[arg(default_value_t = 0)]
        deposit: u64,
    },
    /// Run an attack scenario against a registered victim.
    Attack {
        attack: Attack,
        #[arg(long)]
        user: String,
        #[arg(long)]
        email: Option<String>,
        /// Source address for the hijacker.
        #[arg(long, default_value = "127.0.0.2")]
        from: IpAddr,
        /// The server's outbox file, for reading mailed links.
        #[arg(long)]
        outbox: Option<PathBuf>,
    },
    /// Replay the ledger in a data directory and check it offline.
    VerifyLedger {
        #[arg(long)]
        data_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum CardCmd {
    Create {
        #[arg(long)]
        force: bool,
    },
    Info,
}

#[derive(Subcommand, Debug)]
enum TokenCmd {
    Create { kind: TokenKind, amount: Option<u64> },
    /// `amount` is required for open-amount tokens.
    Redeem { token: String, amount: Option<u64> },
    Revoke { token_id: String },
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Decision {
    Accept,
    Reject,
}

#[derive(Debug)]
enum Failure {
    Rejected(String, String),
    Usage(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match &e {
            ClientError::Card(CardError::Io(_) | CardError::CorruptCardFile) => Failure::Usage(e.to_string()),
            _ if e.is_rejection() => Failure::Rejected(e.code().unwrap_or("rejected").to_owned(), e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<CardError> for Failure {
    fn from(e: CardError) -> Self {
        ClientError::Card(e).into()
    }
}

type Res<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

struct Ctx {
    server: String,
    card: PathBuf,
    pin: Option<String>,
    json: bool,
}

impl Ctx {
    fn pin(&self) -> Res<&str> {
        self.pin.as_deref().ok_or_else(|| usage("a PIN is required (--pin or PP2PP_PIN)"))
    }

    fn load_card(&self) -> Res<Card> {
        if !self.card.exists() {
            return Err(usage(format!(
                "no card at {}; run `pp2pp card create`",
                self.card.display()
            )));
        }
        Ok(Card::import(&self.card, self.pin()?)?)
    }

    fn save_card(&self, card: &Card) -> Res<()> {
        Ok(card.export(&self.card, self.pin()?)?)
    }

    fn session_path(&self) -> PathBuf {
        let mut p = self.card.clone().into_os_string();
        p.push(".session");
        PathBuf::from(p)
    }

    fn client(&self) -> Res<Client> {
        let mut c = Client::new(&self.server)?;
        if let Ok(s) = std::fs::read_to_string(self.session_path()) {
            let s = s.trim();
            if !s.is_empty() {
                c.set_session_cookie(Some(s.to_owned()));
            }
        }
        Ok(c)
    }

    fn authed(&self) -> Res<Client> {
        let c = self.client()?;
        if c.session_cookie().is_none() {
            return Err(ClientError::NoSession.into());
        }
        Ok(c)
    }

    fn save_session(&self, c: &Client) -> Res<()> {
        let path = self.session_path();
        match c.session_cookie() {
            Some(cookie) => write_private(&path, cookie.as_bytes()),
            None => match std::fs::remove_file(&path) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(usage(e.to_string())),
                _ => Ok(()),
            },
        }
    }

    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce(&T) -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
        } else {
            println!("{}", human(value));
        }
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> Res<()> {
    let io = |e: std::io::Error| usage(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path).and_then(|mut f| f.write_all(bytes)).map_err(io)
}

fn default_card() -> PathBuf {
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".pp2pp").join("card")
}

fn txn_line(v: &Value) -> String {
    format!(
        "{}  {} -> {}  {}  {}  {}",
        v["txn_id"].as_str().unwrap_or("?"),
        v["payer"].as_str().unwrap_or("?"),
        v["payee"].as_str().unwrap_or("?"),
        v["amount"],
        v["channel"].as_str().unwrap_or("?"),
        v["state"].as_str().unwrap_or("?"),
    )
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializes")
}

fn run(cli: Cli) -> Res<()> {
    let ctx = Ctx {
        server: cli.server,
        card: cli.card.unwrap_or_else(default_card),
        pin: cli.pin,
        json: cli.json,
    };
    match cli.cmd {
        Cmd::Card(CardCmd::Create { force }) => {
            if ctx.card.exists() && !force {
                return Err(usage(format!("{} exists; pass --force to replace it", ctx.card.display())));
            }
            let card = Card::new(ctx.pin()?);
            ctx.save_card(&card)?;
            let out = json!({"card_id": card.card_id(), "path": ctx.card});
            ctx.emit(&out, |_| format!("created card {} at {}", card.card_id(), ctx.card.display()));
        }
        Cmd::Card(CardCmd::Info) => {
            let card = ctx.load_card()?;
            let creds: Vec<Value> = card
                .credential_keys()
                .map(|(rp, user)| json!({"rp_id": rp, "user": String::from_utf8_lossy(user)}))
                .collect();
            let out = json!({
                "card_id": card.card_id(),
                "locked": card.is_locked(),
                "credentials": creds,
            });
            ctx.emit(&out, |o| {
                let mut s = format!("card {}{}", card.card_id(), if card.is_locked() { " (locked)" } else { "" });
                for c in o["credentials"].as_array().into_iter().flatten() {
                    s.push_str(&format!("\n  {} @ {}", c["user"].as_str().unwrap_or(""), c["rp_id"].as_str().unwrap_or("")));
                }
                s
            });
        }
        Cmd::Register { username, email } => {
            let mut card = ctx.load_card()?;
            let mut c = ctx.client()?;
            let r = c.register(&mut card, ctx.pin()?, &username, &email);
            ctx.save_card(&card)?;
            let r = r?;
            ctx.emit(&r, |r| format!("registered {} (credential {})", r.username, r.credential_id));
        }
        Cmd::Login { username } => {
            let mut card = ctx.load_card()?;
            let mut c = ctx.client()?;
            let r = c.login(&mut card, ctx.pin()?, &username);
            ctx.save_card(&card)?;
            let s = r?;
            ctx.save_session(&c)?;
            ctx.emit(&s, |s| format!("logged in as {}", s.username));
        }
        Cmd::LinkRequest { email } => {
            let s = ctx.client()?.link_issue(&email)?;
            ctx.emit(&s, |_| format!("if {email} is registered, a link is on its way"));
        }
        Cmd::LinkLogin { link } => {
            let mut c = ctx.client()?;
            let s = c.link_consume(&link)?;
            ctx.save_session(&c)?;
            ctx.emit(&s, |s| format!("logged in as {}", s.username));
        }
        Cmd::Logout => {
            let mut c = ctx.client()?;
            let r = c.logout();
            ctx.save_session(&c)?;
            let s = r?;
            ctx.emit(&s, |_| "logged out".into());
        }
        Cmd::Balance => {
            let a = ctx.authed()?.account()?;
            ctx.emit(&a, |a| format!("{}: {}", a.username, a.balance));
        }
        Cmd::History { offset, limit } => {
            let h = ctx.authed()?.history(offset, limit)?;
            ctx.emit(&h, |h| {
                if h.transactions.is_empty() {
                    return "no transactions".into();
                }
                h.transactions.iter().map(|t| txn_line(&to_value(t))).collect::<Vec<_>>().join("\n")
            });
        }
        Cmd::Pay { payee, amount } => {
            let t = ctx.authed()?.pay_direct(&payee, amount)?;
            ctx.emit(&t, |t| txn_line(&to_value(t)));
        }
        Cmd::Token(TokenCmd::Create { kind, amount }) => {
            let t = ctx.authed()?.token_create(kind, amount)?;
            ctx.emit(&t, |t| format!("{}\n{}", t.token.token_id, t.presentable));
        }
        Cmd::Token(TokenCmd::Redeem { token, amount }) => {
            let t = ctx.authed()?.token_redeem(&token, amount)?;
            ctx.emit(&t, |t| txn_line(&to_value(t)));
        }
        Cmd::Token(TokenCmd::Revoke { token_id }) => {
            let t = ctx.authed()?.token_revoke(&token_id)?;
            ctx.emit(&t, |t| format!("token {} revoked", t.token_id));
        }
        Cmd::Request { payer, amount } => {
            let t = ctx.authed()?.request(&payer, amount)?;
            ctx.emit(&t, |t| txn_line(&to_value(t)));
        }
        Cmd::Ack { txn_id, decision } => {
            let t = ctx.authed()?.acknowledge(&txn_id, decision == Decision::Accept)?;
            ctx.emit(&t, |t| txn_line(&to_value(t)));
        }
        Cmd::Dispute { txn_id, reason } => {
            let t = ctx.authed()?.dispute_open(&txn_id, &reason)?;
            ctx.emit(&t, |t| txn_line(&to_value(t)));
        }
        Cmd::Resolve { txn_id, outcome } => {
            let t = ctx.authed()?.dispute_resolve(&txn_id, outcome)?;
            ctx.emit(&t, |t| txn_line(&to_value(t)));
        }
        Cmd::OpenAccount { username, deposit } => {
            let a = ctx.authed()?.open_account(&username, deposit)?;
            ctx.emit(&a, |a| format!("opened {} with {}", a.username, a.balance));
        }
        Cmd::Attack {
            attack,
            user,
            email,
            from,
            outbox,
        } => {
            let email = match (attack, email) {
                (_, Some(e)) => e,
                (Attack::ReuseLink, None) => return Err(usage("reuse-link needs --email")),
                (_, None) => String::new(),
            };
            if attack == Attack::ReuseLink && outbox.is_none() {
                return Err(usage(format!("reuse-link needs --outbox <data-dir>/{OUTBOX_FILE}")));
            }
            let mut card = ctx.load_card()?;
            let pin = ctx.pin()?.to_owned();
            let mut fetch = |to: &str| -> Option<String> {
                let msgs = Outbox::read_file(outbox.as_deref()?).ok()?;
                msgs.into_iter().rev().find(|m| m.to == to).map(|m| m.link)
            };
            let mut v = Victim {
                base_url: &ctx.server,
                username: &user,
                email: &email,
                card: &mut card,
                pin: &pin,
            };
            let mut env = Env {
                hijack_from: from,
                fetch_link: &mut fetch,
            };
            let r = attack::run(attack, &mut v, &mut env);
            ctx.save_card(&card)?;
            let o = r?;
            ctx.emit(&o, |o| {
                let verdict = if o.rejected { "REJECTED" } else { "ACCEPTED" };
                format!("{}: {verdict} ({})", o.attack.name(), o.codes.join(", "))
            });
            if !o.rejected {
                return Err(Failure::Rejected("attack_accepted".into(), format!("{} was accepted", o.attack.name())));
            }
        }
        Cmd::VerifyLedger { data_dir } => {
            if !data_dir.is_dir() {
                return Err(usage(format!("{} is not a directory", data_dir.display())));
            }
            let store = Store::open(&data_dir, Arc::new(SystemClock)).map_err(|e| usage(e.to_string()))?;
            let r = ledger::verify_store(&store)
                .map_err(|e| Failure::Rejected(e.code().into(), e.to_string()))?;
            let log_path = data_dir.join(LEDGER_FILE);
            let log_events = if log_path.exists() {
                let log = ledger::read_log(&log_path).map_err(|e| Failure::Rejected(e.code().into(), e.to_string()))?;
                let stored = ledger::Ledger::stored_events(&store).map_err(|e| usage(e.to_string()))?;
                if !stored.starts_with(&log) {
                    return Err(Failure::Rejected(
                        "ledger_inconsistent".into(),
                        format!("{} contradicts the record store", log_path.display()),
                    ));
                }
                Some(log.len())
            } else {
                None
            };
            let out = json!({
                "ok": true,
                "events": r.events,
                "transitions": r.transitions,
                "accounts": r.balances,
                "minted": r.minted as u64,
                "total": r.total() as u64,
                "log_events": log_events,
            });
            ctx.emit(&out, |_| {
                format!(
                    "ledger OK: {} events, {} accounts, total {} = minted {}",
                    r.events,
                    r.balances.len(),
                    r.total(),
                    r.minted
                )
            });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg, exit) = match f {
                Failure::Rejected(code, msg) => (code, msg, 1),
                Failure::Usage(msg) => ("client_error".to_owned(), msg, 2),
            };
            if json {
                println!("{}", json!({"error": msg, "code": code}));
            } else {
                eprintln!("error: {msg}");
            }
            ExitCode::from(exit)
        }
    }
}
