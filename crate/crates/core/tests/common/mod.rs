#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader};
use std::net::IpAddr;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use pp2pp::api::{self, ApiConfig, ServerConfig, ServerHandle};
use pp2pp::attack::{self, Attack, Env, Victim};
use pp2pp::audit::AuditLog;
use pp2pp::authenticator::Card;
use pp2pp::client::Client;
use pp2pp::clock::{ManualClock, SharedClock, SystemClock};
use pp2pp::crypto::{self, AuthKeyPair, Ceremony, ServerKeys};
use pp2pp::ledger::{self, DisputeOutcome, Ledger, LedgerConfig, LedgerError, TokenKind, TxnState};
use pp2pp::store::Store;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub const PIN: &str = "2468";

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
#[allow(unused_imports)]
pub(crate) use ensure;

pub fn config() -> ServerConfig {
    ServerConfig {
        api: ApiConfig {
            rate_limits: None,
            allow_bank_enrollment: true,
            ..ApiConfig::default()
        },
        ..ServerConfig::default()
    }
}

pub fn server() -> ServerHandle {
    server_with(config())
}

pub fn server_with(cfg: ServerConfig) -> ServerHandle {
    api::spawn(&cfg, "127.0.0.1:0".parse().unwrap(), Arc::new(SystemClock)).expect("server starts")
}

/// Register and log in `user`; returns the card and a client holding the session.
pub fn enroll(base: &str, user: &str) -> (Card, Client) {
    let mut card = Card::new(PIN);
    let mut c = Client::new(base).unwrap();
    c.register(&mut card, PIN, user, &format!("{user}@example.test")).unwrap();
    c.login(&mut card, PIN, user).unwrap();
    (card, c)
}

/// Run the `pp2pp` binary with the card `dir/card`.
pub fn cli(dir: &Path, server: &str, card: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pp2pp"))
        .args(["--server", server, "--pin", PIN, "--card"])
        .arg(dir.join(card))
        .args(args)
        .env_remove("PP2PP_SERVER")
        .output()
        .expect("cli runs")
}

pub fn hijack_ip() -> IpAddr {
    "127.0.0.2".parse().unwrap()
}

// ---------------------------------------------------------------------------
// Attacks

pub struct AttackTally {
    pub runs: BTreeMap<&'static str, usize>,
    pub false_accepts: Vec<String>,
    pub wrong_codes: Vec<String>,
}

/// Every attack `reps` times, interleaved in a seeded random order against
/// randomly chosen victims.
pub fn attack_suite(reps: usize, seed: u64) -> Result<AttackTally, String> {
    let srv = server();
    let base = srv.base_url();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut victims: Vec<(String, String, Card)> = (0..4)
        .map(|i| {
            let user = format!("victim{i}-{}", rng.gen::<u32>());
            let email = format!("{user}@example.test");
            let mut card = Card::new(PIN);
            Client::new(&base)
                .unwrap()
                .register(&mut card, PIN, &user, &email)
                .unwrap();
            (user, email, card)
        })
        .collect();
    let mut order: Vec<Attack> = Attack::ALL.iter().flat_map(|a| std::iter::repeat(*a).take(reps)).collect();
    order.shuffle(&mut rng);
    let st = srv.state().clone();
    let mut fetch = move |to: &str| {
        st.services
            .rp
            .outbox()
            .messages()
            .into_iter()
            .rev()
            .find(|m| m.to == to)
            .map(|m| m.link)
    };
    let mut tally = AttackTally {
        runs: BTreeMap::new(),
        false_accepts: Vec::new(),
        wrong_codes: Vec::new(),
    };
    for (i, a) in order.into_iter().enumerate() {
        let (user, email, card) = victims.choose_mut(&mut rng).unwrap();
        let mut v = Victim {
            base_url: &base,
            username: user,
            email,
            card,
            pin: PIN,
        };
        let mut env = Env {
            hijack_from: hijack_ip(),
            fetch_link: &mut fetch,
        };
        let o = attack::run(a, &mut v, &mut env).map_err(|e| format!("run {i} ({}): setup failed: {e}", a.name()))?;
        *tally.runs.entry(a.name()).or_default() += 1;
        if !o.rejected {
            tally.false_accepts.push(format!("run {i}: {} accepted ({:?})", a.name(), o.codes));
        } else if !o.as_expected() {
            tally.wrong_codes.push(format!("run {i}: {} rejected with {:?}", a.name(), o.codes));
        }
    }
    Ok(tally)
}

// ---------------------------------------------------------------------------
// Ledger

const USERS: [&str; 6] = ["u0", "u1", "u2", "u3", "u4", "u5"];
const DEPOSITS: [u64; 6] = [5_000, 2_000, 0, 750, 10_000, 1];

/// Run `n` random operations on a file-backed ledger in `dir` alongside a
/// plain balance map. Conservation is checked after every step; at the end
/// balances must equal the model, the ledger log replay and a fresh reopen
/// of the journal.
pub fn ledger_model(n: usize, seed: u64, dir: &Path) -> Check {
    let clock = ManualClock::default();
    let shared: SharedClock = Arc::new(clock.clone());
    let keys = ServerKeys::generate().unwrap();
    let store = Store::open(dir, shared.clone()).map_err(|e| e.to_string())?;
    let l = Ledger::open(
        store.clone(),
        keys.app_key.clone(),
        shared.clone(),
        Arc::new(AuditLog::in_memory()),
        LedgerConfig::default(),
        Some(dir),
    )
    .map_err(|e| e.to_string())?;
    let mut model: BTreeMap<&str, u64> = BTreeMap::new();
    for (u, d) in USERS.iter().zip(DEPOSITS) {
        l.open_account("bank", u, d).map_err(|e| e.to_string())?;
        model.insert(u, d);
    }
    let minted: u64 = DEPOSITS.iter().sum();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut settled: Vec<(String, &str, &str, u64)> = Vec::new();
    let mut counts = [0usize; 5];
    fn pay(m: &mut BTreeMap<&str, u64>, a: &str, b: &str, n: u64) -> bool {
        if a == b || m[a] < n {
            return false;
        }
        *m.get_mut(a).unwrap() -= n;
        *m.get_mut(b).unwrap() += n;
        true
    }
    for step in 0..n {
        let a = USERS[rng.gen_range(0..USERS.len())];
        let b = USERS[rng.gen_range(0..USERS.len())];
        let amt = rng.gen_range(1..=3_000u64);
        let kind = rng.gen_range(0..100);
        let e = |r: &dyn std::fmt::Debug| format!("step {step}: {r:?}");
        match kind {
            0..=39 => {
                counts[0] += 1;
                let r = l.direct_transfer(a, b, amt);
                ensure!(r.is_ok() == pay(&mut model, a, b, amt), "{}", e(&r));
                if let Ok(t) = r {
                    settled.push((t.txn_id.to_string(), a, b, amt));
                }
            }
            40..=64 => {
                counts[1] += 1;
                let kinds = [TokenKind::Qr, TokenKind::Nfc, TokenKind::Link];
                let fixed = rng.gen_bool(0.5).then_some(amt);
                let tok = l
                    .create_payment_token(b, kinds[rng.gen_range(0..3)], fixed)
                    .map_err(|x| e(&x))?;
                let supplied = if fixed.is_some() { None } else { Some(amt) };
                let r = l.redeem_payment_token(a, &tok.presentable, supplied);
                let expect = if a == b { false } else { pay(&mut model, a, b, amt) };
                ensure!(r.is_ok() == expect, "{}", e(&r));
                if let Ok(t) = r {
                    settled.push((t.txn_id.to_string(), a, b, amt));
                    let again = l.redeem_payment_token(a, &tok.payload, supplied);
                    ensure!(again == Err(LedgerError::TokenSpent), "{}", e(&again));
                }
            }
            65..=84 => {
                counts[2] += 1;
                let r = l.request_payment(b, a, amt);
                if a == b {
                    ensure!(r == Err(LedgerError::SelfTransfer), "{}", e(&r));
                    continue;
                }
                let id = r.map_err(|x| e(&x))?.txn_id.to_string();
                let accept = rng.gen_bool(0.8);
                let r = l.acknowledge(a, &id, accept);
                if accept {
                    ensure!(r.is_ok() == pay(&mut model, a, b, amt), "{}", e(&r));
                    if r.is_ok() {
                        settled.push((id, a, b, amt));
                    }
                } else {
                    ensure!(r.as_ref().map(|t| t.state) == Ok(TxnState::Rejected), "{}", e(&r));
                }
            }
            85..=97 => {
                counts[3] += 1;
                if settled.is_empty() {
                    continue;
                }
                let i = rng.gen_range(0..settled.len());
                let (id, payer, payee, amt) = settled.swap_remove(i);
                l.open_dispute(payer, &id, "not as described").map_err(|x| e(&x))?;
                let reverse = rng.gen_bool(0.5);
                let outcome = if reverse { DisputeOutcome::Reverse } else { DisputeOutcome::Uphold };
                let r = l.resolve_dispute("bank", &id, outcome).map(|t| t.state);
                let expect = if !reverse || pay(&mut model, payee, payer, amt) {
                    Ok(TxnState::Resolved)
                } else {
                    Err(LedgerError::ReversalInsufficientFunds)
                };
                ensure!(r == expect, "{}", e(&r));
            }
            _ => {
                counts[4] += 1;
                clock.advance_ms(ledger::DEFAULT_TOKEN_TTL_MS / 2);
            }
        }
        let total: u64 = l.accounts().map_err(|x| e(&x))?.iter().map(|a| a.balance).sum();
        ensure!(total == minted, "step {step}: total {total} != minted {minted}");
    }
    for u in USERS {
        let got = l.account(u).map_err(|e| e.to_string())?.balance;
        ensure!(got == model[u], "{u}: ledger {got} != model {}", model[u]);
    }
    let r = l.verify().map_err(|e| e.to_string())?;
    ensure!(r.minted == minted as u128 && r.total() == minted as u128, "replay total {} minted {}", r.total(), r.minted);
    drop(l);
    drop(store);

    let logged = ledger::read_log(&dir.join(ledger::LEDGER_FILE)).map_err(|e| e.to_string())?;
    let from_log = ledger::replay(&logged).map_err(|e| e.to_string())?;
    let model_map: BTreeMap<String, u64> = model.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    ensure!(from_log.balances == model_map, "ledger log replay differs from model");

    let reopened = Store::open(dir, shared).map_err(|e| e.to_string())?;
    let from_journal = ledger::verify_store(&reopened).map_err(|e| e.to_string())?;
    ensure!(from_journal.balances == model_map, "journal reopen differs from model");
    ensure!(from_journal.events == logged.len() as u64, "log has {} events, store {}", logged.len(), from_journal.events);
    Ok(format!(
        "{n} ops (direct {}, token {}, request {}, dispute {}, clock {}), {} events replayed, total {minted}",
        counts[0],
        counts[1],
        counts[2],
        counts[3],
        counts[4],
        logged.len()
    ))
}

/// `threads` payers race to redeem one fixed-amount token, `trials` times.
/// Returns the number of successes per trial.
pub fn double_redeem(threads: usize, trials: usize) -> Result<Vec<usize>, String> {
    let clock: SharedClock = Arc::new(ManualClock::default());
    let keys = ServerKeys::generate().unwrap();
    let store = Store::in_memory(clock.clone());
    let l = Ledger::in_memory(store, keys.app_key.clone(), clock, Arc::new(AuditLog::in_memory()));
    l.open_account("bank", "payee", 0).unwrap();
    let payers: Vec<String> = (0..threads).map(|i| format!("payer{i}")).collect();
    for p in &payers {
        l.open_account("bank", p, trials as u64).unwrap();
    }
    let mut wins = Vec::with_capacity(trials);
    for _ in 0..trials {
        let tok = l.create_payment_token("payee", TokenKind::Qr, Some(1)).map_err(|e| e.to_string())?;
        let barrier = Barrier::new(threads);
        let ok = Mutex::new(0usize);
        let bad = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for p in &payers {
                s.spawn(|| {
                    barrier.wait();
                    match l.redeem_payment_token(p, &tok.payload, None) {
                        Ok(_) => *ok.lock().unwrap() += 1,
                        Err(LedgerError::TokenSpent) => {}
                        Err(e) => bad.lock().unwrap().push(e),
                    }
                });
            }
        });
        let bad = bad.into_inner().unwrap();
        ensure!(bad.is_empty(), "unexpected redeem errors: {bad:?}");
        wins.push(ok.into_inner().unwrap());
    }
    let r = l.verify().map_err(|e| e.to_string())?;
    ensure!(r.total() == r.minted, "conservation broken after race");
    Ok(wins)
}

// ---------------------------------------------------------------------------
// Crypto

/// Flip every bit of one sealed blob (nonce, ciphertext and tag) and of its
/// associated data; every variant must fail to open.
pub fn aead_bit_flips() -> Check {
    let keys = ServerKeys::generate().unwrap();
    let pt = b"{\"u\":\"alice\",\"iat\":1704067200000,\"exp\":1704069000000}";
    let ad = b"203.0.113.7";
    let blob = crypto::seal(&keys.cookie_key, pt, ad).map_err(|e| e.to_string())?;
    let wire = blob.to_bytes();
    let mut tried = 0usize;
    for bit in 0..wire.len() * 8 {
        let mut w = wire.clone();
        w[bit / 8] ^= 1 << (bit % 8);
        let b = crypto::SealedBlob::from_bytes(&w).map_err(|e| e.to_string())?;
        ensure!(crypto::open(&keys.cookie_key, &b, ad).is_err(), "flip of bit {bit} accepted");
        tried += 1;
    }
    for bit in 0..ad.len() * 8 {
        let mut a = ad.to_vec();
        a[bit / 8] ^= 1 << (bit % 8);
        ensure!(crypto::open(&keys.cookie_key, &blob, &a).is_err(), "AD flip {bit} accepted");
        tried += 1;
    }
    let app = crypto::seal(&keys.app_key, pt, ad).map_err(|e| e.to_string())?.to_bytes();
    for bit in 0..app.len() * 8 {
        let mut w = app.clone();
        w[bit / 8] ^= 1 << (bit % 8);
        let b = crypto::SealedBlob::from_bytes(&w).map_err(|e| e.to_string())?;
        ensure!(crypto::open(&keys.app_key, &b, ad).is_err(), "app-key flip of bit {bit} accepted");
        tried += 1;
    }
    ensure!(crypto::open(&keys.cookie_key, &blob, ad).as_deref() == Ok(&pt[..]), "untouched blob does not open");
    Ok(format!("{tried} single-bit variants rejected"))
}

/// Ten keypairs each sign their own message; only the diagonal verifies.
pub fn cross_pair_matrix(n: usize) -> Check {
    let keys: Vec<AuthKeyPair> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..n)
            .map(|_| s.spawn(|| AuthKeyPair::generate(&mut rand::rngs::OsRng).unwrap()))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let msgs: Vec<Vec<u8>> = (0..n).map(|i| format!("authenticator data {i}").into_bytes()).collect();
    let sigs: Vec<Vec<u8>> = keys.iter().zip(&msgs).map(|(k, m)| k.sign(m).unwrap()).collect();
    let mut false_accepts = 0;
    let mut false_rejects = 0;
    for (i, sig) in sigs.iter().enumerate() {
        for (j, k) in keys.iter().enumerate() {
            for (m_i, m) in msgs.iter().enumerate() {
                let ok = crypto::verify(k.public(), m, sig);
                let should = i == j && m_i == i;
                match (ok, should) {
                    (true, false) => false_accepts += 1,
                    (false, true) => false_rejects += 1,
                    _ => {}
                }
            }
        }
    }
    ensure!(false_accepts == 0 && false_rejects == 0, "{false_accepts} false accepts, {false_rejects} false rejects");
    Ok(format!("{n}x{n} keys x {n} messages, 0 false accepts"))
}

pub fn unique_challenges(n: usize) -> Check {
    let clock = SystemClock;
    let mut seen = HashSet::with_capacity(n);
    for _ in 0..n {
        let c = crypto::new_challenge(Ceremony::Authentication, "u", &clock).map_err(|e| e.to_string())?;
        ensure!(seen.insert(c.nonce), "duplicate nonce after {} challenges", seen.len());
    }
    Ok(format!("{n} challenges, 0 duplicates"))
}

/// Canonical lowercase 8-4-4-4-12 with version nibble 4 and variant 10xx.
pub fn is_uuid_v4_text(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 36
        && b.iter().enumerate().all(|(i, c)| match i {
            8 | 13 | 18 | 23 => *c == b'-',
            14 => *c == b'4',
            19 => matches!(c, b'8' | b'9' | b'a' | b'b'),
            _ => c.is_ascii_digit() || (b'a'..=b'f').contains(c),
        })
}

pub fn uuid_tokens(n: usize) -> Check {
    let mut seen = HashSet::with_capacity(n);
    for _ in 0..n {
        let t = crypto::new_auth_token();
        let s = t.to_string();
        ensure!(is_uuid_v4_text(&s), "not a v4 UUID: {s}");
        ensure!(t.as_bytes()[6] >> 4 == 4 && t.as_bytes()[8] >> 6 == 0b10, "bad version/variant bits: {s}");
        ensure!(seen.insert(t), "duplicate token {s}");
    }
    Ok(format!("{n} tokens well-formed and distinct"))
}

// ---------------------------------------------------------------------------
// Child server process

pub struct ChildServer {
    pub child: Child,
    pub base_url: String,
}

impl ChildServer {
    pub fn start(data_dir: &Path, extra: &[&str]) -> ChildServer {
        let mut child = Command::new(env!("CARGO_BIN_EXE_pp2pp-server"))
            .arg("--data-dir")
            .arg(data_dir)
            .args(["--listen", "127.0.0.1:0", "--no-rate-limit", "--allow-bank-enrollment"])
            .args(extra)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("server binary starts");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base_url = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected server banner {line:?}"))
            .to_owned();
        ChildServer { child, base_url }
    }

    /// SIGKILL, no chance to flush anything.
    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ChildServer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Two payers hammer a child server; once at least `min_acked` transfers
/// are acknowledged it is killed with SIGKILL mid-workload and restarted.
/// Every acknowledged transfer must survive and the total must be intact.
pub fn durability(dir: &Path, min_acked: usize) -> Check {
    const FUND: u64 = 1_000_000;
    let srv = ChildServer::start(dir, &[]);
    let base = srv.base_url.clone();
    let (_bank_card, mut bank) = enroll(&base, "bank");
    let (alice_card, alice) = enroll(&base, "alice");
    let (bob_card, bob) = enroll(&base, "bob");
    bank.open_account("alice", FUND).map_err(|e| e.to_string())?;
    bank.open_account("bob", FUND).map_err(|e| e.to_string())?;

    let acked: Arc<Mutex<Vec<(String, &'static str, u64)>>> = Arc::default();
    let workers: Vec<_> = [(alice, "alice", "bob"), (bob, "bob", "alice")]
        .into_iter()
        .map(|(mut c, from, to)| {
            let acked = acked.clone();
            std::thread::spawn(move || {
                let mut rng = rand::thread_rng();
                loop {
                    match c.pay_direct(to, rng.gen_range(1..=50)) {
                        Ok(t) => acked.lock().unwrap().push((t.txn_id.to_string(), from, t.amount)),
                        Err(_) => return,
                    }
                }
            })
        })
        .collect();
    let deadline = Instant::now() + Duration::from_secs(60);
    while acked.lock().unwrap().len() < min_acked {
        ensure!(Instant::now() < deadline, "workload too slow");
        std::thread::sleep(Duration::from_millis(2));
    }
    srv.kill();
    for w in workers {
        let _ = w.join();
    }
    let acked = acked.lock().unwrap().clone();

    let srv = ChildServer::start(dir, &[]);
    let mut alice_card = alice_card;
    let mut alice = Client::new(&srv.base_url).unwrap();
    alice.login(&mut alice_card, PIN, "alice").map_err(|e| format!("login after restart: {e}"))?;
    let mut seen = HashSet::new();
    let mut offset = 0;
    loop {
        let page = alice.history(offset, 500).map_err(|e| e.to_string())?;
        if page.transactions.is_empty() {
            break;
        }
        offset += page.transactions.len();
        for t in page.transactions {
            if t.state == TxnState::Settled {
                seen.insert(t.txn_id.to_string());
            }
        }
    }
    let lost: Vec<_> = acked.iter().filter(|(id, _, _)| !seen.contains(id)).collect();
    ensure!(lost.is_empty(), "{} acknowledged transfers lost, e.g. {:?}", lost.len(), lost.first());
    let a = alice.account().map_err(|e| e.to_string())?.balance;
    let mut bob_card = bob_card;
    let mut bob = Client::new(&srv.base_url).unwrap();
    bob.login(&mut bob_card, PIN, "bob").map_err(|e| e.to_string())?;
    let b = bob.account().map_err(|e| e.to_string())?.balance;
    ensure!(a + b == 2 * FUND, "balances {a} + {b} != {}", 2 * FUND);
    srv.kill();

    let store = Store::open(dir, Arc::new(SystemClock)).map_err(|e| e.to_string())?;
    let r = ledger::verify_store(&store).map_err(|e| e.to_string())?;
    ensure!(r.total() == r.minted && r.minted == 2 * FUND as u128, "offline replay total {} minted {}", r.total(), r.minted);
    let logged = ledger::read_log(&dir.join(ledger::LEDGER_FILE)).map_err(|e| e.to_string())?;
    let stored = Ledger::stored_events(&store).map_err(|e| e.to_string())?;
    ensure!(logged == stored, "ledger log ({}) differs from journal ({})", logged.len(), stored.len());
    Ok(format!(
        "{} acked before SIGKILL, {} settled after restart, total {} conserved",
        acked.len(),
        seen.len(),
        a + b
    ))
}

/// Run `f`, returning its result and the wall time.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}
