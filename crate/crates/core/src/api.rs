//! HTTP service: routing, cookies, client-IP extraction, rate limiting.
//!
//! Every authenticated handler re-verifies the session cookie against the
//! address of the connection that carried the request.

pub mod limit;
pub mod wire;

use std::future::Future;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{ConnectInfo, FromRequest, FromRequestParts, Query, Request, State};
use axum::http::header::{CONTENT_LENGTH, COOKIE, SET_COOKIE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::audit::{AuditLog, AUDIT_FILE};
use crate::clock::SharedClock;
use crate::crypto::{CryptoError, ServerKeys};
use crate::ledger::{Ledger, LedgerConfig, LedgerError};
use crate::rp::{link_payload_from, Outbox, RelyingParty, RpConfig, RpError};
use crate::store::{Store, StoreError};
use limit::{Class, Limiter, RateLimits};
use wire::*;

pub const MAX_BODY: usize = 64 * 1024;
pub const SESSION_COOKIE: &str = "pp2pp_session";
pub const USER_COOKIE: &str = "pp2pp_user";
pub const KEYFILE_NAME: &str = "keys.bin";
pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, Clone)]
pub struct ApiConfig {
    /// `None` disables rate limiting.
    pub rate_limits: Option<RateLimits>,
    /// Header carrying the client address when behind a trusted proxy,
    /// e.g. `x-forwarded-for`. Off by default.
    pub trusted_proxy_header: Option<String>,
    pub secure_cookies: bool,
    /// Allow usernames holding the bank role to register.
    pub allow_bank_enrollment: bool,
    pub sweep_interval: Duration,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            rate_limits: Some(RateLimits::default()),
            trusted_proxy_header: None,
            secure_cookies: false,
            allow_bank_enrollment: false,
            sweep_interval: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    /// Defaults to `<data_dir>/keys.bin`; in memory, fresh keys.
    pub keyfile: Option<PathBuf>,
    pub rp: RpConfig,
    pub ledger: LedgerConfig,
    pub api: ApiConfig,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("keys: {0}")]
    Crypto(#[from] CryptoError),
}

/// The server's domain objects, shared by all handlers.
pub struct Services {
    pub rp: RelyingParty,
    pub ledger: Ledger,
    pub store: Store,
    pub audit: Arc<AuditLog>,
    pub clock: SharedClock,
}

impl Services {
    pub fn open(cfg: &ServerConfig, clock: SharedClock) -> Result<Self, ServerError> {
        let keyfile = cfg
            .keyfile
            .clone()
            .or_else(|| cfg.data_dir.as_ref().map(|d| d.join(KEYFILE_NAME)));
        let keys = match &keyfile {
            Some(p) => ServerKeys::load_or_create(p)?,
            None => ServerKeys::generate()?,
        };
        let (store, audit, outbox) = match &cfg.data_dir {
            Some(dir) => (
                Store::open(dir, clock.clone())?,
                Arc::new(AuditLog::open(dir)?),
                Outbox::open(dir),
            ),
            None => (
                Store::in_memory(clock.clone()),
                Arc::new(AuditLog::in_memory()),
                Outbox::in_memory(),
            ),
        };
        let ledger = Ledger::open(
            store.clone(),
            keys.app_key.clone(),
            clock.clone(),
            audit.clone(),
            cfg.ledger.clone(),
            cfg.data_dir.as_deref(),
        )?;
        let rp = RelyingParty::new(
            cfg.rp.clone(),
            store.clone(),
            keys,
            clock.clone(),
            outbox,
            audit.clone(),
        );
        Ok(Self {
            rp,
            ledger,
            store,
            audit,
            clock,
        })
    }

    pub fn audit_path(&self) -> Option<PathBuf> {
        self.store.records.dir().map(|d| d.join(AUDIT_FILE))
    }
}

pub struct AppInner {
    pub services: Services,
    pub api: ApiConfig,
    limiter: Option<Limiter>,
}

pub type AppState = Arc<AppInner>;

pub fn state(services: Services, api: ApiConfig) -> AppState {
    Arc::new(AppInner {
        limiter: api
            .rate_limits
            .map(|l| Limiter::new(l, services.clock.clone())),
        services,
        api,
    })
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_owned(),
            message: message.into(),
        }
    }

    fn internal(code: &str) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, code, "internal error")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            code: self.code,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<RpError> for ApiError {
    fn from(e: RpError) -> Self {
        use RpError::*;
        let status = match &e {
            Validation(_) | MalformedAssertion(_) => StatusCode::BAD_REQUEST,
            UserExists => StatusCode::CONFLICT,
            UnknownUser => StatusCode::NOT_FOUND,
            ChallengeExpired | ChallengeMissing | BadSignature | RpIdMismatch
            | CounterRegression | CredentialLocked | TokenMissing | SessionInvalid
            | LinkInvalid | IpMismatch => StatusCode::UNAUTHORIZED,
            Store(_) | Crypto(_) => {
                tracing::error!("rp: {e}");
                return ApiError::internal(e.code());
            }
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<LedgerError> for ApiError {
    fn from(e: LedgerError) -> Self {
        use LedgerError::*;
        let status = match &e {
            SelfTransfer | BadAmount | RedeemFailure | SelfRedeem | Validation(_) => {
                StatusCode::BAD_REQUEST
            }
            UnknownAccount | UnknownPayee | UnknownTxn => StatusCode::NOT_FOUND,
            NotYourTxn | NotParty | Forbidden => StatusCode::FORBIDDEN,
            AccountExists | InsufficientFunds | TokenSpent | TokenExpired | TokenRevoked
            | AlreadyConcluded | NotSettled | NotDisputed | ReversalInsufficientFunds
            | IllegalTransition(..) => StatusCode::CONFLICT,
            Inconsistent(_) | Store(_) | Crypto(_) => {
                tracing::error!("ledger: {e}");
                return ApiError::internal(e.code());
            }
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run blocking domain work off the async executor.
async fn blocking<T, E>(f: impl FnOnce() -> Result<T, E> + Send + 'static) -> ApiResult<T>
where
    T: Send + 'static,
    E: Into<ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(Into::into),
        Err(_) => Err(ApiError::internal("internal")),
    }
}

// ---------------------------------------------------------------------------
// Extractors

/// The peer address, or the trusted proxy header when configured.
pub struct ClientIp(pub IpAddr);

impl FromRequestParts<AppState> for ClientIp {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, st: &AppState) -> ApiResult<Self> {
        client_ip(&parts.headers, parts.extensions.get(), st).map(ClientIp)
    }
}

fn client_ip(
    headers: &HeaderMap,
    peer: Option<&ConnectInfo<SocketAddr>>,
    st: &AppState,
) -> ApiResult<IpAddr> {
    if let Some(h) = &st.api.trusted_proxy_header {
        if let Some(ip) = headers
            .get(h.as_str())
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.split(',').next())
            .and_then(|v| v.trim().parse::<IpAddr>().ok())
        {
            return Ok(ip.to_canonical());
        }
    }
    peer.map(|c| c.0.ip().to_canonical())
        .ok_or_else(|| ApiError::internal("no_peer_address"))
}

fn cookie<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers
        .get_all(COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
}

/// A verified session: the cookie opened under this connection's address.
pub struct Authed {
    pub username: String,
    pub ip: IpAddr,
}

impl FromRequestParts<AppState> for Authed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, st: &AppState) -> ApiResult<Self> {
        let ClientIp(ip) = ClientIp::from_request_parts(parts, st).await?;
        let value = cookie(&parts.headers, SESSION_COOKIE).ok_or(RpError::SessionInvalid)?;
        let session = st.services.rp.verify_session(value, ip)?;
        Ok(Authed {
            username: session.username,
            ip,
        })
    }
}

/// JSON body capped at [`MAX_BODY`]; oversize and malformed bodies are 400.
pub struct Body<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, _: &S) -> ApiResult<Self> {
        let too_large = || {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "body_too_large",
                format!("request body exceeds {MAX_BODY} bytes"),
            )
        };
        let declared = req
            .headers()
            .get(CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<usize>().ok());
        if declared.is_some_and(|n| n > MAX_BODY) {
            return Err(too_large());
        }
        let bytes: Bytes = axum::body::to_bytes(req.into_body(), MAX_BODY)
            .await
            .map_err(|_| too_large())?;
        serde_json::from_slice(&bytes)
            .map(Body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Cookies

fn set_cookie(st: &AppState, name: &str, value: &str, max_age_s: u64) -> HeaderValue {
    let secure = if st.api.secure_cookies { "; Secure" } else { "" };
    HeaderValue::from_str(&format!(
        "{name}={value}; Path=/; HttpOnly; SameSite=Strict; Max-Age={max_age_s}{secure}"
    ))
    .expect("cookie header is ascii")
}

fn with_cookie<T: Serialize>(cookie: HeaderValue, body: T) -> Response {
    let mut r = Json(body).into_response();
    r.headers_mut().append(SET_COOKIE, cookie);
    r
}

fn session_response(st: &AppState, s: crate::rp::IssuedSession) -> Response {
    let max_age = st.services.rp.config().session_ttl_ms / 1000;
    with_cookie(
        set_cookie(st, SESSION_COOKIE, &s.cookie, max_age),
        SessionBody {
            username: s.session.username,
            expires_at: s.session.expiry,
        },
    )
}

// ---------------------------------------------------------------------------
// Handlers: registration and authentication

fn bank_enrollment_check(st: &AppState, username: &str) -> ApiResult<()> {
    if st.services.ledger.is_bank(username) && !st.api.allow_bank_enrollment {
        return Err(LedgerError::Forbidden.into());
    }
    Ok(())
}

async fn register_begin(
    State(st): State<AppState>,
    Body(b): Body<RegisterBegin>,
) -> ApiResult<Json<ChallengeBody>> {
    bank_enrollment_check(&st, &b.username)?;
    let s = st.clone();
    let c = blocking(move || s.services.rp.begin_registration(&b.username, &b.email)).await?;
    Ok(Json(ChallengeBody::new(&c, &st.services.rp.config().rp_id)))
}

async fn register_reenroll(
    State(st): State<AppState>,
    who: Authed,
    Body(b): Body<Reenroll>,
) -> ApiResult<Json<ChallengeBody>> {
    if !st.services.ledger.is_bank(&who.username) {
        return Err(LedgerError::Forbidden.into());
    }
    let s = st.clone();
    let c = blocking(move || s.services.rp.begin_reenrollment(&b.username)).await?;
    Ok(Json(ChallengeBody::new(&c, &st.services.rp.config().rp_id)))
}

async fn register_finish(
    State(st): State<AppState>,
    Body(b): Body<RegisterFinish>,
) -> ApiResult<Json<Registered>> {
    bank_enrollment_check(&st, &b.username)?;
    let resp = decode_registration(b.format, b.credential)
        .map_err(|m| ApiError::from(RpError::MalformedAssertion(m)))?;
    let username = b.username.clone();
    let cred = blocking(move || st.services.rp.finish_registration(&b.username, &resp)).await?;
    Ok(Json(Registered {
        username,
        credential_id: cred.credential_id,
        registered_at: cred.registered_at,
    }))
}

async fn auth_begin(State(st): State<AppState>, Body(b): Body<AuthBegin>) -> ApiResult<Response> {
    let s = st.clone();
    let user = b.username.clone();
    let c = blocking(move || s.services.rp.begin_authentication(&b.username)).await?;
    let body = ChallengeBody::new(&c, &st.services.rp.config().rp_id);
    let remembered = st.services.rp.username_cookie(&user)?;
    Ok(with_cookie(set_cookie(&st, USER_COOKIE, &remembered, 30 * 24 * 3600), body))
}

async fn auth_finish(
    State(st): State<AppState>,
    ClientIp(ip): ClientIp,
    Body(b): Body<AuthFinish>,
) -> ApiResult<Json<PendingToken>> {
    let a = decode_assertion(b.format, b.assertion)
        .map_err(|m| ApiError::from(RpError::MalformedAssertion(m)))?;
    let p = blocking(move || st.services.rp.finish_authentication(&b.username, &a, ip)).await?;
    Ok(Json(PendingToken {
        token: p.token.to_string(),
        expires_in_ms: p.ttl_ms,
    }))
}

async fn auth_exchange(
    State(st): State<AppState>,
    ClientIp(ip): ClientIp,
    Body(b): Body<Exchange>,
) -> ApiResult<Response> {
    let s = st.clone();
    let issued = blocking(move || s.services.rp.exchange_token(&b.token, ip)).await?;
    Ok(session_response(&st, issued))
}

async fn auth_logout(State(st): State<AppState>) -> Response {
    with_cookie(set_cookie(&st, SESSION_COOKIE, "", 0), Status::new("ok"))
}

async fn link_issue(
    State(st): State<AppState>,
    ClientIp(ip): ClientIp,
    Body(b): Body<LinkIssue>,
) -> ApiResult<Json<Status>> {
    // same answer whether or not the address is known
    blocking(move || st.services.rp.issue_onetime_link(&b.email, ip)).await?;
    Ok(Json(Status::new("sent")))
}

async fn link_consume(
    State(st): State<AppState>,
    ClientIp(ip): ClientIp,
    Query(q): Query<LinkConsume>,
) -> ApiResult<Response> {
    let s = st.clone();
    let issued = blocking(move || {
        s.services
            .rp
            .consume_onetime_link(link_payload_from(&q.p), ip)
    })
    .await?;
    Ok(session_response(&st, issued))
}

// ---------------------------------------------------------------------------
// Handlers: accounts and payments

async fn account(State(st): State<AppState>, who: Authed) -> ApiResult<Response> {
    Ok(Json(st.services.ledger.account(&who.username)?).into_response())
}

async fn account_open(
    State(st): State<AppState>,
    who: Authed,
    Body(b): Body<OpenAccount>,
) -> ApiResult<Response> {
    let a = blocking(move || {
        st.services
            .ledger
            .open_account(&who.username, &b.username, b.deposit)
    })
    .await?;
    Ok(Json(a).into_response())
}

async fn account_history(
    State(st): State<AppState>,
    who: Authed,
    Query(p): Query<Page>,
) -> ApiResult<Json<HistoryBody>> {
    let offset = p.offset.unwrap_or(0);
    let limit = p.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let transactions = blocking(move || st.services.ledger.history(&who.username, offset, limit)).await?;
    Ok(Json(HistoryBody {
        transactions,
        offset,
        limit,
    }))
}

async fn pay_direct(State(st): State<AppState>, who: Authed, Body(b): Body<DirectPay>) -> ApiResult<Response> {
    let t = blocking(move || st.services.ledger.direct_transfer(&who.username, &b.payee, b.amount)).await?;
    Ok(Json(t).into_response())
}

async fn token_create(State(st): State<AppState>, who: Authed, Body(b): Body<TokenCreate>) -> ApiResult<Response> {
    let t = blocking(move || {
        st.services
            .ledger
            .create_payment_token(&who.username, b.kind, b.amount)
    })
    .await?;
    Ok(Json(t).into_response())
}

async fn token_redeem(State(st): State<AppState>, who: Authed, Body(b): Body<TokenRedeem>) -> ApiResult<Response> {
    let t = blocking(move || {
        st.services
            .ledger
            .redeem_payment_token(&who.username, &b.token, b.amount)
    })
    .await?;
    Ok(Json(t).into_response())
}

async fn token_revoke(State(st): State<AppState>, who: Authed, Body(b): Body<TokenRevoke>) -> ApiResult<Response> {
    let t = blocking(move || st.services.ledger.revoke_token(&who.username, &b.token_id)).await?;
    Ok(Json(t).into_response())
}

async fn pay_request(State(st): State<AppState>, who: Authed, Body(b): Body<PayRequest>) -> ApiResult<Response> {
    let t = blocking(move || st.services.ledger.request_payment(&who.username, &b.payer, b.amount)).await?;
    Ok(Json(t).into_response())
}

async fn pay_acknowledge(State(st): State<AppState>, who: Authed, Body(b): Body<Acknowledge>) -> ApiResult<Response> {
    let t = blocking(move || st.services.ledger.acknowledge(&who.username, &b.txn_id, b.accept)).await?;
    Ok(Json(t).into_response())
}

async fn dispute_open(State(st): State<AppState>, who: Authed, Body(b): Body<DisputeOpen>) -> ApiResult<Response> {
    let t = blocking(move || st.services.ledger.open_dispute(&who.username, &b.txn_id, &b.reason)).await?;
    Ok(Json(t).into_response())
}

async fn dispute_resolve(
    State(st): State<AppState>,
    who: Authed,
    Body(b): Body<DisputeResolve>,
) -> ApiResult<Response> {
    let t = blocking(move || st.services.ledger.resolve_dispute(&who.username, &b.txn_id, b.outcome)).await?;
    Ok(Json(t).into_response())
}

async fn healthz() -> Json<Status> {
    Json(Status::new("ok"))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn rate_limit(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(l) = &st.limiter {
        let ip = client_ip(req.headers(), req.extensions().get(), &st);
        if let Ok(ip) = ip {
            if !l.check(Class::of(req.uri().path()), ip) {
                return ApiError::new(StatusCode::TOO_MANY_REQUESTS, "rate_limited", "too many requests")
                    .into_response();
            }
        }
    }
    next.run(req).await
}

pub fn router(st: AppState) -> Router {
    Router::new()
        .route("/register/begin", post(register_begin))
        .route("/register/finish", post(register_finish))
        .route("/register/reenroll", post(register_reenroll))
        .route("/auth/begin", post(auth_begin))
        .route("/auth/finish", post(auth_finish))
        .route("/auth/exchange", post(auth_exchange))
        .route("/auth/logout", post(auth_logout))
        .route("/auth/link/issue", post(link_issue))
        .route("/auth/link/consume", get(link_consume))
        .route("/account", get(account))
        .route("/account/open", post(account_open))
        .route("/account/history", get(account_history))
        .route("/pay/direct", post(pay_direct))
        .route("/pay/token/create", post(token_create))
        .route("/pay/token/redeem", post(token_redeem))
        .route("/pay/token/revoke", post(token_revoke))
        .route("/pay/request", post(pay_request))
        .route("/pay/acknowledge", post(pay_acknowledge))
        .route("/dispute/open", post(dispute_open))
        .route("/dispute/resolve", post(dispute_resolve))
        .route("/healthz", get(healthz))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(st.clone(), rate_limit))
        .with_state(st)
}

/// Serve until `shutdown` resolves, sweeping expired records periodically.
pub async fn serve(
    listener: tokio::net::TcpListener,
    st: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let st = st.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(st.api.sweep_interval);
            loop {
                tick.tick().await;
                let s = st.clone();
                let _ = tokio::task::spawn_blocking(move || {
                    if let Err(e) = s.services.store.records.sweep_expired() {
                        tracing::warn!("sweep failed: {e}");
                    }
                    if let Some(l) = &s.limiter {
                        l.retain_recent();
                    }
                })
                .await;
            }
        })
    };
    let app = router(st).into_make_service_with_connect_info::<SocketAddr>();
    let r = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    r
}

/// A server running on its own runtime thread. Dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    state: AppState,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

/// Bind `listen` and serve `cfg` from a background thread.
pub fn spawn(cfg: &ServerConfig, listen: SocketAddr, clock: SharedClock) -> Result<ServerHandle, ServerError> {
    let services = Services::open(cfg, clock)?;
    let st = state(services, cfg.api.clone());
    let std_listener = std::net::TcpListener::bind(listen)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let st2 = st.clone();
    let thread = std::thread::Builder::new()
        .name("pp2pp-server".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(listener, st2, async {
                    let _ = rx.await;
                })
                .await
            })
        })?;
    Ok(ServerHandle {
        addr,
        state: st,
        stop: Some(tx),
        thread: Some(thread),
    })
}
