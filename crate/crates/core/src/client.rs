//! Blocking HTTP client for the server, driving a software card.

use std::net::IpAddr;
use std::time::Duration;

use reqwest::blocking::{Client as Http, RequestBuilder};
use reqwest::header::{COOKIE, SET_COOKIE};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::api::wire::*;
use crate::api::SESSION_COOKIE;
use crate::authenticator::{
    AssertionResponse, Card, CardError, ClientData, MakeCredentialResponse, CLIENT_DATA_GET,
};
use crate::crypto::b64;
use crate::ledger::{Account, DisputeOutcome, IssuedToken, PaymentToken, TokenKind, Transaction};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("{code}: {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
    },
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error("card: {0}")]
    Card(#[from] CardError),
    #[error("not logged in")]
    NoSession,
}

impl ClientError {
    /// The server's or card's error code, if this is a protocol rejection.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            ClientError::Card(e) => Some(e.code()),
            ClientError::NoSession => Some("session_invalid"),
            _ => None,
        }
    }

    /// Protocol rejections, as opposed to transport or local failures.
    pub fn is_rejection(&self) -> bool {
        matches!(
            self,
            ClientError::Api { .. } | ClientError::Card(_) | ClientError::NoSession
        )
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

#[derive(Clone)]
pub struct Client {
    http: Http,
    base: String,
    session: Option<String>,
}

impl Client {
    pub fn new(base_url: &str) -> ClientResult<Self> {
        Self::build(base_url, None)
    }

    /// A client whose connections originate from `local` (e.g. 127.0.0.2),
    /// so the server sees a different peer address.
    pub fn bound_to(base_url: &str, local: IpAddr) -> ClientResult<Self> {
        Self::build(base_url, Some(local))
    }

    fn build(base_url: &str, local: Option<IpAddr>) -> ClientResult<Self> {
        let http = Http::builder()
            .local_address(local)
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        Ok(Self {
            http,
            base: base_url.trim_end_matches('/').to_owned(),
            session: None,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn session_cookie(&self) -> Option<&str> {
        self.session.as_deref()
    }

    pub fn set_session_cookie(&mut self, cookie: Option<String>) {
        self.session = cookie;
    }

    fn send<R: DeserializeOwned>(&mut self, rb: RequestBuilder) -> ClientResult<R> {
        let rb = match &self.session {
            Some(c) => rb.header(COOKIE, format!("{SESSION_COOKIE}={c}")),
            None => rb,
        };
        let resp = rb.send().map_err(|e| ClientError::Unreachable(e.to_string()))?;
        let status = resp.status();
        for v in resp.headers().get_all(SET_COOKIE) {
            let Ok(v) = v.to_str() else { continue };
            let kv = v.split(';').next().unwrap_or_default();
            if let Some((k, val)) = kv.split_once('=') {
                if k.trim() == SESSION_COOKIE {
                    self.session = (!val.is_empty()).then(|| val.to_owned());
                }
            }
        }
        let bytes = resp.bytes().map_err(|e| ClientError::Unreachable(e.to_string()))?;
        if status.is_success() {
            serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
        } else {
            let body: ErrorBody = serde_json::from_slice(&bytes).map_err(|_| {
                ClientError::Decode(format!("HTTP {status}: {}", String::from_utf8_lossy(&bytes)))
            })?;
            Err(ClientError::Api {
                status: status.as_u16(),
                code: body.code,
                message: body.error,
            })
        }
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&mut self, path: &str, body: &B) -> ClientResult<R> {
        let rb = self.http.post(format!("{}{path}", self.base)).json(body);
        self.send(rb)
    }

    pub fn get<R: DeserializeOwned>(&mut self, path: &str) -> ClientResult<R> {
        let rb = self.http.get(format!("{}{path}", self.base));
        self.send(rb)
    }

    pub fn healthz(&mut self) -> ClientResult<Status> {
        self.get("/healthz")
    }

    // -- Registration --------------------------------------------------------

    pub fn register_begin(&mut self, username: &str, email: &str) -> ClientResult<ChallengeBody> {
        self.post(
            "/register/begin",
            &RegisterBegin {
                username: username.to_owned(),
                email: email.to_owned(),
            },
        )
    }

    pub fn register_finish(&mut self, username: &str, cred: &MakeCredentialResponse) -> ClientResult<Registered> {
        self.post(
            "/register/finish",
            &RegisterFinish {
                username: username.to_owned(),
                format: Format::Pp2pp,
                credential: serde_json::to_value(cred).expect("credential serializes"),
            },
        )
    }

    pub fn reenroll_begin(&mut self, username: &str) -> ClientResult<ChallengeBody> {
        self.post(
            "/register/reenroll",
            &Reenroll {
                username: username.to_owned(),
            },
        )
    }

    /// Full registration: challenge, card ceremony, finish.
    pub fn register(&mut self, card: &mut Card, pin: &str, username: &str, email: &str) -> ClientResult<Registered> {
        let c = self.register_begin(username, email)?;
        let cred = make_credential(card, pin, &c)?;
        self.register_finish(username, &cred)
    }

    // -- Authentication ------------------------------------------------------

    pub fn auth_begin(&mut self, username: &str) -> ClientResult<ChallengeBody> {
        self.post(
            "/auth/begin",
            &AuthBegin {
                username: username.to_owned(),
            },
        )
    }

    pub fn auth_finish(&mut self, username: &str, a: &AssertionResponse) -> ClientResult<PendingToken> {
        self.post(
            "/auth/finish",
            &AuthFinish {
                username: username.to_owned(),
                format: Format::Pp2pp,
                assertion: serde_json::to_value(a).expect("assertion serializes"),
            },
        )
    }

    /// Trade the pending token for a session; the cookie is kept.
    pub fn exchange(&mut self, token: &str) -> ClientResult<SessionBody> {
        self.post(
            "/auth/exchange",
            &Exchange {
                token: token.to_owned(),
            },
        )
    }

    /// Full login: challenge, card assertion, finish, exchange.
    pub fn login(&mut self, card: &mut Card, pin: &str, username: &str) -> ClientResult<SessionBody> {
        let c = self.auth_begin(username)?;
        let a = get_assertion(card, pin, username, &c, &c.rp_id)?;
        let p = self.auth_finish(username, &a)?;
        self.exchange(&p.token)
    }

    pub fn logout(&mut self) -> ClientResult<Status> {
        let r = self.post("/auth/logout", &serde_json::json!({}));
        self.session = None;
        r
    }

    pub fn link_issue(&mut self, email: &str) -> ClientResult<Status> {
        self.post(
            "/auth/link/issue",
            &LinkIssue {
                email: email.to_owned(),
            },
        )
    }

    pub fn link_consume(&mut self, link_or_payload: &str) -> ClientResult<SessionBody> {
        let p = crate::rp::link_payload_from(link_or_payload).to_owned();
        let rb = self
            .http
            .get(format!("{}/auth/link/consume", self.base))
            .query(&[("p", p)]);
        self.send(rb)
    }

    // -- Accounts and payments -------------------------------------------

    pub fn account(&mut self) -> ClientResult<Account> {
        self.get("/account")
    }

    pub fn open_account(&mut self, username: &str, deposit: u64) -> ClientResult<Account> {
        self.post(
            "/account/open",
            &OpenAccount {
                username: username.to_owned(),
                deposit,
            },
        )
    }

    pub fn history(&mut self, offset: usize, limit: usize) -> ClientResult<HistoryBody> {
        self.get(&format!("/account/history?offset={offset}&limit={limit}"))
    }

    pub fn pay_direct(&mut self, payee: &str, amount: u64) -> ClientResult<Transaction> {
        self.post(
            "/pay/direct",
            &DirectPay {
                payee: payee.to_owned(),
                amount,
            },
        )
    }

    pub fn token_create(&mut self, kind: TokenKind, amount: Option<u64>) -> ClientResult<IssuedToken> {
        self.post("/pay/token/create", &TokenCreate { kind, amount })
    }

    pub fn token_redeem(&mut self, token: &str, amount: Option<u64>) -> ClientResult<Transaction> {
        self.post(
            "/pay/token/redeem",
            &TokenRedeem {
                token: token.to_owned(),
                amount,
            },
        )
    }

    pub fn token_revoke(&mut self, token_id: &str) -> ClientResult<PaymentToken> {
        self.post(
            "/pay/token/revoke",
            &TokenRevoke {
                token_id: token_id.to_owned(),
            },
        )
    }

    pub fn request(&mut self, payer: &str, amount: u64) -> ClientResult<Transaction> {
        self.post(
            "/pay/request",
            &PayRequest {
                payer: payer.to_owned(),
                amount,
            },
        )
    }

    pub fn acknowledge(&mut self, txn_id: &str, accept: bool) -> ClientResult<Transaction> {
        self.post(
            "/pay/acknowledge",
            &Acknowledge {
                txn_id: txn_id.to_owned(),
                accept,
            },
        )
    }

    pub fn dispute_open(&mut self, txn_id: &str, reason: &str) -> ClientResult<Transaction> {
        self.post(
            "/dispute/open",
            &DisputeOpen {
                txn_id: txn_id.to_owned(),
                reason: reason.to_owned(),
            },
        )
    }

    pub fn dispute_resolve(&mut self, txn_id: &str, outcome: DisputeOutcome) -> ClientResult<Transaction> {
        self.post(
            "/dispute/resolve",
            &DisputeResolve {
                txn_id: txn_id.to_owned(),
                outcome,
            },
        )
    }
}

fn challenge_bytes(c: &ChallengeBody) -> ClientResult<Vec<u8>> {
    b64::decode(&c.challenge).ok_or_else(|| ClientError::Decode("challenge is not base64url".into()))
}

/// Have the card enroll for the challenge's RP and user handle.
pub fn make_credential(card: &mut Card, pin: &str, c: &ChallengeBody) -> ClientResult<MakeCredentialResponse> {
    let user = b64::decode(&c.user_handle).ok_or_else(|| ClientError::Decode("user handle".into()))?;
    Ok(card.make_credential(&c.rp_id, &user, &challenge_bytes(c)?, pin)?)
}

/// Ask the card to sign `c` as if the relying party were `presented_rp_id`.
/// Honest clients pass `c.rp_id`.
pub fn get_assertion(
    card: &mut Card,
    pin: &str,
    username: &str,
    c: &ChallengeBody,
    presented_rp_id: &str,
) -> ClientResult<AssertionResponse> {
    let challenge = challenge_bytes(c)?;
    let cd = ClientData::new(CLIENT_DATA_GET, &challenge, &format!("https://{presented_rp_id}")).to_bytes();
    Ok(card.get_assertion(presented_rp_id, Some(username.as_bytes()), &challenge, &cd, pin)?)
}
