//! Adversarial scenarios. Each one runs the honest client path with a
//! single malicious twist and reports whether the server (or card)
//! refused it.

use std::net::IpAddr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::authenticator::Card;
use crate::client::{get_assertion, Client, ClientError, ClientResult};
use crate::crypto::b64;

pub const PHISHING_RP_ID: &str = "evil.local";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attack {
    Phish,
    Replay,
    Hijack,
    ReuseLink,
    ReuseToken,
}

impl Attack {
    pub const ALL: [Attack; 5] = [
        Attack::Phish,
        Attack::Replay,
        Attack::Hijack,
        Attack::ReuseLink,
        Attack::ReuseToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attack::Phish => "phish",
            Attack::Replay => "replay",
            Attack::Hijack => "hijack",
            Attack::ReuseLink => "reuse-link",
            Attack::ReuseToken => "reuse-token",
        }
    }

    /// The code a correct system answers with.
    pub fn expected_code(self) -> &'static str {
        match self {
            Attack::Phish => "invalid_domain",
            Attack::Replay => "challenge_missing",
            Attack::Hijack => "session_invalid",
            Attack::ReuseLink => "link_invalid",
            Attack::ReuseToken => "token_missing",
        }
    }
}

impl std::str::FromStr for Attack {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attack::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown attack {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub attack: Attack,
    /// `true` when every malicious attempt was refused.
    pub rejected: bool,
    /// Codes returned to the malicious attempts, in order.
    pub codes: Vec<String>,
}

impl Outcome {
    /// Refused, and only with the expected code.
    pub fn as_expected(&self) -> bool {
        self.rejected && self.codes.iter().all(|c| c == self.attack.expected_code())
    }
}

/// What an attack needs: a registered victim whose card the attacker
/// drives, and the server.
pub struct Victim<'a> {
    pub base_url: &'a str,
    pub username: &'a str,
    pub email: &'a str,
    pub card: &'a mut Card,
    pub pin: &'a str,
}

/// Hooks into the environment the attack runs in.
pub struct Env<'a> {
    /// Second source address for the hijacker's connection.
    pub hijack_from: IpAddr,
    /// Read the newest one-time link mailed to an address.
    pub fetch_link: &'a mut dyn FnMut(&str) -> Option<String>,
}

fn attempt<T>(r: ClientResult<T>, codes: &mut Vec<String>) -> ClientResult<bool> {
    match r {
        Ok(_) => {
            codes.push("accepted".into());
            Ok(false)
        }
        Err(e) if e.is_rejection() => {
            codes.push(e.code().unwrap_or_default().to_owned());
            Ok(true)
        }
        Err(e) => Err(e),
    }
}

/// Run one attack. `Err` means an honest setup step failed, not that the
/// attack succeeded.
pub fn run(attack: Attack, v: &mut Victim<'_>, env: &mut Env<'_>) -> ClientResult<Outcome> {
    let mut codes = Vec::new();
    let mut client = Client::new(v.base_url)?;
    let rejected = match attack {
        Attack::Phish => {
            // a look-alike site relays the genuine challenge
            let c = client.auth_begin(v.username)?;
            match get_assertion(v.card, v.pin, v.username, &c, PHISHING_RP_ID) {
                Err(e) => attempt::<()>(Err(e), &mut codes)?,
                Ok(a) => attempt(client.auth_finish(v.username, &a), &mut codes)?,
            }
        }
        Attack::Replay => {
            let c = client.auth_begin(v.username)?;
            let a = get_assertion(v.card, v.pin, v.username, &c, &c.rp_id)?;
            client.auth_finish(v.username, &a)?;
            let mut eavesdropper = Client::new(v.base_url)?;
            attempt(eavesdropper.auth_finish(v.username, &a), &mut codes)?
        }
        Attack::Hijack => {
            client.login(v.card, v.pin, v.username)?;
            client.history(0, 1)?;
            let stolen = client.session_cookie().ok_or(ClientError::NoSession)?.to_owned();

            let mut thief = Client::bound_to(v.base_url, env.hijack_from)?;
            thief.set_session_cookie(Some(stolen.clone()));
            let other_ip = attempt(thief.history(0, 1), &mut codes)?;

            let mut raw = b64::decode(&stolen).ok_or_else(|| ClientError::Decode("cookie".into()))?;
            let bit = rand::thread_rng().gen_range(0..raw.len() * 8);
            raw[bit / 8] ^= 1 << (bit % 8);
            let mut forger = Client::new(v.base_url)?;
            forger.set_session_cookie(Some(b64::encode(&raw)));
            let flipped = attempt(forger.history(0, 1), &mut codes)?;
            other_ip && flipped
        }
        Attack::ReuseLink => {
            client.link_issue(v.email)?;
            let link = (env.fetch_link)(v.email)
                .ok_or_else(|| ClientError::Decode(format!("no link delivered to {}", v.email)))?;
            client.link_consume(&link)?;
            let mut again = Client::new(v.base_url)?;
            attempt(again.link_consume(&link), &mut codes)?
        }
        Attack::ReuseToken => {
            let c = client.auth_begin(v.username)?;
            let a = get_assertion(v.card, v.pin, v.username, &c, &c.rp_id)?;
            let p = client.auth_finish(v.username, &a)?;
            client.exchange(&p.token)?;
            let mut again = Client::new(v.base_url)?;
            attempt(again.exchange(&p.token), &mut codes)?
        }
    };
    Ok(Outcome {
        attack,
        rejected,
        codes,
    })
}
