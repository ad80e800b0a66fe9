//! Registration and authentication timing over a live server, printed in
//! the layout of the key-registration and authentication-time tables.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::authenticator::Card;
use crate::client::{get_assertion, make_credential, Client, ClientResult};

/// Averages reported for the reference deployment over a ~3 Mbps link.
pub const REFERENCE_REGISTER_TOTAL_MS: f64 = 579.4;
pub const REFERENCE_AUTH_TOTAL_MS: f64 = 496.4;

const PIN: &str = "bench-pin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Register,
    Auth,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "register" => Ok(Mode::Register),
            "auth" | "authenticate" => Ok(Mode::Auth),
            _ => Err(format!("unknown bench mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub op: Mode,
    pub t_create_challenge: f64,
    pub t_verify: f64,
    /// Measured end to end, card work included; not the sum of the others.
    pub t_total: f64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

fn unique(prefix: &str) -> String {
    format!("{prefix}-{}", &uuid::Uuid::new_v4().simple().to_string()[..12])
}

/// Run `n` timed ceremonies against `base_url`.
pub fn run(base_url: &str, mode: Mode, n: usize) -> ClientResult<Vec<TimingRecord>> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let mut client = Client::new(base_url)?;
    match mode {
        Mode::Register => {
            for _ in 0..n {
                let user = unique("bench");
                let mut card = Card::new(PIN);
                let t0 = Instant::now();
                let c = client.register_begin(&user, &format!("{user}@bench.local"))?;
                let t_create_challenge = ms(t0);
                let cred = make_credential(&mut card, PIN, &c)?;
                let t1 = Instant::now();
                client.register_finish(&user, &cred)?;
                let t_verify = ms(t1);
                out.push(TimingRecord {
                    op: mode,
                    t_create_challenge,
                    t_verify,
                    t_total: ms(t0),
                });
            }
        }
        Mode::Auth => {
            let user = unique("bench");
            let mut card = Card::new(PIN);
            client.register(&mut card, PIN, &user, &format!("{user}@bench.local"))?;
            for _ in 0..n {
                let t0 = Instant::now();
                let c = client.auth_begin(&user)?;
                let t_create_challenge = ms(t0);
                let a = get_assertion(&mut card, PIN, &user, &c, &c.rp_id)?;
                let t1 = Instant::now();
                let p = client.auth_finish(&user, &a)?;
                client.exchange(&p.token)?;
                let t_verify = ms(t1);
                out.push(TimingRecord {
                    op: mode,
                    t_create_challenge,
                    t_verify,
                    t_total: ms(t0),
                });
            }
        }
    }
    Ok(out)
}

/// `(create, verify, total)` means, or `None` for an empty run.
pub fn averages(rows: &[TimingRecord]) -> Option<(f64, f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let sum = |f: fn(&TimingRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some((
        sum(|r| r.t_create_challenge),
        sum(|r| r.t_verify),
        sum(|r| r.t_total),
    ))
}

fn headers(mode: Mode) -> [&'static str; 4] {
    match mode {
        Mode::Register => [
            "Sl.No.",
            "Time to create challenge",
            "Time to verify and register key",
            "Total time for processing",
        ],
        Mode::Auth => [
            "Sl.No",
            "Time to create challenge",
            "Time to verify & authorize",
            "Total time for processing",
        ],
    }
}

pub fn title(mode: Mode) -> &'static str {
    match mode {
        Mode::Register => "Key registration time",
        Mode::Auth => "Authentication and unlock time",
    }
}

fn fmt_ms(v: f64) -> String {
    format!("{v:.1}ms")
}

/// Human-readable table with an `Average` row when non-empty.
pub fn render_table(mode: Mode, rows: &[TimingRecord]) -> String {
    let h = headers(mode);
    let mut body: Vec<[String; 4]> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            [
                (i + 1).to_string(),
                fmt_ms(r.t_create_challenge),
                fmt_ms(r.t_verify),
                fmt_ms(r.t_total),
            ]
        })
        .collect();
    if let Some((a, b, c)) = averages(rows) {
        body.push(["Average".into(), fmt_ms(a), fmt_ms(b), fmt_ms(c)]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|i| body.iter().map(|r| r[i].len()).chain([h[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: [&str; 4]| -> String {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let _ = write!(s, "| {:<w$} ", c, w = widths[i]);
        }
        s.push_str("|\n");
        s
    };
    let rule: String = widths.iter().map(|w| format!("+{}", "-".repeat(w + 2))).collect::<String>() + "+\n";
    let mut out = format!("{}\n{rule}", title(mode));
    out.push_str(&line(h));
    out.push_str(&rule);
    for r in &body {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3]]));
    }
    out.push_str(&rule);
    out
}

/// CSV with the same columns, times in milliseconds.
pub fn render_csv(mode: Mode, rows: &[TimingRecord]) -> String {
    let h = headers(mode);
    let mut out = format!("{},{},{},{}\n", h[0], h[1], h[2], h[3]);
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:.3},{:.3},{:.3}",
            i + 1,
            r.t_create_challenge,
            r.t_verify,
            r.t_total
        );
    }
    if let Some((a, b, c)) = averages(rows) {
        let _ = writeln!(out, "Average,{a:.3},{b:.3},{c:.3}");
    }
    out
}
