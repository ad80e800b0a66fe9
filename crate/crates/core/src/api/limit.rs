//! Per-IP token buckets, one per endpoint class.

use std::net::IpAddr;

use dashmap::DashMap;

use crate::clock::{Millis, SharedClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Auth,
    Payment,
    Default,
}

impl Class {
    pub fn of(path: &str) -> Class {
        if path.starts_with("/auth/") || path.starts_with("/register/") {
            Class::Auth
        } else if path.starts_with("/pay/") || path.starts_with("/dispute/") {
            Class::Payment
        } else {
            Class::Default
        }
    }
}

/// `burst` requests, refilled evenly over `period_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rate {
    pub burst: u32,
    pub period_ms: u64,
}

impl Rate {
    pub const fn per_minute(n: u32) -> Self {
        Self {
            burst: n,
            period_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RateLimits {
    pub auth: Rate,
    pub payment: Rate,
    pub default: Rate,
}

impl Default for RateLimits {
    fn default() -> Self {
        Self {
            auth: Rate::per_minute(10),
            payment: Rate::per_minute(60),
            default: Rate::per_minute(120),
        }
    }
}

impl RateLimits {
    fn rate(&self, class: Class) -> Rate {
        match class {
            Class::Auth => self.auth,
            Class::Payment => self.payment,
            Class::Default => self.default,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bucket {
    /// In units of `1/period_ms` requests: a request costs `period_ms`,
    /// and each millisecond adds `burst`.
    level: u128,
    at: Millis,
}

pub struct Limiter {
    limits: RateLimits,
    clock: SharedClock,
    buckets: DashMap<(Class, IpAddr), Bucket>,
}

impl Limiter {
    pub fn new(limits: RateLimits, clock: SharedClock) -> Self {
        Self {
            limits,
            clock,
            buckets: DashMap::new(),
        }
    }

    fn cap(rate: Rate) -> u128 {
        rate.burst as u128 * rate.period_ms.max(1) as u128
    }

    fn refill(rate: Rate, b: &mut Bucket, now: Millis) {
        let gained = now.saturating_sub(b.at) as u128 * rate.burst as u128;
        b.level = (b.level + gained).min(Self::cap(rate));
        b.at = b.at.max(now);
    }

    /// Take one request from `ip`'s bucket for `class`.
    pub fn check(&self, class: Class, ip: IpAddr) -> bool {
        let rate = self.limits.rate(class);
        let now = self.clock.now_ms();
        let mut b = self.buckets.entry((class, ip)).or_insert(Bucket {
            level: Self::cap(rate),
            at: now,
        });
        Self::refill(rate, &mut b, now);
        let cost = rate.period_ms.max(1) as u128;
        if b.level >= cost {
            b.level -= cost;
            true
        } else {
            false
        }
    }

    /// Forget buckets that have fully refilled.
    pub fn retain_recent(&self) {
        let now = self.clock.now_ms();
        self.buckets.retain(|(class, _), b| {
            let rate = self.limits.rate(*class);
            Self::refill(rate, b, now);
            b.level < Self::cap(rate)
        });
    }

    pub fn tracked(&self) -> usize {
        self.buckets.len()
    }
}
