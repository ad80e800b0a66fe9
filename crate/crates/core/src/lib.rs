pub mod clock;
pub mod crypto;
pub mod store;
pub mod audit;
pub mod authenticator;
pub mod rp;
pub mod ledger;
pub mod api;
pub mod client;
pub mod attack;
pub mod bench;
