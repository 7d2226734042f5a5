//! Library surface of the CLI: benchmark runners, the attack simulator,
//! disk-session plumbing and report formatting. The `poul` binary is a thin
//! dispatcher over these.

pub mod attack;
pub mod bench;
pub mod report;
pub mod session;
