//! Review workflow for candidate near-duplicate pairs: lease-based assignment
//! to reviewers, an append-only decision log, and an HTTP front end.

mod clock;
mod server;
mod session;

pub use clock::{Clock, ManualClock, SystemClock};
pub use server::{router, serve, AppState, DEFAULT_PORT};
pub use session::{PairStatus, Progress, ReviewSession, LEASE};
