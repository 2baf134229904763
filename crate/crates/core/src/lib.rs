//! Idle-cycle distributed hill climbing coordinated through a shared
//! directory, plus a deterministic fleet simulator.

pub mod clock;
pub mod coordination;
pub mod master;
pub mod objective;
pub mod optimizer;
pub mod sim;
pub mod storage;
pub mod worker;
