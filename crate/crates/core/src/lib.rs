pub mod agent;
pub mod bridge;
pub mod buffer;
pub mod checkpoint;
pub mod dist;
pub mod dpvp;
pub mod env;
pub mod expert;
pub mod nn;
pub mod shared;
pub mod train;
pub mod selftest;

// Book chapters are compiled and run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    pub mod simulator {}
    #[doc = include_str!("../../../book/src/interventions.md")]
    pub mod interventions {}
    #[doc = include_str!("../../../book/src/shared-control.md")]
    pub mod shared_control {}
    #[doc = include_str!("../../../book/src/running.md")]
    pub mod running {}
    #[doc = include_str!("../../../book/src/bridge.md")]
    pub mod bridge {}
}
