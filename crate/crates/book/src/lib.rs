//! The guide under `book/src`, compiled so that its code listings run as
//! doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/nonparametric.md")]
pub mod nonparametric {}
#[doc = include_str!("../../../book/src/cox.md")]
pub mod cox {}
#[doc = include_str!("../../../book/src/panel.md")]
pub mod panel {}
#[doc = include_str!("../../../book/src/pseudo.md")]
pub mod pseudo {}
#[doc = include_str!("../../../book/src/frailty.md")]
pub mod frailty {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/reproducing.md")]
pub mod reproducing {}
