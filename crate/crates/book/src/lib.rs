//! Compiles every listing of the guide in `book/src` as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/tweedie.md")]
mod tweedie {}

#[doc = include_str!("../../../book/src/splines.md")]
mod splines {}

#[doc = include_str!("../../../book/src/fitting.md")]
mod fitting {}

#[doc = include_str!("../../../book/src/penalties.md")]
mod penalties {}

#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[doc = include_str!("../../../book/src/data_cli.md")]
mod data_cli {}
