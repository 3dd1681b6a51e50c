//! Runs the guide chapters under `book/src` as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/detector.md")]
pub mod detector {}

#[doc = include_str!("../../../book/src/controller.md")]
pub mod controller {}

#[doc = include_str!("../../../book/src/transport.md")]
pub mod transport {}

#[doc = include_str!("../../../book/src/server.md")]
pub mod server {}

#[doc = include_str!("../../../book/src/macros.md")]
pub mod macros {}

#[doc = include_str!("../../../book/src/calibration.md")]
pub mod calibration {}

#[doc = include_str!("../../../book/src/tools.md")]
pub mod tools {}
