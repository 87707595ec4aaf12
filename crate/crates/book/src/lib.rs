// mdbook cannot run listings that depend on a workspace crate, so each
// chapter is pulled in as module docs and rustdoc runs them instead.
// One module per chapter keeps failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/heads.md")]
pub mod heads {}
#[doc = include_str!("../../../book/src/routing.md")]
pub mod routing {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/taskgen.md")]
pub mod taskgen {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
