pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nas;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autograd::{ConvVars, Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

// The guide's snippets run as doc-tests, one module per chapter so a
// failure points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/architecture.md")]
    mod architecture {}
    #[doc = include_str!("../../../book/src/costs.md")]
    mod costs {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data-metrics.md")]
    mod data_metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
