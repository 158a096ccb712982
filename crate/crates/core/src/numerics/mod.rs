//! Deterministic tensor math with hand-written backward passes.

mod adam;
mod conv;
mod gdn;
mod tensor;

pub use adam::{adam_step, AdamState, ParamSlot};
pub use conv::{conv2d_backward, conv2d_forward, tconv2d_backward, tconv2d_forward, ConvParams};
pub use gdn::{gdn_backward, gdn_forward, igdn_backward, igdn_forward, GdnParams, BETA_MIN};
pub use tensor::{concat_batch, Shape, Tensor};
