//! Minimal layers with hand-written backward passes.

mod layers;
mod optim;
mod tensor;

pub(crate) use layers::kaiming_uniform;
pub use layers::{BatchNorm2d, BnCache, BnMode, Conv2d, Param};
pub use optim::{LrSchedule, RmsProp};
pub use tensor::{
    concat, gate_channels, leaky_relu_backward_inplace, leaky_relu_inplace, split_channels, upsample2,
    upsample2_backward, Tensor,
};
