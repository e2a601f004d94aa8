// `!(x > 0.0)` is used on purpose throughout validation so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod game;
pub mod net;
pub mod pipeline;
