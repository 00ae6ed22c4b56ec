//! Forward and backward kernels, grouped by family. Each file extends
//! [`Tape`](crate::tape::Tape) with the recording methods for its ops.

pub mod conv;
pub(crate) mod linalg;
pub mod loss;
pub mod norm;

pub use conv::{conv_out_len, rotate90};
pub use loss::{batch_hard_choices, TripletChoice, TripletStats, PROB_FLOOR};
pub use norm::{BatchStats, BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
