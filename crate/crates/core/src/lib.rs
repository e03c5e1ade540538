//! Laboratory for encoder-decoder prediction of 64x64 LCU intra block
//! partitioning: partition-tree data model, fixed/variable vector codecs,
//! constraint-masked autoregressive decoding, a CNN+Transformer engine and
//! a brute-force RD-proxy oracle for labels and equivalence testing.

pub mod codec;
pub mod constraints;
pub mod dataset;
pub mod eval;
pub mod frame;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod partition;

pub use codec::{EdgeIndex, EdgeVector, ModeSequence, EDGE_COUNT, MEM_COLS, MEM_ROWS};
pub use constraints::{allowed_modes, masked_argmax, ConstraintRules, ModeMask};
pub use frame::{FrameBuffer, LcuInput};
pub use metrics::{bd_rate, time_saving, RdPoint, TimingRecord};
pub use nn::{ModelConfig, ModelWeights, TensorF32};
pub use oracle::{LabeledLcu, RdProxyConfig};
pub use partition::{child_rects, validate_tree, CuRect, PartitionTree, SplitMode};
