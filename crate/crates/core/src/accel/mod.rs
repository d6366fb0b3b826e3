//! Bit-exact model of the fixed-point datapath: line buffers, a 32-lane
//! depthwise engine, a 32×32 pointwise engine, and a sigmoid table.

mod engines;
mod linebuf;
mod lut;
mod model;
mod qops;

pub use engines::{conv, dw_conv, pw_conv, std_conv, DwEngine, PwEngine, QConvLayer, DW_TAPS};
pub use linebuf::{stream_group, stream_patches, GroupPatch, LineBuffer};
pub use lut::{sigmoid_lut, SigmoidLut, LUT_SIZE};
pub use model::{act_name, check_datapath, run_quantized, DeviceSplit, QuantTrace, QuantizedModel, ACT_PREFIX};
pub use qops::{concat_q, elem_add_q, elem_mul_q, global_avg_pool_q, relu_q};

/// Channel lanes processed in parallel.
pub const LANES: usize = 32;
