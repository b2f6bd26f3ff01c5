//! Neuron-abandoning back-propagation: layer inverses, the backward cascade
//! of feature maps, and decision-neuron accounting.

mod cascade;
mod composite;
mod dump;
mod inverse;
mod jacobian;
mod retention;
mod solve;

pub use cascade::{backprop_feature_maps, layer_round_trip, BpfmStack, LayerDiagnostics, RoundTrip};
pub use composite::{compose_frozen_affine, compose_range, frozen_forward, frozen_layer_apply, AffineComposite};
pub use dump::{dump_bpfm, BpfmEntry, BpfmIndex, BPFM_BLOB, BPFM_INDEX};
pub use inverse::{
    invert_batchnorm, invert_conv, invert_leakyrelu, invert_maxpool, invert_relu, ConvInverse, MIN_BN_SCALE,
};
pub use jacobian::{assemble_conv_jacobian, ConvJacobian};
pub use retention::{compute_retention, count_neuron_times, NeuronTimesReport, RetentionSet};
pub use solve::{independent_rows, invert_affine_square, RowSource, SolveDiagnostics, SolvePath};
