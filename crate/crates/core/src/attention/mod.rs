//! Lifted-feature attention: depth-lifted camera features, two-stage
//! sampling plans, query aggregation and the refinement blocks.

mod aggregate;
mod blocks;
mod encode;
mod features;
mod plan;
mod refine;
mod sample;

pub use aggregate::aggregate_query_update;
pub use blocks::{init_queries, run_block, run_blocks, BlockDims, BlockOutput, BlockStack, BlockWeights};
pub use encode::{cell_key, offset_index, sparse_self_encode, SparseConv, KERNEL_OFFSETS};
pub use features::{
    build_depth_distribution, read_feature_pyramid, write_feature_pyramid, CameraPyramid, DepthBins, DepthDistributionMap, FeatureLevel, FeatureMap,
    DEFAULT_DEPTH_BINS, DEFAULT_DEPTH_MAX,
};
pub use plan::{
    gen_reference_points, plan_from_query, softmax_in_place, PlanShape, QueryHeads, SamplingPlan,
    DEFAULT_REFERENCE_POINTS, DEFAULT_SAMPLES_PER_REFERENCE, DEFAULT_SCALES,
};
pub use refine::{apply_deltas, logit, refine, sigmoid, Mlp};
pub use sample::{
    accumulate_sample, project_reference, sample_3d, sample_3d_grad, ProjectedPoint, SampleGrad, DEFAULT_Z_NEAR,
};
