//! Case-based explanations for image classifiers.
//!
//! A test image's salient parts are located with an activation map or with
//! superpixels and each part is linked to the most similar salient region of a
//! nearest-neighbour training image. Numeric kernels are generic over
//! [`Scalar`]; the pipeline itself runs in `f32` and the crate root exports
//! `f32` aliases for convenience.

pub mod ablation;
pub mod backend;
pub mod error;
pub mod geometry;
pub mod index;
pub mod latent_match;
pub mod record;
pub mod render;
pub mod saliency;
pub mod scalar;
pub mod stats;
pub mod superpixel_match;
pub mod superpixels;
pub mod threshold;
pub mod types;

pub use ablation::{
    equal_area_region, generate_masked_dataset, run_ablation, AblationConfig, AblationMethod, AblationMode,
    AblationResult, MaskMethod, MaskedEntry,
};
pub use backend::{load_model, ModelBundle, ModelManifest, Network, NetworkOutputs, Pooling, Prediction};
pub use error::{Error, Result};
pub use geometry::{l2_distance, upsample_cell_to_box, upsample_map_bilinear};
pub use index::{build_index, read_dataset_manifest, LatentIndex, Neighbor, NeighborPool, OnUnreadable, RecordMeta};
pub use latent_match::{
    constrained_cell_argmin, explain_latent, match_latent, select_test_region, ConvCache, LatentConfig,
    LatentMatchQuery, MatchedRegion, RegionMatch,
};
pub use record::{ExplanationMethod, ExplanationRecord, FeatureRecord};
pub use render::render_explanation;
pub use saliency::{
    cam, fam, lime_saliency, random_map, superpixel_logit_saliency, top_cells, LimeConfig, MapKind,
    SaliencyMethod, SuperpixelSaliency,
};
pub use scalar::Scalar;
pub use superpixel_match::{
    constrained_segment_argmin, explain_superpixel, featurize_segments, match_superpixel, SegmentCache,
    SegmentSet, SegmentedImage, SuperpixelConfig, SuperpixelFeature, SuperpixelMatchQuery, TestSaliency,
};
pub use superpixels::{crop_upsample_region, occlude_except, occlude_only, slic, Segmentation, SlicParams};
pub use threshold::RelativeThreshold;
pub use types::{ImageTensor, PixelBox, SpatialCell};

/// Single-precision instantiations of the generic containers.
pub type FeatureMap = types::FeatureMap3D<f32>;
pub type Latent = types::LatentVector<f32>;
pub type ActivationMap = types::ActivationMap<f32>;
pub type Matrix = types::Matrix<f32>;
