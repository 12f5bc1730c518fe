//! Dense visual embedding toolkit.
//!
//! Everything downstream of a frozen vision-language teacher: segment embedding
//! refinement, cosine distillation into a per-pixel student, closed-set
//! segmentation (text references, visual means, linear probe), mIoU evaluation,
//! and a sparse 3D cell map of fused embeddings.

pub mod closed_set;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod io;
pub mod map3d;
pub mod optim;
pub mod synth;
pub mod volume;

pub use closed_set::{
    classify_argmax, evaluate_miou, probe_predict, similarity_map, LabelMap, MiouReport, ProbeWeights, ReferenceSet,
    IGNORE_LABEL,
};
pub use distill::{LossReport, StudentParams};
pub use embedding::{cosine_similarity, l2_normalize, suppress_context, EmbeddingVector, SuppressionConfig};
pub use error::{Error, Result};
pub use io::{Dtype, EmbeddingBank};
pub use map3d::{CameraIntrinsics, EmbeddingMap3D, MapBuilder, Pose, VoxelKey};
pub use optim::{Optimizer, TrainConfig};
pub use volume::{DenseEmbeddingMap, SegmentMaskMap, SegmentRecord, SegmentRecords, TeacherVolume};
