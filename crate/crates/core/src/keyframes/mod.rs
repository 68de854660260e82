//! Keyframe selection for fine-tuning: every view of the first frame plus
//! the frontal frames whose time embeddings stray furthest from the mean.

mod select;
mod set;

pub use select::{deviations, select_keyframes, DeviationNorm, Exclusion};
pub use set::{
    assign_identifiers, build_keyframe_set, select_temporal_frames, Keyframe, KeyframeConfig, KeyframeEntry,
    KeyframeManifest, KeyframeSet, KEYFRAME_MANIFEST_FILE, KEYFRAME_MANIFEST_VERSION,
};
