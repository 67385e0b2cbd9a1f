//! Procedural try-on world: articulated figures wearing textured garments,
//! with pose videos, agnostic videos/masks and exact ground truth for every
//! garment in the pool.

mod dataset;
mod garment;
mod render;
mod scene;

pub use dataset::{
    build_dataset, generate, Dataset, DatasetDir, GarmentRecord, Manifest, SampleFiles, SampleRecord, Split,
    FORMAT_VERSION, MANIFEST_FILE,
};
pub use garment::{garment_pool, GarmentSpec, Pattern};
pub use render::{
    apply_agnostic, render_frame, render_mask, render_pose, render_sample, render_video, texture_torso, Sample,
    AGNOSTIC_FILL, POSE_STROKE_RADIUS,
};
pub use scene::{
    inside_quad, make_scene, quad_is_simple, quad_uv, Background, GenerationConfig, Joint, JointKind, Quad,
    SceneSpec,
};
