//! Skeletons, body-part partitions, motion sequences, the synthetic corpus and motion files.

mod corpus;
mod io;
mod sequence;
mod skeleton;

pub use corpus::{
    class_by_name, generate_synthetic_corpus, sample_rng, synthesize_motion, CorpusConfig, CorpusSample,
    MotionClass, TextSample, FILLER_WORDS, MOTION_CLASSES, TOY_FPS,
};
pub use io::{
    load_corpus, load_motion, motion_from_csv, motion_from_json, motion_to_csv, motion_to_json, read_manifest,
    save_motion, write_corpus, ManifestEntry, MOTION_VERSION,
};
pub use sequence::{
    compute_velocity, flatten_tokens, frame_velocity, rearrange_frames, rearrange_to_tokens, resample_frames,
    token_span, MotionSequence,
};
pub use skeleton::{humanml3d_gather_index, BodyPart, BodyPartition, Skeleton, TokenLayout};
