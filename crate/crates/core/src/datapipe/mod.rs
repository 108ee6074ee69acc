//! Data machinery: feature files, manifests, pseudo-labeling, relabeling and
//! a synthetic corpus generator.

pub mod features;
pub mod manifest;
pub mod pseudo;
pub mod relabel;
pub mod synth;

pub use features::{read_features, write_features};
pub use manifest::{read_manifest, write_manifest, Dataset, ManifestRecord, Sample, Split};
pub use pseudo::{
    consensus_label, majority_vote, merge_segments, pseudolabel, utterance_pseudo_label, window_split, ConsensusConfig,
    RawLabel, Segment,
};
pub use relabel::{relabel_manifest, two_pass_relabel, RelabelStats};
pub use synth::{synth_dataset, synth_samples, SynthConfig};
