//! Event streams, annotation files and synthetic color-event sequences.

mod annotations;
mod events;
mod synth;

pub use annotations::{
    parse_annotations, parse_attributes, parse_results, serialize_annotations,
    serialize_attributes, serialize_results, TrackAnnotation,
};
pub use events::{
    parse_events, parse_events_binary, parse_events_csv, serialize_events_binary,
    serialize_events_csv, slice_window, EventFormat, EventPoint, EventStream, EventWindow,
    Polarity, BINARY_MAGIC, BINARY_RECORD_LEN,
};
pub use synth::{generate_synthetic, SyntheticScene, SyntheticSceneConfig};
