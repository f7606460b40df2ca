//! Synthetic corpus generation and on-disk corpus ingestion.

mod corpus;
mod synthetic;

pub use corpus::{load_corpus, write_corpus, Corpus, CorpusManifest, Example, ManifestEntry, Split};
pub use synthetic::{
    generate_corpus, generate_synthetic_pair, phoneme_track, CorpusSpec, Phoneme, PhonemeTrack, SyntheticFace,
    SyntheticStyleSpec, PHONEMES,
};
