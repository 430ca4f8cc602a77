//! Test-time TTS augmentation for short-utterance speaker verification.
//!
//! The crate covers the whole evaluation path: cutting utterances to short
//! segments ([`audio`]), obtaining bona-fide and TTS-generated embeddings from
//! external services ([`backends`]), fusing them ([`fusion`], [`training`]),
//! scoring trial lists ([`scoring`]) and analysing the phoneme coverage of
//! synthesis texts ([`phoneme`]). [`sim`] generates embeddings with known
//! structure so every stage can be exercised without pretrained models.

pub mod audio;
pub mod backends;
pub mod embedding;
pub mod fsutil;
pub mod fusion;
pub mod phoneme;
pub mod scoring;
pub mod sim;
pub mod store;
pub mod training;
pub mod trial;

pub use embedding::{l2_normalize, Embedding, VectorError, DEFAULT_DIM};
pub use store::{EmbeddingStore, StoreError};
pub use trial::{Label, Trial};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/phonemes.md")]
    mod phonemes {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
