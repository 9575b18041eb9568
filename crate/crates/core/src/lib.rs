//! Desk-scale phoneme recognition for noisy classroom audio.
//!
//! The pipeline runs WAV ingestion ([`audio`]), log-mel features
//! ([`features`]), transcript normalization ([`textnorm`]) and lexicon
//! phonemization ([`phonemize`]), shoebox room simulation ([`roomsim`]),
//! spectrogram masking ([`specaugment`]), a Conv + bidirectional GRU network
//! ([`model`]) trained with CTC ([`ctc`], [`train`]), and edit-distance
//! scoring ([`metrics`]). [`baseline`] holds an MFCC/PCA/linear keyword
//! classifier and [`data`] the manifest and feature-file formats plus a
//! synthetic tone corpus.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod audio;
pub mod baseline;
pub mod ctc;
pub mod data;
pub mod features;
pub mod metrics;
pub mod model;
pub mod phonemize;
pub mod roomsim;
pub mod seed;
pub mod specaugment;
pub mod textnorm;
pub mod train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Es,
    En,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Es => "es",
            Language::En => "en",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "es" => Ok(Language::Es),
            "en" => Ok(Language::En),
            other => Err(format!("unknown language `{other}` (expected es or en)")),
        }
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/phonemes.md")]
    mod phonemes {}
    #[doc = include_str!("../../../book/src/room.md")]
    mod room {}
    #[doc = include_str!("../../../book/src/ctc.md")]
    mod ctc {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
}
