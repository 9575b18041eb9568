//! Edit distance and corpus-level error rates (PER, WER, CER).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("reference corpus has no tokens")]
    EmptyRefCorpus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edits {
    pub ins: usize,
    pub del: usize,
    pub sub: usize,
}

impl Edits {
    pub fn total(&self) -> usize {
        self.ins + self.del + self.sub
    }
}

impl std::ops::AddAssign for Edits {
    fn add_assign(&mut self, o: Self) {
        self.ins += o.ins;
        self.del += o.del;
        self.sub += o.sub;
    }
}

/// How reference and hypothesis strings are split into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Space-separated phoneme labels.
    Phoneme,
    Word,
    /// Unicode scalar values, spaces excluded.
    Char,
}

impl Granularity {
    pub fn tokenize(self, s: &str) -> Vec<String> {
        match self {
            Granularity::Phoneme | Granularity::Word => {
                s.split_whitespace().map(str::to_string).collect()
            }
            Granularity::Char => s
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

impl FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phoneme" => Ok(Self::Phoneme),
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            o => Err(format!("unknown granularity `{o}`")),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Phoneme => "phoneme",
            Self::Word => "word",
            Self::Char => "char",
        })
    }
}

/// Unit-cost edit distance from `reference` to `hypothesis` with the edit
/// breakdown of one optimal alignment.
///
/// The backtrace prefers a substitution (or match), then a deletion, then an
/// insertion whenever several moves are optimal.
///
/// ```
/// use phonorec::metrics::levenshtein;
/// let s = |w: &str| w.chars().collect::<Vec<_>>();
/// let (d, e) = levenshtein(&s("shine"), &s("shrine"));
/// assert_eq!((d, e.ins), (1, 1));
/// ```
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, Edits) {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for (j, v) in d.iter_mut().take(w).enumerate() {
        *v = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = (d[(i - 1) * w + j - 1] + cost)
                .min(d[(i - 1) * w + j] + 1)
                .min(d[i * w + j - 1] + 1);
        }
    }
    let mut edits = Edits::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + cost == here {
                edits.sub += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            edits.del += 1;
            i -= 1;
        } else {
            edits.ins += 1;
            j -= 1;
        }
    }
    (d[n * w + m], edits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub granularity: Granularity,
    /// Total edits over total reference tokens. Exceeds 1 when insertions dominate.
    pub rate: f64,
    pub accuracy_pct: f64,
    pub n_ref_tokens: usize,
    pub n_utterances: usize,
    pub edits: Edits,
}

/// Corpus-level error rate: Σ distances / Σ reference lengths.
pub fn error_rate<T: PartialEq>(
    refs: &[Vec<T>],
    hyps: &[Vec<T>],
    granularity: Granularity,
) -> Result<MetricReport, MetricError> {
    if refs.len() != hyps.len() {
        return Err(MetricError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let n_ref_tokens: usize = refs.iter().map(Vec::len).sum();
    if n_ref_tokens == 0 {
        return Err(MetricError::EmptyRefCorpus);
    }
    let mut edits = Edits::default();
    for (r, h) in refs.iter().zip(hyps) {
        edits += levenshtein(r, h).1;
    }
    let rate = edits.total() as f64 / n_ref_tokens as f64;
    Ok(MetricReport {
        granularity,
        rate,
        accuracy_pct: accuracy_pct(rate),
        n_ref_tokens,
        n_utterances: refs.len(),
        edits,
    })
}

/// Tokenizes string pairs and scores them.
pub fn error_rate_str(
    refs: &[&str],
    hyps: &[&str],
    granularity: Granularity,
) -> Result<MetricReport, MetricError> {
    let tok = |xs: &[&str]| {
        xs.iter()
            .map(|s| granularity.tokenize(s))
            .collect::<Vec<_>>()
    };
    error_rate(&tok(refs), &tok(hyps), granularity)
}

pub fn accuracy_pct(rate: f64) -> f64 {
    100.0 * (1.0 - rate)
}
