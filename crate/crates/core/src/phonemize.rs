//! IPA phoneme inventories, pronunciation lexicons, and the integer label
//! encoding consumed by CTC.
//!
//! Multi-character phonemes such as `aɪ`, `tʃ` or `oːɹ` are atomic labels.
//! Label 0 is always the CTC blank; Spanish inventories reserve label 1 for
//! the word-boundary symbol.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Language;

/// Printed form of the CTC blank label.
pub const BLANK: &str = "_";
/// Printed form of the word-boundary label.
pub const SPACE: &str = "|";

const EN_SC: [&str; 40] = [
    "aɪ", "aʊ", "b", "d", "eɪ", "f", "h", "i", "iə", "iː", "j", "k", "l", "m", "n", "oʊ", "oːɹ",
    "p", "s", "t", "uː", "v", "w", "z", "æ", "ɑː", "ɑːɹ", "ɔ", "ə", "əl", "ɚ", "ɛ", "ɜː", "ɡ", "ɪ",
    "ɹ", "ʃ", "ʌ", "ʒ", "θ",
];

const ES_AOLME: [&str; 36] = [
    "a", "aɪ", "aʊ", "b", "d", "e", "eɪ", "eʊ", "f", "i", "j", "k", "l", "m", "n", "o", "oɪ", "p",
    "pː", "r", "s", "t", "tʃ", "u", "w", "x", "ð", "ŋ", "ɔ", "ɛ", "ɡ", "ɣ", "ɲ", "ɾ", "ʝ", "β",
];

/// Extra phonemes of Castilian Spanish.
const ES_CSS10_EXTRA: [&str; 2] = ["ʎ", "θ"];

const LEXICON_EN: &str = include_str!("../assets/lexicons/en.tsv");
const LEXICON_ES: &str = include_str!("../assets/lexicons/es.tsv");

#[derive(Debug, Error, PartialEq)]
pub enum PhonemeError {
    #[error("unknown inventory tag `{0}` (expected en_sc, es_aolme or es_css10)")]
    UnknownTag(String),
    #[error("word `{0}` is not in the lexicon")]
    OutOfVocabulary(String),
    #[error("phoneme `{0}` is not in the inventory")]
    UnknownPhoneme(String),
    #[error("inventory has no word-boundary label")]
    NoSpaceLabel,
    #[error("label id {0} is outside the inventory or is the blank")]
    InvalidLabel(u32),
    #[error("inventory labels must be unique; `{0}` repeats")]
    DuplicateLabel(String),
    #[error("lexicon line {line}: {reason}")]
    BadLexiconLine { line: usize, reason: String },
    #[error("lexicon entry `{word}` uses phoneme `{phoneme}` missing from inventory {inventory}")]
    LexiconPhoneme {
        word: String,
        phoneme: String,
        inventory: String,
    },
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InventoryTag {
    /// English keyword vocabulary.
    EnSc,
    /// Latin American classroom Spanish.
    EsAolme,
    /// Castilian Spanish (adds `ʎ` and `θ`).
    EsCss10,
}

impl InventoryTag {
    pub const ALL: [InventoryTag; 3] = [
        InventoryTag::EnSc,
        InventoryTag::EsAolme,
        InventoryTag::EsCss10,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InventoryTag::EnSc => "en_sc",
            InventoryTag::EsAolme => "es_aolme",
            InventoryTag::EsCss10 => "es_css10",
        }
    }
}

impl fmt::Display for InventoryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InventoryTag {
    type Err = PhonemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InventoryTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PhonemeError::UnknownTag(s.to_string()))
    }
}

/// Ordered label set: blank at index 0, optional word-boundary label, then
/// phonemes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    labels: Vec<String>,
    space_index: Option<u32>,
    name: String,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PhonemeInventory {
    /// Builds an inventory from phoneme symbols; the blank (and the word
    /// boundary, when `with_space`) are prepended.
    pub fn new<S: AsRef<str>>(
        name: &str,
        phonemes: &[S],
        with_space: bool,
    ) -> Result<Self, PhonemeError> {
        let mut labels = vec![BLANK.to_string()];
        if with_space {
            labels.push(SPACE.to_string());
        }
        labels.extend(phonemes.iter().map(|p| p.as_ref().to_string()));
        Self::from_labels(name, labels)
    }

    /// Builds an inventory from a full label list whose first entry is the
    /// blank. A `|` entry becomes the word-boundary label.
    pub fn from_labels(name: &str, labels: Vec<String>) -> Result<Self, PhonemeError> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i as u32).is_some() {
                return Err(PhonemeError::DuplicateLabel(l.clone()));
            }
        }
        if labels.first().map(String::as_str) != Some(BLANK) {
            return Err(PhonemeError::UnknownPhoneme("blank must be label 0".into()));
        }
        let space_index = index.get(SPACE).copied();
        Ok(Self {
            labels,
            space_index,
            name: name.to_string(),
            index,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn blank_index(&self) -> u32 {
        0
    }

    pub fn space_index(&self) -> Option<u32> {
        self.space_index
    }

    pub fn id(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    /// Phoneme labels only (no blank, no word boundary).
    pub fn phonemes(&self) -> impl Iterator<Item = &str> {
        self.labels
            .iter()
            .map(String::as_str)
            .filter(|l| *l != BLANK && *l != SPACE)
    }

    /// Restores the lookup table after deserialization.
    pub fn reindexed(self) -> Result<Self, PhonemeError> {
        Self::from_labels(&self.name, self.labels)
    }
}

/// Returns one of the shipped inventories.
pub fn load_inventory(tag: InventoryTag) -> PhonemeInventory {
    let built = match tag {
        InventoryTag::EnSc => PhonemeInventory::new(tag.as_str(), &EN_SC, false),
        InventoryTag::EsAolme => PhonemeInventory::new(tag.as_str(), &ES_AOLME, true),
        InventoryTag::EsCss10 => {
            let all: Vec<&str> = ES_AOLME
                .iter()
                .chain(ES_CSS10_EXTRA.iter())
                .copied()
                .collect();
            PhonemeInventory::new(tag.as_str(), &all, true)
        }
    };
    built.expect("shipped inventories are well formed")
}

/// Parses a tag and returns the matching inventory.
pub fn load_inventory_str(tag: &str) -> Result<PhonemeInventory, PhonemeError> {
    Ok(load_inventory(tag.parse()?))
}

/// Word → phoneme-sequence pronunciation table.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub entries: BTreeMap<String, Vec<String>>,
    pub language: Language,
}

impl Lexicon {
    /// Parses `word<TAB>ph1 ph2 ...` lines; `#` starts a comment line.
    pub fn parse(text: &str, language: Language) -> Result<Self, PhonemeError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (word, phones) =
                line.split_once('\t')
                    .ok_or_else(|| PhonemeError::BadLexiconLine {
                        line: i + 1,
                        reason: "expected word<TAB>phonemes".into(),
                    })?;
            let phones: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
            if word.trim().is_empty() || phones.is_empty() {
                return Err(PhonemeError::BadLexiconLine {
                    line: i + 1,
                    reason: "empty word or pronunciation".into(),
                });
            }
            entries.insert(word.trim().to_string(), phones);
        }
        Ok(Self { entries, language })
    }

    pub fn load(path: impl AsRef<Path>, language: Language) -> Result<Self, PhonemeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PhonemeError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, language)
    }

    /// The lexicon shipped with the crate for `language`.
    pub fn seed(language: Language) -> Self {
        let text = match language {
            Language::En => LEXICON_EN,
            Language::Es => LEXICON_ES,
        };
        Self::parse(text, language).expect("shipped lexicons parse")
    }

    /// Checks that every phoneme of every entry belongs to `inv`.
    pub fn validate(&self, inv: &PhonemeInventory) -> Result<(), PhonemeError> {
        for (word, phones) in &self.entries {
            if let Some(p) = phones
                .iter()
                .find(|p| !inv.contains(p) || p.as_str() == BLANK || p.as_str() == SPACE)
            {
                return Err(PhonemeError::LexiconPhoneme {
                    word: word.clone(),
                    phoneme: p.clone(),
                    inventory: inv.name().to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(w, p)| format!("{w}\t{}\n", p.join(" ")))
            .collect()
    }
}

/// Exact lexicon lookup; there is no fallback synthesis.
pub fn phonemize_word(word: &str, lex: &Lexicon) -> Result<Vec<String>, PhonemeError> {
    lex.entries
        .get(word)
        .cloned()
        .ok_or_else(|| PhonemeError::OutOfVocabulary(word.to_string()))
}

/// Phonemizes every whitespace-separated word of a normalized sentence.
pub fn phonemize_sentence(text: &str, lex: &Lexicon) -> Result<Vec<Vec<String>>, PhonemeError> {
    text.split_whitespace()
        .map(|w| phonemize_word(w, lex))
        .collect()
}

/// Integer-encoded ground-truth transcript; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSeq {
    pub ids: Vec<u32>,
}

impl LabelSeq {
    /// Validates ids against the inventory.
    pub fn new(ids: Vec<u32>, inv: &PhonemeInventory) -> Result<Self, PhonemeError> {
        if let Some(&bad) = ids.iter().find(|&&id| id == 0 || id as usize >= inv.len()) {
            return Err(PhonemeError::InvalidLabel(bad));
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encodes a flat token list. The word-boundary symbol `|` is accepted when
/// the inventory has one.
pub fn encode_tokens<S: AsRef<str>>(
    tokens: &[S],
    inv: &PhonemeInventory,
) -> Result<LabelSeq, PhonemeError> {
    let ids = tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            match inv.id(t) {
                Some(0) | None => Err(PhonemeError::UnknownPhoneme(t.to_string())),
                Some(id) => Ok(id),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabelSeq { ids })
}

/// Encodes per-word phoneme lists, optionally separating words with the
/// word-boundary label.
pub fn encode<S: AsRef<str>>(
    words: &[Vec<S>],
    inv: &PhonemeInventory,
    insert_spaces: bool,
) -> Result<LabelSeq, PhonemeError> {
    let space = if insert_spaces {
        Some(inv.space_index().ok_or(PhonemeError::NoSpaceLabel)?)
    } else {
        None
    };
    let mut ids = Vec::new();
    for (i, word) in words.iter().enumerate() {
        if let (Some(s), true) = (space, i > 0) {
            ids.push(s);
        }
        ids.extend(encode_tokens(word, inv)?.ids);
    }
    Ok(LabelSeq { ids })
}

pub fn decode(seq: &LabelSeq, inv: &PhonemeInventory) -> Result<Vec<String>, PhonemeError> {
    seq.ids
        .iter()
        .map(|&id| match inv.label(id) {
            Some(l) if id != 0 => Ok(l.to_string()),
            _ => Err(PhonemeError::InvalidLabel(id)),
        })
        .collect()
}

/// Parses a phonemized transcript (`ph ph | ph ...`) into labels.
pub fn encode_transcript(text: &str, inv: &PhonemeInventory) -> Result<LabelSeq, PhonemeError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    encode_tokens(&tokens, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn inventory_sizes() {
        let en = load_inventory(InventoryTag::EnSc);
        let aolme = load_inventory(InventoryTag::EsAolme);
        let css10 = load_inventory(InventoryTag::EsCss10);
        assert_eq!(en.len(), 41);
        assert_eq!(aolme.len(), 38);
        assert_eq!(css10.len(), 40);
        assert_eq!(css10.len() - aolme.len(), 2);
        for inv in [&en, &aolme, &css10] {
            assert_eq!(inv.label(0), Some(BLANK));
        }
        assert_eq!(en.space_index(), None);
        assert_eq!(aolme.space_index(), Some(1));
        let extra: Vec<&str> = css10.phonemes().filter(|p| !aolme.contains(p)).collect();
        assert_eq!(extra, vec!["ʎ", "θ"]);
    }

    #[test]
    fn english_inventory_lacks_eth_and_eng() {
        let en = load_inventory(InventoryTag::EnSc);
        assert!(en.contains("θ"));
        assert!(!en.contains("ð"));
        assert!(!en.contains("ŋ"));
    }

    #[test]
    fn unknown_tag() {
        assert_eq!(
            load_inventory_str("fr_xx").unwrap_err(),
            PhonemeError::UnknownTag("fr_xx".into())
        );
        assert_eq!(load_inventory_str("es_aolme").unwrap().len(), 38);
    }

    #[test]
    fn table_words() {
        let es = Lexicon::seed(Language::Es);
        let en = Lexicon::seed(Language::En);
        assert_eq!(
            phonemize_word("museo", &es).unwrap(),
            ["m", "u", "s", "e", "o"]
        );
        assert_eq!(phonemize_word("hola", &es).unwrap(), ["o", "l", "a"]);
        assert_eq!(phonemize_word("cat", &en).unwrap(), ["k", "æ", "t"]);
        assert_eq!(
            phonemize_word("xylophone", &en).unwrap_err(),
            PhonemeError::OutOfVocabulary("xylophone".into())
        );
    }

    #[test]
    fn seed_lexicons_validate() {
        Lexicon::seed(Language::En)
            .validate(&load_inventory(InventoryTag::EnSc))
            .unwrap();
        Lexicon::seed(Language::Es)
            .validate(&load_inventory(InventoryTag::EsAolme))
            .unwrap();
        let bad = Lexicon::parse("gracias\tɡ ɾ a θ j a s\n", Language::Es).unwrap();
        assert!(bad
            .validate(&load_inventory(InventoryTag::EsAolme))
            .is_err());
        bad.validate(&load_inventory(InventoryTag::EsCss10))
            .unwrap();
    }

    #[test]
    fn encode_excludes_blank_and_separates_words() {
        let inv = load_inventory(InventoryTag::EsAolme);
        let ola = encode(&[vec!["o", "l", "a"]], &inv, false).unwrap();
        assert_eq!(ola.len(), 3);
        assert!(ola.ids.iter().all(|&i| i != 0));

        let two = encode(
            &[vec!["o", "l", "a"], vec!["m", "u", "s", "e", "o"]],
            &inv,
            true,
        )
        .unwrap();
        assert_eq!(two.len(), 3 + 5 + 1);
        assert_eq!(two.ids[3], 1);

        assert_eq!(
            encode(&[vec!["ʎ"]], &inv, false).unwrap_err(),
            PhonemeError::UnknownPhoneme("ʎ".into())
        );
        assert_eq!(
            encode(
                &[vec!["k"], vec!["æ"]],
                &load_inventory(InventoryTag::EnSc),
                true
            )
            .unwrap_err(),
            PhonemeError::NoSpaceLabel
        );
        assert!(encode_tokens(&["_"], &inv).is_err());
    }

    #[test]
    fn label_seq_rejects_blank() {
        let inv = load_inventory(InventoryTag::EnSc);
        assert_eq!(
            LabelSeq::new(vec![3, 0], &inv).unwrap_err(),
            PhonemeError::InvalidLabel(0)
        );
        assert_eq!(
            LabelSeq::new(vec![41], &inv).unwrap_err(),
            PhonemeError::InvalidLabel(41)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn encode_decode_round_trip(tag in 0usize..3, raw in proptest::collection::vec(1u32..1000, 0..20)) {
            let inv = load_inventory(InventoryTag::ALL[tag]);
            let ids: Vec<u32> = raw.iter().map(|r| 1 + r % (inv.len() as u32 - 1)).collect();
            let seq = LabelSeq::new(ids, &inv).unwrap();
            let tokens = decode(&seq, &inv).unwrap();
            prop_assert_eq!(encode_tokens(&tokens, &inv).unwrap(), seq);
        }
    }
}
