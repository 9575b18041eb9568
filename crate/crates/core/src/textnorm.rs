//! Transcript clean-up: annotation stripping, case folding, number and
//! roman-numeral expansion, and character filtering.

use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use thiserror::Error;

use crate::phonemize::Lexicon;
use crate::Language;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("number `{0}` is above the supported range 0..=9999")]
    UnsupportedNumber(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub text: String,
    pub language: Language,
}

impl Transcript {
    pub fn new(text: impl Into<String>, language: Language) -> Self {
        Self {
            text: text.into(),
            language,
        }
    }
}

fn annotation_patterns() -> &'static [Regex; 3] {
    static PATTERNS: OnceLock<[Regex; 3]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            // speaker label at the start of a line: "Miguel:", "Facilitator 2:"
            Regex::new(r"(?m)^[ \t]*\p{Lu}[\p{L}'.\-]*(?:[ \t]+[\p{L}\d'.\-]+)?[ \t]*:[ \t]*")
                .unwrap(),
            Regex::new(r"\[[^\]]*\]").unwrap(),
            Regex::new(r"\([^)]*\)").unwrap(),
        ]
    })
}

/// Removes speaker prefixes, `[...]` stage directions and `(...)` comments,
/// then tidies the punctuation and whitespace left behind.
pub fn strip_annotations(raw: &str) -> String {
    let [speaker, brackets, parens] = annotation_patterns();
    let s = speaker.replace_all(raw, "");
    let s = brackets.replace_all(&s, " ");
    let s = parens.replace_all(&s, " ");
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    // punctuation orphaned by a removed comment, as in "(Inaudible). You know?"
    let trimmed =
        collapsed.trim_start_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    trimmed.trim_end().to_string()
}

fn allowed(c: char, lang: Language) -> bool {
    match lang {
        Language::Es => c.is_ascii_lowercase() || "áéíóúüñ".contains(c),
        Language::En => c.is_ascii_lowercase() || c == '\'',
    }
}

/// Parses uppercase roman numerals I..=XX.
pub fn parse_roman(token: &str) -> Option<u32> {
    static ROMAN: OnceLock<Regex> = OnceLock::new();
    let re = ROMAN.get_or_init(|| Regex::new(r"^(X{0,2})(IX|IV|V?I{0,3})$").unwrap());
    if token.is_empty() || !re.is_match(token) {
        return None;
    }
    let value = |c| match c {
        'I' => 1,
        'V' => 5,
        'X' => 10,
        _ => 0,
    };
    let chars: Vec<u32> = token.chars().map(value).collect();
    let mut total = 0;
    for (i, &v) in chars.iter().enumerate() {
        if chars.get(i + 1).is_some_and(|&next| next > v) {
            total -= v as i32;
        } else {
            total += v as i32;
        }
    }
    (1..=20).contains(&total).then_some(total as u32)
}

const ES_ORDINALS: [&str; 20] = [
    "primero",
    "segundo",
    "tercero",
    "cuarto",
    "quinto",
    "sexto",
    "séptimo",
    "octavo",
    "noveno",
    "décimo",
    "undécimo",
    "duodécimo",
    "decimotercero",
    "decimocuarto",
    "decimoquinto",
    "decimosexto",
    "decimoséptimo",
    "decimoctavo",
    "decimonoveno",
    "vigésimo",
];

const EN_ORDINALS: [&str; 20] = [
    "first",
    "second",
    "third",
    "fourth",
    "fifth",
    "sixth",
    "seventh",
    "eighth",
    "ninth",
    "tenth",
    "eleventh",
    "twelfth",
    "thirteenth",
    "fourteenth",
    "fifteenth",
    "sixteenth",
    "seventeenth",
    "eighteenth",
    "nineteenth",
    "twentieth",
];

pub fn ordinal_word(n: u32, lang: Language) -> Option<&'static str> {
    let idx = n.checked_sub(1)? as usize;
    match lang {
        Language::Es => ES_ORDINALS.get(idx).copied(),
        Language::En => EN_ORDINALS.get(idx).copied(),
    }
}

const ES_UNITS: [&str; 30] = [
    "cero",
    "uno",
    "dos",
    "tres",
    "cuatro",
    "cinco",
    "seis",
    "siete",
    "ocho",
    "nueve",
    "diez",
    "once",
    "doce",
    "trece",
    "catorce",
    "quince",
    "dieciséis",
    "diecisiete",
    "dieciocho",
    "diecinueve",
    "veinte",
    "veintiuno",
    "veintidós",
    "veintitrés",
    "veinticuatro",
    "veinticinco",
    "veintiséis",
    "veintisiete",
    "veintiocho",
    "veintinueve",
];
const ES_TENS: [&str; 10] = [
    "",
    "",
    "",
    "treinta",
    "cuarenta",
    "cincuenta",
    "sesenta",
    "setenta",
    "ochenta",
    "noventa",
];
const ES_HUNDREDS: [&str; 10] = [
    "",
    "ciento",
    "doscientos",
    "trescientos",
    "cuatrocientos",
    "quinientos",
    "seiscientos",
    "setecientos",
    "ochocientos",
    "novecientos",
];

const EN_UNITS: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];
const EN_TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

fn es_below_100(n: u32) -> String {
    if n < 30 {
        ES_UNITS[n as usize].to_string()
    } else if n.is_multiple_of(10) {
        ES_TENS[(n / 10) as usize].to_string()
    } else {
        format!(
            "{} y {}",
            ES_TENS[(n / 10) as usize],
            ES_UNITS[(n % 10) as usize]
        )
    }
}

fn es_below_1000(n: u32) -> String {
    match n {
        100 => "cien".to_string(),
        0..=99 => es_below_100(n),
        _ if n.is_multiple_of(100) => ES_HUNDREDS[(n / 100) as usize].to_string(),
        _ => format!(
            "{} {}",
            ES_HUNDREDS[(n / 100) as usize],
            es_below_100(n % 100)
        ),
    }
}

fn en_below_100(n: u32) -> String {
    if n < 20 {
        EN_UNITS[n as usize].to_string()
    } else if n.is_multiple_of(10) {
        EN_TENS[(n / 10) as usize].to_string()
    } else {
        format!(
            "{} {}",
            EN_TENS[(n / 10) as usize],
            EN_UNITS[(n % 10) as usize]
        )
    }
}

fn en_below_1000(n: u32) -> String {
    if n < 100 {
        en_below_100(n)
    } else if n.is_multiple_of(100) {
        format!("{} hundred", EN_UNITS[(n / 100) as usize])
    } else {
        format!(
            "{} hundred {}",
            EN_UNITS[(n / 100) as usize],
            en_below_100(n % 100)
        )
    }
}

/// Spells out `0..=9999` as cardinal words.
pub fn cardinal_words(n: u32, lang: Language) -> Result<String, TextError> {
    if n > 9999 {
        return Err(TextError::UnsupportedNumber(n.to_string()));
    }
    let (thousands, rest) = (n / 1000, n % 1000);
    let words = match lang {
        Language::Es => {
            let head = match thousands {
                0 => String::new(),
                1 => "mil".to_string(),
                k => format!("{} mil", ES_UNITS[k as usize]),
            };
            join_nonempty(
                head,
                if rest == 0 && thousands > 0 {
                    String::new()
                } else {
                    es_below_1000(rest)
                },
            )
        }
        Language::En => {
            let head = if thousands > 0 {
                format!("{} thousand", EN_UNITS[thousands as usize])
            } else {
                String::new()
            };
            join_nonempty(
                head,
                if rest == 0 && thousands > 0 {
                    String::new()
                } else {
                    en_below_1000(rest)
                },
            )
        }
    };
    Ok(words)
}

fn join_nonempty(a: String, b: String) -> String {
    match (a.is_empty(), b.is_empty()) {
        (true, _) => b,
        (_, true) => a,
        _ => format!("{a} {b}"),
    }
}

fn starts_uppercase(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

/// Lowercases, expands numbers and roman numerals, and strips everything
/// outside the language's alphabet.
///
/// Roman numerals I..XX become ordinals only directly after a capitalized
/// word ("Carlos VII" → "carlos séptimo"); an English lone "I" is never
/// expanded. Tokens mixing digits and letters are dropped with a warning.
pub fn normalize(t: &Transcript) -> Result<Transcript, TextError> {
    let lang = t.language;
    let mut out: Vec<String> = Vec::new();
    let mut prev_capitalized = false;
    for token in t.text.split_whitespace() {
        let core: String = token
            .chars()
            .filter(|c| c.is_alphanumeric() || (lang == Language::En && *c == '\''))
            .collect();
        let has_digit = core.chars().any(|c| c.is_ascii_digit());
        let has_alpha = core.chars().any(char::is_alphabetic);
        let capitalized = starts_uppercase(&core);
        if has_digit && has_alpha {
            warn!("dropping mixed alphanumeric token `{token}`");
            prev_capitalized = false;
            continue;
        }
        if has_digit {
            let digits: String = core.chars().filter(|c| c.is_ascii_digit()).collect();
            let n: u32 = match digits.trim_start_matches('0').len() {
                0 => 0,
                len if len > 4 => return Err(TextError::UnsupportedNumber(digits)),
                _ => digits
                    .parse()
                    .map_err(|_| TextError::UnsupportedNumber(digits.clone()))?,
            };
            out.push(cardinal_words(n, lang)?);
            prev_capitalized = false;
            continue;
        }
        let lone_i = lang == Language::En && core == "I";
        if prev_capitalized && !lone_i {
            if let Some(word) = parse_roman(&core).and_then(|n| ordinal_word(n, lang)) {
                out.push(word.to_string());
                prev_capitalized = false;
                continue;
            }
        }
        let cleaned: String = core
            .to_lowercase()
            .chars()
            .filter(|&c| allowed(c, lang))
            .collect();
        if !cleaned.is_empty() {
            out.push(cleaned);
        }
        prev_capitalized = capitalized;
    }
    Ok(Transcript::new(out.join(" "), lang))
}

/// True when every token is in the lexicon of the transcript's own language.
pub fn is_monolingual(t: &Transcript, lexicon_es: &Lexicon, lexicon_en: &Lexicon) -> bool {
    let lex = match t.language {
        Language::Es => lexicon_es,
        Language::En => lexicon_en,
    };
    t.text.split_whitespace().all(|w| lex.contains(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(s: &str, lang: Language) -> String {
        normalize(&Transcript::new(s, lang)).unwrap().text
    }

    #[test]
    fn strips_table_examples() {
        assert_eq!(
            strip_annotations("Miguel: Hello? [Miguel answers his mom on the phone]"),
            "Hello?"
        );
        assert_eq!(
            strip_annotations("Facilitator: (Inaudible). You know?"),
            "You know?"
        );
        assert_eq!(
            strip_annotations("Matias: Ahí esta mejor. (This is better.)"),
            "Ahí esta mejor."
        );
        assert_eq!(strip_annotations("hello"), "hello");
    }

    #[test]
    fn normalizes_table_examples() {
        assert_eq!(norm("Hello?", Language::En), "hello");
        assert_eq!(norm("You know?", Language::En), "you know");
        assert_eq!(norm("Ahí está mejor.", Language::Es), "ahí está mejor");
        assert_eq!(norm("Carlos VII", Language::Es), "carlos séptimo");
        assert_eq!(norm("tengo 5", Language::Es), "tengo cinco");
        assert_eq!(norm("¿Cómo estás?", Language::Es), "cómo estás");
    }

    #[test]
    fn roman_numerals_need_a_capitalized_predecessor() {
        assert_eq!(norm("Yes I can", Language::En), "yes i can");
        assert_eq!(norm("Louis XIV", Language::En), "louis fourteenth");
        assert_eq!(norm("capítulo VII", Language::Es), "capítulo vii");
        assert_eq!(parse_roman("XX"), Some(20));
        assert_eq!(parse_roman("XIX"), Some(19));
        assert_eq!(parse_roman("IIII"), None);
        assert_eq!(parse_roman("XXX"), None);
    }

    #[test]
    fn spanish_cardinals() {
        let cases = [
            (0, "cero"),
            (16, "dieciséis"),
            (21, "veintiuno"),
            (31, "treinta y uno"),
            (100, "cien"),
            (101, "ciento uno"),
            (500, "quinientos"),
            (999, "novecientos noventa y nueve"),
            (1000, "mil"),
            (2023, "dos mil veintitrés"),
            (7000, "siete mil"),
            (9999, "nueve mil novecientos noventa y nueve"),
        ];
        for (n, w) in cases {
            assert_eq!(cardinal_words(n, Language::Es).unwrap(), w, "{n}");
        }
    }

    #[test]
    fn english_cardinals() {
        let cases = [
            (0, "zero"),
            (13, "thirteen"),
            (42, "forty two"),
            (300, "three hundred"),
            (1001, "one thousand one"),
            (9999, "nine thousand nine hundred ninety nine"),
        ];
        for (n, w) in cases {
            assert_eq!(cardinal_words(n, Language::En).unwrap(), w, "{n}");
        }
    }

    #[test]
    fn large_numbers_and_mixed_tokens() {
        assert_eq!(
            normalize(&Transcript::new("hay 10000", Language::Es)).unwrap_err(),
            TextError::UnsupportedNumber("10000".into())
        );
        assert_eq!(norm("play the mp3 now", Language::En), "play the now");
        assert_eq!(norm("don't stop", Language::En), "don't stop");
    }

    #[test]
    fn monolingual_check() {
        let es = Lexicon::parse(
            "hola\to l a\ncómo\tk o m o\nestás\te s t a s\n",
            Language::Es,
        )
        .unwrap();
        let en = Lexicon::parse("my\tm aɪ\nfriend\tf ɹ ɛ n d\n", Language::En).unwrap();
        assert!(is_monolingual(
            &Transcript::new("hola cómo estás", Language::Es),
            &es,
            &en
        ));
        assert!(!is_monolingual(
            &Transcript::new("hola my friend", Language::Es),
            &es,
            &en
        ));
        assert!(is_monolingual(&Transcript::new("", Language::Es), &es, &en));
    }

    fn alphabet_ok(s: &str, lang: Language) -> bool {
        !s.starts_with(' ')
            && !s.ends_with(' ')
            && !s.contains("  ")
            && s.chars().all(|c| c == ' ' || allowed(c, lang))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn normalize_is_idempotent_and_clean(
            s in "[a-zA-ZáéíóúñÁÉÍÓÚÑ0-9 .,;:¿?¡!'\\-()\\[\\]IVX]{0,40}",
            es in any::<bool>(),
        ) {
            let lang = if es { Language::Es } else { Language::En };
            let Ok(once) = normalize(&Transcript::new(s, lang)) else {
                return Ok(());
            };
            prop_assert!(alphabet_ok(&once.text, lang), "bad output {:?}", once.text);
            let twice = normalize(&once).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
