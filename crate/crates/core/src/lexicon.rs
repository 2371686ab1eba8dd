//! Object-name normalization and a small noun lexicon.
//!
//! Names are trimmed, lowercased and singularized on their last word so that
//! "Apples", "apple" and "an apple" all collapse onto `apple`. The lexicon is
//! used by the rule-based helper to find object mentions in free text.

use std::collections::BTreeMap;

/// Plural forms that the suffix rules would get wrong.
const IRREGULAR: &[(&str, &str)] = &[
    ("people", "person"),
    ("persons", "person"),
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("mice", "mouse"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("shelves", "shelf"),
    ("loaves", "loaf"),
    ("wolves", "wolf"),
    ("teeth", "tooth"),
    ("feet", "foot"),
    ("geese", "goose"),
    ("buses", "bus"),
    ("oxen", "ox"),
    ("cacti", "cactus"),
];

/// Words that look plural but are used as-is.
const INVARIANT: &[&str] = &[
    "scissors", "skis", "glasses", "pants", "jeans", "shorts", "clothes", "species", "series",
    "news", "sheep", "fish", "deer", "lens", "canvas", "always", "across", "perhaps",
];

/// Singularize a single lowercase word using a small rule table.
pub fn singularize_word(word: &str) -> String {
    if let Some((_, single)) = IRREGULAR.iter().find(|(plural, _)| *plural == word) {
        return (*single).to_string();
    }
    if INVARIANT.contains(&word) || word.len() <= 3 {
        return word.to_string();
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ies") {
        return format!("{stem}y");
    }
    if let Some(stem) = word.strip_suffix("es") {
        if stem.ends_with("ss")
            || stem.ends_with('x')
            || stem.ends_with('z')
            || stem.ends_with("ch")
            || stem.ends_with("sh")
        {
            return stem.to_string();
        }
        if stem.ends_with("to") || stem.ends_with("ato") {
            return stem.to_string();
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        return stem.to_string();
    }
    word.to_string()
}

/// Split text into lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .map(|w| w.strip_suffix("'s").map(str::to_string).unwrap_or(w))
        .collect()
}

const LEADING_DETERMINERS: &[&str] = &["a", "an", "the", "some", "two", "three", "several", "many"];

/// Normalize an object name: trim, lowercase, drop leading determiners and
/// singularize the head (last) word.
pub fn normalize_name(raw: &str) -> String {
    let mut words = tokenize(raw);
    while words.len() > 1 && LEADING_DETERMINERS.contains(&words[0].as_str()) {
        words.remove(0);
    }
    if let Some(last) = words.last_mut() {
        *last = singularize_word(last);
    }
    words.join(" ")
}

/// Singularized token stream, used for lemma scans over free text.
pub fn lemma_tokens(text: &str) -> Vec<String> {
    tokenize(text).iter().map(|w| singularize_word(w)).collect()
}

/// Every word of a normalized name singularized: the form text is matched in.
pub fn lemma_key(name: &str) -> Vec<String> {
    lemma_tokens(&normalize_name(name))
}

/// True if the normalized (possibly multi-word) `lemma` occurs as a
/// contiguous token run in `text` after singularization.
pub fn mentions(text: &str, lemma: &str) -> bool {
    let needle = lemma_key(lemma);
    if needle.is_empty() {
        return false;
    }
    let hay = lemma_tokens(text);
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Common nouns that show up in captions but are not in the default vocabulary.
const EXTRA_NOUNS: &[&str] = &[
    "table", "plate", "window", "tree", "building", "man", "woman", "child", "shelf", "lamp",
    "door", "picture", "painting", "flower", "napkin", "basket", "pillow", "blanket",
    "curtain", "mirror", "towel", "box", "bag", "hat", "shirt", "sign", "road", "street",
    "sidewalk", "fence", "pole", "computer", "monitor", "phone", "desk", "cabinet", "counter",
];

/// A set of normalized object nouns, matched greedily (longest first) over text.
#[derive(Debug, Clone, Default)]
pub struct NounLexicon {
    /// Lemma key -> normalized name.
    entries: BTreeMap<Vec<String>, String>,
    max_len: usize,
}

impl NounLexicon {
    pub fn new<I, S>(nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Self::default();
        lex.extend(nouns);
        lex
    }

    /// The default vocabulary plus common caption nouns.
    pub fn standard() -> Self {
        Self::new(crate::data::vocab().iter().map(String::as_str).chain(EXTRA_NOUNS.iter().copied()))
    }

    pub fn extend<I, S>(&mut self, nouns: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for noun in nouns {
            let norm = normalize_name(noun.as_ref());
            if norm.is_empty() {
                continue;
            }
            let key = lemma_key(&norm);
            self.max_len = self.max_len.max(key.len());
            self.entries.entry(key).or_insert(norm);
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(&lemma_key(name))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Object nouns in `text`, deduplicated, in order of first mention.
    pub fn find_all(&self, text: &str) -> Vec<String> {
        self.find_all_with(text, "")
    }

    /// [`find_all`](Self::find_all) with one extra (normalized) entry treated as known.
    pub fn find_all_with(&self, text: &str, extra: &str) -> Vec<String> {
        let extra_name = normalize_name(extra);
        let extra = lemma_key(&extra_name);
        let max_len = self.max_len.max(extra.len());
        let tokens = lemma_tokens(text);
        let mut found: Vec<String> = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=max_len.min(tokens.len() - i)).rev().find(|&len| {
                let window = &tokens[i..i + len];
                (!extra.is_empty() && window == extra.as_slice()) || self.entries.contains_key(window)
            });
            match longest {
                Some(len) => {
                    let window = &tokens[i..i + len];
                    let name = if window == extra.as_slice() {
                        extra_name.clone()
                    } else {
                        self.entries[window].clone()
                    };
                    if !found.contains(&name) {
                        found.push(name);
                    }
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_rules() {
        assert_eq!(singularize_word("apples"), "apple");
        assert_eq!(singularize_word("cherries"), "cherry");
        assert_eq!(singularize_word("boxes"), "box");
        assert_eq!(singularize_word("benches"), "bench");
        assert_eq!(singularize_word("vases"), "vase");
        assert_eq!(singularize_word("glass"), "glass");
        assert_eq!(singularize_word("bus"), "bus");
        assert_eq!(singularize_word("people"), "person");
        assert_eq!(singularize_word("tomatoes"), "tomato");
        assert_eq!(singularize_word("scissors"), "scissors");
    }

    #[test]
    fn normalize_strips_articles_and_case() {
        assert_eq!(normalize_name("  The Apples "), "apple");
        assert_eq!(normalize_name("an apple"), "apple");
        assert_eq!(normalize_name("Dining Tables"), "dining table");
    }

    #[test]
    fn lexicon_dedups_in_mention_order() {
        let lex = NounLexicon::standard();
        assert_eq!(lex.find_all("Apples and an apple on a table"), vec!["apple", "table"]);
        assert_eq!(lex.find_all("A banana next to the dining table."), vec!["banana", "dining table"]);
        assert!(lex.find_all("It looks sunny and bright.").is_empty());
    }

    #[test]
    fn mention_scan_matches_plurals_and_possessives() {
        assert!(mentions("the wooden table's legs", "table"));
        assert!(mentions("Two tables stand there", "table"));
        assert!(!mentions("The object is made of wood", "table"));
        assert!(!mentions("a dining room", "dining table"));
    }

    #[test]
    fn plural_modifiers_match_their_canonical_name() {
        let lex = NounLexicon::standard();
        assert_eq!(lex.find_all("I can see a sports ball."), vec!["sports ball"]);
        assert!(mentions("The sports ball is new.", "sports ball"));
        assert_eq!(lex.find_all_with("Two gizmos here", "gizmo"), vec!["gizmo"]);
        assert!(lex.contains("Sports Balls"));
    }
}
