//! Rule-based tokenization, singular/plural lemmatization and stopwords.

use std::collections::BTreeSet;

const IRREGULAR: &[(&str, &str)] = &[
    ("person", "people"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("goose", "geese"),
    ("mouse", "mice"),
    ("ox", "oxen"),
    ("knife", "knives"),
    ("leaf", "leaves"),
    ("shelf", "shelves"),
    ("wolf", "wolves"),
    ("loaf", "loaves"),
    ("half", "halves"),
    ("calf", "calves"),
    ("life", "lives"),
    ("wife", "wives"),
    ("scarf", "scarves"),
    ("thief", "thieves"),
    ("sheep", "sheep"),
    ("fish", "fish"),
    ("deer", "deer"),
    ("glasses", "glasses"),
    ("pants", "pants"),
    ("jeans", "jeans"),
    ("shorts", "shorts"),
    ("scissors", "scissors"),
    ("bus", "buses"),
    ("cactus", "cacti"),
];

// Never inflected, never dropped: directional and relational words.
const SPATIAL_TERMS: &[&str] = &[
    "left", "right", "above", "below", "under", "over", "behind", "front", "near", "far", "top", "bottom",
    "beside", "between", "inside", "outside", "next", "on", "in", "beneath", "underneath", "across", "along",
    "around", "against", "atop", "upon", "within", "closer", "closest", "farther", "farthest", "further",
    "nearest", "up", "down", "off", "out", "onto", "into", "through", "toward", "towards", "away",
];

// Function words only; spatial prepositions are deliberately absent.
const STOPWORDS: &[&str] = &[
    "a", "about", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "because",
    "been", "before", "being", "both", "but", "by", "can", "could", "did", "do", "does", "doing", "each", "either",
    "few", "for", "from", "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how", "i",
    "if", "is", "it", "its", "itself", "just", "may", "me", "might", "more", "most", "much", "must", "my", "neither",
    "no", "nor", "not", "now", "of", "once", "only", "or", "other", "our", "ours", "own", "same", "shall", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them", "then", "there", "these",
    "they", "this", "those", "to", "too", "very", "was", "we", "were", "what", "when", "where", "which", "while",
    "who", "whom", "whose", "why", "will", "with", "would", "you", "your", "yours", "s", "t", "image", "picture",
    "photo", "shown", "visible", "relative", "respect", "compared", "object", "objects",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

pub fn is_spatial_term(token: &str) -> bool {
    SPATIAL_TERMS.contains(&token)
}

/// Lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ends_with_sibilant(w: &str) -> bool {
    ["s", "x", "z", "ch", "sh"].iter().any(|s| w.ends_with(s))
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Singular form of a lowercase token.
pub fn lemma(token: &str) -> String {
    if is_spatial_term(token) || token.chars().any(|c| c.is_ascii_digit()) {
        return token.to_string();
    }
    if let Some((sing, _)) = IRREGULAR.iter().find(|(s, p)| *p == token || *s == token) {
        return (*sing).to_string();
    }
    let n = token.chars().count();
    if n <= 3 || !token.ends_with('s') || token.ends_with("ss") || token.ends_with("us") || token.ends_with("is") {
        return token.to_string();
    }
    if let Some(stem) = token.strip_suffix("ies") {
        if stem.len() >= 2 {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = token.strip_suffix("es") {
        if ["x", "z", "ch", "sh", "ss"].iter().any(|s| stem.ends_with(s)) {
            return stem.to_string();
        }
    }
    token[..token.len() - 1].to_string()
}

/// Plural form of a singular lowercase token.
pub fn plural(singular: &str) -> String {
    if let Some((_, p)) = IRREGULAR.iter().find(|(s, _)| *s == singular) {
        return (*p).to_string();
    }
    if let Some(stem) = singular.strip_suffix('y') {
        if stem.chars().last().is_some_and(|c| !is_vowel(c)) {
            return format!("{stem}ies");
        }
    }
    if ends_with_sibilant(singular) {
        return format!("{singular}es");
    }
    format!("{singular}s")
}

/// Lemmas of every token, stopwords included.
pub fn lemma_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text).iter().map(|t| lemma(t)).collect()
}

/// Lemmas of the content tokens only.
pub fn content_lemmas(text: &str) -> BTreeSet<String> {
    tokenize(text).iter().filter(|t| !is_stopword(t)).map(|t| lemma(t)).collect()
}

/// Content words expanded to singular and plural forms. Spatial terms and
/// numerals are kept as-is.
pub fn question_vocabulary(question: &str) -> BTreeSet<String> {
    let mut vocab = BTreeSet::new();
    for token in tokenize(question).iter().filter(|t| !is_stopword(t)) {
        if is_spatial_term(token) || token.chars().any(|c| c.is_ascii_digit()) {
            vocab.insert(token.clone());
            continue;
        }
        let sing = lemma(token);
        vocab.insert(plural(&sing));
        vocab.insert(sing);
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regular_plurals() {
        for (p, s) in [
            ("cups", "cup"),
            ("plates", "plate"),
            ("boxes", "box"),
            ("benches", "bench"),
            ("bushes", "bush"),
            ("berries", "berry"),
            ("houses", "house"),
            ("glass", "glass"),
            ("bus", "bus"),
            ("buses", "bus"),
            ("people", "person"),
            ("knives", "knife"),
            ("left", "left"),
            ("cup", "cup"),
        ] {
            assert_eq!(lemma(p), s, "{p}");
        }
    }

    #[test]
    fn plural_of_lemma_round_trips() {
        for w in ["cup", "plate", "box", "bench", "berry", "person", "knife", "toy", "bus", "house"] {
            assert_eq!(lemma(&plural(w)), w, "{w}");
        }
    }

    #[test]
    fn question_vocabulary_example() {
        let v = question_vocabulary("Which cup is left of the plates?");
        let expected: BTreeSet<String> = ["cup", "cups", "plate", "plates", "left"].iter().map(|s| s.to_string()).collect();
        assert_eq!(v, expected);
    }

    #[test]
    fn vocabulary_closed_under_number() {
        assert_eq!(question_vocabulary("dogs"), question_vocabulary("dog"));
        assert!(question_vocabulary("").is_empty());
    }
}
