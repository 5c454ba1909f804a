//! Deterministic pseudo-English text for training tests.

use lbi_core::DetRng;

const WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "you", "that", "it", "he", "was", "for", "on", "are", "as", "with",
    "his", "they", "at", "be", "this", "have", "from", "or", "one", "had", "by", "word", "but", "not", "what", "all",
    "were", "we", "when", "your", "can", "said", "there", "use", "an", "each", "which", "she", "do", "how", "their",
    "if", "will", "up", "other", "about", "out", "many", "then", "them", "these", "so", "some", "her", "would",
    "make", "like", "him", "into", "time", "has", "look", "two", "more", "write", "go", "see", "number", "no", "way",
    "could", "people", "my", "than", "first", "water", "been", "call", "who", "oil", "its", "now", "find", "long",
    "down", "day", "did", "get", "come", "made", "may", "part", "river", "garden", "winter", "morning", "little",
    "house", "letter", "between", "children", "mountain", "question", "answer", "country", "school",
];

/// `bytes` of sentences built from common words with a Zipf-like bias.
pub fn pseudo_english(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = DetRng::new(seed);
    let mut out = Vec::with_capacity(bytes + 64);
    while out.len() < bytes {
        let words = 5 + rng.below(10);
        for w in 0..words {
            // squaring a uniform skews picks toward the front of the list
            let u = rng.uniform();
            let word = WORDS[((u * u) * WORDS.len() as f64) as usize];
            if w == 0 {
                let mut cs = word.chars();
                if let Some(c) = cs.next() {
                    out.extend(c.to_uppercase().to_string().bytes());
                    out.extend(cs.as_str().bytes());
                }
            } else {
                out.push(b' ');
                out.extend(word.bytes());
            }
        }
        out.extend(if rng.below(6) == 0 { b".\n".as_slice() } else { b". ".as_slice() });
    }
    out.truncate(bytes);
    out
}
