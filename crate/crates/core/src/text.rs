//! Word-level text splitting shared by the vocabulary and the mention linker.

const PUNCT: &[char] = &[',', '.', '!', '?', ';', ':', '(', ')', '"'];

fn is_special(chunk: &str) -> bool {
    chunk.len() > 2
        && chunk.starts_with('[')
        && chunk.ends_with(']')
        && chunk[1..chunk.len() - 1].chars().all(|c| c.is_ascii_uppercase())
}

/// Lowercases and splits on whitespace, detaching punctuation into its own
/// tokens. Bracketed special tokens such as `[SEP]` are kept verbatim.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if is_special(chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if PUNCT.contains(&c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    words.iter().map(|w| w.as_ref()).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_keeps_specials() {
        assert_eq!(split_words("Hello, World!"), ["hello", ",", "world", "!"]);
        assert_eq!(split_words("a [SEP] b: c"), ["a", "[SEP]", "b", ":", "c"]);
        assert_eq!(split_words("main_ingredients: soy sauce"), ["main_ingredients", ":", "soy", "sauce"]);
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn join_inverts_split_on_normalized_text() {
        let text = "watch the silent harbor tonight , it is great !";
        assert_eq!(join_words(&split_words(text)), text);
    }
}
