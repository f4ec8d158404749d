//! Caption tokenization.
//!
//! The default splits on whitespace and emits every punctuation character as
//! its own token. CJK ideographs are emitted one per token, so untranslated
//! Chinese captions still get meaningful counts.

/// Pluggable tokenizer hook.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespacePunct;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF | 0x3040..=0x30FF)
}

impl Tokenizer for WhitespacePunct {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<String>| {
            if !word.is_empty() {
                out.push(std::mem::take(word));
            }
        };
        for c in text.chars() {
            if c.is_whitespace() {
                flush(&mut word, &mut out);
            } else if is_cjk(c) || (c.is_ascii_punctuation() && c != '\'') || (!c.is_alphanumeric() && c != '\'') {
                flush(&mut word, &mut out);
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

/// Joins tokens back into display text, attaching punctuation to the
/// preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        let attach = t.chars().count() == 1 && t.chars().all(|c| c.is_ascii_punctuation() && !"([{\"".contains(c));
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        WhitespacePunct.tokenize(s)
    }

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(toks("Connected, but no internet."), ["Connected", ",", "but", "no", "internet", "."]);
        assert_eq!(toks("  me   when it's monday!! "), ["me", "when", "it's", "monday", "!", "!"]);
        assert!(toks("   ").is_empty());
    }

    #[test]
    fn cjk_characters_are_single_tokens() {
        assert_eq!(toks("连上了 wifi"), ["连", "上", "了", "wifi"]);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let t = toks("well, that escalated quickly!");
        assert_eq!(detokenize(&t), "well, that escalated quickly!");
    }
}
