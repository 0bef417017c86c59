//! Token accounting.
//!
//! Context sizes (|C_t|, compression ratios, Peak and Dep) are all measured with a
//! [`TokenCounter`]. The default unit is the whitespace-delimited word: it is
//! deterministic and needs no model vocabulary.

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Counts whitespace-delimited words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Counts Unicode scalar values, for character-based ratios.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CharCounter;

impl TokenCounter for CharCounter {
    fn count(&self, text: &str) -> usize {
        text.chars().count()
    }
}

/// Token count under the default counter.
pub fn token_count(text: &str) -> usize {
    WhitespaceCounter.count(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitespace_examples() {
        assert_eq!(token_count(""), 0);
        assert_eq!(token_count("a b c"), 3);
        let (a, b) = ("x y", "z");
        assert_eq!(token_count(&format!("{a} {b}")), token_count(a) + token_count(b));
        assert_eq!(token_count(&format!("{a} {b}")), 3);
        assert_eq!(token_count("  lead\ttab\nnewline  "), 3);
    }

    #[test]
    fn char_counter_counts_scalars() {
        assert_eq!(CharCounter.count("héllo"), 5);
    }

    proptest! {
        #[test]
        fn monotone_under_concatenation(a in ".{0,40}", b in ".{0,40}") {
            let joined = format!("{a}{b}");
            let n = token_count(&joined);
            prop_assert!(n >= token_count(&a).max(token_count(&b)));
            prop_assert_eq!(token_count(&format!("{a} {b}")), token_count(&a) + token_count(&b));
        }
    }
}
