//! Tokenization shared by the alias table and the linker.

/// Lowercases and splits on whitespace, trimming punctuation at token edges.
///
/// Tokens that are pure punctuation are dropped, so "Los Angeles, CA" yields
/// `["los", "angeles", "ca"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Canonical surface form: tokens joined by a single space.
pub fn normalize_surface(text: &str) -> String {
    tokenize(text).join(" ")
}
