//! Answer normalization shared by every string comparison in the crate.

use unicode_normalization::UnicodeNormalization;

/// Separator used when a multi-valued answer is displayed as one string.
pub const ANSWER_JOINER: &str = " and ";

/// NFC, lower-case, trimmed, internal whitespace runs collapsed to one space.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let lowered = composed.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Joined display form of a (possibly multi-valued) answer.
pub fn join_answer<S: AsRef<str>>(parts: &[S]) -> String {
    parts
        .iter()
        .map(|p| p.as_ref().trim())
        .collect::<Vec<_>>()
        .join(ANSWER_JOINER)
}

/// Splits a displayed answer back into its normalized elements.
pub fn split_answer(text: &str) -> Vec<String> {
    normalize(text)
        .split(ANSWER_JOINER)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// A rationale is the short answer followed by its explanation.
pub fn compose_rationale(answer: &str, explanation: &str) -> String {
    let answer = answer.trim();
    let explanation = explanation.trim();
    if explanation.is_empty() {
        answer.to_string()
    } else {
        format!("{answer} {explanation}")
    }
}
