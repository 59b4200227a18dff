/// Lowercases, splits on whitespace, and breaks ASCII punctuation out into
/// standalone tokens. `"Hello, World"` becomes `["hello", ",", "world"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            flush(&mut tokens, &mut current);
        } else if ch.is_ascii_punctuation() {
            flush(&mut tokens, &mut current);
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    flush(&mut tokens, &mut current);
    tokens
}

fn flush(tokens: &mut Vec<String>, current: &mut String) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Hello, World"), vec!["hello", ",", "world"]);
    }

    #[test]
    fn punctuation_runs_become_individual_tokens() {
        assert_eq!(tokenize("wait... what?!"), vec!["wait", ".", ".", ".", "what", "?", "!"]);
    }

    #[test]
    fn whitespace_only_input_is_empty() {
        assert!(tokenize("  \t\n ").is_empty());
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn marker_like_text_cannot_produce_marker_tokens() {
        // Angle brackets and square brackets split, so no raw text can
        // collide with a reserved marker string.
        assert_eq!(tokenize("<unk>"), vec!["<", "unk", ">"]);
        assert_eq!(tokenize("[CLS]"), vec!["[", "cls", "]"]);
    }
}
