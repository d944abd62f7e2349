#![no_main]

use libfuzzer_sys::fuzz_target;
use zsseg::embeddings::parse_word_vectors;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // request a fixed class plus whatever token the input starts with
    let mut names = vec!["chair".to_string()];
    if let Some(tok) = text.split_whitespace().next() {
        if tok != "chair" {
            names.push(tok.to_string());
        }
    }
    let _ = parse_word_vectors(text, &names);
});
