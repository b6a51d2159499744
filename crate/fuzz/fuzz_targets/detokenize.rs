#![no_main]

use libfuzzer_sys::fuzz_target;
use unirope::lm::tokenizer::{detokenize, render, tokenize_bytes, tokenize_marked};

fuzz_target!(|data: &[u8]| {
    let ids: Vec<usize> = data.chunks(2).map(|c| c.iter().fold(0usize, |acc, &b| acc << 8 | b as usize)).collect();
    match detokenize(&ids) {
        Ok(bytes) => assert_eq!(tokenize_bytes(&bytes), ids),
        Err(_) => assert!(ids.iter().any(|&i| i > 255)),
    }
    let _ = render(&ids);
    let _ = tokenize_marked(&String::from_utf8_lossy(data));
});
