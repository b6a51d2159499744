//! Byte-level tokenizer: ids `0..256` are raw bytes, followed by three
//! special markers.

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const SEP: usize = 257;
pub const QUERY: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

/// Inverse of [`render`]: `<bos>`, `|` and `?` become special ids and every
/// other byte maps to itself.
pub fn tokenize_marked(text: &str) -> Vec<usize> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i..].starts_with(b"<bos>") {
            out.push(BOS);
            i += 5;
            continue;
        }
        out.push(match bytes[i] {
            b'|' => SEP,
            b'?' => QUERY,
            b => b as usize,
        });
        i += 1;
    }
    out
}

/// Inverse of [`tokenize_bytes`]. Special ids have no byte form and are
/// rejected along with anything past the vocabulary.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| match u8::try_from(id) {
            Ok(b) => Ok(b),
            Err(_) if id < VOCAB_SIZE => Err(Error::invalid(format!("special token {id} has no byte form"))),
            Err(_) => Err(Error::invalid(format!("token id {id} outside vocabulary of {VOCAB_SIZE}"))),
        })
        .collect()
}

/// Lossy rendering for display: specials become `<bos>`, `|`, `?`.
pub fn render(ids: &[usize]) -> String {
    let mut out = String::new();
    let mut run = Vec::new();
    let flush = |run: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(run));
        run.clear();
    };
    for &id in ids {
        match id {
            0..=255 => run.push(id as u8),
            _ => {
                flush(&mut run, &mut out);
                out.push_str(match id {
                    BOS => "<bos>",
                    SEP => "|",
                    QUERY => "?",
                    _ => "\u{fffd}",
                });
            }
        }
    }
    flush(&mut run, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marked_inverts_render() {
        let ids = [BOS, b'a' as usize, SEP, b'b' as usize, QUERY, 0xff];
        assert_eq!(tokenize_marked(&render(&ids[..5])), ids[..5].to_vec());
        assert_eq!(tokenize_marked("<bo"), tokenize("<bo"));
    }

    #[test]
    fn ascii_and_empty() {
        assert_eq!(tokenize("A"), vec![65]);
        assert!(tokenize("").is_empty());
        assert!(detokenize(&[]).unwrap().is_empty());
    }

    #[test]
    fn all_bytes_round_trip() {
        let bytes: Vec<u8> = (0..=255).collect();
        assert_eq!(detokenize(&tokenize_bytes(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(detokenize(&[65, SEP]).is_err());
        assert!(detokenize(&[VOCAB_SIZE]).is_err());
        assert!(detokenize(&[usize::MAX]).is_err());
    }

    #[test]
    fn render_specials() {
        assert_eq!(render(&[97, 98, SEP, 97, 98]), "ab|ab");
        assert_eq!(render(&[BOS, QUERY, 999]), "<bos>?\u{fffd}");
    }
}
