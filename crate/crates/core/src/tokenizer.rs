//! Byte-level tokenizer: byte `b` is id `b`, plus three specials.

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Maps bytes to ids one-to-one, no document markers.
pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Tokenizes text, wrapping each blank-line-separated document in BOS/EOS.
///
/// The separator bytes themselves are kept inside the stream so that
/// [`detokenize`] reproduces the input exactly.
pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(bytes.len() + 16);
    let mut in_doc = false;
    let mut i = 0;
    while i < bytes.len() {
        let sep = blank_line_len(&bytes[i..]);
        if sep > 0 {
            if in_doc {
                ids.push(EOS);
                in_doc = false;
            }
            ids.extend(bytes[i..i + sep].iter().map(|&b| b as usize));
            i += sep;
            continue;
        }
        if !in_doc {
            ids.push(BOS);
            in_doc = true;
        }
        ids.push(bytes[i] as usize);
        i += 1;
    }
    if in_doc {
        ids.push(EOS);
    }
    ids
}

/// Length of a document separator (`\n` followed by one or more
/// whitespace-only lines) at the start of `s`, or 0.
fn blank_line_len(s: &[u8]) -> usize {
    if s.first() != Some(&b'\n') {
        return 0;
    }
    let mut end = 0;
    let mut j = 1;
    let mut lines = 0;
    while j < s.len() {
        match s[j] {
            b' ' | b'\t' | b'\r' => j += 1,
            b'\n' => {
                lines += 1;
                j += 1;
                end = j;
            }
            _ => break,
        }
    }
    if lines > 0 {
        end
    } else {
        0
    }
}

/// Drops special tokens and returns the raw bytes.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .filter(|&&id| id < 256 || id >= VOCAB_SIZE)
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::OutOfRange {
                what: "token id",
                value: id,
                lo: 0,
                hi: VOCAB_SIZE - 1,
            })
        })
        .collect()
}
