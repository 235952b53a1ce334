//! Byte-level tokenizer with single-token chat markers.
//!
//! Ids `0..=255` are raw bytes. The four chat-template markers get dedicated
//! ids above the byte range; `<|eot_id|>` doubles as the end-of-text token
//! that stops generation.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const SYSTEM: TokenId = 256;
pub const USER: TokenId = 257;
pub const MODEL: TokenId = 258;
pub const EOT: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

const MARKERS: [(&str, TokenId); 4] = [
    ("<|system|>", SYSTEM),
    ("<|user|>", USER),
    ("<|model|>", MODEL),
    ("<|eot_id|>", EOT),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn new() -> Self {
        Self
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= 256
    }

    pub fn marker(&self, id: TokenId) -> Option<&'static str> {
        MARKERS.iter().find(|(_, t)| *t == id).map(|(m, _)| *m)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'<' {
                if let Some((m, id)) = MARKERS.iter().find(|(m, _)| bytes[i..].starts_with(m.as_bytes())) {
                    out.push(*id);
                    i += m.len();
                    continue;
                }
            }
            out.push(TokenId::from(bytes[i]));
            i += 1;
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                out.push(id as u8);
            } else if let Some(m) = self.marker(id) {
                out.extend_from_slice(m.as_bytes());
            } else {
                return Err(Error::Index {
                    index: id as usize,
                    bound: VOCAB_SIZE,
                    context: "token id",
                });
            }
        }
        Ok(out)
    }

    /// Decodes to text, replacing invalid UTF-8 with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(ByteTokenizer.encode("").is_empty());
    }

    #[test]
    fn markers_are_single_tokens() {
        let t = ByteTokenizer;
        assert_eq!(t.encode("<|eot_id|>"), vec![EOT]);
        assert_eq!(t.encode("<|system|>"), vec![SYSTEM]);
        assert_eq!(t.encode("<|user|>"), vec![USER]);
        assert_eq!(t.encode("<|model|>"), vec![MODEL]);
        let ids = t.encode("<|user|>\nhi\n<|eot_id|>\n<|model|>\nyo");
        assert_eq!(ids, vec![USER, 10, 104, 105, 10, EOT, 10, MODEL, 10, 121, 111]);
        assert_eq!(t.decode(&ids).unwrap(), "<|user|>\nhi\n<|eot_id|>\n<|model|>\nyo");
    }

    #[test]
    fn partial_markers_stay_bytes() {
        let t = ByteTokenizer;
        let ids = t.encode("<|eot_id");
        assert_eq!(ids.len(), 8);
        assert!(ids.iter().all(|&i| i < 256));
    }

    #[test]
    fn unknown_id_is_an_error() {
        assert!(ByteTokenizer.decode_bytes(&[VOCAB_SIZE as TokenId]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let t = ByteTokenizer;
            prop_assert_eq!(t.decode_bytes(&t.encode_bytes(&bytes)).unwrap(), bytes);
        }

        #[test]
        fn marker_free_text_maps_to_bytes(s in "[^<]*") {
            let t = ByteTokenizer;
            let ids = t.encode(&s);
            prop_assert!(ids.iter().all(|&i| i < 256));
            prop_assert_eq!(ids.len(), s.len());
            prop_assert_eq!(t.decode(&ids).unwrap(), s);
        }
    }
}
