//! Fixed 100-token character vocabulary: the 95 printable ASCII characters in
//! code-point order followed by five special tokens.

use crate::corpus::{is_printable, PRINTABLE_MIN};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const VOCAB_SIZE: usize = 100;
pub const NUM_CHARS: usize = 95;
pub const PAD: TokenId = 95;
pub const SOS: TokenId = 96;
pub const EOS: TokenId = 97;
pub const UNK: TokenId = 98;
pub const MASK: TokenId = 99;

const SPECIALS: [&str; 5] = ["[PAD]", "[SOS]", "[EOS]", "[UNK]", "[MASK]"];

pub fn char_id(b: u8) -> Option<TokenId> {
    is_printable(b).then(|| (b - PRINTABLE_MIN) as TokenId)
}

pub fn id_char(id: TokenId) -> Option<u8> {
    ((id as usize) < NUM_CHARS).then(|| id as u8 + PRINTABLE_MIN)
}

/// The vocabulary as token strings, in id order. Stored in checkpoint and
/// bundle manifests.
pub fn vocabulary() -> Vec<String> {
    let mut tokens: Vec<String> = (0..NUM_CHARS as TokenId)
        .map(|id| (id_char(id).unwrap() as char).to_string())
        .collect();
    tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
    tokens
}

/// `[SOS] chars.. [EOS]`.
pub fn encode(pw: &[u8]) -> Result<Vec<TokenId>> {
    let mut ids = Vec::with_capacity(pw.len() + 2);
    ids.push(SOS);
    for (position, &byte) in pw.iter().enumerate() {
        ids.push(char_id(byte).ok_or(Error::Encoding { position, byte })?);
    }
    ids.push(EOS);
    Ok(ids)
}

pub fn decode(ids: &[TokenId]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for (position, &id) in ids.iter().enumerate() {
        match id {
            SOS | EOS | PAD => {}
            _ => out.push(id_char(id).ok_or(Error::Decoding { position, id })?),
        }
    }
    Ok(out)
}
