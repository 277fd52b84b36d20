//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by three specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Drops special ids; invalid UTF-8 is replaced with U+FFFD.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// The character a single token spells out on its own, if any.
pub fn token_char(id: u32) -> Option<char> {
    (id < 128).then(|| char::from(id as u8))
}
