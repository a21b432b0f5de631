use crate::error::{Error, Result};

/// 256 byte tokens plus the end-of-sequence token.
pub const VOCAB_SIZE: usize = 257;
pub const EOS_ID: u32 = 256;
pub const MAX_SEQ_LEN: usize = 77;

/// Byte-level tokenizer: one id per UTF-8 byte, then [`EOS_ID`].
/// Long inputs are truncated to [`MAX_SEQ_LEN`] ids with EOS kept last.
pub fn toy_tokenize(s: &str) -> Result<Vec<u32>> {
    if s.is_empty() {
        return Err(Error::Validation("cannot tokenize an empty string".into()));
    }
    let mut ids: Vec<u32> = s.bytes().take(MAX_SEQ_LEN - 1).map(u32::from).collect();
    ids.push(EOS_ID);
    Ok(ids)
}
