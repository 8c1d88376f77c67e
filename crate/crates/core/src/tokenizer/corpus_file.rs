//! Binary tokenized-corpus file: `KDUET1`, then per record a little-endian
//! u32 length `n`, `n` word ids and `n` entity ids.

use std::io::{Read, Write};

use super::{DuetSequence, TokenizerError};

pub const CORPUS_MAGIC: &[u8; 6] = b"KDUET1";

pub fn write_corpus<W: Write>(mut w: W, records: &[DuetSequence]) -> Result<(), TokenizerError> {
    w.write_all(CORPUS_MAGIC)?;
    for rec in records {
        if rec.word_ids.len() != rec.entity_ids.len() {
            return Err(TokenizerError::Corpus("word/entity length mismatch".into()));
        }
        w.write_all(&(rec.word_ids.len() as u32).to_le_bytes())?;
        for &id in rec.word_ids.iter().chain(&rec.entity_ids) {
            w.write_all(&id.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Vec<DuetSequence>, TokenizerError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < CORPUS_MAGIC.len() || &bytes[..CORPUS_MAGIC.len()] != CORPUS_MAGIC {
        return Err(TokenizerError::Corpus("bad magic".into()));
    }
    let mut pos = CORPUS_MAGIC.len();
    let next_u32 = |pos: &mut usize| -> Result<u32, TokenizerError> {
        let chunk = bytes.get(*pos..*pos + 4).ok_or_else(|| TokenizerError::Corpus("truncated record".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let n = next_u32(&mut pos)? as usize;
        let word_ids = (0..n).map(|_| next_u32(&mut pos)).collect::<Result<Vec<_>, _>>()?;
        let entity_ids = (0..n).map(|_| next_u32(&mut pos)).collect::<Result<Vec<_>, _>>()?;
        out.push(DuetSequence { word_ids, entity_ids, word_starts: Vec::new() });
    }
    Ok(out)
}
