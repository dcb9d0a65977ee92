use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XPAR";

/// Reference inputs and logits written by the export tooling.
///
/// Layout (little-endian): `"XPAR"`, u32 version = 1, u32 count,
/// u32 input_len, u32 n_classes, then `count` rows of `input_len` f32 inputs
/// (already normalized) followed by `n_classes` f32 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ParityFile {
    pub input_len: usize,
    pub n_classes: usize,
    pub rows: Vec<(Vec<f32>, Vec<f32>)>,
}

pub fn read_parity_file(path: impl AsRef<Path>) -> Result<ParityFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, reason: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    };
    if bytes.len() < 20 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    if word(4) != 1 {
        return Err(fail(4, "unsupported version"));
    }
    let (count, input_len, n_classes) = (word(8), word(12), word(16));
    let row = (input_len + n_classes) * 4;
    let expected = 20 + count * row;
    if bytes.len() != expected {
        return Err(fail(bytes.len().min(expected), "length does not match header"));
    }
    let floats = |from: usize, n: usize| -> Vec<f32> {
        bytes[from..from + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect()
    };
    let rows = (0..count)
        .map(|k| {
            let at = 20 + k * row;
            (floats(at, input_len), floats(at + input_len * 4, n_classes))
        })
        .collect();
    Ok(ParityFile {
        input_len,
        n_classes,
        rows,
    })
}
