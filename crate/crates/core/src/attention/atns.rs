//! ATNS v1 attention-tensor files.
//!
//! One ASCII header line `ATNS 1 <L> <H> <N> <N_l>\n`, then `L*H*N*N`
//! little-endian f32 weights, layer-major, head-major, row-major. Visual
//! tokens follow the `N_l` language tokens.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{AttentionError, AttentionStack, TokenLayout};

const MAGIC: &str = "ATNS";
const VERSION: &str = "1";
const MAX_HEADER: usize = 256;

#[derive(Debug, Error)]
pub enum AtnsError {
    #[error("bad magic: expected ATNS, found {0:?}")]
    BadMagic(String),
    #[error("unsupported version {0:?}")]
    BadVersion(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("dimension {name} must be positive, got {value}")]
    NonPositiveDim { name: &'static str, value: i64 },
    #[error("payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid stack: {0}")]
    Invalid(#[from] AttentionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AtnsError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            AtnsError::BadMagic(_) => 1,
            AtnsError::BadVersion(_) => 2,
            AtnsError::BadHeader(_) => 3,
            AtnsError::NonPositiveDim { .. } => 4,
            AtnsError::Truncated { .. } => 5,
            AtnsError::Invalid(_) => 6,
            AtnsError::Io(_) => 7,
        }
    }
}

pub fn write_atns<W: Write>(stack: &AttentionStack, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "{MAGIC} {VERSION} {} {} {} {}",
        stack.layers(),
        stack.heads(),
        stack.seq_len(),
        stack.layout().n_language
    )?;
    let mut buf = Vec::with_capacity(stack.data().len() * 4);
    for &v in stack.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn write_atns_file(stack: &AttentionStack, path: &Path) -> std::io::Result<()> {
    write_atns(stack, BufWriter::new(File::create(path)?))
}

fn parse_dim(name: &'static str, tok: Option<&str>) -> Result<usize, AtnsError> {
    let tok = tok.ok_or_else(|| AtnsError::BadHeader(format!("missing {name}")))?;
    let value: i64 = tok
        .parse()
        .map_err(|_| AtnsError::BadHeader(format!("{name} is not an integer: {tok:?}")))?;
    if value <= 0 {
        return Err(AtnsError::NonPositiveDim { name, value });
    }
    Ok(value as usize)
}

pub fn read_atns<R: Read>(r: R) -> Result<AttentionStack, AtnsError> {
    let mut r = BufReader::new(r);
    let mut header = Vec::new();
    r.by_ref().take(MAX_HEADER as u64).read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        if !header.starts_with(MAGIC.as_bytes()) {
            return Err(AtnsError::BadMagic(
                String::from_utf8_lossy(&header[..header.len().min(4)]).into(),
            ));
        }
        return Err(AtnsError::BadHeader("header line not terminated".into()));
    }
    let line = std::str::from_utf8(&header[..header.len() - 1])
        .map_err(|_| AtnsError::BadMagic(String::from_utf8_lossy(&header[..header.len().min(4)]).into()))?;
    let mut toks = line.split(' ');
    let magic = toks.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(AtnsError::BadMagic(magic.into()));
    }
    let version = toks.next().unwrap_or_default();
    if version != VERSION {
        return Err(AtnsError::BadVersion(version.into()));
    }
    let layers = parse_dim("L", toks.next())?;
    let heads = parse_dim("H", toks.next())?;
    let seq_len = parse_dim("N", toks.next())?;
    let n_language = parse_dim("N_l", toks.next())?;
    if let Some(extra) = toks.next() {
        return Err(AtnsError::BadHeader(format!("trailing token {extra:?}")));
    }
    if n_language >= seq_len {
        return Err(AtnsError::BadHeader(format!(
            "N_l = {n_language} leaves no visual tokens in N = {seq_len}"
        )));
    }

    let count = layers
        .checked_mul(heads)
        .and_then(|x| x.checked_mul(seq_len))
        .and_then(|x| x.checked_mul(seq_len))
        .ok_or_else(|| AtnsError::BadHeader("dimensions overflow".into()))?;
    let expected = count * 4;
    let mut payload = Vec::with_capacity(expected.min(1 << 28));
    r.by_ref().take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(AtnsError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let layout = TokenLayout::language_first(n_language, seq_len - n_language);
    Ok(AttentionStack::new(layers, heads, seq_len, layout, data)?)
}

pub fn read_atns_file(path: &Path) -> Result<AttentionStack, AtnsError> {
    read_atns(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> AttentionStack {
        let n = 3;
        let mut data = Vec::new();
        for l in 0..2 {
            for row in 0..n {
                let mut r = vec![0.1, 0.2, 0.7];
                r.rotate_left((row + l) % n);
                data.extend(r);
            }
        }
        AttentionStack::new(2, 1, n, TokenLayout::language_first(1, 2), data).unwrap()
    }

    fn encoded() -> Vec<u8> {
        let mut buf = Vec::new();
        write_atns(&stack(), &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_is_exact() {
        let buf = encoded();
        assert!(buf.starts_with(b"ATNS 1 2 1 3 1\n"));
        assert_eq!(buf.len(), 15 + 18 * 4);
    }

    #[test]
    fn round_trip_within_f32() {
        let back = read_atns(&encoded()[..]).unwrap();
        assert_eq!(back.layout(), stack().layout());
        for (a, b) in back.data().iter().zip(stack().data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn distinct_error_codes() {
        let mut bad = encoded();
        bad[0] = b'X';
        let e1 = read_atns(&bad[..]).unwrap_err();
        assert!(matches!(e1, AtnsError::BadMagic(_)));

        let e2 = read_atns(&b"ATNS 1 2 0 3 1\n"[..]).unwrap_err();
        assert!(matches!(e2, AtnsError::NonPositiveDim { name: "H", value: 0 }));
        let e2b = read_atns(&b"ATNS 1 -2 1 3 1\n"[..]).unwrap_err();
        assert!(matches!(e2b, AtnsError::NonPositiveDim { name: "L", value: -2 }));

        let full = encoded();
        let e3 = read_atns(&full[..full.len() - 3]).unwrap_err();
        assert!(matches!(e3, AtnsError::Truncated { .. }));

        let codes = [e1.code(), e2.code(), e3.code()];
        assert_eq!(codes, [1, 4, 5]);
    }
}
