//! Feature dump: `"MLFB" | u32 T | u32 n_mels | f32[T·n_mels]`, little-endian, row-major.

use std::io::{self, Read, Write};

use mlnet::FeatureSequence;

pub const MAGIC: &[u8; 4] = b"MLFB";

pub fn write<W: Write>(mut w: W, f: &FeatureSequence) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(f.len() as u32).to_le_bytes())?;
    w.write_all(&(f.n_mels() as u32).to_le_bytes())?;
    for &v in f.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()
}

/// Returns `(T, n_mels, values)`.
#[cfg_attr(not(test), allow(dead_code))]
pub fn read<R: Read>(mut r: R) -> io::Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(bad("not an MLFB feature file"));
    }
    let t = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != t * m * 4 {
        return Err(bad("feature payload length does not match header"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((t, m, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let f = FeatureSequence::new(vec![1.0, -2.5, 3.25, 0.0, 7.0, -1.0], 3, vec![0.0, 0.01], "x").unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &f).unwrap();
        assert_eq!(buf.len(), 12 + 6 * 4);
        let (t, m, v) = read(buf.as_slice()).unwrap();
        assert_eq!((t, m), (2, 3));
        assert_eq!(v, vec![1.0, -2.5, 3.25, 0.0, 7.0, -1.0]);
        assert!(read(&buf[..20]).is_err());
    }
}
