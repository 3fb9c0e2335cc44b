//! Column-major run-length encoding of binary masks, including the compact
//! string form used in COCO annotation files.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::mask::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    /// Alternating run lengths, the first one counting zeros (possibly 0).
    pub counts: Vec<u32>,
}

pub fn encode(m: &Mask) -> Rle {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for x in 0..m.width {
        for y in 0..m.height {
            let v = m.data[y * m.width + x];
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { height: m.height, width: m.width, counts }
}

pub fn decode(r: &Rle) -> Result<Mask> {
    let area = r.height * r.width;
    let total: u64 = r.counts.iter().map(|&c| c as u64).sum();
    if total > area as u64 {
        return Err(Error::invalid(format!("run lengths sum to {total}, exceeding mask area {area}")));
    }
    if total < area as u64 {
        return Err(Error::invalid(format!("run lengths sum to {total}, short of mask area {area}")));
    }
    let mut m = Mask::new(r.height, r.width);
    let mut pos = 0usize;
    for (i, &c) in r.counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + c as usize {
                let (x, y) = (p / r.height, p % r.height);
                m.data[y * r.width + x] = 1;
            }
        }
        pos += c as usize;
    }
    Ok(m)
}

/// COCO compressed counts string.
pub fn counts_to_string(counts: &[u32]) -> String {
    let mut s = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        let mut more = true;
        while more {
            let mut ch = (x & 0x1f) as u8;
            x >>= 5;
            more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            s.push((ch + 48) as char);
        }
    }
    s
}

pub fn counts_from_string(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        let mut more = true;
        while more {
            let Some(&b) = bytes.get(p) else {
                return Err(Error::Format("truncated compressed run-length string".into()));
            };
            if !(48..48 + 64).contains(&b) || k > 12 {
                return Err(Error::Format(format!("invalid byte {b:#x} in compressed run-length string")));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && c & 0x10 != 0 {
                x |= -1i64 << (5 * k);
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2] as i64;
        }
        if !(0..=u32::MAX as i64).contains(&x) {
            return Err(Error::Format("run length out of range".into()));
        }
        counts.push(x as u32);
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_masks() {
        assert_eq!(encode(&Mask::new(2, 2)).counts, [4]);
        let ones = Mask::from_fn(2, 2, |_, _| true);
        assert_eq!(encode(&ones).counts, [0, 4]);
        assert_eq!(decode(&encode(&ones)).unwrap(), ones);
    }

    #[test]
    fn column_major_order() {
        // Only the top-right pixel of a 2x2 mask: column 0 = [0,0], column 1 = [1,0].
        let m = Mask::from_fn(2, 2, |y, x| y == 0 && x == 1);
        assert_eq!(encode(&m).counts, [2, 1, 1]);
    }

    #[test]
    fn oversized_counts_rejected() {
        let r = Rle { height: 2, width: 2, counts: alloc::vec![3, 3] };
        assert!(matches!(decode(&r), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn compressed_string_round_trip() {
        let counts = alloc::vec![0, 5, 300, 2, 7, 100_000, 1];
        let s = counts_to_string(&counts);
        assert_eq!(counts_from_string(&s).unwrap(), counts);
        // Reference string from the COCO tools for counts [1, 2, 3].
        assert_eq!(counts_to_string(&[1, 2, 3]), "123");
    }
}
