//! IDX image/label files (the MNIST container).
//!
//! Layout: two zero bytes, a type code, the rank, `rank` big-endian `u32`
//! extents, then the payload in row-major order. Only unsigned-byte payloads
//! (type code `0x08`) are accepted.

use std::path::Path;

use evalnorm_core::data::{Dataset, Split};

use crate::error::{read_file, Error, Result};

const UBYTE: u8 = 0x08;

/// A decoded IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX buffer.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    const WHAT: &str = "idx";
    if bytes.len() < 4 {
        return Err(Error::format(WHAT, bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(WHAT, 0, "bad magic"));
    }
    if bytes[2] != UBYTE {
        return Err(Error::format(WHAT, 2, format!("unsupported type code {:#04x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::format(WHAT, 3, "rank 0"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let raw: [u8; 4] = bytes
            .get(at..at + 4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::format(WHAT, bytes.len(), "truncated dimension table"))?;
        dims.push(u32::from_be_bytes(raw) as usize);
    }
    let start = 4 + 4 * rank;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(WHAT, 4, "dimension product overflows"))?;
    let end = start
        .checked_add(len)
        .ok_or_else(|| Error::format(WHAT, 4, "dimension product overflows"))?;
    if bytes.len() < end {
        return Err(Error::format(
            WHAT,
            bytes.len(),
            format!("truncated payload, expected {end} bytes"),
        ));
    }
    if bytes.len() > end {
        return Err(Error::format(WHAT, end, "trailing bytes"));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..end].to_vec(),
    })
}

/// Pairs an image array (`[n, ...]`) with a label array (`[n]`). Pixels are
/// scaled to `[0, 1]`. With `flatten` each image becomes a vector; otherwise
/// `[n, rows, cols]` images get one channel (`[1, rows, cols]`). `limit` keeps
/// the first examples only.
pub fn dataset_from_idx(
    images: &IdxArray,
    labels: &IdxArray,
    num_classes: usize,
    split: Split,
    limit: Option<usize>,
    flatten: bool,
) -> Result<Dataset> {
    if labels.dims.len() != 1 {
        return Err(Error::format("idx labels", 3, format!("rank {}", labels.dims.len())));
    }
    let n = images.dims[0];
    if n != labels.dims[0] {
        return Err(Error::format(
            "idx labels",
            4,
            format!("{} labels for {} images", labels.dims[0], n),
        ));
    }
    let n = limit.map_or(n, |l| l.min(n));
    let per: usize = images.dims[1..].iter().product();
    let shape = match (flatten, &images.dims[1..]) {
        (false, &[r, c]) => vec![1, r, c],
        (false, d) if d.len() == 3 => d.to_vec(),
        (false, d) => {
            return Err(Error::format("idx", 3, format!("image dims {d:?} are not [rows, cols]")))
        }
        (true, _) => vec![per],
    };
    let features = images.data[..n * per].iter().map(|&p| p as f64 / 255.0).collect();
    let labels = labels.data[..n].iter().map(|&l| l as usize).collect();
    Ok(Dataset::new(features, shape, labels, num_classes, split)?)
}

/// Reads an image file and its paired label file.
pub fn read_idx(
    images: &Path,
    labels: &Path,
    num_classes: usize,
    split: Split,
    limit: Option<usize>,
    flatten: bool,
) -> Result<Dataset> {
    let img = parse_idx(&read_file(images)?)?;
    let lab = parse_idx(&read_file(labels)?)?;
    dataset_from_idx(&img, &lab, num_classes, split, limit, flatten)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(rank: u8, dims: &[u32]) -> Vec<u8> {
        let mut b = vec![0, 0, UBYTE, rank];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b
    }

    #[test]
    fn rejects_bad_magic_and_type() {
        assert!(matches!(parse_idx(&[1, 0, 8, 1]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0, 0x0d, 1]), Err(Error::Format { offset: 2, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut b = header(1, &[5]);
        b.extend_from_slice(&[1, 2]);
        match parse_idx(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0, 8, 2, 0, 0]), Err(Error::Format { offset: 6, .. })));
    }

    #[test]
    fn empty_image_set() {
        let img = parse_idx(&header(3, &[0, 2, 2])).unwrap();
        let lab = parse_idx(&header(1, &[0])).unwrap();
        assert!(matches!(
            dataset_from_idx(&img, &lab, 10, Split::Train, None, true),
            Err(Error::Core(evalnorm_core::Error::EmptyDataset))
        ));
    }

    #[test]
    fn count_mismatch() {
        let mut ib = header(3, &[2, 1, 1]);
        ib.extend_from_slice(&[0, 255]);
        let mut lb = header(1, &[1]);
        lb.push(0);
        let r = dataset_from_idx(&parse_idx(&ib).unwrap(), &parse_idx(&lb).unwrap(), 2, Split::Eval, None, true);
        assert!(matches!(r, Err(Error::Format { .. })));
    }
}
