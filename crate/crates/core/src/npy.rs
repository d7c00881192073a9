//! Reading and writing `.npy` files.
//!
//! Only the subset used by CircuitNet-style feature files is supported:
//! format version 1.0, little-endian `f32` (`'<f4'`), C order. Anything else
//! is rejected rather than converted.

use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("not an npy file (bad magic)")]
    BadMagic,
    #[error("unsupported npy version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("unsupported dtype `{0}` (only '<f4')")]
    UnsupportedDtype(String),
    #[error("fortran_order arrays are not supported")]
    FortranOrderUnsupported,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("data section truncated: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major `f32` array with an arbitrary shape; `shape == []` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        NpyArray { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        _ => {
            let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

pub fn write_npy(array: &NpyArray) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': {}, }}",
        shape_literal(&array.shape)
    );
    // magic(6) + version(2) + header_len(2) + dict + padding + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + pad + 1;

    let mut out = Vec::with_capacity(unpadded + pad + array.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat(b' ').take(pad));
    out.push(b'\n');
    for v in &array.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Value following `'key':` in a Python dict literal, up to the next
/// top-level comma or closing brace.
fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str, NpyError> {
    let needle = format!("'{key}'");
    let start = dict
        .find(&needle)
        .ok_or_else(|| NpyError::BadHeader(format!("missing key {key}")))?;
    let rest = dict[start + needle.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| NpyError::BadHeader(format!("missing ':' after {key}")))?
        .trim_start();
    let mut depth = 0usize;
    for (k, ch) in rest.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' | '}' if depth == 0 => return Ok(rest[..k].trim()),
            _ => {}
        }
    }
    Err(NpyError::BadHeader(format!("unterminated value for {key}")))
}

fn parse_shape(lit: &str) -> Result<Vec<usize>, NpyError> {
    let inner = lit
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| NpyError::BadHeader(format!("bad shape `{lit}`")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| NpyError::BadHeader(format!("bad extent `{s}`"))))
        .collect()
}

pub fn read_npy(bytes: &[u8]) -> Result<NpyArray, NpyError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion(major, minor));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(NpyError::BadHeader("header extends past end of file".into()));
    }
    let dict = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| NpyError::BadHeader("header is not ASCII".into()))?
        .trim();

    let descr = dict_value(dict, "descr")?.trim_matches(|c| c == '\'' || c == '"');
    if descr != "<f4" {
        return Err(NpyError::UnsupportedDtype(descr.to_string()));
    }
    match dict_value(dict, "fortran_order")? {
        "False" => {}
        "True" => return Err(NpyError::FortranOrderUnsupported),
        other => return Err(NpyError::BadHeader(format!("bad fortran_order `{other}`"))),
    }
    let shape = parse_shape(dict_value(dict, "shape")?)?;

    let count: usize = shape.iter().product();
    let expected = count * 4;
    let payload = &bytes[data_start..];
    if payload.len() < expected {
        return Err(NpyError::TruncatedData { expected, found: payload.len() });
    }
    let data = payload[..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NpyArray { shape, data })
}

pub fn read_npy_file(path: impl AsRef<Path>) -> Result<NpyArray, NpyError> {
    read_npy(&std::fs::read(path)?)
}

pub fn write_npy_file(path: impl AsRef<Path>, array: &NpyArray) -> Result<(), NpyError> {
    std::fs::write(path, write_npy(array))?;
    Ok(())
}

/// Byte offset of the data section in a file produced by [`write_npy`].
pub fn data_offset(bytes: &[u8]) -> Option<usize> {
    (bytes.len() >= 10 && &bytes[..6] == MAGIC).then(|| 10 + u16::from_le_bytes([bytes[8], bytes[9]]) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_layout() {
        let a = NpyArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = write_npy(&a);
        let off = data_offset(&b).unwrap();
        assert_eq!(off % 64, 0);
        assert_eq!(b.len() - off, 16);
        let header = std::str::from_utf8(&b[10..off]).unwrap();
        assert!(header.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }"));
        assert!(header.ends_with('\n'));
        assert_eq!(read_npy(&b).unwrap(), a);
    }

    #[test]
    fn scalar_and_vector_shapes() {
        let s = NpyArray::new(vec![], vec![7.5]);
        let b = write_npy(&s);
        assert_eq!(b.len() - data_offset(&b).unwrap(), 4);
        assert_eq!(read_npy(&b).unwrap(), s);
        let v = NpyArray::new(vec![3], vec![1.0, 2.0, 3.0]);
        let b = write_npy(&v);
        assert!(std::str::from_utf8(&b[10..data_offset(&b).unwrap()]).unwrap().contains("(3,)"));
        assert_eq!(read_npy(&b).unwrap(), v);
    }

    #[test]
    fn deterministic_bytes() {
        let a = NpyArray::new(vec![3, 1], vec![0.5, -1.0, 2.0]);
        assert_eq!(write_npy(&a), write_npy(&a));
    }

    fn with_header(dict: &str, data: &[u8]) -> Vec<u8> {
        let mut h = dict.to_string();
        while (10 + h.len() + 1) % 64 != 0 {
            h.push(' ');
        }
        h.push('\n');
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(h.len() as u16).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn rejects_unsupported_files() {
        let f8 = with_header("{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }", &[0; 8]);
        assert!(matches!(read_npy(&f8), Err(NpyError::UnsupportedDtype(d)) if d == "<f8"));
        let fort = with_header("{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }", &[0; 4]);
        assert!(matches!(read_npy(&fort), Err(NpyError::FortranOrderUnsupported)));
        let short = with_header("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }", &[0; 8]);
        assert!(matches!(read_npy(&short), Err(NpyError::TruncatedData { expected: 16, found: 8 })));
        assert!(matches!(read_npy(b"nonsense-bytes"), Err(NpyError::BadMagic)));
        let mut v2 = write_npy(&NpyArray::new(vec![1], vec![1.0]));
        v2[6] = 2;
        assert!(matches!(read_npy(&v2), Err(NpyError::UnsupportedVersion(2, 0))));
    }

    #[test]
    fn accepts_reordered_keys() {
        let b = with_header("{'shape': (2,), 'fortran_order': False, 'descr': '<f4'}", &[0; 8]);
        assert_eq!(read_npy(&b).unwrap().shape, vec![2]);
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|k| (k as f32 + seed as f32) * 0.37 - 3.0).collect();
            let a = NpyArray::new(shape, data);
            let bytes = write_npy(&a);
            let back = read_npy(&bytes).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(write_npy(&back), bytes);
        }
    }
}
