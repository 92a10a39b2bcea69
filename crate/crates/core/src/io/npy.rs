//! Reading and writing a subset of the numpy `.npy` format.
//!
//! Only version 1.0 files in C order are supported, with one of three
//! little-endian element types: `<f4`, `<i4` and `|u1`. Headers are written
//! exactly like numpy writes them (dict literal, space padded, newline
//! terminated, preamble aligned to 64 bytes) so output is byte-deterministic.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::volume::{LabelMap, ProbabilityVolume, VolumeError};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const ALIGNMENT: usize = 64;
const PREAMBLE_LEN: usize = MAGIC.len() + 2 + 2;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("file does not start with the npy magic string")]
    BadMagic,
    #[error("unsupported npy version {major}.{minor}, only 1.0 is read")]
    UnsupportedVersion { major: u8, minor: u8 },
    #[error("unsupported dtype descriptor {0:?}")]
    UnsupportedDtype(String),
    #[error("malformed npy header: {0}")]
    HeaderMalformed(String),
    #[error("fortran-ordered arrays are not supported")]
    FortranOrder,
    #[error("payload holds {actual} bytes, header implies {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("array content rejected: {0}")]
    InvalidContent(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I32,
    U8,
}

impl DType {
    pub fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::I32 => "<i4",
            DType::U8 => "|u1",
        }
    }

    fn from_descr(descr: &str) -> Result<Self, NpyError> {
        match descr {
            "<f4" => Ok(DType::F32),
            "<i4" => Ok(DType::I32),
            "|u1" => Ok(DType::U8),
            other => Err(NpyError::UnsupportedDtype(other.to_string())),
        }
    }

    pub fn item_size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::I32(_) => DType::I32,
            ArrayData::U8(_) => DType::U8,
        }
    }
}

/// An n-dimensional row-major array as stored in an npy file.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    shape: Vec<usize>,
    data: ArrayData,
}

impl ArrayFile {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self, NpyError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NpyError::SizeMismatch {
                expected: expected * data.dtype().item_size(),
                actual: data.len() * data.dtype().item_size(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &ArrayData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn into_data(self) -> ArrayData {
        self.data
    }

    pub fn from_volume(volume: &ProbabilityVolume) -> Self {
        Self {
            shape: vec![volume.height(), volume.width(), volume.classes()],
            data: ArrayData::F32(volume.as_slice().to_vec()),
        }
    }

    pub fn from_labels(labels: &LabelMap) -> Self {
        Self {
            shape: vec![labels.height(), labels.width()],
            data: ArrayData::U8(labels.as_slice().to_vec()),
        }
    }

    /// Interprets a 3-D float32 array as a probability volume, validating
    /// every pixel distribution.
    pub fn into_volume(self) -> Result<ProbabilityVolume, NpyError> {
        let [h, w, q] = self.shape[..] else {
            return Err(NpyError::InvalidContent(format!(
                "probability volume must be 3-D, got shape {:?}",
                self.shape
            )));
        };
        match self.data {
            ArrayData::F32(values) => Ok(ProbabilityVolume::new(h, w, q, values)?),
            other => Err(NpyError::InvalidContent(format!(
                "probability volume must be float32, got {}",
                other.dtype().descr()
            ))),
        }
    }

    /// Interprets a 2-D uint8 (or int32 within 0..=255) array as a label map.
    pub fn into_labels(self) -> Result<LabelMap, NpyError> {
        let [h, w] = self.shape[..] else {
            return Err(NpyError::InvalidContent(format!(
                "label map must be 2-D, got shape {:?}",
                self.shape
            )));
        };
        let values = match self.data {
            ArrayData::U8(v) => v,
            ArrayData::I32(v) => v
                .into_iter()
                .map(|x| {
                    u8::try_from(x)
                        .map_err(|_| NpyError::InvalidContent(format!("label {x} out of range")))
                })
                .collect::<Result<_, _>>()?,
            ArrayData::F32(_) => {
                return Err(NpyError::InvalidContent(
                    "label map must be an integer array".into(),
                ))
            }
        };
        Ok(LabelMap::new(h, w, values)?)
    }
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayFile, NpyError> {
    let mut reader = BufReader::new(File::open(path)?);
    read_from(&mut reader)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<ProbabilityVolume, NpyError> {
    read_array(path)?.into_volume()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap, NpyError> {
    read_array(path)?.into_labels()
}

pub fn read_from<R: Read>(reader: &mut R) -> Result<ArrayFile, NpyError> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    reader.read_exact(&mut preamble).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => NpyError::BadMagic,
        _ => NpyError::Io(e),
    })?;
    if preamble[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (preamble[6], preamble[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion { major, minor });
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|_| NpyError::HeaderMalformed("header shorter than declared".into()))?;
    let header = std::str::from_utf8(&header)
        .map_err(|_| NpyError::HeaderMalformed("header is not ASCII".into()))?;
    let dict = parse_header(header)?;
    if dict.fortran_order {
        return Err(NpyError::FortranOrder);
    }
    let dtype = DType::from_descr(&dict.descr)?;
    let count: usize = dict.shape.iter().product();
    let expected = count * dtype.item_size();

    let mut payload = Vec::with_capacity(expected);
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(NpyError::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = match dtype {
        DType::F32 => ArrayData::F32(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        DType::I32 => ArrayData::I32(
            payload
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        DType::U8 => ArrayData::U8(payload),
    };
    Ok(ArrayFile {
        shape: dict.shape,
        data,
    })
}

pub fn write_array(array: &ArrayFile, path: impl AsRef<Path>) -> Result<(), NpyError> {
    let mut bytes = Vec::with_capacity(128 + array.data.len() * array.dtype().item_size());
    write_to(array, &mut bytes)?;
    super::atomic_write(path.as_ref(), &bytes)?;
    Ok(())
}

pub fn write_volume(volume: &ProbabilityVolume, path: impl AsRef<Path>) -> Result<(), NpyError> {
    write_array(&ArrayFile::from_volume(volume), path)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<(), NpyError> {
    write_array(&ArrayFile::from_labels(labels), path)
}

pub fn write_to<W: Write>(array: &ArrayFile, writer: &mut W) -> io::Result<()> {
    let header = header_text(array.dtype(), &array.shape);
    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(header.len() as u16).to_le_bytes())?;
    writer.write_all(header.as_bytes())?;
    let mut writer = BufWriter::new(writer);
    match &array.data {
        ArrayData::F32(v) => {
            for x in v {
                writer.write_all(&x.to_le_bytes())?;
            }
        }
        ArrayData::I32(v) => {
            for x in v {
                writer.write_all(&x.to_le_bytes())?;
            }
        }
        ArrayData::U8(v) => writer.write_all(v)?,
    }
    writer.flush()
}

fn header_text(dtype: DType, shape: &[usize]) -> String {
    let shape = match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut text = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape
    );
    let unpadded = PREAMBLE_LEN + text.len() + 1;
    let padding = (ALIGNMENT - unpadded % ALIGNMENT) % ALIGNMENT;
    text.extend(std::iter::repeat_n(' ', padding));
    text.push('\n');
    text
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

#[derive(Debug, PartialEq)]
enum Value {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Parses the python dict literal of an npy header.
fn parse_header(text: &str) -> Result<HeaderDict, NpyError> {
    let mut parser = Parser {
        chars: text.trim_end().chars().collect(),
        pos: 0,
    };
    let (mut descr, mut fortran, mut shape) = (None, None, None);
    parser.expect('{')?;
    loop {
        parser.skip_ws();
        if parser.eat('}') {
            break;
        }
        let key = parser.string()?;
        parser.expect(':')?;
        let value = parser.value()?;
        match (key.as_str(), value) {
            ("descr", Value::Str(s)) => descr = Some(s),
            ("fortran_order", Value::Bool(b)) => fortran = Some(b),
            ("shape", Value::Tuple(t)) => shape = Some(t),
            (k, v) => {
                return Err(NpyError::HeaderMalformed(format!(
                    "unexpected entry {k:?}: {v:?}"
                )))
            }
        }
        parser.skip_ws();
        if !parser.eat(',') {
            parser.expect('}')?;
            break;
        }
    }
    parser.skip_ws();
    if parser.pos != parser.chars.len() {
        return Err(NpyError::HeaderMalformed("trailing characters".into()));
    }
    match (descr, fortran, shape) {
        (Some(descr), Some(fortran_order), Some(shape)) => Ok(HeaderDict {
            descr,
            fortran_order,
            shape,
        }),
        _ => Err(NpyError::HeaderMalformed(
            "header must define descr, fortran_order and shape".into(),
        )),
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.chars.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), NpyError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(NpyError::HeaderMalformed(format!(
                "expected {c:?} at offset {}",
                self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String, NpyError> {
        self.skip_ws();
        let quote = match self.chars.get(self.pos) {
            Some(&q @ ('\'' | '"')) => q,
            _ => return Err(NpyError::HeaderMalformed("expected a quoted string".into())),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.chars.len() {
            return Err(NpyError::HeaderMalformed("unterminated string".into()));
        }
        let s = self.chars[start..self.pos].iter().collect();
        self.pos += 1;
        Ok(s)
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn value(&mut self) -> Result<Value, NpyError> {
        self.skip_ws();
        match self.chars.get(self.pos) {
            Some('\'' | '"') => self.string().map(Value::Str),
            Some('(') => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    if self.eat(')') {
                        break;
                    }
                    let word = self.word();
                    let dim = word.parse::<usize>().map_err(|_| {
                        NpyError::HeaderMalformed(format!("bad shape extent {word:?}"))
                    })?;
                    dims.push(dim);
                    if !self.eat(',') {
                        self.expect(')')?;
                        break;
                    }
                }
                Ok(Value::Tuple(dims))
            }
            _ => match self.word().as_str() {
                "True" => Ok(Value::Bool(true)),
                "False" => Ok(Value::Bool(false)),
                other => Err(NpyError::HeaderMalformed(format!("bad value {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw_file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut bytes = MAGIC.to_vec();
        bytes.extend([1, 0]);
        bytes.extend((header.len() as u16).to_le_bytes());
        bytes.extend(header.as_bytes());
        bytes.extend(payload);
        bytes
    }

    fn padded(dict: &str) -> String {
        let mut h = dict.to_string();
        while (PREAMBLE_LEN + h.len() + 1) % 64 != 0 {
            h.push(' ');
        }
        h.push('\n');
        h
    }

    #[test]
    fn reads_handmade_scalar_vector() {
        let header = padded("{'descr': '<f4', 'fortran_order': False, 'shape': (1,), }");
        let bytes = raw_file(&header, &0f32.to_le_bytes());
        assert_eq!((bytes.len() - 4) % 64, 0);
        let a = read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(a.shape(), &[1]);
        assert_eq!(a.data(), &ArrayData::F32(vec![0.0]));
    }

    #[test]
    fn writer_matches_numpy_header_bytes() {
        let a = ArrayFile::new(vec![1], ArrayData::F32(vec![0.0])).unwrap();
        let mut out = Vec::new();
        write_to(&a, &mut out).unwrap();
        let header = padded("{'descr': '<f4', 'fortran_order': False, 'shape': (1,), }");
        assert_eq!(out, raw_file(&header, &0f32.to_le_bytes()));
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let header = padded("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }");
        let bytes = raw_file(&header, &[0u8; 8]);
        assert!(matches!(
            read_from(&mut bytes.as_slice()),
            Err(NpyError::SizeMismatch {
                expected: 16,
                actual: 8
            })
        ));
    }

    #[test]
    fn error_paths() {
        let mut bad = raw_file(&padded("{'descr': '<f4', 'fortran_order': False, 'shape': (), }"), &[0; 4]);
        bad[0] = b'X';
        assert!(matches!(read_from(&mut bad.as_slice()), Err(NpyError::BadMagic)));

        let mut v2 = raw_file(&padded("{'descr': '<f4', 'fortran_order': False, 'shape': (), }"), &[0; 4]);
        v2[6] = 2;
        assert!(matches!(
            read_from(&mut v2.as_slice()),
            Err(NpyError::UnsupportedVersion { major: 2, minor: 0 })
        ));

        let f8 = raw_file(&padded("{'descr': '<f8', 'fortran_order': False, 'shape': (), }"), &[0; 8]);
        assert!(matches!(read_from(&mut f8.as_slice()), Err(NpyError::UnsupportedDtype(_))));

        let fortran = raw_file(&padded("{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }"), &[0; 4]);
        assert!(matches!(read_from(&mut fortran.as_slice()), Err(NpyError::FortranOrder)));

        let junk = raw_file(&padded("{'descr': '<f4', 'shape': (1,), }"), &[0; 4]);
        assert!(matches!(read_from(&mut junk.as_slice()), Err(NpyError::HeaderMalformed(_))));

        let junk = raw_file(&padded("{'descr': '<f4', 'fortran_order': Maybe, 'shape': (1,)}"), &[0; 4]);
        assert!(matches!(read_from(&mut junk.as_slice()), Err(NpyError::HeaderMalformed(_))));
    }

    #[test]
    fn accepts_double_quotes_and_no_trailing_comma() {
        let header = padded(r#"{"descr": "|u1", "fortran_order": False, "shape": (2,3)}"#);
        let a = read_from(&mut raw_file(&header, &[1, 2, 3, 4, 5, 6]).as_slice()).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
    }

    #[test]
    fn scalar_and_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scalar = ArrayFile::new(vec![], ArrayData::F32(vec![1.0])).unwrap();
        let p = dir.path().join("s.npy");
        write_array(&scalar, &p).unwrap();
        assert_eq!(read_array(&p).unwrap(), scalar);

        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 255]).unwrap();
        let p = dir.path().join("l.npy");
        write_labels(&labels, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        write_labels(&labels, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn volume_loading_validates_distributions() {
        let bad = ArrayFile::new(vec![1, 1, 2], ArrayData::F32(vec![0.6, 0.6])).unwrap();
        assert!(matches!(bad.into_volume(), Err(NpyError::Volume(_))));
        let inf = ArrayFile::new(vec![1, 1, 2], ArrayData::F32(vec![f32::INFINITY, 0.0])).unwrap();
        assert!(inf.into_volume().is_err());
    }

    fn arb_array() -> impl Strategy<Value = ArrayFile> {
        let shape = prop::collection::vec(0usize..5, 0..4);
        (shape, 0..3u8).prop_flat_map(|(shape, kind)| {
            let n: usize = shape.iter().product();
            let data = match kind {
                0 => prop::collection::vec(any::<f32>(), n)
                    .prop_map(ArrayData::F32)
                    .boxed(),
                1 => prop::collection::vec(any::<i32>(), n)
                    .prop_map(ArrayData::I32)
                    .boxed(),
                _ => prop::collection::vec(any::<u8>(), n)
                    .prop_map(ArrayData::U8)
                    .boxed(),
            };
            data.prop_map(move |d| ArrayFile::new(shape.clone(), d).unwrap())
        })
    }

    fn bits(a: &ArrayFile) -> Vec<u8> {
        match a.data() {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(a in arb_array()) {
            let mut bytes = Vec::new();
            write_to(&a, &mut bytes).unwrap();
            prop_assert_eq!((bytes.len() - a.data().len() * a.dtype().item_size()) % 64, 0);
            let back = read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), a.shape());
            prop_assert_eq!(back.dtype(), a.dtype());
            prop_assert_eq!(bits(&back), bits(&a));
        }
    }
}
