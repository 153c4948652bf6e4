//! Sectioned little-endian binary container.
//!
//! ```text
//! magic[4] major:u16 minor:u16 count:u32
//! { tag[4] len:u64 crc32:u32 payload[len] } * count
//! ```

use super::FormatError;

pub const HEADER_LEN: usize = 12;
const SECTION_HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub tag: [u8; 4],
    /// Absolute offset of the payload.
    pub offset: u64,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub minor: u16,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn section(&self, tag: &[u8; 4]) -> Option<&Section> {
        self.sections.iter().find(|s| &s.tag == tag)
    }

    pub fn require(&self, tag: &[u8; 4]) -> Result<&Section, FormatError> {
        self.section(tag).ok_or_else(|| FormatError::Malformed {
            section: tag_name(tag),
            offset: 0,
            detail: "required section missing".into(),
        })
    }
}

pub fn tag_name(tag: &[u8; 4]) -> String {
    String::from_utf8_lossy(tag).into_owned()
}

pub fn encode(magic: &[u8; 4], major: u16, minor: u16, sections: &[(&[u8; 4], Vec<u8>)]) -> Vec<u8> {
    let body: usize = sections.iter().map(|(_, p)| p.len() + SECTION_HEADER_LEN).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(magic);
    out.extend_from_slice(&major.to_le_bytes());
    out.extend_from_slice(&minor.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(*tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        out.extend_from_slice(payload);
    }
    out
}

/// Parse and checksum every section. Majors other than `major` are refused;
/// any minor is accepted and unknown sections are kept for the caller to skip.
pub fn decode(bytes: &[u8], magic: &[u8; 4], major: u16) -> Result<Container, FormatError> {
    let mut r = Reader::new(bytes, "header", 0);
    let found = r.take(4)?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: tag_name(magic),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let file_major = r.u16()?;
    let minor = r.u16()?;
    if file_major != major {
        return Err(FormatError::Version {
            major: file_major,
            minor,
            supported: major,
        });
    }
    let count = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let header_at = r.offset() - 4;
        let len = r.u64()?;
        let crc = r.u32()?;
        let offset = r.offset();
        if len > (bytes.len() as u64).saturating_sub(offset) {
            return Err(FormatError::Truncated { offset, needed: len });
        }
        let payload = r.take(len as usize)?;
        if crc32fast::hash(payload) != crc {
            return Err(FormatError::Checksum {
                section: tag_name(&tag),
                offset: header_at,
            });
        }
        sections.push(Section {
            tag,
            offset,
            payload: payload.to_vec(),
        });
    }
    if r.remaining() != 0 {
        return Err(FormatError::Malformed {
            section: "trailer".into(),
            offset: r.offset(),
            detail: format!("{} unexpected trailing bytes", r.remaining()),
        });
    }
    Ok(Container { minor, sections })
}

/// Bounds-checked little-endian reader reporting absolute offsets.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
    section: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], section: &'static str, base: u64) -> Self {
        Reader {
            buf,
            pos: 0,
            base,
            section,
        }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                needed: n as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn malformed(&self, detail: impl Into<String>) -> FormatError {
        FormatError::Malformed {
            section: self.section.into(),
            offset: self.offset(),
            detail: detail.into(),
        }
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn bool(&mut self) -> Result<bool, FormatError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.malformed(format!("invalid flag byte {b}"))),
        }
    }

    pub fn string(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        let at = self.offset();
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError::Malformed {
            section: self.section.into(),
            offset: at,
            detail: "string is not UTF-8".into(),
        })
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(self.malformed(format!("{} unread bytes", self.remaining())))
        }
    }
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        encode(b"TEST", 1, 3, &[(b"AAAA", vec![1, 2, 3]), (b"BBBB", vec![9; 10])])
    }

    #[test]
    fn round_trip() {
        let c = decode(&sample(), b"TEST", 1).unwrap();
        assert_eq!(c.minor, 3);
        assert_eq!(c.require(b"AAAA").unwrap().payload, vec![1, 2, 3]);
        assert_eq!(c.require(b"BBBB").unwrap().offset, 12 + 16 + 3 + 16);
        assert!(c.require(b"CCCC").is_err());
    }

    #[test]
    fn corruption_is_located() {
        let mut b = sample();
        let last = b.len() - 1;
        b[last] ^= 0xff;
        assert_eq!(
            decode(&b, b"TEST", 1).unwrap_err(),
            FormatError::Checksum {
                section: "BBBB".into(),
                offset: 31
            }
        );
        let b = sample();
        assert!(matches!(
            decode(&b[..b.len() - 4], b"TEST", 1).unwrap_err(),
            FormatError::Truncated { offset: 47, .. }
        ));
        assert!(matches!(
            decode(&b, b"NOPE", 1).unwrap_err(),
            FormatError::BadMagic { .. }
        ));
        assert!(matches!(
            decode(&b, b"TEST", 2).unwrap_err(),
            FormatError::Version { major: 1, .. }
        ));
    }
}
