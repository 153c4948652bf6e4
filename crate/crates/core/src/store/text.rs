//! Human-readable envelopes for sidecars, calibrations and manifests.
//!
//! ```text
//! hvann 1.0
//! sha256 <hex digest of everything after this line>
//! { ...pretty JSON... }
//! ```

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::FormatError;

pub const ANNOTATION: &str = "hvann";
pub const CALIBRATION: &str = "hvcal";
pub const MANIFEST: &str = "hvman";

pub fn encode<T: Serialize>(kind: &str, major: u16, minor: u16, value: &T) -> Result<String, FormatError> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| FormatError::Text(e.to_string()))?;
    body.push('\n');
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    Ok(format!("{kind} {major}.{minor}\nsha256 {digest}\n{body}"))
}

fn header_line(text: &str, at: usize) -> Result<(&str, usize), FormatError> {
    let rest = &text[at..];
    match rest.find('\n') {
        Some(n) => Ok((&rest[..n], at + n + 1)),
        None => Err(FormatError::Truncated {
            offset: text.len() as u64,
            needed: 1,
        }),
    }
}

fn parse_version(s: &str) -> Option<(u16, u16)> {
    let (a, b) = s.split_once('.')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Byte offset of a 1-based line/column pair.
fn offset_of(body: &str, line: usize, column: usize) -> usize {
    let start: usize = body
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(body.len())
}

/// Returns the file's minor version and the decoded body.
pub fn decode<T: DeserializeOwned>(text: &str, kind: &str, major: u16) -> Result<(u16, T), FormatError> {
    let (first, at) = header_line(text, 0)?;
    let (found_kind, version) = first.split_once(' ').unwrap_or((first, ""));
    if found_kind != kind {
        return Err(FormatError::BadMagic {
            expected: kind.into(),
            found: found_kind.chars().take(16).collect(),
        });
    }
    let (file_major, minor) = parse_version(version).ok_or_else(|| FormatError::Malformed {
        section: "header".into(),
        offset: (kind.len() + 1) as u64,
        detail: format!("bad version `{version}`"),
    })?;
    if file_major != major {
        return Err(FormatError::Version {
            major: file_major,
            minor,
            supported: major,
        });
    }
    let (second, body_at) = header_line(text, at)?;
    let digest = second.strip_prefix("sha256 ").ok_or_else(|| FormatError::Malformed {
        section: "header".into(),
        offset: at as u64,
        detail: "expected `sha256 <digest>`".into(),
    })?;
    let body = &text[body_at..];
    if hex::encode(Sha256::digest(body.as_bytes())) != digest {
        return Err(FormatError::Checksum {
            section: "body".into(),
            offset: body_at as u64,
        });
    }
    let value = serde_json::from_str(body).map_err(|e| FormatError::Malformed {
        section: "body".into(),
        offset: (body_at + offset_of(body, e.line(), e.column())) as u64,
        detail: format!("{e}"),
    })?;
    Ok((minor, value))
}
