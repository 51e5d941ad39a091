//! Tag files.
//!
//! Binary: a 16-byte little-endian header (`FTAG`, version `u16`, party
//! `u8`, reserved `u8`, epoch `i64`) followed by 9-byte records (channel
//! `u8`, timestamp `i64` in ps). CSV: a `channel,timestamp_ps` header line
//! and one `NAME,ps` line per tag; party comes from the caller and the epoch
//! is zero.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use timebin_core::{Channel, Party, TagStream, TimeTag};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTAG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 9;
pub const CSV_HEADER: &str = "channel,timestamp_ps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TagFormat {
    #[default]
    Binary,
    Csv,
}

impl TagFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TagFormat::Binary => "ftag",
            TagFormat::Csv => "csv",
        }
    }

    /// Format implied by a file extension, binary unless `.csv`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => TagFormat::Csv,
            _ => TagFormat::Binary,
        }
    }
}

impl FromStr for TagFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "binary" => Ok(TagFormat::Binary),
            "csv" => Ok(TagFormat::Csv),
            other => Err(format!("unknown tag format `{other}` (expected binary or csv)")),
        }
    }
}

impl fmt::Display for TagFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagFormat::Binary => "binary",
            TagFormat::Csv => "csv",
        })
    }
}

pub fn encode_binary(stream: &TagStream, out: &mut (impl Write + ?Sized)) -> std::io::Result<()> {
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(MAGIC);
    header[4..6].copy_from_slice(&VERSION.to_le_bytes());
    header[6] = stream.party().code();
    header[8..].copy_from_slice(&stream.epoch().to_le_bytes());
    out.write_all(&header)?;
    let mut rec = [0u8; RECORD_LEN];
    for t in stream.tags() {
        rec[0] = t.channel.code();
        rec[1..].copy_from_slice(&t.timestamp.to_le_bytes());
        out.write_all(&rec)?;
    }
    Ok(())
}

pub fn encode_csv(stream: &TagStream, out: &mut (impl Write + ?Sized)) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for t in stream.tags() {
        writeln!(out, "{},{}", t.channel.name(), t.timestamp)?;
    }
    Ok(())
}

/// A decoding failure at a byte offset (binary) or line (CSV).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub location: String,
    pub message: String,
}

fn byte_error(offset: usize, message: impl Into<String>) -> FormatError {
    FormatError {
        location: format!("byte {offset}"),
        message: message.into(),
    }
}

fn line_error(line: usize, offset: usize, message: impl Into<String>) -> FormatError {
    FormatError {
        location: format!("line {line} (byte {offset})"),
        message: message.into(),
    }
}

fn order_error(e: timebin_core::Error, locate: impl Fn(usize) -> String) -> FormatError {
    match e {
        timebin_core::Error::Unsorted { index, .. } | timebin_core::Error::DuplicateTag { index, .. } => {
            FormatError {
                location: locate(index),
                message: e.to_string(),
            }
        }
        other => FormatError {
            location: "stream".into(),
            message: other.to_string(),
        },
    }
}

/// Decodes a binary tag file. An empty input is an empty stream of
/// `default_party`.
pub fn decode_binary(bytes: &[u8], default_party: Party) -> std::result::Result<TagStream, FormatError> {
    if bytes.is_empty() {
        return Ok(TagStream::empty(default_party, 0));
    }
    if bytes.len() < HEADER_LEN {
        return Err(byte_error(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(byte_error(0, "bad magic, not a tag file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(byte_error(4, format!("unsupported format version {version}")));
    }
    let party = Party::from_code(bytes[6]).ok_or_else(|| byte_error(6, format!("unknown party code {}", bytes[6])))?;
    let epoch = i64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() % RECORD_LEN != 0 {
        let at = HEADER_LEN + body.len() / RECORD_LEN * RECORD_LEN;
        return Err(byte_error(at, "truncated record"));
    }
    let mut tags = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let channel = Channel::from_code(rec[0]).ok_or_else(|| byte_error(offset, format!("unknown channel code {}", rec[0])))?;
        let timestamp = i64::from_le_bytes(rec[1..].try_into().expect("8 bytes"));
        tags.push(TimeTag::new(timestamp, channel));
    }
    TagStream::new(party, epoch, tags)
        .map_err(|e| order_error(e, |i| format!("byte {}", HEADER_LEN + i * RECORD_LEN)))
}

pub fn decode_csv(text: &str, party: Party) -> std::result::Result<TagStream, FormatError> {
    let mut tags = Vec::new();
    let mut offset = 0;
    let mut line_offsets = Vec::new();
    for (n, raw) in text.split_inclusive('\n').enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end_matches(['\n', '\r']);
        let here = offset;
        offset += raw.len();
        if n == 0 {
            if line != CSV_HEADER {
                return Err(line_error(line_no, here, format!("expected header `{CSV_HEADER}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (name, ts) = line
            .split_once(',')
            .ok_or_else(|| line_error(line_no, here, "expected two comma-separated fields"))?;
        let channel = Channel::from_name(name).ok_or_else(|| line_error(line_no, here, format!("unknown channel `{name}`")))?;
        let timestamp = ts
            .parse::<i64>()
            .map_err(|_| line_error(line_no, here, format!("bad timestamp `{ts}`")))?;
        tags.push(TimeTag::new(timestamp, channel));
        line_offsets.push((line_no, here));
    }
    TagStream::new(party, 0, tags).map_err(|e| {
        order_error(e, |i| {
            let (l, o) = line_offsets[i];
            format!("line {l} (byte {o})")
        })
    })
}

pub fn write_tags(stream: &TagStream, path: &Path, format: TagFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::with_capacity(1 << 20, file);
    match format {
        TagFormat::Binary => encode_binary(stream, &mut out),
        TagFormat::Csv => encode_csv(stream, &mut out),
    }
    .and_then(|_| out.flush())
    .map_err(|e| Error::io(path, e))
}

/// Reads a tag file. The party of a binary file comes from its header;
/// `party` is used for CSV and for empty files.
pub fn read_tags(path: &Path, format: TagFormat, party: Party) -> Result<TagStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = match format {
        TagFormat::Binary => decode_binary(&bytes, party),
        TagFormat::Csv => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
                path: path.into(),
                location: format!("byte {}", e.valid_up_to()),
                message: "not UTF-8".into(),
            })?;
            decode_csv(text, party)
        }
    };
    parsed.map_err(|e| Error::Parse {
        path: path.into(),
        location: e.location,
        message: e.message,
    })
}
