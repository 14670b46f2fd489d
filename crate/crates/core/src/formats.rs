//! On-disk formats: the binary EEG stream, JSON sidecars, and base64 matrix
//! blobs used inside model bundles and session logs.
//!
//! Stream layout (little endian): `"EEGS"`, version `u16`, fs `u32`, channel
//! count `u16`, then per channel a `u16` byte length and UTF-8 name, then
//! frame-major `f32` samples up to the end of the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;
use crate::synth::{GroundTruth, Recording, SyntheticSessionSpec};

pub const STREAM_MAGIC: &[u8; 4] = b"EEGS";
pub const STREAM_VERSION: u16 = 1;
/// Version of every JSON artifact.
pub const FORMAT_VERSION: u32 = 1;

/// Common preamble of every JSON artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub kind: String,
    pub format_version: u32,
    pub config_hash: String,
    pub montage: Vec<String>,
}

impl FileHeader {
    pub fn new(kind: &str, config_hash: &str, montage: &[String]) -> Self {
        Self {
            kind: kind.into(),
            format_version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            montage: montage.to_vec(),
        }
    }

    pub fn check(&self, kind: &str) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "{} has format version {}, this build reads {FORMAT_VERSION}",
                self.kind, self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} file, found {}", self.kind)));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Row-major `f64` values, base64 encoded.
#[derive(Serialize, Deserialize)]
struct MatrixBlob {
    dim: usize,
    data: String,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 matrix blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("matrix blob of {} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Serialize for SpdMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixBlob {
            dim: self.dim(),
            data: encode_f64s(&self.to_row_major()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpdMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let blob = MatrixBlob::deserialize(d)?;
        let values = decode_f64s(&blob.data).map_err(D::Error::custom)?;
        SpdMatrix::from_row_slice(blob.dim, &values).map_err(D::Error::custom)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Encodes a recording in the stream format.
pub fn encode_stream(rec: &Recording) -> Result<Vec<u8>> {
    let fs = rec.fs.round();
    if (rec.fs - fs).abs() > 1e-9 || !(1.0..=u32::MAX as f64).contains(&fs) {
        return Err(Error::Format(format!("sampling rate {} is not a whole number of Hz", rec.fs)));
    }
    let c = rec.channels();
    if c == 0 || c > u16::MAX as usize {
        return Err(Error::Format(format!("{c} channels cannot be stored")));
    }
    if rec.data.len() % c != 0 {
        return Err(Error::shape(format!("a multiple of {c} samples"), rec.data.len()));
    }
    let mut out = Vec::with_capacity(16 + rec.data.len() * 4);
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(fs as u32).to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    for name in &rec.channel_names {
        let b = name.as_bytes();
        if b.len() > u16::MAX as usize {
            return Err(Error::Format(format!("channel name of {} bytes is too long", b.len())));
        }
        out.extend_from_slice(&(b.len() as u16).to_le_bytes());
        out.extend_from_slice(b);
    }
    for v in &rec.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Size of the stream header for these channel names.
pub fn stream_header_len(channel_names: &[String]) -> usize {
    4 + 2 + 4 + 2 + channel_names.iter().map(|n| 2 + n.len()).sum::<usize>()
}

pub fn decode_stream(bytes: &[u8]) -> Result<Recording> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format(format!("stream truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != STREAM_MAGIC {
        return Err(Error::Format("missing EEGS magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != STREAM_VERSION {
        return Err(Error::Version(format!(
            "stream version {version}, this build reads {STREAM_VERSION}"
        )));
    }
    let fs = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let c = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
    if c == 0 || fs == 0 {
        return Err(Error::Format(format!("stream declares {c} channels at {fs} Hz")));
    }
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|e| Error::Format(format!("channel name is not UTF-8: {e}")))?;
        names.push(name.to_string());
    }
    let body = &bytes[pos..];
    if body.len() % (4 * c) != 0 {
        return Err(Error::Format(format!(
            "sample block of {} bytes is not whole frames of {c} channels",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Recording {
        fs: fs as f64,
        channel_names: names,
        data,
    })
}

pub fn write_stream(path: &Path, rec: &Recording) -> Result<()> {
    let bytes = encode_stream(rec)?;
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn read_stream(path: &Path) -> Result<Recording> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    decode_stream(&bytes)
}

/// Ground truth and generator settings stored next to a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSidecar {
    pub header: FileHeader,
    /// File name of the stream this sidecar describes.
    pub stream: String,
    pub fs: f64,
    pub n_frames: usize,
    pub ground_truth: GroundTruth,
    pub spec: Option<SyntheticSessionSpec>,
}

pub const SIDECAR_KIND: &str = "stream_sidecar";
pub const BUNDLE_KIND: &str = "model_bundle";
pub const SESSION_LOG_KIND: &str = "session_log";

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

/// Reads any JSON artifact, checking its header first so version mismatches
/// surface as version errors rather than schema errors.
pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    from_json(&text, kind)
}

pub fn from_json<T: DeserializeOwned>(text: &str, kind: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Probe {
        header: FileHeader,
    }
    let probe: Probe =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("unreadable {kind} header: {e}")))?;
    probe.header.check(kind)?;
    serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed {kind}: {e}")))
}
