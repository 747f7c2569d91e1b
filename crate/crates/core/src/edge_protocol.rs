//! Edge-to-cloud transfer of packed index streams.
//!
//! Wire frames are `type (1 byte) | u32 LE payload length | payload`.
//!
//! Session, edge side first:
//!
//! ```text
//! edge  -> HELLO        { u32 codebook CRC, u32 K, u32 L }
//! cloud -> ACK          { u32 codebook CRC }            or ERROR
//! edge  -> INDEX_STREAM { u32 event count, packed indices }
//! cloud -> ACK          { u32 CRC-32 of reconstruction } or ERROR
//! ```
//!
//! ERROR payloads are a one-byte code followed by a UTF-8 message; a
//! codebook mismatch carries the server's codebook CRC after the code.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpListener;

use crate::codec_io::{bits_per_index, codebook_crc, crc32, pack_indices, packed_len, unpack_indices};
use crate::error::{CurpError, Result};
use crate::metrics::{usage_stats, UsageStats};
use crate::quantizer::{encode_batch, reconstruct_batch};
use crate::types::{Codebook, EmbeddingPool, PQCode};

pub const FRAME_HEADER_LEN: usize = 5;
pub const HELLO_PAYLOAD_LEN: usize = 12;

const ERR_CODEBOOK: u8 = 1;
const ERR_DATA: u8 = 2;
const ERR_PROTOCOL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 0x01,
    IndexStream = 0x02,
    Ack = 0x03,
    Error = 0x04,
}

impl TryFrom<u8> for FrameType {
    type Error = CurpError;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            0x01 => Ok(FrameType::Hello),
            0x02 => Ok(FrameType::IndexStream),
            0x03 => Ok(FrameType::Ack),
            0x04 => Ok(FrameType::Error),
            other => Err(CurpError::UnknownFrameType(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Frame { frame_type, payload }
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.wire_len());
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

/// Decodes one frame from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize)> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(CurpError::Truncated);
    }
    let frame_type = FrameType::try_from(bytes[0])?;
    let len = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes")) as usize;
    let end = FRAME_HEADER_LEN + len;
    if bytes.len() < end {
        return Err(CurpError::Truncated);
    }
    Ok((Frame::new(frame_type, bytes[FRAME_HEADER_LEN..end].to_vec()), end))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<usize> {
    let bytes = encode_frame(frame);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

fn read_exact_or_closed<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => CurpError::ConnectionClosed,
        _ => CurpError::Io(e),
    })
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    read_exact_or_closed(r, &mut header)?;
    let frame_type = FrameType::try_from(header[0])?;
    let len = u32::from_le_bytes(header[1..5].try_into().expect("4 bytes")) as usize;
    let mut payload = vec![0u8; len];
    read_exact_or_closed(r, &mut payload)?;
    Ok(Frame::new(frame_type, payload))
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(CurpError::Truncated)
}

fn error_frame(code: u8, extra: &[u8], message: &str) -> Frame {
    let mut payload = vec![code];
    payload.extend_from_slice(extra);
    payload.extend_from_slice(message.as_bytes());
    Frame::new(FrameType::Error, payload)
}

fn error_from_frame(frame: &Frame, local_crc: u32) -> CurpError {
    match frame.payload.first() {
        Some(&ERR_CODEBOOK) => CurpError::CodebookMismatch {
            local: local_crc,
            remote: u32_at(&frame.payload, 1).unwrap_or(0),
        },
        _ => {
            let msg = frame.payload.get(1..).map(String::from_utf8_lossy).unwrap_or_default();
            CurpError::Protocol(format!("server error: {msg}"))
        }
    }
}

/// CRC-32 of a pool's values as little-endian `f32`.
pub fn reconstruction_crc(pool: &EmbeddingPool) -> u32 {
    let bytes: Vec<u8> = pool.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    crc32(&bytes)
}

/// Bandwidth accounting for one client session.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub events: usize,
    /// Every byte the client wrote, frame headers included.
    pub bytes_sent: usize,
    /// INDEX_STREAM payload: event count plus packed indices.
    pub index_payload_bytes: usize,
    /// What shipping the embeddings as `f32` would cost.
    pub raw_bytes: usize,
    /// `32 * dim / (L * ceil(log2 K))`: raw bits over index bits per event.
    pub per_event_compression: f64,
    /// `raw_bytes / bytes_sent`.
    pub session_compression: f64,
    pub reconstruction_crc: u32,
}

impl ClientReport {
    pub fn render(&self) -> String {
        format!(
            "events: {}\nbytes_sent: {}\nindex_payload_bytes: {}\nraw_bytes: {}\nper_event_compression: {}\nsession_compression: {:.9}\nreconstruction_crc: {:#010x}\n",
            self.events,
            self.bytes_sent,
            self.index_payload_bytes,
            self.raw_bytes,
            self.per_event_compression,
            self.session_compression,
            self.reconstruction_crc
        )
    }
}

pub fn per_event_compression(dim: usize, cb: &Codebook) -> f64 {
    let spec = cb.spec();
    (32 * dim) as f64 / (spec.num_subspaces() as u64 * bits_per_index(spec.vocab_size()) as u64) as f64
}

/// Edge side: announce the codebook, then send only packed indices of
/// `histories`. No embedding-derived data is sent before the server has
/// confirmed it holds the same codebook.
pub fn client_session<S: Read + Write>(histories: &EmbeddingPool, cb: &Codebook, conn: &mut S) -> Result<ClientReport> {
    histories.check_spec(cb.spec())?;
    let spec = cb.spec();
    let local_crc = codebook_crc(cb)?;

    let mut hello = Vec::with_capacity(HELLO_PAYLOAD_LEN);
    hello.extend_from_slice(&local_crc.to_le_bytes());
    hello.extend_from_slice(&(spec.vocab_size() as u32).to_le_bytes());
    hello.extend_from_slice(&(spec.num_subspaces() as u32).to_le_bytes());
    let mut bytes_sent = write_frame(conn, &Frame::new(FrameType::Hello, hello))?;

    let reply = read_frame(conn)?;
    match reply.frame_type {
        FrameType::Ack => {
            let remote = u32_at(&reply.payload, 0)?;
            if remote != local_crc {
                return Err(CurpError::CodebookMismatch { local: local_crc, remote });
            }
        }
        FrameType::Error => return Err(error_from_frame(&reply, local_crc)),
        other => return Err(CurpError::Protocol(format!("expected ACK, got {other:?}"))),
    }

    let encoded = encode_batch(histories, cb)?;
    let local_reconstruction = reconstruct_batch(&encoded.codes, cb)?;
    let mut payload = (encoded.codes.len() as u32).to_le_bytes().to_vec();
    payload.extend(pack_indices(&encoded.codes, spec)?);
    let index_payload_bytes = payload.len();
    bytes_sent += write_frame(conn, &Frame::new(FrameType::IndexStream, payload))?;

    let reply = read_frame(conn)?;
    let local = reconstruction_crc(&local_reconstruction);
    match reply.frame_type {
        FrameType::Ack => {
            let remote = u32_at(&reply.payload, 0)?;
            if remote != local {
                return Err(CurpError::ReconstructionMismatch { local, remote });
            }
        }
        FrameType::Error => return Err(error_from_frame(&reply, local_crc)),
        other => return Err(CurpError::Protocol(format!("expected ACK, got {other:?}"))),
    }

    let raw_bytes = histories.count() * histories.dim() * 4;
    Ok(ClientReport {
        events: histories.count(),
        bytes_sent,
        index_payload_bytes,
        raw_bytes,
        per_event_compression: per_event_compression(histories.dim(), cb),
        session_compression: raw_bytes as f64 / bytes_sent as f64,
        reconstruction_crc: local,
    })
}

/// What the cloud side ends up holding after a session.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerResult {
    pub codes: Vec<PQCode>,
    /// Quantized embeddings, one row per event.
    pub reconstructions: EmbeddingPool,
    pub crc: u32,
    pub usage: UsageStats,
}

/// Cloud side of one session. Any failure is reported to the peer as an
/// ERROR frame before being returned.
pub fn server_session<S: Read + Write>(cb: &Codebook, conn: &mut S) -> Result<ServerResult> {
    let local_crc = codebook_crc(cb)?;
    let spec = cb.spec();

    let hello = read_frame(conn)?;
    if hello.frame_type != FrameType::Hello || hello.payload.len() != HELLO_PAYLOAD_LEN {
        let msg = format!("expected HELLO, got {:?} with {} bytes", hello.frame_type, hello.payload.len());
        let _ = write_frame(conn, &error_frame(ERR_PROTOCOL, &[], &msg));
        return Err(CurpError::Protocol(msg));
    }
    let remote_crc = u32_at(&hello.payload, 0)?;
    let remote_k = u32_at(&hello.payload, 4)? as usize;
    let remote_l = u32_at(&hello.payload, 8)? as usize;
    if remote_crc != local_crc || remote_k != spec.vocab_size() || remote_l != spec.num_subspaces() {
        let _ = write_frame(conn, &error_frame(ERR_CODEBOOK, &local_crc.to_le_bytes(), "codebook mismatch"));
        return Err(CurpError::CodebookMismatch {
            local: local_crc,
            remote: remote_crc,
        });
    }
    write_frame(conn, &Frame::new(FrameType::Ack, local_crc.to_le_bytes().to_vec()))?;

    let stream = read_frame(conn)?;
    let decoded = (|| {
        if stream.frame_type != FrameType::IndexStream {
            return Err(CurpError::Protocol(format!("expected INDEX_STREAM, got {:?}", stream.frame_type)));
        }
        let count = u32_at(&stream.payload, 0)? as usize;
        // Bound the count by the bytes actually present before unpacking.
        if packed_len(count, spec) > stream.payload.len() - 4 {
            return Err(CurpError::Truncated);
        }
        let codes = unpack_indices(&stream.payload[4..], spec, count)?;
        let reconstructions = reconstruct_batch(&codes, cb)?;
        Ok((codes, reconstructions))
    })();
    let (codes, reconstructions) = match decoded {
        Ok(v) => v,
        Err(e) => {
            let code = if matches!(e, CurpError::Protocol(_)) { ERR_PROTOCOL } else { ERR_DATA };
            let _ = write_frame(conn, &error_frame(code, &[], &e.to_string()));
            return Err(e);
        }
    };

    let crc = reconstruction_crc(&reconstructions);
    write_frame(conn, &Frame::new(FrameType::Ack, crc.to_le_bytes().to_vec()))?;
    Ok(ServerResult {
        usage: usage_stats(&codes, spec)?,
        codes,
        reconstructions,
        crc,
    })
}

/// Accepts connections one at a time and runs a session on each, stopping
/// after `max_sessions` when given. Failed sessions are passed to
/// `on_session` and do not stop the loop.
pub fn serve(
    listener: &TcpListener,
    cb: &Codebook,
    max_sessions: Option<usize>,
    mut on_session: impl FnMut(Result<ServerResult>),
) -> Result<usize> {
    let mut handled = 0;
    while max_sessions.is_none_or(|m| handled < m) {
        let (mut stream, _) = listener.accept()?;
        on_session(server_session(cb, &mut stream));
        handled += 1;
    }
    Ok(handled)
}
