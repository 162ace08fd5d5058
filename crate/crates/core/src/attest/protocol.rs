//! Challenger/attester exchange over any reliable byte stream.
//!
//! Each message is one frame: a 4-byte big-endian length followed by the body.
//! The request body is `version(1) || scheme(1) || pcr(1) || vtpm(4) || nonce`
//! (nonce length-prefixed); the response body is a status byte followed by a
//! bundle (status 0) or a UTF-8 error message (status 1).

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::crypto::Modulus;
use crate::hwtpm::PcrIndex;
use crate::vtpm::VTpmId;
use crate::wire::{DecodeError, Reader, Writer};
use crate::Scheme;

use super::{
    decode_bundle, encode_bundle, verify_bundle, Challenge, QuoteBundle, TrustedKeys, Verdict,
    VerifyPolicy, MIN_NONCE_LEN,
};

pub const PROTOCOL_VERSION: u8 = 1;
pub const MAX_FRAME_LEN: usize = 64 << 20;

const STATUS_OK: u8 = 0;
const STATUS_ERR: u8 = 1;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("malformed message: {0}")]
    Malformed(#[from] DecodeError),
    #[error("attester refused: {0}")]
    Remote(String),
    #[error("asked for a {asked} bundle, got {got}")]
    SchemeMismatch { asked: Scheme, got: Scheme },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ProtocolError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ProtocolError::Timeout,
            io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
            _ => ProtocolError::Io(e),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), ProtocolError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(body.len()));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, ProtocolError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestRequest {
    pub scheme: Scheme,
    pub pcr: PcrIndex,
    pub vtpm: VTpmId,
    pub nonce: Vec<u8>,
}

impl AttestRequest {
    pub fn challenge(&self) -> Challenge {
        Challenge {
            nonce: self.nonce.clone(),
            pcr: self.pcr,
            vtpm: self.vtpm,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(PROTOCOL_VERSION)
            .u8(self.scheme.tag())
            .u8(self.pcr.get())
            .u32(self.vtpm.get())
            .blob(&self.nonce);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let version = r.u8()?;
        if version != PROTOCOL_VERSION {
            return Err(ProtocolError::Version(version));
        }
        let tag = r.u8()?;
        let scheme = Scheme::from_tag(tag)
            .ok_or_else(|| DecodeError::invalid("scheme", format!("tag {tag}")))?;
        let pcr = PcrIndex::new(r.u8()?).map_err(|e| DecodeError::invalid("pcr", e.to_string()))?;
        let vtpm =
            VTpmId::new(r.u32()?).map_err(|e| DecodeError::invalid("vtpm", e.to_string()))?;
        let nonce = r.blob()?.to_vec();
        r.finish()?;
        if nonce.len() < MIN_NONCE_LEN {
            return Err(DecodeError::invalid("nonce", format!("{} bytes", nonce.len())).into());
        }
        Ok(Self {
            scheme,
            pcr,
            vtpm,
            nonce,
        })
    }
}

/// Answers one request on `stream`. Handler failures are reported to the
/// peer and also returned; framing failures are returned only.
pub fn serve_connection<S, F>(stream: &mut S, handler: F) -> Result<AttestRequest, ProtocolError>
where
    S: Read + Write,
    F: FnOnce(&AttestRequest) -> Result<QuoteBundle, String>,
{
    let request = match AttestRequest::decode(&read_frame(stream)?) {
        Ok(req) => req,
        Err(e) => {
            let _ = send_error(stream, &e.to_string());
            return Err(e);
        }
    };
    match handler(&request) {
        Ok(bundle) => {
            let mut body = vec![STATUS_OK];
            body.extend_from_slice(&encode_bundle(&bundle));
            write_frame(stream, &body)?;
            Ok(request)
        }
        Err(msg) => {
            send_error(stream, &msg)?;
            Err(ProtocolError::Remote(msg))
        }
    }
}

fn send_error<W: Write>(w: &mut W, msg: &str) -> Result<(), ProtocolError> {
    let mut body = vec![STATUS_ERR];
    body.extend_from_slice(msg.as_bytes());
    write_frame(w, &body)
}

/// Sends `request` and returns the decoded bundle without verifying it.
pub fn request_bundle<S: Read + Write>(
    stream: &mut S,
    request: &AttestRequest,
    m: &Modulus,
) -> Result<QuoteBundle, ProtocolError> {
    write_frame(stream, &request.encode())?;
    let body = read_frame(stream)?;
    match body.split_first() {
        Some((&STATUS_OK, rest)) => {
            let bundle = decode_bundle(rest, m)?;
            if bundle.scheme() != request.scheme {
                return Err(ProtocolError::SchemeMismatch {
                    asked: request.scheme,
                    got: bundle.scheme(),
                });
            }
            Ok(bundle)
        }
        Some((&STATUS_ERR, rest)) => Err(ProtocolError::Remote(
            String::from_utf8_lossy(rest).into_owned(),
        )),
        Some((&status, _)) => {
            Err(DecodeError::invalid("response status", status.to_string()).into())
        }
        None => Err(ProtocolError::Truncated),
    }
}

/// Full challenger round: request, decode, verify.
pub fn challenge<S: Read + Write>(
    stream: &mut S,
    request: &AttestRequest,
    trusted: &TrustedKeys,
    policy: &VerifyPolicy,
) -> Result<Verdict, ProtocolError> {
    let bundle = request_bundle(stream, request, &trusted.modulus)?;
    Ok(verify_bundle(
        &bundle,
        &request.challenge(),
        trusted,
        policy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn request() -> AttestRequest {
        AttestRequest {
            scheme: Scheme::Tree,
            pcr: PcrIndex::new(10).unwrap(),
            vtpm: VTpmId::new(3).unwrap(),
            nonce: vec![0xab; 32],
        }
    }

    #[test]
    fn request_round_trip() {
        let req = request();
        let bytes = req.encode();
        assert_eq!(bytes.len(), 1 + 1 + 1 + 4 + 4 + 32);
        assert_eq!(AttestRequest::decode(&bytes).unwrap(), req);
        for cut in 0..bytes.len() {
            assert!(AttestRequest::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn wrong_version_and_short_nonce() {
        let mut bytes = request().encode();
        bytes[0] = 9;
        assert!(matches!(
            AttestRequest::decode(&bytes),
            Err(ProtocolError::Version(9))
        ));
        let short = AttestRequest {
            nonce: vec![1; 15],
            ..request()
        };
        assert!(matches!(
            AttestRequest::decode(&short.encode()),
            Err(ProtocolError::Malformed(_))
        ));
    }

    #[test]
    fn frames() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 5]);
        assert_eq!(read_frame(&mut Cursor::new(&buf)).unwrap(), b"hello");
        assert!(matches!(
            read_frame(&mut Cursor::new(&buf[..6])),
            Err(ProtocolError::Truncated)
        ));
        let huge = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert!(matches!(
            read_frame(&mut Cursor::new(&huge)),
            Err(ProtocolError::FrameTooLarge(_))
        ));
    }

    /// Reads from a fixed input and records writes.
    struct Duplex {
        input: Cursor<Vec<u8>>,
        output: Vec<u8>,
    }

    impl Read for Duplex {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            self.input.read(buf)
        }
    }

    impl Write for Duplex {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.output.write(buf)
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn server_reports_handler_errors() {
        let mut input = Vec::new();
        write_frame(&mut input, &request().encode()).unwrap();
        let mut s = Duplex {
            input: Cursor::new(input),
            output: Vec::new(),
        };
        let err = serve_connection(&mut s, |_| Err("no such vtpm".into())).unwrap_err();
        assert!(matches!(err, ProtocolError::Remote(_)));
        let reply = read_frame(&mut Cursor::new(&s.output)).unwrap();
        assert_eq!(reply[0], STATUS_ERR);
        assert_eq!(&reply[1..], b"no such vtpm");
    }

    #[test]
    fn server_rejects_bad_version() {
        let mut bytes = request().encode();
        bytes[0] = 2;
        let mut input = Vec::new();
        write_frame(&mut input, &bytes).unwrap();
        let mut s = Duplex {
            input: Cursor::new(input),
            output: Vec::new(),
        };
        assert!(matches!(
            serve_connection(&mut s, |_| unreachable!()),
            Err(ProtocolError::Version(2))
        ));
        assert_eq!(
            read_frame(&mut Cursor::new(&s.output)).unwrap()[0],
            STATUS_ERR
        );
    }
}
