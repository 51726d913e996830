//! Drives endpoints over byte streams and records transcripts.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::os::unix::net::UnixStream;
use std::thread;
use std::time::Duration;

use crate::bits::BitString;

use super::frame::{read_frame, write_frame, Frame, FrameError};
use super::{AliceSession, BlockStats, BobSession, Endpoint, Role, SessionError};

const SENT: u8 = b'>';
const RECEIVED: u8 = b'<';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub sent: bool,
    pub frame: Frame,
}

/// Transcript encoding: one direction byte (`>` sent, `<` received) before
/// each encoded frame.
pub fn parse_transcript(mut bytes: &[u8]) -> Result<Vec<TranscriptEntry>, FrameError> {
    let mut out = Vec::new();
    while let Some((&dir, rest)) = bytes.split_first() {
        let sent = match dir {
            SENT => true,
            RECEIVED => false,
            _ => return Err(FrameError::Malformed("transcript direction")),
        };
        let (frame, used) = Frame::decode_prefix(rest)?;
        out.push(TranscriptEntry { sent, frame });
        bytes = &rest[used..];
    }
    Ok(out)
}

fn record(transcript: &mut Option<&mut Vec<u8>>, dir: u8, frame: &Frame) -> Result<(), FrameError> {
    if let Some(t) = transcript {
        t.push(dir);
        t.extend(frame.encode()?);
    }
    Ok(())
}

/// Runs one endpoint to completion over a reader/writer pair.
///
/// Returns `Ok` when the session reaches `Done`; an abort on either side
/// is reported as [`SessionError::Aborted`].
pub fn run_session<E, R, W>(
    endpoint: &mut E,
    reader: R,
    writer: W,
    mut transcript: Option<&mut Vec<u8>>,
) -> Result<(), SessionError>
where
    E: Endpoint + ?Sized,
    R: Read,
    W: Write,
{
    let mut reader = BufReader::with_capacity(1 << 16, reader);
    let mut writer = BufWriter::with_capacity(1 << 16, writer);
    let mut send = |frames: Vec<Frame>, finished: bool, transcript: &mut Option<&mut Vec<u8>>| {
        let mut result = Ok(());
        for f in &frames {
            record(transcript, SENT, f)?;
            if result.is_ok() {
                result = write_frame(&mut writer, f);
            }
        }
        if result.is_ok() {
            result = writer.flush().map_err(FrameError::from);
        }
        match result {
            // The peer may already have hung up after its final frame.
            Err(_) if finished => Ok(()),
            other => other,
        }
    };
    send(endpoint.start(), false, &mut transcript)?;
    while !endpoint.is_finished() {
        let frame = read_frame(&mut reader)?;
        record(&mut transcript, RECEIVED, &frame)?;
        let out = endpoint.advance(frame);
        send(out, endpoint.is_finished(), &mut transcript)?;
    }
    match endpoint.abort() {
        Some((reason, detail)) => Err(SessionError::Aborted { reason, detail }),
        None => Ok(()),
    }
}

/// What one endpoint ends with.
#[derive(Debug)]
pub struct SessionOutcome {
    pub role: Role,
    pub stats: Vec<BlockStats>,
    /// Present only when the session completed.
    pub final_key: Option<BitString>,
    pub result: Result<(), SessionError>,
    pub transcript: Vec<u8>,
}

fn outcome<E: Endpoint>(endpoint: &E, result: Result<(), SessionError>, transcript: Vec<u8>) -> SessionOutcome {
    SessionOutcome {
        role: endpoint.role(),
        stats: endpoint.block_stats().to_vec(),
        final_key: result.is_ok().then(|| endpoint.final_key().clone()),
        result,
        transcript,
    }
}

fn drive<E: Endpoint>(
    mut endpoint: E,
    stream: impl Write,
    reader: impl Read,
    keep_transcript: bool,
) -> SessionOutcome {
    let mut transcript = Vec::new();
    let result = run_session(
        &mut endpoint,
        reader,
        stream,
        keep_transcript.then_some(&mut transcript),
    );
    outcome(&endpoint, result, transcript)
}

#[derive(Debug, Clone, Copy)]
pub struct LinkOptions {
    /// Read timeout on each endpoint's stream.
    pub timeout: Option<Duration>,
    /// Keep each side's transcript in its outcome.
    pub record_transcripts: bool,
}

impl Default for LinkOptions {
    fn default() -> Self {
        Self {
            timeout: Some(Duration::from_secs(120)),
            record_transcripts: false,
        }
    }
}

/// Runs both endpoints on their own threads over a local socket pair.
pub fn run_inproc(
    alice: AliceSession,
    bob: BobSession,
    opts: LinkOptions,
) -> std::io::Result<(SessionOutcome, SessionOutcome)> {
    let (a, b) = UnixStream::pair()?;
    for s in [&a, &b] {
        s.set_read_timeout(opts.timeout)?;
    }
    let (a_read, b_read) = (a.try_clone()?, b.try_clone()?);
    let bob_thread = thread::spawn(move || drive(bob, b, b_read, opts.record_transcripts));
    let alice_out = drive(alice, a, a_read, opts.record_transcripts);
    let bob_out = bob_thread.join().expect("bob session panicked");
    Ok((alice_out, bob_out))
}

/// Runs both endpoints over TCP: Alice listens on `addr`, Bob connects.
pub fn run_tcp<A: ToSocketAddrs>(
    addr: A,
    alice: AliceSession,
    bob: BobSession,
    opts: LinkOptions,
) -> std::io::Result<(SessionOutcome, SessionOutcome)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let bob_thread = thread::spawn(move || -> std::io::Result<SessionOutcome> {
        let stream = TcpStream::connect(local)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(opts.timeout)?;
        let reader = stream.try_clone()?;
        Ok(drive(bob, stream, reader, opts.record_transcripts))
    });
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(opts.timeout)?;
    let reader = stream.try_clone()?;
    let alice_out = drive(alice, stream, reader, opts.record_transcripts);
    let bob_out = bob_thread.join().expect("bob session panicked")?;
    Ok((alice_out, bob_out))
}
