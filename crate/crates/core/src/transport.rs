//! Byte-stream transports carrying protocol frames: TCP and an in-process
//! loopback. Both present the same `Read`/`Write` halves, so framing is
//! identical regardless of how bytes travel.

use crate::protocol::{self, DecodeError, Message, MsgType, FRAME_OVERHEAD, HEADER_LEN};
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("connection closed")]
    Closed,
}

const TYPES: usize = 9;

/// Per-direction frame and byte counters, indexed by message type.
#[derive(Debug, Default)]
pub struct TrafficStats {
    bytes: [AtomicU64; TYPES],
    frames: [AtomicU64; TYPES],
}

impl TrafficStats {
    fn record(&self, ty: u8, bytes: usize) {
        let i = (ty as usize).min(TYPES - 1);
        self.bytes[i].fetch_add(bytes as u64, Ordering::Relaxed);
        self.frames[i].fetch_add(1, Ordering::Relaxed);
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.iter().map(|b| b.load(Ordering::Relaxed)).sum()
    }

    pub fn total_frames(&self) -> u64 {
        self.frames.iter().map(|b| b.load(Ordering::Relaxed)).sum()
    }

    pub fn bytes_of(&self, ty: MsgType) -> u64 {
        self.bytes[ty as usize].load(Ordering::Relaxed)
    }

    pub fn frames_of(&self, ty: MsgType) -> u64 {
        self.frames[ty as usize].load(Ordering::Relaxed)
    }
}

/// Reads whole frames from a byte stream.
pub struct FrameReader {
    inner: Box<dyn Read + Send>,
    stats: Arc<TrafficStats>,
}

impl FrameReader {
    pub fn new(inner: Box<dyn Read + Send>) -> Self {
        Self {
            inner,
            stats: Arc::default(),
        }
    }

    pub fn stats(&self) -> Arc<TrafficStats> {
        Arc::clone(&self.stats)
    }

    /// Next frame's raw bytes. Clean EOF before a header yields `Closed`.
    pub fn read_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut header = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match self.inner.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Err(TransportError::Closed),
                Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let (ty, len) = protocol::parse_header(&header)?;
        let mut frame = vec![0u8; FRAME_OVERHEAD + len];
        frame[..HEADER_LEN].copy_from_slice(&header);
        self.inner.read_exact(&mut frame[HEADER_LEN..])?;
        self.stats.record(ty, frame.len());
        Ok(frame)
    }

    pub fn recv(&mut self) -> Result<Message, TransportError> {
        let frame = self.read_frame()?;
        Ok(protocol::decode(&frame)?)
    }
}

/// Writes whole frames; optionally copies every byte into a tap.
pub struct FrameWriter {
    inner: Box<dyn Write + Send>,
    stats: Arc<TrafficStats>,
    tap: Option<Arc<Mutex<Vec<u8>>>>,
}

impl FrameWriter {
    pub fn new(inner: Box<dyn Write + Send>) -> Self {
        Self {
            inner,
            stats: Arc::default(),
            tap: None,
        }
    }

    pub fn stats(&self) -> Arc<TrafficStats> {
        Arc::clone(&self.stats)
    }

    /// Captures a copy of every outgoing byte.
    pub fn tap(&mut self) -> Arc<Mutex<Vec<u8>>> {
        let tap = Arc::new(Mutex::new(Vec::new()));
        self.tap = Some(Arc::clone(&tap));
        tap
    }

    pub fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.inner.write_all(frame)?;
        self.inner.flush()?;
        self.stats.record(frame[5], frame.len());
        if let Some(tap) = &self.tap {
            tap.lock().unwrap().extend_from_slice(frame);
        }
        Ok(())
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        self.send_frame(&protocol::encode(msg))
    }
}

/// A bidirectional framed connection.
pub struct Connection {
    pub reader: FrameReader,
    pub writer: FrameWriter,
}

impl Connection {
    pub fn new(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Self {
            reader: FrameReader::new(reader),
            writer: FrameWriter::new(writer),
        }
    }

    pub fn tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        Ok(Self::new(Box::new(read_half), Box::new(stream)))
    }

    pub fn connect(addr: &str) -> io::Result<Self> {
        Self::tcp(TcpStream::connect(addr)?)
    }

    /// Two connected in-process endpoints.
    pub fn loopback_pair() -> (Connection, Connection) {
        let (a_tx, a_rx) = mpsc::channel();
        let (b_tx, b_rx) = mpsc::channel();
        let a = Connection::new(
            Box::new(LoopbackReader::new(b_rx)),
            Box::new(LoopbackWriter(a_tx)),
        );
        let b = Connection::new(
            Box::new(LoopbackReader::new(a_rx)),
            Box::new(LoopbackWriter(b_tx)),
        );
        (a, b)
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        self.writer.send(msg)
    }

    pub fn recv(&mut self) -> Result<Message, TransportError> {
        self.reader.recv()
    }

    pub fn split(self) -> (FrameReader, FrameWriter) {
        (self.reader, self.writer)
    }
}

/// Receiving half of an in-process byte pipe.
pub struct LoopbackReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

impl LoopbackReader {
    fn new(rx: Receiver<Vec<u8>>) -> Self {
        Self {
            rx,
            buf: Vec::new(),
            pos: 0,
        }
    }
}

impl Read for LoopbackReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

/// Sending half of an in-process byte pipe.
pub struct LoopbackWriter(Sender<Vec<u8>>);

impl Write for LoopbackWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        self.0
            .send(data.to_vec())
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{MsgAck, MsgEpochDone};

    #[test]
    fn loopback_carries_frames_and_counts_bytes() {
        let (mut a, mut b) = Connection::loopback_pair();
        let msg = Message::EpochDone(MsgEpochDone {
            session_id: 3,
            sample_count: 17,
        });
        a.send(&msg).unwrap();
        a.send(&Message::Ack(MsgAck {
            msg_type: 1,
            batch_index: 0,
        }))
        .unwrap();
        assert_eq!(b.recv().unwrap(), msg);
        assert!(matches!(b.recv().unwrap(), Message::Ack(_)));
        let sent = a.writer.stats();
        let recv = b.reader.stats();
        assert_eq!(sent.total_bytes(), recv.total_bytes());
        assert_eq!(sent.frames_of(MsgType::EpochDone), 1);
        assert_eq!(
            recv.bytes_of(MsgType::EpochDone),
            (FRAME_OVERHEAD + 16) as u64
        );
        drop(a);
        assert!(matches!(b.recv(), Err(TransportError::Closed)));
    }

    #[test]
    fn tcp_and_loopback_decode_the_same_stream() {
        use std::net::TcpListener;
        let msgs = vec![
            Message::Ack(MsgAck {
                msg_type: 2,
                batch_index: 4,
            }),
            Message::error(3, "dimension mismatch"),
        ];
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let to_send = msgs.clone();
        let h = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut c = Connection::tcp(s).unwrap();
            for m in &to_send {
                c.send(m).unwrap();
            }
        });
        let mut tcp = Connection::connect(&addr).unwrap();
        let via_tcp: Vec<Message> = (0..2).map(|_| tcp.recv().unwrap()).collect();
        h.join().unwrap();

        let (mut a, mut b) = Connection::loopback_pair();
        for m in &msgs {
            a.send(m).unwrap();
        }
        let via_loop: Vec<Message> = (0..2).map(|_| b.recv().unwrap()).collect();
        assert_eq!(via_tcp, msgs);
        assert_eq!(via_loop, msgs);
    }
}
