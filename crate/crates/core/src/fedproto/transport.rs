//! Controller-side links to clients.
//!
//! A link moves whole frames. Three transports share the frame format:
//! a direct link that runs the client synchronously inside `send`
//! (the deterministic scheduler), a channel link to a client thread, and
//! a TCP link to a client process.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{decode, Party};
use super::{FedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// One deterministic scheduler; clients serviced in id order.
    Inproc,
    /// One thread per client over channels.
    Threads,
    /// One process per client over TCP.
    Socket,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Inproc => "inproc",
            TransportKind::Threads => "threads",
            TransportKind::Socket => "socket",
        }
    }

    /// `FLAGCNS_TRANSPORT`, if set.
    pub fn from_env() -> Option<std::result::Result<Self, String>> {
        std::env::var("FLAGCNS_TRANSPORT").ok().map(|v| v.parse())
    }
}

impl std::str::FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inproc" => Ok(TransportKind::Inproc),
            "threads" => Ok(TransportKind::Threads),
            "socket" => Ok(TransportKind::Socket),
            _ => Err(format!("unknown transport {s:?} (expected inproc|threads|socket)")),
        }
    }
}

/// Something that consumes a frame and produces reply frames; the client
/// actor implements this.
pub trait FrameHandler {
    /// Frames to send as soon as the link is up.
    fn greet(&mut self) -> Result<Vec<Vec<u8>>> {
        Ok(Vec::new())
    }
    fn handle(&mut self, frame: &[u8]) -> Result<Vec<Vec<u8>>>;
    /// True once a shutdown has been processed.
    fn finished(&self) -> bool;
}

pub trait Link: Send {
    fn send(&mut self, frame: &[u8]) -> Result<()>;
    fn recv(&mut self) -> Result<Vec<u8>>;
    fn close(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Runs the handler synchronously inside `send`.
pub struct DirectLink<H> {
    handler: H,
    replies: VecDeque<Vec<u8>>,
}

impl<H: FrameHandler> DirectLink<H> {
    pub fn new(mut handler: H) -> Result<Self> {
        let replies = handler.greet()?.into();
        Ok(Self { handler, replies })
    }

    pub fn handler(&self) -> &H {
        &self.handler
    }
}

impl<H: FrameHandler + Send> Link for DirectLink<H> {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        let out = self.handler.handle(frame)?;
        self.replies.extend(out);
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.replies
            .pop_front()
            .ok_or_else(|| FedError::Transport("client produced no reply".into()))
    }
}

/// Link to a client running on its own thread.
pub struct ChannelLink {
    to: Option<mpsc::Sender<Vec<u8>>>,
    from: mpsc::Receiver<Result<Vec<u8>>>,
    worker: Option<JoinHandle<()>>,
    timeout: Duration,
}

impl ChannelLink {
    pub fn spawn<H: FrameHandler + Send + 'static>(mut handler: H, timeout: Duration) -> Self {
        let (to, inbox) = mpsc::channel::<Vec<u8>>();
        let (outbox, from) = mpsc::channel();
        let worker = std::thread::spawn(move || {
            match handler.greet() {
                Ok(frames) => {
                    for f in frames {
                        if outbox.send(Ok(f)).is_err() {
                            return;
                        }
                    }
                }
                Err(e) => {
                    let _ = outbox.send(Err(e));
                    return;
                }
            }
            while let Ok(frame) = inbox.recv() {
                match handler.handle(&frame) {
                    Ok(replies) => {
                        for r in replies {
                            if outbox.send(Ok(r)).is_err() {
                                return;
                            }
                        }
                    }
                    Err(e) => {
                        let _ = outbox.send(Err(e));
                        return;
                    }
                }
                if handler.finished() {
                    return;
                }
            }
        });
        Self {
            to: Some(to),
            from,
            worker: Some(worker),
            timeout,
        }
    }
}

impl Link for ChannelLink {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.to
            .as_ref()
            .ok_or_else(|| FedError::Transport("link closed".into()))?
            .send(frame.to_vec())
            .map_err(|_| FedError::Transport("client thread has exited".into()))
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        match self.from.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(mpsc::RecvTimeoutError::Timeout) => Err(FedError::Timeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(FedError::Transport("client thread has exited".into())),
        }
    }

    fn close(&mut self) -> Result<()> {
        self.to.take();
        if let Some(w) = self.worker.take() {
            w.join().map_err(|_| FedError::Transport("client thread panicked".into()))?;
        }
        Ok(())
    }
}

impl Drop for ChannelLink {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

/// Writes one frame; the frame already starts with its length prefix.
pub fn write_frame<W: Write>(out: &mut W, frame: &[u8]) -> Result<()> {
    out.write_all(frame).map_err(|e| FedError::Transport(e.to_string()))?;
    out.flush().map_err(|e| FedError::Transport(e.to_string()))
}

/// Reads one length-prefixed frame (prefix included in the result).
/// `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(input: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
            return Err(FedError::Timeout)
        }
        Err(e) => return Err(FedError::Transport(e.to_string())),
    }
    let n = u32::from_le_bytes(len) as usize;
    let mut frame = Vec::with_capacity(4 + n);
    frame.extend_from_slice(&len);
    frame.resize(4 + n, 0);
    input.read_exact(&mut frame[4..]).map_err(|e| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => FedError::Timeout,
        _ => FedError::Transport(e.to_string()),
    })?;
    Ok(Some(frame))
}

pub struct TcpLink {
    stream: TcpStream,
    /// First frame, read early to learn which client connected.
    pending: Option<Vec<u8>>,
}

impl TcpLink {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_nodelay(true))
            .map_err(|e| FedError::Transport(e.to_string()))?;
        Ok(Self { stream, pending: None })
    }
}

/// Accepts `n` client connections and orders them by the client id in
/// each one's first frame.
pub fn accept_clients(listener: &TcpListener, n: usize, timeout: Duration) -> Result<Vec<TcpLink>> {
    let mut slots: Vec<Option<TcpLink>> = (0..n).map(|_| None).collect();
    for _ in 0..n {
        let (stream, peer) = listener.accept().map_err(|e| FedError::Transport(e.to_string()))?;
        let mut link = TcpLink::new(stream, timeout)?;
        let first = link.recv()?;
        let id = match decode(&first)?.sender {
            Party::Client(i) if i < n => i,
            other => return Err(FedError::Transport(format!("{peer} announced itself as {other:?}"))),
        };
        if slots[id].is_some() {
            return Err(FedError::Transport(format!("client {id} connected twice")));
        }
        link.pending = Some(first);
        slots[id] = Some(link);
    }
    Ok(slots.into_iter().map(|l| l.expect("every slot filled")).collect())
}

impl Link for TcpLink {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        write_frame(&mut self.stream, frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        if let Some(f) = self.pending.take() {
            return Ok(f);
        }
        read_frame(&mut self.stream)?.ok_or_else(|| FedError::Transport("client closed the connection".into()))
    }

    fn close(&mut self) -> Result<()> {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        Ok(())
    }
}

/// Serves one controller connection from the client side until shutdown.
pub fn serve_client<H: FrameHandler>(handler: &mut H, stream: &mut TcpStream) -> Result<()> {
    for frame in handler.greet()? {
        write_frame(stream, &frame)?;
    }
    while let Some(frame) = read_frame(stream)? {
        for reply in handler.handle(&frame)? {
            write_frame(stream, &reply)?;
        }
        if handler.finished() {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Echoes each frame back twice; stops after a frame starting with 0xff.
    struct Echo {
        done: bool,
    }

    impl FrameHandler for Echo {
        fn handle(&mut self, frame: &[u8]) -> Result<Vec<Vec<u8>>> {
            if frame.get(4) == Some(&0xff) {
                self.done = true;
                return Ok(vec![]);
            }
            Ok(vec![frame.to_vec(), frame.to_vec()])
        }
        fn finished(&self) -> bool {
            self.done
        }
    }

    fn frame(body: &[u8]) -> Vec<u8> {
        let mut f = (body.len() as u32).to_le_bytes().to_vec();
        f.extend_from_slice(body);
        f
    }

    fn exercise(link: &mut dyn Link) {
        let f = frame(b"hello");
        link.send(&f).unwrap();
        assert_eq!(link.recv().unwrap(), f);
        assert_eq!(link.recv().unwrap(), f);
        link.send(&frame(&[0xff])).unwrap();
        link.close().unwrap();
    }

    #[test]
    fn direct_and_channel_links() {
        exercise(&mut DirectLink::new(Echo { done: false }).unwrap());
        exercise(&mut ChannelLink::spawn(Echo { done: false }, Duration::from_secs(5)));
    }

    #[test]
    fn direct_link_without_reply_is_an_error() {
        let mut l = DirectLink::new(Echo { done: false }).unwrap();
        assert!(l.recv().is_err());
    }

    #[test]
    fn tcp_link() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let mut s = TcpStream::connect(addr).unwrap();
            serve_client(&mut Echo { done: false }, &mut s).unwrap();
        });
        let (stream, _) = listener.accept().unwrap();
        exercise(&mut TcpLink::new(stream, Duration::from_secs(5)).unwrap());
        server.join().unwrap();
    }

    #[test]
    fn read_frame_handles_eof() {
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
        let mut short: &[u8] = &[5, 0, 0, 0, 1];
        assert!(read_frame(&mut short).is_err());
    }

    #[test]
    fn transport_names_parse() {
        for k in [TransportKind::Inproc, TransportKind::Threads, TransportKind::Socket] {
            assert_eq!(k.name().parse::<TransportKind>().unwrap(), k);
        }
        assert!("carrier-pigeon".parse::<TransportKind>().is_err());
    }
}
