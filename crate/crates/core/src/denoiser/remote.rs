use std::io::{self, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

use super::wire::{read_frame, Frame};
use super::Denoiser;

/// Where a remote denoiser lives.
///
/// Parsed from `tcp://host:port` or `stdio:<command> [args...]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(Error::invalid("empty tcp address"));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::invalid("empty stdio command"));
            }
            Ok(Endpoint::Stdio(argv))
        } else {
            Err(Error::invalid(format!(
                "endpoint `{s}` must start with tcp:// or stdio:"
            )))
        }
    }
}

/// Reader that fails with `TimedOut` if no bytes arrive within the timeout.
/// A helper thread pumps the underlying stream into a channel.
struct TimedReader {
    rx: Receiver<io::Result<Vec<u8>>>,
    buf: Vec<u8>,
    pos: usize,
    timeout: Option<Duration>,
    eof: bool,
}

impl TimedReader {
    fn spawn<R: Read + Send + 'static>(mut inner: R, timeout: Option<Duration>) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut chunk = vec![0u8; 64 * 1024];
            loop {
                match inner.read(&mut chunk) {
                    Ok(0) => break,
                    Ok(n) => {
                        if tx.send(Ok(chunk[..n].to_vec())).is_err() {
                            break;
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Self {
            rx,
            buf: Vec::new(),
            pos: 0,
            timeout,
            eof: false,
        }
    }
}

impl Read for TimedReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.pos >= self.buf.len() {
            if self.eof {
                return Ok(0);
            }
            let next = match self.timeout {
                Some(d) => self.rx.recv_timeout(d),
                None => self.rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            };
            match next {
                Ok(Ok(chunk)) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Ok(Err(e)) => return Err(e),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "read timed out"))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.eof = true;
                    return Ok(0);
                }
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

/// Client for an external noise-prediction server.
///
/// One request is in flight at a time; the client owns its connection.
pub struct RemoteDenoiser {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    timeout: Option<Duration>,
    child: Option<Child>,
}

impl std::fmt::Debug for RemoteDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteDenoiser")
            .field("timeout", &self.timeout)
            .field("child", &self.child.as_ref().map(Child::id))
            .finish()
    }
}

impl RemoteDenoiser {
    pub fn connect(endpoint: &Endpoint, timeout: Option<Duration>) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => Self::connect_tcp(addr, timeout),
            Endpoint::Stdio(argv) => Self::spawn_stdio(argv, timeout),
        }
    }

    pub fn connect_tcp(addr: &str, timeout: Option<Duration>) -> Result<Self> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| Error::Connection(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| Error::Connection(format!("{addr}: no address")))?;
        let stream = match timeout {
            Some(d) => TcpStream::connect_timeout(&sock, d),
            None => TcpStream::connect(sock),
        }
        .map_err(|e| Error::Connection(format!("{addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        stream
            .set_read_timeout(timeout)
            .and_then(|_| stream.set_write_timeout(timeout))
            .map_err(|e| Error::Connection(e.to_string()))?;
        let reader = stream
            .try_clone()
            .map_err(|e| Error::Connection(e.to_string()))?;
        Self::from_streams(reader, BufWriter::new(stream), timeout)
    }

    /// Spawns `argv` and talks to it over its stdin/stdout.
    pub fn spawn_stdio(argv: &[String], timeout: Option<Duration>) -> Result<Self> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| Error::invalid("empty stdio command"))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Connection(format!("spawning {prog}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_parts(
            Box::new(TimedReader::spawn(stdout, timeout)),
            Box::new(BufWriter::new(stdin)),
            timeout,
        );
        client.child = Some(child);
        client.handshake()?;
        Ok(client)
    }

    /// Wraps an already-connected byte stream pair and performs the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Option<Duration>) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut client = Self::from_parts(Box::new(reader), Box::new(writer), timeout);
        client.handshake()?;
        Ok(client)
    }

    fn from_parts(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>, timeout: Option<Duration>) -> Self {
        Self {
            reader,
            writer,
            timeout,
            child: None,
        }
    }

    fn map_io(&self, e: Error) -> Error {
        match e {
            Error::Io(io) => match io.kind() {
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => {
                    Error::Timeout(self.timeout.unwrap_or_default())
                }
                _ => Error::Connection(io.to_string()),
            },
            other => other,
        }
    }

    fn send(&mut self, frame: &Frame) -> Result<()> {
        frame
            .write_to(&mut self.writer)
            .map_err(|e| self.map_io(Error::Io(e)))
    }

    fn recv(&mut self) -> Result<Frame> {
        match read_frame(&mut self.reader) {
            Ok(Some(Frame::Error(msg))) => Err(Error::Server(msg)),
            Ok(Some(frame)) => Ok(frame),
            Ok(None) => Err(Error::Connection("server closed the connection".into())),
            Err(e) => Err(self.map_io(e)),
        }
    }

    fn handshake(&mut self) -> Result<()> {
        self.send(&Frame::Handshake)?;
        match self.recv()? {
            Frame::Handshake => Ok(()),
            other => Err(Error::Protocol(format!(
                "expected handshake reply, got msg_type {}",
                other.msg_type()
            ))),
        }
    }

    /// Sends `xt` at step `t` and returns the server's tensor unchanged.
    pub fn predict<S: Scalar>(&mut self, xt: &ImageTensor<S>, t: usize) -> Result<ImageTensor<S>> {
        let (c, h, w) = xt.shape();
        let dims = [c as u32, h as u32, w as u32];
        let t = u32::try_from(t).map_err(|_| Error::invalid("timestep does not fit in u32"))?;
        self.send(&Frame::Request {
            t,
            dims,
            data: xt.data().iter().map(|v| v.as_f32()).collect(),
        })?;
        match self.recv()? {
            Frame::Response { dims: got, data } => {
                if got != dims {
                    return Err(Error::Protocol(format!(
                        "response dims {got:?} differ from request dims {dims:?}"
                    )));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Protocol("non-finite values in response".into()));
                }
                let values = data.into_iter().map(|v| S::from_f32(v).unwrap_or_else(S::nan)).collect();
                Ok(ImageTensor::from_parts(c, h, w, values))
            }
            other => Err(Error::Protocol(format!(
                "expected response frame, got msg_type {}",
                other.msg_type()
            ))),
        }
    }
}

impl<S: Scalar> Denoiser<S> for RemoteDenoiser {
    fn predict_eps(
        &mut self,
        xt: &ImageTensor<S>,
        t: usize,
        _sched: &NoiseSchedule<S>,
    ) -> Result<ImageTensor<S>> {
        self.predict(xt, t)
    }
}

impl Drop for RemoteDenoiser {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // closing stdin lets a well-behaved server exit on its own
            self.writer = Box::new(io::sink());
            if !matches!(child.try_wait(), Ok(Some(_))) {
                thread::sleep(Duration::from_millis(20));
                if !matches!(child.try_wait(), Ok(Some(_))) {
                    let _ = child.kill();
                }
            }
            let _ = child.wait();
        }
    }
}
