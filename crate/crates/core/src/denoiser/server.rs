//! Minimal reference server for the `SSDN` protocol (echo and analytic
//! Gaussian modes). Used for conformance tests and local loopback runs.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::thread;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

use super::gaussian::{gaussian_predict_eps, DiagonalGaussianModel};
use super::wire::{read_frame, Frame};

#[derive(Debug, Clone)]
pub enum ServeMode<S> {
    /// Returns every request payload verbatim.
    Echo,
    /// Answers with the closed-form Gaussian noise prediction.
    Gaussian {
        model: DiagonalGaussianModel<S>,
        schedule: NoiseSchedule<S>,
    },
}

impl<S: Scalar> ServeMode<S> {
    fn answer(&self, t: u32, dims: [u32; 3], data: Vec<f32>) -> Result<Frame> {
        match self {
            ServeMode::Echo => Ok(Frame::Response { dims, data }),
            ServeMode::Gaussian { model, schedule } => {
                let t = t as usize;
                if t > schedule.steps() {
                    return Err(Error::invalid(format!("timestep {t} outside 0..={}", schedule.steps())));
                }
                let values = data.iter().map(|&v| S::from_f32(v).unwrap_or_else(S::nan)).collect();
                let xt = ImageTensor::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, values)?;
                let eps = gaussian_predict_eps(model, &xt, t, schedule)?;
                Ok(Frame::Response {
                    dims,
                    data: eps.data().iter().map(|v| v.as_f32()).collect(),
                })
            }
        }
    }
}

/// Serves one connection until the peer closes it.
///
/// Request-level failures produce an error frame and the connection stays
/// open; framing failures produce an error frame and end the session.
pub fn serve_stream<S: Scalar, R: Read, W: Write>(
    reader: &mut R,
    writer: &mut W,
    mode: &ServeMode<S>,
) -> Result<()> {
    loop {
        let frame = match read_frame(reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                let msg = match &e {
                    Error::Protocol(m) => m.clone(),
                    other => other.to_string(),
                };
                let _ = Frame::Error(msg).write_to(writer);
                return Err(e);
            }
        };
        let reply = match frame {
            Frame::Handshake => Frame::Handshake,
            Frame::Request { t, dims, data } => {
                mode.answer(t, dims, data).unwrap_or_else(|e| Frame::Error(e.to_string()))
            }
            other => Frame::Error(format!("unexpected msg_type {}", other.msg_type())),
        };
        reply.write_to(writer)?;
    }
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp<S: Scalar>(listener: TcpListener, mode: ServeMode<S>) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let mode = mode.clone();
        thread::spawn(move || {
            let mut reader = match stream.try_clone() {
                Ok(r) => r,
                Err(_) => return,
            };
            let mut writer = stream;
            let _ = serve_stream(&mut reader, &mut writer, &mode);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(mode: &ServeMode<f64>, frames: &[Frame]) -> Vec<Frame> {
        let mut input = Vec::new();
        for f in frames {
            input.extend(f.encode());
        }
        let mut out = Vec::new();
        let _ = serve_stream(&mut input.as_slice(), &mut out, mode);
        let mut replies = Vec::new();
        let mut cursor = out.as_slice();
        while let Some(f) = read_frame(&mut cursor).unwrap() {
            replies.push(f);
        }
        replies
    }

    #[test]
    fn echo_session() {
        let req = Frame::Request {
            t: 5,
            dims: [1, 1, 3],
            data: vec![0.1, -0.2, 0.3],
        };
        let replies = session(&ServeMode::Echo, &[Frame::Handshake, req]);
        assert_eq!(replies[0], Frame::Handshake);
        assert_eq!(
            replies[1],
            Frame::Response {
                dims: [1, 1, 3],
                data: vec![0.1, -0.2, 0.3]
            }
        );
    }

    #[test]
    fn bad_request_keeps_connection_alive() {
        let mode = ServeMode::Gaussian {
            model: DiagonalGaussianModel::<f64>::standard(1, 1, 2).unwrap(),
            schedule: NoiseSchedule::linear(10, 1e-3, 0.1).unwrap(),
        };
        let bad = Frame::Request {
            t: 50,
            dims: [1, 1, 2],
            data: vec![0.0, 0.0],
        };
        let good = Frame::Request {
            t: 5,
            dims: [1, 1, 2],
            data: vec![0.5, -0.5],
        };
        let replies = session(&mode, &[bad, good]);
        assert!(matches!(replies[0], Frame::Error(_)));
        assert!(matches!(replies[1], Frame::Response { .. }));
    }

    #[test]
    fn garbage_gets_error_frame() {
        let mut out = Vec::new();
        let input = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(serve_stream::<f64, _, _>(&mut input.as_slice(), &mut out, &ServeMode::Echo).is_err());
        assert_eq!(
            read_frame(&mut out.as_slice()).unwrap(),
            Some(Frame::Error("bad magic".into()))
        );
    }
}
