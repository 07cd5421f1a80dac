//! Client for backends running as child processes.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{decode_handshake, decode_response, encode_request, ResponseFrame};
use super::{SegmentError, SegmentRequest, SegmentResponse, Segmenter};

/// One child process with at most one request in flight.
pub struct ProcessClient {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    name: String,
    timeout: Duration,
    next_id: u64,
}

impl ProcessClient {
    /// Spawns `argv` and waits for its handshake line.
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self, SegmentError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| SegmentError::Backend("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SegmentError::Backend(format!("cannot start {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut client = Self {
            child,
            stdin,
            lines: rx,
            name: String::new(),
            timeout,
            next_id: 1,
        };
        let hello = client.next_line(Instant::now() + timeout)?;
        client.name = decode_handshake(&hello)?;
        Ok(client)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn next_line(&mut self, deadline: Instant) -> Result<String, SegmentError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(wait) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(SegmentError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(SegmentError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(SegmentError::Exited),
        }
    }

    /// Sends one request and waits for its response. Wire ids increase
    /// monotonically per process; the returned response carries `req.id`.
    pub fn request(&mut self, req: &SegmentRequest) -> Result<SegmentResponse, SegmentError> {
        let wire_id = self.next_id;
        self.next_id += 1;
        let mut framed = req.clone();
        framed.id = wire_id;
        let line = encode_request(&framed);
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;

        let deadline = Instant::now() + self.timeout;
        let reply = self.next_line(deadline)?;
        let frame = decode_response(&reply, None)?;
        if frame.id() != wire_id {
            return Err(SegmentError::Protocol(format!(
                "expected response id {wire_id}, got {}",
                frame.id()
            )));
        }
        match frame {
            ResponseFrame::Prob { prob, .. } => {
                if prob.len() != req.height * req.width {
                    return Err(SegmentError::Protocol(format!(
                        "response carries {} values for a {}x{} slice",
                        prob.len(),
                        req.height,
                        req.width
                    )));
                }
                Ok(SegmentResponse {
                    id: req.id,
                    height: req.height,
                    width: req.width,
                    prob,
                })
            }
            ResponseFrame::Error { message, .. } => Err(SegmentError::Backend(message)),
        }
    }
}

impl Drop for ProcessClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Fixed-size pool of identical backend processes. Each call checks out an
/// idle process; a process that times out or breaks is replaced.
pub struct ProcessPool {
    argv: Vec<String>,
    timeout: Duration,
    name: String,
    state: Mutex<PoolState>,
    ready: Condvar,
}

struct PoolState {
    idle: Vec<ProcessClient>,
    live: usize,
}

impl ProcessPool {
    pub fn spawn(argv: Vec<String>, size: usize, timeout: Duration) -> Result<Self, SegmentError> {
        let size = size.max(1);
        let clients = (0..size)
            .map(|_| ProcessClient::spawn(&argv, timeout))
            .collect::<Result<Vec<_>, _>>()?;
        let name = clients[0].name().to_string();
        Ok(Self {
            argv,
            timeout,
            name,
            state: Mutex::new(PoolState { idle: clients, live: size }),
            ready: Condvar::new(),
        })
    }

    fn checkout(&self) -> Result<ProcessClient, SegmentError> {
        let mut state = self.state.lock().expect("pool lock");
        loop {
            if let Some(c) = state.idle.pop() {
                return Ok(c);
            }
            if state.live == 0 {
                return Err(SegmentError::Backend("no backend process left in the pool".into()));
            }
            state = self.ready.wait(state).expect("pool lock");
        }
    }

    fn checkin(&self, client: ProcessClient) {
        self.state.lock().expect("pool lock").idle.push(client);
        self.ready.notify_one();
    }

    fn retire(&self) {
        self.state.lock().expect("pool lock").live -= 1;
        self.ready.notify_all();
    }
}

impl Segmenter for ProcessPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn segment_unchecked(&self, req: &SegmentRequest) -> Result<SegmentResponse, SegmentError> {
        let mut client = self.checkout()?;
        let result = client.request(req);
        let broken = matches!(
            result,
            Err(SegmentError::Timeout(_))
                | Err(SegmentError::Exited)
                | Err(SegmentError::Io(_))
                | Err(SegmentError::Protocol(_))
                | Err(SegmentError::Wire(_))
        );
        if !broken {
            self.checkin(client);
            return result;
        }
        drop(client);
        match ProcessClient::spawn(&self.argv, self.timeout) {
            Ok(fresh) => self.checkin(fresh),
            Err(e) => {
                self.retire();
                log_restart_failure(&e);
            }
        }
        result
    }
}

fn log_restart_failure(e: &SegmentError) {
    eprintln!("warning: could not restart backend process: {e}");
}
