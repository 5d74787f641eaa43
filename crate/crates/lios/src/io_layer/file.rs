//! Real-file backend: asynchronous reads emulated with a small thread pool.
//!
//! The contract, not the mechanism, is normative: submissions return
//! immediately, completions are harvested by non-blocking polls or a blocking
//! wait, and measured service times reflect actual file I/O.

use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, unbounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::time::ThreadEnv;

use super::{BlockDevice, Completion, DeviceHandle, ReadRequest};

struct Job {
    request_id: u64,
    offset: u64,
    length: usize,
    reply: Sender<std::result::Result<Completion, String>>,
}

struct FileShared {
    jobs: Sender<Job>,
    queue_depth: usize,
    // Workers exit when the job channel closes; handles keep it open through
    // their shared reference.
    _workers: Vec<std::thread::JoinHandle<()>>,
}

/// File-backed device reading records at fixed offsets.
#[derive(Clone)]
pub struct FileDevice {
    shared: Arc<FileShared>,
}

impl FileDevice {
    pub fn open(path: &Path, workers: usize, queue_depth: usize) -> Result<Self> {
        if workers == 0 || queue_depth == 0 {
            return Err(Error::InvalidConfig(
                "file device needs >= 1 worker and queue depth".into(),
            ));
        }
        let file = Arc::new(File::open(path)?);
        let (tx, rx): (Sender<Job>, Receiver<Job>) = unbounded();
        let mut handles = Vec::with_capacity(workers);
        for _ in 0..workers {
            let rx = rx.clone();
            let file = Arc::clone(&file);
            handles.push(std::thread::spawn(move || {
                while let Ok(job) = rx.recv() {
                    let started = Instant::now();
                    let mut buf = vec![0u8; job.length];
                    let result = match file.read_exact_at(&mut buf, job.offset) {
                        Ok(()) => Ok(Completion {
                            request_id: job.request_id,
                            payload: buf,
                            service_time: started.elapsed(),
                        }),
                        Err(e) => Err(format!("read at {}: {e}", job.offset)),
                    };
                    // Receiver may be gone if the handle closed; drop quietly.
                    let _ = job.reply.send(result);
                }
            }));
        }
        Ok(Self {
            shared: Arc::new(FileShared {
                jobs: tx,
                queue_depth,
                _workers: handles,
            }),
        })
    }
}

impl BlockDevice for FileDevice {
    fn open_handle(&self, _handle_id: u64) -> Result<Box<dyn DeviceHandle>> {
        let (tx, rx) = bounded(self.shared.queue_depth);
        Ok(Box::new(FileHandle {
            shared: Arc::clone(&self.shared),
            reply_tx: tx,
            reply_rx: rx,
            inflight: 0,
            closed: false,
        }))
    }
}

pub struct FileHandle {
    shared: Arc<FileShared>,
    reply_tx: Sender<std::result::Result<Completion, String>>,
    reply_rx: Receiver<std::result::Result<Completion, String>>,
    inflight: usize,
    closed: bool,
}

impl FileHandle {
    fn drain_ready(&mut self) -> Result<Vec<Completion>> {
        let mut out = Vec::new();
        while let Ok(reply) = self.reply_rx.try_recv() {
            self.inflight -= 1;
            out.push(reply.map_err(Error::Device)?);
        }
        Ok(out)
    }
}

impl DeviceHandle for FileHandle {
    fn submit(&mut self, batch: &[ReadRequest], _env: &dyn ThreadEnv) -> Result<()> {
        if self.closed {
            return Err(Error::StaleHandle);
        }
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty submit batch".into()));
        }
        if self.inflight + batch.len() > self.shared.queue_depth {
            return Err(Error::QueueDepthExceeded {
                submitted: self.inflight + batch.len(),
                depth: self.shared.queue_depth,
            });
        }
        for req in batch {
            let job = Job {
                request_id: req.request_id,
                offset: req.offset,
                length: req.length,
                reply: self.reply_tx.clone(),
            };
            self.shared
                .jobs
                .send(job)
                .map_err(|_| Error::Device("device worker pool shut down".into()))?;
            self.inflight += 1;
        }
        Ok(())
    }

    fn poll_nonblocking(&mut self, _env: &dyn ThreadEnv) -> Result<Vec<Completion>> {
        if self.closed {
            return Err(Error::StaleHandle);
        }
        self.drain_ready()
    }

    fn wait_blocking(&mut self, _env: &dyn ThreadEnv) -> Result<(Vec<Completion>, Duration)> {
        if self.closed {
            return Err(Error::StaleHandle);
        }
        let mut out = self.drain_ready()?;
        if !out.is_empty() || self.inflight == 0 {
            return Ok((out, Duration::ZERO));
        }
        let started = Instant::now();
        let first = self
            .reply_rx
            .recv()
            .map_err(|_| Error::Device("reply channel closed".into()))?;
        let waited = started.elapsed();
        self.inflight -= 1;
        out.push(first.map_err(Error::Device)?);
        out.extend(self.drain_ready()?);
        Ok((out, waited))
    }

    fn outstanding(&self) -> usize {
        self.inflight
    }

    fn close(&mut self) {
        self.closed = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::WallEnv;

    #[test]
    fn reads_bytes_at_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        let mut content = vec![0u8; 4 * 64];
        for (i, chunk) in content.chunks_mut(64).enumerate() {
            chunk.fill(i as u8 + 1);
        }
        std::fs::write(&path, &content).unwrap();

        let dev = FileDevice::open(&path, 2, 8).unwrap();
        let mut h = dev.open_handle(0).unwrap();
        let env = WallEnv::new();
        h.submit(
            &[
                ReadRequest {
                    request_id: 1,
                    offset: 64,
                    length: 64,
                },
                ReadRequest {
                    request_id: 2,
                    offset: 192,
                    length: 64,
                },
            ],
            &env,
        )
        .unwrap();
        let mut got = Vec::new();
        while got.len() < 2 {
            let (done, _) = h.wait_blocking(&env).unwrap();
            got.extend(done);
        }
        got.sort_by_key(|c| c.request_id);
        assert_eq!(got[0].payload, vec![2u8; 64]);
        assert_eq!(got[1].payload, vec![4u8; 64]);
    }

    #[test]
    fn short_file_read_is_a_device_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.bin");
        std::fs::write(&path, vec![7u8; 32]).unwrap();
        let dev = FileDevice::open(&path, 1, 4).unwrap();
        let mut h = dev.open_handle(0).unwrap();
        let env = WallEnv::new();
        h.submit(
            &[ReadRequest {
                request_id: 0,
                offset: 0,
                length: 64,
            }],
            &env,
        )
        .unwrap();
        let err = h.wait_blocking(&env);
        assert!(matches!(err, Err(Error::Device(_))));
    }

    #[test]
    fn concurrent_handles_share_one_device() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        let mut content = vec![0u8; 16 * 64];
        for (i, chunk) in content.chunks_mut(64).enumerate() {
            chunk.fill(i as u8);
        }
        std::fs::write(&path, &content).unwrap();
        let dev = FileDevice::open(&path, 4, 16).unwrap();
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let dev = dev.clone();
                s.spawn(move || {
                    let mut h = dev.open_handle(t).unwrap();
                    let env = WallEnv::new();
                    for round in 0..50u64 {
                        let idx = (t * 50 + round) % 16;
                        h.submit(
                            &[ReadRequest {
                                request_id: idx,
                                offset: idx * 64,
                                length: 64,
                            }],
                            &env,
                        )
                        .unwrap();
                        let (done, _) = h.wait_blocking(&env).unwrap();
                        assert_eq!(done.len(), 1);
                        assert_eq!(done[0].payload, vec![idx as u8; 64]);
                    }
                });
            }
        });
    }
}
