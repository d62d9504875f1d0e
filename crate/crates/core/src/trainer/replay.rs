//! Step-level replay buffer.
//!
//! Stores every collected step — including the reset observation that opens
//! each episode — in one fixed-capacity ring. Training samples fixed-length
//! windows uniformly over the stored order; a window may span an episode
//! boundary, because each record carries the `is_first` flag the sequence
//! model uses to cut the recurrence at the junction.

use std::io::{self, Read, Write};

use crate::num::Real;
use crate::rng::StreamRng;
use crate::sim::Vec3;
use crate::worldmodel::{BatchSeq, IMG_CH, IMG_SIZE};

/// Bytes per stored tactile frame (8-bit RGB, row-major).
pub const FRAME_LEN: usize = IMG_CH * IMG_SIZE * IMG_SIZE;

/// One environment step as the world model will see it: the observation
/// *arriving* at this step, and the action/reward that led to it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Quantised tactile frame, height-major with interleaved channels,
    /// exactly as the environment emits it (ablation already applied).
    pub frame: Vec<u8>,
    /// Offset position reading, metres.
    pub proprio: Vec3,
    /// Unit-scale action that preceded this observation; zero on resets.
    pub prev_action: Vec3,
    /// Reward received with this observation; zero on resets.
    pub reward: f64,
    /// True for the observation an episode starts with.
    pub is_first: bool,
    /// True when this observation ends the episode in a terminal state
    /// (goal or exit, not a time-limit truncation).
    pub is_terminal: bool,
}

/// Pixel bytes and float pixels must agree everywhere a frame is consumed,
/// so the conversion lives in exactly one place.
pub fn pixel_level<F: Real>(byte: u8) -> F {
    F::of(byte as f64 / 255.0)
}

/// Reorders an interleaved height-major frame into the channel-major layout
/// the convolutional encoder expects, scaling to `[0, 1]`.
pub fn frame_chw<F: Real>(hwc: &[u8]) -> Vec<F> {
    assert_eq!(hwc.len(), FRAME_LEN, "frame byte length");
    let mut out = Vec::with_capacity(FRAME_LEN);
    for c in 0..IMG_CH {
        for hw in 0..IMG_SIZE * IMG_SIZE {
            out.push(pixel_level(hwc[hw * IMG_CH + c]));
        }
    }
    out
}

/// Fixed-capacity ring of [`StepRecord`]s in collection order.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    records: Vec<StepRecord>,
    /// Physical index the next push writes to (wraps once full).
    next: usize,
    /// Lifetime pushes, monotonic.
    total: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "replay capacity must be at least 1");
        Self { capacity, records: Vec::new(), next: 0, total: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_added(&self) -> u64 {
        self.total
    }

    pub fn push(&mut self, record: StepRecord) {
        assert_eq!(record.frame.len(), FRAME_LEN, "frame byte length");
        if self.records.len() < self.capacity {
            self.records.push(record);
        } else {
            self.records[self.next] = record;
        }
        self.next = (self.next + 1) % self.capacity;
        self.total += 1;
    }

    /// Oldest-first indexing: `get(0)` is the oldest retained step.
    pub fn get(&self, logical: usize) -> &StepRecord {
        assert!(logical < self.records.len(), "replay index out of range");
        let physical = if self.records.len() < self.capacity {
            logical
        } else {
            (self.next + logical) % self.capacity
        };
        &self.records[physical]
    }

    /// Whether at least one full window can be sampled.
    pub fn ready(&self, seq_len: usize) -> bool {
        self.records.len() >= seq_len
    }

    /// Uniformly samples `batch` window start indices (with replacement).
    /// Returns `None` until one full window exists.
    pub fn sample_starts(
        &self,
        batch: usize,
        seq_len: usize,
        rng: &mut StreamRng,
    ) -> Option<Vec<usize>> {
        assert!(batch >= 1 && seq_len >= 1);
        if !self.ready(seq_len) {
            return None;
        }
        let span = self.records.len() - seq_len + 1;
        Some((0..batch).map(|_| rng.below(span)).collect())
    }

    /// Assembles the windows starting at `starts` into the time-major batch
    /// layout the sequence model trains on.
    pub fn batch<F: Real>(&self, starts: &[usize], seq_len: usize) -> BatchSeq<F> {
        let b = starts.len();
        assert!(b >= 1 && seq_len >= 1);
        for &s in starts {
            assert!(s + seq_len <= self.records.len(), "window exceeds stored steps");
        }
        let n = b * seq_len;
        let mut frames = Vec::with_capacity(n * FRAME_LEN);
        let mut proprio = Vec::with_capacity(n * 3);
        let mut actions = Vec::with_capacity(n * 3);
        let mut rewards = Vec::with_capacity(n);
        let mut is_first = Vec::with_capacity(n);
        let mut is_terminal = Vec::with_capacity(n);
        for t in 0..seq_len {
            for &start in starts {
                let rec = self.get(start + t);
                frames.extend(frame_chw::<F>(&rec.frame));
                proprio.extend(rec.proprio.iter().map(|&x| F::of(x)));
                actions.extend(rec.prev_action.iter().map(|&x| F::of(x)));
                rewards.push(F::of(rec.reward));
                is_first.push(if rec.is_first { F::one() } else { F::zero() });
                is_terminal.push(if rec.is_terminal { F::one() } else { F::zero() });
            }
        }
        BatchSeq { batch: b, steps: seq_len, frames, proprio, actions, rewards, is_first, is_terminal }
    }

    /// Serialises the whole buffer, oldest first. The ring position is
    /// normalised away: reloading yields the same logical sequence and the
    /// same behaviour under further pushes.
    pub fn write_blob(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&self.total.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&(FRAME_LEN as u32).to_le_bytes())?;
        for i in 0..self.records.len() {
            let rec = self.get(i);
            w.write_all(&rec.frame)?;
            for v in rec.proprio.iter().chain(&rec.prev_action) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&rec.reward.to_le_bytes())?;
            let flags = u8::from(rec.is_first) | (u8::from(rec.is_terminal) << 1);
            w.write_all(&[flags])?;
        }
        Ok(())
    }

    pub fn read_blob(r: &mut impl Read) -> io::Result<Self> {
        fn bad(detail: &str) -> io::Error {
            io::Error::new(io::ErrorKind::InvalidData, format!("replay blob: {detail}"))
        }
        let capacity = read_u64(r)? as usize;
        let total = read_u64(r)?;
        let len = read_u64(r)? as usize;
        let frame_len = read_u32(r)? as usize;
        if capacity == 0 {
            return Err(bad("zero capacity"));
        }
        if frame_len != FRAME_LEN {
            return Err(bad("frame length does not match the observation shape"));
        }
        if len > capacity {
            return Err(bad("length exceeds capacity"));
        }
        let mut records = Vec::with_capacity(len);
        for _ in 0..len {
            let mut frame = vec![0u8; FRAME_LEN];
            r.read_exact(&mut frame)?;
            let mut six = [0.0f64; 6];
            for v in &mut six {
                *v = read_f64(r)?;
            }
            let reward = read_f64(r)?;
            let mut flags = [0u8; 1];
            r.read_exact(&mut flags)?;
            if flags[0] > 0b11 {
                return Err(bad("unknown flag bits"));
            }
            records.push(StepRecord {
                frame,
                proprio: [six[0], six[1], six[2]],
                prev_action: [six[3], six[4], six[5]],
                reward,
                is_first: flags[0] & 1 != 0,
                is_terminal: flags[0] & 2 != 0,
            });
        }
        let next = if len < capacity { len } else { 0 };
        Ok(Self { capacity, records, next, total })
    }
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
