//! Experience replay: fixed-capacity ring buffers for both levels.
//!
//! Lower-level entries are single transitions with the goal folded in.
//! Higher-level entries are whole c-step segments, stored raw so that goal
//! relabeling can happen at sampling time against the current lower-level
//! policy rather than once at collection.

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::goal::Goal;
use crate::rng::Rng;

/// One lower-level step: goal-conditioned SARS plus the advanced goal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowTransition {
    pub state: Vec<f64>,
    pub goal: Goal,
    pub action: Vec<f64>,
    /// Intrinsic reward, already multiplied by the lower reward scale.
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Goal re-expressed at `next_state` via the goal transition.
    pub next_goal: Goal,
    /// True environment termination only; goal-horizon expiry is not terminal.
    pub terminal: bool,
}

/// One higher-level decision interval: everything needed to retrain the
/// higher level and to relabel its goal later.
#[derive(Debug, Clone, PartialEq)]
pub struct HighSegment {
    /// States where actions were taken: s_t .. s_{t+n-1}, n <= c.
    pub states: Vec<Vec<f64>>,
    /// Goal emitted at the start of the segment.
    pub goal: Goal,
    /// Lower-level actions a_t .. a_{t+n-1}.
    pub actions: Vec<Vec<f64>>,
    /// Sum of raw environment rewards over the segment (pre-scaling).
    pub env_reward_sum: f64,
    /// State after the segment: s_{t+n}.
    pub final_state: Vec<f64>,
    /// True when the episode ended with this segment.
    pub terminal: bool,
    /// Exploration sigma in force when the segment was collected.
    pub behavior_sigma: f64,
    /// Per-step log densities of the taken actions under the collection-time
    /// lower policy; required by the importance-based corrections.
    pub behavior_log_densities: Option<Vec<f64>>,
}

impl HighSegment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Fixed-capacity ring buffer; inserts past capacity overwrite the oldest
/// entry, samples are uniform with replacement.
#[derive(Debug, Clone)]
pub struct RingBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    cursor: usize,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("ring buffer: zero capacity".into()));
        }
        Ok(RingBuffer {
            capacity,
            items: Vec::new(),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn insert(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.items.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// Uniform indices with replacement; the batch may exceed the current
    /// size. Errors on an empty buffer.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Precondition("sample from empty buffer".into()));
        }
        Ok((0..batch_size)
            .map(|_| rng.index(self.items.len()))
            .collect())
    }

    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&T>> {
        let idx = self.sample_indices(batch_size, rng)?;
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Serialization of one buffer entry for binary snapshots (crate-internal;
/// snapshots are exposed only for the concrete entry types below).
pub(crate) trait SnapshotItem: Sized {
    /// Distinguishes entry kinds inside the shared container format.
    const KIND_TAG: u8;
    fn encode(&self, w: &mut ByteWriter);
    fn decode(r: &mut ByteReader) -> Result<Self>;
}

const BUFFER_MAGIC: &[u8; 8] = b"HIROBUF1";

fn snapshot_bytes<T: SnapshotItem>(buf: &RingBuffer<T>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(BUFFER_MAGIC);
    w.u8(T::KIND_TAG);
    w.u64(buf.capacity as u64);
    w.u64(buf.items.len() as u64);
    w.u64(buf.cursor as u64);
    for item in &buf.items {
        item.encode(&mut w);
    }
    w.into_bytes()
}

fn decode_snapshot<T: SnapshotItem>(bytes: &[u8]) -> Result<RingBuffer<T>> {
    let mut r = ByteReader::new(bytes);
    r.magic(BUFFER_MAGIC)?;
    let tag = r.u8()?;
    if tag != T::KIND_TAG {
        return Err(Error::Snapshot(format!(
            "entry kind {tag} does not match expected {}",
            T::KIND_TAG
        )));
    }
    let capacity = r.count(usize::MAX)?;
    if capacity == 0 {
        return Err(Error::Snapshot("zero capacity".into()));
    }
    let len = r.count(capacity)?;
    let cursor = r.count(capacity.saturating_sub(1))?;
    let mut items = Vec::with_capacity(len);
    for _ in 0..len {
        items.push(T::decode(&mut r)?);
    }
    r.finish()?;
    Ok(RingBuffer {
        capacity,
        items,
        cursor,
    })
}

macro_rules! snapshot_api {
    ($ty:ty) => {
        impl RingBuffer<$ty> {
            /// Versioned binary snapshot: magic "HIROBUF1", a kind tag,
            /// little-endian counts, then raw little-endian 64-bit values.
            pub fn snapshot(&self) -> Vec<u8> {
                snapshot_bytes(self)
            }

            pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
                decode_snapshot(bytes)
            }
        }
    };
}

snapshot_api!(LowTransition);
snapshot_api!(HighSegment);

impl SnapshotItem for LowTransition {
    const KIND_TAG: u8 = 1;

    fn encode(&self, w: &mut ByteWriter) {
        w.f64_slice(&self.state);
        w.f64_slice(&self.goal.delta);
        w.f64_slice(&self.action);
        w.f64(self.reward);
        w.f64_slice(&self.next_state);
        w.f64_slice(&self.next_goal.delta);
        w.u8(self.terminal as u8);
    }

    fn decode(r: &mut ByteReader) -> Result<Self> {
        Ok(LowTransition {
            state: r.f64_vec()?,
            goal: Goal::new(r.f64_vec()?),
            action: r.f64_vec()?,
            reward: r.f64()?,
            next_state: r.f64_vec()?,
            next_goal: Goal::new(r.f64_vec()?),
            terminal: r.u8()? != 0,
        })
    }
}

impl SnapshotItem for HighSegment {
    const KIND_TAG: u8 = 2;

    fn encode(&self, w: &mut ByteWriter) {
        w.u64(self.states.len() as u64);
        for s in &self.states {
            w.f64_slice(s);
        }
        w.f64_slice(&self.goal.delta);
        w.u64(self.actions.len() as u64);
        for a in &self.actions {
            w.f64_slice(a);
        }
        w.f64(self.env_reward_sum);
        w.f64_slice(&self.final_state);
        w.u8(self.terminal as u8);
        w.f64(self.behavior_sigma);
        match &self.behavior_log_densities {
            None => w.u8(0),
            Some(d) => {
                w.u8(1);
                w.f64_slice(d);
            }
        }
    }

    fn decode(r: &mut ByteReader) -> Result<Self> {
        let n_states = r.count(1 << 32)?;
        let mut states = Vec::with_capacity(n_states);
        for _ in 0..n_states {
            states.push(r.f64_vec()?);
        }
        let goal = Goal::new(r.f64_vec()?);
        let n_actions = r.count(1 << 32)?;
        let mut actions = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            actions.push(r.f64_vec()?);
        }
        let env_reward_sum = r.f64()?;
        let final_state = r.f64_vec()?;
        let terminal = r.u8()? != 0;
        let behavior_sigma = r.f64()?;
        let behavior_log_densities = match r.u8()? {
            0 => None,
            1 => Some(r.f64_vec()?),
            k => return Err(Error::Snapshot(format!("bad option tag {k}"))),
        };
        if states.len() != actions.len() {
            return Err(Error::Snapshot(format!(
                "segment with {} states but {} actions",
                states.len(),
                actions.len()
            )));
        }
        Ok(HighSegment {
            states,
            goal,
            actions,
            env_reward_sum,
            final_state,
            terminal,
            behavior_sigma,
            behavior_log_densities,
        })
    }
}
