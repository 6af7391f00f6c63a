//! Discrete-event clock and a FIFO link model with latency, bandwidth and
//! drops.

use alloc::collections::{BTreeMap, BinaryHeap};
use core::cmp::{Ordering, Reverse};

#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

struct Entry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

/// Events leave in `(time, insertion order)` order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    seq: u64,
    now: f64,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            dispatched: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Scheduling in the past is a contract violation.
    pub fn schedule(&mut self, time: f64, event: E) -> Result<()> {
        if !(time >= self.now) {
            return Err(Error::Contract(alloc::format!(
                "event at {} scheduled at {}",
                time,
                self.now
            )));
        }
        self.seq += 1;
        self.heap.push(Reverse(Entry {
            time,
            seq: self.seq,
            event,
        }));
        Ok(())
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.time;
        self.dispatched += 1;
        Some((e.time, e.event))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub latency_s: f64,
    /// Uniform jitter half-width around the latency.
    pub jitter_s: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    pub drop_prob: f64,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.latency_s >= 0.0
            && self.jitter_s >= 0.0
            && self.bandwidth > 0.0
            && (0.0..=1.0).contains(&self.drop_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "link needs non-negative latency, positive bandwidth, drop in [0,1]".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LinkState {
    busy_until: f64,
    last_arrival: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    At(f64),
    Dropped,
}

/// Directed links between nodes. Each link serializes its frames at the
/// bandwidth cap, adds a sampled latency, and never lets a frame overtake an
/// earlier one.
pub struct Transport {
    pub config: LinkConfig,
    rng: ChaCha8Rng,
    links: BTreeMap<(u32, u32), LinkState>,
    pub sent: u64,
    pub dropped: u64,
}

impl Transport {
    pub fn new(config: LinkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4c49_4e4b),
            links: BTreeMap::new(),
            sent: 0,
            dropped: 0,
        })
    }

    pub fn send(&mut self, now: f64, from: u32, to: u32, len: usize) -> Delivery {
        self.send_with(now, from, to, len, true)
    }

    /// `droppable = false` models a reliable channel on the same link.
    pub fn send_with(&mut self, now: f64, from: u32, to: u32, len: usize, droppable: bool) -> Delivery {
        let c = self.config;
        let link = self.links.entry((from, to)).or_default();
        let start = link.busy_until.max(now);
        link.busy_until = start + len as f64 / c.bandwidth;
        // Draw both numbers every time so the stream does not depend on
        // which frames happen to be droppable.
        let u: f64 = self.rng.random();
        let j: f64 = self.rng.random_range(-1.0..=1.0);
        self.sent += 1;
        if droppable && u < c.drop_prob {
            self.dropped += 1;
            return Delivery::Dropped;
        }
        let latency = (c.latency_s + j * c.jitter_s).max(0.0);
        let arrival = (link.busy_until + latency).max(link.last_arrival);
        link.last_arrival = arrival;
        Delivery::At(arrival)
    }
}
