//! Time-ordered event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Simulation time in integer nanoseconds.
pub type Nanos = u64;

pub const NS_PER_MS: f64 = 1e6;
pub const NS_PER_S: f64 = 1e9;

pub fn ms_to_ns(ms: f64) -> Nanos {
    (ms * NS_PER_MS).round() as Nanos
}

pub fn s_to_ns(s: f64) -> Nanos {
    (s * NS_PER_S).round() as Nanos
}

pub fn ns_to_ms(ns: Nanos) -> f64 {
    ns as f64 / NS_PER_MS
}

pub fn ns_to_s(ns: Nanos) -> f64 {
    ns as f64 / NS_PER_S
}

/// Tie-break class for events at the same instant; lower runs first.
pub type Priority = u8;

pub const PRIO_FIRST: Priority = 0;
pub const PRIO_NORMAL: Priority = 1;
pub const PRIO_LAST: Priority = 2;

#[derive(Debug, Clone)]
pub struct Scheduled<E> {
    pub time: Nanos,
    pub prio: Priority,
    pub seq: u64,
    pub event: E,
}

impl<E> Scheduled<E> {
    fn key(&self) -> (Nanos, Priority, u64) {
        (self.time, self.prio, self.seq)
    }
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first.
        other.key().cmp(&self.key())
    }
}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue on `(time, priority, seq)`; `seq` is the insertion counter.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    now: Nanos,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: 0,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: Nanos, event: E) -> Result<u64> {
        self.schedule_prio(time, PRIO_NORMAL, event)
    }

    pub fn schedule_prio(&mut self, time: Nanos, prio: Priority, event: E) -> Result<u64> {
        if time < self.now {
            return Err(Error::Internal(format!(
                "event scheduled at {time} ns before the clock ({} ns)",
                self.now
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled {
            time,
            prio,
            seq,
            event,
        });
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.heap.peek().map(|s| s.time)
    }

    /// Pops the earliest event and advances the clock to it.
    pub fn pop_next(&mut self) -> Option<Scheduled<E>> {
        let next = self.heap.pop()?;
        debug_assert!(next.time >= self.now);
        self.now = next.time;
        Some(next)
    }
}
