//! Transitions, the replay ring buffer and demonstration files.
//!
//! Demonstration files are JSON lines. The first line is a metadata header,
//! every following line is one transition:
//!
//! ```text
//! {"task":"reach","gsi":false,"policy_id":"expert","success_rate":1.0,"obs_dim":4,"act_dim":2,"format_version":1}
//! {"episode":0,"t":0,"s":[...],"a":[...],"r":-1.0,"s_next":[...],"done":false}
//! ```
//!
//! Floats are written in shortest round-trip form, so save then load is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEMO_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("transition {field} has length {actual}, expected {expected}")]
    Dimension {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("reward {0} outside {{-1, +1}}")]
    Reward(f64),
    #[error("action component {0} outside [-1, 1]")]
    ActionRange(f64),
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("capacity {capacity} is smaller than the {needed} demonstration transitions")]
    CapacityTooSmall { capacity: usize, needed: usize },
    #[error("demo file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReplayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

impl Transition {
    /// Checks the per-transition invariants.
    pub fn validate(&self) -> Result<()> {
        if self.s.len() != self.s_next.len() {
            return Err(ReplayError::Dimension {
                field: "s_next",
                expected: self.s.len(),
                actual: self.s_next.len(),
            });
        }
        if self.r != 1.0 && self.r != -1.0 {
            return Err(ReplayError::Reward(self.r));
        }
        if let Some(&bad) = self.a.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
            return Err(ReplayError::ActionRange(bad));
        }
        Ok(())
    }
}

/// Minibatch in matrix form, one row per sampled transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Batch {
        let items: Vec<&Transition> = items.into_iter().collect();
        assert!(!items.is_empty(), "batch must be nonempty");
        let n = items.len();
        let (od, ad) = (items[0].s.len(), items[0].a.len());
        let mut states = Array2::zeros((n, od));
        let mut actions = Array2::zeros((n, ad));
        let mut next_states = Array2::zeros((n, od));
        for (i, t) in items.iter().enumerate() {
            states.row_mut(i).iter_mut().zip(&t.s).for_each(|(d, s)| *d = *s);
            actions.row_mut(i).iter_mut().zip(&t.a).for_each(|(d, s)| *d = *s);
            next_states.row_mut(i).iter_mut().zip(&t.s_next).for_each(|(d, s)| *d = *s);
        }
        Batch {
            states,
            actions,
            rewards: items.iter().map(|t| t.r).collect(),
            next_states,
            dones: items.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Capacity-bounded FIFO ring of transitions.
///
/// The first `pinned` slots, when set, are never overwritten; the ring wraps
/// over the remaining slots.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
    pinned: usize,
    dims: Option<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(ReplayBuffer {
            capacity,
            storage: Vec::new(),
            cursor: 0,
            pinned: 0,
            dims: None,
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pinned(&self) -> usize {
        self.pinned
    }

    /// `(obs_dim, act_dim)` of the stored transitions, once known.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.dims
    }

    /// Transitions oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (pinned, ring) = self.storage.split_at(self.pinned);
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            self.cursor - self.pinned
        };
        let (newer, older) = ring.split_at(split);
        pinned.iter().chain(older).chain(newer)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate()?;
        match self.dims {
            Some((od, ad)) => {
                if t.s.len() != od {
                    return Err(ReplayError::Dimension {
                        field: "s",
                        expected: od,
                        actual: t.s.len(),
                    });
                }
                if t.a.len() != ad {
                    return Err(ReplayError::Dimension {
                        field: "a",
                        expected: ad,
                        actual: t.a.len(),
                    });
                }
            }
            None => self.dims = Some((t.s.len(), t.a.len())),
        }
        if self.storage.len() < self.capacity {
            self.storage.push(t);
            self.cursor = self.storage.len() % self.capacity;
            if self.cursor == 0 {
                self.cursor = self.pinned;
            }
        } else if self.pinned == self.capacity {
            // everything pinned: nothing can be evicted, drop the newcomer
        } else {
            self.storage[self.cursor] = t;
            self.cursor += 1;
            if self.cursor == self.capacity {
                self.cursor = self.pinned;
            }
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.storage.get(i)
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        Ok(Batch::from_transitions(self.sample_refs(batch_size, rng)?))
    }

    pub fn sample_refs<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.storage.is_empty() {
            return Err(ReplayError::Empty);
        }
        let n = self.storage.len();
        Ok((0..batch_size).map(|_| &self.storage[rng.random_range(0..n)]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoMetadata {
    pub task: String,
    pub gsi: bool,
    pub policy_id: String,
    pub success_rate: f64,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub metadata: DemoMetadata,
    pub episodes: Vec<Vec<Transition>>,
}

impl DemoDataset {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    /// Fraction of stored episodes ending in the goal.
    pub fn recount_success(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        let ok = self
            .episodes
            .iter()
            .filter(|e| e.last().is_some_and(|t| t.r == 1.0))
            .count();
        ok as f64 / self.episodes.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    episode: usize,
    t: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: f64,
    s_next: Vec<f64>,
    done: bool,
}

pub fn write_demos<W: Write>(dataset: &DemoDataset, mut w: W) -> Result<()> {
    let header = serde_json::to_string(&dataset.metadata).expect("metadata serializes");
    writeln!(w, "{header}")?;
    for (episode, steps) in dataset.episodes.iter().enumerate() {
        for (t, tr) in steps.iter().enumerate() {
            let rec = Record {
                episode,
                t,
                s: tr.s.clone(),
                a: tr.a.clone(),
                r: tr.r,
                s_next: tr.s_next.clone(),
                done: tr.done,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
    }
    Ok(())
}

pub fn save_demos(dataset: &DemoDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_demos(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> ReplayError {
    ReplayError::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_demos<R: Read>(r: R) -> Result<DemoDataset> {
    let mut lines = BufReader::new(r).lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(parse_err(1, "empty file, expected metadata header")),
    };
    let metadata: DemoMetadata =
        serde_json::from_str(&header).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if metadata.format_version != DEMO_FORMAT_VERSION {
        return Err(parse_err(1, format!("unsupported format_version {}", metadata.format_version)));
    }

    let mut episodes: Vec<Vec<Transition>> = Vec::new();
    let mut open = false;
    let mut last_line = 1;
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        last_line = n;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        if rec.s.len() != metadata.obs_dim || rec.s_next.len() != metadata.obs_dim {
            return Err(parse_err(
                n,
                format!("observation length {} != obs_dim {}", rec.s.len(), metadata.obs_dim),
            ));
        }
        if rec.a.len() != metadata.act_dim {
            return Err(parse_err(
                n,
                format!("action length {} != act_dim {}", rec.a.len(), metadata.act_dim),
            ));
        }
        let expected_episode = if open { episodes.len() - 1 } else { episodes.len() };
        if rec.episode != expected_episode {
            return Err(parse_err(
                n,
                format!("episode {} out of sequence, expected {expected_episode}", rec.episode),
            ));
        }
        if !open {
            episodes.push(Vec::new());
        }
        let ep = episodes.last_mut().unwrap();
        if rec.t != ep.len() {
            return Err(parse_err(n, format!("step {} out of sequence, expected {}", rec.t, ep.len())));
        }
        let tr = Transition {
            s: rec.s,
            a: rec.a,
            r: rec.r,
            s_next: rec.s_next,
            done: rec.done,
        };
        tr.validate().map_err(|e| parse_err(n, e.to_string()))?;
        open = !tr.done;
        ep.push(tr);
    }
    if open {
        return Err(parse_err(
            last_line,
            format!("truncated: episode {} has no terminal transition", episodes.len() - 1),
        ));
    }
    Ok(DemoDataset { metadata, episodes })
}

pub fn load_demos(path: impl AsRef<Path>) -> Result<DemoDataset> {
    read_demos(File::open(path)?)
}

/// Buffer holding every demonstration transition in episode order.
pub fn init_from_demos(dataset: &DemoDataset, capacity: usize) -> Result<ReplayBuffer> {
    init_from_demos_pinned(dataset, capacity, false)
}

/// As [`init_from_demos`]; with `pin` the demonstrations are never evicted.
pub fn init_from_demos_pinned(dataset: &DemoDataset, capacity: usize, pin: bool) -> Result<ReplayBuffer> {
    let needed = dataset.num_transitions();
    if capacity < needed {
        return Err(ReplayError::CapacityTooSmall { capacity, needed });
    }
    let mut buf = ReplayBuffer::new(capacity)?;
    for t in dataset.transitions() {
        buf.push(t.clone())?;
    }
    if pin {
        buf.pinned = needed;
        if buf.storage.len() < buf.capacity {
            buf.cursor = buf.storage.len();
        } else {
            buf.cursor = buf.pinned;
        }
    }
    Ok(buf)
}
