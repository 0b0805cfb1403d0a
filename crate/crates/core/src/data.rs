//! Modular-arithmetic tasks, deterministic train/test splits, batch sampling,
//! and fixed probe sets.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

pub const P: u32 = 97;

/// The four binary operations; `Sq` is `a² + b² mod p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Sq,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [OpKind::Add, OpKind::Sub, OpKind::Mul, OpKind::Sq];

    pub fn index(self) -> usize {
        match self {
            OpKind::Add => 0,
            OpKind::Sub => 1,
            OpKind::Mul => 2,
            OpKind::Sq => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sq => "sq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(OpKind::Add),
            "sub" => Ok(OpKind::Sub),
            "mul" => Ok(OpKind::Mul),
            "sq" => Ok(OpKind::Sq),
            other => Err(Error::Config(format!("unknown op '{other}'"))),
        }
    }
}

/// `y = op(a, b) mod p`. Subtraction wraps: `sub(2, 5) = p - 3`.
pub fn apply_op(op: OpKind, a: u32, b: u32, p: u32) -> u32 {
    debug_assert!(a < p && b < p);
    match op {
        OpKind::Add => (a + b) % p,
        OpKind::Sub => (a + p - b) % p,
        OpKind::Mul => (a * b) % p,
        OpKind::Sq => (a * a + b * b) % p,
    }
}

/// Split configuration; the split is a pure function of this struct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub p: u32,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            p: P,
            train_fraction: 0.5,
            split_seed: 0,
        }
    }
}

/// Disjoint train/test partition of all p² ordered pairs.
#[derive(Debug, Clone)]
pub struct Split {
    pub spec: SplitSpec,
    pub train: Vec<(u8, u8)>,
    pub test: Vec<(u8, u8)>,
}

impl Split {
    /// Hex digest over the train pairs, recorded in run manifests so stores
    /// built from different splits cannot be mixed up.
    pub fn train_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &(a, b) in &self.train {
            h.update([a, b]);
        }
        let d = h.finalize();
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic shuffle of all p² pairs; the first ⌊fraction · p²⌋ go to
/// train, the rest to test.
pub fn build_split(spec: &SplitSpec) -> Result<Split> {
    if !(0.0 < spec.train_fraction && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let p = spec.p;
    let mut pairs: Vec<(u8, u8)> = Vec::with_capacity((p * p) as usize);
    for a in 0..p {
        for b in 0..p {
            pairs.push((a as u8, b as u8));
        }
    }
    let mut rng = RngStream::derive(spec.split_seed, "split");
    rng.shuffle(&mut pairs);
    let n_train = ((spec.train_fraction * (p * p) as f64).floor()) as usize;
    let test = pairs.split_off(n_train);
    Ok(Split {
        spec: *spec,
        train: pairs,
        test,
    })
}

/// One sampled batch: input pairs plus labels for every op, so the same batch
/// serves single-task and multitask heads.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<(u8, u8)>,
    labels: [Vec<u8>; 4],
}

impl Batch {
    pub fn from_pairs(pairs: Vec<(u8, u8)>, p: u32) -> Self {
        let mut labels: [Vec<u8>; 4] = Default::default();
        for (slot, op) in labels.iter_mut().zip(OpKind::ALL) {
            *slot = pairs
                .iter()
                .map(|&(a, b)| apply_op(op, a as u32, b as u32, p) as u8)
                .collect();
        }
        Batch { pairs, labels }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self, op: OpKind) -> &[u8] {
        &self.labels[op.index()]
    }
}

/// `n` pairs drawn uniformly with replacement from the given pool.
pub fn sample_batch(pool: &[(u8, u8)], n: usize, p: u32, rng: &mut RngStream) -> Result<Batch> {
    if pool.is_empty() {
        return Err(Error::Config("cannot sample from an empty split".into()));
    }
    let pairs = (0..n).map(|_| pool[rng.uniform_usize(pool.len())]).collect();
    Ok(Batch::from_pairs(pairs, p))
}

/// A fixed probe set: distinct (a, b) pairs sampled once per analysis and
/// reused at every checkpoint.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub pairs: Vec<(u8, u8)>,
    pub probe_seed: u64,
}

impl ProbeSet {
    pub fn sample(master_seed: u64, probe_seed: u64, count: usize, p: u32) -> Self {
        let mut rng = RngStream::derive_indexed(master_seed, "probes", &[probe_seed]);
        let total = (p * p) as usize;
        let picked = rng.sample_distinct(total, count.min(total));
        let pairs = picked
            .into_iter()
            .map(|i| ((i / p as usize) as u8, (i % p as usize) as u8))
            .collect();
        ProbeSet { pairs, probe_seed }
    }

    pub fn labels(&self, op: OpKind, p: u32) -> Vec<u8> {
        self.pairs
            .iter()
            .map(|&(a, b)| apply_op(op, a as u32, b as u32, p) as u8)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
