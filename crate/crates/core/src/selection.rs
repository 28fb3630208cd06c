//! Entry partitions and per-iteration selection masks for partial
//! diffusion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint subsets `𝒥_1..𝒥_Ω̄` covering `{0..M}`, each of size `1..=L`.
/// `L = 0` is represented by an empty subset list (nothing is ever shared).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    m: usize,
    l: usize,
    subsets: Vec<Vec<usize>>,
}

impl Partition {
    /// Contiguous blocks `{0..L}, {L..2L}, …`, the last possibly shorter.
    pub fn contiguous(m: usize, l: usize) -> Result<Self> {
        if l > m {
            return Err(Error::Config(format!("cannot share L={l} entries of an M={m} state")));
        }
        let subsets = if l == 0 {
            Vec::new()
        } else {
            (0..m)
                .step_by(l)
                .map(|start| (start..(start + l).min(m)).collect())
                .collect()
        };
        Ok(Self { m, l, subsets })
    }

    /// An explicit partition, checked for coverage, disjointness and
    /// subset sizes in `1..=L`.
    pub fn explicit(m: usize, l: usize, subsets: Vec<Vec<usize>>) -> Result<Self> {
        if l > m {
            return Err(Error::Config(format!("cannot share L={l} entries of an M={m} state")));
        }
        if l == 0 {
            if !subsets.is_empty() {
                return Err(Error::Config("L=0 admits no subsets".into()));
            }
            return Ok(Self { m, l, subsets });
        }
        let mut seen = vec![false; m];
        for (tau, s) in subsets.iter().enumerate() {
            if s.is_empty() || s.len() > l {
                return Err(Error::Config(format!(
                    "subset {tau} has {} entries, must be between 1 and {l}",
                    s.len()
                )));
            }
            for &j in s {
                if j >= m {
                    return Err(Error::Config(format!("subset {tau} references entry {j} >= M={m}")));
                }
                if seen[j] {
                    return Err(Error::Config(format!("entry {j} appears in more than one subset")));
                }
                seen[j] = true;
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("entry {j} is not covered by any subset")));
        }
        Ok(Self { m, l, subsets })
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn shared_entries(&self) -> usize {
        self.l
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// `Ω̄`; 1 for the empty `L = 0` schedule.
    pub fn omega(&self) -> usize {
        self.subsets.len().max(1)
    }

    /// Mask for subset `tau` (0-based). Panics if out of range.
    pub fn mask(&self, tau: usize) -> SelectionMask {
        let mut bits = vec![false; self.m];
        if self.l > 0 {
            for &j in &self.subsets[tau] {
                bits[j] = true;
            }
        }
        SelectionMask { bits }
    }
}

/// Diagonal 0/1 selection matrix stored as its diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all(m: usize, value: bool) -> Self {
        Self { bits: vec![value; m] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.bits.len(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }),
        ))
    }

    /// `T·v`: non-selected entries replaced with zero.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter().zip(&self.bits).map(|(x, &b)| if b { *x } else { 0.0 }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sequential,
    Stochastic,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Sequential => "sequential",
            Scheme::Stochastic => "stochastic",
        }
    }
}

/// Which subset every node transmits at every iteration.
///
/// Stochastic draws are counter-based: the subset at `(node, i)` is a pure
/// function of the seed, so `mask_at` needs no mutable state. With
/// `shared_across_nodes` all nodes read the same stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSchedule {
    pub scheme: Scheme,
    pub partition: Partition,
    pub shared_across_nodes: bool,
    pub seed: u64,
}

impl SelectionSchedule {
    pub fn new(scheme: Scheme, partition: Partition, seed: u64) -> Self {
        Self {
            scheme,
            partition,
            shared_across_nodes: true,
            seed,
        }
    }

    /// 0-based subset index used by `node` at iteration `i`, or `None` when
    /// `L = 0`.
    pub fn subset_index(&self, node: usize, i: usize) -> Option<usize> {
        let omega = self.partition.subsets.len();
        if omega == 0 {
            return None;
        }
        Some(match self.scheme {
            Scheme::Sequential => i % omega,
            Scheme::Stochastic => {
                let stream = if self.shared_across_nodes { 0 } else { node as u64 + 1 };
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(stream);
                // 16 words per iteration leaves room for rejection sampling.
                rng.set_word_pos(i as u128 * 16);
                rng.gen_range(0..omega)
            }
        })
    }

    pub fn mask_at(&self, node: usize, i: usize) -> SelectionMask {
        match self.subset_index(node, i) {
            Some(tau) => self.partition.mask(tau),
            None => SelectionMask::all(self.partition.m, false),
        }
    }
}
