use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which index predicate defines the computational groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "groups")]
pub enum PartitionKind {
    /// Same channel.
    Batch,
    /// Same sample.
    Layer,
    /// Same sample and same block of `C / K` channels.
    Group(usize),
    /// Same sample and same channel.
    Instance,
    /// Same channel and same block of `N / K` samples.
    Local(usize),
}

/// Assignment of every element of an `[N, H, W, C]` tensor to a computational group.
///
/// All supported predicates ignore `H` and `W`, so the assignment is stored as an
/// `N x C` table indexed by `(n, c)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    kind: PartitionKind,
    shape: [usize; 4],
    groups: usize,
    table: Vec<usize>,
}

impl GroupPartition {
    pub fn new(kind: PartitionKind, shape: [usize; 4]) -> Result<Self> {
        let [n, _, _, c] = shape;
        let groups = match kind {
            PartitionKind::Batch => c,
            PartitionKind::Layer => n,
            PartitionKind::Instance => n * c,
            PartitionKind::Group(k) => {
                if k == 0 || c % k != 0 {
                    return Err(Error::IndivisibleGroups(format!("GroupNorm K={k} does not divide C={c}")));
                }
                n * k
            }
            PartitionKind::Local(k) => {
                if k == 0 || n % k != 0 {
                    return Err(Error::IndivisibleGroups(format!("LocalNorm K={k} does not divide N={n}")));
                }
                k * c
            }
        };
        let mut table = Vec::with_capacity(n * c);
        for ni in 0..n {
            for ci in 0..c {
                table.push(match kind {
                    PartitionKind::Batch => ci,
                    PartitionKind::Layer => ni,
                    PartitionKind::Instance => ni * c + ci,
                    PartitionKind::Group(k) => ni * k + ci / (c / k),
                    PartitionKind::Local(k) => (ni / (n / k)) * c + ci,
                });
            }
        }
        Ok(GroupPartition { kind, shape, groups, table })
    }

    pub fn kind(&self) -> PartitionKind {
        self.kind
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn group_of_coords(&self, n: usize, _h: usize, _w: usize, c: usize) -> usize {
        self.table[n * self.shape[3] + c]
    }

    pub fn group_of(&self, flat: usize) -> usize {
        let [_, h, w, c] = self.shape;
        let n = flat / (h * w * c);
        self.table[n * c + flat % c]
    }

    /// Group id of every flat index.
    pub fn assignments(&self) -> Vec<usize> {
        let [n, h, w, c] = self.shape;
        let mut out = Vec::with_capacity(n * h * w * c);
        for ni in 0..n {
            for _ in 0..h * w {
                out.extend_from_slice(&self.table[ni * c..(ni + 1) * c]);
            }
        }
        out
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let [_, h, w, _] = self.shape;
        let mut sizes = vec![0usize; self.groups];
        for &g in &self.table {
            sizes[g] += h * w;
        }
        sizes
    }

    pub(crate) fn nc_table(&self) -> &[usize] {
        &self.table
    }
}
