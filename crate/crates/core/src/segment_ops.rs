//! Group-indexed pooling and broadcast over variable-size point groups.
//!
//! `dynamic_pool` reduces every group of rows to one row, `dynamic_broadcast`
//! copies each group row back to its members. Both work on ragged groups
//! without padding or sampling. Rows whose id is [`GroupIndex::NONE`] take
//! part in neither direction.
//!
//! Reductions visit members in row order and sum pairwise, so results do not
//! depend on how the work is scheduled.

use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};
use crate::tensor::FeatureArray;

/// Symmetric reduction applied within each group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reduce {
    Max,
    Avg,
    Sum,
}

/// Maps each of N rows to a group in `[0, m)` or to [`GroupIndex::NONE`].
///
/// Group membership lists are built once at construction and reused by every
/// reduction over the same index.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupIndex {
    ids: Vec<u32>,
    m: usize,
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl GroupIndex {
    pub const NONE: u32 = u32::MAX;

    pub fn new(ids: Vec<u32>, m: usize) -> Result<Self> {
        if m >= Self::NONE as usize {
            return Err(FsdError::contract(format!("group count {m} too large")));
        }
        let mut counts = vec![0usize; m + 1];
        for (row, &id) in ids.iter().enumerate() {
            if id == Self::NONE {
                continue;
            }
            if id as usize >= m {
                return Err(FsdError::contract(format!(
                    "row {row} has group id {id}, but only {m} groups exist"
                )));
            }
            counts[id as usize + 1] += 1;
        }
        for k in 0..m {
            counts[k + 1] += counts[k];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut members = vec![0usize; offsets[m]];
        for (row, &id) in ids.iter().enumerate() {
            if id != Self::NONE {
                let slot = &mut cursor[id as usize];
                members[*slot] = row;
                *slot += 1;
            }
        }
        Ok(Self {
            ids,
            m,
            offsets,
            members,
        })
    }

    /// Builds from optional ids, mapping `None` to the sentinel.
    pub fn from_options(ids: &[Option<usize>], m: usize) -> Result<Self> {
        let raw = ids
            .iter()
            .map(|id| id.map_or(Self::NONE, |k| k.min(Self::NONE as usize - 1) as u32))
            .collect();
        Self::new(raw, m)
    }

    /// Every row in one group.
    pub fn single_group(n: usize) -> Self {
        Self::new(vec![0; n], if n == 0 { 0 } else { 1 }).expect("valid single group")
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, row: usize) -> Option<usize> {
        match self.ids[row] {
            Self::NONE => None,
            id => Some(id as usize),
        }
    }

    /// Rows of group `k`, ascending.
    #[inline]
    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[self.offsets[k]..self.offsets[k + 1]]
    }

    #[inline]
    pub fn group_len(&self, k: usize) -> usize {
        self.offsets[k + 1] - self.offsets[k]
    }

    /// Rows that belong to some group, ascending.
    pub fn assigned_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&r| self.ids[r] != Self::NONE).collect()
    }

    /// Restricts the index to `rows`, keeping group ids.
    pub fn select_rows(&self, rows: &[usize]) -> GroupIndex {
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        GroupIndex::new(ids, self.m).expect("subset of a valid index")
    }
}

fn check_rows(f: &FeatureArray, idx: &GroupIndex) -> Result<()> {
    if f.n() != idx.n() {
        return Err(FsdError::contract(format!(
            "feature rows {} != group index length {}",
            f.n(),
            idx.n()
        )));
    }
    Ok(())
}

/// Pairwise sum of `f[rows[..], ch]`.
fn pairwise_sum(f: &FeatureArray, rows: &[usize], ch: usize) -> f64 {
    if rows.len() <= 8 {
        return rows.iter().map(|&r| f.get(r, ch)).sum();
    }
    let mid = rows.len() / 2;
    pairwise_sum(f, &rows[..mid], ch) + pairwise_sum(f, &rows[mid..], ch)
}

/// `G = p(F, I)`: one row per group. Empty groups give zero rows.
pub fn dynamic_pool(f: &FeatureArray, idx: &GroupIndex, reduce: Reduce) -> Result<FeatureArray> {
    check_rows(f, idx)?;
    if reduce == Reduce::Max {
        return Ok(dynamic_pool_max(f, idx)?.0);
    }
    let c = f.c();
    let mut out = FeatureArray::zeros(idx.m(), c);
    for k in 0..idx.m() {
        let rows = idx.members(k);
        if rows.is_empty() {
            continue;
        }
        let scale = match reduce {
            Reduce::Avg => 1.0 / rows.len() as f64,
            _ => 1.0,
        };
        let o = out.row_mut(k);
        for (ch, v) in o.iter_mut().enumerate() {
            *v = pairwise_sum(f, rows, ch) * scale;
        }
    }
    Ok(out)
}

/// Max pooling that also returns, per group and channel, the winning row.
///
/// Ties go to the earliest row. Empty groups report `usize::MAX`.
pub fn dynamic_pool_max(f: &FeatureArray, idx: &GroupIndex) -> Result<(FeatureArray, Vec<usize>)> {
    check_rows(f, idx)?;
    let c = f.c();
    let mut out = FeatureArray::zeros(idx.m(), c);
    let mut argmax = vec![usize::MAX; idx.m() * c];
    for k in 0..idx.m() {
        let rows = idx.members(k);
        let Some((&first, rest)) = rows.split_first() else {
            continue;
        };
        let am = &mut argmax[k * c..(k + 1) * c];
        let o = out.row_mut(k);
        o.copy_from_slice(f.row(first));
        am.fill(first);
        for &r in rest {
            for ((ov, a), &v) in o.iter_mut().zip(am.iter_mut()).zip(f.row(r)) {
                if v > *ov {
                    *ov = v;
                    *a = r;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// `G[I]`: copies group rows to their members; unassigned rows are zero.
pub fn dynamic_broadcast(g: &FeatureArray, idx: &GroupIndex) -> Result<FeatureArray> {
    if idx.m() > g.n() {
        return Err(FsdError::contract(format!(
            "index refers to {} groups but only {} group rows given",
            idx.m(),
            g.n()
        )));
    }
    let mut out = FeatureArray::zeros(idx.n(), g.c());
    for row in 0..idx.n() {
        if let Some(k) = idx.get(row) {
            out.row_mut(row).copy_from_slice(g.row(k));
        }
    }
    Ok(out)
}

fn check_upstream(idx: &GroupIndex, upstream: &FeatureArray, c: usize) -> Result<()> {
    if upstream.n() != idx.m() || upstream.c() != c {
        return Err(FsdError::contract(format!(
            "pool gradient has shape {:?}, expected ({}, {c})",
            upstream.shape(),
            idx.m()
        )));
    }
    Ok(())
}

/// Gradient of [`dynamic_pool`] with respect to `f`.
pub fn pool_backward(
    f: &FeatureArray,
    idx: &GroupIndex,
    reduce: Reduce,
    upstream: &FeatureArray,
) -> Result<FeatureArray> {
    check_rows(f, idx)?;
    check_upstream(idx, upstream, f.c())?;
    match reduce {
        Reduce::Max => {
            let (_, argmax) = dynamic_pool_max(f, idx)?;
            Ok(max_pool_backward(&argmax, f.n(), upstream))
        }
        Reduce::Sum | Reduce::Avg => {
            let mut grad = FeatureArray::zeros(f.n(), f.c());
            for k in 0..idx.m() {
                let rows = idx.members(k);
                if rows.is_empty() {
                    continue;
                }
                let scale = if reduce == Reduce::Avg {
                    1.0 / rows.len() as f64
                } else {
                    1.0
                };
                let u = upstream.row(k);
                for &r in rows {
                    for (gv, uv) in grad.row_mut(r).iter_mut().zip(u) {
                        *gv = uv * scale;
                    }
                }
            }
            Ok(grad)
        }
    }
}

/// Routes `upstream` to the argmax rows recorded by [`dynamic_pool_max`].
pub fn max_pool_backward(argmax: &[usize], n: usize, upstream: &FeatureArray) -> FeatureArray {
    let c = upstream.c();
    let mut grad = FeatureArray::zeros(n, c);
    for k in 0..upstream.n() {
        for ch in 0..c {
            let r = argmax[k * c + ch];
            if r != usize::MAX {
                let g = grad.get(r, ch) + upstream.get(k, ch);
                grad.set(r, ch, g);
            }
        }
    }
    grad
}

/// Gradient of [`dynamic_broadcast`]: a per-group sum of the upstream rows.
pub fn broadcast_backward(upstream: &FeatureArray, idx: &GroupIndex) -> Result<FeatureArray> {
    dynamic_pool(upstream, idx, Reduce::Sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> FeatureArray {
        FeatureArray::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    fn idx(ids: &[u32], m: usize) -> GroupIndex {
        GroupIndex::new(ids.to_vec(), m).unwrap()
    }

    #[test]
    fn two_group_max_and_avg() {
        let f = col(&[1.0, 3.0, 5.0]);
        let i = idx(&[0, 0, 1], 2);
        assert_eq!(dynamic_pool(&f, &i, Reduce::Max).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(dynamic_pool(&f, &i, Reduce::Avg).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(dynamic_pool(&f, &i, Reduce::Sum).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn broadcast_indexing() {
        let g = col(&[2.0, 5.0]);
        let out = dynamic_broadcast(&g, &idx(&[0, 0, 1], 2)).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0, 5.0]);
        let out = dynamic_broadcast(&col(&[7.0]), &idx(&[0, 0, 0], 1)).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn none_rows_are_skipped_and_zeroed() {
        let f = col(&[100.0, 1.0, -4.0]);
        let i = idx(&[GroupIndex::NONE, 0, 0], 1);
        assert_eq!(dynamic_pool(&f, &i, Reduce::Max).unwrap().data(), &[1.0]);
        let b = dynamic_broadcast(&col(&[9.0]), &i).unwrap();
        assert_eq!(b.data(), &[0.0, 9.0, 9.0]);
    }

    #[test]
    fn empty_group_pools_to_zero_with_zero_gradient() {
        let f = col(&[-3.0, -5.0]);
        let i = idx(&[0, 0], 2);
        for reduce in [Reduce::Max, Reduce::Avg, Reduce::Sum] {
            let g = dynamic_pool(&f, &i, reduce).unwrap();
            assert_eq!(g.row(1), &[0.0]);
            let up = col(&[1.0, 10.0]);
            let grad = pool_backward(&f, &i, reduce, &up).unwrap();
            let total: f64 = grad.data().iter().sum();
            // nothing from the empty group's upstream leaks in
            assert!(total < 5.0, "{reduce:?}");
        }
    }

    #[test]
    fn avg_backward_splits_evenly() {
        let f = col(&[1.0, 2.0]);
        let grad = pool_backward(&f, &idx(&[0, 0], 1), Reduce::Avg, &col(&[6.0])).unwrap();
        assert_eq!(grad.data(), &[3.0, 3.0]);
    }

    #[test]
    fn max_backward_routes_to_argmax_first_tie() {
        let f = col(&[1.0, 3.0]);
        let grad = pool_backward(&f, &idx(&[0, 0], 1), Reduce::Max, &col(&[2.0])).unwrap();
        assert_eq!(grad.data(), &[0.0, 2.0]);

        let tie = col(&[4.0, 4.0, 4.0]);
        let grad = pool_backward(&tie, &idx(&[0, 0, 0], 1), Reduce::Max, &col(&[1.0])).unwrap();
        assert_eq!(grad.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn contract_errors() {
        let f = col(&[1.0, 2.0]);
        assert!(matches!(
            dynamic_pool(&f, &idx(&[0, 0, 0], 1), Reduce::Sum),
            Err(FsdError::Contract(_))
        ));
        assert!(matches!(GroupIndex::new(vec![0, 3], 2), Err(FsdError::Contract(_))));
        assert!(dynamic_broadcast(&col(&[1.0]), &idx(&[0, 1], 2)).is_err());
        let up = FeatureArray::zeros(2, 1);
        assert!(pool_backward(&f, &idx(&[0, 0], 1), Reduce::Avg, &up).is_err());
    }

    #[test]
    fn members_are_row_ordered() {
        let i = idx(&[1, 0, 1, GroupIndex::NONE, 0], 3);
        assert_eq!(i.members(0), &[1, 4]);
        assert_eq!(i.members(1), &[0, 2]);
        assert!(i.members(2).is_empty());
        assert_eq!(i.assigned_rows(), vec![0, 1, 2, 4]);
    }
}
