//! Continuous traversal orders of a 3D grid.
//!
//! A grid with extents `(D, H, W)` is indexed `(z, y, x)` with flat index
//! `(z * H + y) * W + x`. The canonical order is a boustrophedon raster:
//! `x` reverses direction on every row and `y` on every slice, so
//! consecutive voxels always share a face.
//!
//! The 48 orders are indexed by orientation group `g` (one of six axis
//! permutations applied first) and variant `v = 2 * r + f`, where `r` is a
//! quarter-turn count about the slowest axis of the permuted grid and `f`
//! reverses the sequence. Every order is expressed as flat indices of the
//! original grid.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type Dims = [usize; 3];

pub const GROUPS: usize = 6;
pub const VARIANTS: usize = 8;

/// Axis permutations in orientation-group order; group 0 is the identity.
pub const AXIS_PERMUTATIONS: [[usize; 3]; GROUPS] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraversalPath {
    pub dims: Dims,
    /// `order[t]` is the flat voxel index visited at step `t`.
    pub order: Vec<usize>,
    /// `inverse[order[t]] == t`.
    pub inverse: Vec<usize>,
    pub group: usize,
    pub variant: usize,
}

impl TraversalPath {
    fn new(dims: Dims, order: Vec<usize>, group: usize, variant: usize) -> Self {
        let mut inverse = vec![0; order.len()];
        for (t, &i) in order.iter().enumerate() {
            inverse[i] = t;
        }
        TraversalPath { dims, order, inverse, group, variant }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn rotation(&self) -> usize {
        self.variant / 2
    }

    pub fn reversed(&self) -> bool {
        self.variant % 2 == 1
    }

    /// `(z, y, x)` of the voxel visited at step `t`.
    pub fn coord(&self, t: usize) -> Dims {
        unflatten(self.dims, self.order[t])
    }

    /// Writes `t,x,y,z` rows, one per step.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,x,y,z")?;
        for t in 0..self.len() {
            let [z, y, x] = self.coord(t);
            writeln!(w, "{t},{x},{y},{z}")?;
        }
        Ok(())
    }
}

pub fn flat(dims: Dims, [z, y, x]: Dims) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

pub fn unflatten(dims: Dims, i: usize) -> Dims {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("traversal of grid with zero extent {dims:?}")));
    }
    Ok(())
}

/// Boustrophedon coordinates of a grid, slowest axis first.
fn serpentine_coords(dims: Dims) -> Vec<Dims> {
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(d * h * w);
    let mut row = 0usize;
    for z in 0..d {
        for yi in 0..h {
            let y = if z % 2 == 0 { yi } else { h - 1 - yi };
            for xi in 0..w {
                let x = if row % 2 == 0 { xi } else { w - 1 - xi };
                out.push([z, y, x]);
            }
            row += 1;
        }
    }
    out
}

pub fn serpentine_path(dims: Dims) -> Result<TraversalPath> {
    path(dims, 0, 0)
}

/// The order for orientation group `group` and variant `variant`.
pub fn path(dims: Dims, group: usize, variant: usize) -> Result<TraversalPath> {
    check_dims(dims)?;
    if group >= GROUPS || variant >= VARIANTS {
        return Err(Error::config(format!("no traversal ({group}, {variant})")));
    }
    let perm = AXIS_PERMUTATIONS[group];
    let t = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
    let (r, f) = (variant / 2, variant % 2 == 1);
    let rotated = if r % 2 == 0 { t } else { [t[0], t[2], t[1]] };
    let (tb, tc) = (t[1], t[2]);
    let mut order: Vec<usize> = serpentine_coords(rotated)
        .into_iter()
        .map(|[a, i, j]| {
            let (b, c) = match r {
                0 => (i, j),
                1 => (j, tc - 1 - i),
                2 => (tb - 1 - i, tc - 1 - j),
                _ => (tb - 1 - j, i),
            };
            let mut orig = [0; 3];
            orig[perm[0]] = a;
            orig[perm[1]] = b;
            orig[perm[2]] = c;
            flat(dims, orig)
        })
        .collect();
    if f {
        order.reverse();
    }
    Ok(TraversalPath::new(dims, order, group, variant))
}

/// The eight orders of one orientation group.
pub fn group_paths(dims: Dims, group: usize) -> Result<Vec<TraversalPath>> {
    (0..VARIANTS).map(|v| path(dims, group, v)).collect()
}

/// All 48 orders, group-major.
pub fn enumerate_paths(dims: Dims) -> Result<Vec<TraversalPath>> {
    let mut out = Vec::with_capacity(GROUPS * VARIANTS);
    for g in 0..GROUPS {
        out.extend(group_paths(dims, g)?);
    }
    Ok(out)
}

type CacheMap = HashMap<(Dims, usize), Arc<Vec<TraversalPath>>>;

/// Process-wide cache of [`group_paths`]; paths depend only on the grid.
pub fn cached_group_paths(dims: Dims, group: usize) -> Result<Arc<Vec<TraversalPath>>> {
    static CACHE: OnceLock<Mutex<CacheMap>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().unwrap().get(&(dims, group)) {
        return Ok(Arc::clone(p));
    }
    let paths = Arc::new(group_paths(dims, group)?);
    cache.lock().unwrap().insert((dims, group), Arc::clone(&paths));
    Ok(paths)
}

pub fn is_bijective(order: &[usize], n: usize) -> bool {
    if order.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Every consecutive pair of voxels is at Manhattan distance exactly 1.
pub fn is_continuous(order: &[usize], dims: Dims) -> bool {
    order.windows(2).all(|p| {
        let (a, b) = (unflatten(dims, p[0]), unflatten(dims, p[1]));
        a.iter().zip(&b).map(|(&u, &v)| u.abs_diff(v)).sum::<usize>() == 1
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathReport {
    pub dims: Dims,
    pub n_paths: usize,
    pub bijective: bool,
    pub continuous: bool,
    pub distinct_count: usize,
}

/// Exhaustively checks bijection, continuity and pairwise distinctness of
/// the 48 orders.
pub fn verify_paths(dims: Dims) -> Result<PathReport> {
    let paths = enumerate_paths(dims)?;
    let n = dims.iter().product();
    let distinct: HashSet<&[usize]> = paths.iter().map(|p| p.order.as_slice()).collect();
    Ok(PathReport {
        dims,
        n_paths: paths.len(),
        bijective: paths.iter().all(|p| is_bijective(&p.order, n)),
        continuous: paths.iter().all(|p| is_continuous(&p.order, dims)),
        distinct_count: distinct.len(),
    })
}

/// `[C, D, H, W]` -> `[L, C]`, row `t` holding the features of voxel `order[t]`.
pub fn gather_sequence<T: Scalar>(features: &Tensor<T>, path: &TraversalPath) -> Result<Tensor<T>> {
    if features.ndim() != 4 || features.shape()[1..] != path.dims {
        return Err(Error::shape(format!(
            "gather_sequence: features {:?} for path over {:?}",
            features.shape(),
            path.dims
        )));
    }
    features.channels_last()?.gather_rows(&path.order)
}

/// Inverse of [`gather_sequence`].
pub fn scatter_back<T: Scalar>(seq: &Tensor<T>, path: &TraversalPath) -> Result<Tensor<T>> {
    if seq.ndim() != 2 || seq.shape()[0] != path.len() {
        return Err(Error::shape(format!(
            "scatter_back: sequence {:?} for path of length {}",
            seq.shape(),
            path.len()
        )));
    }
    seq.scatter_rows(&path.order)?.channels_first(path.dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singleton() {
        assert_eq!(serpentine_path([1, 1, 1]).unwrap().order, vec![0]);
        let all = enumerate_paths([1, 1, 1]).unwrap();
        assert_eq!(all.len(), 48);
        assert!(all.iter().all(|p| p.order == vec![0]));
        assert_eq!(verify_paths([1, 1, 1]).unwrap().distinct_count, 1);
    }

    #[test]
    fn cube_of_two() {
        let p = serpentine_path([2, 2, 2]).unwrap();
        let coords: Vec<Dims> = (0..8).map(|t| p.coord(t)).collect();
        assert_eq!(
            coords,
            vec![
                [0, 0, 0],
                [0, 0, 1],
                [0, 1, 1],
                [0, 1, 0],
                [1, 1, 0],
                [1, 1, 1],
                [1, 0, 1],
                [1, 0, 0]
            ]
        );
        assert!(is_continuous(&p.order, [2, 2, 2]));
    }

    #[test]
    fn odd_grid_continuity() {
        let p = serpentine_path([3, 4, 5]).unwrap();
        assert_eq!(p.order.windows(2).count(), 59);
        assert!(is_continuous(&p.order, [3, 4, 5]));
    }

    #[test]
    fn forty_eight_distinct() {
        let r = verify_paths([3, 4, 5]).unwrap();
        assert_eq!(r, PathReport { dims: [3, 4, 5], n_paths: 48, bijective: true, continuous: true, distinct_count: 48 });
        let r = verify_paths([2, 3, 4]).unwrap();
        assert!(r.bijective && r.continuous);
    }

    #[test]
    fn group_zero_variant_zero_is_serpentine() {
        let all = enumerate_paths([3, 4, 5]).unwrap();
        assert_eq!(all[0], serpentine_path([3, 4, 5]).unwrap());
        assert_eq!((all[13].group, all[13].variant), (1, 5));
    }

    #[test]
    fn reversal_variant_is_reverse_of_base() {
        for g in 0..GROUPS {
            for r in 0..4 {
                let fwd = path([3, 4, 5], g, 2 * r).unwrap();
                let mut rev = path([3, 4, 5], g, 2 * r + 1).unwrap().order;
                rev.reverse();
                assert_eq!(fwd.order, rev);
            }
        }
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(serpentine_path([0, 2, 2]).is_err());
        assert!(enumerate_paths([2, 0, 2]).is_err());
    }

    #[test]
    fn csv_dump_has_one_row_per_voxel() {
        let p = path([2, 3, 4], 3, 6).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 24);
        assert!(text.starts_with("t,x,y,z\n"));
    }

    proptest! {
        #[test]
        fn every_path_is_a_continuous_bijection(d in 1usize..5, h in 1usize..5, w in 1usize..5) {
            let dims = [d, h, w];
            for p in enumerate_paths(dims).unwrap() {
                prop_assert!(is_bijective(&p.order, d * h * w));
                prop_assert!(is_continuous(&p.order, dims));
                for (t, &i) in p.order.iter().enumerate() {
                    prop_assert_eq!(p.inverse[i], t);
                }
            }
        }

        #[test]
        fn distinct_extents_give_48_orders(
            mut e in proptest::collection::btree_set(2usize..6, 3)
        ) {
            let v: Vec<usize> = std::mem::take(&mut e).into_iter().collect();
            let r = verify_paths([v[2], v[0], v[1]]).unwrap();
            prop_assert_eq!(r.distinct_count, 48);
        }
    }

    fn field(dims: Dims, c: usize) -> Tensor<f32> {
        let l = dims.iter().product::<usize>();
        Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], (0..c * l).map(|i| (i * 37 % 101) as f32).collect())
            .unwrap()
    }

    #[test]
    fn gather_scatter_round_trip() {
        let dims = [2, 3, 4];
        let x = field(dims, 3);
        for p in enumerate_paths(dims).unwrap() {
            let seq = gather_sequence(&x, &p).unwrap();
            assert_eq!(seq.shape(), &[24, 3]);
            assert_eq!(scatter_back(&seq, &p).unwrap().to_vec(), x.to_vec());
        }
        let p = serpentine_path([2, 2, 2]).unwrap();
        assert_eq!(gather_sequence(&field([2, 2, 2], 5), &p).unwrap().shape(), &[8, 5]);
        let zero = scatter_back(&Tensor::<f32>::zeros(&[8, 5]), &p).unwrap();
        assert!(zero.to_vec().iter().all(|&v| v == 0.0));
        assert!(gather_sequence(&x, &p).is_err());
        assert!(scatter_back(&Tensor::<f32>::zeros(&[7, 5]), &p).is_err());
    }

    #[test]
    fn gather_follows_path_order() {
        let dims = [3, 4, 5];
        let p = path(dims, 3, 5).unwrap();
        let vals: Vec<f32> = (0..60).map(|v| p.inverse[v] as f32).collect();
        let x = Tensor::from_vec(&[1, 3, 4, 5], vals).unwrap();
        let seq = gather_sequence(&x, &p).unwrap().to_vec();
        assert_eq!(seq, (0..60).map(|t| t as f32).collect::<Vec<_>>());
    }

    #[test]
    fn reversal_algebra() {
        let dims = [2, 3, 4];
        let (fwd, rev) = (path(dims, 2, 4).unwrap(), path(dims, 2, 5).unwrap());
        let seq: Vec<f32> = (0..48).map(|i| (i * 7 % 13) as f32).collect();
        let mut flipped = Vec::new();
        for row in seq.chunks(2).rev() {
            flipped.extend_from_slice(row);
        }
        let a = scatter_back(&Tensor::from_vec(&[24, 2], seq).unwrap(), &rev).unwrap();
        let b = scatter_back(&Tensor::from_vec(&[24, 2], flipped).unwrap(), &fwd).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }
}
