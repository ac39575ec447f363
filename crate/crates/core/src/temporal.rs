//! Time-reversal primitives: flipping the frame axis of latents and rotating
//! temporal attention maps by 180 degrees.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array, Array3, ArrayBase, Axis, Data, Dimension, Slice};

use crate::error::{Error, Result};

/// Which UNet stage a temporal attention layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Down => "down",
            BlockKind::Mid => "mid",
            BlockKind::Up => "up",
        }
    }
}

/// Identity of a temporal self-attention layer. Ordering follows UNet
/// evaluation order (down blocks, mid, then up blocks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: BlockKind,
    pub index: usize,
}

impl LayerId {
    pub fn new(block: BlockKind, index: usize) -> Self {
        Self { block, index }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            BlockKind::Mid => write!(f, "mid"),
            b => write!(f, "{}.{}", b.name(), self.index),
        }
    }
}

/// Reverses the order of entries along `axis`; every other axis is untouched.
pub fn flip_time<A, S, D>(x: &ArrayBase<S, D>, axis: usize) -> Result<Array<A, D>>
where
    A: Clone,
    S: Data<Elem = A>,
    D: Dimension,
{
    if axis >= x.ndim() {
        return Err(Error::Argument(format!(
            "time axis {axis} out of range for a {}-d array",
            x.ndim()
        )));
    }
    Ok(x
        .slice_axis(Axis(axis), Slice::new(0, None, -1))
        .as_standard_layout()
        .into_owned())
}

/// Rotates each per-site `N x N` map by 180 degrees:
/// `out[s, N-1-j, N-1-k] = a[s, j, k]`.
pub fn rotate_map_180<A: Clone>(a: &Array3<A>) -> Result<Array3<A>> {
    let (_, rows, cols) = a.dim();
    if rows != cols {
        return Err(Error::Argument(format!(
            "attention map must be square in its last two axes, got {rows}x{cols}"
        )));
    }
    let rotated = a
        .slice_axis(Axis(1), Slice::new(0, None, -1))
        .slice_axis_move(Axis(2), Slice::new(0, None, -1));
    Ok(rotated.as_standard_layout().into_owned())
}

/// Per-layer temporal attention logits `A = Q K^T`, each `[sites, N, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapSet<T> {
    maps: BTreeMap<LayerId, Array3<T>>,
}

impl<T> Default for AttentionMapSet<T> {
    fn default() -> Self {
        Self {
            maps: BTreeMap::new(),
        }
    }
}

impl<T: Clone> AttentionMapSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: LayerId, map: Array3<T>) -> Result<()> {
        let (_, r, c) = map.dim();
        if r != c {
            return Err(Error::Argument(format!(
                "map for {layer} is {r}x{c}, expected square"
            )));
        }
        self.maps.insert(layer, map);
        Ok(())
    }

    pub fn get(&self, layer: &LayerId) -> Option<&Array3<T>> {
        self.maps.get(layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerId> {
        self.maps.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &Array3<T>)> {
        self.maps.iter()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Keeps only the layers accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&LayerId) -> bool) -> Self {
        Self {
            maps: self
                .maps
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }
}

/// Rotates every map in the set; keys are preserved.
pub fn rotate_set<T: Clone>(maps: &AttentionMapSet<T>) -> AttentionMapSet<T> {
    AttentionMapSet {
        maps: maps
            .maps
            .iter()
            .map(|(k, v)| (*k, rotate_map_180(v).expect("set maps are square")))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn flip_reverses_frames() {
        let x = array![[1.0, 1.5], [2.0, 2.5], [3.0, 3.5]];
        let f = flip_time(&x, 0).unwrap();
        assert_eq!(f, array![[3.0, 3.5], [2.0, 2.5], [1.0, 1.5]]);
        let single = array![[4.0, 5.0]];
        assert_eq!(flip_time(&single, 0).unwrap(), single);
        assert!(flip_time(&x, 2).is_err());
    }

    #[test]
    fn rotation_of_3x3() {
        let a = Array3::from_shape_vec((1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let r = rotate_map_180(&a).unwrap();
        let expected =
            Array3::from_shape_vec((1, 3, 3), (1..=9).rev().map(f64::from).collect()).unwrap();
        assert_eq!(r, expected);
        let one = Array3::from_elem((4, 1, 1), 2.5);
        assert_eq!(rotate_map_180(&one).unwrap(), one);
        assert!(rotate_map_180(&Array3::<f64>::zeros((1, 2, 3))).is_err());
    }

    #[test]
    fn rotate_set_roundtrip() {
        let empty = AttentionMapSet::<f32>::new();
        assert!(rotate_set(&empty).is_empty());

        let mut set = AttentionMapSet::new();
        let map = Array3::from_shape_fn((2, 3, 3), |(s, j, k)| (s * 9 + j * 3 + k) as f32);
        set.insert(LayerId::new(BlockKind::Up, 1), map.clone()).unwrap();
        let rotated = rotate_set(&set);
        assert_eq!(rotated.len(), 1);
        assert_eq!(
            rotated.get(&LayerId::new(BlockKind::Up, 1)).unwrap(),
            &rotate_map_180(&map).unwrap()
        );
        assert_eq!(rotate_set(&rotated), set);
    }

    #[test]
    fn layer_order_follows_unet() {
        let mut ids = vec![
            LayerId::new(BlockKind::Up, 0),
            LayerId::new(BlockKind::Mid, 0),
            LayerId::new(BlockKind::Down, 1),
            LayerId::new(BlockKind::Down, 0),
        ];
        ids.sort();
        let names: Vec<_> = ids.iter().map(|l| l.to_string()).collect();
        assert_eq!(names, ["down.0", "down.1", "mid", "up.0"]);
    }

    fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
        let mut out = a.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        out
    }

    proptest! {
        #[test]
        fn flip_and_rotate_are_involutions(
            n in 1usize..7,
            sites in 1usize..4,
            seed in any::<u64>(),
        ) {
            let vals: Vec<f32> = (0..sites * n * n)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 * 0.37 - 100.0)
                .collect();
            let a = Array3::from_shape_vec((sites, n, n), vals).unwrap();
            prop_assert_eq!(&rotate_map_180(&rotate_map_180(&a).unwrap()).unwrap(), &a);
            prop_assert_eq!(&flip_time(&flip_time(&a, 1).unwrap(), 1).unwrap(), &a);
        }

        #[test]
        fn rotation_commutes_with_row_softmax(vals in proptest::collection::vec(-5.0f64..5.0, 25)) {
            let a = Array3::from_shape_vec((1, 5, 5), vals).unwrap();
            let lhs = softmax_rows(&rotate_map_180(&a).unwrap().index_axis(Axis(0), 0).to_owned());
            let sm = softmax_rows(&a.index_axis(Axis(0), 0).to_owned()).insert_axis(Axis(0));
            let rhs = rotate_map_180(&sm).unwrap().index_axis_move(Axis(0), 0);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn rotated_outer_product_is_flipped_features(
            q in proptest::collection::vec(-1.0f64..1.0, 12),
            k in proptest::collection::vec(-1.0f64..1.0, 12),
        ) {
            let q = Array2::from_shape_vec((4, 3), q).unwrap();
            let k = Array2::from_shape_vec((4, 3), k).unwrap();
            let a = q.dot(&k.t()).insert_axis(Axis(0));
            let fq = flip_time(&q, 0).unwrap();
            let fk = flip_time(&k, 0).unwrap();
            let b = fq.dot(&fk.t()).insert_axis(Axis(0));
            let r = rotate_map_180(&a).unwrap();
            for (x, y) in r.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
