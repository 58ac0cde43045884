//! Data-parallel dispatch.
//!
//! Every batch operation in the crate goes through [`Parallelism`], which
//! either fans work out over the rayon pool or runs it on the calling thread.
//! Results are always returned in input order and reductions are performed
//! sequentially afterwards, so outputs never depend on the schedule or on
//! the number of worker threads.
//!
//! Without the `parallel` feature, rayon is not linked and both variants run
//! sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    Parallel,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    /// Map `f` over `items`, preserving order.
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Map `f` over `0..n`, preserving order.
    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Apply `f` to consecutive `chunk`-sized pieces of `data` with the chunk index.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Parallel => {
                use rayon::prelude::*;
                data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            }
            _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }
}

/// Derive an independent 64-bit seed from a root seed and a component name.
pub fn derive_seed(root: u64, component: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

/// Derive the seed for the `index`-th member of a family (tree, drive, ...).
pub fn derive_index_seed(root: u64, index: u64) -> u64 {
    splitmix64(root.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Parallelism::Sequential.map(&xs, |x| x * x);
        let b = Parallelism::Parallel.map(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[999], 999 * 999);
    }

    #[test]
    fn chunked_mutation_matches() {
        let mut a = vec![0usize; 100];
        let mut b = vec![0usize; 100];
        Parallelism::Sequential.for_each_chunk_mut(&mut a, 7, |i, c| c.iter_mut().for_each(|x| *x = i));
        Parallelism::Parallel.for_each_chunk_mut(&mut b, 7, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(a, b);
        assert_eq!(a[99], 14);
    }

    #[test]
    fn derived_seeds_differ_by_component() {
        assert_ne!(derive_seed(1, "sim"), derive_seed(1, "forest"));
        assert_eq!(derive_seed(7, "cnn"), derive_seed(7, "cnn"));
        assert_ne!(derive_index_seed(3, 0), derive_index_seed(3, 1));
    }
}
