//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (on by default) work is spread over the rayon
//! pool; without it everything runs on the calling thread. Results always come
//! back in input order, so callers that reduce them in that order get
//! bit-identical floating point regardless of which path ran.

/// Defaults to `Parallel` when the feature is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
        }
    }

    /// Maps over fixed-size chunks. Chunk boundaries depend only on `chunk`,
    /// never on the thread count.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            Execution::Sequential => items.chunks(chunk).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_chunks(chunk).map(f).collect()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Execution::Sequential => "sequential",
            #[cfg(feature = "parallel")]
            Execution::Parallel => "parallel",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let out = Execution::default().map(&xs, |x| x * x);
        assert_eq!(out, xs.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_sums_match_sequential_bitwise() {
        let xs: Vec<f64> = (0..1003).map(|i| (i as f64).sin() * 1e-3 + 1.0 / (i as f64 + 1.0)).collect();
        let seq = Execution::Sequential.map_chunks(&xs, 7, |c| c.iter().sum::<f64>());
        let def = Execution::default().map_chunks(&xs, 7, |c| c.iter().sum::<f64>());
        assert_eq!(seq.len(), 144);
        let a: Vec<u64> = seq.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = def.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }
}
