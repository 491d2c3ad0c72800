//! Order-preserving map that runs on the rayon pool when `std` is enabled.

use alloc::vec::Vec;

use crate::error::Result;

pub fn try_par_map<I, O, F>(items: &[I], parallel: bool, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> Result<O> + Sync + Send,
{
    #[cfg(feature = "std")]
    if parallel {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let _ = parallel;
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
