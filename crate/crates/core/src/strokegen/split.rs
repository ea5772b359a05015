use crate::error::{Result, SaeError};

/// Class indices into the (label-sorted) spec list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    /// Held-out classes used for validation and zero-shot testing.
    pub test: Vec<usize>,
    /// Classes in neither split (between the seen prefix and the held-out tail).
    pub unused: Vec<usize>,
}

/// Held-out tail size: 1000 of 3755 classes at full scale, the same
/// proportion (rounded down) for smaller sets.
pub fn default_test_count(total: usize) -> usize {
    (total * 1000 / 3755).clamp(1, 1000)
}

/// First `n_seen` classes train; the last [`default_test_count`] are held out.
pub fn split_classes(total: usize, n_seen: usize) -> Result<DatasetSplit> {
    let n_test = default_test_count(total);
    if n_seen == 0 || n_seen + n_test > total {
        return Err(SaeError::Config(format!(
            "n_seen = {n_seen} must be in 1..={} for {total} classes ({n_test} held out)",
            total.saturating_sub(n_test)
        )));
    }
    Ok(DatasetSplit {
        train: (0..n_seen).collect(),
        unused: (n_seen..total - n_test).collect(),
        test: (total - n_test..total).collect(),
    })
}
