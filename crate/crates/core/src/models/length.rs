use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Source length → predicted target length, with lookup accounting.
#[derive(Debug, Default)]
pub struct LengthTable {
    map: BTreeMap<usize, usize>,
    lookups: AtomicUsize,
    fallbacks: AtomicUsize,
}

impl Clone for LengthTable {
    fn clone(&self) -> Self {
        LengthTable {
            map: self.map.clone(),
            lookups: AtomicUsize::new(self.lookups()),
            fallbacks: AtomicUsize::new(self.fallbacks()),
        }
    }
}

impl PartialEq for LengthTable {
    fn eq(&self, other: &Self) -> bool {
        self.map == other.map
    }
}

impl LengthTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a table from explicit entries; zero values are raised to 1.
    pub fn from_entries(entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut t = Self::new();
        for (k, v) in entries {
            t.insert(k, v);
        }
        t
    }

    pub fn insert(&mut self, src_len: usize, tgt_len: usize) {
        self.map.insert(src_len, tgt_len.max(1));
    }

    pub fn get(&self, src_len: usize) -> Option<usize> {
        self.map.get(&src_len).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.map.iter().map(|(&k, &v)| (k, v))
    }

    /// Number of [`predict`](Self::predict) calls so far.
    pub fn lookups(&self) -> usize {
        self.lookups.load(Ordering::Relaxed)
    }

    /// Lookups whose source length was not a key.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.lookups.store(0, Ordering::Relaxed);
        self.fallbacks.store(0, Ordering::Relaxed);
    }

    /// The stored length for `src_len`, else the value at the nearest key
    /// (ties go to the smaller key), else `src_len` itself.
    pub fn predict(&self, src_len: usize) -> usize {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        if let Some(&v) = self.map.get(&src_len) {
            return v;
        }
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
        let below = self.map.range(..src_len).next_back();
        let above = self.map.range(src_len..).next();
        match (below, above) {
            (Some((&kb, &vb)), Some((&ka, &va))) => {
                if src_len - kb <= ka - src_len {
                    vb
                } else {
                    va
                }
            }
            (Some((_, &v)), None) | (None, Some((_, &v))) => v,
            (None, None) => src_len.max(1),
        }
    }
}

/// Free-function form of [`LengthTable::predict`].
pub fn predict_length(src_len: usize, table: &LengthTable) -> usize {
    table.predict(src_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn present_key_returns_stored_length() {
        let t = LengthTable::from_entries([(3, 4)]);
        assert_eq!(predict_length(3, &t), 4);
        assert_eq!((t.lookups(), t.fallbacks()), (1, 0));
    }

    #[test]
    fn empty_table_falls_back_to_source_length() {
        let t = LengthTable::new();
        assert_eq!(predict_length(6, &t), 6);
        assert_eq!(t.fallbacks(), 1);
    }

    #[test]
    fn nearest_key_wins() {
        let t = LengthTable::from_entries([(3, 4), (10, 12)]);
        assert_eq!(predict_length(5, &t), 4);
        assert_eq!(predict_length(8, &t), 12);
        assert_eq!(predict_length(20, &t), 12);
    }

    #[test]
    fn equidistant_keys_prefer_the_smaller() {
        let t = LengthTable::from_entries([(2, 3), (6, 9)]);
        assert_eq!(predict_length(4, &t), 3);
    }
}
