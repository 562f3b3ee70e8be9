use crate::error::{Error, Result};

/// Boolean attention pattern, `queries × keys`; `true` means attend.
///
/// Rectangular masks are allowed: key-only tokens (memory) appear as
/// columns without a matching query row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    pub fn diagonal(n: usize) -> Self {
        let mut m = Self::empty(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// All-false mask; not valid until every row has an allowed key.
    pub fn empty(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![false; queries * keys],
        }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allowed.push(f(q, k));
            }
        }
        Self { queries, keys, allowed }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn set(&mut self, query: usize, key: usize, value: bool) {
        self.allowed[query * self.keys + key] = value;
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.keys..(query + 1) * self.keys]
    }

    /// Rows `start..end` as a new mask over the same keys.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        Self {
            queries: end - start,
            keys: self.keys,
            allowed: self.allowed[start * self.keys..end * self.keys].to_vec(),
        }
    }

    /// Indices of attended keys, per query row.
    pub fn allowed_keys(&self) -> Vec<Vec<usize>> {
        (0..self.queries)
            .map(|q| {
                self.row(q)
                    .iter()
                    .enumerate()
                    .filter_map(|(k, &a)| a.then_some(k))
                    .collect()
            })
            .collect()
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Every query row must attend at least one key.
    pub fn validate(&self) -> Result<()> {
        for q in 0..self.queries {
            if !self.row(q).iter().any(|&a| a) {
                return Err(Error::Mask(format!("query row {q} attends no key")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_masked_row_is_rejected() {
        let mut m = AttentionMask::full(2, 3);
        assert!(m.validate().is_ok());
        for k in 0..3 {
            m.set(1, k, false);
        }
        assert!(matches!(m.validate(), Err(Error::Mask(_))));
    }

    #[test]
    fn allowed_keys_lists_true_cells() {
        let m = AttentionMask::from_fn(2, 4, |q, k| (q + k) % 2 == 0);
        assert_eq!(m.allowed_keys(), vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(m.rows(1, 2).allowed_keys(), vec![vec![1, 3]]);
    }
}
