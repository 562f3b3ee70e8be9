use std::collections::HashSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::vit::AttentionMask;

/// Attention pattern over `[z | p⁽¹⁾..p⁽ᵏ⁾ | m⁽¹⁾..m⁽ᵏ⁾]`.
///
/// Rows are the queries `z` and `p`; memory tokens only appear as key
/// columns. `z` rows attend `z` only, and the rows of prompt `i` attend
/// all of `z`, the tokens of prompt `i` and the memory of prompt `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedMask {
    pub mask: AttentionMask,
    pub n_z: usize,
    pub prompt_ids: Vec<String>,
    prompt_tokens: Vec<usize>,
    memory_tokens: Vec<usize>,
}

fn offsets(sizes: &[usize], start: usize) -> Vec<Range<usize>> {
    let mut at = start;
    sizes
        .iter()
        .map(|&n| {
            let r = at..at + n;
            at += n;
            r
        })
        .collect()
}

impl ComposedMask {
    /// General layout: prompt `i` owns `prompt_tokens[i]` query rows and
    /// `memory_tokens[i]` key-only columns.
    pub fn with_layout<T: AsRef<str>>(
        n_z: usize,
        prompt_ids: &[T],
        prompt_tokens: &[usize],
        memory_tokens: &[usize],
    ) -> Result<Self> {
        if prompt_ids.len() != prompt_tokens.len() || prompt_ids.len() != memory_tokens.len() {
            return Err(Error::Composition("prompt layout lengths disagree".into()));
        }
        if n_z == 0 {
            return Err(Error::Composition("composition needs at least one input token".into()));
        }
        let mut seen = HashSet::new();
        for id in prompt_ids {
            if !seen.insert(id.as_ref()) {
                return Err(Error::Composition(format!("duplicate prompt id `{}`", id.as_ref())));
            }
        }
        if let Some(i) = prompt_tokens.iter().position(|&n| n == 0) {
            return Err(Error::Composition(format!(
                "prompt `{}` has no tokens",
                prompt_ids[i].as_ref()
            )));
        }
        let n_p: usize = prompt_tokens.iter().sum();
        let n_m: usize = memory_tokens.iter().sum();
        let p_ranges = offsets(prompt_tokens, n_z);
        let m_ranges = offsets(memory_tokens, n_z + n_p);
        let owner: Vec<usize> = p_ranges
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.clone().map(move |_| i))
            .collect();
        let mask = AttentionMask::from_fn(n_z + n_p, n_z + n_p + n_m, |q, k| {
            if k < n_z {
                return true;
            }
            if q < n_z {
                return false;
            }
            let i = owner[q - n_z];
            p_ranges[i].contains(&k) || m_ranges[i].contains(&k)
        });
        Ok(Self {
            mask,
            n_z,
            prompt_ids: prompt_ids.iter().map(|s| s.as_ref().to_string()).collect(),
            prompt_tokens: prompt_tokens.to_vec(),
            memory_tokens: memory_tokens.to_vec(),
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.prompt_ids.len()
    }

    /// Query rows (and key columns) of prompt `i`.
    pub fn prompt_range(&self, i: usize) -> Range<usize> {
        offsets(&self.prompt_tokens, self.n_z)[i].clone()
    }

    /// Key columns of the memory of prompt `i`.
    pub fn memory_range(&self, i: usize) -> Range<usize> {
        let n_p: usize = self.prompt_tokens.iter().sum();
        offsets(&self.memory_tokens, self.n_z + n_p)[i].clone()
    }

    /// The prompt rows only: the cross-attention pattern of the second phase.
    pub fn prompt_rows(&self) -> AttentionMask {
        self.mask.rows(self.n_z, self.mask.queries())
    }

    /// Checks the three structural rules cell by cell.
    pub fn check_structure(&self) -> Result<()> {
        let m = &self.mask;
        for q in 0..m.queries() {
            for k in 0..m.keys() {
                let expect = if k < self.n_z {
                    true
                } else if q < self.n_z {
                    false
                } else {
                    (0..self.n_prompts())
                        .find(|&i| self.prompt_range(i).contains(&q))
                        .is_some_and(|i| self.prompt_range(i).contains(&k) || self.memory_range(i).contains(&k))
                };
                if m.get(q, k) != expect {
                    return Err(Error::Mask(format!(
                        "cell ({q}, {k}) is {} but should be {expect}",
                        m.get(q, k)
                    )));
                }
            }
        }
        m.validate()
    }
}

/// One prompt token and one memory column per prompt.
pub fn build_mask<T: AsRef<str>>(n_z: usize, prompt_ids: &[T]) -> Result<ComposedMask> {
    let ones = vec![1; prompt_ids.len()];
    ComposedMask::with_layout(n_z, prompt_ids, &ones, &ones)
}

/// Cross-attention pattern for prompt rows grouped over several cached
/// inputs: `[z₀ | z₁ | … | rows | memories]`.
///
/// `groups[r] = (input, prompt, tokens)` lists query groups in row order.
/// A group attends its input's `z`, its own rows and its prompt's memory.
pub(crate) fn cross_mask(
    n_z: usize,
    n_inputs: usize,
    groups: &[(usize, usize, usize)],
    memory: &[usize],
) -> AttentionMask {
    let z_cols = n_z * n_inputs;
    let rows: usize = groups.iter().map(|g| g.2).sum();
    let group_rows = offsets(&groups.iter().map(|g| g.2).collect::<Vec<_>>(), z_cols);
    let mem = offsets(memory, z_cols + rows);
    let owner: Vec<usize> = group_rows
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.clone().map(move |_| i))
        .collect();
    AttentionMask::from_fn(rows, z_cols + rows + memory.iter().sum::<usize>(), |q, k| {
        let gi = owner[q];
        let (input, prompt, _) = groups[gi];
        if k < z_cols {
            return k / n_z == input;
        }
        group_rows[gi].contains(&k) || mem[prompt].contains(&k)
    })
}
