//! Analytic floating-point operation counts (one multiply-add = 2 flops).

use crate::vit::BackboneConfig;

/// One block applied to `queries` rows attending `keys` keys, where
/// `projected` rows need fresh key/value projections.
fn layer(cfg: &BackboneConfig, queries: u64, keys: u64, projected: u64) -> u64 {
    let d = cfg.d_model as u64;
    let hidden = cfg.hidden() as u64;
    let qo = 2 * 2 * queries * d * d;
    let kv = 2 * 2 * projected * d * d;
    let attn = 2 * 2 * queries * keys * d;
    let mlp = 2 * 2 * queries * d * hidden;
    qo + kv + attn + mlp
}

/// Patch embedding plus `L` full self-attention blocks over `N + 1` tokens.
pub fn flops_backbone(cfg: &BackboneConfig) -> u64 {
    let t = cfg.seq_len() as u64;
    let embed = 2 * cfg.n_patches() as u64 * cfg.patch_dim() as u64 * cfg.d_model as u64;
    embed + cfg.n_layers as u64 * layer(cfg, t, t, t)
}

/// Two-phase composition of `k` single-token prompts with `d_mem` memory
/// tokens each: the backbone once, then per prompt and layer one query
/// over `N + 1 + 1 + d_mem` keys.
pub fn flops_composed(cfg: &BackboneConfig, k: usize, d_mem: usize) -> u64 {
    let t = cfg.seq_len() as u64;
    let m = d_mem as u64;
    let per_prompt = cfg.n_layers as u64 * layer(cfg, 1, t + 1 + m, 1 + m);
    flops_backbone(cfg) + k as u64 * per_prompt
}

/// Full self-attention over `N + 1 + k` tokens plus `k·d_mem` memory keys.
pub fn flops_naive(cfg: &BackboneConfig, k: usize, d_mem: usize) -> u64 {
    let t = cfg.seq_len() as u64;
    let (k, m) = (k as u64, d_mem as u64);
    let embed = 2 * cfg.n_patches() as u64 * cfg.patch_dim() as u64 * cfg.d_model as u64;
    let rows = t + k;
    embed + cfg.n_layers as u64 * layer(cfg, rows, rows + k * m, rows + k * m)
}

/// `k` separate models, each a backbone pass with one prompt.
pub fn flops_ensemble(cfg: &BackboneConfig, k: usize, d_mem: usize) -> u64 {
    k as u64 * flops_composed(cfg, 1, d_mem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_prompts_cost_the_backbone() {
        let cfg = BackboneConfig::default();
        assert_eq!(flops_composed(&cfg, 0, 5), flops_backbone(&cfg));
        assert_eq!(flops_naive(&cfg, 0, 5), flops_backbone(&cfg));
    }

    #[test]
    fn composed_increments_are_constant() {
        let cfg = BackboneConfig::default();
        let step = flops_composed(&cfg, 1, 5) - flops_composed(&cfg, 0, 5);
        for k in 1..=32 {
            assert_eq!(flops_composed(&cfg, k, 5) - flops_composed(&cfg, 0, 5), k as u64 * step);
        }
    }

    #[test]
    fn naive_increments_grow() {
        let cfg = BackboneConfig::default();
        let deltas: Vec<u64> = (0..32)
            .map(|k| flops_naive(&cfg, k + 1, 5) - flops_naive(&cfg, k, 5))
            .collect();
        assert!(deltas.windows(2).all(|w| w[1] > w[0]));
        assert!(flops_naive(&cfg, 32, 5) > flops_composed(&cfg, 32, 5));
        assert!(flops_ensemble(&cfg, 32, 5) > flops_composed(&cfg, 32, 5));
    }
}
