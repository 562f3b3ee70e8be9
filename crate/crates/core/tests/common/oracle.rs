//! Straightforward reference forward pass: explicit loops, an additive
//! `-1e9` mask and no key/value reuse.

use alacarte_core::{BackboneParams, SourcePromptSet, Tensor};

type Rows = Vec<Vec<f64>>;

pub struct OracleOut {
    pub z: Rows,
    pub prompts: Vec<Rows>,
}

fn linear(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| {
            let mut acc = b.data()[o];
            for i in 0..inp {
                acc += w.data()[o * inp + i] * x[i];
            }
            acc
        })
        .collect()
}

fn layernorm(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i])
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn patch_rows(bb: &BackboneParams<f64>, image: &[u8]) -> Rows {
    let c = bb.config();
    let (s, p, ch) = (c.image_size, c.patch_size, c.channels);
    let mut rows = Vec::new();
    for gy in 0..s / p {
        for gx in 0..s / p {
            let mut r = Vec::new();
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    for k in 0..ch {
                        r.push(image[(y * s + x) * ch + k] as f64 / 127.5 - 1.0);
                    }
                }
            }
            rows.push(r);
        }
    }
    rows
}

/// `structured = false` lets every query attend every key.
pub fn oracle_forward(
    bb: &BackboneParams<f64>,
    image: &[u8],
    prompts: &[&SourcePromptSet<f64>],
    structured: bool,
) -> OracleOut {
    let cfg = bb.config();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let zero_b = Tensor::<f64>::zeros(&[d]);

    let mut x: Rows = Vec::new();
    let cls: Vec<f64> = (0..d)
        .map(|j| bb.class_token().data()[j] + bb.pos().row(0)[j])
        .collect();
    x.push(cls);
    for (n, patch) in patch_rows(bb, image).iter().enumerate() {
        let e = linear(bb.patch_embed(), &zero_b, patch);
        x.push(e.iter().zip(bb.pos().row(n + 1)).map(|(a, b)| a + b).collect());
    }
    let n_z = x.len();
    // owner of each query row: None for input tokens
    let mut owner: Vec<Option<usize>> = vec![None; n_z];
    for (i, p) in prompts.iter().enumerate() {
        for r in 0..p.prompt.shape()[0] {
            x.push(p.prompt.row(r).to_vec());
            owner.push(Some(i));
        }
    }

    for (l, b) in bb.blocks().iter().enumerate() {
        let mut mem: Rows = Vec::new();
        let mut mem_owner = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            if let Some(m) = p.memory_at(l) {
                for r in 0..m.shape()[0] {
                    mem.push(m.row(r).to_vec());
                    mem_owner.push(i);
                }
            }
        }
        let h: Rows = x.iter().map(|r| layernorm(r, &b.ln1_g, &b.ln1_b)).collect();
        let hm: Rows = mem.iter().map(|r| layernorm(r, &b.ln1_g, &b.ln1_b)).collect();
        let kv_in: Rows = h.iter().chain(hm.iter()).cloned().collect();
        let q: Rows = h.iter().map(|r| linear(&b.wq, &b.bq, r)).collect();
        let k: Rows = kv_in.iter().map(|r| linear(&b.wk, &b.bk, r)).collect();
        let v: Rows = kv_in.iter().map(|r| linear(&b.wv, &b.bv, r)).collect();
        let allowed = |qi: usize, kj: usize| -> bool {
            if !structured || kj < n_z {
                return true;
            }
            match owner[qi] {
                None => false,
                Some(i) if kj < x.len() => owner[kj] == Some(i),
                Some(i) => mem_owner[kj - x.len()] == i,
            }
        };
        let mut next = Vec::with_capacity(x.len());
        for qi in 0..x.len() {
            let mut attn = vec![0.0; d];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..k.len())
                    .map(|kj| {
                        let s: f64 = cols.clone().map(|c| q[qi][c] * k[kj][c]).sum::<f64>() / (dh as f64).sqrt();
                        if allowed(qi, kj) {
                            s
                        } else {
                            s - 1e9
                        }
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = e.iter().sum();
                for c in cols {
                    attn[c] = (0..k.len()).map(|kj| e[kj] / total * v[kj][c]).sum();
                }
            }
            let proj = linear(&b.wo, &b.bo, &attn);
            let mid: Vec<f64> = x[qi].iter().zip(&proj).map(|(a, b)| a + b).collect();
            let h2 = layernorm(&mid, &b.ln2_g, &b.ln2_b);
            let hidden: Vec<f64> = linear(&b.w1, &b.b1, &h2).into_iter().map(gelu).collect();
            let out = linear(&b.w2, &b.b2, &hidden);
            next.push(mid.iter().zip(&out).map(|(a, b)| a + b).collect());
        }
        x = next;
    }

    let (g, bn) = bb.final_norm_params();
    let x: Rows = x.iter().map(|r| layernorm(r, g, bn)).collect();
    let mut prompts_out = Vec::new();
    let mut at = n_z;
    for p in prompts {
        let n = p.prompt.shape()[0];
        prompts_out.push(x[at..at + n].to_vec());
        at += n;
    }
    OracleOut {
        z: x[..n_z].to_vec(),
        prompts: prompts_out,
    }
}

/// Largest `|a - b| / max(|b|, floor)` over matching entries.
pub fn max_rel(a: &Tensor<f64>, b: &[Vec<f64>], floor: f64) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.numel(), flat.len(), "shape mismatch");
    a.data()
        .iter()
        .zip(&flat)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}
