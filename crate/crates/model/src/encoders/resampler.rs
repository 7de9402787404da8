use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Attention, Dense, DenseSpec, Mlp, RmsNorm};
use crate::params::{Init, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResamplerConfig {
    pub dim: usize,
    pub mllm_dim: usize,
    /// Output length `l`; equals the backbone's style token count.
    pub num_queries: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Start with zero attention and feed-forward output projections, making
    /// the initial map return the queries unchanged.
    pub zero_init_outputs: bool,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            mllm_dim: 64,
            num_queries: 16,
            heads: 4,
            depth: 2,
            mlp_ratio: 2,
            zero_init_outputs: true,
        }
    }
}

impl ResamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.depth == 0 || self.mllm_dim == 0 {
            return Err(invalid("num_queries, depth and mllm_dim must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid("resampler dim must be divisible by heads"));
        }
        Ok(())
    }
}

struct ResamplerLayer {
    norm_q: RmsNorm,
    norm_kv: RmsNorm,
    attn: Attention,
    attn_out: Dense,
    norm_ff: RmsNorm,
    ff: Mlp,
}

/// Learned queries cross-attend over `[queries, mllm tokens]`:
/// `Q' = attn(norm Q, norm [Q, M]) + Q`, `O = ffn(Q') + Q'`. Keys carry no
/// positional encoding, so the output is invariant to token order.
pub struct Resampler {
    cfg: ResamplerConfig,
    queries: Tensor,
    mllm_in: Dense,
    layers: Vec<ResamplerLayer>,
}

impl Resampler {
    pub fn new(p: &Params, cfg: &ResamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let out_spec = if cfg.zero_init_outputs { DenseSpec::zeros() } else { DenseSpec::new() };
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = p.pp(format!("layer{i}"));
                Ok(ResamplerLayer {
                    norm_q: RmsNorm::new(&p.pp("norm_q"), d)?,
                    norm_kv: RmsNorm::new(&p.pp("norm_kv"), d)?,
                    attn: Attention::new(&p.pp("attn"), d, cfg.heads, (0, 1.0))?,
                    attn_out: Dense::new(&p.pp("attn_out"), d, d, out_spec)?,
                    norm_ff: RmsNorm::new(&p.pp("norm_ff"), d)?,
                    ff: Mlp::new(&p.pp("ff"), d, d * cfg.mlp_ratio, cfg.zero_init_outputs)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries: p.var("queries", &[cfg.num_queries, d], Init::Normal(1.0 / (d as f64).sqrt()))?,
            mllm_in: Dense::new(&p.pp("mllm_in"), cfg.mllm_dim, d, DenseSpec::new())?,
            layers,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ResamplerConfig {
        &self.cfg
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    /// `tokens (B, k, mllm_dim)` with an optional `(B, 1, 1, l + k)` additive
    /// key mask -> `(B, l, dim)`. `k` may be zero.
    pub fn forward(&self, tokens: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, k, dm) = tokens.dims3()?;
        if dm != self.cfg.mllm_dim {
            return Err(invalid(format!(
                "mllm token width {dm} does not match configured {}",
                self.cfg.mllm_dim
            )));
        }
        let (l, d) = (self.cfg.num_queries, self.cfg.dim);
        let mut q = self.queries.unsqueeze(0)?.broadcast_as((b, l, d))?.contiguous()?;
        let m = if k > 0 { Some(self.mllm_in.forward(tokens)?) } else { None };
        for layer in &self.layers {
            let kv = match &m {
                Some(m) => Tensor::cat(&[&q, m], 1)?,
                None => q.clone(),
            };
            let mask = if k > 0 { mask } else { None };
            let a = layer.attn.attend(
                &layer.norm_q.forward(&q)?,
                &layer.norm_kv.forward(&kv)?,
                None,
                None,
                mask,
            )?;
            let q1 = (layer.attn_out.forward(&a)? + &q)?;
            q = (layer.ff.forward(&layer.norm_ff.forward(&q1)?)? + &q1)?;
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::DType;

    fn cfg(zero: bool) -> ResamplerConfig {
        ResamplerConfig {
            dim: 8,
            mllm_dim: 6,
            num_queries: 3,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            zero_init_outputs: zero,
        }
    }

    fn tokens(k: usize, seed: u64) -> Tensor {
        ParamStore::new(seed, DType::F64).root().var("m", &[1, k, 6], Init::Normal(1.0)).unwrap()
    }

    #[test]
    fn fixed_output_length_for_any_input_length() {
        let s = ParamStore::new(0, DType::F64);
        let r = Resampler::new(&s.root(), &cfg(false)).unwrap();
        for k in [0, 1, 10, 1000] {
            assert_eq!(r.forward(&tokens(k, 1), None).unwrap().dims(), &[1, 3, 8]);
        }
        assert!(r.forward(&Tensor::zeros((1, 2, 5), DType::F64, &candle_core::Device::Cpu).unwrap(), None).is_err());
    }

    #[test]
    fn zero_outputs_return_the_queries() {
        let s = ParamStore::new(0, DType::F64);
        let r = Resampler::new(&s.root(), &cfg(true)).unwrap();
        let out = r.forward(&tokens(5, 2), None).unwrap().squeeze(0).unwrap();
        assert_eq!(out.to_vec2::<f64>().unwrap(), r.queries().to_vec2::<f64>().unwrap());
    }
}
