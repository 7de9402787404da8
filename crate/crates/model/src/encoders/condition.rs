use candle_core::{DType, Device, Tensor};
use glyphdit_core::image::RgbImage;
use glyphdit_core::layout::BBox;
use glyphdit_core::rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Resampler;
use crate::error::{invalid, Result};
use crate::nn::{key_mask, l2_normalize};

/// Instruction sent alongside the background image. Placeholders are filled
/// in the fixed order caption, text, box.
pub const DEFAULT_CONDITION_TEMPLATE: &str = "Describe the typography that should render the target text.\n\
caption: {caption}\ntext: {text}\nbox: [{left}, {top}, {right}, {bottom}]";

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInput {
    pub background: RgbImage,
    pub caption: String,
    pub target_text: String,
    pub bbox: BBox,
}

impl ConditionInput {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.background.width() as i64, self.background.height() as i64);
        if !self.bbox.within(w, h) {
            return Err(invalid(format!("bbox {:?} outside {w}x{h} background", self.bbox.to_array())));
        }
        Ok(())
    }
}

pub fn render_condition_prompt(template: &str, input: &ConditionInput) -> String {
    let [l, t, r, b] = input.bbox.to_array();
    template
        .replace("{caption}", &input.caption)
        .replace("{text}", &input.target_text)
        .replace("{left}", &l.to_string())
        .replace("{top}", &t.to_string())
        .replace("{right}", &r.to_string())
        .replace("{bottom}", &b.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MllmRequest {
    pub image: RgbImage,
    pub prompt: String,
}

/// One layer of hidden states, `rows` tokens of width `cols`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStates {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl HiddenStates {
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(invalid(format!(
                "hidden state buffer holds {} values for {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("hidden states contain non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MllmResponse {
    /// Ordered from the first to the final layer.
    pub hidden_states: Vec<HiddenStates>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelect {
    #[default]
    Last,
    Index(usize),
}

impl MllmResponse {
    pub fn layer(&self, select: LayerSelect) -> Result<&HiddenStates> {
        let layer = match select {
            LayerSelect::Last => self.hidden_states.last(),
            LayerSelect::Index(i) => self.hidden_states.get(i),
        }
        .ok_or_else(|| invalid(format!("response has no layer {select:?}")))?;
        layer.validate()?;
        Ok(layer)
    }
}

/// Image plus instruction in, hidden-state token matrices out.
pub trait MllmClient: Send + Sync {
    fn name(&self) -> &str;
    fn hidden_dim(&self) -> usize;
    fn encode(&self, request: &MllmRequest) -> Result<MllmResponse>;
}

/// Deterministic stand-in: one token per cell of a coarse colour grid plus one
/// hashed token per whitespace-separated word. The last layer mixes in the
/// sequence mean so every token sees some context.
#[derive(Debug, Clone)]
pub struct StubMllm {
    pub dim: usize,
    pub seed: u64,
    pub grid: usize,
}

impl StubMllm {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, grid: 2 }
    }

    fn word_vector(&self, word: &str) -> Vec<f32> {
        let mut r = rng::derived(self.seed, rng::hash_bytes(word.as_bytes()));
        (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    fn colour_tokens(&self, image: &RgbImage) -> Vec<Vec<f32>> {
        let mut r = rng::derived(self.seed, 0xC0_10_0E);
        let proj: Vec<f32> = (0..self.dim * 4).map(|_| StandardNormal.sample(&mut r)).collect();
        let (w, h) = (image.width(), image.height());
        let g = self.grid.max(1);
        let mut out = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                let (x0, x1) = (gx * w / g, ((gx + 1) * w / g).max(gx * w / g + 1).min(w));
                let (y0, y1) = (gy * h / g, ((gy + 1) * h / g).max(gy * h / g + 1).min(h));
                let mut mean = [0.0f32; 3];
                let mut n = 0.0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.pixel(x, y);
                        for c in 0..3 {
                            mean[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
                let feat = [mean[0] / n.max(1.0), mean[1] / n.max(1.0), mean[2] / n.max(1.0), 1.0];
                out.push(
                    (0..self.dim)
                        .map(|i| (0..4).map(|j| proj[i * 4 + j] * feat[j]).sum::<f32>().tanh())
                        .collect(),
                );
            }
        }
        out
    }
}

impl MllmClient for StubMllm {
    fn name(&self) -> &str {
        "stub"
    }

    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, request: &MllmRequest) -> Result<MllmResponse> {
        if request.image.width() == 0 || request.image.height() == 0 {
            return Err(invalid("empty image"));
        }
        let mut tokens = self.colour_tokens(&request.image);
        tokens.extend(request.prompt.split_whitespace().map(|w| self.word_vector(w)));
        let rows = tokens.len();
        let mut mean = vec![0.0f32; self.dim];
        for t in &tokens {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v / rows as f32;
            }
        }
        let first: Vec<f32> = tokens.iter().flatten().copied().collect();
        let last: Vec<f32> = tokens
            .iter()
            .flat_map(|t| t.iter().zip(&mean).map(|(v, m)| (v + 0.5 * m).tanh()))
            .collect();
        Ok(MllmResponse {
            hidden_states: vec![
                HiddenStates {
                    rows,
                    cols: self.dim,
                    data: first,
                },
                HiddenStates {
                    rows,
                    cols: self.dim,
                    data: last,
                },
            ],
        })
    }
}

/// Pad hidden-state matrices into `(B, k_max, dm)` with the matching additive
/// key mask for a resampler of `num_queries` queries.
pub fn mllm_token_batch(
    states: &[&HiddenStates],
    num_queries: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Option<Tensor>)> {
    let first = states.first().ok_or_else(|| invalid("empty token batch"))?;
    let dm = first.cols;
    if states.iter().any(|s| s.cols != dm) {
        return Err(invalid("hidden states of different widths in one batch"));
    }
    let kmax = states.iter().map(|s| s.rows).max().unwrap_or(0);
    let mut data = Vec::with_capacity(states.len() * kmax * dm);
    let mut keep = Vec::with_capacity(states.len());
    for s in states {
        s.validate()?;
        data.extend_from_slice(&s.data);
        data.extend(std::iter::repeat_n(0.0f32, (kmax - s.rows) * dm));
        let mut row = vec![true; num_queries];
        row.extend((0..kmax).map(|i| i < s.rows));
        keep.push(row);
    }
    let tokens = Tensor::from_vec(data, (states.len(), kmax, dm), device)?.to_dtype(dtype)?;
    let ragged = states.iter().any(|s| s.rows != kmax);
    let mask = if ragged { Some(key_mask(&keep, dtype, device)?) } else { None };
    Ok((tokens, mask))
}

/// Query the client, resample its selected layer and project onto the unit
/// sphere. The result has the style embedding's `(1, q, d)` shape.
pub fn encode_condition(
    input: &ConditionInput,
    client: &dyn MllmClient,
    resampler: &Resampler,
    template: &str,
    layer: LayerSelect,
    dtype: DType,
) -> Result<Tensor> {
    input.validate()?;
    let request = MllmRequest {
        image: input.background.clone(),
        prompt: render_condition_prompt(template, input),
    };
    let response = client.encode(&request)?;
    let states = response.layer(layer)?;
    let (tokens, mask) = mllm_token_batch(&[states], resampler.config().num_queries, dtype, &Device::Cpu)?;
    l2_normalize(&resampler.forward(&tokens, mask.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ResamplerConfig;
    use crate::params::ParamStore;

    fn input(caption: &str) -> ConditionInput {
        ConditionInput {
            background: RgbImage::filled(16, 16, [0.2, 0.4, 0.6]),
            caption: caption.into(),
            target_text: "Ab".into(),
            bbox: BBox::new(2, 2, 10, 8).unwrap(),
        }
    }

    fn resampler(store: &ParamStore) -> Resampler {
        let cfg = ResamplerConfig {
            dim: 8,
            mllm_dim: 6,
            num_queries: 4,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            zero_init_outputs: false,
        };
        Resampler::new(&store.root(), &cfg).unwrap()
    }

    #[test]
    fn prompt_fields_follow_template_order() {
        let p = render_condition_prompt(DEFAULT_CONDITION_TEMPLATE, &input("red poster"));
        let (c, t, b) = (p.find("red poster").unwrap(), p.find("text: Ab").unwrap(), p.find("[2, 2, 10, 8]").unwrap());
        assert!(c < t && t < b);
    }

    #[test]
    fn stub_embedding_is_deterministic_and_input_hashed() {
        let s = ParamStore::new(0, DType::F64);
        let r = resampler(&s);
        let client = StubMllm::new(6, 1);
        let enc = |cap: &str| {
            encode_condition(&input(cap), &client, &r, DEFAULT_CONDITION_TEMPLATE, LayerSelect::Last, DType::F64)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
        };
        let a = enc("a red poster");
        assert_eq!(a.len(), 4 * 8);
        assert_eq!(a, enc("a red poster"));
        assert_ne!(a, enc("a blue poster"));
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let mut i = input("x");
        i.bbox = BBox::new(0, 0, 40, 4).unwrap();
        let s = ParamStore::new(0, DType::F64);
        let r = resampler(&s);
        assert!(encode_condition(&i, &StubMllm::new(6, 0), &r, DEFAULT_CONDITION_TEMPLATE, LayerSelect::Last, DType::F64).is_err());
    }

    #[test]
    fn padded_batch_matches_unpadded_rows() {
        let s = ParamStore::new(0, DType::F64);
        let r = resampler(&s);
        let client = StubMllm::new(6, 3);
        let req = |p: &str| client.encode(&MllmRequest { image: RgbImage::filled(4, 4, [0.5; 3]), prompt: p.into() }).unwrap();
        let (a, b) = (req("one"), req("one two three"));
        let (la, lb) = (a.layer(LayerSelect::Last).unwrap(), b.layer(LayerSelect::Last).unwrap());
        let (tok, mask) = mllm_token_batch(&[la, lb], 4, DType::F64, &Device::Cpu).unwrap();
        let batched = r.forward(&tok, mask.as_ref()).unwrap();
        let (solo, _) = mllm_token_batch(&[la], 4, DType::F64, &Device::Cpu).unwrap();
        let single = r.forward(&solo, None).unwrap();
        let d = (batched.get(0).unwrap() - single.get(0).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-9);
    }
}
