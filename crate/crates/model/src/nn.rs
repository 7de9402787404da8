//! Layer primitives shared by the backbone, encoders and resampler.

use candle_core::{DType, Tensor, D};

use crate::error::{invalid, Result};
use crate::params::{Init, Params};
use crate::rope::RopeTable;

pub const NORM_EPS: f64 = 1e-6;

/// Low-rank update `scale * B A` added to a frozen dense weight.
#[derive(Clone)]
pub struct Lora {
    a: Tensor,
    b: Tensor,
    scale: f64,
}

/// Affine map over the last axis, optionally carrying a low-rank adapter.
#[derive(Clone)]
pub struct Dense {
    w: Tensor,
    b: Option<Tensor>,
    lora: Option<Lora>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseSpec {
    pub weight: WeightInit,
    pub bias: Option<Init>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// std 1/sqrt(fan_in)
    Fan,
    Zeros,
}

impl DenseSpec {
    pub fn new() -> Self {
        Self {
            weight: WeightInit::Fan,
            bias: Some(Init::Zeros),
            lora_rank: 0,
            lora_alpha: 1.0,
        }
    }

    pub fn zeros() -> Self {
        Self {
            weight: WeightInit::Zeros,
            ..Self::new()
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn bias(mut self, init: Init) -> Self {
        self.bias = Some(init);
        self
    }

    pub fn lora(mut self, rank: usize, alpha: f64) -> Self {
        self.lora_rank = rank;
        self.lora_alpha = alpha;
        self
    }
}

impl Default for DenseSpec {
    fn default() -> Self {
        Self::new()
    }
}

impl Dense {
    pub fn new(p: &Params, fan_in: usize, fan_out: usize, spec: DenseSpec) -> Result<Self> {
        let w_init = match spec.weight {
            WeightInit::Fan => Init::Fan { fan_in, gain: 1.0 },
            WeightInit::Zeros => Init::Zeros,
        };
        let w = p.var("weight", &[fan_out, fan_in], w_init)?;
        let b = match spec.bias {
            Some(init) => Some(p.var("bias", &[fan_out], init)?),
            None => None,
        };
        let lora = if spec.lora_rank > 0 {
            let r = spec.lora_rank;
            Some(Lora {
                a: p.var("lora_a", &[r, fan_in], Init::Fan { fan_in, gain: 1.0 })?,
                b: p.var("lora_b", &[fan_out, r], Init::Zeros)?,
                scale: spec.lora_alpha / r as f64,
            })
        } else {
            None
        };
        Ok(Self { w, b, lora })
    }

    pub fn fan_in(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| invalid("dense input must have rank >= 1"))?;
        if last != self.fan_in() {
            return Err(invalid(format!(
                "dense input width {last} does not match fan-in {}",
                self.fan_in()
            )));
        }
        let rows = x.elem_count() / last.max(1);
        let x2 = x.reshape((rows, last))?;
        let mut y = x2.matmul(&self.w.t()?)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b)?;
        }
        if let Some(l) = &self.lora {
            let delta = x2.matmul(&l.a.t()?)?.matmul(&l.b.t()?)?;
            y = (y + (delta * l.scale)?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank checked") = self.fan_out();
        Ok(y.reshape(out_dims)?)
    }
}

/// `x / sqrt(mean(x^2) + eps)` over the last axis.
pub fn rms_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

/// Unit 2-norm over the last axis. The tiny additive guard keeps the map
/// differentiable at zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let ss = x.sqr()?.sum_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ss + 1e-12)?.sqrt()?)?)
}

#[derive(Clone)]
pub struct RmsNorm {
    weight: Tensor,
}

impl RmsNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", &[dim], Init::Ones)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(rms_normalize(x, NORM_EPS)?.broadcast_mul(&self.weight)?)
    }
}

/// `x * (1 + scale) + shift` with per-sample `(B, d)` modulation over `(B, L, d)` tokens.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let scale = (scale.unsqueeze(1)? + 1.0)?;
    Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift.unsqueeze(1)?)?)
}

/// Scaled dot-product attention over `(B, H, L, hd)` tensors. `mask` is an
/// additive bias broadcastable to `(B, H, Lq, Lk)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let hd = q.dim(D::Minus1)?;
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let p = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(p.matmul(&v.contiguous()?)?)
}

/// Additive key mask `(B, 1, 1, K)` from a `B x K` keep table.
pub fn key_mask(keep: &[Vec<bool>], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let b = keep.len();
    let k = keep.first().map_or(0, Vec::len);
    if keep.iter().any(|r| r.len() != k) {
        return Err(invalid("ragged key mask"));
    }
    let values: Vec<f64> = keep
        .iter()
        .flatten()
        .map(|&keep| if keep { 0.0 } else { -1e9 })
        .collect();
    Ok(Tensor::from_vec(values, (b, 1, 1, k), device)?.to_dtype(dtype)?)
}

/// Multi-head projections with RMS-normalized queries and keys.
#[derive(Clone)]
pub struct Attention {
    heads: usize,
    q: Dense,
    k: Dense,
    v: Dense,
    q_norm: RmsNorm,
    k_norm: RmsNorm,
}

impl Attention {
    pub fn new(p: &Params, dim: usize, heads: usize, lora: (usize, f64)) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid(format!("dim {dim} not divisible by heads {heads}")));
        }
        let spec = DenseSpec::new().lora(lora.0, lora.1);
        let hd = dim / heads;
        Ok(Self {
            heads,
            q: Dense::new(&p.pp("q"), dim, dim, spec)?,
            k: Dense::new(&p.pp("k"), dim, dim, spec)?,
            v: Dense::new(&p.pp("v"), dim, dim, spec)?,
            q_norm: RmsNorm::new(&p.pp("q_norm"), hd)?,
            k_norm: RmsNorm::new(&p.pp("k_norm"), hd)?,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?)
    }

    /// Attend `xq (B, Lq, d)` over `xkv (B, Lk, d)`; returns merged heads `(B, Lq, d)`
    /// before any output projection.
    pub fn attend(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        rope_q: Option<&RopeTable>,
        rope_k: Option<&RopeTable>,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, lq, d) = xq.dims3()?;
        let mut q = self.q_norm.forward(&self.split(&self.q.forward(xq)?)?)?;
        let mut k = self.k_norm.forward(&self.split(&self.k.forward(xkv)?)?)?;
        let v = self.split(&self.v.forward(xkv)?)?;
        if let Some(r) = rope_q {
            q = r.apply(&q)?;
        }
        if let Some(r) = rope_k {
            k = r.apply(&k)?;
        }
        let o = attention(&q, &k, &v, mask)?;
        Ok(o.transpose(1, 2)?.reshape((b, lq, d))?)
    }
}

#[derive(Clone)]
pub struct Mlp {
    fc1: Dense,
    fc2: Dense,
}

impl Mlp {
    pub fn new(p: &Params, dim: usize, hidden: usize, zero_out: bool) -> Result<Self> {
        let out_spec = if zero_out { DenseSpec::zeros() } else { DenseSpec::new() };
        Ok(Self {
            fc1: Dense::new(&p.pp("fc1"), dim, hidden, DenseSpec::new())?,
            fc2: Dense::new(&p.pp("fc2"), hidden, dim, out_spec)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Pre-norm transformer block used by the encoders and projectors.
#[derive(Clone)]
pub struct EncoderBlock {
    norm1: RmsNorm,
    attn: Attention,
    out: Dense,
    norm2: RmsNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(p: &Params, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: RmsNorm::new(&p.pp("norm1"), dim)?,
            attn: Attention::new(&p.pp("attn"), dim, heads, (0, 1.0))?,
            out: Dense::new(&p.pp("attn_out"), dim, dim, DenseSpec::new())?,
            norm2: RmsNorm::new(&p.pp("norm2"), dim)?,
            mlp: Mlp::new(&p.pp("mlp"), dim, dim * mlp_ratio, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.out.forward(&self.attn.attend(&h, &h, None, None, None)?)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Geometry of a square-kernel convolution over `(B, C, H, W)`.
#[derive(Debug, Clone, Copy)]
struct PatchGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    /// Append a row of ones per sample so a bias column folds into the product.
    ones: bool,
}

impl PatchGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k + usize::from(self.ones)
    }

    /// Output columns `ox` whose source column `ox * stride + kx - pad` lies in the image.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Call `f(dst_row, src_row, start)` for every output row segment: the
    /// columns `cols` of patch row `dst_row` read source row `src_row`
    /// starting at column `start`, stepping by `stride`.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, std::ops::Range<usize>)) {
        let PatchGeom { b, c, h, w, k, pad, stride, ho, wo, .. } = *self;
        let rows = self.rows();
        for bi in 0..b {
            for ci in 0..c {
                let src_base = (bi * c + ci) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let cols = self.valid_cols(kx);
                        if cols.is_empty() {
                            continue;
                        }
                        let start = cols.start * stride + kx - pad;
                        let row = (bi * rows + (ci * k + ky) * k + kx) * ho * wo;
                        for oy in 0..ho {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            if y >= 0 && y < h as isize {
                                f(row + oy * wo, src_base + y as usize * w, start, cols.clone());
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Copy + Default + From<u8>>(&self, src: &[T]) -> Vec<T> {
        let n = self.ho * self.wo;
        let mut out = vec![T::default(); self.b * self.rows() * n];
        let s = self.stride;
        self.for_each_row(|dst, srow, start, cols| {
            let d = &mut out[dst + cols.start..dst + cols.end];
            let len = d.len();
            if s == 1 {
                d.copy_from_slice(&src[srow + start..srow + start + len]);
            } else {
                let sr = &src[srow + start..srow + start + (len - 1) * s + 1];
                for (o, v) in d.iter_mut().zip(sr.iter().step_by(s)) {
                    *o = *v;
                }
            }
        });
        if self.ones {
            for bi in 0..self.b {
                let row = (bi * self.rows() + self.rows() - 1) * n;
                out[row..row + n].fill(T::from(1));
            }
        }
        out
    }

    fn col2im<T: Copy + Default + std::ops::AddAssign>(&self, cols_in: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.b * self.c * self.h * self.w];
        let s = self.stride;
        self.for_each_row(|dst, srow, start, cols| {
            let d = &cols_in[dst + cols.start..dst + cols.end];
            let len = d.len();
            if s == 1 {
                for (o, v) in out[srow + start..srow + start + len].iter_mut().zip(d) {
                    *o += *v;
                }
            } else {
                let sr = &mut out[srow + start..srow + start + (len - 1) * s + 1];
                for (o, v) in sr.iter_mut().step_by(s).zip(d) {
                    *o += *v;
                }
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("patch op needs a contiguous input".into())),
    }
}

/// `(B, C, H, W)` -> `(B, C k k, Ho Wo)` patch matrix.
struct Im2Col(PatchGeom);

/// Adjoint of [`Im2Col`]: scatter-add columns back onto the image.
struct Col2Im(PatchGeom);

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let g = self.0;
        let out = match storage {
            S::F32(v) => {
                S::F32(g.im2col(contiguous_slice(v, layout)?))
            }
            S::F64(v) => {
                S::F64(g.im2col(contiguous_slice(v, layout)?))
            }
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, (g.b, g.rows(), g.ho * g.wo).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let g = self.0;
        let out = match storage {
            S::F32(v) => {
                S::F32(g.col2im(contiguous_slice(v, layout)?))
            }
            S::F64(v) => {
                S::F64(g.col2im(contiguous_slice(v, layout)?))
            }
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, (g.b, g.c, g.h, g.w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution as patch extraction plus one batched matrix product.
/// `x (B, C, H, W)`, `w (O, C, k, k)`, optional `bias (O)`, zero padding
/// `pad` on every side. Matches a direct convolution; the backward pass is a
/// scatter-add and two matrix products, much faster on CPU than the generic
/// transposed convolution.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, wc, k, k2) = w.dims4()?;
    if wc != c || k != k2 || stride == 0 {
        return Err(invalid(format!("conv2d: input {:?} does not fit weight {:?}", x.dims(), w.dims())));
    }
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    if hp < k || wp < k {
        return Err(invalid("conv2d: kernel larger than padded input"));
    }
    let geom = PatchGeom {
        b,
        c,
        h,
        w: wd,
        k,
        pad,
        stride,
        ho: (hp - k) / stride + 1,
        wo: (wp - k) / stride + 1,
        ones: bias.is_some(),
    };
    let patches = x.contiguous()?.apply_op1(Im2Col(geom))?;
    let mut wm = w.reshape((o, c * k * k))?;
    if let Some(bias) = bias {
        wm = Tensor::cat(&[&wm, &bias.reshape((o, 1))?], 1)?;
    }
    let wm = wm.unsqueeze(0)?.broadcast_as((b, o, geom.rows()))?.contiguous()?;
    Ok(wm.matmul(&patches)?.reshape((b, o, geom.ho, geom.wo))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn dense_handles_any_leading_rank() {
        let s = ParamStore::new(0, DType::F64);
        let d = Dense::new(&s.root(), 3, 5, DenseSpec::new()).unwrap();
        let x = Tensor::ones((2, 4, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[2, 4, 5]);
        assert!(d.forward(&Tensor::ones((2, 4), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn zero_lora_leaves_output_unchanged() {
        let a = ParamStore::new(3, DType::F64);
        let b = ParamStore::new(3, DType::F64);
        let plain = Dense::new(&a.root(), 4, 4, DenseSpec::new()).unwrap();
        let adapted = Dense::new(&b.root(), 4, 4, DenseSpec::new().lora(2, 2.0)).unwrap();
        let x = Tensor::arange(0.0f64, 8.0, &Device::Cpu).unwrap().reshape((2, 4)).unwrap();
        let diff = (plain.forward(&x).unwrap() - adapted.forward(&x).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn l2_normalize_gives_unit_rows() {
        let x = Tensor::new(&[[3.0f64, 4.0], [0.0, 2.0]], &Device::Cpu).unwrap();
        let n = l2_normalize(&x).unwrap().sqr().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in n {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let dev = Device::Cpu;
        let q = Tensor::ones((1, 1, 1, 2), DType::F64, &dev).unwrap();
        let k = Tensor::new(&[[[[1.0f64, 0.0], [0.0, 1.0]]]], &dev).unwrap();
        let v = Tensor::new(&[[[[1.0f64, 0.0], [50.0, 50.0]]]], &dev).unwrap();
        let mask = key_mask(&[vec![true, false]], DType::F64, &dev).unwrap();
        let o = attention(&q, &k, &v, Some(&mask)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((o[0] - 1.0).abs() < 1e-9 && o[1].abs() < 1e-9);
    }

    #[test]
    fn patch_conv_matches_direct_conv() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &candle_core::Device::Cpu).unwrap();
        for (k, pad, stride) in [(3, 1, 1), (3, 1, 2), (1, 0, 1), (3, 0, 2), (5, 2, 1), (5, 2, 3)] {
            let w = Tensor::randn(0f64, 1.0, (4, 3, k, k), &candle_core::Device::Cpu).unwrap();
            let bias = Tensor::randn(0f64, 1.0, 4, &candle_core::Device::Cpu).unwrap();
            let a = conv2d(&x, &w, Some(&bias), pad, stride).unwrap();
            let b = x.conv2d(&w, pad, stride, 1, 1).unwrap().broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap()).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "k={k} pad={pad} stride={stride}: {d}");
        }
    }

    #[test]
    fn patch_conv_gradients_match_direct_conv() {
        let dev = candle_core::Device::Cpu;
        let x = candle_core::Var::randn(0f64, 1.0, (2, 3, 7, 7), &dev).unwrap();
        let w = candle_core::Var::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 4, 4), &dev).unwrap();
        let grads = |y: Tensor| {
            let g = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            (g.get(&x).unwrap().clone(), g.get(&w).unwrap().clone())
        };
        let (ax, aw) = grads(conv2d(&x, &w, None, 1, 2).unwrap());
        let (bx, bw) = grads(x.conv2d(&w, 1, 2, 1, 1).unwrap());
        for (a, b) in [(ax, bx), (aw, bw)] {
            let d = (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "{d}");
        }
    }
}

