//! Secure inference of a small public-weight CNN on image shares, ending in
//! a channel-wise spatial mean that serves as the image descriptor.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dealer::MaterialPlan;
use crate::error::{Error, Result};
use crate::numeric::Fx;
use crate::parallel;
use crate::party::Party;
use crate::protocols::{self, demand};

/// A `c × h × w` array, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<Fx>,
}

impl Tensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<Fx>) -> Result<Tensor> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> Fx {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out × in × kh × kw`, row-major.
    pub weight: Vec<Fx>,
    pub bias: Vec<Fx>,
}

impl Conv {
    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "kernel {}x{} on padded {hp}x{wp}",
                self.kh, self.kw
            )));
        }
        Ok(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    #[inline]
    fn wt(&self, o: usize, i: usize, ky: usize, kx: usize) -> Fx {
        self.weight[((o * self.in_ch + i) * self.kh + ky) * self.kw + kx]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Relu,
    MaxPool2,
}

/// How 2×2 max-pooling is evaluated on shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PoolMode {
    /// Two-stage comparison tournament.
    #[default]
    Tournament,
    /// One masked sort per block.
    Sort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublicModel {
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

/// Convolution on one party's share. `bias_scale` is 1 for plaintext use and
/// 1/2 on each server, so the two halves add up to the public bias.
pub fn conv_forward(x: &Tensor, layer: &Conv, bias_scale: Fx) -> Result<Tensor> {
    if x.c != layer.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} channels, got {}",
            layer.in_ch, x.c
        )));
    }
    let (oh, ow) = layer.out_dims(x.h, x.w)?;
    let planes = parallel::map_range(layer.out_ch, |o| {
        let mut plane = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = layer.bias[o] * bias_scale;
                for i in 0..layer.in_ch {
                    for ky in 0..layer.kh {
                        let y = (oy * layer.stride + ky) as isize - layer.pad as isize;
                        if y < 0 || y >= x.h as isize {
                            continue;
                        }
                        for kx in 0..layer.kw {
                            let xx = (ox * layer.stride + kx) as isize - layer.pad as isize;
                            if xx < 0 || xx >= x.w as isize {
                                continue;
                            }
                            acc += layer.wt(o, i, ky, kx) * x.at(i, y as usize, xx as usize);
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
        plane
    });
    Ok(Tensor {
        c: layer.out_ch,
        h: oh,
        w: ow,
        data: planes.concat(),
    })
}

/// The 2×2 blocks of `x` in output order.
pub fn pool_blocks(x: &Tensor) -> Result<Vec<[Fx; 4]>> {
    if x.h % 2 == 1 {
        return Err(Error::OddSpatialDim(x.h));
    }
    if x.w % 2 == 1 {
        return Err(Error::OddSpatialDim(x.w));
    }
    let mut out = Vec::with_capacity(x.c * x.h * x.w / 4);
    for c in 0..x.c {
        for y in (0..x.h).step_by(2) {
            for xx in (0..x.w).step_by(2) {
                out.push([
                    x.at(c, y, xx),
                    x.at(c, y, xx + 1),
                    x.at(c, y + 1, xx),
                    x.at(c, y + 1, xx + 1),
                ]);
            }
        }
    }
    Ok(out)
}

/// Channel-wise spatial mean. Local.
pub fn aggregate_avg(x: &Tensor) -> Vec<Fx> {
    let n = (x.h * x.w) as Fx;
    x.data
        .chunks(x.h * x.w)
        .map(|plane| plane.iter().sum::<Fx>() / n)
        .collect()
}

impl PublicModel {
    /// Shape after every layer, checking conformability.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut s = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            s = match l {
                Layer::Conv(c) => {
                    if c.in_ch != s.0 {
                        return Err(Error::ShapeMismatch(format!(
                            "conv expects {} channels, got {}",
                            c.in_ch, s.0
                        )));
                    }
                    if c.weight.len() != c.out_ch * c.in_ch * c.kh * c.kw || c.bias.len() != c.out_ch {
                        return Err(Error::ShapeMismatch("conv parameter count".into()));
                    }
                    let (h, w) = c.out_dims(s.1, s.2)?;
                    (c.out_ch, h, w)
                }
                Layer::Relu => s,
                Layer::MaxPool2 => {
                    if s.1 % 2 == 1 {
                        return Err(Error::OddSpatialDim(s.1));
                    }
                    if s.2 % 2 == 1 {
                        return Err(Error::OddSpatialDim(s.2));
                    }
                    (s.0, s.1 / 2, s.2 / 2)
                }
            };
            out.push(s);
        }
        Ok(out)
    }

    /// Descriptor width.
    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(|s| s.0).unwrap_or(self.input.0))
    }

    /// Shape errors, plus warnings for nonzero weights below `2^-5` in
    /// magnitude or anything beyond the admissible secret range.
    pub fn validate(&self, secret_bound: Fx) -> Result<Vec<String>> {
        self.shapes()?;
        let mut warn = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            if let Layer::Conv(c) = l {
                let small = c.weight.iter().filter(|w| **w != 0.0 && w.abs() < (-5f64).exp2()).count();
                if small > 0 {
                    warn.push(format!("layer {li}: {small} weights below 2^-5"));
                }
                let big = c.weight.iter().chain(&c.bias).filter(|w| w.abs() > secret_bound).count();
                if big > 0 {
                    warn.push(format!("layer {li}: {big} parameters outside the secret range"));
                }
            }
        }
        Ok(warn)
    }

    /// Rounds of one secure inference.
    pub fn rounds(&self, mode: PoolMode) -> u64 {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(_) => 0,
                Layer::Relu => 3,
                Layer::MaxPool2 => match mode {
                    PoolMode::Tournament => 6,
                    PoolMode::Sort => 2,
                },
            })
            .sum()
    }

    /// Material for `images` inferences batched together.
    pub fn demand(&self, plan: &mut MaterialPlan, images: usize, mode: PoolMode) -> Result<()> {
        let shapes = self.shapes()?;
        let mut prev = self.input;
        for (l, s) in self.layers.iter().zip(shapes) {
            match l {
                Layer::Relu => demand::relu(plan, images * s.0 * s.1 * s.2),
                Layer::MaxPool2 => {
                    let blocks = images * prev.0 * prev.1 * prev.2 / 4;
                    match mode {
                        PoolMode::Tournament => demand::maxpool4(plan, blocks),
                        PoolMode::Sort => demand::maxpool4_sort(plan, blocks),
                    }
                }
                Layer::Conv(_) => {}
            }
            prev = s;
        }
        Ok(())
    }

    /// The shipped toy extractor: conv(1→4) → ReLU → pool → conv(4→16) →
    /// ReLU → pool on a `side × side` grayscale input.
    ///
    /// Pixels on multiples of 1/8 give first-layer pre-activations of the
    /// form `1/64 + k/32`; integer second-layer weights give `1/128 + k/64`.
    /// Neither can fall within `2^-7` of zero.
    pub fn toy(seed: u64, side: usize) -> PublicModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let conv1 = Conv {
            out_ch: 4,
            in_ch: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            weight: (0..36).map(|_| rng.gen_range(-4i32..=4) as Fx / 4.0).collect(),
            bias: (0..4)
                .map(|_| rng.gen_range(-8i32..=8) as Fx / 32.0 + 1.0 / 64.0)
                .collect(),
        };
        let conv2 = Conv {
            out_ch: 16,
            in_ch: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            weight: (0..16 * 36)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if u < 0.3 {
                        -1.0
                    } else if u < 0.6 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            bias: (0..16)
                .map(|_| rng.gen_range(-16i32..=16) as Fx / 64.0 + 1.0 / 128.0)
                .collect(),
        };
        PublicModel {
            input: (1, side, side),
            layers: vec![
                Layer::Conv(conv1),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv(conv2),
                Layer::Relu,
                Layer::MaxPool2,
            ],
        }
    }

    /// Plaintext forward pass. Returns the descriptor and every
    /// intermediate tensor.
    pub fn forward_plain(&self, image: &Tensor) -> Result<(Vec<Fx>, Vec<Tensor>)> {
        let mut x = image.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            x = match l {
                Layer::Conv(c) => conv_forward(&x, c, 1.0)?,
                Layer::Relu => Tensor {
                    data: x.data.iter().map(|v| v.max(0.0)).collect(),
                    ..x
                },
                Layer::MaxPool2 => {
                    let blocks = pool_blocks(&x)?;
                    Tensor {
                        c: x.c,
                        h: x.h / 2,
                        w: x.w / 2,
                        data: blocks
                            .iter()
                            .map(|b| b.iter().copied().fold(Fx::NEG_INFINITY, Fx::max))
                            .collect(),
                    }
                }
            };
            trace.push(x.clone());
        }
        Ok((aggregate_avg(&x), trace))
    }

    pub fn save(&self, json_path: &Path, bin_path: &Path) -> Result<()> {
        let mut blob: Vec<Fx> = Vec::new();
        let mut layers = Vec::new();
        for l in &self.layers {
            layers.push(match l {
                Layer::Conv(c) => {
                    let off = blob.len();
                    blob.extend(&c.weight);
                    blob.extend(&c.bias);
                    LayerHeader::Conv {
                        out_ch: c.out_ch,
                        in_ch: c.in_ch,
                        kh: c.kh,
                        kw: c.kw,
                        stride: c.stride,
                        pad: c.pad,
                        offset: off,
                    }
                }
                Layer::Relu => LayerHeader::Relu,
                Layer::MaxPool2 => LayerHeader::MaxPool2,
            });
        }
        let header = ModelHeader {
            input: [self.input.0, self.input.1, self.input.2],
            weights: bin_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            layers,
        };
        std::fs::write(
            json_path,
            serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        std::fs::write(bin_path, crate::transport::encode_f64s(&blob))?;
        Ok(())
    }

    /// Load `model.json`; the weight blob is resolved next to it.
    pub fn load(json_path: &Path) -> Result<PublicModel> {
        let header: ModelHeader = serde_json::from_str(&std::fs::read_to_string(json_path)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bin = json_path.with_file_name(&header.weights);
        let blob = crate::transport::decode_f64s(&std::fs::read(bin)?)
            .map_err(|_| Error::Format("weight blob length".into()))?;
        let mut layers = Vec::new();
        for l in header.layers {
            layers.push(match l {
                LayerHeader::Conv {
                    out_ch,
                    in_ch,
                    kh,
                    kw,
                    stride,
                    pad,
                    offset,
                } => {
                    let nw = out_ch * in_ch * kh * kw;
                    let end = offset + nw + out_ch;
                    if end > blob.len() {
                        return Err(Error::Format("weight blob too short".into()));
                    }
                    Layer::Conv(Conv {
                        out_ch,
                        in_ch,
                        kh,
                        kw,
                        stride,
                        pad,
                        weight: blob[offset..offset + nw].to_vec(),
                        bias: blob[offset + nw..end].to_vec(),
                    })
                }
                LayerHeader::Relu => Layer::Relu,
                LayerHeader::MaxPool2 => Layer::MaxPool2,
            });
        }
        let m = PublicModel {
            input: (header.input[0], header.input[1], header.input[2]),
            layers,
        };
        m.shapes()?;
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    input: [usize; 3],
    weights: String,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerHeader {
    Conv {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        offset: usize,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
}

/// A value that a masked comparison cannot resolve reliably.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub layer: usize,
    pub index: usize,
    pub value: Fx,
}

/// Report ReLU inputs within `margin` of zero and pool comparisons whose
/// gap lies in `(0, margin]` (exact ties are harmless: both branches agree).
pub fn screen(model: &PublicModel, image: &Tensor, margin: Fx) -> Result<Vec<Violation>> {
    let (_, trace) = model.forward_plain(image)?;
    let mut out = Vec::new();
    let mut prev = image.clone();
    for (li, (l, t)) in model.layers.iter().zip(&trace).enumerate() {
        match l {
            Layer::Relu => {
                for (i, &v) in prev.data.iter().enumerate() {
                    if v.abs() <= margin {
                        out.push(Violation {
                            layer: li,
                            index: i,
                            value: v,
                        });
                    }
                }
            }
            Layer::MaxPool2 => {
                for (i, b) in pool_blocks(&prev)?.iter().enumerate() {
                    let m12 = b[0].max(b[1]);
                    let m34 = b[2].max(b[3]);
                    for g in [b[0] - b[1], b[2] - b[3], m12 - m34] {
                        if g != 0.0 && g.abs() <= margin {
                            out.push(Violation {
                                layer: li,
                                index: i,
                                value: g,
                            });
                        }
                    }
                }
            }
            Layer::Conv(_) => {}
        }
        prev = t.clone();
    }
    Ok(out)
}

/// Secure inference of `images` (this party's shares) in one batch: every
/// layer costs the same rounds as for a single image.
pub fn infer_batch(p: &mut Party, model: &PublicModel, images: &[Tensor], mode: PoolMode) -> Result<Vec<Vec<Fx>>> {
    model.shapes()?;
    let mut xs: Vec<Tensor> = images.to_vec();
    for l in &model.layers {
        match l {
            Layer::Conv(c) => {
                for x in xs.iter_mut() {
                    *x = conv_forward(x, c, 0.5)?;
                }
            }
            Layer::Relu => {
                let flat: Vec<Fx> = xs.iter().flat_map(|x| x.data.iter().copied()).collect();
                let y = protocols::sec_relu(p, &flat)?;
                let mut off = 0;
                for x in xs.iter_mut() {
                    let n = x.data.len();
                    x.data.copy_from_slice(&y[off..off + n]);
                    off += n;
                }
            }
            Layer::MaxPool2 => {
                let mut blocks = Vec::new();
                for x in &xs {
                    blocks.extend(pool_blocks(x)?);
                }
                let y = match mode {
                    PoolMode::Tournament => protocols::sec_maxpool4(p, &blocks)?,
                    PoolMode::Sort => protocols::sec_maxpool4_sort(p, &blocks)?,
                };
                let mut off = 0;
                for x in xs.iter_mut() {
                    let n = x.data.len() / 4;
                    *x = Tensor {
                        c: x.c,
                        h: x.h / 2,
                        w: x.w / 2,
                        data: y[off..off + n].to_vec(),
                    };
                    off += n;
                }
            }
        }
    }
    Ok(xs.iter().map(aggregate_avg).collect())
}

pub fn infer(p: &mut Party, model: &PublicModel, image: &Tensor, mode: PoolMode) -> Result<Vec<Fx>> {
    Ok(infer_batch(p, model, std::slice::from_ref(image), mode)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{truncate, FixedPointConfig};
    use crate::protocols::tag;
    use crate::sharing::{split_value, ShareDistribution};
    use crate::testing::{run_pair, shares_of, Pair};

    fn naive_conv(x: &Tensor, c: &Conv) -> Tensor {
        let oh = (x.h + 2 * c.pad - c.kh) / c.stride + 1;
        let ow = (x.w + 2 * c.pad - c.kw) / c.stride + 1;
        let mut out = Tensor::zeros(c.out_ch, oh, ow);
        for o in 0..c.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = c.bias[o];
                    for i in 0..c.in_ch {
                        for ky in 0..c.kh {
                            for kx in 0..c.kw {
                                let y = oy * c.stride + ky;
                                let xx = ox * c.stride + kx;
                                if y < c.pad || xx < c.pad || y - c.pad >= x.h || xx - c.pad >= x.w {
                                    continue;
                                }
                                s += c.weight[((o * c.in_ch + i) * c.kh + ky) * c.kw + kx]
                                    * x.at(i, y - c.pad, xx - c.pad);
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn split_tensor(t: &Tensor, seed: u64) -> Pair<Tensor> {
        let c = FixedPointConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut a = t.clone();
        let mut b = t.clone();
        for i in 0..t.data.len() {
            let (s1, s2) = split_value(t.data[i], &mut rng, &c, ShareDistribution::default()).unwrap();
            a.data[i] = s1;
            b.data[i] = s2;
        }
        Pair(a, b)
    }

    fn quantized_image(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::new(1, side, side, (0..side * side).map(|_| rng.gen_range(0..=8) as Fx / 8.0).collect()).unwrap()
    }

    #[test]
    fn conv_examples() {
        let ones = Conv {
            out_ch: 1,
            in_ch: 1,
            kh: 2,
            kw: 2,
            stride: 1,
            pad: 0,
            weight: vec![1.0; 4],
            bias: vec![0.0],
        };
        let x = Tensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(conv_forward(&x, &ones, 1.0).unwrap().data, vec![4.0]);
        let zero = Conv {
            weight: vec![0.0; 4],
            bias: vec![0.5],
            ..ones.clone()
        };
        let x = Tensor::new(1, 3, 3, vec![2.0; 9]).unwrap();
        assert_eq!(conv_forward(&x, &zero, 1.0).unwrap().data, vec![0.5; 4]);
        assert!(conv_forward(&Tensor::zeros(2, 3, 3), &ones, 1.0).is_err());
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = Tensor::new(3, 8, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let c = Conv {
                out_ch: 5,
                in_ch: 3,
                kh: 3,
                kw: 3,
                stride,
                pad,
                weight: (0..135).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                bias: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let got = conv_forward(&x, &c, 1.0).unwrap();
            let want = naive_conv(&x, &c);
            assert_eq!(got.shape(), want.shape());
            let diff = got.data.iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12);
        }
    }

    #[test]
    fn conv_on_shares_commutes_with_reconstruction() {
        let m = PublicModel::toy(2, 8);
        let Layer::Conv(c) = &m.layers[0] else { unreachable!() };
        let img = quantized_image(3, 8);
        let s = split_tensor(&img, 4);
        let a = conv_forward(&s.0, c, 0.5).unwrap();
        let b = conv_forward(&s.1, c, 0.5).unwrap();
        let want = naive_conv(&img, c);
        for i in 0..want.data.len() {
            assert!((a.data[i] + b.data[i] - want.data[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn aggregate_examples() {
        let t = Tensor::new(1, 2, 2, vec![1.5; 4]).unwrap();
        assert_eq!(aggregate_avg(&t), vec![1.5]);
        let t = Tensor::new(2, 2, 2, vec![0.0, 1.0, 1.0, 0.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(aggregate_avg(&t), vec![0.5, 2.0]);
    }

    #[test]
    fn odd_pool_rejected() {
        assert!(matches!(pool_blocks(&Tensor::zeros(1, 3, 4)), Err(Error::OddSpatialDim(3))));
        let bad = PublicModel {
            input: (1, 6, 6),
            layers: vec![Layer::MaxPool2, Layer::MaxPool2],
        };
        assert!(matches!(bad.shapes(), Err(Error::OddSpatialDim(3))));
    }

    #[test]
    fn toy_model_has_no_eta_ball_activations() {
        let m = PublicModel::toy(7, 16);
        assert_eq!(m.feature_dim().unwrap(), 16);
        let eta = FixedPointConfig::default().eta;
        for seed in 0..20 {
            let img = quantized_image(seed, 16);
            assert!(screen(&m, &img, eta).unwrap().is_empty());
        }
        assert!(screen(&m, &Tensor::zeros(1, 16, 16), eta).unwrap().is_empty());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = PublicModel::toy(8, 16);
        m.save(&dir.path().join("model.json"), &dir.path().join("model.bin")).unwrap();
        let back = PublicModel::load(&dir.path().join("model.json")).unwrap();
        assert_eq!(back, m);
        assert!(m.validate(128.0).unwrap().is_empty());
    }

    fn secure_vs_plain(model: &PublicModel, imgs: &[Tensor], mode: PoolMode, seed: u64) {
        let shares: Vec<Pair<Tensor>> = imgs.iter().enumerate().map(|(i, t)| split_tensor(t, seed + i as u64)).collect();
        let mut plan = MaterialPlan::new();
        model.demand(&mut plan, imgs.len(), mode).unwrap();
        let out = run_pair(&plan, seed, |p| {
            let mine: Vec<Tensor> = shares.iter().map(|s| shares_of(p, s).clone()).collect();
            let f = infer_batch(p, model, &mine, mode)?;
            Ok((f, p.session.meter().total().rounds, p.material.remaining()))
        })
        .unwrap();
        let c = FixedPointConfig::default();
        for (i, img) in imgs.iter().enumerate() {
            let (want, _) = model.forward_plain(img).unwrap();
            for j in 0..want.len() {
                let got = truncate(out.0 .0[i][j] + out.1 .0[i][j], &c);
                assert!((got - want[j]).abs() <= 1e-4, "image {i} dim {j}: {got} vs {}", want[j]);
            }
        }
        assert_eq!(out.0 .1, model.rounds(mode));
        assert!(out.0 .2.triples.values().all(|&n| n == 0));
    }

    #[test]
    fn secure_inference_matches_plaintext() {
        let m = PublicModel::toy(9, 16);
        let imgs: Vec<Tensor> = (0..3).map(|s| quantized_image(100 + s, 16)).collect();
        secure_vs_plain(&m, &imgs, PoolMode::Tournament, 40);
        secure_vs_plain(&m, &imgs[..1], PoolMode::Sort, 41);
    }

    #[test]
    fn minionn_shaped_model_on_28x28() {
        let m = PublicModel::toy(10, 28);
        assert_eq!(m.shapes().unwrap().last().unwrap(), &(16, 7, 7));
        let img = quantized_image(11, 28);
        secure_vs_plain(&m, &[img], PoolMode::Tournament, 42);
    }

    #[test]
    fn zero_image_and_round_count() {
        let m = PublicModel::toy(12, 16);
        assert_eq!(m.rounds(PoolMode::Tournament), 3 + 6 + 3 + 6);
        secure_vs_plain(&m, &[Tensor::zeros(1, 16, 16)], PoolMode::Tournament, 43);
    }

    #[test]
    fn relu_layer_is_three_rounds() {
        let x = quantized_image(13, 16);
        let planes = Tensor::new(4, 16, 16, [x.data.clone(), x.data.clone(), x.data.clone(), x.data].concat()).unwrap();
        let shifted = Tensor {
            data: planes.data.iter().map(|v| v - 0.5 + 1.0 / 64.0).collect(),
            ..planes.clone()
        };
        let s = split_tensor(&shifted, 14);
        let mut plan = MaterialPlan::new();
        demand::relu(&mut plan, 1024);
        let out = run_pair(&plan, 44, |p| {
            let y = protocols::sec_relu(p, &shares_of(p, &s).data)?;
            Ok((y, p.session.meter().by_tag(tag::SEC_RELU).rounds))
        })
        .unwrap();
        assert_eq!(out.0 .1, 3);
        let c = FixedPointConfig::default();
        for i in 0..1024 {
            let got = truncate(out.0 .0[i] + out.1 .0[i], &c);
            assert!((got - shifted.data[i].max(0.0)).abs() <= 2.0 * c.ulp());
        }
    }
}
