//! Two-stream encoders: a patch projection for images and an affine map for
//! audio, each followed by `tanh`.
//!
//! The vision stream cuts a `3 × H_v × W_v` image into non-overlapping `p × p`
//! patches and projects each patch to `c` channels, producing a `c × h × w`
//! feature map with `h = H_v / p`, `w = W_v / p`. The audio stream flattens the
//! `1 × H_a × W_a` grid and maps it to a single `c`-vector. Both maps come with
//! exact reverse-mode gradients.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::textio::{parse_dim, parse_real, push_reals, Tokens};

/// Image channels expected by the vision stream.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub channels: usize,
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub audio_h: usize,
    pub audio_w: usize,
}

impl EncoderShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.patch,
            self.image_h,
            self.image_w,
            self.audio_h,
            self.audio_w,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("zero dimension in {self:?}")));
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size {} does not divide image size {}x{}",
                self.patch, self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of the vision feature map.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn vision_fan_in(&self) -> usize {
        IMAGE_CHANNELS * self.patch * self.patch
    }

    pub fn audio_fan_in(&self) -> usize {
        self.audio_h * self.audio_w
    }
}

/// Encoder weights. Also used as the container for parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    /// `c × 3p²`, row `k` projects a flattened patch onto channel `k`.
    pub vision_w: Vec<f64>,
    pub vision_b: Vec<f64>,
    /// `c × H_a·W_a`.
    pub audio_w: Vec<f64>,
    pub audio_b: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(shape: EncoderShape) -> Result<Self> {
        shape.validate()?;
        let c = shape.channels;
        Ok(Self {
            shape,
            vision_w: vec![0.0; c * shape.vision_fan_in()],
            vision_b: vec![0.0; c],
            audio_w: vec![0.0; c * shape.audio_fan_in()],
            audio_b: vec![0.0; c],
        })
    }

    /// Uniform init in `[-s, s]` with `s = 1/sqrt(fan_in)` for each stream.
    pub fn init(shape: EncoderShape, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sv = 1.0 / (shape.vision_fan_in() as f64).sqrt();
        let sa = 1.0 / (shape.audio_fan_in() as f64).sqrt();
        for v in p.vision_w.iter_mut().chain(p.vision_b.iter_mut()) {
            *v = rng.random_range(-sv..=sv);
        }
        for v in p.audio_w.iter_mut().chain(p.audio_b.iter_mut()) {
            *v = rng.random_range(-sa..=sa);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.vision_w.len() + self.vision_b.len() + self.audio_w.len() + self.audio_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.vision_w
            .iter()
            .chain(&self.vision_b)
            .chain(&self.audio_w)
            .chain(&self.audio_b)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.vision_w
            .iter_mut()
            .chain(self.vision_b.iter_mut())
            .chain(self.audio_w.iter_mut())
            .chain(self.audio_b.iter_mut())
    }

    /// Flat view in checkpoint order: vision weights, vision bias, audio weights, audio bias.
    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(shape: EncoderShape, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        if flat.len() != p.len() {
            return Err(Error::shape(p.len(), flat.len()));
        }
        for (dst, src) in p.iter_mut().zip(flat) {
            *dst = *src;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        for (d, s) in self.iter_mut().zip(other.iter()) {
            *d += scale * s;
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let s = &self.shape;
        let mut out = format!(
            "AVP1 {} {} {} {} {} {}\n",
            s.channels, s.patch, s.image_h, s.image_w, s.audio_h, s.audio_w
        );
        for block in [&self.vision_w, &self.vision_b, &self.audio_w, &self.audio_b] {
            let mut line = String::new();
            push_reals(&mut line, block);
            out.push_str(line.trim_start());
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut toks = Tokens::new(text);
        let header = toks
            .next_line()
            .ok_or_else(|| Error::MalformedHeader("empty checkpoint".into()))?;
        if header.len() != 7 || header[0] != "AVP1" {
            return Err(Error::MalformedHeader(format!(
                "expected `AVP1 <c> <p> <H_v> <W_v> <H_a> <W_a>`, found {:?}",
                header.join(" ")
            )));
        }
        let names = ["c", "p", "H_v", "W_v", "H_a", "W_a"];
        let mut dims = [0usize; 6];
        for (k, name) in names.iter().enumerate() {
            dims[k] = parse_dim(header[k + 1], name)?;
        }
        let shape = EncoderShape {
            channels: dims[0],
            patch: dims[1],
            image_h: dims[2],
            image_w: dims[3],
            audio_h: dims[4],
            audio_w: dims[5],
        };
        shape
            .validate()
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let mut p = Self::zeros(shape)?;
        let expected = p.len();
        let mut n = 0;
        for slot in p.iter_mut() {
            let tok = toks.next_token().ok_or(Error::TruncatedPayload {
                expected,
                found: n,
            })?;
            *slot = parse_real(tok, toks.line())?;
            n += 1;
        }
        if let Some(extra) = toks.next_token() {
            return Err(Error::RecordShape {
                line: toks.line(),
                msg: format!("unexpected trailing value {extra:?}"),
            });
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }
}

/// Vision feature map `V`, shape `c × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionFeature(pub Grid3);

/// Audio embedding `A`, length `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeature(pub Vec<f64>);

impl VisionFeature {
    pub fn channels(&self) -> usize {
        self.0.channels
    }
}

impl AudioFeature {
    pub fn channels(&self) -> usize {
        self.0.len()
    }
}

/// Gradients of a vision encoding with respect to the vision parameters and the image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Grid3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

fn check_image(shape: &EncoderShape, image: &Grid3) -> Result<()> {
    let want = (IMAGE_CHANNELS, shape.image_h, shape.image_w);
    if image.shape() != want {
        return Err(Error::shape(format!("image {want:?}"), format!("{:?}", image.shape())));
    }
    Ok(())
}

fn check_audio(shape: &EncoderShape, audio: &Grid3) -> Result<()> {
    let want = (1, shape.audio_h, shape.audio_w);
    if audio.shape() != want {
        return Err(Error::shape(format!("audio {want:?}"), format!("{:?}", audio.shape())));
    }
    Ok(())
}

/// Flattened patch at grid site `(gy, gx)`, ordered channel, row, column.
fn patch_vector(image: &Grid3, patch: usize, gy: usize, gx: usize, out: &mut [f64]) {
    let mut d = 0;
    for ch in 0..IMAGE_CHANNELS {
        for a in 0..patch {
            let row = (ch * image.height + gy * patch + a) * image.width + gx * patch;
            out[d..d + patch].copy_from_slice(&image.data[row..row + patch]);
            d += patch;
        }
    }
}

pub fn encode_vision(params: &EncoderParams, image: &Grid3) -> Result<VisionFeature> {
    let s = &params.shape;
    check_image(s, image)?;
    let (h, w) = s.grid();
    let c = s.channels;
    let fan = s.vision_fan_in();
    let mut out = Grid3::zeros(c, h, w);
    let mut x = vec![0.0; fan];
    for gy in 0..h {
        for gx in 0..w {
            patch_vector(image, s.patch, gy, gx, &mut x);
            for k in 0..c {
                let row = &params.vision_w[k * fan..(k + 1) * fan];
                let pre: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + params.vision_b[k];
                out.set(k, gy, gx, pre.tanh());
            }
        }
    }
    Ok(VisionFeature(out))
}

pub fn encode_audio(params: &EncoderParams, audio: &Grid3) -> Result<AudioFeature> {
    let s = &params.shape;
    check_audio(s, audio)?;
    let fan = s.audio_fan_in();
    let out = (0..s.channels)
        .map(|k| {
            let row = &params.audio_w[k * fan..(k + 1) * fan];
            let pre: f64 = row.iter().zip(&audio.data).map(|(a, b)| a * b).sum::<f64>() + params.audio_b[k];
            pre.tanh()
        })
        .collect();
    Ok(AudioFeature(out))
}

/// Backpropagates `upstream = dL/dV` through the vision stream, accumulating
/// parameter gradients into `grads` and, if requested, returning `dL/dimage`.
pub(crate) fn backprop_vision(
    params: &EncoderParams,
    image: &Grid3,
    feature: &VisionFeature,
    upstream: &Grid3,
    grads: &mut EncoderParams,
    want_input: bool,
) -> Option<Grid3> {
    let s = &params.shape;
    let (h, w) = s.grid();
    let c = s.channels;
    let fan = s.vision_fan_in();
    let p = s.patch;
    let mut x = vec![0.0; fan];
    let mut dpre = vec![0.0; c];
    let mut input = want_input.then(|| Grid3::zeros(IMAGE_CHANNELS, image.height, image.width));
    for gy in 0..h {
        for gx in 0..w {
            let mut any = false;
            for (k, dp) in dpre.iter_mut().enumerate() {
                let v = feature.0.get(k, gy, gx);
                *dp = upstream.get(k, gy, gx) * (1.0 - v * v);
                any |= *dp != 0.0;
            }
            if !any {
                continue;
            }
            patch_vector(image, p, gy, gx, &mut x);
            for (k, &dp) in dpre.iter().enumerate() {
                if dp == 0.0 {
                    continue;
                }
                let gw = &mut grads.vision_w[k * fan..(k + 1) * fan];
                for (g, xi) in gw.iter_mut().zip(&x) {
                    *g += dp * xi;
                }
                grads.vision_b[k] += dp;
            }
            if let Some(input) = input.as_mut() {
                for ch in 0..IMAGE_CHANNELS {
                    for a in 0..p {
                        for b in 0..p {
                            let d = (ch * p + a) * p + b;
                            let g: f64 = (0..c).map(|k| params.vision_w[k * fan + d] * dpre[k]).sum();
                            let idx = input.index(ch, gy * p + a, gx * p + b);
                            input.data[idx] += g;
                        }
                    }
                }
            }
        }
    }
    input
}

pub(crate) fn backprop_audio(
    params: &EncoderParams,
    audio: &Grid3,
    feature: &AudioFeature,
    upstream: &[f64],
    grads: &mut EncoderParams,
    want_input: bool,
) -> Option<Vec<f64>> {
    let fan = params.shape.audio_fan_in();
    let mut input = want_input.then(|| vec![0.0; fan]);
    for (k, (&v, &u)) in feature.0.iter().zip(upstream).enumerate() {
        let dp = u * (1.0 - v * v);
        if dp == 0.0 {
            continue;
        }
        let gw = &mut grads.audio_w[k * fan..(k + 1) * fan];
        for (g, xi) in gw.iter_mut().zip(&audio.data) {
            *g += dp * xi;
        }
        grads.audio_b[k] += dp;
        if let Some(input) = input.as_mut() {
            let row = &params.audio_w[k * fan..(k + 1) * fan];
            for (g, wi) in input.iter_mut().zip(row) {
                *g += dp * wi;
            }
        }
    }
    input
}

/// Exact gradients of `⟨upstream, encode_vision(params, image)⟩`.
pub fn encode_vision_grad(params: &EncoderParams, image: &Grid3, upstream: &Grid3) -> Result<VisionGrad> {
    let feature = encode_vision(params, image)?;
    if upstream.shape() != feature.0.shape() {
        return Err(Error::shape(
            format!("upstream {:?}", feature.0.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut grads = EncoderParams::zeros(params.shape)?;
    let input = backprop_vision(params, image, &feature, upstream, &mut grads, true).unwrap();
    Ok(VisionGrad {
        weight: grads.vision_w,
        bias: grads.vision_b,
        input,
    })
}

/// Exact gradients of `⟨upstream, encode_audio(params, audio)⟩`.
pub fn encode_audio_grad(params: &EncoderParams, audio: &Grid3, upstream: &[f64]) -> Result<AudioGrad> {
    let feature = encode_audio(params, audio)?;
    if upstream.len() != feature.channels() {
        return Err(Error::shape(
            format!("upstream length {}", feature.channels()),
            upstream.len(),
        ));
    }
    let mut grads = EncoderParams::zeros(params.shape)?;
    let input = backprop_audio(params, audio, &feature, upstream, &mut grads, true).unwrap();
    Ok(AudioGrad {
        weight: grads.audio_w,
        bias: grads.audio_b,
        input,
    })
}
