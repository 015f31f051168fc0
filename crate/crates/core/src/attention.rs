//! Audio-visual response maps and the soft pseudo-ground-truth mask.
//!
//! A response map holds, per spatial site, the cosine between the audio
//! embedding and the vision feature vector at that site. The pseudo mask is a
//! sharp sigmoid of the response around a threshold `epsilon` with temperature
//! `tau`; positive responses are the mask-weighted mean of the map.

use std::fmt::Write as _;

use crate::encoders::{AudioFeature, VisionFeature};
use crate::error::{Error, Result};
use crate::grid::{dot, norm, Grid3};

pub const DEFAULT_EPSILON: f64 = 0.65;
pub const DEFAULT_TAU: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub height: usize,
    pub width: usize,
    /// Row-major cosine values in `[-1, 1]`.
    pub values: Vec<f64>,
    /// Set when some site had a zero-norm audio or vision vector; those sites read 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ResponseMap {
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_channels(a: &AudioFeature, v: &VisionFeature) -> Result<()> {
    if a.channels() != v.channels() {
        return Err(Error::shape(
            format!("{} channels", a.channels()),
            format!("{} channels", v.channels()),
        ));
    }
    Ok(())
}

/// Cosine similarity between `a` and every spatial vector of `v`.
pub fn response_map(a: &AudioFeature, v: &VisionFeature) -> Result<ResponseMap> {
    check_channels(a, v)?;
    let grid = &v.0;
    let hw = grid.sites();
    let a_norm = norm(&a.0);
    let mut degenerate = false;
    let mut values = Vec::with_capacity(hw);
    for s in 0..hw {
        let mut d = 0.0;
        let mut vv = 0.0;
        for (k, &ak) in a.0.iter().enumerate() {
            let x = grid.data[k * hw + s];
            d += ak * x;
            vv += x * x;
        }
        let denom = a_norm * vv.sqrt();
        if denom == 0.0 {
            degenerate = true;
            values.push(0.0);
        } else {
            values.push((d / denom).clamp(-1.0, 1.0));
        }
    }
    Ok(ResponseMap {
        height: grid.height,
        width: grid.width,
        values,
        degenerate,
    })
}

/// `m = sigmoid((alpha - epsilon) / tau)` elementwise.
pub fn pseudo_mask(alpha: &ResponseMap, epsilon: f64, tau: f64) -> Result<PseudoMask> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    Ok(PseudoMask {
        height: alpha.height,
        width: alpha.width,
        values: alpha.values.iter().map(|&x| sigmoid((x - epsilon) / tau)).collect(),
    })
}

/// Mask-weighted mean response `⟨m, α⟩ / Σm`.
pub fn masked_response(mask: &PseudoMask, alpha: &ResponseMap) -> Result<f64> {
    if (mask.height, mask.width) != (alpha.height, alpha.width) {
        return Err(Error::shape(
            format!("{}x{}", alpha.height, alpha.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let mass: f64 = mask.values.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::NonFinite("pseudo-mask mass"));
    }
    Ok(dot(&mask.values, &alpha.values) / mass)
}

/// Arithmetic mean of the map.
pub fn mean_response(alpha: &ResponseMap) -> f64 {
    alpha.values.iter().sum::<f64>() / alpha.values.len() as f64
}

/// Masked response together with its derivative with respect to every entry of `α`.
///
/// With `stop_grad_mask` the mask is treated as a constant; otherwise the
/// derivative also flows through the sigmoid.
pub fn masked_response_with_grad(
    alpha: &ResponseMap,
    epsilon: f64,
    tau: f64,
    stop_grad_mask: bool,
) -> Result<(f64, Vec<f64>)> {
    let mask = pseudo_mask(alpha, epsilon, tau)?;
    masked_response_grad_with_mask(alpha, &mask, tau, stop_grad_mask)
}

pub(crate) fn masked_response_grad_with_mask(
    alpha: &ResponseMap,
    mask: &PseudoMask,
    tau: f64,
    stop_grad_mask: bool,
) -> Result<(f64, Vec<f64>)> {
    let value = masked_response(mask, alpha)?;
    let mass: f64 = mask.values.iter().sum();
    let grad = mask
        .values
        .iter()
        .zip(&alpha.values)
        .map(|(&m, &a)| {
            let direct = m / mass;
            if stop_grad_mask {
                direct
            } else {
                direct + (a - value) / mass * m * (1.0 - m) / tau
            }
        })
        .collect();
    Ok((value, grad))
}

/// Gradients of `⟨upstream, α(a, v)⟩` with respect to the audio embedding and
/// the vision feature map. Degenerate sites contribute nothing.
pub fn response_map_grad(
    a: &AudioFeature,
    v: &VisionFeature,
    upstream: &[f64],
) -> Result<(Vec<f64>, Grid3)> {
    check_channels(a, v)?;
    let grid = &v.0;
    let hw = grid.sites();
    if upstream.len() != hw {
        return Err(Error::shape(format!("{hw} sites"), upstream.len()));
    }
    let c = a.channels();
    let mut grad_a = vec![0.0; c];
    let mut grad_v = Grid3::zeros(c, grid.height, grid.width);
    let a_norm = norm(&a.0);
    if a_norm == 0.0 {
        return Ok((grad_a, grad_v));
    }
    for (s, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        let mut d = 0.0;
        let mut vv = 0.0;
        for (k, &ak) in a.0.iter().enumerate() {
            let x = grid.data[k * hw + s];
            d += ak * x;
            vv += x * x;
        }
        let v_norm = vv.sqrt();
        if v_norm == 0.0 {
            continue;
        }
        let inv = 1.0 / (a_norm * v_norm);
        let cos = d * inv;
        let ca = cos / (a_norm * a_norm);
        let cv = cos / vv;
        for (k, &ak) in a.0.iter().enumerate() {
            let x = grid.data[k * hw + s];
            grad_a[k] += u * (x * inv - ca * ak);
            grad_v.data[k * hw + s] += u * (ak * inv - cv * x);
        }
    }
    Ok((grad_a, grad_v))
}

/// Renders a response map as an ASCII PGM (P2), mapping `[-1, 1]` linearly onto `[0, 255]`.
pub fn to_pgm(alpha: &ResponseMap) -> String {
    let mut out = format!("P2\n{} {}\n255\n", alpha.width, alpha.height);
    for row in alpha.values.chunks(alpha.width) {
        let line: Vec<String> = row
            .iter()
            .map(|&x| {
                let level = ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                level.to_string()
            })
            .collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}
