//! Layer kernels: forward passes and their manual backward passes.
//!
//! Spatial activations are stored as `[channels, depth, height, width]`
//! row-major; 2D layers run on volumes with depth 1.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding of `k / 2` per side (odd kernels only), stride 1.
    Same,
}

/// One layer of a [`Network`](super::Network).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default)]
        padding: Padding,
    },
    Conv3d {
        filters: usize,
        kernel: [usize; 3],
        #[serde(default)]
        padding: Padding,
    },
    /// Non-overlapping max pooling with an isotropic window over the spatial
    /// axes (trailing cells that do not fill a window are dropped).
    Maxpool {
        size: usize,
    },
    Relu,
    Flatten,
    Dense {
        units: usize,
    },
    /// Inverted dropout; identity outside training.
    Dropout {
        p: f64,
    },
    Sigmoid,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. })
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Volume {
        channels: usize,
        extent: [usize; 3],
        /// 2 for images (depth fixed at 1), 3 for volumes.
        rank: u8,
    },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Volume {
                channels, extent, ..
            } => channels * extent.iter().product::<usize>(),
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial extents as the user sees them (2 or 3 axes).
    pub fn spatial(&self) -> Vec<usize> {
        match *self {
            ActShape::Volume { extent, rank: 2, .. } => extent[1..].to_vec(),
            ActShape::Volume { extent, .. } => extent.to_vec(),
            ActShape::Flat(n) => vec![n],
        }
    }

    pub(crate) fn from_input(shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(ActShape::Volume {
                channels: c,
                extent: [1, h, w],
                rank: 2,
            }),
            [c, d, h, w] if c > 0 && d > 0 && h > 0 && w > 0 => Ok(ActShape::Volume {
                channels: c,
                extent: [d, h, w],
                rank: 3,
            }),
            _ => Err(Error::Shape(format!(
                "network input must be channels × 2D or 3D extents, got {shape:?}"
            ))),
        }
    }
}

/// A layer with resolved shapes and its slice of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Compiled {
    pub spec: LayerSpec,
    pub input: ActShape,
    pub output: ActShape,
    pub param_offset: usize,
    pub param_len: usize,
    // conv geometry, [depth, height, width]
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    // Glorot fan sizes for weight initialisation
    pub fan: (usize, usize),
    pub weight_len: usize,
}

fn conv_geometry(kernel: [usize; 3], padding: Padding, extent: [usize; 3]) -> Result<([usize; 3], [usize; 3])> {
    let mut pad = [0; 3];
    let mut out = [0; 3];
    for a in 0..3 {
        if kernel[a] == 0 {
            return Err(Error::Shape("kernel extents must be positive".into()));
        }
        if padding == Padding::Same {
            if kernel[a].is_multiple_of(2) {
                return Err(Error::Shape(format!("same padding needs odd kernels, got {kernel:?}")));
            }
            pad[a] = kernel[a] / 2;
        }
        let padded = extent[a] + 2 * pad[a];
        if padded < kernel[a] {
            return Err(Error::Shape(format!(
                "kernel {kernel:?} does not fit input extent {extent:?}"
            )));
        }
        out[a] = padded - kernel[a] + 1;
    }
    Ok((pad, out))
}

pub(crate) fn compile(input: ActShape, specs: &[LayerSpec]) -> Result<Vec<Compiled>> {
    let mut shape = input;
    let mut offset = 0;
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let fail = |why: String| Error::Shape(format!("layer {i} ({}): {why}", spec.kind()));
        let mut c = Compiled {
            spec: spec.clone(),
            input: shape,
            output: shape,
            param_offset: offset,
            param_len: 0,
            kernel: [1; 3],
            pad: [0; 3],
            fan: (0, 0),
            weight_len: 0,
        };
        match (spec, shape) {
            (LayerSpec::Conv2d { filters, kernel, padding }, ActShape::Volume { channels, extent, rank: 2 }) => {
                conv_layer(&mut c, *filters, [1, kernel[0], kernel[1]], *padding, channels, extent, 2).map_err(|e| fail(e.to_string()))?;
            }
            (LayerSpec::Conv3d { filters, kernel, padding }, ActShape::Volume { channels, extent, rank: 3 }) => {
                conv_layer(&mut c, *filters, *kernel, *padding, channels, extent, 3).map_err(|e| fail(e.to_string()))?;
            }
            (LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. }, _) => {
                return Err(fail(format!("input shape {shape:?} does not match the convolution rank")));
            }
            (LayerSpec::Maxpool { size }, ActShape::Volume { channels, extent, rank }) => {
                let s = *size;
                let win = if rank == 2 { [1, s, s] } else { [s, s, s] };
                if s == 0 || (0..3).any(|a| extent[a] < win[a]) {
                    return Err(fail(format!("pool {s} does not fit extent {extent:?}")));
                }
                c.kernel = win;
                c.output = ActShape::Volume {
                    channels,
                    extent: [extent[0] / win[0], extent[1] / win[1], extent[2] / win[2]],
                    rank,
                };
            }
            (LayerSpec::Maxpool { .. }, ActShape::Flat(_)) => {
                return Err(fail("pooling needs a spatial input".into()));
            }
            (LayerSpec::Flatten, s) => c.output = ActShape::Flat(s.len()),
            (LayerSpec::Dense { units }, ActShape::Flat(n)) => {
                if *units == 0 {
                    return Err(fail("dense layer needs at least one unit".into()));
                }
                c.weight_len = units * n;
                c.param_len = c.weight_len + units;
                c.fan = (n, *units);
                c.output = ActShape::Flat(*units);
            }
            (LayerSpec::Dense { .. }, _) => return Err(fail("dense layer needs a flattened input".into())),
            (LayerSpec::Dropout { p }, _) => {
                if !(0.0..1.0).contains(p) {
                    return Err(fail(format!("drop probability {p} outside [0, 1)")));
                }
            }
            (LayerSpec::Relu | LayerSpec::Sigmoid, _) => {}
        }
        offset += c.param_len;
        shape = c.output;
        out.push(c);
    }
    Ok(out)
}

fn conv_layer(
    c: &mut Compiled,
    filters: usize,
    kernel: [usize; 3],
    padding: Padding,
    channels: usize,
    extent: [usize; 3],
    rank: u8,
) -> Result<()> {
    if filters == 0 {
        return Err(Error::Shape("convolution needs at least one filter".into()));
    }
    let (pad, out) = conv_geometry(kernel, padding, extent)?;
    let k: usize = kernel.iter().product();
    c.kernel = kernel;
    c.pad = pad;
    c.weight_len = filters * channels * k;
    c.param_len = c.weight_len + filters;
    c.fan = (channels * k, filters * k);
    c.output = ActShape::Volume {
        channels: filters,
        extent: out,
        rank,
    };
    Ok(())
}

/// Per-layer state needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
}

fn dims(s: ActShape) -> (usize, [usize; 3]) {
    match s {
        ActShape::Volume { channels, extent, .. } => (channels, extent),
        ActShape::Flat(n) => (n, [1, 1, 1]),
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Runs one layer. `dropout` is `Some` only in training mode.
pub(crate) fn forward(c: &Compiled, params: &[f64], x: &[f64], dropout: Option<&mut Rng>) -> (Vec<f64>, Aux) {
    let p = &params[c.param_offset..c.param_offset + c.param_len];
    match &c.spec {
        LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. } => (conv_forward(c, p, x), Aux::None),
        LayerSpec::Maxpool { .. } => {
            let (y, arg) = pool_forward(c, x);
            (y, Aux::Argmax(arg))
        }
        LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
        LayerSpec::Flatten => (x.to_vec(), Aux::None),
        LayerSpec::Dense { units } => {
            let n = x.len();
            let (w, b) = p.split_at(c.weight_len);
            let y = (0..*units)
                .map(|j| b[j] + w[j * n..(j + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            (y, Aux::None)
        }
        LayerSpec::Dropout { p: drop } => match dropout {
            Some(rng) if *drop > 0.0 => {
                let keep = 1.0 / (1.0 - drop);
                let mask: Vec<f64> = x
                    .iter()
                    .map(|_| if rng.random::<f64>() < *drop { 0.0 } else { keep })
                    .collect();
                (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), Aux::Mask(mask))
            }
            _ => (x.to_vec(), Aux::None),
        },
        LayerSpec::Sigmoid => (x.iter().map(|&z| sigmoid(z)).collect(), Aux::None),
    }
}

/// Propagates `dy` through one layer, accumulating parameter gradients into
/// `grad` (the full parameter-length buffer). Returns the input gradient.
pub(crate) fn backward(
    c: &Compiled,
    params: &[f64],
    x: &[f64],
    y: &[f64],
    aux: &Aux,
    dy: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let range = c.param_offset..c.param_offset + c.param_len;
    let p = &params[range.clone()];
    let g = &mut grad[range];
    match &c.spec {
        LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. } => conv_backward(c, p, x, dy, g),
        LayerSpec::Maxpool { .. } => {
            let mut dx = vec![0.0; x.len()];
            if let Aux::Argmax(arg) = aux {
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += dy[o];
                }
            }
            dx
        }
        LayerSpec::Relu => x
            .iter()
            .zip(dy)
            .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
            .collect(),
        LayerSpec::Flatten => dy.to_vec(),
        LayerSpec::Dense { units } => {
            let n = x.len();
            let (w, _) = p.split_at(c.weight_len);
            let (gw, gb) = g.split_at_mut(c.weight_len);
            let mut dx = vec![0.0; n];
            for j in 0..*units {
                let d = dy[j];
                gb[j] += d;
                let row = &w[j * n..(j + 1) * n];
                let grow = &mut gw[j * n..(j + 1) * n];
                for i in 0..n {
                    grow[i] += d * x[i];
                    dx[i] += d * row[i];
                }
            }
            dx
        }
        LayerSpec::Dropout { .. } => match aux {
            Aux::Mask(m) => dy.iter().zip(m).map(|(d, m)| d * m).collect(),
            _ => dy.to_vec(),
        },
        LayerSpec::Sigmoid => y.iter().zip(dy).map(|(&s, &d)| d * s * (1.0 - s)).collect(),
    }
}

// Valid output range of `o` for kernel offset `k`: input index o + k - pad
// must land in [0, n).
fn span(out: usize, n: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(out);
    lo..hi.max(lo)
}

fn conv_forward(c: &Compiled, p: &[f64], x: &[f64]) -> Vec<f64> {
    let (cin, [d, h, w]) = dims(c.input);
    let (f, [od, oh, ow]) = dims(c.output);
    let [kd, kh, kw] = c.kernel;
    let [pd, ph, pw] = c.pad;
    let (wts, bias) = p.split_at(c.weight_len);
    let mut y = vec![0.0; f * od * oh * ow];
    for fi in 0..f {
        let yf = &mut y[fi * od * oh * ow..(fi + 1) * od * oh * ow];
        yf.iter_mut().for_each(|v| *v = bias[fi]);
        for ci in 0..cin {
            let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let wv = wts[(((fi * cin + ci) * kd + a) * kh + b) * kw + e];
                        let xs = span(ow, w, e, pw);
                        for oz in span(od, d, a, pd) {
                            let iz = oz + a - pd;
                            for oy in span(oh, h, b, ph) {
                                let iy = oy + b - ph;
                                let yrow = &mut yf[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let xrow = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                for ox in xs.clone() {
                                    yrow[ox] += wv * xrow[ox + e - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(c: &Compiled, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64]) -> Vec<f64> {
    let (cin, [d, h, w]) = dims(c.input);
    let (f, [od, oh, ow]) = dims(c.output);
    let [kd, kh, kw] = c.kernel;
    let [pd, ph, pw] = c.pad;
    let (wts, _) = p.split_at(c.weight_len);
    let (gw, gb) = g.split_at_mut(c.weight_len);
    let mut dx = vec![0.0; x.len()];
    for fi in 0..f {
        let dyf = &dy[fi * od * oh * ow..(fi + 1) * od * oh * ow];
        gb[fi] += dyf.iter().sum::<f64>();
        for ci in 0..cin {
            let base = ci * d * h * w;
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let widx = (((fi * cin + ci) * kd + a) * kh + b) * kw + e;
                        let wv = wts[widx];
                        let xs = span(ow, w, e, pw);
                        let mut acc = 0.0;
                        for oz in span(od, d, a, pd) {
                            let iz = oz + a - pd;
                            for oy in span(oh, h, b, ph) {
                                let iy = oy + b - ph;
                                let drow = &dyf[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let xoff = base + (iz * h + iy) * w;
                                for ox in xs.clone() {
                                    let ix = xoff + ox + e - pw;
                                    acc += drow[ox] * x[ix];
                                    dx[ix] += wv * drow[ox];
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    dx
}

fn pool_forward(c: &Compiled, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ch, [d, h, w]) = dims(c.input);
    let (_, [od, oh, ow]) = dims(c.output);
    let [sd, sh, sw] = c.kernel;
    let mut y = Vec::with_capacity(ch * od * oh * ow);
    let mut arg = Vec::with_capacity(y.capacity());
    for ci in 0..ch {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for a in 0..sd {
                        for b in 0..sh {
                            for e in 0..sw {
                                let i = ((ci * d + oz * sd + a) * h + oy * sh + b) * w + ox * sw + e;
                                // strict comparison: ties go to the first index
                                if x[i] > best {
                                    best = x[i];
                                    at = i;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(at);
                }
            }
        }
    }
    (y, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_clips_padding() {
        // n = 4, kernel 3, pad 1: offset 0 reads o - 1, valid for o in 1..4
        assert_eq!(span(4, 4, 0, 1), 1..4);
        assert_eq!(span(4, 4, 1, 1), 0..4);
        assert_eq!(span(4, 4, 2, 1), 0..3);
        assert_eq!(span(2, 4, 2, 0), 0..2);
    }

    #[test]
    fn conv_matches_naive_sum() {
        let input = ActShape::Volume { channels: 1, extent: [1, 3, 3], rank: 2 };
        let specs = [LayerSpec::Conv2d { filters: 1, kernel: [2, 2], padding: Padding::Valid }];
        let c = &compile(input, &specs).unwrap()[0];
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let p = [1.0, 0.0, 0.0, -1.0, 0.5];
        let y = conv_forward(c, &p, &x);
        // y[i,j] = x[i,j] - x[i+1,j+1] + 0.5 = -4 + 0.5
        assert_eq!(y, vec![-3.5; 4]);
    }

    #[test]
    fn same_padding_keeps_extent() {
        let input = ActShape::Volume { channels: 2, extent: [4, 4, 4], rank: 3 };
        let specs = [LayerSpec::Conv3d { filters: 3, kernel: [3, 3, 3], padding: Padding::Same }];
        let c = &compile(input, &specs).unwrap()[0];
        assert_eq!(c.output, ActShape::Volume { channels: 3, extent: [4, 4, 4], rank: 3 });
        assert_eq!(c.param_len, 3 * 2 * 27 + 3);
    }

    #[test]
    fn pool_ties_pick_first() {
        let input = ActShape::Volume { channels: 1, extent: [1, 2, 2], rank: 2 };
        let c = &compile(input, &[LayerSpec::Maxpool { size: 2 }]).unwrap()[0];
        let (y, arg) = pool_forward(c, &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(y, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let input = ActShape::Volume { channels: 1, extent: [1, 4, 4], rank: 2 };
        assert!(compile(input, &[LayerSpec::Dense { units: 1 }]).is_err());
        assert!(compile(input, &[LayerSpec::Conv3d { filters: 1, kernel: [1, 1, 1], padding: Padding::Valid }]).is_err());
        assert!(compile(input, &[LayerSpec::Flatten, LayerSpec::Maxpool { size: 2 }]).is_err());
        assert!(compile(input, &[LayerSpec::Conv2d { filters: 1, kernel: [5, 5], padding: Padding::Valid }]).is_err());
        assert!(compile(input, &[LayerSpec::Dropout { p: 1.0 }]).is_err());
    }
}
