//! Straightforward f64 implementations of the network ops, used as oracles.

#![allow(dead_code)]

use fvlab::model::ResNetLite;

/// Dense f64 array with a shape.
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Arr {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Arr {
        Arr::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

pub fn conv2d(x: &Arr, k: &Arr, bias: Option<&[f64]>, stride: usize, padding: usize) -> Arr {
    let (n, c, h, w) = x.dims4();
    let (o, kc, kh, kw) = k.dims4();
    assert_eq!(c, kc);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * k.data[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Arr::new(&[n, o, oh, ow], out)
}

pub fn relu(x: &Arr) -> Arr {
    Arr::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

/// Normalizes with the biased batch variance.
pub fn batchnorm_train(x: &Arr, gamma: &[f64], beta: &[f64], eps: f64) -> Arr {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut out = x.data.clone();
    for ch in 0..c {
        let vals = (0..n).flat_map(|b| x.data[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter());
        let mean = vals.clone().sum::<f64>() / count;
        let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let inv = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for v in &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = gamma[ch] * (*v - mean) * inv + beta[ch];
            }
        }
    }
    Arr::new(&x.shape, out)
}

pub fn batchnorm_eval(x: &Arr, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Arr {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.data.clone();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for v in &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = gamma[ch] * (*v - mean[ch]) * inv + beta[ch];
            }
        }
    }
    Arr::new(&x.shape, out)
}

/// `x [n, i] · wᵀ [i, o] + b`.
pub fn linear(x: &Arr, weight: &Arr, bias: Option<&[f64]>) -> Arr {
    let (n, i) = (x.shape[0], x.shape[1]);
    let o = weight.shape[0];
    assert_eq!(weight.shape[1], i);
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let dot: f64 = (0..i).map(|j| x.data[r * i + j] * weight.data[c * i + j]).sum();
            out[r * o + c] = dot + bias.map_or(0.0, |b| b[c]);
        }
    }
    Arr::new(&[n, o], out)
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let data = (0..n * c)
        .map(|i| x.data[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    Arr::new(&[n, c], data)
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

/// Mean cross-entropy of `[n, k]` logits against integer labels.
pub fn softmax_cross_entropy(logits: &Arr, labels: &[usize]) -> f64 {
    let k = logits.shape[1];
    let total: f64 = logits
        .data
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum();
    total / labels.len() as f64
}

/// Anisotropic total variation over `[c, h, w]`, without wrap-around.
pub fn total_variation(x: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let mut tv = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(ch * h + y) * w + xx];
                if y + 1 < h {
                    tv += (x[(ch * h + y + 1) * w + xx] - v).abs();
                }
                if xx + 1 < w {
                    tv += (x[(ch * h + y) * w + xx + 1] - v).abs();
                }
            }
        }
    }
    tv
}

/// Folds the sign of every value into a region fingerprint.
pub fn fingerprint(acc: u64, values: &[f64]) -> u64 {
    values.iter().fold(acc, |h, &v| {
        let bit = (v > 0.0) as u64;
        (h ^ bit).wrapping_mul(0x100_0000_01b3).rotate_left(7)
    })
}

/// Parameter values looked up by name, in f64.
pub struct Params<'a> {
    pub names: &'a [String],
    pub values: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
}

impl<'a> Params<'a> {
    pub fn of(model: &'a ResNetLite) -> Params<'a> {
        Params {
            names: model.param_names(),
            values: model.params().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect(),
            shapes: model.params().iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.values[self.index(name)]
    }

    pub fn arr(&self, name: &str) -> Arr {
        let i = self.index(name);
        Arr::new(&self.shapes[i], self.values[i].clone())
    }

    pub fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

/// Running statistics for eval mode, in the model's norm-layer order.
pub type Running = Vec<(Vec<f64>, Vec<f64>)>;

pub fn running_of(model: &ResNetLite) -> Running {
    model
        .running_stats()
        .iter()
        .map(|s| {
            (
                s.mean.iter().map(|&v| v as f64).collect(),
                s.var.iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

/// Residual network forward pass written directly from the architecture
/// description: stem conv-BN-ReLU, stages of basic blocks with stride 2 at the
/// first block of every later stage, 1×1 projection shortcuts when shape
/// changes, global average pool and a linear head.
///
/// With `running` set the norm layers use it (eval mode); otherwise batch
/// statistics. Returns logits and a fingerprint of every ReLU input sign.
pub fn resnet_forward(
    model: &ResNetLite,
    p: &Params<'_>,
    input: &Arr,
    running: Option<&Running>,
) -> (Arr, u64) {
    let cfg = model.config();
    let eps = cfg.norm.eps as f64;
    let mut layer = 0;
    let mut region = 0u64;
    let mut bn = |x: &Arr, prefix: &str| {
        let (gamma, beta) = (p.get(&format!("{prefix}.gamma")), p.get(&format!("{prefix}.beta")));
        let out = match running {
            Some(r) => batchnorm_eval(x, gamma, beta, &r[layer].0, &r[layer].1, eps),
            None => batchnorm_train(x, gamma, beta, eps),
        };
        layer += 1;
        out
    };
    let mut relu_tracked = |x: &Arr| {
        region = fingerprint(region, &x.data);
        relu(x)
    };

    let x = conv2d(input, &p.arr("stem.conv.weight"), None, 1, 1);
    let x = bn(&x, "stem.bn");
    let mut x = relu_tracked(&x);
    for s in 0..cfg.widths.len() {
        for b in 0..cfg.blocks_per_stage {
            let pre = format!("stage{s}.block{b}");
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let h = conv2d(&x, &p.arr(&format!("{pre}.conv1.weight")), None, stride, 1);
            let h = bn(&h, &format!("{pre}.bn1"));
            let h = relu_tracked(&h);
            let h = conv2d(&h, &p.arr(&format!("{pre}.conv2.weight")), None, 1, 1);
            let h = bn(&h, &format!("{pre}.bn2"));
            let shortcut = if p.has(&format!("{pre}.shortcut.weight")) {
                conv2d(
                    &x,
                    &p.arr(&format!("{pre}.shortcut.weight")),
                    Some(p.get(&format!("{pre}.shortcut.bias"))),
                    stride,
                    0,
                )
            } else {
                x.clone()
            };
            x = relu_tracked(&add(&h, &shortcut));
        }
    }
    let pooled = global_avg_pool(&x);
    let logits = linear(&pooled, &p.arr("fc.weight"), Some(p.get("fc.bias")));
    (logits, region)
}

/// Adjoint of [`conv2d`]: gradients of ⟨go, conv2d(x, k, b)⟩ with respect to
/// `x`, `k` and the bias.
pub fn conv2d_vjp(x: &Arr, k: &Arr, go: &Arr, stride: usize, padding: usize) -> (Arr, Arr, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let (o, _, kh, kw) = k.dims4();
    let (_, _, oh, ow) = go.dims4();
    let mut dx = vec![0.0; x.data.len()];
    let mut dk = vec![0.0; k.data.len()];
    let mut db = vec![0.0; o];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go.data[((b * o + oc) * oh + oy) * ow + ox];
                    db[oc] += g;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                dx[xi] += g * k.data[ki];
                                dk[ki] += g * x.data[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (Arr::new(&x.shape, dx), Arr::new(&k.shape, dk), db)
}
