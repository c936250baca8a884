//! Independent reference implementations used only by tests. Nothing here
//! calls into the crate's numeric kernels.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Direct HWC convolution with zero padding; weights `[out][kh][kw][in]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    weights: &[f64],
    bias: &[f64],
    (kh, kw): (usize, usize),
    cout: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..cout {
                let mut acc = bias.get(o).copied().unwrap_or(0.0);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..cin {
                            let xv = x[(iy as usize * w + ix as usize) * cin + c];
                            let wv = weights[((o * kh + ky) * kw + kx) * cin + c];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + o] = acc;
            }
        }
    }
    (out, (oh, ow))
}

pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `O(n²)` DFT power spectrum for bins `0..=n/2`.
pub fn dft_power(frame: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * t) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

pub fn htk_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn htk_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangle edges (lo, centre, hi) in Hz for `n_mels` bands.
pub fn mel_triangles(n_mels: usize, fmin: f64, fmax: f64) -> Vec<(f64, f64, f64)> {
    let (a, b) = (htk_mel(fmin), htk_mel(fmax));
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| htk_hz(a + (b - a) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels).map(|m| (pts[m], pts[m + 1], pts[m + 2])).collect()
}

/// Log mel energies of one frame of normalized samples.
pub fn reference_log_mel_frame(samples: &[f64], n_fft: usize, rate: f64, tri: &[(f64, f64, f64)]) -> Vec<f64> {
    let win = samples.len();
    let frame: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(n, &s)| s * (0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()))
        .collect();
    let power = dft_power(&frame, n_fft);
    tri.iter()
        .map(|&(lo, c, hi)| {
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * rate / n_fft as f64;
                    let wgt = if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    };
                    wgt * p
                })
                .sum();
            (e + 1e-6).ln()
        })
        .collect()
}

/// Row-major `W[i][j]` head: logits `z_j = b_j + Σ_i f_i W[i][j]`.
pub fn logits(w: &[f64], b: &[f64], f: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n)
        .map(|j| b[j] + f.iter().enumerate().map(|(i, fi)| fi * w[i * n + j]).sum::<f64>())
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Central differences of `loss` over the flattened parameter vector.
pub fn central_diff(params: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + step;
            let up = loss(&p);
            p[k] = orig - step;
            let down = loss(&p);
            p[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Full-batch softmax regression by plain gradient descent, run until the
/// mean loss stops improving by more than `tol` per epoch.
pub fn fit_softmax_regression(
    xs: &[&[f64]],
    ys: &[usize],
    classes: usize,
    lr: f64,
    max_epochs: usize,
    tol: f64,
) -> (Vec<f64>, Vec<f64>) {
    let d = xs[0].len();
    let (mut w, mut b) = (vec![0.0; d * classes], vec![0.0; classes]);
    let mut last = f64::INFINITY;
    for _ in 0..max_epochs {
        let (mut gw, mut gb) = (vec![0.0; d * classes], vec![0.0; classes]);
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let p = softmax(&logits(&w, &b, x));
            loss -= p[y].max(1e-300).ln();
            for j in 0..classes {
                let g = p[j] - if j == y { 1.0 } else { 0.0 };
                gb[j] += g;
                for i in 0..d {
                    gw[i * classes + j] += x[i] * g;
                }
            }
        }
        let n = xs.len() as f64;
        for (w, g) in w.iter_mut().zip(&gw) {
            *w -= lr * g / n;
        }
        for (b, g) in b.iter_mut().zip(&gb) {
            *b -= lr * g / n;
        }
        loss /= n;
        if last - loss < tol {
            break;
        }
        last = loss;
    }
    (w, b)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Prints one acceptance line and returns whether the criterion passed.
/// Writes through the stdout handle so the line survives libtest's capture.
pub fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    use std::io::Write;
    let line = format!("ACCEPTANCE {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}
