//! Direct-formula oracles shared by the integration tests. Each one is a
//! plain nested-loop transcription, independent of the tape kernels.
#![allow(dead_code)]

pub fn conv2d(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[((co * c_in + ci) * k + ky) * k + kx]
                                * input[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Content parsing written straight from the summation over offsets
/// `w, h in -r..=r` and channels. `m_s` is `[C, H, W]` (row-major), `w_k`
/// is `[sigma][sigma][C]` indexed `[w + r][h + r][c]`. Target `(m, n)` is
/// column `m`, row `n`.
pub fn content_parse(m_s: &[f64], c: usize, h: usize, w: usize, w_k: &[f64], sigma: usize) -> Vec<f64> {
    let r = (sigma / 2) as isize;
    let mut out = vec![0.0; h * w];
    for n in 0..h as isize {
        for m in 0..w as isize {
            let mut acc = 0.0;
            for dw in -r..=r {
                for dh in -r..=r {
                    for ch in 0..c {
                        let (col, row) = (m + dw, n + dh);
                        if col < 0 || row < 0 || col >= w as isize || row >= h as isize {
                            continue;
                        }
                        let kv = w_k[(((dw + r) as usize) * sigma + (dh + r) as usize) * c + ch];
                        acc += kv * m_s[(ch * h + row as usize) * w + col as usize];
                    }
                }
            }
            out[n as usize * w + m as usize] = acc;
        }
    }
    out
}

/// Mapping by direct double summation over the map grid with the full 2-D
/// Gaussian, evaluated per output pixel. Returns `(mx, my)` row-major.
pub fn mapping(a: &[f64], map_h: usize, map_w: usize, out_h: usize, out_w: usize, std: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mx = vec![0.0; out_h * out_w];
    let mut my = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let u = x as f64 / out_w as f64;
            let v = y as f64 / out_h as f64;
            let (mut num_x, mut num_y, mut den) = (0.0, 0.0, 0.0);
            for hh in 1..=map_h {
                for ww in 1..=map_w {
                    let gx = ww as f64 / map_w as f64;
                    let gy = hh as f64 / map_h as f64;
                    let d = (-((u - gx).powi(2) + (v - gy).powi(2)) / (2.0 * std * std)).exp();
                    let wgt = a[(hh - 1) * map_w + (ww - 1)] * d;
                    num_x += wgt * gx;
                    num_y += wgt * gy;
                    den += wgt;
                }
            }
            mx[y * out_w + x] = num_x / den;
            my[y * out_w + x] = num_y / den;
        }
    }
    (mx, my)
}

/// Four-neighbour bilinear interpolation at `(mx*W, my*H)`, clamped.
pub fn bilinear(image: &[f64], c: usize, h: usize, w: usize, mx: &[f64], my: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        let px = (mx[p] * w as f64).clamp(0.0, (w - 1) as f64);
        let py = (my[p] * h as f64).clamp(0.0, (h - 1) as f64);
        for ch in 0..c {
            let mut acc = 0.0;
            for j in [py.floor() as usize, py.floor() as usize + 1] {
                for i in [px.floor() as usize, px.floor() as usize + 1] {
                    if i >= w || j >= h {
                        continue;
                    }
                    let wp = (1.0 - (px - i as f64).abs()).max(0.0) * (1.0 - (py - j as f64).abs()).max(0.0);
                    acc += wp * image[(ch * h + j) * w + i];
                }
            }
            out[ch * h * w + p] = acc;
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn instance_norm(x: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let n = x.len() / c;
    let mut out = Vec::new();
    for ch in x.chunks(n) {
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        out.extend(ch.iter().map(|v| (v - mean) / (var + eps).sqrt()));
    }
    out
}

pub fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
}

pub fn gap(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    x.chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Recall@K by sorting every candidate list in full: the query's candidates
/// ordered by (cosine distance, id), hit if a same-class item is in the top k.
/// Queries without another member of their class are skipped.
pub fn brute_recall(embeddings: &[Vec<f32>], labels: &[usize], ids: &[usize], k: usize) -> f64 {
    let cos = |a: &[f32], b: &[f32]| {
        let na = a.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        let nb = b.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 1.0;
        }
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
    };
    let (mut hits, mut queries) = (0usize, 0usize);
    for q in 0..embeddings.len() {
        let mut cands: Vec<(f64, usize, usize)> = (0..embeddings.len())
            .filter(|&j| j != q)
            .map(|j| (cos(&embeddings[q], &embeddings[j]), ids[j], labels[j]))
            .collect();
        if !cands.iter().any(|c| c.2 == labels[q]) {
            continue;
        }
        queries += 1;
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if cands.iter().take(k).any(|c| c.2 == labels[q]) {
            hits += 1;
        }
    }
    if queries == 0 {
        0.0
    } else {
        hits as f64 / queries as f64
    }
}
