//! Straight-line reference implementations used as test oracles. They work on
//! plain `Vec<f64>` buffers with explicit loops and share no code with the crate.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uierl::diff::ParamStore;
use uierl::interact::{Aggregate, Cli, Interaction, Pli, PliResidual};
use uierl::nn::{Conv2d, ConvInRelu};
use uierl::Tensor;

/// `C×H×W` buffer.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Self { c, h, w, v }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self::new(s[0], s[1], s[2], t.data().to_vec())
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.v[(ch * self.h + y) * self.w + x]
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.c, self.h, self.w], self.v.clone()).unwrap()
    }
}

pub fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Map {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Map::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(m: &Map) -> Map {
    Map { v: m.v.iter().map(|x| x.max(0.0)).collect(), ..m.clone() }
}

pub fn add(a: &Map, b: &Map) -> Map {
    Map { v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(), ..a.clone() }
}

pub fn mul(a: &Map, b: &Map) -> Map {
    Map { v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect(), ..a.clone() }
}

pub fn concat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map::new(a.c + b.c, a.h, a.w, v)
}

/// Zero-padded cross-correlation.
pub fn conv(x: &Map, weight: &[f64], bias: Option<&[f64]>, cout: usize, k: usize, stride: usize, pad: usize) -> Map {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias.map_or(0.0, |b| b[o]);
                for i in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                continue;
                            }
                            s += weight[((o * x.c + i) * k + ky) * k + kx] * x.at(i, y as usize, xx as usize);
                        }
                    }
                }
                v[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    Map::new(cout, oh, ow, v)
}

pub fn instance_norm(x: &Map, gamma: &[f64], beta: &[f64], eps: f64) -> Map {
    let hw = x.h * x.w;
    let mut v = vec![0.0; x.v.len()];
    for ch in 0..x.c {
        let xs = &x.v[ch * hw..(ch + 1) * hw];
        let mean = xs.iter().sum::<f64>() / hw as f64;
        let var = xs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / hw as f64;
        for i in 0..hw {
            v[ch * hw + i] = gamma[ch] * (xs[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    Map { v, ..x.clone() }
}

pub fn global_avg(x: &Map) -> Map {
    let hw = (x.h * x.w) as f64;
    Map::new(x.c, 1, 1, (0..x.c).map(|ch| x.v[ch * x.h * x.w..(ch + 1) * x.h * x.w].iter().sum::<f64>() / hw).collect())
}

/// Broadcasts a `C×1×1` map over `h×w`.
pub fn broadcast(g: &Map, h: usize, w: usize) -> Map {
    Map::new(g.c, h, w, (0..g.c * h * w).map(|i| g.v[i / (h * w)]).collect())
}

pub fn apply_conv(ps: &ParamStore<f64>, c: &Conv2d, x: &Map) -> Map {
    let w = ps.get(c.weight);
    let s = w.shape();
    conv(x, w.data(), c.bias.map(|b| ps.get(b).data()), s[0], s[2], c.stride, c.pad)
}

pub fn apply_cir(ps: &ParamStore<f64>, u: &ConvInRelu, x: &Map) -> Map {
    let y = apply_conv(ps, &u.conv, x);
    relu(&instance_norm(&y, ps.get(u.norm.gamma).data(), ps.get(u.norm.beta).data(), 1e-5))
}

/// Channel gate: `W = σ(excite(relu(squeeze(GAP(relu(pre(f))))))))`, out = `W⊙f + f`.
pub fn cli(ps: &ParamStore<f64>, p: &Cli, f: &Map) -> Map {
    let s = global_avg(&relu(&apply_conv(ps, &p.pre, f)));
    let e = apply_conv(ps, &p.excite, &relu(&apply_conv(ps, &p.squeeze, &s)));
    let w = broadcast(&Map { v: e.v.iter().map(|x| sigmoid(*x)).collect(), ..e }, f.h, f.w);
    add(&mul(&w, f), f)
}

/// Pixel gate: `W = σ(expand(relu(reduce(f_cli))))`, out = `W⊙f_cli + residual`.
pub fn pli(ps: &ParamStore<f64>, p: &Pli, f_cli: &Map, residual: &Map) -> Map {
    let e = apply_conv(ps, &p.expand, &relu(&apply_conv(ps, &p.reduce, f_cli)));
    let w = Map { v: e.v.iter().map(|x| sigmoid(*x)).collect(), ..e };
    add(&mul(&w, f_cli), residual)
}

pub fn interaction(ps: &ParamStore<f64>, m: &Interaction, first: &Map, second: &Map) -> Map {
    let f = apply_cir(ps, &m.fli, &concat(first, second));
    let Some(c) = &m.cli else { return f };
    let fc = cli(ps, c, &f);
    let Some(p) = &m.pli else { return fc };
    let r = match m.residual {
        PliResidual::Fli => f.clone(),
        PliResidual::Cli => fc.clone(),
    };
    pli(ps, p, &fc, &r)
}

pub fn aggregate(ps: &ParamStore<f64>, a: &Aggregate, feats: &[Map]) -> Map {
    let n = feats.len() as f64;
    let mut mean = feats[0].clone();
    for i in 0..mean.v.len() {
        mean.v[i] = feats.iter().map(|f| f.v[i]).sum::<f64>() / n;
    }
    apply_cir(ps, &a.unit, &mean)
}

/// `n×m` row-major matrix product.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// `σ((N P1)(N P2)ᵀ)`.
pub fn adjacency(nodes: &[f64], p1: &[f64], p2: &[f64], n: usize, c: usize, d: usize) -> Vec<f64> {
    let a = matmul(nodes, p1, n, c, d);
    let b = matmul(nodes, p2, n, c, d);
    matmul(&a, &transpose(&b, n, d), n, d, n).into_iter().map(sigmoid).collect()
}

/// `Â_ij = (A + I)_ij / sqrt(d_i d_j)`.
pub fn normalized(a: &[f64], n: usize) -> Vec<f64> {
    let mut at = a.to_vec();
    for i in 0..n {
        at[i * n + i] += 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| at[i * n..(i + 1) * n].iter().sum()).collect();
    (0..n * n).map(|k| at[k] / (d[k / n] * d[k % n]).sqrt()).collect()
}

/// Half-pixel bilinear resampling (edge-clamped).
pub fn bilinear(x: &Map, oh: usize, ow: usize) -> Map {
    let src = |o: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inn - 1);
        let i1 = (i0 + 1).min(inn - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut v = Vec::with_capacity(x.c * oh * ow);
    for ch in 0..x.c {
        for oy in 0..oh {
            let (y0, y1, fy) = src(oy, x.h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = src(ox, x.w, ow);
                let top = x.at(ch, y0, x0) * (1.0 - fx) + x.at(ch, y0, x1) * fx;
                let bottom = x.at(ch, y1, x0) * (1.0 - fx) + x.at(ch, y1, x1) * fx;
                v.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Map::new(x.c, oh, ow, v)
}

/// `max_pool_k + avg_pool_k`.
pub fn dual_pool(x: &Map, k: usize) -> Map {
    let (oh, ow) = (x.h / k, x.w / k);
    let mut v = Vec::with_capacity(x.c * oh * ow);
    for ch in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let cell: Vec<f64> = (0..k * k).map(|t| x.at(ch, oy * k + t / k, ox * k + t % k)).collect();
                let mx = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                v.push(mx + cell.iter().sum::<f64>() / (k * k) as f64);
            }
        }
    }
    Map::new(x.c, oh, ow, v)
}

/// Graph propagation on pooled nodes: `softmax_c(Â·relu(Â·N·W1)·W2)`, upsampled.
pub fn graph_branch(f: &Map, k: usize, p1: &[f64], p2: &[f64], w1: &[f64], w2: &[f64], d: usize, hidden: usize) -> Map {
    let pooled = if k == 1 { f.clone() } else { dual_pool(f, k) };
    let (c, n) = (f.c, pooled.h * pooled.w);
    let nodes = transpose(&pooled.v, c, n);
    let a_hat = normalized(&adjacency(&nodes, p1, p2, n, c, d), n);
    let h1: Vec<f64> =
        matmul(&a_hat, &matmul(&nodes, w1, n, c, hidden), n, n, hidden).into_iter().map(|x| x.max(0.0)).collect();
    let h2 = matmul(&a_hat, &matmul(&h1, w2, n, hidden, c), n, n, c);
    let mut soft = vec![0.0; n * c];
    for i in 0..n {
        let row = &h2[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        for j in 0..c {
            soft[i * c + j] = (row[j] - mx).exp() / z;
        }
    }
    let out = Map::new(c, pooled.h, pooled.w, transpose(&soft, n, c));
    if k == 1 {
        out
    } else {
        bilinear(&out, f.h, f.w)
    }
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

pub mod metrics {
    //! Metric definitions written out pixel by pixel on 0..255 values.

    fn q(v: f64) -> f64 {
        (v.clamp(0.0, 1.0) * 255.0).round()
    }

    /// Image as `[y][x][rgb]` on 0..255.
    pub fn grid(data: &[f64], h: usize, w: usize) -> Vec<Vec<[f64; 3]>> {
        (0..h).map(|y| (0..w).map(|x| [0, 1, 2].map(|c| q(data[(c * h + y) * w + x]))).collect()).collect()
    }

    fn luma(p: [f64; 3]) -> f64 {
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    }

    fn sobel_at(g: &[Vec<f64>], y: usize, x: usize) -> f64 {
        let h = g.len() as isize;
        let w = g[0].len() as isize;
        let px = |dy: isize, dx: isize| {
            let yy = (y as isize + dy).clamp(0, h - 1) as usize;
            let xx = (x as isize + dx).clamp(0, w - 1) as usize;
            g[yy][xx]
        };
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let mut gx = 0.0;
        let mut gy = 0.0;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                gx += kx[(dy + 1) as usize][(dx + 1) as usize] * px(dy, dx);
                gy += kx[(dx + 1) as usize][(dy + 1) as usize] * px(dy, dx);
            }
        }
        (gx * gx + gy * gy).sqrt()
    }

    fn sobel(g: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..g.len()).map(|y| (0..g[0].len()).map(|x| sobel_at(g, y, x)).collect()).collect()
    }

    fn blocks(g: &[Vec<f64>], b: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for by in 0..g.len() / b {
            for bx in 0..g[0].len() / b {
                let mut vals = Vec::new();
                for row in &g[by * b..(by + 1) * b] {
                    vals.extend_from_slice(&row[bx * b..(bx + 1) * b]);
                }
                let mx = vals.iter().cloned().fold(f64::MIN, f64::max);
                let mn = vals.iter().cloned().fold(f64::MAX, f64::min);
                out.push((mx, mn));
            }
        }
        out
    }

    fn plane(img: &[Vec<[f64; 3]>], c: usize) -> Vec<Vec<f64>> {
        img.iter().map(|r| r.iter().map(|p| p[c]).collect()).collect()
    }

    pub fn uiqm(img: &[Vec<[f64; 3]>]) -> f64 {
        let pixels: Vec<[f64; 3]> = img.iter().flatten().copied().collect();
        let k = pixels.len();
        let stat = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = (0.1 * k as f64).ceil() as usize;
            let hi = (0.1 * k as f64).floor() as usize;
            let mut s = 0.0;
            for x in &v[lo..k - hi] {
                s += x;
            }
            let mu = s / (k - lo - hi) as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / k as f64;
            (mu, var)
        };
        let (mrg, vrg) = stat(pixels.iter().map(|p| p[0] - p[1]).collect());
        let (myb, vyb) = stat(pixels.iter().map(|p| (p[0] + p[1]) / 2.0 - p[2]).collect());
        let uicm = -0.0268 * (mrg.powi(2) + myb.powi(2)).sqrt() + 0.1586 * (vrg + vyb).sqrt();

        let mut uism = 0.0;
        for (c, lam) in [0.299, 0.587, 0.114].into_iter().enumerate() {
            let p = plane(img, c);
            let e = sobel(&p);
            let weighted: Vec<Vec<f64>> =
                e.iter().zip(&p).map(|(er, pr)| er.iter().zip(pr).map(|(a, b)| a * b).collect()).collect();
            let bl = blocks(&weighted, 8);
            let mut s = 0.0;
            for (mx, mn) in &bl {
                if *mx > 0.0 && *mn > 0.0 {
                    s += (mx / mn).ln();
                }
            }
            uism += lam * 2.0 / bl.len() as f64 * s;
        }

        let gray: Vec<Vec<f64>> = img.iter().map(|r| r.iter().map(|p| luma(*p)).collect()).collect();
        let bl = blocks(&gray, 8);
        let mut s = 0.0;
        for (mx, mn) in &bl {
            if mx - mn > 0.0 {
                let a = (mx - mn) / (mx + mn);
                s += a * a.ln();
            }
        }
        let uiconm = -s / bl.len() as f64;
        0.0282 * uicm + 0.2953 * uism + 3.5753 * uiconm
    }

    fn lab(p: [f64; 3]) -> [f64; 3] {
        let lin = p.map(|v| {
            let c = v / 255.0;
            if c <= 0.04045 {
                c / 12.92
            } else {
                ((c + 0.055) / 1.055).powf(2.4)
            }
        });
        let x = (0.412453 * lin[0] + 0.357580 * lin[1] + 0.180423 * lin[2]) / 0.950456;
        let y = (0.212671 * lin[0] + 0.715160 * lin[1] + 0.072169 * lin[2]) / 1.0;
        let z = (0.019334 * lin[0] + 0.119193 * lin[1] + 0.950227 * lin[2]) / 1.088754;
        let f = |t: f64| if t > 0.008856 { t.powf(1.0 / 3.0) } else { 7.787 * t + 16.0 / 116.0 };
        [116.0 * f(y) - 16.0, 500.0 * (f(x) - f(y)), 200.0 * (f(y) - f(z))]
    }

    fn percentile(sorted: &[f64], p: f64) -> f64 {
        let r = p / 100.0 * (sorted.len() - 1) as f64;
        let i = r.floor() as usize;
        if i + 1 >= sorted.len() {
            return sorted[sorted.len() - 1];
        }
        sorted[i] * (1.0 - (r - i as f64)) + sorted[i + 1] * (r - i as f64)
    }

    pub fn uciqe(img: &[Vec<[f64; 3]>]) -> f64 {
        let labs: Vec<[f64; 3]> = img.iter().flatten().map(|p| lab(*p)).collect();
        let n = labs.len() as f64;
        let chroma: Vec<f64> = labs.iter().map(|l| l[1].hypot(l[2])).collect();
        let mc = chroma.iter().sum::<f64>() / n;
        let sc = (chroma.iter().map(|c| (c - mc).powi(2)).sum::<f64>() / n).sqrt() / 100.0;
        let mut l: Vec<f64> = labs.iter().map(|x| x[0]).collect();
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let con = (percentile(&l, 99.0) - percentile(&l, 1.0)) / 100.0;
        let sat = labs.iter().zip(&chroma).map(|(x, c)| if x[0] < 1.0 { 0.0 } else { c / x[0] }).sum::<f64>() / n;
        0.4680 * sc + 0.2745 * con + 0.2576 * sat
    }

    pub fn ccf(img: &[Vec<[f64; 3]>]) -> f64 {
        let px: Vec<[f64; 3]> = img.iter().flatten().copied().collect();
        let n = px.len() as f64;
        let ms = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / n;
            (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        let (mrg, srg) = ms(px.iter().map(|p| p[0] - p[1]).collect());
        let (myb, syb) = ms(px.iter().map(|p| 0.5 * (p[0] + p[1]) - p[2]).collect());
        let colorfulness = (srg * srg + syb * syb).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt();
        let contrast = ms(px.iter().map(|p| luma(*p)).collect()).1;
        let dark = px.iter().map(|p| p[0].min(p[1]).min(p[2])).sum::<f64>() / n;
        let fog = 100.0 * (1.0 - dark / 255.0);
        0.17593 * colorfulness + 0.61759 * contrast + 0.33988 * fog
    }

    pub fn edge(img: &[Vec<[f64; 3]>]) -> f64 {
        let gray: Vec<Vec<f64>> = img.iter().map(|r| r.iter().map(|p| luma(*p)).collect()).collect();
        let e = sobel(&gray);
        e.iter().flatten().sum::<f64>() / (gray.len() * gray[0].len()) as f64
    }

    pub fn angular(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let n = h * w;
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            let u = [a[i], a[n + i], a[2 * n + i]];
            let v = [b[i], b[n + i], b[2 * n + i]];
            let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if nu == 0.0 || nv == 0.0 {
                continue;
            }
            let cos = ((u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv)).clamp(-1.0, 1.0);
            total += cos.acos() * 180.0 / std::f64::consts::PI;
            count += 1.0;
        }
        total / count
    }

    pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
        let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        if mse == 0.0 {
            99.0
        } else {
            (-10.0 * mse.log10()).min(99.0)
        }
    }
}
