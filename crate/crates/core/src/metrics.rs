//! Image quality scores.
//!
//! No-reference: UIQM (Panetta, Gao and Agaian, 2016), UCIQE (Yang and
//! Sowmya, 2015), CCF (Wang et al., 2018) and mean Sobel edge intensity.
//! These quantize to 8-bit levels first and work on the 0..255 scale.
//! Full-reference: mean angular reproduction error and PSNR, on the values
//! as given.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::io::to_u8;
use crate::regionseg::quantile_sorted;

pub const PSNR_CAP: f64 = 99.0;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Coefficients and block geometry of the no-reference scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// chroma spread, luminance contrast, mean saturation
    pub uciqe_weights: [f64; 3],
    /// UICM, UISM, UIConM
    pub uiqm_weights: [f64; 3],
    /// colorfulness, contrast, fog
    pub ccf_weights: [f64; 3],
    pub block: usize,
    /// Fraction trimmed from each tail in UICM.
    pub uicm_alpha: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            uciqe_weights: [0.4680, 0.2745, 0.2576],
            uiqm_weights: [0.0282, 0.2953, 3.5753],
            ccf_weights: [0.17593, 0.61759, 0.33988],
            block: 8,
            uicm_alpha: 0.1,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = |w: &[f64; 3]| w.iter().all(|v| v.is_finite());
        if !finite(&self.uciqe_weights) || !finite(&self.uiqm_weights) || !finite(&self.ccf_weights) {
            return Err(Error::Config("metric weights must be finite".into()));
        }
        if self.block == 0 {
            return Err(Error::Config("metric block size must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.uicm_alpha) {
            return Err(Error::Config(format!("uicm_alpha {} must lie in [0, 0.5)", self.uicm_alpha)));
        }
        Ok(())
    }
}

/// 8-bit RGB planes on the 0..255 scale.
struct Planes {
    rgb: [Vec<f64>; 3],
    h: usize,
    w: usize,
}

impl Planes {
    fn new(img: &Image) -> Result<Self> {
        let (c, h, w) = img.chw()?;
        if c != 3 {
            return Err(Error::shape("metrics", format!("expected 3 channels, got {c}")));
        }
        let d = img.data();
        let plane = |k: usize| d[k * h * w..(k + 1) * h * w].iter().map(|v| to_u8(*v) as f64).collect();
        Ok(Self { rgb: [plane(0), plane(1), plane(2)], h, w })
    }

    fn luma(&self) -> Vec<f64> {
        let [r, g, b] = &self.rgb;
        (0..self.h * self.w).map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]).collect()
    }
}

/// Sobel gradient magnitude with replicated borders.
fn sobel(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// (max, min) of every whole `b×b` block; trailing partial blocks are dropped.
fn block_extrema(p: &[f64], h: usize, w: usize, b: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for by in 0..h / b {
        for bx in 0..w / b {
            let (mut mx, mut mn) = (f64::NEG_INFINITY, f64::INFINITY);
            for y in by * b..(by + 1) * b {
                for &v in &p[y * w + bx * b..y * w + (bx + 1) * b] {
                    mx = mx.max(v);
                    mn = mn.min(v);
                }
            }
            out.push((mx, mn));
        }
    }
    out
}

/// `2/(k1·k2) · Σ ln(max/min)`, skipping blocks with a zero extreme.
fn eme(p: &[f64], h: usize, w: usize, b: usize) -> f64 {
    let blocks = block_extrema(p, h, w, b);
    let s: f64 = blocks.iter().filter(|(mx, mn)| *mx > 0.0 && *mn > 0.0).map(|(mx, mn)| (mx / mn).ln()).sum();
    2.0 * s / blocks.len() as f64
}

/// `−1/(k1·k2) · Σ α ln α` with `α = (max−min)/(max+min)`.
fn log_amee(p: &[f64], h: usize, w: usize, b: usize) -> f64 {
    let blocks = block_extrema(p, h, w, b);
    let s: f64 = blocks
        .iter()
        .filter(|(mx, mn)| mx - mn > 0.0 && mx + mn > 0.0)
        .map(|(mx, mn)| {
            let a = (mx - mn) / (mx + mn);
            a * a.ln()
        })
        .sum();
    -s / blocks.len() as f64
}

/// Asymmetric alpha-trimmed mean and the spread around it.
fn trimmed_stats(v: &[f64], alpha: f64) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    let lo = (alpha * k as f64).ceil() as usize;
    let hi = (alpha * k as f64).floor() as usize;
    let kept = &s[lo..k - hi];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k as f64;
    (mu, var)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Components of UIQM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UiqmParts {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

pub fn uiqm_parts(img: &Image, cfg: &MetricsConfig) -> Result<UiqmParts> {
    let p = Planes::new(img)?;
    let (h, w, b) = (p.h, p.w, cfg.block);
    if h < b || w < b {
        return Err(Error::InvalidArgument(format!("image {h}×{w} is smaller than one {b}×{b} block")));
    }
    let [r, g, bl] = &p.rgb;
    let rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(g).zip(bl).map(|((r, g), b)| (r + g) / 2.0 - b).collect();
    let (mu_rg, var_rg) = trimmed_stats(&rg, cfg.uicm_alpha);
    let (mu_yb, var_yb) = trimmed_stats(&yb, cfg.uicm_alpha);
    let uicm = -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt();

    let mut uism = 0.0;
    for (c, lam) in p.rgb.iter().zip(LUMA) {
        let edges: Vec<f64> = sobel(c, h, w).iter().zip(c).map(|(e, v)| e * v).collect();
        uism += lam * eme(&edges, h, w, b);
    }
    let uiconm = log_amee(&p.luma(), h, w, b);
    Ok(UiqmParts { uicm, uism, uiconm })
}

pub fn uiqm_with(img: &Image, cfg: &MetricsConfig) -> Result<f64> {
    let p = uiqm_parts(img, cfg)?;
    let [c1, c2, c3] = cfg.uiqm_weights;
    Ok(c1 * p.uicm + c2 * p.uism + c3 * p.uiconm)
}

pub fn uiqm(img: &Image) -> Result<f64> {
    uiqm_with(img, &MetricsConfig::default())
}

// sRGB → XYZ (D65); the reference white is the image of RGB = (1, 1, 1)
const RGB_TO_XYZ: [[f64; 3]; 3] =
    [[0.412453, 0.357580, 0.180423], [0.212671, 0.715160, 0.072169], [0.019334, 0.119193, 0.950227]];

fn srgb_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > 0.008856 {
        t.cbrt()
    } else {
        7.787 * t + 16.0 / 116.0
    }
}

/// CIELab of an sRGB triple in `[0,1]`.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_linear);
    let mut f = [0.0; 3];
    for (k, row) in RGB_TO_XYZ.iter().enumerate() {
        let white: f64 = row.iter().sum();
        let x: f64 = row.iter().zip(&lin).map(|(m, c)| m * c).sum();
        f[k] = lab_f(x / white);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Components of UCIQE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UciqeParts {
    /// Standard deviation of chroma, divided by 100.
    pub chroma_std: f64,
    /// (99th − 1st percentile of L) / 100.
    pub contrast: f64,
    /// Mean of chroma/L, with pixels darker than L = 1 counted as 0.
    pub saturation: f64,
}

pub fn uciqe_parts(img: &Image) -> Result<UciqeParts> {
    let p = Planes::new(img)?;
    let n = p.h * p.w;
    let mut l = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat = 0.0;
    for i in 0..n {
        let [ll, a, b] = rgb_to_lab([p.rgb[0][i] / 255.0, p.rgb[1][i] / 255.0, p.rgb[2][i] / 255.0]);
        let c = (a * a + b * b).sqrt();
        if ll >= 1.0 {
            sat += c / ll;
        }
        l.push(ll);
        chroma.push(c);
    }
    l.sort_by(f64::total_cmp);
    let contrast = (quantile_sorted(&l, 0.99) - quantile_sorted(&l, 0.01)) / 100.0;
    Ok(UciqeParts { chroma_std: mean_std(&chroma).1 / 100.0, contrast, saturation: sat / n as f64 })
}

pub fn uciqe_with(img: &Image, cfg: &MetricsConfig) -> Result<f64> {
    let p = uciqe_parts(img)?;
    let [c1, c2, c3] = cfg.uciqe_weights;
    Ok(c1 * p.chroma_std + c2 * p.contrast + c3 * p.saturation)
}

pub fn uciqe(img: &Image) -> Result<f64> {
    uciqe_with(img, &MetricsConfig::default())
}

/// Components of CCF.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcfParts {
    /// Hasler–Süsstrunk colorfulness of the opponent channels.
    pub colorfulness: f64,
    /// RMS contrast of luminance.
    pub contrast: f64,
    /// `100·(1 − mean dark channel / 255)`; larger means less fog.
    pub fog: f64,
}

pub fn ccf_parts(img: &Image) -> Result<CcfParts> {
    let p = Planes::new(img)?;
    let [r, g, b] = &p.rgb;
    let rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(g).zip(b).map(|((r, g), b)| (r + g) / 2.0 - b).collect();
    let (m_rg, s_rg) = mean_std(&rg);
    let (m_yb, s_yb) = mean_std(&yb);
    let colorfulness = (s_rg * s_rg + s_yb * s_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt();
    let contrast = mean_std(&p.luma()).1;
    let dark: Vec<f64> = (0..p.h * p.w).map(|i| r[i].min(g[i]).min(b[i])).collect();
    let fog = 100.0 * (1.0 - mean_std(&dark).0 / 255.0);
    Ok(CcfParts { colorfulness, contrast, fog })
}

pub fn ccf_with(img: &Image, cfg: &MetricsConfig) -> Result<f64> {
    let p = ccf_parts(img)?;
    let [c1, c2, c3] = cfg.ccf_weights;
    Ok(c1 * p.colorfulness + c2 * p.contrast + c3 * p.fog)
}

pub fn ccf(img: &Image) -> Result<f64> {
    ccf_with(img, &MetricsConfig::default())
}

/// Mean Sobel magnitude of 8-bit luminance.
pub fn edge_intensity(img: &Image) -> Result<f64> {
    let p = Planes::new(img)?;
    Ok(mean_std(&sobel(&p.luma(), p.h, p.w)).0)
}

fn aligned(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean per-pixel angle between RGB vectors, in degrees. Pixels that are
/// black in either image are left out.
pub fn angular_error(enhanced: &Image, reference: &Image) -> Result<f64> {
    aligned("angular_error", enhanced, reference)?;
    let (c, h, w) = enhanced.chw()?;
    if c != 3 {
        return Err(Error::shape("angular_error", format!("expected 3 channels, got {c}")));
    }
    let n = h * w;
    let (e, r) = (enhanced.data(), reference.data());
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        let (mut dot, mut ne, mut nr) = (0.0, 0.0, 0.0);
        for k in 0..3 {
            let (a, b) = (e[k * n + i], r[k * n + i]);
            dot += a * b;
            ne += a * a;
            nr += b * b;
        }
        if ne == 0.0 || nr == 0.0 {
            continue;
        }
        sum += (dot / (ne.sqrt() * nr.sqrt())).clamp(-1.0, 1.0).acos().to_degrees();
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("angular_error: every pixel is black in one of the images".into()));
    }
    Ok(sum / count as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(enhanced: &Image, reference: &Image) -> Result<f64> {
    aligned("psnr", enhanced, reference)?;
    let n = enhanced.numel() as f64;
    let mse = enhanced.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Scores of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_path: String,
    pub uiqm: f64,
    pub uciqe: f64,
    pub ccf: f64,
    pub edge: f64,
    pub angular_error: Option<f64>,
    pub psnr: Option<f64>,
}

pub const CSV_HEADER: [&str; 7] = ["image_path", "uiqm", "uciqe", "ccf", "edge", "angular_error", "psnr"];

impl MetricRow {
    /// Metric name → value, in CSV column order.
    pub fn values(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("uiqm", Some(self.uiqm)),
            ("uciqe", Some(self.uciqe)),
            ("ccf", Some(self.ccf)),
            ("edge", Some(self.edge)),
            ("angular_error", self.angular_error),
            ("psnr", self.psnr),
        ]
    }
}

pub fn evaluate_image(
    label: impl Into<String>,
    img: &Image,
    reference: Option<&Image>,
    cfg: &MetricsConfig,
) -> Result<MetricRow> {
    let (angular_error, psnr) = match reference {
        Some(r) => (Some(angular_error(img, r)?), Some(psnr(img, r)?)),
        None => (None, None),
    };
    Ok(MetricRow {
        image_path: label.into(),
        uiqm: uiqm_with(img, cfg)?,
        uciqe: uciqe_with(img, cfg)?,
        ccf: ccf_with(img, cfg)?,
        edge: edge_intensity(img)?,
        angular_error,
        psnr,
    })
}

/// Per-image rows and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MetricReport {
    /// Column means; a reference column is averaged over the rows that have it.
    pub fn means(&self) -> MetricRow {
        let col = |f: fn(&MetricRow) -> Option<f64>| mean_opt(self.rows.iter().map(f));
        MetricRow {
            image_path: "mean".into(),
            uiqm: col(|r| Some(r.uiqm)).unwrap_or(f64::NAN),
            uciqe: col(|r| Some(r.uciqe)).unwrap_or(f64::NAN),
            ccf: col(|r| Some(r.ccf)).unwrap_or(f64::NAN),
            edge: col(|r| Some(r.edge)).unwrap_or(f64::NAN),
            angular_error: col(|r| r.angular_error),
            psnr: col(|r| r.psnr),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for row in self.rows.iter().chain(std::iter::once(&self.means())) {
            let mut rec = vec![row.image_path.clone()];
            rec.extend(row.values().iter().map(|(_, v)| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
