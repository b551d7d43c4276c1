//! Depth-based region segmentation by scalar K-means, and the mask algebra
//! that splits images into regions and recombines per-region features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 100;
/// Depth ranges narrower than this are treated as constant.
pub const MIN_RANGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { k: DEFAULT_K, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

/// Hard partition of an `H×W` grid into `K` regions, ordered near to far.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    labels: Vec<u8>,
    h: usize,
    w: usize,
    /// Cluster centers; ascending over the non-empty regions.
    pub centers: Vec<f64>,
    /// `empty[k]` is set when region `k` holds no pixel. Empty regions come last.
    pub empty: Vec<bool>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

impl RegionMasks {
    /// Builds masks directly from a label map.
    pub fn from_labels(labels: Vec<u8>, h: usize, w: usize, k: usize) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape("region_masks", format!("{} labels for {h}×{w}", labels.len())));
        }
        if k == 0 || k > 255 {
            return Err(Error::InvalidArgument(format!("region count {k} outside [1, 255]")));
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= k) {
            return Err(Error::InvalidArgument(format!("label {l} not below K = {k}")));
        }
        let mut empty = vec![true; k];
        for &l in &labels {
            empty[l as usize] = false;
        }
        Ok(Self { labels, h, w, centers: (0..k).map(|i| i as f64).collect(), empty, inertia: vec![], iterations: 0 })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Region index per pixel, row-major.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, k: usize) -> usize {
        self.labels.iter().filter(|l| **l as usize == k).count()
    }

    /// Binary indicator of region `k` as `1×H×W`.
    pub fn mask<T: Scalar>(&self, k: usize) -> Tensor<T> {
        let data = self.labels.iter().map(|l| if *l as usize == k { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[1, self.h, self.w], data).expect("label count matches grid")
    }

    fn check(&self, op: &'static str, t_shape: &[usize]) -> Result<()> {
        if t_shape.len() != 3 || t_shape[1] != self.h || t_shape[2] != self.w {
            return Err(Error::shape(op, format!("tensor {t_shape:?} against masks {}×{}", self.h, self.w)));
        }
        Ok(())
    }
}

/// Linearly interpolated quantile of sorted values (numpy's default rule).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Index of the nearest center; ties go to the lower index.
fn nearest(v: f64, centers: &[f64]) -> (usize, f64) {
    let mut best = (0, (v - centers[0]).abs());
    for (j, c) in centers.iter().enumerate().skip(1) {
        let d = (v - c).abs();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's K-means on scalar values laid out on an `h×w` grid.
pub fn kmeans_values(values: &[f64], h: usize, w: usize, opts: &KMeansOptions) -> Result<RegionMasks> {
    let k = opts.k;
    if values.len() != h * w || values.is_empty() {
        return Err(Error::shape("kmeans", format!("{} values for {h}×{w}", values.len())));
    }
    if k == 0 || k > 255 {
        return Err(Error::InvalidArgument(format!("K = {k} outside [1, 255]")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite clustering value {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if hi - lo < MIN_RANGE {
        let mut m = RegionMasks::from_labels(vec![0; h * w], h, w, k)?;
        m.centers = vec![lo; k];
        return Ok(m);
    }

    let mut centers: Vec<f64> = (0..k).map(|j| quantile_sorted(&sorted, (2 * j + 1) as f64 / (2 * k) as f64)).collect();
    let mut labels = vec![0u8; values.len()];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        // offsets from the first member keep plateau means exact
        let mut pivot = vec![0.0; k];
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        let mut sse = 0.0;
        for (l, &v) in labels.iter_mut().zip(values) {
            let (j, d) = nearest(v, &centers);
            *l = j as u8;
            if cnt[j] == 0 {
                pivot[j] = v;
            }
            sum[j] += v - pivot[j];
            cnt[j] += 1;
            sse += d * d;
        }
        // reseed each empty cluster at the value farthest from its nearest center
        let mut reseeded = false;
        for j in 0..k {
            if cnt[j] > 0 {
                continue;
            }
            let (far, dist) = values.iter().map(|&v| (v, nearest(v, &centers).1)).fold((0.0, -1.0), |acc, x| {
                if x.1 > acc.1 {
                    x
                } else {
                    acc
                }
            });
            if dist > 0.0 {
                centers[j] = far;
                reseeded = true;
            }
        }
        if reseeded {
            centers.sort_by(f64::total_cmp);
            continue;
        }
        inertia.push(sse);
        let mut moved = 0.0f64;
        for j in 0..k {
            if cnt[j] > 0 {
                let c = pivot[j] + sum[j] / cnt[j] as f64;
                moved = moved.max((c - centers[j]).abs());
                centers[j] = c;
            }
        }
        if moved < opts.tol {
            break;
        }
    }
    // final assignment against the final centers so the result is a fixed point
    let mut cnt = vec![0usize; k];
    let mut sse = 0.0;
    for (l, &v) in labels.iter_mut().zip(values) {
        let (j, d) = nearest(v, &centers);
        *l = j as u8;
        cnt[j] += 1;
        sse += d * d;
    }
    inertia.push(sse);

    // non-empty regions ascending by center, empty ones last
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (cnt[a] == 0).cmp(&(cnt[b] == 0)).then(centers[a].total_cmp(&centers[b])).then(a.cmp(&b)));
    let mut remap = vec![0u8; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u8;
    }
    labels.iter_mut().for_each(|l| *l = remap[*l as usize]);
    let last_center = order.iter().filter(|&&j| cnt[j] > 0).map(|&j| centers[j]).next_back().unwrap_or(lo);
    Ok(RegionMasks {
        labels,
        h,
        w,
        centers: order.iter().map(|&j| if cnt[j] > 0 { centers[j] } else { last_center }).collect(),
        empty: order.iter().map(|&j| cnt[j] == 0).collect(),
        inertia,
        iterations,
    })
}

/// Clusters depth values into `K` near-to-far regions.
pub fn kmeans_depth(depth: &DepthMap, opts: &KMeansOptions) -> Result<RegionMasks> {
    let (h, w) = depth.hw();
    kmeans_values(depth.data(), h, w, opts)
}

/// Clusters gray intensity (channel mean) instead of depth.
pub fn kmeans_gray(image: &Image, opts: &KMeansOptions) -> Result<RegionMasks> {
    let (c, h, w) = image.chw()?;
    let d = image.data();
    let gray: Vec<f64> = (0..h * w).map(|p| (0..c).map(|ch| d[ch * h * w + p]).sum::<f64>() / c as f64).collect();
    kmeans_values(&gray, h, w, opts)
}

/// `I_k = I ⊙ M_k` for every region.
pub fn extract_regions<T: Scalar>(image: &Tensor<T>, masks: &RegionMasks) -> Result<Vec<Tensor<T>>> {
    masks.check("extract_regions", image.shape())?;
    let hw = masks.h * masks.w;
    Ok((0..masks.k())
        .map(|k| {
            let mut out = image.clone();
            for plane in out.data_mut().chunks_mut(hw) {
                for (v, l) in plane.iter_mut().zip(&masks.labels) {
                    if *l as usize != k {
                        *v = T::zero();
                    }
                }
            }
            out
        })
        .collect())
}

/// `Σ_k F_k ⊙ M_k`; a missing feature map contributes zero.
pub fn combine_regions<T: Scalar>(features: &[Option<Tensor<T>>], masks: &RegionMasks) -> Result<Tensor<T>> {
    if features.len() != masks.k() {
        return Err(Error::shape("combine_regions", format!("{} feature maps for K = {}", features.len(), masks.k())));
    }
    let first = features
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidArgument("combine_regions: every feature map is missing".into()))?;
    let shape = first.shape().to_vec();
    masks.check("combine_regions", &shape)?;
    let hw = masks.h * masks.w;
    let mut out = Tensor::zeros(&shape);
    for (k, f) in features.iter().enumerate() {
        let Some(f) = f else { continue };
        if f.shape() != shape.as_slice() {
            return Err(Error::shape("combine_regions", format!("{:?} vs {:?}", f.shape(), shape)));
        }
        for (o, s) in out.data_mut().chunks_mut(hw).zip(f.data().chunks(hw)) {
            for ((o, s), l) in o.iter_mut().zip(s).zip(&masks.labels) {
                if *l as usize == k {
                    *o = *s;
                }
            }
        }
    }
    Ok(out)
}
