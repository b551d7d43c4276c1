//! File formats: 8-bit RGB PNG, 16-bit binary PGM depth, label-map PNG and
//! scene directories.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Image, JitterSpec, SceneBatch, View, ViewRecord, WaterParams};
use crate::regionseg::RegionMasks;
use crate::tensor::Tensor;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Rounds every value to the nearest 8-bit level (values stay in `[0,1]`).
pub fn quantize8(img: &Image) -> Image {
    img.map(|v| to_u8(v) as f64 / 255.0)
}

/// Rounds every value to the nearest 16-bit level.
pub fn quantize16(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| to_u16(v) as f64 / 65535.0)
}

fn write_png_raw(path: &Path, bytes: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PngEncoder::new(&mut out)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes a `3×H×W` image in `[0,1]` as 8-bit RGB.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::shape("write_png", format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            bytes.push(to_u8(d[ch * h * w + p]));
        }
    }
    write_png_raw(path, &bytes, w, h, ExtendedColorType::Rgb8)
}

/// Reads any PNG as RGB into `[0,1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = raw[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a depth map as binary 16-bit PGM (big-endian samples, maxval 65535).
pub fn write_pgm16(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.hw();
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in depth.data() {
        bytes.extend_from_slice(&to_u16(v).to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm16(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("invalid maxval"));
    }
    let wide = maxval > 255;
    let need = h * w * if wide { 2 } else { 1 };
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let data = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).collect()
    } else {
        body.iter().map(|&b| b as f64 / maxval as f64).collect()
    };
    DepthMap::new(Tensor::from_vec(&[1, h, w], data)?)
}

/// Region labels `0..K` as an 8-bit grayscale PNG.
pub fn write_label_png(path: &Path, masks: &RegionMasks) -> Result<()> {
    let (h, w) = masks.hw();
    write_png_raw(path, masks.labels(), w, h, ExtendedColorType::L8)
}

/// Metadata stored next to a synthesized scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub seed: u64,
    pub water: WaterParams,
    pub jitter: JitterSpec,
    pub views: Vec<ViewRecord>,
}

pub fn view_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("view_{i}.png"))
}

pub fn ref_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("ref_{i}.png"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("depth_{i}.pgm"))
}

/// Writes views, references, depths and `scene.json` into `dir`.
pub fn write_scene_dir(dir: &Path, batch: &SceneBatch, meta: &SceneMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, v) in batch.views.iter().enumerate() {
        write_png(&view_path(dir, i), &v.degraded)?;
        if let Some(r) = &v.reference {
            write_png(&ref_path(dir, i), r)?;
        }
        if let Some(d) = &v.depth {
            write_pgm16(&depth_path(dir, i), d)?;
        }
    }
    write_json(&dir.join("scene.json"), meta)
}

/// Sorted indices `i` of files named `<prefix><i>.<ext>` in `dir`.
pub fn indexed_files(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<usize>> {
    let mut idx = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        let suffix = format!(".{ext}");
        if let Some(i) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(&suffix)).and_then(|r| r.parse().ok()) {
            if name == format!("{prefix}{i}{suffix}") {
                idx.push(i);
            }
        }
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Loads one scene directory; references and depths are picked up when present.
pub fn read_scene_dir(dir: &Path) -> Result<SceneBatch> {
    let idx = indexed_files(dir, "view_", "png")?;
    if idx.is_empty() {
        return Err(Error::Data(format!("{}: no view_<i>.png files", dir.display())));
    }
    let mut views = Vec::with_capacity(idx.len());
    for &i in &idx {
        let degraded = read_png(&view_path(dir, i))?;
        let rp = ref_path(dir, i);
        let reference = if rp.exists() { Some(read_png(&rp)?) } else { None };
        let dp = depth_path(dir, i);
        let depth = if dp.exists() { Some(read_pgm16(&dp)?) } else { None };
        views.push(View { degraded, reference, depth });
    }
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    SceneBatch::new(id, views)
}

/// Subdirectories of `root` that contain at least one view, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.is_dir() && !indexed_files(&p, "view_", "png")?.is_empty() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
