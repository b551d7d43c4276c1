//! Commands behind the `uierl` binary: dataset synthesis, training,
//! enhancement, evaluation and the ablation harness.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::imaging::{
    degrade, procedural_scene, resize, restore_oracle, synth_scene, DepthMap, SceneBatch, View, WaterParams,
};
use crate::io::{
    quantize16, quantize8, read_png, read_scene_dir, scene_dirs, write_json, write_png, write_scene_dir, SceneMeta,
};
use crate::metrics::{evaluate_image, MetricReport, MetricRow, MetricsConfig};
use crate::network::{build_model, enhance, Model, Variant};
use crate::training::checkpoint::{self, Checkpoint};
use crate::training::{prepare_dataset, LossRecord, Trainer};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
/// Largest restore error accepted for a synthesized view.
pub const RESTORE_TOL: f64 = 1e-6;

/// Written next to every command's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub details: serde_json::Value,
}

impl Manifest {
    fn new(command: &str, seed: u64, cfg: &RunConfig, details: serde_json::Value) -> Self {
        Self { command: command.into(), seed, config: cfg.snapshot(), details }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub scene_id: String,
    pub views: usize,
    pub seed: u64,
}

fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step keeps neighbouring scene seeds unrelated
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_range(rng: &mut impl Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|c| if hi[c] > lo[c] { rng.random_range(lo[c]..=hi[c]) } else { lo[c] })
}

/// One synthetic scene exactly as it reads back from disk: 8-bit references
/// and views, 16-bit depth. Each view is checked against the restore oracle.
pub fn synth_one(data: &DataConfig, scene_id: &str, seed: u64) -> Result<(SceneBatch, SceneMeta)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_views = rng.random_range(data.views_min..=data.views_max);
    let water = WaterParams::new(
        draw_range(&mut rng, data.beta_min, data.beta_max),
        draw_range(&mut rng, data.ambient_min, data.ambient_max),
    )?;
    let (clean, depth) = procedural_scene(data.image_size, data.image_size, &mut rng)?;
    let (batch, records) = synth_scene(scene_id, &clean, &depth, &water, n_views, &data.jitter, &mut rng)?;
    let mut views = Vec::with_capacity(batch.len());
    for (i, (v, rec)) in batch.views.iter().zip(&records).enumerate() {
        let reference = quantize8(v.reference.as_ref().expect("synthesized views carry references"));
        let depth = DepthMap::new(quantize16(v.depth.as_ref().expect("synthesized views carry depth")))?;
        let degraded = degrade(&reference, &depth, &rec.water)?;
        let err = restore_oracle(&degraded, &depth, &rec.water)?.max_abs_diff(&reference);
        if err >= RESTORE_TOL {
            return Err(Error::Numerical(format!("{scene_id} view {i}: restore error {err:e}")));
        }
        views.push(View { degraded: quantize8(&degraded), reference: Some(reference), depth: Some(depth) });
    }
    let meta = SceneMeta { scene_id: scene_id.into(), seed, water, jitter: data.jitter, views: records };
    Ok((SceneBatch::new(scene_id, views)?, meta))
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// `n` scenes named `scene_0000…`, each from its own seed derived from `seed`.
pub fn synth_dataset(data: &DataConfig, n: usize, seed: u64) -> Result<Vec<(SceneBatch, SceneMeta)>> {
    data.validate()?;
    (0..n).map(|i| synth_one(data, &scene_name(i), scene_seed(seed, i))).collect()
}

/// Refuses to write into a directory that already holds output unless forced;
/// forcing removes only the files this tool would write.
fn claim_dir(dir: &Path, force: bool, ours: impl Fn(&str) -> bool) -> Result<()> {
    if dir.exists() {
        let entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().map(|n| ours(&n.to_string_lossy())).unwrap_or(false))
            .collect();
        if !entries.is_empty() {
            if !force {
                return Err(Error::InvalidArgument(format!(
                    "{} already contains output; pass --force to overwrite",
                    dir.display()
                )));
            }
            for p in entries {
                let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
                r.map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path, n_scenes: usize, seed: u64, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    claim_dir(out_dir, force, |n| n == MANIFEST || n.starts_with("scene_"))?;
    let mut entries = Vec::with_capacity(n_scenes);
    for (batch, meta) in synth_dataset(&cfg.data, n_scenes, seed)? {
        write_scene_dir(&out_dir.join(&meta.scene_id), &batch, &meta)?;
        entries.push(SynthEntry { scene_id: meta.scene_id.clone(), views: batch.len(), seed: meta.seed });
    }
    let manifest = Manifest::new("synth", seed, cfg, serde_json::json!({ "scenes": entries }));
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Every scene directory under `root` (or `root` itself when it is one).
pub fn load_scenes(root: &Path) -> Result<Vec<SceneBatch>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let own = crate::io::indexed_files(root, "view_", "png")?;
    if !own.is_empty() {
        return Ok(vec![read_scene_dir(root)?]);
    }
    scene_dirs(root)?.iter().map(|d| read_scene_dir(d)).collect()
}

fn read_history(path: &Path, upto: u64) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: malformed row {rec:?}", path.display())))
        };
        let iteration = num(0)? as u64;
        if iteration <= upto {
            out.push(LossRecord { iteration, scene: 0, content: num(1)?, perceptual: num(2)?, total: num(3)? });
        }
    }
    Ok(out)
}

/// Everything in the snapshot that must agree for a resumed run to be the
/// continuation of the original one.
fn resume_key(cfg: &serde_json::Value) -> serde_json::Value {
    let mut v = cfg.clone();
    if let Some(t) = v.get_mut("train").and_then(|t| t.as_object_mut()) {
        t.remove("iterations");
        t.remove("checkpoint_every");
    }
    if let Some(o) = v.as_object_mut() {
        o.remove("metrics");
    }
    v
}

pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    force: bool,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Manifest> {
    cfg.validate()?;
    let scenes = load_scenes(data_dir)?;
    let data = prepare_dataset(&scenes, cfg.train.input_size)?;
    let snapshot = cfg.snapshot();
    let mut trainer = match resume {
        Some(path) => {
            let ck: Checkpoint<f32> = checkpoint::load(path)?;
            if ck.model != cfg.model || resume_key(&ck.config) != resume_key(&snapshot) {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration; resume needs the same [model], [train] and [data]",
                    path.display()
                )));
            }
            fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            let mut t = Trainer::resume(&ck, cfg.train.clone())?;
            // the loss log written beside the checkpoint holds its history
            let log = path.parent().map_or_else(|| PathBuf::from(LOSS_CSV), |d| d.join(LOSS_CSV));
            t.history = read_history(&log, t.iteration)?;
            t
        }
        None => {
            claim_dir(out_dir, force, |n| [MANIFEST, CHECKPOINT, LOSS_CSV].contains(&n))?;
            Trainer::new(build_model::<f32>(&cfg.model, cfg.train.seed)?, cfg.train.clone())?
        }
    };
    let ckpt = out_dir.join(CHECKPOINT);
    let every = cfg.train.checkpoint_every;
    while trainer.iteration < cfg.train.iterations {
        let r = trainer.step(&data)?;
        progress(&r);
        if every > 0 && trainer.iteration % every == 0 {
            trainer.save(&ckpt, &snapshot)?;
            crate::training::write_history(&out_dir.join(LOSS_CSV), &trainer.history)?;
        }
    }
    trainer.save(&ckpt, &snapshot)?;
    crate::training::write_history(&out_dir.join(LOSS_CSV), &trainer.history)?;
    let last = trainer.history.last().copied();
    let manifest = Manifest::new(
        "train",
        cfg.train.seed,
        cfg,
        serde_json::json!({
            "variant": cfg.model.variant.to_string(),
            "scenes": scenes.len(),
            "iterations": trainer.iteration,
            "parameters": trainer.model.parameter_count(),
            "final": last,
            "resumed_from": resume.map(|p| p.display().to_string()),
        }),
    );
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Runs the model on a scene of any size: inputs are resized up to the next
/// multiple of 4 and outputs back to the input size.
pub fn enhance_any_size(model: &Model<f32>, batch: &SceneBatch) -> Result<Vec<crate::imaging::Image>> {
    let (h, w) = batch.hw();
    let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    if (ph, pw) == (h, w) {
        return enhance(model, batch);
    }
    let views = batch
        .views
        .iter()
        .map(|v| {
            Ok(View {
                degraded: resize(&v.degraded, ph, pw)?,
                reference: None,
                depth: v
                    .depth
                    .as_ref()
                    .map(|d| DepthMap::new(resize(d, ph, pw)?.map(|x| x.clamp(0.0, 1.0))))
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    enhance(model, &SceneBatch::new(batch.scene_id.clone(), views)?)?.iter().map(|o| resize(o, h, w)).collect()
}

pub fn cmd_enhance(ckpt_path: &Path, scene_dir: &Path, out_dir: &Path, force: bool) -> Result<Manifest> {
    let ck: Checkpoint<f32> = checkpoint::load(ckpt_path)?;
    let cfg: RunConfig = serde_json::from_value(ck.config.clone()).unwrap_or_default();
    let model = checkpoint::load_model(&ck)?;
    let single = !crate::io::indexed_files(scene_dir, "view_", "png")?.is_empty();
    let dirs = if single { vec![scene_dir.to_path_buf()] } else { scene_dirs(scene_dir)? };
    claim_dir(out_dir, force, |n| {
        n == MANIFEST
            || n.starts_with("enh_")
            || (!single && dirs.iter().any(|d| d.file_name().is_some_and(|f| f == n)))
    })?;
    let mut written = Vec::new();
    for d in &dirs {
        let batch = read_scene_dir(d)?;
        let target = if single { out_dir.to_path_buf() } else { out_dir.join(&batch.scene_id) };
        fs::create_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        let idx = crate::io::indexed_files(d, "view_", "png")?;
        for (out, i) in enhance_any_size(&model, &batch)?.iter().zip(idx) {
            let p = target.join(format!("enh_{i}.png"));
            write_png(&p, out)?;
            written.push(p.strip_prefix(out_dir).unwrap_or(&p).display().to_string());
        }
    }
    let manifest = Manifest::new(
        "enhance",
        cfg.train.seed,
        &cfg,
        serde_json::json!({ "checkpoint": ckpt_path.display().to_string(), "variant": ck.model.variant.to_string(), "outputs": written }),
    );
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// PNG files under `dir`, recursively, as sorted relative paths.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                out.push(p.strip_prefix(root).expect("walked below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Reference for `rel`: the same relative path under `ref_dir`, or for
/// `<prefix>_<i>.png` the sibling `ref_<i>.png`.
fn reference_for(ref_dir: &Path, rel: &Path) -> Option<PathBuf> {
    let same = ref_dir.join(rel);
    if same.exists() {
        return Some(same);
    }
    let stem = rel.file_stem()?.to_string_lossy().into_owned();
    let (_, idx) = stem.rsplit_once('_')?;
    idx.parse::<usize>().ok()?;
    let alt = ref_dir.join(rel.parent().unwrap_or(Path::new(""))).join(format!("ref_{idx}.png"));
    alt.exists().then_some(alt)
}

pub fn evaluate_dir(in_dir: &Path, ref_dir: Option<&Path>, metrics: &MetricsConfig) -> Result<MetricReport> {
    let files = png_files(in_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no PNG images", in_dir.display())));
    }
    let rows = files
        .par_iter()
        .map(|rel| -> Result<MetricRow> {
            let img = read_png(&in_dir.join(rel))?;
            let reference = match ref_dir {
                Some(r) => {
                    let p = reference_for(r, rel).ok_or_else(|| {
                        Error::Data(format!("no reference for {} under {}", rel.display(), r.display()))
                    })?;
                    Some(read_png(&p)?)
                }
                None => None,
            };
            evaluate_image(rel.display().to_string(), &img, reference.as_ref(), metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { rows })
}

pub fn cmd_eval(cfg: &RunConfig, in_dir: &Path, ref_dir: Option<&Path>, out_csv: &Path) -> Result<MetricReport> {
    cfg.metrics.validate()?;
    let report = evaluate_dir(in_dir, ref_dir, &cfg.metrics)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.write_csv(out_csv)?;
    let manifest = Manifest::new(
        "eval",
        cfg.train.seed,
        cfg,
        serde_json::json!({
            "input": in_dir.display().to_string(),
            "reference": ref_dir.map(|p| p.display().to_string()),
            "images": report.rows.len(),
            "csv": out_csv.display().to_string(),
        }),
    );
    write_json(&out_csv.with_extension("manifest.json"), &manifest)?;
    Ok(report)
}

/// Held-out means per variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<(Variant, MetricRow)>,
}

impl AblationTable {
    pub fn psnr(&self, v: Variant) -> Option<f64> {
        self.rows.iter().find(|(x, _)| *x == v).and_then(|(_, r)| r.psnr)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,uiqm,uciqe,ccf,edge,angular_error,psnr\n");
        for (v, r) in &self.rows {
            s.push_str(&v.to_string());
            for (_, x) in r.values() {
                s.push(',');
                if let Some(x) = x {
                    s.push_str(&format!("{x:.4}"));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Variant | UIQM | UCIQE | CCF | Edge | Angular error | PSNR |\n|---|---|---|---|---|---|---|\n",
        );
        for (v, r) in &self.rows {
            let cells: Vec<String> =
                r.values().iter().map(|(_, x)| x.map(|x| format!("{x:.4}")).unwrap_or_default()).collect();
            s.push_str(&format!("| {v} | {} |\n", cells.join(" | ")));
        }
        s
    }
}

/// Held-out evaluation of one trained model.
pub fn evaluate_scenes(model: &Model<f32>, scenes: &[SceneBatch], metrics: &MetricsConfig) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for s in scenes {
        for (i, (out, v)) in enhance_any_size(model, s)?.iter().zip(&s.views).enumerate() {
            rows.push(evaluate_image(format!("{}/enh_{i}.png", s.scene_id), out, v.reference.as_ref(), metrics)?);
        }
    }
    Ok(MetricReport { rows })
}

/// Trains every variant with the same seed and budget on `train`, then
/// scores it on `test`. `on_trained` sees each finished trainer.
pub fn run_ablation(
    cfg: &RunConfig,
    train: &[SceneBatch],
    test: &[SceneBatch],
    variants: &[Variant],
    mut progress: impl FnMut(Variant, &LossRecord),
    mut on_trained: impl FnMut(Variant, &Trainer<f32>) -> Result<()>,
) -> Result<AblationTable> {
    let data = prepare_dataset(train, cfg.train.input_size)?;
    let mut rows = Vec::new();
    for &v in variants {
        let model_cfg = crate::network::ModelConfig { variant: v, ..cfg.model.clone() };
        let mut t = Trainer::new(build_model::<f32>(&model_cfg, cfg.train.seed)?, cfg.train.clone())?;
        while t.iteration < cfg.train.iterations {
            let r = t.step(&data)?;
            progress(v, &r);
        }
        on_trained(v, &t)?;
        rows.push((v, evaluate_scenes(&t.model, test, &cfg.metrics)?.means()));
    }
    Ok(AblationTable { rows })
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect()
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    variants: &[Variant],
    force: bool,
    progress: impl FnMut(Variant, &LossRecord),
) -> Result<AblationTable> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no variants requested".into()));
    }
    let scenes = load_scenes(data_dir)?;
    let hold = cfg.data.holdout_scenes;
    if hold == 0 || hold >= scenes.len() {
        return Err(Error::Data(format!("{} scenes cannot be split with holdout_scenes = {hold}", scenes.len())));
    }
    let (train, test) = scenes.split_at(scenes.len() - hold);
    claim_dir(out_dir, force, |n| {
        n == MANIFEST || n.starts_with("ablation.") || variants.iter().any(|v| v.to_string() == n)
    })?;
    let snapshot = cfg.snapshot();
    let table = run_ablation(cfg, train, test, variants, progress, |v, t| {
        let dir = out_dir.join(v.to_string());
        t.save(&dir.join(CHECKPOINT), &snapshot)?;
        crate::training::write_history(&dir.join(LOSS_CSV), &t.history)
    })?;
    fs::write(out_dir.join("ablation.csv"), table.to_csv()).map_err(|e| Error::io(out_dir, e))?;
    fs::write(out_dir.join("ablation.md"), table.to_markdown()).map_err(|e| Error::io(out_dir, e))?;
    let manifest = Manifest::new(
        "ablate",
        cfg.train.seed,
        cfg,
        serde_json::json!({
            "variants": variants.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            "train_scenes": train.iter().map(|s| s.scene_id.clone()).collect::<Vec<_>>(),
            "test_scenes": test.iter().map(|s| s.scene_id.clone()).collect::<Vec<_>>(),
        }),
    );
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(table)
}
