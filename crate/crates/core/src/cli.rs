//! Command implementations behind the `coninfer` binary.
//!
//! Tiles are processed in consecutive batches of `batch_size` tiles. Each
//! batch gets a fresh mixture initialized from its own priors; nothing is
//! carried from one batch to the next.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use ndarray::{concatenate, Array2, Axis};
use serde::Serialize;

use crate::consensus::{self, RunTrace, SolverConfig};
use crate::error::{Error, Result};
use crate::gmm::{self, CovMode, GmmConfig, RegEps};
use crate::prior::{self, PriorConfig, SynonymMode, TextPrototypes};
use crate::segmap::{self, ConfusionMatrix, PatchGrid};
use crate::synth::{self, SynthSpec};
use crate::tensorio::{
    self, ClassEntry, ManifestChecks, PatchGridDims, TileEntry, TileManifest, TilePx, TensorFile,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Joint,
    Decoupled,
    PriorOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::PriorOnly, Mode::Decoupled, Mode::Joint];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::Decoupled => "decoupled",
            Mode::PriorOnly => "prior-only",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "joint" => Ok(Mode::Joint),
            "decoupled" => Ok(Mode::Decoupled),
            "prior-only" => Ok(Mode::PriorOnly),
            other => Err(format!("unknown mode '{other}' (joint, decoupled, prior-only)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferConfig {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub batch_size: usize,
    pub iters: usize,
    pub prior: PriorConfig,
    pub gmm: GmmConfig,
    pub mode: Mode,
    pub l2_normalize_features: bool,
    pub trace: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl InferConfig {
    pub fn new(manifest: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        InferConfig {
            manifest: manifest.into(),
            out: out.into(),
            batch_size: 50,
            iters: 10,
            prior: PriorConfig::default(),
            gmm: GmmConfig::default(),
            mode: Mode::Joint,
            l2_normalize_features: false,
            trace: None,
            threads: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("iteration count must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Consecutive tile ranges of at most `batch_size` tiles; the last one may
/// be shorter.
pub fn partition_batches(num_tiles: usize, batch_size: usize) -> Vec<Range<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    (0..num_tiles)
        .step_by(batch_size)
        .map(|start| start..(start + batch_size).min(num_tiles))
        .collect()
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn load_prior_tile(
    manifest: &TileManifest,
    tile: &TileEntry,
    prototypes: Option<&TextPrototypes>,
    cfg: &PriorConfig,
) -> Result<Array2<f64>> {
    let p = match (&tile.priors_path, &tile.vlm_features_path, prototypes) {
        (Some(path), _, _) => tensorio::read_tensor(manifest.resolve(path))?.to_matrix()?,
        (None, Some(path), Some(protos)) => {
            let v = tensorio::read_tensor(manifest.resolve(path))?.to_matrix()?;
            prior::encode_prior(v.view(), protos, cfg)?
        }
        _ => {
            return Err(Error::manifest(
                "priors_path",
                "no priors and no prototypes to compute them from",
            ))
        }
    };
    prior::validate_prob_rows(p.view())?;
    Ok(p)
}

fn load_prototypes(manifest: &TileManifest) -> Result<Option<TextPrototypes>> {
    let needs = manifest.tiles.iter().any(|t| t.priors_path.is_none());
    match (&manifest.prototypes_path, needs) {
        (Some(path), true) => {
            let vectors = tensorio::read_tensor(manifest.resolve(path))?.to_matrix()?;
            Ok(Some(TextPrototypes::new(
                vectors,
                manifest.prototype_owners(),
                manifest.num_classes(),
            )?))
        }
        _ => Ok(None),
    }
}

/// Per-batch outcome of running one mode.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub tiles: Range<usize>,
    pub z: Array2<f64>,
    pub trace: Option<RunTrace>,
}

/// Run `mode` over every batch of the scene, returning per-batch consensus
/// distributions. Prior-only mode never opens feature tensors.
pub fn process_scene(
    manifest: &TileManifest,
    mode: Mode,
    batch_size: usize,
    iters: usize,
    prior_cfg: &PriorConfig,
    gmm_cfg: &GmmConfig,
    l2_normalize: bool,
) -> Result<Vec<BatchOutput>> {
    let prototypes = load_prototypes(manifest)?;
    let solver = SolverConfig::with_iters(iters);
    let mut outputs = Vec::new();
    for (b, range) in partition_batches(manifest.tiles.len(), batch_size)
        .into_iter()
        .enumerate()
    {
        let tiles = &manifest.tiles[range.clone()];
        let mut priors = Vec::with_capacity(tiles.len());
        for tile in tiles {
            let p = load_prior_tile(manifest, tile, prototypes.as_ref(), prior_cfg)
                .map_err(|e| e.context(format!("tile '{}'", tile.id)))?;
            priors.push(p);
        }
        let views: Vec<_> = priors.iter().map(|p| p.view()).collect();
        let p = concatenate(Axis(0), &views).expect("equal widths checked by manifest");

        let (z, trace) = if mode == Mode::PriorOnly {
            (p, None)
        } else {
            let mut feats = Vec::with_capacity(tiles.len());
            for tile in tiles {
                let x = tensorio::read_tensor(manifest.resolve(&tile.features_path))
                    .and_then(|t| t.to_matrix())
                    .map_err(|e| e.context(format!("tile '{}'", tile.id)))?;
                feats.push(x);
            }
            let views: Vec<_> = feats.iter().map(|x| x.view()).collect();
            let mut x = concatenate(Axis(0), &views).map_err(|_| {
                Error::Shape(format!("batch {b}: feature tiles differ in dimension"))
            })?;
            if l2_normalize {
                gmm::l2_normalize_rows(&mut x);
            }
            let result = match mode {
                Mode::Joint => consensus::run(x.view(), p.view(), gmm_cfg, &solver),
                Mode::Decoupled => consensus::run_decoupled(x.view(), p.view(), gmm_cfg, &solver),
                Mode::PriorOnly => unreachable!(),
            }
            .map_err(|e| {
                e.context(format!(
                    "batch {b} (tiles '{}'..'{}')",
                    tiles[0].id,
                    tiles[tiles.len() - 1].id
                ))
            })?;
            debug!(
                "batch {b}: objective {:?}",
                result.trace.objective.last().copied().unwrap_or_default()
            );
            (result.z, Some(result.trace))
        };
        outputs.push(BatchOutput {
            tiles: range,
            z,
            trace,
        });
    }
    Ok(outputs)
}

fn batch_grid(manifest: &TileManifest, tiles: usize) -> PatchGrid {
    PatchGrid {
        rows: manifest.patch_grid.rows,
        cols: manifest.patch_grid.cols,
        patch_px: manifest.patch_px,
        num_tiles: tiles,
    }
}

/// Masks per tile, in manifest order.
pub fn masks_for(manifest: &TileManifest, outputs: &[BatchOutput]) -> Result<Vec<Array2<u8>>> {
    let mut masks = Vec::with_capacity(manifest.tiles.len());
    for out in outputs {
        let grid = batch_grid(manifest, out.tiles.len());
        masks.extend(segmap::assemble_masks(out.z.view(), &grid)?);
    }
    Ok(masks)
}

pub fn mask_path(out_dir: &Path, tile_id: &str) -> PathBuf {
    out_dir.join(format!("{tile_id}.pgm"))
}

#[derive(Debug, Clone)]
pub struct InferSummary {
    pub batches: Vec<Range<usize>>,
    pub masks_written: usize,
}

pub fn cmd_infer(cfg: &InferConfig) -> Result<InferSummary> {
    cfg.validate()?;
    let checks = ManifestChecks {
        features: cfg.mode != Mode::PriorOnly,
    };
    let manifest = tensorio::load_manifest_with(&cfg.manifest, checks)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;

    let outputs = with_threads(cfg.threads, || {
        process_scene(
            &manifest,
            cfg.mode,
            cfg.batch_size,
            cfg.iters,
            &cfg.prior,
            &cfg.gmm,
            cfg.l2_normalize_features,
        )
    })??;

    let masks = masks_for(&manifest, &outputs)?;
    for (tile, mask) in manifest.tiles.iter().zip(&masks) {
        tensorio::write_mask(mask_path(&cfg.out, &tile.id), mask)?;
    }
    if let Some(path) = &cfg.trace {
        let mut csv = String::from("batch,iteration,objective,max_z_delta\n");
        for (b, out) in outputs.iter().enumerate() {
            if let Some(trace) = &out.trace {
                trace.write_csv_rows(&mut csv, Some(b));
            }
        }
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    info!(
        "wrote {} masks for {} batches to {}",
        masks.len(),
        outputs.len(),
        cfg.out.display()
    );
    Ok(InferSummary {
        batches: outputs.iter().map(|o| o.tiles.clone()).collect(),
        masks_written: masks.len(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Serialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: Option<f64>,
    /// Ground-truth pixels of this class.
    pub gt_pixels: u64,
    pub pred_pixels: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub scene_id: String,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    pub excluded_classes: Vec<String>,
    pub evaluated_pixels: u64,
    pub tiles: usize,
}

impl EvalReport {
    fn from_confusion(manifest: &TileManifest, cm: &ConfusionMatrix, tiles: usize) -> Self {
        let scores = segmap::iou_scores(cm);
        let counts = cm.counts();
        let per_class = manifest
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| ClassIou {
                class: c.name.clone(),
                iou: scores.per_class[k],
                gt_pixels: counts.row(k).sum(),
                pred_pixels: counts.column(k).sum(),
            })
            .collect();
        EvalReport {
            scene_id: manifest.scene_id.clone(),
            miou: scores.miou,
            per_class,
            excluded_classes: scores
                .excluded
                .iter()
                .map(|&k| manifest.classes[k].name.clone())
                .collect(),
            evaluated_pixels: cm.total(),
            tiles,
        }
    }
}

fn load_gt(manifest: &TileManifest, tile: &TileEntry) -> Result<Array2<u8>> {
    let path = tile
        .gt_path
        .as_ref()
        .ok_or_else(|| Error::manifest(format!("tile '{}'.gt_path", tile.id), "missing"))?;
    tensorio::read_tensor(manifest.resolve(path))?.to_label_image()
}

fn confusion_against_gt<'a>(
    manifest: &TileManifest,
    masks: impl IntoIterator<Item = (&'a TileEntry, Array2<u8>)>,
    ignore_label: Option<u8>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(manifest.num_classes());
    for (tile, pred) in masks {
        let gt = load_gt(manifest, tile).map_err(|e| e.context(format!("tile '{}'", tile.id)))?;
        cm.accumulate(pred.view(), gt.view(), ignore_label)
            .map_err(|e| e.context(format!("tile '{}'", tile.id)))?;
    }
    Ok(cm)
}

/// Score the masks in `pred_dir` against the manifest's ground truth.
pub fn cmd_eval(
    pred_dir: &Path,
    manifest_path: &Path,
    report: Option<&Path>,
    ignore_label: Option<u8>,
) -> Result<EvalReport> {
    let manifest = tensorio::load_manifest_with(manifest_path, ManifestChecks { features: false })?;
    if let Some(t) = manifest.tiles.iter().find(|t| t.gt_path.is_none()) {
        return Err(Error::manifest(
            format!("tile '{}'.gt_path", t.id),
            "evaluation needs ground truth for every tile",
        ));
    }
    let mut masks = Vec::with_capacity(manifest.tiles.len());
    for tile in &manifest.tiles {
        let pred = tensorio::read_mask(mask_path(pred_dir, &tile.id))
            .map_err(|e| e.context(format!("tile '{}'", tile.id)))?;
        masks.push((tile, pred));
    }
    let cm = confusion_against_gt(&manifest, masks, ignore_label)?;
    let out = EvalReport::from_confusion(&manifest, &cm, manifest.tiles.len());
    if let Some(path) = report {
        let text = serde_json::to_string_pretty(&out).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub miou: f64,
}

/// mIoU of prior-only, decoupled and joint inference on the same batches.
pub fn cmd_ablate(cfg: &InferConfig, ignore_label: Option<u8>) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let manifest = tensorio::load_manifest(&cfg.manifest)?;
    if let Some(t) = manifest.tiles.iter().find(|t| t.gt_path.is_none()) {
        return Err(Error::manifest(
            format!("tile '{}'.gt_path", t.id),
            "ablation needs ground truth for every tile",
        ));
    }
    let mut rows = Vec::with_capacity(3);
    for mode in Mode::ALL {
        let outputs = with_threads(cfg.threads, || {
            process_scene(
                &manifest,
                mode,
                cfg.batch_size,
                cfg.iters,
                &cfg.prior,
                &cfg.gmm,
                cfg.l2_normalize_features,
            )
        })??;
        let masks = masks_for(&manifest, &outputs)?;
        let cm = confusion_against_gt(&manifest, manifest.tiles.iter().zip(masks), ignore_label)?;
        rows.push(AblationRow {
            mode,
            miou: segmap::iou_scores(&cm).miou,
        });
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,miou\n");
    for r in rows {
        out.push_str(&format!("{},{:.6}\n", r.mode, r.miou));
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic fixtures

#[derive(Debug, Clone)]
pub struct SynthLayout {
    pub tiles: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_px: usize,
}

/// Write a synthetic scene as a manifest plus per-tile tensors.
///
/// The scene's rows are dealt to tiles in order; `spec.n_per_cluster` is
/// derived from the layout, so the total patch count must divide evenly by
/// the number of clusters.
pub fn cmd_synth(dir: &Path, spec: &SynthSpec, layout: &SynthLayout) -> Result<TileManifest> {
    let per_tile = layout.grid_rows * layout.grid_cols;
    let total = layout.tiles * per_tile;
    if total == 0 || layout.patch_px == 0 {
        return Err(Error::Config("tiles, grid and patch size must be positive".into()));
    }
    if spec.clusters == 0 || spec.clusters > 255 || !total.is_multiple_of(spec.clusters) {
        return Err(Error::Config(format!(
            "{total} patches cannot be split evenly over {} classes (1..=255)",
            spec.clusters
        )));
    }
    let spec = SynthSpec {
        n_per_cluster: total / spec.clusters,
        ..spec.clone()
    };
    let scene = synth::generate(&spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let grid = PatchGrid {
        rows: layout.grid_rows,
        cols: layout.grid_cols,
        patch_px: layout.patch_px,
        num_tiles: layout.tiles,
    };
    let gt_masks = segmap::labels_to_masks(&scene.labels, &grid)?;
    let mut tiles = Vec::with_capacity(layout.tiles);
    for t in 0..layout.tiles {
        let id = format!("tile_{t:04}");
        let rows = t * per_tile..(t + 1) * per_tile;
        let x = scene.x.slice(ndarray::s![rows.clone(), ..]).to_owned();
        let p = scene.p.slice(ndarray::s![rows, ..]).to_owned();
        let features = PathBuf::from(format!("{id}_features.npy"));
        let priors = PathBuf::from(format!("{id}_priors.npy"));
        let gt = PathBuf::from(format!("{id}_gt.npy"));
        tensorio::write_tensor(dir.join(&features), &TensorFile::from_matrix(&x))?;
        tensorio::write_tensor(dir.join(&priors), &TensorFile::from_matrix(&p))?;
        let (h, w) = gt_masks[t].dim();
        tensorio::write_tensor(
            dir.join(&gt),
            &TensorFile::u8(vec![h, w], gt_masks[t].iter().copied().collect())?,
        )?;
        tiles.push(TileEntry {
            id,
            features_path: features,
            priors_path: Some(priors),
            gt_path: Some(gt),
            vlm_features_path: None,
        });
    }
    let labels: Vec<u8> = scene.labels.iter().map(|&l| l as u8).collect();
    tensorio::write_tensor(
        dir.join("labels.npy"),
        &TensorFile::u8(vec![labels.len()], labels)?,
    )?;

    let (h, w) = grid.tile_shape();
    let manifest = TileManifest {
        scene_id: format!("synth-seed-{}", spec.seed),
        classes: (0..spec.clusters)
            .map(|k| ClassEntry {
                name: format!("class_{k}"),
                synonyms: Vec::new(),
            })
            .collect(),
        patch_grid: PatchGridDims {
            rows: layout.grid_rows,
            cols: layout.grid_cols,
        },
        patch_px: layout.patch_px,
        tile_px: TilePx { h, w },
        tiles,
        prototypes_path: None,
        base_dir: dir.to_path_buf(),
        feature_dim: Some(spec.dim),
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn parse_cov_mode(s: &str) -> std::result::Result<CovMode, String> {
    match s {
        "full" => Ok(CovMode::Full),
        "diag" => Ok(CovMode::Diag),
        other => Err(format!("unknown covariance mode '{other}' (full, diag)")),
    }
}

pub fn parse_synonym_mode(s: &str) -> std::result::Result<SynonymMode, String> {
    match s {
        "max" => Ok(SynonymMode::Max),
        "mean" => Ok(SynonymMode::Mean),
        other => Err(format!("unknown synonym mode '{other}' (max, mean)")),
    }
}

/// `--reg-eps` value: a bare number is absolute; `rel:F` scales the mean
/// feature variance.
pub fn parse_reg_eps(s: &str) -> std::result::Result<RegEps, String> {
    let (rel, num) = match s.strip_prefix("rel:") {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v: f64 = num
        .parse()
        .map_err(|_| format!("invalid regularization '{s}'"))?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(format!("regularization must be a non-negative number, got '{s}'"));
    }
    Ok(if rel { RegEps::Relative(v) } else { RegEps::Absolute(v) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_of_fifty() {
        let b = partition_batches(120, 50);
        assert_eq!(b, vec![0..50, 50..100, 100..120]);
        assert_eq!(partition_batches(50, 50), vec![0..50]);
        assert_eq!(partition_batches(3, 1).len(), 3);
        assert!(partition_batches(0, 5).is_empty());
    }

    #[test]
    fn flag_parsers() {
        assert_eq!("prior-only".parse::<Mode>().unwrap(), Mode::PriorOnly);
        assert!("both".parse::<Mode>().is_err());
        assert_eq!(parse_cov_mode("diag").unwrap(), CovMode::Diag);
        assert_eq!(parse_reg_eps("1e-4").unwrap(), RegEps::Absolute(1e-4));
        assert_eq!(parse_reg_eps("rel:1e-6").unwrap(), RegEps::Relative(1e-6));
        assert!(parse_reg_eps("-1").is_err());
        assert_eq!(parse_synonym_mode("mean").unwrap(), SynonymMode::Mean);
    }

    #[test]
    fn ablation_table_has_three_rows() {
        let rows: Vec<AblationRow> = Mode::ALL
            .iter()
            .map(|&mode| AblationRow { mode, miou: 0.5 })
            .collect();
        let table = format_ablation(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("prior-only,0.500000"));
    }
}
