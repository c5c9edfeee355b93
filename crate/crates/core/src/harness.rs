//! Command implementations behind the `brnet` binary: synthesis, training,
//! evaluation, ablation sweeps and overlay rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_dataset};
use crate::detector::ProposalMode;
use crate::error::{Error, Result};
use crate::mask_algebra::BinaryMask;
use crate::metrics::{MetricsReport, MiouMode};
use crate::params::Checkpoint;
use crate::synth::{AnnotatedScene, GrayImage};
use crate::train::{
    checkpoint_path, evaluate_model, load_model, num_workers, predict_scenes, synthesize, TrainConfig, Toggles, Trainer,
};

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";
pub const METRICS_LOG: &str = "metrics.tsv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TSV: &str = "report.tsv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TSV: &str = "ablation.tsv";

/// Command-line values that override the config file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub proposal_mode: Option<ProposalMode>,
}

impl Overrides {
    /// A seed override reseeds both the model and the scene generator.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.data.scene.seed = s;
        }
        if let Some(m) = self.proposal_mode {
            cfg.proposal_mode = m;
        }
    }
}

/// Loads a config file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>, overrides: Overrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `dir/<split>` when present, else `dir` itself.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<AnnotatedScene>> {
    let sub = dir.join(split);
    if sub.is_dir() {
        load_dataset(&sub)
    } else {
        load_dataset(dir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub scenes: usize,
    /// Instances per scene → number of scenes.
    pub instance_histogram: BTreeMap<usize, usize>,
    /// Pixels covered by two or more instances over pixels covered by any.
    pub overlap_fraction: f64,
}

pub fn dataset_summary(scenes: &[AnnotatedScene]) -> SynthSummary {
    let mut instance_histogram = BTreeMap::new();
    let (mut covered, mut shared) = (0usize, 0usize);
    for sc in scenes {
        *instance_histogram.entry(sc.instances.len()).or_insert(0) += 1;
        let (h, w) = sc.dims();
        for p in 0..h * w {
            let k = sc.instances.iter().filter(|i| i.amodal.bits()[p] != 0).count();
            covered += (k >= 1) as usize;
            shared += (k >= 2) as usize;
        }
    }
    SynthSummary {
        scenes: scenes.len(),
        instance_histogram,
        overlap_fraction: if covered == 0 { 0.0 } else { shared as f64 / covered as f64 },
    }
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenes: {}", self.scenes)?;
        writeln!(f, "instances\tscenes")?;
        for (k, n) in &self.instance_histogram {
            writeln!(f, "{k}\t{n}")?;
        }
        write!(f, "overlap pixel fraction: {:.4}", self.overlap_fraction)
    }
}

/// Writes the train and test splits under `out`. `count` replaces the
/// configured training-split size.
pub fn cli_synth(cfg: &TrainConfig, out: &Path, count: Option<usize>) -> Result<(SynthSummary, SynthSummary)> {
    let mut data = cfg.data.clone();
    if let Some(n) = count {
        data.train_scenes = n;
    }
    let (train, test) = synthesize(&data, num_workers())?;
    save_dataset(&train, &out.join(TRAIN_SPLIT))?;
    save_dataset(&test, &out.join(TEST_SPLIT))?;
    write_text(&out.join("config.toml"), &TrainConfig { data, ..cfg.clone() }.to_toml())?;
    Ok((dataset_summary(&train), dataset_summary(&test)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_total: f64,
    pub final_total: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on `scenes` and writes the metrics log, config and checkpoints
/// into `out`.
pub fn train_on(cfg: &TrainConfig, scenes: &[AnnotatedScene], out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let log_path = out.join(METRICS_LOG);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut trainer = Trainer::<f32>::new(cfg.clone())?;
    let history = trainer.fit(scenes, &mut log, Some(out))?;
    let total = |i: usize| history.get(i).map_or(f64::NAN, |r| r.losses.total);
    Ok(TrainSummary {
        steps: history.len(),
        initial_total: total(0),
        final_total: total(history.len().saturating_sub(1)),
        checkpoint: checkpoint_path(out),
        log: log_path,
    })
}

/// Trains from `dataset/train` when given, else from freshly synthesised
/// scenes.
pub fn cli_train(cfg: &TrainConfig, dataset: Option<&Path>, out: &Path) -> Result<TrainSummary> {
    let scenes = match dataset {
        Some(d) => load_split(d, TRAIN_SPLIT)?,
        None => synthesize(&cfg.data, num_workers())?.0,
    };
    train_on(cfg, &scenes, out)
}

/// Method, AP, AP50, AP75, mIoU rows.
pub fn report_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut s = format!("method\t{}\n", MetricsReport::table_header());
    for (name, r) in rows {
        s.push_str(&format!("{name}\t{}\n", r.table_row()));
    }
    s
}

/// Evaluates a checkpoint. The proposal mode defaults to the one it was
/// trained with. Writes `report.json` and `report.tsv` when `out` is given.
pub fn cli_eval(
    checkpoint: &Path,
    scenes: &[AnnotatedScene],
    mode: Option<ProposalMode>,
    miou_mode: MiouMode,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let loaded = load_model(&ckpt)?;
    let mode = mode.unwrap_or(loaded.proposal_mode);
    let report = evaluate_model(&loaded.model, &loaded.store, scenes, mode, miou_mode)?;
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&report).expect("report serialises");
        write_text(&dir.join(REPORT_JSON), &json)?;
        write_text(&dir.join(REPORT_TSV), &report_table(&[("brnet".to_string(), &report)]))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: Toggles,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Component rows, cumulative.
    pub components: Vec<AblationRow>,
    /// Module rows: CMSM, CMSM+BSM, CMSM+BSM+SCRM.
    pub modules: Vec<AblationRow>,
}

fn toggles(b_o: bool, b_n: bool, uam: bool, l_cons: bool) -> Toggles {
    Toggles {
        b_c: true,
        b_o,
        b_n,
        uam,
        l_cons,
    }
}

/// The five cumulative component rows.
pub fn component_rows() -> Vec<Toggles> {
    vec![
        toggles(false, false, false, false),
        toggles(true, false, false, false),
        toggles(true, true, false, false),
        toggles(true, true, true, false),
        toggles(true, true, true, true),
    ]
}

/// The three module rows. The attention module belongs to CMSM and the
/// recombination module is the consistency-constrained fusion.
pub fn module_rows() -> Vec<(&'static str, Toggles)> {
    vec![
        ("CMSM", toggles(false, false, true, false)),
        ("CMSM+BSM", toggles(true, true, true, false)),
        ("CMSM+BSM+SCRM", toggles(true, true, true, true)),
    ]
}

fn component_label(t: &Toggles) -> String {
    let names = ["B_c", "B_o", "B_n", "UAM", "L_cons"];
    names
        .iter()
        .zip(t.marks())
        .filter(|(_, on)| *on)
        .map(|(n, _)| *n)
        .collect::<Vec<_>>()
        .join("+")
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("B_c\tB_o\tB_n\tUAM\tL_cons\t{}\n", MetricsReport::table_header());
        for r in &self.components {
            let marks: Vec<&str> = r.toggles.marks().iter().map(|&m| if m { "x" } else { "" }).collect();
            s.push_str(&format!("{}\t{}\n", marks.join("\t"), r.metrics.table_row()));
        }
        s.push('\n');
        let rows: Vec<(String, &MetricsReport)> = self.modules.iter().map(|r| (r.label.clone(), &r.metrics)).collect();
        s.push_str(&report_table(&rows));
        s
    }
}

/// Trains and evaluates every ablation variant from the same seed. Variants
/// shared by both tables are trained once.
pub fn ablate(cfg: &TrainConfig, train: &[AnnotatedScene], test: &[AnnotatedScene]) -> Result<AblationReport> {
    let mut cache: BTreeMap<[bool; 5], MetricsReport> = BTreeMap::new();
    let mut run = |t: Toggles| -> Result<MetricsReport> {
        if let Some(r) = cache.get(&t.marks()) {
            return Ok(r.clone());
        }
        let mut c = cfg.clone();
        c.toggles = Some(t);
        let mut trainer = Trainer::<f32>::new(c)?;
        trainer.fit(train, &mut std::io::sink(), None)?;
        let r = evaluate_model(&trainer.model, &trainer.store, test, cfg.proposal_mode, cfg.eval.miou_mode)?;
        cache.insert(t.marks(), r.clone());
        Ok(r)
    };
    let mut components = Vec::new();
    for t in component_rows() {
        components.push(AblationRow {
            label: component_label(&t),
            toggles: t,
            metrics: run(t)?,
        });
    }
    let mut modules = Vec::new();
    for (label, t) in module_rows() {
        modules.push(AblationRow {
            label: label.to_string(),
            toggles: t,
            metrics: run(t)?,
        });
    }
    Ok(AblationReport { components, modules })
}

pub fn cli_ablate(cfg: &TrainConfig, dataset: Option<&Path>, out: Option<&Path>) -> Result<AblationReport> {
    let (train, test) = match dataset {
        Some(d) => (load_split(d, TRAIN_SPLIT)?, load_split(d, TEST_SPLIT)?),
        None => synthesize(&cfg.data, num_workers())?,
    };
    let report = ablate(cfg, &train, &test)?;
    if let Some(dir) = out {
        write_text(&dir.join(ABLATION_TSV), &report.to_tsv())?;
        write_text(&dir.join(ABLATION_JSON), &serde_json::to_string_pretty(&report).expect("serialises"))?;
    }
    Ok(report)
}

/// Instance colours, cycled in instance order.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Weight of an instance colour when blended over the image.
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Colour of hatch pixels in regions covered by two or more instances.
pub const HATCH_COLOR: [u8; 3] = [255, 255, 255];

/// Black columns between the prediction and ground-truth panels.
pub const PANEL_GAP: usize = 4;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, y: usize, x: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let perr = |e: png::EncodingError| Error::parse(path.display().to_string(), e.to_string());
        let mut w = enc.write_header().map_err(perr)?;
        w.write_image_data(&self.pixels).map_err(perr)
    }
}

/// Grayscale image with instance masks blended in palette order. A pixel on
/// `(x + y) % 4 == 0` covered by two or more masks becomes [`HATCH_COLOR`].
pub fn render_overlay(image: &GrayImage, masks: &[BinaryMask]) -> Result<RgbImage> {
    let (h, w) = (image.height, image.width);
    if let Some(m) = masks.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![m.height(), m.width()],
        });
    }
    let mut out = RgbImage {
        height: h,
        width: w,
        pixels: Vec::with_capacity(3 * h * w),
    };
    for y in 0..h {
        for x in 0..w {
            let g = (image.get(y, x).clamp(0.0, 1.0) * 255.0).round();
            let mut c = [g; 3];
            let mut hits = 0;
            for (k, m) in masks.iter().enumerate() {
                if m.get(y, x) {
                    hits += 1;
                    let p = PALETTE[k % PALETTE.len()];
                    for ch in 0..3 {
                        c[ch] = ((1.0 - OVERLAY_ALPHA) * c[ch] + OVERLAY_ALPHA * p[ch] as f64).round();
                    }
                }
            }
            let px = if hits >= 2 && (x + y) % 4 == 0 {
                HATCH_COLOR
            } else {
                c.map(|v| v as u8)
            };
            out.pixels.extend_from_slice(&px);
        }
    }
    Ok(out)
}

/// Prediction panel on the left, ground truth on the right.
pub fn render_comparison(scene: &AnnotatedScene, predicted: &[BinaryMask]) -> Result<RgbImage> {
    let left = render_overlay(&scene.image, predicted)?;
    let right = render_overlay(&scene.image, &scene.amodal_masks())?;
    let (h, w) = (left.height, left.width);
    let mut out = RgbImage {
        height: h,
        width: 2 * w + PANEL_GAP,
        pixels: vec![0; 3 * h * (2 * w + PANEL_GAP)],
    };
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, left.get(y, x));
            out.set(y, x + w + PANEL_GAP, right.get(y, x));
        }
    }
    Ok(out)
}

/// Writes `scene_<i>.png` per scene; predictions above score 0.5, highest
/// score first.
pub fn cli_render(checkpoint: &Path, scenes: &[AnnotatedScene], mode: Option<ProposalMode>, out: &Path) -> Result<Vec<PathBuf>> {
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let loaded = load_model(&ckpt)?;
    let mode = mode.unwrap_or(loaded.proposal_mode);
    let preds = predict_scenes(&loaded.model, &loaded.store, scenes, mode, num_workers())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut paths = Vec::new();
    for (i, (sc, ps)) in scenes.iter().zip(&preds).enumerate() {
        let mut ps: Vec<_> = ps.iter().filter(|p| p.score >= 0.5).collect();
        ps.sort_by(|a, b| b.score.total_cmp(&a.score));
        let masks: Vec<BinaryMask> = ps.iter().map(|p| p.mask.clone()).collect();
        let path = out.join(format!("scene_{i:05}.png"));
        render_comparison(sc, &masks)?.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_lookup_on_a_single_worm() {
        let image = GrayImage::filled(8, 8, 0.5);
        let m = BinaryMask::from_fn(8, 8, |y, x| y == 2 && x < 5).unwrap();
        let rgb = render_overlay(&image, &[m]).unwrap();
        // 0.5 gray is 128; blended half-and-half with the first colour
        let expect = PALETTE[0].map(|c| ((128.0 + c as f64) / 2.0).round() as u8);
        assert_eq!(rgb.get(2, 0), expect);
        assert_eq!(rgb.get(3, 0), [128, 128, 128]);
    }

    #[test]
    fn overlaps_are_hatched() {
        let image = GrayImage::filled(4, 4, 0.0);
        let a = BinaryMask::from_fn(4, 4, |_, _| true).unwrap();
        let rgb = render_overlay(&image, &[a.clone(), a]).unwrap();
        assert_eq!(rgb.get(0, 0), HATCH_COLOR);
        assert_eq!(rgb.get(1, 3), HATCH_COLOR);
        assert_ne!(rgb.get(0, 1), HATCH_COLOR);
    }

    #[test]
    fn summary_counts_shared_pixels() {
        let image = GrayImage::filled(4, 4, 0.5);
        let a = BinaryMask::from_fn(4, 4, |y, _| y < 2).unwrap();
        let b = BinaryMask::from_fn(4, 4, |_, x| x < 2).unwrap();
        let sc = AnnotatedScene::from_amodal(image, vec![a, b], 0.0).unwrap();
        let s = dataset_summary(&[sc]);
        assert_eq!(s.instance_histogram.get(&2), Some(&1));
        assert!((s.overlap_fraction - 4.0 / 12.0).abs() < 1e-15);
    }
}
