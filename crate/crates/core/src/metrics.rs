//! Tile predictions, per-slide metrics, calibration thresholds, prediction
//! masks, cohort aggregates and paired comparisons.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::morph::{overlap_counts, remove_small_components};
use crate::raster::BinaryMask;
use crate::rng::derive_seed;
use crate::stats::{bh_adjust, bootstrap_mean_ci, wilcoxon_signed_rank, MeanCi, PMethod, PairedSample};
use crate::tissue::{axis_weights, LabelColumn, TileManifest, TileParams};

pub type TileKey = (String, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub slide_id: String,
    pub tile_x: usize,
    pub tile_y: usize,
    pub scores: Vec<f64>,
}

/// Scores of `n_models` base models per tile, ordered by
/// `(slide_id, tile_y, tile_x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    n_models: usize,
    rows: Vec<PredictionRow>,
}

impl PredictionTable {
    pub fn new(n_models: usize, mut rows: Vec<PredictionRow>) -> Result<Self> {
        for r in &rows {
            if r.scores.len() != n_models {
                return Err(invalid(format!(
                    "tile ({}, {}, {}) has {} scores, expected {n_models}",
                    r.slide_id,
                    r.tile_x,
                    r.tile_y,
                    r.scores.len()
                )));
            }
            if let Some(s) = r.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(invalid(format!(
                    "tile ({}, {}, {}) has score {s} outside [0, 1]",
                    r.slide_id, r.tile_x, r.tile_y
                )));
            }
        }
        rows.sort_by(|a, b| (&a.slide_id, a.tile_y, a.tile_x).cmp(&(&b.slide_id, b.tile_y, b.tile_x)));
        if let Some(w) = rows
            .windows(2)
            .find(|w| (&w[0].slide_id, w[0].tile_x, w[0].tile_y) == (&w[1].slide_id, w[1].tile_x, w[1].tile_y))
        {
            return Err(invalid(format!("duplicate prediction for tile ({}, {}, {})", w[0].slide_id, w[0].tile_x, w[0].tile_y)));
        }
        Ok(Self { n_models, rows })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let mut header = vec!["slide_id".to_string(), "tile_x".into(), "tile_y".into()];
        header.extend((1..=self.n_models).map(|k| format!("score_{k}")));
        wtr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.slide_id.clone(), r.tile_x.to_string(), r.tile_y.to_string()];
            rec.extend(r.scores.iter().map(|s| s.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let h: Vec<&str> = headers.iter().collect();
        if h.len() < 3 || h[..3] != ["slide_id", "tile_x", "tile_y"] {
            return Err(Error::Csv(format!("unexpected prediction header {h:?}")));
        }
        for (k, name) in h[3..].iter().enumerate() {
            if *name != format!("score_{}", k + 1) {
                return Err(Error::Csv(format!("unexpected prediction column {name:?}")));
            }
        }
        let n_models = h.len() - 3;
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Csv(format!("prediction row {}: bad {what}", line + 2));
            let scores = (3..rec.len())
                .map(|i| rec[i].trim().parse::<f64>().map_err(|_| bad(&format!("score_{}", i - 2))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(PredictionRow {
                slide_id: rec[0].to_string(),
                tile_x: rec[1].parse().map_err(|_| bad("tile_x"))?,
                tile_y: rec[2].parse().map_err(|_| bad("tile_y"))?,
                scores,
            });
        }
        Self::new(n_models, rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTile {
    pub slide_id: String,
    pub tile_x: usize,
    pub tile_y: usize,
    pub score: f64,
}

/// Mean score per tile across base models.
pub fn ensemble_average(t: &PredictionTable) -> Result<Vec<ScoredTile>> {
    if t.n_models == 0 {
        return Err(invalid("prediction table has no score columns"));
    }
    Ok(t.rows
        .iter()
        .map(|r| ScoredTile {
            slide_id: r.slide_id.clone(),
            tile_x: r.tile_x,
            tile_y: r.tile_y,
            score: r.scores.iter().sum::<f64>() / t.n_models as f64,
        })
        .collect())
}

fn check_pairs<T>(labels: &[u8], other: &[T]) -> Result<()> {
    if labels.len() != other.len() {
        return Err(Error::DimensionMismatch(format!("{} labels vs {} values", labels.len(), other.len())));
    }
    if labels.is_empty() {
        return Err(invalid("no tiles"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Mann–Whitney pair counts: `(wins, ties, positives, negatives)`, where a
/// win is a positive scoring above a negative.
pub fn pair_counts(labels: &[u8], scores: &[f64]) -> Result<(u64, u64, u64, u64)> {
    check_pairs(labels, scores)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("scores must be finite"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        let neg = (j - i) as u64 - pos;
        wins += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        i = j;
    }
    let p = labels.iter().filter(|&&l| l == 1).count() as u64;
    Ok((wins, ties, p, labels.len() as u64 - p))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn auroc(labels: &[u8], scores: &[f64]) -> Result<Option<f64>> {
    let (wins, ties, p, n) = pair_counts(labels, scores)?;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    Ok(Some((2 * wins + ties) as f64 / (2 * p * n) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YoudenResult {
    pub threshold: f64,
    /// Sensitivity + specificity − 1 at the threshold.
    pub j: f64,
}

/// Candidate thresholds: 0, midpoints of adjacent distinct sorted scores, 1.
pub fn youden_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = vec![0.0];
    c.extend(s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    c.push(1.0);
    c
}

/// Threshold maximizing Youden's J under `score ≥ t → positive`; the
/// smallest candidate wins ties.
pub fn youden_threshold(labels: &[u8], scores: &[f64]) -> Result<YoudenResult> {
    check_pairs(labels, scores)?;
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(invalid(format!("score {s} outside [0, 1]")));
    }
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&l, &s) in labels.iter().zip(scores) {
        if l == 1 {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid("Youden threshold needs both classes"));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let (p, n) = (pos.len() as i128, neg.len() as i128);
    let mut best: Option<(i128, f64)> = None;
    for t in youden_candidates(scores) {
        let tp = (pos.len() - pos.partition_point(|&s| s < t)) as i128;
        let tn = neg.partition_point(|&s| s < t) as i128;
        // J · p · n, compared exactly
        let score = tp * n + tn * p;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, t));
        }
    }
    let (score, threshold) = best.expect("at least two candidates");
    Ok(YoudenResult { threshold, j: (score - p * n) as f64 / (p * n) as f64 })
}

pub fn binarize(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| (s >= threshold) as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn from_predictions(labels: &[u8], predicted: &[u8]) -> Result<Self> {
        check_pairs(labels, predicted)?;
        if predicted.iter().any(|&p| p > 1) {
            return Err(invalid("predictions must be 0 or 1"));
        }
        let mut c = Confusion::default();
        for (&l, &p) in labels.iter().zip(predicted) {
            match (l, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (0, 0) => c.tn += 1,
                _ => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn metrics(&self) -> ConfusionMetrics {
        let Confusion { tp, fp, tn, fn_ } = *self;
        ConfusionMetrics {
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            specificity: ratio(tn, tn + fp),
            sensitivity: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
        }
    }
}

pub fn confusion_metrics(labels: &[u8], predicted: &[u8]) -> Result<ConfusionMetrics> {
    Ok(Confusion::from_predictions(labels, predicted)?.metrics())
}

/// Mask dimensions covering `extent_um` at `resolution_um`.
pub fn mask_dims(extent_um: (f64, f64), resolution_um: f64) -> (usize, usize) {
    let d = |e: f64| {
        let raw = e / resolution_um;
        ((raw - raw.abs() * 1e-12).ceil() as usize).max(1)
    };
    (d(extent_um.0), d(extent_um.1))
}

/// Paints tile footprints into a mask: a pixel is set when at least half of
/// its area is covered by the given tiles. Coverage from overlapping tiles
/// adds up and is clamped to the pixel area.
pub fn paint_tiles(
    tiles: &[(usize, usize)],
    params: &TileParams,
    width: usize,
    height: usize,
    resolution_um: f64,
) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(width, height, resolution_um)?;
    let side = params.tile_extent_um();
    let mut cover = vec![0.0f64; width * height];
    for &(tx, ty) in tiles {
        let x0 = tx as f64 * params.tile_resolution_um;
        let y0 = ty as f64 * params.tile_resolution_um;
        let (cx, wx) = axis_weights(x0, x0 + side, resolution_um, width);
        let (cy, wy) = axis_weights(y0, y0 + side, resolution_um, height);
        for (j, &h) in wy.iter().enumerate() {
            for (i, &w) in wx.iter().enumerate() {
                cover[(cy + j) * width + cx + i] += w * h;
            }
        }
    }
    let half = 0.5 * resolution_um * resolution_um;
    for y in 0..height {
        for x in 0..width {
            if cover[y * width + x] >= half * (1.0 - 1e-12) {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

/// Cleaned prediction mask from the positive tiles of one slide.
pub fn prediction_mask(
    positive_tiles: &[(usize, usize)],
    slide_extent_um: (f64, f64),
    params: &TileParams,
    resolution_um: f64,
    min_area_px: usize,
) -> Result<BinaryMask> {
    let (w, h) = mask_dims(slide_extent_um, resolution_um);
    let painted = paint_tiles(positive_tiles, params, w, h, resolution_um)?;
    Ok(remove_small_components(&painted, min_area_px))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Metric {
    Auroc,
    Dice,
    Jaccard,
    Accuracy,
    F1,
    Specificity,
    Sensitivity,
    Precision,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Auroc,
        Metric::Dice,
        Metric::Jaccard,
        Metric::Accuracy,
        Metric::F1,
        Metric::Specificity,
        Metric::Sensitivity,
        Metric::Precision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Dice => "dice",
            Metric::Jaccard => "jaccard",
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Specificity => "specificity",
            Metric::Sensitivity => "sensitivity",
            Metric::Precision => "precision",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideMetrics {
    pub slide_id: String,
    pub n_tiles: usize,
    pub auroc: Option<f64>,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
}

impl SlideMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Auroc => self.auroc,
            Metric::Dice => self.dice,
            Metric::Jaccard => self.jaccard,
            Metric::Accuracy => self.accuracy,
            Metric::F1 => self.f1,
            Metric::Specificity => self.specificity,
            Metric::Sensitivity => self.sensitivity,
            Metric::Precision => self.precision,
        }
    }

    fn set(&mut self, m: Metric, v: Option<f64>) {
        let slot = match m {
            Metric::Auroc => &mut self.auroc,
            Metric::Dice => &mut self.dice,
            Metric::Jaccard => &mut self.jaccard,
            Metric::Accuracy => &mut self.accuracy,
            Metric::F1 => &mut self.f1,
            Metric::Specificity => &mut self.specificity,
            Metric::Sensitivity => &mut self.sensitivity,
            Metric::Precision => &mut self.precision,
        };
        *slot = v;
    }

    /// Names of metrics that are undefined for this slide.
    pub fn undefined(&self) -> Vec<&'static str> {
        Metric::ALL.iter().filter(|m| self.get(**m).is_none()).map(|m| m.name()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub mask_resolution_um: f64,
    pub min_area_px: usize,
    /// Ground-truth class masks by slide id. Slides without one use the
    /// ground-truth-positive tiles painted by the same rule as predictions.
    pub gt_masks: BTreeMap<String, BinaryMask>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { mask_resolution_um: 7.264, min_area_px: 4, gt_masks: BTreeMap::new() }
    }
}

/// Per-slide evaluation inputs after joining predictions onto the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideTiles {
    pub slide_id: String,
    pub tiles: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

fn describe_orphans(kind: &str, keys: &[TileKey]) -> String {
    let shown: Vec<String> = keys.iter().take(10).map(|(s, x, y)| format!("({s}, {x}, {y})")).collect();
    format!("{} {kind} without a match: {}", keys.len(), shown.join(", "))
}

/// Joins ensemble scores onto manifest tiles, one group per slide in slide
/// order. Every tile must match exactly once.
pub fn join_predictions(
    manifest: &TileManifest,
    scores: &[ScoredTile],
    column: LabelColumn,
) -> Result<Vec<SlideTiles>> {
    let mut by_key: HashMap<(&str, usize, usize), f64> = HashMap::with_capacity(scores.len());
    for s in scores {
        by_key.insert((s.slide_id.as_str(), s.tile_x, s.tile_y), s.score);
    }
    let mut used = HashSet::with_capacity(scores.len());
    let mut missing: Vec<TileKey> = Vec::new();
    let mut groups: Vec<SlideTiles> = Vec::new();
    for r in &manifest.records {
        let key = (r.slide_id.as_str(), r.tile_x, r.tile_y);
        let Some(&score) = by_key.get(&key) else {
            missing.push((r.slide_id.clone(), r.tile_x, r.tile_y));
            continue;
        };
        used.insert(key);
        let label = r.label(column).ok_or_else(|| {
            invalid(format!("tile ({}, {}, {}) has no {} label", r.slide_id, r.tile_x, r.tile_y, column.name()))
        })?;
        if groups.last().is_none_or(|g| g.slide_id != r.slide_id) {
            groups.push(SlideTiles { slide_id: r.slide_id.clone(), tiles: vec![], labels: vec![], scores: vec![] });
        }
        let g = groups.last_mut().expect("pushed above");
        g.tiles.push((r.tile_x, r.tile_y));
        g.labels.push(label);
        g.scores.push(score);
    }
    let extra: Vec<TileKey> = scores
        .iter()
        .filter(|s| !used.contains(&(s.slide_id.as_str(), s.tile_x, s.tile_y)))
        .map(|s| (s.slide_id.clone(), s.tile_x, s.tile_y))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(describe_orphans("manifest tiles", &missing));
        }
        if !extra.is_empty() {
            parts.push(describe_orphans("predictions", &extra));
        }
        return Err(invalid(format!("orphan tiles: {}", parts.join("; "))));
    }
    Ok(groups)
}

/// Extent covered by the tile grid of a slide.
fn tiles_extent_um(tiles: &[(usize, usize)], params: &TileParams) -> (f64, f64) {
    let mx = tiles.iter().map(|t| t.0).max().unwrap_or(0) + params.tile_size_px;
    let my = tiles.iter().map(|t| t.1).max().unwrap_or(0) + params.tile_size_px;
    (mx as f64 * params.tile_resolution_um, my as f64 * params.tile_resolution_um)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideEvaluation {
    pub metrics: SlideMetrics,
    pub gt_mask: BinaryMask,
    pub prediction_mask: BinaryMask,
}

/// Metrics and masks for one slide.
pub fn evaluate_slide(
    s: &SlideTiles,
    params: &TileParams,
    threshold: f64,
    opts: &ReportOptions,
) -> Result<SlideEvaluation> {
    let predicted = binarize(&s.scores, threshold);
    let confusion = Confusion::from_predictions(&s.labels, &predicted)?.metrics();
    let positives = |flags: &[u8]| -> Vec<(usize, usize)> {
        s.tiles.iter().zip(flags).filter(|(_, &f)| f == 1).map(|(t, _)| *t).collect()
    };
    let res = opts.mask_resolution_um;
    let gt_mask = match opts.gt_masks.get(&s.slide_id) {
        Some(m) => m.clone(),
        None => {
            let (w, h) = mask_dims(tiles_extent_um(&s.tiles, params), res);
            let painted = paint_tiles(&positives(&s.labels), params, w, h, res)?;
            remove_small_components(&painted, opts.min_area_px)
        }
    };
    let pred_painted =
        paint_tiles(&positives(&predicted), params, gt_mask.width(), gt_mask.height(), gt_mask.resolution_um())?;
    let prediction_mask = remove_small_components(&pred_painted, opts.min_area_px);
    let overlap = overlap_counts(&gt_mask, &prediction_mask)?;
    let metrics = SlideMetrics {
        slide_id: s.slide_id.clone(),
        n_tiles: s.tiles.len(),
        auroc: auroc(&s.labels, &s.scores)?,
        dice: Some(overlap.dice()),
        jaccard: Some(overlap.jaccard()),
        accuracy: confusion.accuracy,
        f1: confusion.f1,
        specificity: confusion.specificity,
        sensitivity: confusion.sensitivity,
        precision: confusion.precision,
    };
    Ok(SlideEvaluation { metrics, gt_mask, prediction_mask })
}

/// Per-slide metrics for every slide of the manifest, in slide order.
pub fn slide_report(
    manifest: &TileManifest,
    predictions: &PredictionTable,
    threshold: f64,
    column: LabelColumn,
    opts: &ReportOptions,
) -> Result<Vec<SlideMetrics>> {
    let scores = ensemble_average(predictions)?;
    join_predictions(manifest, &scores, column)?
        .iter()
        .map(|s| evaluate_slide(s, &manifest.params, threshold, opts).map(|e| e.metrics))
        .collect()
}

/// Youden threshold over all tiles of a (tune) manifest pooled together.
pub fn calibrate_threshold(
    manifest: &TileManifest,
    predictions: &PredictionTable,
    column: LabelColumn,
) -> Result<YoudenResult> {
    let scores = ensemble_average(predictions)?;
    let groups = join_predictions(manifest, &scores, column)?;
    let labels: Vec<u8> = groups.iter().flat_map(|g| g.labels.iter().copied()).collect();
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.scores.iter().copied()).collect();
    youden_threshold(&labels, &pooled)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, ()> {
    match s.trim() {
        "NA" | "" => Ok(None),
        t => t.parse::<f64>().map(Some).map_err(|_| ()),
    }
}

pub fn write_slide_metrics_csv<W: Write>(rows: &[SlideMetrics], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let mut header = vec!["slide_id", "n_tiles"];
    header.extend(Metric::ALL.iter().map(|m| m.name()));
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.slide_id.clone(), r.n_tiles.to_string()];
        rec.extend(Metric::ALL.iter().map(|&m| fmt_opt(r.get(m))));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_slide_metrics_csv<R: Read>(r: R) -> Result<Vec<SlideMetrics>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let sid = col("slide_id").ok_or_else(|| Error::Csv("missing column \"slide_id\"".into()))?;
    let n_col = col("n_tiles");
    let metric_cols: Vec<(Metric, usize)> = Metric::ALL
        .iter()
        .map(|&m| col(m.name()).map(|c| (m, c)).ok_or_else(|| Error::Csv(format!("missing column {:?}", m.name()))))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = SlideMetrics {
            slide_id: rec[sid].to_string(),
            n_tiles: match n_col {
                Some(c) => rec[c].parse().map_err(|_| Error::Csv(format!("row {}: bad n_tiles", line + 2)))?,
                None => 0,
            },
            auroc: None,
            dice: None,
            jaccard: None,
            accuracy: None,
            f1: None,
            specificity: None,
            sensitivity: None,
            precision: None,
        };
        for &(m, c) in &metric_cols {
            let v = parse_opt(&rec[c]).map_err(|_| Error::Csv(format!("row {}: bad {}", line + 2, m.name())))?;
            row.set(m, v);
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub metric: Metric,
    pub n_defined: usize,
    pub n_undefined: usize,
    /// `None` when no slide has the metric defined.
    pub ci: Option<MeanCi>,
}

/// Cohort mean and bootstrap interval per metric over slides where the
/// metric is defined. Metric `k` bootstraps with seed `derive_seed(seed, k)`.
pub fn aggregate(rows: &[SlideMetrics], n_boot: usize, alpha: f64, seed: u64) -> Result<Vec<AggregateRow>> {
    Metric::ALL
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let values: Vec<f64> = rows.iter().filter_map(|r| r.get(m)).collect();
            let ci = if values.is_empty() {
                None
            } else {
                Some(bootstrap_mean_ci(&values, n_boot, alpha, derive_seed(seed, k as u64))?)
            };
            Ok(AggregateRow { metric: m, n_defined: values.len(), n_undefined: rows.len() - values.len(), ci })
        })
        .collect()
}

/// One row, one mean / low / high column triple per metric.
pub fn write_aggregate_csv<W: Write>(label: &str, rows: &[AggregateRow], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let mut header = vec!["label".to_string()];
    let mut rec = vec![label.to_string()];
    for r in rows {
        for part in ["mean", "ci_low", "ci_high", "n"] {
            header.push(format!("{}_{part}", r.metric.name()));
        }
        rec.push(fmt_opt(r.ci.map(|c| c.mean)));
        rec.push(fmt_opt(r.ci.map(|c| c.ci_low)));
        rec.push(fmt_opt(r.ci.map(|c| c.ci_high)));
        rec.push(r.n_defined.to_string());
    }
    wtr.write_record(&header)?;
    wtr.write_record(&rec)?;
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: Metric,
    /// Slides where the metric is defined in both reports.
    pub n_pairs: usize,
    pub mean_a: Option<f64>,
    pub mean_b: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_bh: Option<f64>,
    pub method: Option<PMethod>,
    /// Reason the test is undefined, if it is.
    pub note: Option<String>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Paired per-metric Wilcoxon tests between two reports over the same
/// slides, BH-adjusted across the metrics whose test is defined.
pub fn compare_reports(a: &[SlideMetrics], b: &[SlideMetrics]) -> Result<Vec<ComparisonRow>> {
    let index = |rows: &[SlideMetrics]| -> Result<BTreeMap<String, SlideMetrics>> {
        let mut m = BTreeMap::new();
        for r in rows {
            if m.insert(r.slide_id.clone(), r.clone()).is_some() {
                return Err(invalid(format!("duplicate slide {:?}", r.slide_id)));
            }
        }
        Ok(m)
    };
    let (ia, ib) = (index(a)?, index(b)?);
    let only_a: Vec<&String> = ia.keys().filter(|k| !ib.contains_key(*k)).collect();
    let only_b: Vec<&String> = ib.keys().filter(|k| !ia.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(invalid(format!(
            "slide sets differ: only in first {:?}, only in second {:?}",
            only_a.iter().take(10).collect::<Vec<_>>(),
            only_b.iter().take(10).collect::<Vec<_>>()
        )));
    }
    let mut rows: Vec<ComparisonRow> = Metric::ALL
        .iter()
        .map(|&m| {
            let (mut ids, mut va, mut vb) = (Vec::new(), Vec::new(), Vec::new());
            for (id, ra) in &ia {
                if let (Some(x), Some(y)) = (ra.get(m), ib[id].get(m)) {
                    ids.push(id.clone());
                    va.push(x);
                    vb.push(y);
                }
            }
            let mut row = ComparisonRow {
                metric: m,
                n_pairs: ids.len(),
                mean_a: mean(&va),
                mean_b: mean(&vb),
                p_raw: None,
                p_bh: None,
                method: None,
                note: None,
            };
            if ids.is_empty() {
                row.note = Some("no slide has the metric defined in both reports".into());
                return Ok(row);
            }
            match wilcoxon_signed_rank(&PairedSample::new(ids, va, vb)?) {
                Ok(w) => {
                    row.p_raw = Some(w.p_value);
                    row.method = Some(w.method);
                }
                Err(Error::Undefined(why)) => row.note = Some(why),
                Err(e) => return Err(e),
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let defined: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].p_raw.is_some()).collect();
    let raw: Vec<f64> = defined.iter().map(|&i| rows[i].p_raw.expect("filtered")).collect();
    for (&i, p) in defined.iter().zip(bh_adjust(&raw)?) {
        rows[i].p_bh = Some(p);
    }
    Ok(rows)
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wtr.write_record(["metric", "mean_a", "mean_b", "p_raw", "p_bh", "n_pairs", "method", "note"])?;
    for r in rows {
        wtr.write_record([
            r.metric.name().to_string(),
            fmt_opt(r.mean_a),
            fmt_opt(r.mean_b),
            fmt_opt(r.p_raw),
            fmt_opt(r.p_bh),
            r.n_pairs.to_string(),
            r.method.map_or("NA", PMethod::name).to_string(),
            r.note.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tissue::TileRecord;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0, 1], &[0.2, 0.7]).unwrap(), Some(1.0));
        assert_eq!(auroc(&[0, 0, 1, 1], &[0.4, 0.6, 0.5, 0.9]).unwrap(), Some(0.75));
        assert_eq!(auroc(&[1, 1], &[0.4, 0.6]).unwrap(), None);
        assert_eq!(auroc(&[0, 1], &[0.5, 0.5]).unwrap(), Some(0.5));
        assert!(auroc(&[0, 1], &[0.5]).is_err());
    }

    #[test]
    fn youden_examples() {
        let r = youden_threshold(&[0, 0, 1, 1], &[0.1, 0.2, 0.6, 0.8]).unwrap();
        assert!((r.threshold - 0.4).abs() < 1e-15);
        assert_eq!(r.j, 1.0);
        let inv = youden_threshold(&[1, 1, 0, 0], &[0.1, 0.2, 0.6, 0.8]).unwrap();
        assert_eq!(inv, YoudenResult { threshold: 0.0, j: 0.0 });
        assert!(youden_threshold(&[1, 1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn confusion_hand_example() {
        let labels = [1, 1, 1, 1, 0, 0, 0, 0];
        let pred = [1, 1, 0, 0, 1, 0, 0, 0];
        let m = confusion_metrics(&labels, &pred).unwrap();
        assert_eq!(m.accuracy, Some(5.0 / 8.0));
        assert_eq!(m.precision, Some(2.0 / 3.0));
        assert_eq!(m.sensitivity, Some(0.5));
        assert_eq!(m.specificity, Some(0.75));
        assert_eq!(m.f1, Some(4.0 / 7.0));
    }

    #[test]
    fn confusion_undefined_entries() {
        let m = confusion_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.specificity, Some(1.0));
    }

    #[test]
    fn ensemble_means() {
        let t = PredictionTable::new(
            2,
            vec![PredictionRow { slide_id: "s".into(), tile_x: 0, tile_y: 0, scores: vec![0.2, 0.8] }],
        )
        .unwrap();
        assert_eq!(ensemble_average(&t).unwrap()[0].score, 0.5);
        let empty = PredictionTable::new(0, vec![]).unwrap();
        assert!(ensemble_average(&empty).is_err());
    }

    #[test]
    fn single_tile_footprint() {
        let params = TileParams::default();
        let m = paint_tiles(&[(0, 0)], &params, 60, 60, 7.264).unwrap();
        // 271.492 µm / 7.264 = 37.375 px; the partial column covers 0.375 < 0.5
        assert_eq!(m.count(), 37 * 37);
        let shifted = paint_tiles(&[(598, 0)], &params, 80, 60, 7.264).unwrap();
        // columns from 37.375 to 74.75: pixel 37 is 62.5% covered, pixel 74 is 75%
        assert_eq!(shifted.count(), 38 * 37);
    }

    fn manifest(labels: &[(usize, u8)]) -> TileManifest {
        let params = TileParams { tile_size_px: 10, stride_px: 10, tile_resolution_um: 1.0, ..TileParams::default() };
        let records = labels
            .iter()
            .map(|&(k, l)| TileRecord {
                slide_id: "s1".into(),
                tile_x: 10 * k,
                tile_y: 0,
                tissue_fraction: 1.0,
                label_ihc: Some(l),
                label_registered: Some(l),
            })
            .collect();
        TileManifest::new(params, records).unwrap()
    }

    fn predictions(scores: &[(usize, f64)]) -> PredictionTable {
        PredictionTable::new(
            1,
            scores
                .iter()
                .map(|&(k, s)| PredictionRow { slide_id: "s1".into(), tile_x: 10 * k, tile_y: 0, scores: vec![s] })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn oracle_predictions_score_one() {
        let m = manifest(&[(0, 1), (1, 0), (2, 1), (3, 0)]);
        let p = predictions(&[(0, 1.0), (1, 0.0), (2, 1.0), (3, 0.0)]);
        let opts = ReportOptions { mask_resolution_um: 1.0, min_area_px: 0, ..Default::default() };
        let r = slide_report(&m, &p, 0.5, LabelColumn::Ihc, &opts).unwrap();
        for metric in Metric::ALL {
            assert_eq!(r[0].get(metric), Some(1.0), "{metric}");
        }
    }

    #[test]
    fn orphans_are_listed() {
        let m = manifest(&[(0, 1), (1, 0)]);
        let p = predictions(&[(0, 1.0), (5, 0.0)]);
        let err = slide_report(&m, &p, 0.5, LabelColumn::Ihc, &ReportOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(s1, 10, 0)") && msg.contains("(s1, 50, 0)"), "{msg}");
    }

    #[test]
    fn slide_metrics_csv_round_trip() {
        let rows = vec![SlideMetrics {
            slide_id: "a".into(),
            n_tiles: 3,
            auroc: None,
            dice: Some(0.25),
            jaccard: Some(1.0 / 7.0),
            accuracy: Some(1.0),
            f1: None,
            specificity: Some(0.0),
            sensitivity: None,
            precision: Some(0.1),
        }];
        let mut buf = Vec::new();
        write_slide_metrics_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains(",NA,"));
        assert_eq!(read_slide_metrics_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn identical_reports_are_undefined() {
        let m = manifest(&[(0, 1), (1, 0)]);
        let p = predictions(&[(0, 0.7), (1, 0.2)]);
        let r = slide_report(&m, &p, 0.5, LabelColumn::Ihc, &ReportOptions::default()).unwrap();
        let cmp = compare_reports(&r, &r).unwrap();
        assert_eq!(cmp.len(), 8);
        assert!(cmp.iter().all(|c| c.p_raw.is_none() && c.note.is_some()));
    }
}
