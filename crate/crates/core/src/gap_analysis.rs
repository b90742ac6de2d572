//! Embedding-space statistics for paired text and image features: pair
//! similarity, subregion wins, and dimension-pooled gap histograms.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{ProjectedPatchSet, SyntheticPair, TextEmbedding, VisionLanguageBackbone};
use crate::error::{MacCapError, Result};
use crate::vecmath::{cosine_similarity, StableSum};

/// A caption embedding with the projected vision tokens of its image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisPair {
    pub text: TextEmbedding,
    pub projected: ProjectedPatchSet,
}

impl AnalysisPair {
    pub fn new(text: TextEmbedding, projected: ProjectedPatchSet) -> Result<Self> {
        if text.dim() != projected.dim() {
            return Err(MacCapError::shape(format!(
                "text dim {} vs image dim {}",
                text.dim(),
                projected.dim()
            )));
        }
        Ok(Self { text, projected })
    }
}

pub fn pairs_from_synthetic(
    backbone: &dyn VisionLanguageBackbone,
    pairs: &[SyntheticPair],
) -> Result<Vec<AnalysisPair>> {
    pairs
        .iter()
        .map(|p| AnalysisPair::new(p.text.clone(), backbone.project_patches(&p.patches)?))
        .collect()
}

/// How the subregion part of the mix representation is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixStrategy {
    /// The patch row most similar to the text.
    #[default]
    BestPatch,
    /// The mean of all patch rows.
    AveragePatches,
}

impl FromStr for MixStrategy {
    type Err = MacCapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-patch" => Ok(Self::BestPatch),
            "average-patches" => Ok(Self::AveragePatches),
            other => Err(MacCapError::invalid(format!("unknown mix strategy {other:?}"))),
        }
    }
}

/// Index (1-based into the projected rows) of the patch most similar to
/// `text`, with its similarity. Ties keep the lowest index.
pub fn best_patch(text: &TextEmbedding, projected: &ProjectedPatchSet) -> Result<(usize, f64)> {
    let t = text.as_slice();
    let mut best = (0, f64::NEG_INFINITY);
    for i in 1..=projected.n_patches() {
        let s = cosine_similarity(t, projected.tokens().row(i).as_slice().expect("row"))?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

/// Global row plus the best-matching patch row, not re-normalized.
pub fn mix_representation(text: &TextEmbedding, projected: &ProjectedPatchSet) -> Result<Vec<f64>> {
    mix_representation_with(text, projected, MixStrategy::BestPatch)
}

pub fn mix_representation_with(
    text: &TextEmbedding,
    projected: &ProjectedPatchSet,
    strategy: MixStrategy,
) -> Result<Vec<f64>> {
    if text.dim() != projected.dim() {
        return Err(MacCapError::shape("text and image dims differ"));
    }
    let global = projected.global();
    let sub = match strategy {
        MixStrategy::BestPatch => projected.row(best_patch(text, projected)?.0),
        MixStrategy::AveragePatches => {
            let n = projected.n_patches() as f64;
            let rows = projected.tokens();
            (0..projected.dim())
                .map(|d| (1..rows.nrows()).map(|i| rows[[i, d]]).sum::<f64>() / n)
                .collect()
        }
    };
    Ok(global.iter().zip(&sub).map(|(g, s)| g + s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationMode {
    Global,
    Mix,
}

impl RepresentationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Mix => "mix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub n_pairs: usize,
}

pub fn pair_similarity(pair: &AnalysisPair, mode: RepresentationMode, strategy: MixStrategy) -> Result<f64> {
    let image = match mode {
        RepresentationMode::Global => pair.projected.global(),
        RepresentationMode::Mix => mix_representation_with(&pair.text, &pair.projected, strategy)?,
    };
    cosine_similarity(pair.text.as_slice(), &image)
}

pub fn pair_similarity_stats(pairs: &[AnalysisPair], mode: RepresentationMode) -> Result<SimilarityStats> {
    pair_similarity_stats_with(pairs, mode, MixStrategy::BestPatch)
}

pub fn pair_similarity_stats_with(
    pairs: &[AnalysisPair],
    mode: RepresentationMode,
    strategy: MixStrategy,
) -> Result<SimilarityStats> {
    if pairs.is_empty() {
        return Err(MacCapError::invalid("no pairs to analyze"));
    }
    let mut sum = StableSum::default();
    let (mut max, mut min) = (f64::NEG_INFINITY, f64::INFINITY);
    for p in pairs {
        let s = pair_similarity(p, mode, strategy)?;
        sum.add(s);
        max = max.max(s);
        min = min.min(s);
    }
    // Rounding in the mean can land a hair outside [min, max] when all
    // values agree.
    let mean = sum.mean().expect("non-empty").clamp(min, max);
    Ok(SimilarityStats {
        mean,
        max,
        min,
        n_pairs: pairs.len(),
    })
}

/// Fraction of pairs in which some patch row is strictly more similar to
/// the text than the global row.
pub fn subregion_win_fraction(pairs: &[AnalysisPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MacCapError::invalid("no pairs to analyze"));
    }
    let mut wins = 0usize;
    for p in pairs {
        let global = cosine_similarity(p.text.as_slice(), &p.projected.global())?;
        if best_patch(&p.text, &p.projected)?.1 > global {
            wins += 1;
        }
    }
    Ok(wins as f64 / pairs.len() as f64)
}

/// Text minus image differences for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GapSample {
    /// `T − I_c`.
    pub global_gap: Vec<f64>,
    /// `T − I_p′[s]` for every projected row, global included.
    pub patch_gaps: Vec<Vec<f64>>,
}

impl GapSample {
    pub fn from_pair(pair: &AnalysisPair) -> Self {
        let t = pair.text.as_slice();
        let rows = pair.projected.tokens();
        let patch_gaps: Vec<Vec<f64>> = rows
            .rows()
            .into_iter()
            .map(|r| t.iter().zip(r.iter()).map(|(a, b)| a - b).collect())
            .collect();
        Self {
            global_gap: patch_gaps[0].clone(),
            patch_gaps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMode {
    Global,
    Patch,
}

impl GapMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Patch => "patch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bins: 101,
            lo: -0.2,
            hi: 0.2,
        }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || !self.lo.is_finite() || !self.hi.is_finite() || self.lo >= self.hi {
            return Err(MacCapError::invalid("histogram needs bins >= 1 and lo < hi"));
        }
        Ok(())
    }

    /// Regular bins are `[lo + i·w, lo + (i+1)·w)`; the last one also holds
    /// `hi`. Values outside land in the underflow (0) or overflow (last)
    /// slot.
    fn slot(&self, v: f64) -> usize {
        if v < self.lo {
            return 0;
        }
        if v > self.hi {
            return self.bins + 1;
        }
        let w = (self.hi - self.lo) / self.bins as f64;
        let i = ((v - self.lo) / w).floor() as usize;
        1 + i.min(self.bins - 1)
    }

    fn edges(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.bins as f64;
        let mut e = Vec::with_capacity(self.bins + 3);
        e.push(f64::NEG_INFINITY);
        e.extend((0..self.bins).map(|i| self.lo + i as f64 * w));
        e.push(self.hi);
        e.push(f64::INFINITY);
        e
    }
}

/// Histogram with an underflow slot first and an overflow slot last;
/// `bin_edges.len() == counts.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub pooled_mean: f64,
    pub n_pairs: usize,
    pub dims_pooled: usize,
}

impl GapHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn gap_distribution(pairs: &[AnalysisPair], mode: GapMode) -> Result<GapHistogram> {
    gap_distribution_with(pairs, mode, &HistogramConfig::default())
}

pub fn gap_distribution_with(
    pairs: &[AnalysisPair],
    mode: GapMode,
    cfg: &HistogramConfig,
) -> Result<GapHistogram> {
    if pairs.is_empty() {
        return Err(MacCapError::invalid("no pairs to analyze"));
    }
    cfg.validate()?;
    let mut counts = vec![0u64; cfg.bins + 2];
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut dims_pooled = None;
    for p in pairs {
        let g = GapSample::from_pair(p);
        let values: Vec<&Vec<f64>> = match mode {
            GapMode::Global => vec![&g.global_gap],
            GapMode::Patch => g.patch_gaps.iter().collect(),
        };
        let per_pair: usize = values.iter().map(|v| v.len()).sum();
        if *dims_pooled.get_or_insert(per_pair) != per_pair {
            return Err(MacCapError::shape("pairs have inconsistent shapes"));
        }
        for v in values.into_iter().flatten() {
            counts[cfg.slot(*v)] += 1;
            sum += *v;
            n += 1;
        }
    }
    Ok(GapHistogram {
        bin_edges: cfg.edges(),
        counts,
        pooled_mean: sum / n as f64,
        n_pairs: pairs.len(),
        dims_pooled: dims_pooled.unwrap_or(0),
    })
}

/// One line of the statistics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatRow {
    pub stat: String,
    pub mode: String,
    pub value: f64,
    pub n_pairs: usize,
}

impl StatRow {
    pub fn new(stat: &str, mode: &str, value: f64, n_pairs: usize) -> Self {
        Self {
            stat: stat.into(),
            mode: mode.into(),
            value,
            n_pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub global: SimilarityStats,
    pub mix: SimilarityStats,
    pub win_fraction: f64,
    pub global_gap: GapHistogram,
    pub patch_gap: GapHistogram,
}

impl AnalysisReport {
    pub fn compute(pairs: &[AnalysisPair], strategy: MixStrategy, hist: &HistogramConfig) -> Result<Self> {
        Ok(Self {
            global: pair_similarity_stats_with(pairs, RepresentationMode::Global, strategy)?,
            mix: pair_similarity_stats_with(pairs, RepresentationMode::Mix, strategy)?,
            win_fraction: subregion_win_fraction(pairs)?,
            global_gap: gap_distribution_with(pairs, GapMode::Global, hist)?,
            patch_gap: gap_distribution_with(pairs, GapMode::Patch, hist)?,
        })
    }

    pub fn rows(&self) -> Vec<StatRow> {
        let mut rows = Vec::new();
        for (mode, s) in [("global", &self.global), ("mix", &self.mix)] {
            rows.push(StatRow::new("mean", mode, s.mean, s.n_pairs));
            rows.push(StatRow::new("max", mode, s.max, s.n_pairs));
            rows.push(StatRow::new("min", mode, s.min, s.n_pairs));
        }
        rows.push(StatRow::new("win_fraction", "subregion", self.win_fraction, self.global.n_pairs));
        rows.push(StatRow::new(
            "gap_mean",
            "global",
            self.global_gap.pooled_mean,
            self.global_gap.n_pairs,
        ));
        rows.push(StatRow::new(
            "gap_mean",
            "patch",
            self.patch_gap.pooled_mean,
            self.patch_gap.n_pairs,
        ));
        rows
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| MacCapError::io(path, e))
}

fn finish(path: &Path, mut w: std::io::BufWriter<std::fs::File>, body: &str) -> Result<()> {
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| MacCapError::io(path, e))
}

pub fn stats_csv(rows: &[StatRow]) -> String {
    let mut s = String::from("stat,mode,value,n_pairs\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.stat, r.mode, r.value, r.n_pairs).expect("string write");
    }
    s
}

pub fn write_stats_csv(path: &Path, rows: &[StatRow]) -> Result<()> {
    let w = create(path)?;
    finish(path, w, &stats_csv(rows))
}

pub fn histogram_csv(h: &GapHistogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(s, "{},{},{}", h.bin_edges[i], h.bin_edges[i + 1], c).expect("string write");
    }
    s
}

pub fn write_histogram_csv(path: &Path, h: &GapHistogram) -> Result<()> {
    let w = create(path)?;
    finish(path, w, &histogram_csv(h))
}

/// Bar chart of the regular bins as a standalone SVG document.
pub fn histogram_svg(h: &GapHistogram, title: &str) -> String {
    let (width, height, margin) = (640.0, 360.0, 40.0);
    let regular = &h.counts[1..h.counts.len() - 1];
    let peak = regular.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (width - 2.0 * margin) / regular.len().max(1) as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
    for (i, &c) in regular.iter().enumerate() {
        let bh = (height - 2.0 * margin) * c as f64 / peak;
        writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a78b5"/>"##,
            margin + i as f64 * bar_w,
            height - margin - bh,
            bar_w,
            bh
        )
        .expect("string write");
    }
    let lo = h.bin_edges[1];
    let hi = h.bin_edges[h.bin_edges.len() - 2];
    writeln!(
        s,
        r#"<text x="{margin}" y="{}" font-size="12">{lo:.3}</text><text x="{}" y="{}" font-size="12" text-anchor="end">{hi:.3}</text>"#,
        height - margin / 3.0,
        width - margin,
        height - margin / 3.0
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{} (mean {:.5})</text>"#,
        width / 2.0,
        margin / 2.0,
        escape_xml(title),
        h.pooled_mean
    )
    .expect("string write");
    s.push_str("</svg>\n");
    s
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub label: &'static str,
}

/// Projects text and global image embeddings onto the top two principal
/// axes of their pooled, centered set.
pub fn pca_scatter(pairs: &[AnalysisPair]) -> Result<Vec<ScatterPoint>> {
    if pairs.is_empty() {
        return Err(MacCapError::invalid("no pairs to project"));
    }
    let d = pairs[0].text.dim();
    let mut points: Vec<(Vec<f64>, &'static str)> = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        points.push((p.text.as_slice().to_vec(), "text"));
        points.push((p.projected.global(), "image"));
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|(v, _)| v[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|(v, _)| v.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for v in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += v[i] * v[j] / n;
            }
        }
    }
    let axis1 = power_iteration(&cov);
    let lambda1 = rayleigh(&cov, &axis1);
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= lambda1 * axis1[i] * axis1[j];
        }
    }
    let axis2 = power_iteration(&cov);
    Ok(centered
        .iter()
        .zip(&points)
        .map(|(v, (_, label))| ScatterPoint {
            x: crate::vecmath::dot(v, &axis1),
            y: crate::vecmath::dot(v, &axis2),
            label,
        })
        .collect())
}

fn rayleigh(m: &[Vec<f64>], v: &[f64]) -> f64 {
    let mv: Vec<f64> = m.iter().map(|r| crate::vecmath::dot(r, v)).collect();
    crate::vecmath::dot(v, &mv)
}

fn power_iteration(m: &[Vec<f64>]) -> Vec<f64> {
    let d = m.len();
    // Deterministic start that is unlikely to be orthogonal to the top axis.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * i as f64).collect();
    let norm = crate::vecmath::l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..500 {
        let w: Vec<f64> = m.iter().map(|r| crate::vecmath::dot(r, &v)).collect();
        let norm = crate::vecmath::l2_norm(&w);
        if norm < 1e-300 {
            break;
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    v
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut s = String::from("x,y,modality\n");
    for p in points {
        writeln!(s, "{},{},{}", p.x, p.y, p.label).expect("string write");
    }
    s
}

pub fn write_text(path: &Path, body: &str) -> Result<()> {
    let w = create(path)?;
    finish(path, w, body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mat;

    fn pair(text: &[f64], rows: Vec<Vec<f64>>) -> AnalysisPair {
        let d = text.len();
        let n = rows.len();
        let m = Mat::from_shape_vec((n, d), rows.into_iter().flatten().collect()).unwrap();
        AnalysisPair::new(
            TextEmbedding::normalized(text).unwrap(),
            ProjectedPatchSet::new(m).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn mix_of_equal_rows_doubles_global() {
        let g = vec![0.6, 0.8];
        let p = pair(&[1.0, 0.0], vec![g.clone(), g.clone(), g.clone()]);
        assert_eq!(mix_representation(&p.text, &p.projected).unwrap(), vec![1.2, 1.6]);
    }

    #[test]
    fn mix_picks_the_matching_patch() {
        let t = [0.0, 0.0, 1.0];
        let p = pair(
            &t,
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![-1.0, 0.0, 0.0]],
        );
        assert_eq!(mix_representation(&p.text, &p.projected).unwrap(), vec![1.0, 0.0, 1.0]);
        let avg = mix_representation_with(&p.text, &p.projected, MixStrategy::AveragePatches).unwrap();
        let third = 1.0 / 3.0;
        assert!((avg[0] - (1.0 - third)).abs() < 1e-12);
        assert!((avg[1] - third).abs() < 1e-12 && (avg[2] - third).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_stats_are_one() {
        let p = pair(&[0.0, 1.0], vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        for mode in [RepresentationMode::Global, RepresentationMode::Mix] {
            let s = pair_similarity_stats(std::slice::from_ref(&p), mode).unwrap();
            assert_eq!((s.mean, s.max, s.min, s.n_pairs), (1.0, 1.0, 1.0, 1));
        }
        assert_eq!(subregion_win_fraction(std::slice::from_ref(&p)).unwrap(), 0.0);
        let h = gap_distribution(&[p], GapMode::Patch).unwrap();
        assert_eq!(h.pooled_mean, 0.0);
        assert_eq!(h.counts[51], 4);
        assert!(h.bin_edges[51] <= 0.0 && 0.0 < h.bin_edges[52]);
        assert_eq!(h.total(), 4);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(pair_similarity_stats(&[], RepresentationMode::Global).is_err());
        assert!(subregion_win_fraction(&[]).is_err());
        assert!(gap_distribution(&[], GapMode::Global).is_err());
        assert!(pca_scatter(&[]).is_err());
    }

    #[test]
    fn histogram_slots_cover_the_line() {
        let cfg = HistogramConfig { bins: 4, lo: -1.0, hi: 1.0 };
        assert_eq!(cfg.slot(-1.5), 0);
        assert_eq!(cfg.slot(-1.0), 1);
        assert_eq!(cfg.slot(-0.01), 2);
        assert_eq!(cfg.slot(0.0), 3);
        assert_eq!(cfg.slot(1.0), 4);
        assert_eq!(cfg.slot(1.01), 5);
        assert_eq!(cfg.edges(), vec![f64::NEG_INFINITY, -1.0, -0.5, 0.0, 0.5, 1.0, f64::INFINITY]);
    }

    #[test]
    fn csv_and_svg_render() {
        let p = pair(&[1.0, 0.0], vec![vec![0.9, 0.1], vec![0.8, 0.3]]);
        let r = AnalysisReport::compute(std::slice::from_ref(&p), MixStrategy::BestPatch, &HistogramConfig::default()).unwrap();
        let csv = stats_csv(&r.rows());
        assert!(csv.starts_with("stat,mode,value,n_pairs\nmean,global,"));
        assert_eq!(csv.lines().count(), 10);
        assert_eq!(histogram_csv(&r.patch_gap).lines().count(), 104);
        assert!(histogram_svg(&r.global_gap, "a<b").contains("a&lt;b"));
        let pts = pca_scatter(&[p]).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(scatter_csv(&pts).starts_with("x,y,modality\n"));
    }

    #[test]
    fn pca_separates_along_the_dominant_axis() {
        let pairs: Vec<_> = (0..10)
            .map(|i| {
                let y = 0.01 * i as f64;
                pair(&[1.0, y, 0.0], vec![vec![-1.0, y, 0.0], vec![-1.0, y, 0.0]])
            })
            .collect();
        let pts = pca_scatter(&pairs).unwrap();
        for p in &pts {
            let sign = if p.label == "text" { 1.0 } else { -1.0 };
            assert!(p.x * sign > 0.5 || p.x * sign < -0.5);
        }
        let text_x = pts.iter().find(|p| p.label == "text").unwrap().x;
        assert!(pts.iter().filter(|p| p.label == "text").all(|p| p.x.signum() == text_x.signum()));
    }
}
