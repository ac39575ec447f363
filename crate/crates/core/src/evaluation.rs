//! Motion and fidelity metrics for generated clips: an intensity-weighted
//! centroid tracker, endpoint errors against the keyframes, PSNR against
//! ground truth, and a side-by-side comparison table.

use std::fmt::Write as _;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{KeyframePair, VideoClip};
use crate::error::{Error, Result};

pub const DEFAULT_BACKGROUND_LEVEL: f64 = 0.2;
/// Displacements smaller than this (in pixels) count as "no motion" when
/// looking for direction reversals.
pub const DEFAULT_MIN_STEP: f64 = 0.1;
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub background_level: f64,
    pub min_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            background_level: DEFAULT_BACKGROUND_LEVEL,
            min_step: DEFAULT_MIN_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    /// `(x, y)` per frame, in pixel units.
    pub centroids: Vec<[f64; 2]>,
    /// Unit principal direction of the centroid cloud, sign-normalized so
    /// that it does not depend on frame order.
    pub axis: [f64; 2],
    /// Signed step displacements projected on `axis`, length `N - 1`.
    pub displacements: Vec<f64>,
    pub monotone: bool,
    pub reversal_count: usize,
}

impl TrajectoryReport {
    /// Displacements signed so that the net motion is positive; the speed
    /// profile along the direction of travel.
    pub fn oriented_displacements(&self) -> Vec<f64> {
        let net: f64 = self.displacements.iter().sum();
        if net < 0.0 {
            self.displacements.iter().map(|d| -d).collect()
        } else {
            self.displacements.clone()
        }
    }

    /// Re-counts reversals ignoring steps with `|d| <= min_step`.
    pub fn with_min_step(mut self, min_step: f64) -> Self {
        self.reversal_count = count_reversals(&self.displacements, min_step);
        self.monotone = self.reversal_count == 0;
        self
    }
}

fn count_reversals(displacements: &[f64], min_step: f64) -> usize {
    let signs: Vec<bool> = displacements
        .iter()
        .filter(|d| d.abs() > min_step)
        .map(|&d| d > 0.0)
        .collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

fn frame_centroid(frame: &Array3<f32>, level: f64) -> Option<[f64; 2]> {
    let (c, h, w) = frame.dim();
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let intensity: f64 = (0..c).map(|ch| frame[[ch, y, x]] as f64).sum::<f64>() / c as f64;
            let weight = intensity - level;
            if weight > 0.0 {
                sw += weight;
                sx += weight * (x as f64 + 0.5);
                sy += weight * (y as f64 + 0.5);
            }
        }
    }
    (sw > 0.0).then(|| [sx / sw, sy / sw])
}

fn principal_axis(points: &[[f64; 2]]) -> [f64; 2] {
    // sorted copy, so the result does not depend on frame order
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    let lambda = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (mut ux, mut uy) = if b != 0.0 {
        (lambda - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (ux * ux + uy * uy).sqrt();
    if norm == 0.0 {
        return [1.0, 0.0];
    }
    ux /= norm;
    uy /= norm;
    if ux < 0.0 || (ux == 0.0 && uy < 0.0) {
        ux = -ux;
        uy = -uy;
    }
    [ux, uy]
}

/// Tracks the single bright object of a clip. Pixel weights are the channel
/// mean intensity in excess of `background_level`.
pub fn track_centroids(clip: &VideoClip, background_level: f64) -> Result<TrajectoryReport> {
    let centroids = (0..clip.frame_count())
        .map(|n| frame_centroid(&clip.frame(n), background_level).ok_or(Error::EmptyFrame { frame: n }))
        .collect::<Result<Vec<_>>>()?;
    let axis = principal_axis(&centroids);
    let displacements: Vec<f64> = centroids
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]) * axis[0] + (w[1][1] - w[0][1]) * axis[1])
        .collect();
    let reversal_count = count_reversals(&displacements, 0.0);
    Ok(TrajectoryReport {
        centroids,
        axis,
        displacements,
        monotone: reversal_count == 0,
        reversal_count,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn mse(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Pearson correlation between the speed profiles (oriented displacements)
/// of a generated clip and a reference clip; 0 when either cannot be tracked.
pub fn speed_correlation(generated: &VideoClip, reference: &VideoClip, level: f64) -> f64 {
    match (track_centroids(generated, level), track_centroids(reference, level)) {
        (Ok(g), Ok(r)) => pearson(&g.oriented_displacements(), &r.oriented_displacements()),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub clips: usize,
    pub endpoint_mse_first: f64,
    pub endpoint_mse_last: f64,
    pub psnr_vs_gt: Option<f64>,
    pub monotone_fraction: f64,
    pub mean_reversals: f64,
    /// Clips where some frame had no trackable object.
    pub track_failures: usize,
    /// Mean speed-profile correlation with ground truth, when available.
    pub speed_correlation: Option<f64>,
}

impl EvalSummary {
    pub fn endpoint_mse(&self) -> f64 {
        0.5 * (self.endpoint_mse_first + self.endpoint_mse_last)
    }
}

pub fn evaluate_run(
    generated: &[VideoClip],
    pairs: &[KeyframePair],
    gt: Option<&[VideoClip]>,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    if generated.len() != pairs.len() {
        return Err(Error::Argument(format!(
            "{} generated clips but {} keyframe pairs",
            generated.len(),
            pairs.len()
        )));
    }
    if let Some(gt) = gt {
        if gt.len() != generated.len() {
            return Err(Error::Argument(format!(
                "{} generated clips but {} ground-truth clips",
                generated.len(),
                gt.len()
            )));
        }
    }
    let count = generated.len();
    let (mut mse_first, mut mse_last) = (0.0, 0.0);
    let (mut monotone, mut reversals, mut tracked, mut failures) = (0usize, 0usize, 0usize, 0usize);
    let (mut psnr_sum, mut corr_sum) = (0.0, 0.0);

    for (i, (clip, pair)) in generated.iter().zip(pairs).enumerate() {
        let n = clip.frame_count();
        if clip.frame(0).dim() != pair.first.dim() {
            return Err(Error::shape(pair.first.shape(), clip.frame(0).shape()));
        }
        mse_first += mse(&clip.frame(0), &pair.first);
        mse_last += mse(&clip.frame(n - 1), &pair.last);
        match track_centroids(clip, cfg.background_level) {
            Ok(report) => {
                let report = report.with_min_step(cfg.min_step);
                tracked += 1;
                reversals += report.reversal_count;
                if report.monotone {
                    monotone += 1;
                }
            }
            Err(Error::EmptyFrame { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
        if let Some(gt) = gt {
            let reference = &gt[i];
            if reference.shape() != clip.shape() {
                let (a, b, c, d) = reference.shape();
                let (e, f, g, h) = clip.shape();
                return Err(Error::shape(&[a, b, c, d], &[e, f, g, h]));
            }
            let per_frame: f64 = (0..n)
                .map(|k| psnr(mse(&clip.frame(k), &reference.frame(k))))
                .sum::<f64>()
                / n as f64;
            psnr_sum += per_frame;
            corr_sum += speed_correlation(clip, reference, cfg.background_level);
        }
    }

    let denom = count.max(1) as f64;
    Ok(EvalSummary {
        clips: count,
        endpoint_mse_first: mse_first / denom,
        endpoint_mse_last: mse_last / denom,
        psnr_vs_gt: gt.map(|_| psnr_sum / denom),
        monotone_fraction: monotone as f64 / denom,
        mean_reversals: if tracked > 0 {
            reversals as f64 / tracked as f64
        } else {
            0.0
        },
        track_failures: failures,
        speed_correlation: gt.map(|_| corr_sum / denom),
    })
}

/// Named summaries, one per method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<(String, EvalSummary)>,
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "endpoint_mse_first",
    "endpoint_mse_last",
    "psnr_vs_gt",
    "monotone_fraction",
    "mean_reversals",
    "track_failures",
    "speed_correlation",
];

fn metric_values(s: &EvalSummary) -> [Option<f64>; 7] {
    [
        Some(s.endpoint_mse_first),
        Some(s.endpoint_mse_last),
        s.psnr_vs_gt,
        Some(s.monotone_fraction),
        Some(s.mean_reversals),
        Some(s.track_failures as f64),
        s.speed_correlation,
    ]
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())
}

impl ComparisonTable {
    pub fn push(&mut self, method: impl Into<String>, summary: EvalSummary) {
        self.rows.push((method.into(), summary));
    }

    pub fn get(&self, method: &str) -> Option<&EvalSummary> {
        self.rows.iter().find(|(m, _)| m == method).map(|(_, s)| s)
    }

    /// Tab-separated, one row per method.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method");
        for c in METRIC_COLUMNS {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (method, s) in &self.rows {
            out.push_str(method);
            for v in metric_values(s) {
                out.push('\t');
                out.push_str(&fmt_metric(v));
            }
            out.push('\n');
        }
        out
    }

    /// Tab-separated, one row per `(method, metric)`.
    pub fn to_long_tsv(&self) -> String {
        let mut out = String::from("method\tmetric\tvalue\n");
        for (method, s) in &self.rows {
            for (name, v) in METRIC_COLUMNS.iter().zip(metric_values(s)) {
                let _ = writeln!(out, "{method}\t{name}\t{}", fmt_metric(v));
            }
        }
        out
    }
}

/// Centroid position of every frame, in order; convenience for reports.
pub fn centroid_path(clip: &VideoClip, level: f64) -> Option<Vec<[f64; 2]>> {
    clip.frames()
        .axis_iter(Axis(0))
        .map(|f| frame_centroid(&f.to_owned(), level))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{extract_keyframes, generate_clip, ClipMeta, MotionLaw, BACKGROUND};
    use ndarray::Array4;

    fn blob_clip(xs: &[usize]) -> VideoClip {
        let mut f = Array4::from_elem((xs.len(), 3, 8, 16), BACKGROUND);
        for (n, &x) in xs.iter().enumerate() {
            for c in 0..3 {
                f[[n, c, 3, x]] = 0.9;
                f[[n, c, 4, x]] = 0.9;
            }
        }
        VideoClip::new(f, ClipMeta::new("test", 0)).unwrap()
    }

    #[test]
    fn static_object_has_no_motion() {
        let r = track_centroids(&blob_clip(&[5, 5, 5, 5]), DEFAULT_BACKGROUND_LEVEL).unwrap();
        assert!(r.displacements.iter().all(|&d| d == 0.0));
        assert_eq!(r.reversal_count, 0);
        assert!(r.monotone);
    }

    #[test]
    fn back_and_forth_is_detected() {
        let r = track_centroids(&blob_clip(&[2, 4, 6, 4, 2]), DEFAULT_BACKGROUND_LEVEL).unwrap();
        assert_eq!(r.reversal_count, 1);
        assert!(!r.monotone);
    }

    #[test]
    fn empty_frame_is_an_error() {
        let mut clip = blob_clip(&[2, 3]).into_frames();
        clip.index_axis_mut(Axis(0), 1).fill(BACKGROUND);
        let clip = VideoClip::new(clip, ClipMeta::new("t", 0)).unwrap();
        assert!(matches!(
            track_centroids(&clip, DEFAULT_BACKGROUND_LEVEL),
            Err(Error::EmptyFrame { frame: 1 })
        ));
    }

    #[test]
    fn accel_ball_ground_truth_is_monotone_and_matches_analytic_path() {
        for seed in 0..8 {
            let clip = generate_clip(MotionLaw::AccelBall, seed, 16, 32, 32).unwrap();
            let r = track_centroids(&clip, DEFAULT_BACKGROUND_LEVEL).unwrap();
            assert!(r.monotone, "seed {seed}: {:?}", r.displacements);
            let p = &clip.meta.params;
            let (ux, uy) = (p["angle"].cos(), p["angle"].sin());
            for (n, c) in r.centroids.iter().enumerate() {
                let d = 0.5 * p["acceleration"] * (n * n) as f64;
                let (ex, ey) = (p["x0"] + d * ux, p["y0"] + d * uy);
                assert!((c[0] - ex).abs() < 0.1 && (c[1] - ey).abs() < 0.1, "seed {seed} frame {n}: {c:?} vs {ex},{ey} r={}", p["radius"]);
            }
        }
    }

    #[test]
    fn tracker_is_flip_equivariant_exactly() {
        for law in MotionLaw::ALL {
            let clip = generate_clip(law, 4, 16, 32, 32).unwrap();
            let fwd = track_centroids(&clip, DEFAULT_BACKGROUND_LEVEL).unwrap();
            let bwd = track_centroids(&clip.reversed(), DEFAULT_BACKGROUND_LEVEL).unwrap();
            let expected: Vec<f64> = fwd.displacements.iter().rev().map(|d| -d).collect();
            assert_eq!(bwd.displacements, expected);
        }
    }

    #[test]
    fn identical_clips_score_perfectly() {
        let clips: Vec<_> = (0..3)
            .map(|s| generate_clip(MotionLaw::AccelBall, s, 8, 16, 16).unwrap())
            .collect();
        let pairs: Vec<_> = clips.iter().map(extract_keyframes).collect();
        let s = evaluate_run(&clips, &pairs, Some(&clips), &EvalConfig::default()).unwrap();
        assert_eq!(s.endpoint_mse_first, 0.0);
        assert_eq!(s.endpoint_mse_last, 0.0);
        assert_eq!(s.psnr_vs_gt, Some(PSNR_CAP_DB));
        assert_eq!(s, evaluate_run(&clips, &pairs, Some(&clips), &EvalConfig::default()).unwrap());
        assert!(evaluate_run(&clips[..2], &pairs, None, &EvalConfig::default()).is_err());
    }

    #[test]
    fn single_reversal_summary() {
        let clip = blob_clip(&[2, 4, 6, 4, 2]);
        let pair = extract_keyframes(&clip);
        let s = evaluate_run(&[clip], &[pair], None, &EvalConfig::default()).unwrap();
        assert_eq!(s.monotone_fraction, 0.0);
        assert_eq!(s.mean_reversals, 1.0);
        assert!(s.psnr_vs_gt.is_none());
    }

    #[test]
    fn endpoint_errors_swap_under_time_reversal() {
        let clip = generate_clip(MotionLaw::AccelBall, 2, 8, 16, 16).unwrap();
        let other = generate_clip(MotionLaw::AccelBall, 9, 8, 16, 16).unwrap();
        let pair = extract_keyframes(&other);
        let s = evaluate_run(&[clip.clone()], &[pair.clone()], None, &EvalConfig::default()).unwrap();
        let swapped = KeyframePair {
            first: pair.last.clone(),
            last: pair.first.clone(),
            ..pair
        };
        let r = evaluate_run(&[clip.reversed()], &[swapped], None, &EvalConfig::default()).unwrap();
        assert_eq!(s.endpoint_mse_first, r.endpoint_mse_last);
        assert_eq!(s.endpoint_mse_last, r.endpoint_mse_first);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn table_formats() {
        let clip = blob_clip(&[2, 3, 4]);
        let pair = extract_keyframes(&clip);
        let s = evaluate_run(&[clip], &[pair], None, &EvalConfig::default()).unwrap();
        let mut t = ComparisonTable::default();
        t.push("dual", s.clone());
        t.push("trf", s);
        let wide = t.to_tsv();
        assert_eq!(wide.lines().count(), 3);
        assert!(wide.lines().nth(1).unwrap().contains("NA"));
        assert_eq!(t.to_long_tsv().lines().count(), 1 + 2 * METRIC_COLUMNS.len());
    }
}
