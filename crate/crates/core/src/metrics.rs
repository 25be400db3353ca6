//! Overlap and surface-distance metrics with per-patient and cohort reporting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{LabelMask, LV, MYO, RV};

/// Regions scored by overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Structure {
    Lv,
    Rv,
    Myo,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Lv, Structure::Rv, Structure::Myo];

    pub fn labels(self) -> &'static [u8] {
        match self {
            Structure::Lv => &[LV],
            Structure::Rv => &[RV],
            Structure::Myo => &[MYO],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Lv => "LV",
            Structure::Rv => "RV",
            Structure::Myo => "Myo",
        }
    }
}

/// Contours scored by surface distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Contour {
    LvEndo,
    LvEpi,
    RvEndo,
}

impl Contour {
    pub const ALL: [Contour; 3] = [Contour::LvEndo, Contour::LvEpi, Contour::RvEndo];

    /// Labels forming the region whose boundary is the contour.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Contour::LvEndo => &[LV],
            Contour::LvEpi => &[LV, MYO],
            Contour::RvEndo => &[RV],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Contour::LvEndo => "LV_endo",
            Contour::LvEpi => "LV_epi",
            Contour::RvEndo => "RV_endo",
        }
    }
}

/// Physical size of a voxel along (slice, row, column).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub slice: f64,
    pub row: f64,
    pub col: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self { slice: 1.0, row: 1.0, col: 1.0 }
    }
}

impl Spacing {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("spacing.slice", self.slice), ("spacing.row", self.row), ("spacing.col", self.col)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, format!("{v} must be positive")));
            }
        }
        Ok(())
    }
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("regions of {a} and {b} pixels")));
    }
    Ok(())
}

fn overlap_counts(seg: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    seg.iter().zip(gt).fold((0, 0, 0), |(i, s, g), (&a, &b)| (i + (a && b) as usize, s + a as usize, g + b as usize))
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty regions score 1.
pub fn dice(seg: &[bool], gt: &[bool]) -> Result<f64> {
    check_same_len(seg.len(), gt.len())?;
    let (i, s, g) = overlap_counts(seg, gt);
    Ok(if s + g == 0 { 1.0 } else { 2.0 * i as f64 / (s + g) as f64 })
}

/// `|A ∩ B| / |A ∪ B|`; two empty regions score 1.
pub fn jaccard(seg: &[bool], gt: &[bool]) -> Result<f64> {
    check_same_len(seg.len(), gt.len())?;
    let (i, s, g) = overlap_counts(seg, gt);
    let union = s + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Boundary pixels as `(slice, row, col)` grid points with their spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySet {
    pub points: Vec<[i64; 3]>,
    pub spacing: Spacing,
}

impl BoundarySet {
    pub fn new(points: Vec<[i64; 3]>, spacing: Spacing) -> Self {
        Self { points, spacing }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Region pixels having at least one 4-neighbour outside the region; the
/// image border counts as outside.
pub fn boundary_of(region: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && region[y as usize * width + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            if inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Contour points of one slice. `None` when the region is empty.
pub fn extract_boundary(mask: &LabelMask, contour: Contour, spacing: Spacing) -> Option<BoundarySet> {
    let pts = boundary_of(&mask.region(contour.labels()), mask.height, mask.width);
    if pts.is_empty() {
        return None;
    }
    Some(BoundarySet::new(pts.into_iter().map(|(y, x)| [0, y as i64, x as i64]).collect(), spacing))
}

fn sq_dist(a: &[i64; 3], b: &[i64; 3], s: &Spacing) -> f64 {
    let dz = (a[0] - b[0]) as f64 * s.slice;
    let dy = (a[1] - b[1]) as f64 * s.row;
    let dx = (a[2] - b[2]) as f64 * s.col;
    dz * dz + dy * dy + dx * dx
}

/// Distance from every point of `from` to its nearest point of `to`.
fn nearest_distances(from: &BoundarySet, to: &BoundarySet) -> Vec<f64> {
    let s = &from.spacing;
    from.points
        .iter()
        .map(|p| to.points.iter().map(|q| sq_dist(p, q, s)).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

/// Average symmetric surface distance; `None` if either set is empty.
pub fn asd(b1: &BoundarySet, b2: &BoundarySet) -> Option<f64> {
    if b1.is_empty() || b2.is_empty() {
        return None;
    }
    let total: f64 = nearest_distances(b1, b2).iter().sum::<f64>() + nearest_distances(b2, b1).iter().sum::<f64>();
    Some(total / (b1.len() + b2.len()) as f64)
}

/// Symmetric Hausdorff distance; `None` if either set is empty.
pub fn hd(b1: &BoundarySet, b2: &BoundarySet) -> Option<f64> {
    if b1.is_empty() || b2.is_empty() {
        return None;
    }
    let directed = |a, b| nearest_distances(a, b).into_iter().fold(0.0, f64::max);
    Some(directed(b1, b2).max(directed(b2, b1)))
}

/// How surface distances are formed from a stack of slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMode {
    /// Boundary points of all slices pooled into one 3-D set.
    #[default]
    Stacked,
    /// 2-D distances per slice, averaged over slices where both contours exist.
    PerSlice,
}

/// Metrics of one patient volume. Distances are `None` when undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub patient_id: u32,
    /// Indexed like [`Structure::ALL`].
    pub dice: [f64; 3],
    pub jaccard: [f64; 3],
    /// Indexed like [`Contour::ALL`].
    pub asd: [Option<f64>; 3],
    pub hd: [Option<f64>; 3],
}

impl MetricsReport {
    /// Flattened `(metric, structure, value)` rows.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, Option<f64>)> {
        let mut out = Vec::with_capacity(12);
        for (i, s) in Structure::ALL.iter().enumerate() {
            out.push(("dice", s.name(), Some(self.dice[i])));
            out.push(("jaccard", s.name(), Some(self.jaccard[i])));
        }
        for (i, c) in Contour::ALL.iter().enumerate() {
            out.push(("asd", c.name(), self.asd[i]));
            out.push(("hd", c.name(), self.hd[i]));
        }
        out
    }

    pub fn dice_of(&self, s: Structure) -> f64 {
        self.dice[Structure::ALL.iter().position(|&x| x == s).expect("known structure")]
    }
}

fn stacked_boundary(slices: &[LabelMask], contour: Contour, spacing: Spacing) -> BoundarySet {
    let mut pts = Vec::new();
    for (z, m) in slices.iter().enumerate() {
        for (y, x) in boundary_of(&m.region(contour.labels()), m.height, m.width) {
            pts.push([z as i64, y as i64, x as i64]);
        }
    }
    BoundarySet::new(pts, spacing)
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores a predicted stack of slices against the ground truth.
pub fn evaluate_volume(
    patient_id: u32,
    seg: &[LabelMask],
    gt: &[LabelMask],
    spacing: Spacing,
    mode: DistanceMode,
) -> Result<MetricsReport> {
    spacing.validate()?;
    if seg.len() != gt.len() || seg.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} reference slices", seg.len(), gt.len())));
    }
    for (i, (a, b)) in seg.iter().zip(gt).enumerate() {
        if (a.height, a.width) != (b.height, b.width) {
            return Err(Error::Shape(format!(
                "slice {i}: {}x{} predicted vs {}x{} reference",
                a.height, a.width, b.height, b.width
            )));
        }
    }
    let mut report = MetricsReport { patient_id, dice: [0.0; 3], jaccard: [0.0; 3], asd: [None; 3], hd: [None; 3] };
    for (i, s) in Structure::ALL.iter().enumerate() {
        let a: Vec<bool> = seg.iter().flat_map(|m| m.region(s.labels())).collect();
        let b: Vec<bool> = gt.iter().flat_map(|m| m.region(s.labels())).collect();
        report.dice[i] = dice(&a, &b)?;
        report.jaccard[i] = jaccard(&a, &b)?;
    }
    for (i, &c) in Contour::ALL.iter().enumerate() {
        match mode {
            DistanceMode::Stacked => {
                let (a, b) = (stacked_boundary(seg, c, spacing), stacked_boundary(gt, c, spacing));
                report.asd[i] = asd(&a, &b);
                report.hd[i] = hd(&a, &b);
            }
            DistanceMode::PerSlice => {
                let pairs: Vec<(Option<BoundarySet>, Option<BoundarySet>)> = seg
                    .iter()
                    .zip(gt)
                    .map(|(a, b)| (extract_boundary(a, c, spacing), extract_boundary(b, c, spacing)))
                    .collect();
                let both = |f: fn(&BoundarySet, &BoundarySet) -> Option<f64>| {
                    mean_defined(pairs.iter().map(|(a, b)| match (a, b) {
                        (Some(a), Some(b)) => f(a, b),
                        _ => None,
                    }))
                };
                report.asd[i] = both(asd);
                report.hd[i] = both(hd);
            }
        }
    }
    Ok(report)
}

/// Mean and sample standard deviation (divisor n - 1) of one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortStat {
    pub metric: &'static str,
    pub structure: &'static str,
    pub mean: Option<f64>,
    /// Zero when only one value is defined.
    pub std: Option<f64>,
    /// Patients with a defined value.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSummary {
    pub patients: usize,
    pub stats: Vec<CohortStat>,
}

impl CohortSummary {
    pub fn get(&self, metric: &str, structure: &str) -> Option<&CohortStat> {
        self.stats.iter().find(|s| s.metric == metric && s.structure == structure)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_cohort(per_patient: &[MetricsReport]) -> Result<CohortSummary> {
    let first = per_patient.first().ok_or(Error::EmptyDataset)?;
    let mut stats = Vec::new();
    for (k, (metric, structure, _)) in first.rows().into_iter().enumerate() {
        let vals: Vec<f64> = per_patient.iter().filter_map(|r| r.rows()[k].2).collect();
        let (mean, std) = if vals.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&vals);
            (Some(m), Some(s))
        };
        stats.push(CohortStat { metric, structure, mean, std, n: vals.len() });
    }
    Ok(CohortSummary { patients: per_patient.len(), stats })
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Long-format CSV: `patient_id,metric,structure,value`.
pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "# both-empty overlap scores 1; undefined surface distances are NA\npatient_id,metric,structure,value\n",
    );
    for r in reports {
        for (metric, structure, v) in r.rows() {
            let _ = writeln!(out, "{},{metric},{structure},{}", r.patient_id, fmt_value(v));
        }
    }
    out
}

/// Fixed-width table of cohort means and sample standard deviations.
pub fn summary_table(summary: &CohortSummary, distance_unit: &str) -> String {
    let mut out = format!("# {} patients; mean ± sample std (n-1)\n", summary.patients);
    let _ = writeln!(out, "{:<8} {:<8} {:>22} {:>4}", "metric", "region", "mean ± std", "n");
    for s in &summary.stats {
        let label = match s.metric {
            "asd" | "hd" => format!("{}({distance_unit})", s.metric.to_uppercase()),
            m => m[..1].to_uppercase() + &m[1..],
        };
        let cell = match (s.mean, s.std) {
            (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
            _ => "NA".to_string(),
        };
        let _ = writeln!(out, "{label:<8} {:<8} {cell:>22} {:>4}", s.structure, s.n);
    }
    out
}
