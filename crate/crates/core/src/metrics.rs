//! Overlap and boundary-distance metrics for binary masks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 2-D binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                op: "BinaryMask::new",
                expected: vec![height, width],
                got: vec![bits.len()],
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    fn spatial(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        match t.shape() {
            [h, w] | [h, w, 1] | [1, h, w, 1] => Ok((*h, *w)),
            other => Err(Error::ShapeMismatch {
                op,
                expected: vec![0, 0, 1],
                got: other.to_vec(),
            }),
        }
    }

    /// Mask from a tensor holding only 0 and 1 (`H×W`, `H×W×1` or `1×H×W×1`).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width) = Self::spatial(t, "BinaryMask::from_tensor")?;
        let mut bits = Vec::with_capacity(t.len());
        for (index, &value) in t.data().iter().enumerate() {
            if value == 0.0 {
                bits.push(false);
            } else if value == 1.0 {
                bits.push(true);
            } else {
                return Err(Error::NonBinary { index, value });
            }
        }
        Ok(Self { height, width, bits })
    }

    /// Mask of values `>= threshold`.
    pub fn threshold(t: &Tensor, threshold: f64) -> Result<Self> {
        let (height, width) = Self::spatial(t, "BinaryMask::threshold")?;
        let bits = t.data().iter().map(|&v| v >= threshold).collect();
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.height, self.width, 1], data).expect("mask extents are nonzero")
    }

    /// Foreground pixels with a 4-neighbour outside the mask or on the image
    /// border, as `(row, col)` in row-major order.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1);
                if edge {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp/(2tp+fp+fn)`; 1 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `tp/(tp+fp+fn)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// `tp/(tp+fp)`, undefined for an empty prediction.
    pub fn precision(&self) -> Option<f64> {
        let den = self.tp + self.fp;
        (den > 0).then(|| self.tp as f64 / den as f64)
    }

    /// `tp/(tp+fn)`, undefined for an empty ground truth.
    pub fn recall(&self) -> Option<f64> {
        let den = self.tp + self.fn_;
        (den > 0).then(|| self.tp as f64 / den as f64)
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

fn check_same(pred: &BinaryMask, gt: &BinaryMask, op: &'static str) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![gt.height, gt.width],
            got: vec![pred.height, pred.width],
        });
    }
    Ok(())
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    check_same(pred, gt, "confusion")?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Inclusive linear-interpolation percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

const INF: f64 = f64::INFINITY;

/// Lower envelope of parabolas `f[q] + ((p-q)·s)²` over the finite entries of
/// `f`; writes the minimum into `out`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let sites: Vec<usize> = (0..f.len()).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = INF);
        return;
    }
    let s2 = s * s;
    let meet = |a: usize, b: usize| {
        let (af, bf) = (a as f64, b as f64);
        ((f[b] + s2 * bf * bf) - (f[a] + s2 * af * af)) / (2.0 * s2 * (bf - af))
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len());
    for &q in &sites {
        while let Some(&top) = hull.last() {
            let x = meet(top, q);
            if hull.len() > 1 && x <= bounds[bounds.len() - 1] {
                hull.pop();
                bounds.pop();
            } else {
                bounds.push(x);
                break;
            }
        }
        hull.push(q);
    }
    // bounds[i] separates hull[i] and hull[i + 1]
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k < bounds.len() && bounds[k] < p as f64 {
            k += 1;
        }
        let q = hull[k];
        let d = (p as f64 - q as f64) * s;
        *o = f[q] + d * d;
    }
}

/// Squared Euclidean distance from every pixel to the nearest site.
fn squared_edt(h: usize, w: usize, sites: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    let mut grid = vec![INF; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, spacing.0, &mut tmp);
        for r in 0..h {
            grid[r * w + c] = tmp[r];
        }
    }
    let mut row = vec![0.0; w];
    for r in 0..h {
        edt_1d(&grid[r * w..(r + 1) * w], spacing.1, &mut row);
        grid[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    grid
}

fn directed_p95(from: &[(usize, usize)], field: &[f64], w: usize) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|&(r, c)| field[r * w + c].sqrt()).collect();
    d.sort_by(f64::total_cmp);
    percentile(&d, 95.0)
}

/// 95th-percentile symmetric boundary distance: the larger of the two
/// directed 95th percentiles. `spacing` is `(row, col)` pixel pitch. Returns
/// `None` when either mask is empty.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask, spacing: (f64, f64)) -> Result<Option<f64>> {
    check_same(pred, gt, "hd95")?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    let (a, b) = (pred.boundary(), gt.boundary());
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pred.height, pred.width);
    let to_b = squared_edt(h, w, &b, spacing);
    let to_a = squared_edt(h, w, &a, spacing);
    Ok(Some(directed_p95(&a, &to_b, w).max(directed_p95(&b, &to_a, w))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub confusion: Confusion,
    pub dsc: f64,
    pub iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: f64,
    pub hd95: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask, spacing: (f64, f64)) -> Result<Self> {
        let c = confusion(pred, gt)?;
        Ok(Self {
            id: id.into(),
            confusion: c,
            dsc: c.dsc(),
            iou: c.iou(),
            precision: c.precision(),
            recall: c.recall(),
            accuracy: c.accuracy(),
            hd95: hd95(pred, gt, spacing)?,
        })
    }
}

/// Dataset means. Optional metrics average over the images where they are
/// defined; `hd95_excluded` counts the images left out of the HD95 mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub images: usize,
    pub dsc: f64,
    pub iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: f64,
    pub hd95: Option<f64>,
    pub hd95_excluded: usize,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    pub summary: MetricSummary,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ImageMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("metric report needs at least one image".into()));
        }
        let mut total = Confusion::default();
        for r in &rows {
            total += r.confusion;
        }
        let summary = MetricSummary {
            images: rows.len(),
            dsc: mean(rows.iter().map(|r| r.dsc)).unwrap_or(0.0),
            iou: mean(rows.iter().map(|r| r.iou)).unwrap_or(0.0),
            precision: mean(rows.iter().filter_map(|r| r.precision)),
            recall: mean(rows.iter().filter_map(|r| r.recall)),
            accuracy: mean(rows.iter().map(|r| r.accuracy)).unwrap_or(0.0),
            hd95: mean(rows.iter().filter_map(|r| r.hd95)),
            hd95_excluded: rows.iter().filter(|r| r.hd95.is_none()).count(),
            confusion: total,
        };
        Ok(Self { rows, summary })
    }

    /// Tab-separated table, one row per image and a final `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tdsc\tiou\tprecision\trecall\taccuracy\thd95\ttp\tfp\tfn\ttn\n");
        for r in &self.rows {
            let c = r.confusion;
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.dsc,
                r.iou,
                fmt_opt(r.precision),
                fmt_opt(r.recall),
                r.accuracy,
                fmt_opt(r.hd95),
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            );
        }
        let m = &self.summary;
        let c = m.confusion;
        let _ = writeln!(
            s,
            "mean\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
            m.dsc,
            m.iou,
            fmt_opt(m.precision),
            fmt_opt(m.recall),
            m.accuracy,
            fmt_opt(m.hd95),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        );
        s
    }

    /// `key = value` lines for the summary.
    pub fn to_kv(&self) -> String {
        let m = &self.summary;
        let mut s = String::new();
        let _ = writeln!(s, "images = {}", m.images);
        let _ = writeln!(s, "dsc = {:.6}", m.dsc);
        let _ = writeln!(s, "iou = {:.6}", m.iou);
        let _ = writeln!(s, "precision = {}", fmt_opt(m.precision));
        let _ = writeln!(s, "recall = {}", fmt_opt(m.recall));
        let _ = writeln!(s, "accuracy = {:.6}", m.accuracy);
        let _ = writeln!(s, "hd95 = {}", fmt_opt(m.hd95));
        let _ = writeln!(s, "hd95_excluded = {}", m.hd95_excluded);
        let _ = writeln!(s, "tp = {}\nfp = {}\nfn = {}\ntn = {}", m.confusion.tp, m.confusion.fp, m.confusion.fn_, m.confusion.tn);
        s
    }
}

/// Per-image metrics over aligned prediction and ground-truth sequences.
pub fn metric_report(pred: &[BinaryMask], gt: &[BinaryMask], spacing: (f64, f64)) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    let rows = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| ImageMetrics::compute(i.to_string(), p, g, spacing))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn confusion_examples() {
        let a = mask(&["#..", ".#.", "..#"]);
        assert_eq!(confusion(&a, &a).unwrap(), Confusion { tp: 3, fp: 0, fn_: 0, tn: 6 });
        let inv = BinaryMask::from_fn(3, 3, |r, c| !a.get(r, c));
        let c = confusion(&inv, &a).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let b = mask(&["#...", "...."]);
        assert!(confusion(&a, &b).is_err());
    }

    #[test]
    fn derived_ratios() {
        let c = Confusion { tp: 2, fp: 1, fn_: 1, tn: 12 };
        assert!((c.dsc() - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.iou() - 0.5).abs() < 1e-12);
        assert!((c.precision().unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.recall().unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.accuracy() - 0.875).abs() < 1e-12);
    }

    #[test]
    fn degenerate_conventions() {
        let c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 9 };
        assert_eq!((c.dsc(), c.iou(), c.accuracy()), (1.0, 1.0, 1.0));
        assert_eq!((c.precision(), c.recall()), (None, None));
        let c = Confusion { tp: 0, fp: 3, fn_: 0, tn: 6 };
        assert_eq!((c.dsc(), c.iou(), c.recall()), (0.0, 0.0, None));
    }

    #[test]
    fn non_binary_tensor_is_rejected() {
        let t = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(matches!(BinaryMask::from_tensor(&t), Err(Error::NonBinary { index: 2, .. })));
        assert_eq!(BinaryMask::threshold(&t, 0.5).unwrap().count(), 2);
    }

    #[test]
    fn boundary_of_filled_square() {
        let m = mask(&[".....", ".###.", ".###.", ".###.", "....."]);
        let b = m.boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        let full = BinaryMask::from_fn(3, 3, |_, _| true);
        assert_eq!(full.boundary().len(), 8);
        assert!(BinaryMask::from_fn(3, 3, |_, _| false).boundary().is_empty());
    }

    #[test]
    fn hd95_examples() {
        let a = mask(&["#....", ".....", ".....", "....."]);
        let b = mask(&[".....", ".....", ".....", "....#"]);
        assert_eq!(hd95(&a, &b, (1.0, 1.0)).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &a, (1.0, 1.0)).unwrap(), Some(0.0));
        let empty = BinaryMask::from_fn(4, 5, |_, _| false);
        assert_eq!(hd95(&a, &empty, (1.0, 1.0)).unwrap(), None);
        assert_eq!(hd95(&a, &b, (2.0, 1.0)).unwrap(), Some((36.0f64 + 16.0).sqrt()));
        assert!(hd95(&a, &b, (0.0, 1.0)).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&xs, 50.0), 2.0);
        assert!((percentile(&xs, 95.0) - 3.8).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn report_means_and_outputs() {
        let a = mask(&["##", ".."]);
        let perfect = metric_report(std::slice::from_ref(&a), std::slice::from_ref(&a), (1.0, 1.0)).unwrap();
        let s = &perfect.summary;
        assert_eq!((s.dsc, s.iou, s.accuracy, s.hd95), (1.0, 1.0, 1.0, Some(0.0)));
        assert_eq!((s.precision, s.recall), (Some(1.0), Some(1.0)));

        let gt2 = mask(&["##", "#."]);
        let p2 = mask(&["#.", ".."]);
        let r = metric_report(&[a.clone(), p2], &[a.clone(), gt2], (1.0, 1.0)).unwrap();
        assert_eq!(r.rows[1].dsc, 0.5);
        assert_eq!(r.summary.dsc, 0.75);

        let empty = BinaryMask::from_fn(2, 2, |_, _| false);
        let r = metric_report(&[a.clone(), empty.clone()], &[a.clone(), a.clone()], (1.0, 1.0)).unwrap();
        assert_eq!(r.summary.hd95_excluded, 1);
        assert_eq!(r.summary.hd95, Some(0.0));
        assert!(r.to_tsv().lines().last().unwrap().starts_with("mean\t"));
        assert!(r.to_tsv().contains("NA"));
        assert!(r.to_kv().contains("hd95_excluded = 1"));
        assert!(metric_report(std::slice::from_ref(&a), &[], (1.0, 1.0)).is_err());
    }
}
