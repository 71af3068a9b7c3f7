//! Segmentation metrics: confusion counts, accuracy / sensitivity /
//! specificity / F1, ROC AUC, and the thin-vessel mask used to score
//! 1–2 px vessels separately.

use std::io::Write;

use crate::error::{Error, Result};
use crate::field::Field;

/// Default binarization threshold (probabilities strictly above are positive).
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Foreground pixels no farther than this from the background count as thin.
pub const THIN_DISTANCE: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::new(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Ratio {
        Ratio::new(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Ratio {
        Ratio::new(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> Ratio {
        Ratio::new(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// An exact metric value `num / den`; undefined when `den == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Ratio { num, den }
    }

    pub fn value(self) -> Option<f64> {
        (self.den != 0).then(|| self.num as f64 / self.den as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
}

fn check_extents(op: &'static str, a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{what} is {}x{} but prediction is {}x{}", b.1, b.0, a.1, a.0)));
    }
    Ok(())
}

fn evaluated<'a, P: Copy + Into<f64>>(
    op: &'static str,
    pred: &'a Field<P>,
    gt: &'a Field<u8>,
    mask: Option<&'a Field<u8>>,
) -> Result<impl Iterator<Item = (f64, bool)> + 'a> {
    check_extents(op, pred.dims(), gt.dims(), "ground truth")?;
    if let Some(m) = mask {
        check_extents(op, pred.dims(), m.dims(), "mask")?;
    }
    Ok((0..pred.data().len())
        .filter(move |&i| mask.is_none_or(|m| m.data()[i] != 0))
        .map(move |i| (pred.data()[i].into(), gt.data()[i] != 0)))
}

/// Counts pixels inside `mask` (all pixels if `None`); a pixel is predicted
/// positive iff its probability is strictly above `threshold`.
pub fn confusion<P: Copy + Into<f64>>(
    pred: &Field<P>,
    gt: &Field<u8>,
    mask: Option<&Field<u8>>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut c = ConfusionCounts::default();
    for (p, y) in evaluated("confusion", pred, gt, mask)? {
        match (p > threshold, y) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Acc, Sen, Spe and F1 from counts; `auc` is left unset.
pub fn basic_metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::Undefined("metrics over zero evaluated pixels"));
    }
    Ok(MetricsReport {
        acc: counts.accuracy().value(),
        sen: counts.sensitivity().value(),
        spe: counts.specificity().value(),
        f1: counts.f1().value(),
        auc: None,
        counts,
    })
}

/// Mann–Whitney AUC with midranks for ties. `None` unless both classes occur.
pub fn auc_from_pairs(mut scored: Vec<(f64, bool)>) -> Option<f64> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of (1-based) midranks over positives, doubled to stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i + 1;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let positives = scored[i..j].iter().filter(|s| s.1).count() as u128;
        // ranks i+1 ..= j, midrank (i+1+j)/2
        rank_sum2 += positives * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Some(u2 as f64 / (2 * p * n) as f64)
}

pub fn auc<P: Copy + Into<f64>>(pred: &Field<P>, gt: &Field<u8>, mask: Option<&Field<u8>>) -> Result<Option<f64>> {
    Ok(auc_from_pairs(evaluated("auc", pred, gt, mask)?.collect()))
}

/// O(P·N) reference: wins plus half the ties over all positive/negative pairs.
pub fn auc_pairwise(scored: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut twice = 0u64;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    Some(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// Full report for one image.
pub fn evaluate<P: Copy + Into<f64>>(
    pred: &Field<P>,
    gt: &Field<u8>,
    mask: Option<&Field<u8>>,
    threshold: f64,
) -> Result<MetricsReport> {
    let mut r = basic_metrics(confusion(pred, gt, mask, threshold)?)?;
    r.auc = auc(pred, gt, mask)?;
    Ok(r)
}

/// Accumulates every evaluated pixel of a test set so that the headline
/// numbers are computed over all pixels at once.
#[derive(Debug, Default)]
pub struct PooledEvaluator {
    counts: ConfusionCounts,
    scored: Vec<(f64, bool)>,
}

impl PooledEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<P: Copy + Into<f64>>(
        &mut self,
        pred: &Field<P>,
        gt: &Field<u8>,
        mask: Option<&Field<u8>>,
        threshold: f64,
    ) -> Result<MetricsReport> {
        let counts = confusion(pred, gt, mask, threshold)?;
        let scored: Vec<_> = evaluated("auc", pred, gt, mask)?.collect();
        self.counts += counts;
        self.scored.extend_from_slice(&scored);
        let mut r = basic_metrics(counts)?;
        r.auc = auc_from_pairs(scored);
        Ok(r)
    }

    pub fn finish(self) -> Result<MetricsReport> {
        let mut r = basic_metrics(self.counts)?;
        r.auc = auc_from_pairs(self.scored);
        Ok(r)
    }
}

/// 1-D squared distance transform of a sampled function (Felzenszwalb &
/// Huttenlocher). Infinite samples are not sites.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let sites: Vec<usize> = (0..f.len()).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut v = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let parabola = |q: usize| f[q] + (q * q) as f64;
    for &q in &sites {
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (parabola(q) - parabola(p)) / (2.0 * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x as f64 {
            k += 1;
        }
        let d = x as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from each pixel to the nearest background pixel
/// (0 on background). Pixels beyond the image border are not background, so
/// an image without background is infinite everywhere.
pub fn distance_transform(gt: &Field<u8>) -> Field<f64> {
    let (h, w) = gt.dims();
    let mut sq = gt.map(|v| if v == 0 { 0.0 } else { f64::INFINITY });
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = sq.get(y, x);
        }
        edt_1d(&col, &mut res[..h]);
        for y in 0..h {
            sq.set(y, x, res[y]);
        }
    }
    for y in 0..h {
        let row = sq.data()[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut sq.data_mut()[y * w..(y + 1) * w]);
    }
    sq.map(f64::sqrt)
}

/// Nearest-background search over all pixel pairs.
pub fn distance_transform_bruteforce(gt: &Field<u8>) -> Field<f64> {
    let (h, w) = gt.dims();
    let bg: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| gt.get(y, x) == 0).collect();
    Field::from_fn(h, w, |y, x| {
        bg.iter()
            .map(|&(by, bx)| {
                let (dy, dx) = (by as f64 - y as f64, bx as f64 - x as f64);
                dy * dy + dx * dx
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    })
}

/// Foreground pixels within [`THIN_DISTANCE`] of the background: strokes of
/// width 1 or 2 are marked entirely, centres of width ≥ 4 are not.
pub fn thin_vessel_mask(gt: &Field<u8>) -> Field<u8> {
    let d = distance_transform(gt);
    Field::from_fn(gt.height(), gt.width(), |y, x| u8::from(gt.get(y, x) != 0 && d.get(y, x) <= THIN_DISTANCE))
}

/// Logical AND of two masks of equal extent.
pub fn intersect_masks(a: &Field<u8>, b: &Field<u8>) -> Result<Field<u8>> {
    check_extents("intersect_masks", a.dims(), b.dims(), "mask")?;
    Ok(Field::from_fn(a.height(), a.width(), |y, x| u8::from(a.get(y, x) != 0 && b.get(y, x) != 0)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

pub const CSV_HEADER: &str = "id,acc,sen,spe,f1,auc,tp,tn,fp,fn";

pub fn csv_row(id: &str, r: &MetricsReport) -> String {
    let c = r.counts;
    format!(
        "{id},{},{},{},{},{},{},{},{},{}",
        fmt_opt(r.acc),
        fmt_opt(r.sen),
        fmt_opt(r.spe),
        fmt_opt(r.f1),
        fmt_opt(r.auc),
        c.tp,
        c.tn,
        c.fp,
        c.fn_
    )
}

/// Header, one row per image, then the `POOLED` row.
pub fn write_csv(mut out: impl Write, rows: &[(String, MetricsReport)], pooled: &MetricsReport) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (id, r) in rows {
        writeln!(out, "{}", csv_row(id, r))?;
    }
    writeln!(out, "{}", csv_row("POOLED", pooled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn worked_example() {
        let r = basic_metrics(counts(50, 40, 5, 5)).unwrap();
        assert!((r.acc.unwrap() - 0.9).abs() < 1e-15);
        assert!((r.sen.unwrap() - 10.0 / 11.0).abs() < 1e-15);
        assert!((r.spe.unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!((r.f1.unwrap() - 10.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_undefined() {
        let r = basic_metrics(counts(3, 7, 0, 0)).unwrap();
        assert_eq!([r.acc, r.sen, r.spe, r.f1], [Some(1.0); 4]);
        let r = basic_metrics(counts(0, 7, 2, 0)).unwrap();
        assert_eq!(r.sen, None);
        assert!(r.acc.is_some() && r.spe.is_some() && r.f1.is_some());
        assert!(basic_metrics(counts(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn strict_threshold() {
        let pred = Field::filled(2, 2, 0.5f64);
        let gt = Field::from_vec(2, 2, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(confusion(&pred, &gt, None, 0.5).unwrap(), counts(0, 2, 0, 2));
        assert!(confusion(&pred, &gt, None, 0.0).is_err());
    }

    #[test]
    fn mask_restricts_count() {
        let pred = Field::from_fn(4, 4, |y, x| (y * 4 + x) as f64 / 16.0);
        let gt = Field::from_fn(4, 4, |y, _| u8::from(y % 2 == 0));
        let mask = Field::from_fn(4, 4, |_, x| u8::from(x < 2));
        assert_eq!(confusion(&pred, &gt, Some(&mask), 0.5).unwrap().total(), 8);
        assert!(confusion(&pred, &Field::filled(3, 4, 0), None, 0.5).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        let s = vec![(0.9, true), (0.8, false), (0.4, true), (0.2, false)];
        assert_eq!(auc_pairwise(&s), Some(0.75));
        assert_eq!(auc_from_pairs(s), Some(0.75));
        assert_eq!(auc_from_pairs(vec![(0.1, false), (0.2, false), (0.7, true)]), Some(1.0));
        assert_eq!(auc_from_pairs(vec![(0.3, false), (0.3, true), (0.3, true)]), Some(0.5));
        assert_eq!(auc_from_pairs(vec![(0.3, true)]), None);
    }

    #[test]
    fn thin_mask_cases() {
        let line = Field::from_fn(5, 9, |y, x| u8::from(y == 2 && (1..8).contains(&x)));
        assert_eq!(thin_vessel_mask(&line), line);
        let square = Field::from_fn(11, 11, |y, x| u8::from((1..10).contains(&y) && (1..10).contains(&x)));
        let thin = thin_vessel_mask(&square);
        assert_eq!(thin.get(5, 5), 0);
        assert_eq!(thin.get(1, 5), 1);
        assert_eq!(distance_transform_bruteforce(&square).get(5, 5), 5.0);
        assert_eq!(thin_vessel_mask(&Field::filled(4, 4, 0)).count_nonzero(), 0);
        // no background at all: nothing is near the background
        assert_eq!(thin_vessel_mask(&Field::filled(3, 3, 1)).count_nonzero(), 0);
    }

    #[test]
    fn csv_format() {
        let r = basic_metrics(counts(0, 4, 0, 0)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("a".into(), r)], &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "a,1.000000,NA,1.000000,NA,NA,0,4,0,0");
        assert!(lines[2].starts_with("POOLED,"));
    }

    proptest! {
        #[test]
        fn rational_identities(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let c = counts(tp, tn, fp, fn_);
            let sen = c.sensitivity();
            let spe = c.specificity();
            // sen·(tp+fn) = tp and spe·(tn+fp) = tn as exact fractions
            prop_assert_eq!(sen.num as u128 * (tp + fn_) as u128, tp as u128 * sen.den as u128);
            prop_assert_eq!(spe.num as u128 * (tn + fp) as u128, tn as u128 * spe.den as u128);
            prop_assert_eq!(sen.value().is_none(), tp + fn_ == 0);
        }

        #[test]
        fn fast_auc_matches_pairwise(v in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let s: Vec<(f64, bool)> = v.iter().map(|&(a, b)| (a as f64 / 20.0, b)).collect();
            match (auc_from_pairs(s.clone()), auc_pairwise(&s)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn edt_matches_bruteforce(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
            let gt = Field::from_fn(h, w, |y, x| u8::from((seed >> ((y * 7 + x * 13) % 61)) & 3 != 0));
            let a = distance_transform(&gt);
            let b = distance_transform_bruteforce(&gt);
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!(p == q || (p - q).abs() <= 1e-12, "{} vs {}", p, q);
            }
        }
    }
}
