//! Normalized-correlation overlap detection between two image sets.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;

use super::{DatasetManifest, ImageBank, ImageTensor};
use crate::error::{Error, Result};

/// Side length of the square grayscale view images are compared at.
pub const COMPARE_SIZE: usize = 32;
pub const DEFAULT_NCC_THRESHOLD: f64 = 0.99;

/// Channel-mean grayscale, bilinearly resampled to `COMPARE_SIZE²`
/// (pixel-centre alignment, so an image already at that size passes through).
pub fn comparison_view(img: &ImageTensor) -> Vec<f64> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let v = img.values();
    let mut gray = vec![0.0; h * w];
    for ch in 0..c {
        for (g, x) in gray.iter_mut().zip(&v[ch * h * w..(ch + 1) * h * w]) {
            *g += x;
        }
    }
    gray.iter_mut().for_each(|g| *g /= c as f64);
    if h == COMPARE_SIZE && w == COMPARE_SIZE {
        return gray;
    }
    let axis = |n_in: usize, i: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / COMPARE_SIZE as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(COMPARE_SIZE * COMPARE_SIZE);
    for i in 0..COMPARE_SIZE {
        let (y0, y1, fy) = axis(h, i);
        for j in 0..COMPARE_SIZE {
            let (x0, x1, fx) = axis(w, j);
            let top = gray[y0 * w + x0] * (1.0 - fx) + gray[y0 * w + x1] * fx;
            let bot = gray[y1 * w + x0] * (1.0 - fx) + gray[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Mean-centred view and its sum of squares.
struct Centered {
    values: Vec<f64>,
    ss: f64,
}

fn center(view: Vec<f64>, what: &str) -> Result<Centered> {
    let n = view.len() as f64;
    let mean = view.iter().sum::<f64>() / n;
    let values: Vec<f64> = view.iter().map(|v| v - mean).collect();
    let ss: f64 = values.iter().map(|v| v * v).sum();
    let constant = view.iter().all(|&v| v == view[0]);
    if constant || ss <= f64::EPSILON * f64::EPSILON * n {
        return Err(Error::ZeroVariance(what.to_string()));
    }
    Ok(Centered { values, ss })
}

fn score(a: &Centered, b: &Centered) -> f64 {
    let sxy: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    (sxy / (a.ss * b.ss).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of the two images' comparison views.
pub fn normalized_correlation(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let ca = center(comparison_view(a), "first image is constant")?;
    let cb = center(comparison_view(b), "second image is constant")?;
    Ok(score(&ca, &cb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlap {
    pub id_a: String,
    pub id_b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    /// Descending by score, then by `(id_a, id_b)`.
    pub pairs: Vec<Overlap>,
    /// `set_a` without any sample that matched.
    pub filtered_a: DatasetManifest,
    /// Constant images that could not be scored.
    pub skipped: Vec<String>,
}

fn views(set: &DatasetManifest, bank: &ImageBank, skipped: &mut Vec<String>) -> Result<Vec<(String, Centered)>> {
    let mut out = Vec::with_capacity(set.len());
    for s in &set.samples {
        match center(comparison_view(bank.require(&s.sample_id)?), &s.sample_id) {
            Ok(c) => out.push((s.sample_id.clone(), c)),
            Err(Error::ZeroVariance(_)) => {
                log::warn!("skipping constant image `{}` in overlap search", s.sample_id);
                skipped.push(s.sample_id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Every pair across the two sets scoring at least `threshold`. Pairs of a
/// sample with itself (same id) are never reported.
pub fn find_overlaps(
    set_a: &DatasetManifest,
    bank_a: &ImageBank,
    set_b: &DatasetManifest,
    bank_b: &ImageBank,
    threshold: f64,
) -> Result<OverlapReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1]")));
    }
    let mut skipped = Vec::new();
    let va = views(set_a, bank_a, &mut skipped)?;
    let vb = views(set_b, bank_b, &mut skipped)?;
    skipped.sort();
    skipped.dedup();
    let mut pairs: Vec<Overlap> = va
        .par_iter()
        .flat_map_iter(|(ia, ca)| {
            vb.iter().filter_map(move |(ib, cb)| {
                if ia == ib {
                    return None;
                }
                let s = score(ca, cb);
                (s >= threshold).then(|| Overlap { id_a: ia.clone(), id_b: ib.clone(), score: s })
            })
        })
        .collect();
    pairs.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then_with(|| x.id_a.cmp(&y.id_a))
            .then_with(|| x.id_b.cmp(&y.id_b))
    });
    let matched: BTreeSet<&str> = pairs.iter().map(|p| p.id_a.as_str()).collect();
    let filtered_a = set_a.filtered(|s| !matched.contains(s.sample_id.as_str()));
    Ok(OverlapReport { pairs, filtered_a, skipped })
}

/// CSV `id_a,id_b,score` with six decimals.
pub fn write_overlap_csv<W: Write>(pairs: &[Overlap], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id_a", "id_b", "score"])?;
    for p in pairs {
        wr.write_record([p.id_a.as_str(), p.id_b.as_str(), &format!("{:.6}", p.score)])?;
    }
    wr.flush().map_err(|e| Error::io("<overlap csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::{Sample, SplitTag};
    use crate::rng::{derive_seed, rng_from_seed};
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn map(img: &ImageTensor, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor::new(img.channels(), img.height(), img.width(), img.values().iter().map(|&v| f(v)).collect()).unwrap()
    }

    fn set(prefix: &str, n: usize, seed: u64) -> (DatasetManifest, ImageBank) {
        let mut bank = ImageBank::new();
        let mut samples = Vec::new();
        for i in 0..n {
            let id = format!("{prefix}{i}");
            bank.insert(id.clone(), noise(3, 20, 20, derive_seed(seed, prefix, i as u64)));
            samples.push(Sample { sample_id: id.clone(), path: id, leaf_id: "x".into() });
        }
        (DatasetManifest::new(samples, SplitTag::Test).unwrap(), bank)
    }

    #[test]
    fn identity_and_negation() {
        let a = noise(3, 17, 23, 1);
        assert_eq!(normalized_correlation(&a, &a).unwrap(), 1.0);
        let neg = map(&a, |v| 1.0 - v);
        assert!((normalized_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_an_error() {
        let flat = ImageTensor::new(1, 4, 4, vec![0.3; 16]).unwrap();
        assert!(matches!(normalized_correlation(&flat, &noise(1, 4, 4, 2)), Err(Error::ZeroVariance(_))));
        assert!(matches!(normalized_correlation(&noise(1, 4, 4, 2), &flat), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn view_passes_through_at_compare_size() {
        let a = noise(1, COMPARE_SIZE, COMPARE_SIZE, 5);
        assert_eq!(comparison_view(&a), a.values());
    }

    #[test]
    fn exact_duplicate_recovered_and_set_a_filtered() {
        let (ma, ba) = set("a", 6, 11);
        let (mb, mut bb) = set("b", 6, 12);
        bb.insert("b3", ba.get("a2").unwrap().clone());
        let r = find_overlaps(&ma, &ba, &mb, &bb, DEFAULT_NCC_THRESHOLD).unwrap();
        assert_eq!(r.pairs, vec![Overlap { id_a: "a2".into(), id_b: "b3".into(), score: 1.0 }]);
        assert_eq!(r.filtered_a.len(), 5);
        assert!(r.filtered_a.samples.iter().all(|s| s.sample_id != "a2"));
        let r1 = find_overlaps(&ma, &ba, &mb, &bb, 1.0).unwrap();
        assert_eq!(r1.pairs.len(), 1);
    }

    #[test]
    fn self_comparison_excludes_self_pairs() {
        let (m, b) = set("a", 5, 3);
        assert!(find_overlaps(&m, &b, &m, &b, 1.0).unwrap().pairs.is_empty());
    }

    #[test]
    fn noise_sets_have_no_false_positives() {
        for seed in 0..3 {
            let (ma, ba) = set("a", 20, seed);
            let (mb, bb) = set("b", 20, seed + 100);
            assert!(find_overlaps(&ma, &ba, &mb, &bb, DEFAULT_NCC_THRESHOLD).unwrap().pairs.is_empty());
        }
    }

    #[test]
    fn constant_images_are_skipped() {
        let (mut ma, mut ba) = set("a", 2, 1);
        ba.insert("flat", ImageTensor::new(3, 20, 20, vec![0.5; 1200]).unwrap());
        ma.samples.push(Sample { sample_id: "flat".into(), path: "flat".into(), leaf_id: "x".into() });
        let r = find_overlaps(&ma, &ba, &ma, &ba, 0.99).unwrap();
        assert_eq!(r.skipped, vec!["flat".to_string()]);
    }

    #[test]
    fn csv_has_six_decimals() {
        let mut buf = Vec::new();
        write_overlap_csv(&[Overlap { id_a: "x,1".into(), id_b: "y".into(), score: 0.9912345678 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id_a,id_b,score\n\"x,1\",y,0.991235\n");
    }

    proptest! {
        #[test]
        fn symmetric_and_affine_invariant(
            s1 in 0u64..10_000, s2 in 0u64..10_000, h in 2usize..40, w in 2usize..40,
            alpha in 0.05f64..0.9, beta in 0.0f64..0.1
        ) {
            let a = noise(3, h, w, s1);
            let b = noise(3, h, w, s2);
            let ab = normalized_correlation(&a, &b).unwrap();
            prop_assert!((ab - normalized_correlation(&b, &a).unwrap()).abs() < 1e-12);
            let b2 = map(&b, |v| alpha * v + beta);
            let a2 = map(&a, |v| alpha * v + beta);
            prop_assert!((ab - normalized_correlation(&a, &b2).unwrap()).abs() < 1e-9);
            prop_assert!((ab - normalized_correlation(&a2, &b).unwrap()).abs() < 1e-9);
        }
    }
}
