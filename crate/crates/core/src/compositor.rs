//! Synthesis of the labeled negative dataset by spline-mask compositing.
//!
//! A quadratic Bezier curve crosses the image between two opposite
//! borders, with its middle control point in the central half of the
//! frame; the pixels on one side of the curve come from one parent
//! image, the rest from the other. Masks whose coverage leaves
//! `[0.25, 0.75]` are resampled a bounded number of times, then replaced
//! by a straight midline split.

use std::collections::BTreeMap;
use std::collections::HashSet;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{ClassId, NegativeClassTable, SamplePopulation};

/// Acceptable fraction of pixels on the kept side of the curve.
pub const COVERAGE_RANGE: (f64, f64) = (0.25, 0.75);
/// Control-point resampling budget before the midline fallback.
pub const MAX_MASK_RETRIES: usize = 20;

/// Whether the curve runs border-to-border left/right (mask = pixels
/// above the curve) or top/bottom (mask = pixels left of it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskOrientation {
    Horizontal,
    Vertical,
}

/// Binary spline mask over a pixel grid.
#[derive(Debug, Clone)]
pub struct SplineMask {
    height: usize,
    width: usize,
    control_points: [(f64, f64); 3],
    orientation: MaskOrientation,
    mask: Array2<u8>,
}

/// Solves the quadratic Bezier coordinate equation
/// `(1-t)^2 a + 2 t (1-t) b + t^2 c = target` for `t` in `[0, 1]`.
/// The middle control point sits strictly between the endpoints, so the
/// coordinate is monotone in `t` and the root is unique.
fn bezier_parameter(a: f64, b: f64, c: f64, target: f64) -> f64 {
    let qa = a - 2.0 * b + c;
    let qb = 2.0 * (b - a);
    let qc = a - target;
    let t = if qa.abs() < 1e-12 {
        -qc / qb
    } else {
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
        let t1 = (-qb + disc) / (2.0 * qa);
        let t2 = (-qb - disc) / (2.0 * qa);
        if (-1e-9..=1.0 + 1e-9).contains(&t1) {
            t1
        } else {
            t2
        }
    };
    t.clamp(0.0, 1.0)
}

fn bezier_point(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), t: f64) -> (f64, f64) {
    let s = 1.0 - t;
    (
        s * s * p0.0 + 2.0 * t * s * p1.0 + t * t * p2.0,
        s * s * p0.1 + 2.0 * t * s * p1.1 + t * t * p2.1,
    )
}

impl SplineMask {
    /// Rasterizes the curve through three explicit control points
    /// (`(x, y)` pixel coordinates). Fails if the resulting coverage is
    /// outside [`COVERAGE_RANGE`].
    pub fn from_control_points(
        height: usize,
        width: usize,
        control_points: [(f64, f64); 3],
        orientation: MaskOrientation,
    ) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::InvalidConfig(format!(
                "mask needs at least 8x8 pixels, got {height}x{width}"
            )));
        }
        let mask = Self::rasterize(height, width, control_points, orientation);
        let built = Self {
            height,
            width,
            control_points,
            orientation,
            mask,
        };
        let coverage = built.coverage();
        if !(COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&coverage) {
            return Err(Error::InvalidInput(format!(
                "mask coverage {coverage:.3} outside [{}, {}]",
                COVERAGE_RANGE.0, COVERAGE_RANGE.1
            )));
        }
        Ok(built)
    }

    fn rasterize(
        height: usize,
        width: usize,
        pts: [(f64, f64); 3],
        orientation: MaskOrientation,
    ) -> Array2<u8> {
        let mut mask = Array2::zeros((height, width));
        match orientation {
            MaskOrientation::Horizontal => {
                // y as a function of x; mask = pixels above the curve.
                for col in 0..width {
                    let t = bezier_parameter(pts[0].0, pts[1].0, pts[2].0, col as f64);
                    let (_, y) = bezier_point(pts[0], pts[1], pts[2], t);
                    for row in 0..height {
                        if (row as f64) < y {
                            mask[(row, col)] = 1;
                        }
                    }
                }
            }
            MaskOrientation::Vertical => {
                // x as a function of y; mask = pixels left of the curve.
                for row in 0..height {
                    let t = bezier_parameter(pts[0].1, pts[1].1, pts[2].1, row as f64);
                    let (x, _) = bezier_point(pts[0], pts[1], pts[2], t);
                    for col in 0..width {
                        if (col as f64) < x {
                            mask[(row, col)] = 1;
                        }
                    }
                }
            }
        }
        mask
    }

    /// Seeded mask: endpoints on two opposite borders (orientation by
    /// coin flip), middle control point uniform in the central 50% x 50%
    /// box, coverage clamped into range by resampling with a midline
    /// fallback.
    pub fn generate(height: usize, width: usize, seed: u64) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::InvalidConfig(format!(
                "mask needs at least 8x8 pixels, got {height}x{width}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = ((height - 1) as f64, (width - 1) as f64);
        for _ in 0..MAX_MASK_RETRIES {
            let horizontal = rng.gen_bool(0.5);
            let central_x = rng.gen_range(0.25 * w..=0.75 * w);
            let central_y = rng.gen_range(0.25 * h..=0.75 * h);
            let (pts, orientation) = if horizontal {
                (
                    [
                        (0.0, rng.gen_range(0.0..=h)),
                        (central_x, central_y),
                        (w, rng.gen_range(0.0..=h)),
                    ],
                    MaskOrientation::Horizontal,
                )
            } else {
                (
                    [
                        (rng.gen_range(0.0..=w), 0.0),
                        (central_x, central_y),
                        (rng.gen_range(0.0..=w), h),
                    ],
                    MaskOrientation::Vertical,
                )
            };
            if let Ok(mask) = Self::from_control_points(height, width, pts, orientation) {
                return Ok(mask);
            }
        }
        // Straight midline split: exactly the top half.
        let mid = h / 2.0;
        Self::from_control_points(
            height,
            width,
            [(0.0, mid), (w / 2.0, mid), (w, mid)],
            MaskOrientation::Horizontal,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn control_points(&self) -> [(f64, f64); 3] {
        self.control_points
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    /// Fraction of pixels belonging to the first parent.
    pub fn coverage(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64
            / (self.height * self.width) as f64
    }

    /// The same split with the sides swapped.
    pub fn complement(&self) -> Self {
        let mut flipped = self.clone();
        flipped.mask.mapv_inplace(|m| 1 - m);
        flipped
    }
}

/// Per-pixel composition: parent `a` where the mask is set, parent `b`
/// elsewhere. Every output pixel equals exactly one parent's pixel.
pub fn composite_pair(
    image_a: &Array3<f64>,
    image_b: &Array3<f64>,
    mask: &SplineMask,
) -> Result<Array3<f64>> {
    let shape = image_a.raw_dim();
    if image_b.raw_dim() != shape {
        return Err(Error::InvalidInput(format!(
            "parent shapes differ: {:?} vs {:?}",
            image_a.shape(),
            image_b.shape()
        )));
    }
    if shape[1] != mask.height() || shape[2] != mask.width() {
        return Err(Error::InvalidInput(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            shape[1],
            shape[2]
        )));
    }
    let mut out = image_b.clone();
    for ((c, y, x), v) in out.indexed_iter_mut() {
        if mask.mask()[(y, x)] == 1 {
            *v = image_a[(c, y, x)];
        }
    }
    Ok(out)
}

/// One synthesized negative sample with its provenance.
#[derive(Debug, Clone)]
pub struct CompositeSample {
    pub image: Array3<f64>,
    /// Output index from the negative table (`>= |Cs|`).
    pub negative_label: usize,
    pub parent_classes: (ClassId, ClassId),
    pub parent_ids: (String, String),
    pub mask_seed: u64,
}

/// Manifest row for one composite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeRecord {
    pub negative_label: usize,
    pub item: usize,
    pub parent_classes: (ClassId, ClassId),
    pub parent_ids: (String, String),
    pub mask_seed: u64,
}

/// Mixes a per-class stream out of the build seed so classes can be
/// generated independently yet reproducibly.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds `per_class` composites for every negative class in the table.
/// Parents are drawn independently from the two positive classes of the
/// pair, each composite with a fresh mask seed; deterministic in `seed`.
pub fn build_negative_dataset(
    source: &SamplePopulation,
    table: &NegativeClassTable,
    per_class: usize,
    seed: u64,
) -> Result<Vec<CompositeSample>> {
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, sample) in source.samples().iter().enumerate() {
        let label = sample.label.ok_or_else(|| {
            Error::DatasetConstruction(format!("source sample {} has no label", sample.id))
        })?;
        by_class.entry(label).or_default().push(i);
    }
    let mut referenced: Vec<ClassId> = table
        .entries()
        .iter()
        .flat_map(|&(i, j)| [i, j])
        .collect();
    referenced.sort_unstable();
    referenced.dedup();
    for class in referenced {
        if by_class.get(&class).map_or(true, Vec::is_empty) {
            return Err(Error::DatasetConstruction(format!(
                "positive class {class} has no images"
            )));
        }
    }

    let mut out = Vec::with_capacity(table.num_negative() * per_class);
    for (rank, &(class_a, class_b)) in table.entries().iter().enumerate() {
        let negative_label = table.num_positive() + rank;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, negative_label as u64));
        let pool_a = &by_class[&class_a];
        let pool_b = &by_class[&class_b];
        let mut used: HashSet<(usize, usize, u64)> = HashSet::new();
        for _ in 0..per_class {
            // No composite may reuse a (parent, parent, mask seed) triple.
            let (ia, ib, mask_seed) = loop {
                let ia = pool_a[rng.gen_range(0..pool_a.len())];
                let ib = pool_b[rng.gen_range(0..pool_b.len())];
                let mask_seed: u64 = rng.gen();
                if used.insert((ia, ib, mask_seed)) {
                    break (ia, ib, mask_seed);
                }
            };
            let parent_a = &source.samples()[ia];
            let parent_b = &source.samples()[ib];
            let shape = parent_a.image.shape();
            let mask = SplineMask::generate(shape[1], shape[2], mask_seed)?;
            let image = composite_pair(&parent_a.image, &parent_b.image, &mask)?;
            out.push(CompositeSample {
                image,
                negative_label,
                parent_classes: (class_a, class_b),
                parent_ids: (parent_a.id.clone(), parent_b.id.clone()),
                mask_seed,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::{Sample, SampleRole};
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn generation_is_deterministic() {
        let a = SplineMask::generate(32, 32, 7).unwrap();
        let b = SplineMask::generate(32, 32, 7).unwrap();
        assert_eq!(a.mask(), b.mask());
        assert_eq!(a.control_points(), b.control_points());
    }

    #[test]
    fn tiny_images_are_rejected() {
        assert!(matches!(
            SplineMask::generate(4, 32, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn collinear_midline_points_give_an_exact_half_split() {
        let mid = 31.0 / 2.0;
        let mask = SplineMask::from_control_points(
            32,
            32,
            [(0.0, mid), (16.0, mid), (31.0, mid)],
            MaskOrientation::Horizontal,
        )
        .unwrap();
        assert_eq!(mask.coverage(), 0.5);
        // Exactly the top half.
        for ((row, _), &m) in mask.mask().indexed_iter() {
            assert_eq!(m, if row < 16 { 1 } else { 0 });
        }
        // Its complement is exactly the bottom half.
        let bottom = mask.complement();
        assert_eq!(bottom.coverage(), 0.5);
        for ((row, _), &m) in bottom.mask().indexed_iter() {
            assert_eq!(m, if row >= 16 { 1 } else { 0 });
        }
    }

    #[test]
    fn coverage_sweep_stays_in_range() {
        // Brute-force sweep over 1000 seeds.
        for seed in 0..1000 {
            let mask = SplineMask::generate(32, 32, seed).unwrap();
            let c = mask.coverage();
            assert!(
                (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&c),
                "seed {seed}: coverage {c}"
            );
        }
    }

    fn gradient_image(shape: (usize, usize, usize), offset: f64) -> Array3<f64> {
        Array3::from_shape_fn(shape, |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) as f64 * 0.01 + offset).fract().abs()
        })
    }

    #[test]
    fn full_mask_returns_first_parent() {
        let mid = 31.0 / 2.0;
        let mask = SplineMask::from_control_points(
            32,
            32,
            [(0.0, mid), (16.0, mid), (31.0, mid)],
            MaskOrientation::Horizontal,
        )
        .unwrap();
        // Force an all-ones mask through the complement trick: set every
        // pixel by compositing a with itself instead.
        let a = gradient_image((3, 32, 32), 0.0);
        let b = gradient_image((3, 32, 32), 0.37);
        let mut all_ones = mask.clone();
        all_ones.mask.fill(1);
        let out = composite_pair(&a, &b, &all_ones).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn identical_parents_are_a_fixed_point() {
        let mask = SplineMask::generate(32, 32, 3).unwrap();
        let a = gradient_image((3, 32, 32), 0.1);
        let out = composite_pair(&a, &a, &mask).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn constant_parents_mix_by_coverage() {
        let mid = 31.0 / 2.0;
        let mask = SplineMask::from_control_points(
            32,
            32,
            [(0.0, mid), (16.0, mid), (31.0, mid)],
            MaskOrientation::Horizontal,
        )
        .unwrap();
        let a = Array3::from_elem((3, 32, 32), 0.0);
        let b = Array3::from_elem((3, 32, 32), 1.0);
        let out = composite_pair(&a, &b, &mask).unwrap();
        let mean = out.sum() / out.len() as f64;
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mask = SplineMask::generate(32, 32, 0).unwrap();
        let a = gradient_image((3, 32, 32), 0.0);
        let b = gradient_image((3, 16, 16), 0.0);
        assert!(matches!(
            composite_pair(&a, &b, &mask),
            Err(Error::InvalidInput(_))
        ));
        let c = gradient_image((3, 16, 16), 0.5);
        assert!(matches!(
            composite_pair(&b, &c, &mask),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn swapping_parents_and_complementing_is_identical() {
        let mask = SplineMask::generate(32, 32, 11).unwrap();
        let a = gradient_image((3, 32, 32), 0.0);
        let b = gradient_image((3, 32, 32), 0.42);
        let direct = composite_pair(&a, &b, &mask).unwrap();
        let swapped = composite_pair(&b, &a, &mask.complement()).unwrap();
        assert_eq!(direct, swapped);
    }

    fn toy_population(classes: usize, per_class: usize) -> SamplePopulation {
        let mut samples = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                samples.push(Sample {
                    id: format!("class{c}/{i}"),
                    image: gradient_image((3, 16, 16), c as f64 * 0.2 + i as f64 * 0.031),
                    label: Some(c),
                });
            }
        }
        SamplePopulation::new(SampleRole::SourceShared, samples).unwrap()
    }

    #[test]
    fn dataset_counts_and_bookkeeping() {
        let source = toy_population(3, 4);
        let table = NegativeClassTable::build(3, 100, 0).unwrap();
        let composites = build_negative_dataset(&source, &table, 10, 99).unwrap();
        assert_eq!(composites.len(), 30);
        let mut per_label: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &composites {
            *per_label.entry(c.negative_label).or_default() += 1;
            // Parent pair matches the table entry of the label.
            assert_eq!(table.pair_of(c.negative_label), Some(c.parent_classes));
        }
        assert_eq!(per_label.len(), 3);
        assert!(per_label.values().all(|&n| n == 10));
    }

    #[test]
    fn dataset_determinism_and_triple_uniqueness() {
        let source = toy_population(3, 4);
        let table = NegativeClassTable::build(3, 100, 0).unwrap();
        let a = build_negative_dataset(&source, &table, 10, 99).unwrap();
        let b = build_negative_dataset(&source, &table, 10, 99).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask_seed, y.mask_seed);
        }
        let triples: HashSet<_> = a
            .iter()
            .map(|c| (c.parent_ids.clone(), c.mask_seed))
            .collect();
        assert_eq!(triples.len(), a.len());
    }

    #[test]
    fn six_classes_fill_fifteen_negative_labels() {
        let source = toy_population(6, 2);
        let table = NegativeClassTable::build(6, usize::MAX, 0).unwrap();
        let composites = build_negative_dataset(&source, &table, 1, 5).unwrap();
        let labels: HashSet<_> = composites.iter().map(|c| c.negative_label).collect();
        assert_eq!(labels.len(), 15);
    }

    #[test]
    fn missing_class_is_named() {
        let source = toy_population(2, 3);
        let table = NegativeClassTable::build(3, 100, 0).unwrap();
        let err = build_negative_dataset(&source, &table, 2, 0).unwrap_err();
        match err {
            Error::DatasetConstruction(msg) => assert!(msg.contains('2'), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn pixel_provenance_is_exact(seed in any::<u64>()) {
            let mask = SplineMask::generate(16, 16, seed).unwrap();
            let a = gradient_image((3, 16, 16), 0.0);
            let b = gradient_image((3, 16, 16), 0.5);
            let out = composite_pair(&a, &b, &mask).unwrap();
            for ((c, y, x), &v) in out.indexed_iter() {
                let expected = if mask.mask()[(y, x)] == 1 { a[(c, y, x)] } else { b[(c, y, x)] };
                prop_assert_eq!(v, expected);
            }
        }
    }
}
