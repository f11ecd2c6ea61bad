//! Local binary / ternary pattern baselines over uniform-pattern buckets.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::raster::{for_each_diff, DiffVector, GrayImage, SamplingMode};

/// Number of buckets: 58 uniform codes plus one catch-all.
pub const UNIFORM_BINS: usize = 59;

/// Default LTP tolerance in intensity units on [0, 255].
pub const DEFAULT_LTP_TOLERANCE: f64 = 5.0;

#[inline]
pub(crate) fn code_where(v: &DiffVector, pred: impl Fn(f64) -> bool) -> u8 {
    v.0.iter()
        .enumerate()
        .fold(0u8, |code, (i, &x)| if pred(x) { code | (1 << i) } else { code })
}

/// Bit `i` is set iff component `i` of the differential vector is >= 0.
pub fn lbp_code(v: &DiffVector) -> u8 {
    code_where(v, |x| x >= 0.0)
}

/// Split LTP coding: `(upper, lower)` with upper bit `i` set iff
/// `v[i] > t` and lower bit `i` set iff `v[i] < -t`.
pub fn ltp_split_codes(v: &DiffVector, t: f64) -> Result<(u8, u8)> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("LTP tolerance must be non-negative, got {t}")));
    }
    Ok((code_where(v, |x| x > t), code_where(v, |x| x < -t)))
}

/// Number of 0->1 plus 1->0 transitions around the circular 8-bit string.
pub fn circular_transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

pub fn is_uniform(code: u8) -> bool {
    circular_transitions(code) <= 2
}

/// Maps each 8-bit code to its uniform-pattern bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UniformTable {
    buckets: [u8; 256],
}

impl UniformTable {
    /// Uniform codes get buckets 0..58 in ascending code order; every other
    /// code goes to bucket 58.
    pub fn build() -> Self {
        let mut buckets = [(UNIFORM_BINS - 1) as u8; 256];
        let mut next = 0u8;
        for code in 0..=255u8 {
            if is_uniform(code) {
                buckets[code as usize] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next as usize, UNIFORM_BINS - 1);
        UniformTable { buckets }
    }

    /// Process-wide shared table.
    pub fn shared() -> &'static UniformTable {
        static TABLE: OnceLock<UniformTable> = OnceLock::new();
        TABLE.get_or_init(UniformTable::build)
    }

    #[inline]
    pub fn bucket(&self, code: u8) -> usize {
        self.buckets[code as usize] as usize
    }

    pub fn uniform_count(&self) -> usize {
        self.buckets.iter().filter(|&&b| (b as usize) < UNIFORM_BINS - 1).count()
    }
}

/// Pattern flavor for histogram construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatternKind {
    Lbp,
    Ltp { tolerance: f64 },
}

impl PatternKind {
    pub fn bins(self) -> usize {
        match self {
            PatternKind::Lbp => UNIFORM_BINS,
            PatternKind::Ltp { .. } => 2 * UNIFORM_BINS,
        }
    }
}

/// Uniform-pattern counts. LTP histograms hold the upper half followed by
/// the lower half.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternHistogram {
    pub bins: Vec<f64>,
}

pub fn pattern_histogram(img: &GrayImage, mode: SamplingMode, kind: PatternKind) -> Result<PatternHistogram> {
    let table = UniformTable::shared();
    let mut bins = vec![0.0; kind.bins()];
    match kind {
        PatternKind::Lbp => for_each_diff(img, mode, |_, _, v| {
            bins[table.bucket(lbp_code(&v))] += 1.0;
        })?,
        PatternKind::Ltp { tolerance } => {
            if !(tolerance >= 0.0) {
                return Err(Error::invalid(format!("LTP tolerance must be non-negative, got {tolerance}")));
            }
            for_each_diff(img, mode, |_, _, v| {
                // tolerance validated above
                let (upper, lower) = ltp_split_codes(&v, tolerance).unwrap_or((0, 0));
                bins[table.bucket(upper)] += 1.0;
                bins[UNIFORM_BINS + table.bucket(lower)] += 1.0;
            })?
        }
    }
    Ok(PatternHistogram { bins })
}

/// `sqrt(h / |h|_1)` elementwise.
pub fn normalize_hist(h: &PatternHistogram) -> Result<PatternHistogram> {
    if h.bins.iter().any(|&b| b < 0.0 || !b.is_finite()) {
        return Err(Error::invalid("histogram bins must be finite and non-negative"));
    }
    let total: f64 = h.bins.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyInput("histogram has no mass"));
    }
    Ok(PatternHistogram {
        bins: h.bins.iter().map(|&b| (b / total).sqrt()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GrayImage;
    use proptest::prelude::*;

    #[test]
    fn lbp_sign_extremes() {
        assert_eq!(lbp_code(&DiffVector([0.0; 8])), 255);
        assert_eq!(lbp_code(&DiffVector([1., 2., 3., 4., 5., 6., 7., 8.])), 255);
        assert_eq!(lbp_code(&DiffVector([-1.0; 8])), 0);
        let code = lbp_code(&DiffVector([-1., 1., 1., 1., -1., -1., -1., -1.]));
        assert_eq!(code, 0b0000_1110);
        assert_eq!(circular_transitions(code), 2);
        assert!(is_uniform(code));
    }

    #[test]
    fn ltp_examples() {
        assert_eq!(ltp_split_codes(&DiffVector([0.0; 8]), 3.0).unwrap(), (0, 0));
        let v = DiffVector([6., -6., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(ltp_split_codes(&v, 5.0).unwrap(), (0b01, 0b10));
        assert!(ltp_split_codes(&v, -1.0).is_err());

        let v = DiffVector([2., -3., 0., 1., 0., -0.5, 4., 0.]);
        let (up, lo) = ltp_split_codes(&v, 0.0).unwrap();
        let strict_pos = v.0.iter().enumerate().fold(0u8, |c, (i, &x)| if x > 0.0 { c | 1 << i } else { c });
        let nonzero = v.0.iter().enumerate().fold(0u8, |c, (i, &x)| if x != 0.0 { c | 1 << i } else { c });
        assert_eq!(up, strict_pos);
        assert_eq!(up | lo, nonzero);
        assert_eq!(up & lo, 0);
    }

    #[test]
    fn uniform_table_layout() {
        let table = UniformTable::build();
        assert_eq!(table.uniform_count(), 58);
        assert!(is_uniform(0) && is_uniform(255));
        assert_eq!(table.bucket(0), 0);
        assert_eq!(table.bucket(1), 1);
        assert_eq!(table.bucket(255), 57);
        assert_eq!(circular_transitions(0b0101_0101), 8);
        assert_eq!(table.bucket(0b0101_0101), 58);
    }

    #[test]
    fn constant_image_histograms() {
        let img = GrayImage::filled(6, 7, 42.0);
        let table = UniformTable::shared();
        let h = pattern_histogram(&img, SamplingMode::Rectangular, PatternKind::Lbp).unwrap();
        assert_eq!(h.bins[table.bucket(255)], 20.0);
        assert_eq!(h.bins.iter().sum::<f64>(), 20.0);

        let h = pattern_histogram(&img, SamplingMode::Circular, PatternKind::Ltp { tolerance: 5.0 }).unwrap();
        assert_eq!(h.bins.len(), 118);
        assert_eq!(h.bins[table.bucket(0)], 20.0);
        assert_eq!(h.bins[UNIFORM_BINS + table.bucket(0)], 20.0);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_hist(&PatternHistogram { bins: vec![1.0; 4] }).unwrap();
        assert_eq!(n.bins, vec![0.5; 4]);
        let n = normalize_hist(&PatternHistogram { bins: vec![0.0, 3.0, 0.0] }).unwrap();
        assert_eq!(n.bins, vec![0.0, 1.0, 0.0]);
        let n = normalize_hist(&PatternHistogram { bins: vec![3.0, 1.0] }).unwrap();
        assert!((n.bins[0] - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((n.bins[1] - 0.25f64.sqrt()).abs() < 1e-15);
        assert!(normalize_hist(&PatternHistogram { bins: vec![0.0; 3] }).is_err());
    }

    fn image(w: usize, h: usize) -> impl Strategy<Value = GrayImage> {
        proptest::collection::vec(0u8..=255, w * h)
            .prop_map(move |d| GrayImage::new(w, h, d.into_iter().map(f64::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn histogram_counts_interior_pixels(img in image(10, 10), circular in any::<bool>()) {
            let mode = if circular { SamplingMode::Circular } else { SamplingMode::Rectangular };
            let h = pattern_histogram(&img, mode, PatternKind::Lbp).unwrap();
            prop_assert_eq!(h.bins.iter().sum::<f64>(), 64.0);
            let t = pattern_histogram(&img, mode, PatternKind::Ltp { tolerance: 5.0 }).unwrap();
            prop_assert_eq!(t.bins[..UNIFORM_BINS].iter().sum::<f64>(), 64.0);
            prop_assert_eq!(t.bins[UNIFORM_BINS..].iter().sum::<f64>(), 64.0);
            let n = normalize_hist(&h).unwrap();
            let norm: f64 = n.bins.iter().map(|b| b * b).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }

        #[test]
        fn codes_survive_shift_and_positive_scale(img in image(5, 5), shift in 0u8..40, scale in 1u8..4) {
            let base = pattern_histogram(&img, SamplingMode::Rectangular, PatternKind::Lbp).unwrap();
            let scaled = GrayImage::new(5, 5, img.data().iter().map(|p| p * scale as f64).collect()).unwrap();
            prop_assert_eq!(&base, &pattern_histogram(&scaled, SamplingMode::Rectangular, PatternKind::Lbp).unwrap());
            let shifted = img.shifted(shift as f64);
            prop_assert_eq!(&base, &pattern_histogram(&shifted, SamplingMode::Rectangular, PatternKind::Lbp).unwrap());
            let kind = PatternKind::Ltp { tolerance: 5.0 };
            prop_assert_eq!(
                pattern_histogram(&img, SamplingMode::Circular, kind).unwrap(),
                pattern_histogram(&shifted, SamplingMode::Circular, kind).unwrap()
            );
        }
    }
}
