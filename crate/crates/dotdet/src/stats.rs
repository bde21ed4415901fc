//! Image statistics and the EMA recurrence shared by every other module.
//!
//! The same first-order recurrence stabilizes everything downstream:
//! scalar image statistics here, embedding means in [`crate::stabilize`],
//! and the context reference in [`crate::context`]. It is implemented in
//! delta form, `x + rho * (obs - x)`, rather than the algebraically equal
//! `(1 - rho) * x + rho * obs`: the delta form makes `obs == x` an exact
//! fixed point and keeps every rounding proportional to the remaining gap,
//! so the geometric convergence law survives in `f64` instead of drowning
//! in cancellation noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel raster with row-major `f64` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Builds an image from raw row-major data.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!(
                "pixel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant-valued image.
    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    /// Region covering the whole frame.
    pub fn full_region(&self) -> Region {
        Region {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    /// Internal constructor for pipeline stages that already guarantee the
    /// `[0, 1]` invariant (e.g. augmentation clamps its output).
    pub(crate) fn from_clamped(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Bounds(format!(
                "degenerate region ({x0},{y0})..({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn check_inside(&self, image: &ImageBuffer) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Bounds(format!("empty region {self:?}")));
        }
        if self.x1 > image.width() || self.y1 > image.height() {
            return Err(Error::Bounds(format!(
                "region {self:?} exceeds {}x{} image",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of a pixel set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population std over a pixel region.
///
/// The standard deviation divides by the pixel count, not count minus one.
pub fn local_stats(image: &ImageBuffer, region: Region) -> Result<ScalarStats> {
    region.check_inside(image)?;
    let n = region.area() as f64;
    let mut sum = 0.0;
    for y in region.y0..region.y1 {
        let row = &image.pixels()[y * image.width() + region.x0..y * image.width() + region.x1];
        sum += row.iter().sum::<f64>();
    }
    let mean = sum / n;
    let mut sq = 0.0;
    for y in region.y0..region.y1 {
        let row = &image.pixels()[y * image.width() + region.x0..y * image.width() + region.x1];
        for &v in row {
            let d = v - mean;
            sq += d * d;
        }
    }
    Ok(ScalarStats {
        mean,
        std: (sq / n).sqrt(),
    })
}

/// Batch-level statistics: mean of per-image means and mean of per-image
/// population stds, each taken over the full frame.
///
/// Aggregating per image keeps every image's weight independent of its
/// resolution.
pub fn batch_stats(images: &[ImageBuffer]) -> Result<ScalarStats> {
    if images.is_empty() {
        return Err(Error::Argument("batch_stats on empty batch".into()));
    }
    let mut mean = 0.0;
    let mut std = 0.0;
    for image in images {
        let s = local_stats(image, image.full_region())?;
        mean += s.mean;
        std += s.std;
    }
    let n = images.len() as f64;
    Ok(ScalarStats {
        mean: mean / n,
        std: std / n,
    })
}

/// One EMA step: `prev + rho * (observed - prev)`.
///
/// `rho` must lie in `(0, 1]`; `rho = 1` replaces the previous value.
pub fn ema_update(prev: f64, observed: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Argument(format!("rho {rho} outside (0, 1]")));
    }
    Ok(prev + rho * (observed - prev))
}

/// Interval the smoothing factor is expected to live in.
pub const RHO_RANGE: (f64, f64) = (0.01, 0.1);

/// EMA reference over stream statistics: `(mu_ref, sigma_ref)`.
///
/// The reference seeds itself from the first observed batch (equivalent to
/// `rho = 1` on the first update), tracked by the `initialized` flag;
/// seeding from an arbitrary constant would bias early augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaScalarPair {
    pub mu_ref: f64,
    pub sigma_ref: f64,
    pub rho: f64,
    pub initialized: bool,
}

impl EmaScalarPair {
    /// New uninitialized reference; `rho` must lie in [`RHO_RANGE`].
    pub fn new(rho: f64) -> Result<Self> {
        if !(RHO_RANGE.0..=RHO_RANGE.1).contains(&rho) {
            return Err(Error::Argument(format!(
                "rho {rho} outside [{}, {}]",
                RHO_RANGE.0, RHO_RANGE.1
            )));
        }
        Self::new_lenient(rho)
    }

    /// Like [`EmaScalarPair::new`] but only requires `rho` in `(0, 1]`.
    /// Exists for explicitly-requested out-of-range experiments.
    pub fn new_lenient(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Argument(format!("rho {rho} outside (0, 1]")));
        }
        Ok(Self {
            mu_ref: 0.0,
            sigma_ref: 0.0,
            rho,
            initialized: false,
        })
    }

    /// Advances the reference toward observed batch statistics.
    pub fn update(&mut self, observed: ScalarStats) {
        if !self.initialized {
            self.mu_ref = observed.mean;
            self.sigma_ref = observed.std;
            self.initialized = true;
            return;
        }
        self.mu_ref += self.rho * (observed.mean - self.mu_ref);
        self.sigma_ref += self.rho * (observed.std - self.sigma_ref);
    }

    pub fn stats(&self) -> ScalarStats {
        ScalarStats {
            mean: self.mu_ref,
            std: self.sigma_ref,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, data: &[f64]) -> ImageBuffer {
        ImageBuffer::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn local_stats_hand_example() {
        let im = img(2, 2, &[0.0, 0.5, 0.5, 1.0]);
        let s = local_stats(&im, im.full_region()).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!((s.std - 0.353_553_390_593_273_8).abs() < 1e-9);
    }

    #[test]
    fn local_stats_constant_and_single_pixel() {
        let im = img(3, 2, &[0.4; 6]);
        let s = local_stats(&im, im.full_region()).unwrap();
        assert!((s.mean - 0.4).abs() < 1e-12);
        assert!(s.std < 1e-12);

        let one = img(1, 1, &[0.7]);
        let s = local_stats(&one, one.full_region()).unwrap();
        assert_eq!(s.mean, 0.7);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn local_stats_subregion() {
        let im = img(2, 2, &[0.0, 0.5, 0.5, 1.0]);
        let s = local_stats(&im, Region::new(1, 1, 2, 2).unwrap()).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn local_stats_rejects_out_of_bounds() {
        let im = img(2, 2, &[0.0, 0.5, 0.5, 1.0]);
        let r = Region {
            x0: 0,
            y0: 0,
            x1: 3,
            y1: 2,
        };
        assert!(matches!(local_stats(&im, r), Err(Error::Bounds(_))));
        let empty = Region {
            x0: 1,
            y0: 1,
            x1: 1,
            y1: 2,
        };
        assert!(matches!(local_stats(&im, empty), Err(Error::Bounds(_))));
    }

    #[test]
    fn batch_stats_examples() {
        // Singleton batch equals full-frame local stats.
        let a = img(2, 2, &[0.0, 0.5, 0.5, 1.0]);
        let alone = batch_stats(std::slice::from_ref(&a)).unwrap();
        let direct = local_stats(&a, a.full_region()).unwrap();
        assert_eq!(alone, direct);

        // Two constant images.
        let c1 = ImageBuffer::filled(4, 4, 0.2).unwrap();
        let c2 = ImageBuffer::filled(2, 8, 0.8).unwrap();
        let s = batch_stats(&[c1, c2]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!(s.std < 1e-12);

        // Mixed batch: hand evaluation of mean-of-means / mean-of-stds.
        let flat = ImageBuffer::filled(2, 2, 0.5).unwrap();
        let s = batch_stats(&[a, flat]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!((s.std - 0.176_776_695_296_636_9).abs() < 1e-9);
    }

    #[test]
    fn batch_stats_rejects_empty() {
        assert!(matches!(batch_stats(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn ema_update_examples() {
        assert!((ema_update(0.5, 0.7, 0.1).unwrap() - 0.52).abs() < 1e-12);
        assert_eq!(ema_update(0.3, 0.3, 0.07).unwrap(), 0.3);
        assert_eq!(ema_update(0.0, 1.0, 1.0).unwrap(), 1.0);
        assert!(ema_update(0.0, 1.0, 0.0).is_err());
        assert!(ema_update(0.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn ema_pair_seeds_then_smooths() {
        let mut pair = EmaScalarPair::new(0.1).unwrap();
        assert!(!pair.initialized);
        pair.update(ScalarStats {
            mean: 0.3,
            std: 0.05,
        });
        assert_eq!(pair.mu_ref, 0.3);
        assert_eq!(pair.sigma_ref, 0.05);
        pair.update(ScalarStats {
            mean: 0.7,
            std: 0.05,
        });
        assert!((pair.mu_ref - 0.34).abs() < 1e-12);
        assert_eq!(pair.sigma_ref, 0.05);
    }

    #[test]
    fn ema_pair_rho_validation() {
        assert!(EmaScalarPair::new(0.005).is_err());
        assert!(EmaScalarPair::new(0.2).is_err());
        assert!(EmaScalarPair::new_lenient(0.5).is_ok());
        assert!(EmaScalarPair::new_lenient(0.0).is_err());
    }

    #[test]
    fn ema_geometric_convergence_law() {
        // Constant observation b: the remaining gap shrinks by (1 - rho)
        // each step. Checked tightly against the closed form.
        for &rho in &[0.01, 0.05, 0.1] {
            let (b, x0) = (0.0, 0.5);
            let mut x = x0;
            for t in 1..=200u32 {
                x = ema_update(x, b, rho).unwrap();
                let lhs = (x - b).abs();
                let rhs = (1.0 - rho).powi(t as i32) * (x0 - b).abs();
                let rel = (lhs - rhs).abs() / rhs.max(f64::MIN_POSITIVE);
                assert!(rel < 1e-12, "rho={rho} t={t} rel={rel}");
            }
        }
        // Nonzero target at slow decay stays equally tight.
        let (b, x0, rho) = (0.7, 0.3, 0.01);
        let mut x = x0;
        for _ in 0..200 {
            x = ema_update(x, b, rho).unwrap();
        }
        let rhs = (1.0f64 - rho).powi(200) * (x0 - b).abs();
        assert!(((x - b).abs() - rhs).abs() / rhs < 1e-12);
    }

    #[test]
    fn ema_iterates_stay_in_convex_hull() {
        let mut x = 0.2;
        let observations = [0.9, 0.1, 0.5, 0.7, 0.3];
        let lo = 0.1f64;
        let hi = 0.9f64;
        for (i, &obs) in observations.iter().cycle().take(100).enumerate() {
            x = ema_update(x, obs, 0.05 + 0.0001 * (i % 7) as f64).unwrap();
            assert!((lo.min(0.2)..=hi.max(0.2)).contains(&x));
        }
    }

    #[test]
    fn std_invariant_under_constant_shift() {
        let base = img(3, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        let shifted = img(
            3,
            3,
            &base.pixels().iter().map(|v| v + 0.05).collect::<Vec<_>>(),
        );
        let s0 = local_stats(&base, base.full_region()).unwrap();
        let s1 = local_stats(&shifted, shifted.full_region()).unwrap();
        assert!((s0.std - s1.std).abs() < 1e-12);
    }

    #[test]
    fn batch_of_copies_matches_single_image() {
        let a = img(2, 3, &[0.1, 0.9, 0.4, 0.6, 0.2, 0.8]);
        let k = vec![a.clone(); 5];
        let batch = batch_stats(&k).unwrap();
        let single = local_stats(&a, a.full_region()).unwrap();
        assert!((batch.mean - single.mean).abs() < 1e-12);
        assert!((batch.std - single.std).abs() < 1e-12);
    }

    #[test]
    fn image_buffer_validation() {
        assert!(ImageBuffer::new(0, 4, vec![]).is_err());
        assert!(ImageBuffer::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![1.2]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![-0.1]).is_err());
    }
}
