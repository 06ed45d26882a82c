//! Dense embedding maps: multi-scale pyramid blending, PCA compression and
//! differentiable bilinear sampling.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature map dimensions must be at least 1x1x1, got {0}x{1}x{2}")]
    EmptyMap(usize, usize, usize),
    #[error("feature buffer holds {got} values, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("no feature maps to blend")]
    NoMaps,
    #[error("maps and weights disagree: {0}")]
    Mismatch(String),
    #[error("invalid PCA request: {0}")]
    InvalidPca(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid pyramid config: {0}")]
    InvalidPyramid(String),
}

/// `C × H × W` feature grid stored channel-major, rows within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FeatureError::EmptyMap(channels, height, width));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(FeatureError::BufferSize {
                got: data.len(),
                expected,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
        .expect("zero map with positive dims")
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data).expect("generator produced invalid map")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// The feature vector at integer pixel `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> DVector<f64> {
        DVector::from_iterator(self.channels, (0..self.channels).map(|c| self.get(c, y, x)))
    }

    pub fn pixel_into(&self, x: usize, y: usize, out: &mut [f64]) {
        let plane = self.height * self.width;
        let off = y * self.width + x;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = self.data[c * plane + off];
        }
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, v: &[f64]) {
        for (c, &val) in v.iter().enumerate().take(self.channels) {
            self.set(c, y, x, val);
        }
    }

    pub fn in_bounds(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0
            && u.y >= 0.0
            && u.x <= (self.width - 1) as f64
            && u.y <= (self.height - 1) as f64
    }

    /// Bilinear sample at `u`, writing the value and the `K × 2` gradient
    /// (row-major, `[∂/∂x, ∂/∂y]` per channel). Returns `false` outside the grid.
    pub fn sample_into(&self, u: &Vector2<f64>, value: &mut [f64], grad: &mut [f64]) -> bool {
        if !self.in_bounds(u) {
            return false;
        }
        let cell = BilinearCell::locate(u, self.width, self.height);
        let plane = self.height * self.width;
        let i00 = cell.y0 * self.width + cell.x0;
        let i10 = cell.y0 * self.width + cell.x1;
        let i01 = cell.y1 * self.width + cell.x0;
        let i11 = cell.y1 * self.width + cell.x1;
        let [w00, w10, w01, w11] = cell.weights();
        let (ax, ay) = (cell.ax, cell.ay);
        for c in 0..self.channels {
            let base = c * plane;
            let z00 = self.data[base + i00];
            let z10 = self.data[base + i10];
            let z01 = self.data[base + i01];
            let z11 = self.data[base + i11];
            value[c] = w00 * z00 + w10 * z10 + w01 * z01 + w11 * z11;
            let gx = if cell.x1 != cell.x0 {
                (1.0 - ay) * (z10 - z00) + ay * (z11 - z01)
            } else {
                0.0
            };
            let gy = if cell.y1 != cell.y0 {
                (1.0 - ax) * (z01 - z00) + ax * (z11 - z10)
            } else {
                0.0
            };
            grad[2 * c] = gx;
            grad[2 * c + 1] = gy;
        }
        true
    }
}

/// The four grid neighbors of a continuous location and its fractional offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearCell {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
}

impl BilinearCell {
    /// `u` must already be inside `[0, W-1] × [0, H-1]`.
    pub fn locate(u: &Vector2<f64>, width: usize, height: usize) -> Self {
        let (x0, x1, ax) = axis_cell(u.x, width);
        let (y0, y1, ay) = axis_cell(u.y, height);
        Self {
            x0,
            y0,
            x1,
            y1,
            ax,
            ay,
        }
    }

    /// Weights for `(x0,y0), (x1,y0), (x0,y1), (x1,y1)`.
    pub fn weights(&self) -> [f64; 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ]
    }

    pub fn neighbors(&self) -> [(usize, usize); 4] {
        [
            (self.x0, self.y0),
            (self.x1, self.y0),
            (self.x0, self.y1),
            (self.x1, self.y1),
        ]
    }
}

fn axis_cell(t: f64, len: usize) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (t.floor() as usize).min(len - 2);
    (i0, i0 + 1, t - i0 as f64)
}

/// A bilinear sample and its derivative w.r.t. the sampling location.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSample {
    pub value: DVector<f64>,
    /// `K × 2`, columns are `∂/∂x` and `∂/∂y`.
    pub gradient: DMatrix<f64>,
}

/// Samples `map` at continuous pixel `u`; `None` when `u` is outside the grid.
pub fn bilinear_sample(map: &FeatureMap, u: &Vector2<f64>) -> Option<BilinearSample> {
    let k = map.channels();
    let mut value = vec![0.0; k];
    let mut grad = vec![0.0; 2 * k];
    if !map.sample_into(u, &mut value, &mut grad) {
        return None;
    }
    Some(BilinearSample {
        value: DVector::from_vec(value),
        gradient: DMatrix::from_row_slice(k, 2, &grad),
    })
}

/// Scales, patch size and blend weights of the feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub scales: Vec<f64>,
    pub patch: usize,
    pub blend_weights: Vec<f64>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        let scales = vec![2.0, 1.5, 1.0, 0.75];
        Self {
            blend_weights: scales.clone(),
            scales,
            patch: 14,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.scales.is_empty() {
            return Err(FeatureError::InvalidPyramid("no scales".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(FeatureError::InvalidPyramid("scales must be > 0".into()));
        }
        if self.blend_weights.len() != self.scales.len()
            || self.blend_weights.iter().any(|&w| !(w > 0.0))
        {
            return Err(FeatureError::InvalidPyramid(
                "one positive weight per scale required".into(),
            ));
        }
        if self.patch == 0 {
            return Err(FeatureError::InvalidPyramid(
                "patch size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Resized input dimensions for every scale.
    pub fn level_dims(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        self.scales
            .iter()
            .map(|&s| pyramid_dims(height, width, s, self.patch))
            .collect()
    }
}

/// Input size at scale `sigma`, rounded up to a multiple of the patch size.
pub fn pyramid_dims(height: usize, width: usize, sigma: f64, patch: usize) -> (usize, usize) {
    let align = |n: usize| {
        let cells = (n as f64 * sigma / patch as f64 - 1e-9).ceil().max(1.0) as usize;
        cells * patch
    };
    (align(height), align(width))
}

/// Resamples a map to `(height, width)` with pixel-center aligned bilinear interpolation.
pub fn upsample_bilinear(map: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    if map.height() == height && map.width() == width {
        return map.clone();
    }
    let sy = map.height() as f64 / height as f64;
    let sx = map.width() as f64 / width as f64;
    let max_x = (map.width() - 1) as f64;
    let max_y = (map.height() - 1) as f64;
    let k = map.channels();
    let mut out = FeatureMap::zeros(k, height, width);
    let mut value = vec![0.0; k];
    let mut grad = vec![0.0; 2 * k];
    for y in 0..height {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for x in 0..width {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            map.sample_into(&Vector2::new(src_x, src_y), &mut value, &mut grad);
            out.set_pixel(x, y, &value);
        }
    }
    out
}

/// Upsamples every level to `target` and forms the weighted mean `Σ w_s F_s / Σ w_s`.
pub fn blend_pyramid(
    maps: &[FeatureMap],
    weights: &[f64],
    target: (usize, usize),
) -> Result<FeatureMap, FeatureError> {
    let first = maps.first().ok_or(FeatureError::NoMaps)?;
    if maps.len() != weights.len() {
        return Err(FeatureError::Mismatch(format!(
            "{} maps, {} weights",
            maps.len(),
            weights.len()
        )));
    }
    if maps.iter().any(|m| m.channels() != first.channels()) {
        return Err(FeatureError::Mismatch("channel counts differ".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(FeatureError::Mismatch(
            "weights must be >= 0 with positive sum".into(),
        ));
    }
    let (h, w) = target;
    let mut acc = vec![0.0; first.channels() * h * w];
    for (map, &weight) in maps.iter().zip(weights) {
        let up = upsample_bilinear(map, h, w);
        for (a, v) in acc.iter_mut().zip(up.data()) {
            *a += weight * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    FeatureMap::new(first.channels(), h, w, acc)
}

/// Mean and orthonormal basis of a principal subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `C × K`, column-orthonormal, columns ordered by decreasing variance.
    pub basis: DMatrix<f64>,
    /// Per-component sample variance, same order as the basis columns.
    pub explained_variance: DVector<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Builds a model from stored parameters.
    pub fn from_parts(mean: DVector<f64>, basis: DMatrix<f64>) -> Result<Self, FeatureError> {
        if mean.len() != basis.nrows() {
            return Err(FeatureError::Dimension {
                expected: basis.nrows(),
                got: mean.len(),
            });
        }
        let k = basis.ncols();
        Ok(Self {
            mean,
            basis,
            explained_variance: DVector::zeros(k),
        })
    }

    /// Compresses every pixel of a `C`-channel map into a `K`-channel map.
    pub fn encode_map(&self, map: &FeatureMap) -> Result<FeatureMap, FeatureError> {
        if map.channels() != self.input_dim() {
            return Err(FeatureError::Dimension {
                expected: self.input_dim(),
                got: map.channels(),
            });
        }
        let (h, w) = (map.height(), map.width());
        let mut out = FeatureMap::zeros(self.output_dim(), h, w);
        for y in 0..h {
            for x in 0..w {
                let z = pca_encode(&map.pixel(x, y), self)?;
                out.set_pixel(x, y, z.as_slice());
            }
        }
        Ok(out)
    }
}

/// Fits a `k`-component PCA on the rows of `samples` (`N × C`).
///
/// The basis is taken from the eigenvectors of the centered Gram matrix `XᵀX`,
/// which are the right singular vectors of `X`. Each basis vector is signed so
/// its largest-magnitude entry is positive.
pub fn pca_fit(samples: &DMatrix<f64>, k: usize) -> Result<PcaModel, FeatureError> {
    let (n, c) = samples.shape();
    if k == 0 || n < 2 || k > (n - 1).min(c) {
        return Err(FeatureError::InvalidPca(format!(
            "k = {k} with {n} samples of dimension {c}"
        )));
    }
    let mean = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let gram = centered.transpose() * &centered;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut basis = DMatrix::zeros(c, k);
    let mut variance = DVector::zeros(k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        v /= v.norm();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        basis.set_column(col, &v);
        variance[col] = eig.eigenvalues[idx].max(0.0) / (n - 1) as f64;
    }
    Ok(PcaModel {
        mean,
        basis,
        explained_variance: variance,
    })
}

pub fn pca_encode(f: &DVector<f64>, model: &PcaModel) -> Result<DVector<f64>, FeatureError> {
    if f.len() != model.input_dim() {
        return Err(FeatureError::Dimension {
            expected: model.input_dim(),
            got: f.len(),
        });
    }
    Ok(model.basis.tr_mul(&(f - &model.mean)))
}

pub fn pca_decode(z: &DVector<f64>, model: &PcaModel) -> Result<DVector<f64>, FeatureError> {
    if z.len() != model.output_dim() {
        return Err(FeatureError::Dimension {
            expected: model.output_dim(),
            got: z.len(),
        });
    }
    Ok(&model.basis * z + &model.mean)
}

/// Draws up to `max_samples` pixel vectors uniformly from the first `max_frames` maps.
pub fn sample_pca_rows(
    maps: &[FeatureMap],
    max_samples: usize,
    max_frames: usize,
    seed: u64,
) -> Result<DMatrix<f64>, FeatureError> {
    let pool: Vec<&FeatureMap> = maps.iter().take(max_frames).collect();
    let first = pool.first().ok_or(FeatureError::NoMaps)?;
    let c = first.channels();
    if pool.iter().any(|m| m.channels() != c) {
        return Err(FeatureError::Mismatch("channel counts differ".into()));
    }
    let sizes: Vec<usize> = pool.iter().map(|m| m.height() * m.width()).collect();
    let total: usize = sizes.iter().sum();
    let take = max_samples.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, take).into_vec();
    picks.sort_unstable();

    let mut rows = DMatrix::zeros(take, c);
    let mut buf = vec![0.0; c];
    for (r, &flat) in picks.iter().enumerate() {
        let mut rem = flat;
        let mut frame = 0;
        while rem >= sizes[frame] {
            rem -= sizes[frame];
            frame += 1;
        }
        let m = pool[frame];
        m.pixel_into(rem % m.width(), rem / m.width(), &mut buf);
        for (col, v) in buf.iter().enumerate() {
            rows[(r, col)] = *v;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngExt;
    use rand_distr::{Distribution, Normal};

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pyramid_dims_examples() {
        // integer oracle: ceil(a/b) = (a + b - 1) / b for the exact-scale cases
        let ceil_div = |a: usize, b: usize| a.div_ceil(b);
        assert_eq!(
            pyramid_dims(480, 640, 1.0, 14),
            (ceil_div(480, 14) * 14, ceil_div(640, 14) * 14)
        );
        assert_eq!(pyramid_dims(480, 640, 1.0, 14), (490, 644));
        assert_eq!(pyramid_dims(14, 14, 1.0, 14), (14, 14));
        // 0.75 scale: 360 and 480 pixels before alignment
        assert_eq!(
            pyramid_dims(480, 640, 0.75, 14),
            (ceil_div(360, 14) * 14, ceil_div(480, 14) * 14)
        );
        assert_eq!(pyramid_dims(480, 640, 0.75, 14), (364, 490));
        assert_eq!(pyramid_dims(140, 140, 0.1, 14), (14, 14));
        assert_eq!(pyramid_dims(480, 640, 2.0, 14), (966, 1288));
    }

    #[test]
    fn pyramid_config_defaults() {
        let cfg = PyramidConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.blend_weights, cfg.scales);
        assert!(PyramidConfig {
            scales: vec![],
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(PyramidConfig {
            blend_weights: vec![1.0],
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn blend_single_map_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 3, 6, 8);
        let out = blend_pyramid(std::slice::from_ref(&m), &[0.7], (6, 8)).unwrap();
        for (a, b) in out.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn blend_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_map(&mut rng, 2, 5, 5);
        let out = blend_pyramid(&[m.clone(), m.clone()], &[1.0, 3.0], (5, 5)).unwrap();
        for (a, b) in out.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn blend_constant_maps() {
        let a = FeatureMap::from_fn(2, 3, 4, |_, _, _| 1.0);
        let b = FeatureMap::from_fn(2, 7, 9, |_, _, _| 3.0);
        let out = blend_pyramid(&[a, b], &[2.0, 1.0], (10, 12)).unwrap();
        for v in out.data() {
            assert!((v - 5.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn blend_rejects_bad_input() {
        assert_eq!(blend_pyramid(&[], &[], (2, 2)), Err(FeatureError::NoMaps));
        let a = FeatureMap::zeros(2, 2, 2);
        let b = FeatureMap::zeros(3, 2, 2);
        assert!(blend_pyramid(&[a.clone(), b], &[1.0, 1.0], (2, 2)).is_err());
        assert!(blend_pyramid(std::slice::from_ref(&a), &[1.0, 1.0], (2, 2)).is_err());
        assert!(blend_pyramid(&[a], &[0.0], (2, 2)).is_err());
    }

    #[test]
    fn blend_is_bounded_by_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<FeatureMap> = [(4, 5), (8, 10), (3, 3)]
            .iter()
            .map(|&(h, w)| random_map(&mut rng, 2, h, w))
            .collect();
        let out = blend_pyramid(&maps, &[2.0, 1.5, 0.75], (16, 20)).unwrap();
        for c in 0..2 {
            let lo = maps
                .iter()
                .flat_map(|m| {
                    m.data()[c * m.height() * m.width()..(c + 1) * m.height() * m.width()].iter()
                })
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let hi = maps
                .iter()
                .flat_map(|m| {
                    m.data()[c * m.height() * m.width()..(c + 1) * m.height() * m.width()].iter()
                })
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            for y in 0..16 {
                for x in 0..20 {
                    let v = out.get(c, y, x);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sample_at_node_returns_node_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(&mut rng, 4, 8, 10);
        let s = bilinear_sample(&m, &Vector2::new(3.0, 5.0)).unwrap();
        assert_eq!(s.value, m.pixel(3, 5));
        // last row and column are valid nodes too
        let s = bilinear_sample(&m, &Vector2::new(9.0, 7.0)).unwrap();
        assert_eq!(s.value, m.pixel(9, 7));
    }

    #[test]
    fn sample_constant_map() {
        let m = FeatureMap::from_fn(3, 4, 4, |_, _, _| 0.25);
        let s = bilinear_sample(&m, &Vector2::new(1.5, 2.5)).unwrap();
        assert!(s.value.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(s.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn sample_out_of_bounds() {
        let m = FeatureMap::zeros(1, 4, 5);
        for u in [
            Vector2::new(-0.01, 1.0),
            Vector2::new(4.01, 1.0),
            Vector2::new(1.0, 3.5),
            Vector2::new(f64::NAN, 1.0),
        ] {
            assert!(bilinear_sample(&m, &u).is_none());
        }
    }

    #[test]
    fn sample_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_map(&mut rng, 5, 12, 16);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 100 {
            let u = Vector2::new(rng.random_range(0.01..14.99), rng.random_range(0.01..10.99));
            // central differences straddling a cell edge see a kink; skip those
            let near = |t: f64| (t - t.round()).abs() < 2.0 * h;
            if near(u.x) || near(u.y) {
                continue;
            }
            let s = bilinear_sample(&m, &u).unwrap();
            for (axis, e) in [Vector2::new(h, 0.0), Vector2::new(0.0, h)]
                .iter()
                .enumerate()
            {
                let p = bilinear_sample(&m, &(u + e)).unwrap().value;
                let q = bilinear_sample(&m, &(u - e)).unwrap().value;
                let fd = (p - q) / (2.0 * h);
                for c in 0..5 {
                    assert!((fd[c] - s.gradient[(c, axis)]).abs() < 1e-5);
                }
            }
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn bilinear_weights_partition_unity(x in 0.0f64..9.0, y in 0.0f64..6.0) {
            let cell = BilinearCell::locate(&Vector2::new(x, y), 10, 7);
            let w = cell.weights();
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn bilinear_is_continuous(x in 0.0f64..8.9, y in 0.0f64..5.9, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, 3, 7, 10);
            let a = bilinear_sample(&m, &Vector2::new(x, y)).unwrap().value;
            let b = bilinear_sample(&m, &Vector2::new(x + 1e-9, y + 1e-9)).unwrap().value;
            prop_assert!((a - b).amax() <= 1e-6);
        }
    }

    fn random_subspace_samples(
        rng: &mut ChaCha8Rng,
        n: usize,
        c: usize,
        k: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let raw = DMatrix::from_fn(c, k, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        let mean = DVector::from_fn(c, |_, _| rng.random_range(-2.0..2.0));
        let coeffs = DMatrix::from_fn(n, k, |_, _| rng.random_range(-3.0..3.0));
        let mut samples = coeffs * q.transpose();
        for mut row in samples.row_iter_mut() {
            row += mean.transpose();
        }
        (samples, q, mean)
    }

    #[test]
    fn pca_exact_subspace_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (samples, _, _) = random_subspace_samples(&mut rng, 200, 12, 4);
        let model = pca_fit(&samples, 4).unwrap();
        for row in samples.row_iter() {
            let f = row.transpose();
            let back = pca_decode(&pca_encode(&f, &model).unwrap(), &model).unwrap();
            assert!((back - f).norm() < 1e-9);
        }
    }

    #[test]
    fn pca_full_rank_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = DMatrix::from_fn(50, 6, |_, _| rng.random_range(-1.0..1.0));
        let model = pca_fit(&samples, 6).unwrap();
        for _ in 0..20 {
            let f = DVector::from_fn(6, |_, _| rng.random_range(-5.0..5.0));
            let back = pca_decode(&pca_encode(&f, &model).unwrap(), &model).unwrap();
            assert!((back - f).norm() < 1e-9);
        }
    }

    #[test]
    fn pca_principal_direction_of_elongated_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let along = Normal::new(0.0, 3.0).unwrap();
        let across = Normal::new(0.0, 0.05).unwrap();
        let dir = nalgebra::Vector2::new(1.0, 1.0) / 2f64.sqrt();
        let perp = nalgebra::Vector2::new(-dir.y, dir.x);
        let samples = DMatrix::from_fn(2000, 2, |_, _| 0.0);
        let mut samples = samples;
        for r in 0..2000 {
            let p = dir * along.sample(&mut rng) + perp * across.sample(&mut rng);
            samples[(r, 0)] = p.x + 4.0;
            samples[(r, 1)] = p.y - 1.0;
        }
        let model = pca_fit(&samples, 1).unwrap();
        let v = model.basis.column(0);
        // sign convention: largest entry positive, so +dir
        assert!((v[0] - dir.x).abs() < 1e-3 && (v[1] - dir.y).abs() < 1e-3);
    }

    #[test]
    fn pca_basis_orthonormal_and_variance_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples =
            DMatrix::from_fn(300, 10, |_, c| rng.random_range(-1.0..1.0) * (c + 1) as f64);
        let model = pca_fit(&samples, 5).unwrap();
        let gram = model.basis.transpose() * &model.basis;
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-6);
        for i in 1..5 {
            assert!(model.explained_variance[i] <= model.explained_variance[i - 1]);
        }
        for col in model.basis.column_iter() {
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn pca_invalid_requests() {
        let samples = DMatrix::from_fn(4, 6, |r, c| (r * c) as f64);
        assert!(pca_fit(&samples, 0).is_err());
        assert!(pca_fit(&samples, 4).is_err());
        let model = pca_fit(&samples, 2).unwrap();
        assert!(pca_encode(&DVector::zeros(5), &model).is_err());
        assert!(pca_decode(&DVector::zeros(3), &model).is_err());
    }

    #[test]
    fn encode_mean_is_zero_and_projection_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples = DMatrix::from_fn(100, 8, |_, _| rng.random_range(-1.0..1.0));
        let model = pca_fit(&samples, 3).unwrap();
        assert!(pca_encode(&model.mean, &model).unwrap().norm() < 1e-12);
        for _ in 0..50 {
            let f = DVector::from_fn(8, |_, _| rng.random_range(-3.0..3.0));
            let back = pca_decode(&pca_encode(&f, &model).unwrap(), &model).unwrap();
            assert!((&back - &f).norm() <= (&f - &model.mean).norm() + 1e-12);
        }
        // points constructed inside the subspace survive the round trip
        for _ in 0..20 {
            let z = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let f = &model.basis * &z + &model.mean;
            let back = pca_decode(&pca_encode(&f, &model).unwrap(), &model).unwrap();
            assert!((back - f).norm() < 1e-9);
        }
    }

    #[test]
    fn pca_row_sampling_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps: Vec<FeatureMap> = (0..10).map(|_| random_map(&mut rng, 3, 4, 5)).collect();
        let a = sample_pca_rows(&maps, 30, 8, 42).unwrap();
        let b = sample_pca_rows(&maps, 30, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (30, 3));
        let all = sample_pca_rows(&maps, 10_000, 8, 1).unwrap();
        assert_eq!(all.nrows(), 8 * 20);
    }
}
