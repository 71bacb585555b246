//! Fourier-domain split of a frame into high- and low-frequency regions.
//!
//! The frame's luma is transformed with a 2D DFT, centered, attenuated by a
//! gaussian high-pass transfer function, inverted, and the magnitude of the
//! result is cut with the triangle method. Pixels above the cut form the
//! high-frequency mask; everything else is low frequency.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::image::{luminance, GrayImage, Mask};
use crate::model::RgbdFrame;

/// Below this peak magnitude the high-pass response is treated as empty.
const MIN_HIGHPASS_ENERGY: f64 = 1e-9;

/// Complex `height x width` array indexed by `(u, v)`, `u` horizontal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    width: usize,
    height: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_vec(width: usize, height: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("spectrum data does not match its dimensions"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Complex64::new(0.0, 0.0); width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: Complex64) {
        self.data[v * self.width + u] = value;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

struct Plans {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

fn plans(width: usize, height: usize, inverse: bool) -> Plans {
    let mut planner = FftPlanner::new();
    if inverse {
        Plans {
            rows: planner.plan_fft_inverse(width),
            cols: planner.plan_fft_inverse(height),
        }
    } else {
        Plans {
            rows: planner.plan_fft_forward(width),
            cols: planner.plan_fft_forward(height),
        }
    }
}

/// Unnormalized separable 2D transform, in place over row-major data.
fn transform_2d(data: &mut [Complex64], width: usize, height: usize, inverse: bool) {
    let p = plans(width, height, inverse);
    for row in data.chunks_exact_mut(width) {
        p.rows.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for u in 0..width {
        for v in 0..height {
            column[v] = data[v * width + u];
        }
        p.cols.process(&mut column);
        for v in 0..height {
            data[v * width + u] = column[v];
        }
    }
}

/// F(u,v) = Σₓ Σ_y I(x,y)·e^{−j2π(ux/W + vy/H)}. Mixed-radix, so any size works.
pub fn dft2(image: &GrayImage) -> Spectrum {
    let (width, height) = image.dims();
    let mut data: Vec<Complex64> = image
        .as_slice()
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .collect();
    if !data.is_empty() {
        transform_2d(&mut data, width, height, false);
    }
    Spectrum {
        width,
        height,
        data,
    }
}

/// Inverse transform including the 1/(HW) factor, complex result.
pub fn idft2_complex(s: &Spectrum) -> Vec<Complex64> {
    let mut data = s.data.clone();
    if data.is_empty() {
        return data;
    }
    transform_2d(&mut data, s.width, s.height, true);
    let norm = 1.0 / (s.width * s.height) as f64;
    for z in &mut data {
        *z *= norm;
    }
    data
}

/// Real part of the inverse transform.
pub fn idft2(s: &Spectrum) -> GrayImage {
    let data = idft2_complex(s).into_iter().map(|z| z.re).collect();
    GrayImage::from_vec(s.width, s.height, data).expect("dimensions preserved")
}

fn shift(s: &Spectrum, du: usize, dv: usize) -> Spectrum {
    let (w, h) = (s.width, s.height);
    let mut out = Spectrum::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            out.set((u + du) % w, (v + dv) % h, s.get(u, v));
        }
    }
    out
}

/// Moves the DC bin to (⌊W/2⌋, ⌊H/2⌋) by a half-period circular shift.
pub fn center_spectrum(s: &Spectrum) -> Spectrum {
    shift(s, s.width / 2, s.height / 2)
}

/// Inverse of [`center_spectrum`], also for odd dimensions.
pub fn uncenter_spectrum(s: &Spectrum) -> Spectrum {
    let (w, h) = (s.width, s.height);
    shift(s, w - w / 2, h - h / 2)
}

/// Per-bin |F| = √(Re² + Im²).
pub fn magnitude(s: &Spectrum) -> GrayImage {
    let data = s.data.iter().map(|z| z.re.hypot(z.im)).collect();
    GrayImage::from_vec(s.width, s.height, data).expect("dimensions preserved")
}

/// Gaussian high-pass transfer value at distance `d` from the center.
#[inline]
pub fn highpass_transfer(d: f64, cutoff_d0: f64) -> f64 {
    1.0 - (-(d * d) / (2.0 * cutoff_d0 * cutoff_d0)).exp()
}

/// Multiplies a centered spectrum by H(u,v) = 1 − exp(−D²/(2D₀²)).
pub fn gaussian_highpass(s: &Spectrum, cutoff_d0: f64) -> Result<Spectrum> {
    if !(cutoff_d0 > 0.0) {
        return Err(Error::invalid(format!("cutoff must be positive, got {cutoff_d0}")));
    }
    let cu = (s.width / 2) as f64;
    let cv = (s.height / 2) as f64;
    let mut out = s.clone();
    for v in 0..s.height {
        for u in 0..s.width {
            let d = (u as f64 - cu).hypot(v as f64 - cv);
            let i = v * s.width + u;
            out.data[i] = s.data[i] * highpass_transfer(d, cutoff_d0);
        }
    }
    Ok(out)
}

/// Spatial-domain high-frequency image Ĩ_h of a grayscale image.
pub fn highpass_image(gray: &GrayImage, cutoff_d0: f64) -> Result<GrayImage> {
    let centered = center_spectrum(&dft2(gray));
    let filtered = gaussian_highpass(&centered, cutoff_d0)?;
    Ok(idft2(&uncenter_spectrum(&filtered)))
}

/// Triangle-method threshold over a histogram.
///
/// The baseline joins the peak bin (counts normalized to a peak of 1) to the
/// farthest nonzero bin on the longer side of the peak. The returned bin is
/// the one between them with maximal perpendicular distance to that line.
/// When the peak is the only nonzero bin the baseline runs to its neighbour.
pub fn triangle_threshold(histogram: &[u64]) -> Result<usize> {
    if histogram.len() < 2 {
        return Err(Error::invalid("triangle threshold needs at least two bins"));
    }
    let peak_count = *histogram.iter().max().expect("non-empty");
    if peak_count == 0 {
        return Err(Error::EmptyHistogram);
    }
    let peak = histogram.iter().position(|&c| c == peak_count).expect("max exists");
    let first = histogram.iter().position(|&c| c > 0).expect("nonzero exists");
    let last = histogram.iter().rposition(|&c| c > 0).expect("nonzero exists");

    let left_span = peak - first;
    let right_span = last - peak;
    let end = if left_span == 0 && right_span == 0 {
        if peak + 1 < histogram.len() {
            peak + 1
        } else {
            peak - 1
        }
    } else if right_span >= left_span {
        last
    } else {
        first
    };

    let y = |i: usize| histogram[i] as f64 / peak_count as f64;
    let (x0, y0) = (peak as f64, 1.0);
    let (x1, y1) = (end as f64, y(end));
    // unnormalized distance; only the argmax matters
    let dist = |i: usize| ((y1 - y0) * i as f64 - (x1 - x0) * y(i) + x1 * y0 - y1 * x0).abs();

    let range: Box<dyn Iterator<Item = usize>> = if end > peak {
        Box::new(peak + 1..=end)
    } else {
        Box::new((end..peak).rev())
    };
    let mut best = end;
    let mut best_dist = -1.0;
    for i in range {
        let d = dist(i);
        if d > best_dist {
            best_dist = d;
            best = i;
        }
    }
    Ok(best)
}

/// Parameters of the frequency split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyConfig {
    /// Gaussian high-pass cutoff in frequency bins; `None` means min(W,H)/16.
    pub cutoff_d0: Option<f64>,
    /// Lattice spacing in high-frequency regions, pixels.
    pub high_spacing: usize,
    /// Lattice spacing in low-frequency regions, pixels.
    pub low_spacing: usize,
    pub histogram_bins: usize,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            cutoff_d0: None,
            high_spacing: 2,
            low_spacing: 8,
            histogram_bins: 256,
        }
    }
}

impl FrequencyConfig {
    pub fn cutoff_for(&self, width: usize, height: usize) -> f64 {
        self.cutoff_d0
            .unwrap_or_else(|| width.min(height) as f64 / 16.0)
    }
}

/// High/low region masks of one frame. Disjoint and jointly covering.
#[derive(Debug, Clone)]
pub struct FrequencyMasks {
    pub high: Mask,
    pub low: Mask,
    /// Cut applied to |Ĩ_h|; infinite when the frame has no high-pass energy.
    pub threshold: f64,
    pub high_spacing_m: usize,
    pub low_spacing_n: usize,
}

impl FrequencyMasks {
    /// Masks that put every pixel in one class, for the equidistant modes.
    pub fn uniform(width: usize, height: usize, high: bool, m: usize, n: usize) -> Self {
        Self {
            high: Mask::filled(width, height, high),
            low: Mask::filled(width, height, !high),
            threshold: if high { 0.0 } else { f64::INFINITY },
            high_spacing_m: m,
            low_spacing_n: n,
        }
    }
}

fn check_spacing(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("sampling spacings must be at least 1 pixel"));
    }
    if m >= n {
        return Err(Error::invalid(format!(
            "high-frequency spacing {m} must be smaller than low-frequency spacing {n}"
        )));
    }
    Ok(())
}

/// Histogram of non-negative values over [0, max] with `bins` uniform bins.
pub fn value_histogram(values: &[f64], max: f64, bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    if max <= 0.0 {
        hist[0] = values.len() as u64;
        return hist;
    }
    for &v in values {
        let b = ((v / max) * bins as f64) as usize;
        hist[b.min(bins - 1)] += 1;
    }
    hist
}

pub fn frequency_masks(frame: &RgbdFrame, cfg: &FrequencyConfig) -> Result<FrequencyMasks> {
    check_spacing(cfg.high_spacing, cfg.low_spacing)?;
    if cfg.histogram_bins < 2 {
        return Err(Error::invalid("histogram needs at least two bins"));
    }
    let gray = luminance(&frame.color);
    let (w, h) = gray.dims();
    let filtered = highpass_image(&gray, cfg.cutoff_for(w, h))?;
    let energy: Vec<f64> = filtered.as_slice().iter().map(|v| v.abs()).collect();
    let max = energy.iter().copied().fold(0.0, f64::max);

    let threshold = if max < MIN_HIGHPASS_ENERGY {
        f64::INFINITY
    } else {
        let hist = value_histogram(&energy, max, cfg.histogram_bins);
        let bin = triangle_threshold(&hist)?;
        (bin + 1) as f64 * max / cfg.histogram_bins as f64
    };
    let high = GrayImage::from_vec(w, h, energy)?.map(|&e| e >= threshold);
    let low = high.not();
    Ok(FrequencyMasks {
        high,
        low,
        threshold,
        high_spacing_m: cfg.high_spacing,
        low_spacing_n: cfg.low_spacing,
    })
}

/// Lattice pixels anchored at (0,0): spacing m inside the high mask and
/// spacing n inside the low mask.
pub fn sample_grid(masks: &FrequencyMasks) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    fn lattice(mask: &Mask, step: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in (0..mask.height()).step_by(step) {
            for x in (0..mask.width()).step_by(step) {
                if *mask.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }
    (
        lattice(&masks.high, masks.high_spacing_m.max(1)),
        lattice(&masks.low, masks.low_spacing_n.max(1)),
    )
}
