//! Pixel-level and frequency-domain evaluation: PSNR, SSIM, residual power
//! spectra (how much structured error a method leaves behind, and where in
//! frequency it lives), and flat-ROI radial noise power spectra.
//!
//! All spatial frequencies are in cycles per pixel. Aggregations use a fixed
//! reduction order so reports are bit-reproducible.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 10·log10(range²/MSE), capped at 99 dB (the documented value for identical
/// images).
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(test: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    if test.shape() != reference.shape() {
        return Err(Error::dimension(format!(
            "psnr operands have shapes {:?} and {:?}",
            test.shape(),
            reference.shape()
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::contract(format!("data_range must be > 0, got {data_range}")));
    }
    let n = test.len() as f64;
    let mse: f64 = test
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let du = i as f64 - c;
            let dv = j as f64 - c;
            w.push((-(du * du + dv * dv) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn single_image_2d(t: &Tensor) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() < 2 {
        return Err(Error::dimension(format!("expected an image, got shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h * w != t.len() {
        return Err(Error::dimension(format!(
            "expected a single image, got shape {shape:?} with extra leading entries"
        )));
    }
    Ok((h, w))
}

/// Mean local SSIM and its two factors (luminance, contrast-structure),
/// computed over every fully-interior 11×11 Gaussian window.
pub fn ssim_components(test: &Tensor, reference: &Tensor, data_range: f64) -> Result<(f64, f64, f64)> {
    if test.shape() != reference.shape() {
        return Err(Error::dimension(format!(
            "ssim operands have shapes {:?} and {:?}",
            test.shape(),
            reference.shape()
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::contract(format!("data_range must be > 0, got {data_range}")));
    }
    let (h, w) = single_image_2d(test)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let kernel = ssim_kernel();
    let c1 = (SSIM_K1 * data_range) * (SSIM_K1 * data_range);
    let c2 = (SSIM_K2 * data_range) * (SSIM_K2 * data_range);
    let x = test.data();
    let y = reference.data();
    let mut ssim_sum = 0.0;
    let mut lum_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - SSIM_WINDOW) {
        for left in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                let row = (top + i) * w + left;
                let krow = i * SSIM_WINDOW;
                for j in 0..SSIM_WINDOW {
                    let k = kernel[krow + j];
                    let xv = x[row + j];
                    let yv = y[row + j];
                    mx += k * xv;
                    my += k * yv;
                    mxx += k * xv * xv;
                    myy += k * yv * yv;
                    mxy += k * xv * yv;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cxy = mxy - mx * my;
            let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let cs = (2.0 * cxy + c2) / (vx + vy + c2);
            ssim_sum += lum * cs;
            lum_sum += lum;
            cs_sum += cs;
            count += 1;
        }
    }
    let n = count as f64;
    Ok((ssim_sum / n, lum_sum / n, cs_sum / n))
}

pub fn ssim(test: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    ssim_components(test, reference, data_range).map(|(s, _, _)| s)
}

/// A radially averaged power spectrum. Bins are centered at k/size cycles per
/// pixel; DC is excluded and reported by the producing operation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumProfile {
    pub freq_bins: Vec<f64>,
    pub power: Vec<f64>,
    pub sample_count: usize,
}

impl SpectrumProfile {
    pub fn validate(&self) -> Result<()> {
        if self.freq_bins.len() != self.power.len() {
            return Err(Error::contract("profile bins and power differ in length"));
        }
        for w in self.freq_bins.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::contract("frequency bins must be strictly increasing"));
            }
        }
        for &p in &self.power {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::contract(format!("power must be finite and >= 0, got {p}")));
            }
        }
        Ok(())
    }

    /// Mean power over bins with lo ≤ f ≤ hi.
    pub fn band_mean(&self, lo: f64, hi: f64) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (f, p) in self.freq_bins.iter().zip(&self.power) {
            if *f >= lo && *f <= hi {
                sum += p;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// CSV with the documented schema: `freq,power`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq,power\n");
        for (f, p) in self.freq_bins.iter().zip(&self.power) {
            out.push_str(&format!("{f},{p}\n"));
        }
        out
    }
}

/// In-place 2D forward DFT (rows then columns).
fn fft2d(data: &mut [Complex<f64>], h: usize, w: usize, planner: &mut FftPlanner<f64>) {
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
}

/// |DFT|² of a real 2D field.
fn power_spectrum_2d(field: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = field.iter().map(|v| Complex::new(*v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2d(&mut buf, h, w, &mut planner);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Signed frequency (cycles/pixel) of DFT index k for size n.
fn signed_freq(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n = n as isize;
    let s = if k <= n / 2 { k } else { k - n };
    s as f64 / n as f64
}

/// Radially bins a 2D power field: bin width 1/size, nearest-bin assignment,
/// mean power per bin. The DC cell is excluded and returned separately.
fn radial_profile(power: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, f64) {
    debug_assert_eq!(h, w, "radial binning expects square fields");
    let n = h;
    let max_bin = ((0.5f64 * (2.0f64).sqrt()) * n as f64).round() as usize;
    let mut sums = vec![0.0; max_bin + 1];
    let mut counts = vec![0usize; max_bin + 1];
    let mut dc = 0.0;
    for i in 0..h {
        let fy = signed_freq(i, h);
        for j in 0..w {
            if i == 0 && j == 0 {
                dc = power[0];
                continue;
            }
            let fx = signed_freq(j, w);
            let r = (fx * fx + fy * fy).sqrt();
            let bin = (r * n as f64).round() as usize;
            let bin = bin.min(max_bin);
            sums[bin] += power[i * w + j];
            counts[bin] += 1;
        }
    }
    let mut freqs = Vec::new();
    let mut means = Vec::new();
    for b in 0..=max_bin {
        if counts[b] > 0 {
            freqs.push(b as f64 / n as f64);
            means.push(sums[b] / counts[b] as f64);
        }
    }
    (freqs, means, dc)
}

fn check_image_set(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dimension(format!("{what} must be [N,1,H,W], got {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::contract(format!("{what} is empty")));
    }
    Ok((s[0], s[2], s[3]))
}

/// Residual power spectrum of a method against its reference.
#[derive(Debug, Clone)]
pub struct RpsOutput {
    /// Mean |DFT(residual − mean)|² over the set, unshifted layout [H, W].
    pub spectrum: Tensor,
    pub profile: SpectrumProfile,
    /// Residual-mean (DC) power, kept out of the profile.
    pub dc_power: f64,
}

/// Mean-subtracted per-image residual spectra, ensemble-averaged.
pub fn rps(test: &Tensor, reference: &Tensor) -> Result<RpsOutput> {
    if test.shape() != reference.shape() {
        return Err(Error::dimension(format!(
            "rps operands have shapes {:?} and {:?}",
            test.shape(),
            reference.shape()
        )));
    }
    let (n, h, w) = check_image_set(test, "rps test set")?;
    if h != w {
        return Err(Error::contract(format!("rps expects square images, got {h}x{w}")));
    }
    let stride = h * w;
    let spectra: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = &test.data()[i * stride..(i + 1) * stride];
            let r = &reference.data()[i * stride..(i + 1) * stride];
            let mut res: Vec<f64> = t.iter().zip(r).map(|(a, b)| a - b).collect();
            let mean = res.iter().sum::<f64>() / stride as f64;
            for v in &mut res {
                *v -= mean;
            }
            power_spectrum_2d(&res, h, w)
        })
        .collect();
    let mut acc = vec![0.0; stride];
    for s in &spectra {
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    let (freqs, means, dc) = radial_profile(&acc, h, w);
    let profile = SpectrumProfile { freq_bins: freqs, power: means, sample_count: n };
    profile.validate()?;
    Ok(RpsOutput { spectrum: Tensor::new(acc, &[h, w])?, profile, dc_power: dc })
}

/// A square region-of-interest position (top-left corner).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub top: usize,
    pub left: usize,
}

/// Standard ROI edge for noise-spectrum estimation.
pub const NPS_ROI_SIZE: usize = 64;

/// Removes the least-squares plane from a square patch (centered coordinates
/// make the fit orthogonal and closed-form); returns the residual and its
/// standard deviation.
fn detrend_plane(patch: &[f64], n: usize) -> (Vec<f64>, f64) {
    let c = (n as f64 - 1.0) / 2.0;
    let mut mean = 0.0;
    let mut bu = 0.0;
    let mut bv = 0.0;
    let mut suu = 0.0;
    for (idx, &v) in patch.iter().enumerate() {
        let u = (idx / n) as f64 - c;
        let w = (idx % n) as f64 - c;
        mean += v;
        bu += u * v;
        bv += w * v;
        suu += u * u;
    }
    mean /= (n * n) as f64;
    // Σ over the grid of u² equals Σ of v² by symmetry.
    let b = bu / suu;
    let d = bv / suu;
    let mut out = Vec::with_capacity(n * n);
    let mut sq = 0.0;
    for (idx, &v) in patch.iter().enumerate() {
        let u = (idx / n) as f64 - c;
        let w = (idx % n) as f64 - c;
        let r = v - (mean + b * u + d * w);
        sq += r * r;
        out.push(r);
    }
    (out, (sq / (n * n) as f64).sqrt())
}

/// Noise power spectrum estimate and diagnostics.
#[derive(Debug, Clone)]
pub struct NpsOutput {
    /// Radial profile normalized to unit area (Σ power·Δf = 1) unless the
    /// input is noise-free, in which case it is all zeros.
    pub profile: SpectrumProfile,
    /// Mean detrended-ROI variance (Parseval: Σ_nonDC |F|²/(HW)² per ROI).
    pub total_power: f64,
    pub roi_count: usize,
    /// ROIs excluded by the flatness guard.
    pub rejected_count: usize,
}

/// Ensemble NPS over flat ROIs: per-ROI plane detrend, |DFT|², average,
/// radial binning, unit-area normalization. ROIs whose plane-fit residual
/// std exceeds 3× the median estimate are rejected as non-flat.
pub fn nps(images: &Tensor, rois: &[Roi], roi_size: usize) -> Result<NpsOutput> {
    let (n, h, w) = check_image_set(images, "nps image set")?;
    if roi_size == 0 {
        return Err(Error::contract("roi_size must be positive"));
    }
    if rois.is_empty() {
        return Err(Error::contract("at least one ROI is required"));
    }
    for r in rois {
        if r.top + roi_size > h || r.left + roi_size > w {
            return Err(Error::contract(format!(
                "ROI at ({}, {}) with size {roi_size} exceeds {h}x{w} image bounds",
                r.top, r.left
            )));
        }
    }
    let stride = h * w;
    // Extract and detrend every (image, ROI) patch.
    let detrended: Vec<(Vec<f64>, f64)> = (0..n * rois.len())
        .into_par_iter()
        .map(|idx| {
            let img = idx / rois.len();
            let roi = &rois[idx % rois.len()];
            let data = &images.data()[img * stride..(img + 1) * stride];
            let mut patch = Vec::with_capacity(roi_size * roi_size);
            for i in 0..roi_size {
                let row = (roi.top + i) * w + roi.left;
                patch.extend_from_slice(&data[row..row + roi_size]);
            }
            detrend_plane(&patch, roi_size)
        })
        .collect();

    // Flatness guard: anything rougher than 3× the median roughness is
    // assumed to contain structure, not noise.
    let mut stds: Vec<f64> = detrended.iter().map(|(_, s)| *s).collect();
    stds.sort_by(|a, b| a.partial_cmp(b).expect("stds are finite"));
    let median = stds[stds.len() / 2];
    let threshold = 3.0 * median;
    let kept: Vec<&(Vec<f64>, f64)> =
        detrended.iter().filter(|(_, s)| *s <= threshold).collect();
    let rejected_count = detrended.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::contract("flatness guard rejected every ROI"));
    }

    let spectra: Vec<Vec<f64>> = kept
        .par_iter()
        .map(|(patch, _)| power_spectrum_2d(patch, roi_size, roi_size))
        .collect();
    let cells = roi_size * roi_size;
    let mut acc = vec![0.0; cells];
    for s in &spectra {
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= kept.len() as f64;
    }
    let norm = (cells * cells) as f64;
    let total_power = (acc.iter().sum::<f64>() - acc[0]) / norm;

    let (freqs, mut means, _dc) = radial_profile(&acc, roi_size, roi_size);
    let df = 1.0 / roi_size as f64;
    let area: f64 = means.iter().sum::<f64>() * df;
    if area > 0.0 {
        for p in &mut means {
            *p /= area;
        }
    }
    let profile = SpectrumProfile { freq_bins: freqs, power: means, sample_count: kept.len() };
    profile.validate()?;
    Ok(NpsOutput { profile, total_power, roi_count: kept.len(), rejected_count })
}

/// Per-slice PSNR/SSIM with population-statistics aggregation.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    /// (psnr, ssim) per slice, in set order.
    pub per_slice: Vec<(f64, f64)>,
}

impl MetricsReport {
    /// CSV with the documented schema: `slice_index,psnr,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice_index,psnr,ssim\n");
        for (i, (p, s)) in self.per_slice.iter().enumerate() {
            out.push_str(&format!("{i},{p},{s}\n"));
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn report(test: &Tensor, reference: &Tensor, data_range: f64) -> Result<MetricsReport> {
    if test.shape() != reference.shape() {
        return Err(Error::dimension(format!(
            "report operands have shapes {:?} and {:?}",
            test.shape(),
            reference.shape()
        )));
    }
    let (n, h, w) = check_image_set(test, "report test set")?;
    let stride = h * w;
    let per_slice: Result<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = Tensor::new(
                test.data()[i * stride..(i + 1) * stride].to_vec(),
                &[h, w],
            )?;
            let r = Tensor::new(
                reference.data()[i * stride..(i + 1) * stride].to_vec(),
                &[h, w],
            )?;
            Ok((psnr(&t, &r, data_range)?, ssim(&t, &r, data_range)?))
        })
        .collect();
    let per_slice = per_slice?;
    let (psnr_mean, psnr_std) = mean_std(&per_slice.iter().map(|(p, _)| *p).collect::<Vec<_>>());
    let (ssim_mean, ssim_std) = mean_std(&per_slice.iter().map(|(_, s)| *s).collect::<Vec<_>>());
    Ok(MetricsReport { psnr_mean, psnr_std, ssim_mean, ssim_std, per_slice })
}
