//! Causal streaming front end: band-pass filter, common-average reference,
//! sliding windows and trace-normalized covariances.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;

/// Raw window energy (trace of `X^T X`) below which a window is rejected.
pub const MIN_WINDOW_ENERGY: f64 = 1e-20;

/// Prototype order of the Butterworth band-pass (the digital filter has
/// twice as many poles).
pub const BUTTERWORTH_ORDER: usize = 4;

/// One multichannel sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EegFrame {
    pub samples: Vec<f64>,
    /// Sample index at the stream rate.
    pub index: u64,
}

impl EegFrame {
    pub fn new(index: u64, samples: Vec<f64>) -> Self {
        Self { samples, index }
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub fs: f64,
    pub channels: usize,
    /// Pass band `(low, high)` in Hz.
    pub band: (f64, f64),
    /// Window length in seconds.
    pub window_len: f64,
    /// Hop between windows in seconds.
    pub hop: f64,
    /// Diagonal loading applied to each covariance.
    pub loading: f64,
}

impl StreamConfig {
    /// 512 Hz, 8-30 Hz, 1 s windows every 62.5 ms.
    pub fn new(channels: usize) -> Self {
        Self {
            fs: 512.0,
            channels,
            band: (8.0, 30.0),
            window_len: 1.0,
            hop: 0.0625,
            loading: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Argument(format!("sampling rate must be positive, got {}", self.fs)));
        }
        if self.channels < 2 {
            return Err(Error::Argument(format!(
                "common-average referencing needs at least 2 channels, got {}",
                self.channels
            )));
        }
        let (low, high) = self.band;
        if !(low > 0.0 && low < high && high < self.fs / 2.0) {
            return Err(Error::Argument(format!(
                "band ({low}, {high}) Hz is infeasible at fs = {} Hz",
                self.fs
            )));
        }
        for (name, secs) in [("window_len", self.window_len), ("hop", self.hop)] {
            let frames = secs * self.fs;
            if !(frames >= 1.0) || (frames - frames.round()).abs() > 1e-9 {
                return Err(Error::Argument(format!(
                    "{name} = {secs} s is not a positive whole number of samples at {} Hz",
                    self.fs
                )));
            }
        }
        if !(self.loading >= 0.0 && self.loading < 1.0) {
            return Err(Error::Argument(format!("loading must lie in [0, 1), got {}", self.loading)));
        }
        Ok(())
    }

    pub fn window_frames(&self) -> usize {
        (self.window_len * self.fs).round() as usize
    }

    pub fn hop_frames(&self) -> usize {
        (self.hop * self.fs).round() as usize
    }

    /// First frame of the `k`-th window.
    pub fn window_start(&self, k: usize) -> usize {
        k * self.hop_frames()
    }
}

/// Second-order section `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub fn response(&self, omega: f64) -> Complex<f64> {
        let z1 = Complex::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z1 * self.a[1] + z2 * self.a[2];
        num / den
    }
}

/// Cascade of biquads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
    pub fs: f64,
}

impl FilterCoefficients {
    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64) -> Complex<f64> {
        let omega = 2.0 * PI * freq / self.fs;
        self.sections
            .iter()
            .fold(Complex::new(1.0, 0.0), |acc, s| acc * s.response(omega))
    }

    pub fn gain(&self, freq: f64) -> f64 {
        self.response(freq).norm()
    }
}

/// Butterworth band-pass by prewarped bilinear transform of the analog
/// low-pass prototype.
///
/// Every section carries one zero at DC and one at Nyquist and is scaled to
/// unit gain at the digital center frequency.
pub fn design_bandpass(cfg: &StreamConfig) -> Result<FilterCoefficients> {
    let (low, high) = cfg.band;
    let fs = cfg.fs;
    if !(fs > 0.0 && low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::Argument(format!(
            "band ({low}, {high}) Hz is infeasible at fs = {fs} Hz"
        )));
    }
    let k = 2.0 * fs;
    let w1 = k * (PI * low / fs).tan();
    let w2 = k * (PI * high / fs).tan();
    let bw = w2 - w1;
    let w0_sq = w1 * w2;
    let n = BUTTERWORTH_ORDER;

    let mut sections = Vec::with_capacity(n);
    let center = 2.0 * (w0_sq.sqrt() / k).atan();
    // Prototype poles in the upper half plane; the conjugates contribute the
    // conjugate band-pass poles, so each of these yields two sections.
    for i in 0..n / 2 {
        let theta = PI * (2 * i + n + 1) as f64 / (2 * n) as f64;
        let p = Complex::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let disc = (half * half - w0_sq).sqrt();
        for s in [half + disc, half - disc] {
            let z = (k + s) / (k - s);
            // Either root may land in the lower half plane; its conjugate
            // describes the same section.
            let z = if z.im < 0.0 { z.conj() } else { z };
            let mut section = Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * z.re, z.norm_sqr()],
            };
            let g = section.response(center).norm();
            for c in section.b.iter_mut() {
                *c /= g;
            }
            sections.push(section);
        }
    }
    Ok(FilterCoefficients { sections, fs })
}

/// Per-channel transposed direct-form II state of a biquad cascade.
#[derive(Clone, Debug)]
pub struct FilterState {
    coeffs: FilterCoefficients,
    channels: usize,
    /// `state[ch * sections + s]` holds the two delay registers.
    state: Vec<[f64; 2]>,
}

impl FilterState {
    pub fn new(coeffs: FilterCoefficients, channels: usize) -> Self {
        let n = coeffs.sections.len() * channels;
        Self {
            coeffs,
            channels,
            state: vec![[0.0; 2]; n],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = [0.0; 2]);
    }

    /// Filters one frame in place.
    pub fn step_in_place(&mut self, samples: &mut [f64]) -> Result<()> {
        if samples.len() != self.channels {
            return Err(Error::shape(
                format!("{} channels", self.channels),
                format!("{} channels", samples.len()),
            ));
        }
        let n_sec = self.coeffs.sections.len();
        for (ch, x) in samples.iter_mut().enumerate() {
            let mut v = *x;
            for (sec, st) in self
                .coeffs
                .sections
                .iter()
                .zip(&mut self.state[ch * n_sec..(ch + 1) * n_sec])
            {
                let y = sec.b[0] * v + st[0];
                st[0] = sec.b[1] * v - sec.a[1] * y + st[1];
                st[1] = sec.b[2] * v - sec.a[2] * y;
                v = y;
            }
            *x = v;
        }
        Ok(())
    }
}

/// Advances the filter by one frame.
pub fn filter_step(state: &mut FilterState, frame: &EegFrame) -> Result<EegFrame> {
    let mut samples = frame.samples.clone();
    state.step_in_place(&mut samples)?;
    Ok(EegFrame {
        samples,
        index: frame.index,
    })
}

fn car_in_place(samples: &mut [f64]) {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.iter_mut().for_each(|v| *v -= mean);
}

/// Subtracts the across-channel mean from every channel.
pub fn common_average_reference(frame: &EegFrame) -> Result<EegFrame> {
    if frame.channels() < 2 {
        return Err(Error::shape("at least 2 channels", frame.channels()));
    }
    let mut samples = frame.samples.clone();
    car_in_place(&mut samples);
    Ok(EegFrame {
        samples,
        index: frame.index,
    })
}

/// Trace-normalized, diagonally loaded spatial covariance of a window.
///
/// `x` holds one frame per row (T x C).
pub fn window_covariance(x: &DMatrix<f64>, loading: f64) -> Result<SpdMatrix> {
    let scatter = x.tr_mul(x);
    covariance_from_scatter(scatter, loading)
}

fn covariance_from_scatter(scatter: DMatrix<f64>, loading: f64) -> Result<SpdMatrix> {
    if !(0.0..1.0).contains(&loading) {
        return Err(Error::Argument(format!("loading must lie in [0, 1), got {loading}")));
    }
    let c = scatter.nrows();
    if c == 0 {
        return Err(Error::shape("at least 1 channel", 0));
    }
    let energy = scatter.trace();
    if !energy.is_finite() {
        return Err(Error::NumericDomain("window contains non-finite samples".into()));
    }
    if energy < MIN_WINDOW_ENERGY {
        return Err(Error::DegenerateInput(format!(
            "window energy {energy:.3e} below {MIN_WINDOW_ENERGY:.0e}"
        )));
    }
    let mut sigma = scatter / energy * (1.0 - loading);
    for i in 0..c {
        sigma[(i, i)] += loading / c as f64;
    }
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let tr = sigma.trace();
    SpdMatrix::new(sigma / tr)
}

/// One emitted window.
#[derive(Clone, Debug)]
pub struct CovarianceWindow {
    /// Window ordinal `k`; covers frames `[k * hop, k * hop + len)`.
    pub k: usize,
    /// Index of the last frame in the window.
    pub end_index: u64,
    pub cov: SpdMatrix,
}

/// Ring buffer of preprocessed frames that emits a covariance every hop.
#[derive(Clone, Debug)]
pub struct WindowBuffer {
    len: usize,
    hop: usize,
    channels: usize,
    frames: VecDeque<Vec<f64>>,
    seen: usize,
    /// Upper-triangle scatter of each completed hop-sized block, newest last.
    blocks: VecDeque<Vec<f64>>,
    partial: Vec<f64>,
    partial_len: usize,
}

impl WindowBuffer {
    pub fn new(len: usize, hop: usize, channels: usize) -> Self {
        Self {
            len,
            hop,
            channels,
            frames: VecDeque::with_capacity(len),
            seen: 0,
            blocks: VecDeque::new(),
            partial: vec![0.0; channels * channels],
            partial_len: 0,
        }
    }

    /// Frames pushed so far.
    pub fn frames_seen(&self) -> usize {
        self.seen
    }

    /// Appends a frame; returns the window ordinal when a window completes.
    pub fn push(&mut self, samples: Vec<f64>) -> Result<Option<usize>> {
        if samples.len() != self.channels {
            return Err(Error::shape(self.channels, samples.len()));
        }
        if self.frames.len() == self.len {
            self.frames.pop_front();
        }
        let c = self.channels;
        for i in 0..c {
            let si = samples[i];
            for j in i..c {
                self.partial[i * c + j] += si * samples[j];
            }
        }
        self.partial_len += 1;
        if self.partial_len == self.hop {
            let fresh = vec![0.0; c * c];
            self.blocks.push_back(std::mem::replace(&mut self.partial, fresh));
            self.partial_len = 0;
            if self.blocks.len() > self.len / self.hop {
                self.blocks.pop_front();
            }
        }
        self.frames.push_back(samples);
        self.seen += 1;
        if self.seen >= self.len && (self.seen - self.len) % self.hop == 0 {
            Ok(Some((self.seen - self.len) / self.hop))
        } else {
            Ok(None)
        }
    }

    /// Current contents as a T x C matrix (oldest first). Only meaningful when full.
    pub fn window(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.frames.len(), self.channels, |r, c| self.frames[r][c])
    }

    /// `X^T X` of the current contents.
    pub fn scatter(&self) -> DMatrix<f64> {
        let c = self.channels;
        if self.len % self.hop == 0 && self.partial_len == 0 && self.blocks.len() * self.hop == self.frames.len() {
            let mut acc = DMatrix::<f64>::zeros(c, c);
            for b in &self.blocks {
                for i in 0..c {
                    for j in i..c {
                        acc[(i, j)] += b[i * c + j];
                    }
                }
            }
            for i in 0..c {
                for j in 0..i {
                    acc[(i, j)] = acc[(j, i)];
                }
            }
            return acc;
        }
        let mut acc = DMatrix::<f64>::zeros(c, c);
        for f in &self.frames {
            for i in 0..c {
                let fi = f[i];
                for j in i..c {
                    acc[(i, j)] += fi * f[j];
                }
            }
        }
        for i in 0..c {
            for j in 0..i {
                acc[(i, j)] = acc[(j, i)];
            }
        }
        acc
    }
}

/// Filter, CAR and window a frame stream into covariances.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    cfg: StreamConfig,
    filter: FilterState,
    buffer: WindowBuffer,
}

impl Preprocessor {
    pub fn new(cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let coeffs = design_bandpass(&cfg)?;
        Ok(Self {
            filter: FilterState::new(coeffs, cfg.channels),
            buffer: WindowBuffer::new(cfg.window_frames(), cfg.hop_frames(), cfg.channels),
            cfg,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    /// Pushes one raw frame; returns a covariance whenever a window completes.
    pub fn push(&mut self, frame: &EegFrame) -> Result<Option<CovarianceWindow>> {
        if frame.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!(
                "frame {} contains non-finite samples",
                frame.index
            )));
        }
        let mut samples = frame.samples.clone();
        self.filter.step_in_place(&mut samples)?;
        car_in_place(&mut samples);
        match self.buffer.push(samples)? {
            None => Ok(None),
            Some(k) => Ok(Some(CovarianceWindow {
                k,
                end_index: frame.index,
                cov: covariance_from_scatter(self.buffer.scatter(), self.cfg.loading)?,
            })),
        }
    }

    /// Runs a whole recording (frame-major, `channels` values per frame).
    pub fn process_all(cfg: &StreamConfig, data: &[f32]) -> Result<Vec<CovarianceWindow>> {
        let mut pre = Preprocessor::new(cfg.clone())?;
        if data.len() % cfg.channels != 0 {
            return Err(Error::shape(
                format!("a multiple of {} samples", cfg.channels),
                data.len(),
            ));
        }
        let mut out = Vec::with_capacity(data.len() / cfg.channels / cfg.hop_frames().max(1));
        for (i, chunk) in data.chunks_exact(cfg.channels).enumerate() {
            let frame = EegFrame::new(i as u64, chunk.iter().map(|&v| v as f64).collect());
            if let Some(w) = pre.push(&frame)? {
                out.push(w);
            }
        }
        Ok(out)
    }
}
