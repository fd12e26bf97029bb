//! Butterworth band filters as cascaded second-order sections.
//!
//! Design follows the usual zero-pole-gain route: analog low-pass
//! prototype, band transform, bilinear transform with prewarped corners,
//! then conjugate pairing into biquads.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Bandpass,
    Bandstop,
}

/// One biquad: `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Sos {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }

    /// Roots of the denominator.
    fn poles(&self) -> [Complex64; 2] {
        let (b, c) = (self.a[1], self.a[2]);
        let disc = Complex64::new(b * b - 4.0 * c, 0.0).sqrt();
        [(-b + disc) / 2.0, (-b - disc) / 2.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate_hz: f64,
    pub sections: Vec<Sos>,
}

impl FilterSpec {
    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.magnitude(freq_hz).log10()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .flat_map(|s| s.poles())
            .map(|p| p.norm())
            .fold(0.0, f64::max)
    }
}

/// Analog Butterworth low-pass prototype poles (cutoff 1 rad/s).
fn prototype_poles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

struct Zpk {
    z: Vec<Complex64>,
    p: Vec<Complex64>,
    k: f64,
}

fn band_split(x: Complex64, half_bw: f64, w0: f64) -> [Complex64; 2] {
    let xs = x * half_bw;
    let root = (xs * xs - w0 * w0).sqrt();
    [xs + root, xs - root]
}

fn lowpass_to_bandpass(proto: &Zpk, w0: f64, bw: f64) -> Zpk {
    let degree = proto.p.len() - proto.z.len();
    let mut z: Vec<Complex64> = proto.z.iter().flat_map(|&z| band_split(z, bw / 2.0, w0)).collect();
    let p = proto.p.iter().flat_map(|&p| band_split(p, bw / 2.0, w0)).collect();
    z.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(degree));
    Zpk {
        z,
        p,
        k: proto.k * bw.powi(degree as i32),
    }
}

fn lowpass_to_bandstop(proto: &Zpk, w0: f64, bw: f64) -> Zpk {
    let degree = proto.p.len() - proto.z.len();
    let inv = |x: Complex64| Complex64::new(bw / 2.0, 0.0) / x;
    let mut z: Vec<Complex64> = proto.z.iter().flat_map(|&z| band_split(inv(z), 1.0, w0)).collect();
    let p = proto.p.iter().flat_map(|&p| band_split(inv(p), 1.0, w0)).collect();
    for _ in 0..degree {
        z.push(Complex64::new(0.0, w0));
        z.push(Complex64::new(0.0, -w0));
    }
    let num: Complex64 = proto.z.iter().map(|&z| -z).product();
    let den: Complex64 = proto.p.iter().map(|&p| -p).product();
    Zpk {
        z,
        p,
        k: proto.k * (num / den).re,
    }
}

fn bilinear(analog: &Zpk, fs: f64) -> Zpk {
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let degree = analog.p.len() - analog.z.len();
    let mut z: Vec<Complex64> = analog.z.iter().map(|&z| (fs2 + z) / (fs2 - z)).collect();
    let p = analog.p.iter().map(|&p| (fs2 + p) / (fs2 - p)).collect();
    z.extend(std::iter::repeat(Complex64::new(-1.0, 0.0)).take(degree));
    let num: Complex64 = analog.z.iter().map(|&z| fs2 - z).product();
    let den: Complex64 = analog.p.iter().map(|&p| fs2 - p).product();
    Zpk {
        z,
        p,
        k: analog.k * (num / den).re,
    }
}

/// Groups roots into pairs that give real quadratics: conjugates together,
/// remaining real roots two at a time (sorted).
fn pair_roots(roots: &[Complex64]) -> Result<Vec<[Complex64; 2]>> {
    const TOL: f64 = 1e-9;
    let mut upper: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > TOL).collect();
    let mut lower: Vec<Complex64> = roots.iter().copied().filter(|r| r.im < -TOL).collect();
    let mut real: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= TOL).map(|r| r.re).collect();
    if upper.len() != lower.len() || real.len() % 2 != 0 {
        return Err(Error::FilterDesign("roots do not form conjugate pairs".into()));
    }
    let mut pairs = Vec::with_capacity(roots.len() / 2);
    upper.sort_by(|a, b| a.re.total_cmp(&b.re));
    for u in upper {
        let i = lower
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (**a - u.conj()).norm().total_cmp(&(**b - u.conj()).norm()))
            .map(|(i, _)| i)
            .expect("equal counts");
        let l = lower.swap_remove(i);
        pairs.push([u, l]);
    }
    real.sort_by(f64::total_cmp);
    for c in real.chunks(2) {
        pairs.push([Complex64::new(c[0], 0.0), Complex64::new(c[1], 0.0)]);
    }
    Ok(pairs)
}

fn quadratic(pair: [Complex64; 2]) -> [f64; 3] {
    [1.0, -(pair[0] + pair[1]).re, (pair[0] * pair[1]).re]
}

/// Designs an `order`-pole Butterworth band filter (`order` even; the
/// low-pass prototype has `order / 2` poles).
pub fn design_butterworth(kind: FilterKind, low_hz: f64, high_hz: f64, order: usize, fs: f64) -> Result<FilterSpec> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::FilterDesign(format!("order {order} must be even and positive")));
    }
    if !(fs > 0.0) {
        return Err(Error::FilterDesign(format!("sample rate {fs} must be positive")));
    }
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::FilterDesign(format!(
            "corners must satisfy 0 < {low_hz} < {high_hz} < Nyquist {}",
            fs / 2.0
        )));
    }
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (wl, wh) = (warp(low_hz), warp(high_hz));
    let (w0, bw) = ((wl * wh).sqrt(), wh - wl);
    let proto = Zpk {
        z: Vec::new(),
        p: prototype_poles(order / 2),
        k: 1.0,
    };
    let analog = match kind {
        FilterKind::Bandpass => lowpass_to_bandpass(&proto, w0, bw),
        FilterKind::Bandstop => lowpass_to_bandstop(&proto, w0, bw),
    };
    let digital = bilinear(&analog, fs);
    let zp = pair_roots(&digital.z)?;
    let pp = pair_roots(&digital.p)?;
    if zp.len() != pp.len() {
        return Err(Error::FilterDesign("zero and pole counts differ".into()));
    }
    let mut sections: Vec<Sos> = zp
        .into_iter()
        .zip(pp)
        .map(|(z, p)| Sos {
            b: quadratic(z),
            a: quadratic(p),
        })
        .collect();
    for v in sections[0].b.iter_mut() {
        *v *= digital.k;
    }
    let spec = FilterSpec {
        kind,
        order,
        low_hz,
        high_hz,
        sample_rate_hz: fs,
        sections,
    };
    if spec.max_pole_radius() >= 1.0 {
        return Err(Error::FilterDesign("designed filter is unstable".into()));
    }
    Ok(spec)
}

/// Causal filtering of one signal through the cascade (transposed direct
/// form II, zero initial state).
pub fn filter_signal(spec: &FilterSpec, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in &spec.sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let input = *v;
            let out = s.b[0] * input + z1;
            z1 = s.b[1] * input - s.a[1] * out + z2;
            z2 = s.b[2] * input - s.a[2] * out;
            *v = out;
        }
    }
    y
}

/// Filters every row of a `(channels, samples)` array.
pub fn apply_filter(x: &Tensor, spec: &FilterSpec) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("apply_filter expects (channels, samples), got {s:?}")));
    }
    let t = s[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(t) {
        out.extend(filter_signal(spec, row));
    }
    Tensor::new(s.to_vec(), out)
}
