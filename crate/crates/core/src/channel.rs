//! Near-field steering vectors, scene generation and pilot observations.
//!
//! Arrays are uniform linear with element index
//! `m in [-ceil((size-1)/2), floor((size-1)/2)]`. Under the Fresnel expansion
//! the path-length difference of element `m` relative to the reference is
//! `-m*delta*sin(theta) + m^2*delta^2*cos^2(theta)/(2d)`, so a steering vector
//! depends on the pair `(sin(theta), cos^2(theta)/(2d))` only. The second
//! coordinate is called the curvature here and is zero in the far field.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ComplexMatrix, C64, ZERO};
use crate::math;
use crate::rng;
use crate::SPEED_OF_LIGHT;

/// Physical and dimensional parameters of the uplink training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// BS antennas.
    pub n: usize,
    /// RIS elements.
    pub m: usize,
    /// Users.
    pub k: usize,
    /// Pilot slots.
    pub tau: usize,
    /// Carrier frequency (Hz).
    pub f_c: f64,
    /// Element spacing (m); half a wavelength when absent.
    #[serde(default)]
    pub delta: Option<f64>,
    pub l_br: usize,
    pub l_ru: usize,
    /// Transmit power (linear).
    pub p: f64,
    /// Noise variance (linear).
    pub sigma2: f64,
    /// Angle range (rad) shared by every path.
    pub angle_range: (f64, f64),
    /// BS-side distance range `r` (m).
    pub r_range: (f64, f64),
    /// RIS-side departure distance range `s` (m).
    pub s_range: (f64, f64),
    /// User-to-RIS distance range `d` (m).
    pub d_range: (f64, f64),
    /// Smallest admissible distance (m).
    pub d_min: f64,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            n: 32,
            m: 64,
            k: 1,
            tau: 30,
            f_c: 30e9,
            delta: None,
            l_br: 3,
            l_ru: 3,
            p: 1.0,
            sigma2: 1.0,
            angle_range: (-PI / 3.0, PI / 3.0),
            r_range: (5.0, 30.0),
            s_range: (5.0, 30.0),
            d_range: (1.0, 20.0),
            d_min: 0.5,
            seed: 0,
        }
    }
}

impl SystemConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f_c
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength()
    }

    pub fn spacing(&self) -> f64 {
        self.delta.unwrap_or(self.wavelength() / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("N", self.n),
            ("M", self.m),
            ("K", self.k),
            ("tau", self.tau),
            ("L_BR", self.l_br),
            ("L_RU", self.l_ru),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.f_c > 0.0) || !(self.spacing() > 0.0) || !(self.p > 0.0) {
            return Err(Error::Config("f_c, delta and p must be positive".into()));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::Config("sigma2 must be non-negative".into()));
        }
        let (alo, ahi) = self.angle_range;
        if !(alo < ahi) || alo <= -FRAC_PI_2 || ahi >= FRAC_PI_2 {
            return Err(Error::Config(format!("angle range ({alo}, {ahi}) must be a non-empty subset of (-pi/2, pi/2)")));
        }
        if !(self.d_min > 0.0) {
            return Err(Error::Config("d_min must be positive".into()));
        }
        for (name, (lo, hi)) in [("r", self.r_range), ("s", self.s_range), ("d", self.d_range)] {
            if !(lo < hi) || !(hi > self.d_min) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty or below d_min")));
            }
        }
        Ok(())
    }
}

/// One propagation path: angle, distance (`f64::INFINITY` for far field) and
/// complex gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub angle: f64,
    pub distance: f64,
    pub gain: C64,
}

/// A BS-RIS path: arrival `(theta, r, rho)` at the BS and departure
/// `(phi, s)` at the RIS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsRisPath {
    pub bs: PathParams,
    pub ris_angle: f64,
    pub ris_distance: f64,
}

/// Drawn path parameters with the assembled channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRealization {
    pub bs_ris_paths: Vec<BsRisPath>,
    /// `L_RU` paths per user.
    pub ris_user_paths: Vec<Vec<PathParams>>,
    /// RIS-to-BS channel, `N x M`, shared by every user.
    pub h_bs: ComplexMatrix,
    /// User-to-RIS channel per user, length `M`.
    pub h: Vec<Vec<C64>>,
    /// Cascaded channel per user, `N x M`.
    pub g: Vec<ComplexMatrix>,
}

/// RIS phase-shift matrix `E` with a noisy observation `Y = sqrt(p) G E + N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotBlock {
    pub e: ComplexMatrix,
    pub y: ComplexMatrix,
    pub sigma2: f64,
}

/// `1/(2d)`-weighted curvature `cos^2(angle)/(2 distance)`; zero for infinite
/// distance.
pub fn curvature(angle: f64, distance: f64) -> f64 {
    if distance.is_infinite() {
        0.0
    } else {
        let c = math::cos(angle);
        c * c / (2.0 * distance)
    }
}

/// Signed element index of position `i` in `0..size`.
#[inline]
pub fn element_index(size: usize, i: usize) -> f64 {
    // ceil((size-1)/2) == size/2
    i as f64 - (size / 2) as f64
}

/// Steering vector parameterised directly by `(sin, curvature)`, scaled to
/// unit norm. Differences of such parameters describe products
/// `diag(a_1) conj(a_2)`.
pub fn steering_from_params(size: usize, sin: f64, curv: f64, k: f64, delta: f64) -> Vec<C64> {
    let scale = 1.0 / math::sqrt(size as f64);
    (0..size)
        .map(|i| {
            let m = element_index(size, i);
            let path = -m * delta * sin + m * m * delta * delta * curv;
            let (s, c) = math::sincos(-k * path);
            C64::new(c * scale, s * scale)
        })
        .collect()
}

fn check_path(angle: f64, distance: f64) -> Result<()> {
    if !(angle.abs() < FRAC_PI_2) {
        return Err(Error::Argument(format!("angle {angle} outside (-pi/2, pi/2)")));
    }
    if !(distance > 0.0) {
        return Err(Error::Argument(format!("distance {distance} must be positive or infinite")));
    }
    Ok(())
}

/// Unit-norm near-field steering vector of a ULA with `size` elements.
pub fn steering_vector(size: usize, angle: f64, distance: f64, k: f64, delta: f64) -> Result<Vec<C64>> {
    check_path(angle, distance)?;
    Ok(steering_from_params(
        size,
        math::sin(angle),
        curvature(angle, distance),
        k,
        delta,
    ))
}

/// Assembles `H = A_N diag(rho) A_M^H`, `h = A_M beta` and `G = H diag(h)`.
pub fn build_channels(
    config: &SystemConfig,
    bs_ris_paths: &[BsRisPath],
    ris_user_paths: &[Vec<PathParams>],
) -> Result<SceneRealization> {
    let (n, m) = (config.n, config.m);
    let (k, delta) = (config.wavenumber(), config.spacing());
    if bs_ris_paths.len() != config.l_br {
        return Err(Error::shape("build_channels", format!("{} BS-RIS paths, L_BR = {}", bs_ris_paths.len(), config.l_br)));
    }
    let mut h_bs = ComplexMatrix::zeros(n, m);
    for path in bs_ris_paths {
        let a_n = steering_vector(n, path.bs.angle, path.bs.distance, k, delta)?;
        let a_m = steering_vector(m, path.ris_angle, path.ris_distance, k, delta)?;
        for (r, ar) in a_n.iter().enumerate() {
            let w = ar * path.bs.gain;
            for (c, ac) in a_m.iter().enumerate() {
                let v = h_bs.get(r, c) + w * ac.conj();
                h_bs.set(r, c, v);
            }
        }
    }
    let mut hs = Vec::with_capacity(ris_user_paths.len());
    let mut gs = Vec::with_capacity(ris_user_paths.len());
    for paths in ris_user_paths {
        if paths.len() != config.l_ru {
            return Err(Error::shape("build_channels", format!("{} RIS-user paths, L_RU = {}", paths.len(), config.l_ru)));
        }
        let mut h = vec![ZERO; m];
        for p in paths {
            let a = steering_vector(m, p.angle, p.distance, k, delta)?;
            for (hv, av) in h.iter_mut().zip(&a) {
                *hv += av * p.gain;
            }
        }
        gs.push(h_bs.mul_diag_right(&h)?);
        hs.push(h);
    }
    Ok(SceneRealization {
        bs_ris_paths: bs_ris_paths.to_vec(),
        ris_user_paths: ris_user_paths.to_vec(),
        h_bs,
        h: hs,
        g: gs,
    })
}

fn draw_distance<R: Rng + ?Sized>(r: &mut R, range: (f64, f64), d_min: f64) -> f64 {
    rng::uniform(r, range.0, range.1).max(d_min)
}

/// Draws path parameters from the configured priors and assembles the channels.
pub fn draw_paths<R: Rng + ?Sized>(config: &SystemConfig, r: &mut R) -> Result<(Vec<BsRisPath>, Vec<Vec<PathParams>>)> {
    config.validate()?;
    let (alo, ahi) = config.angle_range;
    let bs: Vec<BsRisPath> = (0..config.l_br)
        .map(|_| {
            let theta = rng::uniform(r, alo, ahi);
            let rr = draw_distance(r, config.r_range, config.d_min);
            let phi = rng::uniform(r, alo, ahi);
            let s = draw_distance(r, config.s_range, config.d_min);
            let rho = rng::complex_normal(r, 1.0);
            BsRisPath {
                bs: PathParams {
                    angle: theta,
                    distance: rr,
                    gain: rho,
                },
                ris_angle: phi,
                ris_distance: s,
            }
        })
        .collect();
    let users = (0..config.k)
        .map(|_| {
            (0..config.l_ru)
                .map(|_| {
                    let angle = rng::uniform(r, alo, ahi);
                    let distance = draw_distance(r, config.d_range, config.d_min);
                    PathParams {
                        angle,
                        distance,
                        gain: rng::complex_normal(r, 1.0),
                    }
                })
                .collect()
        })
        .collect();
    Ok((bs, users))
}

pub fn draw_scene<R: Rng + ?Sized>(config: &SystemConfig, r: &mut R) -> Result<SceneRealization> {
    let (bs, users) = draw_paths(config, r)?;
    build_channels(config, &bs, &users)
}

/// Design of the RIS phase-shift matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseDesign {
    /// I.i.d. uniform phases.
    #[default]
    Random,
    /// `E[m,t] = exp(-j 2 pi m t / M)`.
    Dft,
}

/// `M x tau` unit-modulus phase-shift matrix.
pub fn make_phase_matrix<R: Rng + ?Sized>(m: usize, tau: usize, design: PhaseDesign, r: &mut R) -> Result<ComplexMatrix> {
    if m == 0 || tau == 0 {
        return Err(Error::Argument(format!("phase matrix needs M, tau >= 1, got {m} x {tau}")));
    }
    Ok(match design {
        PhaseDesign::Random => ComplexMatrix::from_fn(m, tau, |_, _| {
            let (s, c) = math::sincos(2.0 * PI * r.random::<f64>());
            C64::new(c, s)
        }),
        PhaseDesign::Dft => ComplexMatrix::from_fn(m, tau, |i, t| {
            let (s, c) = math::sincos(-2.0 * PI * ((i * t) % m) as f64 / m as f64);
            C64::new(c, s)
        }),
    })
}

/// `Y = sqrt(p) G E + N`, `N` circular Gaussian with variance `sigma2`.
pub fn simulate_pilots<R: Rng + ?Sized>(
    g: &ComplexMatrix,
    e: &ComplexMatrix,
    p: f64,
    sigma2: f64,
    r: &mut R,
) -> Result<PilotBlock> {
    if g.cols() != e.rows() {
        return Err(Error::shape("simulate_pilots", format!("G {:?} vs E {:?}", g.shape(), e.shape())));
    }
    if !(sigma2 >= 0.0) || !(p > 0.0) {
        return Err(Error::Argument(format!("need p > 0 and sigma2 >= 0, got {p}, {sigma2}")));
    }
    let mut y = g.matmul(e)?.scale_real(math::sqrt(p));
    if sigma2 > 0.0 {
        for v in y.data_mut() {
            *v += rng::complex_normal(r, sigma2);
        }
    }
    Ok(PilotBlock {
        e: e.clone(),
        y,
        sigma2,
    })
}

/// Receive-side SNR `p ||G E||^2 / (N tau sigma2)` in linear units.
pub fn receive_snr(g: &ComplexMatrix, e: &ComplexMatrix, p: f64, sigma2: f64) -> Result<f64> {
    let ge = g.matmul(e)?;
    Ok(p * ge.frobenius_sqr() / ((g.rows() * e.cols()) as f64 * sigma2))
}

/// Noise variance that puts the receive-side SNR at `snr_db`.
pub fn noise_variance_for_snr(g: &ComplexMatrix, e: &ComplexMatrix, p: f64, snr_db: f64) -> Result<f64> {
    let ge = g.matmul(e)?;
    let signal = p * ge.frobenius_sqr() / ((g.rows() * e.cols()) as f64);
    Ok(signal / db_to_linear(snr_db))
}

pub fn db_to_linear(db: f64) -> f64 {
    libm::pow(10.0, db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * math::log10(x)
}
