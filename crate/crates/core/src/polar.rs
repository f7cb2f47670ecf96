//! Polar-domain grids and dictionaries.
//!
//! A grid samples angles uniformly in `sin(theta)` and distances on rings
//! `r_s = Z * (1 - sin^2 theta) / s`, `s = 0` being the far-field ring. On
//! ring `s` the curvature `cos^2(theta)/(2r)` equals `s/(2Z)` for every angle.
//!
//! Entries are ordered ring-major: all far-field angles in ascending `sin`,
//! then ring 1, and so on.
//!
//! The cascaded dictionary collects the distinct products
//! `diag(a(phi_l, s_l)) conj(a(phi_p, d_p))`. Each product is a steering
//! vector with parameters `(sin_l - sin_p, c_l - c_p)` scaled by `1/sqrt(M)`,
//! so columns are keyed by that pair.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channel::{curvature, steering_from_params, steering_vector, SceneRealization};
use crate::error::{Error, Result};
use crate::linalg::{inner, lstsq, norm, ComplexMatrix, C64, ZERO};
use crate::math;

/// Sampling parameters of a polar grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub angle_count: usize,
    /// Range of `sin(theta)`; samples sit at bin centres.
    pub sin_range: (f64, f64),
    /// Coherence budget in the distance-sampling constant.
    pub beta: f64,
    /// Rings closer than this are dropped (m).
    pub min_distance: f64,
    /// Cap on near-field rings per angle; `Some(0)` keeps only the far field.
    #[serde(default)]
    pub max_rings: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            angle_count: 64,
            sin_range: (-1.0, 1.0),
            beta: 1.2,
            min_distance: 0.5,
            max_rings: None,
        }
    }
}

impl GridConfig {
    /// Far-field, full-range grid with `angle_count` angles.
    pub fn far_field(angle_count: usize) -> Self {
        Self {
            angle_count,
            max_rings: Some(0),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub angle: f64,
    /// Metres, `f64::INFINITY` on ring 0.
    pub distance: f64,
    pub sin: f64,
    pub ring: usize,
}

impl GridPoint {
    pub fn curvature(&self) -> f64 {
        curvature(self.angle, self.distance)
    }

    pub fn inv_distance(&self) -> f64 {
        if self.distance.is_infinite() {
            0.0
        } else {
            1.0 / self.distance
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub entries: Vec<GridPoint>,
    pub angle_count: usize,
    /// Largest ring count (including the far-field ring) over all angles.
    pub rings_per_angle: usize,
    pub z_delta: f64,
}

impl PolarGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry nearest to `(sin(angle), 1/distance)`.
    pub fn nearest(&self, angle: f64, distance: f64) -> usize {
        let s = math::sin(angle);
        let inv = if distance.is_infinite() { 0.0 } else { 1.0 / distance };
        let mut best = (f64::INFINITY, 0);
        for (i, e) in self.entries.iter().enumerate() {
            let ds = e.sin - s;
            let di = e.inv_distance() - inv;
            let d = ds * ds + di * di;
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// `Z = (size * delta)^2 / (2 lambda beta^2)`.
pub fn distance_constant(size: usize, lambda: f64, delta: f64, beta: f64) -> f64 {
    let aperture = size as f64 * delta;
    aperture * aperture / (2.0 * lambda * beta * beta)
}

/// Number of rings (including the far-field ring) kept at `sin`.
pub fn ring_count(z: f64, sin: f64, cfg: &GridConfig) -> usize {
    let cos2 = 1.0 - sin * sin;
    let mut s = 1;
    loop {
        if cfg.max_rings.is_some_and(|m| s > m) || z * cos2 / (s as f64) < cfg.min_distance {
            return s;
        }
        s += 1;
    }
}

pub fn sample_polar_grid(size: usize, lambda: f64, delta: f64, cfg: &GridConfig) -> Result<PolarGrid> {
    let (lo, hi) = cfg.sin_range;
    if cfg.angle_count == 0 || !(cfg.beta > 0.0) || !(lo < hi) || lo < -1.0 || hi > 1.0 || !(cfg.min_distance > 0.0) {
        return Err(Error::Argument(format!("invalid grid configuration {cfg:?}")));
    }
    let z = distance_constant(size, lambda, delta, cfg.beta);
    let a = cfg.angle_count;
    let sins: Vec<f64> = (0..a)
        .map(|i| lo + (i as f64 + 0.5) * (hi - lo) / a as f64)
        .collect();
    let rings: Vec<usize> = sins.iter().map(|&s| ring_count(z, s, cfg)).collect();
    let max_rings = rings.iter().copied().max().unwrap_or(1);
    let mut entries = Vec::new();
    for ring in 0..max_rings {
        for (i, &s) in sins.iter().enumerate() {
            if ring >= rings[i] {
                continue;
            }
            let distance = if ring == 0 {
                f64::INFINITY
            } else {
                z * (1.0 - s * s) / ring as f64
            };
            entries.push(GridPoint {
                angle: math::asin(s),
                distance,
                sin: s,
                ring,
            });
        }
    }
    Ok(PolarGrid {
        entries,
        angle_count: a,
        rings_per_angle: max_rings,
        z_delta: z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarDictionary {
    /// `size x G`, unit-norm columns.
    pub f: ComplexMatrix,
    pub grid: PolarGrid,
    pub size: usize,
    pub k: f64,
    pub delta: f64,
}

pub fn build_dictionary(grid: &PolarGrid, size: usize, k: f64, delta: f64) -> Result<PolarDictionary> {
    let cols: Vec<Vec<C64>> = grid
        .entries
        .iter()
        .map(|e| steering_vector(size, e.angle, e.distance, k, delta))
        .collect::<Result<_>>()?;
    Ok(PolarDictionary {
        f: ComplexMatrix::from_columns(size, &cols)?,
        grid: grid.clone(),
        size,
        k,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadedDictionary {
    /// `M x M_G'`, unit-norm columns.
    pub f: ComplexMatrix,
    /// `(delta_sin, delta_curvature)` of each column.
    pub params: Vec<(f64, f64)>,
    /// Column id of pair `(l, p)` at `l * grid_size + p`.
    pub pair_index: Vec<usize>,
    pub grid_size: usize,
    /// The raw product `diag(a_l) conj(a_p)` equals `scale` times its column.
    pub scale: f64,
    pub tol: f64,
}

impl CascadedDictionary {
    pub fn len(&self) -> usize {
        self.f.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.f.cols() == 0
    }

    pub fn column_of(&self, l: usize, p: usize) -> usize {
        self.pair_index[l * self.grid_size + p]
    }
}

fn quantize(x: f64, tol: f64) -> i64 {
    math::round(x / tol) as i64
}

pub fn build_cascaded_dictionary(fm: &PolarDictionary, tol: f64) -> Result<CascadedDictionary> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("dedup tolerance must be positive, got {tol}")));
    }
    let g = fm.grid.len();
    let m = fm.size;
    let params: Vec<(f64, f64)> = fm.grid.entries.iter().map(|e| (e.sin, e.curvature())).collect();
    // key -> lowest pair index
    let mut reps: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut keys = Vec::with_capacity(g * g);
    for l in 0..g {
        for p in 0..g {
            let ds = params[l].0 - params[p].0;
            let dc = params[l].1 - params[p].1;
            let key = (quantize(dc, tol), quantize(ds, tol));
            reps.entry(key).or_insert(l * g + p);
            keys.push(key);
        }
    }
    let root_m = math::sqrt(m as f64);
    let col_of: BTreeMap<(i64, i64), usize> = reps.keys().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut cols = Vec::with_capacity(reps.len());
    let mut col_params = Vec::with_capacity(reps.len());
    for &pair in reps.values() {
        let (l, p) = (pair / g, pair % g);
        let col: Vec<C64> = (0..m)
            .map(|i| fm.f.get(i, l) * fm.f.get(i, p).conj() * root_m)
            .collect();
        cols.push(col);
        col_params.push((params[l].0 - params[p].0, params[l].1 - params[p].1));
    }
    Ok(CascadedDictionary {
        f: ComplexMatrix::from_columns(m, &cols)?,
        params: col_params,
        pair_index: keys.iter().map(|k| col_of[k]).collect(),
        grid_size: g,
        scale: 1.0 / root_m,
        tol,
    })
}

/// Generalised steering vector for cascaded parameters, unit norm.
pub fn cascaded_atom(m: usize, params: (f64, f64), k: f64, delta: f64) -> Vec<C64> {
    steering_from_params(m, params.0, params.1, k, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceProfile {
    /// `max_{i != j} |f_i^H f_j|`.
    pub max: f64,
    pub mean: f64,
    /// Counts of off-diagonal coherences in `bins` equal bins over `[0, 1]`.
    pub histogram: Vec<usize>,
    /// True when some column was not unit norm and got normalised.
    pub renormalized: bool,
}

pub fn coherence_profile(f: &ComplexMatrix, bins: usize) -> CoherenceProfile {
    let bins = bins.max(1);
    let mut cols: Vec<Vec<C64>> = (0..f.cols()).map(|j| f.col(j)).collect();
    let mut renormalized = false;
    for c in &mut cols {
        let n = norm(c);
        if (n - 1.0).abs() > 1e-9 {
            renormalized = true;
            if n > 0.0 {
                c.iter_mut().for_each(|z| *z /= n);
            }
        }
    }
    let mut hist = vec![0; bins];
    let (mut max, mut sum, mut count) = (0.0_f64, 0.0, 0usize);
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            let mu = inner(&cols[i], &cols[j]).norm().min(1.0);
            max = max.max(mu);
            sum += mu;
            count += 1;
            hist[((mu * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    CoherenceProfile {
        max,
        mean: if count > 0 { sum / count as f64 } else { 0.0 },
        histogram: hist,
        renormalized,
    }
}

/// `|F^H v|` per column.
pub fn correlation_profile(f: &ComplexMatrix, v: &[C64]) -> Result<Vec<f64>> {
    Ok(f.h_mul_vec(v)?.iter().map(|z| z.norm()).collect())
}

/// Number of distinct peaks of `profile` within `db` decibels of its maximum.
///
/// Candidates are merged when their parameters lie within `radius` of each
/// other in both coordinates; each surviving cluster counts once.
pub fn count_peaks(profile: &[f64], params: &[(f64, f64)], db: f64, radius: (f64, f64)) -> usize {
    let max = profile.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    let floor = max * libm::pow(10.0, -db / 20.0);
    let mut cand: Vec<usize> = (0..profile.len()).filter(|&i| profile[i] >= floor).collect();
    cand.sort_by(|&a, &b| profile[b].total_cmp(&profile[a]).then(a.cmp(&b)));
    let mut heads: Vec<usize> = Vec::new();
    for c in cand {
        let close = heads.iter().any(|&h| {
            (params[h].0 - params[c].0).abs() <= radius.0 && (params[h].1 - params[c].1).abs() <= radius.1
        });
        if !close {
            heads.push(c);
        }
    }
    heads.len()
}

/// Grid coding of a scene with least-squares gains on the selected atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTruth {
    /// Nearest `F_N` entry of each BS-RIS path.
    pub bs_index: Vec<usize>,
    /// One nonzero per column of `X_N`: `(row, f_row^H a_N)`.
    pub x_n: Vec<(usize, C64)>,
    /// Nearest `F_M` entries of the RIS departure of each BS-RIS path.
    pub ris_depart_index: Vec<usize>,
    /// Nearest `F_M` entries of each RIS-user path.
    pub ris_arrive_index: Vec<usize>,
    /// Nonzeros `(row, column, value)` of `Lambda`, with
    /// `G ~ F_N Lambda (scale * F~)^H`.
    pub lambda: Vec<(usize, usize, C64)>,
    /// Per BS-RIS path, nonzeros of `b_l` with `h_l ~ scale * F~ b_l`.
    pub b: Vec<Vec<(usize, C64)>>,
    pub report: MismatchReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    /// `||F_N X_N - A_N||_F / ||A_N||_F`.
    pub a_n_residual: f64,
    /// `||G - F_N Lambda (scale F~)^H||_F / ||G||_F`.
    pub g_residual: f64,
    /// Largest relative residual of the `h_l` codings.
    pub h_residual: f64,
}

/// `h_l = diag(conj(h)) a_M(phi_l, s_l) conj(rho_l)` for every BS-RIS path.
pub fn stage2_targets(scene: &SceneRealization, user: usize, k: f64, delta: f64) -> Result<Vec<Vec<C64>>> {
    let h = &scene.h[user];
    let m = h.len();
    scene
        .bs_ris_paths
        .iter()
        .map(|p| {
            let a = steering_vector(m, p.ris_angle, p.ris_distance, k, delta)?;
            Ok(a.iter().zip(h).map(|(av, hv)| hv.conj() * av * p.bs.gain.conj()).collect())
        })
        .collect()
}

pub fn encode_sparse_truth(
    scene: &SceneRealization,
    user: usize,
    fn_dict: &PolarDictionary,
    fm_dict: &PolarDictionary,
    casc: &CascadedDictionary,
) -> Result<SparseTruth> {
    let g = scene
        .g
        .get(user)
        .ok_or_else(|| Error::Argument(format!("no user {user}")))?;
    let (n, m) = g.shape();
    if fn_dict.size != n || fm_dict.size != m || casc.f.rows() != m || casc.grid_size != fm_dict.grid.len() {
        return Err(Error::shape("encode_sparse_truth", "dictionaries do not match the scene"));
    }
    let (k, delta) = (fn_dict.k, fn_dict.delta);

    let mut bs_index = Vec::new();
    let mut x_n = Vec::new();
    let mut ris_depart_index = Vec::new();
    let (mut an_err, mut an_norm) = (0.0, 0.0);
    for p in &scene.bs_ris_paths {
        let i = fn_dict.grid.nearest(p.bs.angle, p.bs.distance);
        let a = steering_vector(n, p.bs.angle, p.bs.distance, k, delta)?;
        let f = fn_dict.f.col(i);
        let v = inner(&f, &a);
        for (fv, av) in f.iter().zip(&a) {
            an_err += (fv * v - av).norm_sqr();
        }
        an_norm += crate::linalg::norm_sqr(&a);
        bs_index.push(i);
        x_n.push((i, v));
        ris_depart_index.push(fm_dict.grid.nearest(p.ris_angle, p.ris_distance));
    }
    let ris_arrive_index: Vec<usize> = scene.ris_user_paths[user]
        .iter()
        .map(|p| fm_dict.grid.nearest(p.angle, p.distance))
        .collect();

    // Lambda by least squares on the distinct rank-one atoms.
    let mut atoms_ij: Vec<(usize, usize)> = Vec::new();
    for (l, &i) in bs_index.iter().enumerate() {
        for &pa in &ris_arrive_index {
            let j = casc.column_of(ris_depart_index[l], pa);
            if !atoms_ij.contains(&(i, j)) {
                atoms_ij.push((i, j));
            }
        }
    }
    let gvec = g.data();
    let atoms: Vec<Vec<C64>> = atoms_ij
        .iter()
        .map(|&(i, j)| {
            let mut a = Vec::with_capacity(n * m);
            for r in 0..n {
                let fr = fn_dict.f.get(r, i);
                for c in 0..m {
                    a.push(fr * (casc.f.get(c, j) * casc.scale).conj());
                }
            }
            a
        })
        .collect();
    let sol = lstsq(&atoms, gvec);
    let mut fit = vec![ZERO; n * m];
    for (a, c) in atoms.iter().zip(&sol.coef) {
        for (f, v) in fit.iter_mut().zip(a) {
            *f += c * v;
        }
    }
    let g_norm = g.frobenius();
    let g_res: f64 = fit.iter().zip(gvec).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
    let lambda: Vec<(usize, usize, C64)> = atoms_ij
        .iter()
        .zip(&sol.coef)
        .map(|(&(i, j), &c)| (i, j, c))
        .collect();

    // b_l by least squares of h_l on its selected cascaded columns.
    let targets = stage2_targets(scene, user, k, delta)?;
    let mut b = Vec::new();
    let mut h_res: f64 = 0.0;
    for (l, hl) in targets.iter().enumerate() {
        let mut cols: Vec<usize> = Vec::new();
        for &pa in &ris_arrive_index {
            let j = casc.column_of(ris_depart_index[l], pa);
            if !cols.contains(&j) {
                cols.push(j);
            }
        }
        let atoms: Vec<Vec<C64>> = cols
            .iter()
            .map(|&j| casc.f.col(j).iter().map(|z| z * casc.scale).collect())
            .collect();
        let sol = lstsq(&atoms, hl);
        let mut r = hl.clone();
        for (a, c) in atoms.iter().zip(&sol.coef) {
            for (rv, av) in r.iter_mut().zip(a) {
                *rv -= c * av;
            }
        }
        let hn = norm(hl);
        if hn > 0.0 {
            h_res = h_res.max(norm(&r) / hn);
        }
        b.push(cols.into_iter().zip(sol.coef).collect());
    }

    Ok(SparseTruth {
        bs_index,
        x_n,
        ris_depart_index,
        ris_arrive_index,
        lambda,
        b,
        report: MismatchReport {
            a_n_residual: if an_norm > 0.0 { math::sqrt(an_err / an_norm) } else { 0.0 },
            g_residual: if g_norm > 0.0 { math::sqrt(g_res) / g_norm } else { 0.0 },
            h_residual: h_res,
        },
    })
}
