use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{
    jacobian_row, residual, LocalizationResult, LocateConfig, PairEquation, SolveStatus, Weighting,
};
use crate::geo::{
    enu_basis, EcefPosition, GeoPosition, MAX_RECORD_ALTITUDE_M, MIN_RECORD_ALTITUDE_M,
    SPEED_OF_LIGHT_MPS,
};

/// Altitude pseudo-measurement: target geometric altitude and its sigma, m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AltitudeHint {
    pub altitude_m: f64,
    pub sigma_m: f64,
}

/// Covariance of the stacked equation errors in m².
fn error_covariance(eqs: &[PairEquation], weighting: Weighting) -> DMatrix<f64> {
    let n = eqs.len();
    let c2 = SPEED_OF_LIGHT_MPS * SPEED_OF_LIGHT_MPS;
    let mut cov = DMatrix::zeros(n, n);
    for (x, e) in eqs.iter().enumerate() {
        cov[(x, x)] = c2 * (e.offset_variance_s2 + e.toa_variance_i_s2 + e.toa_variance_j_s2);
        if weighting == Weighting::Diagonal {
            continue;
        }
        for (y, f) in eqs.iter().enumerate().skip(x + 1) {
            let mut v = 0.0;
            if e.pair.a == f.pair.a {
                v += e.toa_variance_i_s2;
            }
            if e.pair.b == f.pair.b {
                v += e.toa_variance_j_s2;
            }
            if e.pair.a == f.pair.b {
                v -= e.toa_variance_i_s2;
            }
            if e.pair.b == f.pair.a {
                v -= e.toa_variance_j_s2;
            }
            cov[(x, y)] = c2 * v;
            cov[(y, x)] = c2 * v;
        }
    }
    cov
}

/// Lower Cholesky factor of the error covariance, with a small ridge when
/// the equations are exactly dependent.
fn whitener(eqs: &[PairEquation], weighting: Weighting) -> Option<DMatrix<f64>> {
    let cov = error_covariance(eqs, weighting);
    let scale = cov.diagonal().max();
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    for ridge in [0.0, 1e-12, 1e-9, 1e-6] {
        let mut m = cov.clone();
        for k in 0..m.nrows() {
            m[(k, k)] += ridge * scale;
        }
        if let Some(ch) = m.cholesky() {
            return Some(ch.l());
        }
    }
    None
}

struct System<'a> {
    eqs: &'a [PairEquation],
    l: Option<DMatrix<f64>>,
    altitude: Option<AltitudeHint>,
}

impl System<'_> {
    /// Whitened residuals and Jacobian at `x` (dimensionless and 1/m).
    fn eval(&self, x: &Vector3<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let p = EcefPosition::from_vector(x);
        let n = self.eqs.len();
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, 3);
        for (k, e) in self.eqs.iter().enumerate() {
            r[k] = residual(e, &p) * SPEED_OF_LIGHT_MPS;
            let row = jacobian_row(e, &p).ok()? * SPEED_OF_LIGHT_MPS;
            j.row_mut(k).copy_from(&row.transpose());
        }
        let (mut r, mut j) = match &self.l {
            Some(l) => (l.solve_lower_triangular(&r)?, l.solve_lower_triangular(&j)?),
            None => {
                for k in 0..n {
                    let e = &self.eqs[k];
                    let sd = SPEED_OF_LIGHT_MPS
                        * (e.offset_variance_s2 + e.toa_variance_i_s2 + e.toa_variance_j_s2).sqrt();
                    let w = if sd > 0.0 { 1.0 / sd } else { 1.0 };
                    r[k] *= w;
                    j.row_mut(k).scale_mut(w);
                }
                (r, j)
            }
        };
        if let Some(h) = self.altitude {
            let g = p.to_geodetic().ok()?;
            let up = enu_basis(&g)[2];
            r = r.push((g.altitude_m - h.altitude_m) / h.sigma_m);
            j = j.insert_row(n, 0.0);
            j.row_mut(n).copy_from(&(up / h.sigma_m).transpose());
        }
        (r.iter().all(|v| v.is_finite()) && j.iter().all(|v| v.is_finite())).then_some((r, j))
    }
}

fn rank(j: &DMatrix<f64>, threshold: f64) -> usize {
    if j.nrows() == 0 {
        return 0;
    }
    let sv = j.clone().singular_values();
    let top = sv.max();
    if !(top > 0.0) {
        return 0;
    }
    sv.iter().filter(|s| **s > threshold * top).count()
}

struct Run {
    x: Vector3<f64>,
    iterations: u32,
    costs: Vec<f64>,
    finished: bool,
}

/// Levenberg-damped Gauss-Newton on the whitened system. Only steps that do
/// not increase the cost are taken.
fn iterate(sys: &System, guess: Vector3<f64>, cfg: &LocateConfig) -> Option<Run> {
    let mut x = guess;
    let (mut r, mut j) = sys.eval(&x)?;
    let mut cost = r.norm_squared();
    let mut run = Run {
        x,
        iterations: 0,
        costs: vec![cost],
        finished: false,
    };
    let mut lambda = 0.0;
    for it in 1..=cfg.max_iter {
        let h: Matrix3<f64> = (j.transpose() * &j).fixed_view::<3, 3>(0, 0).into_owned();
        let g: Vector3<f64> = (j.transpose() * &r).fixed_view::<3, 1>(0, 0).into_owned();
        let floor = 1e-12 * h.trace().max(f64::MIN_POSITIVE);
        let mut step = None;
        for _ in 0..40 {
            let mut a = h;
            for k in 0..3 {
                a[(k, k)] += lambda * (h[(k, k)] + floor);
            }
            let svd = a.svd(true, true);
            let eps = cfg.rank_threshold * svd.singular_values.max();
            let Ok(delta) = svd.solve(&(-g), eps) else {
                break;
            };
            if !delta.iter().all(|v| v.is_finite()) {
                break;
            }
            let xn = x + delta;
            match sys.eval(&xn) {
                Some((rn, jn)) if rn.norm_squared() <= cost => {
                    x = xn;
                    cost = rn.norm_squared();
                    r = rn;
                    j = jn;
                    lambda = if lambda > 1e-9 { lambda / 10.0 } else { 0.0 };
                    step = Some(delta.norm());
                    break;
                }
                _ => lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 },
            }
        }
        run.x = x;
        let Some(len) = step else {
            // No descent left: the current point is a minimum to working precision.
            run.finished = true;
            break;
        };
        run.iterations = it;
        run.costs.push(cost);
        if len < cfg.step_tolerance_m {
            run.finished = true;
            break;
        }
    }
    Some(run)
}

pub(crate) fn solve_once(
    eqs: &[PairEquation],
    guess: EcefPosition,
    cfg: &LocateConfig,
    altitude: Option<AltitudeHint>,
) -> (LocalizationResult, Vec<f64>) {
    let mut result = LocalizationResult {
        position: guess,
        geodetic: None,
        iterations: 0,
        final_residual_rms_s: f64::NAN,
        n_equations_used: eqs.len(),
        rank: 0,
        covariance_m2: [[f64::NAN; 3]; 3],
        status: SolveStatus::Diverged,
    };
    if eqs.is_empty() {
        result.status = SolveStatus::Underdetermined;
        return (result, Vec::new());
    }
    let sys = System {
        eqs,
        l: match cfg.weighting {
            Weighting::Correlated => whitener(eqs, cfg.weighting),
            Weighting::Diagonal => None,
        },
        altitude,
    };
    let Some(run) = iterate(&sys, guess.to_vector(), cfg) else {
        return (result, Vec::new());
    };
    let p = EcefPosition::from_vector(&run.x);
    result.position = p;
    result.iterations = run.iterations;
    let ss: f64 = eqs.iter().map(|e| residual(e, &p).powi(2)).sum();
    result.final_residual_rms_s = (ss / eqs.len() as f64).sqrt();
    let Some((_, j)) = sys.eval(&run.x) else {
        return (result, run.costs);
    };
    result.rank = rank(&j, cfg.rank_threshold);
    if result.rank == 3 {
        let info: Matrix3<f64> = (j.transpose() * &j).fixed_view::<3, 3>(0, 0).into_owned();
        if let Some(inv) = info.try_inverse() {
            for a in 0..3 {
                for b in 0..3 {
                    result.covariance_m2[a][b] = inv[(a, b)];
                }
            }
        }
    }
    result.geodetic = p.to_geodetic().ok();
    result.status = if !result.final_residual_rms_s.is_finite() || !p.is_finite() {
        SolveStatus::Diverged
    } else if result.rank < 3 {
        SolveStatus::Underdetermined
    } else if !run.finished || result.final_residual_rms_s > cfg.residual_ceiling_s {
        SolveStatus::Diverged
    } else {
        match result.geodetic {
            Some(g) if (MIN_RECORD_ALTITUDE_M..=MAX_RECORD_ALTITUDE_M).contains(&g.altitude_m) => {
                SolveStatus::Converged
            }
            _ => SolveStatus::Infeasible,
        }
    };
    (result, run.costs)
}

fn lifted(guess: EcefPosition, altitude_m: f64) -> Option<EcefPosition> {
    let g = guess.to_geodetic().ok()?;
    GeoPosition::new(g.latitude_deg, g.longitude_deg, altitude_m)
        .to_ecef()
        .ok()
}

pub(crate) fn solve_with_hint(
    eqs: &[PairEquation],
    guess: EcefPosition,
    cfg: &LocateConfig,
    altitude: Option<AltitudeHint>,
) -> (LocalizationResult, Vec<f64>) {
    let first = solve_once(eqs, guess, cfg, altitude);
    let retry = cfg.mirror_retry
        && matches!(
            first.0.status,
            SolveStatus::Diverged | SolveStatus::Infeasible
        );
    if !retry {
        return first;
    }
    let start = altitude.map_or(cfg.retry_altitude_m, |h| h.altitude_m);
    let Some(high) = lifted(guess, start) else {
        return first;
    };
    let mut second = solve_once(eqs, high, cfg, altitude);
    second.0.iterations += first.0.iterations;
    if second.0.status == SolveStatus::Converged {
        second
    } else {
        first
    }
}

/// Weighted least-squares position from pair equations.
///
/// On a failed first attempt the solve is repeated from the same horizontal
/// position raised to cruise altitude, which escapes the mirror solution
/// below a near-planar sensor layout.
pub fn solve_position(
    eqs: &[PairEquation],
    guess: EcefPosition,
    cfg: &LocateConfig,
) -> LocalizationResult {
    solve_with_hint(eqs, guess, cfg, None).0
}

/// [`solve_position`] without the retry, also returning the weighted cost
/// after every accepted step.
pub fn solve_position_traced(
    eqs: &[PairEquation],
    guess: EcefPosition,
    cfg: &LocateConfig,
) -> (LocalizationResult, Vec<f64>) {
    solve_once(eqs, guess, cfg, None)
}

/// Vertical dilution: vertical standard deviation over the mean equation
/// standard deviation.
pub(crate) fn vertical_dilution(result: &LocalizationResult, eqs: &[PairEquation]) -> f64 {
    let Some(g) = result.geodetic else {
        return f64::INFINITY;
    };
    let c = Matrix3::from_fn(|a, b| result.covariance_m2[a][b]);
    if !c.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let up = enu_basis(&g)[2];
    let var_up = up.dot(&(c * up));
    let mean_var: f64 = eqs
        .iter()
        .map(|e| {
            (e.offset_variance_s2 + e.toa_variance_i_s2 + e.toa_variance_j_s2)
                * SPEED_OF_LIGHT_MPS.powi(2)
        })
        .sum::<f64>()
        / eqs.len().max(1) as f64;
    (var_up / mean_var).sqrt()
}
