//! Variance-stabilising transform and the Hopf–Cole map.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fields::{FieldKind, FieldSample};
use crate::model::{Profile, Sigma};
use crate::solver::Trajectory;

/// Smallest |σ| tolerated on an integration interval.
pub const POLARITY_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilizedField {
    pub base: FieldSample,
    pub transformed: FieldSample,
    /// Smallest |σ| met on any integration interval.
    pub sigma_floor: f64,
}

/// X_t(x) = ∫_{u_t(0)}^{u_t(x)} dy/σ(y) at every grid point.
pub fn stabilize(field: &FieldSample, sigma: &Sigma) -> Result<StabilizedField> {
    let origin = field.at_origin();
    let mut floor = f64::INFINITY;
    let mut values = Vec::with_capacity(field.values.len());
    for (k, &u) in field.values.iter().enumerate() {
        let m = sigma.min_abs_on(origin, u);
        if !(m >= POLARITY_MARGIN) {
            return Err(Error::PolarityViolated { index: k });
        }
        floor = floor.min(m);
        values.push(sigma.inverse_integral(origin, u)?);
    }
    Ok(StabilizedField {
        base: field.clone(),
        transformed: FieldSample::new(field.grid, field.time_label, values, FieldKind::X)?,
        sigma_floor: floor,
    })
}

/// h_t = log u_t for every snapshot of a parabolic Anderson trajectory.
pub fn hopf_cole(traj: &Trajectory) -> Result<Vec<StabilizedField>> {
    let m = &traj.model;
    if m.params.alpha() != 2.0 || !matches!(m.sigma, Sigma::Identity) {
        return Err(invalid("Hopf–Cole needs alpha = 2 and sigma(u) = u"));
    }
    let positive = match m.u0 {
        Profile::Constant(c) => c > 0.0,
        Profile::Bump { base, height, .. } => base > 0.0 && base + height > 0.0,
        Profile::Cosine { mean, amplitude, .. } => mean - amplitude.abs() > 0.0,
    };
    if !positive {
        return Err(invalid("initial profile must be bounded away from zero"));
    }
    traj.snapshots
        .iter()
        .map(|snap| {
            let (idx, min) = snap
                .values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bm), (i, &v)| if v < bm { (i, v) } else { (bi, bm) });
            if !(min > 0.0) {
                return Err(Error::NonPositive { index: idx, value: min });
            }
            let h: Vec<f64> = snap.values.iter().map(|v| v.ln()).collect();
            Ok(StabilizedField {
                base: snap.clone(),
                transformed: FieldSample::new(snap.grid, snap.time_label, h, FieldKind::H)?,
                sigma_floor: min,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::AlphaParams;
    use crate::grid::GridSpec;
    use crate::model::ModelSpec;
    use crate::noise::make_noise;
    use crate::solver::solve;

    fn field(values: Vec<f64>) -> FieldSample {
        let g = GridSpec::new(1.0, values.len(), 1.0, 1).unwrap();
        FieldSample::new(g, 1.0, values, FieldKind::U).unwrap()
    }

    #[test]
    fn identity_sigma_gives_log_ratio() {
        let u = field((0..16).map(|k| 1.0 + 0.1 * k as f64).collect());
        let x = stabilize(&u, &Sigma::Identity).unwrap();
        for k in 0..16 {
            let expect = u.values[k].ln() - u.at_origin().ln();
            assert!((x.transformed.values[k] - expect).abs() < 1e-14);
        }
        assert_eq!(x.transformed.at_origin(), 0.0);
        assert_eq!(x.transformed.kind, FieldKind::X);
    }

    #[test]
    fn constant_sigma_rescales() {
        let u = field((0..8).map(|k| (k as f64).sin()).collect());
        let x = stabilize(&u, &Sigma::Constant(2.0)).unwrap();
        for k in 0..8 {
            assert!((x.transformed.values[k] - (u.values[k] - u.at_origin()) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_crossing_is_refused_with_index() {
        let mut v = vec![1.0; 8];
        v[3] = -0.5;
        match stabilize(&field(v), &Sigma::Identity) {
            Err(Error::PolarityViolated { index }) => assert_eq!(index, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn monotone_sigma_keeps_order() {
        let u = field(vec![0.3, -1.2, 2.5, 0.0, 1.1, -0.4, 0.9, 3.3]);
        let x = stabilize(&u, &Sigma::BoundedSmooth).unwrap();
        let mut pairs: Vec<(f64, f64)> = u.values.iter().copied().zip(x.transformed.values.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[0].1 < w[1].1));
    }

    #[test]
    fn hopf_cole_of_pam() {
        let p = AlphaParams::new(2.0).unwrap();
        let g = GridSpec::from_steps(1.0 / 16.0, 64, 1.0 / 256.0, 16).unwrap();
        let model = ModelSpec::new(p, Sigma::Identity, Profile::Constant(1.0), g.t_max).unwrap();
        let traj = solve(&model, &make_noise(g, 8).unwrap(), &[0.0, g.t_max]).unwrap();
        let h = hopf_cole(&traj).unwrap();
        assert!(h[0].transformed.values.iter().all(|&v| v == 0.0));
        assert_eq!(h[1].transformed.kind, FieldKind::H);
        for (a, b) in h[1].base.values.iter().zip(&h[1].transformed.values) {
            assert!((a.ln() - b).abs() < 1e-15);
        }
        let wrong = ModelSpec::new(p, Sigma::BoundedSmooth, Profile::Constant(1.0), g.t_max).unwrap();
        let traj = solve(&wrong, &make_noise(g, 8).unwrap(), &[g.t_max]).unwrap();
        assert!(hopf_cole(&traj).is_err());
    }
}
