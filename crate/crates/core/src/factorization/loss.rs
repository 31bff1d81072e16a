use super::{dot, BprPairSet, FactorMatrix, Hyperparams};
use crate::ingest::Observation;

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of squared rating errors over `obs`.
pub fn pointwise_loss(u: &FactorMatrix, v: &FactorMatrix, obs: &[Observation]) -> f64 {
    obs.iter()
        .map(|o| {
            let e = o.rating - dot(u.row(o.user), v.row(o.item));
            e * e
        })
        .sum()
}

/// `sum log sigmoid(u.v_j - u.v_l)` over the pairs; always `<= 0`.
pub fn bpr_loss(u: &[f64], v: &FactorMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(j, l)| log_sigmoid(dot(u, v.row(j)) - dot(u, v.row(l))))
        .sum()
}

/// The full joint objective over all users.
pub fn objective(
    u: &FactorMatrix,
    v: &FactorMatrix,
    obs: &[Observation],
    pairs: &BprPairSet,
    hp: &Hyperparams,
) -> f64 {
    let bpr: f64 = (0..pairs.n_users())
        .map(|i| bpr_loss(u.row(i), v, pairs.of_user(i)))
        .sum();
    pointwise_loss(u, v, obs) - hp.lambda_b * bpr
        + hp.lambda_u * u.squared_norm()
        + hp.lambda_v * v.squared_norm()
}

pub struct Gradient {
    pub users: FactorMatrix,
    pub items: FactorMatrix,
}

/// Analytic gradient of [`objective`] with respect to every factor entry.
pub fn objective_gradient(
    u: &FactorMatrix,
    v: &FactorMatrix,
    obs: &[Observation],
    pairs: &BprPairSet,
    hp: &Hyperparams,
) -> Gradient {
    let d = u.dim();
    let mut gu = FactorMatrix::zeros(u.rows(), d);
    let mut gv = FactorMatrix::zeros(v.rows(), d);
    for o in obs {
        let e = o.rating - dot(u.row(o.user), v.row(o.item));
        for k in 0..d {
            gu.row_mut(o.user)[k] -= 2.0 * e * v.row(o.item)[k];
            gv.row_mut(o.item)[k] -= 2.0 * e * u.row(o.user)[k];
        }
    }
    for i in 0..pairs.n_users() {
        let ui = u.row(i);
        for &(j, l) in pairs.of_user(i) {
            let x = dot(ui, v.row(j)) - dot(ui, v.row(l));
            // d/dx of -lambda_b * log sigmoid(x)
            let g = -hp.lambda_b * sigmoid(-x);
            for k in 0..d {
                gu.row_mut(i)[k] += g * (v.row(j)[k] - v.row(l)[k]);
                gv.row_mut(j)[k] += g * ui[k];
                gv.row_mut(l)[k] -= g * ui[k];
            }
        }
    }
    for (g, x) in gu.as_mut_slice().iter_mut().zip(u.as_slice()) {
        *g += 2.0 * hp.lambda_u * x;
    }
    for (g, x) in gv.as_mut_slice().iter_mut().zip(v.as_slice()) {
        *g += 2.0 * hp.lambda_v * x;
    }
    Gradient {
        users: gu,
        items: gv,
    }
}
