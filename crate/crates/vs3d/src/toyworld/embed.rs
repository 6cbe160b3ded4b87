//! Global condition embedding of shape parameters.
//!
//! Deliberately global (one vector per shape, not per cell): any parameter
//! difference perturbs the whole embedding, which is exactly the leakage
//! channel the calibration stage has to absorb.

use crate::error::Result;
use crate::flow::{Condition, ConditionRole, CONDITION_WIDTH};

use super::shape::ShapeParams;

// Fixed featurization weights, one row per embedding coordinate, columns
// (body_radius, hat_size, hat_hue, body_hue). The hat_size column is
// strictly positive in both tables so embedding distance is monotone in the
// hat-size gap over its [0, 0.25] range.
const LINEAR: [[f64; 4]; CONDITION_WIDTH] = [
    [1.0, 0.7, 0.0, 0.3],
    [-0.5, 0.9, 0.4, 0.0],
    [0.8, 0.6, -0.7, 0.2],
    [0.0, 1.1, 0.5, -0.6],
    [0.6, 0.8, 0.0, 0.9],
    [-0.9, 0.5, -0.3, 0.4],
    [0.3, 1.2, 0.8, 0.0],
    [0.2, 0.4, -0.5, -0.8],
];

const SINUSOID: [[f64; 4]; CONDITION_WIDTH] = [
    [0.4, 0.3, 0.6, 0.0],
    [0.0, 0.5, 0.0, 0.7],
    [0.5, 0.2, 0.3, 0.0],
    [0.3, 0.6, 0.0, 0.5],
    [0.0, 0.4, 0.8, 0.0],
    [0.6, 0.3, 0.0, 0.6],
    [0.0, 0.7, 0.4, 0.0],
    [0.7, 0.2, 0.0, 0.4],
];

/// Linear-plus-sinusoidal featurization of the four shape parameters into a
/// width-8 condition vector. Injective on any reasonable parameter grid.
pub fn embed_condition(params: &ShapeParams) -> Result<Condition> {
    params.validate()?;
    let f = [
        params.body_radius,
        params.hat_size,
        params.hat_hue,
        params.body_hue,
    ];
    let values = (0..CONDITION_WIDTH)
        .map(|i| {
            let lin: f64 = LINEAR[i].iter().zip(&f).map(|(w, x)| w * x).sum();
            let sinp: f64 = SINUSOID[i]
                .iter()
                .zip(&f)
                .map(|(w, x)| w * (std::f64::consts::PI * x).sin())
                .sum();
            lin + sinp
        })
        .collect();
    Condition::new(values, ConditionRole::Source)
}

/// The backbone's built-in null embedding φ0.
pub fn null_condition() -> Condition {
    Condition::null(CONDITION_WIDTH)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ShapeParams {
        ShapeParams {
            body_radius: 0.3,
            hat_size: 0.15,
            hat_hue: 0.25,
            body_hue: 0.75,
        }
    }

    fn dist(a: &Condition, b: &Condition) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn equal_params_equal_embeddings() {
        assert_eq!(
            embed_condition(&base()).unwrap().values(),
            embed_condition(&base()).unwrap().values()
        );
    }

    #[test]
    fn hat_size_touches_every_coordinate() {
        let a = embed_condition(&base()).unwrap();
        let mut p = base();
        p.hat_size = 0.22;
        let b = embed_condition(&p).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() > 1e-9, "hat column must be dense");
        }
    }

    #[test]
    fn distance_monotone_in_hat_gap() {
        // Evaluate the featurization on an ascending hat-size grid and check
        // the distance to the h=0.1 anchor grows with the gap.
        let mut anchor = base();
        anchor.hat_size = 0.1;
        let e0 = embed_condition(&anchor).unwrap();
        let mut prev = 0.0;
        for step in 1..=15 {
            let mut p = anchor;
            p.hat_size = 0.1 + step as f64 * 0.01;
            let d = dist(&e0, &embed_condition(&p).unwrap());
            assert!(d > prev, "distance must grow with |h1-h2|");
            prev = d;
        }
    }

    #[test]
    fn injective_on_a_sampled_grid() {
        let mut seen: Vec<(Condition, ShapeParams)> = Vec::new();
        for ir in 0..4 {
            for ih in 0..4 {
                for ihh in 0..3 {
                    for ibh in 0..3 {
                        let p = ShapeParams {
                            body_radius: 0.25 + 0.06 * ir as f64,
                            hat_size: if ih == 0 { 0.0 } else { 0.1 + 0.05 * (ih - 1) as f64 },
                            hat_hue: ihh as f64 / 3.0,
                            body_hue: ibh as f64 / 3.0,
                        };
                        let e = embed_condition(&p).unwrap();
                        for (other, q) in &seen {
                            assert!(
                                dist(&e, other) > 1e-6,
                                "embedding collision between {p:?} and {q:?}"
                            );
                        }
                        seen.push((e, p));
                    }
                }
            }
        }
    }

    #[test]
    fn null_is_distinct_from_any_sampled_embedding() {
        let phi = null_condition();
        let e = embed_condition(&base()).unwrap();
        assert!(dist(&phi, &e) > 0.1);
    }
}
